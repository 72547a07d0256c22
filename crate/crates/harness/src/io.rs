//! File formats: PPM/PFM images, GMAP map snapshots, trajectories, and key=value specs.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use gsflow_core::{Gaussian3D, GaussianMap, PoseSE3, RgbImage, ScalarMap};
use nalgebra::{Quaternion, Translation3, UnitQuaternion, Vector3};

use crate::error::{HarnessError, Result};

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let mut out = Vec::with_capacity(img.len() * 3 + 32);
    write!(out, "P6\n{} {}\n255\n", img.width(), img.height())?;
    for p in img.data() {
        out.extend_from_slice(&[to_byte(p.x), to_byte(p.y), to_byte(p.z)]);
    }
    fs::write(path, out)?;
    Ok(())
}

fn header_tokens(bytes: &[u8], count: usize) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(HarnessError::Format("truncated header".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte separates the header from the data
    Ok((tokens, i + 1))
}

fn parse_dim(s: &str) -> Result<usize> {
    s.parse().map_err(|_| HarnessError::Format(format!("bad dimension {s:?}")))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path)?;
    let (tok, start) = header_tokens(&bytes, 4)?;
    if tok[0] != "P6" || tok[3] != "255" {
        return Err(HarnessError::Format("only 8-bit P6 PPM is supported".into()));
    }
    let (w, h) = (parse_dim(&tok[1])?, parse_dim(&tok[2])?);
    let data = bytes.get(start..start + w * h * 3).ok_or_else(|| HarnessError::Format("truncated PPM".into()))?;
    Ok(RgbImage::from_vec(
        w,
        h,
        data.chunks_exact(3).map(|c| Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64) / 255.0).collect(),
    ))
}

/// Single-channel little-endian PFM (scale −1), rows stored bottom to top.
pub fn write_pfm(path: &Path, map: &ScalarMap) -> Result<()> {
    let (w, h) = (map.width(), map.height());
    let mut out = Vec::with_capacity(w * h * 4 + 32);
    write!(out, "Pf\n{w} {h}\n-1\n")?;
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&(map[map.index(x, y)] as f32).to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<ScalarMap> {
    let bytes = fs::read(path)?;
    let (tok, start) = header_tokens(&bytes, 4)?;
    if tok[0] != "Pf" {
        return Err(HarnessError::Format("only single-channel PFM is supported".into()));
    }
    let (w, h) = (parse_dim(&tok[1])?, parse_dim(&tok[2])?);
    let scale: f64 = tok[3].parse().map_err(|_| HarnessError::Format("bad PFM scale".into()))?;
    let data = bytes.get(start..start + w * h * 4).ok_or_else(|| HarnessError::Format("truncated PFM".into()))?;
    let mut out = ScalarMap::filled(w, h, 0.0);
    for (k, c) in data.chunks_exact(4).enumerate() {
        let raw = [c[0], c[1], c[2], c[3]];
        let v = if scale < 0.0 { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (x, row) = (k % w, k / w);
        let idx = out.index(x, h - 1 - row);
        out[idx] = v as f64;
    }
    Ok(out)
}

const GMAP_MAGIC: &[u8; 4] = b"GMAP";

/// Map snapshot: magic, u32 count, then per Gaussian 14 little-endian f32 values
/// (mean xyz, quaternion wxyz, scale xyz, opacity, color rgb) and a u32 keyframe id.
pub fn write_gmap(path: &Path, map: &GaussianMap) -> Result<()> {
    let mut out = Vec::with_capacity(8 + map.len() * 60);
    out.extend_from_slice(GMAP_MAGIC);
    out.extend_from_slice(&(map.len() as u32).to_le_bytes());
    for g in map.iter() {
        let q = g.rotation;
        let vals = [
            g.mean.x, g.mean.y, g.mean.z, q.w, q.i, q.j, q.k, g.scale.x, g.scale.y, g.scale.z, g.opacity(), g.color.x,
            g.color.y, g.color.z,
        ];
        for v in vals {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend_from_slice(&g.keyframe_id.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_gmap(path: &Path) -> Result<GaussianMap> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != GMAP_MAGIC {
        return Err(HarnessError::Format("not a GMAP file".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let n = u32::from_le_bytes(word) as usize;
    let mut gs = Vec::with_capacity(n);
    for _ in 0..n {
        let mut v = [0.0f64; 14];
        for x in v.iter_mut() {
            r.read_exact(&mut word)?;
            *x = f32::from_le_bytes(word) as f64;
        }
        r.read_exact(&mut word)?;
        let id = u32::from_le_bytes(word);
        let q = Quaternion::new(v[3], v[4], v[5], v[6]);
        let g = Gaussian3D::new(
            Vector3::new(v[0], v[1], v[2]),
            q / q.norm(),
            Vector3::new(v[7], v[8], v[9]),
            v[10],
            Vector3::new(v[11], v[12], v[13]),
            id,
        )
        .map_err(|e| HarnessError::Format(format!("invalid Gaussian in map file: {e}")))?;
        gs.push(g);
    }
    Ok(GaussianMap::new(gs))
}

/// Trajectory lines `timestamp tx ty tz qx qy qz qw`: camera center and camera-to-world
/// orientation.
pub fn write_trajectory<W: Write>(mut out: W, poses: &[(f64, PoseSE3)]) -> Result<()> {
    for (t, p) in poses {
        let c = p.center();
        let q = p.orientation();
        writeln!(out, "{t:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}", c.x, c.y, c.z, q.i, q.j, q.k, q.w)?;
    }
    Ok(())
}

pub fn read_trajectory<R: Read>(input: R) -> Result<Vec<(f64, PoseSE3)>> {
    let mut out = Vec::new();
    for (n, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| HarnessError::Format(format!("trajectory line {}: {e}", n + 1)))?;
        if v.len() != 8 {
            return Err(HarnessError::Format(format!("trajectory line {}: expected 8 fields", n + 1)));
        }
        let q = UnitQuaternion::from_quaternion(Quaternion::new(v[7], v[4], v[5], v[6]));
        let cam_to_world = nalgebra::Isometry3::from_parts(Translation3::new(v[1], v[2], v[3]), q);
        let pose = PoseSE3::from_camera_center(
            cam_to_world.rotation.to_rotation_matrix().into_inner(),
            cam_to_world.translation.vector,
        );
        out.push((v[0], pose));
    }
    Ok(out)
}

pub fn read_trajectory_file(path: &Path) -> Result<Vec<(f64, PoseSE3)>> {
    read_trajectory(fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use gsflow_core::{se3_exp, Tangent};

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        let img = RgbImage::from_fn(5, 3, |x, y| Vector3::new(x as f64 / 4.0, y as f64 / 2.0, 0.5));
        write_ppm(&p, &img).unwrap();
        let back = read_ppm(&p).unwrap();
        for j in 0..img.len() {
            assert!((back[j] - img[j]).amax() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn pfm_round_trip_keeps_row_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        let map = ScalarMap::from_fn(4, 3, |x, y| (x + 10 * y) as f64 + 0.25);
        write_pfm(&p, &map).unwrap();
        assert_eq!(read_pfm(&p).unwrap(), map);
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"Pf\n4 3\n-1\n"));
    }

    #[test]
    fn gmap_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.gmap");
        let g = Gaussian3D::new(
            Vector3::new(0.5, -1.0, 2.0),
            Quaternion::new(0.5, 0.5, 0.5, 0.5),
            Vector3::new(0.25, 0.5, 0.125),
            0.75,
            Vector3::new(0.25, 0.5, 1.0),
            7,
        )
        .unwrap();
        write_gmap(&p, &GaussianMap::new(vec![g.clone()])).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 8 + 60);
        let back = read_gmap(&p).unwrap();
        let h = back.get(0);
        assert_eq!(h.keyframe_id, 7);
        assert!((h.mean - g.mean).amax() < 1e-6 && (h.opacity() - 0.75).abs() < 1e-6);
        assert!((h.rotation.coords - g.rotation.coords).amax() < 1e-6);
    }

    #[test]
    fn trajectory_round_trip() {
        let poses: Vec<(f64, PoseSE3)> = (0..4)
            .map(|i| (i as f64, se3_exp(&Tangent::new(0.1 * i as f64, -0.2, 0.05, 1.0, i as f64, -0.5))))
            .collect();
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &poses).unwrap();
        let back = read_trajectory(&buf[..]).unwrap();
        for ((t0, p0), (t1, p1)) in poses.iter().zip(&back) {
            assert_eq!(t0, t1);
            let (ang, dist) = p0.distance(p1);
            assert!(ang < 1e-7 && dist < 1e-7);
        }
    }
}
