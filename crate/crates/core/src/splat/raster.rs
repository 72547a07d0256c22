use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use super::project::{project_gaussian, Projected2D};
use super::GaussianMap;
use crate::camera::CameraIntrinsics;
use crate::grid::{Grid, RgbImage, ScalarMap};
use crate::se3::PoseSE3;

pub const TILE_SIZE: usize = 16;
pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Blending stops before a Gaussian would push transmittance below this.
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
/// Depth is reported only where the silhouette exceeds this.
pub const DEPTH_SILHOUETTE_MIN: f64 = 1e-4;

/// One surviving (Gaussian, pixel) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlendEntry {
    pub gaussian: u32,
    /// Position of the Gaussian in its tile's depth-sorted list.
    pub slot: u32,
    pub alpha: f64,
    /// Transmittance before this Gaussian.
    pub transmittance: f64,
    pub weight: f64,
    /// `p − μ`.
    pub delta: Vector2<f64>,
    /// `exp(−δᵀΣ′⁻¹δ/2)`.
    pub falloff: f64,
    /// α hit the 0.99 ceiling.
    pub clamped: bool,
}

/// Per-pixel depth-ordered blend lists, stored contiguously in row-major pixel order.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendRecords {
    width: usize,
    height: usize,
    offsets: Vec<usize>,
    entries: Vec<BlendEntry>,
    final_transmittance: Vec<f64>,
    generation: u64,
}

impl BlendRecords {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn pixel(&self, j: usize) -> &[BlendEntry] {
        &self.entries[self.offsets[j]..self.offsets[j + 1]]
    }

    pub fn final_transmittance(&self, j: usize) -> f64 {
        self.final_transmittance[j]
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn total_entries(&self) -> usize {
        self.entries.len()
    }

    /// `(pixel index, entry)` pairs in pixel order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &BlendEntry)> + '_ {
        (0..self.num_pixels()).flat_map(move |j| self.pixel(j).iter().map(move |e| (j, e)))
    }
}

#[derive(Debug, Clone)]
pub struct RenderOutputs {
    pub color: RgbImage,
    /// Weight-normalized blended camera z; 0 where the silhouette is below 1e-4.
    pub depth: ScalarMap,
    /// Accumulated density `Σᵢ wᵢⱼ`.
    pub silhouette: ScalarMap,
    pub records: BlendRecords,
    /// Per Gaussian; `None` when culled.
    pub projections: Vec<Option<Projected2D>>,
    /// Depth-sorted Gaussian indices per 16×16 tile, row-major over tiles.
    pub tiles: Vec<Vec<u32>>,
    pub pose: PoseSE3,
    pub intrinsics: CameraIntrinsics,
    pub generation: u64,
}

impl RenderOutputs {
    pub fn tiles_x(&self) -> usize {
        self.intrinsics.width.div_ceil(TILE_SIZE)
    }

    /// Pixel indices covered by tile `t`, row-major within the tile.
    pub fn tile_pixels(&self, t: usize) -> impl Iterator<Item = usize> {
        tile_pixels(t, self.intrinsics.width, self.intrinsics.height)
    }
}

pub(crate) fn tile_pixels(t: usize, width: usize, height: usize) -> impl Iterator<Item = usize> {
    let tiles_x = width.div_ceil(TILE_SIZE);
    let (tx, ty) = (t % tiles_x, t / tiles_x);
    let (x0, y0) = (tx * TILE_SIZE, ty * TILE_SIZE);
    let (x1, y1) = ((x0 + TILE_SIZE).min(width), (y0 + TILE_SIZE).min(height));
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| y * width + x))
}

/// α of a projected Gaussian at offset `delta`: `(α, falloff, clamped)`, or `None`
/// when it falls below 1/255.
#[inline]
pub fn blend_alpha(p: &Projected2D, delta: &Vector2<f64>) -> Option<(f64, f64, bool)> {
    let falloff = (-0.5 * p.conic.quad(delta)).exp();
    let raw = p.opacity * falloff;
    if raw < ALPHA_MIN {
        return None;
    }
    Some(if raw > ALPHA_MAX { (ALPHA_MAX, falloff, true) } else { (raw, falloff, false) })
}

struct TileOut {
    entries: Vec<BlendEntry>,
    /// `(pixel, start, end, color, depth_sum, silhouette, transmittance)`
    pixels: Vec<(usize, usize, usize, Vector3<f64>, f64, f64, f64)>,
}

fn render_tile(
    t: usize,
    list: &[u32],
    projections: &[Option<Projected2D>],
    colors: &[Vector3<f64>],
    width: usize,
    height: usize,
) -> TileOut {
    let mut out = TileOut { entries: Vec::new(), pixels: Vec::with_capacity(TILE_SIZE * TILE_SIZE) };
    for j in tile_pixels(t, width, height) {
        let pix = Vector2::new((j % width) as f64, (j / width) as f64);
        let start = out.entries.len();
        let mut trans = 1.0;
        let mut color = Vector3::zeros();
        let mut depth = 0.0;
        let mut sil = 0.0;
        for (slot, &gi) in list.iter().enumerate() {
            let p = projections[gi as usize].as_ref().expect("tile lists hold visible Gaussians");
            let delta = pix - p.mu;
            let Some((alpha, falloff, clamped)) = blend_alpha(p, &delta) else { continue };
            let next = trans * (1.0 - alpha);
            if next < TRANSMITTANCE_MIN {
                break;
            }
            let w = alpha * trans;
            color += colors[gi as usize] * w;
            depth += w * p.depth;
            sil += w;
            out.entries.push(BlendEntry {
                gaussian: gi,
                slot: slot as u32,
                alpha,
                transmittance: trans,
                weight: w,
                delta,
                falloff,
                clamped,
            });
            trans = next;
        }
        out.pixels.push((j, start, out.entries.len(), color, depth, sil, trans));
    }
    out
}

/// Front-to-back tile rasterization of `map` seen from `pose`.
pub fn rasterize(map: &GaussianMap, pose: &PoseSE3, k: &CameraIntrinsics) -> RenderOutputs {
    let (width, height) = (k.width, k.height);
    let projections: Vec<Option<Projected2D>> =
        map.gaussians().par_iter().map(|g| project_gaussian(g, pose, k)).collect();
    let colors: Vec<Vector3<f64>> = map.iter().map(|g| g.color).collect();

    let mut order: Vec<u32> = (0..map.len() as u32).filter(|&i| projections[i as usize].is_some()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (projections[a as usize].unwrap().depth, projections[b as usize].unwrap().depth);
        da.total_cmp(&db).then(a.cmp(&b))
    });

    let tiles_x = width.div_ceil(TILE_SIZE);
    let tiles_y = height.div_ceil(TILE_SIZE);
    let mut tiles: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for &gi in &order {
        let p = projections[gi as usize].as_ref().unwrap();
        let x0 = (p.mu.x - p.extent.x).ceil().max(0.0);
        let x1 = (p.mu.x + p.extent.x).floor().min(width as f64 - 1.0);
        let y0 = (p.mu.y - p.extent.y).ceil().max(0.0);
        let y1 = (p.mu.y + p.extent.y).floor().min(height as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        let (tx0, tx1) = (x0 as usize / TILE_SIZE, x1 as usize / TILE_SIZE);
        let (ty0, ty1) = (y0 as usize / TILE_SIZE, y1 as usize / TILE_SIZE);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                tiles[ty * tiles_x + tx].push(gi);
            }
        }
    }

    let outs: Vec<TileOut> = tiles
        .par_iter()
        .enumerate()
        .map(|(t, list)| render_tile(t, list, &projections, &colors, width, height))
        .collect();

    let n = width * height;
    let mut color = Grid::filled(width, height, Vector3::zeros());
    let mut depth = Grid::filled(width, height, 0.0);
    let mut silhouette = Grid::filled(width, height, 0.0);
    let mut final_transmittance = vec![1.0; n];
    let mut spans = vec![(0usize, 0usize, 0usize); n];
    for (t, out) in outs.iter().enumerate() {
        for &(j, s, e, c, d, sil, tr) in &out.pixels {
            color[j] = c;
            depth[j] = if sil > DEPTH_SILHOUETTE_MIN { d / sil } else { 0.0 };
            silhouette[j] = sil;
            final_transmittance[j] = tr;
            spans[j] = (t, s, e);
        }
    }
    let mut offsets = Vec::with_capacity(n + 1);
    let mut entries = Vec::with_capacity(outs.iter().map(|o| o.entries.len()).sum());
    offsets.push(0);
    for &(t, s, e) in &spans {
        entries.extend_from_slice(&outs[t].entries[s..e]);
        offsets.push(entries.len());
    }

    RenderOutputs {
        color,
        depth,
        silhouette,
        records: BlendRecords { width, height, offsets, entries, final_transmittance, generation: map.generation() },
        projections,
        tiles,
        pose: *pose,
        intrinsics: *k,
        generation: map.generation(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::Gaussian3D;

    fn intrinsics() -> CameraIntrinsics {
        CameraIntrinsics { fx: 30.0, fy: 30.0, cx: 20.0, cy: 10.0, width: 40, height: 24, near: 0.1, far: 50.0 }
    }

    #[test]
    fn empty_map_renders_black() {
        let out = rasterize(&GaussianMap::default(), &PoseSE3::identity(), &intrinsics());
        assert!(out.color.data().iter().all(|c| *c == Vector3::zeros()));
        assert!(out.depth.data().iter().all(|&d| d == 0.0));
        assert!(out.silhouette.data().iter().all(|&s| s == 0.0));
        assert_eq!(out.records.total_entries(), 0);
    }

    #[test]
    fn single_gaussian_center_pixel() {
        let c = Vector3::new(0.2, 0.5, 0.9);
        let g = Gaussian3D::isotropic(Vector3::new(0.0, 0.0, 3.0), 0.2, 0.9, c).unwrap();
        let out = rasterize(&GaussianMap::new(vec![g]), &PoseSE3::identity(), &intrinsics());
        let j = out.color.index(20, 10);
        assert!((out.silhouette[j] - 0.9).abs() < 1e-12);
        assert!((out.color[j] - c * 0.9).norm() < 1e-12);
        assert!((out.depth[j] - 3.0).abs() < 1e-12);
        let e = out.records.pixel(j)[0];
        assert!(!e.clamped && (e.alpha - 0.9).abs() < 1e-12);
    }

    #[test]
    fn silhouette_is_sum_of_weights_and_order_is_by_depth() {
        let gs: Vec<Gaussian3D> = (0..12)
            .map(|i| {
                let f = i as f64;
                Gaussian3D::isotropic(
                    Vector3::new((f * 0.37).sin() * 0.8, (f * 0.91).cos() * 0.4, 2.0 + f * 0.1),
                    0.15 + 0.01 * f,
                    0.6,
                    Vector3::new(0.5, 0.1 * f / 12.0, 0.3),
                )
                .unwrap()
            })
            .collect();
        let out = rasterize(&GaussianMap::new(gs), &PoseSE3::identity(), &intrinsics());
        for j in 0..out.records.num_pixels() {
            let recs = out.records.pixel(j);
            let sum: f64 = recs.iter().map(|e| e.weight).sum();
            assert_eq!(sum, out.silhouette[j]);
            for pair in recs.windows(2) {
                let (a, b) = (pair[0].gaussian as usize, pair[1].gaussian as usize);
                let (da, db) = (out.projections[a].unwrap().depth, out.projections[b].unwrap().depth);
                assert!(da < db || (da == db && a < b));
            }
            assert!((0.0..=1.0).contains(&out.silhouette[j]));
        }
    }
}
