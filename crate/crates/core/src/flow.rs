//! Dense flow fields and the `GFLO` binary container.
//!
//! Layout: magic `GFLO`, little-endian `u32` width and height, then
//! `width·height` `(u, v)` pairs of `f32` in row-major order, then
//! `width·height` `f32` confidences.

use std::io::{Read, Write};

use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::grid::{Grid, ScalarMap, VectorMap};

pub const FLOW_MAGIC: &[u8; 4] = b"GFLO";

#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub flow: VectorMap,
    /// Per-pixel confidence in `[0, 1]`; pixels without information carry 0.
    pub confidence: ScalarMap,
    pub valid: Grid<bool>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            flow: Grid::filled(width, height, Vector2::zeros()),
            confidence: Grid::filled(width, height, 0.0),
            valid: Grid::filled(width, height, false),
        }
    }

    pub fn width(&self) -> usize {
        self.flow.width()
    }

    pub fn height(&self) -> usize {
        self.flow.height()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.flow.same_shape(&self.confidence) || !self.flow.same_shape(&self.valid) {
            return Err(Error::ContractViolation("flow field channels differ in shape".into()));
        }
        for i in 0..self.flow.len() {
            let q = self.confidence[i];
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::InvalidParameter(format!("confidence {q} outside [0,1]")));
            }
            if self.valid[i] && !(self.flow[i].x.is_finite() && self.flow[i].y.is_finite()) {
                return Err(Error::InvalidParameter("non-finite flow at a valid pixel".into()));
            }
        }
        Ok(())
    }

    pub fn write_gflo<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(FLOW_MAGIC)?;
        w.write_all(&(self.width() as u32).to_le_bytes())?;
        w.write_all(&(self.height() as u32).to_le_bytes())?;
        for (i, f) in self.flow.data().iter().enumerate() {
            let (u, v) = if self.valid[i] { (f.x as f32, f.y as f32) } else { (0.0, 0.0) };
            w.write_all(&u.to_le_bytes())?;
            w.write_all(&v.to_le_bytes())?;
        }
        for (i, &q) in self.confidence.data().iter().enumerate() {
            let q = if self.valid[i] { q as f32 } else { 0.0 };
            w.write_all(&q.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a `GFLO` stream. Pixels are valid where the stored flow is finite.
    pub fn read_gflo<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != FLOW_MAGIC {
            return Err(Error::Format("missing GFLO magic".into()));
        }
        let width = read_u32(&mut r)? as usize;
        let height = read_u32(&mut r)? as usize;
        let n = width
            .checked_mul(height)
            .filter(|&n| n <= 1 << 28)
            .ok_or_else(|| Error::Format("implausible flow dimensions".into()))?;
        let mut flow = Vec::with_capacity(n);
        for _ in 0..n {
            let u = read_f32(&mut r)? as f64;
            let v = read_f32(&mut r)? as f64;
            flow.push(Vector2::new(u, v));
        }
        let mut confidence = Vec::with_capacity(n);
        for _ in 0..n {
            confidence.push((read_f32(&mut r)? as f64).clamp(0.0, 1.0));
        }
        let valid = flow.iter().map(|f: &Vector2<f64>| f.x.is_finite() && f.y.is_finite()).collect();
        Ok(Self {
            flow: Grid::from_vec(width, height, flow),
            confidence: Grid::from_vec(width, height, confidence),
            valid: Grid::from_vec(width, height, valid),
        })
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32<R: Read>(r: &mut R) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn gflo_round_trip(w in 1usize..6, h in 1usize..6, seed in any::<u64>()) {
            let mut s = seed;
            let mut next = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); ((s >> 11) as f64) / (1u64 << 53) as f64 };
            let mut field = FlowField::zeros(w, h);
            for i in 0..w * h {
                field.flow[i] = Vector2::new((next() - 0.5) * 40.0, (next() - 0.5) * 40.0).map(|v| v as f32 as f64);
                field.confidence[i] = (next() as f32) as f64;
                field.valid[i] = true;
            }
            let mut buf = Vec::new();
            field.write_gflo(&mut buf).unwrap();
            prop_assert_eq!(buf.len(), 12 + 12 * w * h);
            let back = FlowField::read_gflo(&buf[..]).unwrap();
            prop_assert_eq!(back, field);
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = b"FLOW\x01\x00\x00\x00\x01\x00\x00\x00";
        assert!(matches!(FlowField::read_gflo(&buf[..]), Err(Error::Format(_))));
    }
}
