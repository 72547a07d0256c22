//! Forward rasterization of a Gaussian map: projection, tile-based α-blending of
//! color, depth and silhouette, and GaussianFlow rendering toward a second pose.

mod flow;
mod project;
mod raster;

pub use flow::{rasterize_flow, FlowRender, FlowTransfer, FLOW_SILHOUETTE_MIN};
pub use project::{project_gaussian, project_unculled, Projected2D, LOW_PASS_DILATION};
pub use raster::{
    blend_alpha, rasterize, BlendEntry, BlendRecords, RenderOutputs, ALPHA_MAX, ALPHA_MIN,
    DEPTH_SILHOUETTE_MIN, TILE_SIZE, TRANSMITTANCE_MIN,
};

use crate::gaussian::Gaussian3D;

/// The optimized set of Gaussians. Every mutable access bumps `generation`, so
/// render products can detect that they were computed against an older map.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianMap {
    gaussians: Vec<Gaussian3D>,
    generation: u64,
}

impl GaussianMap {
    pub fn new(gaussians: Vec<Gaussian3D>) -> Self {
        Self { gaussians, generation: 0 }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn gaussians(&self) -> &[Gaussian3D] {
        &self.gaussians
    }

    pub fn get(&self, i: usize) -> &Gaussian3D {
        &self.gaussians[i]
    }

    pub fn gaussians_mut(&mut self) -> &mut Vec<Gaussian3D> {
        self.generation += 1;
        &mut self.gaussians
    }

    pub fn push(&mut self, g: Gaussian3D) {
        self.gaussians_mut().push(g);
    }

    pub fn bump_generation(&mut self) {
        self.generation += 1;
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Gaussian3D> {
        self.gaussians.iter()
    }
}
