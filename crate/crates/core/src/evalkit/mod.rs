//! Multiview consistency, image metrics, density grids and meshing.

pub mod mesh;
pub mod metrics;
pub mod strip;

pub use mesh::{case_table, density_grid, marching_cubes, voxel_center, TriMesh};
pub use metrics::{mse, psnr, psnr_from_mse, ssim, PSNR_CAP};
pub use strip::{consistency_score, spatiotemporal_texture, CameraPath};

#[cfg(test)]
mod tests;
