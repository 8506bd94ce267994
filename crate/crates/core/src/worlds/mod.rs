//! Procedural desk-scale environments with analytic ground-truth labels, plus
//! the on-disk viewgrid format used for datasets.
//!
//! Scenes are smooth spherical color functions observed by a rotating pinhole
//! camera; objects are voxel compositions rendered by ray marching with a
//! single directional light. Both are pure functions of (seed, family).

mod object;
mod scene;
pub mod vgrd;

pub use object::{
    gen_object, gen_object_with_dim, render_view, surface_area, Primitive, VoxelObject,
    LIGHT_AZIMUTHS_DEG, LIGHT_ELEVATIONS_DEG, NUM_OBJECT_FAMILIES,
};
pub use scene::{gen_scene, render_scene, Blob, SceneSpec, NUM_SCENE_FAMILIES};
pub use vgrd::{read_sample, write_sample, Manifest};

/// Camera field of view shared by both generators, degrees.
pub const FOV_DEG: f32 = 60.0;

/// Default voxel grid resolution for objects.
pub const DEFAULT_VOXEL_DIM: usize = 32;
