//! Geometry, rendering and label-transfer primitives for dense multi-view
//! correspondence learning on labeled triangle meshes.
//!
//! The crate is deliberately free of any learning code: it turns meshes into
//! per-view buffers, finds pixel correspondences between views through their
//! shared 3D surface, fuses per-view predictions back onto triangles, and
//! scores the result.

pub mod aggregate;
pub mod bvh;
pub mod correspond;
pub mod error;
pub mod eval;
pub mod geom;
pub mod mesh;
pub mod render;
pub mod synth;
pub mod viewio;

pub use error::{Error, Result};
pub use geom::Vec3;
pub use mesh::{FaceLabels, Texture, TriMesh};
pub use render::{Camera, LabelMap, Scene, ViewBuffers, IGNORE_LABEL};
