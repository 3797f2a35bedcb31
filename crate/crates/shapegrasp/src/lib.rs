//! Scale-conditioned dense grasp prediction on point clouds.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! - [`gripper`]: parallel-jaw grasp parametrization (direction
//!   orthonormalization, pose reconstruction, keypoints, width binning);
//! - [`shapes`]: synthetic canonical shapes and metric scale sampling;
//! - [`labeler`]: geometric dense grasp labeling and the grasp success
//!   oracle;
//! - [`loss`]: training losses with hand-derived, finite-difference
//!   checked gradients;
//! - [`model`]: a from-scratch scale-conditioned shape/grasp autoencoder;
//! - [`scene`]: heatmap peak detection, descriptor unpacking, and scene
//!   composition;
//! - [`eval`]: detection / pose / reconstruction / grasp-coverage metrics;
//! - [`io`]: tensor, PLY, manifest, and checkpoint file formats;
//! - [`cli`]: the `shapegrasp` command-line pipeline.
//!
//! See the `examples/` directory for one runnable walkthrough per
//! capability.

pub mod cli;
pub mod cloud;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gripper;
pub mod io;
pub mod kdtree;
pub mod labeler;
pub mod loss;
pub mod model;
pub mod scene;
pub mod seeding;
pub mod shapes;

pub use cloud::{CanonicalObjectSample, Category, DenseGraspCloud, DenseGraspLabel, UnitCanonicalCloud};
pub use error::{Error, Result};
pub use gripper::{GraspPose, GripperSpec, KeypointSet, PointGraspVector};
