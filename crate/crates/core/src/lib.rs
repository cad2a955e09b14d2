//! Ego-motion estimation from dense optical flow.
//!
//! The crate implements the full desk-scale pipeline: a dense-tensor engine
//! with reverse-mode differentiation ([`tensor`]), a convolutional layer zoo
//! with a declarative shape resolver ([`layers`]), the two-branch LS-VO
//! auto-encoder/estimator network and its single-task baseline ([`model`]),
//! the reconstruction and ego-motion losses ([`loss`]), SE(3) geometry
//! ([`geometry`]), flow-field I/O and dataset preparation ([`flow`]), a PCA
//! flow-subspace baseline ([`pca`]), a synthetic flow generator with known
//! ground truth ([`synth`]), adaptive-moment training ([`train`]), and
//! odometry error metrics over fixed subsequence lengths ([`eval`]).

pub mod eval;
pub mod flow;
pub mod geometry;
pub mod layers;
pub mod loss;
pub mod model;
pub mod pca;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use geometry::{MotionVector, Pose};
pub use model::ModelGraph;
pub use tensor::{Tape, Tensor, TensorId};
