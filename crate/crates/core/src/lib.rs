//! Out-of-distribution detection by feature separation.
//!
//! This crate fine-tunes a small MLP classifier with an auxiliary outlier
//! set so that in-distribution features collapse onto their class weight
//! directions while outlier features are pushed into the orthogonal
//! complement of the class-weight subspace. It ships everything needed to
//! run that experiment end to end on a desk: a reverse-mode gradient tape
//! over dense `f64` tensors, synthetic dataset generators with a fixed CSV
//! interchange format, the loss family (cross-entropy, outlier exposure,
//! orthogonality, class alignment and a euclidean ablation), a two-stage
//! SGD trainer with resumable checkpoints, and detection metrics
//! (FPR95, AUROC, feature-separation degree, subspace projections).
//!
//! Heavy inner loops (matmul, pairwise distances) run on rayon when the
//! default `parallel` feature is on, with a sequential fallback that is
//! bit-identical; see [`tensor::kernels`].

pub mod dataset;
pub mod detection;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Tape, Tensor, TensorId};
