//! Iterative convolutional encoder-decoder for binary image segmentation.
//!
//! The crate is self-contained: a dense tensor type with reverse-mode
//! autodiff ([`graph`]), the two-input encoder-decoder network
//! ([`network`]), dice/jaccard metrics and the iterative ratio loss
//! ([`metrics`]), the refinement loop with its convergence rule
//! ([`engine`]), and dataset plumbing including the flip/rotation/
//! translation augmentation grid and synthetic corpora ([`data`]).
//!
//! Tensors are `f32` by default; every numeric path is generic over the
//! element type and the test suite runs gradient checks in `f64`.

pub mod data;
pub mod engine;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod tensor;
pub mod trace;

pub use data::{
    augment, load_dataset, synth_corpus, AugmentationSpec, Flip, Sample, ShapeFamily, Split,
};
pub use engine::{
    converged, evaluate, infer, initial_map, mean_curve, train, EvalCurve, EvalRow, IterationConfig,
};
pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use metrics::{dice, iter_loss, jaccard, GroundTruthMask, LossConfig, MetricValue};
pub use network::{NetworkConfig, ParameterSet, SegmentationMap};
pub use optim::{sgd_step, OptimizerConfig};
pub use tensor::{Scalar, Tensor};
pub use trace::{IterationRecord, IterationTrace};
