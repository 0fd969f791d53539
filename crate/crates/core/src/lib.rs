//! Desk-scale, dependency-light object detection.
//!
//! The crate builds an FN-YOLO style detector end to end on the CPU: a
//! FasterNet/PConv backbone, a BiFPN-connectivity neck with CSPStage fusion
//! blocks, four dual (one-to-many / one-to-one) detection heads, NMS-free
//! decoding next to classic greedy NMS, an analytic FLOPs/memory ledger for
//! every operator, and a full precision/recall/AP evaluation stack. All of
//! it runs on a small hand-rolled f64 tensor engine with tape-based
//! reverse-mode gradients, so the whole pipeline is verifiable on synthetic
//! data in CPU minutes.

pub mod assign;
pub mod cost;
pub mod dataset;
pub mod eval;
pub mod loss;
pub mod net;
pub mod postprocess;
pub mod reference;
pub mod tensor;
pub mod train;
pub mod util;

pub use tensor::{Act, BatchNormParams, ConvWeights, Shape4, Tensor4, TensorError};
