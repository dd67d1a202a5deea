//! Dual-encoder attention segmentation network with deep supervision, built
//! on a minimal reverse-mode autodiff tensor engine.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: rank-4 NCHW tensors, forward ops, and the gradient tape.
//! - [`nn`]: parameter store, deterministic init, and reusable layers
//!   (residual block, squeeze-excite gate, spatial attention).
//! - [`encoder`]: the two pooling-free truncated ResNet-style backbones.
//! - [`blocks`]: the three fusion/attention blocks composing the decoder.
//! - [`net`]: full network assembly, deep-supervision taps, and cost
//!   accounting.
//! - [`loss`], [`optim`], [`train`]: losses, Adam, and the training schedule.
//! - [`metrics`], [`overlay`]: confusion-count metrics and the red/green
//!   error rendering.
//! - [`checkpoint`]: the binary parameter snapshot format.
//!
//! Graphs are homogeneous in their element type ([`tensor::Element`]):
//! training runs in `f32`, while the test suites run the same code in `f64`
//! against finite differences and brute-force oracles.

pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod kv;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod optim;
pub mod overlay;
pub mod reference;
pub mod tensor;
pub mod train;

pub use data::SegmentationSample;
pub use error::{Error, Result};
pub use metrics::{compute_metrics, ConfusionCounts, Mask, MetricsReport, SampleMetrics};
pub use net::{DmadsNet, ForwardOutput, LossKind, ModelConfig, SkipWiring};
pub use nn::{Binder, ParameterStore};
pub use tensor::{ConvSpec, Element, Gradients, Graph, Shape, Tensor, UpsampleMode, Var};
