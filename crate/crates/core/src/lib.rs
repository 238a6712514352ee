//! Building blocks of a tiny-pulmonary-nodule detector, self-contained on a
//! minimal reverse-mode autodiff tensor core.
//!
//! The crate covers the whole desk-scale pipeline:
//!
//! - [`tensor`]: dense f64 tensors, a recording autodiff tape, and the
//!   finite-difference gradient checker that validates every op.
//! - [`nn`]: CBS (conv + batchnorm + SiLU) and SPP composite blocks.
//! - [`erd`]: parallel dilated-convolution blocks with receptive-field
//!   arithmetic.
//! - [`pcam`]: dual position/channel attention with learned residual scalars.
//! - [`model`]: the assembled detector (backbone, TODB fusion head,
//!   multi-scale anchor heads, box decode/encode).
//! - [`arch`]: static receptive-field and shape analysis over architecture
//!   configs.
//! - [`data`]: synthetic CT-like scene generation, HU preprocessing,
//!   morphological lung masking, dataset file formats.
//! - [`metrics`]: IoU, NMS, and the precision/recall/F1/AP/mAP evaluator.
//! - [`train`]: target assignment, composite detection loss, SGD with
//!   momentum, and the deterministic training loop.
//! - [`checkpoint`]: the MSDT tensor container.

pub mod arch;
pub mod checkpoint;
pub mod data;
pub mod erd;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod pcam;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{CoreError, Result};
pub use tensor::{Bindings, Graph, NodeRef, Tensor};
