//! Multilingual transducer training toolkit.
//!
//! Three-stage recipe on synthetic multi-language corpora: masked
//! contrastive pretraining ([`ssl`]), gradient-path-length
//! meta-initialization ([`leap`]) and transducer fine-tuning with one-hot
//! language conditioning ([`pipeline`]). Everything is built on the small
//! reverse-mode engine in [`autodiff`].

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` deliberately rejects NaN

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod leap;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod seed;
pub mod ssl;
pub mod synth;
pub mod tensor;
pub mod transducer;

pub use error::{Error, Result};
pub use tensor::Tensor;
