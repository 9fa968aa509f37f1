//! Desk-scale laboratory for semi-supervised speech recognition.
//!
//! Conformer encoders pre-trained with a masked contrastive objective, CTC
//! fine-tuning with SpecAugment, noisy student training, shallow-fusion
//! decoding and layer-wise representation probing, all on synthetic
//! speech-like audio.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` deliberately rejects NaN too

pub mod asr;
pub mod audio;
pub mod conformer;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fsutil;
pub mod metrics;
pub mod nst;
pub mod numerics;
pub mod pretrain;
pub mod probe;
pub mod specaugment;

pub use error::{Error, Result};
