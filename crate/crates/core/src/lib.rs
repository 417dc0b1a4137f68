//! Few-shot domain expansion for face anti-spoofing.
//!
//! The crate is `no_std` (with `alloc`) so the numerical pieces can be embedded
//! anywhere; file formats, the command line and plotting live in the `sasa`
//! companion crate. Enable the default `std` feature for faster math and
//! runtime CPU dispatch in the matrix kernels.
//!
//! Module map:
//!
//! * [`synthdata`] - deterministic synthetic live/spoof domains, splits, pairs, batches
//! * [`stylizer`] - Haar wavelet whitening/coloring style transfer and the auxiliary domain
//! * [`nets`] - feature generator, classifier, discriminators, manual backprop
//! * [`losses`] - classification, contrastive, adversarial and less-forgetting objectives
//! * [`trainer`] - source pretraining, the two-stage alignment schedule, baselines
//! * [`evalmetrics`] - APCER / BPCER / ACER / HTER and threshold transfer
//! * [`bench`] - single/multi target protocols and the ablation matrix

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod bench;
pub mod error;
pub mod evalmetrics;
pub mod losses;
pub mod nets;
pub mod optim;
pub mod rng;
pub mod stylizer;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
