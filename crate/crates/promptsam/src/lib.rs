//! Section-aware malware image conversion with a prompted frozen encoder.
//!
//! The pipeline: parse APK/DEX binaries into header/ids/data sections
//! ([`binfmt`]), render them as section-colorized images ([`imager`]), feed
//! them through a frozen ViT-style encoder with learnable prompt tokens and a
//! residual feature aggregator ([`promptvit`], [`promptmodule`]), and score
//! detection quality plus temporal decay with the AUT metric ([`evalkit`]).

pub mod binfmt;
pub mod cli;
pub mod evalkit;
pub mod imager;
pub mod promptmodule;
pub mod promptvit;
pub mod synth;
pub mod tensorcore;
