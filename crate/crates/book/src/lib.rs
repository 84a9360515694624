//! The guide in `book/` as doc-tests, one module per chapter, so
//! `cargo test` runs every listing.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/denoiser.md")]
pub mod denoiser {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/certification.md")]
pub mod certification {}
#[doc = include_str!("../../../book/src/restoration.md")]
pub mod restoration {}
#[doc = include_str!("../../../book/src/imaging.md")]
pub mod imaging {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
