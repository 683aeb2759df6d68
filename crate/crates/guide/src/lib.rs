//! The book's chapters as doc modules, so `cargo test` runs every listing.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/splats.md")]
pub mod splats {}
#[doc = include_str!("../../../book/src/losses.md")]
pub mod losses {}
#[doc = include_str!("../../../book/src/fitting.md")]
pub mod fitting {}
#[doc = include_str!("../../../book/src/erank.md")]
pub mod erank {}
#[doc = include_str!("../../../book/src/compression.md")]
pub mod compression {}
#[doc = include_str!("../../../book/src/elo.md")]
pub mod elo {}
#[doc = include_str!("../../../book/src/study.md")]
pub mod study {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
