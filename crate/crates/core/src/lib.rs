// `!(x > 0.0)` is the NaN-rejecting form used by every validator.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod elo;
pub mod gradcheck;
pub mod image_io;
pub mod parallel;
pub mod ratecodec;
pub mod splat;
pub mod features;
pub mod losses;
pub mod trainer;
pub mod testimage;
