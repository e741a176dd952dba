//! GeneGAN object transfiguration.
//!
//! An encoder splits an image into a background code and an object code; a
//! decoder recombines any background with any object code. Trained only on two
//! unlabeled-but-partitioned image sets (with / without the object), the
//! object code ends up carrying the object alone, so objects can be removed,
//! transplanted, swapped, scaled and interpolated.

pub mod rng;
pub mod tensor;
pub mod model;
pub mod synth;
pub mod train;
pub mod eval;
