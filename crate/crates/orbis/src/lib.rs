//! Output-guided token reduction for diffusion-transformer inference.
//!
//! The crate has three layers:
//!
//! * numeric substrate and matching algorithms ([`tensor`], [`matching`],
//!   [`quant`]) — token matrices, similarity maps, the distribution-aware
//!   token matcher and its bipartite-soft-matching baseline, plus 4-bit
//!   channel-wise quantization of the matching input;
//! * the reduction pipeline ([`pipeline`]) — reduce/compute/restore
//!   operators around a toy SDPA workload, the full-computation /
//!   reduced-computation timestep scheduler, and a synthetic trajectory
//!   generator used to study output- vs input-guided matching;
//! * a cycle-level hardware model ([`hwsim`]) — performance, energy and
//!   area estimates for the accelerator (systolic array + vector unit,
//!   quantization engine, matching engine) and the step scheduler that
//!   overlaps matching with diffusion compute.
//!
//! Binary fixture formats live in [`io`].

pub mod error;
pub mod fixtures;
pub mod hwsim;
pub mod io;
pub mod matching;
pub mod pipeline;
pub mod quant;
mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use matching::{DatmConfig, TokenPair, TokenPairSet};
pub use tensor::{SimilarityMap, TokenMatrix};
