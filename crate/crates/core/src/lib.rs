//! Weakly-supervised object localization from class-agnostic attention maps.
//!
//! The crate is organised as a pipeline of small modules:
//!
//! - [`imaging`]: pixel grids, Otsu thresholding, connected components, blur,
//!   resampling and the PPM/PGM/raw-float file formats.
//! - [`scorer`]: the classifier interface used to score perturbed images, a tiny
//!   linear reference classifier and a file-backed score cache.
//! - [`proposals`]: mining a ranked pool of discriminative boxes from a stack of
//!   attention maps.
//! - [`pseudolabels`]: stochastic foreground/background pixel sampling into a
//!   partial label mask.
//! - [`losses`]: partial cross-entropy, the pairwise CRF regularizer and their
//!   analytic gradients with respect to per-pixel logits.
//! - [`mapopt`]: per-image gradient descent on localization logits.
//! - [`eval`]: PxAP, MaxBoxAccV2, Top-k localization and error decomposition.
//! - [`synth`] and [`pipeline`]: the synthetic corpus and the file-level stages
//!   driven by the `wsol` command-line tool.

pub mod error;
pub mod eval;
pub mod imaging;
pub mod losses;
pub mod mapopt;
pub mod pipeline;
pub mod proposals;
pub mod pseudolabels;
pub mod rng;
pub mod scorer;
pub mod synth;

pub use error::{Error, ErrorCategory, Result};
pub use imaging::{BBox, BinaryMask, GrayMap, Image};
pub use losses::{AffinityParams, LocalizationMap, MapLogits};
pub use proposals::{AttentionStack, ProposalPool, ScoredBox};
pub use pseudolabels::{PseudoLabelMask, SamplingConfig};
