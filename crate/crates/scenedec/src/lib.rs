//! Scene decomposition: given one image plus per-concept masks, learn one
//! textual handle per concept with a two-phase masked-diffusion optimization,
//! then generate and score novel images of any concept subset.
//!
//! Module map:
//! - [`gradcore`]: reverse-mode autodiff substrate (tape graph over f64 tensors)
//! - [`textenc`]: tokenizer, handle table, per-token text encoder
//! - [`denoiser`]: miniature UNet-style noise predictor with one cross-attention block
//! - [`diffusion`]: noise schedule, forward noising, losses, ancestral sampler
//! - [`concepts`]: scene data model, union-sampling, prompts, baseline synthesis
//! - [`trainer`]: two-phase Adam optimization, method variants, checkpoints
//! - [`eval`]: prompt/identity similarity metrics, eval suite, COCO-style harvesting
//! - [`cli`]: command-line entry points and run configuration

pub mod cli;
pub mod concepts;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod gradcore;
pub mod imageio;
pub mod params;
pub mod textenc;
pub mod trainer;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
