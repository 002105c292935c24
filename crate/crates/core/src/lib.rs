//! Zero-shot sketch-based 3D shape retrieval.
//!
//! A frozen latent-diffusion denoiser is used as a multi-scale feature
//! extractor for both query sketches and rendered views of gallery shapes.
//! The denoiser pass is conditioned on CLIP-style visual tokens and on
//! hard (captioned) and soft (learned) text prompts. Only lightweight
//! adapters are trained, with the circle-T metric objective plus a
//! view-branch classification term.
//!
//! Module map:
//!
//! * [`dataset`]: manifests, zero-shot splits, mesh loading and view rendering.
//! * [`select`]: vision-language scoring and top-k view selection.
//! * [`backbone`]: noise schedule, denoiser contract, hooked feature capture.
//! * [`conditioning`]: captions, hard/soft prompts, global and local injection.
//! * [`aggregation`]: per-scale adapters, softmax fusion, cross-view pooling.
//! * [`objectives`]: circle-T loss, view classification loss, total objective.
//! * [`train`]: batching, AdamW, checkpoints, the fit loop.
//! * [`eval`]: embedding index, ranking, retrieval metrics, reports.

pub mod aggregation;
pub mod backbone;
pub mod conditioning;
pub mod dataset;
pub mod dims;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod params;
pub mod pipeline;
pub mod select;
pub mod synthetic;
pub mod train;
pub mod util;

pub use dims::ModelDims;
pub use error::{Error, Result};
