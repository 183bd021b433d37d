//! Desk-scale self-supervised audio separation, end to end.
//!
//! The crate trains a query-conditioned U-Net to separate mixed audio using
//! the mix-and-separate recipe: mix the soundtracks of two silent videos,
//! predict a ratio mask for each video from its own visual (or textual)
//! query, and score the masks against the ground-truth ratio masks of the
//! unmixed sources. A small frozen "foundation" model with a shared
//! vision/language embedding space stands in for a large pretrained
//! encoder, so the full method — region-level multiple-instance mask
//! aggregation, latent-caption inversion, audio-language contrast, and
//! trimodal attention consistency — runs, trains, and is measurable on a
//! single CPU in minutes.
//!
//! Module map:
//! - [`tensor`]: reverse-mode autodiff tape over dense `f64` arrays,
//! - [`dsp`]: STFT/ISTFT, log-frequency resampling, ratio masks, WAV/PGM io,
//! - [`foundation`]: the frozen synthetic embedding model plus latent-caption
//!   inversion,
//! - [`datagen`]: synthetic audio/video corpus generation,
//! - [`sepmodel`]: the query-conditioned separation U-Net,
//! - [`losses`]: mask, audio-language, and trimodal consistency objectives,
//! - [`metrics`]: BSS evaluation (SDR/SIR/SAR/NSDR),
//! - [`trainer`]: SGD loop, schedule, checkpoints,
//! - [`evalrun`]: test-set pairing, separation, and report generation.

pub mod datagen;
pub mod dsp;
pub mod evalrun;
pub mod foundation;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod sepmodel;
pub mod tensor;
pub mod trainer;
pub mod util;
