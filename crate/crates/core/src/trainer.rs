//! Mix-and-separate training: pair two solo videos, sum their audio,
//! predict each source's mask from that video's own visual regions (or
//! its pooled query), and descend the weighted objective with a
//! warmup-then-cosine learning-rate schedule. The concept space is read
//! but never written: the only trainable parameters are the separation
//! network's.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datagen::{Dataset, DatagenError, ManifestRecord, Split};
use crate::dsp::{self, DspError, StftParams};
use crate::foundation::{extract_latent_caption, FoundationError};
use crate::losses::{
    audio_language_loss, mask_loss, total_loss, trimodal_loss, write_loss_log,
    CaptionVocabulary, LossError, LossParts, LossRecord, LossWeights,
};
use crate::sepmodel::{SepConfig, SepError, SepModel};
use crate::tensor::{Array, Graph, TensorError};
use crate::util::rng_for_item;

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"VASTCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("trainer: {0}")]
    Invalid(String),
    #[error("trainer: step {step} produced a non-finite loss; last good checkpoint: {last_good}")]
    NonFinite { step: u64, last_good: String },
    #[error("trainer: checkpoint config hash {found:#018x} does not match the active config {want:#018x}; pass force to override")]
    ConfigMismatch { found: u64, want: u64 },
    #[error("trainer: {0}")]
    Tensor(#[from] TensorError),
    #[error("trainer: {0}")]
    Dsp(#[from] DspError),
    #[error("trainer: {0}")]
    Sep(#[from] SepError),
    #[error("trainer: {0}")]
    Loss(#[from] LossError),
    #[error("trainer: {0}")]
    Foundation(#[from] FoundationError),
    #[error("trainer: {0}")]
    Data(#[from] DatagenError),
    #[error("trainer: io on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, TrainerError>;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> TrainerError + '_ {
    move |source| TrainerError::Io { path: path.display().to_string(), source }
}

/// How a video conditions its mask during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MilMode {
    /// Every spatiotemporal region is a query; masks are aggregated.
    Region,
    /// One channelwise-max pooled query per video.
    Video,
}

impl std::fmt::Display for MilMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MilMode::Region => "region",
            MilMode::Video => "video",
        })
    }
}

/// Everything a run needs beyond the dataset itself. The resolved config
/// is hashed into checkpoints so resumes cannot silently change the
/// experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Dataset directory, used by the command-line entry point; in-memory
    /// callers hand a loaded dataset to [`train`] directly.
    pub dataset: Option<PathBuf>,
    pub sep: SepConfig,
    pub weights: LossWeights,
    pub mil: MilMode,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    /// Video pairs mixed per optimization step; the caption vocabulary of
    /// a step holds `2 × pairs_per_step` entries.
    pub pairs_per_step: usize,
    /// Latent-caption token count.
    pub n_tokens: usize,
    /// Ascent iterations per latent caption.
    pub inversion_iters: u64,
    /// Ascent step size per latent caption.
    pub inversion_step: f64,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 = only the final one).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            sep: SepConfig::default(),
            weights: LossWeights::default(),
            mil: MilMode::Region,
            base_lr: 4e-3,
            warmup_steps: 100,
            total_steps: 2000,
            pairs_per_step: 1,
            n_tokens: 3,
            inversion_iters: 5000,
            inversion_step: 0.05,
            seed: 99,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(TrainerError::Invalid(format!(
                "base_lr must be finite and positive, got {}",
                self.base_lr
            )));
        }
        if self.warmup_steps > self.total_steps {
            return Err(TrainerError::Invalid(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.total_steps == 0 {
            return Err(TrainerError::Invalid("total_steps must be positive".into()));
        }
        if self.pairs_per_step == 0 {
            return Err(TrainerError::Invalid("pairs_per_step must be positive".into()));
        }
        if self.n_tokens == 0 || self.inversion_iters == 0 || !(self.inversion_step > 0.0) {
            return Err(TrainerError::Invalid(
                "caption inversion needs tokens >= 1, iters >= 1, step > 0".into(),
            ));
        }
        self.weights.validate()?;
        self.sep.validate()?;
        Ok(())
    }

    /// Truncated digest of the canonical JSON encoding; stored in
    /// checkpoints and verified on resume.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

/// Linear warmup to `base_lr`, then cosine decay to zero at `total_steps`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.base_lr * step as f64 / cfg.warmup_steps as f64;
    }
    if cfg.total_steps <= cfg.warmup_steps {
        return 0.0;
    }
    let span = (cfg.total_steps - cfg.warmup_steps) as f64;
    let phase = (step - cfg.warmup_steps) as f64 / span;
    cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * phase).cos())
}

/// A persisted model state plus enough context to resume from it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub step: u64,
    pub params: BTreeMap<String, Array>,
    pub config_hash: u64,
    /// The loss record of the step that produced this state (zeros before
    /// the first step).
    pub summary: LossRecord,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&ckpt.version.to_le_bytes());
    buf.extend_from_slice(&ckpt.step.to_le_bytes());
    buf.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for (name, arr) in &ckpt.params {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(arr.shape().len() as u32).to_le_bytes());
        for &d in arr.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in arr.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend_from_slice(&ckpt.config_hash.to_le_bytes());
    buf.extend_from_slice(&ckpt.summary.step.to_le_bytes());
    for v in [
        ckpt.summary.l_mask,
        ckpt.summary.l_tri,
        ckpt.summary.l_al,
        ckpt.summary.total,
        ckpt.summary.lr,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(io_err(path))
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(TrainerError::Invalid(format!(
                "checkpoint {} is truncated at byte {}",
                self.path.display(),
                self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut data = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(io_err(path))?;
    let mut c = Cursor { data: &data, pos: 0, path };
    if c.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err(TrainerError::Invalid(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(TrainerError::Invalid(format!(
            "checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let step = c.u64()?;
    let count = c.u32()?;
    let mut params = BTreeMap::new();
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|e| TrainerError::Invalid(format!("checkpoint name not UTF-8: {e}")))?;
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            vals.push(c.f64()?);
        }
        let arr = Array::new(shape, vals).map_err(TrainerError::Tensor)?;
        params.insert(name, arr);
    }
    let config_hash = c.u64()?;
    let summary = LossRecord {
        step: c.u64()?,
        l_mask: c.f64()?,
        l_tri: c.f64()?,
        l_al: c.f64()?,
        total: c.f64()?,
        lr: c.f64()?,
    };
    if c.pos != data.len() {
        return Err(TrainerError::Invalid(format!(
            "checkpoint {} has {} trailing bytes",
            path.display(),
            data.len() - c.pos
        )));
    }
    Ok(Checkpoint { version, step, params, config_hash, summary })
}

/// The artifacts a finished run leaves behind.
#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub records: Vec<LossRecord>,
}

/// One training example with everything the step loop needs in memory.
struct Prepared {
    id: String,
    audio: Vec<f64>,
    regions: crate::foundation::EmbeddingGrid,
    caption: Vec<f64>,
}

fn prepare_examples(dataset: &Dataset, cfg: &TrainConfig) -> Result<Vec<Prepared>> {
    let records: Vec<&ManifestRecord> = dataset.solos(Split::Train);
    if records.len() < 2 {
        return Err(TrainerError::Invalid(format!(
            "mix-and-separate needs at least 2 training solos, found {}",
            records.len()
        )));
    }
    let space = dataset.space();
    records
        .into_iter()
        .enumerate()
        .map(|(idx, rec)| {
            let audio = dataset.waveform(rec)?;
            let raw = dataset.grid(rec)?;
            let regions = space.encode_regions(&raw)?;
            let caption_seed = cfg.seed ^ 0x9e37_79b9_7f4a_7c15 ^ idx as u64;
            let caption = extract_latent_caption(
                space,
                &raw,
                cfg.n_tokens,
                cfg.inversion_iters as usize,
                cfg.inversion_step,
                caption_seed,
            )?;
            Ok(Prepared {
                id: rec.id.clone(),
                audio: audio.samples().to_vec(),
                regions,
                caption: caption.caption,
            })
        })
        .collect()
}

/// Draws `2 × pairs_per_step` distinct example indices for one step.
fn draw_pairs(n: usize, pairs: usize, seed: u64, step: u64) -> Vec<(usize, usize)> {
    use rand::Rng;
    let mut rng = rng_for_item(seed, step);
    let mut out = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let i = rng.random_range(0..n);
        let j = (i + 1 + rng.random_range(0..n - 1)) % n;
        out.push((i, j));
    }
    out
}

struct StepValues {
    l_mask: f64,
    l_tri: f64,
    l_al: f64,
    total: f64,
    grads: BTreeMap<String, Array>,
}

/// Builds the full objective for one step on a fresh graph and returns the
/// component values plus parameter gradients.
fn run_step(
    model: &SepModel,
    examples: &[Prepared],
    pairs: &[(usize, usize)],
    cfg: &TrainConfig,
    stft_params: StftParams,
) -> Result<StepValues> {
    let g = Graph::new();
    let bound = model.bind(&g, true)?;
    let d = cfg.sep.d;

    let mut vocab = CaptionVocabulary::new(d);
    for &(i, j) in pairs {
        for idx in [i, j] {
            let ex = &examples[idx];
            if vocab.index_of(&ex.id).is_none() {
                vocab.push(&ex.id, &ex.caption)?;
            }
        }
    }

    let mut masks = Vec::new();
    let mut tris = Vec::new();
    let mut als = Vec::new();
    for &(i, j) in pairs {
        let (a, b) = (&examples[i], &examples[j]);
        let mix: Vec<f64> =
            a.audio.iter().zip(&b.audio).map(|(x, y)| x + y).collect();
        let mix_wave = dsp::Waveform::new(mix, stft_params.sample_rate)?;
        let mix_spec = dsp::stft(&mix_wave, stft_params)?;
        let mix_log = dsp::log_resample(&mix_spec.magnitude, cfg.sep.f_log)?;

        let log_of = |samples: &[f64]| -> Result<dsp::LogSpectrogram> {
            let w = dsp::Waveform::new(samples.to_vec(), stft_params.sample_rate)?;
            let s = dsp::stft(&w, stft_params)?;
            Ok(dsp::log_resample(&s.magnitude, cfg.sep.f_log)?)
        };
        let (t_a, t_b) = dsp::ratio_masks(&log_of(&a.audio)?, &log_of(&b.audio)?)?;

        let spec = crate::sepmodel::spec_input(&g, &mix_log)?;
        let predict = |ex: &Prepared| -> Result<crate::tensor::TensorId> {
            Ok(match cfg.mil {
                MilMode::Region => bound.predict_mask_video_mil(spec, &ex.regions)?,
                MilMode::Video => bound.predict_mask_video_pooled(spec, &ex.regions)?,
            })
        };
        let m_a = predict(a)?;
        let m_b = predict(b)?;
        let rows = cfg.sep.f_log;
        let cols = cfg.sep.n_frames;
        let target = |m: &dsp::RatioMask| -> Result<crate::tensor::TensorId> {
            Ok(g.constant(Array::new(vec![1, rows, cols], m.values.data().to_vec())?)?)
        };
        masks.push(mask_loss(&g, m_a, m_b, target(&t_a)?, target(&t_b)?)?);

        // A zero-weighted objective contributes exactly zero to the total
        // and its gradient, so its graph is skipped outright.
        let want_al = cfg.weights.lambda_al > 0.0;
        let want_tri = cfg.weights.lambda_tri > 0.0;
        if want_al || want_tri {
            for (ex, m) in [(a, m_a), (b, m_b)] {
                let f_hat = bound.embed_predicted(bound.masked_magnitude(m, spec)?)?;
                if want_al {
                    als.push(audio_language_loss(&g, f_hat, &ex.id, &vocab, cfg.weights.tau)?);
                }
                if want_tri {
                    tris.push(trimodal_loss(
                        &g,
                        &ex.regions,
                        &ex.caption,
                        f_hat,
                        cfg.weights.attn_mode(),
                    )?);
                }
            }
        }
    }

    let mean_of = |ids: &[crate::tensor::TensorId], scale: f64| -> Result<crate::tensor::TensorId> {
        let mut acc = ids[0];
        for &id in &ids[1..] {
            acc = g.add(acc, id)?;
        }
        Ok(g.scale(acc, scale)?)
    };
    // Per pair: one mask term, and alignment terms summed over the two
    // videos. Multiple pairs average so step size is batch-independent.
    let np = pairs.len() as f64;
    let mean_or_zero = |ids: &[crate::tensor::TensorId]| -> Result<crate::tensor::TensorId> {
        if ids.is_empty() {
            Ok(g.constant(Array::scalar(0.0))?)
        } else {
            mean_of(ids, 1.0 / np)
        }
    };
    let l_mask = mean_of(&masks, 1.0 / np)?;
    let l_tri = mean_or_zero(&tris)?;
    let l_al = mean_or_zero(&als)?;
    let total = total_loss(
        &g,
        LossParts { mask: l_mask, tri: l_tri, al: l_al },
        &cfg.weights,
    )?;
    g.backward(total)?;

    let mut grads = BTreeMap::new();
    for name in model.param_names() {
        grads.insert(name.clone(), g.grad(bound.param_id(&name)));
    }
    Ok(StepValues {
        l_mask: g.value(l_mask).item(),
        l_tri: g.value(l_tri).item(),
        l_al: g.value(l_al).item(),
        total: g.value(total).item(),
        grads,
    })
}

/// True when the error chain bottoms out in a non-finite tensor value — the
/// divergence signature, as opposed to a configuration or I/O problem.
fn is_nonfinite(e: &TrainerError) -> bool {
    let tensor = match e {
        TrainerError::Tensor(t) => t,
        TrainerError::Sep(SepError::Tensor(t)) => t,
        TrainerError::Loss(LossError::Tensor(t)) => t,
        _ => return false,
    };
    matches!(tensor, TensorError::NonFinite { .. })
}

fn checkpoint_of(model: &SepModel, step: u64, hash: u64, summary: LossRecord) -> Checkpoint {
    Checkpoint {
        version: CHECKPOINT_VERSION,
        step,
        params: model.params().clone(),
        config_hash: hash,
        summary,
    }
}

/// Runs the full loop. `resume_from` restarts from a saved checkpoint after
/// verifying its config hash (set `force_resume` to skip the check). The
/// final state lands in `out_dir/checkpoint.bin`, the per-step losses in
/// `out_dir/loss_log.csv`.
pub fn train(
    dataset: &Dataset,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume_from: Option<&Path>,
    force_resume: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let hash = cfg.hash();
    let stft_params = StftParams::compact();

    let mut model = SepModel::init(cfg.sep, cfg.seed ^ 0x5ebc_5e6f_9d1b_3a77)?;
    let mut start_step = 0u64;
    if let Some(path) = resume_from {
        let ckpt = load_checkpoint(path)?;
        if ckpt.config_hash != hash && !force_resume {
            return Err(TrainerError::ConfigMismatch { found: ckpt.config_hash, want: hash });
        }
        for (name, arr) in &ckpt.params {
            model.set_param(name, arr.clone())?;
        }
        start_step = ckpt.step;
    }

    let examples = prepare_examples(dataset, cfg)?;
    let final_path = out_dir.join("checkpoint.bin");
    let log_path = out_dir.join("loss_log.csv");
    let mut records: Vec<LossRecord> = Vec::new();
    let mut last_good = if start_step > 0 {
        resume_from.map(|p| p.to_path_buf())
    } else {
        None
    };

    for step in start_step + 1..=cfg.total_steps {
        let pairs = draw_pairs(examples.len(), cfg.pairs_per_step, cfg.seed, step);
        let lr = lr_at(step, cfg);
        let nonfinite = |records: &[LossRecord]| -> Result<TrainerError> {
            write_loss_log(&log_path, records)?;
            let last = last_good
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "none".into());
            Ok(TrainerError::NonFinite { step, last_good: last })
        };
        let vals = match run_step(&model, &examples, &pairs, cfg, stft_params) {
            Ok(v) if v.total.is_finite() => v,
            Ok(_) => return Err(nonfinite(&records)?),
            Err(e) if is_nonfinite(&e) => return Err(nonfinite(&records)?),
            Err(other) => return Err(other),
        };
        for (name, grad) in &vals.grads {
            let mut p = model.param(name).expect("registry fixed").clone();
            for (pv, gv) in p.data_mut().iter_mut().zip(grad.data()) {
                *pv -= lr * gv;
            }
            model.set_param(name, p)?;
        }
        let record = LossRecord {
            step,
            l_mask: vals.l_mask,
            l_tri: vals.l_tri,
            l_al: vals.l_al,
            total: vals.total,
            lr,
        };
        records.push(record);
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.total_steps
        {
            let path = out_dir.join(format!("checkpoint-{step:06}.bin"));
            save_checkpoint(&checkpoint_of(&model, step, hash, record), &path)?;
            last_good = Some(path);
        }
    }

    let summary = records.last().copied().unwrap_or(LossRecord {
        step: start_step,
        l_mask: 0.0,
        l_tri: 0.0,
        l_al: 0.0,
        total: 0.0,
        lr: 0.0,
    });
    let checkpoint = checkpoint_of(&model, cfg.total_steps, hash, summary);
    save_checkpoint(&checkpoint, &final_path)?;
    write_loss_log(&log_path, &records)?;
    Ok(TrainOutcome { checkpoint, checkpoint_path: final_path, log_path, records })
}

/// Rebuilds a model from a checkpoint, verifying shape compatibility.
pub fn model_from_checkpoint(ckpt: &Checkpoint, sep: SepConfig) -> Result<SepModel> {
    let mut model = SepModel::init(sep, 0)?;
    let want: Vec<String> = model.param_names();
    let have: Vec<String> = ckpt.params.keys().cloned().collect();
    if want != have {
        return Err(TrainerError::Invalid(format!(
            "checkpoint parameters {have:?} do not match the model registry {want:?}"
        )));
    }
    for (name, arr) in &ckpt.params {
        model.set_param(name, arr.clone())?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{DataConfig, VideoLayout};

    fn micro_dataset(dir: &Path, seed: u64) -> Dataset {
        let config = DataConfig {
            train_solos: 4,
            val_solos: 1,
            test_solos: 1,
            test_duets: 1,
            layout: VideoLayout::default(),
            n_samples: 3937,
            sample_rate: 11025,
            seed,
            space: crate::foundation::ConceptSpaceConfig::default(),
            space_seed: 2024,
        };
        Dataset::generate(config, dir).unwrap()
    }

    fn micro_config() -> TrainConfig {
        TrainConfig {
            total_steps: 3,
            warmup_steps: 1,
            mil: MilMode::Video,
            n_tokens: 2,
            inversion_iters: 50,
            checkpoint_every: 0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_hits_its_anchor_points_and_decays_monotonically() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(cfg.warmup_steps, &cfg), cfg.base_lr);
        assert_eq!(lr_at(cfg.total_steps, &cfg), 0.0);
        assert!((lr_at(50, &cfg) - cfg.base_lr * 0.5).abs() <= 1e-15);
        let mid = cfg.warmup_steps + (cfg.total_steps - cfg.warmup_steps) / 2;
        assert!((lr_at(mid, &cfg) - cfg.base_lr * 0.5).abs() <= 1e-12);
        let mut prev = lr_at(cfg.warmup_steps, &cfg);
        for s in cfg.warmup_steps + 1..=cfg.total_steps {
            let v = lr_at(s, &cfg);
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly_and_reject_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let model = SepModel::init(
            SepConfig { f_log: 8, n_frames: 8, base_width: 2, d: 4, sigmoid_mask: false },
            61,
        )
        .unwrap();
        let summary =
            LossRecord { step: 7, l_mask: 0.5, l_tri: 0.25, l_al: 1.5, total: 0.504, lr: 3e-3 };
        let ckpt = checkpoint_of(&model, 7, 0xdead_beef_cafe_f00d, summary);
        let path = dir.path().join("c.bin");
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        for (name, arr) in &ckpt.params {
            let b = &back.params[name];
            assert_eq!(arr.shape(), b.shape());
            let bits_equal = arr
                .data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(bits_equal, "{name} changed across the round trip");
        }

        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad = dir.path().join("bad-magic.bin");
        fs::write(&bad, &bytes).unwrap();
        assert!(load_checkpoint(&bad).is_err());

        let mut good = fs::read(&path).unwrap();
        good.truncate(good.len() - 3);
        let trunc = dir.path().join("trunc.bin");
        fs::write(&trunc, &good).unwrap();
        assert!(load_checkpoint(&trunc).is_err());

        let mut vers = fs::read(&path).unwrap();
        vers[9] = 9;
        let vpath = dir.path().join("vers.bin");
        fs::write(&vpath, &vers).unwrap();
        assert!(load_checkpoint(&vpath).is_err());
    }

    #[test]
    fn identical_seeds_reproduce_the_checkpoint_and_log_bytes() {
        let data_dir = tempfile::tempdir().unwrap();
        let dataset = micro_dataset(data_dir.path(), 303);
        let cfg = micro_config();
        let run = |tag: &str| {
            let out = data_dir.path().join(tag);
            let outcome = train(&dataset, &cfg, &out, None, false).unwrap();
            (
                fs::read(&outcome.checkpoint_path).unwrap(),
                fs::read(&outcome.log_path).unwrap(),
                outcome,
            )
        };
        let (c1, l1, o1) = run("a");
        let (c2, l2, o2) = run("b");
        assert_eq!(c1, c2, "checkpoint bytes differ between identical runs");
        assert_eq!(l1, l2, "loss logs differ between identical runs");
        assert_eq!(o1.records, o2.records);
        assert!(o1.records.iter().all(|r| r.total.is_finite()));
    }

    #[test]
    fn training_moves_the_separator_but_leaves_the_concept_space_alone() {
        let data_dir = tempfile::tempdir().unwrap();
        let dataset = micro_dataset(data_dir.path(), 304);
        let space_before: Vec<Vec<f64>> =
            (0..dataset.space().n_concepts()).map(|k| dataset.space().concept(k).to_vec()).collect();
        let text_before = dataset.space().text_map_array();

        let cfg = micro_config();
        let out = data_dir.path().join("run");
        let outcome = train(&dataset, &cfg, &out, None, false).unwrap();

        let init = SepModel::init(cfg.sep, cfg.seed ^ 0x5ebc_5e6f_9d1b_3a77).unwrap();
        let moved = outcome
            .checkpoint
            .params
            .iter()
            .any(|(name, arr)| arr.data() != init.param(name).unwrap().data());
        assert!(moved, "one step at nonzero lr must move some parameter");

        for (k, before) in space_before.iter().enumerate() {
            assert_eq!(before.as_slice(), dataset.space().concept(k));
        }
        assert_eq!(text_before, dataset.space().text_map_array());
    }

    #[test]
    fn resume_continues_the_schedule_and_matches_an_unbroken_run() {
        let data_dir = tempfile::tempdir().unwrap();
        let dataset = micro_dataset(data_dir.path(), 305);
        let cfg = TrainConfig { total_steps: 6, checkpoint_every: 3, ..micro_config() };

        let full_out = data_dir.path().join("full");
        let full = train(&dataset, &cfg, &full_out, None, false).unwrap();

        let mid_path = full_out.join("checkpoint-000003.bin");
        assert!(mid_path.exists(), "cadence-3 checkpoint missing");
        let resumed_out = data_dir.path().join("resumed");
        let resumed = train(&dataset, &cfg, &resumed_out, Some(&mid_path), false).unwrap();

        assert_eq!(resumed.records.first().unwrap().step, 4);
        assert_eq!(
            resumed.records.iter().map(|r| r.lr).collect::<Vec<_>>(),
            full.records[3..].iter().map(|r| r.lr).collect::<Vec<_>>()
        );
        assert_eq!(
            fs::read(&resumed.checkpoint_path).unwrap(),
            fs::read(&full.checkpoint_path).unwrap(),
            "resumed run must land on the identical final checkpoint"
        );

        let other = TrainConfig { base_lr: 1e-3, ..cfg.clone() };
        let err = train(&dataset, &other, &data_dir.path().join("x"), Some(&mid_path), false);
        assert!(matches!(err, Err(TrainerError::ConfigMismatch { .. })));
        let forced =
            train(&dataset, &other, &data_dir.path().join("forced"), Some(&mid_path), true);
        assert!(forced.is_ok());
    }

    #[test]
    fn exploding_steps_abort_with_the_last_good_checkpoint_retained() {
        let data_dir = tempfile::tempdir().unwrap();
        let dataset = micro_dataset(data_dir.path(), 306);
        let cfg = TrainConfig {
            base_lr: 1e80,
            warmup_steps: 0,
            total_steps: 8,
            checkpoint_every: 1,
            ..micro_config()
        };
        let out = data_dir.path().join("boom");
        let err = train(&dataset, &cfg, &out, None, false);
        match err {
            Err(TrainerError::NonFinite { step, last_good }) => {
                assert!(step >= 2, "first step starts from sane parameters");
                let p = PathBuf::from(last_good);
                assert!(p.exists());
                let ckpt = load_checkpoint(&p).unwrap();
                assert!(ckpt.step < step);
                assert!(ckpt.params.values().all(|a| a.data().iter().all(|v| v.is_finite())));
            }
            other => panic!("expected a non-finite abort, got {other:?}"),
        }
    }

    #[test]
    fn rebuilding_a_model_from_a_checkpoint_validates_the_registry() {
        let model = SepModel::init(
            SepConfig { f_log: 8, n_frames: 8, base_width: 2, d: 4, sigmoid_mask: false },
            62,
        )
        .unwrap();
        let summary =
            LossRecord { step: 0, l_mask: 0.0, l_tri: 0.0, l_al: 0.0, total: 0.0, lr: 0.0 };
        let ckpt = checkpoint_of(&model, 0, 1, summary);
        let sep = SepConfig { f_log: 8, n_frames: 8, base_width: 2, d: 4, sigmoid_mask: false };
        let back = model_from_checkpoint(&ckpt, sep).unwrap();
        for name in model.param_names() {
            assert_eq!(model.param(&name).unwrap().data(), back.param(&name).unwrap().data());
        }
        let mut broken = ckpt.clone();
        broken.params.remove("head.b");
        assert!(model_from_checkpoint(&broken, sep).is_err());
    }
}
