//! Synthetic paired audio/video corpus with known ground-truth sources.
//!
//! Each concept owns a harmonic "instrument": a fundamental frequency on a
//! geometric ladder, a geometric harmonic-decay profile, and a slow
//! amplitude-modulation rate. Its visual side is the concept's raw
//! signature planted as a contiguous patch block in an otherwise-noise
//! feature grid. A dataset is solos (one concept per example) plus duet
//! examples carrying two concepts and both reference tracks.
//!
//! Rendered samples are snapped to the 16-bit PCM grid with peak amplitude
//! one quantization step under half scale, so a two-source mixture is
//! integer-exact in the stored files: `wav(mix) = wav(ref0) + wav(ref1)`
//! sample by sample, with no clipping possible.
//!
//! Everything is a pure function of (config, seed): per-example streams are
//! derived as `seed XOR example-index`, generation parallelizes across
//! examples, and manifests are byte-identical across runs.

use std::f64::consts::TAU;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dsp::{self, DspError, Waveform};
use crate::foundation::{ConceptSpace, ConceptSpaceConfig, FoundationError, RawGrid};
use crate::util::{gaussian_vec, rng_for_item, uniform_vec};

/// Quantization levels per unit amplitude in stored WAVs.
const PCM_SCALE: f64 = 32767.0;
/// Rendered peak: one PCM step under half scale, so duet sums never clip.
const RENDER_PEAK: f64 = 16383.0 / 32767.0;
/// Most harmonics any concept renders.
const MAX_HARMONICS: usize = 10;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("datagen: {0}")]
    Invalid(String),
    #[error("datagen: grid too small: {0}")]
    TooSmall(String),
    #[error("datagen: {0}")]
    Dsp(#[from] DspError),
    #[error("datagen: {0}")]
    Foundation(#[from] FoundationError),
    #[error("datagen: {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("datagen: manifest line {line}: {msg}")]
    BadManifest { line: usize, msg: String },
}

type Result<T> = std::result::Result<T, DatagenError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatagenError + '_ {
    move |source| DatagenError::Io { path: path.display().to_string(), source }
}

// ---------------------------------------------------------------------------
// Concept audio models
// ---------------------------------------------------------------------------

/// Per-concept harmonic voice parameters.
#[derive(Clone, Debug)]
pub struct ConceptAudioModel {
    sample_rate: u32,
    /// Fundamental per concept, Hz.
    f0_hz: Vec<f64>,
    /// Geometric amplitude ratio between consecutive harmonics.
    decay: Vec<f64>,
    /// Amplitude-modulation rate per concept, Hz.
    am_rate_hz: Vec<f64>,
    /// Harmonics rendered per concept (all below Nyquist).
    n_harmonics: Vec<usize>,
}

impl ConceptAudioModel {
    /// Fundamentals on a geometric ladder from 300 Hz to 1830 Hz, decay
    /// profiles from 0.55 to 0.85, AM rates from 3 Hz to 8 Hz.
    pub fn standard(k: usize, sample_rate: u32) -> Result<Self> {
        if k < 2 {
            return Err(DatagenError::Invalid("need at least 2 concepts".into()));
        }
        let nyquist = sample_rate as f64 / 2.0;
        let (lo, hi) = (300.0, 1830.0);
        if 3.0 * hi >= nyquist {
            return Err(DatagenError::Invalid(format!(
                "sample rate {sample_rate} cannot carry 3 harmonics of {hi} Hz"
            )));
        }
        let mut f0_hz = Vec::with_capacity(k);
        let mut decay = Vec::with_capacity(k);
        let mut am_rate_hz = Vec::with_capacity(k);
        let mut n_harmonics = Vec::with_capacity(k);
        for i in 0..k {
            let frac = i as f64 / (k - 1) as f64;
            let f0 = lo * (hi / lo).powf(frac);
            f0_hz.push(f0);
            decay.push(0.55 + 0.30 * frac);
            am_rate_hz.push(3.0 + 5.0 * frac);
            let fit = ((nyquist * 0.999) / f0).floor() as usize;
            n_harmonics.push(fit.min(MAX_HARMONICS));
        }
        Ok(Self { sample_rate, f0_hz, decay, am_rate_hz, n_harmonics })
    }

    pub fn n_concepts(&self) -> usize {
        self.f0_hz.len()
    }

    pub fn f0(&self, concept: usize) -> f64 {
        self.f0_hz[concept]
    }

    pub fn harmonics(&self, concept: usize) -> usize {
        self.n_harmonics[concept]
    }
}

/// Renders a concept's voice: AM-enveloped harmonic stack with random
/// phases, peak-normalized to half scale and snapped to the PCM grid.
pub fn render_source(
    model: &ConceptAudioModel,
    concept: usize,
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Waveform> {
    if concept >= model.n_concepts() {
        return Err(DatagenError::Invalid(format!(
            "concept {concept} out of range 0..{}",
            model.n_concepts()
        )));
    }
    if n_samples == 0 {
        return Err(DatagenError::Invalid("cannot render 0 samples".into()));
    }
    let nh = model.n_harmonics[concept];
    let phases = uniform_vec(rng, nh + 1, 0.0, TAU);
    let f0 = model.f0_hz[concept];
    let r = model.decay[concept];
    let am = model.am_rate_hz[concept];
    let sr = model.sample_rate as f64;
    let mut samples = vec![0.0; n_samples];
    for (t, s) in samples.iter_mut().enumerate() {
        let time = t as f64 / sr;
        let env = 0.75 + 0.25 * (TAU * am * time + phases[nh]).sin();
        let mut v = 0.0;
        let mut amp = 1.0;
        for h in 0..nh {
            v += amp * (TAU * f0 * (h + 1) as f64 * time + phases[h]).sin();
            amp *= r;
        }
        *s = env * v;
    }
    let peak = samples.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if peak <= 0.0 {
        return Err(DatagenError::Invalid("rendered silence".into()));
    }
    let scale = RENDER_PEAK / peak;
    for s in samples.iter_mut() {
        *s = (*s * scale * PCM_SCALE).round() / PCM_SCALE;
    }
    Ok(Waveform::new(samples, model.sample_rate)?)
}

// ---------------------------------------------------------------------------
// Video feature grids
// ---------------------------------------------------------------------------

/// Placement of one concept's signature block (same in every frame).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPos {
    pub concept: usize,
    pub h0: usize,
    pub w0: usize,
    pub size: usize,
}

impl BlockPos {
    pub fn contains(&self, hi: usize, wi: usize) -> bool {
        hi >= self.h0 && hi < self.h0 + self.size && wi >= self.w0 && wi < self.w0 + self.size
    }

    fn overlaps(&self, other: &BlockPos) -> bool {
        self.h0 < other.h0 + other.size
            && other.h0 < self.h0 + self.size
            && self.w0 < other.w0 + other.size
            && other.w0 < self.w0 + self.size
    }
}

/// Grid geometry and noise levels for rendered videos.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct VideoLayout {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub block_size: usize,
    /// Noise added on top of signatures inside blocks.
    pub sigma_block: f64,
    /// Noise filling background patches.
    pub sigma_bg: f64,
}

impl Default for VideoLayout {
    fn default() -> Self {
        Self { t: 4, h: 4, w: 4, block_size: 2, sigma_block: 0.1, sigma_bg: 1.0 }
    }
}

/// Plants one signature block per concept (non-overlapping, positions drawn
/// from `rng`) into a noise grid; block positions are returned for
/// attention-map evaluation.
pub fn render_video(
    space: &ConceptSpace,
    concepts: &[usize],
    layout: &VideoLayout,
    rng: &mut ChaCha8Rng,
) -> Result<(RawGrid, Vec<BlockPos>)> {
    if concepts.is_empty() || concepts.len() > 2 {
        return Err(DatagenError::Invalid(format!(
            "a video carries 1 or 2 concepts, not {}",
            concepts.len()
        )));
    }
    if concepts.iter().any(|&c| c >= space.n_concepts()) {
        return Err(DatagenError::Invalid("concept id out of range".into()));
    }
    let (t, h, w, b) = (layout.t, layout.h, layout.w, layout.block_size);
    if b == 0 || t == 0 {
        return Err(DatagenError::Invalid("block size and frame count must be positive".into()));
    }
    if h < b || w < b {
        return Err(DatagenError::TooSmall(format!("{h}x{w} grid cannot hold a {b}x{b} block")));
    }
    let spots: Vec<(usize, usize)> =
        (0..=h - b).flat_map(|h0| (0..=w - b).map(move |w0| (h0, w0))).collect();
    let blocks: Vec<BlockPos> = if concepts.len() == 1 {
        let (h0, w0) = spots[rng.random_range(0..spots.len())];
        vec![BlockPos { concept: concepts[0], h0, w0, size: b }]
    } else {
        let pairs: Vec<(BlockPos, BlockPos)> = spots
            .iter()
            .flat_map(|&(h0, w0)| {
                let first = BlockPos { concept: concepts[0], h0, w0, size: b };
                spots.iter().filter_map(move |&(h1, w1)| {
                    let second = BlockPos { concept: concepts[1], h0: h1, w0: w1, size: b };
                    (!first.overlaps(&second)).then_some((first, second))
                })
            })
            .collect();
        if pairs.is_empty() {
            return Err(DatagenError::TooSmall(format!(
                "{h}x{w} grid cannot hold two non-overlapping {b}x{b} blocks"
            )));
        }
        let (a, c) = pairs[rng.random_range(0..pairs.len())];
        vec![a, c]
    };

    let d_raw = space.raw_dim();
    let mut values = Vec::with_capacity(t * h * w * d_raw);
    for _ in 0..t {
        for hi in 0..h {
            for wi in 0..w {
                match blocks.iter().find(|blk| blk.contains(hi, wi)) {
                    Some(blk) => {
                        let noise = gaussian_vec(rng, d_raw, layout.sigma_block);
                        let sig = space.signature(blk.concept);
                        values.extend(sig.iter().zip(noise).map(|(s, n)| s + n));
                    }
                    None => values.extend(gaussian_vec(rng, d_raw, layout.sigma_bg)),
                }
            }
        }
    }
    Ok((RawGrid::new(t, h, w, d_raw, values)?, blocks))
}

// ---------------------------------------------------------------------------
// Grid files
// ---------------------------------------------------------------------------

const GRID_MAGIC: &[u8; 9] = b"VASTGRID1";

pub fn write_grid(path: &Path, grid: &RawGrid) -> Result<()> {
    let mut out = Vec::with_capacity(9 + 16 + grid.values.len() * 8);
    out.extend_from_slice(GRID_MAGIC);
    for dim in [grid.t, grid.h, grid.w, grid.d_raw] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in &grid.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&out).map_err(io_err(path))?;
    Ok(())
}

pub fn read_grid(path: &Path) -> Result<RawGrid> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    if bytes.len() < 25 || &bytes[..9] != GRID_MAGIC {
        return Err(DatagenError::Invalid(format!(
            "{}: missing VASTGRID1 header",
            path.display()
        )));
    }
    let dim = |i: usize| {
        u32::from_le_bytes(bytes[9 + 4 * i..13 + 4 * i].try_into().unwrap()) as usize
    };
    let (t, h, w, d_raw) = (dim(0), dim(1), dim(2), dim(3));
    let need = 25 + 8 * t * h * w * d_raw;
    if bytes.len() != need {
        return Err(DatagenError::Invalid(format!(
            "{}: expected {need} bytes for {t}x{h}x{w}x{d_raw}, got {}",
            path.display(),
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes[25..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(RawGrid::new(t, h, w, d_raw, values)?)
}

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        };
        f.write_str(s)
    }
}

/// Everything that determines a generated dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataConfig {
    pub train_solos: usize,
    pub val_solos: usize,
    pub test_solos: usize,
    pub test_duets: usize,
    pub layout: VideoLayout,
    pub n_samples: usize,
    pub sample_rate: u32,
    pub seed: u64,
    pub space: ConceptSpaceConfig,
    pub space_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_solos: 200,
            val_solos: 20,
            test_solos: 20,
            test_duets: 20,
            layout: VideoLayout::default(),
            // One 32-frame compact spectrogram plus one hop of slack.
            n_samples: 3937,
            sample_rate: 11025,
            seed: 17,
            space: ConceptSpaceConfig::default(),
            space_seed: 2024,
        }
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub split: Split,
    pub concepts: Vec<usize>,
    pub wav: String,
    pub grid: String,
    /// Ground-truth source tracks, index-aligned with `concepts`.
    pub refs: Vec<String>,
    pub blocks: Vec<BlockPos>,
    pub wav_sha256: String,
    pub grid_sha256: String,
}

/// A generated (or reloaded) dataset: records plus the frozen concept
/// space every grid and query refers to.
pub struct Dataset {
    config: DataConfig,
    records: Vec<ManifestRecord>,
    root: PathBuf,
    space: ConceptSpace,
}

fn sha_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

struct Plan {
    index: u64,
    id: String,
    split: Split,
    kind: Kind,
}

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    Solo(usize),
    Duet(usize),
}

impl Dataset {
    /// Renders every example and writes WAVs, grids, reference tracks, the
    /// JSONL manifest, and the resolved config under `dir`.
    pub fn generate(config: DataConfig, dir: &Path) -> Result<Self> {
        let k = config.space.k;
        if config.n_samples < 1024 {
            return Err(DatagenError::Invalid(format!(
                "n_samples {} too short for spectrogram work",
                config.n_samples
            )));
        }
        let space = ConceptSpace::generate(config.space, config.space_seed)?;
        let model = ConceptAudioModel::standard(k, config.sample_rate)?;
        for sub in ["wav", "grids", "refs"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(io_err(&p))?;
        }

        let mut plans = Vec::new();
        let mut index = 0u64;
        let mut push = |plans: &mut Vec<Plan>, split: Split, kind_name: &str, i: usize, kind: Kind| {
            plans.push(Plan {
                index,
                id: format!("{split}-{kind_name}-{i:04}"),
                split,
                kind,
            });
            index += 1;
        };
        for i in 0..config.train_solos {
            push(&mut plans, Split::Train, "solo", i, Kind::Solo(i % k));
        }
        for i in 0..config.val_solos {
            push(&mut plans, Split::Val, "solo", i, Kind::Solo(i % k));
        }
        for i in 0..config.test_solos {
            push(&mut plans, Split::Test, "solo", i, Kind::Solo(i % k));
        }
        for i in 0..config.test_duets {
            push(&mut plans, Split::Test, "duet", i, Kind::Duet(i % k));
        }

        let records: Vec<ManifestRecord> = plans
            .par_iter()
            .map(|plan| Self::render_example(plan, &config, &space, &model, dir))
            .collect::<Result<Vec<_>>>()?;

        let manifest_path = dir.join("manifest.jsonl");
        let mut manifest = String::new();
        for r in &records {
            manifest.push_str(&serde_json::to_string(r).expect("record serializes"));
            manifest.push('\n');
        }
        std::fs::write(&manifest_path, manifest).map_err(io_err(&manifest_path))?;
        let cfg_path = dir.join("dataset-config.json");
        let cfg_json = serde_json::to_string_pretty(&config).expect("config serializes");
        std::fs::write(&cfg_path, cfg_json).map_err(io_err(&cfg_path))?;

        Ok(Self { config, records, root: dir.to_path_buf(), space })
    }

    fn render_example(
        plan: &Plan,
        config: &DataConfig,
        space: &ConceptSpace,
        model: &ConceptAudioModel,
        dir: &Path,
    ) -> Result<ManifestRecord> {
        let mut rng = rng_for_item(config.seed, plan.index);
        let k = space.n_concepts();
        let concepts: Vec<usize> = match plan.kind {
            Kind::Solo(c) => vec![c],
            Kind::Duet(first) => {
                let shift = rng.random_range(1..k);
                vec![first, (first + shift) % k]
            }
        };
        let sources: Vec<Waveform> = concepts
            .iter()
            .map(|&c| render_source(model, c, config.n_samples, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let mixture = if sources.len() == 1 {
            sources[0].clone()
        } else {
            dsp::mix(&sources[0], &sources[1])?
        };
        let (grid, blocks) = render_video(space, &concepts, &config.layout, &mut rng)?;

        let wav_rel = format!("wav/{}.wav", plan.id);
        let grid_rel = format!("grids/{}.grid", plan.id);
        dsp::write_wav(&dir.join(&wav_rel), &mixture)?;
        write_grid(&dir.join(&grid_rel), &grid)?;
        let refs: Vec<String> = if sources.len() == 1 {
            vec![wav_rel.clone()]
        } else {
            sources
                .iter()
                .enumerate()
                .map(|(j, s)| {
                    let rel = format!("refs/{}.{j}.wav", plan.id);
                    dsp::write_wav(&dir.join(&rel), s).map(|()| rel)
                })
                .collect::<std::result::Result<Vec<_>, DspError>>()?
        };

        let wav_bytes = std::fs::read(dir.join(&wav_rel)).map_err(io_err(dir))?;
        let grid_bytes = std::fs::read(dir.join(&grid_rel)).map_err(io_err(dir))?;
        Ok(ManifestRecord {
            id: plan.id.clone(),
            split: plan.split,
            concepts,
            wav: wav_rel,
            grid: grid_rel,
            refs,
            blocks,
            wav_sha256: sha_hex(&wav_bytes),
            grid_sha256: sha_hex(&grid_bytes),
        })
    }

    /// Reloads a dataset from its directory, regenerating the concept space
    /// from the stored config.
    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join("dataset-config.json");
        let cfg_text = std::fs::read_to_string(&cfg_path).map_err(io_err(&cfg_path))?;
        let config: DataConfig = serde_json::from_str(&cfg_text)
            .map_err(|e| DatagenError::Invalid(format!("{}: {e}", cfg_path.display())))?;
        let manifest_path = dir.join("manifest.jsonl");
        let text = std::fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(line)
                .map_err(|e| DatagenError::BadManifest { line: i + 1, msg: e.to_string() })?;
            records.push(rec);
        }
        let space = ConceptSpace::generate(config.space, config.space_seed)?;
        Ok(Self { config, records, root: dir.to_path_buf(), space })
    }

    pub fn config(&self) -> &DataConfig {
        &self.config
    }

    pub fn space(&self) -> &ConceptSpace {
        &self.space
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn records(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn all_records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn solos(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records
            .iter()
            .filter(|r| r.split == split && r.concepts.len() == 1)
            .collect()
    }

    pub fn duets(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records
            .iter()
            .filter(|r| r.split == split && r.concepts.len() == 2)
            .collect()
    }

    pub fn waveform(&self, rec: &ManifestRecord) -> Result<Waveform> {
        Ok(dsp::read_wav(&self.root.join(&rec.wav))?)
    }

    pub fn grid(&self, rec: &ManifestRecord) -> Result<RawGrid> {
        read_grid(&self.root.join(&rec.grid))
    }

    pub fn references(&self, rec: &ManifestRecord) -> Result<Vec<Waveform>> {
        rec.refs
            .iter()
            .map(|r| Ok(dsp::read_wav(&self.root.join(r))?))
            .collect()
    }
}
