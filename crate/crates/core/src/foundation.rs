//! The frozen multimodal encoder stand-in: a seeded joint embedding space
//! shared by text tokens and visual features, with attention pooling,
//! region encoding, attention distributions, and latent-caption extraction
//! by gradient ascent on token parameters.
//!
//! Construction guarantees, by explicit solves rather than by luck:
//! text tokens `e_k` map exactly onto their unit concept vectors `c_k`,
//! visual signatures `s_k` lift exactly onto `c_k` as well, and the
//! vision-side projection adds a fixed off-span offset `δ·g_k` (the
//! modality gap) with every `g_k` orthonormal to the whole concept span.
//! Text queries therefore sit exactly on the concept span while visual
//! region embeddings sit beside it — the asymmetry the alignment losses
//! have to bridge.
//!
//! Sums over regions are accumulated in value-sorted order, which makes
//! pooling exactly invariant to region permutation.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::linalg::{self, LinalgError};
use crate::tensor::{Array, Graph, TensorError, EPS_NORM};
use crate::util::{gaussian_vec, rng_from_seed};

#[derive(Debug, Error)]
pub enum FoundationError {
    #[error("foundation: {0}")]
    Invalid(String),
    #[error("foundation: degenerate input: {0}")]
    Degenerate(String),
    #[error("foundation: {0}")]
    Linalg(#[from] LinalgError),
    #[error("foundation: {0}")]
    Tensor(#[from] TensorError),
    #[error("foundation: io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("foundation: malformed caption file: {0}")]
    BadCaption(String),
}

type Result<T> = std::result::Result<T, FoundationError>;

/// Origin of an embedding grid's vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    VisualRegion,
    Pooled,
    Text,
    Audio,
}

/// T × H × W grid of D-dimensional embeddings (T = H = W = 1 degenerates to
/// a single vector).
#[derive(Clone, Debug)]
pub struct EmbeddingGrid {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub values: Vec<f64>,
    pub modality: Modality,
}

impl EmbeddingGrid {
    pub fn region(&self, ti: usize, hi: usize, wi: usize) -> &[f64] {
        let base = ((ti * self.h + hi) * self.w + wi) * self.d;
        &self.values[base..base + self.d]
    }

    pub fn frame(&self, ti: usize) -> &[f64] {
        let stride = self.h * self.w * self.d;
        &self.values[ti * stride..(ti + 1) * stride]
    }

    pub fn regions_per_frame(&self) -> usize {
        self.h * self.w
    }
}

/// Raw (pre-encoder) feature grid attached to a video: T × H × W patches of
/// D_raw reals.
#[derive(Clone, Debug)]
pub struct RawGrid {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub d_raw: usize,
    pub values: Vec<f64>,
}

impl RawGrid {
    pub fn new(t: usize, h: usize, w: usize, d_raw: usize, values: Vec<f64>) -> Result<Self> {
        if t * h * w * d_raw != values.len() || t == 0 || h == 0 || w == 0 || d_raw == 0 {
            return Err(FoundationError::Invalid(format!(
                "raw grid {t}x{h}x{w}x{d_raw} does not fit {} values",
                values.len()
            )));
        }
        Ok(Self { t, h, w, d_raw, values })
    }

    pub fn patch(&self, ti: usize, hi: usize, wi: usize) -> &[f64] {
        let base = ((ti * self.h + hi) * self.w + wi) * self.d_raw;
        &self.values[base..base + self.d_raw]
    }
}

/// Sizing and modality-gap strength for a generated concept space.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct ConceptSpaceConfig {
    pub k: usize,
    pub d: usize,
    pub d_tok: usize,
    pub d_raw: usize,
    /// Length of the off-span offset added to visual embeddings.
    pub gap_delta: f64,
}

impl Default for ConceptSpaceConfig {
    fn default() -> Self {
        Self { k: 8, d: 32, d_tok: 16, d_raw: 24, gap_delta: 1.0 }
    }
}

/// Frozen attention-pooling projections, all D × D row-major.
#[derive(Clone, Debug)]
pub struct AttnPoolParams {
    pub w_k: Vec<f64>,
    pub w_q: Vec<f64>,
    pub w_v: Vec<f64>,
    pub w_l: Vec<f64>,
    pub d: usize,
}

/// The generated joint space: every field is immutable after construction
/// and fully determined by (config, seed).
#[derive(Clone, Debug)]
pub struct ConceptSpace {
    cfg: ConceptSpaceConfig,
    seed: u64,
    /// K × D, orthonormal rows c_k.
    concepts: Vec<f64>,
    /// K × D, orthonormal rows g_k, each orthogonal to every c_j.
    gap_dirs: Vec<f64>,
    /// K × D_tok token embeddings e_k.
    tokens: Vec<f64>,
    /// K × D_raw visual signatures s_k.
    signatures: Vec<f64>,
    /// D × D_tok map with text_map · e_k = c_k exactly.
    text_map: Vec<f64>,
    /// D × D_raw lift with visual_lift · s_k = c_k exactly.
    visual_lift: Vec<f64>,
    pool: AttnPoolParams,
    /// W_L · W_V, cached: identity plus the rank-K gap term.
    joint_map: Vec<f64>,
}

fn mat_vec(m: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(m.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    (0..rows)
        .map(|r| m[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// Sum in value-sorted order: permutation of the inputs cannot change the
/// result.
fn stable_sum(mut vals: Vec<f64>) -> f64 {
    vals.sort_unstable_by(f64::total_cmp);
    vals.iter().sum()
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na < EPS_NORM || nb < EPS_NORM {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// `map = base · eᵀ(e·eᵀ)⁻¹ … ` — the minimum-norm linear map sending each
/// row of `sources` (K × n) onto the matching row of `targets` (K × d).
fn exact_row_map(
    sources: &[f64],
    targets: &[f64],
    k: usize,
    n: usize,
    d: usize,
) -> Result<Vec<f64>> {
    // gram = sources·sourcesᵀ (K × K), coef = gram⁻¹·sources (K × n).
    let mut gram = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            gram[i * k + j] = sources[i * n..(i + 1) * n]
                .iter()
                .zip(&sources[j * n..(j + 1) * n])
                .map(|(a, b)| a * b)
                .sum();
        }
    }
    let coef = linalg::spd_solve_multi(&gram, k, sources, n)?;
    // map = targetsᵀ · coef (d × n).
    let mut map = vec![0.0; d * n];
    for kk in 0..k {
        for r in 0..d {
            let tv = targets[kk * d + r];
            for c in 0..n {
                map[r * n + c] += tv * coef[kk * n + c];
            }
        }
    }
    Ok(map)
}

impl ConceptSpace {
    pub fn generate(cfg: ConceptSpaceConfig, seed: u64) -> Result<Self> {
        let (k, d, d_tok, d_raw) = (cfg.k, cfg.d, cfg.d_tok, cfg.d_raw);
        if k < 2 {
            return Err(FoundationError::Invalid("need at least 2 concepts".into()));
        }
        if d < 2 * k || d_tok < k || d_raw < k {
            return Err(FoundationError::Invalid(format!(
                "dims too small: d={d} (need ≥ {}), d_tok={d_tok}, d_raw={d_raw} (need ≥ {k})",
                2 * k
            )));
        }
        if !cfg.gap_delta.is_finite() || cfg.gap_delta < 0.0 {
            return Err(FoundationError::Invalid(format!(
                "gap_delta must be a finite nonnegative real, got {}",
                cfg.gap_delta
            )));
        }
        let mut rng = rng_from_seed(seed);

        // Concept span and gap directions: orthonormalize 2K Gaussian rows
        // jointly so the last K are orthonormal and orthogonal to the span.
        let joint = gaussian_vec(&mut rng, 2 * k * d, 1.0);
        let ortho = linalg::orthonormalize_rows(&joint, 2 * k, d)?;
        let concepts = ortho[..k * d].to_vec();
        let gap_dirs = ortho[k * d..].to_vec();

        let tokens = gaussian_vec(&mut rng, k * d_tok, 1.0);
        let signatures = gaussian_vec(&mut rng, k * d_raw, 1.0);
        let text_map = exact_row_map(&tokens, &concepts, k, d_tok, d)?;
        let visual_lift = exact_row_map(&signatures, &concepts, k, d_raw, d)?;

        // Value projection: a random rotation; language projection: the gap
        // map composed with its inverse rotation, so W_L·W_V = I + δ·Σ g c ᵀ.
        let w_v = linalg::orthonormalize_rows(&gaussian_vec(&mut rng, d * d, 1.0), d, d)?;
        let mut joint_map = vec![0.0; d * d];
        for i in 0..d {
            joint_map[i * d + i] = 1.0;
        }
        for kk in 0..k {
            for i in 0..d {
                let gv = cfg.gap_delta * gap_dirs[kk * d + i];
                for j in 0..d {
                    joint_map[i * d + j] += gv * concepts[kk * d + j];
                }
            }
        }
        // w_l = joint_map · w_vᵀ.
        let mut w_l = vec![0.0; d * d];
        for i in 0..d {
            for l in 0..d {
                let mv = joint_map[i * d + l];
                for j in 0..d {
                    w_l[i * d + j] += mv * w_v[j * d + l];
                }
            }
        }
        let scale = 1.0 / (d as f64).sqrt();
        let w_k = gaussian_vec(&mut rng, d * d, scale);
        let w_q = gaussian_vec(&mut rng, d * d, scale);
        let pool = AttnPoolParams { w_k, w_q, w_v, w_l, d };

        Ok(Self {
            cfg,
            seed,
            concepts,
            gap_dirs,
            tokens,
            signatures,
            text_map,
            visual_lift,
            pool,
            joint_map,
        })
    }

    pub fn config(&self) -> &ConceptSpaceConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_concepts(&self) -> usize {
        self.cfg.k
    }

    pub fn dim(&self) -> usize {
        self.cfg.d
    }

    pub fn token_dim(&self) -> usize {
        self.cfg.d_tok
    }

    pub fn raw_dim(&self) -> usize {
        self.cfg.d_raw
    }

    /// Unit concept vector c_k — also the evaluation-time text query.
    pub fn concept(&self, k: usize) -> &[f64] {
        &self.concepts[k * self.cfg.d..(k + 1) * self.cfg.d]
    }

    /// Off-span gap direction g_k.
    pub fn gap_dir(&self, k: usize) -> &[f64] {
        &self.gap_dirs[k * self.cfg.d..(k + 1) * self.cfg.d]
    }

    /// Token embedding e_k.
    pub fn token(&self, k: usize) -> &[f64] {
        &self.tokens[k * self.cfg.d_tok..(k + 1) * self.cfg.d_tok]
    }

    /// Raw visual signature s_k used by the data generator.
    pub fn signature(&self, k: usize) -> &[f64] {
        &self.signatures[k * self.cfg.d_raw..(k + 1) * self.cfg.d_raw]
    }

    pub fn pool_params(&self) -> &AttnPoolParams {
        &self.pool
    }

    /// The text map as a graph constant (`[D, D_tok]`).
    pub fn text_map_array(&self) -> Array {
        Array::new(vec![self.cfg.d, self.cfg.d_tok], self.text_map.clone())
            .expect("text map dims fixed at construction")
    }

    /// Mean token embedding through the text map, unit-normalized.
    pub fn encode_text(&self, token_rows: &[f64], n_tokens: usize) -> Result<Vec<f64>> {
        if n_tokens == 0 || token_rows.len() != n_tokens * self.cfg.d_tok {
            return Err(FoundationError::Invalid(format!(
                "expected {n_tokens} x {} token rows, got {} values",
                self.cfg.d_tok,
                token_rows.len()
            )));
        }
        let mut mean = vec![0.0; self.cfg.d_tok];
        for row in token_rows.chunks_exact(self.cfg.d_tok) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n_tokens as f64;
        }
        let mapped = mat_vec(&self.text_map, self.cfg.d, self.cfg.d_tok, &mean);
        let n = norm(&mapped);
        if n < EPS_NORM {
            return Err(FoundationError::Degenerate(
                "token mean maps to the zero vector".into(),
            ));
        }
        Ok(mapped.iter().map(|v| v / n).collect())
    }

    /// Pre-projection patch features f^I = visual_lift · raw.
    pub fn lift_regions(&self, raw: &RawGrid) -> Result<Vec<f64>> {
        if raw.d_raw != self.cfg.d_raw {
            return Err(FoundationError::Invalid(format!(
                "raw dim {} != expected {}",
                raw.d_raw, self.cfg.d_raw
            )));
        }
        let mut out = Vec::with_capacity(raw.t * raw.h * raw.w * self.cfg.d);
        for patch in raw.values.chunks_exact(self.cfg.d_raw) {
            out.extend(mat_vec(&self.visual_lift, self.cfg.d, self.cfg.d_raw, patch));
        }
        Ok(out)
    }

    /// Final region embeddings f^V: lift then value/language projections.
    pub fn encode_regions(&self, raw: &RawGrid) -> Result<EmbeddingGrid> {
        let lifted = self.lift_regions(raw)?;
        let d = self.cfg.d;
        let mut values = Vec::with_capacity(lifted.len());
        for f in lifted.chunks_exact(d) {
            values.extend(mat_vec(&self.joint_map, d, d, f));
        }
        Ok(EmbeddingGrid {
            t: raw.t,
            h: raw.h,
            w: raw.w,
            d,
            values,
            modality: Modality::VisualRegion,
        })
    }

    /// The attention-pooled embedding of the center frame, in joint space.
    pub fn encode_center_frame(&self, raw: &RawGrid) -> Result<Vec<f64>> {
        let lifted = self.lift_regions(raw)?;
        let frame_len = raw.h * raw.w * self.cfg.d;
        let center = raw.t / 2;
        attention_pool(&self.pool, &lifted[center * frame_len..(center + 1) * frame_len])
    }
}

/// Attention pooling of one frame of pre-projection features (HW × D): the
/// key comes from the spatial mean, queries and values from the regions,
/// and the weighted value sum is pushed through the language projection.
pub fn attention_pool(params: &AttnPoolParams, frame: &[f64]) -> Result<Vec<f64>> {
    let d = params.d;
    if frame.is_empty() || frame.len() % d != 0 {
        return Err(FoundationError::Invalid(format!(
            "frame of {} values is not a nonempty multiple of D={d}",
            frame.len()
        )));
    }
    let hw = frame.len() / d;
    let mut mean = vec![0.0; d];
    for dim in 0..d {
        let col: Vec<f64> = (0..hw).map(|j| frame[j * d + dim]).collect();
        mean[dim] = stable_sum(col) / hw as f64;
    }
    let key = mat_vec(&params.w_k, d, d, &mean);
    let scale = 1.0 / (d as f64).sqrt();
    let scores: Vec<f64> = (0..hw)
        .map(|j| {
            let q = mat_vec(&params.w_q, d, d, &frame[j * d..(j + 1) * d]);
            q.iter().zip(&key).map(|(a, b)| a * b).sum::<f64>() * scale
        })
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total = stable_sum(weights.clone());
    let values: Vec<Vec<f64>> = (0..hw)
        .map(|j| mat_vec(&params.w_v, d, d, &frame[j * d..(j + 1) * d]))
        .collect();
    let mut pooled_v = vec![0.0; d];
    for dim in 0..d {
        let terms: Vec<f64> = (0..hw).map(|j| weights[j] / total * values[j][dim]).collect();
        pooled_v[dim] = stable_sum(terms);
    }
    Ok(mat_vec(&params.w_l, d, d, &pooled_v))
}

/// How region-attention scores become a probability vector.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum AttnMode {
    /// Exponential softmax over cosine scores at the given temperature.
    Softmax { tau: f64 },
    /// Plain share-of-total over nonnegative scores (negatives clamped).
    SumNorm,
}

impl Default for AttnMode {
    fn default() -> Self {
        AttnMode::Softmax { tau: 0.07 }
    }
}

/// Cosine scores of every region against a query, normalized into a
/// distribution. Regions with vanishing norm score zero.
pub fn attn_distribution(
    regions: &[f64],
    d: usize,
    query: &[f64],
    mode: AttnMode,
) -> Result<Vec<f64>> {
    if regions.is_empty() || regions.len() % d != 0 || query.len() != d {
        return Err(FoundationError::Invalid(format!(
            "regions len {} (D={d}) with query len {}",
            regions.len(),
            query.len()
        )));
    }
    if norm(query) < EPS_NORM {
        return Err(FoundationError::Degenerate("zero-norm query".into()));
    }
    let hw = regions.len() / d;
    let scores: Vec<f64> = (0..hw).map(|j| cosine(&regions[j * d..(j + 1) * d], query)).collect();
    match mode {
        AttnMode::Softmax { tau } => {
            if !(tau > 0.0) {
                return Err(FoundationError::Invalid(format!(
                    "softmax temperature must be positive, got {tau}"
                )));
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = scores.iter().map(|s| ((s - max) / tau).exp()).collect();
            let total = stable_sum(weights.clone());
            Ok(weights.into_iter().map(|w| w / total).collect())
        }
        AttnMode::SumNorm => {
            let clamped: Vec<f64> = scores.iter().map(|s| s.max(0.0)).collect();
            let total = stable_sum(clamped.clone());
            if total <= EPS_NORM {
                return Err(FoundationError::Degenerate(
                    "all region scores are nonpositive; share-of-total undefined".into(),
                ));
            }
            Ok(clamped.into_iter().map(|w| w / total).collect())
        }
    }
}

/// Learned pseudo-text tokens for one video, with their encoded caption.
#[derive(Clone, Debug)]
pub struct LatentCaption {
    pub n_tokens: usize,
    pub d_tok: usize,
    /// n_tokens × D_tok learned token parameters.
    pub tokens: Vec<f64>,
    /// encode_text(tokens): unit-norm joint-space caption vector.
    pub caption: Vec<f64>,
    /// Final cosine fit against the pooled center-frame embedding.
    pub fit: f64,
    pub iterations: usize,
    /// Best-so-far fit after each iteration (non-decreasing).
    pub fit_trace: Vec<f64>,
}

/// Gradient-ascent textual inversion: maximizes the cosine between the
/// pooled center-frame embedding and the encoded token mean. Returns the
/// best parameters seen, never a later worse iterate.
pub fn extract_latent_caption(
    space: &ConceptSpace,
    raw: &RawGrid,
    n_tokens: usize,
    iters: usize,
    step: f64,
    seed: u64,
) -> Result<LatentCaption> {
    if !(1..=8).contains(&n_tokens) {
        return Err(FoundationError::Invalid(format!(
            "n_tokens must be in 1..=8, got {n_tokens}"
        )));
    }
    if iters == 0 {
        return Err(FoundationError::Invalid("iters must be at least 1".into()));
    }
    if !(step > 0.0) || !step.is_finite() {
        return Err(FoundationError::Invalid(format!("step must be positive, got {step}")));
    }
    let d_tok = space.token_dim();
    let d = space.dim();
    let f_center = space.encode_center_frame(raw)?;
    if norm(&f_center) < EPS_NORM {
        return Err(FoundationError::Degenerate(
            "center-frame embedding has zero norm; nothing to invert".into(),
        ));
    }
    let center_arr = Array::new(vec![d], f_center).expect("dims agree");
    let text_map = space.text_map_array();

    let mut rng = rng_from_seed(seed);
    let mut cur = gaussian_vec(&mut rng, n_tokens * d_tok, 1.0);
    let mut best = f64::NEG_INFINITY;
    let mut best_p = cur.clone();
    let mut fit_trace = Vec::with_capacity(iters);

    for _ in 0..iters {
        let g = Graph::new();
        let p = g.leaf("p", Array::new(vec![n_tokens, d_tok], cur.clone()).expect("dims"))?;
        let ones = g.constant(
            Array::new(vec![1, n_tokens], vec![1.0 / n_tokens as f64; n_tokens]).expect("dims"),
        )?;
        let mean = g.reshape(g.matmul(ones, p)?, vec![d_tok])?;
        let al = g.constant(text_map.clone())?;
        let encoded = g.matvec(al, mean)?;
        let fc = g.constant(center_arr.clone())?;
        let fit = g.cosine(fc, encoded)?;
        g.backward(fit)?;
        let value = g.value(fit).item();
        if value > best {
            best = value;
            best_p = cur.clone();
        }
        fit_trace.push(best);
        let grad = g.grad(p);
        for (c, dv) in cur.iter_mut().zip(grad.data()) {
            *c += step * dv;
        }
    }

    let caption = space.encode_text(&best_p, n_tokens)?;
    Ok(LatentCaption {
        n_tokens,
        d_tok,
        tokens: best_p,
        caption,
        fit: best,
        iterations: iters,
        fit_trace,
    })
}

const CAPTION_MAGIC: &[u8; 7] = b"VASTLC1";

/// Persists a caption: magic, n_tokens, D_tok, D, fit, token rows, caption.
pub fn write_caption(path: &Path, cap: &LatentCaption) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CAPTION_MAGIC);
    out.extend_from_slice(&(cap.n_tokens as u32).to_le_bytes());
    out.extend_from_slice(&(cap.d_tok as u32).to_le_bytes());
    out.extend_from_slice(&(cap.caption.len() as u32).to_le_bytes());
    out.extend_from_slice(&cap.fit.to_le_bytes());
    for v in cap.tokens.iter().chain(cap.caption.iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn read_caption(path: &Path) -> Result<LatentCaption> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 7 + 12 + 8 || &bytes[..7] != CAPTION_MAGIC {
        return Err(FoundationError::BadCaption("missing VASTLC1 header".into()));
    }
    let u32_at = |off: usize| {
        u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize
    };
    let n_tokens = u32_at(7);
    let d_tok = u32_at(11);
    let d = u32_at(15);
    let fit = f64::from_le_bytes(bytes[19..27].try_into().unwrap());
    let need = 27 + 8 * (n_tokens * d_tok + d);
    if bytes.len() != need {
        return Err(FoundationError::BadCaption(format!(
            "expected {need} bytes for {n_tokens}x{d_tok} tokens + {d}-dim caption, got {}",
            bytes.len()
        )));
    }
    let mut vals = bytes[27..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let tokens: Vec<f64> = vals.by_ref().take(n_tokens * d_tok).collect();
    let caption: Vec<f64> = vals.collect();
    Ok(LatentCaption {
        n_tokens,
        d_tok,
        tokens,
        caption,
        fit,
        iterations: 0,
        fit_trace: Vec::new(),
    })
}
