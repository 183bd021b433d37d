//! The three training objectives and their weighted combination.
//!
//! - **Mask loss**: mean-per-cell L1 between each predicted mask and its
//!   mix-and-separate ratio-mask target, summed over the two sources of a
//!   pair.
//! - **Audio–language loss**: InfoNCE between the embedding of the
//!   separated spectrogram and a caption vocabulary containing its own
//!   latent caption plus in-batch negatives.
//! - **Tri-modal loss**: per-frame KL divergence between the region
//!   attention induced by the caption and the one induced by the predicted
//!   audio embedding, averaged over frames. Region features and captions
//!   enter the graph as constants, so gradients reach only the audio side.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::foundation::{AttnMode, EmbeddingGrid, FoundationError};
use crate::tensor::{Array, Graph, TensorError, TensorId};

/// Contrastive and attention temperature shared across defaults.
pub const DEFAULT_TAU: f64 = 0.07;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("losses: {0}")]
    Invalid(String),
    #[error("losses: {0}")]
    Tensor(#[from] TensorError),
    #[error("losses: {0}")]
    Foundation(#[from] FoundationError),
    #[error("losses: io on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, LossError>;

/// Scale factors for the weighted objective plus the two temperatures.
/// Defaults keep the alignment terms strictly below the mask term
/// (`lambda_al < lambda_tri < lambda_mask`), which is what damps the
/// false-negative pressure of in-batch contrast.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_mask: f64,
    pub lambda_tri: f64,
    pub lambda_al: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Region-attention temperature.
    pub tau_att: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_mask: 1.0,
            lambda_tri: 1e-2,
            lambda_al: 1e-3,
            tau: DEFAULT_TAU,
            tau_att: DEFAULT_TAU,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_mask", self.lambda_mask),
            ("lambda_tri", self.lambda_tri),
            ("lambda_al", self.lambda_al),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(LossError::Invalid(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        for (name, v) in [("tau", self.tau), ("tau_att", self.tau_att)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(LossError::Invalid(format!(
                    "{name} must be finite and positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// The attention rule the tri-modal term uses.
    pub fn attn_mode(&self) -> AttnMode {
        AttnMode::Softmax { tau: self.tau_att }
    }
}

/// The caption vocabulary a contrastive step normalizes over: one
/// unit-length caption per owning example id. The positive for every
/// example in the batch must be present.
#[derive(Clone, Debug)]
pub struct CaptionVocabulary {
    d: usize,
    ids: Vec<String>,
    rows: Vec<f64>,
}

impl CaptionVocabulary {
    pub fn new(d: usize) -> Self {
        Self { d, ids: Vec::new(), rows: Vec::new() }
    }

    /// Adds a caption under its owning example id, unit-normalizing it.
    pub fn push(&mut self, id: &str, caption: &[f64]) -> Result<()> {
        if caption.len() != self.d {
            return Err(LossError::Invalid(format!(
                "caption for {id} has {} dims, vocabulary holds {}",
                caption.len(),
                self.d
            )));
        }
        if self.ids.iter().any(|e| e == id) {
            return Err(LossError::Invalid(format!("duplicate caption id {id}")));
        }
        let norm = caption.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < crate::tensor::EPS_NORM {
            return Err(LossError::Invalid(format!("caption for {id} has zero norm")));
        }
        self.ids.push(id.to_string());
        self.rows.extend(caption.iter().map(|v| v / norm));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|e| e == id)
    }

    pub fn caption(&self, index: usize) -> &[f64] {
        &self.rows[index * self.d..(index + 1) * self.d]
    }

    fn matrix(&self) -> Array {
        Array::new(vec![self.ids.len(), self.d], self.rows.clone()).expect("rows consistent")
    }
}

/// Mean-per-cell L1 for both mask pairs of a mix-and-separate step:
/// `mean|M̂1−M1| + mean|M̂2−M2|`. Symmetric in the two pairs.
pub fn mask_loss(
    g: &Graph,
    m1_hat: TensorId,
    m2_hat: TensorId,
    m1: TensorId,
    m2: TensorId,
) -> Result<TensorId> {
    let a = g.l1_mean(m1_hat, m1)?;
    let b = g.l1_mean(m2_hat, m2)?;
    Ok(g.add(a, b)?)
}

/// InfoNCE over the caption vocabulary: `−log softmax(f̂·C*/τ)` where the
/// softmax runs over the whole vocabulary, positive included. The audio
/// embedding is re-projected onto the unit sphere in-graph, so callers may
/// hand in a raw vector and gradients respect the normalization.
pub fn audio_language_loss(
    g: &Graph,
    audio_embedding: TensorId,
    positive_id: &str,
    vocab: &CaptionVocabulary,
    tau: f64,
) -> Result<TensorId> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(LossError::Invalid(format!("tau must be finite and positive, got {tau}")));
    }
    if vocab.is_empty() {
        return Err(LossError::Invalid("caption vocabulary is empty".into()));
    }
    let target = vocab.index_of(positive_id).ok_or_else(|| {
        LossError::Invalid(format!("positive caption {positive_id} is missing from the vocabulary"))
    })?;
    let f = g.unit_normalize(audio_embedding)?;
    let mat = g.constant(vocab.matrix())?;
    let logits = g.scale(g.matvec(mat, f)?, 1.0 / tau)?;
    Ok(g.cross_entropy_logits(logits, target)?)
}

/// Per-frame region attention for a query node: scores are cosines against
/// the (pre-normalized, constant) region rows, turned into a distribution
/// by the chosen rule.
fn graph_attn(
    g: &Graph,
    unit_rows: Array,
    query_unit: TensorId,
    mode: AttnMode,
) -> Result<TensorId> {
    let rows = g.constant(unit_rows)?;
    let scores = g.matvec(rows, query_unit)?;
    match mode {
        AttnMode::Softmax { tau } => {
            if !(tau > 0.0) || !tau.is_finite() {
                return Err(LossError::Invalid(format!(
                    "attention temperature must be finite and positive, got {tau}"
                )));
            }
            Ok(g.softmax(scores, tau)?)
        }
        // Cosines never exceed 1, so the upper bound only guards rounding.
        AttnMode::SumNorm => Ok(g.sum_norm(g.clamp(scores, 0.0, 2.0)?)?),
    }
}

/// Unit-normalizes each region row, leaving silent (zero-norm) rows at
/// zero so they score exactly zero against any query.
fn unit_rows_or_zero(rows: &[f64], d: usize) -> Vec<f64> {
    let mut out = rows.to_vec();
    for row in out.chunks_exact_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm >= crate::tensor::EPS_NORM {
            for v in row.iter_mut() {
                *v /= norm;
            }
        } else {
            row.fill(0.0);
        }
    }
    out
}

/// Mean over frames of `KL(P_VC ‖ P_VA)`: the caption-induced region
/// attention is the frozen target, the audio-induced one moves. Region
/// rows and the caption enter as constants, so the only gradient path is
/// through `audio_embedding`. Both queries are unit-normalized in-graph by
/// the same operation, making the loss exactly zero when the audio
/// embedding coincides with the caption.
pub fn trimodal_loss(
    g: &Graph,
    regions: &EmbeddingGrid,
    caption: &[f64],
    audio_embedding: TensorId,
    mode: AttnMode,
) -> Result<TensorId> {
    if regions.t == 0 || regions.d == 0 {
        return Err(LossError::Invalid("region grid is empty".into()));
    }
    if caption.len() != regions.d {
        return Err(LossError::Invalid(format!(
            "caption has {} dims, regions have {}",
            caption.len(),
            regions.d
        )));
    }
    let d = regions.d;
    let hw = regions.h * regions.w;
    let c = g.unit_normalize(g.constant(Array::new(vec![d], caption.to_vec())?)?)?;
    let f = g.unit_normalize(audio_embedding)?;
    let mut total: Option<TensorId> = None;
    for t in 0..regions.t {
        let unit = unit_rows_or_zero(regions.frame(t), d);
        let rows = Array::new(vec![hw, d], unit)?;
        let p_vc = graph_attn(g, rows.clone(), c, mode)?;
        let p_va = graph_attn(g, rows, f, mode)?;
        let kl = g.kl_div(p_vc, p_va)?;
        total = Some(match total {
            Some(acc) => g.add(acc, kl)?,
            None => kl,
        });
    }
    Ok(g.scale(total.expect("t >= 1"), 1.0 / regions.t as f64)?)
}

/// The three scalar loss nodes of one training step.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub mask: TensorId,
    pub tri: TensorId,
    pub al: TensorId,
}

/// `λ_mask·L_mask + λ_tri·L_tri + λ_al·L_al`.
pub fn total_loss(g: &Graph, parts: LossParts, weights: &LossWeights) -> Result<TensorId> {
    weights.validate()?;
    let m = g.scale(parts.mask, weights.lambda_mask)?;
    let t = g.scale(parts.tri, weights.lambda_tri)?;
    let a = g.scale(parts.al, weights.lambda_al)?;
    Ok(g.add(m, g.add(t, a)?)?)
}

/// One row of the per-step training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub l_mask: f64,
    pub l_tri: f64,
    pub l_al: f64,
    pub total: f64,
    pub lr: f64,
}

/// Writes the loss log as CSV: `step,l_mask,l_tri,l_al,total,lr`.
pub fn write_loss_log(path: &Path, records: &[LossRecord]) -> Result<()> {
    let io_err = |source| LossError::Io { path: path.display().to_string(), source };
    let mut out = String::from("step,l_mask,l_tri,l_al,total,lr\n");
    for r in records {
        out.push_str(&format!(
            "{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}\n",
            r.step, r.l_mask, r.l_tri, r.l_al, r.total, r.lr
        ));
    }
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(out.as_bytes()).map_err(io_err)?;
    Ok(())
}
