//! Held-out evaluation: separates test mixtures with language or visual
//! queries and scores every estimate with filtered BSS metrics.
//!
//! Two protocols are provided.
//!
//! * **Language-queried** ([`eval_language`]): every test *duet* is already a
//!   two-source mixture with per-concept reference tracks, so each of its
//!   concepts is separated with that concept's text embedding and scored
//!   against the matching reference.
//! * **Visually-queried** ([`eval_audiovisual`]): each test duet is paired
//!   round-robin with a test solo, their tracks are summed into a fresh
//!   mixture, and each video then queries the model for its *own* track. The
//!   duet side recovers a composite (two-instrument) target, which is the
//!   regime where region-level queries must cover several sounding objects
//!   at once; its rows are tagged with the sentinel concept id
//!   [`composite_target`] since no single concept describes the target.
//!
//! Every row carries SDR / SIR / SAR for the estimate plus the normalized
//! SDR improvement over the unseparated mixture, all computed with the same
//! filtered decomposition as [`crate::metrics`].

use crate::datagen::{Dataset, DatagenError, ManifestRecord, Split};
use crate::dsp::{StftParams, Waveform};
use crate::foundation::{ConceptSpace, FoundationError};
use crate::metrics::{self, MetricsError, ReportRow};
use crate::sepmodel::{separate, Query, SepError, SepModel};
use crate::trainer::MilMode;
use thiserror::Error;

/// Row label for language-queried separation.
pub const MODE_LANGUAGE: &str = "AL";
/// Row label for visually-queried separation.
pub const MODE_AUDIOVISUAL: &str = "AV";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("eval: {0}")]
    Invalid(String),
    #[error("eval: {0}")]
    Data(#[from] DatagenError),
    #[error("eval: {0}")]
    Foundation(#[from] FoundationError),
    #[error("eval: {0}")]
    Sep(#[from] SepError),
    #[error("eval: {0}")]
    Metrics(#[from] MetricsError),
    #[error("eval: {0}")]
    Dsp(#[from] crate::dsp::DspError),
}

type Result<T> = std::result::Result<T, EvalError>;

/// Sentinel `target_concept` for rows whose target is a whole multi-concept
/// track rather than a single source: one past the last real concept id.
pub fn composite_target(space: &ConceptSpace) -> usize {
    space.n_concepts()
}

/// Scores `estimate` against reference `target` and appends a report row.
fn score_row(
    rows: &mut Vec<ReportRow>,
    example_id: &str,
    mode: &str,
    target_concept: usize,
    estimate: &Waveform,
    mixture: &Waveform,
    references: &[&[f64]],
    target: usize,
    taps: usize,
) -> Result<()> {
    let d = metrics::bss_decompose(estimate.samples(), references, target, taps)?;
    rows.push(ReportRow {
        example_id: example_id.to_string(),
        mode: mode.to_string(),
        target_concept,
        sdr: metrics::sdr(&d)?,
        sir: metrics::sir(&d)?,
        sar: metrics::sar(&d)?,
        nsdr: metrics::nsdr(estimate.samples(), mixture.samples(), references, target, taps)?,
    });
    Ok(())
}

/// Separates each concept of every test duet with its text-prompt embedding.
///
/// With `concept: Some(k)` only rows targeting concept `k` are produced; it
/// is an error if no test duet contains that concept. Rows appear in manifest
/// order, one per (duet, matching concept).
pub fn eval_language(
    model: &SepModel,
    dataset: &Dataset,
    params: &StftParams,
    taps: usize,
    concept: Option<usize>,
) -> Result<Vec<ReportRow>> {
    let duets = dataset.duets(Split::Test);
    if duets.is_empty() {
        return Err(EvalError::Invalid("no test duets to evaluate".into()));
    }
    let space = dataset.space();
    if let Some(k) = concept {
        if k >= space.n_concepts() {
            return Err(EvalError::Invalid(format!(
                "concept {k} out of range (have {})",
                space.n_concepts()
            )));
        }
    }
    let mut rows = Vec::new();
    for rec in &duets {
        let mixture = dataset.waveform(rec)?;
        let refs = dataset.references(rec)?;
        let ref_slices: Vec<&[f64]> = refs.iter().map(|w| w.samples()).collect();
        for (slot, &k) in rec.concepts.iter().enumerate() {
            if concept.is_some_and(|want| want != k) {
                continue;
            }
            let caption = space.encode_text(space.token(k), 1)?;
            let (estimate, _) =
                separate(model, space, *params, &mixture, Query::Caption(&caption), false)?;
            score_row(
                &mut rows,
                &rec.id,
                MODE_LANGUAGE,
                k,
                &estimate,
                &mixture,
                &ref_slices,
                slot,
                taps,
            )?;
        }
    }
    if rows.is_empty() {
        return Err(EvalError::Invalid(format!(
            "no test duet contains concept {}",
            concept.expect("unfiltered eval always yields rows")
        )));
    }
    Ok(rows)
}

/// Mixes each test duet with a test solo and lets each video query for its
/// own track.
///
/// Duet `i` is paired with solo `i % n_solos`; the mixture is the sample-wise
/// sum of their tracks and the two tracks themselves are the references. The
/// duet-side row targets the duet's composite track (tagged
/// [`composite_target`]); the solo-side row targets the solo's single
/// concept. `mil` selects how a video becomes a query: per-region masks that
/// are averaged afterwards, or one mask from a pooled video embedding.
pub fn eval_audiovisual(
    model: &SepModel,
    dataset: &Dataset,
    params: &StftParams,
    mil: MilMode,
    taps: usize,
) -> Result<Vec<ReportRow>> {
    let duets = dataset.duets(Split::Test);
    let solos = dataset.solos(Split::Test);
    if duets.is_empty() || solos.is_empty() {
        return Err(EvalError::Invalid(format!(
            "need test duets and solos, have {} and {}",
            duets.len(),
            solos.len()
        )));
    }
    let space = dataset.space();
    let mut rows = Vec::new();
    for (i, duet) in duets.iter().copied().enumerate() {
        let solo = solos[i % solos.len()];
        let duet_wav = dataset.waveform(duet)?;
        let solo_wav = dataset.waveform(solo)?;
        let mixture = mix(&duet_wav, &solo_wav)?;
        let refs: [&[f64]; 2] = [duet_wav.samples(), solo_wav.samples()];
        for (target, (rec, concept)) in [
            (duet, composite_target(space)),
            (solo, solo_concept(solo)?),
        ]
        .into_iter()
        .enumerate()
        {
            let grid = dataset.grid(rec)?;
            let query = match mil {
                MilMode::Region => Query::VideoMil(&grid),
                MilMode::Video => Query::VideoPooled(&grid),
            };
            let (estimate, _) = separate(model, space, *params, &mixture, query, false)?;
            score_row(
                &mut rows,
                &rec.id,
                MODE_AUDIOVISUAL,
                concept,
                &estimate,
                &mixture,
                &refs,
                target,
                taps,
            )?;
        }
    }
    Ok(rows)
}

fn solo_concept(rec: &ManifestRecord) -> Result<usize> {
    match rec.concepts.as_slice() {
        [k] => Ok(*k),
        other => Err(EvalError::Invalid(format!(
            "solo {} lists {} concepts",
            rec.id,
            other.len()
        ))),
    }
}

fn mix(a: &Waveform, b: &Waveform) -> Result<Waveform> {
    if a.len() != b.len() {
        return Err(EvalError::Invalid(format!(
            "cannot mix tracks of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let sum: Vec<f64> =
        a.samples().iter().zip(b.samples()).map(|(x, y)| x + y).collect();
    Ok(Waveform::new(sum, a.sample_rate())?)
}

/// Mean normalized-SDR improvement over a set of rows.
pub fn mean_nsdr(rows: &[ReportRow]) -> Result<f64> {
    if rows.is_empty() {
        return Err(EvalError::Invalid("no rows to average".into()));
    }
    Ok(rows.iter().map(|r| r.nsdr).sum::<f64>() / rows.len() as f64)
}
