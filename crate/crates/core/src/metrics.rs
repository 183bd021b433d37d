//! Blind-source-separation quality metrics: SDR, SIR, SAR, and NSDR.
//!
//! An estimate is decomposed against the reference sources by least-squares
//! projection onto subspaces spanned by time-shifted references (up to a
//! fixed number of filter taps). The target projection gives the wanted
//! part, the all-references projection adds the interference, and whatever
//! remains is artifact:
//!
//! `estimate = s_target + e_interf + e_artif` (exact by construction).
//!
//! Shifts are handled in the padded domain (length + taps − 1) so the Gram
//! matrix of shifted references is exactly block-Toeplitz and every entry
//! is a plain cross-correlation dot; the normal equations are solved with a
//! Cholesky factorization after adding a tiny diagonal jitter.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::linalg::{cholesky, cholesky_solve};
use crate::tensor::dot;

/// Diagonal regularizer added to the shifted-reference Gram matrix.
pub const BSS_JITTER: f64 = 1e-10;
/// Energies at or below this are treated as exactly zero.
pub const ENERGY_FLOOR: f64 = 1e-12;
/// Report value standing in for an infinite ratio.
pub const DB_CAP: f64 = 200.0;
/// Filter length used for reported evaluation numbers.
pub const DEFAULT_FILTER_TAPS: usize = 512;
/// Filter length used by the fast desk-scale evaluation runs.
pub const TOY_FILTER_TAPS: usize = 32;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metrics: {0}")]
    Shape(String),
    #[error("metrics: degenerate references: {0}")]
    DegenerateReferences(String),
    #[error("metrics: undefined metric: {0}")]
    Undefined(String),
    #[error("metrics: io error: {0}")]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, MetricsError>;

/// The three-way split of an estimate, all in the padded domain
/// (`len + taps − 1` samples): `padded estimate = s_target + e_interf +
/// e_artif` exactly.
#[derive(Clone, Debug)]
pub struct BssDecomposition {
    pub s_target: Vec<f64>,
    pub e_interf: Vec<f64>,
    pub e_artif: Vec<f64>,
    pub filter_taps: usize,
}

fn energy(x: &[f64]) -> f64 {
    dot(x, x)
}

/// Cross-correlations `ρ(τ) = Σ_u a(u)·b(u+τ)` for `τ = 0..taps−1`.
fn corr(a: &[f64], b: &[f64], taps: usize) -> Vec<f64> {
    (0..taps).map(|tau| dot(&a[..a.len() - tau], &b[tau..])).collect()
}

/// Least-squares coefficients projecting `est` onto the span of the first
/// `taps` shifts of every reference, via the (jittered) normal equations.
fn shift_projection_coeffs(
    est: &[f64],
    refs: &[&[f64]],
    taps: usize,
) -> Result<Vec<f64>> {
    let n = refs.len();
    let nl = n * taps;
    // rho[i][j][τ] = Σ_u r_i(u)·r_j(u+τ).
    let rho: Vec<Vec<Vec<f64>>> = refs
        .iter()
        .map(|ri| refs.iter().map(|rj| corr(ri, rj, taps)).collect())
        .collect();
    let mut gram = vec![0.0; nl * nl];
    for i in 0..n {
        for j in 0..n {
            for a in 0..taps {
                for b in 0..taps {
                    let v = if a >= b { rho[i][j][a - b] } else { rho[j][i][b - a] };
                    gram[(i * taps + a) * nl + (j * taps + b)] = v;
                }
            }
        }
    }
    for idx in 0..nl {
        gram[idx * nl + idx] += BSS_JITTER;
    }
    let mut rhs = vec![0.0; nl];
    for (i, r) in refs.iter().enumerate() {
        for a in 0..taps {
            rhs[i * taps + a] = dot(&est[a..], &r[..est.len() - a]);
        }
    }
    let l = cholesky(&gram, nl).map_err(|e| {
        MetricsError::DegenerateReferences(format!(
            "shifted-reference Gram matrix is not positive definite even with jitter {BSS_JITTER}: {e}"
        ))
    })?;
    Ok(cholesky_solve(&l, nl, &rhs))
}

/// `out(t) += Σ_{i,a} coef[(i,a)]·r_i(t−a)` over the padded domain.
fn synthesize(coef: &[f64], refs: &[&[f64]], taps: usize, out: &mut [f64]) {
    for (i, r) in refs.iter().enumerate() {
        for a in 0..taps {
            let c = coef[i * taps + a];
            if c == 0.0 {
                continue;
            }
            for (u, &rv) in r.iter().enumerate() {
                out[u + a] += c * rv;
            }
        }
    }
}

/// Projection-based decomposition of `estimate` against `references`,
/// attributing the span of `target`'s shifts to the wanted signal.
pub fn bss_decompose(
    estimate: &[f64],
    references: &[&[f64]],
    target: usize,
    taps: usize,
) -> Result<BssDecomposition> {
    if references.is_empty() || target >= references.len() {
        return Err(MetricsError::Shape(format!(
            "target {target} out of range for {} references",
            references.len()
        )));
    }
    if taps == 0 {
        return Err(MetricsError::Shape("filter length must be at least 1 tap".into()));
    }
    let len = estimate.len();
    if len < taps {
        return Err(MetricsError::Shape(format!(
            "estimate of {len} samples is shorter than the {taps}-tap filter"
        )));
    }
    for (i, r) in references.iter().enumerate() {
        if r.len() != len {
            return Err(MetricsError::Shape(format!(
                "reference {i} has {} samples, estimate has {len}",
                r.len()
            )));
        }
        if energy(r) <= ENERGY_FLOOR {
            return Err(MetricsError::DegenerateReferences(format!(
                "reference {i} is (numerically) silent"
            )));
        }
    }

    let padded = len + taps - 1;
    let tgt_only = [references[target]];
    let c_target = shift_projection_coeffs(estimate, &tgt_only, taps)?;
    let c_all = shift_projection_coeffs(estimate, references, taps)?;

    let mut s_target = vec![0.0; padded];
    synthesize(&c_target, &tgt_only, taps, &mut s_target);
    let mut p_all = vec![0.0; padded];
    synthesize(&c_all, references, taps, &mut p_all);

    let e_interf: Vec<f64> = p_all.iter().zip(&s_target).map(|(a, t)| a - t).collect();
    let mut e_artif = vec![0.0; padded];
    for (t, v) in estimate.iter().enumerate() {
        e_artif[t] = v - p_all[t];
    }
    for t in len..padded {
        e_artif[t] = -p_all[t];
    }
    Ok(BssDecomposition { s_target, e_interf, e_artif, filter_taps: taps })
}

/// `10·log10(num/den)` with sub-floor denominators reported as the cap.
fn db_ratio(num: f64, den: f64) -> f64 {
    if den <= ENERGY_FLOOR {
        return DB_CAP;
    }
    (10.0 * (num / den).log10()).min(DB_CAP)
}

fn target_energy(d: &BssDecomposition) -> Result<f64> {
    let et = energy(&d.s_target);
    if et <= ENERGY_FLOOR {
        return Err(MetricsError::Undefined(
            "target projection has zero energy; ratios are undefined".into(),
        ));
    }
    Ok(et)
}

/// Signal-to-distortion ratio in dB.
pub fn sdr(d: &BssDecomposition) -> Result<f64> {
    let et = target_energy(d)?;
    let dist: Vec<f64> =
        d.e_interf.iter().zip(&d.e_artif).map(|(a, b)| a + b).collect();
    Ok(db_ratio(et, energy(&dist)))
}

/// Signal-to-interference ratio in dB.
pub fn sir(d: &BssDecomposition) -> Result<f64> {
    let et = target_energy(d)?;
    Ok(db_ratio(et, energy(&d.e_interf)))
}

/// Signal-to-artifact ratio in dB.
pub fn sar(d: &BssDecomposition) -> Result<f64> {
    target_energy(d)?;
    let wanted: Vec<f64> =
        d.s_target.iter().zip(&d.e_interf).map(|(a, b)| a + b).collect();
    Ok(db_ratio(energy(&wanted), energy(&d.e_artif)))
}

/// Normalized SDR: the estimate's SDR minus the unseparated mixture's SDR
/// against the same target.
pub fn nsdr(
    estimate: &[f64],
    mixture: &[f64],
    references: &[&[f64]],
    target: usize,
    taps: usize,
) -> Result<f64> {
    let est_sdr = sdr(&bss_decompose(estimate, references, target, taps)?)?;
    let mix_sdr = sdr(&bss_decompose(mixture, references, target, taps)?)?;
    Ok(est_sdr - mix_sdr)
}

/// For a 2-source estimate pair, tries both target assignments and returns
/// `(assignment, per-estimate SDRs)` for the one with the higher mean SDR.
/// `assignment[e]` is the reference index matched to estimate `e`.
pub fn best_permutation(
    estimates: [&[f64]; 2],
    references: [&[f64]; 2],
    taps: usize,
) -> Result<([usize; 2], [f64; 2])> {
    let score = |assign: [usize; 2]| -> Result<[f64; 2]> {
        let refs = [references[0], references[1]];
        Ok([
            sdr(&bss_decompose(estimates[0], &refs, assign[0], taps)?)?,
            sdr(&bss_decompose(estimates[1], &refs, assign[1], taps)?)?,
        ])
    };
    let direct = score([0, 1])?;
    let swapped = score([1, 0])?;
    if direct[0] + direct[1] >= swapped[0] + swapped[1] {
        Ok(([0, 1], direct))
    } else {
        Ok(([1, 0], swapped))
    }
}

/// One line of an evaluation report.
#[derive(Clone, Debug)]
pub struct ReportRow {
    pub example_id: String,
    pub mode: String,
    pub target_concept: usize,
    pub sdr: f64,
    pub sir: f64,
    pub sar: f64,
    pub nsdr: f64,
}

/// Writes rows as CSV with a trailing `aggregate` row of column means.
pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut out = String::from("example_id,mode,target_concept,sdr_db,sir_db,sar_db,nsdr_db\n");
    let mut sums = [0.0; 4];
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
            r.example_id, r.mode, r.target_concept, r.sdr, r.sir, r.sar, r.nsdr
        ));
        for (s, v) in sums.iter_mut().zip([r.sdr, r.sir, r.sar, r.nsdr]) {
            *s += v;
        }
    }
    if !rows.is_empty() {
        let n = rows.len() as f64;
        out.push_str(&format!(
            "aggregate,mean,-1,{:.6},{:.6},{:.6},{:.6}\n",
            sums[0] / n,
            sums[1] / n,
            sums[2] / n,
            sums[3] / n
        ));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}
