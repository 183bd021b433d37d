//! The non-learned signal path: waveform ↔ spectrogram conversion,
//! log-frequency resampling, mixing, ratio masks, and mask application,
//! plus WAV and PGM file IO.
//!
//! Frequency-row convention: the short-time transform keeps bins
//! `1..=window_len/2` of an FFT of size `window_len + 2`, i.e. exactly
//! `window_len/2` rows spanning everything above DC up to Nyquist. The DC
//! term of each frame is carried separately on [`Spectrogram::dc`] so that
//! inversion stays exact, while the row grids seen by masks and the model
//! hold only the retained bins. All operations here are pure functions.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("dsp: {0}")]
    Invalid(String),
    #[error("dsp: waveform mismatch: {0}")]
    Mismatch(String),
    #[error("dsp: input too short: {0}")]
    TooShort(String),
    #[error("dsp: malformed wav: {0}")]
    BadWav(String),
    #[error("dsp: io error: {0}")]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, DspError>;

/// Maximum absolute sample value tolerated anywhere in the pipeline;
/// generous headroom above the nominal ±1 range so mixtures never trip it.
pub const SAMPLE_HEADROOM: f64 = 4.0;
/// Floor under the mask denominator; cells quieter than this in both
/// sources get the symmetric 0.5/0.5 mask.
pub const MASK_DENOM_FLOOR: f64 = 1e-8;
/// Predicted masks are clamped to `[0, MASK_MAX]` before application.
pub const MASK_MAX: f64 = 10.0;

// ---------------------------------------------------------------------------
// Basic containers
// ---------------------------------------------------------------------------

/// Dense row-major 2-d grid of reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(DspError::Invalid(format!(
                "grid {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

/// Analysis parameters for the short-time transform.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StftParams {
    pub window_len: usize,
    pub hop: usize,
    pub sample_rate: u32,
}

impl StftParams {
    pub fn new(window_len: usize, hop: usize, sample_rate: u32) -> Result<Self> {
        if window_len == 0 || window_len % 2 != 0 {
            return Err(DspError::Invalid(format!(
                "window_len must be even and positive, got {window_len}"
            )));
        }
        if hop == 0 || hop > window_len {
            return Err(DspError::Invalid(format!(
                "hop must be in 1..=window_len, got {hop} (window {window_len})"
            )));
        }
        if sample_rate == 0 {
            return Err(DspError::Invalid("sample_rate must be positive".into()));
        }
        Ok(Self { window_len, hop, sample_rate })
    }

    /// Full-scale analysis: 1022-sample Hann window, hop 256, 11025 Hz;
    /// a 65535-sample clip yields a 512 × 256 magnitude grid.
    pub fn standard() -> Self {
        Self { window_len: 1022, hop: 256, sample_rate: 11025 }
    }

    /// Compact analysis used by the fast training configuration:
    /// 254-sample window, hop 127, 11025 Hz; a 3937-sample clip yields a
    /// 128 × 32 magnitude grid.
    pub fn compact() -> Self {
        Self { window_len: 254, hop: 127, sample_rate: 11025 }
    }

    /// Number of retained frequency rows (all bins above DC through Nyquist).
    pub fn freq_rows(&self) -> usize {
        self.window_len / 2 + 1
    }

    /// Transform length: the window plus one zero-padded sample each side.
    pub fn n_fft(&self) -> usize {
        self.window_len + 2
    }

    /// Number of frames produced for a clip of `len` samples.
    pub fn frames_for(&self, len: usize) -> usize {
        1 + len / self.hop
    }
}

/// Real audio clip with its sample rate.
#[derive(Clone, Debug)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(DspError::Invalid("sample_rate must be positive".into()));
        }
        for (i, &s) in samples.iter().enumerate() {
            if !s.is_finite() || s.abs() > SAMPLE_HEADROOM {
                return Err(DspError::Invalid(format!(
                    "sample {i} out of range: {s}"
                )));
            }
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Linear-frequency magnitude/phase representation of one clip. The DC
/// component of each frame is kept on `dc` (not a magnitude row) purely so
/// that [`istft`] can reconstruct exactly.
#[derive(Clone, Debug)]
pub struct Spectrogram {
    pub magnitude: Grid,
    pub phase: Grid,
    pub dc: Vec<f64>,
    pub params: StftParams,
    pub n_samples: usize,
}

/// Row-wise linear interpolation between a linear and a geometric frequency
/// axis. Forward rows (one per log row) and inverse rows (one per linear
/// row) each mix exactly two neighbours with weights summing to 1, so
/// constant spectra survive both directions unchanged.
#[derive(Clone, Debug)]
pub struct ResampleMap {
    pub f_lin: usize,
    pub f_log: usize,
    /// Per log row: (lower linear row, weight on lower, weight on upper).
    forward: Vec<(usize, f64, f64)>,
    /// Per linear row: (lower log row, weight on lower, weight on upper).
    inverse: Vec<(usize, f64, f64)>,
}

impl ResampleMap {
    pub fn new(f_lin: usize, f_log: usize) -> Result<Self> {
        if f_lin < 2 || f_log < 2 {
            return Err(DspError::Invalid(format!(
                "resampling needs at least 2 rows on both axes, got {f_lin} linear / {f_log} log"
            )));
        }
        let mut forward = Vec::with_capacity(f_log);
        let mut prev = 0.0f64;
        for i in 0..f_log {
            // Geometric centers from row 1 to row F_lin in 1-indexed
            // coordinates, then shifted to 0-indexed positions.
            let center = (f_lin as f64).powf(i as f64 / (f_log - 1) as f64);
            if i > 0 && center <= prev {
                return Err(DspError::Invalid(format!(
                    "log-row centers must increase strictly; row {i} gave {center} after {prev}"
                )));
            }
            prev = center;
            let pos = (center - 1.0).clamp(0.0, (f_lin - 1) as f64);
            let lower = (pos.floor() as usize).min(f_lin - 2);
            let frac = pos - lower as f64;
            forward.push((lower, 1.0 - frac, frac));
        }
        let mut inverse = Vec::with_capacity(f_lin);
        let log_span = (f_lin as f64).ln();
        for r in 0..f_lin {
            let t = ((r + 1) as f64).ln() / log_span * (f_log - 1) as f64;
            let pos = t.clamp(0.0, (f_log - 1) as f64);
            let lower = (pos.floor() as usize).min(f_log - 2);
            let frac = pos - lower as f64;
            inverse.push((lower, 1.0 - frac, frac));
        }
        Ok(Self { f_lin, f_log, forward, inverse })
    }
}

/// Magnitude grid on the geometric frequency axis, with the mapping that
/// produced it (also used to carry masks back to the linear axis).
#[derive(Clone, Debug)]
pub struct LogSpectrogram {
    pub magnitude: Grid,
    pub mapping: ResampleMap,
}

/// Per-cell mask over a log-frequency grid. Built masks live in [0, 1];
/// predicted masks may be any real and are clamped on application.
#[derive(Clone, Debug)]
pub struct RatioMask {
    pub values: Grid,
}

// ---------------------------------------------------------------------------
// Core transforms
// ---------------------------------------------------------------------------

fn hann(window_len: usize) -> Vec<f64> {
    (0..window_len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / window_len as f64).cos())
        .collect()
}

/// Elementwise sum of two equal-length, equal-rate clips.
pub fn mix(w1: &Waveform, w2: &Waveform) -> Result<Waveform> {
    if w1.len() != w2.len() {
        return Err(DspError::Mismatch(format!(
            "lengths {} vs {}",
            w1.len(),
            w2.len()
        )));
    }
    if w1.sample_rate != w2.sample_rate {
        return Err(DspError::Mismatch(format!(
            "sample rates {} vs {}",
            w1.sample_rate, w2.sample_rate
        )));
    }
    let samples = w1
        .samples
        .iter()
        .zip(&w2.samples)
        .map(|(a, b)| a + b)
        .collect();
    Waveform::new(samples, w1.sample_rate)
}

/// Centered short-time transform: frame `m` is the Hann-windowed slice
/// around sample `m·hop`, zero-padded by two samples for the FFT. Keeps
/// `window_len/2` rows (bin 1 through Nyquist); the DC term rides
/// separately on the result.
pub fn stft(w: &Waveform, params: StftParams) -> Result<Spectrogram> {
    if w.len() < params.window_len {
        return Err(DspError::TooShort(format!(
            "need at least window_len={} samples, got {}",
            params.window_len,
            w.len()
        )));
    }
    let win = hann(params.window_len);
    let n_fft = params.n_fft();
    let half = params.window_len / 2;
    let n_frames = params.frames_for(w.len());
    let f_rows = params.freq_rows();

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];

    let mut magnitude = Grid::zeros(f_rows, n_frames);
    let mut phase = Grid::zeros(f_rows, n_frames);
    let mut dc = vec![0.0; n_frames];

    for m in 0..n_frames {
        let start = (m * params.hop) as isize - half as isize;
        for (n, slot) in buf.iter_mut().enumerate() {
            let t = start + n as isize;
            let x = if n < params.window_len && t >= 0 && (t as usize) < w.len() {
                win[n] * w.samples[t as usize]
            } else {
                0.0
            };
            *slot = Complex::new(x, 0.0);
        }
        fft.process(&mut buf);
        dc[m] = buf[0].re;
        for k in 1..=f_rows {
            let v = buf[k];
            *magnitude.at_mut(k - 1, m) = v.norm();
            let mut p = v.im.atan2(v.re);
            if p == -PI {
                p = PI;
            }
            *phase.at_mut(k - 1, m) = p;
        }
    }
    Ok(Spectrogram { magnitude, phase, dc, params, n_samples: w.len() })
}

/// Weighted overlap-add inversion: frames are windowed again on synthesis
/// and the result is divided by the accumulated squared window, which makes
/// the round trip exact for interior samples at any hop ≤ window.
pub fn istft(s: &Spectrogram) -> Result<Waveform> {
    let params = s.params;
    let n_fft = params.n_fft();
    let f_rows = params.freq_rows();
    if s.magnitude.rows() != f_rows || !s.magnitude.same_shape(&s.phase) {
        return Err(DspError::Invalid(format!(
            "spectrogram grid {}x{} does not match params ({} rows) / phase {}x{}",
            s.magnitude.rows(),
            s.magnitude.cols(),
            f_rows,
            s.phase.rows(),
            s.phase.cols()
        )));
    }
    let n_frames = s.magnitude.cols();
    if s.dc.len() != n_frames {
        return Err(DspError::Invalid(format!(
            "dc length {} != frame count {n_frames}",
            s.dc.len()
        )));
    }
    let win = hann(params.window_len);
    let half = params.window_len / 2;

    let mut planner = FftPlanner::new();
    let ifft = planner.plan_fft_inverse(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];

    // Padded timeline covering every frame's support, cropped at the end.
    let pad_len = (n_frames - 1) * params.hop + params.window_len;
    let mut acc = vec![0.0; pad_len];
    let mut wsum = vec![0.0; pad_len];

    for m in 0..n_frames {
        buf[0] = Complex::new(s.dc[m], 0.0);
        for k in 1..=f_rows {
            let mag = s.magnitude.at(k - 1, m);
            let ph = s.phase.at(k - 1, m);
            let v = Complex::from_polar(mag, ph);
            buf[k] = v;
            if k < n_fft - k {
                buf[n_fft - k] = v.conj();
            }
        }
        ifft.process(&mut buf);
        let base = m * params.hop;
        for n in 0..params.window_len {
            let x = buf[n].re / n_fft as f64;
            acc[base + n] += win[n] * x;
            wsum[base + n] += win[n] * win[n];
        }
    }

    let mut samples = vec![0.0; s.n_samples];
    for (t, out) in samples.iter_mut().enumerate() {
        let idx = t + half;
        if idx < pad_len && wsum[idx] > 1e-12 {
            *out = acc[idx] / wsum[idx];
        }
    }
    // Clamp vanishing float excursions so the headroom invariant holds.
    for v in samples.iter_mut() {
        *v = v.clamp(-SAMPLE_HEADROOM, SAMPLE_HEADROOM);
    }
    Waveform::new(samples, params.sample_rate)
}

/// Re-grids a linear-frequency magnitude onto `f_log` geometrically spaced
/// rows by two-point interpolation.
pub fn log_resample(mag: &Grid, f_log: usize) -> Result<LogSpectrogram> {
    let mapping = ResampleMap::new(mag.rows(), f_log)?;
    let mut out = Grid::zeros(f_log, mag.cols());
    for (i, &(lower, w0, w1)) in mapping.forward.iter().enumerate() {
        let lo = mag.row(lower);
        let hi = mag.row(lower + 1);
        let dst = &mut out.data[i * out.cols..(i + 1) * out.cols];
        for c in 0..dst.len() {
            dst[c] = w0 * lo[c] + w1 * hi[c];
        }
    }
    Ok(LogSpectrogram { magnitude: out, mapping })
}

/// Carries a log-axis grid back to the linear axis: every linear row reads
/// its geometric coordinate's two nearest log rows. Constant grids are
/// preserved exactly.
pub fn unresample(values: &Grid, mapping: &ResampleMap) -> Result<Grid> {
    if values.rows() != mapping.f_log {
        return Err(DspError::Invalid(format!(
            "grid has {} rows but mapping expects {}",
            values.rows(),
            mapping.f_log
        )));
    }
    let mut out = Grid::zeros(mapping.f_lin, values.cols());
    for (r, &(lower, w0, w1)) in mapping.inverse.iter().enumerate() {
        let lo = values.row(lower);
        let hi = values.row(lower + 1);
        let dst = &mut out.data[r * out.cols..(r + 1) * out.cols];
        for c in 0..dst.len() {
            dst[c] = w0 * lo[c] + w1 * hi[c];
        }
    }
    Ok(out)
}

/// Per-cell energy shares of two sources. Where the summed magnitude is at
/// or below the floor both masks take 0.5, so the two always sum to 1.
pub fn ratio_masks(
    mag1: &LogSpectrogram,
    mag2: &LogSpectrogram,
) -> Result<(RatioMask, RatioMask)> {
    if !mag1.magnitude.same_shape(&mag2.magnitude) {
        return Err(DspError::Invalid(format!(
            "mask inputs {}x{} vs {}x{}",
            mag1.magnitude.rows(),
            mag1.magnitude.cols(),
            mag2.magnitude.rows(),
            mag2.magnitude.cols()
        )));
    }
    let rows = mag1.magnitude.rows();
    let cols = mag1.magnitude.cols();
    let mut m1 = Grid::zeros(rows, cols);
    let mut m2 = Grid::zeros(rows, cols);
    for i in 0..rows * cols {
        let a = mag1.magnitude.data[i];
        let b = mag2.magnitude.data[i];
        let den = a + b;
        if den > MASK_DENOM_FLOOR {
            m1.data[i] = a / den;
            m2.data[i] = 1.0 - m1.data[i];
        } else {
            m1.data[i] = 0.5;
            m2.data[i] = 0.5;
        }
    }
    Ok((RatioMask { values: m1 }, RatioMask { values: m2 }))
}

/// Applies a (possibly unbounded) predicted mask to a mixture: the mask is
/// clamped to `[0, MASK_MAX]`, carried to the linear axis, multiplied into
/// the mixture magnitude, and inverted with the mixture phase. The mixture's
/// DC terms are scaled by the mask's lowest retained row so an all-ones mask
/// reproduces the mixture exactly and an all-zeros mask is silent.
pub fn apply_mask(
    mask: &RatioMask,
    mixture_log: &LogSpectrogram,
    phase_source: &Spectrogram,
) -> Result<Waveform> {
    if !mask.values.same_shape(&mixture_log.magnitude) {
        return Err(DspError::Invalid(format!(
            "mask {}x{} vs log mixture {}x{}",
            mask.values.rows(),
            mask.values.cols(),
            mixture_log.magnitude.rows(),
            mixture_log.magnitude.cols()
        )));
    }
    if mixture_log.mapping.f_lin != phase_source.magnitude.rows()
        || mask.values.cols() != phase_source.magnitude.cols()
    {
        return Err(DspError::Invalid(format!(
            "log mapping targets {} linear rows, phase source has {}x{}",
            mixture_log.mapping.f_lin,
            phase_source.magnitude.rows(),
            phase_source.magnitude.cols()
        )));
    }
    let mut clamped = mask.values.clone();
    for v in clamped.data.iter_mut() {
        *v = v.clamp(0.0, MASK_MAX);
    }
    let lin_mask = unresample(&clamped, &mixture_log.mapping)?;
    let mut out = phase_source.clone();
    for i in 0..out.magnitude.data.len() {
        out.magnitude.data[i] *= lin_mask.data[i];
    }
    for (m, dcv) in out.dc.iter_mut().enumerate() {
        *dcv *= lin_mask.at(0, m);
    }
    istft(&out)
}

// ---------------------------------------------------------------------------
// WAV and PGM file IO
// ---------------------------------------------------------------------------

/// Writes a mono 16-bit PCM RIFF file. Samples are clamped to ±1 before
/// quantization.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let n = w.len();
    let data_bytes = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_bytes).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_bytes.to_le_bytes());
    for &s in w.samples() {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Reads a mono 16-bit PCM RIFF file; any other layout is rejected.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(DspError::BadWav("missing RIFF/WAVE header".into()));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = pos + 8 + size;
        if body_end > bytes.len() {
            return Err(DspError::BadWav(format!(
                "chunk {:?} overruns file",
                String::from_utf8_lossy(id)
            )));
        }
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(DspError::BadWav("fmt chunk too small".into()));
                }
                fmt = Some((
                    u16::from_le_bytes(body[0..2].try_into().unwrap()),
                    u16::from_le_bytes(body[2..4].try_into().unwrap()),
                    u32::from_le_bytes(body[4..8].try_into().unwrap()),
                    u16::from_le_bytes(body[14..16].try_into().unwrap()),
                ));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos = body_end + (size & 1); // chunks are word-aligned
    }
    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| DspError::BadWav("no fmt chunk".into()))?;
    if format != 1 {
        return Err(DspError::BadWav(format!("only PCM supported, got format {format}")));
    }
    if channels != 1 {
        return Err(DspError::BadWav(format!("only mono supported, got {channels} channels")));
    }
    if bits != 16 {
        return Err(DspError::BadWav(format!("only 16-bit supported, got {bits}")));
    }
    let data = data.ok_or_else(|| DspError::BadWav("no data chunk".into()))?;
    if data.len() % 2 != 0 {
        return Err(DspError::BadWav("odd data chunk length".into()));
    }
    let samples = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32767.0)
        .collect();
    Waveform::new(samples, rate)
}

/// Dumps a nonnegative grid as an 8-bit grayscale PGM with the highest
/// frequency row on top, normalized to the grid's maximum.
pub fn write_pgm(path: &Path, grid: &Grid) -> Result<()> {
    let peak = grid.data.iter().cloned().fold(0.0f64, f64::max);
    let scale = if peak > 0.0 { 255.0 / peak } else { 0.0 };
    let mut out = format!("P5\n{} {}\n255\n", grid.cols(), grid.rows()).into_bytes();
    for r in (0..grid.rows()).rev() {
        for &v in grid.row(r) {
            out.push((v.max(0.0) * scale).round().min(255.0) as u8);
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::{rng_from_seed, uniform_vec};

    fn white_noise(len: usize, seed: u64, amp: f64) -> Waveform {
        let mut rng = rng_from_seed(seed);
        let samples: Vec<f64> =
            uniform_vec(&mut rng, len, -amp, amp);
        Waveform::new(samples, 11025).unwrap()
    }

    fn sine(len: usize, freq: f64, amp: f64, sr: u32) -> Waveform {
        let samples = (0..len)
            .map(|t| amp * (2.0 * PI * freq * t as f64 / sr as f64).sin())
            .collect();
        Waveform::new(samples, sr).unwrap()
    }

    /// Interior-sample signal-to-noise ratio in dB, skipping one window at
    /// each end.
    fn interior_snr(orig: &Waveform, rec: &Waveform, window_len: usize) -> f64 {
        assert_eq!(orig.len(), rec.len());
        let lo = window_len;
        let hi = orig.len() - window_len;
        let mut sig = 0.0;
        let mut err = 0.0;
        for t in lo..hi {
            sig += orig.samples()[t] * orig.samples()[t];
            let d = orig.samples()[t] - rec.samples()[t];
            err += d * d;
        }
        10.0 * (sig / err.max(1e-300)).log10()
    }

    /// Scale-fitted signal-to-distortion ratio in dB.
    fn fit_sdr(est: &[f64], reference: &[f64]) -> f64 {
        let rr: f64 = reference.iter().map(|v| v * v).sum();
        let er: f64 = est.iter().zip(reference).map(|(a, b)| a * b).sum();
        let alpha = er / rr.max(1e-300);
        let mut err = 0.0;
        for (e, r) in est.iter().zip(reference) {
            let d = e - alpha * r;
            err += d * d;
        }
        10.0 * ((alpha * alpha * rr) / err.max(1e-300)).log10()
    }

    #[test]
    fn mix_is_the_elementwise_sum() {
        let w1 = white_noise(500, 1, 0.4);
        let zero = Waveform::new(vec![0.0; 500], 11025).unwrap();
        let same = mix(&w1, &zero).unwrap();
        assert_eq!(same.samples(), w1.samples());

        let neg = Waveform::new(w1.samples().iter().map(|v| -v).collect(), 11025).unwrap();
        let cancel = mix(&w1, &neg).unwrap();
        assert!(cancel.samples().iter().all(|&v| v == 0.0));

        let w2 = white_noise(500, 2, 0.4);
        let m = mix(&w1, &w2).unwrap();
        for t in 0..500 {
            assert_eq!(m.samples()[t], w1.samples()[t] + w2.samples()[t]);
        }
        let short = white_noise(499, 3, 0.4);
        assert!(mix(&w1, &short).is_err());
    }

    #[test]
    fn stft_shape_matches_the_advertised_grid() {
        let w = white_noise(65535, 10, 0.5);
        let s = stft(&w, StftParams::standard()).unwrap();
        assert_eq!(s.magnitude.rows(), 512);
        assert_eq!(s.magnitude.cols(), 256);

        let w2 = white_noise(3937, 11, 0.5);
        let s2 = stft(&w2, StftParams::compact()).unwrap();
        assert_eq!(s2.magnitude.rows(), 128);
        assert_eq!(s2.magnitude.cols(), 32);
    }

    #[test]
    fn stft_matches_a_direct_dft_oracle() {
        // Independent O(n^2) DFT of the same windowed frames.
        let params = StftParams::new(64, 16, 11025).unwrap();
        let w = white_noise(400, 21, 0.5);
        let s = stft(&w, params).unwrap();
        let win = hann(64);
        let n_fft = 66;
        for m in [0usize, 3, 7, s.magnitude.cols() - 1] {
            let start = (m * params.hop) as isize - 32;
            let frame: Vec<f64> = (0..n_fft)
                .map(|n| {
                    let t = start + n as isize;
                    if n < 64 && t >= 0 && (t as usize) < w.len() {
                        win[n] * w.samples()[t as usize]
                    } else {
                        0.0
                    }
                })
                .collect();
            for k in 0..=33 {
                let mut re = 0.0;
                let mut im = 0.0;
                for (n, &x) in frame.iter().enumerate() {
                    let ang = -2.0 * PI * (k * n) as f64 / n_fft as f64;
                    re += x * ang.cos();
                    im += x * ang.sin();
                }
                let mag = (re * re + im * im).sqrt();
                if k == 0 {
                    assert!((s.dc[m] - re).abs() < 1e-9, "dc frame {m}");
                } else {
                    let got = s.magnitude.at(k - 1, m);
                    assert!(
                        (got - mag).abs() < 1e-9,
                        "bin {k} frame {m}: {got} vs {mag}"
                    );
                }
            }
        }
    }

    #[test]
    fn bin_center_sine_concentrates_in_one_row() {
        let params = StftParams::standard();
        let n_fft = 1024;
        let bin = 77usize;
        let freq = bin as f64 * 11025.0 / n_fft as f64;
        let w = sine(65535, freq, 0.5, 11025);
        let s = stft(&w, params).unwrap();
        // Interior frame: energy within the target row ± 1 dominates.
        let m = 128;
        let row = bin - 1; // DC dropped shifts bins down by one row
        let mut total = s.dc[m] * s.dc[m];
        let mut near = 0.0;
        for r in 0..s.magnitude.rows() {
            let e = s.magnitude.at(r, m) * s.magnitude.at(r, m);
            total += e;
            if r + 1 >= row && r <= row + 1 {
                near += e;
            }
        }
        assert!(
            near / total >= 0.99,
            "only {:.4} of frame energy near row {row}",
            near / total
        );
        let zero = Waveform::new(vec![0.0; 65535], 11025).unwrap();
        let sz = stft(&zero, params).unwrap();
        assert!(sz.magnitude.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn windowed_frame_energies_match_the_time_domain() {
        // Sum over frames of |X|^2 / n_fft must equal the window-weighted
        // time-domain energy exactly (checked to 1% as an end-to-end guard).
        let params = StftParams::new(64, 16, 11025).unwrap();
        let w = white_noise(1000, 33, 0.5);
        let s = stft(&w, params).unwrap();
        let n_fft = 66.0;
        let mut freq_energy = 0.0;
        for m in 0..s.magnitude.cols() {
            let mut e = s.dc[m] * s.dc[m];
            for r in 0..s.magnitude.rows() {
                let v = s.magnitude.at(r, m);
                // all retained bins except Nyquist appear twice in the full
                // spectrum; Nyquist (last row) is self-conjugate
                let mult = if r + 1 == s.magnitude.rows() { 1.0 } else { 2.0 };
                e += mult * v * v;
            }
            freq_energy += e / n_fft;
        }
        let win = hann(64);
        let mut time_energy = 0.0;
        for m in 0..s.magnitude.cols() {
            let start = (m * params.hop) as isize - 32;
            for (n, &wv) in win.iter().enumerate() {
                let t = start + n as isize;
                if t >= 0 && (t as usize) < w.len() {
                    let x = wv * w.samples()[t as usize];
                    time_energy += x * x;
                }
            }
        }
        let rel = (freq_energy - time_energy).abs() / time_energy;
        assert!(rel < 0.01, "energy mismatch {rel}");
    }

    #[test]
    fn round_trip_is_transparent_for_interior_samples() {
        let params = StftParams::standard();
        let noise = white_noise(65535, 5, 0.9);
        let rec = istft(&stft(&noise, params).unwrap()).unwrap();
        let snr = interior_snr(&noise, &rec, params.window_len);
        assert!(snr >= 60.0, "white-noise round trip {snr:.1} dB");

        // Amplitude-modulated tone.
        let sr = 11025;
        let am: Vec<f64> = (0..65535)
            .map(|t| {
                let tt = t as f64 / sr as f64;
                0.6 * (1.0 + 0.5 * (2.0 * PI * 4.0 * tt).sin()) / 1.5
                    * (2.0 * PI * 523.25 * tt).sin()
            })
            .collect();
        let am = Waveform::new(am, sr).unwrap();
        let rec = istft(&stft(&am, params).unwrap()).unwrap();
        let snr = interior_snr(&am, &rec, params.window_len);
        assert!(snr >= 60.0, "am-tone round trip {snr:.1} dB");

        // Compact parameters must round-trip too.
        let short = white_noise(3937, 6, 0.9);
        let rec = istft(&stft(&short, StftParams::compact()).unwrap()).unwrap();
        let snr = interior_snr(&short, &rec, 254);
        assert!(snr >= 60.0, "compact round trip {snr:.1} dB");
    }

    #[test]
    fn zero_spectrogram_inverts_to_silence() {
        let params = StftParams::new(64, 16, 11025).unwrap();
        let s = stft(&white_noise(500, 9, 0.5), params).unwrap();
        let silent = Spectrogram {
            magnitude: Grid::zeros(s.magnitude.rows(), s.magnitude.cols()),
            phase: Grid::zeros(s.phase.rows(), s.phase.cols()),
            dc: vec![0.0; s.dc.len()],
            params,
            n_samples: 500,
        };
        let w = istft(&silent).unwrap();
        assert!(w.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn log_resample_preserves_constants_and_exact_hits() {
        let mag = Grid::new(512, 4, vec![3.25; 512 * 4]).unwrap();
        let ls = log_resample(&mag, 256).unwrap();
        assert!(ls.magnitude.data().iter().all(|&v| (v - 3.25).abs() < 1e-12));

        // First and last log rows sit exactly on linear rows 1 and F_lin.
        let mut impulse = Grid::zeros(512, 1);
        *impulse.at_mut(0, 0) = 1.0;
        let li = log_resample(&impulse, 256).unwrap();
        assert!((li.magnitude.at(0, 0) - 1.0).abs() < 1e-12);
        let mut top = Grid::zeros(512, 1);
        *top.at_mut(511, 0) = 1.0;
        let lt = log_resample(&top, 256).unwrap();
        assert!((lt.magnitude.at(255, 0) - 1.0).abs() < 1e-12);

        // Weights sum to one per row by construction; degenerate axes fail.
        assert!(ResampleMap::new(1, 256).is_err());
        assert!(ResampleMap::new(512, 1).is_err());
    }

    #[test]
    fn unresample_round_trip_tracks_smooth_spectra() {
        // 1/f magnitude, constant across frames.
        let rows = 512;
        let data: Vec<f64> = (0..rows)
            .flat_map(|r| std::iter::repeat(1.0 / (1.0 + r as f64)).take(3))
            .collect();
        let mag = Grid::new(rows, 3, data).unwrap();
        let ls = log_resample(&mag, 256).unwrap();
        let back = unresample(&ls.magnitude, &ls.mapping).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..mag.data().len() {
            let d = back.data()[i] - mag.data()[i];
            num += d * d;
            den += mag.data()[i] * mag.data()[i];
        }
        let rel = (num / den).sqrt();
        assert!(rel <= 0.02, "round-trip relative L2 error {rel}");

        // Constants survive the inverse direction exactly.
        let ones = Grid::new(256, 2, vec![1.0; 512]).unwrap();
        let back = unresample(&ones, &ls.mapping).unwrap();
        assert!(back.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn ratio_masks_partition_unity() {
        let mapping = || ResampleMap::new(64, 32).unwrap();
        let mk = |data: Vec<f64>| LogSpectrogram {
            magnitude: Grid::new(32, 2, data).unwrap(),
            mapping: mapping(),
        };
        let a = mk(vec![0.7; 64]);
        let (m1, m2) = ratio_masks(&a, &a).unwrap();
        assert!(m1.values.data().iter().all(|&v| v == 0.5));
        assert!(m2.values.data().iter().all(|&v| v == 0.5));

        let b = mk(vec![0.0; 64]);
        let (m1, m2) = ratio_masks(&a, &b).unwrap();
        assert!(m1.values.data().iter().all(|&v| v == 1.0));
        assert!(m2.values.data().iter().all(|&v| v == 0.0));

        let mut rng = rng_from_seed(8);
        let r1 = mk(uniform_vec(&mut rng, 64, 0.0, 2.0));
        let r2 = mk(uniform_vec(&mut rng, 64, 0.0, 2.0));
        let (m1, m2) = ratio_masks(&r1, &r2).unwrap();
        for i in 0..64 {
            let s = m1.values.data()[i] + m2.values.data()[i];
            assert!((s - 1.0).abs() <= 1e-12);
        }

        // Below the floor both take the symmetric value.
        let tiny = mk(vec![1e-9; 64]);
        let (m1, m2) = ratio_masks(&tiny, &tiny).unwrap();
        assert!(m1.values.data().iter().all(|&v| v == 0.5));
        assert!(m2.values.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn identity_mask_reproduces_the_mixture_and_zero_mask_is_silent() {
        let params = StftParams::standard();
        let w = mix(
            &sine(65535, 440.0, 0.4, 11025),
            &sine(65535, 1833.0, 0.4, 11025),
        )
        .unwrap();
        let spec = stft(&w, params).unwrap();
        let logmag = log_resample(&spec.magnitude, 256).unwrap();

        let ones = RatioMask { values: Grid::new(256, 256, vec![1.0; 256 * 256]).unwrap() };
        let out = apply_mask(&ones, &logmag, &spec).unwrap();
        let base = istft(&spec).unwrap();
        let snr = interior_snr(&base, &out, params.window_len);
        assert!(snr >= 60.0, "identity mask differs from mixture: {snr:.1} dB");

        let zeros = RatioMask { values: Grid::zeros(256, 256) };
        let silent = apply_mask(&zeros, &logmag, &spec).unwrap();
        assert!(silent.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn oracle_mask_separates_a_two_tone_mixture() {
        let params = StftParams::standard();
        let sr = 11025;
        let w1 = sine(65535, 440.0, 0.4, sr);
        let w2 = sine(65535, 2217.0, 0.4, sr);
        let mixw = mix(&w1, &w2).unwrap();
        let mspec = stft(&mixw, params).unwrap();
        let mlog = log_resample(&mspec.magnitude, 256).unwrap();

        let l1 = log_resample(&stft(&w1, params).unwrap().magnitude, 256).unwrap();
        let l2 = log_resample(&stft(&w2, params).unwrap().magnitude, 256).unwrap();
        let (m1, m2) = ratio_masks(&l1, &l2).unwrap();

        let e1 = apply_mask(&m1, &mlog, &mspec).unwrap();
        let e2 = apply_mask(&m2, &mlog, &mspec).unwrap();
        let lo = params.window_len;
        let hi = 65535 - params.window_len;
        let sdr1 = fit_sdr(&e1.samples()[lo..hi], &w1.samples()[lo..hi]);
        let sdr2 = fit_sdr(&e2.samples()[lo..hi], &w2.samples()[lo..hi]);
        assert!(sdr1 >= 20.0, "tone 1 separated at only {sdr1:.1} dB");
        assert!(sdr2 >= 20.0, "tone 2 separated at only {sdr2:.1} dB");

        // Against the raw mixture both references sit near 0 dB, so the
        // oracle mask strictly helps.
        let sdr_mix1 = fit_sdr(&mixw.samples()[lo..hi], &w1.samples()[lo..hi]);
        assert!(sdr1 > sdr_mix1);
    }

    #[test]
    fn wav_round_trip_is_exact_at_16_bits() {
        let dir = std::env::temp_dir().join(format!("vast-wav-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.wav");
        let w = white_noise(777, 4, 0.8);
        write_wav(&path, &w).unwrap();
        let r = read_wav(&path).unwrap();
        assert_eq!(r.sample_rate(), 11025);
        assert_eq!(r.len(), w.len());
        for (a, b) in w.samples().iter().zip(r.samples()) {
            let q = (a.clamp(-1.0, 1.0) * 32767.0).round() / 32767.0;
            assert!((q - b).abs() < 1e-12);
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn malformed_wavs_are_rejected() {
        let dir = std::env::temp_dir().join(format!("vast-badwav-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();

        let stereo = dir.join("stereo.wav");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&40u32.to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes()); // stereo → reject
        bytes.extend_from_slice(&11025u32.to_le_bytes());
        bytes.extend_from_slice(&44100u32.to_le_bytes());
        bytes.extend_from_slice(&4u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&4u32.to_le_bytes());
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        std::fs::write(&stereo, &bytes).unwrap();
        assert!(matches!(read_wav(&stereo), Err(DspError::BadWav(_))));

        let garbage = dir.join("garbage.wav");
        std::fs::write(&garbage, b"not a wav at all").unwrap();
        assert!(matches!(read_wav(&garbage), Err(DspError::BadWav(_))));

        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn pgm_bytes_are_flipped_and_normalized() {
        let dir = std::env::temp_dir().join(format!("vast-pgm-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("g.pgm");
        // rows: bottom row [0,1,2], top row [4,0,2] — top row written first.
        let g = Grid::new(2, 3, vec![0.0, 1.0, 2.0, 4.0, 0.0, 2.0]).unwrap();
        write_pgm(&path, &g).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let expect_header = b"P5\n3 2\n255\n";
        assert_eq!(&bytes[..expect_header.len()], expect_header);
        assert_eq!(&bytes[expect_header.len()..], &[255, 0, 128, 0, 64, 128]);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
