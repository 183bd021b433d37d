//! The query-conditioned separation network.
//!
//! A 3-level U-Net encodes the log-frequency mixture magnitude into a
//! bottleneck one-eighth the input size, a 1×1 projection maps it to the
//! joint embedding width, the query vector is tiled across the bottleneck
//! and concatenated, and a mirrored transpose-convolution decoder with skip
//! connections emits a real-valued ratio mask at full resolution. The same
//! encoder (same parameter objects) embeds predicted spectrograms for the
//! alignment losses.
//!
//! Region-conditioned prediction batches every video region through the
//! decoder as one conv batch and aggregates the per-region masks by summing
//! over space and averaging over time; the aggregation is exactly
//! permutation-invariant within frames.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{
    self, DspError, Grid, LogSpectrogram, RatioMask, StftParams, Waveform, MASK_MAX,
};
use crate::foundation::{ConceptSpace, EmbeddingGrid, FoundationError, RawGrid};
use crate::tensor::{Array, Graph, TensorError, TensorId};
use crate::util::rng_from_seed;

/// Hard ceiling on regions batched through the decoder at once.
pub const MAX_REGIONS: usize = 4096;
/// Negative-side slope of every hidden activation.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum SepError {
    #[error("sepmodel: {0}")]
    Invalid(String),
    #[error("sepmodel: {0}")]
    Tensor(#[from] TensorError),
    #[error("sepmodel: {0}")]
    Dsp(#[from] DspError),
    #[error("sepmodel: {0}")]
    Foundation(#[from] FoundationError),
}

type Result<T> = std::result::Result<T, SepError>;

/// Network geometry. The spectrogram is `f_log × n_frames`, both divisible
/// by 8 (three stride-2 halvings); `d` is the query/bottleneck channel
/// width and must match the foundation embedding dimension.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SepConfig {
    pub f_log: usize,
    pub n_frames: usize,
    pub base_width: usize,
    pub d: usize,
    /// Squash the mask head with a logistic instead of leaving it linear.
    pub sigmoid_mask: bool,
}

impl Default for SepConfig {
    fn default() -> Self {
        Self { f_log: 32, n_frames: 32, base_width: 16, d: 32, sigmoid_mask: false }
    }
}

impl SepConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("f_log", self.f_log), ("n_frames", self.n_frames)] {
            if v < 8 || v % 8 != 0 {
                return Err(SepError::Invalid(format!(
                    "{name} must be a positive multiple of 8, got {v}"
                )));
            }
        }
        if self.base_width == 0 || self.d == 0 {
            return Err(SepError::Invalid("widths must be positive".into()));
        }
        Ok(())
    }

    /// Bottleneck spatial size: input over 2³.
    pub fn bottleneck_hw(&self) -> (usize, usize) {
        (self.f_log / 8, self.n_frames / 8)
    }
}

/// Kernel/bias shapes for every layer, in registry order.
fn layer_shapes(cfg: &SepConfig) -> Vec<(String, Vec<usize>)> {
    let w = cfg.base_width;
    let d = cfg.d;
    vec![
        ("enc1.k".into(), vec![w, 1, 4, 4]),
        ("enc1.b".into(), vec![w]),
        ("enc2.k".into(), vec![2 * w, w, 4, 4]),
        ("enc2.b".into(), vec![2 * w]),
        ("enc3.k".into(), vec![4 * w, 2 * w, 4, 4]),
        ("enc3.b".into(), vec![4 * w]),
        ("proj.k".into(), vec![d, 4 * w, 1, 1]),
        ("proj.b".into(), vec![d]),
        ("dec3.k".into(), vec![2 * d, 2 * w, 4, 4]),
        ("dec3.b".into(), vec![2 * w]),
        ("dec2.k".into(), vec![4 * w, w, 4, 4]),
        ("dec2.b".into(), vec![w]),
        ("dec1.k".into(), vec![2 * w, w, 4, 4]),
        ("dec1.b".into(), vec![w]),
        ("head.k".into(), vec![1, w, 1, 1]),
        ("head.b".into(), vec![1]),
    ]
}

/// The separation network's parameters. One instance is shared by both
/// query modes and by predicted-spectrogram embedding; training steps must
/// be externally serialized, while inference on a frozen copy is
/// thread-safe.
#[derive(Clone, Debug)]
pub struct SepModel {
    cfg: SepConfig,
    params: BTreeMap<String, Array>,
}

impl SepModel {
    /// Seeded initialization: kernels get fan-in-scaled Gaussians, biases
    /// start at zero.
    pub fn init(cfg: SepConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut params = BTreeMap::new();
        for (name, shape) in layer_shapes(&cfg) {
            let arr = if name.ends_with(".b") {
                Array::new(shape.clone(), vec![0.0; shape.iter().product()])
                    .expect("bias shape consistent")
            } else {
                let std = if name.starts_with("dec") {
                    // Transpose kernels: each output sees Co·(k/s)² taps.
                    (2.0 / (shape[0] * 4) as f64).sqrt()
                } else if shape[2] == 1 {
                    // Linear 1×1 heads.
                    (1.0 / shape[1] as f64).sqrt()
                } else {
                    (2.0 / (shape[1] * shape[2] * shape[3]) as f64).sqrt()
                };
                crate::util::gaussian_array(&mut rng, shape, std)
            };
            params.insert(name, arr);
        }
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &SepConfig {
        &self.cfg
    }

    /// The full parameter registry, shared by every prediction mode.
    pub fn param_names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn param(&self, name: &str) -> Option<&Array> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Array> {
        &self.params
    }

    pub fn set_param(&mut self, name: &str, value: Array) -> Result<()> {
        match self.params.get_mut(name) {
            Some(slot) if slot.shape() == value.shape() => {
                *slot = value;
                Ok(())
            }
            Some(slot) => Err(SepError::Invalid(format!(
                "parameter {name}: shape {:?} cannot be replaced by {:?}",
                slot.shape(),
                value.shape()
            ))),
            None => Err(SepError::Invalid(format!("unknown parameter {name}"))),
        }
    }

    /// Registers every parameter on `g` — as trainable leaves or as frozen
    /// constants — and returns the bound forward interface.
    pub fn bind<'g>(&self, g: &'g Graph, trainable: bool) -> Result<Bound<'g>> {
        let mut ids = BTreeMap::new();
        for (name, arr) in &self.params {
            let id = if trainable {
                g.leaf(name, arr.clone())?
            } else {
                g.constant(arr.clone())?
            };
            ids.insert(name.clone(), id);
        }
        Ok(Bound { g, cfg: self.cfg, ids })
    }

    /// Like [`bind`](Self::bind), but parameters named in `overrides` use
    /// the caller's already-registered nodes (finite-difference probes,
    /// shared leaves); everything else becomes a frozen constant. Entries
    /// in `overrides` that are not parameter names are ignored.
    pub fn bind_with<'g>(
        &self,
        g: &'g Graph,
        overrides: &BTreeMap<String, TensorId>,
    ) -> Result<Bound<'g>> {
        let mut ids = BTreeMap::new();
        for (name, arr) in &self.params {
            let id = match overrides.get(name) {
                Some(&given) => {
                    if g.shape(given) != arr.shape() {
                        return Err(SepError::Invalid(format!(
                            "override {name}: shape {:?} wants {:?}",
                            g.shape(given),
                            arr.shape()
                        )));
                    }
                    given
                }
                None => g.constant(arr.clone())?,
            };
            ids.insert(name.clone(), id);
        }
        Ok(Bound { g, cfg: self.cfg, ids })
    }
}

/// Encoder activations kept for skip connections, plus the projected
/// bottleneck.
pub struct EncodeOut {
    pub bottleneck: TensorId,
    e1: TensorId,
    e2: TensorId,
    batch: usize,
}

/// A model's parameters registered on one graph.
pub struct Bound<'g> {
    g: &'g Graph,
    cfg: SepConfig,
    ids: BTreeMap<String, TensorId>,
}

impl<'g> Bound<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.g
    }

    pub fn param_id(&self, name: &str) -> TensorId {
        self.ids[name]
    }

    fn add_bias(&self, x: TensorId, bias: &str) -> Result<TensorId> {
        let g = self.g;
        let shape = g.shape(x);
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let row = g.reshape(self.ids[bias], vec![1, c])?;
        let tiled = g.tile_spatial(row, h, w)?;
        let full = if b == 1 {
            tiled
        } else {
            g.broadcast_batch(g.reshape(tiled, vec![c, h, w])?, b)?
        };
        Ok(g.add(x, full)?)
    }

    fn down(&self, x: TensorId, layer: &str) -> Result<TensorId> {
        let g = self.g;
        let y = g.conv2d(x, self.ids[&format!("{layer}.k")], 2, 1)?;
        let y = self.add_bias(y, &format!("{layer}.b"))?;
        Ok(g.leaky_relu(y, LEAKY_SLOPE)?)
    }

    fn up(&self, x: TensorId, layer: &str) -> Result<TensorId> {
        let g = self.g;
        let y = g.conv_transpose2d(x, self.ids[&format!("{layer}.k")], 2, 1)?;
        let y = self.add_bias(y, &format!("{layer}.b"))?;
        Ok(g.leaky_relu(y, LEAKY_SLOPE)?)
    }

    /// `𝓔`: three stride-2 conv levels, then the 1×1 projection to `d`
    /// channels. Input `[B, 1, f_log, n_frames]`.
    pub fn encode(&self, spec: TensorId) -> Result<EncodeOut> {
        let g = self.g;
        let shape = g.shape(spec);
        if shape.len() != 4
            || shape[1] != 1
            || shape[2] != self.cfg.f_log
            || shape[3] != self.cfg.n_frames
        {
            return Err(SepError::Invalid(format!(
                "encoder wants [B,1,{},{}], got {:?}",
                self.cfg.f_log, self.cfg.n_frames, shape
            )));
        }
        let e1 = self.down(spec, "enc1")?;
        let e2 = self.down(e1, "enc2")?;
        let e3 = self.down(e2, "enc3")?;
        let b = g.conv2d(e3, self.ids["proj.k"], 1, 0)?;
        let bottleneck = self.add_bias(b, "proj.b")?;
        Ok(EncodeOut { bottleneck, e1, e2, batch: shape[0] })
    }

    /// Tile each query vector over the bottleneck grid and concatenate on
    /// the channel axis: `[B,d,f,n] + [B,d] → [B,2d,f,n]`.
    pub fn fuse(&self, bottleneck: TensorId, queries: TensorId) -> Result<TensorId> {
        let g = self.g;
        let bshape = g.shape(bottleneck);
        let qshape = g.shape(queries);
        if qshape.len() != 2 || qshape[1] != self.cfg.d || qshape[0] != bshape[0] {
            return Err(SepError::Invalid(format!(
                "queries must be [{}, {}], got {:?}",
                bshape[0], self.cfg.d, qshape
            )));
        }
        let tiled = g.tile_spatial(queries, bshape[2], bshape[3])?;
        Ok(g.concat_channels(bottleneck, tiled)?)
    }

    /// `𝓓`: mirrored transpose convolutions with encoder skips, then the
    /// 1×1 mask head. Returns `[B, 1, f_log, n_frames]`.
    pub fn decode(&self, fused: TensorId, enc: &EncodeOut) -> Result<TensorId> {
        let g = self.g;
        let b = g.shape(fused)[0];
        let skip = |t: TensorId| -> Result<TensorId> {
            if enc.batch == b {
                Ok(t)
            } else if enc.batch == 1 {
                let s = g.shape(t);
                Ok(g.broadcast_batch(g.reshape(t, s[1..].to_vec())?, b)?)
            } else {
                Err(SepError::Invalid(format!(
                    "decoder batch {b} incompatible with encoder batch {}",
                    enc.batch
                )))
            }
        };
        let d3 = self.up(fused, "dec3")?;
        let d3 = g.concat_channels(d3, skip(enc.e2)?)?;
        let d2 = self.up(d3, "dec2")?;
        let d2 = g.concat_channels(d2, skip(enc.e1)?)?;
        let d1 = self.up(d2, "dec1")?;
        let m = g.conv2d(d1, self.ids["head.k"], 1, 0)?;
        let m = self.add_bias(m, "head.b")?;
        if self.cfg.sigmoid_mask {
            Ok(g.sigmoid(m)?)
        } else {
            Ok(m)
        }
    }

    /// One mask per query row: the mixture is encoded once, broadcast to
    /// the query batch, fused, and decoded. Returns `[B, 1, f_log,
    /// n_frames]` alongside the encoder output for reuse.
    pub fn masks_for_queries(
        &self,
        spec: TensorId,
        queries: TensorId,
    ) -> Result<(TensorId, EncodeOut)> {
        let g = self.g;
        let qshape = g.shape(queries);
        if qshape.len() != 2 {
            return Err(SepError::Invalid(format!("queries must be [B,d], got {qshape:?}")));
        }
        let b = qshape[0];
        if b == 0 || b > MAX_REGIONS {
            return Err(SepError::Invalid(format!(
                "query batch {b} outside 1..={MAX_REGIONS}"
            )));
        }
        let enc = self.encode(spec)?;
        if enc.batch != 1 {
            return Err(SepError::Invalid(format!(
                "query-conditioned prediction expects a single mixture, got batch {}",
                enc.batch
            )));
        }
        let bott = if b == 1 {
            enc.bottleneck
        } else {
            let s = g.shape(enc.bottleneck);
            g.broadcast_batch(g.reshape(enc.bottleneck, s[1..].to_vec())?, b)?
        };
        let fused = self.fuse(bott, queries)?;
        let masks = self.decode(fused, &enc)?;
        Ok((masks, enc))
    }

    /// Sum per-region masks over all regions and divide by the frame
    /// count: `[THW,1,F,N] → [1,F,N]` scaled by `1/T`.
    pub fn aggregate_masks(&self, region_masks: TensorId, t: usize) -> Result<TensorId> {
        if t == 0 {
            return Err(SepError::Invalid("frame count must be positive".into()));
        }
        let g = self.g;
        let summed = g.sum_batch(region_masks)?;
        Ok(g.scale(summed, 1.0 / t as f64)?)
    }

    /// Text-queried mask (`𝓜_AL`): one caption vector. Returns `[1,F,N]`.
    pub fn predict_mask_text(&self, spec: TensorId, caption: &[f64]) -> Result<TensorId> {
        let q = self.query_constant(&normalize_rows(caption.to_vec(), self.cfg.d)?, 1)?;
        let (masks, _) = self.masks_for_queries(spec, q)?;
        self.aggregate_masks(masks, 1)
    }

    /// Region-MIL video mask (`𝓜_AV`): every region conditions its own
    /// decode; masks are summed over space and averaged over time.
    pub fn predict_mask_video_mil(
        &self,
        spec: TensorId,
        regions: &EmbeddingGrid,
    ) -> Result<TensorId> {
        let (masks, _) = self.region_masks(spec, regions)?;
        self.aggregate_masks(masks, regions.t)
    }

    /// Per-region masks `[THW,1,F,N]` for callers that keep them.
    pub fn region_masks(
        &self,
        spec: TensorId,
        regions: &EmbeddingGrid,
    ) -> Result<(TensorId, EncodeOut)> {
        if regions.d != self.cfg.d {
            return Err(SepError::Invalid(format!(
                "region dim {} != query width {}",
                regions.d, self.cfg.d
            )));
        }
        let thw = regions.t * regions.h * regions.w;
        if thw > MAX_REGIONS {
            return Err(SepError::Invalid(format!(
                "{thw} regions exceed the {MAX_REGIONS}-region ceiling"
            )));
        }
        let q = self.query_constant(&normalize_rows(regions.values.clone(), self.cfg.d)?, thw)?;
        self.masks_for_queries(spec, q)
    }

    /// Pooled-baseline video mask: channelwise max over all regions makes
    /// one video-level query.
    pub fn predict_mask_video_pooled(
        &self,
        spec: TensorId,
        regions: &EmbeddingGrid,
    ) -> Result<TensorId> {
        if regions.d != self.cfg.d {
            return Err(SepError::Invalid(format!(
                "region dim {} != query width {}",
                regions.d, self.cfg.d
            )));
        }
        let d = regions.d;
        let mut pooled = vec![f64::NEG_INFINITY; d];
        for row in regions.values.chunks_exact(d) {
            for (p, v) in pooled.iter_mut().zip(row) {
                *p = p.max(*v);
            }
        }
        let q = self.query_constant(&normalize_rows(pooled, d)?, 1)?;
        let (masks, _) = self.masks_for_queries(spec, q)?;
        self.aggregate_masks(masks, 1)
    }

    /// `f̂^A`: encode a (predicted) spectrogram `[1,1,F,N]` with the shared
    /// encoder, average the bottleneck over space, unit-normalize.
    pub fn embed_predicted(&self, masked_spec: TensorId) -> Result<TensorId> {
        let g = self.g;
        let enc = self.encode(masked_spec)?;
        if enc.batch != 1 {
            return Err(SepError::Invalid("embed one spectrogram at a time".into()));
        }
        let s = g.shape(enc.bottleneck);
        let chw = g.reshape(enc.bottleneck, s[1..].to_vec())?;
        let mean = g.mean_spatial(chw)?;
        g.unit_normalize(mean).map_err(|e| match e {
            TensorError::Domain { .. } => {
                SepError::Invalid("predicted-spectrogram embedding is degenerate (zero norm)".into())
            }
            other => SepError::Tensor(other),
        })
    }

    /// Clamped mask times mixture magnitude, in-graph: `[1,F,N]` mask and
    /// `[1,1,F,N]` spectrogram to `[1,1,F,N]`.
    pub fn masked_magnitude(&self, mask: TensorId, spec: TensorId) -> Result<TensorId> {
        let g = self.g;
        let shape = g.shape(spec);
        let m4 = g.reshape(mask, shape.clone())?;
        let clamped = g.clamp(m4, 0.0, MASK_MAX)?;
        Ok(g.mul(clamped, spec)?)
    }

    fn query_constant(&self, rows: &[f64], b: usize) -> Result<TensorId> {
        Ok(self.g.constant(
            Array::new(vec![b, self.cfg.d], rows.to_vec())
                .map_err(|e| SepError::Invalid(e.to_string()))?,
        )?)
    }
}

/// Unit-normalizes each `d`-length row; rejects rows with vanishing norm.
pub fn normalize_rows(mut rows: Vec<f64>, d: usize) -> Result<Vec<f64>> {
    if d == 0 || rows.is_empty() || rows.len() % d != 0 {
        return Err(SepError::Invalid(format!(
            "{} values do not form rows of width {d}",
            rows.len()
        )));
    }
    for row in rows.chunks_exact_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < crate::tensor::EPS_NORM {
            return Err(SepError::Invalid("query vector has zero norm".into()));
        }
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    Ok(rows)
}

/// Converts a log-magnitude grid into the network's `[1,1,F,N]` input.
pub fn spec_input(g: &Graph, log: &LogSpectrogram) -> Result<TensorId> {
    let m = &log.magnitude;
    Ok(g.constant(
        Array::new(vec![1, 1, m.rows(), m.cols()], m.data().to_vec())
            .map_err(|e| SepError::Invalid(e.to_string()))?,
    )?)
}

/// What conditioned a separation.
pub enum Query<'a> {
    /// A joint-space caption/text vector (`𝓜_AL`).
    Caption(&'a [f64]),
    /// Raw video grid, region-MIL conditioning (`𝓜_AV`).
    VideoMil(&'a RawGrid),
    /// Raw video grid, pooled single-query baseline.
    VideoPooled(&'a RawGrid),
}

/// A completed separation: the mask, what it kept, and its embedding.
pub struct PredictedSeparation {
    pub mask: RatioMask,
    /// Clamped mask times mixture magnitude (log-frequency grid).
    pub masked_magnitude: Grid,
    /// `f̂^A` for the applied mask.
    pub embedding: Vec<f64>,
    /// Per-region masks, when requested in MIL mode.
    pub region_masks: Option<Vec<Grid>>,
}

/// Full inference: transform, predict a mask for the query, apply it, and
/// resynthesize. Text queries never touch video data; video queries never
/// touch text.
pub fn separate(
    model: &SepModel,
    space: &ConceptSpace,
    params: StftParams,
    audio: &Waveform,
    query: Query<'_>,
    keep_region_masks: bool,
) -> Result<(Waveform, PredictedSeparation)> {
    let cfg = model.config();
    let spec = dsp::stft(audio, params)?;
    let log = dsp::log_resample(&spec.magnitude, cfg.f_log)?;
    if log.magnitude.cols() != cfg.n_frames {
        return Err(SepError::Invalid(format!(
            "clip yields {} frames but the model expects {}",
            log.magnitude.cols(),
            cfg.n_frames
        )));
    }
    let g = Graph::new();
    let bound = model.bind(&g, false)?;
    let spec_t = spec_input(&g, &log)?;
    let (mask_id, regions_id) = match query {
        Query::Caption(v) => (bound.predict_mask_text(spec_t, v)?, None),
        Query::VideoMil(raw) => {
            let regions = space.encode_regions(raw)?;
            let (per_region, _) = bound.region_masks(spec_t, &regions)?;
            let agg = bound.aggregate_masks(per_region, regions.t)?;
            (agg, keep_region_masks.then_some(per_region))
        }
        Query::VideoPooled(raw) => {
            let regions = space.encode_regions(raw)?;
            (bound.predict_mask_video_pooled(spec_t, &regions)?, None)
        }
    };
    let masked_id = bound.masked_magnitude(mask_id, spec_t)?;
    let emb_id = bound.embed_predicted(masked_id)?;

    let mask_vals = g.value(mask_id);
    let mask = RatioMask {
        values: Grid::new(cfg.f_log, cfg.n_frames, mask_vals.data().to_vec())?,
    };
    let masked_vals = g.value(masked_id);
    let masked_magnitude = Grid::new(cfg.f_log, cfg.n_frames, masked_vals.data().to_vec())?;
    let embedding = g.value(emb_id).data().to_vec();
    let region_masks = regions_id.map(|rid| {
        let vals = g.value(rid);
        vals.data()
            .chunks_exact(cfg.f_log * cfg.n_frames)
            .map(|c| Grid::new(cfg.f_log, cfg.n_frames, c.to_vec()).expect("chunk sized"))
            .collect()
    });
    let wave = dsp::apply_mask(&mask, &log, &spec)?;
    Ok((wave, PredictedSeparation { mask, masked_magnitude, embedding, region_masks }))
}
