//! Forward implementations and backward rules for every graph operation.
//!
//! Each forward validates shapes, computes the result, and appends a node;
//! `backward_deltas` returns one gradient array per parent for the reverse
//! sweep in `Graph::backward`. Reductions to a scalar always use shape `[1]`.

use super::conv::{self, ConvSpec};
use super::{Array, Graph, Node, Op, TensorError, TensorId};

/// Smallest admissible mass for the second argument of KL divergence.
pub const EPS_KL: f64 = 1e-30;
/// Vectors with norm below this cannot be normalized or compared by cosine.
pub const EPS_NORM: f64 = 1e-12;
/// Normalization slack accepted when validating probability vectors.
const DIST_TOL: f64 = 1e-6;

impl Graph {
    fn node_value(&self, id: TensorId) -> Array {
        self.inner.borrow().nodes[id.0].value.clone()
    }

    fn binary_same_shape(
        &self,
        op: &'static str,
        a: TensorId,
        b: TensorId,
    ) -> Result<(Array, Array), TensorError> {
        let va = self.node_value(a);
        let vb = self.node_value(b);
        if va.shape != vb.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", va.shape, vb.shape),
            });
        }
        Ok((va, vb))
    }

    pub fn add(&self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (va, vb) = self.binary_same_shape("add", a, b)?;
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        self.push(Array { shape: va.shape, data }, Op::Add(a, b))
    }

    pub fn sub(&self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (va, vb) = self.binary_same_shape("sub", a, b)?;
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect();
        self.push(Array { shape: va.shape, data }, Op::Sub(a, b))
    }

    pub fn mul(&self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (va, vb) = self.binary_same_shape("mul", a, b)?;
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        self.push(Array { shape: va.shape, data }, Op::Mul(a, b))
    }

    pub fn scale(&self, a: TensorId, c: f64) -> Result<TensorId, TensorError> {
        let va = self.node_value(a);
        let data = va.data.iter().map(|x| c * x).collect();
        self.push(Array { shape: va.shape, data }, Op::Scale(a, c))
    }

    /// Natural logarithm; defined only for strictly positive inputs.
    pub fn log(&self, a: TensorId) -> Result<TensorId, TensorError> {
        let va = self.node_value(a);
        if va.data.iter().any(|&x| x <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                detail: "input must be strictly positive".into(),
            });
        }
        let data = va.data.iter().map(|x| x.ln()).collect();
        self.push(Array { shape: va.shape, data }, Op::Log(a))
    }

    pub fn leaky_relu(&self, a: TensorId, slope: f64) -> Result<TensorId, TensorError> {
        let va = self.node_value(a);
        let data = va.data.iter().map(|&x| if x >= 0.0 { x } else { slope * x }).collect();
        self.push(Array { shape: va.shape, data }, Op::LeakyRelu(a, slope))
    }

    /// Logistic squash `1 / (1 + e^{-x})`, elementwise.
    pub fn sigmoid(&self, a: TensorId) -> Result<TensorId, TensorError> {
        let va = self.node_value(a);
        let data = va.data.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        self.push(Array { shape: va.shape, data }, Op::Sigmoid(a))
    }

    /// Clamp to `[lo, hi]`; gradient passes only through unclamped entries.
    pub fn clamp(&self, a: TensorId, lo: f64, hi: f64) -> Result<TensorId, TensorError> {
        if !(lo < hi) {
            return Err(TensorError::Domain {
                op: "clamp",
                detail: format!("empty range [{lo}, {hi}]"),
            });
        }
        let va = self.node_value(a);
        let data = va.data.iter().map(|x| x.clamp(lo, hi)).collect();
        self.push(Array { shape: va.shape, data }, Op::Clamp(a, lo, hi))
    }

    /// `a [m,k] * b [k,n] -> [m,n]`.
    pub fn matmul(&self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let va = self.node_value(a);
        let vb = self.node_value(b);
        if va.shape.len() != 2 || vb.shape.len() != 2 || va.shape[1] != vb.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", va.shape, vb.shape),
            });
        }
        let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
        let data = matmul_mkn(&va.data, &vb.data, m, k, n);
        self.push(Array { shape: vec![m, n], data }, Op::MatMul(a, b))
    }

    /// `a [m,k] * x [k] -> [m]`.
    pub fn matvec(&self, a: TensorId, x: TensorId) -> Result<TensorId, TensorError> {
        let va = self.node_value(a);
        let vx = self.node_value(x);
        if va.shape.len() != 2 || vx.shape.len() != 1 || va.shape[1] != vx.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matvec",
                detail: format!("{:?} x {:?}", va.shape, vx.shape),
            });
        }
        let (m, k) = (va.shape[0], va.shape[1]);
        let mut data = vec![0.0; m];
        for i in 0..m {
            data[i] = dot(&va.data[i * k..(i + 1) * k], &vx.data);
        }
        self.push(Array { shape: vec![m], data }, Op::MatVec(a, x))
    }

    /// Strided 2-d cross-correlation: `x [B,Ci,H,W]`, `k [Co,Ci,kh,kw]`.
    pub fn conv2d(
        &self,
        x: TensorId,
        k: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId, TensorError> {
        let vx = self.node_value(x);
        let vk = self.node_value(k);
        let spec = ConvSpec::for_conv(&vx.shape, &vk.shape, stride, pad)?;
        let data = conv::conv_fwd(&vx.data, &vk.data, &spec);
        self.push(Array { shape: spec.conv_out_shape(), data }, Op::Conv2d(x, k, spec))
    }

    /// Exact adjoint of [`Graph::conv2d`] with the same kernel layout:
    /// `u [B,Co,OH,OW]` maps back to `[B,Ci,H,W]` with
    /// `H = (OH-1)*stride + kh - 2*pad`.
    pub fn conv_transpose2d(
        &self,
        u: TensorId,
        k: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId, TensorError> {
        let vu = self.node_value(u);
        let vk = self.node_value(k);
        let spec = ConvSpec::for_transpose(&vu.shape, &vk.shape, stride, pad)?;
        let data = conv::conv_bwd_input(&vu.data, &vk.data, &spec);
        self.push(Array { shape: spec.conv_in_shape(), data }, Op::ConvTranspose2d(u, k, spec))
    }

    /// Concatenate two `[B,C,H,W]` tensors along the channel axis.
    pub fn concat_channels(&self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let va = self.node_value(a);
        let vb = self.node_value(b);
        let ok = va.shape.len() == 4
            && vb.shape.len() == 4
            && va.shape[0] == vb.shape[0]
            && va.shape[2] == vb.shape[2]
            && va.shape[3] == vb.shape[3];
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                detail: format!("{:?} vs {:?}", va.shape, vb.shape),
            });
        }
        let (bsz, ca, cb) = (va.shape[0], va.shape[1], vb.shape[1]);
        let hw = va.shape[2] * va.shape[3];
        let mut data = Vec::with_capacity((ca + cb) * bsz * hw);
        for ib in 0..bsz {
            data.extend_from_slice(&va.data[ib * ca * hw..(ib + 1) * ca * hw]);
            data.extend_from_slice(&vb.data[ib * cb * hw..(ib + 1) * cb * hw]);
        }
        let shape = vec![bsz, ca + cb, va.shape[2], va.shape[3]];
        self.push(Array { shape, data }, Op::ConcatChannels(a, b))
    }

    /// Repeat a `[C,H,W]` tensor along a new leading batch axis.
    pub fn broadcast_batch(&self, a: TensorId, batch: usize) -> Result<TensorId, TensorError> {
        let va = self.node_value(a);
        if va.shape.len() != 3 || batch == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_batch",
                detail: format!("want [C,H,W] and batch > 0, got {:?} x{batch}", va.shape),
            });
        }
        let mut data = Vec::with_capacity(batch * va.data.len());
        for _ in 0..batch {
            data.extend_from_slice(&va.data);
        }
        let shape = vec![batch, va.shape[0], va.shape[1], va.shape[2]];
        self.push(Array { shape, data }, Op::BroadcastBatch(a, batch))
    }

    /// Tile a `[B,D]` matrix of vectors over an `h x w` spatial grid,
    /// producing `[B,D,h,w]`.
    pub fn tile_spatial(&self, a: TensorId, h: usize, w: usize) -> Result<TensorId, TensorError> {
        let va = self.node_value(a);
        if va.shape.len() != 2 || h == 0 || w == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "tile_spatial",
                detail: format!("want [B,D] and h,w > 0, got {:?} {h}x{w}", va.shape),
            });
        }
        let (bsz, d) = (va.shape[0], va.shape[1]);
        let mut data = vec![0.0; bsz * d * h * w];
        for ib in 0..bsz {
            for id in 0..d {
                let v = va.data[ib * d + id];
                let base = (ib * d + id) * h * w;
                data[base..base + h * w].iter_mut().for_each(|o| *o = v);
            }
        }
        self.push(Array { shape: vec![bsz, d, h, w], data }, Op::TileSpatial(a, h, w))
    }

    /// Sum a `[B,C,H,W]` tensor over the batch axis, producing `[C,H,W]`.
    pub fn sum_batch(&self, a: TensorId) -> Result<TensorId, TensorError> {
        let va = self.node_value(a);
        if va.shape.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "sum_batch",
                detail: format!("want [B,C,H,W], got {:?}", va.shape),
            });
        }
        let b = va.shape[0];
        let per = va.data.len() / b;
        // Each output coordinate sums its batch slice in value-sorted order,
        // making the reduction exactly invariant to batch permutation.
        let mut data = vec![0.0; per];
        let mut buf = vec![0.0; b];
        for (ci, d) in data.iter_mut().enumerate() {
            for (ib, slot) in buf.iter_mut().enumerate() {
                *slot = va.data[ib * per + ci];
            }
            buf.sort_unstable_by(f64::total_cmp);
            *d = buf.iter().sum();
        }
        let shape = va.shape[1..].to_vec();
        self.push(Array { shape, data }, Op::SumBatch(a))
    }

    /// Mean over the spatial axes of `[C,H,W]`, producing `[C]`.
    pub fn mean_spatial(&self, a: TensorId) -> Result<TensorId, TensorError> {
        let va = self.node_value(a);
        if va.shape.len() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "mean_spatial",
                detail: format!("want [C,H,W], got {:?}", va.shape),
            });
        }
        let hw = va.shape[1] * va.shape[2];
        let data = va
            .data
            .chunks_exact(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect();
        self.push(Array { shape: vec![va.shape[0]], data }, Op::MeanSpatial(a))
    }

    pub fn sum_all(&self, a: TensorId) -> Result<TensorId, TensorError> {
        let va = self.node_value(a);
        let s = va.data.iter().sum();
        self.push(Array::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&self, a: TensorId) -> Result<TensorId, TensorError> {
        let va = self.node_value(a);
        let s = va.data.iter().sum::<f64>() / va.data.len() as f64;
        self.push(Array::scalar(s), Op::MeanAll(a))
    }

    /// Mean absolute difference over all cells (sum form divided by the cell
    /// count, which keeps the value comparable across grid sizes).
    pub fn l1_mean(&self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (va, vb) = self.binary_same_shape("l1_mean", a, b)?;
        let s: f64 = va.data.iter().zip(&vb.data).map(|(x, y)| (x - y).abs()).sum();
        self.push(Array::scalar(s / va.data.len() as f64), Op::L1Mean(a, b))
    }

    /// Scale a vector to unit Euclidean norm.
    pub fn unit_normalize(&self, a: TensorId) -> Result<TensorId, TensorError> {
        let va = self.node_value(a);
        let norm = l2_norm(&va.data);
        if norm < EPS_NORM {
            return Err(TensorError::Domain {
                op: "unit_normalize",
                detail: format!("norm {norm:.3e} below {EPS_NORM:.0e}"),
            });
        }
        let data = va.data.iter().map(|x| x / norm).collect();
        self.push(Array { shape: va.shape, data }, Op::UnitNormalize(a))
    }

    /// Exponential softmax with temperature, computed with max subtraction.
    pub fn softmax(&self, a: TensorId, temperature: f64) -> Result<TensorId, TensorError> {
        if temperature <= 0.0 {
            return Err(TensorError::Domain {
                op: "softmax",
                detail: format!("temperature must be positive, got {temperature}"),
            });
        }
        let va = self.node_value(a);
        let data = softmax_stable(&va.data, temperature);
        self.push(Array { shape: va.shape, data }, Op::Softmax(a, temperature))
    }

    /// Mass normalization `z_i / sum_j z_j` over non-negative scores.
    pub fn sum_norm(&self, a: TensorId) -> Result<TensorId, TensorError> {
        let va = self.node_value(a);
        if va.data.iter().any(|&x| x < 0.0) {
            return Err(TensorError::Distribution {
                op: "sum_norm",
                detail: "negative score; sum normalization needs non-negative mass".into(),
            });
        }
        let s: f64 = va.data.iter().sum();
        if s <= 0.0 {
            return Err(TensorError::Distribution {
                op: "sum_norm",
                detail: "all scores zero; distribution is degenerate".into(),
            });
        }
        let data = va.data.iter().map(|x| x / s).collect();
        self.push(Array { shape: va.shape, data }, Op::SumNorm(a))
    }

    /// Cosine similarity of two equal-length vectors, as a scalar node.
    pub fn cosine(&self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (va, vb) = self.binary_same_shape("cosine", a, b)?;
        let na = l2_norm(&va.data);
        let nb = l2_norm(&vb.data);
        if na < EPS_NORM || nb < EPS_NORM {
            return Err(TensorError::Domain {
                op: "cosine",
                detail: format!("norms {na:.3e}, {nb:.3e}; both must exceed {EPS_NORM:.0e}"),
            });
        }
        let c = dot(&va.data, &vb.data) / (na * nb);
        self.push(Array::scalar(c), Op::Cosine(a, b))
    }

    /// `KL(p || q) = sum_i p_i ln(p_i / q_i)`, with `0 ln 0 = 0`. Both inputs
    /// must be probability vectors; `q` must stay above [`EPS_KL`].
    pub fn kl_div(&self, p: TensorId, q: TensorId) -> Result<TensorId, TensorError> {
        let (vp, vq) = self.binary_same_shape("kl_div", p, q)?;
        validate_distribution("kl_div", &vp.data, 0.0)?;
        validate_distribution("kl_div", &vq.data, EPS_KL)?;
        let mut s = 0.0;
        for (&pi, &qi) in vp.data.iter().zip(&vq.data) {
            if pi > 0.0 {
                s += pi * (pi / qi).ln();
            }
        }
        self.push(Array::scalar(s), Op::KlDiv(p, q))
    }

    /// Negative log-softmax of the entry at `target`, from raw logits.
    pub fn cross_entropy_logits(
        &self,
        logits: TensorId,
        target: usize,
    ) -> Result<TensorId, TensorError> {
        let v = self.node_value(logits);
        if v.shape.len() != 1 || target >= v.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_logits",
                detail: format!("logits {:?}, target {target}", v.shape),
            });
        }
        let m = v.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + v.data.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        self.push(Array::scalar(lse - v.data[target]), Op::CrossEntropyLogits(logits, target))
    }

    /// View the same data under a new shape with equal element count.
    pub fn reshape(&self, a: TensorId, shape: Vec<usize>) -> Result<TensorId, TensorError> {
        let va = self.node_value(a);
        if shape.iter().product::<usize>() != va.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", va.shape, shape),
            });
        }
        self.push(Array { shape, data: va.data }, Op::Reshape(a))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn softmax_stable(x: &[f64], temperature: f64) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| ((v - m) / temperature).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}

fn validate_distribution(op: &'static str, p: &[f64], floor: f64) -> Result<(), TensorError> {
    if p.iter().any(|&x| x < floor) {
        return Err(TensorError::Distribution {
            op,
            detail: format!("entry below floor {floor:.0e}"),
        });
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > DIST_TOL {
        return Err(TensorError::Distribution {
            op,
            detail: format!("mass sums to {s}, expected 1 within {DIST_TOL:.0e}"),
        });
    }
    Ok(())
}

/// Row-major `[m,k] x [k,n]` with an n-contiguous inner loop.
fn matmul_mkn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut y = vec![0.0; m * n];
    for i in 0..m {
        let yrow = &mut y[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (yv, bv) in yrow.iter_mut().zip(brow) {
                *yv += av * bv;
            }
        }
    }
    y
}

/// Gradient contributions for each parent of node `i`, in parent order.
pub(crate) fn backward_deltas(
    nodes: &[Node],
    i: usize,
    op: &Op,
) -> Result<Vec<Vec<f64>>, TensorError> {
    let g = &nodes[i].grad;
    let val = |id: TensorId| -> &Array { &nodes[id.0].value };
    Ok(match *op {
        Op::Leaf | Op::Constant => vec![],
        Op::Add(..) => vec![g.clone(), g.clone()],
        Op::Sub(..) => vec![g.clone(), g.iter().map(|x| -x).collect()],
        Op::Mul(a, b) => {
            let va = &val(a).data;
            let vb = &val(b).data;
            vec![
                g.iter().zip(vb.iter()).map(|(gi, y)| gi * y).collect(),
                g.iter().zip(va.iter()).map(|(gi, x)| gi * x).collect(),
            ]
        }
        Op::Scale(_, c) => vec![g.iter().map(|x| c * x).collect()],
        Op::Log(a) => {
            let va = &val(a).data;
            vec![g.iter().zip(va.iter()).map(|(gi, x)| gi / x).collect()]
        }
        Op::LeakyRelu(a, slope) => {
            let va = &val(a).data;
            vec![g
                .iter()
                .zip(va.iter())
                .map(|(gi, &x)| if x >= 0.0 { *gi } else { slope * gi })
                .collect()]
        }
        Op::Sigmoid(_) => {
            let y = &nodes[i].value.data;
            vec![g.iter().zip(y.iter()).map(|(gi, &s)| gi * s * (1.0 - s)).collect()]
        }
        Op::Clamp(a, lo, hi) => {
            let va = &val(a).data;
            vec![g
                .iter()
                .zip(va.iter())
                .map(|(gi, &x)| if (lo..=hi).contains(&x) { *gi } else { 0.0 })
                .collect()]
        }
        Op::MatMul(a, b) => {
            let va = val(a);
            let vb = val(b);
            let (m, k) = (va.shape[0], va.shape[1]);
            let n = vb.shape[1];
            // da = g * b^T
            let mut da = vec![0.0; m * k];
            for im in 0..m {
                for ik in 0..k {
                    da[im * k + ik] = dot(&g[im * n..(im + 1) * n], &vb.data[ik * n..(ik + 1) * n]);
                }
            }
            // db = a^T * g
            let mut db = vec![0.0; k * n];
            for ik in 0..k {
                let dbrow = &mut db[ik * n..(ik + 1) * n];
                for im in 0..m {
                    let av = va.data[im * k + ik];
                    if av == 0.0 {
                        continue;
                    }
                    for (d, gv) in dbrow.iter_mut().zip(&g[im * n..(im + 1) * n]) {
                        *d += av * gv;
                    }
                }
            }
            vec![da, db]
        }
        Op::MatVec(a, x) => {
            let va = val(a);
            let vx = val(x);
            let (m, k) = (va.shape[0], va.shape[1]);
            let mut da = vec![0.0; m * k];
            for im in 0..m {
                let gi = g[im];
                if gi == 0.0 {
                    continue;
                }
                for (d, xv) in da[im * k..(im + 1) * k].iter_mut().zip(&vx.data) {
                    *d = gi * xv;
                }
            }
            let mut dx = vec![0.0; k];
            for im in 0..m {
                let gi = g[im];
                if gi == 0.0 {
                    continue;
                }
                for (d, av) in dx.iter_mut().zip(&va.data[im * k..(im + 1) * k]) {
                    *d += gi * av;
                }
            }
            vec![da, dx]
        }
        Op::Conv2d(x, k, ref spec) => {
            let vx = &val(x).data;
            let vk = &val(k).data;
            vec![conv::conv_bwd_input(g, vk, spec), conv::conv_bwd_kernel(vx, g, spec)]
        }
        Op::ConvTranspose2d(u, k, ref spec) => {
            let vu = &val(u).data;
            let vk = &val(k).data;
            vec![conv::conv_fwd(g, vk, spec), conv::conv_bwd_kernel(g, vu, spec)]
        }
        Op::ConcatChannels(a, b) => {
            let va = val(a);
            let vb = val(b);
            let (bsz, ca, cb) = (va.shape[0], va.shape[1], vb.shape[1]);
            let hw = va.shape[2] * va.shape[3];
            let mut da = vec![0.0; va.data.len()];
            let mut db = vec![0.0; vb.data.len()];
            let stride = (ca + cb) * hw;
            for ib in 0..bsz {
                let grow = &g[ib * stride..(ib + 1) * stride];
                da[ib * ca * hw..(ib + 1) * ca * hw].copy_from_slice(&grow[..ca * hw]);
                db[ib * cb * hw..(ib + 1) * cb * hw].copy_from_slice(&grow[ca * hw..]);
            }
            vec![da, db]
        }
        Op::BroadcastBatch(a, batch) => {
            let per = val(a).data.len();
            let mut da = vec![0.0; per];
            for ib in 0..batch {
                for (d, gv) in da.iter_mut().zip(&g[ib * per..(ib + 1) * per]) {
                    *d += gv;
                }
            }
            vec![da]
        }
        Op::TileSpatial(a, h, w) => {
            let va = val(a);
            let (bsz, d) = (va.shape[0], va.shape[1]);
            let hw = h * w;
            let mut da = vec![0.0; bsz * d];
            for bd in 0..bsz * d {
                da[bd] = g[bd * hw..(bd + 1) * hw].iter().sum();
            }
            vec![da]
        }
        Op::SumBatch(a) => {
            let va = val(a);
            let per = g.len();
            let batch = va.shape[0];
            let mut da = Vec::with_capacity(batch * per);
            for _ in 0..batch {
                da.extend_from_slice(g);
            }
            vec![da]
        }
        Op::MeanSpatial(a) => {
            let va = val(a);
            let hw = va.shape[1] * va.shape[2];
            let mut da = vec![0.0; va.data.len()];
            for (c, chunk) in da.chunks_exact_mut(hw).enumerate() {
                let gv = g[c] / hw as f64;
                chunk.iter_mut().for_each(|d| *d = gv);
            }
            vec![da]
        }
        Op::SumAll(a) => vec![vec![g[0]; val(a).data.len()]],
        Op::MeanAll(a) => {
            let n = val(a).data.len();
            vec![vec![g[0] / n as f64; n]]
        }
        Op::L1Mean(a, b) => {
            let va = &val(a).data;
            let vb = &val(b).data;
            let scale = g[0] / va.len() as f64;
            let da: Vec<f64> = va
                .iter()
                .zip(vb.iter())
                .map(|(x, y)| scale * (x - y).signum_or_zero())
                .collect();
            let db = da.iter().map(|x| -x).collect();
            vec![da, db]
        }
        Op::UnitNormalize(a) => {
            let va = &val(a).data;
            let y = &nodes[i].value.data;
            let norm = l2_norm(va);
            let gy = dot(g, y);
            vec![g.iter().zip(y.iter()).map(|(gi, yi)| (gi - yi * gy) / norm).collect()]
        }
        Op::Softmax(_, temperature) => {
            let s = &nodes[i].value.data;
            let gs = dot(g, s);
            vec![g
                .iter()
                .zip(s.iter())
                .map(|(gi, si)| si * (gi - gs) / temperature)
                .collect()]
        }
        Op::SumNorm(a) => {
            let va = &val(a).data;
            let y = &nodes[i].value.data;
            let total: f64 = va.iter().sum();
            let gy = dot(g, y);
            vec![g.iter().map(|gi| (gi - gy) / total).collect()]
        }
        Op::Cosine(a, b) => {
            let va = &val(a).data;
            let vb = &val(b).data;
            let na = l2_norm(va);
            let nb = l2_norm(vb);
            let c = nodes[i].value.data[0];
            let gv = g[0];
            let da = va
                .iter()
                .zip(vb.iter())
                .map(|(x, y)| gv * (y / (na * nb) - c * x / (na * na)))
                .collect();
            let db = va
                .iter()
                .zip(vb.iter())
                .map(|(x, y)| gv * (x / (na * nb) - c * y / (nb * nb)))
                .collect();
            vec![da, db]
        }
        Op::KlDiv(p, q) => {
            let vp = &val(p).data;
            let vq = &val(q).data;
            let gv = g[0];
            let dp = vp
                .iter()
                .zip(vq.iter())
                .map(|(&pi, &qi)| if pi > 0.0 { gv * ((pi / qi).ln() + 1.0) } else { 0.0 })
                .collect();
            let dq = vp.iter().zip(vq.iter()).map(|(&pi, &qi)| -gv * pi / qi).collect();
            vec![dp, dq]
        }
        Op::CrossEntropyLogits(a, target) => {
            let va = &val(a).data;
            let s = softmax_stable(va, 1.0);
            let gv = g[0];
            let mut da: Vec<f64> = s.iter().map(|si| gv * si).collect();
            da[target] -= gv;
            vec![da]
        }
        Op::Reshape(_) => vec![g.clone()],
    })
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    /// Subgradient of `|x|` with the tie at zero resolved to 0.
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}
