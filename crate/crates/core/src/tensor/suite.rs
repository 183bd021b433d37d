//! Finite-difference coverage for every graph operation.
//!
//! Each op is exercised on at least three micro-instances with distinct
//! shapes and attributes. Vector-valued ops are reduced to a scalar through a
//! fixed random weighting so every output coordinate influences the loss.
//! Inputs for kinked ops (leaky_relu, clamp, l1_mean) are kept away from
//! their kinks so central differences stay valid.

use std::collections::BTreeMap;

use super::gradcheck::{grad_check, GradCheckReport};
use super::{Array, Graph, TensorError, TensorId};
use crate::util::{gaussian_array, gaussian_vec, rng_from_seed, uniform_vec};

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;

/// One gradchecked instance: op label plus its finite-difference report.
pub type SuiteEntry = (String, GradCheckReport);

fn weighted_sum(
    g: &Graph,
    ids: &BTreeMap<String, TensorId>,
    out: TensorId,
    salt: u64,
) -> Result<TensorId, TensorError> {
    let _ = ids;
    let shape = g.shape(out);
    let mut rng = rng_from_seed(0xC0FFEE ^ salt);
    let n: usize = shape.iter().product();
    let w = g.constant(Array::new(shape, gaussian_vec(&mut rng, n, 1.0))?)?;
    g.sum_all(g.mul(out, w)?)
}

fn check<F>(
    entries: &mut Vec<SuiteEntry>,
    label: &str,
    point: &[(String, Array)],
    build: F,
) -> Result<(), TensorError>
where
    F: Fn(&Graph, &BTreeMap<String, TensorId>) -> Result<TensorId, TensorError>,
{
    let report = grad_check(point, GRADCHECK_STEP, 24, build)?;
    entries.push((label.to_string(), report));
    Ok(())
}

fn arr(seed: u64, shape: &[usize], std: f64) -> Array {
    gaussian_array(&mut rng_from_seed(seed), shape.to_vec(), std)
}

/// Gaussian values pushed away from zero by `margin`, for kinked ops.
fn arr_off_zero(seed: u64, shape: &[usize], margin: f64) -> Array {
    let mut a = arr(seed, shape, 1.0);
    for v in a.data_mut() {
        *v += margin * v.signum();
        if *v == 0.0 {
            *v = margin;
        }
    }
    a
}

fn positive_arr(seed: u64, shape: &[usize]) -> Array {
    let n: usize = shape.iter().product();
    let data = uniform_vec(&mut rng_from_seed(seed), n, 0.2, 2.0);
    Array::new(shape.to_vec(), data).expect("static shape")
}

/// Run the finite-difference suite over every op; returns one report per
/// instance. Callers decide what tolerance to enforce.
pub fn op_gradcheck_suite(seed: u64) -> Result<Vec<SuiteEntry>, TensorError> {
    let mut out = Vec::new();
    let e = &mut out;
    let s = seed;

    // Elementwise binary ops on three ranks.
    for (i, shape) in [vec![5], vec![2, 3], vec![2, 2, 3]].iter().enumerate() {
        let point = vec![
            ("a".to_string(), arr(s + i as u64, shape, 1.0)),
            ("b".to_string(), arr(s + 10 + i as u64, shape, 1.0)),
        ];
        check(e, &format!("add/{i}"), &point, |g, ids| {
            weighted_sum(g, ids, g.add(ids["a"], ids["b"])?, i as u64)
        })?;
        check(e, &format!("sub/{i}"), &point, |g, ids| {
            weighted_sum(g, ids, g.sub(ids["a"], ids["b"])?, i as u64)
        })?;
        check(e, &format!("mul/{i}"), &point, |g, ids| {
            weighted_sum(g, ids, g.mul(ids["a"], ids["b"])?, i as u64)
        })?;
    }

    for (i, c) in [1.7, -0.4, 3.0].into_iter().enumerate() {
        let point = vec![("a".to_string(), arr(s + 20 + i as u64, &[2, 4], 1.0))];
        check(e, &format!("scale/{i}"), &point, move |g, ids| {
            weighted_sum(g, ids, g.scale(ids["a"], c)?, i as u64)
        })?;
    }

    for (i, shape) in [vec![4], vec![2, 3], vec![3, 2]].iter().enumerate() {
        let point = vec![("a".to_string(), positive_arr(s + 30 + i as u64, shape))];
        check(e, &format!("log/{i}"), &point, |g, ids| {
            weighted_sum(g, ids, g.log(ids["a"])?, i as u64)
        })?;
    }

    for (i, slope) in [0.2, 0.01, 0.5].into_iter().enumerate() {
        let point = vec![("a".to_string(), arr_off_zero(s + 40 + i as u64, &[3, 3], 0.3))];
        check(e, &format!("leaky_relu/{i}"), &point, move |g, ids| {
            weighted_sum(g, ids, g.leaky_relu(ids["a"], slope)?, i as u64)
        })?;
    }

    for (i, shape) in [vec![6], vec![2, 3], vec![1, 2, 2]].iter().enumerate() {
        let point = vec![("a".to_string(), arr(s + 45 + i as u64, shape, 1.5))];
        check(e, &format!("sigmoid/{i}"), &point, |g, ids| {
            weighted_sum(g, ids, g.sigmoid(ids["a"])?, i as u64)
        })?;
    }

    // Clamp: values land either well inside or well outside the range.
    for (i, (lo, hi)) in [(-0.5, 0.5), (0.0, 1.5), (-2.0, 0.1)].into_iter().enumerate() {
        let mut a = arr(s + 50 + i as u64, &[7], 1.2);
        for v in a.data_mut() {
            let d = (*v - lo).abs().min((*v - hi).abs());
            if d < 0.05 {
                *v += 0.2;
            }
        }
        let point = vec![("a".to_string(), a)];
        check(e, &format!("clamp/{i}"), &point, move |g, ids| {
            weighted_sum(g, ids, g.clamp(ids["a"], lo, hi)?, i as u64)
        })?;
    }

    for (i, (m, k, n)) in [(2, 3, 2), (1, 4, 3), (3, 3, 3)].into_iter().enumerate() {
        let point = vec![
            ("a".to_string(), arr(s + 60 + i as u64, &[m, k], 1.0)),
            ("b".to_string(), arr(s + 70 + i as u64, &[k, n], 1.0)),
        ];
        check(e, &format!("matmul/{i}"), &point, |g, ids| {
            weighted_sum(g, ids, g.matmul(ids["a"], ids["b"])?, i as u64)
        })?;
    }

    for (i, (m, k)) in [(3, 4), (1, 5), (4, 2)].into_iter().enumerate() {
        let point = vec![
            ("a".to_string(), arr(s + 80 + i as u64, &[m, k], 1.0)),
            ("x".to_string(), arr(s + 90 + i as u64, &[k], 1.0)),
        ];
        check(e, &format!("matvec/{i}"), &point, |g, ids| {
            weighted_sum(g, ids, g.matvec(ids["a"], ids["x"])?, i as u64)
        })?;
    }

    // Convolutions: the geometries cover stride 1 and 2, padding 0 and 1,
    // multi-channel and 1x1 kernels.
    let conv_cases = [
        ((1, 2, 4, 4), (3, 2, 3, 3), 1, 1),
        ((2, 1, 5, 5), (2, 1, 4, 4), 2, 1),
        ((1, 3, 4, 5), (2, 3, 1, 1), 1, 0),
    ];
    for (i, ((b, ci, h, w), (co, _, kh, kw), stride, pad)) in conv_cases.into_iter().enumerate() {
        let point = vec![
            ("x".to_string(), arr(s + 100 + i as u64, &[b, ci, h, w], 1.0)),
            ("k".to_string(), arr(s + 110 + i as u64, &[co, ci, kh, kw], 0.5)),
        ];
        check(e, &format!("conv2d/{i}"), &point, move |g, ids| {
            weighted_sum(g, ids, g.conv2d(ids["x"], ids["k"], stride, pad)?, i as u64)
        })?;
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let point = vec![
            ("u".to_string(), arr(s + 120 + i as u64, &[b, co, oh, ow], 1.0)),
            ("k".to_string(), arr(s + 130 + i as u64, &[co, ci, kh, kw], 0.5)),
        ];
        check(e, &format!("conv_transpose2d/{i}"), &point, move |g, ids| {
            weighted_sum(g, ids, g.conv_transpose2d(ids["u"], ids["k"], stride, pad)?, i as u64)
        })?;
    }

    for (i, (b, c1, c2, h, w)) in [(1, 2, 3, 2, 2), (2, 1, 1, 3, 2), (1, 4, 2, 2, 3)]
        .into_iter()
        .enumerate()
    {
        let point = vec![
            ("a".to_string(), arr(s + 140 + i as u64, &[b, c1, h, w], 1.0)),
            ("b".to_string(), arr(s + 150 + i as u64, &[b, c2, h, w], 1.0)),
        ];
        check(e, &format!("concat_channels/{i}"), &point, |g, ids| {
            weighted_sum(g, ids, g.concat_channels(ids["a"], ids["b"])?, i as u64)
        })?;
    }

    for (i, (batch, c, h, w)) in [(2, 2, 2, 2), (4, 1, 3, 2), (3, 3, 1, 2)].into_iter().enumerate()
    {
        let point = vec![("a".to_string(), arr(s + 160 + i as u64, &[c, h, w], 1.0))];
        check(e, &format!("broadcast_batch/{i}"), &point, move |g, ids| {
            weighted_sum(g, ids, g.broadcast_batch(ids["a"], batch)?, i as u64)
        })?;
        let point = vec![("a".to_string(), arr(s + 170 + i as u64, &[batch, c], 1.0))];
        check(e, &format!("tile_spatial/{i}"), &point, move |g, ids| {
            weighted_sum(g, ids, g.tile_spatial(ids["a"], h, w)?, i as u64)
        })?;
        let point = vec![("a".to_string(), arr(s + 180 + i as u64, &[batch, c, h, w], 1.0))];
        check(e, &format!("sum_batch/{i}"), &point, |g, ids| {
            weighted_sum(g, ids, g.sum_batch(ids["a"])?, i as u64)
        })?;
        let point = vec![("a".to_string(), arr(s + 190 + i as u64, &[c, h, w], 1.0))];
        check(e, &format!("mean_spatial/{i}"), &point, |g, ids| {
            weighted_sum(g, ids, g.mean_spatial(ids["a"])?, i as u64)
        })?;
    }

    for (i, shape) in [vec![4], vec![2, 3], vec![2, 2, 2]].iter().enumerate() {
        let point = vec![("a".to_string(), arr(s + 200 + i as u64, shape, 1.0))];
        check(e, &format!("sum_all/{i}"), &point, |g, ids| g.sum_all(ids["a"]))?;
        check(e, &format!("mean_all/{i}"), &point, |g, ids| g.mean_all(ids["a"]))?;
        check(e, &format!("reshape/{i}"), &point, |g, ids| {
            let n: usize = g.shape(ids["a"]).iter().product();
            weighted_sum(g, ids, g.reshape(ids["a"], vec![n])?, i as u64)
        })?;
    }

    // l1_mean with coordinates separated by at least ~0.3.
    for (i, shape) in [vec![5], vec![2, 4], vec![3, 3]].iter().enumerate() {
        let a = arr(s + 210 + i as u64, shape, 1.0);
        let mut b = a.clone();
        let signs = arr(s + 220 + i as u64, shape, 1.0);
        for (bv, sv) in b.data_mut().iter_mut().zip(signs.data()) {
            *bv += 0.4 * sv.signum() + 0.2 * sv;
        }
        let point = vec![("a".to_string(), a), ("b".to_string(), b)];
        check(e, &format!("l1_mean/{i}"), &point, |g, ids| g.l1_mean(ids["a"], ids["b"]))?;
    }

    for (i, n) in [3usize, 6, 9].into_iter().enumerate() {
        let point = vec![("a".to_string(), arr_off_zero(s + 230 + i as u64, &[n], 0.5))];
        check(e, &format!("unit_normalize/{i}"), &point, |g, ids| {
            weighted_sum(g, ids, g.unit_normalize(ids["a"])?, i as u64)
        })?;
    }

    for (i, temp) in [1.0, 0.07, 2.5].into_iter().enumerate() {
        let point = vec![("a".to_string(), arr(s + 240 + i as u64, &[6], 0.5))];
        check(e, &format!("softmax/{i}"), &point, move |g, ids| {
            weighted_sum(g, ids, g.softmax(ids["a"], temp)?, i as u64)
        })?;
    }

    for (i, n) in [3usize, 5, 8].into_iter().enumerate() {
        let point = vec![("a".to_string(), positive_arr(s + 250 + i as u64, &[n]))];
        check(e, &format!("sum_norm/{i}"), &point, |g, ids| {
            weighted_sum(g, ids, g.sum_norm(ids["a"])?, i as u64)
        })?;
    }

    for (i, n) in [4usize, 8, 16].into_iter().enumerate() {
        let point = vec![
            ("a".to_string(), arr(s + 260 + i as u64, &[n], 1.0)),
            ("b".to_string(), arr(s + 270 + i as u64, &[n], 1.0)),
        ];
        check(e, &format!("cosine/{i}"), &point, |g, ids| g.cosine(ids["a"], ids["b"]))?;
    }

    // KL on softmax-ed leaves, so probes keep both arguments normalized.
    for (i, n) in [3usize, 5, 7].into_iter().enumerate() {
        let point = vec![
            ("a".to_string(), arr(s + 280 + i as u64, &[n], 0.8)),
            ("b".to_string(), arr(s + 290 + i as u64, &[n], 0.8)),
        ];
        check(e, &format!("kl_div/{i}"), &point, |g, ids| {
            let p = g.softmax(ids["a"], 1.0)?;
            let q = g.softmax(ids["b"], 1.0)?;
            g.kl_div(p, q)
        })?;
    }

    for (i, (n, target)) in [(4usize, 0usize), (6, 3), (5, 4)].into_iter().enumerate() {
        let point = vec![("a".to_string(), arr(s + 300 + i as u64, &[n], 1.0))];
        check(e, &format!("cross_entropy_logits/{i}"), &point, move |g, ids| {
            g.cross_entropy_logits(ids["a"], target)
        })?;
    }

    Ok(out)
}
