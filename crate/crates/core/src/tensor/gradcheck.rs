//! Central-difference verification of analytic gradients.
//!
//! `grad_check` rebuilds the graph from scratch for every probe, so it works
//! for any function expressible with graph ops, including whole training
//! losses. Large parameters are probed at a deterministic, evenly spaced
//! subset of coordinates to keep the cost bounded.

use std::collections::BTreeMap;

use super::{Array, Graph, TensorError, TensorId};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Maximum relative error observed across all probed coordinates.
    pub max_rel_err: f64,
    /// `name[index]` of the worst coordinate, for diagnostics.
    pub worst: String,
    /// Number of coordinates compared against finite differences.
    pub checked_coords: usize,
}

/// Compare analytic gradients of a scalar-valued graph function against
/// central finite differences at `point`.
///
/// `build` must construct the loss from the named leaves it is handed; it is
/// invoked once for the analytic pass and twice per probed coordinate. The
/// relative error uses `|a - fd| / max(1, |a|, |fd|)`, so tiny gradients are
/// compared absolutely and large ones relatively.
pub fn grad_check<F>(
    point: &[(String, Array)],
    h: f64,
    max_coords_per_param: usize,
    build: F,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&Graph, &BTreeMap<String, TensorId>) -> Result<TensorId, TensorError>,
{
    let run = |vals: &[(String, Array)]| -> Result<(f64, BTreeMap<String, Array>), TensorError> {
        let g = Graph::new();
        let mut ids = BTreeMap::new();
        for (name, arr) in vals {
            ids.insert(name.clone(), g.leaf(name, arr.clone())?);
        }
        let loss = build(&g, &ids)?;
        if g.shape(loss) != vec![1] {
            return Err(TensorError::NonScalarLoss(g.shape(loss)));
        }
        g.backward(loss)?;
        let grads = ids.iter().map(|(n, &id)| (n.clone(), g.grad(id))).collect();
        Ok((g.value(loss).item(), grads))
    };

    let (_, analytic) = run(point)?;

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: String::new(), checked_coords: 0 };
    let mut probe = point.to_vec();
    for (pi, (name, arr)) in point.iter().enumerate() {
        let n = arr.len();
        let m = n.min(max_coords_per_param.max(1));
        let grad = &analytic[name];
        for j in 0..m {
            let idx = j * n / m;
            let x0 = arr.data()[idx];
            probe[pi].1.data_mut()[idx] = x0 + h;
            let (f_plus, _) = run(&probe)?;
            probe[pi].1.data_mut()[idx] = x0 - h;
            let (f_minus, _) = run(&probe)?;
            probe[pi].1.data_mut()[idx] = x0;
            let fd = (f_plus - f_minus) / (2.0 * h);
            let a = grad.data()[idx];
            let rel = (a - fd).abs() / 1.0_f64.max(a.abs()).max(fd.abs());
            report.checked_coords += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = format!("{name}[{idx}]");
            }
        }
    }
    Ok(report)
}
