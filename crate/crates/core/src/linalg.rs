//! Small dense linear-algebra helpers: Cholesky solves for symmetric
//! positive-definite systems and modified Gram-Schmidt orthonormalization.
//! Used for pseudo-inverse constructions in the foundation model and for the
//! shifted-reference projections in BSS evaluation.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot:.3e} at column {col})")]
    NotPositiveDefinite { col: usize, pivot: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("rank deficiency during orthonormalization at row {0}")]
    RankDeficient(usize),
}

/// Cholesky factorization of a symmetric positive-definite matrix stored
/// row-major; returns the lower factor `L` with `A = L L^T`.
pub fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>, LinalgError> {
    if a.len() != n * n {
        return Err(LinalgError::Dimension(format!("expected {n}x{n}, got len {}", a.len())));
    }
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(LinalgError::NotPositiveDefinite { col: j, pivot: d });
        }
        let dj = d.sqrt();
        l[j * n + j] = dj;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            let (ri, rj) = (&l[i * n..i * n + j], &l[j * n..j * n + j]);
            for (x, y) in ri.iter().zip(rj) {
                s -= x * y;
            }
            l[i * n + j] = s / dj;
        }
    }
    Ok(l)
}

/// Solve `A x = b` for SPD `A` given its Cholesky factor `L`.
pub fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(b.len(), n);
    // Forward substitution: L y = b.
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    // Back substitution: L^T x = y.
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

/// Solve `A X = B` column-by-column for SPD `A` (`B` is `n x m`, row-major).
pub fn spd_solve_multi(a: &[f64], n: usize, b: &[f64], m: usize) -> Result<Vec<f64>, LinalgError> {
    let l = cholesky(a, n)?;
    let mut x = vec![0.0; n * m];
    let mut col = vec![0.0; n];
    for j in 0..m {
        for i in 0..n {
            col[i] = b[i * m + j];
        }
        let xj = cholesky_solve(&l, n, &col);
        for i in 0..n {
            x[i * m + j] = xj[i];
        }
    }
    Ok(x)
}

/// Modified Gram-Schmidt on the rows of `a` (`k x n`, row-major). Returns a
/// matrix whose rows are orthonormal and span the same subspace.
pub fn orthonormalize_rows(a: &[f64], k: usize, n: usize) -> Result<Vec<f64>, LinalgError> {
    if a.len() != k * n {
        return Err(LinalgError::Dimension(format!("expected {k}x{n}, got len {}", a.len())));
    }
    let mut q = a.to_vec();
    for i in 0..k {
        for j in 0..i {
            let mut dot = 0.0;
            for t in 0..n {
                dot += q[i * n + t] * q[j * n + t];
            }
            for t in 0..n {
                q[i * n + t] -= dot * q[j * n + t];
            }
        }
        let norm = q[i * n..(i + 1) * n].iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-10 {
            return Err(LinalgError::RankDeficient(i));
        }
        for t in 0..n {
            q[i * n + t] /= norm;
        }
    }
    Ok(q)
}

/// Gram-Schmidt that keeps going past dependent vectors: returns an
/// orthonormal basis (possibly fewer than `k` rows) of the row span of `a`.
pub fn orthonormal_basis(a: &[f64], k: usize, n: usize) -> Result<Vec<Vec<f64>>, LinalgError> {
    if a.len() != k * n {
        return Err(LinalgError::Dimension(format!("expected {k}x{n}, got len {}", a.len())));
    }
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for i in 0..k {
        let mut v = a[i * n..(i + 1) * n].to_vec();
        // Two rounds of projection keep the basis orthogonal to working
        // precision even for nearly dependent inputs.
        for _ in 0..2 {
            for q in &basis {
                let dot: f64 = v.iter().zip(q).map(|(x, y)| x * y).sum();
                for (vt, qt) in v.iter_mut().zip(q) {
                    *vt -= dot * qt;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale_in = a[i * n..(i + 1) * n].iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-10 * scale_in.max(1.0) {
            for vt in v.iter_mut() {
                *vt /= norm;
            }
            basis.push(v);
        }
    }
    Ok(basis)
}

/// Plain dense LU solve with partial pivoting, `A x = b`. Kept as a generic
/// fallback route that shares nothing with the Cholesky path.
pub fn lu_solve(a: &[f64], n: usize, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    if a.len() != n * n || b.len() != n {
        return Err(LinalgError::Dimension(format!("A {}, b {}, n {n}", a.len(), b.len())));
    }
    let mut m = a.to_vec();
    let mut x = b.to_vec();
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .expect("non-empty range");
        if m[pivot_row * n + col].abs() < 1e-300 {
            return Err(LinalgError::NotPositiveDefinite { col, pivot: m[pivot_row * n + col] });
        }
        if pivot_row != col {
            for t in 0..n {
                m.swap(col * n + t, pivot_row * n + t);
            }
            x.swap(col, pivot_row);
        }
        let pv = m[col * n + col];
        for row in col + 1..n {
            let f = m[row * n + col] / pv;
            if f == 0.0 {
                continue;
            }
            for t in col..n {
                m[row * n + t] -= f * m[col * n + t];
            }
            x[row] -= f * x[col];
        }
    }
    for row in (0..n).rev() {
        let mut s = x[row];
        for t in row + 1..n {
            s -= m[row * n + t] * x[t];
        }
        x[row] = s / m[row * n + row];
    }
    Ok(x)
}
