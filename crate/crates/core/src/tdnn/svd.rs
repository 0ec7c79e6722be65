use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SvdError {
    #[error("rank {rank} invalid for a {rows}x{cols} matrix")]
    BadRank {
        rank: usize,
        rows: usize,
        cols: usize,
    },
}

/// Thin SVD by one-sided Jacobi rotations. Returns (U, sigma, V) with
/// singular values sorted descending, so W = U * diag(sigma) * V^T.
pub fn jacobi_svd(w: &Array2<f64>) -> (Array2<f64>, Vec<f64>, Array2<f64>) {
    let (rows, cols) = w.dim();
    // one-sided Jacobi wants at least as many rows as columns
    if rows < cols {
        let (u, s, v) = jacobi_svd(&w.t().to_owned());
        return (v, s, u);
    }

    // columns as contiguous vectors for cache-friendly rotations
    let mut a: Vec<Vec<f64>> = (0..cols).map(|j| w.column(j).to_vec()).collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| {
            let mut e = vec![0.0; cols];
            e[j] = 1.0;
            e
        })
        .collect();

    // squared column norms, updated incrementally across rotations
    let mut sq: Vec<f64> = a
        .iter()
        .map(|col| col.iter().map(|x| x * x).sum())
        .collect();
    let tol = 1e-12;
    let max_sweeps = 60;
    for sweep in 0..max_sweeps {
        let mut rotated = 0usize;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let mut apq = 0.0;
                for i in 0..rows {
                    apq += a[p][i] * a[q][i];
                }
                let (app, aqq) = (sq[p], sq[q]);
                if apq.abs() <= tol * (app * aqq).sqrt() || apq == 0.0 {
                    continue;
                }
                rotated += 1;
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for i in 0..rows {
                    let ap = a[p][i];
                    let aq = a[q][i];
                    a[p][i] = cs * ap - sn * aq;
                    a[q][i] = sn * ap + cs * aq;
                }
                for i in 0..cols {
                    let vp = v[p][i];
                    let vq = v[q][i];
                    v[p][i] = cs * vp - sn * vq;
                    v[q][i] = sn * vp + cs * vq;
                }
                sq[p] = app - t * apq;
                sq[q] = aqq + t * apq;
            }
        }
        if rotated == 0 {
            break;
        }
        // drift guard: refresh the cached norms every few sweeps
        if sweep % 4 == 3 {
            for (s, col) in sq.iter_mut().zip(&a) {
                *s = col.iter().map(|x| x * x).sum();
            }
        }
    }

    let mut order: Vec<usize> = (0..cols).collect();
    let norms: Vec<f64> = a
        .iter()
        .map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());

    let mut u = Array2::zeros((rows, cols));
    let mut vt_owner = Array2::zeros((cols, cols));
    let mut sigma = Vec::with_capacity(cols);
    for (slot, &j) in order.iter().enumerate() {
        let s = norms[j];
        sigma.push(s);
        if s > 0.0 {
            for i in 0..rows {
                u[[i, slot]] = a[j][i] / s;
            }
        }
        for i in 0..cols {
            vt_owner[[i, slot]] = v[j][i];
        }
    }
    (u, sigma, vt_owner)
}

/// Factor `w` into A (out x rank) and B (rank x in) such that A*B is the
/// best Frobenius rank-`rank` approximation of `w`.
pub fn svd_bottleneck(
    w: &Array2<f64>,
    rank: usize,
) -> Result<(Array2<f64>, Array2<f64>), SvdError> {
    let (rows, cols) = w.dim();
    if rank == 0 || rank > rows.min(cols) {
        return Err(SvdError::BadRank { rank, rows, cols });
    }
    let (u, sigma, v) = jacobi_svd(w);
    let mut a = Array2::zeros((rows, rank));
    let mut b = Array2::zeros((rank, cols));
    for k in 0..rank {
        for i in 0..rows {
            a[[i, k]] = u[[i, k]] * sigma[k];
        }
        for j in 0..cols {
            b[[k, j]] = v[[j, k]];
        }
    }
    Ok((a, b))
}
