use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use super::{NnError, Result};

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// y = W x + b for a single vector.
pub fn affine_fwd(w: &Array2<f64>, b: &Array1<f64>, x: ArrayView1<f64>) -> Result<Array1<f64>> {
    if w.ncols() != x.len() || w.nrows() != b.len() {
        return Err(NnError::ShapeMismatch {
            op: "affine_fwd",
            detail: format!("W {:?}, b {}, x {}", w.dim(), b.len(), x.len()),
        });
    }
    Ok(w.dot(&x) + b)
}

/// Backward of [`affine_fwd`]: accumulates dW, db and returns dx.
pub fn affine_bwd(
    w: &Array2<f64>,
    x: ArrayView1<f64>,
    dy: ArrayView1<f64>,
    dw: &mut Array2<f64>,
    db: &mut Array1<f64>,
) -> Result<Array1<f64>> {
    if w.nrows() != dy.len() || w.ncols() != x.len() {
        return Err(NnError::ShapeMismatch {
            op: "affine_bwd",
            detail: format!("W {:?}, x {}, dy {}", w.dim(), x.len(), dy.len()),
        });
    }
    for (i, &g) in dy.iter().enumerate() {
        if g != 0.0 {
            dw.row_mut(i).scaled_add(g, &x);
        }
    }
    *db += &dy;
    Ok(w.t().dot(&dy))
}

/// Y = X Wᵀ + b over a whole sequence (rows are frames).
pub fn affine_seq_fwd(
    w: &Array2<f64>,
    b: &Array1<f64>,
    x: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    if w.ncols() != x.ncols() || w.nrows() != b.len() {
        return Err(NnError::ShapeMismatch {
            op: "affine_seq_fwd",
            detail: format!("W {:?}, b {}, X {:?}", w.dim(), b.len(), x.dim()),
        });
    }
    let mut y = x.dot(&w.t());
    y += &b.view().insert_axis(ndarray::Axis(0));
    Ok(y)
}

/// Backward of [`affine_seq_fwd`]: accumulates dW, db, returns dX.
pub fn affine_seq_bwd(
    w: &Array2<f64>,
    x: ArrayView2<f64>,
    dy: ArrayView2<f64>,
    dw: &mut Array2<f64>,
    db: &mut Array1<f64>,
) -> Result<Array2<f64>> {
    if dy.ncols() != w.nrows() || dy.nrows() != x.nrows() {
        return Err(NnError::ShapeMismatch {
            op: "affine_seq_bwd",
            detail: format!("W {:?}, X {:?}, dY {:?}", w.dim(), x.dim(), dy.dim()),
        });
    }
    *dw += &dy.t().dot(&x);
    *db += &dy.sum_axis(ndarray::Axis(0));
    Ok(dy.dot(w))
}

/// Group 2-norms: each output is the Euclidean norm of `group` consecutive
/// inputs, shrinking the dimension by that factor.
pub fn pnorm_fwd(x: ArrayView1<f64>, group: usize) -> Result<Array1<f64>> {
    if group == 0 || x.len() % group != 0 {
        return Err(NnError::BadGroupSize {
            dim: x.len(),
            group,
        });
    }
    let out = x.len() / group;
    let mut y = Array1::zeros(out);
    for j in 0..out {
        let mut s = 0.0;
        for i in 0..group {
            let v = x[j * group + i];
            s += v * v;
        }
        y[j] = s.sqrt();
    }
    Ok(y)
}

/// Backward of the group 2-norm. Zero groups get zero gradient (subgradient).
pub fn pnorm_bwd(
    x: ArrayView1<f64>,
    y: ArrayView1<f64>,
    dy: ArrayView1<f64>,
    group: usize,
) -> Result<Array1<f64>> {
    if group == 0 || x.len() % group != 0 || y.len() != x.len() / group {
        return Err(NnError::BadGroupSize {
            dim: x.len(),
            group,
        });
    }
    let mut dx = Array1::zeros(x.len());
    for j in 0..y.len() {
        if y[j] > 0.0 {
            let scale = dy[j] / y[j];
            for i in 0..group {
                dx[j * group + i] = scale * x[j * group + i];
            }
        }
    }
    Ok(dx)
}

/// Numerically stable softmax.
pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut e: Array1<f64> = logits.mapv(|v| (v - max).exp());
    let z = e.sum();
    e /= z;
    e
}

/// Cross-entropy against a hard label: returns (loss, dlogits).
///
/// loss = -log softmax(logits)[label], dlogits = softmax(logits) - onehot.
pub fn softmax_xent(logits: ArrayView1<f64>, label: usize) -> Result<(f64, Array1<f64>)> {
    if label >= logits.len() {
        return Err(NnError::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let shifted: Array1<f64> = logits.mapv(|v| v - max);
    let logz = shifted.mapv(f64::exp).sum().ln();
    let loss = logz - shifted[label];
    if !loss.is_finite() {
        return Err(NnError::NonFinite("softmax_xent"));
    }
    let mut dlogits = shifted.mapv(|v| (v - logz).exp());
    dlogits[label] -= 1.0;
    Ok((loss, dlogits))
}
