use super::param::{flatten_grads, nudge_value, num_coords, ParamSet};

/// Compare analytic gradients against central finite differences.
///
/// The caller computes the analytic gradients into the `.grad` buffers first;
/// `loss` must be a pure function of the parameter values. Returns
/// max over coordinates of |analytic - cd| / max(|analytic|, |cd|, 1e-12).
pub fn grad_check<P, F>(params: &mut P, loss: &mut F, eps: f64) -> f64
where
    P: ParamSet,
    F: FnMut(&P) -> f64,
{
    let analytic = flatten_grads(params);
    let n = num_coords(params);
    assert_eq!(analytic.len(), n);
    let mut max_rel = 0.0f64;
    for i in 0..n {
        nudge_value(params, i, eps);
        let up = loss(params);
        nudge_value(params, i, -2.0 * eps);
        let down = loss(params);
        nudge_value(params, i, eps);
        assert!(
            up.is_finite() && down.is_finite(),
            "non-finite loss during finite-difference probe at coordinate {i}"
        );
        let cd = (up - down) / (2.0 * eps);
        let rel = (analytic[i] - cd).abs() / analytic[i].abs().max(cd.abs()).max(1e-12);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    max_rel
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::param::{ParamRef, ParamRefMut, ParamVec};
    use ndarray::array;

    struct Quadratic {
        w: ParamVec,
    }

    impl ParamSet for Quadratic {
        fn visit(&self, f: &mut dyn FnMut(ParamRef)) {
            f(ParamRef::Vec(&self.w));
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(ParamRefMut)) {
            f(ParamRefMut::Vec(&mut self.w));
        }
    }

    #[test]
    fn quadratic_gradient_is_exact() {
        let mut q = Quadratic {
            w: ParamVec {
                name: "w".into(),
                value: array![1.5, -2.0, 0.25],
                grad: array![3.0, -4.0, 0.5], // 2w
            },
        };
        let err = grad_check(&mut q, &mut |q: &Quadratic| q.w.value.dot(&q.w.value), 1e-4);
        // central differences are exact for quadratics up to rounding
        assert!(err < 1e-9, "max rel err {err}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let mut q = Quadratic {
            w: ParamVec {
                name: "w".into(),
                value: array![1.5, -2.0, 0.25],
                grad: array![3.0, 4.0, 0.5], // sign flipped on coordinate 1
            },
        };
        let err = grad_check(&mut q, &mut |q: &Quadratic| q.w.value.dot(&q.w.value), 1e-4);
        assert!(err > 1e-2, "corruption not detected, err {err}");
    }
}
