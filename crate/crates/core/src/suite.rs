//! The standard gradient-check battery: every analytic backward path checked
//! against central finite differences at desk scale, in double precision.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::lstmp::{LstmpDims, LstmpParams};
use crate::nn::{
    self, grad_check, softmax_xent, zero_grads, ParamMat, ParamRefMut, ParamSet, ParamVec,
};
use crate::tdnn::{TdnnConfig, TdnnLayerSpec, TdnnStack};

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

pub const SUITE_EPS: f64 = 1e-4;
pub const SUITE_TOL: f64 = 1e-4;

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

struct VecHarness {
    x: ParamVec,
}

impl ParamSet for VecHarness {
    fn visit(&self, f: &mut dyn FnMut(nn::ParamRef)) {
        f(nn::ParamRef::Vec(&self.x));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamRefMut)) {
        f(ParamRefMut::Vec(&mut self.x));
    }
}

fn check_softmax_xent() -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut h = VecHarness {
        x: ParamVec {
            name: "logits".into(),
            value: Array1::from_shape_fn(7, |_| rng.gen_range(-2.0..2.0)),
            grad: Array1::zeros(7),
        },
    };
    let (_, d) = softmax_xent(h.x.value.view(), 3).unwrap();
    h.x.grad = d;
    let err = grad_check(
        &mut h,
        &mut |h: &VecHarness| softmax_xent(h.x.value.view(), 3).unwrap().0,
        SUITE_EPS,
    );
    SuiteResult {
        name: "softmax_cross_entropy".into(),
        max_rel_err: err,
        tolerance: SUITE_TOL,
    }
}

fn check_pnorm() -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut h = VecHarness {
        x: ParamVec {
            name: "x".into(),
            value: Array1::from_shape_fn(12, |_| {
                // keep the group norms away from zero
                let v: f64 = rng.gen_range(0.3..1.2);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            }),
            grad: Array1::zeros(12),
        },
    };
    let y = nn::pnorm_fwd(h.x.value.view(), 3).unwrap();
    let dy = Array1::from_shape_fn(y.len(), |i| 0.5 + 0.25 * i as f64);
    h.x.grad = nn::pnorm_bwd(h.x.value.view(), y.view(), dy.view(), 3).unwrap();
    let err = grad_check(
        &mut h,
        &mut |h: &VecHarness| {
            let y = nn::pnorm_fwd(h.x.value.view(), 3).unwrap();
            y.iter()
                .enumerate()
                .map(|(i, v)| (0.5 + 0.25 * i as f64) * v)
                .sum()
        },
        SUITE_EPS,
    );
    SuiteResult {
        name: "pnorm_group_norm".into(),
        max_rel_err: err,
        tolerance: SUITE_TOL,
    }
}

struct AffineHarness {
    w: ParamMat,
    b: ParamVec,
    x: ParamVec,
}

impl ParamSet for AffineHarness {
    fn visit(&self, f: &mut dyn FnMut(nn::ParamRef)) {
        f(nn::ParamRef::Mat(&self.w));
        f(nn::ParamRef::Vec(&self.b));
        f(nn::ParamRef::Vec(&self.x));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamRefMut)) {
        f(ParamRefMut::Mat(&mut self.w));
        f(ParamRefMut::Vec(&mut self.b));
        f(ParamRefMut::Vec(&mut self.x));
    }
}

fn check_affine() -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut h = AffineHarness {
        w: ParamMat {
            name: "w".into(),
            value: random_matrix(4, 6, 4),
            grad: Array2::zeros((4, 6)),
        },
        b: ParamVec {
            name: "b".into(),
            value: Array1::from_shape_fn(4, |_| rng.gen_range(-0.5..0.5)),
            grad: Array1::zeros(4),
        },
        x: ParamVec {
            name: "x".into(),
            value: Array1::from_shape_fn(6, |_| rng.gen_range(-1.0..1.0)),
            grad: Array1::zeros(6),
        },
    };
    let loss_fn = |h: &AffineHarness| -> f64 {
        let y = nn::affine_fwd(&h.w.value, &h.b.value, h.x.value.view()).unwrap();
        y.mapv(f64::tanh).sum()
    };
    let y = nn::affine_fwd(&h.w.value, &h.b.value, h.x.value.view()).unwrap();
    let dy = y.mapv(|v| 1.0 - v.tanh().powi(2));
    let mut dw = Array2::zeros((4, 6));
    let mut db = Array1::zeros(4);
    let dx = nn::affine_bwd(&h.w.value, h.x.value.view(), dy.view(), &mut dw, &mut db).unwrap();
    h.w.grad = dw;
    h.b.grad = db;
    h.x.grad = dx;
    let err = grad_check(&mut h, &mut { loss_fn }, SUITE_EPS);
    SuiteResult {
        name: "affine".into(),
        max_rel_err: err,
        tolerance: SUITE_TOL,
    }
}

struct LstmpHarness {
    p: LstmpParams,
    x: ParamMat,
    phi: ParamMat,
    labels: Vec<usize>,
    reset: usize,
}

impl ParamSet for LstmpHarness {
    fn visit(&self, f: &mut dyn FnMut(nn::ParamRef)) {
        self.p.visit(f);
        f(nn::ParamRef::Mat(&self.x));
        f(nn::ParamRef::Mat(&self.phi));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamRefMut)) {
        self.p.visit_mut(f);
        f(ParamRefMut::Mat(&mut self.x));
        f(ParamRefMut::Mat(&mut self.phi));
    }
}

/// The recurrent unit across a reset boundary: all weights, both
/// projections, the diagonal peepholes, the injection matrix, and the
/// gradients flowing back into both input streams.
fn check_lstmp_bptt() -> SuiteResult {
    let dims = LstmpDims {
        input: 2,
        cell: 3,
        proj: 2,
        output: 2,
        phi: 2,
    };
    let t_max = 25; // one reset at t = 20
    let mut p = LstmpParams::new(dims, "", 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    p.visit_mut(&mut |r| match r {
        ParamRefMut::Mat(m) => {
            for v in m.value.iter_mut() {
                *v = rng.gen_range(-0.4..0.4);
            }
        }
        ParamRefMut::Vec(v) => {
            for x in v.value.iter_mut() {
                *x = rng.gen_range(-0.3..0.3);
            }
        }
    });
    let mut h = LstmpHarness {
        p,
        x: ParamMat {
            name: "input".into(),
            value: random_matrix(t_max, 2, 7),
            grad: Array2::zeros((t_max, 2)),
        },
        phi: ParamMat {
            name: "phi".into(),
            value: random_matrix(t_max, 2, 8),
            grad: Array2::zeros((t_max, 2)),
        },
        labels: (0..t_max).map(|t| t % 2).collect(),
        reset: 20,
    };

    let (y, cache) = h
        .p
        .forward(&h.x.value, Some(&h.phi.value), h.reset)
        .unwrap();
    let mut dy = Array2::zeros((t_max, dims.output));
    for t in 0..t_max {
        let (_, d) = softmax_xent(y.row(t), h.labels[t]).unwrap();
        dy.row_mut(t).assign(&(d / t_max as f64));
    }
    zero_grads(&mut h.p);
    let (dx, dphi) = h.p.bptt(&cache, &dy);
    h.x.grad = dx;
    h.phi.grad = dphi;

    let err = grad_check(
        &mut h,
        &mut |h: &LstmpHarness| {
            let y = h
                .p
                .run_sequence(&h.x.value, Some(&h.phi.value), h.reset)
                .unwrap();
            let mut loss = 0.0;
            for t in 0..y.nrows() {
                loss += softmax_xent(y.row(t), h.labels[t]).unwrap().0;
            }
            loss / y.nrows() as f64
        },
        SUITE_EPS,
    );
    SuiteResult {
        name: "lstmp_bptt_across_reset".into(),
        max_rel_err: err,
        tolerance: SUITE_TOL,
    }
}

struct TdnnHarness {
    stack: TdnnStack,
    x: ParamMat,
    phone_labels: Vec<usize>,
    lid_label: usize,
}

impl ParamSet for TdnnHarness {
    fn visit(&self, f: &mut dyn FnMut(nn::ParamRef)) {
        self.stack.visit(f);
        f(nn::ParamRef::Mat(&self.x));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamRefMut)) {
        self.stack.visit_mut(f);
        f(ParamRefMut::Mat(&mut self.x));
    }
}

fn check_tdnn_stack() -> SuiteResult {
    let cfg = TdnnConfig {
        input_dim: 5,
        input_splice_left: 1,
        input_splice_right: 1,
        layers: vec![
            TdnnLayerSpec {
                context_offsets: vec![-1, 0, 1],
                hidden_dim: 8,
                pnorm_group: 2,
            },
            TdnnLayerSpec {
                context_offsets: vec![-2, 2],
                hidden_dim: 8,
                pnorm_group: 2,
            },
        ],
        phone_classes: 3,
        lid_classes: Some(2),
        svd_rank: None,
    };
    let mut stack = TdnnStack::new(cfg, "", 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    stack.visit_mut(&mut |r| match r {
        ParamRefMut::Mat(m) => {
            for v in m.value.iter_mut() {
                *v = rng.gen_range(-0.7..0.7);
            }
        }
        ParamRefMut::Vec(b) => {
            for v in b.value.iter_mut() {
                *v = rng.gen_range(-0.3..0.3);
            }
        }
    });
    let t_max = 9;
    let mut h = TdnnHarness {
        stack,
        x: ParamMat {
            name: "input".into(),
            value: random_matrix(t_max, 5, 11),
            grad: Array2::zeros((t_max, 5)),
        },
        phone_labels: (0..t_max).map(|t| t % 3).collect(),
        lid_label: 1,
    };

    let fwd = h.stack.forward_frames(&h.x.value).unwrap();
    let mut d_phone = Array2::zeros(fwd.phone_logits.raw_dim());
    let mut d_lid = Array2::zeros(fwd.lid_logits.as_ref().unwrap().raw_dim());
    for t in 0..t_max {
        let (_, d) = softmax_xent(fwd.phone_logits.row(t), h.phone_labels[t]).unwrap();
        d_phone.row_mut(t).assign(&(d / t_max as f64));
        let (_, d) = softmax_xent(fwd.lid_logits.as_ref().unwrap().row(t), h.lid_label).unwrap();
        d_lid.row_mut(t).assign(&(d / t_max as f64));
    }
    zero_grads(&mut h.stack);
    h.x.grad = h
        .stack
        .backward(&fwd, Some(&d_phone), Some(&d_lid), None)
        .unwrap();

    let err = grad_check(
        &mut h,
        &mut |h: &TdnnHarness| {
            let fwd = h.stack.forward_frames(&h.x.value).unwrap();
            let mut loss = 0.0;
            for t in 0..h.x.value.nrows() {
                loss += softmax_xent(fwd.phone_logits.row(t), h.phone_labels[t])
                    .unwrap()
                    .0;
                loss += softmax_xent(fwd.lid_logits.as_ref().unwrap().row(t), h.lid_label)
                    .unwrap()
                    .0;
            }
            loss / h.x.value.nrows() as f64
        },
        SUITE_EPS,
    );
    SuiteResult {
        name: "tdnn_stack_with_heads".into(),
        max_rel_err: err,
        tolerance: SUITE_TOL,
    }
}

/// Run every gradient check. All must pass at max relative error 1e-4 with
/// eps 1e-4 in double precision.
pub fn full_gradient_suite() -> Vec<SuiteResult> {
    vec![
        check_affine(),
        check_pnorm(),
        check_softmax_xent(),
        check_lstmp_bptt(),
        check_tdnn_stack(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_entry_passes() {
        for r in full_gradient_suite() {
            assert!(r.passed(), "{}: max rel err {}", r.name, r.max_rel_err);
        }
    }
}
