//! LSTM with dual output projections and diagonal peephole connections.
//!
//! One step computes, in order:
//!
//! ```text
//! i_t = sigma(W_ix x_t + W_ir r_{t-1} + w_ic . c_{t-1} + b_i)
//! f_t = sigma(W_fx x_t + W_fr r_{t-1} + w_fc . c_{t-1} + b_f)
//! c_t = f_t . c_{t-1} + i_t . tanh(W_cx x_t + W_cr r_{t-1} + W_cphi phi_t + b_c)
//! o_t = sigma(W_ox x_t + W_or r_{t-1} + w_oc . c_t + b_o)
//! m_t = o_t . tanh(c_t)
//! r_t = W_rm m_t          (recurrent projection, fed to the next step)
//! p_t = W_pm m_t          (non-recurrent projection)
//! y_t = W_yr r_t + W_yp p_t + b_y
//! ```
//!
//! where `.` is elementwise multiplication. The cell-to-gate connections are
//! vectors, never full matrices. `W_cphi` injects an optional per-frame
//! feature stream into the cell-candidate nonlinearity and has zero columns
//! when no injection is configured.
//!
//! State is zeroed at sequence start and again every `reset_every` frames so
//! only short-time patterns are modelled; backpropagation is truncated at the
//! same boundaries.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{ParamMat, ParamSet, ParamVec};

/// Cell count used by the full-scale recipe.
pub const DEFAULT_CELL_DIM: usize = 1024;
/// Projection width used by the full-scale recipe (both projections).
pub const DEFAULT_PROJ_DIM: usize = 256;
/// Frames between state resets.
pub const DEFAULT_RESET_EVERY: usize = 20;

#[derive(Debug, Error)]
pub enum LstmpError {
    #[error("feature stream length {phi} does not match input length {x}")]
    LengthMismatch { x: usize, phi: usize },
    #[error("phi stream {0} but the layer's injection width is {1}")]
    PhiWidth(usize, usize),
    #[error("non-finite activation at frame {0}")]
    NonFinite(usize),
}

pub type Result<T> = std::result::Result<T, LstmpError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LstmpDims {
    pub input: usize,
    pub cell: usize,
    pub proj: usize,
    pub output: usize,
    /// Width of the injected feature stream; 0 disables injection.
    pub phi: usize,
}

/// Running state carried between frames.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmpState {
    pub c: Array1<f64>,
    pub r: Array1<f64>,
}

impl LstmpState {
    pub fn zeros(dims: &LstmpDims) -> Self {
        LstmpState {
            c: Array1::zeros(dims.cell),
            r: Array1::zeros(dims.proj),
        }
    }
}

/// All parameters of one layer. Peepholes are stored as vectors, which is
/// what makes the cell connections diagonal by construction.
#[derive(Debug, Clone)]
pub struct LstmpParams {
    pub dims: LstmpDims,
    pub w_ix: ParamMat,
    pub w_fx: ParamMat,
    pub w_cx: ParamMat,
    pub w_ox: ParamMat,
    pub w_ir: ParamMat,
    pub w_fr: ParamMat,
    pub w_cr: ParamMat,
    pub w_or: ParamMat,
    pub w_ic: ParamVec,
    pub w_fc: ParamVec,
    pub w_oc: ParamVec,
    pub b_i: ParamVec,
    pub b_f: ParamVec,
    pub b_c: ParamVec,
    pub b_o: ParamVec,
    pub w_rm: ParamMat,
    pub w_pm: ParamMat,
    pub w_yr: ParamMat,
    pub w_yp: ParamMat,
    pub b_y: ParamVec,
    pub w_cphi: ParamMat,
}

pub const INIT_SCALE: f64 = 0.05;

impl LstmpParams {
    /// Uniform(-0.05, 0.05) matrices, zero biases and peepholes. `prefix`
    /// namespaces the parameter names when several layers share a model.
    pub fn new(dims: LstmpDims, prefix: &str, seed: u64) -> Self {
        let m = |n: &str, r, c| ParamMat::uniform(format!("{prefix}{n}"), r, c, INIT_SCALE, seed);
        let v = |n: &str, len| ParamVec::zeros(format!("{prefix}{n}"), len);
        LstmpParams {
            w_ix: m("w_ix", dims.cell, dims.input),
            w_fx: m("w_fx", dims.cell, dims.input),
            w_cx: m("w_cx", dims.cell, dims.input),
            w_ox: m("w_ox", dims.cell, dims.input),
            w_ir: m("w_ir", dims.cell, dims.proj),
            w_fr: m("w_fr", dims.cell, dims.proj),
            w_cr: m("w_cr", dims.cell, dims.proj),
            w_or: m("w_or", dims.cell, dims.proj),
            w_ic: v("w_ic", dims.cell),
            w_fc: v("w_fc", dims.cell),
            w_oc: v("w_oc", dims.cell),
            b_i: v("b_i", dims.cell),
            b_f: v("b_f", dims.cell),
            b_c: v("b_c", dims.cell),
            b_o: v("b_o", dims.cell),
            w_rm: m("w_rm", dims.proj, dims.cell),
            w_pm: m("w_pm", dims.proj, dims.cell),
            w_yr: m("w_yr", dims.output, dims.proj),
            w_yp: m("w_yp", dims.output, dims.proj),
            b_y: v("b_y", dims.output),
            w_cphi: m("w_cphi", dims.cell, dims.phi),
            dims,
        }
    }

    /// Like [`LstmpParams::new`] but with the injection matrix zeroed, so the
    /// layer initially behaves exactly like one without injection.
    pub fn new_zero_phi(dims: LstmpDims, prefix: &str, seed: u64) -> Self {
        let mut p = Self::new(dims, prefix, seed);
        p.w_cphi.value.fill(0.0);
        p
    }

    /// One frame. Returns (y_t, m_t, next state).
    pub fn step(
        &self,
        x: ArrayView1<f64>,
        phi: Option<ArrayView1<f64>>,
        state: &LstmpState,
    ) -> (Array1<f64>, Array1<f64>, LstmpState) {
        let out = self.step_full(x, phi, state);
        let r = self.w_rm.value.dot(&out.m);
        (out.y, out.m, LstmpState { c: out.c, r })
    }

    fn step_full(
        &self,
        x: ArrayView1<f64>,
        phi: Option<ArrayView1<f64>>,
        state: &LstmpState,
    ) -> StepOutputs {
        debug_assert_eq!(x.len(), self.dims.input);
        debug_assert_eq!(phi.map_or(0, |p| p.len()), self.dims.phi);

        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
        let i_gate = (self.w_ix.value.dot(&x)
            + self.w_ir.value.dot(&state.r)
            + &self.w_ic.value * &state.c
            + &self.b_i.value)
            .mapv(sigmoid);
        let f_gate = (self.w_fx.value.dot(&x)
            + self.w_fr.value.dot(&state.r)
            + &self.w_fc.value * &state.c
            + &self.b_f.value)
            .mapv(sigmoid);
        let mut g_in =
            self.w_cx.value.dot(&x) + self.w_cr.value.dot(&state.r) + &self.b_c.value;
        if let Some(phi) = phi {
            g_in += &self.w_cphi.value.dot(&phi);
        }
        let g = g_in.mapv(f64::tanh);
        let c = &f_gate * &state.c + &i_gate * &g;
        let o_gate = (self.w_ox.value.dot(&x)
            + self.w_or.value.dot(&state.r)
            + &self.w_oc.value * &c
            + &self.b_o.value)
            .mapv(sigmoid);
        let h = c.mapv(f64::tanh);
        let m = &o_gate * &h;
        let r = self.w_rm.value.dot(&m);
        let p = self.w_pm.value.dot(&m);
        let y = self.w_yr.value.dot(&r) + self.w_yp.value.dot(&p) + &self.b_y.value;

        StepOutputs {
            y,
            i: i_gate,
            f: f_gate,
            g,
            c,
            o: o_gate,
            h,
            m,
            r,
        }
    }

    /// Run a whole utterance, zeroing the state at t = 0 and whenever
    /// `t % reset_every == 0`. Returns the per-frame outputs stacked.
    pub fn run_sequence(
        &self,
        x: &Array2<f64>,
        phi: Option<&Array2<f64>>,
        reset_every: usize,
    ) -> Result<Array2<f64>> {
        Ok(self.forward(x, phi, reset_every)?.0)
    }

    /// Forward pass that also returns the caches needed by [`Self::bptt`].
    pub fn forward(
        &self,
        x: &Array2<f64>,
        phi: Option<&Array2<f64>>,
        reset_every: usize,
    ) -> Result<(Array2<f64>, SequenceCache)> {
        if let Some(phi) = phi {
            if phi.nrows() != x.nrows() {
                return Err(LstmpError::LengthMismatch {
                    x: x.nrows(),
                    phi: phi.nrows(),
                });
            }
            if phi.ncols() != self.dims.phi {
                return Err(LstmpError::PhiWidth(phi.ncols(), self.dims.phi));
            }
        } else if self.dims.phi != 0 {
            return Err(LstmpError::PhiWidth(0, self.dims.phi));
        }
        let t_max = x.nrows();
        let dims = self.dims;
        let mut y = Array2::zeros((t_max, dims.output));
        let mut cache = SequenceCache {
            x: x.clone(),
            phi: phi.cloned(),
            c_prev: Array2::zeros((t_max, dims.cell)),
            r_prev: Array2::zeros((t_max, dims.proj)),
            i: Array2::zeros((t_max, dims.cell)),
            f: Array2::zeros((t_max, dims.cell)),
            g: Array2::zeros((t_max, dims.cell)),
            c: Array2::zeros((t_max, dims.cell)),
            o: Array2::zeros((t_max, dims.cell)),
            h: Array2::zeros((t_max, dims.cell)),
            m: Array2::zeros((t_max, dims.cell)),
            reset_every,
        };
        let mut state = LstmpState::zeros(&dims);
        for t in 0..t_max {
            if reset_every > 0 && t % reset_every == 0 {
                state = LstmpState::zeros(&dims);
            }
            let out = self.step_full(x.row(t), phi.map(|p| p.row(t)), &state);
            if !out.y.iter().all(|v| v.is_finite()) {
                return Err(LstmpError::NonFinite(t));
            }
            y.row_mut(t).assign(&out.y);
            cache.c_prev.row_mut(t).assign(&state.c);
            cache.r_prev.row_mut(t).assign(&state.r);
            cache.i.row_mut(t).assign(&out.i);
            cache.f.row_mut(t).assign(&out.f);
            cache.g.row_mut(t).assign(&out.g);
            cache.c.row_mut(t).assign(&out.c);
            cache.o.row_mut(t).assign(&out.o);
            cache.h.row_mut(t).assign(&out.h);
            cache.m.row_mut(t).assign(&out.m);
            state = LstmpState { c: out.c, r: out.r };
        }
        Ok((y, cache))
    }

    /// Backpropagation through time. `dy` holds the per-frame loss gradients
    /// with respect to y. Parameter gradients accumulate into the `.grad`
    /// buffers; the gradients with respect to the input and the injected
    /// stream are returned. No gradient crosses a reset boundary.
    ///
    /// The recurrent dependency is walked frame by frame; everything that
    /// does not depend on it (the weight gradients and the input gradients)
    /// is batched into whole-sequence matrix products afterwards.
    pub fn bptt(&mut self, cache: &SequenceCache, dy: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let t_max = cache.x.nrows();
        assert_eq!(dy.nrows(), t_max, "dy rows must match cached frames");
        let dims = self.dims;

        // contiguous transposes for the in-loop matrix-vector products
        let w_yr_t = self.w_yr.value.t().to_owned();
        let w_yp_t = self.w_yp.value.t().to_owned();
        let w_rm_t = self.w_rm.value.t().to_owned();
        let w_pm_t = self.w_pm.value.t().to_owned();
        let w_ir_t = self.w_ir.value.t().to_owned();
        let w_fr_t = self.w_fr.value.t().to_owned();
        let w_cr_t = self.w_cr.value.t().to_owned();
        let w_or_t = self.w_or.value.t().to_owned();

        let mut di_all = Array2::zeros((t_max, dims.cell));
        let mut df_all = Array2::zeros((t_max, dims.cell));
        let mut dg_all = Array2::zeros((t_max, dims.cell));
        let mut do_all = Array2::zeros((t_max, dims.cell));
        let mut dr_all = Array2::zeros((t_max, dims.proj));
        let mut dp_all = Array2::zeros((t_max, dims.proj));
        let mut dc_next: Array1<f64> = Array1::zeros(dims.cell);
        let mut dr_next: Array1<f64> = Array1::zeros(dims.proj);

        for t in (0..t_max).rev() {
            let dy_t = dy.row(t);
            let dr = w_yr_t.dot(&dy_t) + &dr_next;
            let dp = w_yp_t.dot(&dy_t);
            let dm = w_rm_t.dot(&dr) + w_pm_t.dot(&dp);

            let (i, f, g) = (cache.i.row(t), cache.f.row(t), cache.g.row(t));
            let (c, o, h) = (cache.c.row(t), cache.o.row(t), cache.h.row(t));
            let c_prev = cache.c_prev.row(t);

            let d_o = &dm * &h;
            let dh = &dm * &o;
            let mut dc = &dc_next + &(&dh * &h.mapv(|v| 1.0 - v * v));

            // output gate (peephole reads c_t)
            let do_in = &d_o * &(&o * &o.mapv(|v| 1.0 - v));
            self.w_oc.grad += &(&do_in * &c);
            self.b_o.grad += &do_in;
            dc += &(&do_in * &self.w_oc.value);

            // cell update
            let di = &dc * &g;
            let df = &dc * &c_prev;
            let dg = &dc * &i;
            let mut dc_prev = &dc * &f;

            let dg_in = &dg * &g.mapv(|v| 1.0 - v * v);
            self.b_c.grad += &dg_in;

            // input and forget gates (peepholes read c_{t-1})
            let di_in = &di * &(&i * &i.mapv(|v| 1.0 - v));
            self.w_ic.grad += &(&di_in * &c_prev);
            self.b_i.grad += &di_in;
            dc_prev += &(&di_in * &self.w_ic.value);

            let df_in = &df * &(&f * &f.mapv(|v| 1.0 - v));
            self.w_fc.grad += &(&df_in * &c_prev);
            self.b_f.grad += &df_in;
            dc_prev += &(&df_in * &self.w_fc.value);

            let dr_prev = w_ir_t.dot(&di_in)
                + w_fr_t.dot(&df_in)
                + w_cr_t.dot(&dg_in)
                + w_or_t.dot(&do_in);

            di_all.row_mut(t).assign(&di_in);
            df_all.row_mut(t).assign(&df_in);
            dg_all.row_mut(t).assign(&dg_in);
            do_all.row_mut(t).assign(&do_in);
            dr_all.row_mut(t).assign(&dr);
            dp_all.row_mut(t).assign(&dp);

            if cache.reset_every > 0 && t % cache.reset_every == 0 {
                // the state entering this frame was freshly zeroed
                dc_next.fill(0.0);
                dr_next.fill(0.0);
            } else {
                dc_next = dc_prev;
                dr_next = dr_prev;
            }
        }

        // batched weight gradients
        self.b_y.grad += &dy.sum_axis(ndarray::Axis(0));
        let r_all = cache.m.dot(&w_rm_t);
        let p_all = cache.m.dot(&w_pm_t);
        self.w_yr.grad += &dy.t().dot(&r_all);
        self.w_yp.grad += &dy.t().dot(&p_all);
        self.w_rm.grad += &dr_all.t().dot(&cache.m);
        self.w_pm.grad += &dp_all.t().dot(&cache.m);
        self.w_ix.grad += &di_all.t().dot(&cache.x);
        self.w_fx.grad += &df_all.t().dot(&cache.x);
        self.w_cx.grad += &dg_all.t().dot(&cache.x);
        self.w_ox.grad += &do_all.t().dot(&cache.x);
        self.w_ir.grad += &di_all.t().dot(&cache.r_prev);
        self.w_fr.grad += &df_all.t().dot(&cache.r_prev);
        self.w_cr.grad += &dg_all.t().dot(&cache.r_prev);
        self.w_or.grad += &do_all.t().dot(&cache.r_prev);

        let mut dx_all = di_all.dot(&self.w_ix.value);
        dx_all += &df_all.dot(&self.w_fx.value);
        dx_all += &dg_all.dot(&self.w_cx.value);
        dx_all += &do_all.dot(&self.w_ox.value);

        let dphi_all = match &cache.phi {
            Some(phi) => {
                self.w_cphi.grad += &dg_all.t().dot(phi);
                dg_all.dot(&self.w_cphi.value)
            }
            None => Array2::zeros((t_max, dims.phi)),
        };
        (dx_all, dphi_all)
    }
}

/// Per-frame outputs of one step.
struct StepOutputs {
    y: Array1<f64>,
    i: Array1<f64>,
    f: Array1<f64>,
    g: Array1<f64>,
    c: Array1<f64>,
    o: Array1<f64>,
    h: Array1<f64>,
    m: Array1<f64>,
    r: Array1<f64>,
}

/// Whole-sequence intermediates kept for the backward pass, one row per
/// frame.
#[derive(Debug, Clone)]
pub struct SequenceCache {
    x: Array2<f64>,
    phi: Option<Array2<f64>>,
    c_prev: Array2<f64>,
    r_prev: Array2<f64>,
    i: Array2<f64>,
    f: Array2<f64>,
    g: Array2<f64>,
    c: Array2<f64>,
    o: Array2<f64>,
    h: Array2<f64>,
    m: Array2<f64>,
    reset_every: usize,
}

/// Run a stack of layers: layer k+1 consumes layer k's per-frame outputs.
/// Every layer resets on the same absolute frame boundaries; only the first
/// layer receives the injected stream.
pub fn run_stack(
    layers: &[LstmpParams],
    x: &Array2<f64>,
    phi: Option<&Array2<f64>>,
    reset_every: usize,
) -> Result<Array2<f64>> {
    let mut cur = x.clone();
    for (k, layer) in layers.iter().enumerate() {
        let phi_k = if k == 0 { phi } else { None };
        cur = layer.run_sequence(&cur, phi_k, reset_every)?;
    }
    Ok(cur)
}

impl ParamSet for LstmpParams {
    fn visit(&self, f: &mut dyn FnMut(crate::nn::ParamRef)) {
        use crate::nn::ParamRef as R;
        f(R::Mat(&self.w_ix));
        f(R::Mat(&self.w_fx));
        f(R::Mat(&self.w_cx));
        f(R::Mat(&self.w_ox));
        f(R::Mat(&self.w_ir));
        f(R::Mat(&self.w_fr));
        f(R::Mat(&self.w_cr));
        f(R::Mat(&self.w_or));
        f(R::Vec(&self.w_ic));
        f(R::Vec(&self.w_fc));
        f(R::Vec(&self.w_oc));
        f(R::Vec(&self.b_i));
        f(R::Vec(&self.b_f));
        f(R::Vec(&self.b_c));
        f(R::Vec(&self.b_o));
        f(R::Mat(&self.w_rm));
        f(R::Mat(&self.w_pm));
        f(R::Mat(&self.w_yr));
        f(R::Mat(&self.w_yp));
        f(R::Vec(&self.b_y));
        f(R::Mat(&self.w_cphi));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(crate::nn::ParamRefMut)) {
        use crate::nn::ParamRefMut as R;
        f(R::Mat(&mut self.w_ix));
        f(R::Mat(&mut self.w_fx));
        f(R::Mat(&mut self.w_cx));
        f(R::Mat(&mut self.w_ox));
        f(R::Mat(&mut self.w_ir));
        f(R::Mat(&mut self.w_fr));
        f(R::Mat(&mut self.w_cr));
        f(R::Mat(&mut self.w_or));
        f(R::Vec(&mut self.w_ic));
        f(R::Vec(&mut self.w_fc));
        f(R::Vec(&mut self.w_oc));
        f(R::Vec(&mut self.b_i));
        f(R::Vec(&mut self.b_f));
        f(R::Vec(&mut self.b_c));
        f(R::Vec(&mut self.b_o));
        f(R::Mat(&mut self.w_rm));
        f(R::Mat(&mut self.w_pm));
        f(R::Mat(&mut self.w_yr));
        f(R::Mat(&mut self.w_yp));
        f(R::Vec(&mut self.b_y));
        f(R::Mat(&mut self.w_cphi));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{self, grad_check, softmax_xent, zero_grads};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_dims(phi: usize) -> LstmpDims {
        LstmpDims {
            input: 2,
            cell: 3,
            proj: 2,
            output: 2,
            phi,
        }
    }

    fn random_params(dims: LstmpDims, seed: u64) -> LstmpParams {
        let mut p = LstmpParams::new(dims, "", seed);
        // give biases and peepholes non-trivial values too
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        p.visit_mut(&mut |r| match r {
            crate::nn::ParamRefMut::Vec(v) => {
                for x in v.value.iter_mut() {
                    *x = rng.gen_range(-0.3..0.3);
                }
            }
            crate::nn::ParamRefMut::Mat(m) => {
                for x in m.value.iter_mut() {
                    *x = rng.gen_range(-0.4..0.4);
                }
            }
        });
        p
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_params_give_half_gates_and_zero_output() {
        let dims = small_dims(0);
        let mut p = LstmpParams::new(dims, "", 0);
        p.visit_mut(&mut |r| match r {
            crate::nn::ParamRefMut::Mat(m) => m.value.fill(0.0),
            crate::nn::ParamRefMut::Vec(v) => v.value.fill(0.0),
        });
        let x = Array2::from_shape_fn((1, 2), |(_, j)| [0.7, -0.3][j]);
        let (y, cache) = p.forward(&x, None, 20).unwrap();
        assert!(cache.i.iter().all(|&v| v == 0.5));
        assert!(cache.f.iter().all(|&v| v == 0.5));
        assert!(cache.o.iter().all(|&v| v == 0.5));
        assert!(cache.c.iter().all(|&v| v == 0.0));
        assert!(cache.m.iter().all(|&v| v == 0.0));
        assert_eq!(y, Array2::<f64>::zeros((1, 2)));
    }

    /// Scalar evaluator of the equation block, written independently with
    /// plain arithmetic on 1-cell 1-proj parameters.
    #[test]
    fn scalar_step_matches_hand_rolled_evaluator() {
        let dims = LstmpDims {
            input: 1,
            cell: 1,
            proj: 1,
            output: 1,
            phi: 1,
        };
        let mut p = LstmpParams::new(dims, "", 3);
        let vals = [
            ("w_ix", 0.3),
            ("w_fx", -0.2),
            ("w_cx", 0.5),
            ("w_ox", 0.1),
            ("w_ir", 0.4),
            ("w_fr", 0.25),
            ("w_cr", -0.35),
            ("w_or", 0.15),
            ("w_ic", 0.05),
            ("w_fc", -0.1),
            ("w_oc", 0.2),
            ("b_i", 0.01),
            ("b_f", 0.02),
            ("b_c", -0.03),
            ("b_o", 0.04),
            ("w_rm", 0.6),
            ("w_pm", -0.7),
            ("w_yr", 1.1),
            ("w_yp", 0.9),
            ("b_y", -0.5),
            ("w_cphi", 0.45),
        ];
        p.visit_mut(&mut |r| match r {
            crate::nn::ParamRefMut::Mat(m) => {
                let v = vals.iter().find(|(n, _)| *n == m.name).unwrap().1;
                m.value.fill(v);
            }
            crate::nn::ParamRefMut::Vec(vec) => {
                let v = vals.iter().find(|(n, _)| *n == vec.name).unwrap().1;
                vec.value.fill(v);
            }
        });

        let x = 0.8;
        let phi = -0.6;
        let c_prev = 0.3;
        let r_prev = -0.2;

        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let i = sig(0.3 * x + 0.4 * r_prev + 0.05 * c_prev + 0.01);
        let f = sig(-0.2 * x + 0.25 * r_prev + -0.1 * c_prev + 0.02);
        let g = (0.5 * x + -0.35 * r_prev + 0.45 * phi + -0.03).tanh();
        let c = f * c_prev + i * g;
        let o = sig(0.1 * x + 0.15 * r_prev + 0.2 * c + 0.04);
        let m = o * c.tanh();
        let r = 0.6 * m;
        let pp = -0.7 * m;
        let y = 1.1 * r + 0.9 * pp + -0.5;

        let state = LstmpState {
            c: array![c_prev],
            r: array![r_prev],
        };
        let (y_got, m_got, next) = p.step(
            array![x].view(),
            Some(array![phi].view()),
            &state,
        );
        assert!((y_got[0] - y).abs() < 1e-14, "{} vs {y}", y_got[0]);
        assert!((m_got[0] - m).abs() < 1e-14);
        assert!((next.c[0] - c).abs() < 1e-14);
        assert!((next.r[0] - r).abs() < 1e-14);
    }

    #[test]
    fn zero_injection_matrix_equals_no_injection() {
        let with_phi = {
            let mut p = random_params(small_dims(2), 7);
            p.w_cphi.value.fill(0.0);
            p
        };
        let without_phi = {
            let mut p = random_params(small_dims(0), 7);
            // copy the shared parameters from the injected variant
            macro_rules! cp {
                ($($f:ident),*) => { $( p.$f.value.assign(&with_phi.$f.value); )* }
            }
            cp!(w_ix, w_fx, w_cx, w_ox, w_ir, w_fr, w_cr, w_or, w_rm, w_pm, w_yr, w_yp);
            p.w_ic.value.assign(&with_phi.w_ic.value);
            p.w_fc.value.assign(&with_phi.w_fc.value);
            p.w_oc.value.assign(&with_phi.w_oc.value);
            p.b_i.value.assign(&with_phi.b_i.value);
            p.b_f.value.assign(&with_phi.b_f.value);
            p.b_c.value.assign(&with_phi.b_c.value);
            p.b_o.value.assign(&with_phi.b_o.value);
            p.b_y.value.assign(&with_phi.b_y.value);
            p
        };
        let x = random_matrix(40, 2, 1);
        let phi = random_matrix(40, 2, 2);
        let y_inj = with_phi.run_sequence(&x, Some(&phi), 20).unwrap();
        let y_plain = without_phi.run_sequence(&x, None, 20).unwrap();
        assert_eq!(y_inj, y_plain);
    }

    #[test]
    fn reset_makes_segments_independent() {
        let p = random_params(small_dims(0), 9);
        let x = random_matrix(40, 2, 5);
        let full = p.run_sequence(&x, None, DEFAULT_RESET_EVERY).unwrap();
        let tail = p
            .run_sequence(&x.slice(ndarray::s![20..40, ..]).to_owned(), None, 20)
            .unwrap();
        assert_eq!(full.slice(ndarray::s![20..40, ..]), tail);
        // and the concatenation of two independent 20-frame runs is the whole
        let head = p
            .run_sequence(&x.slice(ndarray::s![0..20, ..]).to_owned(), None, 20)
            .unwrap();
        assert_eq!(full.slice(ndarray::s![0..20, ..]), head);
    }

    #[test]
    fn run_sequence_matches_step_loop_oracle() {
        let p = random_params(small_dims(2), 21);
        let x = random_matrix(47, 2, 6);
        let phi = random_matrix(47, 2, 7);
        let got = p.run_sequence(&x, Some(&phi), 20).unwrap();

        let mut state = LstmpState::zeros(&p.dims);
        for t in 0..47 {
            if t % 20 == 0 {
                state = LstmpState::zeros(&p.dims);
            }
            let (y_t, _, next) = p.step(x.row(t), Some(phi.row(t)), &state);
            assert_eq!(got.row(t).to_owned(), y_t, "frame {t}");
            state = next;
        }
    }

    #[test]
    fn phi_length_mismatch_is_rejected() {
        let p = random_params(small_dims(2), 4);
        let x = random_matrix(10, 2, 0);
        let phi = random_matrix(9, 2, 1);
        assert!(matches!(
            p.run_sequence(&x, Some(&phi), 20),
            Err(LstmpError::LengthMismatch { .. })
        ));
    }

    /// Harness exposing the inputs as parameters so finite differences also
    /// verify the returned dX and dPhi.
    struct Harness {
        p: LstmpParams,
        x: ParamMat,
        phi: ParamMat,
        labels: Vec<usize>,
        reset: usize,
    }

    impl ParamSet for Harness {
        fn visit(&self, f: &mut dyn FnMut(crate::nn::ParamRef)) {
            self.p.visit(f);
            f(crate::nn::ParamRef::Mat(&self.x));
            f(crate::nn::ParamRef::Mat(&self.phi));
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(crate::nn::ParamRefMut)) {
            self.p.visit_mut(f);
            f(crate::nn::ParamRefMut::Mat(&mut self.x));
            f(crate::nn::ParamRefMut::Mat(&mut self.phi));
        }
    }

    fn harness_loss(h: &Harness) -> f64 {
        let y = h
            .p
            .run_sequence(&h.x.value, Some(&h.phi.value), h.reset)
            .unwrap();
        let mut loss = 0.0;
        for t in 0..y.nrows() {
            loss += softmax_xent(y.row(t), h.labels[t]).unwrap().0;
        }
        loss / y.nrows() as f64
    }

    #[test]
    fn bptt_matches_finite_differences_across_reset() {
        let dims = small_dims(2);
        let t_max = 25; // crosses the reset at t = 20
        let mut h = Harness {
            p: random_params(dims, 31),
            x: ParamMat {
                name: "input".into(),
                value: random_matrix(t_max, 2, 8),
                grad: Array2::zeros((t_max, 2)),
            },
            phi: ParamMat {
                name: "phi".into(),
                value: random_matrix(t_max, 2, 9),
                grad: Array2::zeros((t_max, 2)),
            },
            labels: (0..t_max).map(|t| t % 2).collect(),
            reset: 20,
        };

        let (y, cache) = h.p.forward(&h.x.value, Some(&h.phi.value), h.reset).unwrap();
        let mut dy = Array2::zeros((t_max, dims.output));
        for t in 0..t_max {
            let (_, d) = softmax_xent(y.row(t), h.labels[t]).unwrap();
            dy.row_mut(t).assign(&(d / t_max as f64));
        }
        zero_grads(&mut h.p);
        let (dx, dphi) = h.p.bptt(&cache, &dy);
        h.x.grad = dx;
        h.phi.grad = dphi;

        let err = grad_check(&mut h, &mut harness_loss, 1e-4);
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn peephole_gradients_match_finite_differences() {
        // isolate the peephole vectors: everything else is checked above,
        // but these are the parameters with the diagonal constraint
        let dims = small_dims(0);
        let t_max = 24;
        let p = random_params(dims, 77);
        let x = random_matrix(t_max, 2, 10);
        let labels: Vec<usize> = (0..t_max).map(|t| (t / 3) % 2).collect();

        let (y, cache) = p.forward(&x, None, 20).unwrap();
        let mut dy = Array2::zeros((t_max, dims.output));
        for t in 0..t_max {
            let (_, d) = softmax_xent(y.row(t), labels[t]).unwrap();
            dy.row_mut(t).assign(&(d / t_max as f64));
        }
        let mut p2 = p.clone();
        zero_grads(&mut p2);
        p2.bptt(&cache, &dy);

        for (name, analytic) in [
            ("w_ic", p2.w_ic.grad.clone()),
            ("w_fc", p2.w_fc.grad.clone()),
            ("w_oc", p2.w_oc.grad.clone()),
        ] {
            for k in 0..dims.cell {
                let mut probe = p.clone();
                let eps = 1e-4;
                let bump = |pp: &mut LstmpParams, delta: f64| {
                    let v = match name {
                        "w_ic" => &mut pp.w_ic.value,
                        "w_fc" => &mut pp.w_fc.value,
                        _ => &mut pp.w_oc.value,
                    };
                    v[k] += delta;
                };
                let loss = |pp: &LstmpParams| {
                    let y = pp.run_sequence(&x, None, 20).unwrap();
                    (0..t_max)
                        .map(|t| softmax_xent(y.row(t), labels[t]).unwrap().0)
                        .sum::<f64>()
                        / t_max as f64
                };
                bump(&mut probe, eps);
                let up = loss(&probe);
                bump(&mut probe, -2.0 * eps);
                let down = loss(&probe);
                let cd = (up - down) / (2.0 * eps);
                let rel = (analytic[k] - cd).abs() / analytic[k].abs().max(cd.abs()).max(1e-12);
                assert!(rel < 1e-4, "{name}[{k}] rel err {rel}");
            }
        }
    }

    #[test]
    fn no_gradient_crosses_reset_backwards() {
        let dims = small_dims(0);
        let t_max = 40;
        let mut p = random_params(dims, 13);
        let x = random_matrix(t_max, 2, 11);
        let (_, cache) = p.forward(&x, None, 20).unwrap();
        // loss touches only frames 20..40
        let mut dy = Array2::zeros((t_max, dims.output));
        for t in 20..t_max {
            dy[[t, 0]] = 1.0;
            dy[[t, 1]] = -0.5;
        }
        zero_grads(&mut p);
        let (dx, _) = p.bptt(&cache, &dy);
        for t in 0..20 {
            assert!(
                dx.row(t).iter().all(|&v| v == 0.0),
                "gradient leaked into frame {t}"
            );
        }
    }

    #[test]
    fn save_load_forward_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lstmp.mdl");
        let p = random_params(small_dims(0), 55);
        nn::save_params(&path, serde_json::Value::Null, &p).unwrap();

        let mut a = LstmpParams::new(small_dims(0), "", 0);
        let mut b = LstmpParams::new(small_dims(0), "", 1);
        let (_, tensors) = nn::load_params(&path).unwrap();
        nn::load_params_into(&mut a, &tensors).unwrap();
        let (_, tensors) = nn::load_params(&path).unwrap();
        nn::load_params_into(&mut b, &tensors).unwrap();

        let x = random_matrix(30, 2, 12);
        let ya = a.run_sequence(&x, None, 20).unwrap();
        let yb = b.run_sequence(&x, None, 20).unwrap();
        assert_eq!(ya, yb);

        // and re-serializing the loaded params reproduces the file
        let path2 = dir.path().join("lstmp2.mdl");
        nn::save_params(&path2, serde_json::Value::Null, &a).unwrap();
        let f1 = std::fs::read(&path).unwrap();
        let f2 = std::fs::read(&path2).unwrap();
        assert_eq!(f1, f2);
    }

    #[test]
    fn stack_feeds_y_and_shares_reset_boundaries() {
        let l0 = random_params(
            LstmpDims {
                input: 2,
                cell: 3,
                proj: 2,
                output: 3,
                phi: 0,
            },
            61,
        );
        let l1 = random_params(
            LstmpDims {
                input: 3,
                cell: 3,
                proj: 2,
                output: 2,
                phi: 0,
            },
            62,
        );
        let x = random_matrix(45, 2, 13);
        let stacked = run_stack(&[l0.clone(), l1.clone()], &x, None, 20).unwrap();
        let y0 = l0.run_sequence(&x, None, 20).unwrap();
        let y1 = l1.run_sequence(&y0, None, 20).unwrap();
        assert_eq!(stacked, y1);
        // boundaries shared: second half equals an independent run of both layers
        let x_tail = x.slice(ndarray::s![20..40, ..]).to_owned();
        let tail = run_stack(&[l0, l1], &x_tail, None, 20).unwrap();
        assert_eq!(stacked.slice(ndarray::s![20..40, ..]), tail);
    }
}
