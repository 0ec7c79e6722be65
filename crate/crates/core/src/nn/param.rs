use ndarray::{Array1, Array2};
use rand::distributions::Uniform;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A named matrix parameter with its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamMat {
    pub name: String,
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
}

/// A named vector parameter with its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVec {
    pub name: String,
    pub value: Array1<f64>,
    pub grad: Array1<f64>,
}

impl ParamMat {
    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        ParamMat {
            name: name.into(),
            value: Array2::zeros((rows, cols)),
            grad: Array2::zeros((rows, cols)),
        }
    }

    /// Uniform(-scale, scale) init from a stream derived from (seed, name).
    ///
    /// Each parameter draws from its own stream in row-major order, so a
    /// parameter keeps the same leading values when only trailing rows are
    /// added (e.g. the same output head grown by an extra label group).
    pub fn uniform(name: impl Into<String>, rows: usize, cols: usize, scale: f64, seed: u64) -> Self {
        let name = name.into();
        let mut rng = param_rng(seed, &name);
        let dist = Uniform::new_inclusive(-scale, scale);
        let value = Array2::from_shape_fn((rows, cols), |_| rng.sample(dist));
        ParamMat {
            name,
            grad: Array2::zeros((rows, cols)),
            value,
        }
    }
}

impl ParamVec {
    pub fn zeros(name: impl Into<String>, len: usize) -> Self {
        ParamVec {
            name: name.into(),
            value: Array1::zeros(len),
            grad: Array1::zeros(len),
        }
    }
}

/// Deterministic per-parameter RNG: the stream depends only on the master
/// seed and the parameter name, never on construction order.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()))
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub enum ParamRef<'a> {
    Mat(&'a ParamMat),
    Vec(&'a ParamVec),
}

pub enum ParamRefMut<'a> {
    Mat(&'a mut ParamMat),
    Vec(&'a mut ParamVec),
}

impl ParamRef<'_> {
    pub fn name(&self) -> &str {
        match self {
            ParamRef::Mat(p) => &p.name,
            ParamRef::Vec(p) => &p.name,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ParamRef::Mat(p) => p.value.len(),
            ParamRef::Vec(p) => p.value.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            ParamRef::Mat(p) => p.value.shape().to_vec(),
            ParamRef::Vec(p) => p.value.shape().to_vec(),
        }
    }
}

/// Anything that exposes its parameters for serialization, gradient checks
/// and SGD updates. Visit order must be stable.
pub trait ParamSet {
    fn visit(&self, f: &mut dyn FnMut(ParamRef));
    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamRefMut));
}

/// Total number of scalar coordinates across all parameters.
pub fn num_coords<P: ParamSet + ?Sized>(p: &P) -> usize {
    let mut n = 0;
    p.visit(&mut |r| n += r.len());
    n
}

/// Parameter values flattened in visit order (row-major within matrices).
pub fn flatten_values<P: ParamSet + ?Sized>(p: &P) -> Vec<f64> {
    let mut out = Vec::new();
    p.visit(&mut |r| match r {
        ParamRef::Mat(m) => out.extend(m.value.iter()),
        ParamRef::Vec(v) => out.extend(v.value.iter()),
    });
    out
}

/// Gradients flattened in the same order as [`flatten_values`].
pub fn flatten_grads<P: ParamSet + ?Sized>(p: &P) -> Vec<f64> {
    let mut out = Vec::new();
    p.visit(&mut |r| match r {
        ParamRef::Mat(m) => out.extend(m.grad.iter()),
        ParamRef::Vec(v) => out.extend(v.grad.iter()),
    });
    out
}

/// Overwrite all values from a flat slice in visit order.
///
/// Panics if `vals` does not match the coordinate count.
pub fn set_values<P: ParamSet + ?Sized>(p: &mut P, vals: &[f64]) {
    let mut i = 0;
    p.visit_mut(&mut |r| match r {
        ParamRefMut::Mat(m) => {
            for v in m.value.iter_mut() {
                *v = vals[i];
                i += 1;
            }
        }
        ParamRefMut::Vec(v) => {
            for x in v.value.iter_mut() {
                *x = vals[i];
                i += 1;
            }
        }
    });
    assert_eq!(i, vals.len(), "flat value length mismatch");
}

pub fn zero_grads<P: ParamSet + ?Sized>(p: &mut P) {
    p.visit_mut(&mut |r| match r {
        ParamRefMut::Mat(m) => m.grad.fill(0.0),
        ParamRefMut::Vec(v) => v.grad.fill(0.0),
    });
}

/// Add `delta` to the flat coordinate `index` (visit order).
pub fn nudge_value<P: ParamSet + ?Sized>(p: &mut P, index: usize, delta: f64) {
    let mut i = 0;
    p.visit_mut(&mut |r| {
        let len = match &r {
            ParamRefMut::Mat(m) => m.value.len(),
            ParamRefMut::Vec(v) => v.value.len(),
        };
        if index >= i && index < i + len {
            let j = index - i;
            match r {
                ParamRefMut::Mat(m) => *m.value.iter_mut().nth(j).unwrap() += delta,
                ParamRefMut::Vec(v) => v.value[j] += delta,
            }
        }
        i += len;
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Pair {
        a: ParamMat,
        b: ParamVec,
    }

    impl ParamSet for Pair {
        fn visit(&self, f: &mut dyn FnMut(ParamRef)) {
            f(ParamRef::Mat(&self.a));
            f(ParamRef::Vec(&self.b));
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(ParamRefMut)) {
            f(ParamRefMut::Mat(&mut self.a));
            f(ParamRefMut::Vec(&mut self.b));
        }
    }

    #[test]
    fn flatten_set_round_trip() {
        let mut p = Pair {
            a: ParamMat::uniform("a", 2, 3, 0.05, 7),
            b: ParamVec::zeros("b", 4),
        };
        let flat = flatten_values(&p);
        assert_eq!(flat.len(), 10);
        let doubled: Vec<f64> = flat.iter().map(|x| x * 2.0).collect();
        set_values(&mut p, &doubled);
        assert_eq!(flatten_values(&p), doubled);
    }

    #[test]
    fn nudge_targets_single_coordinate() {
        let mut p = Pair {
            a: ParamMat::zeros("a", 2, 2),
            b: ParamVec::zeros("b", 2),
        };
        nudge_value(&mut p, 5, 1.5);
        let flat = flatten_values(&p);
        assert_eq!(flat[5], 1.5);
        assert_eq!(flat.iter().filter(|&&x| x != 0.0).count(), 1);
    }

    #[test]
    fn named_init_is_order_independent() {
        let a1 = ParamMat::uniform("w_ix", 3, 4, 0.05, 42);
        let _other = ParamMat::uniform("w_fx", 3, 4, 0.05, 42);
        let a2 = ParamMat::uniform("w_ix", 3, 4, 0.05, 42);
        assert_eq!(a1.value, a2.value);
    }

    #[test]
    fn grown_matrix_keeps_leading_rows() {
        let small = ParamMat::uniform("w_yr", 2, 5, 0.05, 9);
        let big = ParamMat::uniform("w_yr", 6, 5, 0.05, 9);
        for r in 0..2 {
            for c in 0..5 {
                assert_eq!(small.value[[r, c]], big.value[[r, c]]);
            }
        }
    }
}
