//! Named parameter sets, graph binding, initialization, and optimizers.

use crate::error::{Error, Result};
use crate::tensor::{Grads, Real, Tape, Var};
use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::cell::RefCell;
use std::collections::HashMap;

/// Ordered collection of named tensors. Ordering is stable (insertion order),
/// which keeps checkpoints and hashes deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    tensors: IndexMap<String, ArrayD<Real>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<Real>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<Real>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<Real>> {
        self.tensors.get_mut(name)
    }

    pub fn expect(&self, name: &str) -> &ArrayD<Real> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<Real>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Bitwise equality of all tensors (names, shapes, and values).
    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        if self.tensors.len() != other.tensors.len() {
            return false;
        }
        self.tensors.iter().zip(other.tensors.iter()).all(
            |((an, av), (bn, bv))| {
                an == bn
                    && av.shape() == bv.shape()
                    && av
                        .iter()
                        .zip(bv.iter())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            },
        )
    }

    /// True if every entry is finite.
    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in &self.tensors {
            if let Some((idx, v)) = t.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite value {v} in parameter {name} at flat index {idx}"
                )));
            }
        }
        Ok(())
    }
}

/// Binds parameters onto a tape as leaf or constant vars, remembering which
/// node each name got so gradients can be routed back.
pub struct Binder<'t, 'p> {
    tape: &'t Tape,
    params: &'p ParamSet,
    trainable: Box<dyn Fn(&str) -> bool + 'p>,
    bound: RefCell<IndexMap<String, Var<'t>>>,
}

impl<'t, 'p> Binder<'t, 'p> {
    /// Every parameter bound as a constant (pure evaluation).
    pub fn frozen(tape: &'t Tape, params: &'p ParamSet) -> Self {
        Self::with_filter(tape, params, |_| false)
    }

    /// Every parameter trainable.
    pub fn trainable(tape: &'t Tape, params: &'p ParamSet) -> Self {
        Self::with_filter(tape, params, |_| true)
    }

    /// Parameters matching `filter` are trainable leaves, the rest constants.
    pub fn with_filter(
        tape: &'t Tape,
        params: &'p ParamSet,
        filter: impl Fn(&str) -> bool + 'p,
    ) -> Self {
        Binder {
            tape,
            params,
            trainable: Box::new(filter),
            bound: RefCell::new(IndexMap::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Var for a named parameter, binding it on first use.
    pub fn var(&self, name: &str) -> Var<'t> {
        if let Some(v) = self.bound.borrow().get(name) {
            return *v;
        }
        let value = self.params.expect(name).clone();
        let var = if (self.trainable)(name) {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.bound.borrow_mut().insert(name.to_string(), var);
        var
    }

    /// `(name, gradient)` pairs for every trainable parameter the loss
    /// actually touched.
    pub fn grads(&self, grads: &Grads) -> Vec<(String, ArrayD<Real>)> {
        self.bound
            .borrow()
            .iter()
            .filter_map(|(name, var)| grads.wrt(*var).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

/// Kaiming-style init for conv/linear weights, zeros for biases.
pub fn init_weight(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<Real> {
    let fan_in: usize = match shape.len() {
        2 => shape[0],              // linear stored [in, out]
        4 => shape[1] * shape[2] * shape[3], // conv [out, in, kh, kw]
        _ => shape.iter().product::<usize>() / shape[0].max(1),
    };
    let std = (2.0 / fan_in.max(1) as Real).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let z: Real = rng.sample(StandardNormal);
        z * std
    })
}

pub fn zeros(shape: &[usize]) -> ArrayD<Real> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> ArrayD<Real> {
    ArrayD::ones(IxDyn(shape))
}

/// Gaussian array with the given std.
pub fn randn(shape: &[usize], std: Real, rng: &mut ChaCha8Rng) -> ArrayD<Real> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let z: Real = rng.sample(StandardNormal);
        z * std
    })
}

/// Convolution with bias: weight `name.w` `[O,C,kh,kw]`, bias `name.b` `[O]`.
pub fn conv2d<'t>(b: &Binder<'t, '_>, name: &str, x: Var<'t>, stride: usize, pad: usize) -> Var<'t> {
    let w = b.var(&format!("{name}.w"));
    let bias = b.var(&format!("{name}.b"));
    let o = bias.shape()[0];
    x.conv2d(w, stride, pad).add(bias.reshape(&[1, o, 1, 1]))
}

/// Linear layer on `[N, in]`: weight `name.w` `[in,out]`, bias `name.b` `[out]`.
pub fn linear<'t>(b: &Binder<'t, '_>, name: &str, x: Var<'t>) -> Var<'t> {
    let w = b.var(&format!("{name}.w"));
    let bias = b.var(&format!("{name}.b"));
    x.matmul(w).add(bias)
}

/// Group normalization over `[B,C,H,W]` with per-channel affine params
/// `name.g` / `name.bta` (both `[C]`).
pub fn group_norm<'t>(b: &Binder<'t, '_>, name: &str, x: Var<'t>, groups: usize) -> Var<'t> {
    let shape = x.shape();
    let (bs, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    assert!(c % groups == 0, "channels {c} not divisible by groups {groups}");
    let gsize = c / groups * h * w;
    let xg = x.reshape(&[bs, groups, gsize]);
    let mean = xg.sum_axes_keep(&[2]).scale(1.0 / gsize as Real);
    let centered = xg.sub(mean);
    let var = centered.sqr().sum_axes_keep(&[2]).scale(1.0 / gsize as Real);
    let std = var.add_scalar(1e-5).sqrt();
    let normed = centered.div(std).reshape(&[bs, c, h, w]);
    let gamma = b.var(&format!("{name}.g")).reshape(&[1, c, 1, 1]);
    let beta = b.var(&format!("{name}.bta")).reshape(&[1, c, 1, 1]);
    normed.mul(gamma).add(beta)
}

/// Plain SGD.
pub struct Sgd {
    pub lr: Real,
}

impl Sgd {
    pub fn new(lr: Real) -> Self {
        Sgd { lr }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[(String, ArrayD<Real>)]) {
        for (name, g) in grads {
            let p = params.get_mut(name).expect("sgd: unknown parameter");
            p.zip_mut_with(g, |pv, gv| *pv -= self.lr * gv);
        }
    }
}

/// Adam with bias correction. Moment state is keyed by parameter name and
/// lives only as long as the optimizer.
pub struct Adam {
    pub lr: Real,
    beta1: Real,
    beta2: Real,
    eps: Real,
    t: i32,
    m: HashMap<String, ArrayD<Real>>,
    v: HashMap<String, ArrayD<Real>>,
}

impl Adam {
    pub fn new(lr: Real) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[(String, ArrayD<Real>)]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("adam: unknown parameter");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let (b1, b2) = (self.beta1, self.beta2);
            m.zip_mut_with(g, |mv, gv| *mv = b1 * *mv + (1.0 - b1) * gv);
            v.zip_mut_with(g, |vv, gv| *vv = b2 * *vv + (1.0 - b2) * gv * gv);
            ndarray::Zip::from(p)
                .and(&*m)
                .and(&*v)
                .for_each(|pv, &mv, &vv| {
                    let mh = mv / bc1;
                    let vh = vv / bc2;
                    *pv -= self.lr * mh / (vh.sqrt() + self.eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;
    use rand::SeedableRng;

    #[test]
    fn binder_routes_gradients_by_name() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        params.insert("lin.w", init_weight(&[3, 2], &mut rng));
        params.insert("lin.b", zeros(&[2]));
        params.insert("frozen.w", init_weight(&[3, 2], &mut rng));

        let tape = Tape::new();
        let binder = Binder::with_filter(&tape, &params, |n| n.starts_with("lin."));
        let x = tape.constant(randn(&[4, 3], 1.0, &mut rng));
        let y = linear(&binder, "lin", x);
        let frozen = binder.var("frozen.w");
        let loss = y.sqr().mean_all().add(frozen.sum_all().scale(0.0));
        let grads = backward(loss);
        let named = binder.grads(&grads);
        let names: Vec<&str> = named.iter().map(|(n, _)| n.as_str()).collect();
        assert!(names.contains(&"lin.w"));
        assert!(names.contains(&"lin.b"));
        assert!(!names.contains(&"frozen.w"));
    }

    #[test]
    fn group_norm_normalizes_groups() {
        let mut params = ParamSet::new();
        params.insert("gn.g", ones(&[4]));
        params.insert("gn.bta", zeros(&[4]));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::new();
        let binder = Binder::frozen(&tape, &params);
        let x = tape.constant(randn(&[2, 4, 3, 3], 2.5, &mut rng));
        let y = group_norm(&binder, "gn", x, 2).value();
        // each (batch, group) slab should be ~zero-mean unit-variance
        let y4 = y.into_dimensionality::<ndarray::Ix4>().unwrap();
        for b in 0..2 {
            for g in 0..2 {
                let mut vals = Vec::new();
                for c in 0..2 {
                    for i in 0..3 {
                        for j in 0..3 {
                            vals.push(y4[[b, g * 2 + c, i, j]]);
                        }
                    }
                }
                let n = vals.len() as Real;
                let mean: Real = vals.iter().sum::<Real>() / n;
                let var: Real = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / n;
                assert!(mean.abs() < 1e-10);
                assert!((var - 1.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn adam_reduces_quadratic_loss() {
        let mut params = ParamSet::new();
        params.insert("p", ndarray::arr1(&[5.0, -3.0]).into_dyn());
        let mut opt = Adam::new(0.1);
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            let (l, named) = {
                let tape = Tape::new();
                let binder = Binder::trainable(&tape, &params);
                let p = binder.var("p");
                let loss = p.sqr().sum_all();
                let grads = backward(loss);
                (loss.scalar_value(), binder.grads(&grads))
            };
            opt.step(&mut params, &named);
            last = l;
        }
        assert!(last < 1e-3, "adam did not converge: {last}");
    }
}
