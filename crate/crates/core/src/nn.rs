//! Parameter management and the small layer vocabulary the architecture is
//! assembled from.
//!
//! Model structure is plain data: layers hold [`ParamId`] handles plus
//! hyperparameters, while a [`ParamStore`] owns the named tensors. The same
//! structure therefore runs over `f32` or `f64` stores, and the optimizer
//! sees one flat, deterministically ordered parameter list.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat registry of named parameter tensors in registration order.
/// Names are hierarchical dotted paths, unique within a model.
pub struct ParamStore<E: Element = f32> {
    names: Vec<String>,
    values: Vec<Tensor<E>>,
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<E> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<E>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::Shape(format!(
                "parameter {} has shape {:?}, refusing {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<E>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total scalar element count over all parameters.
    pub fn total_elements(&self) -> u64 {
        self.values.iter().map(|v| v.numel() as u64).sum()
    }

    fn register(&mut self, name: String, value: Tensor<E>) -> ParamId {
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.names.push(name);
        self.values.push(value);
        id
    }
}

/// Registers parameters under a scope stack with seeded initialization.
/// All draws happen in `f64` and are cast once, so `f32` and `f64` builds
/// of the same seed hold numerically matching weights.
pub struct ParamBuilder<'s, E: Element> {
    store: &'s mut ParamStore<E>,
    scope: Vec<String>,
    rng: ChaCha8Rng,
}

impl<'s, E: Element> ParamBuilder<'s, E> {
    pub fn new(store: &'s mut ParamStore<E>, seed: u64) -> Self {
        Self {
            store,
            scope: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn scoped<T>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> T) -> T {
        self.scope.push(name.into());
        let out = f(self);
        self.scope.pop();
        out
    }

    fn full_name(&self, name: &str) -> String {
        if self.scope.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.scope.join("."), name)
        }
    }

    fn next_normal(&mut self) -> f64 {
        // Box-Muller; one value per call keeps the stream simple and
        // reproducible across element types.
        let u1: f64 = self.rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = self.rng.gen::<f64>();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Normal(0, std) truncated at two standard deviations by resampling.
    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let z = loop {
                let z = self.next_normal();
                if z.abs() <= 2.0 {
                    break z;
                }
            };
            data.push(E::from_f64(z * std));
        }
        let t = Tensor::new(shape.to_vec(), data).expect("init shape");
        self.store.register(self.full_name(name), t)
    }

    /// Fan-out Kaiming normal for conv weights `[cout, cin/g, k, k]`.
    pub fn kaiming_conv(&mut self, name: &str, shape: &[usize], groups: usize) -> ParamId {
        assert_eq!(shape.len(), 4);
        let fan_out = shape[0] * shape[2] * shape[3] / groups;
        let std = (2.0 / fan_out as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<E> = (0..n)
            .map(|_| E::from_f64(self.next_normal() * std))
            .collect();
        let t = Tensor::new(shape.to_vec(), data).expect("init shape");
        self.store.register(self.full_name(name), t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.register(self.full_name(name), Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store
            .register(self.full_name(name), Tensor::filled(shape, E::ONE))
    }
}

/// Diagnostic sink: attention layers push their (min, max) softmax row
/// sums here when a probe is attached.
pub type AttnProbe = std::rc::Rc<std::cell::RefCell<Vec<(f64, f64)>>>;

/// Forward-pass context: the tape being recorded plus the store parameters
/// are bound from. With `train` unset, parameters enter the tape as plain
/// constants and no backward state is saved.
pub struct Fwd<'a, E: Element> {
    pub tape: &'a mut Tape<E>,
    pub store: &'a ParamStore<E>,
    pub train: bool,
    pub probe: Option<AttnProbe>,
}

impl<'a, E: Element> Fwd<'a, E> {
    pub fn new(tape: &'a mut Tape<E>, store: &'a ParamStore<E>, train: bool) -> Self {
        Self {
            tape,
            store,
            train,
            probe: None,
        }
    }

    pub fn with_probe(mut self, probe: AttnProbe) -> Self {
        self.probe = Some(probe);
        self
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.store.value(id).clone();
        if self.train {
            self.tape.leaf_param(value, id.0)
        } else {
            self.tape.leaf(value, false)
        }
    }
}

/// Gradients accumulated over a batch, aligned with store ids. Absorption
/// order is fixed by tape order, so reductions are deterministic.
pub struct GradAccum<E: Element = f32> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> GradAccum<E> {
    pub fn new(store: &ParamStore<E>) -> Self {
        Self {
            grads: (0..store.len()).map(|_| None).collect(),
        }
    }

    pub fn absorb(&mut self, tape: &Tape<E>) {
        for (tag, g) in tape.param_grads() {
            match &mut self.grads[tag] {
                slot @ None => *slot = Some(g.clone()),
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += *b;
                    }
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v = E::from_f64(v.to_f64() * factor);
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<E>> {
        self.grads[id.0].as_ref()
    }
}

// ---- layer vocabulary ----

/// Learned affine map on token matrices `[N, in] -> [N, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn build<E: Element>(
        pb: &mut ParamBuilder<'_, E>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        pb.scoped(name, |pb| Linear {
            w: pb.trunc_normal("weight", &[in_dim, out_dim], 0.02),
            b: pb.zeros("bias", &[out_dim]),
            in_dim,
            out_dim,
        })
    }

    pub fn forward<E: Element>(&self, fx: &mut Fwd<'_, E>, x: Var) -> Result<Var> {
        let w = fx.param(self.w);
        let b = fx.param(self.b);
        let y = fx.tape.matmul(x, w)?;
        fx.tape.add_bias_rows(y, b)
    }
}

/// Strided 2-D convolution layer over `[C,H,W]` maps.
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn build<E: Element>(
        pb: &mut ParamBuilder<'_, E>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Self {
        pb.scoped(name, |pb| Conv2dLayer {
            w: pb.kaiming_conv(
                "weight",
                &[out_ch, in_ch / groups, kernel, kernel],
                groups,
            ),
            b: pb.zeros("bias", &[out_ch]),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            groups,
        })
    }

    /// 1x1 convolution acting as a per-pixel channel map; initialized like
    /// a linear layer rather than a spatial conv.
    pub fn build_pointwise<E: Element>(
        pb: &mut ParamBuilder<'_, E>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
    ) -> Self {
        pb.scoped(name, |pb| Conv2dLayer {
            w: pb.trunc_normal("weight", &[out_ch, in_ch, 1, 1], 0.02),
            b: pb.zeros("bias", &[out_ch]),
            in_ch,
            out_ch,
            kernel: 1,
            stride: 1,
            pad: 0,
            groups: 1,
        })
    }

    pub fn forward<E: Element>(&self, fx: &mut Fwd<'_, E>, x: Var) -> Result<Var> {
        let w = fx.param(self.w);
        let b = fx.param(self.b);
        fx.tape
            .conv2d(x, w, Some(b), self.stride, self.pad, self.groups)
    }
}

/// Layer normalization over the trailing channel axis.
#[derive(Debug, Clone)]
pub struct LayerNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNormLayer {
    pub fn build<E: Element>(pb: &mut ParamBuilder<'_, E>, name: &str, dim: usize) -> Self {
        pb.scoped(name, |pb| LayerNormLayer {
            gamma: pb.ones("gamma", &[dim]),
            beta: pb.zeros("beta", &[dim]),
            dim,
        })
    }

    pub fn forward<E: Element>(&self, fx: &mut Fwd<'_, E>, x: Var) -> Result<Var> {
        let gamma = fx.param(self.gamma);
        let beta = fx.param(self.beta);
        fx.tape.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

/// `[C,H,W]` map to `[H*W, C]` token matrix.
pub fn to_tokens<E: Element>(tape: &mut Tape<E>, x: Var) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("to_tokens expects [C,H,W], got {shape:?}")));
    }
    let flat = tape.reshape(x, &[shape[0], shape[1] * shape[2]])?;
    tape.transpose2d(flat)
}

/// `[H*W, C]` token matrix back to a `[C,H,W]` map.
pub fn to_map<E: Element>(tape: &mut Tape<E>, x: Var, h: usize, w: usize) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 2 || shape[0] != h * w {
        return Err(Error::Shape(format!(
            "to_map expects [{}x{}, C] tokens, got {shape:?}",
            h, w
        )));
    }
    let t = tape.transpose2d(x)?;
    tape.reshape(t, &[shape[1], h, w])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_names_are_hierarchical_and_unique() {
        let mut store = ParamStore::<f32>::new();
        let mut pb = ParamBuilder::new(&mut store, 7);
        pb.scoped("encoder", |pb| {
            pb.scoped("stage1", |pb| {
                Linear::build(pb, "proj", 4, 8);
            });
        });
        let names: Vec<&str> = store.iter().map(|(_, n, _)| n).collect();
        assert_eq!(names, vec!["encoder.stage1.proj.weight", "encoder.stage1.proj.bias"]);
    }

    #[test]
    fn same_seed_matches_across_element_types() {
        let mut s32 = ParamStore::<f32>::new();
        let mut s64 = ParamStore::<f64>::new();
        ParamBuilder::new(&mut s32, 42).trunc_normal("w", &[64], 0.02);
        ParamBuilder::new(&mut s64, 42).trunc_normal("w", &[64], 0.02);
        for (a, b) in s32.value(ParamId(0)).data().iter().zip(s64.value(ParamId(0)).data()) {
            assert_eq!(*a, *b as f32);
        }
    }

    #[test]
    fn trunc_normal_stays_inside_two_sigma() {
        let mut store = ParamStore::<f32>::new();
        let mut pb = ParamBuilder::new(&mut store, 3);
        let id = pb.trunc_normal("w", &[4096], 0.02);
        for v in store.value(id).data() {
            assert!(v.abs() <= 0.04 + 1e-9);
        }
    }

    #[test]
    fn linear_forward_matches_manual_matmul() {
        let mut store = ParamStore::<f32>::new();
        let mut pb = ParamBuilder::new(&mut store, 1);
        let lin = Linear::build(&mut pb, "l", 3, 2);
        let mut tape = Tape::new();
        let mut fx = Fwd::new(&mut tape, &store, false);
        let x = fx
            .tape
            .leaf(Tensor::from_f64s(&[2, 3], &[1., 0., 0., 0., 1., 0.]).unwrap(), false);
        let y = lin.forward(&mut fx, x).unwrap();
        // rows of x pick out rows of the weight matrix (bias is zero)
        let w = store.value(lin.w);
        let yv = tape.value(y);
        assert_eq!(yv.data()[0], w.data()[0]);
        assert_eq!(yv.data()[1], w.data()[1]);
        assert_eq!(yv.data()[2], w.data()[2]);
        assert_eq!(yv.data()[3], w.data()[3]);
    }

    #[test]
    fn tokens_roundtrip() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(
            Tensor::from_f64s(&[2, 2, 3], &(0..12).map(|v| v as f64).collect::<Vec<_>>()).unwrap(),
            false,
        );
        let tokens = to_tokens(&mut tape, x).unwrap();
        assert_eq!(tape.value(tokens).shape(), &[6, 2]);
        let back = to_map(&mut tape, tokens, 2, 3).unwrap();
        assert!(tape.value(back).bit_eq(tape.value(x)));
    }
}
