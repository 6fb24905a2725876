//! Saved-activation reverse-mode autodiff.
//!
//! A [`Tape`] records every executed primitive op as a node holding the
//! forward value, its parent handles, and a backward closure over whatever
//! the op saved. `backward` walks the record once in reverse insertion
//! order (which is a reverse topological order by construction) and
//! accumulates gradients; leaf gradients stay queryable afterwards.

use super::kernels::{self, ConvGeometry};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn<E> = Box<dyn Fn(&Tensor<E>) -> Vec<Tensor<E>>>;

struct Node<E: Element> {
    value: Tensor<E>,
    parents: Vec<Var>,
    needs_grad: bool,
    backward: Option<BackFn<E>>,
    param_tag: Option<usize>,
}

pub struct Tape<E: Element = f32> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Tensor<E>>>,
    backward_done: bool,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated for `v` by the last `backward` call. Interior
    /// node gradients are released once consumed; leaves keep theirs.
    pub fn grad(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.push_node(value, Vec::new(), requires_grad, None, None)
    }

    /// Leaf carrying a parameter tag so optimizer code can collect its
    /// gradient after backward.
    pub fn leaf_param(&mut self, value: Tensor<E>, tag: usize) -> Var {
        self.push_node(value, Vec::new(), true, None, Some(tag))
    }

    fn push_node(
        &mut self,
        value: Tensor<E>,
        parents: Vec<Var>,
        needs_grad: bool,
        backward: Option<BackFn<E>>,
        param_tag: Option<usize>,
    ) -> Var {
        #[cfg(debug_assertions)]
        value
            .check_finite("tape node")
            .expect("non-finite value recorded on tape");
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            parents,
            needs_grad,
            backward,
            param_tag,
        });
        Var(id)
    }

    fn needs(&self, parents: &[Var]) -> bool {
        parents.iter().any(|p| self.nodes[p.0].needs_grad)
    }

    /// Records an interior op. `back` is only built when some parent
    /// tracks gradients, so inference graphs skip the saved-state clones.
    fn op(
        &mut self,
        value: Tensor<E>,
        parents: Vec<Var>,
        back: impl FnOnce() -> BackFn<E>,
    ) -> Var {
        let needs = self.needs(&parents);
        let backward = needs.then(back);
        self.push_node(value, parents, needs, backward, None)
    }

    /// Runs reverse accumulation from a scalar root. Visits every recorded
    /// node at most once, in reverse insertion order. A second call
    /// without a fresh tape is a contract error.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward called twice on the same tape".into(),
            ));
        }
        let root_value = &self.nodes[root.0].value;
        if !root_value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                root_value.shape()
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(E::ONE));
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            let Some(back) = node.backward.as_ref() else {
                continue; // leaf, or a node outside every grad path
            };
            let Some(g) = grads[i].take() else {
                continue; // not reachable from the root
            };
            let parent_grads = back(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                if self.nodes[p.0].needs_grad {
                    debug_assert_eq!(pg.shape(), self.nodes[p.0].value.shape());
                    accumulate(&mut grads[p.0], pg);
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Parameter-tagged leaf gradients from the last backward, in tape
    /// order. The same tag can appear more than once if a parameter was
    /// bound repeatedly; callers sum the pieces.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &Tensor<E>)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(move |(i, node)| match (node.param_tag, &self.grads.get(i)) {
                (Some(tag), Some(Some(g))) => Some((tag, g)),
                _ => None,
            })
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = zip_same_shape(self.value(a), self.value(b), "add", |x, y| x + y)?;
        Ok(self.op(out, vec![a, b], || {
            Box::new(|g: &Tensor<E>| vec![g.clone(), g.clone()])
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = zip_same_shape(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        Ok(self.op(out, vec![a, b], || {
            Box::new(|g: &Tensor<E>| vec![g.clone(), map(g, |v| -v)])
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let out = zip_same_shape(&av, &bv, "mul", |x, y| x * y)?;
        Ok(self.op(out, vec![a, b], move || {
            Box::new(move |g: &Tensor<E>| {
                vec![
                    zip_unchecked(g, &bv, |gv, y| gv * y),
                    zip_unchecked(g, &av, |gv, x| gv * x),
                ]
            })
        }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = map(self.value(a), |v| E::from_f64(v.to_f64() * factor));
        self.op(out, vec![a], move || {
            Box::new(move |g: &Tensor<E>| vec![map(g, |v| E::from_f64(v.to_f64() * factor))])
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a).clone();
        let out = map(&av, |v| if v > E::ZERO { v } else { E::ZERO });
        self.op(out, vec![a], move || {
            Box::new(move |g: &Tensor<E>| {
                vec![zip_unchecked(g, &av, |gv, x| {
                    if x > E::ZERO {
                        gv
                    } else {
                        E::ZERO
                    }
                })]
            })
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |v| {
            E::from_f64(1.0 / (1.0 + (-v.to_f64()).exp()))
        });
        let saved = out.clone();
        self.op(out, vec![a], move || {
            Box::new(move |g: &Tensor<E>| {
                vec![zip_unchecked(g, &saved, |gv, y| {
                    let y = y.to_f64();
                    E::from_f64(gv.to_f64() * y * (1.0 - y))
                })]
            })
        })
    }

    /// Exact-erf GELU: `x * Phi(x)` with `Phi` the standard normal CDF.
    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a).clone();
        let out = map(&av, |v| E::from_f64(kernels::gelu_value(v.to_f64())));
        self.op(out, vec![a], move || {
            Box::new(move |g: &Tensor<E>| {
                vec![zip_unchecked(g, &av, |gv, x| {
                    E::from_f64(gv.to_f64() * kernels::gelu_grad(x.to_f64()))
                })]
            })
        })
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ashape, bshape) = (self.value(a).shape(), self.value(b).shape());
        if ashape.len() != 2 || bshape.len() != 2 || ashape[1] != bshape[0] {
            return Err(Error::Shape(format!(
                "matmul expects [m,k]x[k,n], got {ashape:?} x {bshape:?}"
            )));
        }
        let (m, k, n) = (ashape[0], ashape[1], bshape[1]);
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let out = Tensor::new(
            vec![m, n],
            kernels::matmul(av.data(), bv.data(), m, k, n),
        )?;
        Ok(self.op(out, vec![a, b], move || {
            Box::new(move |g: &Tensor<E>| {
                let da = kernels::matmul_nt(g.data(), bv.data(), m, n, k);
                let db = kernels::matmul_tn(av.data(), g.data(), k, m, n);
                vec![
                    Tensor::new(vec![m, k], da).expect("matmul da shape"),
                    Tensor::new(vec![k, n], db).expect("matmul db shape"),
                ]
            })
        }))
    }

    pub fn transpose2d(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!(
                "transpose2d expects rank 2, got {shape:?}"
            )));
        }
        let (r, c) = (shape[0], shape[1]);
        let out = Tensor::new(
            vec![c, r],
            kernels::transpose2d(self.value(a).data(), r, c),
        )?;
        Ok(self.op(out, vec![a], move || {
            Box::new(move |g: &Tensor<E>| {
                vec![Tensor::new(vec![r, c], kernels::transpose2d(g.data(), c, r))
                    .expect("transpose grad shape")]
            })
        }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let old = self.value(a).shape().to_vec();
        let out = self.value(a).reshaped(shape)?;
        Ok(self.op(out, vec![a], move || {
            Box::new(move |g: &Tensor<E>| vec![g.reshaped(&old).expect("reshape grad shape")])
        }))
    }

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero tensors".into()));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!(
                "concat axis {axis} out of bounds for rank {}",
                first.len()
            )));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for (i, &p) in parts.iter().enumerate() {
            let s = self.value(p).shape();
            let mut expect = first.clone();
            expect[axis] = s[axis];
            if s != expect.as_slice() {
                return Err(Error::Shape(format!(
                    "concat part {i} has shape {s:?}, incompatible with {first:?} along axis {axis}"
                )));
            }
            lens.push(s[axis]);
        }
        let mut out_shape = first.clone();
        out_shape[axis] = lens.iter().sum();
        let (outer, _, inner) = kernels::axis_split(&out_shape, axis);
        let total_len: usize = lens.iter().sum();
        let mut data = vec![E::ZERO; outer * total_len * inner];
        let mut offset = 0usize;
        for (&p, &len) in parts.iter().zip(&lens) {
            let src = self.value(p).data();
            for o in 0..outer {
                let dst_base = (o * total_len + offset) * inner;
                let src_base = o * len * inner;
                data[dst_base..dst_base + len * inner]
                    .copy_from_slice(&src[src_base..src_base + len * inner]);
            }
            offset += len;
        }
        let out = Tensor::new(out_shape, data)?;
        let part_shapes: Vec<Vec<usize>> = parts
            .iter()
            .map(|&p| self.value(p).shape().to_vec())
            .collect();
        Ok(self.op(out, parts.to_vec(), move || {
            Box::new(move |g: &Tensor<E>| {
                let mut grads = Vec::with_capacity(part_shapes.len());
                let mut offset = 0usize;
                for shape in &part_shapes {
                    let len = shape[axis];
                    let mut data = vec![E::ZERO; shape.iter().product()];
                    for o in 0..outer {
                        let src_base = (o * total_len + offset) * inner;
                        let dst_base = o * len * inner;
                        data[dst_base..dst_base + len * inner]
                            .copy_from_slice(&g.data()[src_base..src_base + len * inner]);
                    }
                    grads.push(Tensor::new(shape.clone(), data).expect("concat grad shape"));
                    offset += len;
                }
                grads
            })
        }))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::Shape(format!(
                "narrow [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, full, inner) = kernels::axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut data = vec![E::ZERO; outer * len * inner];
        for o in 0..outer {
            let src_base = (o * full + start) * inner;
            data[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&src[src_base..src_base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, data)?;
        Ok(self.op(out, vec![a], move || {
            Box::new(move |g: &Tensor<E>| {
                let mut data = vec![E::ZERO; outer * full * inner];
                for o in 0..outer {
                    let dst_base = (o * full + start) * inner;
                    data[dst_base..dst_base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Tensor::new(shape.clone(), data).expect("narrow grad shape")]
            })
        }))
    }

    // ---- normalization & nonlinearity over structured shapes ----

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!(
                "softmax axis {axis} out of bounds for rank {}",
                shape.len()
            )));
        }
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let out = Tensor::new(
            shape,
            kernels::softmax(self.value(a).data(), outer, len, inner),
        )?;
        let saved = out.clone();
        Ok(self.op(out, vec![a], move || {
            Box::new(move |g: &Tensor<E>| {
                let dx = kernels::softmax_backward(g.data(), saved.data(), outer, len, inner);
                vec![Tensor::new(saved.shape().to_vec(), dx).expect("softmax grad shape")]
            })
        }))
    }

    /// Normalizes over the last axis, then applies the affine `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let c = *shape.last().ok_or_else(|| {
            Error::Shape("layer_norm needs at least rank 1".into())
        })?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::Shape(format!(
                    "layer_norm {name} must be [{c}], got {:?}",
                    self.value(v).shape()
                )));
            }
        }
        let xv = self.value(x).clone();
        let gv = self.value(gamma).clone();
        let out = Tensor::new(
            shape.clone(),
            kernels::layer_norm(xv.data(), gv.data(), self.value(beta).data(), c, eps),
        )?;
        Ok(self.op(out, vec![x, gamma, beta], move || {
            Box::new(move |g: &Tensor<E>| {
                let (dx, dgamma, dbeta) =
                    kernels::layer_norm_backward(g.data(), xv.data(), gv.data(), c, eps);
                vec![
                    Tensor::new(shape.clone(), dx).expect("ln dx shape"),
                    Tensor::new(vec![c], dgamma).expect("ln dgamma shape"),
                    Tensor::new(vec![c], dbeta).expect("ln dbeta shape"),
                ]
            })
        }))
    }

    // ---- convolution & resampling ----

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 3 || ws.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d expects x[Cin,H,W] and w[Cout,Cin/g,k,k], got {xs:?} and {ws:?}"
            )));
        }
        let (cin, h, w_in) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        if cin % groups != 0 || cout % groups != 0 {
            return Err(Error::Shape(format!(
                "channel grouping: Cin {cin} / Cout {cout} not divisible by groups {groups}"
            )));
        }
        if ws[1] != cin / groups || ws[3] != k {
            return Err(Error::Shape(format!(
                "conv2d weight {ws:?} incompatible with Cin {cin}, groups {groups}"
            )));
        }
        if k > h + 2 * pad || k > w_in + 2 * pad || stride == 0 {
            return Err(Error::Shape(format!(
                "conv2d kernel {k} exceeds padded input {h}x{w_in} (pad {pad})"
            )));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [cout] {
                return Err(Error::Shape(format!(
                    "conv2d bias must be [{cout}], got {:?}",
                    self.value(b).shape()
                )));
            }
        }
        let geo = ConvGeometry {
            cin,
            cout,
            h,
            w: w_in,
            k,
            stride,
            pad,
            groups,
            out_h: (h + 2 * pad - k) / stride + 1,
            out_w: (w_in + 2 * pad - k) / stride + 1,
        };
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let bv = bias.map(|b| self.value(b).clone());
        let out = Tensor::new(
            vec![cout, geo.out_h, geo.out_w],
            kernels::conv2d(xv.data(), wv.data(), bv.as_ref().map(|b| b.data()), &geo),
        )?;
        let mut parents = vec![x, w];
        if let Some(b) = bias {
            parents.push(b);
        }
        let has_bias = bias.is_some();
        Ok(self.op(out, parents, move || {
            Box::new(move |g: &Tensor<E>| {
                let (dx, dw, db) =
                    kernels::conv2d_backward(g.data(), xv.data(), wv.data(), has_bias, &geo);
                let mut grads = vec![
                    Tensor::new(xv.shape().to_vec(), dx).expect("conv dx shape"),
                    Tensor::new(wv.shape().to_vec(), dw).expect("conv dw shape"),
                ];
                if let Some(db) = db {
                    grads.push(Tensor::new(vec![geo.cout], db).expect("conv db shape"));
                }
                grads
            })
        }))
    }

    pub fn bilinear_upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 {
            return Err(Error::Shape(format!(
                "bilinear_upsample expects [C,H,W], got {xs:?}"
            )));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        if out_h < h || out_w < w {
            return Err(Error::Contract(format!(
                "bilinear_upsample supports upscaling only: {h}x{w} -> {out_h}x{out_w}"
            )));
        }
        let out = Tensor::new(
            vec![c, out_h, out_w],
            kernels::bilinear_upsample(self.value(x).data(), c, h, w, out_h, out_w),
        )?;
        Ok(self.op(out, vec![x], move || {
            Box::new(move |g: &Tensor<E>| {
                let dx = kernels::bilinear_upsample_backward(g.data(), c, h, w, out_h, out_w);
                vec![Tensor::new(vec![c, h, w], dx).expect("upsample grad shape")]
            })
        }))
    }

    // ---- reductions & broadcasts ----

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 {
            return Err(Error::Shape(format!(
                "global_avg_pool expects [C,H,W], got {xs:?}"
            )));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let hw = h * w;
        let data = self.value(x).data();
        let pooled: Vec<E> = (0..c)
            .map(|ch| {
                let mut acc = 0.0f64;
                for v in &data[ch * hw..(ch + 1) * hw] {
                    acc += v.to_f64();
                }
                E::from_f64(acc / hw as f64)
            })
            .collect();
        let out = Tensor::new(vec![c], pooled)?;
        Ok(self.op(out, vec![x], move || {
            Box::new(move |g: &Tensor<E>| {
                let mut data = vec![E::ZERO; c * hw];
                for ch in 0..c {
                    let gv = E::from_f64(g.data()[ch].to_f64() / hw as f64);
                    data[ch * hw..(ch + 1) * hw].iter_mut().for_each(|d| *d = gv);
                }
                vec![Tensor::new(vec![c, h, w], data).expect("pool grad shape")]
            })
        }))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let shape = self.value(x).shape().to_vec();
        let mut acc = 0.0f64;
        for v in self.value(x).data() {
            acc += v.to_f64();
        }
        let out = Tensor::scalar(E::from_f64(acc));
        self.op(out, vec![x], move || {
            Box::new(move |g: &Tensor<E>| {
                let gv = g.data()[0];
                vec![Tensor::new(shape.clone(), vec![gv; n]).expect("sum grad shape")]
            })
        })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let shape = self.value(x).shape().to_vec();
        let mut acc = 0.0f64;
        for v in self.value(x).data() {
            acc += v.to_f64();
        }
        let out = Tensor::scalar(E::from_f64(acc / n as f64));
        self.op(out, vec![x], move || {
            Box::new(move |g: &Tensor<E>| {
                let gv = E::from_f64(g.data()[0].to_f64() / n as f64);
                vec![Tensor::new(shape.clone(), vec![gv; n]).expect("mean grad shape")]
            })
        })
    }

    /// `x[N,C] + b[C]`, broadcast over rows.
    pub fn add_bias_rows(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if xs.len() != 2 || bs != [xs[1]] {
            return Err(Error::Shape(format!(
                "add_bias_rows expects x[N,C] + b[C], got {xs:?} + {bs:?}"
            )));
        }
        let (n, c) = (xs[0], xs[1]);
        let bd = self.value(b).data().to_vec();
        let data: Vec<E> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % c])
            .collect();
        let out = Tensor::new(xs, data)?;
        Ok(self.op(out, vec![x, b], move || {
            Box::new(move |g: &Tensor<E>| {
                let mut db = vec![0.0f64; c];
                for r in 0..n {
                    for j in 0..c {
                        db[j] += g.data()[r * c + j].to_f64();
                    }
                }
                vec![
                    g.clone(),
                    Tensor::new(vec![c], db.into_iter().map(E::from_f64).collect())
                        .expect("bias grad shape"),
                ]
            })
        }))
    }

    /// Per-channel scaling `x[C,H,W] * s[C]` — the excitation step of SE.
    pub fn mul_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ss = self.value(s).shape().to_vec();
        if xs.len() != 3 || ss != [xs[0]] {
            return Err(Error::Shape(format!(
                "mul_channels expects x[C,H,W] * s[C], got {xs:?} * {ss:?}"
            )));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let hw = h * w;
        let xv = self.value(x).clone();
        let sv = self.value(s).clone();
        let mut data = Vec::with_capacity(c * hw);
        for ch in 0..c {
            let sc = sv.data()[ch];
            data.extend(xv.data()[ch * hw..(ch + 1) * hw].iter().map(|&v| v * sc));
        }
        let out = Tensor::new(xs, data)?;
        Ok(self.op(out, vec![x, s], move || {
            Box::new(move |g: &Tensor<E>| {
                let mut dx = Vec::with_capacity(c * hw);
                let mut ds = vec![0.0f64; c];
                for ch in 0..c {
                    let sc = sv.data()[ch];
                    for i in 0..hw {
                        let gv = g.data()[ch * hw + i];
                        dx.push(gv * sc);
                        ds[ch] += gv.to_f64() * xv.data()[ch * hw + i].to_f64();
                    }
                }
                vec![
                    Tensor::new(vec![c, h, w], dx).expect("mul_channels dx shape"),
                    Tensor::new(vec![c], ds.into_iter().map(E::from_f64).collect())
                        .expect("mul_channels ds shape"),
                ]
            })
        }))
    }

    /// Channel-concatenation of `M` same-shape `[C,H,W]` features followed
    /// by a per-pixel linear map `M*C -> C` — one fused op so the
    /// per-modality partial products can be summed before the bias is
    /// added, which makes the result invariant to matched permutations of
    /// (modality order, weight column blocks).
    pub fn linear_fuse(&mut self, features: &[Var], w: Var, b: Var) -> Result<Var> {
        if features.is_empty() {
            return Err(Error::Arity("linear_fuse needs at least one modality".into()));
        }
        let first = self.value(features[0]).shape().to_vec();
        if first.len() != 3 {
            return Err(Error::Shape(format!(
                "linear_fuse expects [C,H,W] features, got {first:?}"
            )));
        }
        for (m, &f) in features.iter().enumerate() {
            if self.value(f).shape() != first.as_slice() {
                return Err(Error::Shape(format!(
                    "linear_fuse modality {m} has shape {:?}, expected {first:?}",
                    self.value(f).shape()
                )));
            }
        }
        let (c, h, w_sp) = (first[0], first[1], first[2]);
        let m = features.len();
        if self.value(w).shape() != [c, m * c] {
            return Err(Error::Shape(format!(
                "linear_fuse weight must be [{c}, {}], got {:?}",
                m * c,
                self.value(w).shape()
            )));
        }
        if self.value(b).shape() != [c] {
            return Err(Error::Shape(format!(
                "linear_fuse bias must be [{c}], got {:?}",
                self.value(b).shape()
            )));
        }
        let hw = h * w_sp;
        let wv = self.value(w).clone();
        let bv = self.value(b).clone();
        let fvals: Vec<Tensor<E>> = features.iter().map(|&f| self.value(f).clone()).collect();
        // Partial products per modality first, bias last: f64 addition is
        // commutative, so swapping two modalities together with their
        // weight blocks reproduces the output bit for bit.
        let mut acc = vec![0.0f64; c * hw];
        for (mi, fv) in fvals.iter().enumerate() {
            let fd = fv.data();
            for co in 0..c {
                let row = &wv.data()[co * m * c + mi * c..co * m * c + (mi + 1) * c];
                let orow = &mut acc[co * hw..(co + 1) * hw];
                for (ci, &wvv) in row.iter().enumerate() {
                    let wf = wvv.to_f64();
                    let frow = &fd[ci * hw..(ci + 1) * hw];
                    for px in 0..hw {
                        orow[px] += wf * frow[px].to_f64();
                    }
                }
            }
        }
        let data: Vec<E> = acc
            .into_iter()
            .enumerate()
            .map(|(i, v)| E::from_f64(v + bv.data()[i / hw].to_f64()))
            .collect();
        let out = Tensor::new(first.clone(), data)?;
        let mut parents = features.to_vec();
        parents.push(w);
        parents.push(b);
        Ok(self.op(out, parents, move || {
            Box::new(move |g: &Tensor<E>| {
                let gd = g.data();
                let mut grads = Vec::with_capacity(m + 2);
                let mut dw = vec![0.0f64; c * m * c];
                for (mi, fv) in fvals.iter().enumerate() {
                    let fd = fv.data();
                    let mut df = vec![0.0f64; c * hw];
                    for co in 0..c {
                        let row = &wv.data()[co * m * c + mi * c..co * m * c + (mi + 1) * c];
                        let grow = &gd[co * hw..(co + 1) * hw];
                        for ci in 0..c {
                            let wf = row[ci].to_f64();
                            let dfrow = &mut df[ci * hw..(ci + 1) * hw];
                            let frow = &fd[ci * hw..(ci + 1) * hw];
                            let mut dwv = 0.0f64;
                            for px in 0..hw {
                                let gv = grow[px].to_f64();
                                dfrow[px] += wf * gv;
                                dwv += gv * frow[px].to_f64();
                            }
                            dw[co * m * c + mi * c + ci] = dwv;
                        }
                    }
                    grads.push(
                        Tensor::new(first.clone(), df.into_iter().map(E::from_f64).collect())
                            .expect("fuse df shape"),
                    );
                }
                let mut db = vec![0.0f64; c];
                for co in 0..c {
                    for px in 0..hw {
                        db[co] += gd[co * hw + px].to_f64();
                    }
                }
                grads.push(
                    Tensor::new(vec![c, m * c], dw.into_iter().map(E::from_f64).collect())
                        .expect("fuse dw shape"),
                );
                grads.push(
                    Tensor::new(vec![c], db.into_iter().map(E::from_f64).collect())
                        .expect("fuse db shape"),
                );
                grads
            })
        }))
    }

    /// Mean over non-ignored pixels of `-log softmax(logits)[label]`.
    /// Ignored pixels contribute nothing to the value or the gradient; an
    /// all-ignored image yields loss 0 with zero gradient.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8], ignore: u8) -> Result<Var> {
        let ls = self.value(logits).shape().to_vec();
        if ls.len() != 3 {
            return Err(Error::Shape(format!(
                "cross_entropy expects logits [K,H,W], got {ls:?}"
            )));
        }
        let (k, h, w) = (ls[0], ls[1], ls[2]);
        if labels.len() != h * w {
            return Err(Error::Shape(format!(
                "label raster has {} entries, logits are {h}x{w}",
                labels.len()
            )));
        }
        for (px, &label) in labels.iter().enumerate() {
            if label != ignore && label as usize >= k {
                return Err(Error::Data(format!(
                    "label {label} out of range for {k} classes at pixel ({}, {})",
                    px / w,
                    px % w
                )));
            }
        }
        let ce = kernels::cross_entropy(self.value(logits).data(), labels, k, ignore);
        let out = Tensor::scalar(E::from_f64(ce.loss));
        let dlogits = ce.dlogits;
        Ok(self.op(out, vec![logits], move || {
            Box::new(move |g: &Tensor<E>| {
                let gv = g.data()[0].to_f64();
                vec![Tensor::new(
                    vec![k, h, w],
                    dlogits
                        .iter()
                        .map(|d| E::from_f64(d.to_f64() * gv))
                        .collect(),
                )
                .expect("ce grad shape")]
            })
        }))
    }
}

fn accumulate<E: Element>(slot: &mut Option<Tensor<E>>, g: Tensor<E>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            let data = acc.data_mut();
            for (a, b) in data.iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
    }
}

fn map<E: Element>(t: &Tensor<E>, f: impl Fn(E) -> E) -> Tensor<E> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
        .expect("map preserves shape")
}

fn zip_same_shape<E: Element>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    op: &str,
    f: impl Fn(E, E) -> E,
) -> Result<Tensor<E>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(zip_unchecked(a, b, f))
}

fn zip_unchecked<E: Element>(a: &Tensor<E>, b: &Tensor<E>, f: impl Fn(E, E) -> E) -> Tensor<E> {
    Tensor::new(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
    .expect("zip preserves shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rel_err;

    fn t(shape: &[usize], vals: &[f64]) -> Tensor<f32> {
        Tensor::from_f64s(shape, vals).unwrap()
    }

    fn assert_close(got: &Tensor<f32>, want: &[f64], tol: f64) {
        assert_eq!(got.numel(), want.len());
        for (g, w) in got.data().iter().zip(want) {
            assert!(
                rel_err(g.to_f64(), *w) <= tol,
                "got {:?}, want {:?}",
                got.data(),
                want
            );
        }
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(t(&[2, 2], &[1., 2., 3., 4.]), false);
        let eye = tape.leaf(t(&[2, 2], &[1., 0., 0., 1.]), false);
        let out = tape.matmul(a, eye).unwrap();
        assert_close(tape.value(out), &[1., 2., 3., 4.], 0.0);

        let b = tape.leaf(t(&[2, 2], &[5., 6., 7., 8.]), false);
        let out = tape.matmul(a, b).unwrap();
        assert_close(tape.value(out), &[19., 22., 43., 50.], 0.0);
    }

    #[test]
    fn matmul_rejects_inner_mismatch_naming_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[4, 2]), false);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn conv2d_identity_kernel_passes_input_through() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]), false);
        let w = tape.leaf(t(&[1, 1, 1, 1], &[1.]), false);
        let out = tape.conv2d(x, w, None, 1, 0, 1).unwrap();
        assert_close(
            tape.value(out),
            &[1., 2., 3., 4., 5., 6., 7., 8., 9.],
            0.0,
        );
    }

    #[test]
    fn conv2d_ones_kernel_on_constant_field() {
        let mut tape = Tape::<f32>::new();
        let c = 2.5f64;
        let x = tape.leaf(Tensor::filled(&[1, 5, 5], c as f32), false);
        let w = tape.leaf(Tensor::filled(&[1, 1, 3, 3], 1.0), false);
        let out = tape.conv2d(x, w, None, 1, 1, 1).unwrap();
        // interior pixels see the full 3x3 window
        let v = tape.value(out);
        for y in 1..4 {
            for x in 1..4 {
                assert!((v.data()[y * 5 + x] as f64 - 9.0 * c).abs() < 1e-5);
            }
        }
        // corners see only 4 taps
        assert!((v.data()[0] as f64 - 4.0 * c).abs() < 1e-5);
    }

    #[test]
    fn conv2d_rejects_bad_grouping() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[3, 4, 4]), false);
        let w = tape.leaf(Tensor::zeros(&[4, 1, 3, 3]), false);
        let err = tape.conv2d(x, w, None, 1, 1, 2).unwrap_err();
        assert!(err.to_string().contains("grouping"), "{err}");
    }

    #[test]
    fn softmax_uniform_shift_and_hand_values() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[3], &[0., 0., 0.]), false);
        let out = tape.softmax(x, 0).unwrap();
        assert_close(tape.value(out), &[1. / 3., 1. / 3., 1. / 3.], 1e-6);

        // exp-normalize of [1,2,3], evaluated by hand calculator
        let x = tape.leaf(t(&[3], &[1., 2., 3.]), false);
        let out = tape.softmax(x, 0).unwrap();
        assert_close(tape.value(out), &[0.09003057, 0.24472847, 0.66524096], 1e-5);

        // shift invariance
        let shifted = tape.leaf(t(&[3], &[1. + 7.5, 2. + 7.5, 3. + 7.5]), false);
        let out2 = tape.softmax(shifted, 0).unwrap();
        assert!(tape.value(out).max_abs_diff(tape.value(out2)).unwrap() < 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f32>::new();
        let vals: Vec<f64> = (0..24).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let x = tape.leaf(t(&[4, 6], &vals), false);
        let out = tape.softmax(x, 1).unwrap();
        for r in 0..4 {
            let s: f64 = tape.value(out).data()[r * 6..(r + 1) * 6]
                .iter()
                .map(|v| *v as f64)
                .sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_edge_cases() {
        let mut tape = Tape::<f32>::new();
        let gamma = tape.leaf(t(&[4], &[1., 1., 1., 1.]), false);
        let beta = tape.leaf(t(&[4], &[0., 0., 0., 0.]), false);
        // constant row: zero variance, eps keeps it finite and output zero
        let x = tape.leaf(Tensor::filled(&[4], 3.0), false);
        let out = tape.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert_close(tape.value(out), &[0., 0., 0., 0.], 1e-6);

        // two-point standardization with eps = 0
        let g2 = tape.leaf(t(&[2], &[1., 1.]), false);
        let b2 = tape.leaf(t(&[2], &[0., 0.]), false);
        let x2 = tape.leaf(t(&[2], &[1., 3.]), false);
        let out = tape.layer_norm(x2, g2, b2, 0.0).unwrap();
        assert_close(tape.value(out), &[-1., 1.], 1e-6);

        // gamma = 0 collapses to beta
        let g0 = tape.leaf(t(&[2], &[0., 0.]), false);
        let bb = tape.leaf(t(&[2], &[0.7, 0.7]), false);
        let out = tape.layer_norm(x2, g0, bb, 1e-5).unwrap();
        assert_close(tape.value(out), &[0.7, 0.7], 1e-6);
    }

    #[test]
    fn gelu_values() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[3], &[0., 10., 1.]), false);
        let out = tape.gelu(x);
        let v = tape.value(out);
        assert_eq!(v.data()[0], 0.0);
        assert!((v.data()[1] as f64 - 10.0).abs() < 1e-6);
        // x * Phi(x) at 1, from the erf form
        assert!((v.data()[2] as f64 - 0.8413447461).abs() < 1e-6);
    }

    #[test]
    fn upsample_constant_shape_and_ramp() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::filled(&[2, 4, 4], 1.25), false);
        let out = tape.bilinear_upsample(x, 8, 8).unwrap();
        assert_eq!(tape.value(out).shape(), &[2, 8, 8]);
        for v in tape.value(out).data() {
            assert!((v - 1.25).abs() < 1e-6);
        }
        // [0,1] widened to 4 samples: centers at (i+0.5)/2 - 0.5 with edge
        // clamping give 0, 0.25, 0.75, 1
        let x = tape.leaf(t(&[1, 1, 2], &[0., 1.]), false);
        let out = tape.bilinear_upsample(x, 1, 4).unwrap();
        assert_close(tape.value(out), &[0.0, 0.25, 0.75, 1.0], 1e-6);

        let err = tape.bilinear_upsample(x, 1, 1).unwrap_err();
        assert!(err.to_string().contains("upscaling only"), "{err}");
    }

    #[test]
    fn cross_entropy_uniform_saturated_and_ignored() {
        let mut tape = Tape::<f32>::new();
        // uniform logits over 4 classes: loss = ln 4 per pixel
        let logits = tape.leaf(Tensor::zeros(&[4, 2, 2]), false);
        let labels = [0u8, 1, 2, 3];
        let loss = tape.cross_entropy(logits, &labels, 255).unwrap();
        assert!((tape.value(loss).data()[0] as f64 - 4.0f64.ln()).abs() < 1e-6);

        // one-hot-correct logits at 100: loss under 1e-6
        let mut hot = Tensor::<f32>::zeros(&[2, 1, 1]);
        hot.data_mut()[1] = 100.0;
        let logits = tape.leaf(hot, false);
        let loss = tape.cross_entropy(logits, &[1u8], 255).unwrap();
        assert!((tape.value(loss).data()[0] as f64) < 1e-6);

        // all-ignored image: zero loss, zero gradient
        let mut tape = Tape::<f32>::new();
        let logits = tape.leaf(t(&[2, 1, 2], &[0.3, -0.2, 0.9, 0.4]), true);
        let loss = tape.cross_entropy(logits, &[255u8, 255], 255).unwrap();
        assert_eq!(tape.value(loss).data()[0], 0.0);
        tape.backward(loss).unwrap();
        for g in tape.grad(logits).unwrap().data() {
            assert_eq!(*g, 0.0);
        }
    }

    #[test]
    fn cross_entropy_matches_per_pixel_oracle() {
        // independent scalar oracle over a random-ish 3x2x2 case
        let vals: [f64; 12] = [
            0.5, -1.2, 0.3, 2.0, -0.7, 0.9, 1.1, -0.4, 0.0, 0.2, -1.5, 0.8,
        ];
        let labels = [2u8, 0, 255, 1];
        let k = 3;
        let pixels = 4;
        let mut want = 0.0f64;
        let mut counted = 0;
        for px in 0..pixels {
            if labels[px] == 255 {
                continue;
            }
            counted += 1;
            let mut denom = 0.0f64;
            for cls in 0..k {
                denom += vals[cls * pixels + px].exp();
            }
            want += denom.ln() - vals[labels[px] as usize * pixels + px];
        }
        want /= counted as f64;

        let mut tape = Tape::<f32>::new();
        let logits = tape.leaf(t(&[3, 2, 2], &vals), false);
        let loss = tape.cross_entropy(logits, &labels, 255).unwrap();
        assert!((tape.value(loss).data()[0] as f64 - want).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label_naming_pixel() {
        let mut tape = Tape::<f32>::new();
        let logits = tape.leaf(Tensor::zeros(&[2, 2, 3]), false);
        let labels = [0u8, 1, 0, 1, 7, 0];
        let err = tape.cross_entropy(logits, &labels, 255).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(1, 1)"), "{msg}");
    }

    #[test]
    fn grad_check_quadratic_and_matmul() {
        let x = t(&[3, 2], &[0.4, -0.8, 1.2, 0.1, -0.5, 0.9]);
        // f(x) = sum(x * x), analytic gradient 2x
        let err = grad_check_quadratic(&x);
        assert!(err <= 1e-4, "quadratic grad err {err}");

        let b = t(&[2, 4], &[0.3, -0.2, 0.8, 0.5, -0.6, 0.1, 0.2, -0.9]);
        let err = crate::tensor::grad_check(
            |tape, leaf| {
                let bv = tape.leaf(b.clone(), false);
                let prod = tape.matmul(leaf, bv)?;
                Ok(tape.sum_all(prod))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err <= 1e-3, "matmul grad err {err}");
    }

    fn grad_check_quadratic(x: &Tensor<f32>) -> f64 {
        crate::tensor::grad_check(
            |tape, leaf| {
                let sq = tape.mul(leaf, leaf)?;
                Ok(tape.sum_all(sq))
            },
            x,
            1e-3,
        )
        .unwrap()
    }

    #[test]
    fn grad_check_rejects_non_scalar() {
        let x = t(&[2], &[1.0, 2.0]);
        let err = crate::tensor::grad_check(|tape, leaf| tape.add(leaf, leaf), &x, 1e-3);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[2], &[1., 2.]), true);
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
    }

    #[test]
    fn narrow_and_concat_roundtrip_with_grads() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[2, 4], &[1., 2., 3., 4., 5., 6., 7., 8.]), true);
        let left = tape.narrow(x, 1, 0, 2).unwrap();
        let right = tape.narrow(x, 1, 2, 2).unwrap();
        let back = tape.concat(1, &[left, right]).unwrap();
        assert!(tape.value(back).bit_eq(tape.value(x)));
        let s = tape.sum_all(back);
        tape.backward(s).unwrap();
        for g in tape.grad(x).unwrap().data() {
            assert_eq!(*g, 1.0);
        }
    }

    #[test]
    fn linear_fuse_identity_and_projection() {
        // M=1, identity weights: output equals input
        let mut tape = Tape::<f32>::new();
        let f0 = tape.leaf(t(&[2, 1, 2], &[1., 2., 3., 4.]), false);
        let eye = tape.leaf(t(&[2, 2], &[1., 0., 0., 1.]), false);
        let zero_b = tape.leaf(Tensor::zeros(&[2]), false);
        let out = tape.linear_fuse(&[f0], eye, zero_b).unwrap();
        assert!(tape.value(out).bit_eq(tape.value(f0)));

        // M=2 with weight block [I | 0]: output equals the first modality
        let f1 = tape.leaf(t(&[2, 1, 2], &[9., 8., 7., 6.]), false);
        let w = tape.leaf(
            t(&[2, 4], &[1., 0., 0., 0., 0., 1., 0., 0.]),
            false,
        );
        let out = tape.linear_fuse(&[f0, f1], w, zero_b).unwrap();
        assert!(tape.value(out).bit_eq(tape.value(f0)));
    }

    #[test]
    fn linear_fuse_names_offending_modality() {
        let mut tape = Tape::<f32>::new();
        let f0 = tape.leaf(Tensor::zeros(&[2, 2, 2]), false);
        let f1 = tape.leaf(Tensor::zeros(&[2, 2, 3]), false);
        let w = tape.leaf(Tensor::zeros(&[2, 4]), false);
        let b = tape.leaf(Tensor::zeros(&[2]), false);
        let err = tape.linear_fuse(&[f0, f1], w, b).unwrap_err();
        assert!(err.to_string().contains("modality 1"), "{err}");
    }
}
