//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Parameters
//! live in a [`ParamStore`] and enter a graph through [`Graph::param`];
//! [`Graph::backward`] returns their gradients keyed by store.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::conv;
use crate::tensor::{Shape, Tensor};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
///
/// Every store carries a process-unique id so that gradients from graphs
/// mixing several stores can be told apart. Cloning yields a new id.
pub struct ParamStore {
    id: u64,
    names: Vec<String>,
    tensors: Vec<Arc<Tensor>>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Arc::new(Tensor::clone(t))).collect(),
        }
    }
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("id", &self.id)
            .field("params", &self.names.len())
            .field("elements", &self.num_elements())
            .finish()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// # Panics
    /// If `name` is already registered.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(Arc::new(value));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t.as_ref()))
    }

    /// Mutable access to a parameter. Copies the tensor if a live graph
    /// still shares it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.tensors[id.0])
    }

    /// Replaces the value of a parameter.
    ///
    /// # Panics
    /// If the shape changes.
    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(
            self.tensors[id.0].shape(),
            value.shape(),
            "shape change for parameter {}",
            self.names[id.0]
        );
        self.tensors[id.0] = Arc::new(value);
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    fn key(&self, id: ParamId) -> (u64, usize) {
        (self.id, id.0)
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Constant,
    Param((u64, usize)),
    Conv { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Relu(Var),
    Add(Var, Var),
    Scale(Var, f32),
    Concat(Var, Var),
    Narrow { x: Var, start: usize },
    Upsample(Var),
    Clamp { x: Var, lo: f32, hi: f32 },
    Reparam { mu: Var, logvar: Var, eps: Tensor },
    /// Scalar-valued function whose input gradients were formed eagerly.
    Scalar(Vec<(Var, Tensor)>),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Parameter gradients produced by [`Graph::backward`].
#[derive(Default, Debug)]
pub struct Gradients {
    by_key: HashMap<(u64, usize), Tensor>,
}

impl Gradients {
    pub fn get(&self, store: &ParamStore, id: ParamId) -> Option<&Tensor> {
        self.by_key.get(&store.key(id))
    }

    /// Removes and returns the gradients of every parameter in `store`, in
    /// store order. Parameters that did not influence the loss yield `None`.
    pub fn take_store(&mut self, store: &ParamStore) -> Vec<Option<Tensor>> {
        (0..store.len()).map(|i| self.by_key.remove(&store.key(ParamId(i)))).collect()
    }

    /// Whether any parameter of `store` received a gradient entry.
    pub fn touches(&self, store: &ParamStore) -> bool {
        (0..store.len()).any(|i| self.by_key.contains_key(&store.key(ParamId(i))))
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Arc::new(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input that no gradient flows into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Same value as `v`, cut off from the tape: nothing upstream of `v`
    /// receives gradient through the returned handle.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = Arc::clone(&self.nodes[v.0].value);
        self.nodes.push(Node { value, op: Op::Constant, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = Arc::clone(&store.tensors[id.0]);
        self.nodes.push(Node { value, op: Op::Param(store.key(id)), requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Parameter used as a constant (no gradient recorded).
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = Arc::clone(&store.tensors[id.0]);
        self.nodes.push(Node { value, op: Op::Constant, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let value = conv::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(value, Op::Conv { x, w, b, stride, pad }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        // `f32::max` would map NaN to 0 and hide upstream failures.
        let value = self.value(x).map(|v| if v < 0.0 { 0.0 } else { v });
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    /// # Panics
    /// On shape mismatch.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, factor), rg)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let value = Tensor::cat_channels(self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Concat(a, b), rg)
    }

    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).narrow_channels(start, len);
        let rg = self.rg(x);
        self.push(value, Op::Narrow { x, start }, rg)
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Var {
        let value = self.value(x).upsample_nearest2x();
        let rg = self.rg(x);
        self.push(value, Op::Upsample(x), rg)
    }

    /// Elementwise clamp; gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Var {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.rg(x);
        self.push(value, Op::Clamp { x, lo, hi }, rg)
    }

    /// Reparameterised Gaussian draw `mu + exp(logvar / 2) * eps`.
    pub fn reparameterize(&mut self, mu: Var, logvar: Var, eps: Tensor) -> Var {
        let (m, lv) = (self.value(mu), self.value(logvar));
        assert_eq!(m.shape(), lv.shape(), "reparameterize: mu/logvar shape mismatch");
        assert_eq!(m.shape(), eps.shape(), "reparameterize: noise shape mismatch");
        let data = m
            .data()
            .iter()
            .zip(lv.data())
            .zip(eps.data())
            .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
            .collect();
        let value = Tensor::from_vec(m.shape(), data);
        let rg = self.rg(mu) || self.rg(logvar);
        self.push(value, Op::Reparam { mu, logvar, eps }, rg)
    }

    /// Records a scalar function of `inputs`. `f` returns the value and the
    /// gradient of the value with respect to every input.
    pub fn scalar_fn(
        &mut self,
        inputs: &[Var],
        f: impl FnOnce(&[&Tensor]) -> (f32, Vec<Tensor>),
    ) -> Var {
        let (value, grads) = {
            let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
            f(&vals)
        };
        assert_eq!(grads.len(), inputs.len(), "scalar_fn must return one gradient per input");
        for (&v, g) in inputs.iter().zip(&grads) {
            assert_eq!(self.shape(v), g.shape(), "scalar_fn gradient shape mismatch");
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        let parents = inputs.iter().copied().zip(grads).collect();
        self.push(Tensor::scalar(value), Op::Scalar(parents), rg)
    }

    /// Gradients of the scalar `loss` with respect to every parameter that
    /// influenced it.
    ///
    /// # Panics
    /// If `loss` is not a single-element tensor.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        let mut out = Gradients::default();
        if !self.rg(loss) {
            return out;
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(key) => match out.by_key.get_mut(key) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.by_key.insert(*key, g);
                    }
                },
                Op::Conv { x, w, b, stride, pad } => {
                    let cg = conv::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &g,
                        *stride,
                        *pad,
                        self.rg(*x),
                    );
                    if let Some(dx) = cg.input {
                        accumulate(&mut grads[x.0], dx);
                    }
                    if self.rg(*w) {
                        accumulate(&mut grads[w.0], cg.weight);
                    }
                    if let Some(b) = b {
                        if self.rg(*b) {
                            let shape = self.shape(*b);
                            accumulate(&mut grads[b.0], cg.bias.reshape(shape));
                        }
                    }
                }
                Op::Relu(x) => {
                    let mut g = g;
                    for (d, &y) in g.data_mut().iter_mut().zip(node.value.data()) {
                        if y <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads[x.0], g);
                }
                Op::Add(a, b) => {
                    if self.rg(*a) && self.rg(*b) {
                        accumulate(&mut grads[a.0], g.clone());
                        accumulate(&mut grads[b.0], g);
                    } else if self.rg(*a) {
                        accumulate(&mut grads[a.0], g);
                    } else {
                        accumulate(&mut grads[b.0], g);
                    }
                }
                Op::Scale(x, f) => {
                    let mut g = g;
                    g.scale_inplace(*f);
                    accumulate(&mut grads[x.0], g);
                }
                Op::Concat(a, b) => {
                    let ca = self.shape(*a).c;
                    let cb = self.shape(*b).c;
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], g.narrow_channels(0, ca));
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads[b.0], g.narrow_channels(ca, cb));
                    }
                }
                Op::Narrow { x, start } => {
                    let xs = self.shape(*x);
                    let len = g.shape().c;
                    let mut full = Tensor::zeros(xs);
                    for n in 0..xs.n {
                        for c in 0..len {
                            full.plane_mut(n, start + c).copy_from_slice(g.plane(n, c));
                        }
                    }
                    accumulate(&mut grads[x.0], full);
                }
                Op::Upsample(x) => accumulate(&mut grads[x.0], g.sum_pool2x()),
                Op::Clamp { x, lo, hi } => {
                    let mut g = g;
                    for (d, &v) in g.data_mut().iter_mut().zip(self.value(*x).data()) {
                        if v < *lo || v > *hi {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads[x.0], g);
                }
                Op::Reparam { mu, logvar, eps } => {
                    if self.rg(*logvar) {
                        let data = g
                            .data()
                            .iter()
                            .zip(self.value(*logvar).data())
                            .zip(eps.data())
                            .map(|((&d, &lv), &e)| d * e * 0.5 * (0.5 * lv).exp())
                            .collect();
                        accumulate(&mut grads[logvar.0], Tensor::from_vec(g.shape(), data));
                    }
                    if self.rg(*mu) {
                        accumulate(&mut grads[mu.0], g);
                    }
                }
                Op::Scalar(parents) => {
                    let up = g.item();
                    for (v, local) in parents {
                        if self.rg(*v) {
                            accumulate(&mut grads[v.0], local.map(|d| d * up));
                        }
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo(shape: impl Into<Shape>, seed: u64) -> Tensor {
        let shape = shape.into();
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..shape.numel())
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) as f32 / (1u64 << 31) as f32) * 2.0 - 1.0
            })
            .collect();
        Tensor::from_vec(shape, data)
    }

    /// Weighted sum of all elements, so that every output element matters.
    fn probe(g: &mut Graph, v: Var) -> Var {
        let weights = pseudo(g.shape(v), 99);
        g.scalar_fn(&[v], move |vals| {
            let s: f32 = vals[0].data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
            (s, vec![weights])
        })
    }

    /// Central finite differences in the parameter `id`, compared with the
    /// tape gradient, for the network built by `build`.
    fn check_gradient(store: &mut ParamStore, id: ParamId, build: &dyn Fn(&mut Graph, &ParamStore) -> Var) {
        let mut g = Graph::new();
        let out = build(&mut g, store);
        let loss = probe(&mut g, out);
        let grads = g.backward(loss);
        let analytic = grads.get(store, id).expect("gradient present").clone();
        let h = 2e-3f32;
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            let eval = |store: &mut ParamStore, v: f32| {
                store.get_mut(id).data_mut()[i] = v;
                let mut g = Graph::new();
                let out = build(&mut g, store);
                let l = probe(&mut g, out);
                f64::from(g.value(l).item())
            };
            let fp = eval(store, orig + h);
            let fm = eval(store, orig - h);
            store.get_mut(id).data_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * f64::from(h));
            let an = f64::from(analytic.data()[i]);
            assert!(
                (fd - an).abs() <= 2e-2 * fd.abs().max(an.abs()).max(1e-1),
                "param {} elem {i}: fd {fd} vs tape {an}",
                store.name(id)
            );
        }
    }

    #[test]
    fn conv_relu_upsample_concat_chain_gradients() {
        let mut store = ParamStore::new();
        let x0 = store.add("x", pseudo([2, 2, 4, 4], 1));
        let w1 = store.add("w1", pseudo([3, 2, 3, 3], 2));
        let b1 = store.add("b1", pseudo([1, 3, 1, 1], 3));
        let w2 = store.add("w2", pseudo([2, 5, 3, 3], 4));
        let build = move |g: &mut Graph, s: &ParamStore| {
            let x = g.param(s, x0);
            let w = g.param(s, w1);
            let b = g.param(s, b1);
            let h = g.conv2d(x, w, Some(b), 2, 1);
            let h = g.relu(h);
            let h = g.upsample_nearest2x(h);
            let h = g.concat_channels(h, x);
            let w = g.param(s, w2);
            let h = g.conv2d(h, w, None, 1, 1);
            let a = g.narrow_channels(h, 1, 1);
            let c = g.clamp(a, -0.5, 0.5);
            let s2 = g.scale(c, 3.0);
            g.add(s2, a)
        };
        for id in [x0, w1, b1, w2] {
            check_gradient(&mut store, id, &build);
        }
    }

    #[test]
    fn reparameterize_gradients() {
        let mut store = ParamStore::new();
        let mu = store.add("mu", pseudo([1, 2, 3, 3], 5));
        let lv = store.add("lv", pseudo([1, 2, 3, 3], 6));
        let eps = pseudo([1, 2, 3, 3], 7);
        let build = move |g: &mut Graph, s: &ParamStore| {
            let m = g.param(s, mu);
            let l = g.param(s, lv);
            g.reparameterize(m, l, eps.clone())
        };
        check_gradient(&mut store, mu, &build);
        check_gradient(&mut store, lv, &build);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", pseudo([1, 1, 3, 3], 1));
        let mut g = Graph::new();
        let x = g.constant(pseudo([1, 1, 4, 4], 2));
        let wv = g.param(&store, w);
        let y = g.conv2d(x, wv, None, 1, 1);
        let d = g.detach(y);
        let loss = probe(&mut g, d);
        let grads = g.backward(loss);
        assert!(!grads.touches(&store));
    }

    #[test]
    fn shared_node_gradients_accumulate() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::from_vec([1, 1, 1, 2], vec![1.5, -2.0]));
        let mut g = Graph::new();
        let v = g.param(&store, p);
        let s = g.add(v, v);
        let loss = g.scalar_fn(&[s], |vals| (vals[0].data().iter().sum(), vec![Tensor::full(vals[0].shape(), 1.0)]));
        let grads = g.backward(loss);
        assert_eq!(grads.get(&store, p).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn clone_gets_fresh_identity() {
        let mut a = ParamStore::new();
        let id = a.add("w", Tensor::scalar(1.0));
        let b = a.clone();
        let mut g = Graph::new();
        let v = g.param(&a, id);
        let loss = g.scale(v, 2.0);
        let grads = g.backward(loss);
        assert!(grads.touches(&a));
        assert!(!grads.touches(&b));
    }
}
