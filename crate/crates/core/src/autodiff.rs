//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only tape: every operation pushes a node holding
//! its forward value and the information its backward rule needs. Nodes are
//! created in execution order, so the tape is already topologically sorted
//! and [`Graph::backward`] is a single reverse sweep.
//!
//! Trainable parameters live outside the tape in a [`ParamStore`]. A forward
//! pass copies them in with [`Graph::param`]; after the sweep,
//! [`Gradients::accumulate_into`] adds their gradients back into the store.
//! Gradients are summed into whatever the store already holds; call
//! [`ParamStore::zero_grad`] between optimizer steps.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::nn::{self, Padding};
use crate::tensor::Tensor;

static NEXT_GRAPH_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node of a specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u32,
    index: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, mut tensor: Tensor) -> ParamId {
        tensor.set_tracks_grad(true);
        self.params.push(Param {
            name: name.into(),
            tensor,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        padding: Padding,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    Upsample(Var),
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Softmax(Var),
    Sigmoid(Var),
    SpatialMean(Var),
    Nll {
        probs: Var,
        labels: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Per-node gradients produced by one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    graph: u32,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` is reachable and
    /// tracks gradients.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.index()).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of every parameter leaf into `store`.
    pub fn accumulate_into(&self, graph: &Graph, store: &mut ParamStore) -> Result<()> {
        for (node, grad) in graph.nodes.iter().zip(&self.grads) {
            if let (Op::Leaf { param: Some(id) }, Some(grad)) = (&node.op, grad) {
                store.get_mut(*id).accumulate_grad(grad)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct Graph {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if v.graph != self.id {
            return Err(Error::UnknownNode(v.index()));
        }
        self.nodes
            .get(v.index())
            .ok_or(Error::UnknownNode(v.index()))
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.node(v)?.value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.node(v)?.value.shape())
    }

    pub(crate) fn needs_grad_of(&self, v: Var) -> bool {
        self.nodes[v.index()].needs_grad
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(
            value.data().iter().all(|x| x.is_finite()),
            "non-finite value produced by {op:?}",
            op = std::mem::discriminant(&op)
        );
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            graph: self.id,
            index: (self.nodes.len() - 1) as u32,
        }
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param: None }, false)
    }

    /// Free leaf whose gradient is tracked but not tied to a parameter store.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param: None }, true)
    }

    /// Copies a stored parameter onto the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let mut value = store.get(id).clone();
        value.set_tracks_grad(false);
        self.push(value, Op::Leaf { param: Some(id) }, true)
    }

    fn binary_shapes(&self, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a)?, self.shape(b)?);
        if sa != sb {
            return Err(Error::ShapeMismatch(sa.to_vec(), sb.to_vec()));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.binary_shapes(a, b)?;
        let (ta, tb) = (self.value(a)?, self.value(b)?);
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub(crate) fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let t = self.value(a)?;
        Ok(Tensor::from_parts(
            t.shape().to_vec(),
            t.data().iter().map(|&x| f(x)).collect(),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map(a, b, |x, y| x + y)?;
        let ng = self.needs_grad_of(a) || self.needs_grad_of(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map(a, b, |x, y| x - y)?;
        let ng = self.needs_grad_of(a) || self.needs_grad_of(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map(a, b, |x, y| x * y)?;
        let ng = self.needs_grad_of(a) || self.needs_grad_of(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let v = self.map(a, |x| k * x)?;
        let ng = self.needs_grad_of(a);
        Ok(self.push(v, Op::Scale(a, k), ng))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, |x| x * x)?;
        let ng = self.needs_grad_of(a);
        Ok(self.push(v, Op::Square(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a)?.data().iter().sum();
        let ng = self.needs_grad_of(a);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), ng))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a)?;
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        let ng = self.needs_grad_of(a);
        Ok(self.push(Tensor::scalar(m), Op::Mean(a), ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.node(loss)?;
        if !root.value.is_scalar() {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.index()] = Some(vec![1.0]);

        for idx in (0..=loss.index()).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Ok(Gradients {
            graph: self.id,
            grads,
        })
    }

    /// Backward sweep followed by accumulation into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        grads.accumulate_into(self, store)?;
        Ok(grads)
    }

    fn backward_node(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.index()].value.data();
        let mut send = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.nodes[v.index()].needs_grad {
                let g = grads[v.index()]
                    .get_or_insert_with(|| vec![0.0; self.nodes[v.index()].value.len()]);
                f(g);
            }
        };
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                send(*a, &mut |g| axpy(g, 1.0, gout));
                send(*b, &mut |g| axpy(g, 1.0, gout));
            }
            Op::Sub(a, b) => {
                send(*a, &mut |g| axpy(g, 1.0, gout));
                send(*b, &mut |g| axpy(g, -1.0, gout));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                send(*a, &mut |g| {
                    for ((g, d), y) in g.iter_mut().zip(gout).zip(vb) {
                        *g += d * y;
                    }
                });
                send(*b, &mut |g| {
                    for ((g, d), x) in g.iter_mut().zip(gout).zip(va) {
                        *g += d * x;
                    }
                });
            }
            Op::Scale(a, k) => send(*a, &mut |g| axpy(g, *k, gout)),
            Op::Square(a) => {
                let va = val(*a);
                send(*a, &mut |g| {
                    for ((g, d), x) in g.iter_mut().zip(gout).zip(va) {
                        *g += 2.0 * x * d;
                    }
                });
            }
            Op::Sum(a) => send(*a, &mut |g| g.iter_mut().for_each(|g| *g += gout[0])),
            Op::Mean(a) => send(*a, &mut |g| {
                let k = gout[0] / g.len() as f64;
                g.iter_mut().for_each(|g| *g += k);
            }),
            Op::Conv {
                input,
                weight,
                bias,
                padding,
            } => {
                let xs = self.nodes[input.index()].value.shape();
                let ws = self.nodes[weight.index()].value.shape();
                let geom = nn::ConvGeom::new(xs, ws, *padding);
                send(*input, &mut |g| {
                    nn::conv_backward_input(&geom, gout, val(*weight), g)
                });
                send(*weight, &mut |g| {
                    nn::conv_backward_weight(&geom, gout, val(*input), g)
                });
                if let Some(b) = bias {
                    send(*b, &mut |g| nn::conv_backward_bias(&geom, gout, g));
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let shape = self.nodes[input.index()].value.shape();
                let (dgamma, dbeta) = nn::bn_param_grads(shape, gout, xhat);
                send(*gamma, &mut |g| axpy(g, 1.0, &dgamma));
                send(*beta, &mut |g| axpy(g, 1.0, &dbeta));
                send(*input, &mut |g| {
                    nn::bn_backward_input(
                        shape,
                        gout,
                        xhat,
                        inv_std,
                        val(*gamma),
                        &dgamma,
                        &dbeta,
                        *train,
                        g,
                    )
                });
            }
            Op::Relu(a) => {
                let va = val(*a);
                send(*a, &mut |g| {
                    for ((g, d), x) in g.iter_mut().zip(gout).zip(va) {
                        if *x > 0.0 {
                            *g += d;
                        }
                    }
                });
            }
            Op::MaxPool { input, argmax } => send(*input, &mut |g| {
                for (d, &i) in gout.iter().zip(argmax) {
                    g[i as usize] += d;
                }
            }),
            Op::Upsample(a) => {
                let shape = self.nodes[a.index()].value.shape();
                send(*a, &mut |g| nn::upsample_backward(shape, gout, g));
            }
            Op::GlobalAvgPool(a) => {
                let shape = self.nodes[a.index()].value.shape();
                let plane = shape[2] * shape[3];
                send(*a, &mut |g| {
                    for (gp, d) in g.chunks_exact_mut(plane).zip(gout) {
                        let k = d / plane as f64;
                        gp.iter_mut().for_each(|g| *g += k);
                    }
                });
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let xs = self.nodes[input.index()].value.shape();
                let (batch, fin) = (xs[0], xs[1]);
                let fout = gout.len() / batch;
                let (x, w) = (val(*input), val(*weight));
                send(*input, &mut |g| {
                    for b in 0..batch {
                        for o in 0..fout {
                            let d = gout[b * fout + o];
                            axpy(&mut g[b * fin..(b + 1) * fin], d, &w[o * fin..(o + 1) * fin]);
                        }
                    }
                });
                send(*weight, &mut |g| {
                    for b in 0..batch {
                        for o in 0..fout {
                            let d = gout[b * fout + o];
                            axpy(&mut g[o * fin..(o + 1) * fin], d, &x[b * fin..(b + 1) * fin]);
                        }
                    }
                });
                send(*bias, &mut |g| {
                    for row in gout.chunks_exact(fout) {
                        axpy(g, 1.0, row);
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let k = *node.value.shape().last().unwrap();
                send(*a, &mut |g| {
                    for ((gr, yr), dr) in g
                        .chunks_exact_mut(k)
                        .zip(y.chunks_exact(k))
                        .zip(gout.chunks_exact(k))
                    {
                        let dot: f64 = yr.iter().zip(dr).map(|(y, d)| y * d).sum();
                        for ((g, y), d) in gr.iter_mut().zip(yr).zip(dr) {
                            *g += y * (d - dot);
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                send(*a, &mut |g| {
                    for ((g, y), d) in g.iter_mut().zip(y).zip(gout) {
                        *g += d * y * (1.0 - y);
                    }
                });
            }
            Op::SpatialMean(a) => {
                let shape = self.nodes[a.index()].value.shape();
                let plane = shape[1] * shape[2] * shape[3];
                send(*a, &mut |g| {
                    for (gp, d) in g.chunks_exact_mut(plane).zip(gout) {
                        let k = d / plane as f64;
                        gp.iter_mut().for_each(|g| *g += k);
                    }
                });
            }
            Op::Nll { probs, labels } => {
                let p = val(*probs);
                let k = p.len() / labels.len();
                let scale = gout[0] / labels.len() as f64;
                send(*probs, &mut |g| {
                    for (b, &l) in labels.iter().enumerate() {
                        let pi = p[b * k + l];
                        if pi > nn::PROB_FLOOR {
                            g[b * k + l] -= scale / pi;
                        }
                    }
                });
            }
        }
    }
}

#[inline]
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

/// Largest relative disagreement between analytic and central-difference
/// gradients of a scalar function of one tensor.
///
/// The relative error of a coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
pub fn finite_diff_check<F>(f: F, input: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let id = store.push("input", input.clone());
    finite_diff_check_params(|g, s| {
        let x = g.param(s, id);
        f(g, x)
    }, &store, step)
}

/// Finite-difference check over every parameter in `store`.
///
/// `f` must rebuild the whole computation from the store on each call.
pub fn finite_diff_check_params<F>(f: F, store: &ParamStore, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    finite_diff_check_subset(f, store, &ids, step)
}

/// Finite-difference check restricted to the listed parameters.
pub fn finite_diff_check_subset<F>(
    f: F,
    store: &ParamStore,
    ids: &[ParamId],
    step: f64,
) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if step.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::Invalid(format!("finite-difference step {step} must be > 0")));
    }
    let mut work = store.clone();
    work.zero_grad();
    let mut g = Graph::new();
    let out = f(&mut g, &work)?;
    g.backward_into(out, &mut work)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        let v = g.value(out)?;
        if !v.is_scalar() {
            return Err(Error::NotScalar(v.shape().to_vec()));
        }
        Ok(v.data()[0])
    };

    let mut worst = 0.0f64;
    let mut probe = store.clone();
    for &id in ids {
        let analytic = work.get(id).grad().unwrap().to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let orig = probe.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + step;
            let plus = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - step;
            let minus = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let denom = a.abs().max(numeric.abs()).max(1e-12);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::new();
        let x = g.variable(t(&[1], &[3.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[6.0]);
    }

    #[test]
    fn mean_gradient() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let loss = g.mean(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn elementwise_values() {
        let mut g = Graph::new();
        let a = g.input(t(&[2], &[1.0, 2.0]));
        let b = g.input(t(&[2], &[3.0, 4.0]));
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s).unwrap().data(), &[4.0, 6.0]);
        let z = g.scale(a, 0.0).unwrap();
        assert_eq!(g.value(z).unwrap().data(), &[0.0, 0.0]);
        let d = g.sub(b, a).unwrap();
        assert_eq!(g.value(d).unwrap().data(), &[2.0, 2.0]);
        let sq = g.square(b).unwrap();
        assert_eq!(g.value(sq).unwrap().data(), &[9.0, 16.0]);
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.input(t(&[2], &[1.0, 2.0]));
        let b = g.input(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch(..))));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        let y = g.square(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NotScalar(_))));
    }

    #[test]
    fn backward_rejects_foreign_node() {
        let mut g1 = Graph::new();
        let g2 = Graph::new();
        let x = g1.variable(Tensor::scalar(1.0));
        let y = g1.square(x).unwrap();
        assert!(matches!(g2.backward(y), Err(Error::UnknownNode(_))));
    }

    #[test]
    fn multiple_paths_accumulate() {
        // loss = sum(x*x) + sum(3x) has grad 2x + 3; each path alone gives
        // 2x and 3 respectively.
        let x0 = t(&[3], &[1.0, -2.0, 0.5]);
        let mut g = Graph::new();
        let x = g.variable(x0.clone());
        let sq = g.mul(x, x).unwrap();
        let lin = g.scale(x, 3.0).unwrap();
        let both = g.add(sq, lin).unwrap();
        let loss = g.sum(both).unwrap();
        let grads = g.backward(loss).unwrap();
        let expect: Vec<f64> = x0.data().iter().map(|v| 2.0 * v + 3.0).collect();
        assert_eq!(grads.wrt(x).unwrap(), expect.as_slice());
    }

    #[test]
    fn store_gradients_accumulate_across_backward_calls() {
        let mut store = ParamStore::new();
        let id = store.push("w", t(&[2], &[1.0, 2.0]));
        for _ in 0..2 {
            let mut g = Graph::new();
            let w = g.param(&store, id);
            let loss = g.sum(w).unwrap();
            g.backward_into(loss, &mut store).unwrap();
        }
        assert_eq!(store.get(id).grad().unwrap(), &[2.0, 2.0]);
        store.zero_grad();
        assert_eq!(store.get(id).grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn finite_diff_of_sum_is_exact() {
        let x = Tensor::new(&[5], Init::Normal { std: 1.0, seed: 1 }).unwrap();
        let err = finite_diff_check(|g, x| g.sum(x), &x, 1e-4).unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn finite_diff_of_sum_of_squares() {
        let x = t(&[2], &[1.0, 2.0]);
        let err = finite_diff_check(
            |g, x| {
                let s = g.square(x)?;
                g.sum(s)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn finite_diff_rejects_vector_output() {
        let x = t(&[2], &[1.0, 2.0]);
        let err = finite_diff_check(|g, x| g.square(x), &x, 1e-4).unwrap_err();
        assert!(matches!(err, Error::NotScalar(_)));
    }

    #[test]
    fn finite_diff_rejects_bad_step() {
        let x = t(&[2], &[1.0, 2.0]);
        assert!(finite_diff_check(|g, x| g.sum(x), &x, 0.0).is_err());
    }

    #[test]
    fn composite_three_layer_gradient() {
        // sum(((a*x + x) * b)^2) * 0.5 with random a, b
        let x = Tensor::new(&[12], Init::Normal { std: 1.0, seed: 11 }).unwrap();
        let a = Tensor::new(&[12], Init::Normal { std: 1.0, seed: 12 }).unwrap();
        let b = Tensor::new(&[12], Init::Normal { std: 1.0, seed: 13 }).unwrap();
        let err = finite_diff_check(
            |g, x| {
                let a = g.input(a.clone());
                let b = g.input(b.clone());
                let h1 = g.mul(a, x)?;
                let h1 = g.add(h1, x)?;
                let h2 = g.mul(h1, b)?;
                let h3 = g.square(h2)?;
                let s = g.sum(h3)?;
                g.scale(s, 0.5)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn identical_inputs_give_identical_buffers() {
        let run = || {
            let mut store = ParamStore::new();
            let id = store.push(
                "w",
                Tensor::new(&[8], Init::Normal { std: 1.0, seed: 5 }).unwrap(),
            );
            let mut g = Graph::new();
            let w = g.param(&store, id);
            let s = g.square(w).unwrap();
            let loss = g.mean(s).unwrap();
            g.backward_into(loss, &mut store).unwrap();
            store.get(id).clone()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.data(), b.data());
        assert_eq!(a.grad(), b.grad());
    }
}
