//! Finite-difference self-check of every differentiable operation and of an
//! end-to-end segmenter.
//!
//! Each layer check contracts the layer output with a fixed random tensor
//! before summing, so every input coordinate gets a generic, nonzero
//! gradient.

use serde::Serialize;

use crate::autodiff::{finite_diff_check_params, Graph, ParamId, ParamStore, Var};
use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::nn::{Mode, Padding, BN_EPS};
use crate::tensor::{Init, Tensor};
use crate::train::weak_label_loss;

pub const LAYER_TOLERANCE: f64 = 1e-5;
pub const END_TO_END_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn normal(shape: &[usize], seed: u64) -> Tensor {
    Tensor::new(shape, Init::Normal { std: 1.0, seed }).expect("nonzero dims")
}

/// Normal samples pushed at least `gap` away from zero, keeping finite
/// differences clear of ReLU's kink.
fn away_from_zero(shape: &[usize], seed: u64, gap: f64) -> Tensor {
    let mut t = normal(shape, seed);
    for v in t.data_mut() {
        *v = v.signum() * (gap + v.abs());
    }
    t
}

/// `sum(y * mix)` for a fixed random `mix` shaped like `y`.
fn contract(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y)?.to_vec();
    let mix = g.input(normal(&shape, seed));
    let p = g.mul(y, mix)?;
    g.sum(p)
}

fn check<F>(name: &str, store: &ParamStore, tolerance: f64, f: F) -> Result<CheckResult>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_error: finite_diff_check_params(f, store, STEP)?,
        tolerance,
    })
}

fn store_of(tensors: Vec<(&str, Tensor)>) -> (ParamStore, Vec<ParamId>) {
    let mut store = ParamStore::new();
    let ids = tensors.into_iter().map(|(n, t)| store.push(n, t)).collect();
    (store, ids)
}

/// Runs every layer check at `tolerance`.
pub fn layer_checks(tolerance: f64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();

    let (s, id) = store_of(vec![("a", normal(&[2, 3], 1)), ("b", normal(&[2, 3], 2))]);
    out.push(check("elementwise", &s, tolerance, |g, s| {
        let a = g.param(s, id[0]);
        let b = g.param(s, id[1]);
        let sum = g.add(a, b)?;
        let diff = g.sub(sum, b)?;
        let prod = g.mul(diff, b)?;
        let sc = g.scale(prod, -1.7)?;
        let sq = g.square(sc)?;
        let m = g.mean(sq)?;
        let t = g.sum(sq)?;
        g.add(m, t)
    })?);

    for padding in [Padding::SameZero, Padding::Valid] {
        let (s, id) = store_of(vec![
            ("x", normal(&[2, 2, 5, 4], 3)),
            ("w", normal(&[3, 2, 3, 3], 4)),
            ("b", normal(&[3], 5)),
        ]);
        let name = match padding {
            Padding::SameZero => "conv3x3 same",
            Padding::Valid => "conv3x3 valid",
        };
        out.push(check(name, &s, tolerance, |g, s| {
            let x = g.param(s, id[0]);
            let w = g.param(s, id[1]);
            let b = g.param(s, id[2]);
            let y = g.conv3x3(x, w, Some(b), padding)?;
            contract(g, y, 6)
        })?);
    }

    for train in [true, false] {
        let (s, id) = store_of(vec![
            ("x", normal(&[2, 2, 3, 3], 7)),
            ("gamma", Tensor::from_vec(&[2], vec![1.3, 0.7])?),
            ("beta", Tensor::from_vec(&[2], vec![0.1, -0.4])?),
        ]);
        let name = if train { "batch norm train" } else { "batch norm eval" };
        out.push(check(name, &s, tolerance, |g, s| {
            let x = g.param(s, id[0]);
            let gm = g.param(s, id[1]);
            let bt = g.param(s, id[2]);
            let y = if train {
                g.batch_norm_train(x, gm, bt, BN_EPS)?.0
            } else {
                g.batch_norm_eval(x, gm, bt, &[0.3, -0.2], &[1.5, 0.8], BN_EPS)?
            };
            contract(g, y, 8)
        })?);
    }

    let (s, id) = store_of(vec![("x", away_from_zero(&[2, 2, 3, 3], 9, 0.05))]);
    out.push(check("relu", &s, tolerance, |g, s| {
        let x = g.param(s, id[0]);
        let y = g.relu(x)?;
        contract(g, y, 10)
    })?);

    let (s, id) = store_of(vec![("x", normal(&[2, 2, 4, 6], 11))]);
    out.push(check("maxpool 2x2", &s, tolerance, |g, s| {
        let x = g.param(s, id[0]);
        let y = g.maxpool2x2(x)?;
        contract(g, y, 12)
    })?);

    let (s, id) = store_of(vec![("x", normal(&[2, 2, 3, 4], 13))]);
    out.push(check("bilinear upsample x2", &s, tolerance, |g, s| {
        let x = g.param(s, id[0]);
        let y = g.bilinear_upsample_x2(x)?;
        contract(g, y, 14)
    })?);

    let (s, id) = store_of(vec![("x", normal(&[3, 2, 3, 3], 15))]);
    out.push(check("global average pool", &s, tolerance, |g, s| {
        let x = g.param(s, id[0]);
        let y = g.global_avg_pool(x)?;
        contract(g, y, 16)
    })?);

    let (s, id) = store_of(vec![
        ("x", normal(&[3, 4], 17)),
        ("w", normal(&[5, 4], 18)),
        ("b", normal(&[5], 19)),
    ]);
    out.push(check("linear", &s, tolerance, |g, s| {
        let x = g.param(s, id[0]);
        let w = g.param(s, id[1]);
        let b = g.param(s, id[2]);
        let y = g.linear(x, w, b)?;
        contract(g, y, 20)
    })?);

    let (s, id) = store_of(vec![("x", normal(&[3, 5], 21))]);
    out.push(check("softmax", &s, tolerance, |g, s| {
        let x = g.param(s, id[0]);
        let y = g.softmax(x)?;
        contract(g, y, 22)
    })?);
    out.push(check("softmax + nll", &s, tolerance, |g, s| {
        let x = g.param(s, id[0]);
        let y = g.softmax(x)?;
        g.nll(y, &[4, 0, 2])
    })?);
    let (s2, id2) = store_of(vec![
        ("x", normal(&[3, 4], 23)),
        ("w", normal(&[5, 4], 24)),
        ("b", normal(&[5], 25)),
    ]);
    out.push(check("linear softmax + nll", &s2, tolerance, |g, s| {
        let x = g.param(s, id2[0]);
        let w = g.param(s, id2[1]);
        let b = g.param(s, id2[2]);
        let y = g.linear_softmax(x, w, b)?;
        g.nll(y, &[1, 3, 3])
    })?);

    let (s, id) = store_of(vec![("x", normal(&[2, 1, 3, 3], 26))]);
    out.push(check("sigmoid", &s, tolerance, |g, s| {
        let x = g.param(s, id[0]);
        let y = g.sigmoid(x)?;
        contract(g, y, 27)
    })?);
    out.push(check("spatial mean + weak-label loss", &s, tolerance, |g, s| {
        let x = g.param(s, id[0]);
        let y = g.sigmoid(x)?;
        weak_label_loss(g, y, &[0.2, 0.9])
    })?);

    let (s, id) = store_of(vec![
        ("x", normal(&[2, 2, 4, 4], 28)),
        ("w0", normal(&[2, 2, 3, 3], 29)),
        ("g0", Tensor::from_vec(&[2], vec![1.1, 0.9])?),
        ("b0", Tensor::from_vec(&[2], vec![0.05, -0.1])?),
        ("w1", normal(&[2, 2, 3, 3], 30)),
        ("g1", Tensor::from_vec(&[2], vec![0.8, 1.2])?),
        ("b1", Tensor::from_vec(&[2], vec![0.2, 0.0])?),
    ]);
    out.push(check("residual block", &s, tolerance, |g, s| {
        let v: Vec<Var> = id.iter().map(|&i| g.param(s, i)).collect();
        let y = crate::nn::residual_block(g, v[0], &[(v[1], v[2], v[3]), (v[4], v[5], v[6])])?;
        contract(g, y, 31)
    })?);

    Ok(out)
}

/// Segmenter with `d = 1` on a `16 x 16` batch of two, trained-mode forward
/// pass, weak-label loss; every parameter is perturbed.
pub fn end_to_end_check(tolerance: f64) -> Result<CheckResult> {
    let config = ModelConfig {
        c: 4,
        d: 1,
        n: 1,
        blocks: 1,
        num_classes: 2,
        input_size: (16, 16),
    };
    let model = Model::segmenter(config, 3)?;
    let images = Tensor::new(&[2, 1, 16, 16], Init::Uniform { low: 0.0, high: 1.0, seed: 32 })?;
    check("end-to-end segmenter", model.params(), tolerance, |g, s| {
        let x = g.input(images.clone());
        let y = model.forward_with(g, s, x, Mode::Train, &mut Vec::new())?;
        weak_label_loss(g, y, &[0.3, 0.7])
    })
}

/// Layer checks at `tolerance` plus the end-to-end check at
/// `10 * tolerance`.
pub fn run_suite(tolerance: f64) -> Result<Vec<CheckResult>> {
    let mut out = layer_checks(tolerance)?;
    out.push(end_to_end_check(tolerance * 10.0)?);
    Ok(out)
}
