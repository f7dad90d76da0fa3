//! Layer vocabulary: 3x3 convolution, batch norm, ReLU, 2x2 max pooling,
//! x2 bilinear upsampling, global average pooling, linear, softmax, sigmoid
//! and residual blocks.
//!
//! Feature maps are `[batch, channels, height, width]` row-major tensors.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::autodiff::{axpy, Graph, Op, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::{Init, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Probabilities below this are treated as this value by the NLL loss.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Padding {
    /// One pixel of zero padding; output keeps the input's spatial size.
    SameZero,
    /// No padding; each spatial dimension shrinks by 2.
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn dims4(g: &Graph, x: Var) -> Result<[usize; 4]> {
    let s = g.shape(x)?;
    match *s {
        [b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(Error::Invalid(format!(
            "expected a [batch, channels, height, width] feature map, got {s:?}"
        ))),
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    off: usize,
}

impl ConvGeom {
    pub(crate) fn new(xs: &[usize], ws: &[usize], padding: Padding) -> Self {
        let off = match padding {
            Padding::SameZero => 1,
            Padding::Valid => 0,
        };
        let (h, w) = (xs[2], xs[3]);
        Self {
            batch: xs[0],
            cin: xs[1],
            cout: ws[0],
            h,
            w,
            ho: h + 2 * off - 2,
            wo: w + 2 * off - 2,
            off,
        }
    }

    // Padded plane is (ho + 2) x (wo + 2).
    fn pw(&self) -> usize {
        self.wo + 2
    }

    fn padded_plane(&self) -> usize {
        (self.ho + 2) * (self.wo + 2)
    }

    fn pad<'a>(&self, x: &'a [f64]) -> Cow<'a, [f64]> {
        if self.off == 0 {
            return Cow::Borrowed(x);
        }
        let (h, w, pw) = (self.h, self.w, self.pw());
        let pp = self.padded_plane();
        let mut out = vec![0.0; self.batch * self.cin * pp];
        for (src, dst) in x.chunks_exact(h * w).zip(out.chunks_exact_mut(pp)) {
            for y in 0..h {
                dst[(y + 1) * pw + 1..(y + 1) * pw + 1 + w].copy_from_slice(&src[y * w..(y + 1) * w]);
            }
        }
        Cow::Owned(out)
    }
}

fn conv_forward(geom: &ConvGeom, x: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let g = geom;
    let (ho, wo, pw, pp) = (g.ho, g.wo, g.pw(), g.padded_plane());
    let padded = g.pad(x);
    let mut out = vec![0.0; g.batch * g.cout * ho * wo];
    for b in 0..g.batch {
        for o in 0..g.cout {
            let plane = &mut out[(b * g.cout + o) * ho * wo..][..ho * wo];
            if let Some(bias) = bias {
                plane.fill(bias[o]);
            }
            for i in 0..g.cin {
                let src = &padded[(b * g.cin + i) * pp..][..pp];
                let k: &[f64; 9] = weight[(o * g.cin + i) * 9..][..9].try_into().unwrap();
                for y in 0..ho {
                    let dst = &mut plane[y * wo..(y + 1) * wo];
                    let r0 = &src[y * pw..][..wo + 2];
                    let r1 = &src[(y + 1) * pw..][..wo + 2];
                    let r2 = &src[(y + 2) * pw..][..wo + 2];
                    row9(dst, k, r0, r1, r2);
                }
            }
        }
    }
    out
}

#[inline]
fn row9(dst: &mut [f64], k: &[f64; 9], r0: &[f64], r1: &[f64], r2: &[f64]) {
    let n = dst.len();
    let (a0, a1, a2) = (&r0[..n], &r0[1..n + 1], &r0[2..n + 2]);
    let (b0, b1, b2) = (&r1[..n], &r1[1..n + 1], &r1[2..n + 2]);
    let (c0, c1, c2) = (&r2[..n], &r2[1..n + 1], &r2[2..n + 2]);
    for x in 0..n {
        dst[x] += k[0] * a0[x]
            + k[1] * a1[x]
            + k[2] * a2[x]
            + k[3] * b0[x]
            + k[4] * b1[x]
            + k[5] * b2[x]
            + k[6] * c0[x]
            + k[7] * c1[x]
            + k[8] * c2[x];
    }
}

pub(crate) fn conv_backward_input(geom: &ConvGeom, gout: &[f64], weight: &[f64], gin: &mut [f64]) {
    let g = geom;
    let (ho, wo, pw, pp) = (g.ho, g.wo, g.pw(), g.padded_plane());
    let mut gp = vec![0.0; pp];
    for b in 0..g.batch {
        for i in 0..g.cin {
            gp.fill(0.0);
            for o in 0..g.cout {
                let go = &gout[(b * g.cout + o) * ho * wo..][..ho * wo];
                let k = &weight[(o * g.cin + i) * 9..][..9];
                for y in 0..ho {
                    let grow = &go[y * wo..(y + 1) * wo];
                    for ky in 0..3 {
                        let prow = &mut gp[(y + ky) * pw..][..wo + 2];
                        scatter3(prow, &k[ky * 3..ky * 3 + 3], grow);
                    }
                }
            }
            let dst = &mut gin[(b * g.cin + i) * g.h * g.w..][..g.h * g.w];
            for y in 0..g.h {
                let src = &gp[(y + g.off) * pw + g.off..][..g.w];
                axpy(&mut dst[y * g.w..(y + 1) * g.w], 1.0, src);
            }
        }
    }
}

#[inline]
fn scatter3(prow: &mut [f64], k: &[f64], grow: &[f64]) {
    let n = grow.len();
    // prow[x + kx] += k[kx] * grow[x]
    for x in 0..n {
        prow[x] += k[0] * grow[x];
    }
    let p1 = &mut prow[1..n + 1];
    for x in 0..n {
        p1[x] += k[1] * grow[x];
    }
    let p2 = &mut prow[2..n + 2];
    for x in 0..n {
        p2[x] += k[2] * grow[x];
    }
}

pub(crate) fn conv_backward_weight(geom: &ConvGeom, gout: &[f64], x: &[f64], gw: &mut [f64]) {
    let g = geom;
    let (ho, wo, pw, pp) = (g.ho, g.wo, g.pw(), g.padded_plane());
    let padded = g.pad(x);
    for b in 0..g.batch {
        for o in 0..g.cout {
            let go = &gout[(b * g.cout + o) * ho * wo..][..ho * wo];
            for i in 0..g.cin {
                let src = &padded[(b * g.cin + i) * pp..][..pp];
                let mut acc = [0.0f64; 9];
                for y in 0..ho {
                    let grow = &go[y * wo..(y + 1) * wo];
                    for ky in 0..3 {
                        let r = &src[(y + ky) * pw..][..wo + 2];
                        let (s0, s1, s2) = dot3(grow, r);
                        acc[ky * 3] += s0;
                        acc[ky * 3 + 1] += s1;
                        acc[ky * 3 + 2] += s2;
                    }
                }
                axpy(&mut gw[(o * g.cin + i) * 9..][..9], 1.0, &acc);
            }
        }
    }
}

#[inline]
fn dot3(grow: &[f64], r: &[f64]) -> (f64, f64, f64) {
    let n = grow.len();
    let (r0, r1, r2) = (&r[..n], &r[1..n + 1], &r[2..n + 2]);
    let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
    for x in 0..n {
        s0 += grow[x] * r0[x];
        s1 += grow[x] * r1[x];
        s2 += grow[x] * r2[x];
    }
    (s0, s1, s2)
}

pub(crate) fn conv_backward_bias(geom: &ConvGeom, gout: &[f64], gb: &mut [f64]) {
    let plane = geom.ho * geom.wo;
    for (k, p) in gout.chunks_exact(plane).enumerate() {
        gb[k % geom.cout] += p.iter().sum::<f64>();
    }
}

/// Per-channel batch statistics observed in a train-mode batch-norm pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n - 1) variance, the estimator folded into running stats.
    pub var: Vec<f64>,
}

pub(crate) fn bn_param_grads(shape: &[usize], gout: &[f64], xhat: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (c, plane) = (shape[1], shape[2] * shape[3]);
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (k, (gp, xp)) in gout.chunks_exact(plane).zip(xhat.chunks_exact(plane)).enumerate() {
        let ch = k % c;
        dbeta[ch] += gp.iter().sum::<f64>();
        dgamma[ch] += gp.iter().zip(xp).map(|(g, x)| g * x).sum::<f64>();
    }
    (dgamma, dbeta)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_backward_input(
    shape: &[usize],
    gout: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    dgamma: &[f64],
    dbeta: &[f64],
    train: bool,
    gin: &mut [f64],
) {
    let (c, plane) = (shape[1], shape[2] * shape[3]);
    let m = (shape[0] * plane) as f64;
    for (k, ((gi, gp), xp)) in gin
        .chunks_exact_mut(plane)
        .zip(gout.chunks_exact(plane))
        .zip(xhat.chunks_exact(plane))
        .enumerate()
    {
        let ch = k % c;
        let scale = gamma[ch] * inv_std[ch];
        if train {
            let (sb, sg) = (dbeta[ch] / m, dgamma[ch] / m);
            for ((gi, g), x) in gi.iter_mut().zip(gp).zip(xp) {
                *gi += scale * (g - sb - x * sg);
            }
        } else {
            for (gi, g) in gi.iter_mut().zip(gp) {
                *gi += scale * g;
            }
        }
    }
}

fn upsample_table(len: usize) -> Vec<(usize, usize, f64)> {
    let out = 2 * len;
    (0..out)
        .map(|j| {
            let pos = (j * (len - 1)) as f64 / (out - 1) as f64;
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

pub(crate) fn upsample_backward(shape: &[usize], gout: &[f64], gin: &mut [f64]) {
    let (h, w) = (shape[2], shape[3]);
    let (ty, tx) = (upsample_table(h), upsample_table(w));
    let (ho, wo) = (2 * h, 2 * w);
    for (gp, op) in gin.chunks_exact_mut(h * w).zip(gout.chunks_exact(ho * wo)) {
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                let d = op[y * wo + x];
                gp[y0 * w + x0] += d * (1.0 - fy) * (1.0 - fx);
                gp[y0 * w + x1] += d * (1.0 - fy) * fx;
                gp[y1 * w + x0] += d * fy * (1.0 - fx);
                gp[y1 * w + x1] += d * fy * fx;
            }
        }
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    // Keep the open interval even where f64 rounds to 0 or 1.
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

impl Graph {
    /// 3x3 convolution. `weight` is `[out, in, 3, 3]`, `bias` is `[out]`.
    pub fn conv3x3(&mut self, input: Var, weight: Var, bias: Option<Var>, padding: Padding) -> Result<Var> {
        let [b, cin, h, w] = dims4(self, input)?;
        let ws = self.shape(weight)?.to_vec();
        if ws.len() != 4 || ws[2] != 3 || ws[3] != 3 {
            return Err(Error::Invalid(format!("conv kernel must be [out, in, 3, 3], got {ws:?}")));
        }
        if ws[1] != cin {
            return Err(Error::ChannelMismatch {
                expected: ws[1],
                actual: cin,
            });
        }
        if padding == Padding::Valid && (h < 3 || w < 3) {
            return Err(Error::SpatialTooSmall(h.min(w)));
        }
        if let Some(bias) = bias {
            let bs = self.shape(bias)?;
            if bs != [ws[0]] {
                return Err(Error::ShapeMismatch(bs.to_vec(), vec![ws[0]]));
            }
        }
        let geom = ConvGeom::new(&[b, cin, h, w], &ws, padding);
        let out = conv_forward(
            &geom,
            self.value(input)?.data(),
            self.value(weight)?.data(),
            bias.map(|v| self.value(v).map(|t| t.data())).transpose()?,
        );
        let ng = self.needs_any(&[Some(input), Some(weight), bias]);
        let value = Tensor::from_parts(vec![b, ws[0], geom.ho, geom.wo], out);
        Ok(self.push(
            value,
            Op::Conv {
                input,
                weight,
                bias,
                padding,
            },
            ng,
        ))
    }

    pub(crate) fn needs_any(&self, vars: &[Option<Var>]) -> bool {
        vars.iter().flatten().any(|v| {
            // Vars were validated by the caller.
            self.needs_grad_of(*v)
        })
    }

    /// Train-mode batch norm: normalizes with the batch's own per-channel
    /// statistics and reports them for running-average updates.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let [b, c, h, w] = dims4(self, input)?;
        self.check_channel_vec(gamma, c)?;
        self.check_channel_vec(beta, c)?;
        let m = b * h * w;
        if m < 2 {
            return Err(Error::InsufficientBatch(m));
        }
        let x = self.value(input)?.data();
        let plane = h * w;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for (k, p) in x.chunks_exact(plane).enumerate() {
            mean[k % c] += p.iter().sum::<f64>();
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        for (k, p) in x.chunks_exact(plane).enumerate() {
            let mu = mean[k % c];
            var[k % c] += p.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
        }
        var.iter_mut().for_each(|v| *v /= m as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let stats = BatchStats {
            mean: mean.clone(),
            var: var.iter().map(|v| v * m as f64 / (m - 1) as f64).collect(),
        };
        let out = self.bn_apply(input, gamma, beta, &mean, inv_std, true)?;
        Ok((out, stats))
    }

    /// Eval-mode batch norm using fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let [_, c, _, _] = dims4(self, input)?;
        self.check_channel_vec(gamma, c)?;
        self.check_channel_vec(beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::ChannelMismatch {
                expected: c,
                actual: running_mean.len(),
            });
        }
        let inv_std = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.bn_apply(input, gamma, beta, running_mean, inv_std, false)
    }

    fn check_channel_vec(&self, v: Var, c: usize) -> Result<()> {
        let s = self.shape(v)?;
        if s != [c] {
            return Err(Error::ChannelMismatch {
                expected: c,
                actual: s.iter().product(),
            });
        }
        Ok(())
    }

    fn bn_apply(&mut self, input: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: Vec<f64>, train: bool) -> Result<Var> {
        let xt = self.value(input)?;
        let shape = xt.shape().to_vec();
        let (c, plane) = (shape[1], shape[2] * shape[3]);
        let (gm, bt) = (self.value(gamma)?.data(), self.value(beta)?.data());
        let mut xhat = vec![0.0; xt.len()];
        let mut out = vec![0.0; xt.len()];
        for (k, ((xp, hp), op)) in xt
            .data()
            .chunks_exact(plane)
            .zip(xhat.chunks_exact_mut(plane))
            .zip(out.chunks_exact_mut(plane))
            .enumerate()
        {
            let ch = k % c;
            for ((x, hx), o) in xp.iter().zip(hp.iter_mut()).zip(op.iter_mut()) {
                *hx = (x - mean[ch]) * inv_std[ch];
                *o = gm[ch] * *hx + bt[ch];
            }
        }
        let ng = self.needs_any(&[Some(input), Some(gamma), Some(beta)]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            ng,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let v = self.map(input, |x| x.max(0.0))?;
        let ng = self.needs_grad_of(input);
        Ok(self.push(v, Op::Relu(input), ng))
    }

    /// 2x2 max pooling with stride 2. Ties go to the first maximum in
    /// row-major window order.
    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var> {
        let [b, c, h, w] = dims4(self, input)?;
        if h % 2 != 0 {
            return Err(Error::OddSpatial(h));
        }
        if w % 2 != 0 {
            return Err(Error::OddSpatial(w));
        }
        let (ho, wo) = (h / 2, w / 2);
        let x = self.value(input)?.data();
        let mut out = Vec::with_capacity(b * c * ho * wo);
        let mut argmax = Vec::with_capacity(b * c * ho * wo);
        for p in 0..b * c {
            let base = p * h * w;
            for y in 0..ho {
                for xo in 0..wo {
                    let cands = [
                        base + 2 * y * w + 2 * xo,
                        base + 2 * y * w + 2 * xo + 1,
                        base + (2 * y + 1) * w + 2 * xo,
                        base + (2 * y + 1) * w + 2 * xo + 1,
                    ];
                    let mut best = cands[0];
                    for &i in &cands[1..] {
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let ng = self.needs_grad_of(input);
        Ok(self.push(
            Tensor::from_parts(vec![b, c, ho, wo], out),
            Op::MaxPool { input, argmax },
            ng,
        ))
    }

    /// x2 bilinear upsampling, align-corners convention: output index `j`
    /// samples input position `j * (L - 1) / (2L - 1)`.
    pub fn bilinear_upsample_x2(&mut self, input: Var) -> Result<Var> {
        let [b, c, h, w] = dims4(self, input)?;
        if h < 2 || w < 2 {
            return Err(Error::SpatialTooSmall(h.min(w)));
        }
        let (ty, tx) = (upsample_table(h), upsample_table(w));
        let (ho, wo) = (2 * h, 2 * w);
        let x = self.value(input)?.data();
        let mut out = vec![0.0; b * c * ho * wo];
        for (ip, op) in x.chunks_exact(h * w).zip(out.chunks_exact_mut(ho * wo)) {
            for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (xo, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = ip[y0 * w + x0] * (1.0 - fx) + ip[y0 * w + x1] * fx;
                    let bot = ip[y1 * w + x0] * (1.0 - fx) + ip[y1 * w + x1] * fx;
                    op[y * wo + xo] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        let ng = self.needs_grad_of(input);
        Ok(self.push(Tensor::from_parts(vec![b, c, ho, wo], out), Op::Upsample(input), ng))
    }

    /// Per-channel spatial mean: `[b, c, h, w] -> [b, c]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let [b, c, h, w] = dims4(self, input)?;
        let plane = (h * w) as f64;
        let out = self
            .value(input)?
            .data()
            .chunks_exact(h * w)
            .map(|p| p.iter().sum::<f64>() / plane)
            .collect();
        let ng = self.needs_grad_of(input);
        Ok(self.push(Tensor::from_parts(vec![b, c], out), Op::GlobalAvgPool(input), ng))
    }

    /// `[b, in] x [out, in]^T + [out] -> [b, out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input)?.to_vec();
        let ws = self.shape(weight)?.to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::ShapeMismatch(xs, ws));
        }
        let bs = self.shape(bias)?;
        if bs != [ws[0]] {
            return Err(Error::ShapeMismatch(bs.to_vec(), vec![ws[0]]));
        }
        let (batch, fin, fout) = (xs[0], xs[1], ws[0]);
        let (x, w, bv) = (
            self.value(input)?.data(),
            self.value(weight)?.data(),
            self.value(bias)?.data(),
        );
        let mut out = Vec::with_capacity(batch * fout);
        for b in 0..batch {
            let row = &x[b * fin..(b + 1) * fin];
            for o in 0..fout {
                let wr = &w[o * fin..(o + 1) * fin];
                out.push(bv[o] + row.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>());
            }
        }
        let ng = self.needs_any(&[Some(input), Some(weight), Some(bias)]);
        Ok(self.push(
            Tensor::from_parts(vec![batch, fout], out),
            Op::Linear {
                input,
                weight,
                bias,
            },
            ng,
        ))
    }

    /// Row-wise softmax over the last dimension of a `[b, k]` tensor.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input)?.to_vec();
        if s.len() != 2 {
            return Err(Error::Invalid(format!("softmax expects [batch, classes], got {s:?}")));
        }
        let k = s[1];
        let mut out = self.value(input)?.data().to_vec();
        for row in out.chunks_exact_mut(k) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let ng = self.needs_grad_of(input);
        Ok(self.push(Tensor::from_parts(s, out), Op::Softmax(input), ng))
    }

    /// Linear layer followed by softmax.
    pub fn linear_softmax(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let logits = self.linear(input, weight, bias)?;
        self.softmax(logits)
    }

    /// Elementwise logistic function; outputs lie strictly inside (0, 1).
    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let v = self.map(input, sigmoid_scalar)?;
        let ng = self.needs_grad_of(input);
        Ok(self.push(v, Op::Sigmoid(input), ng))
    }

    /// Mean of a single-channel map over its pixels: `[b, 1, h, w] -> [b]`.
    pub fn spatial_mean(&mut self, mask: Var) -> Result<Var> {
        let [b, c, h, w] = dims4(self, mask)?;
        if c != 1 {
            return Err(Error::ChannelMismatch {
                expected: 1,
                actual: c,
            });
        }
        let out = self
            .value(mask)?
            .data()
            .chunks_exact(h * w)
            .map(|p| p.iter().sum::<f64>() / (h * w) as f64)
            .collect();
        let ng = self.needs_grad_of(mask);
        Ok(self.push(Tensor::from_parts(vec![b], out), Op::SpatialMean(mask), ng))
    }

    /// `-mean(ln p[label])` over the batch, with `p` floored at [`PROB_FLOOR`].
    pub fn nll(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(probs)?.to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Invalid(format!(
                "nll expects [batch, classes] probabilities and one label per row, got {s:?} and {} labels",
                labels.len()
            )));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange {
                label: bad as i64,
                min: 0,
                max: k as i64 - 1,
            });
        }
        let p = self.value(probs)?.data();
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(b, &l)| -p[b * k + l].max(PROB_FLOOR).ln())
            .sum();
        let ng = self.needs_grad_of(probs);
        Ok(self.push(
            Tensor::scalar(total / labels.len() as f64),
            Op::Nll {
                probs,
                labels: labels.to_vec(),
            },
            ng,
        ))
    }
}

/// A 3x3 convolution layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub padding: Padding,
}

impl ConvLayer {
    /// He-normal weights; `bias` adds a zero-initialized bias vector.
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, bias: bool, seed: u64) -> Self {
        let std = (2.0 / (cin * 9) as f64).sqrt();
        let weight = store.push(
            format!("{name}.weight"),
            Tensor::new(&[cout, cin, 3, 3], Init::Normal { std, seed }).expect("nonzero dims"),
        );
        let bias = bias.then(|| store.push(format!("{name}.bias"), Tensor::zeros(&[cout]).expect("nonzero dims")));
        Self {
            weight,
            bias,
            padding: Padding::SameZero,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv3x3(x, w, b, self.padding)
    }
}

/// Batch-norm layer: affine parameters in the store, running statistics
/// held here.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormLayer {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.push(format!("{name}.gamma"), Tensor::new(&[channels], Init::Constant(1.0)).expect("nonzero dims"));
        let beta = store.push(format!("{name}.beta"), Tensor::zeros(&[channels]).expect("nonzero dims"));
        Self {
            gamma,
            beta,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mode: Mode,
        stats: &mut Vec<BatchStats>,
    ) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        match mode {
            Mode::Train => {
                let (y, s) = g.batch_norm_train(x, gamma, beta, self.eps)?;
                stats.push(s);
                Ok(y)
            }
            Mode::Eval => g.batch_norm_eval(x, gamma, beta, &self.running_mean, &self.running_var, self.eps),
        }
    }

    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, s) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * s;
        }
        for (r, s) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * s;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearLayer {
    pub fn new(store: &mut ParamStore, name: &str, fin: usize, fout: usize, seed: u64) -> Self {
        let std = (2.0 / fin as f64).sqrt();
        let weight = store.push(
            format!("{name}.weight"),
            Tensor::new(&[fout, fin], Init::Normal { std, seed }).expect("nonzero dims"),
        );
        let bias = store.push(format!("{name}.bias"), Tensor::zeros(&[fout]).expect("nonzero dims"));
        Self { weight, bias }
    }

    /// Linear map followed by softmax.
    pub fn forward_softmax(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear_softmax(x, w, b)
    }
}

/// One conv -> batch norm -> ReLU stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBnRelu {
    pub conv: ConvLayer,
    pub bn: BatchNormLayer,
}

impl ConvBnRelu {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, seed: u64) -> Self {
        // The conv bias is dropped: batch norm's shift subsumes it.
        Self {
            conv: ConvLayer::new(store, &format!("{name}.conv"), cin, cout, false, seed),
            bn: BatchNormLayer::new(store, &format!("{name}.bn"), cout),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mode: Mode,
        stats: &mut Vec<BatchStats>,
    ) -> Result<Var> {
        let h = self.conv.forward(g, store, x)?;
        let h = self.bn.forward(g, store, h, mode, stats)?;
        g.relu(h)
    }

    pub fn batch_norms_mut(&mut self) -> impl Iterator<Item = &mut BatchNormLayer> {
        std::iter::once(&mut self.bn)
    }
}

/// `x + branch(x)` where the branch is `n` conv-BN-ReLU stages at constant
/// channel width.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub stages: Vec<ConvBnRelu>,
}

impl ResidualBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, n: usize, seed: u64) -> Self {
        let stages = (0..n)
            .map(|s| {
                ConvBnRelu::new(
                    store,
                    &format!("{name}.stage{s}"),
                    channels,
                    channels,
                    crate::rng::derive_seed(seed, &[s as u64]),
                )
            })
            .collect();
        Self { stages }
    }

    pub fn conv_count(&self) -> usize {
        self.stages.len()
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mode: Mode,
        stats: &mut Vec<BatchStats>,
    ) -> Result<Var> {
        let mut h = x;
        for stage in &self.stages {
            h = stage.forward(g, store, h, mode, stats)?;
        }
        g.add(x, h)
    }
}

/// Functional form of a residual block over explicit parameter vars.
///
/// Each stage is `(kernel, gamma, beta)`; batch norm runs in train mode.
pub fn residual_block(g: &mut Graph, input: Var, stages: &[(Var, Var, Var)]) -> Result<Var> {
    let [_, c, _, _] = dims4(g, input)?;
    let mut h = input;
    for &(w, gamma, beta) in stages {
        let ws = g.shape(w)?;
        if ws.len() != 4 || ws[0] != c || ws[1] != c {
            return Err(Error::ChannelMismatch {
                expected: c,
                actual: if ws.len() == 4 { ws[0].max(ws[1]) } else { 0 },
            });
        }
        h = g.conv3x3(h, w, None, Padding::SameZero)?;
        h = g.batch_norm_train(h, gamma, beta, BN_EPS)?.0;
        h = g.relu(h)?;
    }
    g.add(input, h)
}
