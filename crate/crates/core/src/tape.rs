//! Reverse-mode differentiation over an eager operation tape.
//!
//! Every op runs its forward pass immediately, records its parents and a
//! backward closure, and returns a `ValueId`. `backward` walks the tape in
//! reverse creation order, which is a reverse topological order by
//! construction, accumulating parent gradients in ascending id order so the
//! whole pass is deterministic.
//!
//! The fire/reset nonlinearity enters through two fused ops, `liaf_tau`
//! (membrane update) and `spike_out` (binary output), whose backward passes
//! use the surrogate window. The tape tracks the smallest |U - v_th| margin
//! any fire decision saw; gradient checks against finite differences are
//! exact only when that margin clears the window.

use crate::activation::{rect_window, Activation};
use crate::error::{Error, Result};
use crate::tensor::{self, Bcast, OpCounter, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(pub usize);

type BackFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Result<Vec<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<ValueId>,
    back: Option<BackFn>,
}

pub struct Tape {
    nodes: Vec<Node>,
    min_margin: f64,
}

/// Gradients from one backward pass, indexed by the ids of the tape that
/// produced them.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, id: ValueId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: ValueId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            if acc.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    context: "gradient accumulation",
                    expected: acc.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
    }
    Ok(())
}

fn bcast_index(bcast: Bcast, i: usize, channels: usize, per_sample: usize) -> usize {
    match bcast {
        Bcast::Scalar => 0,
        Bcast::Channel => i % channels,
        Bcast::Full => i % per_sample,
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            min_margin: f64::INFINITY,
        }
    }

    /// Smallest |U - v_th| any fire decision on this tape has seen.
    pub fn min_margin(&self) -> f64 {
        self.min_margin
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, parents: Vec<ValueId>, back: Option<BackFn>) -> ValueId {
        self.nodes.push(Node {
            value,
            parents,
            back,
        });
        ValueId(self.nodes.len() - 1)
    }

    /// Records a tensor with no backward rule: inputs, parameters, constants.
    pub fn leaf(&mut self, t: Tensor) -> ValueId {
        self.push(t, vec![], None)
    }

    pub fn matmul(
        &mut self,
        a: ValueId,
        b: ValueId,
        counter: Option<&mut OpCounter>,
    ) -> Result<ValueId> {
        let y = tensor::matmul(self.value(a), self.value(b), counter)?;
        let back: BackFn = Box::new(|g, p, _| {
            let da = tensor::matmul(g, &tensor::transpose2(p[1])?, None)?;
            let db = tensor::matmul(&tensor::transpose2(p[0])?, g, None)?;
            Ok(vec![da, db])
        });
        Ok(self.push(y, vec![a, b], Some(back)))
    }

    pub fn add(
        &mut self,
        a: ValueId,
        b: ValueId,
        counter: Option<&mut OpCounter>,
    ) -> Result<ValueId> {
        let y = tensor::add(self.value(a), self.value(b), counter)?;
        let back: BackFn = Box::new(|g, _, _| Ok(vec![g.clone(), g.clone()]));
        Ok(self.push(y, vec![a, b], Some(back)))
    }

    pub fn sub(
        &mut self,
        a: ValueId,
        b: ValueId,
        counter: Option<&mut OpCounter>,
    ) -> Result<ValueId> {
        let y = tensor::sub(self.value(a), self.value(b), counter)?;
        let back: BackFn = Box::new(|g, _, _| Ok(vec![g.clone(), tensor::map(g, |v| -v)]));
        Ok(self.push(y, vec![a, b], Some(back)))
    }

    pub fn hadamard(
        &mut self,
        a: ValueId,
        b: ValueId,
        counter: Option<&mut OpCounter>,
    ) -> Result<ValueId> {
        let y = tensor::hadamard(self.value(a), self.value(b), counter)?;
        let back: BackFn = Box::new(|g, p, _| {
            Ok(vec![
                tensor::hadamard(g, p[1], None)?,
                tensor::hadamard(g, p[0], None)?,
            ])
        });
        Ok(self.push(y, vec![a, b], Some(back)))
    }

    pub fn scale(
        &mut self,
        a: ValueId,
        c: f64,
        counter: Option<&mut OpCounter>,
    ) -> Result<ValueId> {
        let y = tensor::scale(self.value(a), c, counter)?;
        let back: BackFn = Box::new(move |g, _, _| Ok(vec![tensor::scale(g, c, None)?]));
        Ok(self.push(y, vec![a], Some(back)))
    }

    /// 1 - x. Gate complements live in the selection bucket.
    pub fn complement(
        &mut self,
        a: ValueId,
        mut counter: Option<&mut OpCounter>,
    ) -> Result<ValueId> {
        let x = self.value(a);
        if let Some(c) = counter.as_deref_mut() {
            c.other += x.len() as u64;
        }
        let y = tensor::map(x, |v| 1.0 - v);
        let back: BackFn = Box::new(|g, _, _| Ok(vec![tensor::map(g, |v| -v)]));
        Ok(self.push(y, vec![a], Some(back)))
    }

    /// Pointwise activation; counted as a lookup, not arithmetic. `mu` feeds
    /// the Threshold pseudo-derivative and is ignored by the smooth ones.
    pub fn activation(
        &mut self,
        a: ValueId,
        act: Activation,
        mu: f64,
        mut counter: Option<&mut OpCounter>,
    ) -> Result<ValueId> {
        let x = self.value(a);
        if let Some(c) = counter.as_deref_mut() {
            c.other += x.len() as u64;
        }
        let y = tensor::map(x, |v| act.eval(v));
        let back: BackFn = Box::new(move |g, p, y| {
            let mut dx = g.clone();
            for (i, d) in dx.data_mut().iter_mut().enumerate() {
                *d *= act.deriv(p[0].data()[i], y.data()[i], mu);
            }
            Ok(vec![dx])
        });
        Ok(self.push(y, vec![a], Some(back)))
    }

    pub fn add_bias(
        &mut self,
        x: ValueId,
        b: ValueId,
        counter: Option<&mut OpCounter>,
    ) -> Result<ValueId> {
        let y = tensor::add_bias(self.value(x), self.value(b), counter)?;
        let back: BackFn = Box::new(|g, _, _| Ok(vec![g.clone(), tensor::sum_to_last_axis(g)?]));
        Ok(self.push(y, vec![x, b], Some(back)))
    }

    pub fn conv2d(
        &mut self,
        x: ValueId,
        kernel: ValueId,
        pad: usize,
        counter: Option<&mut OpCounter>,
    ) -> Result<ValueId> {
        let xv = self.value(x);
        let kv = self.value(kernel);
        let (in_h, in_w) = (xv.shape()[1], xv.shape()[2]);
        let (ki, kj) = (kv.shape()[0], kv.shape()[1]);
        let y = tensor::conv2d(xv, kv, pad, counter)?;
        let back: BackFn = Box::new(move |g, p, _| {
            Ok(vec![
                tensor::conv2d_grad_input(g, p[1], in_h, in_w, pad)?,
                tensor::conv2d_grad_kernel(p[0], g, ki, kj, pad)?,
            ])
        });
        Ok(self.push(y, vec![x, kernel], Some(back)))
    }

    pub fn conv3d(
        &mut self,
        x: ValueId,
        kernel: ValueId,
        pad_t: usize,
        pad_s: usize,
        counter: Option<&mut OpCounter>,
    ) -> Result<ValueId> {
        let xv = self.value(x);
        let kv = self.value(kernel);
        let (in_t, in_h, in_w) = (xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (ku, ki, kj) = (kv.shape()[0], kv.shape()[1], kv.shape()[2]);
        let y = tensor::conv3d(xv, kv, pad_t, pad_s, counter)?;
        let back: BackFn = Box::new(move |g, p, _| {
            Ok(vec![
                tensor::conv3d_grad_input(g, p[1], in_t, in_h, in_w, pad_t, pad_s)?,
                tensor::conv3d_grad_kernel(p[0], g, ku, ki, kj, pad_t, pad_s)?,
            ])
        });
        Ok(self.push(y, vec![x, kernel], Some(back)))
    }

    pub fn avg_pool2d(
        &mut self,
        x: ValueId,
        p: usize,
        q: usize,
        counter: Option<&mut OpCounter>,
    ) -> Result<ValueId> {
        let in_shape = self.value(x).shape().to_vec();
        let y = tensor::avg_pool2d(self.value(x), p, q, counter)?;
        let back: BackFn =
            Box::new(move |g, _, _| Ok(vec![tensor::avg_pool2d_grad(g, &in_shape, p, q)?]));
        Ok(self.push(y, vec![x], Some(back)))
    }

    pub fn time_sum(
        &mut self,
        x: ValueId,
        counter: Option<&mut OpCounter>,
    ) -> Result<ValueId> {
        let t = self.value(x).shape()[1];
        let y = tensor::reduce_sum_time(self.value(x), counter)?;
        let back: BackFn = Box::new(move |g, _, _| Ok(vec![tensor::broadcast_time(g, t)?]));
        Ok(self.push(y, vec![x], Some(back)))
    }

    pub fn time_mean(
        &mut self,
        x: ValueId,
        counter: Option<&mut OpCounter>,
    ) -> Result<ValueId> {
        let t = self.value(x).shape()[1];
        let y = tensor::reduce_mean_time(self.value(x), counter)?;
        let back: BackFn = Box::new(move |g, _, _| {
            let rep = tensor::broadcast_time(g, t)?;
            Ok(vec![tensor::scale(&rep, 1.0 / t as f64, None)?])
        });
        Ok(self.push(y, vec![x], Some(back)))
    }

    pub fn select_time(&mut self, x: ValueId, t: usize) -> Result<ValueId> {
        let in_shape = self.value(x).shape().to_vec();
        let y = tensor::select_time(self.value(x), t)?;
        let back: BackFn = Box::new(move |g, _, _| {
            let mut dx = Tensor::zeros(&in_shape)?;
            let b = in_shape[0];
            let steps = in_shape[1];
            let rest: usize = in_shape[2..].iter().product();
            for bi in 0..b {
                let dst = (bi * steps + t) * rest;
                dx.data_mut()[dst..dst + rest].copy_from_slice(&g.data()[bi * rest..(bi + 1) * rest]);
            }
            Ok(vec![dx])
        });
        Ok(self.push(y, vec![x], Some(back)))
    }

    pub fn stack_time(&mut self, xs: &[ValueId]) -> Result<ValueId> {
        let vals: Vec<Tensor> = xs.iter().map(|id| self.value(*id).clone()).collect();
        let y = tensor::stack_time(&vals)?;
        let back: BackFn = Box::new(|g, p, _| {
            let mut out = Vec::with_capacity(p.len());
            for ti in 0..p.len() {
                out.push(tensor::select_time(g, ti)?);
            }
            Ok(out)
        });
        Ok(self.push(y, xs.to_vec(), Some(back)))
    }

    pub fn reshape(&mut self, x: ValueId, shape: &[usize]) -> Result<ValueId> {
        let in_shape = self.value(x).shape().to_vec();
        let y = self.value(x).reshape(shape)?;
        let back: BackFn = Box::new(move |g, _, _| Ok(vec![g.reshape(&in_shape)?]));
        Ok(self.push(y, vec![x], Some(back)))
    }

    /// y = x - p broadcast; the threshold-referenced staging subtract.
    pub fn sub_bcast(
        &mut self,
        x: ValueId,
        p: ValueId,
        bcast: Bcast,
        counter: Option<&mut OpCounter>,
    ) -> Result<ValueId> {
        let y = tensor::sub_bcast_uncounted(self.value(x), self.value(p), bcast, counter)?;
        let back: BackFn = Box::new(move |g, _, _| {
            let dp = tensor::reduce_bcast(g, bcast)?;
            Ok(vec![g.clone(), tensor::map(&dp, |v| -v)])
        });
        Ok(self.push(y, vec![x, p], Some(back)))
    }

    /// Fused fire/reset/leak state update:
    ///
    /// ```text
    /// F = step(U - v_th); R = F*v_reset + (1-F)*U; tau = alpha*R + beta
    /// ```
    ///
    /// One multiply and one add per element (the leak affine); the compare
    /// and select land in `other`. Backward follows the surrogate ledger.
    pub fn liaf_tau(
        &mut self,
        u: ValueId,
        v_th: ValueId,
        v_reset: ValueId,
        alpha: ValueId,
        beta: ValueId,
        bcast: Bcast,
        mu: f64,
        mut counter: Option<&mut OpCounter>,
    ) -> Result<ValueId> {
        let uv = self.value(u);
        let n = uv.len();
        let channels = *uv.shape().last().unwrap();
        let per_sample = n / uv.shape()[0];
        let want = match bcast {
            Bcast::Scalar => 1,
            Bcast::Channel => channels,
            Bcast::Full => per_sample,
        };
        for pid in [v_th, v_reset, alpha, beta] {
            if self.value(pid).len() != want {
                return Err(Error::ShapeMismatch {
                    context: "liaf_tau dynamics",
                    expected: vec![want],
                    got: vec![self.value(pid).len()],
                });
            }
        }
        let thv = self.value(v_th).data();
        let rsv = self.value(v_reset).data();
        let alv = self.value(alpha).data();
        let bev = self.value(beta).data();
        let mut y = uv.clone();
        let mut margin = f64::INFINITY;
        for (i, o) in y.data_mut().iter_mut().enumerate() {
            let j = bcast_index(bcast, i, channels, per_sample);
            let uval = *o;
            let d = uval - thv[j];
            margin = margin.min(d.abs());
            let r = if d >= 0.0 { rsv[j] } else { uval };
            *o = alv[j] * r + bev[j];
        }
        self.min_margin = self.min_margin.min(margin);
        if let Some(c) = counter.as_deref_mut() {
            c.muls += n as u64;
            c.adds += n as u64;
            c.other += 2 * n as u64;
        }
        let back: BackFn = Box::new(move |g, p, _| {
            let (uv, thv, rsv, alv) = (p[0], p[1].data(), p[2].data(), p[3].data());
            let channels = *uv.shape().last().unwrap();
            let per_sample = uv.len() / uv.shape()[0];
            let mut du = g.clone();
            let mut gth = g.clone();
            let mut grs = g.clone();
            let mut gal = g.clone();
            for i in 0..uv.len() {
                let j = bcast_index(bcast, i, channels, per_sample);
                let uval = uv.data()[i];
                let d = uval - thv[j];
                let f = if d >= 0.0 { 1.0 } else { 0.0 };
                let dw = rect_window(d, mu);
                let bump = dw * (rsv[j] - uval);
                let al = alv[j];
                let gv = g.data()[i];
                du.data_mut()[i] = gv * (al * bump + al * (1.0 - f));
                gth.data_mut()[i] = gv * (-al * bump);
                grs.data_mut()[i] = gv * al * f;
                gal.data_mut()[i] = gv * (f * rsv[j] + (1.0 - f) * uval);
            }
            Ok(vec![
                du,
                tensor::reduce_bcast(&gth, bcast)?,
                tensor::reduce_bcast(&grs, bcast)?,
                tensor::reduce_bcast(&gal, bcast)?,
                tensor::reduce_bcast(g, bcast)?,
            ])
        });
        Ok(self.push(y, vec![u, v_th, v_reset, alpha, beta], Some(back)))
    }

    /// Binary fire output y = step(U - v_th) with windowed backward.
    pub fn spike_out(
        &mut self,
        u: ValueId,
        v_th: ValueId,
        bcast: Bcast,
        mu: f64,
        mut counter: Option<&mut OpCounter>,
    ) -> Result<ValueId> {
        let uv = self.value(u);
        let n = uv.len();
        let channels = *uv.shape().last().unwrap();
        let per_sample = n / uv.shape()[0];
        let want = match bcast {
            Bcast::Scalar => 1,
            Bcast::Channel => channels,
            Bcast::Full => per_sample,
        };
        if self.value(v_th).len() != want {
            return Err(Error::ShapeMismatch {
                context: "spike_out threshold",
                expected: vec![want],
                got: vec![self.value(v_th).len()],
            });
        }
        let thv = self.value(v_th).data();
        let mut y = uv.clone();
        let mut margin = f64::INFINITY;
        for (i, o) in y.data_mut().iter_mut().enumerate() {
            let j = bcast_index(bcast, i, channels, per_sample);
            let d = *o - thv[j];
            margin = margin.min(d.abs());
            *o = if d >= 0.0 { 1.0 } else { 0.0 };
        }
        self.min_margin = self.min_margin.min(margin);
        if let Some(c) = counter.as_deref_mut() {
            c.other += n as u64;
        }
        let back: BackFn = Box::new(move |g, p, _| {
            let (uv, thv) = (p[0], p[1].data());
            let channels = *uv.shape().last().unwrap();
            let per_sample = uv.len() / uv.shape()[0];
            let mut du = g.clone();
            for i in 0..uv.len() {
                let j = bcast_index(bcast, i, channels, per_sample);
                let dw = rect_window(uv.data()[i] - thv[j], mu);
                du.data_mut()[i] = g.data()[i] * dw;
            }
            let dth = tensor::reduce_bcast(&du, bcast)?;
            Ok(vec![du, tensor::map(&dth, |v| -v)])
        });
        Ok(self.push(y, vec![u, v_th], Some(back)))
    }

    /// Per-sample normalization over every axis after (B, T), or after B for
    /// rank-2 input, with per-channel scale and shift.
    pub fn layer_norm(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
        mut counter: Option<&mut OpCounter>,
    ) -> Result<ValueId> {
        let xv = self.value(x);
        let lead = if xv.rank() >= 3 {
            xv.shape()[0] * xv.shape()[1]
        } else {
            xv.shape()[0]
        };
        let n = xv.len() / lead;
        let channels = *xv.shape().last().unwrap();
        if self.value(gamma).len() != channels || self.value(beta).len() != channels {
            return Err(Error::ShapeMismatch {
                context: "layer_norm scale",
                expected: vec![channels],
                got: vec![self.value(gamma).len()],
            });
        }
        if let Some(c) = counter.as_deref_mut() {
            c.other += xv.len() as u64;
        }
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut y = xv.clone();
        for s in 0..lead {
            let slice = &mut y.data_mut()[s * n..(s + 1) * n];
            let m = slice.iter().sum::<f64>() / n as f64;
            let var = slice.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
            let invstd = 1.0 / (var + eps).sqrt();
            for (i, o) in slice.iter_mut().enumerate() {
                let xhat = (*o - m) * invstd;
                *o = gv[i % channels] * xhat + bv[i % channels];
            }
        }
        let back: BackFn = Box::new(move |g, p, _| {
            let xv = p[0];
            let gammav = p[1].data();
            let channels = *xv.shape().last().unwrap();
            let lead = if xv.rank() >= 3 {
                xv.shape()[0] * xv.shape()[1]
            } else {
                xv.shape()[0]
            };
            let n = xv.len() / lead;
            let mut dx = g.clone();
            let mut dgamma = Tensor::zeros(&[channels])?;
            let mut dbeta = Tensor::zeros(&[channels])?;
            for s in 0..lead {
                let xs = &xv.data()[s * n..(s + 1) * n];
                let gs = &g.data()[s * n..(s + 1) * n];
                let m = xs.iter().sum::<f64>() / n as f64;
                let var = xs.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
                let invstd = 1.0 / (var + eps).sqrt();
                let mut s1 = 0.0;
                let mut s2 = 0.0;
                for i in 0..n {
                    let xhat = (xs[i] - m) * invstd;
                    let dxhat = gs[i] * gammav[i % channels];
                    s1 += dxhat;
                    s2 += dxhat * xhat;
                    dgamma.data_mut()[i % channels] += gs[i] * xhat;
                    dbeta.data_mut()[i % channels] += gs[i];
                }
                let (s1n, s2n) = (s1 / n as f64, s2 / n as f64);
                for i in 0..n {
                    let xhat = (xs[i] - m) * invstd;
                    let dxhat = gs[i] * gammav[i % channels];
                    dx.data_mut()[s * n + i] = invstd * (dxhat - s1n - xhat * s2n);
                }
            }
            Ok(vec![dx, dgamma, dbeta])
        });
        Ok(self.push(y, vec![x, gamma, beta], Some(back)))
    }

    /// Training-mode batch normalization over all positions per channel
    /// (last axis). Returns the node plus the batch mean and biased variance
    /// so the caller can fold them into running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
        mut counter: Option<&mut OpCounter>,
    ) -> Result<(ValueId, Tensor, Tensor)> {
        let xv = self.value(x);
        let channels = *xv.shape().last().unwrap();
        let rows = xv.len() / channels;
        if self.value(gamma).len() != channels || self.value(beta).len() != channels {
            return Err(Error::ShapeMismatch {
                context: "batch_norm scale",
                expected: vec![channels],
                got: vec![self.value(gamma).len()],
            });
        }
        if let Some(c) = counter.as_deref_mut() {
            c.other += xv.len() as u64;
        }
        let mut mean = Tensor::zeros(&[channels])?;
        let mut var = Tensor::zeros(&[channels])?;
        for (i, v) in xv.data().iter().enumerate() {
            mean.data_mut()[i % channels] += v;
        }
        for m in mean.data_mut() {
            *m /= rows as f64;
        }
        for (i, v) in xv.data().iter().enumerate() {
            let d = v - mean.data()[i % channels];
            var.data_mut()[i % channels] += d * d;
        }
        for v in var.data_mut() {
            *v /= rows as f64;
        }
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut y = xv.clone();
        for (i, o) in y.data_mut().iter_mut().enumerate() {
            let c = i % channels;
            let invstd = 1.0 / (var.data()[c] + eps).sqrt();
            *o = gv[c] * (*o - mean.data()[c]) * invstd + bv[c];
        }
        let back: BackFn = Box::new(move |g, p, _| {
            let xv = p[0];
            let gammav = p[1].data();
            let channels = *xv.shape().last().unwrap();
            let rows = xv.len() / channels;
            let mut mean = vec![0.0; channels];
            let mut var = vec![0.0; channels];
            for (i, v) in xv.data().iter().enumerate() {
                mean[i % channels] += v;
            }
            for m in mean.iter_mut() {
                *m /= rows as f64;
            }
            for (i, v) in xv.data().iter().enumerate() {
                let d = v - mean[i % channels];
                var[i % channels] += d * d;
            }
            for v in var.iter_mut() {
                *v /= rows as f64;
            }
            let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut s1 = vec![0.0; channels];
            let mut s2 = vec![0.0; channels];
            let mut dgamma = Tensor::zeros(&[channels])?;
            let mut dbeta = Tensor::zeros(&[channels])?;
            for (i, v) in xv.data().iter().enumerate() {
                let c = i % channels;
                let xhat = (v - mean[c]) * invstd[c];
                let dxhat = g.data()[i] * gammav[c];
                s1[c] += dxhat;
                s2[c] += dxhat * xhat;
                dgamma.data_mut()[c] += g.data()[i] * xhat;
                dbeta.data_mut()[c] += g.data()[i];
            }
            let mut dx = g.clone();
            for (i, v) in xv.data().iter().enumerate() {
                let c = i % channels;
                let xhat = (v - mean[c]) * invstd[c];
                let dxhat = g.data()[i] * gammav[c];
                dx.data_mut()[i] =
                    invstd[c] * (dxhat - s1[c] / rows as f64 - xhat * s2[c] / rows as f64);
            }
            Ok(vec![dx, dgamma, dbeta])
        });
        let id = self.push(y, vec![x, gamma, beta], Some(back));
        Ok((id, mean, var))
    }

    /// Inference-mode batch normalization with frozen statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        mean: &Tensor,
        var: &Tensor,
        eps: f64,
        mut counter: Option<&mut OpCounter>,
    ) -> Result<ValueId> {
        let xv = self.value(x);
        let channels = *xv.shape().last().unwrap();
        if mean.len() != channels || var.len() != channels {
            return Err(Error::ShapeMismatch {
                context: "batch_norm stats",
                expected: vec![channels],
                got: vec![mean.len()],
            });
        }
        if let Some(c) = counter.as_deref_mut() {
            c.other += xv.len() as u64;
        }
        let invstd: Vec<f64> = var.data().iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let meanv = mean.data().to_vec();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut y = xv.clone();
        for (i, o) in y.data_mut().iter_mut().enumerate() {
            let c = i % channels;
            *o = gv[c] * (*o - meanv[c]) * invstd[c] + bv[c];
        }
        let back: BackFn = Box::new(move |g, p, _| {
            let xv = p[0];
            let gammav = p[1].data();
            let channels = *xv.shape().last().unwrap();
            let mut dx = g.clone();
            let mut dgamma = Tensor::zeros(&[channels])?;
            let mut dbeta = Tensor::zeros(&[channels])?;
            for (i, v) in xv.data().iter().enumerate() {
                let c = i % channels;
                let xhat = (v - meanv[c]) * invstd[c];
                dx.data_mut()[i] = g.data()[i] * gammav[c] * invstd[c];
                dgamma.data_mut()[c] += g.data()[i] * xhat;
                dbeta.data_mut()[c] += g.data()[i];
            }
            Ok(vec![dx, dgamma, dbeta])
        });
        Ok(self.push(y, vec![x, gamma, beta], Some(back)))
    }

    /// Row gather from an embedding table; ids are (B, T) row indices.
    pub fn embedding(
        &mut self,
        table: ValueId,
        ids: &[usize],
        b: usize,
        t: usize,
        mut counter: Option<&mut OpCounter>,
    ) -> Result<ValueId> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(Error::InvalidShape {
                shape: tv.shape().to_vec(),
                reason: "embedding table wants rank 2".into(),
            });
        }
        let (vocab, dim) = (tv.shape()[0], tv.shape()[1]);
        if ids.len() != b * t {
            return Err(Error::ShapeMismatch {
                context: "embedding ids",
                expected: vec![b * t],
                got: vec![ids.len()],
            });
        }
        let mut y = Tensor::zeros(&[b, t, dim])?;
        for (row, &id) in ids.iter().enumerate() {
            if id >= vocab {
                return Err(Error::IndexOutOfBounds {
                    index: vec![id],
                    shape: tv.shape().to_vec(),
                });
            }
            y.data_mut()[row * dim..(row + 1) * dim]
                .copy_from_slice(&tv.data()[id * dim..(id + 1) * dim]);
        }
        if let Some(c) = counter.as_deref_mut() {
            c.other += y.len() as u64;
        }
        let ids = ids.to_vec();
        let back: BackFn = Box::new(move |g, p, _| {
            let mut dt = Tensor::zeros(p[0].shape())?;
            let dim = p[0].shape()[1];
            for (row, &id) in ids.iter().enumerate() {
                for k in 0..dim {
                    dt.data_mut()[id * dim + k] += g.data()[row * dim + k];
                }
            }
            Ok(vec![dt])
        });
        Ok(self.push(y, vec![table], Some(back)))
    }

    /// y = x * mask where the mask holds 0 or 1/(1-p) values drawn up front.
    pub fn dropout(
        &mut self,
        x: ValueId,
        mask: Tensor,
        mut counter: Option<&mut OpCounter>,
    ) -> Result<ValueId> {
        let xv = self.value(x);
        if xv.shape() != mask.shape() {
            return Err(Error::ShapeMismatch {
                context: "dropout mask",
                expected: xv.shape().to_vec(),
                got: mask.shape().to_vec(),
            });
        }
        if let Some(c) = counter.as_deref_mut() {
            c.other += xv.len() as u64;
        }
        let y = tensor::hadamard(xv, &mask, None)?;
        let back: BackFn = Box::new(move |g, _, _| Ok(vec![tensor::hadamard(g, &mask, None)?]));
        Ok(self.push(y, vec![x], Some(back)))
    }

    /// Row-wise softmax over the last axis, stabilized by the row max.
    pub fn softmax(&mut self, x: ValueId, mut counter: Option<&mut OpCounter>) -> Result<ValueId> {
        let xv = self.value(x);
        let c = *xv.shape().last().unwrap();
        if let Some(ct) = counter.as_deref_mut() {
            ct.other += xv.len() as u64;
        }
        let mut y = xv.clone();
        for row in y.data_mut().chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let back: BackFn = Box::new(move |g, _, y| {
            let c = *y.shape().last().unwrap();
            let mut dx = g.clone();
            for (grow, (yrow, drow)) in g
                .data()
                .chunks(c)
                .zip(y.data().chunks(c).zip(dx.data_mut().chunks_mut(c)))
            {
                let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                    *d = yv * (gv - dot);
                }
            }
            Ok(vec![dx])
        });
        Ok(self.push(y, vec![x], Some(back)))
    }

    /// Mean negative log likelihood of the target class per row; probabilities
    /// are clamped at 1e-12 before the log.
    pub fn cross_entropy(
        &mut self,
        probs: ValueId,
        targets: &[usize],
        mut counter: Option<&mut OpCounter>,
    ) -> Result<ValueId> {
        let pv = self.value(probs);
        let c = *pv.shape().last().unwrap();
        let rows = pv.len() / c;
        if targets.len() != rows {
            return Err(Error::ShapeMismatch {
                context: "cross_entropy targets",
                expected: vec![rows],
                got: vec![targets.len()],
            });
        }
        if let Some(ct) = counter.as_deref_mut() {
            ct.other += rows as u64;
        }
        let mut loss = 0.0;
        for (row, &t) in pv.data().chunks(c).zip(targets) {
            if t >= c {
                return Err(Error::IndexOutOfBounds {
                    index: vec![t],
                    shape: pv.shape().to_vec(),
                });
            }
            loss -= row[t].max(1e-12).ln();
        }
        loss /= rows as f64;
        let y = Tensor::new(&[1], vec![loss])?;
        let targets = targets.to_vec();
        let back: BackFn = Box::new(move |g, p, _| {
            let pv = p[0];
            let c = *pv.shape().last().unwrap();
            let rows = pv.len() / c;
            let scale = g.data()[0] / rows as f64;
            let mut dp = Tensor::zeros(pv.shape())?;
            for (r, &t) in targets.iter().enumerate() {
                let pval = pv.data()[r * c + t].max(1e-12);
                dp.data_mut()[r * c + t] = -scale / pval;
            }
            Ok(vec![dp])
        });
        Ok(self.push(y, vec![probs], Some(back)))
    }

    /// Reverse pass from a scalar root. Returns gradients for every node that
    /// influences the root, indexed by `ValueId`.
    pub fn backward(&self, root: ValueId) -> Result<Grads> {
        let root_val = &self.nodes[root.0].value;
        if root_val.len() != 1 {
            return Err(Error::InvalidConfig(
                "backward wants a scalar root".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::fill(root_val.shape(), 1.0)?);
        for i in (0..=root.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            let node = &self.nodes[i];
            let Some(back) = &node.back else {
                continue;
            };
            let g = grads[i].take().unwrap();
            let pvals: Vec<&Tensor> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let pgrads = back(&g, &pvals, &node.value)?;
            for (pid, pg) in node.parents.iter().zip(pgrads) {
                if pg.shape() != self.nodes[pid.0].value.shape() {
                    return Err(Error::ShapeMismatch {
                        context: "backward parent gradient",
                        expected: self.nodes[pid.0].value.shape().to_vec(),
                        got: pg.shape().to_vec(),
                    });
                }
                accumulate(&mut grads[pid.0], pg)?;
            }
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_scalar(mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
        let h = 1e-5;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn matmul_bias_chain_gradient() {
        let run = |w0: f64| {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(&[1, 2], vec![0.3, -0.7]).unwrap());
            let w = tape.leaf(Tensor::new(&[2, 2], vec![w0, 0.1, -0.4, 0.2]).unwrap());
            let b = tape.leaf(Tensor::new(&[2], vec![0.05, -0.02]).unwrap());
            let h = tape.matmul(x, w, None).unwrap();
            let h = tape.add_bias(h, b, None).unwrap();
            let h = tape.activation(h, Activation::Tanh, 0.5, None).unwrap();
            let s = tape.time_sum(h, None).unwrap();
            let loss = tape.reshape(s, &[1]).unwrap();
            (tape, loss)
        };
        let (tape, loss) = run(0.6);
        let grads = tape.backward(loss).unwrap();
        let gw = grads.get(ValueId(1)).unwrap();
        let fd = fd_scalar(
            |w0| {
                let (tape, loss) = run(w0);
                tape.value(loss).data()[0]
            },
            0.6,
        );
        assert!((gw.data()[0] - fd).abs() < 1e-8, "{} vs {}", gw.data()[0], fd);
    }

    #[test]
    fn softmax_cross_entropy_gradient_matches_fused_form() {
        let logits = vec![0.2, -1.3, 0.9];
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 3], logits.clone()).unwrap());
        let p = tape.softmax(x, None).unwrap();
        let loss = tape.cross_entropy(p, &[2], None).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gx = grads.get(x).unwrap();
        let probs = tape.value(p).data();
        for k in 0..3 {
            let expect = probs[k] - if k == 2 { 1.0 } else { 0.0 };
            assert!((gx.data()[k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn liaf_tau_surrogate_hand_values() {
        let mk = |uval: f64| {
            let mut tape = Tape::new();
            let u = tape.leaf(Tensor::new(&[1, 1], vec![uval]).unwrap());
            let th = tape.leaf(Tensor::new(&[1], vec![1.0]).unwrap());
            let rs = tape.leaf(Tensor::new(&[1], vec![0.0]).unwrap());
            let al = tape.leaf(Tensor::new(&[1], vec![0.5]).unwrap());
            let be = tape.leaf(Tensor::new(&[1], vec![0.0]).unwrap());
            let tau = tape
                .liaf_tau(u, th, rs, al, be, Bcast::Scalar, 0.5, None)
                .unwrap();
            let loss = tape.reshape(tau, &[1]).unwrap();
            let grads = tape.backward(loss).unwrap();
            (
                grads.get(u).unwrap().data()[0],
                grads.get(th).unwrap().data()[0],
                grads.get(rs).unwrap().data()[0],
                grads.get(al).unwrap().data()[0],
                grads.get(be).unwrap().data()[0],
            )
        };
        let (du, dth, drs, dal, dbe) = mk(1.1);
        assert_eq!(du, -0.55);
        assert_eq!(dth, 0.55);
        assert_eq!(drs, 0.5);
        assert_eq!(dal, 0.0);
        assert_eq!(dbe, 1.0);
        let (du, dth, drs, dal, _) = mk(0.3);
        assert_eq!(du, 0.5);
        assert_eq!(dth, 0.0);
        assert_eq!(drs, 0.0);
        assert_eq!(dal, 0.3);
        let (du, dth, drs, dal, _) = mk(2.0);
        assert_eq!(du, 0.0);
        assert_eq!(dth, 0.0);
        assert_eq!(drs, 0.5);
        assert_eq!(dal, 0.0);
    }

    #[test]
    fn margin_tracking() {
        let mut tape = Tape::new();
        let u = tape.leaf(Tensor::new(&[1, 2], vec![1.4, 0.8]).unwrap());
        let th = tape.leaf(Tensor::new(&[1], vec![1.0]).unwrap());
        tape.spike_out(u, th, Bcast::Scalar, 0.5, None).unwrap();
        assert!((tape.min_margin() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_gradient_fd() {
        let run = |x0: f64| {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(&[1, 4], vec![x0, -0.2, 0.7, 1.3]).unwrap());
            let gm = tape.leaf(Tensor::new(&[4], vec![1.1, 0.9, 1.0, 1.2]).unwrap());
            let bt = tape.leaf(Tensor::new(&[4], vec![0.0, 0.1, -0.1, 0.2]).unwrap());
            let y = tape.layer_norm(x, gm, bt, 1e-5, None).unwrap();
            let y2 = tape.hadamard(y, y, None).unwrap();
            let s = tape.time_sum(y2, None).unwrap();
            let loss = tape.reshape(s, &[1]).unwrap();
            (tape, loss)
        };
        let (tape, loss) = run(0.4);
        let grads = tape.backward(loss).unwrap();
        let gx = grads.get(ValueId(0)).unwrap().data()[0];
        let fd = fd_scalar(
            |x0| {
                let (tape, loss) = run(x0);
                tape.value(loss).data()[0]
            },
            0.4,
        );
        assert!((gx - fd).abs() < 1e-6, "{} vs {}", gx, fd);
    }

    #[test]
    fn conv_gradient_fd() {
        let run = |k0: f64| {
            let mut tape = Tape::new();
            let x = tape.leaf(
                Tensor::new(&[1, 3, 3, 1], (0..9).map(|i| 0.1 * i as f64 - 0.3).collect())
                    .unwrap(),
            );
            let mut kdata = vec![0.2, -0.1, 0.05, 0.3, 0.0, -0.2, 0.1, 0.15, -0.05];
            kdata[4] = k0;
            let k = tape.leaf(Tensor::new(&[3, 3, 1, 1], kdata).unwrap());
            let y = tape.conv2d(x, k, 1, None).unwrap();
            let y2 = tape.hadamard(y, y, None).unwrap();
            let f = tape.reshape(y2, &[1, 9]).unwrap();
            let s = tape.time_sum(f, None).unwrap();
            let s = tape.reshape(s, &[1, 1]).unwrap();
            let s = tape.time_sum(s, None).unwrap();
            (tape, s)
        };
        let (tape, loss) = run(0.4);
        let grads = tape.backward(loss).unwrap();
        let gk = grads.get(ValueId(1)).unwrap().data()[4];
        let fd = fd_scalar(
            |k0| {
                let (tape, loss) = run(k0);
                tape.value(loss).data()[0]
            },
            0.4,
        );
        assert!((gk - fd).abs() < 1e-7, "{} vs {}", gk, fd);
    }

    #[test]
    fn embedding_scatter_accumulates_repeats() {
        let mut tape = Tape::new();
        let table = tape.leaf(Tensor::new(&[3, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap());
        let e = tape.embedding(table, &[1, 1, 2, 0], 1, 4, None).unwrap();
        let f = tape.reshape(e, &[1, 8]).unwrap();
        let s = tape.time_sum(f, None).unwrap();
        let s2 = tape.reshape(s, &[1, 1]).unwrap();
        let loss = tape.time_sum(s2, None).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gt = grads.get(table).unwrap();
        assert_eq!(gt.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn time_sum_shapes_and_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2, 3, 1], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let s = tape.time_sum(x, None).unwrap();
        assert_eq!(tape.value(s).shape(), &[2, 1]);
        assert_eq!(tape.value(s).data(), &[6.0, 15.0]);
    }
}
