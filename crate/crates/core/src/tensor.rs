//! Dense row-major f64 tensors of rank 1 to 5, plus the small set of kernels
//! the rest of the crate is built from.
//!
//! Every reduction runs in ascending index order, so results are reproducible
//! bit for bit across runs and platforms with the same inputs.
//!
//! Kernels take an optional [`OpCounter`]. When present, scalar multiply and
//! add counts are accumulated using the conventions of the cost model (see
//! the `cost` module): an n-term accumulation costs n-1 adds, selections and
//! comparisons are free, and everything outside the multiply/add ledger goes
//! to the `other` bucket.

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 5;

/// Shape tags used by network shape inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeRole {
    /// (batch, time, features)
    SeqBatch(usize, usize, usize),
    /// (batch, time, height, width, channels)
    SpatioBatch(usize, usize, usize, usize, usize),
    /// per-sample feature vector of length L, batch implicit
    Flat(usize),
    /// convolution kernel (kh, kw, in_channels, out_channels)
    Kernel(usize, usize, usize, usize),
}

impl ShapeRole {
    pub fn dims(&self) -> Vec<usize> {
        match *self {
            ShapeRole::SeqBatch(b, t, k) => vec![b, t, k],
            ShapeRole::SpatioBatch(b, t, h, w, c) => vec![b, t, h, w, c],
            ShapeRole::Flat(l) => vec![l],
            ShapeRole::Kernel(i, j, k, l) => vec![i, j, k, l],
        }
    }
}

/// Scalar operation ledger for instrumented forward passes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub muls: u64,
    pub adds: u64,
    /// comparisons, selections, lookups, divisions inside normalizers,
    /// pooling sums: tracked but not part of the multiply/add ledger
    pub other: u64,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Broadcast pattern for per-layer parameters against activations whose
/// channel axis is the last axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bcast {
    /// parameter is a single scalar shared by every element
    Scalar,
    /// parameter has one value per channel (last axis)
    Channel,
    /// parameter matches the full per-sample element shape
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        validate_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("shape wants {} elements, data has {}", n, data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        let n: usize = shape.iter().product();
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        })
    }

    pub fn fill(shape: &[usize], value: f64) -> Result<Self> {
        let mut t = Self::zeros(shape)?;
        t.data.iter_mut().for_each(|v| *v = value);
        Ok(t)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn index_of(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len()
            || index.iter().zip(&self.shape).any(|(i, s)| i >= s)
        {
            return Err(Error::IndexOutOfBounds {
                index: index.to_vec(),
                shape: self.shape.clone(),
            });
        }
        let mut flat = 0;
        for (i, s) in index.iter().zip(&self.shape) {
            flat = flat * s + i;
        }
        Ok(flat)
    }

    pub fn at(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.index_of(index)?])
    }

    pub fn set(&mut self, index: &[usize], value: f64) -> Result<()> {
        let i = self.index_of(index)?;
        self.data[i] = value;
        Ok(())
    }

    /// Same data, new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                context: "reshape",
                expected: self.shape.clone(),
                got: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Bitwise equality, distinguishing 0.0 from -0.0.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("rank must be 1..={}", MAX_RANK),
        });
    }
    if shape.iter().any(|&s| s == 0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "zero-sized extents are not allowed".into(),
        });
    }
    Ok(())
}

fn count(counter: &mut Option<&mut OpCounter>, muls: u64, adds: u64, other: u64) {
    if let Some(c) = counter.as_deref_mut() {
        c.muls += muls;
        c.adds += adds;
        c.other += other;
    }
}

/// (M,K) x (K,L) -> (M,L). Dot products accumulate in ascending k order.
pub fn matmul(a: &Tensor, b: &Tensor, mut counter: Option<&mut OpCounter>) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::ShapeMismatch {
            context: "matmul",
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let l = b.shape()[1];
    let mut out = Tensor::zeros(&[m, l])?;
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out.data[i * l..(i + 1) * l];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b.data[kk * l..(kk + 1) * l];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    count(
        &mut counter,
        (m * l * k) as u64,
        (m * l * (k - 1)) as u64,
        0,
    );
    Ok(out)
}

/// Adds a per-channel bias over the last axis.
pub fn add_bias(x: &Tensor, bias: &Tensor, mut counter: Option<&mut OpCounter>) -> Result<Tensor> {
    let l = *x.shape().last().unwrap();
    if bias.rank() != 1 || bias.len() != l {
        return Err(Error::ShapeMismatch {
            context: "add_bias",
            expected: vec![l],
            got: bias.shape().to_vec(),
        });
    }
    let mut out = x.clone();
    for chunk in out.data.chunks_mut(l) {
        for (o, b) in chunk.iter_mut().zip(&bias.data) {
            *o += b;
        }
    }
    count(&mut counter, 0, x.len() as u64, 0);
    Ok(out)
}

/// Reduces a gradient with the full activation shape down to a bias of the
/// last-axis length by summing all leading axes in ascending order.
pub fn sum_to_last_axis(x: &Tensor) -> Result<Tensor> {
    let l = *x.shape().last().unwrap();
    let mut out = Tensor::zeros(&[l])?;
    for chunk in x.data.chunks(l) {
        for (o, v) in out.data.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Ok(out)
}

pub fn add(a: &Tensor, b: &Tensor, mut counter: Option<&mut OpCounter>) -> Result<Tensor> {
    binary_same_shape(a, b, "add")?;
    let mut out = a.clone();
    for (o, v) in out.data.iter_mut().zip(&b.data) {
        *o += v;
    }
    count(&mut counter, 0, a.len() as u64, 0);
    Ok(out)
}

pub fn sub(a: &Tensor, b: &Tensor, mut counter: Option<&mut OpCounter>) -> Result<Tensor> {
    binary_same_shape(a, b, "sub")?;
    let mut out = a.clone();
    for (o, v) in out.data.iter_mut().zip(&b.data) {
        *o -= v;
    }
    count(&mut counter, 0, a.len() as u64, 0);
    Ok(out)
}

pub fn hadamard(a: &Tensor, b: &Tensor, mut counter: Option<&mut OpCounter>) -> Result<Tensor> {
    binary_same_shape(a, b, "hadamard")?;
    let mut out = a.clone();
    for (o, v) in out.data.iter_mut().zip(&b.data) {
        *o *= v;
    }
    count(&mut counter, a.len() as u64, 0, 0);
    Ok(out)
}

pub fn scale(a: &Tensor, c: f64, mut counter: Option<&mut OpCounter>) -> Result<Tensor> {
    let mut out = a.clone();
    for o in out.data.iter_mut() {
        *o *= c;
    }
    count(&mut counter, a.len() as u64, 0, 0);
    Ok(out)
}

pub fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let mut out = a.clone();
    for o in out.data.iter_mut() {
        *o = f(*o);
    }
    out
}

/// Transpose of a rank-2 tensor.
pub fn transpose2(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(Error::InvalidShape {
            shape: a.shape().to_vec(),
            reason: "transpose2 wants rank 2".into(),
        });
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut out = Tensor::zeros(&[n, m])?;
    for i in 0..m {
        for j in 0..n {
            out.data[j * m + i] = a.data[i * n + j];
        }
    }
    Ok(out)
}

/// Sum over the time axis of a (B, T, ...) tensor. Tracked as `other`: the
/// readout accumulation sits outside the per-layer multiply/add ledger.
pub fn reduce_sum_time(x: &Tensor, mut counter: Option<&mut OpCounter>) -> Result<Tensor> {
    if x.rank() < 2 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "reduce_sum_time wants rank >= 2".into(),
        });
    }
    let b = x.shape()[0];
    let t = x.shape()[1];
    let rest: usize = x.shape()[2..].iter().product();
    let mut oshape = vec![b];
    oshape.extend_from_slice(&x.shape()[2..]);
    let mut out = Tensor::zeros(&oshape)?;
    for bi in 0..b {
        let ob = bi * rest;
        for ti in 0..t {
            let xb = (bi * t + ti) * rest;
            for (o, v) in out.data[ob..ob + rest].iter_mut().zip(&x.data[xb..xb + rest]) {
                *o += v;
            }
        }
    }
    count(&mut counter, 0, 0, (b * t * rest) as u64);
    Ok(out)
}

/// Repeats a (B, ...) tensor T times into (B, T, ...).
pub fn broadcast_time(x: &Tensor, t: usize) -> Result<Tensor> {
    if x.rank() < 1 || t == 0 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "broadcast_time wants rank >= 1 and t > 0".into(),
        });
    }
    let b = x.shape()[0];
    let rest: usize = x.shape()[1..].iter().product();
    let mut oshape = vec![b, t];
    oshape.extend_from_slice(&x.shape()[1..]);
    let mut out = Tensor::zeros(&oshape)?;
    for bi in 0..b {
        let src = &x.data[bi * rest..(bi + 1) * rest];
        for ti in 0..t {
            let dst = (bi * t + ti) * rest;
            out.data[dst..dst + rest].copy_from_slice(src);
        }
    }
    Ok(out)
}

fn binary_same_shape(a: &Tensor, b: &Tensor, context: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            context,
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Expected parameter length for a broadcast pattern against `x`.
fn bcast_len(x: &Tensor, bcast: Bcast) -> usize {
    match bcast {
        Bcast::Scalar => 1,
        Bcast::Channel => *x.shape().last().unwrap(),
        Bcast::Full => x.len() / x.shape()[0],
    }
}

fn check_bcast(x: &Tensor, p: &Tensor, bcast: Bcast, context: &'static str) -> Result<()> {
    let want = bcast_len(x, bcast);
    if p.rank() != 1 || p.len() != want {
        return Err(Error::ShapeMismatch {
            context,
            expected: vec![want],
            got: p.shape().to_vec(),
        });
    }
    Ok(())
}

/// Value of broadcast parameter `p` for flat element `i` of `x`.
/// `Full` broadcasts over the leading batch axis only.
#[inline]
fn bcast_at(p: &[f64], bcast: Bcast, i: usize, channels: usize, per_sample: usize) -> f64 {
    match bcast {
        Bcast::Scalar => p[0],
        Bcast::Channel => p[i % channels],
        Bcast::Full => p[i % per_sample],
    }
}

/// y = x * p with p broadcast per `bcast`.
pub fn mul_bcast(
    x: &Tensor,
    p: &Tensor,
    bcast: Bcast,
    mut counter: Option<&mut OpCounter>,
) -> Result<Tensor> {
    check_bcast(x, p, bcast, "mul_bcast")?;
    let channels = *x.shape().last().unwrap();
    let per_sample = x.len() / x.shape()[0];
    let mut out = x.clone();
    for (i, o) in out.data.iter_mut().enumerate() {
        *o *= bcast_at(&p.data, bcast, i, channels, per_sample);
    }
    count(&mut counter, x.len() as u64, 0, 0);
    Ok(out)
}

/// y = x + p with p broadcast per `bcast`.
pub fn add_bcast(
    x: &Tensor,
    p: &Tensor,
    bcast: Bcast,
    mut counter: Option<&mut OpCounter>,
) -> Result<Tensor> {
    check_bcast(x, p, bcast, "add_bcast")?;
    let channels = *x.shape().last().unwrap();
    let per_sample = x.len() / x.shape()[0];
    let mut out = x.clone();
    for (i, o) in out.data.iter_mut().enumerate() {
        *o += bcast_at(&p.data, bcast, i, channels, per_sample);
    }
    count(&mut counter, 0, x.len() as u64, 0);
    Ok(out)
}

/// y = x - p with p broadcast per `bcast`. The subtraction is tracked in the
/// `other` bucket: it only appears in output staging (threshold-referenced
/// activations), which the cost ledger folds into the activation lookup.
pub fn sub_bcast_uncounted(
    x: &Tensor,
    p: &Tensor,
    bcast: Bcast,
    mut counter: Option<&mut OpCounter>,
) -> Result<Tensor> {
    check_bcast(x, p, bcast, "sub_bcast")?;
    let channels = *x.shape().last().unwrap();
    let per_sample = x.len() / x.shape()[0];
    let mut out = x.clone();
    for (i, o) in out.data.iter_mut().enumerate() {
        *o -= bcast_at(&p.data, bcast, i, channels, per_sample);
    }
    count(&mut counter, 0, 0, x.len() as u64);
    Ok(out)
}

/// y = a*x + b with a, b broadcast per `bcast`; the leak update of the
/// membrane state. One multiply and one add per element.
pub fn affine_bcast(
    x: &Tensor,
    a: &Tensor,
    b: &Tensor,
    bcast: Bcast,
    mut counter: Option<&mut OpCounter>,
) -> Result<Tensor> {
    check_bcast(x, a, bcast, "affine_bcast")?;
    check_bcast(x, b, bcast, "affine_bcast")?;
    let channels = *x.shape().last().unwrap();
    let per_sample = x.len() / x.shape()[0];
    let mut out = x.clone();
    for (i, o) in out.data.iter_mut().enumerate() {
        let av = bcast_at(&a.data, bcast, i, channels, per_sample);
        let bv = bcast_at(&b.data, bcast, i, channels, per_sample);
        *o = av * *o + bv;
    }
    count(&mut counter, x.len() as u64, x.len() as u64, 0);
    Ok(out)
}

/// Reduces a full-shape gradient down to the parameter shape of `bcast` by
/// summing every broadcast position in ascending index order.
pub fn reduce_bcast(g: &Tensor, bcast: Bcast) -> Result<Tensor> {
    let channels = *g.shape().last().unwrap();
    let per_sample = g.len() / g.shape()[0];
    let len = bcast_len(g, bcast);
    let mut out = Tensor::zeros(&[len])?;
    for (i, v) in g.data.iter().enumerate() {
        let j = match bcast {
            Bcast::Scalar => 0,
            Bcast::Channel => i % channels,
            Bcast::Full => i % per_sample,
        };
        out.data[j] += v;
    }
    Ok(out)
}

/// 2-D cross-correlation with zero padding.
///
/// x: (B, H, W, K), kernel: (I, J, K, L), both kernel extents odd.
/// Output: (B, H', W', L) with H' = H + 2*pad - I + 1.
pub fn conv2d(
    x: &Tensor,
    kernel: &Tensor,
    pad: usize,
    mut counter: Option<&mut OpCounter>,
) -> Result<Tensor> {
    let (b, h, w, kin, ki, kj, l) = conv2d_check(x, kernel)?;
    let oh = out_extent(h, pad, ki)?;
    let ow = out_extent(w, pad, kj)?;
    let mut out = Tensor::zeros(&[b, oh, ow, l])?;
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut padded = vec![0.0; ph * pw * kin];
    for bi in 0..b {
        pad_plane(&x.data[bi * h * w * kin..], h, w, kin, pad, &mut padded);
        let obase = bi * oh * ow * l;
        for oy in 0..oh {
            for ox in 0..ow {
                let acc = &mut out.data[obase + (oy * ow + ox) * l..obase + (oy * ow + ox + 1) * l];
                for i in 0..ki {
                    for j in 0..kj {
                        let xbase = ((oy + i) * pw + (ox + j)) * kin;
                        let kbase = (i * kj + j) * kin * l;
                        for k in 0..kin {
                            let xv = padded[xbase + k];
                            let krow = &kernel.data[kbase + k * l..kbase + (k + 1) * l];
                            for (a, &kv) in acc.iter_mut().zip(krow) {
                                *a += xv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    let q = (ki * kj * kin) as u64;
    let outs = (b * oh * ow * l) as u64;
    count(&mut counter, outs * q, outs * (q - 1), 0);
    Ok(out)
}

/// Gradient of conv2d w.r.t. its input.
pub fn conv2d_grad_input(
    g: &Tensor,
    kernel: &Tensor,
    in_h: usize,
    in_w: usize,
    pad: usize,
) -> Result<Tensor> {
    let (ki, kj, kin, l) = kernel_dims(kernel)?;
    let b = g.shape()[0];
    let (oh, ow) = (g.shape()[1], g.shape()[2]);
    let (ph, pw) = (in_h + 2 * pad, in_w + 2 * pad);
    let mut dx = Tensor::zeros(&[b, in_h, in_w, kin])?;
    let mut dpad = vec![0.0; ph * pw * kin];
    for bi in 0..b {
        dpad.iter_mut().for_each(|v| *v = 0.0);
        for oy in 0..oh {
            for ox in 0..ow {
                let grow = &g.data[((bi * oh + oy) * ow + ox) * l..((bi * oh + oy) * ow + ox + 1) * l];
                for i in 0..ki {
                    for j in 0..kj {
                        let xbase = ((oy + i) * pw + (ox + j)) * kin;
                        let kbase = (i * kj + j) * kin * l;
                        for k in 0..kin {
                            let krow = &kernel.data[kbase + k * l..kbase + (k + 1) * l];
                            let mut s = 0.0;
                            for (gv, kv) in grow.iter().zip(krow) {
                                s += gv * kv;
                            }
                            dpad[xbase + k] += s;
                        }
                    }
                }
            }
        }
        crop_plane(&dpad, in_h, in_w, kin, pad, &mut dx.data[bi * in_h * in_w * kin..]);
    }
    Ok(dx)
}

/// Gradient of conv2d w.r.t. its kernel.
pub fn conv2d_grad_kernel(
    x: &Tensor,
    g: &Tensor,
    ki: usize,
    kj: usize,
    pad: usize,
) -> Result<Tensor> {
    let (b, h, w, kin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow, l) = (g.shape()[1], g.shape()[2], g.shape()[3]);
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut dk = Tensor::zeros(&[ki, kj, kin, l])?;
    let mut padded = vec![0.0; ph * pw * kin];
    for bi in 0..b {
        pad_plane(&x.data[bi * h * w * kin..], h, w, kin, pad, &mut padded);
        for oy in 0..oh {
            for ox in 0..ow {
                let grow = &g.data[((bi * oh + oy) * ow + ox) * l..((bi * oh + oy) * ow + ox + 1) * l];
                for i in 0..ki {
                    for j in 0..kj {
                        let xbase = ((oy + i) * pw + (ox + j)) * kin;
                        let kbase = (i * kj + j) * kin * l;
                        for k in 0..kin {
                            let xv = padded[xbase + k];
                            let drow = &mut dk.data[kbase + k * l..kbase + (k + 1) * l];
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += xv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(dk)
}

/// 3-D cross-correlation over (time, height, width) with zero padding.
///
/// x: (B, T, H, W, K), kernel: (U, I, J, K, L), all kernel extents odd.
pub fn conv3d(
    x: &Tensor,
    kernel: &Tensor,
    pad_t: usize,
    pad_s: usize,
    mut counter: Option<&mut OpCounter>,
) -> Result<Tensor> {
    if x.rank() != 5 || kernel.rank() != 5 {
        return Err(Error::ShapeMismatch {
            context: "conv3d",
            expected: vec![5],
            got: vec![x.rank(), kernel.rank()],
        });
    }
    let (b, t, h, w, kin) = (
        x.shape()[0],
        x.shape()[1],
        x.shape()[2],
        x.shape()[3],
        x.shape()[4],
    );
    let (ku, ki, kj, kk, l) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
        kernel.shape()[4],
    );
    if kk != kin {
        return Err(Error::ShapeMismatch {
            context: "conv3d",
            expected: vec![kin],
            got: vec![kk],
        });
    }
    odd_kernel(&[ku, ki, kj])?;
    let ot = out_extent(t, pad_t, ku)?;
    let oh = out_extent(h, pad_s, ki)?;
    let ow = out_extent(w, pad_s, kj)?;
    let mut out = Tensor::zeros(&[b, ot, oh, ow, l])?;
    for bi in 0..b {
        for oz in 0..ot {
            for oy in 0..oh {
                for ox in 0..ow {
                    let obase = (((bi * ot + oz) * oh + oy) * ow + ox) * l;
                    let acc = &mut out.data[obase..obase + l];
                    for u in 0..ku {
                        let tz = (oz + u) as isize - pad_t as isize;
                        if tz < 0 || tz >= t as isize {
                            continue;
                        }
                        for i in 0..ki {
                            let ty = (oy + i) as isize - pad_s as isize;
                            if ty < 0 || ty >= h as isize {
                                continue;
                            }
                            for j in 0..kj {
                                let tx = (ox + j) as isize - pad_s as isize;
                                if tx < 0 || tx >= w as isize {
                                    continue;
                                }
                                let xbase =
                                    (((bi * t + tz as usize) * h + ty as usize) * w + tx as usize)
                                        * kin;
                                let kbase = ((u * ki + i) * kj + j) * kin * l;
                                for k in 0..kin {
                                    let xv = x.data[xbase + k];
                                    let krow = &kernel.data[kbase + k * l..kbase + (k + 1) * l];
                                    for (a, &kv) in acc.iter_mut().zip(krow) {
                                        *a += xv * kv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let q = (ku * ki * kj * kin) as u64;
    let outs = (b * ot * oh * ow * l) as u64;
    count(&mut counter, outs * q, outs * (q - 1), 0);
    Ok(out)
}

pub fn conv3d_grad_input(
    g: &Tensor,
    kernel: &Tensor,
    in_t: usize,
    in_h: usize,
    in_w: usize,
    pad_t: usize,
    pad_s: usize,
) -> Result<Tensor> {
    let (ku, ki, kj, kin, l) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
        kernel.shape()[4],
    );
    let b = g.shape()[0];
    let (ot, oh, ow) = (g.shape()[1], g.shape()[2], g.shape()[3]);
    let mut dx = Tensor::zeros(&[b, in_t, in_h, in_w, kin])?;
    for bi in 0..b {
        for oz in 0..ot {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gbase = (((bi * ot + oz) * oh + oy) * ow + ox) * l;
                    let grow = &g.data[gbase..gbase + l];
                    for u in 0..ku {
                        let tz = (oz + u) as isize - pad_t as isize;
                        if tz < 0 || tz >= in_t as isize {
                            continue;
                        }
                        for i in 0..ki {
                            let ty = (oy + i) as isize - pad_s as isize;
                            if ty < 0 || ty >= in_h as isize {
                                continue;
                            }
                            for j in 0..kj {
                                let tx = (ox + j) as isize - pad_s as isize;
                                if tx < 0 || tx >= in_w as isize {
                                    continue;
                                }
                                let xbase = (((bi * in_t + tz as usize) * in_h + ty as usize)
                                    * in_w
                                    + tx as usize)
                                    * kin;
                                let kbase = ((u * ki + i) * kj + j) * kin * l;
                                for k in 0..kin {
                                    let krow = &kernel.data[kbase + k * l..kbase + (k + 1) * l];
                                    let mut s = 0.0;
                                    for (gv, kv) in grow.iter().zip(krow) {
                                        s += gv * kv;
                                    }
                                    dx.data[xbase + k] += s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}

pub fn conv3d_grad_kernel(
    x: &Tensor,
    g: &Tensor,
    ku: usize,
    ki: usize,
    kj: usize,
    pad_t: usize,
    pad_s: usize,
) -> Result<Tensor> {
    let (b, t, h, w, kin) = (
        x.shape()[0],
        x.shape()[1],
        x.shape()[2],
        x.shape()[3],
        x.shape()[4],
    );
    let (ot, oh, ow, l) = (g.shape()[1], g.shape()[2], g.shape()[3], g.shape()[4]);
    let mut dk = Tensor::zeros(&[ku, ki, kj, kin, l])?;
    for bi in 0..b {
        for oz in 0..ot {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gbase = (((bi * ot + oz) * oh + oy) * ow + ox) * l;
                    let grow = &g.data[gbase..gbase + l];
                    for u in 0..ku {
                        let tz = (oz + u) as isize - pad_t as isize;
                        if tz < 0 || tz >= t as isize {
                            continue;
                        }
                        for i in 0..ki {
                            let ty = (oy + i) as isize - pad_s as isize;
                            if ty < 0 || ty >= h as isize {
                                continue;
                            }
                            for j in 0..kj {
                                let tx = (ox + j) as isize - pad_s as isize;
                                if tx < 0 || tx >= w as isize {
                                    continue;
                                }
                                let xbase = (((bi * t + tz as usize) * h + ty as usize) * w
                                    + tx as usize)
                                    * kin;
                                let kbase = ((u * ki + i) * kj + j) * kin * l;
                                for k in 0..kin {
                                    let xv = x.data[xbase + k];
                                    let drow = &mut dk.data[kbase + k * l..kbase + (k + 1) * l];
                                    for (d, gv) in drow.iter_mut().zip(grow) {
                                        *d += xv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(dk)
}

/// Mean over non-overlapping (p, q) windows of the (H, W) axes.
/// Input rank >= 3 laid out (..., H, W, C); H and W must divide evenly.
/// Window sums and the scale live in the `other` bucket.
pub fn avg_pool2d(
    x: &Tensor,
    p: usize,
    q: usize,
    mut counter: Option<&mut OpCounter>,
) -> Result<Tensor> {
    if x.rank() < 3 || p == 0 || q == 0 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "avg_pool2d wants rank >= 3 and nonzero window".into(),
        });
    }
    let r = x.rank();
    let (h, w, c) = (x.shape()[r - 3], x.shape()[r - 2], x.shape()[r - 1]);
    if h % p != 0 || w % q != 0 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: format!("pool window ({},{}) must divide ({},{})", p, q, h, w),
        });
    }
    let lead: usize = x.shape()[..r - 3].iter().product();
    let (oh, ow) = (h / p, w / q);
    let mut oshape = x.shape().to_vec();
    oshape[r - 3] = oh;
    oshape[r - 2] = ow;
    let mut out = Tensor::zeros(&oshape)?;
    let inv = 1.0 / (p * q) as f64;
    for n in 0..lead {
        let xb = n * h * w * c;
        let ob = n * oh * ow * c;
        for oy in 0..oh {
            for ox in 0..ow {
                let acc = &mut out.data[ob + (oy * ow + ox) * c..ob + (oy * ow + ox + 1) * c];
                for dy in 0..p {
                    for dx in 0..q {
                        let xrow = xb + ((oy * p + dy) * w + (ox * q + dx)) * c;
                        for (a, v) in acc.iter_mut().zip(&x.data[xrow..xrow + c]) {
                            *a += v;
                        }
                    }
                }
                for a in acc.iter_mut() {
                    *a *= inv;
                }
            }
        }
    }
    count(&mut counter, 0, 0, (lead * oh * ow * c * (p * q)) as u64);
    Ok(out)
}

/// Gradient of avg_pool2d: spreads each output gradient evenly over its window.
pub fn avg_pool2d_grad(g: &Tensor, in_shape: &[usize], p: usize, q: usize) -> Result<Tensor> {
    let r = in_shape.len();
    let (h, w, c) = (in_shape[r - 3], in_shape[r - 2], in_shape[r - 1]);
    let lead: usize = in_shape[..r - 3].iter().product();
    let (oh, ow) = (h / p, w / q);
    let inv = 1.0 / (p * q) as f64;
    let mut dx = Tensor::zeros(in_shape)?;
    for n in 0..lead {
        let xb = n * h * w * c;
        let ob = n * oh * ow * c;
        for oy in 0..oh {
            for ox in 0..ow {
                let grow = &g.data[ob + (oy * ow + ox) * c..ob + (oy * ow + ox + 1) * c];
                for dy in 0..p {
                    for dx_ in 0..q {
                        let xrow = xb + ((oy * p + dy) * w + (ox * q + dx_)) * c;
                        for (d, gv) in dx.data[xrow..xrow + c].iter_mut().zip(grow) {
                            *d += gv * inv;
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}

/// Mean over the time axis of a (B, T, ...) tensor. Tracked as `other`.
pub fn reduce_mean_time(x: &Tensor, mut counter: Option<&mut OpCounter>) -> Result<Tensor> {
    if x.rank() < 2 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "reduce_mean_time wants rank >= 2".into(),
        });
    }
    let b = x.shape()[0];
    let t = x.shape()[1];
    let rest: usize = x.shape()[2..].iter().product();
    let mut oshape = vec![b];
    oshape.extend_from_slice(&x.shape()[2..]);
    let mut out = Tensor::zeros(&oshape)?;
    let inv = 1.0 / t as f64;
    for bi in 0..b {
        let ob = bi * rest;
        for ti in 0..t {
            let xb = (bi * t + ti) * rest;
            for (o, v) in out.data[ob..ob + rest].iter_mut().zip(&x.data[xb..xb + rest]) {
                *o += v;
            }
        }
        for o in out.data[ob..ob + rest].iter_mut() {
            *o *= inv;
        }
    }
    count(&mut counter, 0, 0, (b * t * rest) as u64);
    Ok(out)
}

/// Extracts time step t of a (B, T, ...) tensor as (B, ...).
pub fn select_time(x: &Tensor, t: usize) -> Result<Tensor> {
    let b = x.shape()[0];
    let steps = x.shape()[1];
    if t >= steps {
        return Err(Error::IndexOutOfBounds {
            index: vec![t],
            shape: x.shape().to_vec(),
        });
    }
    let rest: usize = x.shape()[2..].iter().product();
    let mut oshape = vec![b];
    oshape.extend_from_slice(&x.shape()[2..]);
    let mut out = Tensor::zeros(&oshape)?;
    for bi in 0..b {
        let src = (bi * steps + t) * rest;
        out.data[bi * rest..(bi + 1) * rest].copy_from_slice(&x.data[src..src + rest]);
    }
    Ok(out)
}

/// Stacks T tensors of shape (B, ...) into (B, T, ...).
pub fn stack_time(steps: &[Tensor]) -> Result<Tensor> {
    if steps.is_empty() {
        return Err(Error::InvalidShape {
            shape: vec![],
            reason: "stack_time needs at least one step".into(),
        });
    }
    let b = steps[0].shape()[0];
    let rest: usize = steps[0].shape()[1..].iter().product();
    let t = steps.len();
    let mut oshape = vec![b, t];
    oshape.extend_from_slice(&steps[0].shape()[1..]);
    let mut out = Tensor::zeros(&oshape)?;
    for (ti, s) in steps.iter().enumerate() {
        if s.shape() != steps[0].shape() {
            return Err(Error::ShapeMismatch {
                context: "stack_time",
                expected: steps[0].shape().to_vec(),
                got: s.shape().to_vec(),
            });
        }
        for bi in 0..b {
            let dst = (bi * t + ti) * rest;
            out.data[dst..dst + rest].copy_from_slice(&s.data[bi * rest..(bi + 1) * rest]);
        }
    }
    Ok(out)
}

fn conv2d_check(
    x: &Tensor,
    kernel: &Tensor,
) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    if x.rank() != 4 || kernel.rank() != 4 {
        return Err(Error::ShapeMismatch {
            context: "conv2d",
            expected: vec![4],
            got: vec![x.rank(), kernel.rank()],
        });
    }
    let (b, h, w, kin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ki, kj, kk, l) = kernel_dims(kernel)?;
    if kk != kin {
        return Err(Error::ShapeMismatch {
            context: "conv2d",
            expected: vec![kin],
            got: vec![kk],
        });
    }
    Ok((b, h, w, kin, ki, kj, l))
}

fn kernel_dims(kernel: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (ki, kj, kk, l) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    odd_kernel(&[ki, kj])?;
    Ok((ki, kj, kk, l))
}

fn odd_kernel(extents: &[usize]) -> Result<()> {
    if extents.iter().any(|e| e % 2 == 0) {
        return Err(Error::InvalidShape {
            shape: extents.to_vec(),
            reason: "kernel extents must be odd".into(),
        });
    }
    Ok(())
}

fn out_extent(n: usize, pad: usize, k: usize) -> Result<usize> {
    let full = n + 2 * pad;
    if full < k {
        return Err(Error::InvalidShape {
            shape: vec![n, pad, k],
            reason: "kernel larger than padded input".into(),
        });
    }
    Ok(full - k + 1)
}

fn pad_plane(src: &[f64], h: usize, w: usize, c: usize, pad: usize, dst: &mut [f64]) {
    let pw = w + 2 * pad;
    dst.iter_mut().for_each(|v| *v = 0.0);
    for y in 0..h {
        let srow = y * w * c;
        let drow = ((y + pad) * pw + pad) * c;
        dst[drow..drow + w * c].copy_from_slice(&src[srow..srow + w * c]);
    }
}

fn crop_plane(src: &[f64], h: usize, w: usize, c: usize, pad: usize, dst: &mut [f64]) {
    let pw = w + 2 * pad;
    for y in 0..h {
        let srow = ((y + pad) * pw + pad) * c;
        let drow = y * w * c;
        dst[drow..drow + w * c].copy_from_slice(&src[srow..srow + w * c]);
    }
}
