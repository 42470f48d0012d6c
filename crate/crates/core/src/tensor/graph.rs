use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Convolution hyper-parameters. Padding is always `kernel / 2` (zeros).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
}

/// Batch normalization mode. Eval mode reads frozen running statistics.
#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a> {
    Train,
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel statistics of one train-mode batch normalization call.
/// `var` is the unbiased estimate, as used for running averages.
#[derive(Clone, Debug, PartialEq)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Matmul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
    },
    Conv1dChannels {
        x: Var,
        w: Var,
    },
    ChannelBias(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    GlobalAvgPool(Var),
    ChannelMul(Var, Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    GroupedLinear {
        x: Var,
        w: Var,
        b: Option<Var>,
        groups: usize,
    },
    ElementwiseAffine {
        x: Var,
        w: Var,
        b: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
}

#[derive(Debug)]
struct Record {
    output: Var,
    op: Op,
}

/// Define-by-run computation graph.
///
/// Values live in an arena indexed by [`Var`]. An op is recorded only when
/// one of its inputs requires a gradient; the record order is a valid
/// topological order, and backward visits it in exact reverse.
#[derive(Debug, Default)]
pub struct Graph {
    values: Vec<Tensor>,
    requires_grad: Vec<bool>,
    grads: Vec<Option<Vec<f64>>>,
    records: Vec<Record>,
    consumed: bool,
    seed_scale: Option<f64>,
    relu_signature: u64,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A constant input: no gradient is tracked.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false)
    }

    /// A leaf whose gradient is wanted.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    /// Gradient of the last backward pass, if `v` received one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor shaped like the value; zeros when `v` was
    /// unreachable from the loss.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.values[v.0].shape();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Number of recorded (differentiable) operations.
    pub fn num_records(&self) -> usize {
        self.records.len()
    }

    /// Test hook: scale the backward seed so every gradient is wrong.
    pub fn inject_backward_fault(&mut self, scale: f64) {
        self.seed_scale = Some(scale);
    }

    fn push(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let id = Var(self.values.len());
        self.values.push(value);
        self.requires_grad.push(requires_grad);
        self.grads.push(None);
        id
    }

    fn emit(&mut self, name: &'static str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let rg = inputs.iter().any(|v| self.requires_grad[v.0]);
        let out = self.push(value, rg);
        if rg {
            self.records.push(Record { output: out, op });
        }
        Ok(out)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        self.emit("add", v, &[a, b], Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        self.emit("sub", v, &[a, b], Op::Sub(a, b))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        self.emit("mul", v, &[a, b], Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.map(x, |t| t * c);
        self.emit("scale", v, &[x], Op::Scale(x, c))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.emit("sum", Tensor::scalar(s), &[x], Op::Sum(x))
    }

    /// `[m,k] · [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(&[m, n], out)?;
        self.emit("matmul", t, &[a, b], Op::Matmul(a, b))
    }

    /// Fully connected map: `x[B,in] · w[out,in]ᵀ + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::shape("linear", &sx, &sw));
        }
        let (batch, inp, outp) = (sx[0], sx[1], sw[0]);
        if let Some(b) = b {
            if self.shape(b) != [outp] {
                return Err(Error::shape("linear", self.shape(b), &[outp]));
            }
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = b.map(|b| self.value(b).data());
        let mut out = vec![0.0; batch * outp];
        for r in 0..batch {
            let xr = &xd[r * inp..(r + 1) * inp];
            for o in 0..outp {
                let wr = &wd[o * inp..(o + 1) * inp];
                let mut acc = bd.map_or(0.0, |b| b[o]);
                for (xv, wv) in xr.iter().zip(wr) {
                    acc += xv * wv;
                }
                out[r * outp + o] = acc;
            }
        }
        let t = Tensor::new(&[batch, outp], out)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        self.emit("linear", t, &ins, Op::Linear { x, w, b })
    }

    /// 2-D convolution of `x[B,Cin,H,W]` with `w[Cout,Cin,k,k]`, zero padding
    /// `k/2`, via patch gather and matrix multiply.
    pub fn conv2d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] || spec.stride == 0 {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        let (batch, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, k) = (sw[0], sw[2]);
        if h + 2 * (k / 2) < k || wd + 2 * (k / 2) < k {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        let geom = ConvGeom::new(cin, h, wd, k, spec.stride);
        let (plen, olen) = (geom.patch_len(), geom.out_len());
        let xd = self.value(x).data();
        let wdata = self.value(w).data();
        let mut out = vec![0.0; batch * cout * olen];
        let mut cols = vec![0.0; plen * olen];
        let in_len = cin * h * wd;
        for b in 0..batch {
            kernels::im2col(&xd[b * in_len..(b + 1) * in_len], &geom, &mut cols);
            let ob = &mut out[b * cout * olen..(b + 1) * cout * olen];
            kernels::matmul_acc(wdata, &cols, ob, cout, plen, olen);
        }
        let t = Tensor::new(&[batch, cout, geom.out_h, geom.out_w], out)?;
        self.emit(
            "conv2d",
            t,
            &[x, w],
            Op::Conv2d {
                x,
                w,
                stride: spec.stride,
            },
        )
    }

    /// 1-D convolution across the channel axis of `x[B,C]` with an odd
    /// kernel `w[k]` and same-length zero padding.
    pub fn conv1d_channels(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 1 || sw[0] % 2 == 0 {
            return Err(Error::shape("conv1d_channels", &sx, &sw));
        }
        let (batch, c, k) = (sx[0], sx[1], sw[0]);
        let half = k / 2;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; batch * c];
        for b in 0..batch {
            for ch in 0..c {
                let mut acc = 0.0;
                for (j, wv) in wd.iter().enumerate() {
                    let src = ch as isize + j as isize - half as isize;
                    if src >= 0 && (src as usize) < c {
                        acc += wv * xd[b * c + src as usize];
                    }
                }
                out[b * c + ch] = acc;
            }
        }
        let t = Tensor::new(&[batch, c], out)?;
        self.emit("conv1d_channels", t, &[x, w], Op::Conv1dChannels { x, w })
    }

    /// Add `b[C]` to every channel of `x[B,C,...]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sx.len() < 2 || sb != [sx[1]] {
            return Err(Error::shape("add_channel_bias", &sx, &sb));
        }
        let c = sx[1];
        let spatial: usize = sx[2..].iter().product();
        let bd = self.value(b).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[(i / spatial) % c])
            .collect();
        let t = Tensor::new(&sx, out)?;
        self.emit("add_channel_bias", t, &[x, b], Op::ChannelBias(x, b))
    }

    /// Hash of the sign pattern of every ReLU input so far. Two passes
    /// with equal signatures took the same branch at every kink.
    pub fn relu_signature(&self) -> u64 {
        self.relu_signature
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let mut sig = self.relu_signature;
        for &t in self.value(x).data() {
            sig = (sig ^ (t > 0.0) as u64).wrapping_mul(0x0000_0100_0000_01B3);
        }
        self.relu_signature = sig ^ 0xCBF2_9CE4_8422_2325;
        let v = self.map(x, |t| if t > 0.0 { t } else { 0.0 });
        self.emit("relu", v, &[x], Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.map(x, sigmoid);
        self.emit("sigmoid", v, &[x], Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let v = self.map(x, f64::tanh);
        self.emit("tanh", v, &[x], Op::Tanh(x))
    }

    /// Spatial mean per channel: `[B,C,...] → [B,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return Err(Error::shape("global_avg_pool", &s, &[0, 0, 0]));
        }
        let (batch, c) = (s[0], s[1]);
        let spatial: usize = s[2..].iter().product();
        let xd = self.value(x).data();
        let out: Vec<f64> = (0..batch * c)
            .map(|i| xd[i * spatial..(i + 1) * spatial].iter().sum::<f64>() / spatial as f64)
            .collect();
        let t = Tensor::new(&[batch, c], out)?;
        self.emit("global_avg_pool", t, &[x], Op::GlobalAvgPool(x))
    }

    /// Scale every channel of `x[B,C,...]` by `h[B,C]`.
    pub fn channelwise_mul(&mut self, x: Var, h: Var) -> Result<Var> {
        let (sx, sh) = (self.shape(x).to_vec(), self.shape(h).to_vec());
        if sx.len() < 3 || sh.len() != 2 || sx[0] != sh[0] || sx[1] != sh[1] {
            return Err(Error::shape("channelwise_mul", &sx, &sh));
        }
        let spatial: usize = sx[2..].iter().product();
        let xd = self.value(x).data();
        let hd = self.value(h).data();
        let mut out = vec![0.0; xd.len()];
        for (i, &hv) in hd.iter().enumerate() {
            for (o, xv) in out[i * spatial..(i + 1) * spatial]
                .iter_mut()
                .zip(&xd[i * spatial..(i + 1) * spatial])
            {
                *o = xv * hv;
            }
        }
        let t = Tensor::new(&sx, out)?;
        self.emit("channelwise_mul", t, &[x, h], Op::ChannelMul(x, h))
    }

    /// Batch normalization over every axis except 1. In train mode the batch
    /// statistics are returned so the caller can update running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
    ) -> Result<(Var, Option<BnBatchStats>)> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || self.shape(gamma) != [s[1]] || self.shape(beta) != [s[1]] {
            return Err(Error::shape("batch_norm", &s, self.shape(gamma)));
        }
        let (batch, c) = (s[0], s[1]);
        let spatial: usize = s[2..].iter().product();
        let count = batch * spatial;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();

        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let train = matches!(mode, BatchNormMode::Train);
        match mode {
            BatchNormMode::Train => {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for b in 0..batch {
                        let base = (b * c + ch) * spatial;
                        acc += xd[base..base + spatial].iter().sum::<f64>();
                    }
                    mean[ch] = acc / count as f64;
                    let mut sq = 0.0;
                    for b in 0..batch {
                        let base = (b * c + ch) * spatial;
                        for v in &xd[base..base + spatial] {
                            sq += (v - mean[ch]) * (v - mean[ch]);
                        }
                    }
                    var[ch] = sq / count as f64;
                }
            }
            BatchNormMode::Eval { mean: m, var: v } => {
                if m.len() != c || v.len() != c {
                    return Err(Error::shape("batch_norm", &s, &[m.len()]));
                }
                mean.copy_from_slice(m);
                var.copy_from_slice(v);
            }
        }

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..batch {
            for ch in 0..c {
                let base = (b * c + ch) * spatial;
                for i in base..base + spatial {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = gd[ch] * xhat[i] + bd[ch];
                }
            }
        }
        let stats = train.then(|| {
            let unbias = if count > 1 {
                count as f64 / (count - 1) as f64
            } else {
                1.0
            };
            BnBatchStats {
                mean: mean.clone(),
                var: var.iter().map(|v| v * unbias).collect(),
            }
        });
        let t = Tensor::new(&s, out)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        };
        let v = self.emit("batch_norm", t, &[x, gamma, beta], op)?;
        Ok((v, stats))
    }

    /// Block-diagonal linear map on `x[B,n]`; `w[groups, n/groups, n/groups]`
    /// holds each block as `[out, in]`.
    pub fn grouped_linear(&mut self, x: Var, w: Var, b: Option<Var>, groups: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if groups == 0 || sx.len() != 2 || sx[1] % groups != 0 {
            return Err(Error::shape("grouped_linear", &sx, &sw));
        }
        let (batch, n) = (sx[0], sx[1]);
        let bs = n / groups;
        if sw != [groups, bs, bs] {
            return Err(Error::shape("grouped_linear", &sx, &sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(Error::shape("grouped_linear", self.shape(b), &[n]));
            }
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = b.map(|b| self.value(b).data());
        let mut out = vec![0.0; batch * n];
        for r in 0..batch {
            for g in 0..groups {
                let xg = &xd[r * n + g * bs..r * n + (g + 1) * bs];
                for j in 0..bs {
                    let wr = &wd[(g * bs + j) * bs..(g * bs + j + 1) * bs];
                    let mut acc = bd.map_or(0.0, |b| b[g * bs + j]);
                    for (xv, wv) in xg.iter().zip(wr) {
                        acc += xv * wv;
                    }
                    out[r * n + g * bs + j] = acc;
                }
            }
        }
        let t = Tensor::new(&[batch, n], out)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        self.emit("grouped_linear", t, &ins, Op::GroupedLinear { x, w, b, groups })
    }

    /// `w ⊙ x + b` along the last axis of `x`.
    pub fn elementwise_affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let n = *sx.last().unwrap_or(&0);
        if sx.is_empty() || self.shape(w) != [n] || self.shape(b) != [n] {
            return Err(Error::shape("elementwise_affine", &sx, self.shape(w)));
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let out: Vec<f64> = xd
            .iter()
            .enumerate()
            .map(|(i, xv)| wd[i % n] * xv + bd[i % n])
            .collect();
        let t = Tensor::new(&sx, out)?;
        self.emit("elementwise_affine", t, &[x, w, b], Op::ElementwiseAffine { x, w, b })
    }

    /// Mean cross-entropy of `logits[B,K]` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::shape("softmax_cross_entropy", &s, &[labels.len()]));
        }
        let (batch, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::shape("softmax_cross_entropy", &s, &[bad]));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; batch * k];
        let mut loss = 0.0;
        for r in 0..batch {
            let row = &ld[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row {
                z += (v - max).exp();
            }
            for (p, v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (v - max).exp() / z;
            }
            loss += -(row[labels[r]] - max - z.ln());
        }
        let t = Tensor::scalar(loss / batch as f64);
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.emit("softmax_cross_entropy", t, &[logits], op)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = match inputs.first() {
            Some(v) => self.shape(*v).to_vec(),
            None => return Err(Error::shape("concat", &[], &[])),
        };
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let len = self.shape(*v)[axis] * inner;
                out.extend_from_slice(&self.value(*v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(&shape, out)?;
        self.emit(
            "concat",
            t,
            inputs,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(Error::shape("slice", &s, &[axis, start, end]));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner;
            out.extend_from_slice(&xd[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        let t = Tensor::new(&shape, out)?;
        self.emit("slice", t, &[x], Op::Slice { x, axis, start })
    }

    /// Populate gradients of everything that requires one, seeded with
    /// `d loss / d loss = 1`. The records are consumed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Graph("backward called twice on the same graph".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if self.records.is_empty() {
            return Err(Error::Graph("nothing recorded: loss does not depend on any variable".into()));
        }
        self.consumed = true;
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![self.seed_scale.unwrap_or(1.0)]);

        let records = std::mem::take(&mut self.records);
        for rec in records.iter().rev() {
            let Some(gout) = self.grads[rec.output.0].take() else {
                continue;
            };
            self.backprop(&rec.op, rec.output, &gout);
            self.grads[rec.output.0] = Some(gout);
        }
        Ok(())
    }

    /// Add into the gradient buffer of `v` if it requires one.
    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64], &[Tensor])) {
        if !self.requires_grad[v.0] {
            return;
        }
        let n = self.values[v.0].numel();
        let mut g = self.grads[v.0].take().unwrap_or_else(|| vec![0.0; n]);
        f(&mut g, &self.values);
        self.grads[v.0] = Some(g);
    }

    fn backprop(&mut self, op: &Op, out: Var, gout: &[f64]) {
        match op {
            Op::Add(a, b) => {
                self.acc(*a, |g, _| add_into(g, gout));
                self.acc(*b, |g, _| add_into(g, gout));
            }
            Op::Sub(a, b) => {
                self.acc(*a, |g, _| add_into(g, gout));
                self.acc(*b, |g, _| {
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi -= go;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, |g, vals| {
                    for ((gi, go), bv) in g.iter_mut().zip(gout).zip(vals[b.0].data()) {
                        *gi += go * bv;
                    }
                });
                self.acc(b, |g, vals| {
                    for ((gi, go), av) in g.iter_mut().zip(gout).zip(vals[a.0].data()) {
                        *gi += go * av;
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.acc(*x, |g, _| {
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi += c * go;
                    }
                });
            }
            Op::Sum(x) => {
                let go = gout[0];
                self.acc(*x, |g, _| g.iter_mut().for_each(|gi| *gi += go));
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                // dA[m,k] = G[m,n] · Bᵀ
                self.acc(a, |g, vals| {
                    let bd = vals[b.0].data();
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += gout[i * n + j] * bd[p * n + j];
                            }
                            g[i * k + p] += s;
                        }
                    }
                });
                // dB[k,n] = Aᵀ · G
                self.acc(b, |g, vals| {
                    kernels::matmul_at_b_acc(vals[a.0].data(), gout, g, k, m, n);
                });
            }
            Op::Linear { x, w, b } => {
                let (x, w) = (*x, *w);
                let (batch, inp) = (self.shape(x)[0], self.shape(x)[1]);
                let outp = self.shape(w)[0];
                self.acc(x, |g, vals| {
                    kernels::matmul_acc(gout, vals[w.0].data(), g, batch, outp, inp);
                });
                self.acc(w, |g, vals| {
                    kernels::matmul_at_b_acc(gout, vals[x.0].data(), g, outp, batch, inp);
                });
                if let Some(b) = b {
                    self.acc(*b, |g, _| {
                        for r in 0..batch {
                            add_into(g, &gout[r * outp..(r + 1) * outp]);
                        }
                    });
                }
            }
            Op::Conv2d { x, w, stride } => self.conv2d_backward(*x, *w, *stride, gout),
            Op::Conv1dChannels { x, w } => {
                let (x, w) = (*x, *w);
                let (batch, c) = (self.shape(x)[0], self.shape(x)[1]);
                let k = self.shape(w)[0];
                let half = k / 2;
                let taps = move |ch: usize, j: usize| {
                    let src = ch as isize + j as isize - half as isize;
                    (src >= 0 && (src as usize) < c).then_some(src as usize)
                };
                self.acc(x, |g, vals| {
                    let wd = vals[w.0].data();
                    for b in 0..batch {
                        for ch in 0..c {
                            for (j, wv) in wd.iter().enumerate() {
                                if let Some(src) = taps(ch, j) {
                                    g[b * c + src] += wv * gout[b * c + ch];
                                }
                            }
                        }
                    }
                });
                self.acc(w, |g, vals| {
                    let xd = vals[x.0].data();
                    for b in 0..batch {
                        for ch in 0..c {
                            for (j, gw) in g.iter_mut().enumerate() {
                                if let Some(src) = taps(ch, j) {
                                    *gw += xd[b * c + src] * gout[b * c + ch];
                                }
                            }
                        }
                    }
                });
            }
            Op::ChannelBias(x, b) => {
                let (x, b) = (*x, *b);
                let s = self.shape(x).to_vec();
                let c = s[1];
                let spatial: usize = s[2..].iter().product();
                self.acc(x, |g, _| add_into(g, gout));
                self.acc(b, |g, _| {
                    for (i, go) in gout.iter().enumerate() {
                        g[(i / spatial) % c] += go;
                    }
                });
            }
            Op::Relu(x) => {
                let x = *x;
                self.acc(x, |g, vals| {
                    for ((gi, go), xv) in g.iter_mut().zip(gout).zip(vals[x.0].data()) {
                        if *xv > 0.0 {
                            *gi += go;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                self.acc(*x, |g, vals| {
                    for ((gi, go), y) in g.iter_mut().zip(gout).zip(vals[out.0].data()) {
                        *gi += go * y * (1.0 - y);
                    }
                });
            }
            Op::Tanh(x) => {
                self.acc(*x, |g, vals| {
                    for ((gi, go), y) in g.iter_mut().zip(gout).zip(vals[out.0].data()) {
                        *gi += go * (1.0 - y * y);
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let x = *x;
                let spatial: usize = self.shape(x)[2..].iter().product();
                let inv = 1.0 / spatial as f64;
                self.acc(x, |g, _| {
                    for (i, go) in gout.iter().enumerate() {
                        for gi in &mut g[i * spatial..(i + 1) * spatial] {
                            *gi += go * inv;
                        }
                    }
                });
            }
            Op::ChannelMul(x, h) => {
                let (x, h) = (*x, *h);
                let spatial: usize = self.shape(x)[2..].iter().product();
                self.acc(x, |g, vals| {
                    for (i, hv) in vals[h.0].data().iter().enumerate() {
                        for (gi, go) in g[i * spatial..(i + 1) * spatial]
                            .iter_mut()
                            .zip(&gout[i * spatial..(i + 1) * spatial])
                        {
                            *gi += go * hv;
                        }
                    }
                });
                self.acc(h, |g, vals| {
                    let xd = vals[x.0].data();
                    for (i, gi) in g.iter_mut().enumerate() {
                        let mut s = 0.0;
                        for (go, xv) in gout[i * spatial..(i + 1) * spatial]
                            .iter()
                            .zip(&xd[i * spatial..(i + 1) * spatial])
                        {
                            s += go * xv;
                        }
                        *gi += s;
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => self.batch_norm_backward(*x, *gamma, *beta, xhat, inv_std, *train, gout),
            Op::GroupedLinear { x, w, b, groups } => {
                let (x, w, groups) = (*x, *w, *groups);
                let (batch, n) = (self.shape(x)[0], self.shape(x)[1]);
                let bs = n / groups;
                self.acc(x, |g, vals| {
                    let wd = vals[w.0].data();
                    for r in 0..batch {
                        for grp in 0..groups {
                            for j in 0..bs {
                                let go = gout[r * n + grp * bs + j];
                                let wr = &wd[(grp * bs + j) * bs..(grp * bs + j + 1) * bs];
                                for (gi, wv) in g[r * n + grp * bs..r * n + (grp + 1) * bs].iter_mut().zip(wr) {
                                    *gi += go * wv;
                                }
                            }
                        }
                    }
                });
                self.acc(w, |g, vals| {
                    let xd = vals[x.0].data();
                    for r in 0..batch {
                        for grp in 0..groups {
                            let xg = &xd[r * n + grp * bs..r * n + (grp + 1) * bs];
                            for j in 0..bs {
                                let go = gout[r * n + grp * bs + j];
                                for (gw, xv) in g[(grp * bs + j) * bs..(grp * bs + j + 1) * bs].iter_mut().zip(xg) {
                                    *gw += go * xv;
                                }
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    self.acc(*b, |g, _| {
                        for r in 0..batch {
                            add_into(g, &gout[r * n..(r + 1) * n]);
                        }
                    });
                }
            }
            Op::ElementwiseAffine { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let n = self.shape(w)[0];
                self.acc(x, |g, vals| {
                    let wd = vals[w.0].data();
                    for (i, (gi, go)) in g.iter_mut().zip(gout).enumerate() {
                        *gi += go * wd[i % n];
                    }
                });
                self.acc(w, |g, vals| {
                    for (i, (go, xv)) in gout.iter().zip(vals[x.0].data()).enumerate() {
                        g[i % n] += go * xv;
                    }
                });
                self.acc(b, |g, _| {
                    for (i, go) in gout.iter().enumerate() {
                        g[i % n] += go;
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let batch = labels.len();
                let k = probs.len() / batch;
                let scale = gout[0] / batch as f64;
                self.acc(*logits, |g, _| {
                    for r in 0..batch {
                        for c in 0..k {
                            let onehot = if labels[r] == c { 1.0 } else { 0.0 };
                            g[r * k + c] += scale * (probs[r * k + c] - onehot);
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let axis = *axis;
                let shape = self.shape(out).to_vec();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let len = self.shape(*v)[axis] * inner;
                    self.acc(*v, |g, _| {
                        for o in 0..outer {
                            add_into(
                                &mut g[o * len..(o + 1) * len],
                                &gout[o * total + offset..o * total + offset + len],
                            );
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (x, axis, start) = (*x, *axis, *start);
                let s = self.shape(x).to_vec();
                let outer: usize = s[..axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let len = self.shape(out)[axis] * inner;
                self.acc(x, |g, _| {
                    for o in 0..outer {
                        let base = o * s[axis] * inner + start * inner;
                        add_into(&mut g[base..base + len], &gout[o * len..(o + 1) * len]);
                    }
                });
            }
        }
    }

    fn conv2d_backward(&mut self, x: Var, w: Var, stride: usize, gout: &[f64]) {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (batch, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, k) = (sw[0], sw[2]);
        let geom = ConvGeom::new(cin, h, wd, k, stride);
        let (plen, olen) = (geom.patch_len(), geom.out_len());
        let in_len = cin * h * wd;
        // dW[Cout, K] += G_b[Cout, HW] · patches_b[HW, K]
        self.acc(w, |g, vals| {
            let xd = vals[x.0].data();
            let mut patches = vec![0.0; olen * plen];
            for b in 0..batch {
                kernels::im2row(&xd[b * in_len..(b + 1) * in_len], &geom, &mut patches);
                let gb = &gout[b * cout * olen..(b + 1) * cout * olen];
                kernels::matmul_acc(gb, &patches, g, cout, olen, plen);
            }
        });
        // dcols[K, HW] = Wᵀ · G_b, then scatter back.
        self.acc(x, |g, vals| {
            let wdata = vals[w.0].data();
            let mut dcols = vec![0.0; plen * olen];
            for b in 0..batch {
                dcols.iter_mut().for_each(|v| *v = 0.0);
                let gb = &gout[b * cout * olen..(b + 1) * cout * olen];
                kernels::matmul_at_b_acc(wdata, gb, &mut dcols, plen, cout, olen);
                kernels::col2im_acc(&dcols, &geom, &mut g[b * in_len..(b + 1) * in_len]);
            }
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_backward(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: &[f64],
        inv_std: &[f64],
        train: bool,
        gout: &[f64],
    ) {
        let s = self.shape(x).to_vec();
        let (batch, c) = (s[0], s[1]);
        let spatial: usize = s[2..].iter().product();
        let count = (batch * spatial) as f64;
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for b in 0..batch {
            for ch in 0..c {
                let base = (b * c + ch) * spatial;
                for i in base..base + spatial {
                    sum_g[ch] += gout[i];
                    sum_gx[ch] += gout[i] * xhat[i];
                }
            }
        }
        self.acc(gamma, |g, _| add_into(g, &sum_gx));
        self.acc(beta, |g, _| add_into(g, &sum_g));
        self.acc(x, |g, vals| {
            let gd = vals[gamma.0].data();
            for b in 0..batch {
                for ch in 0..c {
                    let base = (b * c + ch) * spatial;
                    let k = gd[ch] * inv_std[ch];
                    for i in base..base + spatial {
                        g[i] += if train {
                            k * (gout[i] - sum_g[ch] / count - xhat[i] * sum_gx[ch] / count)
                        } else {
                            k * gout[i]
                        };
                    }
                }
            }
        });
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(&[0.0]));
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5]);
    }

    #[test]
    fn gap_of_constant_channels() {
        let mut g = Graph::new();
        let mut data = vec![3.0; 9];
        data.extend(vec![-1.5; 9]);
        let x = g.constant(t(&[1, 2, 3, 3], &data));
        let y = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, -1.5]);
    }

    #[test]
    fn channelwise_mul_zero_and_one() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 2, 2, 2]));
        let h = g.constant(t(&[1, 2], &[0.0, 1.0]));
        let y = g.channelwise_mul(x, h).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_square_sum() {
        let mut g = Graph::new();
        let w = g.variable(Tensor::vector(&[3.0]));
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[6.0]);
    }

    #[test]
    fn grad_of_sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(&[0.0]));
        let y = g.sigmoid(x).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.25]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_second_call() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(&[1.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Graph(_))));
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::Graph(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 2]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.starts_with("matmul"), "{err}");
    }

    #[test]
    fn overflow_is_reported() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(&[f64::MAX]));
        let err = g.add(a, a).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "add" }));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let xd: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let x = g.constant(t(&[1, 1, 4, 4], &xd));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = g.constant(t(&[1, 1, 3, 3], &k));
        let y = g.conv2d(x, w, ConvSpec { stride: 1 }).unwrap();
        assert_eq!(g.value(y).data(), &xd[..]);
        let y2 = g.conv2d(x, w, ConvSpec { stride: 2 }).unwrap();
        assert_eq!(g.shape(y2), &[1, 1, 2, 2]);
        assert_eq!(g.value(y2).data(), &[0.0, 2.0, 8.0, 10.0]);
    }

    #[test]
    fn concat_and_slice_invert() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 1], &[5.0, 6.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = g.slice(c, 1, 2, 3).unwrap();
        assert_eq!(g.value(s).data(), &[5.0, 6.0]);
    }

    #[test]
    fn eval_batch_norm_is_affine() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 1, 1, 1], &[1.0, 3.0]));
        let gamma = g.constant(Tensor::vector(&[2.0]));
        let beta = g.constant(Tensor::vector(&[0.5]));
        let mode = BatchNormMode::Eval {
            mean: &[1.0],
            var: &[4.0 - BN_EPS],
        };
        let (y, stats) = g.batch_norm(x, gamma, beta, mode).unwrap();
        assert!(stats.is_none());
        let yd = g.value(y).data();
        assert!((yd[0] - 0.5).abs() < 1e-12 && (yd[1] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn no_records_without_variables() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(&[1.0]));
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.num_records(), 0);
        assert!(!g.requires_grad(y));
    }
}
