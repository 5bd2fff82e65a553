//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape index order is a
//! topological order and the backward pass is a single reverse sweep.

use crate::error::{Error, Result};
use crate::tensorcore::conv::{col2im, im2col, ConvGeom, PoolGeom};
use crate::tensorcore::linalg::gemm;
use crate::tensorcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Conv {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
    },
    ConvTranspose {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
    },
    AvgPool {
        x: NodeId,
        geom: PoolGeom,
    },
    BatchNormTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormInfer {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LeakyRelu {
        x: NodeId,
        slope: f64,
    },
    Sigmoid {
        x: NodeId,
    },
    Softplus {
        x: NodeId,
    },
    Exp {
        x: NodeId,
    },
    Mask {
        x: NodeId,
        mask: Vec<f64>,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    AddScalar {
        x: NodeId,
    },
    Scale {
        x: NodeId,
        c: f64,
    },
    SumChannels {
        w: NodeId,
    },
    Sum {
        x: NodeId,
    },
    GaussianNll {
        y: Tensor,
        mean: NodeId,
        logvar: NodeId,
        floor: f64,
    },
    KlDiag {
        mq: NodeId,
        sq: NodeId,
        mp: NodeId,
        sp: NodeId,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Per-channel batch statistics observed by a train-mode batchnorm node,
/// used by the caller to update running estimates.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

/// Gradients for every parameter slot after a backward sweep.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub params: Vec<Tensor>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input, false)
    }

    /// Trainable leaf bound to parameter slot `slot`.
    pub fn param(&mut self, slot: usize, t: Tensor) -> NodeId {
        self.push(t, Op::Param(slot), true)
    }

    /// `x (N x I) * w (I x O) + b (O)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::shape(
                "dense",
                format!("input {:?} vs weight {:?} (axis 1 of input must equal axis 0 of weight)", xs, ws),
            ));
        }
        let (n, i, o) = (xs[0], xs[1], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::shape("dense", format!("bias {:?} vs {o} outputs", self.shape(b))));
            }
        }
        let mut out = vec![0.0; n * o];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bv);
            }
        }
        gemm(false, false, n, i, o, 1.0, self.value(x).data(), self.value(w).data(), 1.0, &mut out);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Tensor::new(vec![n, o], out)?, Op::Linear { x, w, b }, ng))
    }

    /// Stride-1-or-more 3-D convolution. `x`: `[N, C, D, H, W]`,
    /// `w`: `[O, C, k, k, k]`, `b`: `[O]`.
    pub fn conv3d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 5 || ws.len() != 5 || ws[1] != xs[1] || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(Error::shape(
                "conv3d",
                format!("input {:?} vs weight {:?} (channel axis 1 must agree, cubic kernel)", xs, ws),
            ));
        }
        let (n, c, o, k) = (xs[0], xs[1], ws[0], ws[2]);
        let geom = ConvGeom::conv([xs[2], xs[3], xs[4]], k, stride, pad)?;
        let ck = c * geom.taps();
        let (pb, ps) = (geom.big_len(), geom.small_len());
        let mut out = vec![0.0; n * o * ps];
        let mut col = vec![0.0; ck * ps];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for s in 0..n {
            im2col(&xv[s * c * pb..(s + 1) * c * pb], c, &geom, &mut col);
            let ys = &mut out[s * o * ps..(s + 1) * o * ps];
            if let Some(b) = b {
                for (oc, &bv) in self.value(b).data().iter().enumerate() {
                    ys[oc * ps..(oc + 1) * ps].fill(bv);
                }
            }
            gemm(false, false, o, ck, ps, 1.0, wv, &col, 1.0, ys);
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let shape = vec![n, o, geom.small[0], geom.small[1], geom.small[2]];
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv { x, w, b, geom }, ng))
    }

    /// Transposed 3-D convolution. `x`: `[N, Cin, d, h, w]`,
    /// `w`: `[Cin, Cout, k, k, k]`; `output` is the requested spatial extent.
    pub fn conv_transpose3d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        output: [usize; 3],
    ) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 5 || ws.len() != 5 || ws[0] != xs[1] || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(Error::shape(
                "conv_transpose3d",
                format!("input {:?} vs weight {:?} (input channel axis must agree, cubic kernel)", xs, ws),
            ));
        }
        let (n, cin, cout, k) = (xs[0], xs[1], ws[1], ws[2]);
        let geom = ConvGeom::transpose([xs[2], xs[3], xs[4]], output, k, stride, pad)?;
        let ck = cout * geom.taps();
        let (pb, ps) = (geom.big_len(), geom.small_len());
        let mut out = vec![0.0; n * cout * pb];
        let mut col = vec![0.0; ck * ps];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for s in 0..n {
            gemm(true, false, ck, cin, ps, 1.0, wv, &xv[s * cin * ps..(s + 1) * cin * ps], 0.0, &mut col);
            let ys = &mut out[s * cout * pb..(s + 1) * cout * pb];
            if let Some(b) = b {
                for (oc, &bv) in self.value(b).data().iter().enumerate() {
                    ys[oc * pb..(oc + 1) * pb].fill(bv);
                }
            }
            col2im(&col, cout, &geom, ys);
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let shape = vec![n, cout, output[0], output[1], output[2]];
        Ok(self.push(Tensor::new(shape, out)?, Op::ConvTranspose { x, w, b, geom }, ng))
    }

    pub fn avg_pool3d(&mut self, x: NodeId, window: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 5 {
            return Err(Error::shape("avgpool3d", format!("input must be 5-D, got {:?}", xs)));
        }
        let geom = PoolGeom::new([xs[2], xs[3], xs[4]], window)?;
        let (pi, po): (usize, usize) = (geom.input.iter().product(), geom.output.iter().product());
        let planes = xs[0] * xs[1];
        let xv = self.value(x).data();
        let mut out = vec![0.0; planes * po];
        for p in 0..planes {
            let src = &xv[p * pi..(p + 1) * pi];
            let dst = &mut out[p * po..(p + 1) * po];
            geom.for_each(|i, o, inv| dst[o] += src[i] * inv);
        }
        let shape = vec![xs[0], xs[1], geom.output[0], geom.output[1], geom.output[2]];
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::AvgPool { x, geom }, ng))
    }

    /// Batch normalization over `[N, C, ...]` using the batch's own
    /// statistics. Returns the node and the observed statistics.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<(NodeId, BatchStats)> {
        let (n, c, p) = self.bn_dims(x, gamma, beta)?;
        let m = (n * p) as f64;
        if n * p < 2 {
            return Err(Error::shape(
                "batchnorm3d",
                "train mode needs at least two values per channel",
            ));
        }
        let xv = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * p;
                mean[ch] += xv[base..base + p].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * p;
                var[ch] += xv[base..base + p].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        let biased: Vec<f64> = var.iter().map(|v| v / m).collect();
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * p;
                for i in base..base + p {
                    xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let stats = BatchStats {
            mean,
            var: var.iter().map(|v| v / (m - 1.0)).collect(),
        };
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let id = self.push(
            Tensor::new(shape, out)?,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        );
        Ok((id, stats))
    }

    /// Batch normalization with frozen statistics: each sample is
    /// transformed independently.
    pub fn batch_norm_infer(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<NodeId> {
        let (n, c, p) = self.bn_dims(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape(
                "batchnorm3d",
                format!("running statistics for {} channels, input has {c}", running_mean.len()),
            ));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let xv = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * p;
                for i in base..base + p {
                    out[i] = g[ch] * (xv[i] - running_mean[ch]) * inv_std[ch] + bt[ch];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::BatchNormInfer {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
            ng,
        ))
    }

    fn bn_dims(&self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<(usize, usize, usize)> {
        let xs = self.shape(x);
        if xs.len() < 2 {
            return Err(Error::shape("batchnorm3d", format!("input {:?} has no channel axis", xs)));
        }
        let c = xs[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "batchnorm3d",
                format!("channel axis 1 is {c}, scale {:?}, shift {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        Ok((xs[0], c, xs[2..].iter().product()))
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let v = self.value(x).map(f);
        let ng = self.ng(x);
        self.push(v, op, ng)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        self.unary(x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu { x, slope })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, sigmoid, Op::Sigmoid { x })
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.unary(x, softplus, Op::Softplus { x })
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::exp, Op::Exp { x })
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask(&mut self, x: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        if mask.len() != self.value(x).len() {
            return Err(Error::shape(
                "dropout",
                format!("mask of {} values for input {:?}", mask.len(), self.shape(x)),
            ));
        }
        let mut v = self.value(x).clone();
        v.data_mut().iter_mut().zip(&mask).for_each(|(a, m)| *a *= m);
        let ng = self.ng(x);
        Ok(self.push(v, Op::Mask { x, mask }, ng))
    }

    /// Column concatenation of two `N x _` matrices.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::shape("concat", format!("{:?} and {:?} disagree on axis 0", sa, sb)));
        }
        let (n, ca, cb) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            out.extend_from_slice(&va[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&vb[i * cb..(i + 1) * cb]);
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![n, ca + cb], out)?, Op::Concat { a, b }, ng))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::Reshape { x }, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add { a, b }, ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul { a, b }, ng))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, |v| v + c, Op::AddScalar { x })
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, |v| v * c, Op::Scale { x, c })
    }

    /// Sums a `[O, C, ...]` weight over its input-channel axis, keeping it as
    /// an axis of extent 1. Convolving one channel with the summed kernel
    /// equals convolving `C` identical copies of that channel.
    pub fn sum_channels(&mut self, w: NodeId) -> Result<NodeId> {
        let ws = self.shape(w).to_vec();
        if ws.len() < 2 {
            return Err(Error::shape("sum_channels", format!("weight {:?}", ws)));
        }
        let (o, c) = (ws[0], ws[1]);
        let k: usize = ws[2..].iter().product();
        let wv = self.value(w).data();
        let mut out = vec![0.0; o * k];
        for oc in 0..o {
            for ic in 0..c {
                let src = &wv[(oc * c + ic) * k..(oc * c + ic + 1) * k];
                out[oc * k..(oc + 1) * k].iter_mut().zip(src).for_each(|(a, b)| *a += b);
            }
        }
        let mut shape = ws.clone();
        shape[1] = 1;
        let ng = self.ng(w);
        Ok(self.push(Tensor::new(shape, out)?, Op::SumChannels { w }, ng))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, ng)
    }

    /// Negative Gaussian log-likelihood summed over all elements of `y`
    /// (`[N, ...]`), with per-element variance `max(exp(logvar), floor)`
    /// where `logvar` covers the trailing (per-voxel) extent and is shared
    /// across the leading axis.
    pub fn gaussian_nll(&mut self, y: Tensor, mean: NodeId, logvar: NodeId, floor: f64) -> Result<NodeId> {
        if y.shape() != self.shape(mean) {
            return Err(Error::shape(
                "gaussian_nll",
                format!("target {:?} vs mean {:?}", y.shape(), self.shape(mean)),
            ));
        }
        let t = y.row_len();
        if self.value(logvar).len() != t {
            return Err(Error::shape(
                "gaussian_nll",
                format!("log-variance {:?} vs per-subject extent {t}", self.shape(logvar)),
            ));
        }
        let lv = self.value(logvar).data();
        let mv = self.value(mean).data();
        let var: Vec<f64> = lv.iter().map(|v| v.exp().max(floor)).collect();
        let mut total = 0.0;
        for (i, (&yy, &mm)) in y.data().iter().zip(mv).enumerate() {
            let s2 = var[i % t];
            total += 0.5 * ((2.0 * std::f64::consts::PI * s2).ln() + (yy - mm).powi(2) / s2);
        }
        let ng = self.ng(mean) || self.ng(logvar);
        Ok(self.push(Tensor::scalar(total), Op::GaussianNll { y, mean, logvar, floor }, ng))
    }

    /// `sum KL(N(mq, sq^2) || N(mp, sp^2))` over all elements.
    pub fn kl_diag(&mut self, mq: NodeId, sq: NodeId, mp: NodeId, sp: NodeId) -> Result<NodeId> {
        let s = self.shape(mq);
        if self.shape(sq) != s || self.shape(mp) != s || self.shape(sp) != s {
            return Err(Error::shape("kl_diag", "posterior and prior parameters differ in shape"));
        }
        let total = kl_terms(
            self.value(mq).data(),
            self.value(sq).data(),
            self.value(mp).data(),
            self.value(sp).data(),
        )
        .sum::<f64>();
        let ng = self.ng(mq) || self.ng(sq) || self.ng(mp) || self.ng(sp);
        Ok(self.push(Tensor::scalar(total), Op::KlDiag { mq, sq, mp, sp }, ng))
    }

    /// Reverse sweep from a scalar `loss`. `n_params` sizes the result; slots
    /// never reached from `loss` receive zero gradients.
    pub fn backward(&self, loss: NodeId, n_params: usize) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut param_grads: Vec<Option<Tensor>> = vec![None; n_params];

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let acc = |id: NodeId, grads: &mut Vec<Option<Vec<f64>>>, f: &dyn Fn(&mut [f64])| {
                if !self.ng(id) {
                    return;
                }
                let slot = grads[id.0].get_or_insert_with(|| vec![0.0; self.value(id).len()]);
                f(slot);
            };
            match &node.op {
                Op::Input => {}
                Op::Param(slot) => {
                    if *slot >= n_params {
                        return Err(Error::invalid(format!(
                            "parameter slot {slot} out of range ({n_params} slots)"
                        )));
                    }
                    let t = Tensor::new(node.value.shape().to_vec(), g)?;
                    match &mut param_grads[*slot] {
                        Some(existing) => existing
                            .data_mut()
                            .iter_mut()
                            .zip(t.data())
                            .for_each(|(a, b)| *a += b),
                        none => *none = Some(t),
                    }
                }
                Op::Linear { x, w, b } => {
                    let (n, i) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let o = self.shape(*w)[1];
                    acc(*x, &mut grads, &|dx| {
                        gemm(false, true, n, o, i, 1.0, &g, self.value(*w).data(), 1.0, dx)
                    });
                    acc(*w, &mut grads, &|dw| {
                        gemm(true, false, i, n, o, 1.0, self.value(*x).data(), &g, 1.0, dw)
                    });
                    if let Some(b) = b {
                        acc(*b, &mut grads, &|db| {
                            for row in g.chunks(o) {
                                db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                            }
                        });
                    }
                }
                Op::Conv { x, w, b, geom } => {
                    let xs = self.shape(*x);
                    let (n, c) = (xs[0], xs[1]);
                    let o = self.shape(*w)[0];
                    let ck = c * geom.taps();
                    let (pb, ps) = (geom.big_len(), geom.small_len());
                    let xv = self.value(*x).data();
                    let wv = self.value(*w).data();
                    let mut col = vec![0.0; ck * ps];
                    if self.ng(*w) {
                        let mut dw = vec![0.0; o * ck];
                        for s in 0..n {
                            im2col(&xv[s * c * pb..(s + 1) * c * pb], c, geom, &mut col);
                            gemm(false, true, o, ps, ck, 1.0, &g[s * o * ps..(s + 1) * o * ps], &col, 1.0, &mut dw);
                        }
                        acc(*w, &mut grads, &|slot| slot.iter_mut().zip(&dw).for_each(|(a, v)| *a += v));
                    }
                    if let Some(b) = b {
                        acc(*b, &mut grads, &|db| {
                            for s in 0..n {
                                for oc in 0..o {
                                    let base = (s * o + oc) * ps;
                                    db[oc] += g[base..base + ps].iter().sum::<f64>();
                                }
                            }
                        });
                    }
                    if self.ng(*x) {
                        let mut dx = vec![0.0; n * c * pb];
                        for s in 0..n {
                            gemm(true, false, ck, o, ps, 1.0, wv, &g[s * o * ps..(s + 1) * o * ps], 0.0, &mut col);
                            col2im(&col, c, geom, &mut dx[s * c * pb..(s + 1) * c * pb]);
                        }
                        acc(*x, &mut grads, &|slot| slot.iter_mut().zip(&dx).for_each(|(a, v)| *a += v));
                    }
                }
                Op::ConvTranspose { x, w, b, geom } => {
                    let xs = self.shape(*x);
                    let (n, cin) = (xs[0], xs[1]);
                    let cout = self.shape(*w)[1];
                    let ck = cout * geom.taps();
                    let (pb, ps) = (geom.big_len(), geom.small_len());
                    let xv = self.value(*x).data();
                    let wv = self.value(*w).data();
                    let mut cols = vec![0.0; n * ck * ps];
                    for s in 0..n {
                        im2col(&g[s * cout * pb..(s + 1) * cout * pb], cout, geom, &mut cols[s * ck * ps..(s + 1) * ck * ps]);
                    }
                    acc(*w, &mut grads, &|dw| {
                        for s in 0..n {
                            gemm(false, true, cin, ps, ck, 1.0, &xv[s * cin * ps..(s + 1) * cin * ps], &cols[s * ck * ps..(s + 1) * ck * ps], 1.0, dw);
                        }
                    });
                    acc(*x, &mut grads, &|dx| {
                        for s in 0..n {
                            gemm(false, false, cin, ck, ps, 1.0, wv, &cols[s * ck * ps..(s + 1) * ck * ps], 1.0, &mut dx[s * cin * ps..(s + 1) * cin * ps]);
                        }
                    });
                    if let Some(b) = b {
                        acc(*b, &mut grads, &|db| {
                            for s in 0..n {
                                for oc in 0..cout {
                                    let base = (s * cout + oc) * pb;
                                    db[oc] += g[base..base + pb].iter().sum::<f64>();
                                }
                            }
                        });
                    }
                }
                Op::AvgPool { x, geom } => {
                    let pi: usize = geom.input.iter().product();
                    let po: usize = geom.output.iter().product();
                    acc(*x, &mut grads, &|dx| {
                        for (p, gp) in g.chunks(po).enumerate() {
                            let dst = &mut dx[p * pi..(p + 1) * pi];
                            geom.for_each(|i, o, inv| dst[i] += gp[o] * inv);
                        }
                    });
                }
                Op::BatchNormTrain { x, gamma, beta, xhat, inv_std } => {
                    let xs = self.shape(*x);
                    let (n, c) = (xs[0], xs[1]);
                    let p: usize = xs[2..].iter().product();
                    let m = (n * p) as f64;
                    let gv = self.value(*gamma).data();
                    let mut sum_dy = vec![0.0; c];
                    let mut sum_dy_xhat = vec![0.0; c];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * p;
                            for i in base..base + p {
                                sum_dy[ch] += g[i];
                                sum_dy_xhat[ch] += g[i] * xhat[i];
                            }
                        }
                    }
                    acc(*gamma, &mut grads, &|dg| dg.iter_mut().zip(&sum_dy_xhat).for_each(|(a, v)| *a += v));
                    acc(*beta, &mut grads, &|db| db.iter_mut().zip(&sum_dy).for_each(|(a, v)| *a += v));
                    acc(*x, &mut grads, &|dx| {
                        for s in 0..n {
                            for ch in 0..c {
                                let base = (s * c + ch) * p;
                                let k = gv[ch] * inv_std[ch] / m;
                                for i in base..base + p {
                                    dx[i] += k * (m * g[i] - sum_dy[ch] - xhat[i] * sum_dy_xhat[ch]);
                                }
                            }
                        }
                    });
                }
                Op::BatchNormInfer { x, gamma, beta, mean, inv_std } => {
                    let xs = self.shape(*x);
                    let (n, c) = (xs[0], xs[1]);
                    let p: usize = xs[2..].iter().product();
                    let xv = self.value(*x).data();
                    let gv = self.value(*gamma).data();
                    acc(*gamma, &mut grads, &|dg| {
                        for s in 0..n {
                            for ch in 0..c {
                                let base = (s * c + ch) * p;
                                for i in base..base + p {
                                    dg[ch] += g[i] * (xv[i] - mean[ch]) * inv_std[ch];
                                }
                            }
                        }
                    });
                    acc(*beta, &mut grads, &|db| {
                        for s in 0..n {
                            for ch in 0..c {
                                let base = (s * c + ch) * p;
                                db[ch] += g[base..base + p].iter().sum::<f64>();
                            }
                        }
                    });
                    acc(*x, &mut grads, &|dx| {
                        for s in 0..n {
                            for ch in 0..c {
                                let base = (s * c + ch) * p;
                                for i in base..base + p {
                                    dx[i] += g[i] * gv[ch] * inv_std[ch];
                                }
                            }
                        }
                    });
                }
                Op::LeakyRelu { x, slope } => {
                    let xv = self.value(*x).data();
                    acc(*x, &mut grads, &|dx| {
                        for i in 0..dx.len() {
                            dx[i] += if xv[i] > 0.0 { g[i] } else { slope * g[i] };
                        }
                    });
                }
                Op::Sigmoid { x } => {
                    let yv = node.value.data();
                    acc(*x, &mut grads, &|dx| {
                        for i in 0..dx.len() {
                            dx[i] += g[i] * yv[i] * (1.0 - yv[i]);
                        }
                    });
                }
                Op::Softplus { x } => {
                    let xv = self.value(*x).data();
                    acc(*x, &mut grads, &|dx| {
                        for i in 0..dx.len() {
                            dx[i] += g[i] * sigmoid(xv[i]);
                        }
                    });
                }
                Op::Exp { x } => {
                    let yv = node.value.data();
                    acc(*x, &mut grads, &|dx| {
                        for i in 0..dx.len() {
                            dx[i] += g[i] * yv[i];
                        }
                    });
                }
                Op::Mask { x, mask } => {
                    acc(*x, &mut grads, &|dx| {
                        for i in 0..dx.len() {
                            dx[i] += g[i] * mask[i];
                        }
                    });
                }
                Op::Concat { a, b } => {
                    let (n, ca) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let cb = self.shape(*b)[1];
                    acc(*a, &mut grads, &|da| {
                        for i in 0..n {
                            let src = &g[i * (ca + cb)..i * (ca + cb) + ca];
                            da[i * ca..(i + 1) * ca].iter_mut().zip(src).for_each(|(d, v)| *d += v);
                        }
                    });
                    acc(*b, &mut grads, &|db| {
                        for i in 0..n {
                            let src = &g[i * (ca + cb) + ca..(i + 1) * (ca + cb)];
                            db[i * cb..(i + 1) * cb].iter_mut().zip(src).for_each(|(d, v)| *d += v);
                        }
                    });
                }
                Op::Reshape { x } | Op::AddScalar { x } => {
                    acc(*x, &mut grads, &|dx| dx.iter_mut().zip(&g).for_each(|(d, v)| *d += v));
                }
                Op::Add { a, b } => {
                    acc(*a, &mut grads, &|da| da.iter_mut().zip(&g).for_each(|(d, v)| *d += v));
                    acc(*b, &mut grads, &|db| db.iter_mut().zip(&g).for_each(|(d, v)| *d += v));
                }
                Op::Mul { a, b } => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    acc(*a, &mut grads, &|da| {
                        for i in 0..da.len() {
                            da[i] += g[i] * vb[i];
                        }
                    });
                    acc(*b, &mut grads, &|db| {
                        for i in 0..db.len() {
                            db[i] += g[i] * va[i];
                        }
                    });
                }
                Op::Scale { x, c } => {
                    acc(*x, &mut grads, &|dx| dx.iter_mut().zip(&g).for_each(|(d, v)| *d += c * v));
                }
                Op::SumChannels { w } => {
                    let ws = self.shape(*w);
                    let (o, c) = (ws[0], ws[1]);
                    let k: usize = ws[2..].iter().product();
                    acc(*w, &mut grads, &|dw| {
                        for oc in 0..o {
                            for ic in 0..c {
                                let dst = &mut dw[(oc * c + ic) * k..(oc * c + ic + 1) * k];
                                dst.iter_mut().zip(&g[oc * k..(oc + 1) * k]).for_each(|(d, v)| *d += v);
                            }
                        }
                    });
                }
                Op::Sum { x } => {
                    acc(*x, &mut grads, &|dx| dx.iter_mut().for_each(|d| *d += g[0]));
                }
                Op::GaussianNll { y, mean, logvar, floor } => {
                    let t = y.row_len();
                    let lv = self.value(*logvar).data();
                    let raw: Vec<f64> = lv.iter().map(|v| v.exp()).collect();
                    let var: Vec<f64> = raw.iter().map(|v| v.max(*floor)).collect();
                    let mv = self.value(*mean).data();
                    let yv = y.data();
                    acc(*mean, &mut grads, &|dm| {
                        for i in 0..dm.len() {
                            dm[i] += g[0] * (mv[i] - yv[i]) / var[i % t];
                        }
                    });
                    acc(*logvar, &mut grads, &|dl| {
                        for i in 0..yv.len() {
                            let v = i % t;
                            if raw[v] > *floor {
                                dl[v] += g[0] * 0.5 * (1.0 - (yv[i] - mv[i]).powi(2) / var[v]);
                            }
                        }
                    });
                }
                Op::KlDiag { mq, sq, mp, sp } => {
                    let (a, s1, b, s2) = (
                        self.value(*mq).data(),
                        self.value(*sq).data(),
                        self.value(*mp).data(),
                        self.value(*sp).data(),
                    );
                    let k = g[0];
                    acc(*mq, &mut grads, &|d| {
                        for i in 0..d.len() {
                            d[i] += k * (a[i] - b[i]) / (s2[i] * s2[i]);
                        }
                    });
                    acc(*mp, &mut grads, &|d| {
                        for i in 0..d.len() {
                            d[i] -= k * (a[i] - b[i]) / (s2[i] * s2[i]);
                        }
                    });
                    acc(*sq, &mut grads, &|d| {
                        for i in 0..d.len() {
                            d[i] += k * (-1.0 / s1[i] + s1[i] / (s2[i] * s2[i]));
                        }
                    });
                    acc(*sp, &mut grads, &|d| {
                        for i in 0..d.len() {
                            let num = s1[i] * s1[i] + (a[i] - b[i]).powi(2);
                            d[i] += k * (1.0 / s2[i] - num / s2[i].powi(3));
                        }
                    });
                }
            }
        }

        Ok(Gradients {
            params: param_grads
                .into_iter()
                .enumerate()
                .map(|(slot, g)| {
                    g.unwrap_or_else(|| {
                        let shape = self
                            .nodes
                            .iter()
                            .find_map(|n| match n.op {
                                Op::Param(s) if s == slot => Some(n.value.shape().to_vec()),
                                _ => None,
                            })
                            .unwrap_or_else(|| vec![1]);
                        Tensor::zeros(&shape)
                    })
                })
                .collect(),
        })
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else if v < -30.0 {
        v.exp()
    } else {
        v.exp().ln_1p()
    }
}

/// Elementwise `KL(N(a, s1^2) || N(b, s2^2))`.
pub fn kl_terms<'a>(
    a: &'a [f64],
    s1: &'a [f64],
    b: &'a [f64],
    s2: &'a [f64],
) -> impl Iterator<Item = f64> + 'a {
    (0..a.len()).map(move |i| {
        (s2[i] / s1[i]).ln() + (s1[i] * s1[i] + (a[i] - b[i]).powi(2)) / (2.0 * s2[i] * s2[i]) - 0.5
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_sum_gradient_is_input() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap());
        let w = g.param(0, Tensor::new(vec![3, 1], vec![0.3, 0.1, -0.7]).unwrap());
        let y = g.linear(x, w, None).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss, 1).unwrap();
        assert_eq!(grads.params[0].data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn disconnected_parameter_gets_zero() {
        let mut g = Graph::new();
        let a = g.param(0, Tensor::full(&[2], 1.5));
        let _b = g.param(1, Tensor::full(&[3], 2.0));
        let loss = g.sum(a);
        let grads = g.backward(loss, 2).unwrap();
        assert_eq!(grads.params[0].data(), &[1.0, 1.0]);
        assert_eq!(grads.params[1].shape(), &[3]);
        assert!(grads.params[1].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let a = g.param(0, Tensor::full(&[2], 1.5));
        assert!(g.backward(a, 1).is_err());
    }

    #[test]
    fn shared_parameter_accumulates() {
        let mut g = Graph::new();
        let a = g.param(0, Tensor::full(&[2], 3.0));
        let a2 = g.param(0, Tensor::full(&[2], 3.0));
        let p = g.mul(a, a2).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss, 1).unwrap();
        assert_eq!(grads.params[0].data(), &[6.0, 6.0]);
    }

    #[test]
    fn softplus_and_sigmoid_are_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(100.0), 100.0);
        assert!(softplus(-100.0) > 0.0);
        assert!((sigmoid(-800.0)).abs() < 1e-300);
        assert_eq!(sigmoid(800.0), 1.0);
    }
}
