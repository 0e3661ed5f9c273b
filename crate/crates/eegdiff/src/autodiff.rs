//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Graphs are built eagerly: each tape method computes its forward value
//! immediately and records the operation. `backward` then walks the tape in
//! reverse, accumulating gradients into the bound [`ParameterStore`] slots.
//! Gradient accumulation is additive, so two backward passes without zeroing
//! double the stored gradients.
//!
//! All math is f64 and fully sequential, which keeps every training loop
//! bit-reproducible.

use crate::error::{Error, Result};
use crate::nets::ParameterStore;
use crate::tensor::Tensor;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Batch-statistics pair recorded by a tracking batch-norm, to be folded
/// into running averages by the caller.
#[derive(Debug, Clone)]
pub struct NormUpdate {
    pub mean_name: String,
    pub var_name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddConst(usize),
    MulConst(usize, f64),
    Sqrt(usize),
    Magnitude(usize, usize),
    Swish(usize),
    Sigmoid(usize),
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Conv1d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
    },
    ConvTranspose1d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ChannelAffine {
        x: usize,
        scale: Vec<f64>,
    },
    AddChannelVec(usize, usize),
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    ConcatChannels(usize, usize),
    Reshape(usize),
    MeanAll(usize),
    GlobalAvgPool(usize),
    ScalePerItem {
        x: usize,
        coeffs: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    param: Option<String>,
}

/// Reverse-mode differentiation tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Batch statistics recorded by tracking batch-norm calls.
    pub norm_updates: Vec<NormUpdate>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node {
            op,
            value,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input: participates in forward math, receives no gradient
    /// slot of its own beyond the tape walk.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Parameter input: a copy of the store entry, whose gradient is added
    /// back into the store during `backward`.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        let (shape, values) = store.get(name)?;
        let value = Tensor::new(shape.to_vec(), values.to_vec())?;
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            param: Some(name.to_string()),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.nodes[a.0].value.shape() != self.nodes[b.0].value.shape() {
            return Err(Error::net(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.nodes[a.0].value.shape(),
                self.nodes[b.0].value.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.nodes[a.0].value.shape().to_vec(), data)?;
        Ok(self.push(Op::Add(a.0, b.0), t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(self.nodes[a.0].value.shape().to_vec(), data)?;
        Ok(self.push(Op::Sub(a.0, b.0), t))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.nodes[a.0].value.shape().to_vec(), data)?;
        Ok(self.push(Op::Mul(a.0, b.0), t))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let data = self.nodes[a.0].value.data().iter().map(|x| x + c).collect();
        let t = Tensor::new(self.nodes[a.0].value.shape().to_vec(), data).expect("same shape");
        self.push(Op::AddConst(a.0), t)
    }

    pub fn mul_const(&mut self, a: Var, c: f64) -> Var {
        let data = self.nodes[a.0].value.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(self.nodes[a.0].value.shape().to_vec(), data).expect("same shape");
        self.push(Op::MulConst(a.0, c), t)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].value.data().iter().map(|x| x.sqrt()).collect();
        let t = Tensor::new(self.nodes[a.0].value.shape().to_vec(), data).expect("same shape");
        self.push(Op::Sqrt(a.0), t)
    }

    /// `sqrt(re^2 + im^2)` with a zero-safe gradient.
    pub fn magnitude(&mut self, re: Var, im: Var) -> Result<Var> {
        self.same_shape(re, im, "magnitude")?;
        let data = self.nodes[re.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[im.0].value.data())
            .map(|(r, i)| (r * r + i * i).sqrt())
            .collect();
        let t = Tensor::new(self.nodes[re.0].value.shape().to_vec(), data)?;
        Ok(self.push(Op::Magnitude(re.0, im.0), t))
    }

    pub fn swish(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .map(|&x| x / (1.0 + (-x).exp()))
            .collect();
        let t = Tensor::new(self.nodes[a.0].value.shape().to_vec(), data).expect("same shape");
        self.push(Op::Swish(a.0), t)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let t = Tensor::new(self.nodes[a.0].value.shape().to_vec(), data).expect("same shape");
        self.push(Op::Sigmoid(a.0), t)
    }

    /// `x [B,I] * w [I,O] + b [O] -> [B,O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.nodes[x.0].value.shape(),
            self.nodes[w.0].value.shape(),
            self.nodes[b.0].value.shape(),
        );
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(Error::net(format!(
                "linear: incompatible shapes x{xs:?} w{ws:?} b{bs:?}"
            )));
        }
        let (batch, i_dim, o_dim) = (xs[0], xs[1], ws[1]);
        let xd = self.nodes[x.0].value.data();
        let wd = self.nodes[w.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let mut out = vec![0.0; batch * o_dim];
        for bi in 0..batch {
            let xrow = &xd[bi * i_dim..(bi + 1) * i_dim];
            let orow = &mut out[bi * o_dim..(bi + 1) * o_dim];
            orow.copy_from_slice(bd);
            for (ii, &xv) in xrow.iter().enumerate() {
                let wrow = &wd[ii * o_dim..(ii + 1) * o_dim];
                for (ov, &wv) in orow.iter_mut().zip(wrow) {
                    *ov += xv * wv;
                }
            }
        }
        let t = Tensor::new(vec![batch, o_dim], out)?;
        Ok(self.push(
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.0,
            },
            t,
        ))
    }

    /// `x [B,Ci,L] * w [Co,Ci,K] + b [Co] -> [B,Co,Lo]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws, bs) = (
            self.nodes[x.0].value.shape(),
            self.nodes[w.0].value.shape(),
            self.nodes[b.0].value.shape(),
        );
        if xs.len() != 3 || ws.len() != 3 || bs.len() != 1 || xs[1] != ws[1] || ws[0] != bs[0] {
            return Err(Error::net(format!(
                "conv1d: incompatible shapes x{xs:?} w{ws:?} b{bs:?}"
            )));
        }
        let (batch, ci, l) = (xs[0], xs[1], xs[2]);
        let (co, k) = (ws[0], ws[2]);
        if l + 2 * pad < k {
            return Err(Error::net("conv1d: kernel larger than padded input"));
        }
        let lo = (l + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; batch * co * lo];
        conv1d_forward(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            self.nodes[b.0].value.data(),
            batch,
            ci,
            l,
            co,
            k,
            stride,
            pad,
            lo,
            &mut out,
        );
        let t = Tensor::new(vec![batch, co, lo], out)?;
        Ok(self.push(
            Op::Conv1d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
                pad,
            },
            t,
        ))
    }

    /// `x [B,Ci,L] * w [Ci,Co,K] + b [Co] -> [B,Co,(L-1)*stride - 2*pad + K]`.
    pub fn conv_transpose1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (xs, ws, bs) = (
            self.nodes[x.0].value.shape(),
            self.nodes[w.0].value.shape(),
            self.nodes[b.0].value.shape(),
        );
        if xs.len() != 3 || ws.len() != 3 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(Error::net(format!(
                "conv_transpose1d: incompatible shapes x{xs:?} w{ws:?} b{bs:?}"
            )));
        }
        let (batch, ci, l) = (xs[0], xs[1], xs[2]);
        let (co, k) = (ws[1], ws[2]);
        let full = (l - 1) * stride + k;
        if full < 2 * pad + 1 {
            return Err(Error::net("conv_transpose1d: padding too large"));
        }
        let lo = full - 2 * pad;
        let xd = self.nodes[x.0].value.data();
        let wd = self.nodes[w.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let mut out = vec![0.0; batch * co * lo];
        for bi in 0..batch {
            for o in 0..co {
                let orow = &mut out[(bi * co + o) * lo..(bi * co + o + 1) * lo];
                orow.iter_mut().for_each(|v| *v = bd[o]);
                for c in 0..ci {
                    let xrow = &xd[(bi * ci + c) * l..(bi * ci + c + 1) * l];
                    for kk in 0..k {
                        let wv = wd[(c * co + o) * k + kk];
                        if wv == 0.0 {
                            continue;
                        }
                        for (il, &xv) in xrow.iter().enumerate() {
                            let pos = il * stride + kk;
                            if pos >= pad && pos - pad < lo {
                                orow[pos - pad] += wv * xv;
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![batch, co, lo], out)?;
        Ok(self.push(
            Op::ConvTranspose1d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
                pad,
            },
            t,
        ))
    }

    /// `x [B,Ci,H,W] * w [Co,Ci,Kh,Kw] + b [Co]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var> {
        let (xs, ws, bs) = (
            self.nodes[x.0].value.shape(),
            self.nodes[w.0].value.shape(),
            self.nodes[b.0].value.shape(),
        );
        if xs.len() != 4 || ws.len() != 4 || bs.len() != 1 || xs[1] != ws[1] || ws[0] != bs[0] {
            return Err(Error::net(format!(
                "conv2d: incompatible shapes x{xs:?} w{ws:?} b{bs:?}"
            )));
        }
        let (batch, ci, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad.0 < kh || wdt + 2 * pad.1 < kw {
            return Err(Error::net("conv2d: kernel larger than padded input"));
        }
        let ho = (h + 2 * pad.0 - kh) / stride.0 + 1;
        let wo = (wdt + 2 * pad.1 - kw) / stride.1 + 1;
        let xd = self.nodes[x.0].value.data();
        let wd = self.nodes[w.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let mut out = vec![0.0; batch * co * ho * wo];
        for bi in 0..batch {
            for o in 0..co {
                let obase = (bi * co + o) * ho * wo;
                out[obase..obase + ho * wo]
                    .iter_mut()
                    .for_each(|v| *v = bd[o]);
                for c in 0..ci {
                    let xbase = (bi * ci + c) * h * wdt;
                    for khi in 0..kh {
                        for kwi in 0..kw {
                            let wv = wd[((o * ci + c) * kh + khi) * kw + kwi];
                            if wv == 0.0 {
                                continue;
                            }
                            for oh in 0..ho {
                                let ih = (oh * stride.0 + khi) as isize - pad.0 as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let xrow = xbase + ih as usize * wdt;
                                let orow = obase + oh * wo;
                                for ow in 0..wo {
                                    let iw = (ow * stride.1 + kwi) as isize - pad.1 as isize;
                                    if iw < 0 || iw >= wdt as isize {
                                        continue;
                                    }
                                    out[orow + ow] += wv * xd[xrow + iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![batch, co, ho, wo], out)?;
        Ok(self.push(
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
                pad,
            },
            t,
        ))
    }

    /// Per-channel normalization over all non-channel axes using batch
    /// statistics, with trainable scale and shift. When `track` is set, the
    /// computed statistics are recorded in `norm_updates` under the given
    /// running-stat entry names.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        track: Option<(&str, &str)>,
    ) -> Result<Var> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        if xs.len() < 2 {
            return Err(Error::net("batch_norm needs at least 2 dimensions"));
        }
        let channels = xs[1];
        if self.nodes[gamma.0].value.len() != channels || self.nodes[beta.0].value.len() != channels
        {
            return Err(Error::net("batch_norm: scale/shift length must equal channels"));
        }
        let batch = xs[0];
        let spatial: usize = xs[2..].iter().product::<usize>().max(1);
        let m = (batch * spatial) as f64;

        let xd = self.nodes[x.0].value.data();
        let mut mean = vec![0.0; channels];
        let mut var = vec![0.0; channels];
        for bi in 0..batch {
            for c in 0..channels {
                let base = (bi * channels + c) * spatial;
                let mut s = 0.0;
                for v in &xd[base..base + spatial] {
                    s += v;
                }
                mean[c] += s;
            }
        }
        for v in mean.iter_mut() {
            *v /= m;
        }
        for bi in 0..batch {
            for c in 0..channels {
                let base = (bi * channels + c) * spatial;
                let mu = mean[c];
                let mut s = 0.0;
                for v in &xd[base..base + spatial] {
                    let d = v - mu;
                    s += d * d;
                }
                var[c] += s;
            }
        }
        for v in var.iter_mut() {
            *v /= m;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();

        let gd = self.nodes[gamma.0].value.data();
        let bd = self.nodes[beta.0].value.data();
        let mut out = vec![0.0; xd.len()];
        for bi in 0..batch {
            for c in 0..channels {
                let base = (bi * channels + c) * spatial;
                let (mu, is, g, be) = (mean[c], inv_std[c], gd[c], bd[c]);
                for (o, v) in out[base..base + spatial].iter_mut().zip(&xd[base..base + spatial]) {
                    *o = g * (v - mu) * is + be;
                }
            }
        }

        if let Some((mean_name, var_name)) = track {
            self.norm_updates.push(NormUpdate {
                mean_name: mean_name.to_string(),
                var_name: var_name.to_string(),
                mean: mean.clone(),
                var: var.clone(),
            });
        }

        let t = Tensor::new(xs, out)?;
        Ok(self.push(
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                mean,
                inv_std,
            },
            t,
        ))
    }

    /// Constant per-channel affine `y = scale_c * x + shift_c` (inference-mode
    /// normalization with folded statistics).
    pub fn channel_affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        if xs.len() < 2 || xs[1] != scale.len() || xs[1] != shift.len() {
            return Err(Error::net("channel_affine: scale/shift length must equal channels"));
        }
        let (batch, channels) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product::<usize>().max(1);
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![0.0; xd.len()];
        for bi in 0..batch {
            for c in 0..channels {
                let base = (bi * channels + c) * spatial;
                for (o, v) in out[base..base + spatial].iter_mut().zip(&xd[base..base + spatial]) {
                    *o = scale[c] * v + shift[c];
                }
            }
        }
        let t = Tensor::new(xs, out)?;
        Ok(self.push(
            Op::ChannelAffine {
                x: x.0,
                scale: scale.to_vec(),
            },
            t,
        ))
    }

    /// `x [B,C,*] + v [B,C]` broadcast over the trailing axes.
    pub fn add_channel_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let vs = self.nodes[v.0].value.shape();
        if xs.len() < 2 || vs.len() != 2 || vs[0] != xs[0] || vs[1] != xs[1] {
            return Err(Error::net(format!(
                "add_channel_vec: incompatible shapes {xs:?} + {vs:?}"
            )));
        }
        let (batch, channels) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product::<usize>().max(1);
        let xd = self.nodes[x.0].value.data();
        let vd = self.nodes[v.0].value.data();
        let mut out = vec![0.0; xd.len()];
        for bi in 0..batch {
            for c in 0..channels {
                let base = (bi * channels + c) * spatial;
                let add = vd[bi * channels + c];
                for (o, v) in out[base..base + spatial].iter_mut().zip(&xd[base..base + spatial]) {
                    *o = v + add;
                }
            }
        }
        let t = Tensor::new(xs, out)?;
        Ok(self.push(Op::AddChannelVec(x.0, v.0), t))
    }

    /// Row lookup: `table [V,E]` indexed by `ids` -> `[len(ids), E]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.nodes[table.0].value.shape();
        if ts.len() != 2 {
            return Err(Error::net("gather: table must be 2-D"));
        }
        let (v, e) = (ts[0], ts[1]);
        for &id in ids {
            if id >= v {
                return Err(Error::net(format!("gather: id {id} >= table rows {v}")));
            }
        }
        let td = self.nodes[table.0].value.data();
        let mut out = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            out.extend_from_slice(&td[id * e..(id + 1) * e]);
        }
        let t = Tensor::new(vec![ids.len(), e], out)?;
        Ok(self.push(
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
            t,
        ))
    }

    /// Concatenates along the channel axis (dim 1).
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let asn = self.nodes[a.0].value.shape().to_vec();
        let bsn = self.nodes[b.0].value.shape().to_vec();
        if asn.len() != bsn.len() || asn.len() < 2 || asn[0] != bsn[0] || asn[2..] != bsn[2..] {
            return Err(Error::net(format!(
                "concat_channels: incompatible shapes {asn:?} ++ {bsn:?}"
            )));
        }
        let batch = asn[0];
        let (c1, c2) = (asn[1], bsn[1]);
        let spatial: usize = asn[2..].iter().product::<usize>().max(1);
        let ad = self.nodes[a.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let mut out = Vec::with_capacity(ad.len() + bd.len());
        for bi in 0..batch {
            out.extend_from_slice(&ad[bi * c1 * spatial..(bi + 1) * c1 * spatial]);
            out.extend_from_slice(&bd[bi * c2 * spatial..(bi + 1) * c2 * spatial]);
        }
        let mut shape = asn;
        shape[1] = c1 + c2;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(Op::ConcatChannels(a.0, b.0), t))
    }

    /// Reinterprets the buffer under a new shape of equal element count.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let count: usize = shape.iter().product();
        if count != self.nodes[a.0].value.len() {
            return Err(Error::net(format!(
                "reshape: {} elements into shape {shape:?}",
                self.nodes[a.0].value.len()
            )));
        }
        let t = Tensor::new(shape, self.nodes[a.0].value.data().to_vec())?;
        Ok(self.push(Op::Reshape(a.0), t))
    }

    /// Mean over every element -> scalar.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let d = self.nodes[a.0].value.data();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Op::MeanAll(a.0), Tensor::scalar(m))
    }

    /// `[B,C,*] -> [B,C]`, mean over the trailing spatial axes.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let xs = self.nodes[a.0].value.shape().to_vec();
        if xs.len() < 3 {
            return Err(Error::net("global_avg_pool needs spatial axes"));
        }
        let (batch, channels) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        let xd = self.nodes[a.0].value.data();
        let mut out = vec![0.0; batch * channels];
        for (i, o) in out.iter_mut().enumerate() {
            let base = i * spatial;
            *o = xd[base..base + spatial].iter().sum::<f64>() / spatial as f64;
        }
        let t = Tensor::new(vec![batch, channels], out)?;
        Ok(self.push(Op::GlobalAvgPool(a.0), t))
    }

    /// Scales every element of item `i` by `coeffs[i]` (dim 0 indexes items).
    pub fn scale_per_item(&mut self, x: Var, coeffs: &[f64]) -> Result<Var> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        if xs.is_empty() || xs[0] != coeffs.len() {
            return Err(Error::net(format!(
                "scale_per_item: {} coefficients for shape {xs:?}",
                coeffs.len()
            )));
        }
        let per: usize = xs[1..].iter().product::<usize>().max(1);
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![0.0; xd.len()];
        for (i, &c) in coeffs.iter().enumerate() {
            for (o, v) in out[i * per..(i + 1) * per].iter_mut().zip(&xd[i * per..(i + 1) * per]) {
                *o = c * v;
            }
        }
        let t = Tensor::new(xs, out)?;
        Ok(self.push(
            Op::ScalePerItem {
                x: x.0,
                coeffs: coeffs.to_vec(),
            },
            t,
        ))
    }

    /// Mean softmax cross-entropy of `logits [B,K]` against integer labels,
    /// stabilized by max subtraction.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.nodes[logits.0].value.shape();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::net(format!(
                "cross_entropy: logits {ls:?} vs {} labels",
                labels.len()
            )));
        }
        let k = ls[1];
        for &l in labels {
            if l >= k {
                return Err(Error::net(format!("cross_entropy: label {l} >= {k} classes")));
            }
        }
        let ld = self.nodes[logits.0].value.data();
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &ld[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let t = Tensor::scalar(total / labels.len() as f64);
        Ok(self.push(
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
            },
            t,
        ))
    }

    /// Reverse sweep from a scalar loss; parameter gradients are added into
    /// the matching grad slots of `store`.
    pub fn backward(&mut self, loss: Var, store: &mut ParameterStore) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::net("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(
            self.nodes[loss.0].value.shape().to_vec(),
            vec![1.0],
        )?);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Some(name) = &self.nodes[id].param {
                store.add_grad(name, g.data())?;
            }
            self.propagate(id, &g, &mut grads)?;
        }
        Ok(())
    }

    fn grad_slot<'a>(
        grads: &'a mut [Option<Tensor>],
        nodes: &[Node],
        id: usize,
    ) -> &'a mut Tensor {
        if grads[id].is_none() {
            grads[id] = Some(Tensor::zeros(nodes[id].value.shape().to_vec()));
        }
        grads[id].as_mut().unwrap()
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let nodes = &self.nodes;
        let gd = g.data();
        match &nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (o, v) in Self::grad_slot(grads, nodes, *a).data_mut().iter_mut().zip(gd) {
                    *o += v;
                }
                for (o, v) in Self::grad_slot(grads, nodes, *b).data_mut().iter_mut().zip(gd) {
                    *o += v;
                }
            }
            Op::Sub(a, b) => {
                for (o, v) in Self::grad_slot(grads, nodes, *a).data_mut().iter_mut().zip(gd) {
                    *o += v;
                }
                for (o, v) in Self::grad_slot(grads, nodes, *b).data_mut().iter_mut().zip(gd) {
                    *o -= v;
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[*a].value.data().to_vec(), nodes[*b].value.data().to_vec());
                for ((o, v), bvv) in Self::grad_slot(grads, nodes, *a)
                    .data_mut()
                    .iter_mut()
                    .zip(gd)
                    .zip(&bv)
                {
                    *o += v * bvv;
                }
                for ((o, v), avv) in Self::grad_slot(grads, nodes, *b)
                    .data_mut()
                    .iter_mut()
                    .zip(gd)
                    .zip(&av)
                {
                    *o += v * avv;
                }
            }
            Op::AddConst(a) => {
                for (o, v) in Self::grad_slot(grads, nodes, *a).data_mut().iter_mut().zip(gd) {
                    *o += v;
                }
            }
            Op::MulConst(a, c) => {
                for (o, v) in Self::grad_slot(grads, nodes, *a).data_mut().iter_mut().zip(gd) {
                    *o += v * c;
                }
            }
            Op::Sqrt(a) => {
                let y = nodes[id].value.data().to_vec();
                for ((o, v), yv) in Self::grad_slot(grads, nodes, *a)
                    .data_mut()
                    .iter_mut()
                    .zip(gd)
                    .zip(&y)
                {
                    if *yv > 0.0 {
                        *o += v * 0.5 / yv;
                    }
                }
            }
            Op::Magnitude(re, im) => {
                let y = nodes[id].value.data().to_vec();
                let rev = nodes[*re].value.data().to_vec();
                let imv = nodes[*im].value.data().to_vec();
                {
                    let slot = Self::grad_slot(grads, nodes, *re).data_mut();
                    for i in 0..y.len() {
                        if y[i] > 0.0 {
                            slot[i] += gd[i] * rev[i] / y[i];
                        }
                    }
                }
                {
                    let slot = Self::grad_slot(grads, nodes, *im).data_mut();
                    for i in 0..y.len() {
                        if y[i] > 0.0 {
                            slot[i] += gd[i] * imv[i] / y[i];
                        }
                    }
                }
            }
            Op::Swish(a) => {
                let xv = nodes[*a].value.data().to_vec();
                let slot = Self::grad_slot(grads, nodes, *a).data_mut();
                for i in 0..xv.len() {
                    let s = 1.0 / (1.0 + (-xv[i]).exp());
                    slot[i] += gd[i] * s * (1.0 + xv[i] * (1.0 - s));
                }
            }
            Op::Sigmoid(a) => {
                let y = nodes[id].value.data().to_vec();
                let slot = Self::grad_slot(grads, nodes, *a).data_mut();
                for i in 0..y.len() {
                    slot[i] += gd[i] * y[i] * (1.0 - y[i]);
                }
            }
            Op::Linear { x, w, b } => {
                let xs = nodes[*x].value.shape();
                let ws = nodes[*w].value.shape();
                let (batch, i_dim, o_dim) = (xs[0], xs[1], ws[1]);
                let xd = nodes[*x].value.data().to_vec();
                let wd = nodes[*w].value.data().to_vec();
                {
                    let dx = Self::grad_slot(grads, nodes, *x).data_mut();
                    for bi in 0..batch {
                        let grow = &gd[bi * o_dim..(bi + 1) * o_dim];
                        let dxrow = &mut dx[bi * i_dim..(bi + 1) * i_dim];
                        for ii in 0..i_dim {
                            let wrow = &wd[ii * o_dim..(ii + 1) * o_dim];
                            let mut acc = 0.0;
                            for (gv, wv) in grow.iter().zip(wrow) {
                                acc += gv * wv;
                            }
                            dxrow[ii] += acc;
                        }
                    }
                }
                {
                    let dw = Self::grad_slot(grads, nodes, *w).data_mut();
                    for bi in 0..batch {
                        let grow = &gd[bi * o_dim..(bi + 1) * o_dim];
                        let xrow = &xd[bi * i_dim..(bi + 1) * i_dim];
                        for (ii, &xv) in xrow.iter().enumerate() {
                            let dwrow = &mut dw[ii * o_dim..(ii + 1) * o_dim];
                            for (dv, gv) in dwrow.iter_mut().zip(grow) {
                                *dv += xv * gv;
                            }
                        }
                    }
                }
                {
                    let db = Self::grad_slot(grads, nodes, *b).data_mut();
                    for bi in 0..batch {
                        for (dv, gv) in db.iter_mut().zip(&gd[bi * o_dim..(bi + 1) * o_dim]) {
                            *dv += gv;
                        }
                    }
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xs = nodes[*x].value.shape();
                let ws = nodes[*w].value.shape();
                let (batch, ci, l) = (xs[0], xs[1], xs[2]);
                let (co, k) = (ws[0], ws[2]);
                let lo = nodes[id].value.shape()[2];
                let xd = nodes[*x].value.data().to_vec();
                let wd = nodes[*w].value.data().to_vec();
                conv1d_backward_x(
                    gd,
                    &wd,
                    batch,
                    ci,
                    l,
                    co,
                    k,
                    *stride,
                    *pad,
                    lo,
                    Self::grad_slot(grads, nodes, *x).data_mut(),
                );
                conv1d_backward_w(
                    gd,
                    &xd,
                    batch,
                    ci,
                    l,
                    co,
                    k,
                    *stride,
                    *pad,
                    lo,
                    Self::grad_slot(grads, nodes, *w).data_mut(),
                );
                {
                    let db = Self::grad_slot(grads, nodes, *b).data_mut();
                    for bi in 0..batch {
                        for o in 0..co {
                            let base = (bi * co + o) * lo;
                            db[o] += gd[base..base + lo].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::ConvTranspose1d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xs = nodes[*x].value.shape();
                let ws = nodes[*w].value.shape();
                let (batch, ci, l) = (xs[0], xs[1], xs[2]);
                let (co, k) = (ws[1], ws[2]);
                let lo = nodes[id].value.shape()[2];
                let xd = nodes[*x].value.data().to_vec();
                let wd = nodes[*w].value.data().to_vec();
                {
                    let dx = Self::grad_slot(grads, nodes, *x).data_mut();
                    for bi in 0..batch {
                        for c in 0..ci {
                            let dxrow = &mut dx[(bi * ci + c) * l..(bi * ci + c + 1) * l];
                            for o in 0..co {
                                let grow = &gd[(bi * co + o) * lo..(bi * co + o + 1) * lo];
                                for kk in 0..k {
                                    let wv = wd[(c * co + o) * k + kk];
                                    if wv == 0.0 {
                                        continue;
                                    }
                                    for (il, dxv) in dxrow.iter_mut().enumerate() {
                                        let pos = il * stride + kk;
                                        if pos >= *pad && pos - pad < lo {
                                            *dxv += wv * grow[pos - pad];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                {
                    let dw = Self::grad_slot(grads, nodes, *w).data_mut();
                    for bi in 0..batch {
                        for c in 0..ci {
                            let xrow = &xd[(bi * ci + c) * l..(bi * ci + c + 1) * l];
                            for o in 0..co {
                                let grow = &gd[(bi * co + o) * lo..(bi * co + o + 1) * lo];
                                for kk in 0..k {
                                    let mut acc = 0.0;
                                    for (il, &xv) in xrow.iter().enumerate() {
                                        let pos = il * stride + kk;
                                        if pos >= *pad && pos - pad < lo {
                                            acc += xv * grow[pos - pad];
                                        }
                                    }
                                    dw[(c * co + o) * k + kk] += acc;
                                }
                            }
                        }
                    }
                }
                {
                    let db = Self::grad_slot(grads, nodes, *b).data_mut();
                    for bi in 0..batch {
                        for o in 0..co {
                            let base = (bi * co + o) * lo;
                            db[o] += gd[base..base + lo].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xs = nodes[*x].value.shape();
                let ws = nodes[*w].value.shape();
                let (batch, ci, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
                let (co, kh, kw) = (ws[0], ws[2], ws[3]);
                let os = nodes[id].value.shape();
                let (ho, wo) = (os[2], os[3]);
                let xd = nodes[*x].value.data().to_vec();
                let wd = nodes[*w].value.data().to_vec();
                {
                    let dx = Self::grad_slot(grads, nodes, *x).data_mut();
                    for bi in 0..batch {
                        for o in 0..co {
                            let obase = (bi * co + o) * ho * wo;
                            for c in 0..ci {
                                let xbase = (bi * ci + c) * h * wdt;
                                for khi in 0..kh {
                                    for kwi in 0..kw {
                                        let wv = wd[((o * ci + c) * kh + khi) * kw + kwi];
                                        if wv == 0.0 {
                                            continue;
                                        }
                                        for oh in 0..ho {
                                            let ih =
                                                (oh * stride.0 + khi) as isize - pad.0 as isize;
                                            if ih < 0 || ih >= h as isize {
                                                continue;
                                            }
                                            for ow in 0..wo {
                                                let iw = (ow * stride.1 + kwi) as isize
                                                    - pad.1 as isize;
                                                if iw < 0 || iw >= wdt as isize {
                                                    continue;
                                                }
                                                dx[xbase + ih as usize * wdt + iw as usize] +=
                                                    wv * gd[obase + oh * wo + ow];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                {
                    let dw = Self::grad_slot(grads, nodes, *w).data_mut();
                    for bi in 0..batch {
                        for o in 0..co {
                            let obase = (bi * co + o) * ho * wo;
                            for c in 0..ci {
                                let xbase = (bi * ci + c) * h * wdt;
                                for khi in 0..kh {
                                    for kwi in 0..kw {
                                        let mut acc = 0.0;
                                        for oh in 0..ho {
                                            let ih =
                                                (oh * stride.0 + khi) as isize - pad.0 as isize;
                                            if ih < 0 || ih >= h as isize {
                                                continue;
                                            }
                                            for ow in 0..wo {
                                                let iw = (ow * stride.1 + kwi) as isize
                                                    - pad.1 as isize;
                                                if iw < 0 || iw >= wdt as isize {
                                                    continue;
                                                }
                                                acc += xd[xbase + ih as usize * wdt + iw as usize]
                                                    * gd[obase + oh * wo + ow];
                                            }
                                        }
                                        dw[((o * ci + c) * kh + khi) * kw + kwi] += acc;
                                    }
                                }
                            }
                        }
                    }
                }
                {
                    let db = Self::grad_slot(grads, nodes, *b).data_mut();
                    for bi in 0..batch {
                        for o in 0..co {
                            let base = (bi * co + o) * ho * wo;
                            db[o] += gd[base..base + ho * wo].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let xs = nodes[*x].value.shape();
                let (batch, channels) = (xs[0], xs[1]);
                let spatial: usize = xs[2..].iter().product::<usize>().max(1);
                let m = (batch * spatial) as f64;
                let xd = nodes[*x].value.data().to_vec();
                let gam = nodes[*gamma].value.data().to_vec();

                // per-channel sums of g and g * xhat
                let mut sum_g = vec![0.0; channels];
                let mut sum_gx = vec![0.0; channels];
                for bi in 0..batch {
                    for c in 0..channels {
                        let base = (bi * channels + c) * spatial;
                        let (mu, is) = (mean[c], inv_std[c]);
                        let mut sg = 0.0;
                        let mut sgx = 0.0;
                        for i in 0..spatial {
                            let gv = gd[base + i];
                            sg += gv;
                            sgx += gv * (xd[base + i] - mu) * is;
                        }
                        sum_g[c] += sg;
                        sum_gx[c] += sgx;
                    }
                }
                {
                    let dgamma = Self::grad_slot(grads, nodes, *gamma).data_mut();
                    for c in 0..channels {
                        dgamma[c] += sum_gx[c];
                    }
                }
                {
                    let dbeta = Self::grad_slot(grads, nodes, *beta).data_mut();
                    for c in 0..channels {
                        dbeta[c] += sum_g[c];
                    }
                }
                {
                    let dx = Self::grad_slot(grads, nodes, *x).data_mut();
                    for bi in 0..batch {
                        for c in 0..channels {
                            let base = (bi * channels + c) * spatial;
                            let (mu, is) = (mean[c], inv_std[c]);
                            let coeff = gam[c] * is;
                            let mg = sum_g[c] / m;
                            let mgx = sum_gx[c] / m;
                            for i in 0..spatial {
                                let xhat = (xd[base + i] - mu) * is;
                                dx[base + i] += coeff * (gd[base + i] - mg - xhat * mgx);
                            }
                        }
                    }
                }
            }
            Op::ChannelAffine { x, scale } => {
                let xs = nodes[*x].value.shape();
                let (batch, channels) = (xs[0], xs[1]);
                let spatial: usize = xs[2..].iter().product::<usize>().max(1);
                let dx = Self::grad_slot(grads, nodes, *x).data_mut();
                for bi in 0..batch {
                    for c in 0..channels {
                        let base = (bi * channels + c) * spatial;
                        for i in 0..spatial {
                            dx[base + i] += gd[base + i] * scale[c];
                        }
                    }
                }
            }
            Op::AddChannelVec(x, v) => {
                let xs = nodes[*x].value.shape();
                let (batch, channels) = (xs[0], xs[1]);
                let spatial: usize = xs[2..].iter().product::<usize>().max(1);
                {
                    let dx = Self::grad_slot(grads, nodes, *x).data_mut();
                    for (o, gv) in dx.iter_mut().zip(gd) {
                        *o += gv;
                    }
                }
                {
                    let dv = Self::grad_slot(grads, nodes, *v).data_mut();
                    for bi in 0..batch {
                        for c in 0..channels {
                            let base = (bi * channels + c) * spatial;
                            dv[bi * channels + c] += gd[base..base + spatial].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let e = nodes[*table].value.shape()[1];
                let dt = Self::grad_slot(grads, nodes, *table).data_mut();
                for (i, &id_) in ids.iter().enumerate() {
                    for (o, gv) in dt[id_ * e..(id_ + 1) * e].iter_mut().zip(&gd[i * e..(i + 1) * e])
                    {
                        *o += gv;
                    }
                }
            }
            Op::ConcatChannels(a, b) => {
                let asn = nodes[*a].value.shape();
                let bsn = nodes[*b].value.shape();
                let batch = asn[0];
                let (c1, c2) = (asn[1], bsn[1]);
                let spatial: usize = asn[2..].iter().product::<usize>().max(1);
                let stride_out = (c1 + c2) * spatial;
                {
                    let da = Self::grad_slot(grads, nodes, *a).data_mut();
                    for bi in 0..batch {
                        let src = &gd[bi * stride_out..bi * stride_out + c1 * spatial];
                        for (o, gv) in da[bi * c1 * spatial..(bi + 1) * c1 * spatial]
                            .iter_mut()
                            .zip(src)
                        {
                            *o += gv;
                        }
                    }
                }
                {
                    let db = Self::grad_slot(grads, nodes, *b).data_mut();
                    for bi in 0..batch {
                        let src =
                            &gd[bi * stride_out + c1 * spatial..bi * stride_out + stride_out];
                        for (o, gv) in db[bi * c2 * spatial..(bi + 1) * c2 * spatial]
                            .iter_mut()
                            .zip(src)
                        {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                for (o, v) in Self::grad_slot(grads, nodes, *a).data_mut().iter_mut().zip(gd) {
                    *o += v;
                }
            }
            Op::MeanAll(a) => {
                let n = nodes[*a].value.len() as f64;
                let gv = gd[0] / n;
                for o in Self::grad_slot(grads, nodes, *a).data_mut().iter_mut() {
                    *o += gv;
                }
            }
            Op::GlobalAvgPool(a) => {
                let xs = nodes[*a].value.shape();
                let spatial: usize = xs[2..].iter().product();
                let dx = Self::grad_slot(grads, nodes, *a).data_mut();
                for (i, gv) in gd.iter().enumerate() {
                    let share = gv / spatial as f64;
                    for o in dx[i * spatial..(i + 1) * spatial].iter_mut() {
                        *o += share;
                    }
                }
            }
            Op::ScalePerItem { x, coeffs } => {
                let per = nodes[*x].value.len() / coeffs.len();
                let dx = Self::grad_slot(grads, nodes, *x).data_mut();
                for (i, &c) in coeffs.iter().enumerate() {
                    for (o, gv) in dx[i * per..(i + 1) * per].iter_mut().zip(&gd[i * per..(i + 1) * per]) {
                        *o += gv * c;
                    }
                }
            }
            Op::CrossEntropy { logits, labels } => {
                let k = nodes[*logits].value.shape()[1];
                let ld = nodes[*logits].value.data().to_vec();
                let scale = gd[0] / labels.len() as f64;
                let dl = Self::grad_slot(grads, nodes, *logits).data_mut();
                for (i, &label) in labels.iter().enumerate() {
                    let row = &ld[i * k..(i + 1) * k];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|v| (v - m).exp()).sum();
                    for j in 0..k {
                        let soft = (row[j] - m).exp() / denom;
                        let indic = if j == label { 1.0 } else { 0.0 };
                        dl[i * k + j] += scale * (soft - indic);
                    }
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// conv1d kernels (hot path)
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn conv1d_forward(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    batch: usize,
    ci: usize,
    l: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    lo: usize,
    out: &mut [f64],
) {
    for bi in 0..batch {
        for o in 0..co {
            let orow = &mut out[(bi * co + o) * lo..(bi * co + o + 1) * lo];
            orow.iter_mut().for_each(|v| *v = bias[o]);
            for c in 0..ci {
                let xrow = &x[(bi * ci + c) * l..(bi * ci + c + 1) * l];
                for kk in 0..k {
                    let wv = w[(o * ci + c) * k + kk];
                    let off = kk as isize - pad as isize;
                    if stride == 1 {
                        let start = (-off).max(0) as usize;
                        let end = ((l as isize - off).min(lo as isize)).max(0) as usize;
                        if start >= end {
                            continue;
                        }
                        let xs = &xrow[(start as isize + off) as usize..(end as isize + off) as usize];
                        for (ov, xv) in orow[start..end].iter_mut().zip(xs) {
                            *ov += wv * xv;
                        }
                    } else {
                        for (ol, ov) in orow.iter_mut().enumerate() {
                            let il = (ol * stride) as isize + off;
                            if il >= 0 && il < l as isize {
                                *ov += wv * xrow[il as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv1d_backward_x(
    g: &[f64],
    w: &[f64],
    batch: usize,
    ci: usize,
    l: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    lo: usize,
    dx: &mut [f64],
) {
    for bi in 0..batch {
        for o in 0..co {
            let grow = &g[(bi * co + o) * lo..(bi * co + o + 1) * lo];
            for c in 0..ci {
                let dxrow = &mut dx[(bi * ci + c) * l..(bi * ci + c + 1) * l];
                for kk in 0..k {
                    let wv = w[(o * ci + c) * k + kk];
                    let off = kk as isize - pad as isize;
                    if stride == 1 {
                        let start = (-off).max(0) as usize;
                        let end = ((l as isize - off).min(lo as isize)).max(0) as usize;
                        if start >= end {
                            continue;
                        }
                        let dxs = &mut dxrow
                            [(start as isize + off) as usize..(end as isize + off) as usize];
                        for (dv, gv) in dxs.iter_mut().zip(&grow[start..end]) {
                            *dv += wv * gv;
                        }
                    } else {
                        for (ol, &gv) in grow.iter().enumerate() {
                            let il = (ol * stride) as isize + off;
                            if il >= 0 && il < l as isize {
                                dxrow[il as usize] += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv1d_backward_w(
    g: &[f64],
    x: &[f64],
    batch: usize,
    ci: usize,
    l: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    lo: usize,
    dw: &mut [f64],
) {
    for bi in 0..batch {
        for o in 0..co {
            let grow = &g[(bi * co + o) * lo..(bi * co + o + 1) * lo];
            for c in 0..ci {
                let xrow = &x[(bi * ci + c) * l..(bi * ci + c + 1) * l];
                for kk in 0..k {
                    let off = kk as isize - pad as isize;
                    let mut acc = 0.0;
                    if stride == 1 {
                        let start = (-off).max(0) as usize;
                        let end = ((l as isize - off).min(lo as isize)).max(0) as usize;
                        if start < end {
                            let xs = &xrow
                                [(start as isize + off) as usize..(end as isize + off) as usize];
                            for (gv, xv) in grow[start..end].iter().zip(xs) {
                                acc += gv * xv;
                            }
                        }
                    } else {
                        for (ol, &gv) in grow.iter().enumerate() {
                            let il = (ol * stride) as isize + off;
                            if il >= 0 && il < l as isize {
                                acc += gv * xrow[il as usize];
                            }
                        }
                    }
                    dw[(o * ci + c) * k + kk] += acc;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::ParameterStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Finite-difference oracle over every parameter coordinate of `store`.
    fn fd_check<F>(store: &mut ParameterStore, mut f: F, tol: f64)
    where
        F: FnMut(&mut Tape, &ParameterStore) -> Var,
    {
        store.zero_grads();
        {
            let mut tape = Tape::new();
            let loss = f(&mut tape, store);
            tape.backward(loss, store).unwrap();
        }
        let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
        for name in names {
            let n = store.get(&name).unwrap().1.len();
            for i in 0..n {
                let orig = store.get(&name).unwrap().1[i];
                let h = 1e-6 * (1.0 + orig.abs());
                store.values_mut(&name).unwrap()[i] = orig + h;
                let mut tape = Tape::new();
                let lp = f(&mut tape, store);
                let fp = tape.value(lp).item();
                store.values_mut(&name).unwrap()[i] = orig - h;
                let mut tape = Tape::new();
                let lm = f(&mut tape, store);
                let fm = tape.value(lm).item();
                store.values_mut(&name).unwrap()[i] = orig;
                let numeric = (fp - fm) / (2.0 * h);
                let analytic = store.grad(&name).unwrap()[i];
                let denom = (analytic.abs() + numeric.abs()).max(1e-8);
                let rel = (analytic - numeric).abs() / denom;
                assert!(
                    rel < tol,
                    "{name}[{i}]: analytic {analytic} vs numeric {numeric} (rel {rel})"
                );
            }
        }
    }

    fn rand_store(entries: &[(&str, Vec<usize>)], seed: u64) -> ParameterStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        for (name, shape) in entries {
            let n: usize = shape.iter().product();
            let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            store.add(name, shape.clone(), values).unwrap();
        }
        store
    }

    #[test]
    fn elementwise_ops_gradients() {
        let mut store = rand_store(&[("a", vec![6]), ("b", vec![6])], 1);
        fd_check(
            &mut store,
            |tape, store| {
                let a = tape.param(store, "a").unwrap();
                let b = tape.param(store, "b").unwrap();
                let s = tape.add(a, b).unwrap();
                let d = tape.sub(s, b).unwrap();
                let m = tape.mul(d, s).unwrap();
                let m = tape.mul_const(m, 0.7);
                let m = tape.add_const(m, 2.0); // keep sqrt away from zero
                let r = tape.sqrt(m);
                let w = tape.swish(r);
                let g = tape.sigmoid(w);
                tape.mean_all(g)
            },
            1e-6,
        );
    }

    #[test]
    fn magnitude_gradient() {
        let mut store = rand_store(&[("re", vec![5]), ("im", vec![5])], 2);
        fd_check(
            &mut store,
            |tape, store| {
                let re = tape.param(store, "re").unwrap();
                let im = tape.param(store, "im").unwrap();
                let m = tape.magnitude(re, im).unwrap();
                tape.mean_all(m)
            },
            1e-6,
        );
    }

    #[test]
    fn linear_gradient() {
        let mut store = rand_store(&[("x", vec![3, 4]), ("w", vec![4, 2]), ("b", vec![2])], 3);
        fd_check(
            &mut store,
            |tape, store| {
                let x = tape.param(store, "x").unwrap();
                let w = tape.param(store, "w").unwrap();
                let b = tape.param(store, "b").unwrap();
                let y = tape.linear(x, w, b).unwrap();
                let y2 = tape.mul(y, y).unwrap();
                tape.mean_all(y2)
            },
            1e-6,
        );
    }

    #[test]
    fn conv1d_gradient_stride1_and_2() {
        for stride in [1usize, 2] {
            let mut store = rand_store(
                &[("x", vec![2, 3, 8]), ("w", vec![4, 3, 3]), ("b", vec![4])],
                4 + stride as u64,
            );
            fd_check(
                &mut store,
                |tape, store| {
                    let x = tape.param(store, "x").unwrap();
                    let w = tape.param(store, "w").unwrap();
                    let b = tape.param(store, "b").unwrap();
                    let y = tape.conv1d(x, w, b, stride, 1).unwrap();
                    let y2 = tape.mul(y, y).unwrap();
                    tape.mean_all(y2)
                },
                1e-6,
            );
        }
    }

    #[test]
    fn conv_transpose1d_gradient() {
        let mut store = rand_store(
            &[("x", vec![2, 3, 6]), ("w", vec![3, 2, 4]), ("b", vec![2])],
            5,
        );
        fd_check(
            &mut store,
            |tape, store| {
                let x = tape.param(store, "x").unwrap();
                let w = tape.param(store, "w").unwrap();
                let b = tape.param(store, "b").unwrap();
                let y = tape.conv_transpose1d(x, w, b, 2, 1).unwrap();
                let y2 = tape.mul(y, y).unwrap();
                tape.mean_all(y2)
            },
            1e-6,
        );
    }

    #[test]
    fn conv_transpose1d_doubles_length() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 2, 8]));
        let w = tape.leaf(Tensor::zeros(vec![2, 3, 4]));
        let b = tape.leaf(Tensor::zeros(vec![3]));
        let y = tape.conv_transpose1d(x, w, b, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 3, 16]);
    }

    #[test]
    fn conv2d_gradient() {
        let mut store = rand_store(
            &[("x", vec![2, 2, 5, 6]), ("w", vec![3, 2, 3, 3]), ("b", vec![3])],
            6,
        );
        fd_check(
            &mut store,
            |tape, store| {
                let x = tape.param(store, "x").unwrap();
                let w = tape.param(store, "w").unwrap();
                let b = tape.param(store, "b").unwrap();
                let y = tape.conv2d(x, w, b, (2, 2), (1, 1)).unwrap();
                let y2 = tape.mul(y, y).unwrap();
                tape.mean_all(y2)
            },
            1e-6,
        );
    }

    #[test]
    fn batch_norm_gradient() {
        let mut store = rand_store(
            &[("x", vec![3, 2, 4]), ("gamma", vec![2]), ("beta", vec![2])],
            7,
        );
        // a fixed random mask after the norm keeps the x-gradients away from
        // the normalization null space (and the FD noise floor)
        let mask: Vec<f64> = {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect()
        };
        fd_check(
            &mut store,
            move |tape, store| {
                let x = tape.param(store, "x").unwrap();
                let gamma = tape.param(store, "gamma").unwrap();
                let beta = tape.param(store, "beta").unwrap();
                let y = tape.batch_norm(x, gamma, beta, 1e-5, None).unwrap();
                let m = tape.leaf(Tensor::new(vec![3, 2, 4], mask.clone()).unwrap());
                let ym = tape.mul(y, m).unwrap();
                let y2 = tape.mul(ym, ym).unwrap();
                tape.mean_all(y2)
            },
            1e-5,
        );
    }

    #[test]
    fn batch_norm_normalizes() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<f64> = (0..2 * 3 * 10).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let x = tape.leaf(Tensor::new(vec![2, 3, 10], data).unwrap());
        let gamma = tape.leaf(Tensor::new(vec![3], vec![1.0; 3]).unwrap());
        let beta = tape.leaf(Tensor::new(vec![3], vec![0.0; 3]).unwrap());
        let y = tape.batch_norm(x, gamma, beta, 1e-9, None).unwrap();
        let yd = tape.value(y).data();
        for c in 0..3 {
            let mut vals = Vec::new();
            for bi in 0..2 {
                let base = (bi * 3 + c) * 10;
                vals.extend_from_slice(&yd[base..base + 10]);
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn misc_structural_ops_gradients() {
        let mut store = rand_store(
            &[("x", vec![2, 3, 4]), ("v", vec![2, 3]), ("y", vec![2, 2, 4])],
            9,
        );
        fd_check(
            &mut store,
            |tape, store| {
                let x = tape.param(store, "x").unwrap();
                let v = tape.param(store, "v").unwrap();
                let y = tape.param(store, "y").unwrap();
                let xa = tape.add_channel_vec(x, v).unwrap();
                let cat = tape.concat_channels(xa, y).unwrap();
                let scaled = tape.scale_per_item(cat, &[0.5, -1.5]).unwrap();
                let pooled = tape.global_avg_pool(scaled).unwrap();
                let sq = tape.mul(pooled, pooled).unwrap();
                tape.mean_all(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn gather_and_cross_entropy_gradients() {
        let mut store = rand_store(&[("table", vec![3, 4]), ("w", vec![4, 3]), ("b", vec![3])], 10);
        fd_check(
            &mut store,
            |tape, store| {
                let table = tape.param(store, "table").unwrap();
                let w = tape.param(store, "w").unwrap();
                let b = tape.param(store, "b").unwrap();
                let emb = tape.gather(table, &[0, 2, 1, 2]).unwrap();
                let logits = tape.linear(emb, w, b).unwrap();
                tape.cross_entropy(logits, &[0, 1, 2, 0]).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn cross_entropy_known_values() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let loss = tape.cross_entropy(logits, &[0]).unwrap();
        assert!((tape.value(loss).item() - (2.0f64).ln()).abs() < 1e-12);

        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![1, 2], vec![100.0, 0.0]).unwrap());
        let loss = tape.cross_entropy(logits, &[0]).unwrap();
        assert!(tape.value(loss).item() < 1e-9);

        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![1, 2], vec![2.0, 1.0]).unwrap());
        let loss = tape.cross_entropy(logits, &[0]).unwrap();
        let expect = -(1.0f64 / (1.0 + (-1.0f64).exp())).ln();
        assert!((tape.value(loss).item() - expect).abs() < 1e-9);
        assert!((tape.value(loss).item() - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        assert!(tape.cross_entropy(logits, &[2]).is_err());
    }

    #[test]
    fn backward_accumulates_additively() {
        let mut store = rand_store(&[("a", vec![4])], 11);
        store.zero_grads();
        let build = |tape: &mut Tape, store: &ParameterStore| {
            let a = tape.param(store, "a").unwrap();
            let sq = tape.mul(a, a).unwrap();
            tape.mean_all(sq)
        };
        let mut tape = Tape::new();
        let loss = build(&mut tape, &store);
        tape.backward(loss, &mut store).unwrap();
        let once: Vec<f64> = store.grad("a").unwrap().to_vec();
        let mut tape = Tape::new();
        let loss = build(&mut tape, &store);
        tape.backward(loss, &mut store).unwrap();
        let twice: Vec<f64> = store.grad("a").unwrap().to_vec();
        for (o, t) in once.iter().zip(&twice) {
            assert_eq!(*t, 2.0 * o, "second backward must exactly double grads");
        }
    }

    #[test]
    fn backward_requires_scalar() {
        let mut store = rand_store(&[("a", vec![4])], 12);
        let mut tape = Tape::new();
        let a = tape.param(&store, "a").unwrap();
        assert!(tape.backward(a, &mut store).is_err());
    }

    #[test]
    fn track_records_norm_updates() {
        let store = rand_store(&[("x", vec![2, 2, 4])], 13);
        let mut tape = Tape::new();
        let x = tape.param(&store, "x").unwrap();
        let gamma = tape.leaf(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let beta = tape.leaf(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        tape.batch_norm(x, gamma, beta, 1e-5, Some(("bn.rm", "bn.rv")))
            .unwrap();
        assert_eq!(tape.norm_updates.len(), 1);
        assert_eq!(tape.norm_updates[0].mean_name, "bn.rm");
        assert_eq!(tape.norm_updates[0].mean.len(), 2);
    }
}
