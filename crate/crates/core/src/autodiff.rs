//! Tape-based reverse-mode differentiation over the operator set the model
//! needs. Every forward call appends a node holding the result tensor, its
//! parent indices, and a backward rule; `backward` walks the tape in reverse,
//! which is already a reverse topological order because nodes can only refer
//! to earlier nodes. Gradients accumulate additively across fan-out, so a
//! parameter used in several places (shared weights) receives the sum of all
//! its contributions.

use crate::conv::{conv3d, conv3d_grad_input, conv3d_grad_weight};
use crate::error::{CoreError, Result};
use crate::tensor::{fs, Scalar, Tensor};
use crate::wavelet;

/// Index of a node on the tape.
pub type Var = usize;

/// Backward rule of one operation: maps the node's incoming gradient to one
/// gradient per parent, in parent order.
trait GradFn<T: Scalar> {
    fn backward(
        &self,
        grad: &Tensor<T>,
        parents: &[&Tensor<T>],
        output: &Tensor<T>,
    ) -> Result<Vec<Tensor<T>>>;
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    parents: Vec<Var>,
    op: Option<Box<dyn GradFn<T>>>,
}

/// Per-leaf gradients produced by [`Tape::backward`]. Leaves that the loss
/// never touches stay `None`.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v).and_then(|g| g.take())
    }
}

/// Loss components reported alongside the combined objective.
#[derive(Debug, Clone, Copy)]
pub struct DiceCeParts {
    pub dice: f64,
    pub ce: f64,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The tensor held by a node.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v].value
    }

    fn push(&mut self, value: Tensor<T>, parents: Vec<Var>, op: Box<dyn GradFn<T>>) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            op: Some(op),
        });
        self.nodes.len() - 1
    }

    /// Installs an input or parameter tensor as a differentiable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            op: None,
        });
        self.nodes.len() - 1
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, vec![a, b], Box::new(AddGrad)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(fs::<T>(c));
        self.push(out, vec![a], Box::new(ScaleGrad { c }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul_elem(self.value(b))?;
        Ok(self.push(out, vec![a, b], Box::new(MulGrad)))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, vec![a], Box::new(SumGrad))
    }

    /// Element-wise arithmetic mean of same-shape tensors.
    pub fn mean_many(&mut self, vs: &[Var]) -> Result<Var> {
        if vs.is_empty() {
            return Err(CoreError::Invalid("mean of zero tensors".into()));
        }
        let mut acc = self.value(vs[0]).clone();
        for &v in &vs[1..] {
            acc = acc.add(self.value(v))?;
        }
        let out = acc.scale(fs::<T>(1.0 / vs.len() as f64));
        Ok(self.push(out, vs.to_vec(), Box::new(MeanManyGrad { k: vs.len() })))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let from = self.value(a).shape().to_vec();
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, vec![a], Box::new(ReshapeGrad { from })))
    }

    /// Token-major affine map: x (N, d_in) × wᵀ (d_out, d_in) + b (d_out).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || ws[0] != bs[0] {
            return Err(CoreError::Shape(format!(
                "linear expects x (N,in), w (out,in), b (out); got {xs:?}, {ws:?}, {bs:?}"
            )));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = Tensor::zeros(&[n, dout]);
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let bd = self.value(b).data();
            let od = out.data_mut();
            for r in 0..n {
                let xrow = &xd[r * din..(r + 1) * din];
                let orow = &mut od[r * dout..(r + 1) * dout];
                for (o, oo) in orow.iter_mut().enumerate() {
                    let wrow = &wd[o * din..(o + 1) * din];
                    let mut acc = bd[o];
                    for i in 0..din {
                        acc += xrow[i] * wrow[i];
                    }
                    *oo = acc;
                }
            }
        }
        Ok(self.push(out, vec![x, w, b], Box::new(LinearGrad)))
    }

    /// 3D (transposed) convolution; see [`crate::conv::conv3d`].
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
        transposed: bool,
    ) -> Result<Var> {
        let out = conv3d(self.value(x), self.value(w), stride, padding, transposed)?;
        let k = self.value(w).shape()[2];
        Ok(self.push(
            out,
            vec![x, w],
            Box::new(ConvGrad {
                stride,
                padding,
                transposed,
                k,
            }),
        ))
    }

    /// Adds a per-channel bias vector to a (C, D, H, W) map.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (c, d, h, w) = self.value(x).dims4()?;
        if self.value(b).shape() != [c] {
            return Err(CoreError::Shape(format!(
                "bias shape {:?} does not match {c} channels",
                self.value(b).shape()
            )));
        }
        let mut out = self.value(x).clone();
        {
            let bd = self.value(b).data();
            let od = out.data_mut();
            let sp = d * h * w;
            for ci in 0..c {
                let bv = bd[ci];
                for v in &mut od[ci * sp..(ci + 1) * sp] {
                    *v += bv;
                }
            }
        }
        Ok(self.push(out, vec![x, b], Box::new(ChannelBiasGrad)))
    }

    /// Layer normalization over the trailing feature axis of (N, C) tokens,
    /// with affine parameters gamma and beta of length C.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 {
            return Err(CoreError::Shape(format!(
                "layer_norm expects (N,C) tokens, got {xs:?}"
            )));
        }
        let (n, c) = (xs[0], xs[1]);
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(CoreError::Shape("layer_norm affine shape mismatch".into()));
        }
        let mut out = Tensor::zeros(&[n, c]);
        let mut mean = Tensor::zeros(&[n]);
        let mut inv_std = Tensor::zeros(&[n]);
        {
            let xd = self.value(x).data();
            let gd = self.value(gamma).data();
            let bd = self.value(beta).data();
            let od = out.data_mut();
            let cf = fs::<T>(1.0 / c as f64);
            let epsv = fs::<T>(eps);
            for r in 0..n {
                let row = &xd[r * c..(r + 1) * c];
                let mut mu = T::ZERO;
                for &v in row {
                    mu += v;
                }
                mu *= cf;
                let mut var = T::ZERO;
                for &v in row {
                    var += (v - mu) * (v - mu);
                }
                var *= cf;
                let is = T::ONE / (var + epsv).sqrt();
                mean.data_mut()[r] = mu;
                inv_std.data_mut()[r] = is;
                for j in 0..c {
                    od[r * c + j] = (row[j] - mu) * is * gd[j] + bd[j];
                }
            }
        }
        Ok(self.push(
            out,
            vec![x, gamma, beta],
            Box::new(LayerNormGrad { mean, inv_std }),
        ))
    }

    /// Row-wise softmax over the trailing axis of an (N, C) tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 {
            return Err(CoreError::Shape(format!(
                "softmax expects (N,C), got {xs:?}"
            )));
        }
        let (n, c) = (xs[0], xs[1]);
        let mut out = Tensor::zeros(&[n, c]);
        {
            let xd = self.value(x).data();
            let od = out.data_mut();
            for r in 0..n {
                softmax_row(&xd[r * c..(r + 1) * c], &mut od[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push(out, vec![x], Box::new(SoftmaxGrad)))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| gelu_val(v));
        self.push(out, vec![x], Box::new(GeluGrad))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid_val);
        self.push(out, vec![x], Box::new(SigmoidGrad))
    }

    /// Rearranges a (C, d, h, w) map into (N, C) token rows grouped by
    /// non-overlapping cubic windows; `window` must divide every extent.
    /// `window == 1` is a plain voxel-major tokenization.
    pub fn to_tokens(&mut self, x: Var, window: usize) -> Result<Var> {
        let (c, d, h, w) = self.value(x).dims4()?;
        check_window(window, d, h, w)?;
        let mut out = Tensor::zeros(&[d * h * w, c]);
        {
            let xd = self.value(x).data();
            let od = out.data_mut();
            let sp = d * h * w;
            for_each_token(d, h, w, window, |row, pos| {
                for ci in 0..c {
                    od[row * c + ci] = xd[ci * sp + pos];
                }
            });
        }
        Ok(self.push(
            out,
            vec![x],
            Box::new(TokensGrad {
                window,
                dims: (c, d, h, w),
                into_tokens: true,
            }),
        ))
    }

    /// Inverse of [`Tape::to_tokens`] for the given spatial dims.
    pub fn from_tokens(
        &mut self,
        t: Var,
        window: usize,
        dims: (usize, usize, usize),
    ) -> Result<Var> {
        let ts = self.value(t).shape().to_vec();
        let (d, h, w) = dims;
        if ts.len() != 2 || ts[0] != d * h * w {
            return Err(CoreError::Shape(format!(
                "token tensor {ts:?} does not cover grid {d}x{h}x{w}"
            )));
        }
        check_window(window, d, h, w)?;
        let c = ts[1];
        let mut out = Tensor::zeros(&[c, d, h, w]);
        {
            let td = self.value(t).data();
            let od = out.data_mut();
            let sp = d * h * w;
            for_each_token(d, h, w, window, |row, pos| {
                for ci in 0..c {
                    od[ci * sp + pos] = td[row * c + ci];
                }
            });
        }
        Ok(self.push(
            out,
            vec![t],
            Box::new(TokensGrad {
                window,
                dims: (c, d, h, w),
                into_tokens: false,
            }),
        ))
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// qkv rows (N, 3C). Rows are attended in consecutive groups of
    /// `window_tokens`; heads split C into equal slices. Returns (N, C).
    pub fn attention_core(&mut self, qkv: Var, heads: usize, window_tokens: usize) -> Result<Var> {
        let qs = self.value(qkv).shape().to_vec();
        if qs.len() != 2 || qs[1] % 3 != 0 {
            return Err(CoreError::Shape(format!(
                "attention expects (N, 3C) qkv rows, got {qs:?}"
            )));
        }
        let (n, c) = (qs[0], qs[1] / 3);
        if window_tokens == 0 || n % window_tokens != 0 {
            return Err(CoreError::Shape(format!(
                "window of {window_tokens} tokens does not divide {n} rows"
            )));
        }
        if heads == 0 || c % heads != 0 {
            return Err(CoreError::Shape(format!(
                "feature dim {c} not divisible by {heads} heads"
            )));
        }
        let hd = c / heads;
        let wt = window_tokens;
        let nw = n / wt;
        let scale = fs::<T>(1.0 / (hd as f64).sqrt());
        let mut out = Tensor::zeros(&[n, c]);
        let mut probs = Tensor::zeros(&[nw, heads, wt, wt]);
        {
            let qd = self.value(qkv).data();
            let od = out.data_mut();
            let pd = probs.data_mut();
            let mut scores = vec![T::ZERO; wt];
            for wi in 0..nw {
                let r0 = wi * wt;
                for hh in 0..heads {
                    let (qo, ko, vo) = (hh * hd, c + hh * hd, 2 * c + hh * hd);
                    for i in 0..wt {
                        let qrow = (r0 + i) * 3 * c + qo;
                        for (j, s) in scores.iter_mut().enumerate() {
                            let krow = (r0 + j) * 3 * c + ko;
                            let mut acc = T::ZERO;
                            for t in 0..hd {
                                acc += qd[qrow + t] * qd[krow + t];
                            }
                            *s = acc * scale;
                        }
                        let prow = ((wi * heads + hh) * wt + i) * wt;
                        softmax_row(&scores, &mut pd[prow..prow + wt]);
                        let orow = (r0 + i) * c + hh * hd;
                        for t in 0..hd {
                            let mut acc = T::ZERO;
                            for j in 0..wt {
                                acc += pd[prow + j] * qd[(r0 + j) * 3 * c + vo + t];
                            }
                            od[orow + t] = acc;
                        }
                    }
                }
            }
        }
        Ok(self.push(out, vec![qkv], Box::new(AttnGrad { heads, wt, probs })))
    }

    /// Copies one octant out of a stacked sub-band tensor.
    pub fn extract_octant(&mut self, x: Var, band: usize) -> Result<Var> {
        let parent_shape = self.value(x).shape().to_vec();
        let out = wavelet::extract_octant(self.value(x), band)?;
        Ok(self.push(out, vec![x], Box::new(ExtractGrad { band, parent_shape })))
    }

    /// Packs eight equal-shape bands into the stacked octant layout.
    pub fn assemble_octants(&mut self, bands: &[Var; 8]) -> Result<Var> {
        let tensors: [Tensor<T>; 8] = std::array::from_fn(|i| self.value(bands[i]).clone());
        let out = wavelet::merge_octants(&tensors)?;
        Ok(self.push(out, bands.to_vec(), Box::new(AssembleGrad)))
    }

    /// Single-axis wavelet analysis with the filter's analysis pair.
    pub fn dwt_axis(
        &mut self,
        x: Var,
        axis: usize,
        filter: &wavelet::WaveletFilter,
    ) -> Result<Var> {
        let out = wavelet::dwt_axis(
            self.value(x),
            axis,
            &filter.analysis_lo,
            &filter.analysis_hi,
        )?;
        Ok(self.push(
            out,
            vec![x],
            Box::new(DwtAxisGrad {
                axis,
                lo: filter.analysis_lo.clone(),
                hi: filter.analysis_hi.clone(),
            }),
        ))
    }

    /// Single-axis wavelet synthesis with the filter's synthesis pair.
    pub fn idwt_axis(
        &mut self,
        x: Var,
        axis: usize,
        filter: &wavelet::WaveletFilter,
    ) -> Result<Var> {
        let out = wavelet::idwt_axis(
            self.value(x),
            axis,
            &filter.synthesis_lo,
            &filter.synthesis_hi,
        )?;
        Ok(self.push(
            out,
            vec![x],
            Box::new(IdwtAxisGrad {
                axis,
                lo: filter.synthesis_lo.clone(),
                hi: filter.synthesis_hi.clone(),
            }),
        ))
    }

    /// Average over the spatial axes of (C, D, H, W), giving (C,).
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (c, d, h, w) = self.value(x).dims4()?;
        let sp = d * h * w;
        let mut out = Tensor::zeros(&[c]);
        {
            let xd = self.value(x).data();
            let od = out.data_mut();
            let inv = fs::<T>(1.0 / sp as f64);
            for ci in 0..c {
                let mut acc = T::ZERO;
                for &v in &xd[ci * sp..(ci + 1) * sp] {
                    acc += v;
                }
                od[ci] = acc * inv;
            }
        }
        Ok(self.push(out, vec![x], Box::new(PoolGrad)))
    }

    /// Scales each channel of (C, D, H, W) by a per-channel gate vector.
    pub fn mul_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (c, d, h, w) = self.value(x).dims4()?;
        if self.value(gate).shape() != [c] {
            return Err(CoreError::Shape(format!(
                "gate shape {:?} does not match {c} channels",
                self.value(gate).shape()
            )));
        }
        let mut out = self.value(x).clone();
        {
            let gd = self.value(gate).data();
            let od = out.data_mut();
            let sp = d * h * w;
            for ci in 0..c {
                let gv = gd[ci];
                for v in &mut od[ci * sp..(ci + 1) * sp] {
                    *v *= gv;
                }
            }
        }
        Ok(self.push(out, vec![x, gate], Box::new(MulChannelsGrad)))
    }

    /// Concatenates (C_i, D, H, W) maps along the channel axis.
    pub fn concat_channels(&mut self, vs: &[Var]) -> Result<Var> {
        if vs.is_empty() {
            return Err(CoreError::Invalid("concat of zero tensors".into()));
        }
        let (_, d, h, w) = self.value(vs[0]).dims4()?;
        let mut total = 0usize;
        for &v in vs {
            let (c, dd, hh, ww) = self.value(v).dims4()?;
            if (dd, hh, ww) != (d, h, w) {
                return Err(CoreError::Shape(
                    "concat inputs disagree on spatial extents".into(),
                ));
            }
            total += c;
        }
        let mut out = Tensor::zeros(&[total, d, h, w]);
        {
            let od = out.data_mut();
            let mut off = 0usize;
            for &v in vs {
                let xd = self.value(v).data();
                od[off..off + xd.len()].copy_from_slice(xd);
                off += xd.len();
            }
        }
        Ok(self.push(out, vs.to_vec(), Box::new(ConcatGrad)))
    }

    /// Per-channel (depthwise) 3D convolution with stride 1 and zero
    /// padding; kernel is (C, k, k, k).
    pub fn depthwise_conv3d(&mut self, x: Var, w: Var, padding: usize) -> Result<Var> {
        let (c, d, h, wd) = self.value(x).dims4()?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[0] != c || ws[1] != ws[2] || ws[2] != ws[3] {
            return Err(CoreError::Shape(format!(
                "depthwise kernel must be (C,k,k,k) with C={c}, got {ws:?}"
            )));
        }
        let k = ws[1];
        if d + 2 * padding < k || h + 2 * padding < k || wd + 2 * padding < k {
            return Err(CoreError::Shape(format!(
                "kernel {k} larger than padded extents ({d},{h},{wd})+2*{padding}"
            )));
        }
        let (od, oh, ow) = (
            d + 2 * padding - k + 1,
            h + 2 * padding - k + 1,
            wd + 2 * padding - k + 1,
        );
        let mut out = Tensor::zeros(&[c, od, oh, ow]);
        depthwise_apply(
            self.value(x).data(),
            self.value(w).data(),
            out.data_mut(),
            (c, d, h, wd),
            (od, oh, ow),
            k,
            padding,
            DepthwiseMode::Forward,
        );
        Ok(self.push(out, vec![x, w], Box::new(DepthwiseGrad { padding, k })))
    }

    /// Nearest-neighbour upsampling by 2^m per spatial axis.
    pub fn nearest_up(&mut self, x: Var, m: usize) -> Result<Var> {
        let (c, d, h, w) = self.value(x).dims4()?;
        let f = 1usize << m;
        let mut out = Tensor::zeros(&[c, d * f, h * f, w * f]);
        {
            let xd = self.value(x).data();
            let od = out.data_mut();
            let (nd, nh, nw) = (d * f, h * f, w * f);
            for ci in 0..c {
                for zd in 0..nd {
                    for zh in 0..nh {
                        let src_row = ((ci * d + zd / f) * h + zh / f) * w;
                        let dst_row = ((ci * nd + zd) * nh + zh) * nw;
                        for zw in 0..nw {
                            od[dst_row + zw] = xd[src_row + zw / f];
                        }
                    }
                }
            }
        }
        Ok(self.push(out, vec![x], Box::new(NearestUpGrad { m })))
    }

    /// Combined soft-Dice + cross-entropy objective over (K, D, H, W)
    /// logits and row-major voxel labels. Returns the scalar loss node and
    /// the two components as plain numbers.
    pub fn dice_ce(&mut self, logits: Var, labels: &[u32], eps: f64) -> Result<(Var, DiceCeParts)> {
        let (k, d, h, w) = self.value(logits).dims4()?;
        let n = d * h * w;
        if labels.len() != n {
            return Err(CoreError::Shape(format!(
                "{} labels for {n} voxels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
            return Err(CoreError::Invalid(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        // probs held class-major: probs[c*n + v]
        let mut probs = Tensor::zeros(&[k, n]);
        let mut ce = 0.0f64;
        {
            let ld = self.value(logits).data();
            let pd = probs.data_mut();
            let mut col = vec![T::ZERO; k];
            let mut soft = vec![T::ZERO; k];
            for v in 0..n {
                for c in 0..k {
                    col[c] = ld[c * n + v];
                }
                softmax_row(&col, &mut soft);
                for c in 0..k {
                    pd[c * n + v] = soft[c];
                }
                ce -= soft[labels[v] as usize]
                    .to_f64()
                    .max(f64::MIN_POSITIVE)
                    .ln();
            }
            ce /= n as f64;
        }
        let mut dice = 0.0f64;
        let mut nums = vec![0.0f64; k];
        let mut dens = vec![0.0f64; k];
        {
            let pd = probs.data();
            for c in 0..k {
                let mut inter = 0.0f64;
                let mut psum = 0.0f64;
                let mut gsum = 0.0f64;
                for v in 0..n {
                    let p = pd[c * n + v].to_f64();
                    psum += p;
                    if labels[v] as usize == c {
                        inter += p;
                        gsum += 1.0;
                    }
                }
                nums[c] = 2.0 * inter + eps;
                dens[c] = psum + gsum + eps;
                dice += 1.0 - nums[c] / dens[c];
            }
            dice /= k as f64;
        }
        let total = dice + ce;
        let out = Tensor::scalar(fs::<T>(total));
        let var = self.push(
            out,
            vec![logits],
            Box::new(DiceCeGrad {
                probs,
                labels: labels.to_vec(),
                nums,
                dens,
                spatial: (d, h, w),
            }),
        );
        Ok((var, DiceCeParts { dice, ce }))
    }

    /// Reverse-mode sweep from a scalar loss. Returns gradients for every
    /// leaf the loss depends on; intermediate gradients are freed as soon as
    /// their node has been processed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss].value.numel() != 1 {
            return Err(CoreError::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        let mut pending: Vec<Option<Tensor<T>>> = Vec::new();
        pending.resize_with(loss + 1, || None);
        pending[loss] = Some(Tensor::full(self.nodes[loss].value.shape(), T::ONE));
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        for idx in (0..=loss).rev() {
            let Some(g) = pending[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                None => grads[idx] = Some(g),
                Some(op) => {
                    let parent_vals: Vec<&Tensor<T>> =
                        node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                    let pgrads = op.backward(&g, &parent_vals, &node.value)?;
                    debug_assert_eq!(pgrads.len(), node.parents.len());
                    for (&p, pg) in node.parents.iter().zip(pgrads) {
                        match &mut pending[p] {
                            Some(acc) => acc.accumulate(&pg)?,
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn check_window(window: usize, d: usize, h: usize, w: usize) -> Result<()> {
    if window == 0 || d % window != 0 || h % window != 0 || w % window != 0 {
        return Err(CoreError::Shape(format!(
            "window {window} does not divide grid {d}x{h}x{w}"
        )));
    }
    Ok(())
}

/// Visits every voxel of a (d, h, w) grid, passing its window-grouped token
/// row and its row-major offset.
fn for_each_token(d: usize, h: usize, w: usize, window: usize, mut f: impl FnMut(usize, usize)) {
    let (nh, nw) = (h / window, w / window);
    let wt = window * window * window;
    for zd in 0..d {
        for zh in 0..h {
            for zw in 0..w {
                let widx = ((zd / window) * nh + zh / window) * nw + zw / window;
                let inwin = ((zd % window) * window + zh % window) * window + zw % window;
                f(widx * wt + inwin, (zd * h + zh) * w + zw);
            }
        }
    }
}

fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let mut m = row[0];
    for &v in &row[1..] {
        m = m.max(v);
    }
    let mut z = T::ZERO;
    for (o, &v) in out.iter_mut().zip(row.iter()) {
        *o = (v - m).exp();
        z += *o;
    }
    let inv = T::ONE / z;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_val<T: Scalar>(x: T) -> T {
    let half = fs::<T>(0.5);
    let c = fs::<T>(GELU_C);
    let a = fs::<T>(GELU_A);
    let u = c * (x + a * x * x * x);
    half * x * (T::ONE + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = fs::<T>(0.5);
    let c = fs::<T>(GELU_C);
    let a = fs::<T>(GELU_A);
    let three = fs::<T>(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (T::ONE + t) + half * x * (T::ONE - t * t) * c * (T::ONE + three * a * x * x)
}

fn sigmoid_val<T: Scalar>(x: T) -> T {
    T::ONE / (T::ONE + (T::ZERO - x).exp())
}

struct AddGrad;

impl<T: Scalar> GradFn<T> for AddGrad {
    fn backward(&self, g: &Tensor<T>, _p: &[&Tensor<T>], _o: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Ok(vec![g.clone(), g.clone()])
    }
}

struct ScaleGrad {
    c: f64,
}

impl<T: Scalar> GradFn<T> for ScaleGrad {
    fn backward(&self, g: &Tensor<T>, _p: &[&Tensor<T>], _o: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Ok(vec![g.scale(fs::<T>(self.c))])
    }
}

struct MulGrad;

impl<T: Scalar> GradFn<T> for MulGrad {
    fn backward(&self, g: &Tensor<T>, p: &[&Tensor<T>], _o: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Ok(vec![g.mul_elem(p[1])?, g.mul_elem(p[0])?])
    }
}

struct SumGrad;

impl<T: Scalar> GradFn<T> for SumGrad {
    fn backward(&self, g: &Tensor<T>, p: &[&Tensor<T>], _o: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Ok(vec![Tensor::full(p[0].shape(), g.data()[0])])
    }
}

struct MeanManyGrad {
    k: usize,
}

impl<T: Scalar> GradFn<T> for MeanManyGrad {
    fn backward(&self, g: &Tensor<T>, _p: &[&Tensor<T>], _o: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let each = g.scale(fs::<T>(1.0 / self.k as f64));
        Ok(vec![each; self.k])
    }
}

struct ReshapeGrad {
    from: Vec<usize>,
}

impl<T: Scalar> GradFn<T> for ReshapeGrad {
    fn backward(&self, g: &Tensor<T>, _p: &[&Tensor<T>], _o: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Ok(vec![g.reshape(&self.from)?])
    }
}

struct LinearGrad;

impl<T: Scalar> GradFn<T> for LinearGrad {
    fn backward(&self, g: &Tensor<T>, p: &[&Tensor<T>], _o: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let (x, w) = (p[0], p[1]);
        let (n, din) = (x.shape()[0], x.shape()[1]);
        let dout = w.shape()[0];
        let gd = g.data();
        let xd = x.data();
        let wd = w.data();
        let mut dx = Tensor::zeros(&[n, din]);
        let mut dw = Tensor::zeros(&[dout, din]);
        let mut db = Tensor::zeros(&[dout]);
        {
            let dxd = dx.data_mut();
            let dwd = dw.data_mut();
            let dbd = db.data_mut();
            for r in 0..n {
                let grow = &gd[r * dout..(r + 1) * dout];
                let xrow = &xd[r * din..(r + 1) * din];
                for (o, &gv) in grow.iter().enumerate() {
                    if gv == T::ZERO {
                        continue;
                    }
                    let wrow = &wd[o * din..(o + 1) * din];
                    let dxrow = &mut dxd[r * din..(r + 1) * din];
                    for i in 0..din {
                        dxrow[i] += gv * wrow[i];
                    }
                    let dwrow = &mut dwd[o * din..(o + 1) * din];
                    for i in 0..din {
                        dwrow[i] += gv * xrow[i];
                    }
                    dbd[o] += gv;
                }
            }
        }
        Ok(vec![dx, dw, db])
    }
}

struct ConvGrad {
    stride: usize,
    padding: usize,
    transposed: bool,
    k: usize,
}

impl<T: Scalar> GradFn<T> for ConvGrad {
    fn backward(&self, g: &Tensor<T>, p: &[&Tensor<T>], _o: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let dx = conv3d_grad_input(
            g,
            p[1],
            self.stride,
            self.padding,
            self.transposed,
            p[0].shape(),
        )?;
        let dw = conv3d_grad_weight(g, p[0], self.stride, self.padding, self.transposed, self.k)?;
        Ok(vec![dx, dw])
    }
}

struct ChannelBiasGrad;

impl<T: Scalar> GradFn<T> for ChannelBiasGrad {
    fn backward(&self, g: &Tensor<T>, p: &[&Tensor<T>], _o: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let (c, d, h, w) = p[0].dims4()?;
        let sp = d * h * w;
        let mut db = Tensor::zeros(&[c]);
        {
            let gd = g.data();
            let dbd = db.data_mut();
            for ci in 0..c {
                let mut acc = T::ZERO;
                for &v in &gd[ci * sp..(ci + 1) * sp] {
                    acc += v;
                }
                dbd[ci] = acc;
            }
        }
        Ok(vec![g.clone(), db])
    }
}

struct LayerNormGrad<T: Scalar> {
    mean: Tensor<T>,
    inv_std: Tensor<T>,
}

impl<T: Scalar> GradFn<T> for LayerNormGrad<T> {
    fn backward(&self, g: &Tensor<T>, p: &[&Tensor<T>], _o: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let x = p[0];
        let gamma = p[1];
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let cf = fs::<T>(1.0 / c as f64);
        let mut dx = Tensor::zeros(&[n, c]);
        let mut dgamma = Tensor::zeros(&[c]);
        let mut dbeta = Tensor::zeros(&[c]);
        {
            let xd = x.data();
            let gd = g.data();
            let gam = gamma.data();
            let dxd = dx.data_mut();
            let dgd = dgamma.data_mut();
            let dbd = dbeta.data_mut();
            let mut xhat = vec![T::ZERO; c];
            let mut dxhat = vec![T::ZERO; c];
            for r in 0..n {
                let mu = self.mean.data()[r];
                let is = self.inv_std.data()[r];
                let xrow = &xd[r * c..(r + 1) * c];
                let grow = &gd[r * c..(r + 1) * c];
                let mut m1 = T::ZERO;
                let mut m2 = T::ZERO;
                for j in 0..c {
                    xhat[j] = (xrow[j] - mu) * is;
                    dxhat[j] = grow[j] * gam[j];
                    m1 += dxhat[j];
                    m2 += dxhat[j] * xhat[j];
                    dgd[j] += grow[j] * xhat[j];
                    dbd[j] += grow[j];
                }
                m1 *= cf;
                m2 *= cf;
                let dxrow = &mut dxd[r * c..(r + 1) * c];
                for j in 0..c {
                    dxrow[j] = is * (dxhat[j] - m1 - xhat[j] * m2);
                }
            }
        }
        Ok(vec![dx, dgamma, dbeta])
    }
}

struct SoftmaxGrad;

impl<T: Scalar> GradFn<T> for SoftmaxGrad {
    fn backward(&self, g: &Tensor<T>, _p: &[&Tensor<T>], o: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let (n, c) = (o.shape()[0], o.shape()[1]);
        let mut dx = Tensor::zeros(&[n, c]);
        {
            let od = o.data();
            let gd = g.data();
            let dxd = dx.data_mut();
            for r in 0..n {
                let prow = &od[r * c..(r + 1) * c];
                let grow = &gd[r * c..(r + 1) * c];
                let mut dot = T::ZERO;
                for j in 0..c {
                    dot += grow[j] * prow[j];
                }
                let dxrow = &mut dxd[r * c..(r + 1) * c];
                for j in 0..c {
                    dxrow[j] = prow[j] * (grow[j] - dot);
                }
            }
        }
        Ok(vec![dx])
    }
}

struct GeluGrad;

impl<T: Scalar> GradFn<T> for GeluGrad {
    fn backward(&self, g: &Tensor<T>, p: &[&Tensor<T>], _o: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Ok(vec![g.zip(p[0], |gv, xv| gv * gelu_grad(xv))?])
    }
}

struct SigmoidGrad;

impl<T: Scalar> GradFn<T> for SigmoidGrad {
    fn backward(&self, g: &Tensor<T>, _p: &[&Tensor<T>], o: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Ok(vec![g.zip(o, |gv, s| gv * s * (T::ONE - s))?])
    }
}

struct TokensGrad {
    window: usize,
    dims: (usize, usize, usize, usize),
    into_tokens: bool,
}

impl<T: Scalar> GradFn<T> for TokensGrad {
    fn backward(&self, g: &Tensor<T>, _p: &[&Tensor<T>], _o: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let (c, d, h, w) = self.dims;
        let sp = d * h * w;
        let gd = g.data();
        let mut dx = if self.into_tokens {
            Tensor::zeros(&[c, d, h, w])
        } else {
            Tensor::zeros(&[sp, c])
        };
        {
            let dxd = dx.data_mut();
            if self.into_tokens {
                for_each_token(d, h, w, self.window, |row, pos| {
                    for ci in 0..c {
                        dxd[ci * sp + pos] = gd[row * c + ci];
                    }
                });
            } else {
                for_each_token(d, h, w, self.window, |row, pos| {
                    for ci in 0..c {
                        dxd[row * c + ci] = gd[ci * sp + pos];
                    }
                });
            }
        }
        Ok(vec![dx])
    }
}

struct AttnGrad<T: Scalar> {
    heads: usize,
    wt: usize,
    probs: Tensor<T>,
}

impl<T: Scalar> GradFn<T> for AttnGrad<T> {
    fn backward(&self, g: &Tensor<T>, p: &[&Tensor<T>], _o: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let qkv = p[0];
        let n = qkv.shape()[0];
        let c = qkv.shape()[1] / 3;
        let hd = c / self.heads;
        let wt = self.wt;
        let nw = n / wt;
        let scale = fs::<T>(1.0 / (hd as f64).sqrt());
        let mut dqkv = Tensor::zeros(&[n, 3 * c]);
        {
            let qd = qkv.data();
            let gd = g.data();
            let pd = self.probs.data();
            let dq = dqkv.data_mut();
            let mut dp = vec![T::ZERO; wt];
            let mut ds = vec![T::ZERO; wt];
            for wi in 0..nw {
                let r0 = wi * wt;
                for hh in 0..self.heads {
                    let (qo, ko, vo) = (hh * hd, c + hh * hd, 2 * c + hh * hd);
                    for i in 0..wt {
                        let prow = ((wi * self.heads + hh) * wt + i) * wt;
                        let grow = (r0 + i) * c + hh * hd;
                        // dV += P^T dO, row j of V gets P[i][j] * dO[i]
                        for j in 0..wt {
                            let pij = pd[prow + j];
                            if pij == T::ZERO {
                                continue;
                            }
                            let vrow = (r0 + j) * 3 * c + vo;
                            for t in 0..hd {
                                dq[vrow + t] += pij * gd[grow + t];
                            }
                        }
                        // dP[i][j] = dO[i] . V[j], then softmax backward
                        let mut dot = T::ZERO;
                        for j in 0..wt {
                            let vrow = (r0 + j) * 3 * c + vo;
                            let mut acc = T::ZERO;
                            for t in 0..hd {
                                acc += gd[grow + t] * qd[vrow + t];
                            }
                            dp[j] = acc;
                            dot += acc * pd[prow + j];
                        }
                        for j in 0..wt {
                            ds[j] = pd[prow + j] * (dp[j] - dot) * scale;
                        }
                        // dQ[i] += dS[i][j] K[j]; dK[j] += dS[i][j] Q[i]
                        let qrow = (r0 + i) * 3 * c + qo;
                        for j in 0..wt {
                            let dsj = ds[j];
                            if dsj == T::ZERO {
                                continue;
                            }
                            let krow = (r0 + j) * 3 * c + ko;
                            for t in 0..hd {
                                dq[qrow + t] += dsj * qd[krow + t];
                                dq[krow + t] += dsj * qd[qrow + t];
                            }
                        }
                    }
                }
            }
        }
        Ok(vec![dqkv])
    }
}

struct ExtractGrad {
    band: usize,
    parent_shape: Vec<usize>,
}

impl<T: Scalar> GradFn<T> for ExtractGrad {
    fn backward(&self, g: &Tensor<T>, _p: &[&Tensor<T>], _o: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let (c, d, h, w) = (
            self.parent_shape[0],
            self.parent_shape[1],
            self.parent_shape[2],
            self.parent_shape[3],
        );
        let (hd, hh, hw) = (d / 2, h / 2, w / 2);
        let (od, oh, ow) = (
            if self.band & 4 != 0 { hd } else { 0 },
            if self.band & 2 != 0 { hh } else { 0 },
            if self.band & 1 != 0 { hw } else { 0 },
        );
        let mut dx = Tensor::zeros(&self.parent_shape);
        {
            let gd = g.data();
            let dxd = dx.data_mut();
            for ci in 0..c {
                for zd in 0..hd {
                    for zh in 0..hh {
                        let dst = ((ci * d + od + zd) * h + oh + zh) * w + ow;
                        let src = ((ci * hd + zd) * hh + zh) * hw;
                        dxd[dst..dst + hw].copy_from_slice(&gd[src..src + hw]);
                    }
                }
            }
        }
        Ok(vec![dx])
    }
}

struct AssembleGrad;

impl<T: Scalar> GradFn<T> for AssembleGrad {
    fn backward(&self, g: &Tensor<T>, _p: &[&Tensor<T>], _o: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        (0..8).map(|b| wavelet::extract_octant(g, b)).collect()
    }
}

struct DwtAxisGrad {
    axis: usize,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl<T: Scalar> GradFn<T> for DwtAxisGrad {
    fn backward(&self, g: &Tensor<T>, _p: &[&Tensor<T>], _o: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        // analysis is linear, so the gradient is its transpose: the
        // synthesis pattern with the same coefficients
        Ok(vec![wavelet::idwt_axis(g, self.axis, &self.lo, &self.hi)?])
    }
}

struct IdwtAxisGrad {
    axis: usize,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl<T: Scalar> GradFn<T> for IdwtAxisGrad {
    fn backward(&self, g: &Tensor<T>, _p: &[&Tensor<T>], _o: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Ok(vec![wavelet::dwt_axis(g, self.axis, &self.lo, &self.hi)?])
    }
}

struct PoolGrad;

impl<T: Scalar> GradFn<T> for PoolGrad {
    fn backward(&self, g: &Tensor<T>, p: &[&Tensor<T>], _o: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let (c, d, h, w) = p[0].dims4()?;
        let sp = d * h * w;
        let inv = fs::<T>(1.0 / sp as f64);
        let mut dx = Tensor::zeros(&[c, d, h, w]);
        {
            let gd = g.data();
            let dxd = dx.data_mut();
            for ci in 0..c {
                let gv = gd[ci] * inv;
                for v in &mut dxd[ci * sp..(ci + 1) * sp] {
                    *v = gv;
                }
            }
        }
        Ok(vec![dx])
    }
}

struct MulChannelsGrad;

impl<T: Scalar> GradFn<T> for MulChannelsGrad {
    fn backward(&self, g: &Tensor<T>, p: &[&Tensor<T>], _o: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let (c, d, h, w) = p[0].dims4()?;
        let sp = d * h * w;
        let mut dx = Tensor::zeros(&[c, d, h, w]);
        let mut dgate = Tensor::zeros(&[c]);
        {
            let gd = g.data();
            let xd = p[0].data();
            let gate = p[1].data();
            let dxd = dx.data_mut();
            let dgd = dgate.data_mut();
            for ci in 0..c {
                let gv = gate[ci];
                let mut acc = T::ZERO;
                for i in ci * sp..(ci + 1) * sp {
                    dxd[i] = gd[i] * gv;
                    acc += gd[i] * xd[i];
                }
                dgd[ci] = acc;
            }
        }
        Ok(vec![dx, dgate])
    }
}

struct ConcatGrad;

impl<T: Scalar> GradFn<T> for ConcatGrad {
    fn backward(&self, g: &Tensor<T>, p: &[&Tensor<T>], _o: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let gd = g.data();
        let mut out = Vec::with_capacity(p.len());
        let mut off = 0usize;
        for parent in p {
            let len = parent.numel();
            let mut dx = Tensor::zeros(parent.shape());
            dx.data_mut().copy_from_slice(&gd[off..off + len]);
            off += len;
            out.push(dx);
        }
        Ok(out)
    }
}

enum DepthwiseMode {
    Forward,
    GradInput,
    GradWeight,
}

/// Shared triple loop for the depthwise convolution and its two gradients.
/// `a` is the fine-grid tensor (input or its grad), `b` the kernel-side
/// buffer, `o` the output-grid buffer; which one is written depends on mode.
#[allow(clippy::too_many_arguments)]
fn depthwise_apply<T: Scalar>(
    x: &[T],
    w: &[T],
    out: &mut [T],
    in_dims: (usize, usize, usize, usize),
    out_sp: (usize, usize, usize),
    k: usize,
    padding: usize,
    mode: DepthwiseMode,
) {
    let (c, d, h, wd) = in_dims;
    let (od, oh, ow) = out_sp;
    let p = padding as i64;
    for ci in 0..c {
        let xb = ci * d * h * wd;
        let ob = ci * od * oh * ow;
        let wb = ci * k * k * k;
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let widx = wb + (kd * k + kh) * k + kw;
                    for zd in 0..od {
                        let id = zd as i64 + kd as i64 - p;
                        if id < 0 || id >= d as i64 {
                            continue;
                        }
                        for zh in 0..oh {
                            let ih = zh as i64 + kh as i64 - p;
                            if ih < 0 || ih >= h as i64 {
                                continue;
                            }
                            let orow = ob + (zd * oh + zh) * ow;
                            let xrow = xb + ((id as usize) * h + ih as usize) * wd;
                            for zw in 0..ow {
                                let iw = zw as i64 + kw as i64 - p;
                                if iw < 0 || iw >= wd as i64 {
                                    continue;
                                }
                                let xi = xrow + iw as usize;
                                let oi = orow + zw;
                                match mode {
                                    DepthwiseMode::Forward => out[oi] += w[widx] * x[xi],
                                    // here `x` holds the output gradient
                                    DepthwiseMode::GradInput => out[xi] += w[widx] * x[oi],
                                    DepthwiseMode::GradWeight => out[widx] += w[oi] * x[xi],
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

struct DepthwiseGrad {
    padding: usize,
    k: usize,
}

impl<T: Scalar> GradFn<T> for DepthwiseGrad {
    fn backward(&self, g: &Tensor<T>, p: &[&Tensor<T>], _o: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let x = p[0];
        let w = p[1];
        let (c, d, h, wd) = x.dims4()?;
        let (_, od, oh, ow) = g.dims4()?;
        let mut dx = Tensor::zeros(x.shape());
        depthwise_apply(
            g.data(),
            w.data(),
            dx.data_mut(),
            (c, d, h, wd),
            (od, oh, ow),
            self.k,
            self.padding,
            DepthwiseMode::GradInput,
        );
        let mut dw = Tensor::zeros(w.shape());
        depthwise_apply(
            x.data(),
            g.data(),
            dw.data_mut(),
            (c, d, h, wd),
            (od, oh, ow),
            self.k,
            self.padding,
            DepthwiseMode::GradWeight,
        );
        Ok(vec![dx, dw])
    }
}

struct NearestUpGrad {
    m: usize,
}

impl<T: Scalar> GradFn<T> for NearestUpGrad {
    fn backward(&self, g: &Tensor<T>, p: &[&Tensor<T>], _o: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let (c, d, h, w) = p[0].dims4()?;
        let f = 1usize << self.m;
        let (nd, nh, nw) = (d * f, h * f, w * f);
        let mut dx = Tensor::zeros(&[c, d, h, w]);
        {
            let gd = g.data();
            let dxd = dx.data_mut();
            for ci in 0..c {
                for zd in 0..nd {
                    for zh in 0..nh {
                        let src_row = ((ci * nd + zd) * nh + zh) * nw;
                        let dst_row = ((ci * d + zd / f) * h + zh / f) * w;
                        for zw in 0..nw {
                            dxd[dst_row + zw / f] += gd[src_row + zw];
                        }
                    }
                }
            }
        }
        Ok(vec![dx])
    }
}

struct DiceCeGrad<T: Scalar> {
    probs: Tensor<T>,
    labels: Vec<u32>,
    nums: Vec<f64>,
    dens: Vec<f64>,
    spatial: (usize, usize, usize),
}

impl<T: Scalar> GradFn<T> for DiceCeGrad<T> {
    fn backward(&self, g: &Tensor<T>, _p: &[&Tensor<T>], _o: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let gscale = g.data()[0];
        let k = self.nums.len();
        let (d, h, w) = self.spatial;
        let n = d * h * w;
        let pd = self.probs.data();
        // dL/dp for the dice term; the CE term is folded directly in
        // logit space as (p - onehot)/n
        let inv_n = 1.0 / n as f64;
        let inv_k = 1.0 / k as f64;
        let mut dlogits = Tensor::zeros(&[k, d, h, w]);
        {
            let out = dlogits.data_mut();
            let mut dp = vec![0.0f64; k];
            for v in 0..n {
                let gv = self.labels[v] as usize;
                let mut dot = 0.0f64;
                for c in 0..k {
                    let p = pd[c * n + v].to_f64();
                    let y = if c == gv { 1.0 } else { 0.0 };
                    // d(1 - num/den)/dp = -(2y*den - num)/den^2, averaged over classes
                    dp[c] = -inv_k * (2.0 * y * self.dens[c] - self.nums[c])
                        / (self.dens[c] * self.dens[c]);
                    dot += dp[c] * p;
                }
                for c in 0..k {
                    let p = pd[c * n + v].to_f64();
                    let y = if c == gv { 1.0 } else { 0.0 };
                    let dice_part = p * (dp[c] - dot);
                    let ce_part = (p - y) * inv_n;
                    out[c * n + v] = gscale * fs::<T>(dice_part + ce_part);
                }
            }
        }
        Ok(vec![dlogits])
    }
}

/// Central-difference gradient check: rebuilds the graph per probe via
/// `build` and compares analytic gradients of the scalar output against
/// (f(x+h) - f(x-h)) / 2h for every element of every input, failing when a
/// discrepancy exceeds `atol + rtol * scale`. Returns the worst fraction of
/// that allowance actually used, so a passing run reports a value below 1.
/// Inputs the graph ignores are expected to have zero gradient.
pub fn gradcheck<F>(build: F, inputs: &[Tensor<f64>], h: f64, rtol: f64, atol: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |mods: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = mods.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    if tape.value(loss).numel() != 1 {
        return Err(CoreError::Invalid("gradcheck needs a scalar output".into()));
    }
    let grads = tape.backward(loss)?;
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + h;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let an = grads.get(vars[i]).map_or(0.0, |t| t.data()[j]);
            let err = (fd - an).abs();
            let tol = atol + rtol * fd.abs().max(an.abs());
            if err > tol {
                return Err(CoreError::Invalid(format!(
                    "gradcheck failed at input {i} element {j}: finite-diff {fd:.6e} vs analytic {an:.6e}"
                )));
            }
            worst = worst.max(err / tol);
        }
    }
    Ok(worst)
}
