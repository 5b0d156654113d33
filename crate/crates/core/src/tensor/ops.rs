//! Differentiable tensor operations.
//!
//! Each op validates shapes, computes the forward value, and records a
//! graph node when any input is tracked. Gradient rules live in
//! [`super::graph`].

use std::sync::Arc;

use crate::error::{Error, Result};

use super::graph::Rule;
use super::kernels::{self, BatchNormState, BnEvalSaved, BnMode, ConvDims, PoolDims};
use super::{Element, Tensor};

fn shape4<E: Element>(t: &Tensor<E>, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::dim(op, format!("expected rank-4 NCHW tensor, got {:?}", t.shape()))),
    }
}

fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if k == 0 || k > padded || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Output spatial size of a stride-`s` convolution; `None` when the kernel
/// does not fit the padded input.
pub fn conv2d_output_dim(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    conv_out_dim(input, k, stride, pad)
}

/// Output spatial size of a transposed convolution:
/// `(input-1)*stride - 2*pad + k`, `None` when non-positive.
pub fn conv_transpose2d_output_dim(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if input == 0 || stride == 0 {
        return None;
    }
    let grown = (input - 1) * stride + k;
    if grown <= 2 * pad {
        return None;
    }
    Some(grown - 2 * pad)
}

impl<E: Element> Tensor<E> {
    /// 2-D convolution with zero padding.
    ///
    /// `self`: `[N, Cin, H, W]`, `weight`: `[Cout, Cin, kh, kw]`,
    /// `bias`: `[Cout]`. Output `[N, Cout, H', W']` with
    /// `H' = (H + 2*pad - kh)/stride + 1` (floor).
    pub fn conv2d(
        &self,
        weight: &Tensor<E>,
        bias: &Tensor<E>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<E>> {
        let (n, cin, h, w) = shape4(self, "conv2d")?;
        let (cout, wcin, kh, kw) = shape4(weight, "conv2d")?;
        if wcin != cin {
            return Err(Error::dim(
                "conv2d",
                format!("input has {} channels but kernel expects {}", cin, wcin),
            ));
        }
        if bias.shape() != [cout] {
            return Err(Error::dim(
                "conv2d",
                format!("bias shape {:?} does not match {} output channels", bias.shape(), cout),
            ));
        }
        let oh = conv_out_dim(h, kh, stride, pad)
            .ok_or_else(|| Error::dim("conv2d", format!("kernel {}x{} does not fit input {}x{} with pad {}", kh, kw, h, w, pad)))?;
        let ow = conv_out_dim(w, kw, stride, pad)
            .ok_or_else(|| Error::dim("conv2d", format!("kernel {}x{} does not fit input {}x{} with pad {}", kh, kw, h, w, pad)))?;
        let dims = ConvDims { n, cin, h, w, cout, kh, kw, stride, pad, oh, ow };
        let out = kernels::conv2d_forward(self.data(), weight.data(), bias.data(), &dims);
        Ok(Tensor::with_node(
            out,
            vec![n, cout, oh, ow],
            vec![self.node().cloned(), weight.node().cloned(), bias.node().cloned()],
            Rule::Conv2d { x: self.data_arc(), w: weight.data_arc(), dims },
        ))
    }

    /// Transposed 2-D convolution (the gradient map of `conv2d` used as a
    /// forward op). `weight`: `[Cin, Cout, kh, kw]`. Output spatial size
    /// `(H-1)*stride - 2*pad + kh`.
    pub fn conv_transpose2d(
        &self,
        weight: &Tensor<E>,
        bias: &Tensor<E>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<E>> {
        let (n, cin, h, w) = shape4(self, "conv_transpose2d")?;
        let (wcin, cout, kh, kw) = shape4(weight, "conv_transpose2d")?;
        if wcin != cin {
            return Err(Error::dim(
                "conv_transpose2d",
                format!("input has {} channels but kernel expects {}", cin, wcin),
            ));
        }
        if bias.shape() != [cout] {
            return Err(Error::dim(
                "conv_transpose2d",
                format!("bias shape {:?} does not match {} output channels", bias.shape(), cout),
            ));
        }
        let oh = conv_transpose2d_output_dim(h, kh, stride, pad)
            .ok_or_else(|| Error::dim("conv_transpose2d", format!("non-positive output for input {}x{}, kernel {}, stride {}, pad {}", h, w, kh, stride, pad)))?;
        let ow = conv_transpose2d_output_dim(w, kw, stride, pad)
            .ok_or_else(|| Error::dim("conv_transpose2d", format!("non-positive output for input {}x{}, kernel {}, stride {}, pad {}", h, w, kw, stride, pad)))?;
        let dims = ConvDims { n, cin, h, w, cout, kh, kw, stride, pad, oh, ow };
        let out = kernels::conv_transpose2d_forward(self.data(), weight.data(), bias.data(), &dims);
        Ok(Tensor::with_node(
            out,
            vec![n, cout, oh, ow],
            vec![self.node().cloned(), weight.node().cloned(), bias.node().cloned()],
            Rule::ConvTranspose2d { x: self.data_arc(), w: weight.data_arc(), dims },
        ))
    }

    /// Max pooling over `size`x`size` windows. Padding is implicit negative
    /// infinity; gradient flows to the argmax (first occurrence on ties).
    pub fn max_pool2d(&self, size: usize, stride: usize, pad: usize) -> Result<Tensor<E>> {
        let (n, c, h, w) = shape4(self, "max_pool2d")?;
        if size == 0 || size > h + 2 * pad || size > w + 2 * pad {
            return Err(Error::dim(
                "max_pool2d",
                format!("window {} does not fit input {}x{} with pad {}", size, h, w, pad),
            ));
        }
        if pad >= size {
            // A fully out-of-bounds window would have no argmax.
            return Err(Error::dim("max_pool2d", format!("pad {} must be < window {}", pad, size)));
        }
        let oh = conv_out_dim(h, size, stride, pad)
            .ok_or_else(|| Error::dim("max_pool2d", "window does not fit".to_string()))?;
        let ow = conv_out_dim(w, size, stride, pad)
            .ok_or_else(|| Error::dim("max_pool2d", "window does not fit".to_string()))?;
        let dims = PoolDims { n, c, h, w };
        let (out, argmax) = kernels::max_pool2d_forward(self.data(), &dims, size, stride, pad, oh, ow);
        Ok(Tensor::with_node(
            out,
            vec![n, c, oh, ow],
            vec![self.node().cloned()],
            Rule::MaxPool2d { argmax, x_numel: self.numel() },
        ))
    }

    /// Batch normalization over `[N, C, H, W]` with per-channel affine
    /// parameters. Train mode normalizes by batch statistics (epsilon 1e-5)
    /// and updates `state` with momentum 0.1; eval mode uses `state`.
    pub fn batch_norm2d(
        &self,
        gamma: &Tensor<E>,
        beta: &Tensor<E>,
        state: &mut BatchNormState<E>,
        mode: BnMode,
    ) -> Result<Tensor<E>> {
        let (n, c, h, w) = shape4(self, "batch_norm2d")?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::dim(
                "batch_norm2d",
                format!("gamma/beta shapes {:?}/{:?} do not match {} channels", gamma.shape(), beta.shape(), c),
            ));
        }
        if state.running_mean.len() != c || state.running_var.len() != c {
            return Err(Error::dim(
                "batch_norm2d",
                format!("running stats sized {} do not match {} channels", state.running_mean.len(), c),
            ));
        }
        let plane = h * w;
        if n * plane == 0 {
            return Err(Error::dim("batch_norm2d", "empty batch".to_string()));
        }
        let parents = vec![self.node().cloned(), gamma.node().cloned(), beta.node().cloned()];
        match mode {
            BnMode::Train => {
                let (y, saved) = kernels::batch_norm_forward_train(
                    self.data(),
                    gamma.data(),
                    beta.data(),
                    state,
                    n,
                    c,
                    plane,
                );
                Ok(Tensor::with_node(y, vec![n, c, h, w], parents, Rule::BatchNormTrain { saved }))
            }
            BnMode::Eval => {
                let (y, inv_std) = kernels::batch_norm_forward_eval(
                    self.data(),
                    gamma.data(),
                    beta.data(),
                    state,
                    n,
                    c,
                    plane,
                );
                let saved = BnEvalSaved {
                    x: self.data_arc(),
                    inv_std,
                    mean: state.running_mean.clone(),
                    gamma: gamma.data().to_vec(),
                    n,
                    c,
                    plane,
                };
                Ok(Tensor::with_node(y, vec![n, c, h, w], parents, Rule::BatchNormEval { saved }))
            }
        }
    }

    /// Rectified linear unit. Gradient passes where the input is strictly
    /// positive.
    pub fn relu(&self) -> Result<Tensor<E>> {
        let positive: Vec<bool> = self.data().iter().map(|&v| v > E::zero()).collect();
        let out: Vec<E> = self
            .data()
            .iter()
            .map(|&v| if v > E::zero() { v } else { E::zero() })
            .collect();
        Ok(Tensor::with_node(
            out,
            self.shape().to_vec(),
            vec![self.node().cloned()],
            Rule::Relu { positive },
        ))
    }

    /// Logistic sigmoid, `sigmoid(0) = 0.5`.
    pub fn sigmoid(&self) -> Result<Tensor<E>> {
        let out: Vec<E> = self
            .data()
            .iter()
            .map(|&v| E::one() / (E::one() + (-v).exp()))
            .collect();
        let y = Arc::new(out);
        Ok(Tensor::with_node(
            y.as_ref().clone(),
            self.shape().to_vec(),
            vec![self.node().cloned()],
            Rule::Sigmoid { y },
        ))
    }

    /// Elementwise sum; shapes must match exactly (no broadcasting).
    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                "add",
                format!("shape {:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let out: Vec<E> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor::with_node(
            out,
            self.shape().to_vec(),
            vec![self.node().cloned(), other.node().cloned()],
            Rule::Add,
        ))
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                "mul",
                format!("shape {:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let out: Vec<E> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a * b)
            .collect();
        Ok(Tensor::with_node(
            out,
            self.shape().to_vec(),
            vec![self.node().cloned(), other.node().cloned()],
            Rule::Mul { a: self.data_arc(), b: other.data_arc() },
        ))
    }

    /// Multiplies each channel of `self` (`[N, C, H, W]`) by the matching
    /// scalar in `scale` (`[N, C, 1, 1]`), broadcasting over H and W only.
    pub fn scale_channels(&self, scale: &Tensor<E>) -> Result<Tensor<E>> {
        let (n, c, h, w) = shape4(self, "scale_channels")?;
        if scale.shape() != [n, c, 1, 1] {
            return Err(Error::dim(
                "scale_channels",
                format!("scale shape {:?}, expected [{}, {}, 1, 1]", scale.shape(), n, c),
            ));
        }
        let plane = h * w;
        let mut out = vec![E::zero(); self.numel()];
        for i in 0..n * c {
            let sv = scale.data()[i];
            let base = i * plane;
            for p in 0..plane {
                out[base + p] = self.data()[base + p] * sv;
            }
        }
        Ok(Tensor::with_node(
            out,
            vec![n, c, h, w],
            vec![self.node().cloned(), scale.node().cloned()],
            Rule::ScaleChannels { x: self.data_arc(), s: scale.data_arc(), n, c, plane },
        ))
    }

    /// Spatial mean per channel: `[N, C, H, W] -> [N, C, 1, 1]`.
    pub fn global_avg_pool(&self) -> Result<Tensor<E>> {
        let (n, c, h, w) = shape4(self, "global_avg_pool")?;
        let plane = h * w;
        if plane == 0 {
            return Err(Error::dim("global_avg_pool", "empty spatial dims".to_string()));
        }
        let scale = E::one() / E::from_f64(plane as f64);
        let mut out = vec![E::zero(); n * c];
        for i in 0..n * c {
            let mut acc = E::zero();
            for p in 0..plane {
                acc += self.data()[i * plane + p];
            }
            out[i] = acc * scale;
        }
        Ok(Tensor::with_node(
            out,
            vec![n, c, 1, 1],
            vec![self.node().cloned()],
            Rule::GlobalAvgPool { n, c, plane },
        ))
    }

    /// Channel-axis concatenation of two NCHW tensors with equal batch and
    /// spatial dims.
    pub fn concat_channels(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        let (na, ca, ha, wa) = shape4(a, "concat_channels")?;
        let (nb, cb, hb, wb) = shape4(b, "concat_channels")?;
        if na != nb || ha != hb || wa != wb {
            return Err(Error::dim(
                "concat_channels",
                format!("shape {:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let plane = ha * wa;
        let mut out = vec![E::zero(); na * (ca + cb) * plane];
        for ni in 0..na {
            let dst = ni * (ca + cb) * plane;
            let src_a = ni * ca * plane;
            let src_b = ni * cb * plane;
            out[dst..dst + ca * plane].copy_from_slice(&a.data()[src_a..src_a + ca * plane]);
            out[dst + ca * plane..dst + (ca + cb) * plane]
                .copy_from_slice(&b.data()[src_b..src_b + cb * plane]);
        }
        Ok(Tensor::with_node(
            out,
            vec![na, ca + cb, ha, wa],
            vec![a.node().cloned(), b.node().cloned()],
            Rule::ConcatChannels { n: na, ca, cb, plane },
        ))
    }

    /// Non-differentiable channel slice `[start, start+len)` of an NCHW
    /// tensor (used for inspecting concatenated outputs).
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor<E>> {
        let (n, c, h, w) = shape4(self, "slice_channels")?;
        if start + len > c {
            return Err(Error::dim(
                "slice_channels",
                format!("slice {}..{} out of {} channels", start, start + len, c),
            ));
        }
        let plane = h * w;
        let mut out = vec![E::zero(); n * len * plane];
        for ni in 0..n {
            let src = (ni * c + start) * plane;
            let dst = ni * len * plane;
            out[dst..dst + len * plane].copy_from_slice(&self.data()[src..src + len * plane]);
        }
        Tensor::from_vec(vec![n, len, h, w], out)
    }

    /// Smooth-L1 penalty, mean-reduced over all elements:
    /// `0.5*d^2` where `|d| < 1`, `|d| - 0.5` otherwise, with
    /// `d = self - target`. Differentiable w.r.t. `self` only.
    pub fn smooth_l1(&self, target: &Tensor<E>) -> Result<Tensor<E>> {
        if self.shape() != target.shape() {
            return Err(Error::dim(
                "smooth_l1",
                format!("shape {:?} vs {:?}", self.shape(), target.shape()),
            ));
        }
        if self.numel() == 0 {
            return Err(Error::dim("smooth_l1", "empty tensors".to_string()));
        }
        let half = E::from_f64(0.5);
        let diff: Vec<E> = self
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| p - t)
            .collect();
        let mut acc = E::zero();
        for &d in &diff {
            let a = d.abs();
            acc += if a < E::one() { half * d * d } else { a - half };
        }
        let mean = acc / E::from_f64(diff.len() as f64);
        Ok(Tensor::with_node(
            vec![mean],
            vec![],
            vec![self.node().cloned()],
            Rule::SmoothL1 { diff },
        ))
    }

    /// Sum of all elements as a rank-0 scalar.
    pub fn sum_all(&self) -> Result<Tensor<E>> {
        let mut acc = E::zero();
        for &v in self.data() {
            acc += v;
        }
        Ok(Tensor::with_node(
            vec![acc],
            vec![],
            vec![self.node().cloned()],
            Rule::SumAll { numel: self.numel() },
        ))
    }

    /// Depth-to-space rearrangement `[N, C*r^2, H, W] -> [N, C, H*r, W*r]`.
    pub fn pixel_shuffle(&self, factor: usize) -> Result<Tensor<E>> {
        let (n, c, h, w) = shape4(self, "pixel_shuffle")?;
        if factor == 0 || c % (factor * factor) != 0 {
            return Err(Error::dim(
                "pixel_shuffle",
                format!("{} channels not divisible by {}^2", c, factor),
            ));
        }
        let dims = PoolDims { n, c, h, w };
        let out = kernels::pixel_shuffle_forward(self.data(), &dims, factor);
        Ok(Tensor::with_node(
            out,
            vec![n, c / (factor * factor), h * factor, w * factor],
            vec![self.node().cloned()],
            Rule::PixelShuffle { dims, factor },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tensor;
    use super::*;

    fn t4(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Tensor<f32> {
        Tensor::from_vec(vec![n, c, h, w], data).unwrap()
    }

    #[test]
    fn conv2d_all_ones_sums_window() {
        // 1x1x3x3 ones * 3x3 ones kernel, no padding -> scalar 9
        let x = t4(1, 1, 3, 3, vec![1.0; 9]);
        let w = t4(1, 1, 3, 3, vec![1.0; 9]);
        let b = Tensor::from_vec(vec![1], vec![0.0]).unwrap();
        let y = x.conv2d(&w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), [1, 1, 1, 1]);
        assert_eq!(y.data(), [9.0]);
    }

    #[test]
    fn conv2d_identity_kernel_is_identity() {
        let x = t4(1, 1, 4, 5, (0..20).map(|v| v as f32 * 0.37 - 2.0).collect());
        let mut k = vec![0.0f32; 9];
        k[4] = 1.0; // center tap
        let w = t4(1, 1, 3, 3, k);
        let b = Tensor::from_vec(vec![1], vec![0.0]).unwrap();
        let y = x.conv2d(&w, &b, 1, 1).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let x = t4(1, 2, 3, 3, vec![0.0; 18]);
        let w = t4(1, 3, 3, 3, vec![0.0; 27]);
        let b = Tensor::from_vec(vec![1], vec![0.0]).unwrap();
        assert!(x.conv2d(&w, &b, 1, 0).is_err());
    }

    #[test]
    fn conv_transpose_scatters_with_stride() {
        // 1x1 kernel of value 1, stride 2: values land at even positions
        let x = t4(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let w = t4(1, 1, 1, 1, vec![1.0]);
        let b = Tensor::from_vec(vec![1], vec![0.0]).unwrap();
        let y = x.conv_transpose2d(&w, &b, 2, 0).unwrap();
        assert_eq!(y.shape(), [1, 1, 3, 3]);
        assert_eq!(
            y.data(),
            [1.0, 0.0, 2.0, 0.0, 0.0, 0.0, 3.0, 0.0, 4.0]
        );
    }

    #[test]
    fn conv_transpose_one_by_one_scales() {
        let x = t4(1, 1, 2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]);
        let w = t4(1, 1, 1, 1, vec![2.5]);
        let b = Tensor::from_vec(vec![1], vec![0.0]).unwrap();
        let y = x.conv_transpose2d(&w, &b, 1, 0).unwrap();
        let expected: Vec<f32> = x.data().iter().map(|v| v * 2.5).collect();
        assert_eq!(y.data(), expected.as_slice());
    }

    #[test]
    fn conv_transpose_rejects_degenerate_output() {
        let x = t4(1, 1, 1, 1, vec![1.0]);
        let w = t4(1, 1, 1, 1, vec![1.0]);
        let b = Tensor::from_vec(vec![1], vec![0.0]).unwrap();
        assert!(x.conv_transpose2d(&w, &b, 1, 1).is_err());
    }

    #[test]
    fn max_pool_picks_window_max() {
        let x = t4(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let y = x.max_pool2d(2, 2, 0).unwrap();
        assert_eq!(y.data(), [4.0]);
    }

    #[test]
    fn max_pool_tie_routes_gradient_to_first() {
        let x = Tensor::<f32>::param(vec![1, 1, 2, 2], vec![5.0; 4]).unwrap();
        let y = x.max_pool2d(2, 2, 0).unwrap();
        assert_eq!(y.data(), [5.0]);
        y.sum_all().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let x = Tensor::<f32>::scalar(0.0).reshape(vec![1, 1, 1, 1]).unwrap();
        let y = x.sigmoid().unwrap();
        assert_eq!(y.data(), [0.5]);
    }

    #[test]
    fn scale_channels_identity_with_ones() {
        let x = t4(1, 2, 2, 2, (0..8).map(|v| v as f32).collect());
        let s = t4(1, 2, 1, 1, vec![1.0, 1.0]);
        let y = x.scale_channels(&s).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn global_avg_pool_means() {
        let x = t4(1, 1, 2, 2, vec![1.0, 3.0, 5.0, 7.0]);
        let y = x.global_avg_pool().unwrap();
        assert_eq!(y.shape(), [1, 1, 1, 1]);
        assert_eq!(y.data(), [4.0]);
        let c = t4(2, 3, 4, 4, vec![0.25; 96]);
        assert!(c.global_avg_pool().unwrap().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn concat_then_slice_roundtrips_exactly() {
        let a = t4(2, 3, 2, 2, (0..24).map(|v| v as f32 * 0.5).collect());
        let b = t4(2, 2, 2, 2, (0..16).map(|v| -(v as f32)).collect());
        let y = Tensor::concat_channels(&a, &b).unwrap();
        assert_eq!(y.shape(), [2, 5, 2, 2]);
        assert_eq!(y.slice_channels(0, 3).unwrap().data(), a.data());
        assert_eq!(y.slice_channels(3, 2).unwrap().data(), b.data());
    }

    #[test]
    fn concat_with_empty_is_identity() {
        let a = t4(1, 2, 2, 2, (0..8).map(|v| v as f32).collect());
        let empty = Tensor::<f32>::zeros(vec![1, 0, 2, 2]);
        let y = Tensor::concat_channels(&a, &empty).unwrap();
        assert_eq!(y.shape(), [1, 2, 2, 2]);
        assert_eq!(y.data(), a.data());
    }

    #[test]
    fn smooth_l1_branch_values() {
        let z = Tensor::from_vec(vec![1], vec![0.0f32]).unwrap();
        assert_eq!(z.smooth_l1(&z).unwrap().item().unwrap(), 0.0);

        let p = Tensor::from_vec(vec![1], vec![0.5f32]).unwrap();
        let t = Tensor::from_vec(vec![1], vec![0.0f32]).unwrap();
        assert!((p.smooth_l1(&t).unwrap().item().unwrap() - 0.125).abs() < 1e-7);

        let p = Tensor::from_vec(vec![1], vec![2.0f32]).unwrap();
        assert!((p.smooth_l1(&t).unwrap().item().unwrap() - 1.5).abs() < 1e-7);
    }

    #[test]
    fn smooth_l1_first_derivative_continuous_at_one() {
        // Loss values straddling |d| = 1 differ by < 1e-3 in slope terms.
        let t = Tensor::from_vec(vec![1], vec![0.0f64]).unwrap();
        let f = |d: f64| {
            let p = Tensor::from_vec(vec![1], vec![d]).unwrap();
            p.smooth_l1(&t).unwrap().item().unwrap()
        };
        let h = 1e-6;
        let slope_below = (f(1.0 - 1e-4 + h) - f(1.0 - 1e-4 - h)) / (2.0 * h);
        let slope_above = (f(1.0 + 1e-4 + h) - f(1.0 + 1e-4 - h)) / (2.0 * h);
        assert!((slope_below - slope_above).abs() < 1e-3);
        assert!((f(1.0 + 1e-4) - f(1.0 - 1e-4)).abs() < 1e-3);
    }

    #[test]
    fn backward_of_weighted_sum_recovers_weights() {
        // loss = sum(w * x) with constant x -> grad(w) = x
        let w = Tensor::<f32>::param(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let x = Tensor::from_vec(vec![3], vec![4.0, -1.0, 0.5]).unwrap();
        let loss = w.mul(&x).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![4.0, -1.0, 0.5]);
    }

    #[test]
    fn disconnected_parameter_keeps_zero_grad() {
        let used = Tensor::<f32>::param(vec![1], vec![2.0]).unwrap();
        let unused = Tensor::<f32>::param(vec![1], vec![7.0]).unwrap();
        used.sum_all().unwrap().backward().unwrap();
        assert_eq!(used.grad().unwrap(), vec![1.0]);
        assert!(unused.grad().is_none());
        assert_eq!(unused.grad_or_zeros(), vec![0.0]);
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let w = Tensor::<f32>::param(vec![1], vec![1.0]).unwrap();
        let run = || {
            let loss = w.sum_all().unwrap();
            loss.backward().unwrap();
        };
        run();
        run();
        assert_eq!(w.grad().unwrap(), vec![2.0]);
        w.zero_grad();
        run();
        assert_eq!(w.grad().unwrap(), vec![1.0]);
    }

    #[test]
    fn backward_deterministic_across_runs() {
        let w = Tensor::<f32>::param(vec![4], vec![0.3, -0.7, 1.1, 0.05]).unwrap();
        let x = Tensor::from_vec(vec![4], vec![0.9, 0.2, -0.4, 2.0]).unwrap();
        let grads: Vec<Vec<f32>> = (0..2)
            .map(|_| {
                w.zero_grad();
                let y = w.mul(&x).unwrap().relu().unwrap();
                let s = y.sigmoid().unwrap();
                s.sum_all().unwrap().backward().unwrap();
                w.grad().unwrap()
            })
            .collect();
        assert_eq!(grads[0], grads[1]);
    }

    #[test]
    fn backward_requires_scalar() {
        let w = Tensor::<f32>::param(vec![2], vec![1.0, 2.0]).unwrap();
        let y = w.relu().unwrap();
        assert!(y.backward().is_err());
    }

    #[test]
    fn batch_norm_zero_mean_unit_var_is_identityish() {
        // per-channel zero-mean unit-variance input, gamma=1, beta=0
        let vals = vec![-1.0f32, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0];
        let x = t4(1, 2, 2, 2, vals.clone());
        let gamma = Tensor::from_vec(vec![2], vec![1.0, 1.0]).unwrap();
        let beta = Tensor::from_vec(vec![2], vec![0.0, 0.0]).unwrap();
        let mut state = BatchNormState::new(2);
        let y = x.batch_norm2d(&gamma, &beta, &mut state, BnMode::Train).unwrap();
        for (a, b) in y.data().iter().zip(&vals) {
            assert!((a - b).abs() < 1e-4, "{} vs {}", a, b);
        }
    }

    #[test]
    fn batch_norm_zero_gamma_emits_beta() {
        let x = t4(2, 1, 2, 2, (0..8).map(|v| v as f32).collect());
        let gamma = Tensor::from_vec(vec![1], vec![0.0]).unwrap();
        let beta = Tensor::from_vec(vec![1], vec![0.75]).unwrap();
        let mut state = BatchNormState::new(1);
        let y = x.batch_norm2d(&gamma, &beta, &mut state, BnMode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn pixel_shuffle_shape_contract() {
        let x = t4(1, 8, 2, 3, (0..48).map(|v| v as f32).collect());
        let y = x.pixel_shuffle(2).unwrap();
        assert_eq!(y.shape(), [1, 2, 4, 6]);
    }
}
