//! Differentiable CPU kernels the backbone needs beyond what candle ships.
//!
//! `conv2d` routes its input gradient through a forward convolution over a
//! zero-dilated gradient instead of `conv_transpose2d`, which is several times
//! slower on the CPU backend. `max_pool_3x3_s2` is the ResNet stem pooling
//! (kernel 3, stride 2, padding 1), for which candle has no backward.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Result, Shape, Storage, Tensor};

fn contiguous_f32<'a>(storage: &'a CpuStorage, layout: &Layout) -> Result<&'a [f32]> {
    let data = storage.as_slice::<f32>()?;
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("custom op expects a contiguous f32 input"),
    }
}

fn tensor_from(storage: &CpuStorage, layout: &Layout) -> Result<Tensor> {
    let data = contiguous_f32(storage, layout)?;
    Tensor::from_slice(data, layout.shape(), &candle_core::Device::Cpu)
}

fn into_cpu_storage(t: &Tensor) -> Result<(CpuStorage, Shape)> {
    let t = t.contiguous()?;
    let shape = t.shape().clone();
    let (storage, layout) = t.storage_and_layout();
    match &*storage {
        Storage::Cpu(cpu) => {
            let data = contiguous_f32(cpu, layout)?;
            Ok((CpuStorage::F32(data.to_vec()), shape))
        }
        _ => candle_core::bail!("custom op only runs on the cpu device"),
    }
}

struct Conv2d {
    padding: usize,
    stride: usize,
}

impl CustomOp2 for Conv2d {
    fn name(&self) -> &'static str {
        "mziris-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let x = tensor_from(s1, l1)?;
        let w = tensor_from(s2, l2)?;
        into_cpu_storage(&x.conv2d(&w, self.padding, self.stride, 1, 1)?)
    }

    fn bwd(
        &self,
        arg: &Tensor,
        kernel: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let (_, _, in_h, in_w) = arg.dims4()?;
        let (_, _, k_h, k_w) = kernel.dims4()?;
        let grad = grad.contiguous()?;

        // Kernel gradient: correlate the input with the output gradient.
        let grad_kernel = arg
            .transpose(0, 1)?
            .conv2d(&grad.transpose(0, 1)?, self.padding, 1, self.stride, 1)?
            .transpose(0, 1)?;
        let grad_kernel = grad_kernel.narrow(2, 0, k_h)?.narrow(3, 0, k_w)?;

        if !arg.track_op() {
            return Ok((None, Some(grad_kernel)));
        }

        // Input gradient: full correlation of the dilated gradient with the
        // flipped, channel-transposed kernel.
        let dilated = dilate(&grad, self.stride)?;
        let flipped = kernel.flip(&[2, 3])?.transpose(0, 1)?.contiguous()?;
        let (_, _, d_h, d_w) = dilated.dims4()?;
        let lead_h = k_h - 1 - self.padding;
        let lead_w = k_w - 1 - self.padding;
        let trail_h = in_h + k_h - 1 - d_h - lead_h;
        let trail_w = in_w + k_w - 1 - d_w - lead_w;
        let padded = pad2d(&dilated, lead_h, trail_h, lead_w, trail_w)?;
        let grad_arg = padded.conv2d(&flipped, 0, 1, 1, 1)?;
        Ok((Some(grad_arg), Some(grad_kernel)))
    }
}

fn pad2d(x: &Tensor, top: usize, bottom: usize, left: usize, right: usize) -> Result<Tensor> {
    x.pad_with_zeros(2, top, bottom)?
        .pad_with_zeros(3, left, right)
}

/// Inserts `stride - 1` zeros between neighbouring spatial elements.
fn dilate(x: &Tensor, stride: usize) -> Result<Tensor> {
    if stride == 1 {
        return Ok(x.clone());
    }
    let (n, c, h, w) = x.dims4()?;
    let zeros_w = Tensor::zeros((n, c, h, w, stride - 1), x.dtype(), x.device())?;
    let x = Tensor::cat(&[&x.unsqueeze(4)?, &zeros_w], 4)?
        .reshape((n, c, h, w * stride))?
        .narrow(3, 0, (w - 1) * stride + 1)?;
    let w2 = (w - 1) * stride + 1;
    let zeros_h = Tensor::zeros((n, c, h, stride - 1, w2), x.dtype(), x.device())?;
    Tensor::cat(&[&x.unsqueeze(3)?, &zeros_h], 3)?
        .reshape((n, c, h * stride, w2))?
        .narrow(2, 0, (h - 1) * stride + 1)
}

/// 2-D convolution (no bias, no dilation, one group) with a fast CPU backward.
pub fn conv2d(x: &Tensor, kernel: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    let x = x.contiguous()?;
    let kernel = kernel.contiguous()?;
    x.apply_op2(&kernel, Conv2d { padding, stride })
}

const POOL_K: usize = 3;
const POOL_S: usize = 2;
const POOL_P: usize = 1;

fn pool_dim(n: usize) -> usize {
    (n + 2 * POOL_P - POOL_K) / POOL_S + 1
}

/// Index of the maximum within each pooling window, in input coordinates.
fn pool_argmax(data: &[f32], n: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    let (oh, ow) = (pool_dim(h), pool_dim(w));
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = usize::MAX;
                let mut best_v = f32::NEG_INFINITY;
                for ky in 0..POOL_K {
                    let y = (oy * POOL_S + ky) as isize - POOL_P as isize;
                    if y < 0 || y as usize >= h {
                        continue;
                    }
                    for kx in 0..POOL_K {
                        let x = (ox * POOL_S + kx) as isize - POOL_P as isize;
                        if x < 0 || x as usize >= w {
                            continue;
                        }
                        let i = base + y as usize * w + x as usize;
                        if data[i] > best_v || best == usize::MAX {
                            best_v = data[i];
                            best = i;
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    idx
}

struct MaxPool;

impl CustomOp1 for MaxPool {
    fn name(&self) -> &'static str {
        "mziris-maxpool-3x3-s2"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = layout.shape().dims4()?;
        let data = contiguous_f32(storage, layout)?;
        let out: Vec<f32> = pool_argmax(data, n, c, h, w)
            .into_iter()
            .map(|i| data[i])
            .collect();
        Ok((
            CpuStorage::F32(out),
            Shape::from((n, c, pool_dim(h), pool_dim(w))),
        ))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        let grad = grad.contiguous()?;
        Ok(Some(arg.apply_op2_no_bwd(&grad, &MaxPoolGrad)?))
    }
}

struct MaxPoolGrad;

impl CustomOp2 for MaxPoolGrad {
    fn name(&self) -> &'static str {
        "mziris-maxpool-3x3-s2-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = l1.shape().dims4()?;
        let data = contiguous_f32(s1, l1)?;
        let grad = contiguous_f32(s2, l2)?;
        let mut out = vec![0f32; n * c * h * w];
        for (g, i) in grad.iter().zip(pool_argmax(data, n, c, h, w)) {
            out[i] += g;
        }
        Ok((CpuStorage::F32(out), l1.shape().clone()))
    }
}

/// Max-pooling with kernel 3, stride 2 and implicit padding 1.
pub fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(MaxPool)
}
