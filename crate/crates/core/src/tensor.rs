//! Dense NCHW tensor and the deterministic kernels every other module builds on.
//!
//! All kernels are pure functions over immutable inputs. Convolution accumulates
//! in `f32` over a fixed (in-channel, ky, kx) order so results are bitwise
//! reproducible across runs and across any [`ExecContext::threads`] setting:
//! intra-op parallelism only partitions independent output planes, it never
//! changes the per-element accumulation order.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Dense rank-4 array in (batch, channels, height, width) order, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(batch: usize, channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if batch == 0 || channels == 0 || height == 0 || width == 0 {
            return Err(Error::Precondition(format!(
                "tensor dimensions must all be >= 1, got ({batch},{channels},{height},{width})"
            )));
        }
        let expected = batch * channels * height * width;
        if data.len() != expected {
            return Err(Error::shape(
                "Tensor::new",
                format!("{expected} elements"),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Tensor { batch, channels, height, width, data })
    }

    pub fn zeros(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Tensor {
            batch,
            channels,
            height,
            width,
            data: vec![0.0; batch * channels * height * width],
        }
    }

    pub fn full(batch: usize, channels: usize, height: usize, width: usize, value: f32) -> Self {
        Tensor {
            batch,
            channels,
            height,
            width,
            data: vec![value; batch * channels * height * width],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.batch, self.channels, self.height, self.width)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[((b * self.channels + c) * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: f32) {
        self.data[((b * self.channels + c) * self.height + y) * self.width + x] = v;
    }

    /// Contiguous (height * width) plane for one (batch, channel) pair.
    #[inline]
    pub fn plane(&self, b: usize, c: usize) -> &[f32] {
        let hw = self.height * self.width;
        let start = (b * self.channels + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Convolution kernel plus inference-mode batch-norm statistics.
///
/// The kernel is laid out as (out_ch, in_ch/groups, k, k) row-major. The
/// batch-norm vectors are per output channel.
#[derive(Debug, Clone)]
pub struct ConvWeights {
    pub out_ch: usize,
    pub in_per_group: usize,
    pub kernel_size: usize,
    pub kernel: Vec<f32>,
    pub bn_gamma: Vec<f32>,
    pub bn_beta: Vec<f32>,
    pub bn_mean: Vec<f32>,
    pub bn_var: Vec<f32>,
    pub bn_eps: f32,
}

pub const DEFAULT_BN_EPS: f32 = 1e-3;

impl ConvWeights {
    pub fn new(out_ch: usize, in_per_group: usize, kernel_size: usize, kernel: Vec<f32>) -> Result<Self> {
        let expected = out_ch * in_per_group * kernel_size * kernel_size;
        if kernel.len() != expected {
            return Err(Error::shape(
                "ConvWeights::new",
                format!("kernel of {expected} elements"),
                format!("{} elements", kernel.len()),
            ));
        }
        Ok(ConvWeights {
            out_ch,
            in_per_group,
            kernel_size,
            kernel,
            bn_gamma: vec![1.0; out_ch],
            bn_beta: vec![0.0; out_ch],
            bn_mean: vec![0.0; out_ch],
            bn_var: vec![1.0; out_ch],
            bn_eps: DEFAULT_BN_EPS,
        })
    }

    pub fn with_bn(mut self, gamma: Vec<f32>, beta: Vec<f32>, mean: Vec<f32>, var: Vec<f32>) -> Result<Self> {
        for (name, v) in [("gamma", &gamma), ("beta", &beta), ("mean", &mean), ("var", &var)] {
            if v.len() != self.out_ch {
                return Err(Error::shape(
                    "ConvWeights::with_bn",
                    format!("bn_{name} of {} elements", self.out_ch),
                    format!("{} elements", v.len()),
                ));
            }
        }
        if var.iter().any(|v| *v < 0.0) {
            return Err(Error::Precondition("bn_var must be non-negative".into()));
        }
        self.bn_gamma = gamma;
        self.bn_beta = beta;
        self.bn_mean = mean;
        self.bn_var = var;
        Ok(self)
    }

    #[cfg(test)]
    fn kernel_at(&self, oc: usize, icg: usize, ky: usize, kx: usize) -> f32 {
        let k = self.kernel_size;
        self.kernel[((oc * self.in_per_group + icg) * k + ky) * k + kx]
    }
}

/// Execution context: intra-op thread budget plus an execution-trace counter
/// of convolution kernel invocations.
#[derive(Debug)]
pub struct ExecContext {
    threads: usize,
    convs: AtomicU64,
}

impl ExecContext {
    pub fn new(threads: usize) -> Self {
        ExecContext {
            threads: threads.clamp(1, 256),
            convs: AtomicU64::new(0),
        }
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    /// Number of convolution kernel invocations since construction or reset.
    pub fn conv_count(&self) -> u64 {
        self.convs.load(Ordering::Relaxed)
    }

    pub fn reset_conv_count(&self) {
        self.convs.store(0, Ordering::Relaxed);
    }

    fn record_conv(&self) {
        self.convs.fetch_add(1, Ordering::Relaxed);
    }
}

impl Default for ExecContext {
    fn default() -> Self {
        ExecContext::new(1)
    }
}

/// 2-D convolution, NCHW. Covers standard (groups=1), depthwise
/// (groups=channels) and pointwise (k=1) cases.
///
/// Accumulation order per output element is fixed: in-channel within the
/// group, then kernel row, then kernel column.
pub fn conv2d(
    ctx: &ExecContext,
    x: &Tensor,
    w: &ConvWeights,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor> {
    conv2d_named(ctx, x, w, stride, padding, groups, "conv2d")
}

/// [`conv2d`] with a layer name used in error messages.
pub fn conv2d_named(
    ctx: &ExecContext,
    x: &Tensor,
    w: &ConvWeights,
    stride: usize,
    padding: usize,
    groups: usize,
    layer: &str,
) -> Result<Tensor> {
    if stride == 0 {
        return Err(Error::config(layer, "stride must be >= 1"));
    }
    if groups == 0 || x.channels() % groups != 0 || w.out_ch % groups != 0 {
        return Err(Error::config(
            layer,
            format!(
                "groups {groups} must divide in channels {} and out channels {}",
                x.channels(),
                w.out_ch
            ),
        ));
    }
    if x.channels() / groups != w.in_per_group {
        return Err(Error::shape(
            layer,
            format!("input with {} channels per group", w.in_per_group),
            format!("{} channels / {groups} groups", x.channels()),
        ));
    }
    let k = w.kernel_size;
    let (batch, _, h, wd) = x.shape();
    let h_out = (h + 2 * padding).checked_sub(k).map(|v| v / stride + 1);
    let w_out = (wd + 2 * padding).checked_sub(k).map(|v| v / stride + 1);
    let (h_out, w_out) = match (h_out, w_out) {
        (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
        _ => {
            return Err(Error::shape(
                layer,
                format!("spatial dims >= kernel {k} after padding {padding}"),
                format!("{h}x{wd}"),
            ))
        }
    };

    ctx.record_conv();

    let out_ch = w.out_ch;
    let oc_per_group = out_ch / groups;
    let plane = h_out * w_out;
    let mut out = vec![0.0f32; batch * out_ch * plane];

    // One output plane per (batch, out-channel) pair; planes are independent,
    // so they can be partitioned across threads without affecting results.
    // Out-of-bounds taps are skipped in both paths, so the per-element
    // accumulation order stays (in-channel, ky, kx) exactly.
    let compute_plane = |plane_idx: usize, dst: &mut [f32]| {
        let b = plane_idx / out_ch;
        let oc = plane_idx % out_ch;
        let g = oc / oc_per_group;
        let ic0 = g * w.in_per_group;

        if k == 1 && padding == 0 {
            // pointwise fast path: accumulate one input channel at a time
            // over the whole plane (per-element order is still ic ascending)
            for icg in 0..w.in_per_group {
                let src = x.plane(b, ic0 + icg);
                let kv = w.kernel[oc * w.in_per_group + icg];
                if stride == 1 {
                    if icg == 0 {
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = s * kv;
                        }
                    } else {
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s * kv;
                        }
                    }
                } else {
                    for oy in 0..h_out {
                        let row = &src[oy * stride * wd..];
                        for ox in 0..w_out {
                            let v = row[ox * stride] * kv;
                            if icg == 0 {
                                dst[oy * w_out + ox] = v;
                            } else {
                                dst[oy * w_out + ox] += v;
                            }
                        }
                    }
                }
            }
            return;
        }

        for oy in 0..h_out {
            let iy0 = (oy * stride) as isize - padding as isize;
            let ky_lo = if iy0 < 0 { (-iy0) as usize } else { 0 };
            let ky_hi = ((h as isize - iy0).clamp(0, k as isize)) as usize;
            for ox in 0..w_out {
                let ix0 = (ox * stride) as isize - padding as isize;
                let kx_lo = if ix0 < 0 { (-ix0) as usize } else { 0 };
                let kx_hi = ((wd as isize - ix0).clamp(0, k as isize)) as usize;
                let mut acc = 0.0f32;
                for icg in 0..w.in_per_group {
                    let src = x.plane(b, ic0 + icg);
                    let kbase = (oc * w.in_per_group + icg) * k * k;
                    for ky in ky_lo..ky_hi {
                        let iy = (iy0 + ky as isize) as usize;
                        let x0 = (iy * wd) as isize + ix0;
                        let xrow = &src[(x0 + kx_lo as isize) as usize..(x0 + kx_hi as isize) as usize];
                        let krow = &w.kernel[kbase + ky * k + kx_lo..kbase + ky * k + kx_hi];
                        for (xv, kv) in xrow.iter().zip(krow) {
                            acc += xv * kv;
                        }
                    }
                }
                dst[oy * w_out + ox] = acc;
            }
        }
    };

    let n_planes = batch * out_ch;
    let threads = ctx.threads().min(n_planes);
    if threads <= 1 {
        for (idx, dst) in out.chunks_mut(plane).enumerate() {
            compute_plane(idx, dst);
        }
    } else {
        let per = n_planes.div_ceil(threads);
        std::thread::scope(|scope| {
            for (chunk_idx, chunk) in out.chunks_mut(per * plane).enumerate() {
                let compute = &compute_plane;
                scope.spawn(move || {
                    for (i, dst) in chunk.chunks_mut(plane).enumerate() {
                        compute(chunk_idx * per + i, dst);
                    }
                });
            }
        });
    }

    Tensor::new(batch, out_ch, h_out, w_out, out)
}

/// Elementwise SiLU activation: y = x * sigmoid(x).
pub fn silu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v *= 1.0 / (1.0 + (-*v).exp());
    }
    out
}

/// Inference-mode batch normalization using the statistics in `w`:
/// y_c = gamma_c * (x_c - mean_c) / sqrt(var_c + eps) + beta_c.
pub fn batchnorm_infer(x: &Tensor, w: &ConvWeights) -> Result<Tensor> {
    if x.channels() != w.out_ch {
        return Err(Error::shape(
            "batchnorm_infer",
            format!("{} channels", w.out_ch),
            format!("{} channels", x.channels()),
        ));
    }
    let mut out = x.clone();
    let (batch, channels, h, wd) = x.shape();
    let hw = h * wd;
    for c in 0..channels {
        let scale = w.bn_gamma[c] / (w.bn_var[c] + w.bn_eps).sqrt();
        let shift = w.bn_beta[c] - w.bn_mean[c] * scale;
        for b in 0..batch {
            let start = (b * channels + c) * hw;
            for v in &mut out.data_mut()[start..start + hw] {
                *v = *v * scale + shift;
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbour 2x upsampling: each pixel becomes a 2x2 block.
pub fn upsample_nearest2x(x: &Tensor) -> Tensor {
    let (batch, channels, h, w) = x.shape();
    let mut out = Tensor::zeros(batch, channels, 2 * h, 2 * w);
    for b in 0..batch {
        for c in 0..channels {
            for y in 0..h {
                for xx in 0..w {
                    let v = x.at(b, c, y, xx);
                    out.set(b, c, 2 * y, 2 * xx, v);
                    out.set(b, c, 2 * y, 2 * xx + 1, v);
                    out.set(b, c, 2 * y + 1, 2 * xx, v);
                    out.set(b, c, 2 * y + 1, 2 * xx + 1, v);
                }
            }
        }
    }
    out
}

/// Channel concatenation; `a`'s channels come first.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.batch() != b.batch() || a.height() != b.height() || a.width() != b.width() {
        return Err(Error::shape(
            "concat_channels",
            format!("({},*,{},{})", a.batch(), a.height(), a.width()),
            format!("({},*,{},{})", b.batch(), b.height(), b.width()),
        ));
    }
    let (batch, ca, h, w) = a.shape();
    let cb = b.channels();
    let hw = h * w;
    let mut data = Vec::with_capacity(batch * (ca + cb) * hw);
    for bi in 0..batch {
        for c in 0..ca {
            data.extend_from_slice(a.plane(bi, c));
        }
        for c in 0..cb {
            data.extend_from_slice(b.plane(bi, c));
        }
    }
    Tensor::new(batch, ca + cb, h, w, data)
}

/// Elementwise sum of two identically shaped tensors.
pub fn add_residual(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "add_residual",
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    let mut out = a.clone();
    for (o, v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += *v;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded(len: usize, seed: u32) -> Vec<f32> {
        // small deterministic pseudo-random values in (-1, 1)
        let mut s = seed.wrapping_mul(2654435761).wrapping_add(1);
        (0..len)
            .map(|_| {
                s = s.wrapping_mul(1664525).wrapping_add(1013904223);
                (s >> 8) as f32 / (1u32 << 24) as f32 * 2.0 - 1.0
            })
            .collect()
    }

    /// Naive six-nested-loop direct convolution used as the independent oracle.
    pub(crate) fn conv2d_reference(
        x: &Tensor,
        w: &ConvWeights,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Tensor {
        let k = w.kernel_size;
        let (batch, cin, h, wd) = x.shape();
        let h_out = (h + 2 * padding - k) / stride + 1;
        let w_out = (wd + 2 * padding - k) / stride + 1;
        let icg = cin / groups;
        let ocg = w.out_ch / groups;
        let mut out = Tensor::zeros(batch, w.out_ch, h_out, w_out);
        for b in 0..batch {
            for oc in 0..w.out_ch {
                for oy in 0..h_out {
                    for ox in 0..w_out {
                        let mut acc = 0.0f32;
                        for ic in 0..icg {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let cin_idx = (oc / ocg) * icg + ic;
                                    acc += x.at(b, cin_idx, iy as usize, ix as usize)
                                        * w.kernel_at(oc, ic, ky, kx);
                                }
                            }
                        }
                        out.set(b, oc, oy, ox, acc);
                    }
                }
            }
        }
        out
    }

    pub(crate) fn assert_close(a: &Tensor, b: &Tensor, rel: f32) {
        assert_eq!(a.shape(), b.shape());
        for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
            let denom = x.abs().max(y.abs()).max(1.0);
            assert!(
                (x - y).abs() / denom <= rel,
                "element {i}: {x} vs {y} exceeds rel {rel}"
            );
        }
    }

    #[test]
    fn conv_output_shape_table_first_row() {
        let ctx = ExecContext::default();
        let x = Tensor::zeros(1, 3, 320, 320);
        let w = ConvWeights::new(16, 3, 3, seeded(16 * 3 * 9, 1)).unwrap();
        let y = conv2d(&ctx, &x, &w, 2, 1, 1).unwrap();
        assert_eq!(y.shape(), (1, 16, 160, 160));
    }

    #[test]
    fn conv_zero_input_gives_zero_output() {
        let ctx = ExecContext::default();
        let x = Tensor::zeros(1, 4, 9, 9);
        let w = ConvWeights::new(8, 4, 3, seeded(8 * 4 * 9, 2)).unwrap();
        let y = conv2d(&ctx, &x, &w, 1, 1, 1).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn conv_matches_reference_on_random_input() {
        let ctx = ExecContext::default();
        let x = Tensor::new(1, 4, 7, 7, seeded(4 * 49, 3)).unwrap();
        let w = ConvWeights::new(6, 4, 3, seeded(6 * 4 * 9, 4)).unwrap();
        let y = conv2d(&ctx, &x, &w, 1, 1, 1).unwrap();
        let r = conv2d_reference(&x, &w, 1, 1, 1);
        assert_close(&y, &r, 1e-5);
    }

    #[test]
    fn conv_group_mismatch_is_configuration_error() {
        let ctx = ExecContext::default();
        let x = Tensor::zeros(1, 4, 8, 8);
        let w = ConvWeights::new(6, 2, 3, seeded(6 * 2 * 9, 5)).unwrap();
        let err = conv2d_named(&ctx, &x, &w, 1, 1, 4, "bb.test").unwrap_err();
        assert!(err.to_string().contains("bb.test"), "{err}");
    }

    #[test]
    fn conv_channel_mismatch_names_layer() {
        let ctx = ExecContext::default();
        let x = Tensor::zeros(1, 5, 8, 8);
        let w = ConvWeights::new(6, 4, 3, seeded(6 * 4 * 9, 6)).unwrap();
        let err = conv2d_named(&ctx, &x, &w, 1, 1, 1, "neck.bad").unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
        assert!(err.to_string().contains("neck.bad"));
    }

    #[test]
    fn depthwise_channel_isolation_is_bitwise() {
        let ctx = ExecContext::default();
        let c = 5;
        let x = Tensor::new(1, c, 8, 8, seeded(c * 64, 7)).unwrap();
        let w = ConvWeights::new(c, 1, 3, seeded(c * 9, 8)).unwrap();
        let base = conv2d(&ctx, &x, &w, 1, 1, c).unwrap();
        // perturb channel 3, check channel 1 is bitwise unchanged
        let mut x2 = x.clone();
        for y in 0..8 {
            for xx in 0..8 {
                let v = x2.at(0, 3, y, xx);
                x2.set(0, 3, y, xx, v + 0.5);
            }
        }
        let per = conv2d(&ctx, &x2, &w, 1, 1, c).unwrap();
        assert_eq!(base.plane(0, 1), per.plane(0, 1));
        assert_ne!(base.plane(0, 3), per.plane(0, 3));
    }

    #[test]
    fn conv_parallel_is_bitwise_identical() {
        let x = Tensor::new(2, 6, 13, 11, seeded(2 * 6 * 143, 9)).unwrap();
        let w = ConvWeights::new(8, 6, 5, seeded(8 * 6 * 25, 10)).unwrap();
        let a = conv2d(&ExecContext::new(1), &x, &w, 2, 2, 1).unwrap();
        let b = conv2d(&ExecContext::new(4), &x, &w, 2, 2, 1).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn silu_reference_points() {
        // silu(0) = 0
        let z = silu(&Tensor::full(1, 1, 1, 1, 0.0));
        assert_eq!(z.data()[0], 0.0);
        // high-precision evaluation at a few points
        for &v in &[-4.0f32, -1.0, 1.0, 4.0] {
            let y = silu(&Tensor::full(1, 1, 1, 1, v));
            let expect = (v as f64) / (1.0 + (-v as f64).exp());
            assert!((y.data()[0] as f64 - expect).abs() < 1e-6, "silu({v})");
        }
        // asymptotics: negative but vanishing for large negative inputs
        let m10 = silu(&Tensor::full(1, 1, 1, 1, -10.0)).data()[0];
        let m100 = silu(&Tensor::full(1, 1, 1, 1, -100.0)).data()[0];
        assert!(m10 < 0.0);
        assert!(m100.abs() < 1e-8);
    }

    #[test]
    fn batchnorm_identity_and_scalar_case() {
        let x = Tensor::new(1, 1, 1, 2, vec![5.0, -3.0]).unwrap();
        let mut w = ConvWeights::new(1, 1, 1, vec![1.0]).unwrap();
        w.bn_eps = 0.0;
        let y = batchnorm_infer(&x, &w).unwrap();
        assert_eq!(y.data(), x.data());

        let w2 = ConvWeights::new(1, 1, 1, vec![1.0])
            .unwrap()
            .with_bn(vec![2.0], vec![3.0], vec![1.0], vec![4.0])
            .unwrap();
        let mut w2 = w2;
        w2.bn_eps = 0.0;
        let x2 = Tensor::full(1, 1, 1, 1, 5.0);
        let y2 = batchnorm_infer(&x2, &w2).unwrap();
        assert!((y2.data()[0] - 7.0).abs() < 1e-6);
    }

    #[test]
    fn conv_bn_matches_folded_weights() {
        let ctx = ExecContext::default();
        let x = Tensor::new(1, 3, 6, 6, seeded(3 * 36, 11)).unwrap();
        let w = ConvWeights::new(4, 3, 3, seeded(4 * 3 * 9, 12))
            .unwrap()
            .with_bn(
                vec![0.9, 1.1, 1.3, 0.7],
                vec![0.1, -0.2, 0.3, 0.0],
                vec![0.05, -0.01, 0.2, 0.0],
                vec![0.5, 1.5, 2.0, 1.0],
            )
            .unwrap();
        let unfused = batchnorm_infer(&conv2d(&ctx, &x, &w, 1, 1, 1).unwrap(), &w).unwrap();

        // algebraic fold: w' = gamma * w / sqrt(var + eps), b' = beta - gamma * mean / sqrt(var + eps)
        let mut folded = w.clone();
        let mut bias = vec![0.0f32; w.out_ch];
        for oc in 0..w.out_ch {
            let s = w.bn_gamma[oc] / (w.bn_var[oc] + w.bn_eps).sqrt();
            bias[oc] = w.bn_beta[oc] - w.bn_gamma[oc] * w.bn_mean[oc] / (w.bn_var[oc] + w.bn_eps).sqrt();
            for i in 0..w.in_per_group * 9 {
                folded.kernel[oc * w.in_per_group * 9 + i] *= s;
            }
        }
        let mut fused = conv2d(&ctx, &x, &folded, 1, 1, 1).unwrap();
        let (b, c, h, wd) = fused.shape();
        for bi in 0..b {
            for ci in 0..c {
                let start = (bi * c + ci) * h * wd;
                for v in &mut fused.data_mut()[start..start + h * wd] {
                    *v += bias[ci];
                }
            }
        }
        assert_close(&unfused, &fused, 1e-4);
    }

    #[test]
    fn upsample_examples() {
        let x = Tensor::full(1, 1, 1, 1, 7.0);
        let y = upsample_nearest2x(&x);
        assert_eq!(y.shape(), (1, 1, 2, 2));
        assert!(y.data().iter().all(|v| *v == 7.0));

        let x2 = Tensor::new(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y2 = upsample_nearest2x(&x2);
        assert_eq!(
            y2.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );

        // top-left stride-2 downsampling is a left inverse
        let x3 = Tensor::new(1, 2, 3, 2, seeded(12, 13)).unwrap();
        let up = upsample_nearest2x(&x3);
        let mut down = Tensor::zeros(1, 2, 3, 2);
        for c in 0..2 {
            for y in 0..3 {
                for xx in 0..2 {
                    down.set(0, c, y, xx, up.at(0, c, 2 * y, 2 * xx));
                }
            }
        }
        assert_eq!(down.data(), x3.data());
    }

    #[test]
    fn concat_and_slice_back() {
        let a = Tensor::new(1, 2, 2, 2, seeded(8, 14)).unwrap();
        let b = Tensor::new(1, 3, 2, 2, seeded(12, 15)).unwrap();
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), (1, 5, 2, 2));
        for ch in 0..2 {
            assert_eq!(c.plane(0, ch), a.plane(0, ch));
        }
        let bad = concat_channels(&a, &Tensor::zeros(1, 1, 3, 2));
        assert!(bad.is_err());
    }

    #[test]
    fn add_residual_properties() {
        let a = Tensor::new(1, 2, 3, 3, seeded(18, 16)).unwrap();
        let z = Tensor::zeros(1, 2, 3, 3);
        assert_eq!(add_residual(&a, &z).unwrap().data(), a.data());
        let b = Tensor::new(1, 2, 3, 3, seeded(18, 17)).unwrap();
        assert_eq!(
            add_residual(&a, &b).unwrap().data(),
            add_residual(&b, &a).unwrap().data()
        );
        let ones = Tensor::full(1, 2, 3, 3, 1.0);
        let twos = Tensor::full(1, 2, 3, 3, 2.0);
        assert!(add_residual(&ones, &twos).unwrap().data().iter().all(|v| *v == 3.0));
        assert!(add_residual(&a, &Tensor::zeros(1, 2, 3, 4)).is_err());
    }
}
