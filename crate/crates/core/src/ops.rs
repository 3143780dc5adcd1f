//! Forward and backward kernels for the layer types used by the model zoo.
//!
//! Spatial ops accept either a single sample `[C, H, W]` or a batch
//! `[B, C, H, W]` and return the same rank. Linear ops accept a single vector
//! `[D]` or anything with a leading batch dimension, whose trailing
//! dimensions are flattened. All kernels are pure.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Spatial padding of a stride-1 convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PaddingMode {
    /// No padding: output is `H - K + 1` by `W - K + 1`.
    Valid,
    /// Symmetric zero padding of `(K - 1) / 2`, output matches input. `K` must be odd.
    Same,
}

impl PaddingMode {
    fn pad(self, kernel: usize) -> usize {
        match self {
            PaddingMode::Valid => 0,
            PaddingMode::Same => (kernel - 1) / 2,
        }
    }
}

/// Gradients of a parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    /// Gradient w.r.t. the kernel or weight matrix.
    pub param_grad: Tensor,
    pub bias_grad: Tensor,
    pub input_grad: Tensor,
}

/// `C[m×n] = A[m×k]·B[k×n] + beta·C`, with row/column strides for A and B
/// and a contiguous row-major C.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "gemm output too small");
    if k > 0 {
        assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm lhs out of bounds");
        assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm rhs out of bounds");
    }
    // SAFETY: bounds for every index the kernel touches are asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy)]
struct Spatial {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    batched: bool,
}

impl Spatial {
    fn of(t: &Tensor, what: &str) -> Result<Self> {
        match *t.shape() {
            [c, h, w] => Ok(Self {
                batch: 1,
                channels: c,
                height: h,
                width: w,
                batched: false,
            }),
            [b, c, h, w] => Ok(Self {
                batch: b,
                channels: c,
                height: h,
                width: w,
                batched: true,
            }),
            ref s => Err(Error::dim(format!(
                "{what} must be [C,H,W] or [B,C,H,W], got {s:?}"
            ))),
        }
    }

    fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn shape_with(&self, channels: usize, height: usize, width: usize) -> Vec<usize> {
        if self.batched {
            vec![self.batch, channels, height, width]
        } else {
            vec![channels, height, width]
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    pad: usize,
    height: usize,
    width: usize,
    out_height: usize,
    out_width: usize,
}

impl ConvGeometry {
    fn new(input: &Spatial, kernel: &Tensor, mode: PaddingMode) -> Result<Self> {
        let [c_out, c_in, kh, kw] = *kernel.shape() else {
            return Err(Error::dim(format!(
                "conv kernel must be [C_out,C_in,K,K], got {:?}",
                kernel.shape()
            )));
        };
        if kh != kw {
            return Err(Error::dim(format!("conv kernel must be square, got {kh}x{kw}")));
        }
        if c_in != input.channels {
            return Err(Error::dim(format!(
                "conv input has {} channels, kernel expects {c_in}",
                input.channels
            )));
        }
        let (out_height, out_width) = match mode {
            PaddingMode::Valid => {
                if kh > input.height || kh > input.width {
                    return Err(Error::dim(format!(
                        "valid conv kernel {kh} exceeds input {}x{}",
                        input.height, input.width
                    )));
                }
                (input.height - kh + 1, input.width - kh + 1)
            }
            PaddingMode::Same => {
                if kh % 2 == 0 {
                    return Err(Error::dim(format!("same padding needs an odd kernel, got {kh}")));
                }
                (input.height, input.width)
            }
        };
        Ok(Self {
            in_channels: c_in,
            out_channels: c_out,
            kernel: kh,
            pad: mode.pad(kh),
            height: input.height,
            width: input.width,
            out_height,
            out_width,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_area(&self) -> usize {
        self.out_height * self.out_width
    }

    /// Unfolds one sample into a `[C_in·K·K, H'·W']` patch matrix.
    fn im2col(&self, sample: &[f64], cols: &mut [f64]) {
        let (k, pad) = (self.kernel, self.pad as isize);
        let area = self.out_area();
        for ci in 0..self.in_channels {
            let plane = &sample[ci * self.height * self.width..][..self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut cols[((ci * k + ki) * k + kj) * area..][..area];
                    for oy in 0..self.out_height {
                        let iy = oy as isize + ki as isize - pad;
                        let dst = &mut row[oy * self.out_width..][..self.out_width];
                        if iy < 0 || iy >= self.height as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.width..][..self.width];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = ox as isize + kj as isize - pad;
                            *d = if ix < 0 || ix >= self.width as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Folds a patch-matrix gradient back onto one input sample (accumulating).
    fn col2im(&self, cols: &[f64], sample: &mut [f64]) {
        let (k, pad) = (self.kernel, self.pad as isize);
        let area = self.out_area();
        for ci in 0..self.in_channels {
            let plane = &mut sample[ci * self.height * self.width..][..self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &cols[((ci * k + ki) * k + kj) * area..][..area];
                    for oy in 0..self.out_height {
                        let iy = oy as isize + ki as isize - pad;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let src = &row[oy * self.out_width..][..self.out_width];
                        let dst = &mut plane[iy as usize * self.width..][..self.width];
                        for (ox, g) in src.iter().enumerate() {
                            let ix = ox as isize + kj as isize - pad;
                            if ix >= 0 && ix < self.width as isize {
                                dst[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 2-D convolution (cross-correlation).
pub fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    mode: PaddingMode,
) -> Result<Tensor> {
    let sp = Spatial::of(input, "conv input")?;
    let geo = ConvGeometry::new(&sp, kernel, mode)?;
    if bias.len() != geo.out_channels {
        return Err(Error::dim(format!(
            "conv bias has {} entries, expected {}",
            bias.len(),
            geo.out_channels
        )));
    }
    let (patch, area) = (geo.patch_len(), geo.out_area());
    let out_len = geo.out_channels * area;
    let mut out = vec![0.0; sp.batch * out_len];
    let mut cols = vec![0.0; patch * area];
    for (x, y) in input
        .data()
        .chunks_exact(sp.sample_len())
        .zip(out.chunks_exact_mut(out_len))
    {
        geo.im2col(x, &mut cols);
        gemm(
            geo.out_channels,
            patch,
            area,
            kernel.data(),
            (patch, 1),
            &cols,
            (area, 1),
            0.0,
            y,
        );
        for (plane, &b) in y.chunks_exact_mut(area).zip(bias.data()) {
            plane.iter_mut().for_each(|v| *v += b);
        }
    }
    Ok(Tensor::from_parts(
        sp.shape_with(geo.out_channels, geo.out_height, geo.out_width),
        out,
    ))
}

fn conv2d_backward_impl(
    input: &Tensor,
    kernel: &Tensor,
    mode: PaddingMode,
    upstream: &Tensor,
    with_params: bool,
) -> Result<(Option<(Tensor, Tensor)>, Tensor)> {
    let sp = Spatial::of(input, "conv input")?;
    let geo = ConvGeometry::new(&sp, kernel, mode)?;
    let expected = sp.shape_with(geo.out_channels, geo.out_height, geo.out_width);
    if upstream.shape() != expected.as_slice() {
        return Err(Error::dim(format!(
            "conv upstream gradient {:?} does not match output {expected:?}",
            upstream.shape()
        )));
    }
    let (patch, area) = (geo.patch_len(), geo.out_area());
    let out_len = geo.out_channels * area;
    let mut kernel_grad = vec![0.0; kernel.len()];
    let mut bias_grad = vec![0.0; geo.out_channels];
    let mut input_grad = vec![0.0; input.len()];
    let mut cols = vec![0.0; patch * area];
    let mut dcols = vec![0.0; patch * area];
    for ((x, g), dx) in input
        .data()
        .chunks_exact(sp.sample_len())
        .zip(upstream.data().chunks_exact(out_len))
        .zip(input_grad.chunks_exact_mut(sp.sample_len()))
    {
        if with_params {
            geo.im2col(x, &mut cols);
            // dK += G · colsᵀ
            gemm(
                geo.out_channels,
                area,
                patch,
                g,
                (area, 1),
                &cols,
                (1, area),
                1.0,
                &mut kernel_grad,
            );
            for (acc, plane) in bias_grad.iter_mut().zip(g.chunks_exact(area)) {
                *acc += plane.iter().sum::<f64>();
            }
        }
        // dcols = Kᵀ · G
        gemm(
            patch,
            geo.out_channels,
            area,
            kernel.data(),
            (1, patch),
            g,
            (area, 1),
            0.0,
            &mut dcols,
        );
        geo.col2im(&dcols, dx);
    }
    let params = with_params.then(|| {
        (
            Tensor::from_parts(kernel.shape().to_vec(), kernel_grad),
            Tensor::from_parts(vec![geo.out_channels], bias_grad),
        )
    });
    Ok((params, Tensor::from_parts(input.shape().to_vec(), input_grad)))
}

/// Exact gradients of [`conv2d_forward`] w.r.t. kernel, bias and input.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    mode: PaddingMode,
    upstream: &Tensor,
) -> Result<LayerGrad> {
    let (params, input_grad) = conv2d_backward_impl(input, kernel, mode, upstream, true)?;
    let (param_grad, bias_grad) = params.expect("requested parameter gradients");
    Ok(LayerGrad {
        param_grad,
        bias_grad,
        input_grad,
    })
}

/// Input gradient only, for layers whose parameters are frozen.
pub fn conv2d_backward_input(
    input: &Tensor,
    kernel: &Tensor,
    mode: PaddingMode,
    upstream: &Tensor,
) -> Result<Tensor> {
    conv2d_backward_impl(input, kernel, mode, upstream, false).map(|(_, dx)| dx)
}

/// Winning input positions of a 2×2 max-pool, one per output cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    argmax: Vec<usize>,
}

impl PoolIndices {
    /// Flat input offsets of each window's maximum.
    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }
}

/// 2×2 max-pooling with stride 2. Ties go to the first position in row-major order.
pub fn maxpool2d_forward(input: &Tensor) -> Result<(Tensor, PoolIndices)> {
    let sp = Spatial::of(input, "pool input")?;
    if sp.height % 2 != 0 || sp.width % 2 != 0 {
        return Err(Error::dim(format!(
            "max-pool needs even spatial dims, got {}x{}",
            sp.height, sp.width
        )));
    }
    let (oh, ow) = (sp.height / 2, sp.width / 2);
    let planes = sp.batch * sp.channels;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    let data = input.data();
    for p in 0..planes {
        let base = p * sp.height * sp.width;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * sp.width + 2 * ox;
                let candidates = [top, top + 1, top + sp.width, top + sp.width + 1];
                let mut best = candidates[0];
                for &c in &candidates[1..] {
                    if data[c] > data[best] {
                        best = c;
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    let output_shape = sp.shape_with(sp.channels, oh, ow);
    Ok((
        Tensor::from_parts(output_shape.clone(), out),
        PoolIndices {
            input_shape: input.shape().to_vec(),
            output_shape,
            argmax,
        },
    ))
}

/// Routes the upstream gradient to the recorded argmax positions.
pub fn maxpool2d_backward(indices: &PoolIndices, upstream: &Tensor) -> Result<Tensor> {
    if upstream.shape() != indices.output_shape.as_slice() {
        return Err(Error::dim(format!(
            "pool upstream gradient {:?} does not match recorded output {:?}",
            upstream.shape(),
            indices.output_shape
        )));
    }
    let mut grad = Tensor::zeros(indices.input_shape.clone());
    let g = grad.data_mut();
    for (&pos, &u) in indices.argmax.iter().zip(upstream.data()) {
        g[pos] += u;
    }
    Ok(grad)
}

/// Returns `(batch, features, batched)` for a linear-layer input.
fn linear_view(input: &Tensor) -> (usize, usize, bool) {
    match input.shape() {
        [d] => (1, *d, false),
        [b, rest @ ..] => (*b, rest.iter().product(), true),
        [] => (0, 0, false),
    }
}

fn check_linear(input: &Tensor, weight: &Tensor) -> Result<(usize, usize, usize, bool)> {
    let [d_out, d_in] = *weight.shape() else {
        return Err(Error::dim(format!(
            "linear weight must be [D_out,D_in], got {:?}",
            weight.shape()
        )));
    };
    let (batch, features, batched) = linear_view(input);
    if features != d_in {
        return Err(Error::dim(format!(
            "linear layer expects {d_in} input features, got {features} from {:?}",
            input.shape()
        )));
    }
    Ok((batch, d_in, d_out, batched))
}

/// `y = W·x + b`, applied per batch row.
pub fn linear_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (batch, d_in, d_out, batched) = check_linear(input, weight)?;
    if bias.len() != d_out {
        return Err(Error::dim(format!(
            "linear bias has {} entries, expected {d_out}",
            bias.len()
        )));
    }
    let mut out = vec![0.0; batch * d_out];
    for row in out.chunks_exact_mut(d_out) {
        row.copy_from_slice(bias.data());
    }
    // Y += X · Wᵀ
    gemm(
        batch,
        d_in,
        d_out,
        input.data(),
        (d_in, 1),
        weight.data(),
        (1, d_in),
        1.0,
        &mut out,
    );
    let shape = if batched { vec![batch, d_out] } else { vec![d_out] };
    Ok(Tensor::from_parts(shape, out))
}

fn linear_backward_impl(
    input: &Tensor,
    weight: &Tensor,
    upstream: &Tensor,
    with_params: bool,
) -> Result<(Option<(Tensor, Tensor)>, Tensor)> {
    let (batch, d_in, d_out, _) = check_linear(input, weight)?;
    if upstream.len() != batch * d_out {
        return Err(Error::dim(format!(
            "linear upstream gradient {:?} does not match output of {batch}x{d_out}",
            upstream.shape()
        )));
    }
    let g = upstream.data();
    let params = if with_params {
        let mut weight_grad = vec![0.0; d_out * d_in];
        // dW = Gᵀ · X
        gemm(
            d_out,
            batch,
            d_in,
            g,
            (1, d_out),
            input.data(),
            (d_in, 1),
            0.0,
            &mut weight_grad,
        );
        let mut bias_grad = vec![0.0; d_out];
        for row in g.chunks_exact(d_out) {
            bias_grad.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
        Some((
            Tensor::from_parts(vec![d_out, d_in], weight_grad),
            Tensor::from_parts(vec![d_out], bias_grad),
        ))
    } else {
        None
    };
    let mut input_grad = vec![0.0; batch * d_in];
    // dX = G · W
    gemm(
        batch,
        d_out,
        d_in,
        g,
        (d_out, 1),
        weight.data(),
        (d_in, 1),
        0.0,
        &mut input_grad,
    );
    Ok((params, Tensor::from_parts(input.shape().to_vec(), input_grad)))
}

/// Exact gradients of [`linear_forward`]. The input gradient keeps the input's shape.
pub fn linear_backward(input: &Tensor, weight: &Tensor, upstream: &Tensor) -> Result<LayerGrad> {
    let (params, input_grad) = linear_backward_impl(input, weight, upstream, true)?;
    let (param_grad, bias_grad) = params.expect("requested parameter gradients");
    Ok(LayerGrad {
        param_grad,
        bias_grad,
        input_grad,
    })
}

pub fn linear_backward_input(input: &Tensor, weight: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    linear_backward_impl(input, weight, upstream, false).map(|(_, dx)| dx)
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::from_parts(input.shape().to_vec(), data)
}

/// Masks the upstream gradient by `input > 0`; the subgradient at zero is zero.
pub fn relu_backward(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if input.shape() != upstream.shape() {
        return Err(Error::dim(format!(
            "relu upstream gradient {:?} does not match input {:?}",
            upstream.shape(),
            input.shape()
        )));
    }
    let data = input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Ok(Tensor::from_parts(input.shape().to_vec(), data))
}

/// Writes `softmax(logits) - onehot(label)` into `grad` and returns the loss.
fn cross_entropy_row(logits: &[f64], label: usize, grad: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (g, &z) in grad.iter_mut().zip(logits) {
        *g = (z - max).exp();
        total += *g;
    }
    grad.iter_mut().for_each(|g| *g /= total);
    grad[label] -= 1.0;
    max + total.ln() - logits[label]
}

/// Cross-entropy of one logit vector against a class index, with its gradient.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    let [classes] = *logits.shape() else {
        return Err(Error::dim(format!("logits must be [C], got {:?}", logits.shape())));
    };
    if label >= classes {
        return Err(Error::arg(format!("label {label} out of range for {classes} classes")));
    }
    let mut grad = vec![0.0; classes];
    let loss = cross_entropy_row(logits.data(), label, &mut grad);
    Ok((loss, Tensor::from_parts(vec![classes], grad)))
}

/// Per-row cross-entropy of a `[B, C]` batch. The returned gradient holds
/// `softmax - onehot` for each row, unscaled.
pub fn cross_entropy_rows(logits: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Tensor)> {
    let [batch, classes] = *logits.shape() else {
        return Err(Error::dim(format!("logits must be [B,C], got {:?}", logits.shape())));
    };
    if labels.len() != batch {
        return Err(Error::dim(format!("{} labels for a batch of {batch}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::arg(format!("label {bad} out of range for {classes} classes")));
    }
    let mut grad = vec![0.0; batch * classes];
    let losses = logits
        .data()
        .chunks_exact(classes)
        .zip(grad.chunks_exact_mut(classes))
        .zip(labels)
        .map(|((row, g), &label)| cross_entropy_row(row, label, g))
        .collect();
    Ok((losses, Tensor::from_parts(vec![batch, classes], grad)))
}

/// Mean cross-entropy over a `[B, C]` batch; the gradient is that of the mean.
pub fn softmax_cross_entropy_batch(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (losses, mut grad) = cross_entropy_rows(logits, labels)?;
    let scale = 1.0 / losses.len() as f64;
    grad.data_mut().iter_mut().for_each(|g| *g *= scale);
    Ok((losses.iter().sum::<f64>() * scale, grad))
}
