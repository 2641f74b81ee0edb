//! Dense, convolution, pooling, activation and dropout layers with exact
//! backward passes.

use rand::Rng;

use super::linalg::{matvec_acc, matvec_t_acc, outer_acc};
use super::Tensor;
use crate::error::{Error, Result};

/// `f(x) = max(0, x)`.
#[inline]
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Derivative of [`relu`]; the kink at 0 takes the left derivative (0).
#[inline]
pub fn relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Logistic function, evaluated without overflow for any finite input.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn tanh(x: f64) -> f64 {
    x.tanh()
}

// ---------------------------------------------------------------------------
// Dense

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

fn check_dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    x.expect_rank(1)?;
    w.expect_rank(2)?;
    let (n_out, n_in) = (w.shape()[0], w.shape()[1]);
    x.expect_shape(&[n_in])?;
    b.expect_shape(&[n_out])?;
    Ok((n_out, n_in))
}

/// `y = W x + b` for `x: [n_in]`, `W: [n_out, n_in]`, `b: [n_out]`.
pub fn dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_dense(x, w, b)?;
    let mut y = b.data().to_vec();
    matvec_acc(w.data(), x.data(), &mut y);
    Ok(Tensor::from_vec(y))
}

/// Gradients of a dense layer given the upstream gradient `dL/dy`.
pub fn dense_backward(x: &Tensor, w: &Tensor, grad_y: &Tensor) -> Result<DenseGrads> {
    x.expect_rank(1)?;
    w.expect_rank(2)?;
    let (n_out, n_in) = (w.shape()[0], w.shape()[1]);
    x.expect_shape(&[n_in])?;
    grad_y.expect_shape(&[n_out])?;
    let mut dx = vec![0.0; n_in];
    matvec_t_acc(w.data(), grad_y.data(), &mut dx);
    let mut dw = Tensor::zeros(&[n_out, n_in]);
    outer_acc(grad_y.data(), x.data(), dw.data_mut());
    Ok(DenseGrads {
        input: Tensor::from_vec(dx),
        weight: dw,
        bias: grad_y.clone(),
    })
}

/// Fully connected layer parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Dense {
            weight: Tensor::zeros(&[n_out, n_in]),
            bias: Tensor::zeros(&[n_out]),
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        Dense {
            weight: Tensor::glorot_uniform(&[n_out, n_in], n_in, n_out, rng),
            bias: Tensor::zeros(&[n_out]),
        }
    }

    pub fn n_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn n_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        dense(x, &self.weight, &self.bias)
    }

    pub fn backward(&self, x: &Tensor, grad_y: &Tensor) -> Result<DenseGrads> {
        dense_backward(x, &self.weight, grad_y)
    }

    /// Slice form used on hot paths: `y = W x + b` with no shape checks beyond
    /// debug assertions.
    pub(crate) fn forward_slice(&self, x: &[f64], y: &mut [f64]) {
        y.copy_from_slice(self.bias.data());
        matvec_acc(self.weight.data(), x, y);
    }

    /// Accumulates `dW += g x^T`, `db += g` and (optionally) `dx += W^T g`.
    pub(crate) fn backward_slice(
        &self,
        x: &[f64],
        grad_y: &[f64],
        dw: &mut [f64],
        db: &mut [f64],
        dx: Option<&mut [f64]>,
    ) {
        outer_acc(grad_y, x, dw);
        for (b, g) in db.iter_mut().zip(grad_y) {
            *b += g;
        }
        if let Some(dx) = dx {
            matvec_t_acc(self.weight.data(), grad_y, dx);
        }
    }
}

// ---------------------------------------------------------------------------
// Conv2d

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub kernels: Tensor,
    pub bias: Tensor,
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_geometry(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<ConvGeom> {
    input.expect_rank(3)?;
    kernels.expect_rank(4)?;
    if stride == 0 {
        return Err(Error::invalid("conv2d stride must be positive"));
    }
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (k, kc, kh, kw) = (
        kernels.shape()[0],
        kernels.shape()[1],
        kernels.shape()[2],
        kernels.shape()[3],
    );
    if kc != c {
        return Err(Error::DimensionMismatch {
            context: "conv2d kernel channels vs input channels".into(),
            expected: c,
            found: kc,
        });
    }
    bias.expect_shape(&[k])?;
    let (ph, pw) = (h + 2 * padding, w + 2 * padding);
    if kh > ph || kw > pw {
        return Err(Error::invalid(format!(
            "conv2d kernel {kh}x{kw} larger than padded input {ph}x{pw}"
        )));
    }
    if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
        return Err(Error::invalid(format!(
            "conv2d output extent is not integral: ({ph}-{kh})/{stride}, ({pw}-{kw})/{stride}"
        )));
    }
    Ok(ConvGeom {
        c,
        h,
        w,
        k,
        kh,
        kw,
        oh: (ph - kh) / stride + 1,
        ow: (pw - kw) / stride + 1,
    })
}

/// Zero-padded cross-correlation of `input: [C, H, W]` with
/// `kernels: [K, C, kh, kw]`, giving `[K, H', W']` where
/// `H' = (H + 2 pad - kh) / stride + 1`.
pub fn conv2d(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = conv_geometry(input, kernels, bias, stride, padding)?;
    let x = input.data();
    let kd = kernels.data();
    let mut out = vec![0.0; g.k * g.oh * g.ow];
    for k in 0..g.k {
        let plane = &mut out[k * g.oh * g.ow..(k + 1) * g.oh * g.ow];
        plane.iter_mut().for_each(|v| *v = bias.data()[k]);
        for c in 0..g.c {
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let wv = kd[((k * g.c + c) * g.kh + i) * g.kw + j];
                    for oy in 0..g.oh {
                        let y = (oy * stride + i) as isize - padding as isize;
                        if y < 0 || y as usize >= g.h {
                            continue;
                        }
                        let row = &x[(c * g.h + y as usize) * g.w..(c * g.h + y as usize + 1) * g.w];
                        let orow = &mut plane[oy * g.ow..(oy + 1) * g.ow];
                        for (ox, o) in orow.iter_mut().enumerate() {
                            let xx = (ox * stride + j) as isize - padding as isize;
                            if xx >= 0 && (xx as usize) < g.w {
                                *o += wv * row[xx as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.k, g.oh, g.ow], out)
}

/// Gradients of [`conv2d`] with respect to input, kernels and bias.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<ConvGrads> {
    let k_extent = kernels.shape().first().copied().unwrap_or(0);
    let zero_bias = Tensor::zeros(&[k_extent.max(1)]);
    let g = conv_geometry(input, kernels, &zero_bias, stride, padding)?;
    grad_out.expect_shape(&[g.k, g.oh, g.ow])?;
    let x = input.data();
    let kd = kernels.data();
    let dy = grad_out.data();
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; kd.len()];
    let mut db = vec![0.0; g.k];
    for k in 0..g.k {
        let plane = &dy[k * g.oh * g.ow..(k + 1) * g.oh * g.ow];
        db[k] = plane.iter().sum();
        for c in 0..g.c {
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let widx = ((k * g.c + c) * g.kh + i) * g.kw + j;
                    let wv = kd[widx];
                    let mut acc = 0.0;
                    for oy in 0..g.oh {
                        let y = (oy * stride + i) as isize - padding as isize;
                        if y < 0 || y as usize >= g.h {
                            continue;
                        }
                        let base = (c * g.h + y as usize) * g.w;
                        for ox in 0..g.ow {
                            let xx = (ox * stride + j) as isize - padding as isize;
                            if xx >= 0 && (xx as usize) < g.w {
                                let d = plane[oy * g.ow + ox];
                                acc += d * x[base + xx as usize];
                                dx[base + xx as usize] += d * wv;
                            }
                        }
                    }
                    dk[widx] += acc;
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), dx)?,
        kernels: Tensor::new(kernels.shape().to_vec(), dk)?,
        bias: Tensor::from_vec(db),
    })
}

/// 2-D convolution layer parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub kernels: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Glorot-uniform kernels with fan-in `C*kh*kw` and fan-out `K*kh*kw`.
    pub fn glorot<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let area = kernel * kernel;
        Conv2d {
            kernels: Tensor::glorot_uniform(
                &[out_channels, in_channels, kernel, kernel],
                in_channels * area,
                out_channels * area,
                rng,
            ),
            bias: Tensor::zeros(&[out_channels]),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.kernels, &self.bias, self.stride, self.padding)
    }

    pub fn backward(&self, x: &Tensor, grad_out: &Tensor) -> Result<ConvGrads> {
        conv2d_backward(x, &self.kernels, grad_out, self.stride, self.padding)
    }
}

// ---------------------------------------------------------------------------
// Max pooling

/// Argmax routing of a 2x2/stride-2 max pool, kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxPool {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}

/// 2x2 max pooling with stride 2 over `[C, H, W]` (H and W even). Ties go to
/// the first maximal element in row-major scan order.
pub fn maxpool2d(input: &Tensor) -> Result<(Tensor, MaxPool)> {
    input.expect_rank(3)?;
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!(
            "maxpool2d needs even extents, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (ch * h + 2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (ch * h + 2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::new(vec![c, oh, ow], out)?,
        MaxPool {
            input_shape: input.shape().to_vec(),
            argmax,
        },
    ))
}

/// Routes `grad_out` back to the argmax positions recorded by [`maxpool2d`].
pub fn maxpool2d_backward(pool: &MaxPool, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.len() != pool.argmax.len() {
        return Err(Error::DimensionMismatch {
            context: "maxpool2d upstream gradient".into(),
            expected: pool.argmax.len(),
            found: grad_out.len(),
        });
    }
    let mut dx = Tensor::zeros(&pool.input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in pool.argmax.iter().zip(grad_out.data()) {
        d[idx] += g;
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// Dropout

/// Per-element scale factors (`0` or `1/(1-rate)`) drawn by [`dropout`].
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask(pub Vec<f64>);

impl DropoutMask {
    pub fn apply(&self, grad: &Tensor) -> Tensor {
        let mut out = grad.clone();
        for (g, m) in out.data_mut().iter_mut().zip(&self.0) {
            *g *= m;
        }
        out
    }
}

pub(crate) fn check_dropout_rate(rate: f64) -> Result<()> {
    if rate.is_finite() && (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::invalid(format!("dropout rate must be in [0, 1), got {rate}")))
    }
}

/// Inverted dropout. In training mode each element is zeroed with
/// probability `rate` and survivors are scaled by `1/(1-rate)`; otherwise the
/// input is returned unchanged. The mask is returned for the backward pass
/// (`None` when the layer is an identity).
pub fn dropout<R: Rng + ?Sized>(
    input: &Tensor,
    rate: f64,
    rng: &mut R,
    training: bool,
) -> Result<(Tensor, Option<DropoutMask>)> {
    check_dropout_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok((input.clone(), None));
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..input.len())
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let mut out = input.clone();
    for (v, m) in out.data_mut().iter_mut().zip(&mask) {
        *v *= m;
    }
    Ok((out, Some(DropoutMask(mask))))
}
