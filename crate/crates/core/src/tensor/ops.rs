use super::Tensor;
use crate::error::{EmfError, Result};

/// Inference-time batch normalization statistics for `C` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
}

pub const DEFAULT_BN_EPS: f32 = 1e-5;

impl BnParams {
    /// gamma = 1, beta = 0, mean = 0, var = 1.
    pub fn identity(c: usize) -> Self {
        BnParams {
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
            mean: vec![0.0; c],
            var: vec![1.0; c],
            eps: DEFAULT_BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.mean.len() != c || self.var.len() != c {
            return Err(EmfError::shape(format!(
                "batch-norm vectors disagree in length: gamma {}, beta {}, mean {}, var {}",
                c,
                self.beta.len(),
                self.mean.len(),
                self.var.len()
            )));
        }
        if self.eps < 0.0 || self.var.iter().any(|&v| v < 0.0) {
            return Err(EmfError::Value(
                "batch-norm variance and eps must be >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Per-channel `(scale, shift)` such that `bn(x) = scale * x + shift`.
    pub fn affine(&self) -> (Vec<f32>, Vec<f32>) {
        let scale: Vec<f32> = self
            .gamma
            .iter()
            .zip(&self.var)
            .map(|(g, v)| g / (v + self.eps).sqrt())
            .collect();
        let shift = self
            .beta
            .iter()
            .zip(&self.mean)
            .zip(&scale)
            .map(|((b, m), s)| b - m * s)
            .collect();
        (scale, shift)
    }
}

/// `gamma * (x - mean) / sqrt(var + eps) + beta`, per channel of a `(C, ...)` tensor.
pub fn batchnorm_infer(input: &Tensor, bn: &BnParams) -> Result<Tensor> {
    bn.validate()?;
    let c = input.shape().first().copied().unwrap_or(0);
    if c != bn.channels() {
        return Err(EmfError::shape(format!(
            "batch norm over {} channels applied to {:?}",
            bn.channels(),
            input.shape()
        )));
    }
    let mut out = input.clone();
    if c == 0 {
        return Ok(out);
    }
    let plane = input.len() / c;
    for (ch, chunk) in out.data_mut().chunks_mut(plane.max(1)).enumerate() {
        let inv = 1.0 / (bn.var[ch] + bn.eps).sqrt();
        let (g, b, m) = (bn.gamma[ch], bn.beta[ch], bn.mean[ch]);
        for v in chunk {
            *v = g * (*v - m) * inv + b;
        }
    }
    Ok(out)
}

const SQRT_2_OVER_PI: f32 = 0.797_884_6;
const GELU_CUBIC: f32 = 0.044_715;

/// Tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu_scalar(x: f32) -> f32 {
    // 0.5 * (1 + tanh(u)) == 1 / (1 + exp(-2u))
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    x / (1.0 + (-2.0 * u).exp())
}

pub fn gelu(input: &Tensor) -> Tensor {
    input.map(gelu_scalar)
}

pub fn gelu_inplace(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = gelu_scalar(*v);
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Replicates every cell of a `(C, H, W)` map into a 2x2 block.
pub fn nearest_upsample2x(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
    let src = input.data();
    let dst = out.data_mut();
    for ch in 0..c {
        for y in 0..h {
            let row = &src[(ch * h + y) * w..(ch * h + y + 1) * w];
            for dy in 0..2 {
                let o = (ch * 2 * h + 2 * y + dy) * 2 * w;
                for (x, &v) in row.iter().enumerate() {
                    dst[o + 2 * x] = v;
                    dst[o + 2 * x + 1] = v;
                }
            }
        }
    }
    Ok(out)
}

/// Keeps the top-left `(h, w)` window of a `(C, H, W)` map.
pub fn crop(input: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (c, ih, iw) = input.dims3()?;
    if h > ih || w > iw {
        return Err(EmfError::shape(format!(
            "cannot crop {:?} to ({h}, {w})",
            input.shape()
        )));
    }
    if (h, w) == (ih, iw) {
        return Ok(input.clone());
    }
    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            let o = (ch * ih + y) * iw;
            data.extend_from_slice(&input.data()[o..o + w]);
        }
    }
    Tensor::from_vec(&[c, h, w], data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut out = a.clone();
    add_assign(&mut out, b)?;
    Ok(out)
}

pub fn add_assign(a: &mut Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(EmfError::shape(format!(
            "cannot add {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
    Ok(())
}
