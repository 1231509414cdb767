//! Small building blocks on top of candle tensors: a named parameter store with
//! seeded initialisation and the handful of layer functions the models share.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::NamedTensor;
use crate::error::{Error, Result};

pub fn device() -> Device {
    Device::Cpu
}

/// Named trainable parameters, kept in creation order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    params: Vec<(String, Var)>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn push(&mut self, name: String, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(values, shape, &device())?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let tensor = var.as_tensor().clone();
        self.params.push((name, var));
        Ok(tensor)
    }

    pub fn normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidValue(e.to_string()))?;
        let values = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.push(name.into(), values, shape)
    }

    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.push(name.into(), values, shape)
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.push(name.into(), vec![value; n], shape)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn named(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Hash over every parameter's bit pattern; used to assert freeze contracts.
    pub fn fingerprint(&self) -> Result<u64> {
        let mut h = DefaultHasher::new();
        for (name, var) in &self.params {
            h.write(name.as_bytes());
            let flat = var.as_tensor().flatten_all()?;
            match flat.dtype() {
                DType::F64 => {
                    for x in flat.to_vec1::<f64>()? {
                        h.write_u64(x.to_bits());
                    }
                }
                _ => {
                    for x in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                        h.write_u32(x.to_bits());
                    }
                }
            }
        }
        Ok(h.finish())
    }

    pub fn export(&self, prefix: &str) -> Result<Vec<NamedTensor>> {
        self.params
            .iter()
            .map(|(name, var)| NamedTensor::from_tensor(format!("{prefix}{name}"), var.as_tensor()))
            .collect()
    }

    /// Overwrites every parameter from `tensors` (looked up as `prefix + name`).
    pub fn import(&self, prefix: &str, tensors: &[NamedTensor]) -> Result<()> {
        for (name, var) in &self.params {
            let full = format!("{prefix}{name}");
            let nt = tensors
                .iter()
                .find(|t| t.name == full)
                .ok_or_else(|| Error::InvalidValue(format!("checkpoint lacks tensor {full}")))?;
            if nt.shape != var.dims() {
                return Err(Error::shape(format!("{full} {:?}", var.dims()), format!("{:?}", nt.shape)));
            }
            var.set(&nt.to_tensor()?.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// `x @ w + b` over the last dimension; `w` is `(in, out)`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let inner = *dims.last().ok_or_else(|| Error::shape("rank >= 1", "scalar"))?;
    let rows = x.elem_count() / inner.max(1);
    let out_dim = w.dim(1)?;
    let y = x.reshape((rows, inner))?.matmul(w)?;
    let y = match b {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    };
    let mut out_shape = dims;
    *out_shape.last_mut().unwrap() = out_dim;
    Ok(y.reshape(out_shape)?)
}

/// Layer normalisation over the last dimension.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let lse = x.log_sum_exp(D::Minus1)?.unsqueeze(D::Minus1)?;
    Ok(x.broadcast_sub(&lse)?)
}

/// Channel-last temporal convolution with "same" zero padding.
///
/// `x` is `(B, T, C_in)`, `w` is `(K * C_in, C_out)` with taps laid out
/// tap-major. Implemented as shifted-frame concatenation plus one matmul.
pub fn conv_time(x: &Tensor, w: &Tensor, b: Option<&Tensor>, kernel: usize) -> Result<Tensor> {
    let (_, t, _) = x.dims3()?;
    let half = kernel / 2;
    let padded = x.pad_with_zeros(1, half, kernel - 1 - half)?;
    let taps = (0..kernel)
        .map(|k| padded.narrow(1, k, t))
        .collect::<candle_core::Result<Vec<_>>>()?;
    let stacked = Tensor::cat(&taps, 2)?;
    linear(&stacked, w, b)
}

/// Depthwise temporal convolution, channel-last. `x` is `(B, T, C)`, `w` is
/// `(K, C)`, zero "same" padding so the length is preserved.
pub fn depthwise_conv_time(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, t, _) = x.dims3()?;
    let kernel = w.dim(0)?;
    let half = kernel / 2;
    let padded = x.pad_with_zeros(1, half, kernel - 1 - half)?;
    let mut acc = padded.narrow(1, 0, t)?.broadcast_mul(&w.get(0)?)?;
    for k in 1..kernel {
        acc = (acc + padded.narrow(1, k, t)?.broadcast_mul(&w.get(k)?)?)?;
    }
    Ok(acc.broadcast_add(b)?)
}

/// Reads a scalar tensor of any float dtype as f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
