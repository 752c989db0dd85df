//! Small neural-network toolkit on top of candle tensors: seeded parameter
//! storage, layers, normalisation and the loss primitives shared by both
//! stages.

mod conv;
pub mod optim;

pub(crate) use conv::upsample2x_nearest;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};


/// Guard added under the square root of the variance so that the gradient
/// of a constant channel stays finite.
const VAR_FLOOR: f64 = 1e-12;

/// Epsilon added to the standard deviation in instance/adaptive normalisation.
pub const NORM_EPS: f64 = 1e-5;

/// Named, ordered parameter collection. Ordering is by name so that
/// iteration (and therefore optimiser updates) is reproducible.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    fn insert(&mut self, name: String, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        if self.vars.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.vars.insert(name, var.clone());
        Ok(var)
    }

    /// Uniform(-b, b) with b = sqrt(3 / fan_in): unit-variance preserving
    /// for linear maps.
    fn uniform(rng: &mut impl Rng, n: usize, fan_in: usize) -> Vec<f64> {
        let bound = (3.0 / fan_in as f64).sqrt();
        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
    }

    pub fn conv2d(
        &mut self,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Result<Conv2d> {
        let fan_in = in_ch * kernel * kernel;
        let w = Self::uniform(rng, out_ch * fan_in, fan_in);
        let weight = self.insert(format!("{name}.weight"), w, &[out_ch, in_ch, kernel, kernel])?;
        let bias = self.insert(format!("{name}.bias"), vec![0.0; out_ch], &[out_ch])?;
        Ok(Conv2d {
            weight,
            bias,
            stride,
            pad,
        })
    }

    pub fn linear(&mut self, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Result<Linear> {
        let w = Self::uniform(rng, in_dim * out_dim, in_dim);
        let weight = self.insert(format!("{name}.weight"), w, &[out_dim, in_dim])?;
        let bias = self.insert(format!("{name}.bias"), vec![0.0; out_dim], &[out_dim])?;
        Ok(Linear { weight, bias })
    }

    /// Deterministic digest of parameter names and shapes.
    pub fn architecture_hash(&self) -> u64 {
        let mut h = Sha256::new();
        for (name, v) in &self.vars {
            h.update(name.as_bytes());
            for d in v.dims() {
                h.update((*d as u64).to_le_bytes());
            }
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    /// Merge another store under a prefix; variables remain shared.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore) {
        for (name, var) in &other.vars {
            self.vars.insert(format!("{prefix}{name}"), var.clone());
        }
    }

    /// Copy values out as f64 host arrays.
    pub fn to_host(&self) -> Result<BTreeMap<String, HostArray>> {
        self.vars
            .iter()
            .map(|(name, var)| Ok((name.clone(), HostArray::from_tensor(var.as_tensor())?)))
            .collect()
    }

    /// Overwrite every parameter from host arrays; names and shapes must match.
    pub fn load_host(&self, arrays: &BTreeMap<String, HostArray>) -> Result<()> {
        for (name, var) in &self.vars {
            let a = arrays
                .get(name)
                .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))?;
            if a.shape != var.dims() {
                return Err(Error::Contract(format!(
                    "parameter `{name}` has shape {:?}, stored {:?}",
                    var.dims(),
                    a.shape
                )));
            }
            var.set(&a.to_tensor(self.dtype, &self.device)?)?;
        }
        Ok(())
    }
}

/// Host-side copy of a tensor. Values are held at the precision of the
/// source tensor so that f32 round trips are bit exact.
#[derive(Debug, Clone, PartialEq)]
pub struct HostArray {
    pub shape: Vec<usize>,
    pub data: HostData,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HostData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl HostArray {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let flat = t.flatten_all()?;
        let data = match t.dtype() {
            DType::F64 => HostData::F64(flat.to_vec1::<f64>()?),
            _ => HostData::F32(flat.to_dtype(DType::F32)?.to_vec1::<f32>()?),
        };
        Ok(Self {
            shape: t.dims().to_vec(),
            data,
        })
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = match &self.data {
            HostData::F32(v) => Tensor::from_slice(v, self.shape.as_slice(), device)?,
            HostData::F64(v) => Tensor::from_slice(v, self.shape.as_slice(), device)?,
        };
        Ok(t.to_dtype(dtype)?)
    }

    pub fn len(&self) -> usize {
        match &self.data {
            HostData::F32(v) => v.len(),
            HostData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(conv::conv2d(x, &self.weight, Some(&self.bias), self.stride, self.pad)?)
    }

    /// Forward with parameters cut out of the autograd graph.
    pub fn forward_detached(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.as_tensor().detach();
        let b = self.bias.as_tensor().detach();
        Ok(conv::conv2d(x, &w, Some(&b), self.stride, self.pad)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    /// `x`: (N, in) -> (N, out)
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.as_tensor().t()?)?;
        Ok(y.broadcast_add(&self.bias)?)
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * slope)?)?)
}

/// Per (sample, channel) standardisation over the spatial extent using the
/// population variance: (x - mean) / (std + eps).
pub fn instance_normalize(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let flat = x.reshape((b, c, h * w))?;
    let mean = flat.mean_keepdim(2)?;
    let centered = flat.broadcast_sub(&mean)?;
    let std = (centered.sqr()?.mean_keepdim(2)? + VAR_FLOOR)?.sqrt()?;
    let normed = centered.broadcast_div(&(std + NORM_EPS)?)?;
    Ok(normed.reshape((b, c, h, w))?)
}

/// Adaptive instance normalisation with per-channel `gamma`, `beta` of shape (C).
pub fn adain(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let c = x.dim(1)?;
    if gamma.dims() != [c] || beta.dims() != [c] {
        return Err(Error::Contract(format!(
            "adain: feature map has {c} channels but gamma/beta have shapes {:?}/{:?}",
            gamma.dims(),
            beta.dims()
        )));
    }
    let (b, _, h, w) = x.dims4()?;
    let normed = instance_normalize(x)?.reshape((b, c, h * w))?;
    // Repeat over the batch so the backward reduction runs over the last axis only.
    let g = gamma.reshape((1, c, 1))?.repeat((b, 1, 1))?;
    let s = beta.reshape((1, c, 1))?.repeat((b, 1, 1))?;
    Ok(normed.broadcast_mul(&g)?.broadcast_add(&s)?.reshape((b, c, h, w))?)
}

/// Softmax over the channel axis of an NCHW tensor.
pub fn softmax_channels(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(1)?)?)
}

/// Mean binary cross-entropy of raw scores against a constant target label,
/// computed as softplus(x) - x*t in its overflow-safe form.
pub fn bce_with_logits(logits: &Tensor, target: f64) -> Result<Tensor> {
    let softplus = (logits.relu()? + ((logits.abs()?.neg()?.exp()? + 1.0)?.log()?))?;
    Ok((softplus - (logits * target)?)?.mean_all()?)
}

/// Mean absolute difference.
pub fn l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.abs()?.mean_all()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
