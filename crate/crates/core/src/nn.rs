//! Parameter storage and the small set of layers shared by every network in the crate.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::ops::{self, Window};
use crate::{Error, Result};

/// How a fresh parameter is initialized.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// He-normal on the fan-in (product of all but the first dimension).
    Kaiming,
    Normal(f64),
}

enum Store {
    Trainable {
        vars: Mutex<BTreeMap<String, Var>>,
        rng: Mutex<ChaCha8Rng>,
    },
    Frozen(HashMap<String, Tensor>),
}

/// Named parameter tree. Either creates seeded trainable variables on first access or serves
/// frozen tensors loaded from a checkpoint.
#[derive(Clone)]
pub struct Params {
    prefix: String,
    store: Arc<Store>,
    dtype: DType,
    device: Device,
}

impl Params {
    /// Trainable parameters initialized deterministically from `seed`.
    pub fn trainable(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            prefix: String::new(),
            store: Arc::new(Store::Trainable {
                vars: Mutex::new(BTreeMap::new()),
                rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            }),
            dtype,
            device: device.clone(),
        }
    }

    /// Read-only parameters; tensors are cast to `dtype` and detached from any graph.
    pub fn frozen(tensors: &HashMap<String, Tensor>, dtype: DType, device: &Device) -> Result<Self> {
        let mut map = HashMap::with_capacity(tensors.len());
        for (k, v) in tensors {
            map.insert(k.clone(), v.to_device(device)?.to_dtype(dtype)?.detach());
        }
        Ok(Self {
            prefix: String::new(),
            store: Arc::new(Store::Frozen(map)),
            dtype,
            device: device.clone(),
        })
    }

    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Self {
            prefix,
            store: self.store.clone(),
            dtype: self.dtype,
            device: self.device.clone(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn get(&self, shape: impl Into<Shape>, name: &str, init: Init) -> Result<Tensor> {
        let shape = shape.into();
        let full = self.full_name(name);
        match self.store.as_ref() {
            Store::Frozen(map) => {
                let t = map
                    .get(&full)
                    .ok_or_else(|| Error::Dependency(format!("missing parameter `{full}`")))?;
                if t.shape() != &shape {
                    return Err(Error::Shape(format!(
                        "parameter `{full}` has shape {:?}, expected {:?}",
                        t.dims(),
                        shape.dims()
                    )));
                }
                Ok(t.clone())
            }
            Store::Trainable { vars, rng } => {
                let mut vars = vars.lock().expect("parameter store poisoned");
                if let Some(v) = vars.get(&full) {
                    return Ok(v.as_tensor().clone());
                }
                let n = shape.elem_count();
                let values: Vec<f64> = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Kaiming | Init::Normal(_) => {
                        let std = match init {
                            Init::Normal(std) => std,
                            _ => {
                                let dims = shape.dims();
                                let fan_in: usize = if dims.len() > 1 { dims[1..].iter().product() } else { dims[0] };
                                (2.0 / fan_in as f64).sqrt()
                            }
                        };
                        let mut rng = rng.lock().expect("rng poisoned");
                        (0..n)
                            .map(|_| std * rng.sample::<f64, _>(rand_distr::StandardNormal))
                            .collect()
                    }
                };
                let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
                let var = Var::from_tensor(&t)?;
                let out = var.as_tensor().clone();
                vars.insert(full, var);
                Ok(out)
            }
        }
    }

    /// Trainable variables (empty for frozen stores), sorted by name.
    pub fn vars(&self) -> Vec<Var> {
        match self.store.as_ref() {
            Store::Trainable { vars, .. } => vars.lock().expect("poisoned").values().cloned().collect(),
            Store::Frozen(_) => Vec::new(),
        }
    }

    /// Trainable variables whose full name does not end in any of `exclude`.
    pub fn vars_except(&self, exclude: &[&str]) -> Vec<Var> {
        match self.store.as_ref() {
            Store::Trainable { vars, .. } => vars
                .lock()
                .expect("poisoned")
                .iter()
                .filter(|(k, _)| !exclude.iter().any(|e| k.ends_with(e)))
                .map(|(_, v)| v.clone())
                .collect(),
            Store::Frozen(_) => Vec::new(),
        }
    }

    /// Snapshot of every parameter, copied so later optimizer updates do not alias it.
    pub fn snapshot(&self) -> HashMap<String, Tensor> {
        match self.store.as_ref() {
            Store::Trainable { vars, .. } => vars
                .lock()
                .expect("poisoned")
                .iter()
                .map(|(k, v)| v.as_tensor().detach().copy().map(|t| (k.clone(), t)))
                .collect::<candle_core::Result<_>>()
                .expect("tensor copy failed"),
            Store::Frozen(map) => map.clone(),
        }
    }

    /// Overwrites trainable variables from a snapshot (e.g. to resume training).
    pub fn load_into(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        if let Store::Trainable { vars, .. } = self.store.as_ref() {
            let vars = vars.lock().expect("poisoned");
            for (name, var) in vars.iter() {
                if let Some(t) = tensors.get(name) {
                    var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?.copy()?)?;
                }
            }
        }
        Ok(())
    }
}

/// Order-independent checksum of a parameter snapshot, used to prove weights stay frozen.
pub fn checksum(tensors: &HashMap<String, Tensor>) -> Result<u64> {
    let mut names: Vec<_> = tensors.keys().collect();
    names.sort();
    let mut h = Sha256::new();
    for name in names {
        h.update(name.as_bytes());
        for v in tensors[name].flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    Ok(u64::from_le_bytes(h.finalize()[..8].try_into().expect("digest has 32 bytes")))
}

/// Square convolution lowered to im2col + matmul.
#[derive(Debug, Clone)]
pub struct Conv {
    weight: Tensor,
    bias: Tensor,
    window: Window,
}

impl Conv {
    pub fn new(p: &Params, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Result<Self> {
        Self::with_init(p, in_ch, out_ch, kernel, stride, Init::Kaiming)
    }

    /// All-zero weights and bias (ControlNet-style "zero convolution").
    pub fn zeros(p: &Params, in_ch: usize, out_ch: usize, kernel: usize) -> Result<Self> {
        Self::with_init(p, in_ch, out_ch, kernel, 1, Init::Zeros)
    }

    fn with_init(p: &Params, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, init: Init) -> Result<Self> {
        let weight = p.get((out_ch, in_ch * kernel * kernel), "weight", init)?;
        let bias = p.get(out_ch, "bias", Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            window: Window::new(kernel, stride, kernel / 2),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv2d(x, &self.weight, Some(&self.bias), self.window)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(p: &Params, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: p.get((out_dim, in_dim), "weight", Init::Kaiming)?,
            bias: p.get(out_dim, "bias", Init::Zeros)?,
        })
    }

    /// `(B, in)` -> `(B, out)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    inner: candle_nn::GroupNorm,
}

impl GroupNorm {
    pub fn new(p: &Params, groups: usize, channels: usize) -> Result<Self> {
        let groups = gcd(groups, channels);
        let weight = p.get(channels, "weight", Init::Ones)?;
        let bias = p.get(channels, "bias", Init::Zeros)?;
        Ok(Self {
            inner: candle_nn::GroupNorm::new(weight, bias, channels, groups, 1e-5)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(candle_core::Module::forward(&self.inner, x)?)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::silu(x)?)
}

/// Sinusoidal features of integer timesteps: `(len(ts), dim)`.
pub fn timestep_features(ts: &[usize], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).cos());
        }
    }
    Ok(Tensor::from_vec(data, (ts.len(), 2 * half), device)?.to_dtype(dtype)?)
}

/// Sinusoidal features followed by a two-layer projection.
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    dim: usize,
    fc1: Linear,
    fc2: Linear,
}

impl TimeEmbedding {
    pub fn new(p: &Params, dim: usize, out: usize) -> Result<Self> {
        Ok(Self {
            dim,
            fc1: Linear::new(&p.pp("fc1"), dim, out)?,
            fc2: Linear::new(&p.pp("fc2"), out, out)?,
        })
    }

    pub fn forward(&self, ts: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let f = timestep_features(ts, self.dim, dtype, device)?;
        self.fc2.forward(&silu(&self.fc1.forward(&f)?)?)
    }
}

/// GroupNorm-SiLU-Conv residual block with an additive timestep bias.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv,
    time: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    pub fn new(p: &Params, in_ch: usize, out_ch: usize, time_dim: Option<usize>, groups: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&p.pp("norm1"), groups, in_ch)?,
            conv1: Conv::new(&p.pp("conv1"), in_ch, out_ch, 3, 1)?,
            time: time_dim.map(|d| Linear::new(&p.pp("time"), d, out_ch)).transpose()?,
            norm2: GroupNorm::new(&p.pp("norm2"), groups, out_ch)?,
            conv2: Conv::new(&p.pp("conv2"), out_ch, out_ch, 3, 1)?,
            skip: if in_ch != out_ch {
                Some(Conv::new(&p.pp("skip"), in_ch, out_ch, 1, 1)?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, x: &Tensor, temb: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.conv1.forward(&silu(&self.norm1.forward(x)?)?)?;
        if let (Some(time), Some(temb)) = (&self.time, temb) {
            let bias = time.forward(&silu(temb)?)?;
            let (b, c) = bias.dims2()?;
            h = h.broadcast_add(&bias.reshape((b, c, 1, 1))?)?;
        }
        let h = self.conv2.forward(&silu(&self.norm2.forward(&h)?)?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

/// Single-head spatial self-attention with a residual connection.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    norm: GroupNorm,
    qkv: Conv,
    proj: Conv,
}

impl SelfAttention {
    pub fn new(p: &Params, channels: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&p.pp("norm"), groups, channels)?,
            qkv: Conv::new(&p.pp("qkv"), channels, 3 * channels, 1, 1)?,
            proj: Conv::new(&p.pp("proj"), channels, channels, 1, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let qkv = self.qkv.forward(&self.norm.forward(x)?)?.reshape((b, 3 * c, h * w))?;
        let q = qkv.narrow(1, 0, c)?.transpose(1, 2)?.contiguous()?;
        let k = qkv.narrow(1, c, c)?.contiguous()?;
        let v = qkv.narrow(1, 2 * c, c)?.contiguous()?;
        let attn = ops::softmax_last(&(q.matmul(&k)? / (c as f64).sqrt())?)?;
        // (b, c, hw) x (b, hw, hw)^T
        let out = v.matmul(&attn.transpose(1, 2)?.contiguous()?)?.reshape((b, c, h, w))?;
        Ok((x + self.proj.forward(&out)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trainable_init_is_seeded() {
        let dev = Device::Cpu;
        let a = Params::trainable(7, DType::F32, &dev);
        let b = Params::trainable(7, DType::F32, &dev);
        let ta = a.pp("x").get((3, 4), "w", Init::Kaiming).unwrap();
        let tb = b.pp("x").get((3, 4), "w", Init::Kaiming).unwrap();
        assert_eq!(
            ta.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            tb.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        assert_eq!(checksum(&a.snapshot()).unwrap(), checksum(&b.snapshot()).unwrap());
    }

    #[test]
    fn frozen_rejects_missing_and_misshapen() {
        let dev = Device::Cpu;
        let mut map = HashMap::new();
        map.insert("a.w".to_string(), Tensor::zeros((2, 2), DType::F32, &dev).unwrap());
        let p = Params::frozen(&map, DType::F64, &dev).unwrap();
        assert!(p.pp("a").get((2, 2), "w", Init::Zeros).is_ok());
        assert!(matches!(p.pp("a").get((3, 2), "w", Init::Zeros), Err(Error::Shape(_))));
        assert!(matches!(p.get(2, "b", Init::Zeros), Err(Error::Dependency(_))));
        assert!(p.vars().is_empty());
    }

    #[test]
    fn attention_and_resblock_preserve_shape() {
        let dev = Device::Cpu;
        let p = Params::trainable(0, DType::F32, &dev);
        let x = Tensor::randn(0f32, 1.0, (2, 16, 4, 4), &dev).unwrap();
        let att = SelfAttention::new(&p.pp("att"), 16, 8).unwrap();
        assert_eq!(att.forward(&x).unwrap().dims(), &[2, 16, 4, 4]);
        let temb = Tensor::randn(0f32, 1.0, (2, 8), &dev).unwrap();
        let rb = ResBlock::new(&p.pp("rb"), 16, 8, Some(8), 4).unwrap();
        assert_eq!(rb.forward(&x, Some(&temb)).unwrap().dims(), &[2, 8, 4, 4]);
    }
}
