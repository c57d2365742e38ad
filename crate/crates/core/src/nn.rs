//! Parameter storage and the handful of layers the models are built from.
//!
//! Initialization draws from a seeded ChaCha stream so that two runs with the
//! same seed start from bit-identical weights.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone)]
struct Entry {
    var: Var,
    trainable: bool,
}

/// Named collection of variables, ordered by name.
#[derive(Clone, Default)]
pub struct ParamStore {
    entries: Arc<Mutex<BTreeMap<String, Entry>>>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("len", &self.entries.lock().unwrap().len())
            .finish()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&self, name: String, var: Var, trainable: bool) -> Result<()> {
        let mut entries = self.entries.lock().unwrap();
        if entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        entries.insert(name, Entry { var, trainable });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable variables in name order.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.entries
            .lock()
            .unwrap()
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(n, e)| (n.clone(), e.var.clone()))
            .collect()
    }

    /// Every variable (trainable and buffers) in name order.
    pub fn all(&self) -> Vec<(String, Var)> {
        self.entries
            .lock()
            .unwrap()
            .iter()
            .map(|(n, e)| (n.clone(), e.var.clone()))
            .collect()
    }

    /// Trainable variables whose name starts with `prefix`.
    pub fn trainable_with_prefix(&self, prefix: &str) -> Vec<(String, Var)> {
        self.trainable()
            .into_iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.entries.lock().unwrap().get(name).map(|e| e.var.clone())
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// SHA-256 over names and raw little-endian values of every variable.
    pub fn fingerprint(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in self.all() {
            hasher.update(name.as_bytes());
            let flat = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?;
            for v in flat.to_vec1::<f64>()? {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(format!("{:x}", hasher.finalize()))
    }

    /// Snapshot of all variables as plain tensors.
    pub fn snapshot(&self, prefix: &str) -> Result<HashMap<String, Tensor>> {
        self.all()
            .into_iter()
            .map(|(n, v)| Ok((format!("{prefix}{n}"), v.as_tensor().detach().copy()?)))
            .collect()
    }

    /// Overwrites every variable from `tensors[prefix + name]`.
    pub fn load(&self, tensors: &HashMap<String, Tensor>, prefix: &str) -> Result<()> {
        for (name, var) in self.all() {
            let key = format!("{prefix}{name}");
            let src = tensors
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
            if src.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{key}` has shape {:?}, expected {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(var.dtype())?.to_device(var.device())?)?;
        }
        Ok(())
    }
}

/// Initialization scheme for a new variable.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Const(f64),
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    /// Zero-mean Gaussian with the given standard deviation.
    Normal(f64),
}

/// Creates variables inside a [`ParamStore`] under a dotted name prefix.
#[derive(Clone)]
pub struct ParamBuilder {
    store: ParamStore,
    prefix: String,
    dtype: DType,
    device: Device,
    rng: Rc<RefCell<ChaCha8Rng>>,
}

impl ParamBuilder {
    pub fn new(store: &ParamStore, dtype: DType, device: &Device, seed: u64) -> Self {
        Self {
            store: store.clone(),
            prefix: String::new(),
            dtype,
            device: device.clone(),
            rng: Rc::new(RefCell::new(ChaCha8Rng::seed_from_u64(seed))),
        }
    }

    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let mut next = self.clone();
        next.prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        next
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
            format!("{}.{}", self.prefix, name)
        }
    }

    fn make(&self, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::Uniform(b) => {
                let mut rng = self.rng.borrow_mut();
                (0..n).map(|_| rng.random_range(-b..=b)).collect()
            }
            Init::Normal(std) => {
                let mut rng = self.rng.borrow_mut();
                (0..n)
                    .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            }
        };
        Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    /// New trainable variable.
    pub fn get(&self, shape: &[usize], name: &str, init: Init) -> Result<Tensor> {
        let var = Var::from_tensor(&self.make(shape, init)?)?;
        let t = var.as_tensor().clone();
        self.store.insert(self.full_name(name), var, true)?;
        Ok(t)
    }

    /// New trainable variable with explicit initial values.
    pub fn get_with_value(&self, name: &str, value: &Tensor) -> Result<Tensor> {
        let var = Var::from_tensor(&value.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        let t = var.as_tensor().clone();
        self.store.insert(self.full_name(name), var, true)?;
        Ok(t)
    }

    /// New non-trainable state variable (e.g. running statistics).
    pub fn buffer(&self, shape: &[usize], name: &str, init: Init) -> Result<Var> {
        let var = Var::from_tensor(&self.make(shape, init)?)?;
        self.store.insert(self.full_name(name), var.clone(), false)?;
        Ok(var)
    }
}

/// How parameters enter the autograd graph during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParamMode {
    #[default]
    Tracked,
    /// Parameters act as constants: gradients still flow through the
    /// activations but never reach the weights.
    Frozen,
}

impl ParamMode {
    fn apply(self, t: &Tensor) -> Tensor {
        match self {
            ParamMode::Tracked => t.clone(),
            ParamMode::Frozen => t.detach(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    /// Uniform fan-in initialization.
    pub fn new(pb: &ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self::with_init(pb, in_dim, out_dim, Init::Uniform(bound), Init::Uniform(bound))
    }

    pub fn zeros(pb: &ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::with_init(pb, in_dim, out_dim, Init::Const(0.0), Init::Const(0.0))
    }

    pub fn with_init(
        pb: &ParamBuilder,
        in_dim: usize,
        out_dim: usize,
        weight: Init,
        bias: Init,
    ) -> Result<Self> {
        Ok(Self {
            weight: pb.get(&[out_dim, in_dim], "weight", weight)?,
            bias: Some(pb.get(&[out_dim], "bias", bias)?),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor, mode: ParamMode) -> Result<Tensor> {
        let w = mode.apply(&self.weight);
        let y = x.matmul(&w.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&mode.apply(b))?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvOpts {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
}

impl ConvOpts {
    pub fn pointwise() -> Self {
        Self {
            kernel: 1,
            stride: 1,
            padding: 0,
            bias: true,
        }
    }

    pub fn same3x3() -> Self {
        Self {
            kernel: 3,
            stride: 1,
            padding: 1,
            bias: true,
        }
    }
}

impl Conv2d {
    /// Uniform fan-in initialization.
    pub fn new(pb: &ParamBuilder, in_ch: usize, out_ch: usize, opts: ConvOpts) -> Result<Self> {
        let bound = 1.0 / ((in_ch * opts.kernel * opts.kernel) as f64).sqrt();
        Self::with_init(pb, in_ch, out_ch, opts, Init::Uniform(bound), Init::Uniform(bound))
    }

    /// He-normal (fan-out) weights, as used for residual trunks.
    pub fn kaiming(pb: &ParamBuilder, in_ch: usize, out_ch: usize, opts: ConvOpts) -> Result<Self> {
        let std = (2.0 / (out_ch * opts.kernel * opts.kernel) as f64).sqrt();
        Self::with_init(pb, in_ch, out_ch, opts, Init::Normal(std), Init::Const(0.0))
    }

    pub fn with_init(
        pb: &ParamBuilder,
        in_ch: usize,
        out_ch: usize,
        opts: ConvOpts,
        weight: Init,
        bias: Init,
    ) -> Result<Self> {
        let k = opts.kernel;
        Ok(Self {
            weight: pb.get(&[out_ch, in_ch, k, k], "weight", weight)?,
            bias: if opts.bias {
                Some(pb.get(&[out_ch], "bias", bias)?)
            } else {
                None
            },
            stride: opts.stride,
            padding: opts.padding,
        })
    }

    /// Wraps existing weight `(out, in, k, k)` and optional bias tensors.
    pub fn from_parts(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Self {
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn forward(&self, x: &Tensor, mode: ParamMode) -> Result<Tensor> {
        let w = mode.apply(&self.weight);
        let (_, _, kh, kw) = w.dims4()?;
        let y = if kh == 1 && kw == 1 && self.stride == 1 && self.padding == 0 {
            pointwise(x, &w)?
        } else {
            x.conv2d(&w, self.padding, self.stride, 1, 1)?
        };
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&mode.apply(b).reshape((1, (), 1, 1))?)?,
            None => y,
        })
    }
}

/// 1×1 convolution as a channel matmul.
fn pointwise(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (n, c, h, wd) = x.dims4()?;
    let out = w.dim(0)?;
    let w2 = w.reshape((out, c))?;
    let flat = x.reshape((n, c, h * wd))?;
    let y = w2.broadcast_left(n)?.contiguous()?.matmul(&flat)?;
    Ok(y.reshape((n, out, h, wd))?)
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(pb: &ParamBuilder, groups: usize, channels: usize) -> Result<Self> {
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(Error::param(
                "groups",
                format!("{groups} groups do not divide {channels} channels"),
            ));
        }
        Ok(Self {
            weight: pb.get(&[channels], "weight", Init::Const(1.0))?,
            bias: pb.get(&[channels], "bias", Init::Const(0.0))?,
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: ParamMode) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let g = x.reshape((n, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .reshape((n, c, h, w))?;
        let scale = mode.apply(&self.weight).reshape((1, c, 1, 1))?;
        let shift = mode.apply(&self.bias).reshape((1, c, 1, 1))?;
        Ok(normed.broadcast_mul(&scale)?.broadcast_add(&shift)?)
    }
}

/// Largest of 8, 4, 2, 1 that divides `channels`.
pub fn default_groups(channels: usize) -> usize {
    [8, 4, 2, 1]
        .into_iter()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(pb: &ParamBuilder, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.get(&[channels], "weight", Init::Const(1.0))?,
            bias: pb.get(&[channels], "bias", Init::Const(0.0))?,
            running_mean: pb.buffer(&[channels], "running_mean", Init::Const(0.0))?,
            running_var: pb.buffer(&[channels], "running_var", Init::Const(1.0))?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    /// Batch statistics when `train`, running statistics otherwise.
    /// Training mode also updates the running statistics.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let (mean, var) = if train {
            let flat = x.transpose(0, 1)?.reshape((c, n * h * w))?;
            let mean = flat.mean_keepdim(1)?;
            let centered = flat.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(1)?;
            let count = (n * h * w) as f64;
            let unbiased = if count > 1.0 {
                (var.detach() * (count / (count - 1.0)))?
            } else {
                var.detach()
            };
            let m = self.momentum;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))?
                + (mean.detach().flatten_all()? * m)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - m))?
                + (unbiased.flatten_all()? * m)?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean.reshape((1, c, 1, 1))?, var.reshape((1, c, 1, 1))?)
        } else {
            (
                self.running_mean.as_tensor().detach().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().detach().reshape((1, c, 1, 1))?,
            )
        };
        let normed = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

/// Row-wise softmax cross entropy against integer labels, averaged over the batch.
pub fn cross_entropy(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let log_p = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let picked = log_p.gather(&labels.unsqueeze(1)?, 1)?;
    Ok(picked.mean_all()?.neg()?)
}
