//! Parameter store with block-kind groups, and the layers the networks are
//! assembled from. Feature maps are channels-last `(B, H, W, C)` throughout.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{param_err, shape_err, Result};
use crate::tensor::normal_tensor;

/// Block kind a parameter belongs to. The tags partition the parameter set,
/// which is what freezing and checkpointing operate on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Conv,
    SpatialAttention,
    TextCrossAttention,
    TimeEmbedding,
    TemporalMusic,
    TemporalBeat,
    TemporalMotion,
    ReferenceNet,
    MaskEncoder,
    TextEncoder,
    MusicEncoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 11] = [
        ParamGroup::Conv,
        ParamGroup::SpatialAttention,
        ParamGroup::TextCrossAttention,
        ParamGroup::TimeEmbedding,
        ParamGroup::TemporalMusic,
        ParamGroup::TemporalBeat,
        ParamGroup::TemporalMotion,
        ParamGroup::ReferenceNet,
        ParamGroup::MaskEncoder,
        ParamGroup::TextEncoder,
        ParamGroup::MusicEncoder,
    ];

    /// Groups that are trained in the appearance stage and frozen afterwards.
    pub const APPEARANCE: [ParamGroup; 7] = [
        ParamGroup::Conv,
        ParamGroup::SpatialAttention,
        ParamGroup::TextCrossAttention,
        ParamGroup::TimeEmbedding,
        ParamGroup::ReferenceNet,
        ParamGroup::MaskEncoder,
        ParamGroup::TextEncoder,
    ];

    /// Groups that only exist once the temporal modules are attached.
    pub const TEMPORAL: [ParamGroup; 4] = [
        ParamGroup::TemporalMusic,
        ParamGroup::TemporalBeat,
        ParamGroup::TemporalMotion,
        ParamGroup::MusicEncoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Conv => "conv",
            ParamGroup::SpatialAttention => "spatial_attention",
            ParamGroup::TextCrossAttention => "text_cross_attention",
            ParamGroup::TimeEmbedding => "time_embedding",
            ParamGroup::TemporalMusic => "temporal_music",
            ParamGroup::TemporalBeat => "temporal_beat",
            ParamGroup::TemporalMotion => "temporal_motion",
            ParamGroup::ReferenceNet => "reference_net",
            ParamGroup::MaskEncoder => "mask_encoder",
            ParamGroup::TextEncoder => "text_encoder",
            ParamGroup::MusicEncoder => "music_encoder",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == name)
    }

    pub fn is_temporal(self) -> bool {
        Self::TEMPORAL.contains(&self)
    }
}

impl std::fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Normal with standard deviation `1/sqrt(fan_in)`.
    FanIn(usize),
}

/// Handle to one trainable tensor. Clones share storage with the store.
#[derive(Debug, Clone)]
pub struct Param {
    name: Arc<str>,
    group: ParamGroup,
    var: Var,
    frozen: Arc<AtomicBool>,
}

impl Param {
    /// The tensor to use in a forward pass. Frozen parameters are detached so
    /// backpropagation neither tracks nor computes gradients for them.
    pub fn t(&self) -> Tensor {
        if self.frozen.load(Ordering::Relaxed) {
            self.var.as_tensor().detach()
        } else {
            self.var.as_tensor().clone()
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn group(&self) -> ParamGroup {
        self.group
    }

    pub fn var(&self) -> &Var {
        &self.var
    }

    pub fn elem_count(&self) -> usize {
        self.var.elem_count()
    }
}

#[derive(Debug)]
pub struct ParamStore {
    dtype: DType,
    seed: u64,
    params: BTreeMap<String, Param>,
    frozen: BTreeMap<ParamGroup, Arc<AtomicBool>>,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        let frozen = ParamGroup::ALL
            .into_iter()
            .map(|g| (g, Arc::new(AtomicBool::new(false))))
            .collect();
        Self {
            dtype,
            seed,
            params: BTreeMap::new(),
            frozen,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn root(&mut self, group: ParamGroup) -> Builder<'_> {
        Builder {
            store: self,
            prefix: String::new(),
            group,
        }
    }

    fn create(&mut self, name: String, group: ParamGroup, shape: &[usize], init: Init) -> Result<Param> {
        if self.params.contains_key(&name) {
            return Err(param_err!("duplicate parameter name {name}"));
        }
        // Each parameter draws from its own stream keyed by name, so adding
        // modules never perturbs the initialisation of existing ones.
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(&name));
        let dev = Device::Cpu;
        let t = match init {
            Init::Zeros => Tensor::zeros(shape, self.dtype, &dev)?,
            Init::Ones => Tensor::ones(shape, self.dtype, &dev)?,
            Init::Normal(std) => (normal_tensor(shape, self.dtype, &dev, &mut rng)? * std)?,
            Init::FanIn(fan_in) => {
                let std = 1.0 / (fan_in.max(1) as f64).sqrt();
                (normal_tensor(shape, self.dtype, &dev, &mut rng)? * std)?
            }
        };
        let p = Param {
            name: name.clone().into(),
            group,
            var: Var::from_tensor(&t)?,
            frozen: self.frozen[&group].clone(),
        };
        self.params.insert(name, p.clone());
        Ok(p)
    }

    pub fn set_frozen(&self, group: ParamGroup, frozen: bool) {
        self.frozen[&group].store(frozen, Ordering::Relaxed);
    }

    pub fn is_frozen(&self, group: ParamGroup) -> bool {
        self.frozen[&group].load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.values()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    /// Groups that own at least one parameter.
    pub fn groups(&self) -> BTreeSet<ParamGroup> {
        self.params.values().map(|p| p.group).collect()
    }

    /// Parameters of `group` in name order.
    pub fn group_params(&self, group: ParamGroup) -> Vec<&Param> {
        self.params.values().filter(|p| p.group == group).collect()
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.params
            .values()
            .filter(|p| !self.is_frozen(p.group))
            .map(|p| p.var.clone())
            .collect()
    }

    /// All parameters of a group flattened in name order.
    pub fn group_flat(&self, group: ParamGroup) -> Result<Vec<f32>> {
        let mut out = Vec::new();
        for p in self.group_params(group) {
            out.extend(crate::tensor::to_f32_vec(p.var.as_tensor())?);
        }
        Ok(out)
    }

    pub fn load_group_flat(&self, group: ParamGroup, data: &[f32]) -> Result<()> {
        let params = self.group_params(group);
        let expected: usize = params.iter().map(|p| p.elem_count()).sum();
        if expected != data.len() {
            return Err(shape_err!(
                "group {group} expects {expected} values, got {}",
                data.len()
            ));
        }
        let mut offset = 0;
        for p in params {
            let n = p.elem_count();
            let t = Tensor::from_slice(&data[offset..offset + n], p.var.shape(), &Device::Cpu)?
                .to_dtype(self.dtype)?;
            p.var.set(&t)?;
            offset += n;
        }
        Ok(())
    }

    /// SHA-256 over the native-precision bytes of a group, in name order.
    pub fn group_hash(&self, group: ParamGroup) -> Result<String> {
        let mut h = Sha256::new();
        for p in self.group_params(group) {
            h.update(p.name.as_bytes());
            let flat = p.var.as_tensor().flatten_all()?;
            match self.dtype {
                DType::F64 => {
                    for v in flat.to_vec1::<f64>()? {
                        h.update(v.to_le_bytes());
                    }
                }
                _ => {
                    for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                        h.update(v.to_le_bytes());
                    }
                }
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Overwrites every parameter with seeded normal noise of the given scale.
    /// Used to move zero-initialised projections off their identity point.
    pub fn randomize(&self, seed: u64, std: f64) -> Result<()> {
        for p in self.params.values() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(&p.name));
            let t = (normal_tensor(p.var.dims(), self.dtype, &Device::Cpu, &mut rng)? * std)?;
            p.var.set(&t)?;
        }
        Ok(())
    }
}

fn name_hash(name: &str) -> u64 {
    let d = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Scoped parameter builder: names are dotted paths, the group is inherited.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    prefix: String,
    group: ParamGroup,
}

impl Builder<'_> {
    pub fn pp(&mut self, name: &str) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: self.store,
            prefix,
            group: self.group,
        }
    }

    pub fn group(&mut self, group: ParamGroup) -> Builder<'_> {
        Builder {
            store: self.store,
            prefix: self.prefix.clone(),
            group,
        }
    }

    pub fn current_group(&self) -> ParamGroup {
        self.group
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Param> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.create(full, self.group, shape, init)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    w: Param,
    b: Option<Param>,
}

impl Linear {
    pub fn new(b: &mut Builder, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            w: b.param("weight", &[d_in, d_out], Init::FanIn(d_in))?,
            b: Some(b.param("bias", &[d_out], Init::Zeros)?),
        })
    }

    pub fn no_bias(b: &mut Builder, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            w: b.param("weight", &[d_in, d_out], Init::FanIn(d_in))?,
            b: None,
        })
    }

    /// Zero weight and bias: the layer outputs exactly zero until trained.
    pub fn zeros(b: &mut Builder, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            w: b.param("weight", &[d_in, d_out], Init::Zeros)?,
            b: Some(b.param("bias", &[d_out], Init::Zeros)?),
        })
    }

    /// Applies the layer to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().ok_or_else(|| shape_err!("linear on a scalar"))?;
        let n = x.elem_count() / d_in.max(1);
        let w = self.w.t();
        let mut y = x.reshape((n, d_in))?.matmul(&w)?;
        if let Some(b) = &self.b {
            y = y.broadcast_add(&b.t())?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = w.dim(1)?;
        Ok(y.reshape(out_dims)?)
    }
}

/// 3×3 same-padding convolution on channels-last maps, lowered to one matmul
/// over the nine shifted copies of the input.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    w: Param,
    b: Param,
}

impl Conv3x3 {
    pub fn new(b: &mut Builder, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            w: b.param("weight", &[9 * c_in, c_out], Init::FanIn(9 * c_in))?,
            b: b.param("bias", &[c_out], Init::Zeros)?,
        })
    }

    pub fn zeros(b: &mut Builder, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            w: b.param("weight", &[9 * c_in, c_out], Init::Zeros)?,
            b: b.param("bias", &[c_out], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (bsz, h, w, c) = x.dims4()?;
        let xp = x.pad_with_zeros(1, 1, 1)?.pad_with_zeros(2, 1, 1)?;
        let mut cols = Vec::with_capacity(9);
        for dy in 0..3 {
            let row = xp.narrow(1, dy, h)?;
            for dx in 0..3 {
                cols.push(row.narrow(2, dx, w)?);
            }
        }
        let cols = Tensor::cat(&cols, 3)?.reshape((bsz * h * w, 9 * c))?;
        let y = cols.matmul(&self.w.t())?.broadcast_add(&self.b.t())?;
        Ok(y.reshape((bsz, h, w, ()))?)
    }
}

/// Rearranges non-overlapping `f×f` blocks into channels.
pub fn space_to_depth(x: &Tensor, f: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if h % f != 0 || w % f != 0 {
        return Err(shape_err!("{h}x{w} not divisible by {f}"));
    }
    Ok(x.reshape((b, h / f, f, w / f, f, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((b, h / f, w / f, f * f * c))?)
}

pub fn depth_to_space(x: &Tensor, f: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if c % (f * f) != 0 {
        return Err(shape_err!("{c} channels not divisible by {}", f * f));
    }
    let co = c / (f * f);
    Ok(x.reshape((b, h, w, f, f, co))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((b, h * f, w * f, co))?)
}

/// Stride-2 2×2 convolution expressed as space-to-depth plus a linear map.
#[derive(Debug, Clone)]
pub struct Downsample(Linear);

impl Downsample {
    pub fn new(b: &mut Builder, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self(Linear::new(b, 4 * c_in, c_out)?))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.0.forward(&space_to_depth(x, 2)?)
    }
}

/// Linear map to four sub-pixels followed by depth-to-space.
#[derive(Debug, Clone)]
pub struct Upsample(Linear);

impl Upsample {
    pub fn new(b: &mut Builder, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self(Linear::new(b, c_in, 4 * c_out)?))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        depth_to_space(&self.0.forward(x)?, 2)
    }
}

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: Param,
    beta: Param,
    groups: usize,
}

impl GroupNorm {
    pub fn new(b: &mut Builder, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(param_err!("{channels} channels not divisible into {groups} groups"));
        }
        Ok(Self {
            gamma: b.param("gamma", &[channels], Init::Ones)?,
            beta: b.param("beta", &[channels], Init::Zeros)?,
            groups,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let g = self.groups;
        let xg = x.reshape((b, h * w, g, c / g))?;
        let mean = xg.mean_keepdim((1, 3))?;
        let centered = xg.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim((1, 3))?;
        let xn = centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
        Ok(xn
            .reshape((b, h, w, c))?
            .broadcast_mul(&self.gamma.t())?
            .broadcast_add(&self.beta.t())?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Param,
    beta: Param,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.param("gamma", &[dim], Init::Ones)?,
            beta: b.param("beta", &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.gamma.t())?.broadcast_add(&self.beta.t())?)
    }
}

/// Softmax over the last dimension built from differentiable primitives.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Multi-head attention with separate query and key/value inputs.
#[derive(Debug, Clone)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    dim: usize,
}

impl Attention {
    /// `zero_out` zero-initialises the output projection so the block adds
    /// nothing to its residual stream until trained.
    pub fn new(b: &mut Builder, dim: usize, kv_dim: usize, heads: usize, zero_out: bool) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(param_err!("width {dim} not divisible by {heads} heads"));
        }
        Ok(Self {
            q: Linear::no_bias(&mut b.pp("to_q"), dim, dim)?,
            k: Linear::no_bias(&mut b.pp("to_k"), kv_dim, dim)?,
            v: Linear::no_bias(&mut b.pp("to_v"), kv_dim, dim)?,
            o: if zero_out {
                Linear::zeros(&mut b.pp("to_out"), dim, dim)?
            } else {
                Linear::new(&mut b.pp("to_out"), dim, dim)?
            },
            heads,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `q_in`: `(B, Nq, dim)`, `kv_in`: `(B, Nk, kv_dim)` or `(1, Nk, kv_dim)`
    /// shared by every query batch → `(B, Nq, dim)`.
    pub fn forward(&self, q_in: &Tensor, kv_in: &Tensor) -> Result<Tensor> {
        let (b, nq, _) = q_in.dims3()?;
        let (bk, nk, _) = kv_in.dims3()?;
        if b != bk && bk != 1 {
            return Err(shape_err!("attention batch {b} vs key batch {bk}"));
        }
        let h = self.heads;
        let dh = self.dim / h;
        let split = |t: Tensor, bb: usize, n: usize| -> Result<Tensor> {
            Ok(t.reshape((bb, n, h, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let scale = 1.0 / (dh as f64).sqrt();
        let q = split((self.q.forward(q_in)? * scale)?, b, nq)?;
        let k = split(self.k.forward(kv_in)?, bk, nk)?;
        let v = split(self.v.forward(kv_in)?, bk, nk)?;
        let scores = q.broadcast_matmul(&k.t()?.contiguous()?)?;
        let attn = softmax_last(&scores)?;
        let out = attn
            .broadcast_matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, nq, self.dim))?;
        self.o.forward(&out)
    }
}

/// Sinusoidal encoding of real positions, `[sin | cos]` halves.
pub fn sinusoidal(positions: &[f64], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = vec![0f64; positions.len() * dim];
    for (i, &p) in positions.iter().enumerate() {
        for j in 0..half {
            let freq = (-(10_000f64.ln()) * j as f64 / half as f64).exp();
            data[i * dim + j] = (p * freq).sin();
            data[i * dim + half + j] = (p * freq).cos();
        }
    }
    Ok(Tensor::from_vec(data, (positions.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}
