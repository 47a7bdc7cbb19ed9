//! The spectrogram U-Net: residual blocks with frequency-axis bottleneck
//! layers, channel-wise sub-bands and a multi-source output head.

mod checkpoint;
mod config;

use indexmap::IndexSet;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{Eager, Ops, Real, Tensor};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use config::{Activation, ModelConfig, Normalization};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model: invalid config: {0}")]
    InvalidConfig(String),
    #[error("model: shape mismatch: {0}")]
    Shape(String),
    #[error("model: checkpoint: {0}")]
    Checkpoint(String),
    #[error("model: i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    He(usize),
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

struct LayoutBuilder {
    specs: Vec<ParamSpec>,
    bf: usize,
}

impl LayoutBuilder {
    fn param(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.specs.push(ParamSpec { name, shape, init });
    }

    fn conv(&mut self, p: &str, co: usize, ci: usize, k: usize) {
        self.param(format!("{p}.weight"), vec![co, ci, k, k], Init::He(ci * k * k));
        self.param(format!("{p}.bias"), vec![co], Init::Zeros);
    }

    fn conv_transpose(&mut self, p: &str, ci: usize, co: usize) {
        self.param(format!("{p}.weight"), vec![ci, co, 2, 2], Init::He(ci));
        self.param(format!("{p}.bias"), vec![co], Init::Zeros);
    }

    fn norm(&mut self, p: &str, c: usize) {
        self.param(format!("{p}.weight"), vec![c], Init::Ones);
        self.param(format!("{p}.bias"), vec![c], Init::Zeros);
    }

    fn linear(&mut self, p: &str, fo: usize, fi: usize) {
        self.param(format!("{p}.weight"), vec![fo, fi], Init::He(fi));
        self.param(format!("{p}.bias"), vec![fo], Init::Zeros);
    }

    fn block(&mut self, p: &str, c: usize, f: usize) {
        let fb = f / self.bf;
        self.norm(&format!("{p}.norm1"), c);
        self.conv(&format!("{p}.conv1"), c, c, 3);
        self.norm(&format!("{p}.norm2"), c);
        self.linear(&format!("{p}.tdf.lin1"), fb, f);
        self.norm(&format!("{p}.tdf.norm"), c);
        self.linear(&format!("{p}.tdf.lin2"), f, fb);
        self.conv(&format!("{p}.conv2"), c, c, 3);
    }
}

/// Parameter names and shapes in their canonical order.
fn layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut l = LayoutBuilder {
        specs: Vec::new(),
        bf: cfg.tdf_bottleneck_factor,
    };
    let h = cfg.band_height();
    let n = cfg.n_scales;
    let bc = cfg.band_channels();
    l.conv("stem", cfg.width(0), bc, 1);
    for s in 0..n {
        for b in 0..cfg.blocks_per_scale {
            l.block(&format!("enc.{s}.block.{b}"), cfg.width(s), h >> s);
        }
        l.conv(&format!("enc.{s}.down"), cfg.width(s + 1), cfg.width(s), 2);
    }
    for b in 0..cfg.blocks_per_scale {
        l.block(&format!("bottleneck.block.{b}"), cfg.width(n), h >> n);
    }
    for s in (0..n).rev() {
        l.conv_transpose(&format!("dec.{s}.up"), cfg.width(s + 1), cfg.width(s));
        for b in 0..cfg.blocks_per_scale {
            l.block(&format!("dec.{s}.block.{b}"), cfg.width(s), h >> s);
        }
    }
    l.conv("head", cfg.sources.len() * bc, cfg.width(0) + bc, 1);
    l.specs
}

/// Named parameter tensors in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    names: IndexSet<String>,
    tensors: Vec<Tensor>,
}

impl ModelWeights {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Tensor)>) -> Result<Self, ModelError> {
        let mut names = IndexSet::new();
        let mut tensors = Vec::new();
        for (name, t) in pairs {
            if !names.insert(name.clone()) {
                return Err(ModelError::Shape(format!("duplicate parameter `{name}`")));
            }
            tensors.push(t);
        }
        Ok(Self { names, tensors })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.get_index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.get_index_of(name).map(|i| &mut self.tensors[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.get_index_of(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    weights: ModelWeights,
}

/// Builds a model with deterministic He-normal initialization.
pub fn build(config: &ModelConfig, seed: u64) -> Result<Model, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = layout(config).into_iter().map(|p| {
        let t = match p.init {
            Init::He(fan_in) => Tensor::randn(&p.shape, (2.0 / fan_in as f64).sqrt(), &mut rng),
            Init::Zeros => Tensor::zeros(&p.shape),
            Init::Ones => Tensor::full(&p.shape, 1.0),
        };
        (p.name, t)
    });
    Ok(Model {
        config: config.clone(),
        weights: ModelWeights::from_pairs(pairs)?,
    })
}

/// Exact number of scalar parameters of `config`, without allocating them.
pub fn param_count(config: &ModelConfig) -> Result<usize, ModelError> {
    config.validate()?;
    Ok(layout(config).iter().map(|p| p.shape.iter().product::<usize>()).sum())
}

impl Model {
    /// Pairs a config with existing weights, checking every name and shape.
    pub fn from_weights(config: ModelConfig, weights: ModelWeights) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != weights.len() {
            return Err(ModelError::Shape(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                weights.len()
            )));
        }
        for (spec, (name, t)) in expected.iter().zip(weights.iter()) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(ModelError::Shape(format!(
                    "parameter `{name}` {:?} does not match expected `{}` {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut ModelWeights {
        &mut self.weights
    }

    pub fn into_weights(self) -> ModelWeights {
        self.weights
    }

    pub fn param_count(&self) -> usize {
        self.weights.param_count()
    }

    /// `[planes, F, T] -> [S, planes, F, T]`.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor, ModelError> {
        let s = input.shape();
        if s.len() != 3 {
            return Err(ModelError::Shape(format!("expected [planes, F, T], got {s:?}")));
        }
        let batched = input.clone().reshape(&[1, s[0], s[1], s[2]]).expect("same count");
        let out = self.forward_batch(&batched)?;
        let o = out.shape()[1..].to_vec();
        Ok(out.reshape(&o).expect("same count"))
    }

    /// `[B, planes, F, T] -> [B, S, planes, F, T]`.
    pub fn forward_batch(&self, input: &Tensor) -> Result<Tensor, ModelError> {
        self.check_input(input.shape())?;
        Ok(self.forward_graph(&mut Eager, self.weights.tensors(), input))
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<(), ModelError> {
        let cfg = &self.config;
        match *shape {
            [b, p, f, t] if b > 0 && p == cfg.planes() && f == cfg.freq_bins && t > 0 => {
                if t % cfg.time_multiple() != 0 {
                    return Err(ModelError::Shape(format!(
                        "{t} frames not divisible by 2^n_scales = {}",
                        cfg.time_multiple()
                    )));
                }
                Ok(())
            }
            _ => Err(ModelError::Shape(format!(
                "expected [B, {}, {}, T], got {shape:?}",
                cfg.planes(),
                cfg.freq_bins
            ))),
        }
    }

    /// The network written once against [`Ops`]; `params` follow the order
    /// of [`Model::weights`]. Input shape must already be validated.
    pub fn forward_graph<T: Real, O: Ops<T>>(&self, ops: &mut O, params: &[O::V], x: &O::V) -> O::V {
        let cfg = &self.config;
        let p = |name: &str| -> &O::V {
            let i = self
                .weights
                .index_of(name)
                .unwrap_or_else(|| panic!("missing parameter `{name}`"));
            &params[i]
        };
        let conv = |ops: &mut O, x: &O::V, name: &str, stride: usize, pad: usize| {
            ops.conv2d(x, p(&format!("{name}.weight")), p(&format!("{name}.bias")), stride, pad)
        };
        let norm = |ops: &mut O, x: &O::V, name: &str| {
            ops.instance_norm(x, p(&format!("{name}.weight")), p(&format!("{name}.bias")), NORM_EPS)
        };
        let block = |ops: &mut O, x: &O::V, name: &str| {
            let h = norm(ops, x, &format!("{name}.norm1"));
            let h = ops.gelu(&h);
            let h = conv(ops, &h, &format!("{name}.conv1"), 1, 1);
            let h = norm(ops, &h, &format!("{name}.norm2"));
            let u = ops.gelu(&h);
            let t = ops.freq_linear(&u, p(&format!("{name}.tdf.lin1.weight")), p(&format!("{name}.tdf.lin1.bias")));
            let t = norm(ops, &t, &format!("{name}.tdf.norm"));
            let t = ops.gelu(&t);
            let t = ops.freq_linear(&t, p(&format!("{name}.tdf.lin2.weight")), p(&format!("{name}.tdf.lin2.bias")));
            let v = ops.add(&u, &t);
            let v = conv(ops, &v, &format!("{name}.conv2"), 1, 1);
            ops.add(x, &v)
        };

        let shape = ops.value(x).shape().to_vec();
        let (b, t) = (shape[0], shape[3]);
        let k = cfg.n_subbands;
        let bands = ops.reshape(x, &[b, cfg.band_channels(), cfg.band_height(), t]);
        let mut h = conv(ops, &bands, "stem", 1, 0);
        let mut skips = Vec::with_capacity(cfg.n_scales);
        for s in 0..cfg.n_scales {
            for i in 0..cfg.blocks_per_scale {
                h = block(ops, &h, &format!("enc.{s}.block.{i}"));
            }
            skips.push(h.clone());
            h = conv(ops, &h, &format!("enc.{s}.down"), 2, 0);
        }
        for i in 0..cfg.blocks_per_scale {
            h = block(ops, &h, &format!("bottleneck.block.{i}"));
        }
        for s in (0..cfg.n_scales).rev() {
            h = ops.conv_transpose2d(&h, p(&format!("dec.{s}.up.weight")), p(&format!("dec.{s}.up.bias")));
            h = ops.add(&h, &skips[s]);
            for i in 0..cfg.blocks_per_scale {
                h = block(ops, &h, &format!("dec.{s}.block.{i}"));
            }
        }
        drop(skips);
        let h = ops.concat_channels(&h, &bands);
        let out = conv(ops, &h, "head", 1, 0);
        // [b, S*planes*k, F/k, T] and [b, S, planes, F, T] share one memory layout
        debug_assert_eq!(ops.value(&out).shape()[1], cfg.sources.len() * cfg.planes() * k);
        ops.reshape(&out, &[b, cfg.sources.len(), cfg.planes(), cfg.freq_bins, t])
    }
}
