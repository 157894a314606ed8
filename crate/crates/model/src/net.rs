//! Encoder-decoder FCN with an optional PAR-driven attention gate.
//!
//! Input tensors carry five channels in `FEATURE_NAMES` order: d_vv, d_vh, vvvh,
//! slope and PAR. The attention net maps PAR to a mask in (0, 1) that multiplies
//! the three SAR channels; slope enters the FCN unmasked.

use std::path::Path;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ava_core::dataset::N_FEATURES;
use ava_nn::{he_uniform, Graph, Mode, ParamStore, Shape, Tensor, Var};

use crate::config::{FcnConfig, SAR_CHANNELS};
use crate::error::{ModelError, Result};

const SLOPE_CHANNEL: usize = 3;
const PAR_CHANNEL: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Base seed of the dropout masks (training mode only).
    pub dropout_seed: u64,
    /// Replace the attention mask by a constant, bypassing the attention net.
    pub mask_override: Option<f32>,
    /// Register trainable parameters as gradient-tracked leaves.
    pub track_grads: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            dropout_seed: 0,
            mask_override: None,
            track_grads: false,
        }
    }

    pub fn train(dropout_seed: u64) -> Self {
        Self {
            mode: Mode::Train,
            dropout_seed,
            mask_override: None,
            track_grads: true,
        }
    }
}

/// Handles into the graph produced by [`Model::forward`].
#[derive(Debug, Clone)]
pub struct Forward {
    /// `N x 1 x H x W` probabilities.
    pub prob: Var,
    /// The attention mask, when one was applied.
    pub mask: Option<Var>,
    /// The four-channel FCN input: gated SAR channels followed by slope.
    pub fcn_input: Var,
    /// Graph leaves of the trainable parameters, by name.
    pub params: Vec<(String, Var)>,
}

/// Batch-norm running statistics, keyed by layer prefix.
pub type RunningStats = IndexMap<String, (Tensor<f32>, Tensor<f32>)>;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: FcnConfig,
    params: ParamStore,
}

struct LayerInit<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    k: usize,
}

impl LayerInit<'_> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool) -> Result<()> {
        let w = he_uniform(Shape::new(cout, cin, k, k), cin * k * k, &mut self.rng);
        self.store.insert(format!("{name}.w"), w, true)?;
        if bias {
            self.store
                .insert(format!("{name}.b"), Tensor::zeros(Shape::new(1, cout, 1, 1)), true)?;
        }
        Ok(())
    }

    fn bn(&mut self, name: &str, c: usize) -> Result<()> {
        let s = Shape::new(1, c, 1, 1);
        self.store.insert(format!("{name}.gamma"), Tensor::full(s, 1.0), true)?;
        self.store.insert(format!("{name}.beta"), Tensor::zeros(s), true)?;
        self.store
            .insert(format!("{name}.running_mean"), Tensor::zeros(s), false)?;
        self.store
            .insert(format!("{name}.running_var"), Tensor::full(s, 1.0), false)?;
        Ok(())
    }

    fn double_conv(&mut self, prefix: &str, cin: usize, cout: usize) -> Result<()> {
        let k = self.k;
        self.conv(&format!("{prefix}.conv1"), cin, cout, k, false)?;
        self.bn(&format!("{prefix}.bn1"), cout)?;
        self.conv(&format!("{prefix}.conv2"), cout, cout, k, false)?;
        self.bn(&format!("{prefix}.bn2"), cout)
    }
}

fn bn_prefixes(params: &ParamStore) -> Vec<String> {
    params
        .iter()
        .filter_map(|(n, _)| n.strip_suffix(".running_mean").map(str::to_string))
        .collect()
}

impl Model {
    /// Builds a freshly initialized model. FCN and attention weights come from
    /// separate random streams, so the FCN weights do not depend on whether
    /// attention is enabled.
    pub fn build(config: FcnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = LayerInit {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
            k: config.kernel,
        };
        let widths = config.encoder_widths();
        let mut cin = config.in_channels;
        for (i, &w) in widths.iter().enumerate() {
            init.double_conv(&format!("enc{i}"), cin, w)?;
            cin = w;
        }
        let bott = config.bottleneck_width();
        init.double_conv("bottleneck", cin, bott)?;
        let mut below = bott;
        for (i, &w) in widths.iter().enumerate().rev() {
            init.double_conv(&format!("dec{i}"), below + w, w)?;
            below = w;
        }
        init.conv("head", widths[0], 1, 1, true)?;

        if config.attention.enabled {
            let h = config.attention.hidden_filters;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1);
            init.rng = rng;
            init.conv("att.conv1", 1, h, config.kernel, true)?;
            init.conv("att.conv2", h, h, config.kernel, true)?;
            init.conv("att.head", h, 1, 1, true)?;
        }
        Ok(Self { config, params })
    }

    /// Wraps existing parameters, checking names and shapes against `config`.
    pub fn from_params(config: FcnConfig, params: ParamStore) -> Result<Self> {
        let reference = Model::build(config, 0)?;
        if reference.params.len() != params.len() {
            return Err(ModelError::WeightMismatch(format!(
                "expected {} tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for ((rn, re), (n, e)) in reference.params.iter().zip(params.iter()) {
            if rn != n || re.tensor.shape() != e.tensor.shape() || re.trainable != e.trainable {
                return Err(ModelError::WeightMismatch(format!(
                    "expected {rn} {}, found {n} {}",
                    re.tensor.shape(),
                    e.tensor.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &FcnConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Output channel count of each encoder block.
    pub fn channel_progression(&self) -> Vec<usize> {
        (0..self.config.n_blocks)
            .map(|i| {
                self.params
                    .tensor(&format!("enc{i}.conv2.w"))
                    .map(|t| t.shape().n())
                    .unwrap_or(0)
            })
            .collect()
    }

    pub fn running_stats(&self) -> RunningStats {
        bn_prefixes(&self.params)
            .into_iter()
            .map(|p| {
                let m = self.params.tensor(&format!("{p}.running_mean")).unwrap().clone();
                let v = self.params.tensor(&format!("{p}.running_var")).unwrap().clone();
                (p, (m, v))
            })
            .collect()
    }

    pub fn set_running_stats(&mut self, stats: RunningStats) -> Result<()> {
        for (p, (m, v)) in stats {
            *self.params.tensor_mut(&format!("{p}.running_mean"))? = m;
            *self.params.tensor_mut(&format!("{p}.running_var"))? = v;
        }
        Ok(())
    }

    fn check_input(&self, input: &Tensor<f32>) -> Result<()> {
        let s = input.shape();
        let d = self.config.size_divisor();
        if s.c() != N_FEATURES {
            return Err(ModelError::Input(format!(
                "expected {N_FEATURES} input channels, got {s}"
            )));
        }
        if s.h() == 0 || s.w() == 0 || s.h() % d != 0 || s.w() % d != 0 {
            return Err(ModelError::Input(format!(
                "spatial extent of {s} must be a positive multiple of {d}"
            )));
        }
        Ok(())
    }

    /// Builds the forward graph. Batch-norm running statistics are read from and, in
    /// training mode, written to `running`.
    pub fn forward(
        &self,
        g: &mut Graph<f32>,
        input: Tensor<f32>,
        opts: &ForwardOptions,
        running: &mut RunningStats,
    ) -> Result<Forward> {
        self.check_input(&input)?;
        let mut b = Builder {
            g,
            model: self,
            opts,
            running,
            params: Vec::new(),
            dropout_idx: 0,
        };
        let x = b.g.input(input);
        let sar = b.g.slice_channels(x, 0, SAR_CHANNELS)?;
        let slope = b.g.slice_channels(x, SLOPE_CHANNEL, 1)?;

        let mask = match opts.mask_override {
            Some(v) => {
                let s = b.g.value(slope).shape();
                Some(b.g.input(Tensor::full(s, v)))
            }
            None if self.config.attention.enabled => {
                let par = b.g.slice_channels(x, PAR_CHANNEL, 1)?;
                Some(b.attention(par)?)
            }
            None => None,
        };
        let sar = match mask {
            Some(m) => b.g.mul_mask(sar, m)?,
            None => sar,
        };
        let fcn_input = b.g.concat_channels(sar, slope)?;
        let mut h = fcn_input;

        let n = self.config.n_blocks;
        let mut skips = Vec::with_capacity(n);
        for i in 0..n {
            h = b.double_conv(h, &format!("enc{i}"))?;
            skips.push(h);
            h = b.g.maxpool2x(h)?;
            h = b.dropout(h)?;
        }
        h = b.double_conv(h, "bottleneck")?;
        h = b.dropout(h)?;
        for i in (0..n).rev() {
            h = b.g.upsample2x(h)?;
            h = b.g.concat_channels(h, skips[i])?;
            h = b.double_conv(h, &format!("dec{i}"))?;
        }
        let logits = b.conv(h, "head", true)?;
        let prob = b.g.sigmoid(logits)?;
        Ok(Forward {
            prob,
            mask,
            fcn_input,
            params: b.params,
        })
    }

    /// Eval-mode probabilities for an `N x 5 x H x W` batch.
    pub fn predict(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.predict_with(input, None)
    }

    pub fn predict_with(&self, input: &Tensor<f32>, mask_override: Option<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let opts = ForwardOptions {
            mask_override,
            ..ForwardOptions::eval()
        };
        let mut running = self.running_stats();
        let f = self.forward(&mut g, input.clone(), &opts, &mut running)?;
        Ok(g.value(f.prob).clone())
    }

    /// Attention mask for an `N x 1 x H x W` PAR batch.
    pub fn attention_mask(&self, par: &Tensor<f32>) -> Result<Tensor<f32>> {
        if !self.config.attention.enabled {
            return Err(ModelError::Config("attention is disabled".into()));
        }
        if par.shape().c() != 1 {
            return Err(ModelError::Input(format!(
                "PAR batch must have 1 channel, got {}",
                par.shape()
            )));
        }
        let mut g = Graph::new();
        let opts = ForwardOptions::eval();
        let mut running = RunningStats::new();
        let mut b = Builder {
            g: &mut g,
            model: self,
            opts: &opts,
            running: &mut running,
            params: Vec::new(),
            dropout_idx: 0,
        };
        let x = b.g.input(par.clone());
        let m = b.attention(x)?;
        Ok(g.value(m).clone())
    }

    pub fn metadata(&self) -> serde_json::Value {
        serde_json::json!({ "model": self.config })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.params.save(path, Some(&self.metadata()))?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(self.params.to_bytes(Some(&self.metadata()))?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (params, meta) = ParamStore::from_bytes(bytes)?;
        Self::from_parts(params, meta)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (params, meta) = ParamStore::load(path)?;
        Self::from_parts(params, meta)
    }

    fn from_parts(params: ParamStore, meta: Option<serde_json::Value>) -> Result<Self> {
        let cfg = meta
            .and_then(|m| m.get("model").cloned())
            .ok_or_else(|| ModelError::WeightMismatch("weight file carries no model config".into()))?;
        let config: FcnConfig = serde_json::from_value(cfg)?;
        Self::from_params(config, params)
    }
}

struct Builder<'a> {
    g: &'a mut Graph<f32>,
    model: &'a Model,
    opts: &'a ForwardOptions,
    running: &'a mut RunningStats,
    params: Vec<(String, Var)>,
    dropout_idx: u64,
}

impl Builder<'_> {
    fn param(&mut self, name: String) -> Result<Var> {
        let e = self.model.params.get(&name)?;
        let t = e.tensor.clone();
        let v = if self.opts.track_grads && e.trainable {
            let v = self.g.param(t);
            self.params.push((name, v));
            v
        } else {
            self.g.input(t)
        };
        Ok(v)
    }

    fn conv(&mut self, x: Var, name: &str, bias: bool) -> Result<Var> {
        let w = self.param(format!("{name}.w"))?;
        let b = if bias {
            Some(self.param(format!("{name}.b"))?)
        } else {
            None
        };
        Ok(self.g.conv2d(x, w, b, 1, None)?)
    }

    fn conv_bn_relu(&mut self, x: Var, conv: &str, bn: &str) -> Result<Var> {
        let h = self.conv(x, conv, false)?;
        let gamma = self.param(format!("{bn}.gamma"))?;
        let beta = self.param(format!("{bn}.beta"))?;
        let (m, v) = self
            .running
            .get_mut(bn)
            .ok_or_else(|| ModelError::WeightMismatch(format!("missing running statistics for {bn}")))?;
        let h = self.g.batchnorm2d(h, gamma, beta, m, v, self.opts.mode)?;
        Ok(self.g.relu(h)?)
    }

    fn double_conv(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.conv_bn_relu(x, &format!("{prefix}.conv1"), &format!("{prefix}.bn1"))?;
        self.conv_bn_relu(h, &format!("{prefix}.conv2"), &format!("{prefix}.bn2"))
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        self.dropout_idx += 1;
        let seed = self
            .opts
            .dropout_seed
            .wrapping_add(self.dropout_idx.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        Ok(self.g.dropout(x, self.model.config.dropout, seed, self.opts.mode)?)
    }

    fn attention(&mut self, par: Var) -> Result<Var> {
        let h = self.conv(par, "att.conv1", true)?;
        let h = self.g.relu(h)?;
        let h = self.conv(h, "att.conv2", true)?;
        let h = self.g.relu(h)?;
        let h = self.conv(h, "att.head", true)?;
        Ok(self.g.sigmoid(h)?)
    }
}
