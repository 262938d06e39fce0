//! Toy decoder-only transformer with prefill and decode stages, a KV cache,
//! greedy sampling, and the plaintext ideal functionality used as the
//! protocol's correctness oracle.
//!
//! The forward pass is written once against [`Executor`], so the same layer
//! code runs client-side in plaintext, inside the MPC engine, and in the
//! ideal functionality. Sampling is greedy argmax with lowest-index
//! tie-breaking; generation is therefore deterministic given weights, prompt
//! and seed.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::approx::{ActivationKind, SoftmaxKind};
use crate::cost::Site;
use crate::error::{Error, Result};
use crate::ring::{FixedPointFormat, RingElement};
use crate::tensor::{
    activation, matmul, proj_forward, rmsnorm, softmax_rows, Executor, Operand, PlainExec,
    ProjOperand, Tensor, ValueOps,
};

/// Public causal-mask constant. Exact and TwoRelu softmax kill a masked
/// position with a score far below any toy-model logit (exp and ReLU both
/// map it to zero); TwoQuad squares its argument, so the mask must land the
/// shifted score exactly on zero instead.
pub fn mask_value(fmt: &FixedPointFormat, softmax: &SoftmaxKind) -> RingElement {
    match softmax {
        SoftmaxKind::TwoQuad { c } => fmt.encode_saturating(-c),
        _ => fmt.encode_saturating(-((1u64 << 20) as f64)),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[default]
    RmsNorm,
}

fn default_scale_bits() -> u32 {
    12
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub vocab: usize,
    pub max_seq: usize,
    #[serde(default)]
    pub activation: ActivationKind,
    #[serde(default)]
    pub softmax: SoftmaxKind,
    #[serde(default)]
    pub norm: NormKind,
    #[serde(default = "default_scale_bits")]
    pub scale_bits: u32,
}

impl ModelConfig {
    pub fn hidden(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn fmt(&self) -> Result<FixedPointFormat> {
        FixedPointFormat::new(self.scale_bits)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::InvalidConfig("num_layers must be >= 1".into()));
        }
        if self.num_heads == 0 || self.head_dim == 0 || self.ffn_dim == 0 {
            return Err(Error::InvalidConfig(
                "heads, head_dim and ffn_dim must be positive".into(),
            ));
        }
        if self.vocab < 2 {
            return Err(Error::InvalidConfig("vocab must be >= 2".into()));
        }
        if self.max_seq == 0 {
            return Err(Error::InvalidConfig("max_seq must be >= 1".into()));
        }
        self.fmt()?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_norm: Tensor,
    pub ffn_up: Tensor,
    pub ffn_down: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub output_head: Tensor,
}

impl Weights {
    pub fn param_count(&self) -> usize {
        let mut n = self.embedding.elem_count()
            + self.final_norm.elem_count()
            + self.output_head.elem_count();
        for l in &self.layers {
            n += l.attn_norm.elem_count()
                + l.wq.elem_count()
                + l.wk.elem_count()
                + l.wv.elem_count()
                + l.wo.elem_count()
                + l.ffn_norm.elem_count()
                + l.ffn_up.elem_count()
                + l.ffn_down.elem_count();
        }
        n
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let h = cfg.hidden();
        let check = |t: &Tensor, dims: &[usize], name: &str| -> Result<()> {
            if t.dims != dims {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: expected {dims:?}, got {:?}",
                    t.dims
                )));
            }
            Ok(())
        };
        check(&self.embedding, &[cfg.vocab, h], "embedding")?;
        if self.layers.len() != cfg.num_layers {
            return Err(Error::ShapeMismatch(format!(
                "expected {} layers, got {}",
                cfg.num_layers,
                self.layers.len()
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            check(&l.attn_norm, &[h], &format!("layers.{i}.attn_norm"))?;
            check(&l.wq, &[h, h], &format!("layers.{i}.wq"))?;
            check(&l.wk, &[h, h], &format!("layers.{i}.wk"))?;
            check(&l.wv, &[h, h], &format!("layers.{i}.wv"))?;
            check(&l.wo, &[h, h], &format!("layers.{i}.wo"))?;
            check(&l.ffn_norm, &[h], &format!("layers.{i}.ffn_norm"))?;
            check(&l.ffn_up, &[h, cfg.ffn_dim], &format!("layers.{i}.ffn_up"))?;
            check(&l.ffn_down, &[cfg.ffn_dim, h], &format!("layers.{i}.ffn_down"))?;
        }
        check(&self.final_norm, &[h], "final_norm")?;
        check(&self.output_head, &[h, cfg.vocab], "output_head")?;
        Ok(())
    }
}

/// LoRA-adapted projection sites within one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    Wq,
    Wk,
    Wv,
    Wo,
    FfnUp,
    FfnDown,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 6] = [
        LoraTarget::Wq,
        LoraTarget::Wk,
        LoraTarget::Wv,
        LoraTarget::Wo,
        LoraTarget::FfnUp,
        LoraTarget::FfnDown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LoraTarget::Wq => "wq",
            LoraTarget::Wk => "wk",
            LoraTarget::Wv => "wv",
            LoraTarget::Wo => "wo",
            LoraTarget::FfnUp => "ffn_up",
            LoraTarget::FfnDown => "ffn_down",
        }
    }
}

impl std::str::FromStr for LoraTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        LoraTarget::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown lora target `{s}`")))
    }
}

/// Adapter pairs (A: n x r, B: r x k) for one layer; always private.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerAdapters {
    pub per_target: BTreeMap<LoraTarget, (Tensor, Tensor)>,
}

/// A model ready for execution: architecture, weights, and per-layer LoRA
/// adapters (empty when the model is fully fine-tuned).
#[derive(Clone, Debug)]
pub struct PreparedModel {
    pub config: ModelConfig,
    pub weights: Weights,
    pub adapters: Vec<Option<LayerAdapters>>,
}

impl PreparedModel {
    pub fn new(config: ModelConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        weights.validate(&config)?;
        let adapters = vec![None; config.num_layers];
        Ok(PreparedModel {
            config,
            weights,
            adapters,
        })
    }

    /// Frozen-base mode: adapters carry all fine-tuned weights, so everything
    /// else (including private-layer bases, norms and the head) stays public.
    pub fn lora_mode(&self) -> bool {
        self.adapters.iter().any(Option::is_some)
    }
}

/// Uniform random toy weights; magnitudes keep activations well inside the
/// fixed-point range.
pub fn random_weights(cfg: &ModelConfig, seed: u64) -> Result<Weights> {
    let fmt = cfg.fmt()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut uniform = |dims: Vec<usize>, a: f64| -> Result<Tensor> {
        let n: usize = dims.iter().product();
        let vals: Vec<f64> = (0..n).map(|_| rng.gen_range(-a..a) as f32 as f64).collect();
        Tensor::encode(&fmt, dims, &vals)
    };
    let h = cfg.hidden();
    let wa = 1.0 / (h as f64).sqrt();
    let fa = 1.0 / (cfg.ffn_dim as f64).sqrt();
    let embedding = uniform(vec![cfg.vocab, h], 1.0)?;
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for _ in 0..cfg.num_layers {
        layers.push(LayerWeights {
            attn_norm: Tensor::encode(&fmt, vec![h], &vec![1.0; h])?,
            wq: uniform(vec![h, h], wa)?,
            wk: uniform(vec![h, h], wa)?,
            wv: uniform(vec![h, h], wa)?,
            wo: uniform(vec![h, h], wa)?,
            ffn_norm: Tensor::encode(&fmt, vec![h], &vec![1.0; h])?,
            ffn_up: uniform(vec![h, cfg.ffn_dim], wa)?,
            ffn_down: uniform(vec![cfg.ffn_dim, h], fa)?,
        });
    }
    Ok(Weights {
        embedding,
        layers,
        final_norm: Tensor::encode(&fmt, vec![h], &vec![1.0; h])?,
        output_head: uniform(vec![h, cfg.vocab], wa)?,
    })
}

/// Per-layer KV cache; length always equals tokens processed so far.
#[derive(Clone, Debug)]
pub struct LayerKv<V> {
    pub k: Option<V>,
    pub v: Option<V>,
}

#[derive(Clone, Debug)]
pub struct KvCache<V> {
    pub layers: Vec<LayerKv<V>>,
    pub position: usize,
}

impl<V> KvCache<V> {
    pub fn new(layers: usize) -> Self {
        KvCache {
            layers: (0..layers).map(|_| LayerKv { k: None, v: None }).collect(),
            position: 0,
        }
    }
}

/// One transformer layer bound to executor values.
pub struct BoundLayer<V> {
    pub attn_norm: Operand<V>,
    pub wq: ProjOperand<V>,
    pub wk: ProjOperand<V>,
    pub wv: ProjOperand<V>,
    pub wo: ProjOperand<V>,
    pub ffn_norm: Operand<V>,
    pub ffn_up: ProjOperand<V>,
    pub ffn_down: ProjOperand<V>,
}

/// Layers `[first_layer, N)` plus final norm and output head, bound to an
/// executor. `first_layer = 0` binds the whole model.
pub struct BoundSuffix<V> {
    pub first_layer: usize,
    pub layers: Vec<BoundLayer<V>>,
    pub final_norm: Operand<V>,
    pub output_head: Operand<V>,
}

/// Party index that contributes private weights (the server).
const WEIGHT_OWNER: usize = crate::engine::SERVER;

fn bind_operand<E: Executor>(exec: &mut E, t: &Tensor, private: bool) -> Operand<E::Value> {
    if private {
        Operand::Private(exec.input_from(WEIGHT_OWNER, t))
    } else {
        Operand::Public(t.clone())
    }
}

fn bind_proj<E: Executor>(
    exec: &mut E,
    base: &Tensor,
    base_private: bool,
    adapter: Option<&(Tensor, Tensor)>,
) -> ProjOperand<E::Value> {
    let adapter = adapter.map(|(a, b)| {
        (
            exec.input_from(WEIGHT_OWNER, a),
            exec.input_from(WEIGHT_OWNER, b),
        )
    });
    ProjOperand {
        base: bind_operand(exec, base, base_private),
        adapter,
    }
}

/// Bind a contiguous range of layers. `private` marks the weights as private
/// inputs of the server; the client's public prefix binds with
/// `private = false`.
pub fn bind_layers<E: Executor>(
    exec: &mut E,
    model: &PreparedModel,
    range: std::ops::Range<usize>,
    private: bool,
) -> Result<Vec<BoundLayer<E::Value>>> {
    if range.end > model.config.num_layers {
        return Err(Error::InvalidConfig(format!(
            "layer range {range:?} beyond {} layers",
            model.config.num_layers
        )));
    }
    let lora = model.lora_mode();
    let mut layers = Vec::new();
    for idx in range {
        let w = &model.weights.layers[idx];
        let ad = model.adapters[idx].as_ref();
        let base_private = private && !lora;
        let get = |t: LoraTarget| ad.and_then(|a| a.per_target.get(&t));
        layers.push(BoundLayer {
            attn_norm: bind_operand(exec, &w.attn_norm, base_private),
            wq: bind_proj(exec, &w.wq, base_private, get(LoraTarget::Wq)),
            wk: bind_proj(exec, &w.wk, base_private, get(LoraTarget::Wk)),
            wv: bind_proj(exec, &w.wv, base_private, get(LoraTarget::Wv)),
            wo: bind_proj(exec, &w.wo, base_private, get(LoraTarget::Wo)),
            ffn_norm: bind_operand(exec, &w.ffn_norm, base_private),
            ffn_up: bind_proj(exec, &w.ffn_up, base_private, get(LoraTarget::FfnUp)),
            ffn_down: bind_proj(exec, &w.ffn_down, base_private, get(LoraTarget::FfnDown)),
        });
    }
    Ok(layers)
}

/// Bind the private suffix (or the whole model) into an executor. In LoRA
/// mode only the adapters are private; otherwise every weight from
/// `first_layer` on, including the output head, is private.
pub fn bind_suffix<E: Executor>(
    exec: &mut E,
    model: &PreparedModel,
    first_layer: usize,
) -> Result<BoundSuffix<E::Value>> {
    if first_layer > model.config.num_layers {
        return Err(Error::InvalidConfig(format!(
            "first_layer {first_layer} beyond {} layers",
            model.config.num_layers
        )));
    }
    let lora = model.lora_mode();
    let layers = bind_layers(exec, model, first_layer..model.config.num_layers, true)?;
    Ok(BoundSuffix {
        first_layer,
        layers,
        final_norm: bind_operand(exec, &model.weights.final_norm, !lora),
        output_head: bind_operand(exec, &model.weights.output_head, !lora),
    })
}

fn causal_mask_positions(rows: usize, start_pos: usize, total_len: usize) -> Vec<usize> {
    let mut positions = Vec::new();
    for i in 0..rows {
        for j in (start_pos + i + 1)..total_len {
            positions.push(i * total_len + j);
        }
    }
    positions
}

fn attention<E: Executor>(
    exec: &mut E,
    cfg: &ModelConfig,
    layer: &BoundLayer<E::Value>,
    layer_idx: usize,
    x: &E::Value,
    start_pos: usize,
    kv: &mut LayerKv<E::Value>,
) -> Result<E::Value> {
    let fmt = exec.fmt();
    let rows = x.dims()[0];
    let d = cfg.head_dim;

    exec.set_site(Site::Norm);
    let xn = rmsnorm(exec, x, &layer.attn_norm)?;

    exec.set_site(Site::AttnProj);
    let q = proj_forward(exec, &xn, &layer.wq)?;
    let k = proj_forward(exec, &xn, &layer.wk)?;
    let v = proj_forward(exec, &xn, &layer.wv)?;

    kv.k = Some(match kv.k.take() {
        Some(prev) => exec.concat_rows(&prev, &k)?,
        None => k,
    });
    kv.v = Some(match kv.v.take() {
        Some(prev) => exec.concat_rows(&prev, &v)?,
        None => v,
    });
    let k_all = kv.k.as_ref().unwrap().clone();
    let v_all = kv.v.as_ref().unwrap().clone();
    let total_len = k_all.dims()[0];

    let scale = fmt.encode(1.0 / (d as f64).sqrt())?;
    let mask = causal_mask_positions(rows, start_pos, total_len);
    let mask_v = mask_value(&fmt, &cfg.softmax);

    let mut head_outs = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        exec.set_site(Site::AttnScores);
        let qh = q.slice_cols(h * d, (h + 1) * d);
        let kh = k_all.slice_cols(h * d, (h + 1) * d).transpose2d();
        let scores_raw = exec.matmul_private_raw(&qh, &kh)?;
        let scores = exec.truncate(&scores_raw);
        let scaled_raw = exec.scale_public_raw(&scores, scale);
        let mut scaled = exec.truncate(&scaled_raw);
        scaled.set_public_positions(&mask, mask_v);
        let probs = softmax_rows(exec, &scaled, &cfg.softmax)?;
        exec.record_attention(layer_idx, h, &probs);

        exec.set_site(Site::AttnContext);
        let vh = v_all.slice_cols(h * d, (h + 1) * d);
        let ctx_raw = exec.matmul_private_raw(&probs, &vh)?;
        head_outs.push(exec.truncate(&ctx_raw));
    }
    let refs: Vec<&E::Value> = head_outs.iter().collect();
    let ctx = exec.concat_cols(&refs)?;

    exec.set_site(Site::AttnProj);
    let out = proj_forward(exec, &ctx, &layer.wo)?;
    exec.record_attn_output(layer_idx, &out);
    exec.add(x, &out)
}

fn feed_forward<E: Executor>(
    exec: &mut E,
    cfg: &ModelConfig,
    layer: &BoundLayer<E::Value>,
    x: &E::Value,
) -> Result<E::Value> {
    exec.set_site(Site::Norm);
    let xn = rmsnorm(exec, x, &layer.ffn_norm)?;
    exec.set_site(Site::Ffn);
    let up = proj_forward(exec, &xn, &layer.ffn_up)?;
    let act = activation(exec, &up, &cfg.activation)?;
    let down = proj_forward(exec, &act, &layer.ffn_down)?;
    exec.add(x, &down)
}

/// Run `rows` new positions through a layer range, extending the cache.
/// `x` is [rows, hidden]. Returns the final hidden states [rows, hidden].
pub fn forward_layers<E: Executor>(
    exec: &mut E,
    cfg: &ModelConfig,
    layers: &[BoundLayer<E::Value>],
    first_layer: usize,
    x: E::Value,
    cache: &mut KvCache<E::Value>,
) -> Result<E::Value> {
    let rows = x.dims()[0];
    let start_pos = cache.position;
    if cache.layers.len() != layers.len() {
        return Err(Error::StateInconsistent(format!(
            "cache has {} layers, range has {}",
            cache.layers.len(),
            layers.len()
        )));
    }
    for kv in &cache.layers {
        let len = kv.k.as_ref().map(|k| k.dims()[0]).unwrap_or(0);
        if len != start_pos {
            return Err(Error::StateInconsistent(format!(
                "cache length {len} does not match position {start_pos}"
            )));
        }
    }
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        let layer_idx = first_layer + i;
        h = attention(exec, cfg, layer, layer_idx, &h, start_pos, &mut cache.layers[i])?;
        h = feed_forward(exec, cfg, layer, &h)?;
        exec.record_hidden(layer_idx, &h);
    }
    cache.position = start_pos + rows;
    Ok(h)
}

/// Run the bound suffix (layers plus nothing else; the head is applied by
/// [`next_token`]).
pub fn forward_suffix<E: Executor>(
    exec: &mut E,
    cfg: &ModelConfig,
    bound: &BoundSuffix<E::Value>,
    x: E::Value,
    cache: &mut KvCache<E::Value>,
) -> Result<E::Value> {
    forward_layers(exec, cfg, &bound.layers, bound.first_layer, x, cache)
}

/// Final norm + output head on the last row, then revealed greedy argmax.
pub fn next_token<E: Executor>(
    exec: &mut E,
    bound: &BoundSuffix<E::Value>,
    hidden: &E::Value,
) -> Result<u32> {
    let last = hidden.row(hidden.dims()[0] - 1);
    exec.set_site(Site::Head);
    let normed = rmsnorm(exec, &last, &bound.final_norm)?;
    let logits = matmul(exec, &normed, &bound.output_head)?;
    Ok(exec.reveal_argmax(&logits) as u32)
}

/// Validate tokens and gather embedding rows (plaintext lookup).
pub fn embed_tokens(cfg: &ModelConfig, weights: &Weights, tokens: &[u32]) -> Result<Tensor> {
    let h = cfg.hidden();
    let mut data = Vec::with_capacity(tokens.len() * h);
    for &t in tokens {
        if t as usize >= cfg.vocab {
            return Err(Error::TokenOutOfVocab {
                token: t,
                vocab: cfg.vocab,
            });
        }
        let row = &weights.embedding.data[t as usize * h..(t as usize + 1) * h];
        data.extend_from_slice(row);
    }
    Tensor::new(vec![tokens.len(), h], data)
}

/// One-hot encoding of tokens at fixed-point scale, used when the embedding
/// itself runs inside MPC (fully private partition).
pub fn one_hot_tokens(cfg: &ModelConfig, fmt: &FixedPointFormat, tokens: &[u32]) -> Result<Tensor> {
    let mut t = Tensor::zeros(vec![tokens.len(), cfg.vocab]);
    for (i, &tok) in tokens.iter().enumerate() {
        if tok as usize >= cfg.vocab {
            return Err(Error::TokenOutOfVocab {
                token: tok,
                vocab: cfg.vocab,
            });
        }
        t.data[i * cfg.vocab + tok as usize] = fmt.one();
    }
    Ok(t)
}

/// Embedding as a public-table one-hot matmul: free multiplications plus one
/// Trunc per output element; bit-identical to the plaintext lookup since the
/// one-hot products are exact.
pub fn embed_one_hot<E: Executor>(
    exec: &mut E,
    weights: &Weights,
    one_hot: &E::Value,
) -> Result<E::Value> {
    exec.set_site(Site::Embedding);
    matmul(exec, one_hot, &Operand::Public(weights.embedding.clone()))
}

/// Generation state of the plaintext reference model.
#[derive(Clone, Debug)]
pub struct GenerationState {
    pub cache: KvCache<Tensor>,
    pub tokens: Vec<u32>,
}

/// Plaintext runner over the full model (reference executions, the ideal
/// functionality, and trace capture for head analysis).
pub struct PlainRunner<'m> {
    pub model: &'m PreparedModel,
    pub exec: PlainExec,
    bound: BoundSuffix<Tensor>,
}

impl<'m> PlainRunner<'m> {
    pub fn new(model: &'m PreparedModel) -> Result<Self> {
        let fmt = model.config.fmt()?;
        let mut exec = PlainExec::new(fmt);
        let bound = bind_suffix(&mut exec, model, 0)?;
        Ok(PlainRunner { model, exec, bound })
    }

    pub fn with_trace(model: &'m PreparedModel) -> Result<Self> {
        let fmt = model.config.fmt()?;
        let mut exec = PlainExec::with_trace(fmt, model.config.num_layers, model.config.num_heads);
        let bound = bind_suffix(&mut exec, model, 0)?;
        Ok(PlainRunner { model, exec, bound })
    }

    pub fn fresh_state(&self) -> GenerationState {
        GenerationState {
            cache: KvCache::new(self.model.config.num_layers),
            tokens: Vec::new(),
        }
    }

    /// Full-sequence forward over the prompt; returns the state and first
    /// output token.
    pub fn prefill(&mut self, prompt: &[u32]) -> Result<(GenerationState, u32)> {
        if prompt.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        if prompt.len() > self.model.config.max_seq {
            return Err(Error::InvalidConfig(format!(
                "prompt length {} exceeds max_seq {}",
                prompt.len(),
                self.model.config.max_seq
            )));
        }
        let mut state = self.fresh_state();
        let x = embed_tokens(&self.model.config, &self.model.weights, prompt)?;
        let hidden = forward_suffix(
            &mut self.exec,
            &self.model.config,
            &self.bound,
            x,
            &mut state.cache,
        )?;
        let token = next_token(&mut self.exec, &self.bound, &hidden)?;
        state.tokens = prompt.to_vec();
        state.tokens.push(token);
        Ok((state, token))
    }

    /// Single-position forward for `input_token` using the KV cache.
    pub fn decode_step(&mut self, state: &mut GenerationState, input_token: u32) -> Result<u32> {
        if state.cache.position == 0 {
            return Err(Error::StateInconsistent("decode before prefill".into()));
        }
        let x = embed_tokens(&self.model.config, &self.model.weights, &[input_token])?;
        let hidden = forward_suffix(
            &mut self.exec,
            &self.model.config,
            &self.bound,
            x,
            &mut state.cache,
        )?;
        let token = next_token(&mut self.exec, &self.bound, &hidden)?;
        state.tokens.push(token);
        Ok(token)
    }

    /// Greedy generation of exactly `n` tokens (no EOS handling).
    pub fn generate(&mut self, prompt: &[u32], n: usize) -> Result<Vec<u32>> {
        if n == 0 {
            return Err(Error::InvalidConfig("token count must be >= 1".into()));
        }
        let (mut state, first) = self.prefill(prompt)?;
        let mut out = vec![first];
        for _ in 1..n {
            let last = *out.last().unwrap();
            out.push(self.decode_step(&mut state, last)?);
        }
        Ok(out)
    }
}

/// The incorruptible reference party: runs prefill and `n - 1` decode steps
/// in plaintext fixed point, feeding back tokens chosen by `feedback` (the
/// semi-honest client echoes the last output). Fed tokens outside the
/// vocabulary are rejected.
pub fn ideal_functionality(
    model: &PreparedModel,
    prompt: &[u32],
    n: usize,
    mut feedback: impl FnMut(u32) -> u32,
) -> Result<Vec<u32>> {
    if n == 0 {
        return Err(Error::InvalidConfig("token count must be >= 1".into()));
    }
    let mut runner = PlainRunner::new(model)?;
    let (mut state, first) = runner.prefill(prompt)?;
    let mut out = vec![first];
    for _ in 1..n {
        let fed = feedback(*out.last().unwrap());
        if fed as usize >= model.config.vocab {
            return Err(Error::TokenOutOfVocab {
                token: fed,
                vocab: model.config.vocab,
            });
        }
        out.push(runner.decode_step(&mut state, fed)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Weight file format: magic "MRLW", version u32, tensor count u32, then per
// tensor {name len u16, name bytes, rank u8, dims u32 each, f32 LE data}.
// ---------------------------------------------------------------------------

const WEIGHT_MAGIC: &[u8; 4] = b"MRLW";
const WEIGHT_VERSION: u32 = 1;

fn write_tensor<W: Write>(w: &mut W, fmt: &FixedPointFormat, name: &str, t: &Tensor) -> Result<()> {
    let name_bytes = name.as_bytes();
    w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
    w.write_all(name_bytes)?;
    w.write_all(&[t.dims.len() as u8])?;
    for d in &t.dims {
        w.write_all(&(*d as u32).to_le_bytes())?;
    }
    for e in &t.data {
        w.write_all(&(fmt.decode(*e) as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Flatten a model into (name, tensor) pairs in canonical order.
fn named_tensors(model: &PreparedModel) -> Vec<(String, &Tensor)> {
    let mut out: Vec<(String, &Tensor)> = vec![("embedding".into(), &model.weights.embedding)];
    for (i, l) in model.weights.layers.iter().enumerate() {
        out.push((format!("layers.{i}.attn_norm"), &l.attn_norm));
        out.push((format!("layers.{i}.wq"), &l.wq));
        out.push((format!("layers.{i}.wk"), &l.wk));
        out.push((format!("layers.{i}.wv"), &l.wv));
        out.push((format!("layers.{i}.wo"), &l.wo));
        out.push((format!("layers.{i}.ffn_norm"), &l.ffn_norm));
        out.push((format!("layers.{i}.ffn_up"), &l.ffn_up));
        out.push((format!("layers.{i}.ffn_down"), &l.ffn_down));
        if let Some(ad) = &model.adapters[i] {
            for (target, (a, b)) in &ad.per_target {
                out.push((format!("layers.{i}.lora.{}.a", target.name()), a));
                out.push((format!("layers.{i}.lora.{}.b", target.name()), b));
            }
        }
    }
    out.push(("final_norm".into(), &model.weights.final_norm));
    out.push(("output_head".into(), &model.weights.output_head));
    out
}

pub fn write_weights(path: &Path, model: &PreparedModel) -> Result<()> {
    let fmt = model.config.fmt()?;
    let tensors = named_tensors(model);
    let mut buf = Vec::new();
    buf.write_all(WEIGHT_MAGIC)?;
    buf.write_all(&WEIGHT_VERSION.to_le_bytes())?;
    buf.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in &tensors {
        write_tensor(&mut buf, &fmt, name, t)?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}

struct WeightReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> WeightReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::WeightFormat("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Read a weight file and encode the f32 data to fixed point at load.
pub fn read_weights(path: &Path, cfg: &ModelConfig) -> Result<PreparedModel> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    let fmt = cfg.fmt()?;
    let mut r = WeightReader { buf: &raw, pos: 0 };
    if r.take(4)? != WEIGHT_MAGIC {
        return Err(Error::WeightFormat("bad magic, expected MRLW".into()));
    }
    let version = r.u32()?;
    if version != WEIGHT_VERSION {
        return Err(Error::WeightFormat(format!(
            "unsupported version {version}"
        )));
    }
    let count = r.u32()?;
    let mut by_name: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::WeightFormat("tensor name is not utf-8".into()))?;
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            vals.push(f32::from_le_bytes(r.take(4)?.try_into().unwrap()) as f64);
        }
        by_name.insert(name, Tensor::encode(&fmt, dims, &vals)?);
    }
    if r.pos != raw.len() {
        return Err(Error::WeightFormat("trailing bytes after tensors".into()));
    }

    fn get(by_name: &mut BTreeMap<String, Tensor>, name: &str) -> Result<Tensor> {
        by_name
            .remove(name)
            .ok_or_else(|| Error::WeightFormat(format!("missing tensor `{name}`")))
    }
    let embedding = get(&mut by_name, "embedding")?;
    let mut layers = Vec::with_capacity(cfg.num_layers);
    let mut adapters: Vec<Option<LayerAdapters>> = Vec::with_capacity(cfg.num_layers);
    for i in 0..cfg.num_layers {
        layers.push(LayerWeights {
            attn_norm: get(&mut by_name, &format!("layers.{i}.attn_norm"))?,
            wq: get(&mut by_name, &format!("layers.{i}.wq"))?,
            wk: get(&mut by_name, &format!("layers.{i}.wk"))?,
            wv: get(&mut by_name, &format!("layers.{i}.wv"))?,
            wo: get(&mut by_name, &format!("layers.{i}.wo"))?,
            ffn_norm: get(&mut by_name, &format!("layers.{i}.ffn_norm"))?,
            ffn_up: get(&mut by_name, &format!("layers.{i}.ffn_up"))?,
            ffn_down: get(&mut by_name, &format!("layers.{i}.ffn_down"))?,
        });
        let mut ad = LayerAdapters::default();
        for target in LoraTarget::ALL {
            let a_name = format!("layers.{i}.lora.{}.a", target.name());
            if let Some(a) = by_name.remove(&a_name) {
                let b = get(&mut by_name, &format!("layers.{i}.lora.{}.b", target.name()))?;
                ad.per_target.insert(target, (a, b));
            }
        }
        adapters.push((!ad.per_target.is_empty()).then_some(ad));
    }
    let final_norm = get(&mut by_name, "final_norm")?;
    let output_head = get(&mut by_name, "output_head")?;
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::WeightFormat(format!("unexpected tensor `{extra}`")));
    }
    let weights = Weights {
        embedding,
        layers,
        final_norm,
        output_head,
    };
    weights.validate(cfg)?;
    let mut model = PreparedModel::new(cfg.clone(), weights)?;
    model.adapters = adapters;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            num_heads: 2,
            head_dim: 2,
            ffn_dim: 8,
            vocab: 16,
            max_seq: 12,
            activation: ActivationKind::Silu,
            softmax: SoftmaxKind::Exact,
            norm: NormKind::RmsNorm,
            scale_bits: 12,
        }
    }

    fn toy_model(seed: u64) -> PreparedModel {
        let cfg = toy_config();
        let weights = random_weights(&cfg, seed).unwrap();
        PreparedModel::new(cfg, weights).unwrap()
    }

    #[test]
    fn crafted_weights_route_argmax_to_token_7() {
        // All projections zero, embedding rows constant 0.5: attention and
        // FFN contribute nothing, the final hidden equals the embedding row,
        // rmsnorm maps it to all-ones, and head column 7 carries weight 1.
        let cfg = ModelConfig {
            num_layers: 1,
            ..toy_config()
        };
        let fmt = cfg.fmt().unwrap();
        let h = cfg.hidden();
        let ones = Tensor::encode(&fmt, vec![h], &vec![1.0; h]).unwrap();
        let mut head = Tensor::zeros(vec![h, cfg.vocab]);
        for r in 0..h {
            head.data[r * cfg.vocab + 7] = fmt.one();
        }
        let weights = Weights {
            embedding: Tensor::encode(&fmt, vec![cfg.vocab, h], &vec![0.5; cfg.vocab * h]).unwrap(),
            layers: vec![LayerWeights {
                attn_norm: ones.clone(),
                wq: Tensor::zeros(vec![h, h]),
                wk: Tensor::zeros(vec![h, h]),
                wv: Tensor::zeros(vec![h, h]),
                wo: Tensor::zeros(vec![h, h]),
                ffn_norm: ones.clone(),
                ffn_up: Tensor::zeros(vec![h, cfg.ffn_dim]),
                ffn_down: Tensor::zeros(vec![cfg.ffn_dim, h]),
            }],
            final_norm: ones,
            output_head: head,
        };
        // independent float brute force of the same tiny model
        let expected = {
            let x = vec![0.5f64; h];
            let rms = (x.iter().map(|v| v * v).sum::<f64>() / h as f64).sqrt();
            let normed: Vec<f64> = x.iter().map(|v| v / rms).collect();
            let mut logits = vec![0.0f64; cfg.vocab];
            for nv in &normed {
                logits[7] += nv;
            }
            logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0 as u32
        };
        assert_eq!(expected, 7);
        let model = PreparedModel::new(cfg, weights).unwrap();
        let mut runner = PlainRunner::new(&model).unwrap();
        let (_, token) = runner.prefill(&[1, 2, 3]).unwrap();
        assert_eq!(token, 7);
    }

    #[test]
    fn prefill_is_deterministic() {
        let model = toy_model(3);
        let t1 = PlainRunner::new(&model).unwrap().prefill(&[1, 2, 3]).unwrap().1;
        let t2 = PlainRunner::new(&model).unwrap().prefill(&[1, 2, 3]).unwrap().1;
        assert_eq!(t1, t2);
    }

    #[test]
    fn prefill_rejects_bad_prompts() {
        let model = toy_model(4);
        let mut runner = PlainRunner::new(&model).unwrap();
        assert!(matches!(runner.prefill(&[]), Err(Error::EmptyPrompt)));
        assert!(matches!(
            runner.prefill(&[99]),
            Err(Error::TokenOutOfVocab { .. })
        ));
        assert!(runner.prefill(&[1; 13]).is_err());
    }

    #[test]
    fn decode_matches_no_cache_recomputation() {
        // oracle: recompute prefill over the extended sequence instead of
        // using the cache; the next token must match for 20 random toy models
        for seed in 0..20 {
            let model = toy_model(seed);
            let mut runner = PlainRunner::new(&model).unwrap();
            let prompt = vec![(seed % 7) as u32, 3, 5];
            let (mut state, first) = runner.prefill(&prompt).unwrap();
            let second = runner.decode_step(&mut state, first).unwrap();

            let mut extended = prompt.clone();
            extended.push(first);
            let mut fresh = PlainRunner::new(&model).unwrap();
            let (_, recomputed) = fresh.prefill(&extended).unwrap();
            assert_eq!(second, recomputed, "seed {seed}");
        }
    }

    #[test]
    fn generate_yields_exactly_n_tokens() {
        let model = toy_model(9);
        let mut runner = PlainRunner::new(&model).unwrap();
        let out = runner.generate(&[2, 4], 6).unwrap();
        assert_eq!(out.len(), 6);
    }

    #[test]
    fn functionality_n1_reduces_to_prefill() {
        let model = toy_model(11);
        let mut runner = PlainRunner::new(&model).unwrap();
        let (_, first) = runner.prefill(&[1, 2]).unwrap();
        let out = ideal_functionality(&model, &[1, 2], 1, |t| t).unwrap();
        assert_eq!(out, vec![first]);
    }

    #[test]
    fn functionality_greedy_equals_generate() {
        let model = toy_model(13);
        let mut runner = PlainRunner::new(&model).unwrap();
        let gen = runner.generate(&[1, 2, 3], 5).unwrap();
        let func = ideal_functionality(&model, &[1, 2, 3], 5, |t| t).unwrap();
        assert_eq!(gen, func);
    }

    #[test]
    fn functionality_rejects_out_of_vocab_feedback() {
        let model = toy_model(15);
        let err = ideal_functionality(&model, &[1], 3, |_| 999);
        assert!(matches!(err, Err(Error::TokenOutOfVocab { .. })));
    }

    #[test]
    fn one_hot_embedding_matches_lookup() {
        let model = toy_model(17);
        let fmt = model.config.fmt().unwrap();
        let tokens = [3u32, 9, 0];
        let looked_up = embed_tokens(&model.config, &model.weights, &tokens).unwrap();
        let one_hot = one_hot_tokens(&model.config, &fmt, &tokens).unwrap();
        let mut exec = PlainExec::new(fmt);
        let via_matmul = embed_one_hot(&mut exec, &model.weights, &one_hot).unwrap();
        assert_eq!(looked_up.data, via_matmul.data);
    }

    #[test]
    fn weight_file_roundtrip() {
        let model = toy_model(19);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.mrlw");
        write_weights(&path, &model).unwrap();
        let loaded = read_weights(&path, &model.config).unwrap();
        assert_eq!(loaded.weights, model.weights);
        // and the loaded model generates identically
        let a = PlainRunner::new(&model).unwrap().generate(&[1, 2], 3).unwrap();
        let b = PlainRunner::new(&loaded).unwrap().generate(&[1, 2], 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn weight_file_bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.mrlw");
        std::fs::write(&path, b"NOPE0000").unwrap();
        let cfg = toy_config();
        assert!(matches!(
            read_weights(&path, &cfg),
            Err(Error::WeightFormat(_))
        ));
    }

    #[test]
    fn config_json_roundtrip_and_validation() {
        let cfg = toy_config();
        let text = cfg.to_json();
        let back = ModelConfig::from_json(&text).unwrap();
        assert_eq!(cfg, back);
        let bad = r#"{"num_layers":0,"num_heads":2,"head_dim":2,"ffn_dim":8,"vocab":16,"max_seq":8}"#;
        assert!(ModelConfig::from_json(bad).is_err());
    }

    #[test]
    fn decode_before_prefill_is_state_error() {
        let model = toy_model(21);
        let mut runner = PlainRunner::new(&model).unwrap();
        let mut state = runner.fresh_state();
        assert!(matches!(
            runner.decode_step(&mut state, 1),
            Err(Error::StateInconsistent(_))
        ));
    }
}
