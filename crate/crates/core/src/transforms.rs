//! The three MPC-minimizing architecture transforms: layer-freezing
//! partition, split low-rank adapters, and head merging.
//!
//! All transforms are pure weight-to-weight functions. Head merging
//! concatenates the Q/K/V projection columns of the m heads in each group
//! (and permutes the output-projection rows to match), producing a standard
//! h/m-head model with head dimension m*d and an unchanged parameter count:
//! since the merged score matrix is the sum of the group's per-head score
//! matrices, the merged model realizes the grouped-attention formula exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::{
    LayerAdapters, LayerWeights, LoraTarget, ModelConfig, PreparedModel, Weights,
};
use crate::tensor::{proj_forward, Executor, Operand, ProjOperand, Tensor, ValueOps};

/// Public-prefix / private-suffix split: the last `private_layers` of `total`
/// transformer layers (plus the output head) are private; everything below,
/// including the embedding whenever `private_layers < total`, is public.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Partition {
    pub private_layers: usize,
    pub total: usize,
}

impl Partition {
    pub fn new(private_layers: usize, total: usize) -> Result<Self> {
        if private_layers > total || total == 0 {
            return Err(Error::InvalidConfig(format!(
                "invalid partition {private_layers}/{total}"
            )));
        }
        Ok(Partition {
            private_layers,
            total,
        })
    }

    /// Index of the first private layer.
    pub fn boundary(&self) -> usize {
        self.total - self.private_layers
    }

    /// Fraction of layers fine-tuned (f in the layer-freezing analysis).
    pub fn fraction(&self) -> f64 {
        self.private_layers as f64 / self.total as f64
    }

    pub fn fully_private(total: usize) -> Self {
        Partition {
            private_layers: total,
            total,
        }
    }

    pub fn is_fully_public(&self) -> bool {
        self.private_layers == 0
    }
}

impl std::fmt::Display for Partition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.private_layers, self.total)
    }
}

impl std::str::FromStr for Partition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (t, n) = s
            .split_once('/')
            .ok_or_else(|| Error::InvalidConfig(format!("partition `{s}` is not t/N")))?;
        let t = t
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::InvalidConfig(format!("bad partition numerator in `{s}`")))?;
        let n = n
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::InvalidConfig(format!("bad partition denominator in `{s}`")))?;
        Partition::new(t, n)
    }
}

impl Serialize for Partition {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Partition {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(D::Error::custom)
    }
}

/// The two halves of a partitioned model. `public_layers` run client-side;
/// `private_layers` plus the output head run under MPC.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitModel {
    pub public_layers: (usize, usize),
    pub private_layers: (usize, usize),
    /// Embedding evaluated client-side; false only when fully private.
    pub public_embedding: bool,
}

pub fn split_model(model: &PreparedModel, partition: Partition) -> Result<SplitModel> {
    if partition.total != model.config.num_layers {
        return Err(Error::InvalidConfig(format!(
            "partition over {} layers applied to {}-layer model",
            partition.total, model.config.num_layers
        )));
    }
    let b = partition.boundary();
    Ok(SplitModel {
        public_layers: (0, b),
        private_layers: (b, model.config.num_layers),
        public_embedding: partition.private_layers < partition.total,
    })
}

// ---------------------------------------------------------------------------
// Split LoRA
// ---------------------------------------------------------------------------

/// Split low-rank evaluation of a frozen linear layer: X.W runs as a free
/// public matmul, the adapter path (X.A).B as two private low-rank matmuls,
/// with a single output truncation. Private multiplications: rows*r*(n+k).
pub fn lora_forward<E: Executor>(
    exec: &mut E,
    x: &E::Value,
    w: &Tensor,
    a: &E::Value,
    b: &E::Value,
) -> Result<E::Value> {
    let (n, k) = (w.dims[0], w.dims[1]);
    let r = a.dims()[1];
    if a.dims()[0] != n || b.dims()[0] != r || b.dims()[1] != k {
        return Err(Error::ShapeMismatch(format!(
            "adapter ({:?}, {:?}) does not fit base {:?}",
            a.dims(),
            b.dims(),
            w.dims
        )));
    }
    if r == 0 || r >= n.min(k) {
        return Err(Error::InvalidConfig(format!(
            "adapter rank {r} not in (0, min({n}, {k}))"
        )));
    }
    let p = ProjOperand {
        base: Operand::Public(w.clone()),
        adapter: Some((a.clone(), b.clone())),
    };
    proj_forward(exec, x, &p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    #[serde(default = "LoraConfig::default_targets")]
    pub targets: Vec<LoraTarget>,
}

impl LoraConfig {
    pub fn default_targets() -> Vec<LoraTarget> {
        LoraTarget::ALL.to_vec()
    }

    pub fn new(rank: usize) -> Self {
        LoraConfig {
            rank,
            targets: Self::default_targets(),
        }
    }
}

fn target_dims(cfg: &ModelConfig, target: LoraTarget) -> (usize, usize) {
    let h = cfg.hidden();
    match target {
        LoraTarget::Wq | LoraTarget::Wk | LoraTarget::Wv | LoraTarget::Wo => (h, h),
        LoraTarget::FfnUp => (h, cfg.ffn_dim),
        LoraTarget::FfnDown => (cfg.ffn_dim, h),
    }
}

/// Attach synthesized adapters (stand-ins for fine-tuned ones) to every
/// private layer. Bases stay public; B entries are bounded by 0.5 so the
/// split evaluation stays within 2 ulp of the merged product.
pub fn attach_adapters(
    model: &mut PreparedModel,
    partition: Partition,
    lora: &LoraConfig,
    seed: u64,
) -> Result<()> {
    let fmt = model.config.fmt()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    if lora.targets.is_empty() {
        return Err(Error::InvalidConfig("lora target list is empty".into()));
    }
    for layer in partition.boundary()..model.config.num_layers {
        let mut ad = LayerAdapters::default();
        for &target in &lora.targets {
            let (n, k) = target_dims(&model.config, target);
            if lora.rank == 0 || lora.rank >= n.min(k) {
                return Err(Error::InvalidConfig(format!(
                    "adapter rank {} not in (0, min({n}, {k})) for {}",
                    lora.rank,
                    target.name()
                )));
            }
            let a_vals: Vec<f64> = (0..n * lora.rank)
                .map(|_| rng.gen_range(-0.3..0.3) as f32 as f64)
                .collect();
            let b_vals: Vec<f64> = (0..lora.rank * k)
                .map(|_| rng.gen_range(-0.4..0.4) as f32 as f64)
                .collect();
            ad.per_target.insert(
                target,
                (
                    Tensor::encode(&fmt, vec![n, lora.rank], &a_vals)?,
                    Tensor::encode(&fmt, vec![lora.rank, k], &b_vals)?,
                ),
            );
        }
        model.adapters[layer] = Some(ad);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Head merging
// ---------------------------------------------------------------------------

/// A merge plan for one layer: a bijection over the original heads arranged
/// as h/m groups of m heads each; slot p of the merged layout takes original
/// head `permutation[p]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadGrouping {
    pub merge_factor: usize,
    pub permutation: Vec<usize>,
}

impl HeadGrouping {
    pub fn new(merge_factor: usize, permutation: Vec<usize>) -> Result<Self> {
        let h = permutation.len();
        if merge_factor == 0 || h == 0 || !h.is_multiple_of(merge_factor) {
            return Err(Error::InvalidConfig(format!(
                "merge factor {merge_factor} does not divide {h} heads"
            )));
        }
        let mut seen = vec![false; h];
        for &p in &permutation {
            if p >= h || seen[p] {
                return Err(Error::InvalidConfig(format!(
                    "grouping permutation {permutation:?} is not a bijection"
                )));
            }
            seen[p] = true;
        }
        Ok(HeadGrouping {
            merge_factor,
            permutation,
        })
    }

    /// Adjacent grouping: heads jm..(j+1)m-1 form group j.
    pub fn adjacent(heads: usize, merge_factor: usize) -> Result<Self> {
        HeadGrouping::new(merge_factor, (0..heads).collect())
    }

    pub fn groups(&self) -> impl Iterator<Item = &[usize]> {
        self.permutation.chunks(self.merge_factor)
    }

    pub fn group_count(&self) -> usize {
        self.permutation.len() / self.merge_factor
    }
}

fn permute_head_cols(w: &Tensor, grouping: &HeadGrouping, d: usize) -> Tensor {
    let (rows, cols) = (w.dims[0], w.dims[1]);
    w.remap(vec![rows, cols], &|i| {
        let (r, c) = (i / cols, i % cols);
        let slot = c / d;
        let offset = c % d;
        r * cols + grouping.permutation[slot] * d + offset
    })
}

fn permute_head_rows(w: &Tensor, grouping: &HeadGrouping, d: usize) -> Tensor {
    let (rows, cols) = (w.dims[0], w.dims[1]);
    w.remap(vec![rows, cols], &|i| {
        let (r, c) = (i / cols, i % cols);
        let slot = r / d;
        let offset = r % d;
        (grouping.permutation[slot] * d + offset) * cols + c
    })
}

/// Merge m heads into one per group across all layers. Q/K/V columns are
/// concatenated in grouping order, Wo rows are permuted to match, heads
/// become h/m and head_dim m*d; the attention scale follows head_dim.
/// `groupings` holds one plan per layer.
pub fn merge_heads(model: &PreparedModel, groupings: &[HeadGrouping]) -> Result<PreparedModel> {
    let cfg = &model.config;
    if groupings.len() != cfg.num_layers {
        return Err(Error::InvalidConfig(format!(
            "{} groupings for {} layers",
            groupings.len(),
            cfg.num_layers
        )));
    }
    if model.lora_mode() {
        return Err(Error::InvalidConfig(
            "merge heads before attaching adapters".into(),
        ));
    }
    let m = groupings[0].merge_factor;
    if !cfg.num_heads.is_multiple_of(m) {
        return Err(Error::InvalidConfig(format!(
            "merge factor {m} does not divide {} heads",
            cfg.num_heads
        )));
    }
    for g in groupings {
        if g.merge_factor != m || g.permutation.len() != cfg.num_heads {
            return Err(Error::InvalidConfig(
                "groupings disagree on heads or merge factor".into(),
            ));
        }
    }
    let d = cfg.head_dim;
    let layers = model
        .weights
        .layers
        .iter()
        .zip(groupings)
        .map(|(w, g)| LayerWeights {
            attn_norm: w.attn_norm.clone(),
            wq: permute_head_cols(&w.wq, g, d),
            wk: permute_head_cols(&w.wk, g, d),
            wv: permute_head_cols(&w.wv, g, d),
            wo: permute_head_rows(&w.wo, g, d),
            ffn_norm: w.ffn_norm.clone(),
            ffn_up: w.ffn_up.clone(),
            ffn_down: w.ffn_down.clone(),
        })
        .collect();
    let merged_cfg = ModelConfig {
        num_heads: cfg.num_heads / m,
        head_dim: d * m,
        ..cfg.clone()
    };
    PreparedModel::new(
        merged_cfg,
        Weights {
            embedding: model.weights.embedding.clone(),
            layers,
            final_norm: model.weights.final_norm.clone(),
            output_head: model.weights.output_head.clone(),
        },
    )
}

// ---------------------------------------------------------------------------
// Transform manifest
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupingSpec {
    Adjacent,
    Similar,
    Explicit(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadMergeConfig {
    pub m: usize,
    pub grouping: GroupingSpec,
}

/// Written next to transformed weight files for reproducibility.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransformManifest {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub freeze: Option<Partition>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lora: Option<LoraConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head_merge: Option<HeadMergeConfig>,
}

impl TransformManifest {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Calibration inputs for similarity-driven grouping: random token prompts
/// through the untransformed model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub prompts: usize,
    pub prompt_len: usize,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            prompts: 4,
            prompt_len: 8,
            seed: 7,
        }
    }
}

/// Resolve a grouping spec into one plan per layer.
pub fn resolve_groupings(
    model: &PreparedModel,
    m: usize,
    spec: &GroupingSpec,
    calib: &CalibrationConfig,
) -> Result<Vec<HeadGrouping>> {
    let h = model.config.num_heads;
    let n = model.config.num_layers;
    match spec {
        GroupingSpec::Adjacent => Ok(vec![HeadGrouping::adjacent(h, m)?; n]),
        GroupingSpec::Explicit(perm) => Ok(vec![HeadGrouping::new(m, perm.clone())?; n]),
        GroupingSpec::Similar => crate::similarity::similar_groupings(model, m, calib),
    }
}

/// Apply a manifest to a base model: head merge first (if any), then adapter
/// attachment on the private suffix. Returns the transformed model and the
/// resolved partition (fully private when no freeze entry is given).
pub fn apply_manifest(
    base: &PreparedModel,
    manifest: &TransformManifest,
    calib: &CalibrationConfig,
    lora_seed: u64,
) -> Result<(PreparedModel, Partition)> {
    let partition = match manifest.freeze {
        Some(p) => {
            if p.total != base.config.num_layers {
                return Err(Error::InvalidConfig(format!(
                    "freeze {p} does not match {}-layer model",
                    base.config.num_layers
                )));
            }
            p
        }
        None => Partition::fully_private(base.config.num_layers),
    };
    let mut model = match &manifest.head_merge {
        Some(hm) => {
            let groupings = resolve_groupings(base, hm.m, &hm.grouping, calib)?;
            merge_heads(base, &groupings)?
        }
        None => base.clone(),
    };
    if let Some(lora) = &manifest.lora {
        attach_adapters(&mut model, partition, lora, lora_seed)?;
    }
    Ok((model, partition))
}
