//! Operation counters, cost tables, and report comparison.
//!
//! The engine tallies every operation into a [`StageCounters`] block for the
//! active stage (prefill or decode) and site (attention scores, FFN, ...).
//! Measured bytes come from the simulated channels; modeled bytes fold in a
//! [`CostTable`] that prices non-arithmetic oracle calls and opened elements
//! the way a real protocol would, since the idealized oracle's reconstruction
//! traffic is not representative of a cryptographic implementation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inference stage a counter is attributed to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Prefill,
    Decode,
}

/// Model component a counter is attributed to. `AttnScores` covers the
/// QK^T/scale/softmax path whose element count is O(b^2 h); `AttnContext` the
/// probability-times-V product; `AttnProj` the Q/K/V/O linear layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Embedding,
    AttnScores,
    AttnContext,
    AttnProj,
    Norm,
    Ffn,
    Head,
    Other,
}

/// Non-arithmetic operation kinds tracked by the ideal oracle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NonArithKind {
    Trunc,
    SoftmaxExp,
    SoftmaxDiv,
    Gelu,
    Silu,
    Relu,
    Compare,
    Rsqrt,
}

impl NonArithKind {
    pub const ALL: [NonArithKind; 8] = [
        NonArithKind::Trunc,
        NonArithKind::SoftmaxExp,
        NonArithKind::SoftmaxDiv,
        NonArithKind::Gelu,
        NonArithKind::Silu,
        NonArithKind::Relu,
        NonArithKind::Compare,
        NonArithKind::Rsqrt,
    ];
}

/// Per-site sub-tally (multiplications and oracle elements only; bytes are
/// tracked per stage).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SiteCounters {
    pub triple_mults: u64,
    pub public_mults: u64,
    pub nonarith: BTreeMap<NonArithKind, u64>,
}

impl SiteCounters {
    pub fn nonarith_total(&self) -> u64 {
        self.nonarith.values().sum()
    }

    fn add(&mut self, other: &SiteCounters) {
        self.triple_mults += other.triple_mults;
        self.public_mults += other.public_mults;
        for (k, v) in &other.nonarith {
            *self.nonarith.entry(*k).or_insert(0) += v;
        }
    }
}

/// Counter block for one stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageCounters {
    pub triple_mults: u64,
    pub public_mults: u64,
    pub triples_consumed: u64,
    pub opened_elements: u64,
    pub measured_bytes: u64,
    pub rounds: u64,
    pub modeled_bytes: f64,
    pub modeled_rounds: f64,
    pub nonarith: BTreeMap<NonArithKind, u64>,
    pub sites: BTreeMap<Site, SiteCounters>,
}

impl StageCounters {
    pub fn nonarith_count(&self, kind: NonArithKind) -> u64 {
        self.nonarith.get(&kind).copied().unwrap_or(0)
    }

    pub fn site(&self, site: Site) -> SiteCounters {
        self.sites.get(&site).cloned().unwrap_or_default()
    }

    pub fn add(&mut self, other: &StageCounters) {
        self.triple_mults += other.triple_mults;
        self.public_mults += other.public_mults;
        self.triples_consumed += other.triples_consumed;
        self.opened_elements += other.opened_elements;
        self.measured_bytes += other.measured_bytes;
        self.rounds += other.rounds;
        self.modeled_bytes += other.modeled_bytes;
        self.modeled_rounds += other.modeled_rounds;
        for (k, v) in &other.nonarith {
            *self.nonarith.entry(*k).or_insert(0) += v;
        }
        for (s, c) in &other.sites {
            self.sites.entry(*s).or_default().add(c);
        }
    }

    /// Flat metric map used by `improvement` and the CSV export.
    pub fn metrics(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        m.insert("triple_mults".into(), self.triple_mults as f64);
        m.insert("public_mults".into(), self.public_mults as f64);
        m.insert("triples_consumed".into(), self.triples_consumed as f64);
        m.insert("opened_elements".into(), self.opened_elements as f64);
        m.insert("measured_bytes".into(), self.measured_bytes as f64);
        m.insert("rounds".into(), self.rounds as f64);
        m.insert("modeled_bytes".into(), self.modeled_bytes);
        m.insert("modeled_rounds".into(), self.modeled_rounds);
        for kind in NonArithKind::ALL {
            m.insert(format!("nonarith.{kind:?}"), self.nonarith_count(kind) as f64);
        }
        m
    }
}

/// Cost of one non-arithmetic operation kind under the modeled protocol.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpCost {
    pub bytes_per_element: f64,
    pub rounds_per_batch: f64,
}

/// Modeled per-operation communication prices.
///
/// The per-kind values are engineering estimates: the underlying protocols
/// report only aggregate costs, so these numbers are chosen to reproduce the
/// qualitative profile (non-arithmetic operations dominate the executable
/// backends at large sequence lengths; the bundled plain-2PC profile is
/// multiplication-dominated). They are configuration, not measurements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    pub schema_version: u32,
    pub nonarith: BTreeMap<NonArithKind, OpCost>,
    /// Bytes per opened (masked) element, per backend profile name.
    pub open_bytes_per_element: BTreeMap<String, f64>,
}

impl Default for CostTable {
    fn default() -> Self {
        let mut nonarith = BTreeMap::new();
        let cost = |b, r| OpCost {
            bytes_per_element: b,
            rounds_per_batch: r,
        };
        nonarith.insert(NonArithKind::Trunc, cost(40.0, 1.0));
        nonarith.insert(NonArithKind::SoftmaxExp, cost(128.0, 6.0));
        nonarith.insert(NonArithKind::SoftmaxDiv, cost(96.0, 8.0));
        nonarith.insert(NonArithKind::Gelu, cost(128.0, 6.0));
        nonarith.insert(NonArithKind::Silu, cost(128.0, 6.0));
        nonarith.insert(NonArithKind::Relu, cost(64.0, 2.0));
        nonarith.insert(NonArithKind::Compare, cost(64.0, 4.0));
        nonarith.insert(NonArithKind::Rsqrt, cost(160.0, 8.0));
        let mut open = BTreeMap::new();
        open.insert("dealer2pc".to_string(), 16.0);
        open.insert("rep3pc".to_string(), 24.0);
        // OT/HE-based 2PC: multiplications dominate; never executed, only modeled.
        open.insert("plain2pc".to_string(), 2048.0);
        CostTable {
            schema_version: 1,
            nonarith,
            open_bytes_per_element: open,
        }
    }
}

impl CostTable {
    pub fn op(&self, kind: NonArithKind) -> OpCost {
        self.nonarith.get(&kind).copied().unwrap_or(OpCost {
            bytes_per_element: 0.0,
            rounds_per_batch: 0.0,
        })
    }

    pub fn open_bytes(&self, profile: &str) -> f64 {
        self.open_bytes_per_element
            .get(profile)
            .copied()
            .unwrap_or(0.0)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("cost table serializes")
    }

    /// Re-price a counter block under this table for the named profile.
    pub fn model_bytes(&self, counters: &StageCounters, profile: &str) -> f64 {
        let nonarith: f64 = counters
            .nonarith
            .iter()
            .map(|(k, n)| self.op(*k).bytes_per_element * *n as f64)
            .sum();
        nonarith + counters.opened_elements as f64 * self.open_bytes(profile)
    }
}

/// Modeled non-arithmetic cost divided by total modeled cost.
pub fn nonarith_share(counters: &StageCounters, table: &CostTable, profile: &str) -> f64 {
    let nonarith: f64 = counters
        .nonarith
        .iter()
        .map(|(k, n)| table.op(*k).bytes_per_element * *n as f64)
        .sum();
    let total = nonarith + counters.opened_elements as f64 * table.open_bytes(profile);
    if total == 0.0 {
        0.0
    } else {
        nonarith / total
    }
}

/// Whole-run cost report: one counter block per stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub schema_version: u32,
    pub backend: String,
    pub scale_bits: u32,
    pub prefill: StageCounters,
    pub decode: StageCounters,
}

impl CostReport {
    pub const SCHEMA_VERSION: u32 = 1;

    pub fn total(&self) -> StageCounters {
        let mut t = self.prefill.clone();
        t.add(&self.decode);
        t
    }

    pub fn stage(&self, stage: Stage) -> &StageCounters {
        match stage {
            Stage::Prefill => &self.prefill,
            Stage::Decode => &self.decode,
        }
    }

    /// CSV rows: scenario, stage, metric, value.
    pub fn to_csv(&self, scenario: &str) -> String {
        let mut out = String::from("scenario,stage,metric,value\n");
        for (stage, counters) in [
            ("prefill", &self.prefill),
            ("decode", &self.decode),
            ("total", &self.total()),
        ] {
            for (metric, value) in counters.metrics() {
                out.push_str(&format!("{scenario},{stage},{metric},{value}\n"));
            }
        }
        out
    }
}

/// One baseline/variant metric ratio.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    pub value: Option<f64>,
    pub infinite: bool,
}

impl Ratio {
    fn of(baseline: f64, variant: f64) -> Ratio {
        if variant == 0.0 {
            if baseline == 0.0 {
                // identical zero counters compare as 1.0
                Ratio {
                    value: Some(1.0),
                    infinite: false,
                }
            } else {
                Ratio {
                    value: None,
                    infinite: true,
                }
            }
        } else {
            Ratio {
                value: Some(baseline / variant),
                infinite: false,
            }
        }
    }
}

/// Per-stage, per-metric baseline/variant ratios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImprovementFactor {
    pub baseline_id: String,
    pub variant_id: String,
    pub stages: BTreeMap<String, BTreeMap<String, Ratio>>,
}

/// Elementwise baseline/variant ratios across both stages and the total.
pub fn improvement(
    baseline_id: &str,
    baseline: &CostReport,
    variant_id: &str,
    variant: &CostReport,
) -> Result<ImprovementFactor> {
    if baseline.schema_version != variant.schema_version {
        return Err(Error::InvalidConfig(format!(
            "report schema mismatch: {} vs {}",
            baseline.schema_version, variant.schema_version
        )));
    }
    let mut stages = BTreeMap::new();
    for (name, b, v) in [
        ("prefill", baseline.prefill.clone(), variant.prefill.clone()),
        ("decode", baseline.decode.clone(), variant.decode.clone()),
        ("total", baseline.total(), variant.total()),
    ] {
        let bm = b.metrics();
        let vm = v.metrics();
        let mut ratios = BTreeMap::new();
        for (metric, bval) in bm {
            let vval = vm.get(&metric).copied().unwrap_or(0.0);
            ratios.insert(metric, Ratio::of(bval, vval));
        }
        stages.insert(name.to_string(), ratios);
    }
    Ok(ImprovementFactor {
        baseline_id: baseline_id.to_string(),
        variant_id: variant_id.to_string(),
        stages,
    })
}

impl ImprovementFactor {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("baseline,variant,stage,metric,ratio,infinite\n");
        for (stage, ratios) in &self.stages {
            for (metric, r) in ratios {
                let v = r.value.map(|v| v.to_string()).unwrap_or_default();
                out.push_str(&format!(
                    "{},{},{stage},{metric},{v},{}\n",
                    self.baseline_id, self.variant_id, r.infinite
                ));
            }
        }
        out
    }
}
