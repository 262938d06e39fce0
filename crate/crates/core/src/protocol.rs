//! End-to-end secure-inference protocol: the client evaluates the public
//! prefix locally in plaintext fixed point, secret-shares the resulting
//! hidden states into the engine, the private suffix runs under MPC, and
//! tokens stream back. The run must reproduce the plaintext ideal
//! functionality token for token.
//!
//! Stage attribution: everything through the first token (weight sharing,
//! prompt hidden-state sharing, the suffix prefill) is prefill; the token
//! loop is decode. With a fully public partition no engine exists and the
//! whole run is client-side.

use serde::{Deserialize, Serialize};

use crate::channel::MessageEvent;
use crate::cost::{CostReport, CostTable, Stage, StageCounters};
use crate::engine::{BackendKind, Engine, EngineConfig, CLIENT};
use crate::error::{Error, Result};
use crate::model::{
    bind_layers, bind_suffix, embed_one_hot, embed_tokens, forward_layers, forward_suffix,
    next_token, one_hot_tokens, KvCache, PlainRunner, PreparedModel,
};
use crate::tensor::{Executor, MpcExec, PlainExec, PlainOps, Tensor};
use crate::transforms::Partition;

#[derive(Clone, Debug)]
pub struct ProtocolConfig {
    pub backend: BackendKind,
    pub partition: Partition,
    /// Number of output tokens n >= 1.
    pub tokens: usize,
    pub seed: u64,
    pub cost_table: CostTable,
    /// Record per-receiver byte histograms for uniformity testing.
    pub capture_stats: bool,
}

impl ProtocolConfig {
    pub fn new(backend: BackendKind, partition: Partition, tokens: usize, seed: u64) -> Self {
        ProtocolConfig {
            backend,
            partition,
            tokens,
            seed,
            cost_table: CostTable::default(),
            capture_stats: false,
        }
    }
}

/// Replayable record of one protocol run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Transcript {
    /// Backend name; `None` when the partition was fully public (no MPC).
    pub backend: Option<String>,
    pub scale_bits: u32,
    pub prefill: StageCounters,
    pub decode: StageCounters,
    /// Client-side plaintext work (public prefix evaluation).
    pub client_plain: PlainOps,
    pub events: Vec<MessageEvent>,
    /// Low-8-bit histogram of every share element the server received, when
    /// stat capture was enabled.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub server_byte_histogram: Option<Vec<u64>>,
}

impl Transcript {
    pub fn report(&self) -> CostReport {
        CostReport {
            schema_version: CostReport::SCHEMA_VERSION,
            backend: self.backend.clone().unwrap_or_else(|| "none".into()),
            scale_bits: self.scale_bits,
            prefill: self.prefill.clone(),
            decode: self.decode.clone(),
        }
    }

    /// One JSON object per message event.
    pub fn events_jsonl(&self) -> String {
        self.events
            .iter()
            .map(|e| serde_json::to_string(e).expect("event serializes"))
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn total_event_bytes(&self) -> u64 {
        self.events.iter().map(|e| e.bytes).sum()
    }
}

/// Per-stage cost snapshots of a completed run.
pub fn record_stage_costs(transcript: &Transcript) -> (StageCounters, StageCounters) {
    (transcript.prefill.clone(), transcript.decode.clone())
}

#[derive(Clone, Debug)]
pub struct ProtocolRun {
    pub tokens: Vec<u32>,
    pub transcript: Transcript,
}

/// Client-side state: the public prefix bound in plaintext plus its KV cache.
struct ClientPrefix<'m> {
    model: &'m PreparedModel,
    exec: PlainExec,
    layers: Vec<crate::model::BoundLayer<Tensor>>,
    cache: KvCache<Tensor>,
    boundary: usize,
}

impl<'m> ClientPrefix<'m> {
    fn new(model: &'m PreparedModel, boundary: usize) -> Result<Self> {
        let mut exec = PlainExec::new(model.config.fmt()?);
        let layers = bind_layers(&mut exec, model, 0..boundary, false)?;
        Ok(ClientPrefix {
            model,
            exec,
            layers,
            cache: KvCache::new(boundary),
            boundary,
        })
    }

    /// Evaluate the public part on new tokens. With a fully private
    /// partition the client's input to the functionality is the one-hot
    /// encoding of its tokens; otherwise it is the hidden state after the
    /// public prefix.
    fn evaluate(&mut self, tokens: &[u32]) -> Result<Tensor> {
        let fmt = self.model.config.fmt()?;
        if self.boundary == 0 {
            return one_hot_tokens(&self.model.config, &fmt, tokens);
        }
        let x = embed_tokens(&self.model.config, &self.model.weights, tokens)?;
        forward_layers(
            &mut self.exec,
            &self.model.config,
            &self.layers,
            0,
            x,
            &mut self.cache,
        )
    }
}

/// Execute the secure-inference protocol and return the generated tokens
/// with the full transcript. Output is bit-identical to
/// [`crate::model::ideal_functionality`] under greedy feedback.
pub fn run_protocol(
    cfg: &ProtocolConfig,
    model: &PreparedModel,
    prompt: &[u32],
) -> Result<ProtocolRun> {
    if cfg.tokens == 0 {
        return Err(Error::InvalidConfig("token count must be >= 1".into()));
    }
    if cfg.partition.total != model.config.num_layers {
        return Err(Error::InvalidConfig(format!(
            "partition {} does not match {}-layer model",
            cfg.partition, model.config.num_layers
        )));
    }
    if prompt.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    if prompt.len() > model.config.max_seq {
        return Err(Error::InvalidConfig(format!(
            "prompt length {} exceeds max_seq {}",
            prompt.len(),
            model.config.max_seq
        )));
    }

    // fully public partition: plain client-side generation, no MPC traffic
    if cfg.partition.is_fully_public() {
        let mut runner = PlainRunner::new(model)?;
        let tokens = runner.generate(prompt, cfg.tokens)?;
        let transcript = Transcript {
            backend: None,
            scale_bits: model.config.scale_bits,
            prefill: StageCounters::default(),
            decode: StageCounters::default(),
            client_plain: runner.exec.ops,
            events: Vec::new(),
            server_byte_histogram: None,
        };
        return Ok(ProtocolRun { tokens, transcript });
    }

    let boundary = cfg.partition.boundary();
    let mut engine = Engine::new(EngineConfig {
        backend: cfg.backend,
        fmt: model.config.fmt()?,
        cost_table: cfg.cost_table.clone(),
        seed: cfg.seed,
        triple_budget: None,
        capture_stats: cfg.capture_stats,
    });
    let mut client = ClientPrefix::new(model, boundary)?;

    // step 1: initialize the functionality; the server inputs W_pr
    engine.set_stage(Stage::Prefill);
    let mut tokens = Vec::with_capacity(cfg.tokens);
    {
        let mut mpc = MpcExec::new(&mut engine);
        let bound = bind_suffix(&mut mpc, model, boundary)?;
        let mut cache = KvCache::new(model.config.num_layers - boundary);

        // steps 2-3: client evaluates the public part on its prompt, shares
        // the result, and receives the first token
        let h_pub = client.evaluate(prompt)?;
        let shared = mpc.input_from(CLIENT, &h_pub);
        let x0 = if boundary == 0 {
            embed_one_hot(&mut mpc, &model.weights, &shared)?
        } else {
            shared
        };
        let hidden = forward_suffix(&mut mpc, &model.config, &bound, x0, &mut cache)?;
        tokens.push(next_token(&mut mpc, &bound, &hidden)?);

        // step 4: per-token loop; the client feeds the hidden state for the
        // previous output token
        mpc.engine.set_stage(Stage::Decode);
        for _ in 1..cfg.tokens {
            let last = *tokens.last().unwrap();
            let h = client.evaluate(&[last])?;
            let shared = mpc.input_from(CLIENT, &h);
            let x = if boundary == 0 {
                embed_one_hot(&mut mpc, &model.weights, &shared)?
            } else {
                shared
            };
            let hidden = forward_suffix(&mut mpc, &model.config, &bound, x, &mut cache)?;
            tokens.push(next_token(&mut mpc, &bound, &hidden)?);
        }
    }

    debug_assert!(engine.bytes_conserved());
    let server_byte_histogram = engine
        .channels()
        .stats_for(crate::channel::Endpoint::Party(crate::engine::SERVER))
        .map(|h| h.counts.to_vec());
    let transcript = Transcript {
        backend: Some(cfg.backend.name().to_string()),
        scale_bits: model.config.scale_bits,
        prefill: engine.counters(Stage::Prefill).clone(),
        decode: engine.counters(Stage::Decode).clone(),
        client_plain: client.exec.ops,
        events: engine.events().to_vec(),
        server_byte_histogram,
    };
    Ok(ProtocolRun { tokens, transcript })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approx::SoftmaxKind;
    use crate::cost::NonArithKind;
    use crate::model::{ideal_functionality, random_weights, ModelConfig};
    use crate::transforms::{attach_adapters, LoraConfig};

    fn toy(seed: u64, layers: usize) -> PreparedModel {
        let cfg = ModelConfig {
            num_layers: layers,
            num_heads: 2,
            head_dim: 2,
            ffn_dim: 8,
            vocab: 16,
            max_seq: 16,
            activation: Default::default(),
            softmax: SoftmaxKind::Exact,
            norm: Default::default(),
            scale_bits: 12,
        };
        let weights = random_weights(&cfg, seed).unwrap();
        PreparedModel::new(cfg, weights).unwrap()
    }

    #[test]
    fn protocol_matches_functionality_across_partitions() {
        for seed in 0..4 {
            let model = toy(seed, 2);
            let prompt = vec![1, 5, 9];
            let want = ideal_functionality(&model, &prompt, 3, |t| t).unwrap();
            for backend in [BackendKind::Dealer2Pc, BackendKind::Rep3Pc] {
                for t in [0, 1, 2] {
                    let cfg = ProtocolConfig::new(
                        backend,
                        Partition::new(t, 2).unwrap(),
                        3,
                        seed + 100,
                    );
                    let run = run_protocol(&cfg, &model, &prompt).unwrap();
                    assert_eq!(run.tokens, want, "seed {seed} backend {backend:?} t {t}");
                }
            }
        }
    }

    #[test]
    fn protocol_matches_functionality_with_adapters() {
        let mut model = toy(7, 2);
        let partition = Partition::new(1, 2).unwrap();
        attach_adapters(&mut model, partition, &LoraConfig::new(2), 3).unwrap();
        let prompt = vec![2, 4];
        let want = ideal_functionality(&model, &prompt, 4, |t| t).unwrap();
        for backend in [BackendKind::Dealer2Pc, BackendKind::Rep3Pc] {
            let cfg = ProtocolConfig::new(backend, partition, 4, 11);
            let run = run_protocol(&cfg, &model, &prompt).unwrap();
            assert_eq!(run.tokens, want);
        }
    }

    #[test]
    fn fully_public_run_has_no_traffic() {
        let model = toy(3, 2);
        let cfg = ProtocolConfig::new(
            BackendKind::Dealer2Pc,
            Partition::new(0, 2).unwrap(),
            3,
            5,
        );
        let run = run_protocol(&cfg, &model, &[1, 2]).unwrap();
        assert!(run.transcript.events.is_empty());
        assert_eq!(run.transcript.prefill.measured_bytes, 0);
        assert_eq!(run.transcript.decode.triple_mults, 0);
        let mut runner = PlainRunner::new(&model).unwrap();
        assert_eq!(run.tokens, runner.generate(&[1, 2], 3).unwrap());
        assert!(run.transcript.client_plain.mults > 0);
    }

    #[test]
    fn single_token_run_has_empty_decode_report() {
        let model = toy(5, 2);
        let cfg = ProtocolConfig::new(
            BackendKind::Dealer2Pc,
            Partition::fully_private(2),
            1,
            9,
        );
        let run = run_protocol(&cfg, &model, &[3, 4, 5]).unwrap();
        assert_eq!(run.transcript.decode, StageCounters::default());
        assert!(run.transcript.prefill.triple_mults > 0);
    }

    #[test]
    fn prefill_softmax_element_count_matches_architecture() {
        let model = toy(6, 2);
        let prompt = vec![1, 2, 3, 4];
        let cfg = ProtocolConfig::new(
            BackendKind::Dealer2Pc,
            Partition::fully_private(2),
            1,
            13,
        );
        let run = run_protocol(&cfg, &model, &prompt).unwrap();
        let b = prompt.len() as u64;
        let expected = 2 * 2 * b * b; // layers * heads * b^2
        assert_eq!(
            run.transcript.prefill.nonarith_count(NonArithKind::SoftmaxExp),
            expected
        );
    }

    #[test]
    fn decode_mults_grow_linearly_in_token_count() {
        let model = toy(8, 2);
        let prompt = vec![1, 2, 3, 4, 5, 6];
        let count = |n: usize| {
            let cfg = ProtocolConfig::new(
                BackendKind::Dealer2Pc,
                Partition::fully_private(2),
                n,
                17,
            );
            run_protocol(&cfg, &model, &prompt)
                .unwrap()
                .transcript
                .decode
                .triple_mults as f64
        };
        let (c2, c4, c8) = (count(2), count(4), count(8));
        let ratio = (c8 - c4) / (c4 - c2);
        assert!(
            (ratio - 2.0).abs() < 0.3,
            "difference ratio {ratio} not ~2 (c2={c2}, c4={c4}, c8={c8})"
        );
    }

    #[test]
    fn client_work_scales_with_public_fraction() {
        let model = toy(9, 4);
        let prompt = vec![1, 2, 3];
        let client_mults = |t: usize| {
            let cfg = ProtocolConfig::new(
                BackendKind::Dealer2Pc,
                Partition::new(t, 4).unwrap(),
                2,
                21,
            );
            run_protocol(&cfg, &model, &prompt)
                .unwrap()
                .transcript
                .client_plain
                .mults
        };
        let m1 = client_mults(1); // 3 public layers
        let m3 = client_mults(3); // 1 public layer
        assert_eq!(m1, 3 * m3, "client prefix work is per-layer uniform");
        assert_eq!(client_mults(4), 0, "fully private: client only one-hots");
    }

    #[test]
    fn transcript_is_deterministic_and_consistent() {
        let model = toy(10, 2);
        let cfg = ProtocolConfig::new(
            BackendKind::Rep3Pc,
            Partition::new(1, 2).unwrap(),
            3,
            23,
        );
        let a = run_protocol(&cfg, &model, &[7, 8]).unwrap();
        let b = run_protocol(&cfg, &model, &[7, 8]).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.transcript.events_jsonl(), b.transcript.events_jsonl());
        // event sizes sum to channel/stage byte counters
        assert_eq!(
            a.transcript.total_event_bytes(),
            a.transcript.prefill.measured_bytes + a.transcript.decode.measured_bytes
        );
        let (p, d) = record_stage_costs(&a.transcript);
        assert_eq!(p, a.transcript.prefill);
        assert_eq!(d, a.transcript.decode);
    }

    #[test]
    fn protocol_matches_functionality_under_approximations() {
        use crate::approx::ActivationKind;
        let fmt = crate::ring::FixedPointFormat::default();
        let softmaxes = [
            SoftmaxKind::Exact,
            SoftmaxKind::TwoRelu { eps: fmt.ulp() },
            SoftmaxKind::TwoQuad { c: 2.0 },
        ];
        let activations = [
            ActivationKind::Silu,
            ActivationKind::Gelu,
            ActivationKind::Relu,
            ActivationKind::Quad {
                c2: 0.125,
                c1: 0.25,
                c0: 0.5,
            },
        ];
        for softmax in softmaxes {
            for activation in activations {
                let cfg = ModelConfig {
                    num_layers: 2,
                    num_heads: 2,
                    head_dim: 2,
                    ffn_dim: 8,
                    vocab: 16,
                    max_seq: 16,
                    activation,
                    softmax,
                    norm: Default::default(),
                    scale_bits: 12,
                };
                let weights = random_weights(&cfg, 3).unwrap();
                let model = PreparedModel::new(cfg, weights).unwrap();
                let prompt = vec![1, 5, 9];
                let want = ideal_functionality(&model, &prompt, 3, |t| t).unwrap();
                for backend in [BackendKind::Dealer2Pc, BackendKind::Rep3Pc] {
                    let pcfg = ProtocolConfig::new(
                        backend,
                        Partition::new(1, 2).unwrap(),
                        3,
                        19,
                    );
                    let run = run_protocol(&pcfg, &model, &prompt).unwrap();
                    assert_eq!(
                        run.tokens, want,
                        "{softmax:?} x {activation:?} under {backend:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn two_quad_mask_zeroes_future_positions() {
        use crate::model::PlainRunner;
        let cfg = ModelConfig {
            num_layers: 1,
            num_heads: 2,
            head_dim: 2,
            ffn_dim: 8,
            vocab: 16,
            max_seq: 16,
            activation: Default::default(),
            softmax: SoftmaxKind::TwoQuad { c: 2.0 },
            norm: Default::default(),
            scale_bits: 12,
        };
        let weights = random_weights(&cfg, 7).unwrap();
        let model = PreparedModel::new(cfg, weights).unwrap();
        let mut runner = PlainRunner::with_trace(&model).unwrap();
        runner.prefill(&[2, 4, 6, 8]).unwrap();
        let trace = runner.exec.trace.take().unwrap();
        for per_head in &trace.attn_probs[0] {
            for (pos, row) in per_head.iter().enumerate() {
                for (j, p) in row.iter().enumerate() {
                    if j > pos {
                        assert!(
                            p.abs() < 1e-9,
                            "future position {j} of row {pos} carries weight {p}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_invalid_runs() {
        let model = toy(11, 2);
        let good = Partition::new(1, 2).unwrap();
        let cfg = ProtocolConfig::new(BackendKind::Dealer2Pc, good, 0, 1);
        assert!(run_protocol(&cfg, &model, &[1]).is_err());
        let cfg = ProtocolConfig::new(BackendKind::Dealer2Pc, good, 1, 1);
        assert!(matches!(
            run_protocol(&cfg, &model, &[]),
            Err(Error::EmptyPrompt)
        ));
        let bad_partition = Partition::new(1, 3).unwrap();
        let cfg = ProtocolConfig::new(BackendKind::Dealer2Pc, bad_partition, 1, 1);
        assert!(run_protocol(&cfg, &model, &[1]).is_err());
        let cfg = ProtocolConfig::new(BackendKind::Dealer2Pc, good, 1, 1);
        assert!(run_protocol(&cfg, &model, &[1; 17]).is_err());
    }
}
