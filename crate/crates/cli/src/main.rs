//! Scenario runner and report emitter: transform a model, run the
//! secure-inference protocol under a chosen backend, compare scenario
//! reports, analyze attention heads.
//!
//! Exit codes: 0 success, 2 configuration errors (including CLI parse
//! errors), 3 runtime errors. Reports embed the fully resolved scenario so
//! runs are reproducible byte for byte from the report alone.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use mpcmin::approx::{ActivationKind, SoftmaxKind};
use mpcmin::cost::{improvement, CostReport, CostTable};
use mpcmin::engine::BackendKind;
use mpcmin::model::{
    ideal_functionality, random_weights, read_weights, write_weights, ModelConfig, PreparedModel,
};
use mpcmin::protocol::{run_protocol, ProtocolConfig};
use mpcmin::similarity::{calibration_prompts, groupings_from_distances, pairwise_distances};
use mpcmin::tensor::PlainOps;
use mpcmin::transforms::{
    apply_manifest, CalibrationConfig, GroupingSpec, HeadMergeConfig, LoraConfig, Partition,
    TransformManifest,
};

const EXIT_CONFIG: i32 = 2;
const EXIT_RUNTIME: i32 = 3;

#[derive(Parser)]
#[command(
    name = "mpcmin",
    version,
    about = "Secure-inference simulator and MPC-minimization toolkit"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario through the protocol and write a cost report.
    Simulate(SimulateArgs),
    /// Improvement factors between a baseline and a variant report.
    Compare(CompareArgs),
    /// Per-layer head distance matrices and the chosen grouping.
    AnalyzeHeads(AnalyzeArgs),
    /// Apply transforms and write the model plus its manifest to disk.
    Transform(TransformArgs),
    /// Generate a toy model (config + weights) from a seed.
    GenModel(GenModelArgs),
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Model config JSON.
    #[arg(long)]
    model_config: PathBuf,
    /// Weight file (MRLW).
    #[arg(long)]
    weights: PathBuf,
    /// Override the softmax kind (exact|2relu|2quad).
    #[arg(long)]
    softmax: Option<String>,
    /// Override the activation kind (silu|gelu|relu|quad).
    #[arg(long)]
    act: Option<String>,
    /// Override the fixed-point fractional bits.
    #[arg(long)]
    scale_bits: Option<u32>,
}

#[derive(Args, Clone)]
struct TransformFlags {
    /// Transform manifest JSON; individual flags below override its fields.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Layer-freezing fraction t/N (private suffix size over total layers).
    #[arg(long)]
    freeze: Option<String>,
    /// Split-LoRA adapter rank on the private suffix.
    #[arg(long)]
    lora_rank: Option<usize>,
    /// Seed for synthesized adapter weights.
    #[arg(long, default_value_t = 42)]
    lora_seed: u64,
    /// Head-merge factor m.
    #[arg(long)]
    head_merge: Option<usize>,
    /// Grouping strategy: adjacent | similar | file:<path to permutation JSON>.
    #[arg(long, default_value = "adjacent")]
    grouping: String,
    /// Calibration prompts for similarity analysis.
    #[arg(long, default_value_t = 4)]
    calib_prompts: usize,
    /// Calibration prompt length.
    #[arg(long, default_value_t = 8)]
    calib_len: usize,
    /// Calibration seed.
    #[arg(long, default_value_t = 7)]
    calib_seed: u64,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    transforms: TransformFlags,
    /// MPC backend to execute (dealer2pc | rep3pc).
    #[arg(long, default_value = "dealer2pc")]
    backend: String,
    /// Comma-separated prompt token ids; random when omitted.
    #[arg(long)]
    prompt: Option<String>,
    /// Random prompt length (used when --prompt is omitted).
    #[arg(long, default_value_t = 8)]
    prompt_len: usize,
    /// Random prompt seed.
    #[arg(long, default_value_t = 1)]
    prompt_seed: u64,
    /// Number of output tokens.
    #[arg(long, default_value_t = 4)]
    tokens: usize,
    /// Cost table JSON (defaults to the built-in table).
    #[arg(long)]
    cost_table: Option<PathBuf>,
    /// Engine randomness seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report output path.
    #[arg(long, default_value = "report.json")]
    report: PathBuf,
    /// Optional CSV export of the report.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Optional transcript export (JSON lines).
    #[arg(long)]
    transcript: Option<PathBuf>,
    /// Skip the ideal-functionality verification pass.
    #[arg(long)]
    skip_verify: bool,
}

#[derive(Args)]
struct CompareArgs {
    baseline: PathBuf,
    variant: PathBuf,
    /// Write the improvement factors as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the improvement factors as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Head-merge factor the grouping is computed for.
    #[arg(long, default_value_t = 2)]
    merge: usize,
    #[arg(long, default_value_t = 4)]
    calib_prompts: usize,
    #[arg(long, default_value_t = 8)]
    calib_len: usize,
    #[arg(long, default_value_t = 7)]
    calib_seed: u64,
    /// Output directory for distances.json and groupings.json.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct TransformArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    transforms: TransformFlags,
    /// Output directory for config.json, weights.mrlw and manifest.json.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct GenModelArgs {
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    head_dim: usize,
    #[arg(long, default_value_t = 16)]
    ffn_dim: usize,
    #[arg(long, default_value_t = 32)]
    vocab: usize,
    #[arg(long, default_value_t = 32)]
    max_seq: usize,
    #[arg(long, default_value = "exact")]
    softmax: String,
    #[arg(long, default_value = "silu")]
    act: String,
    #[arg(long, default_value_t = 12)]
    scale_bits: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for config.json and weights.mrlw.
    #[arg(long)]
    out_dir: PathBuf,
}

/// Simulation report written by `simulate`: the resolved scenario, outputs,
/// and the per-stage cost report.
#[derive(Serialize, Deserialize)]
struct SimulationReport {
    schema_version: u32,
    scenario: ScenarioEcho,
    tokens: Vec<u32>,
    /// None when verification was skipped.
    verified_against_functionality: Option<bool>,
    cost: CostReport,
    client_plain: PlainOps,
}

#[derive(Serialize, Deserialize)]
struct ScenarioEcho {
    model_config: String,
    weights: String,
    backend: String,
    partition: Partition,
    manifest: TransformManifest,
    prompt: Vec<u32>,
    tokens: usize,
    seed: u64,
    lora_seed: u64,
    calibration: CalibrationConfig,
    cost_table: CostTable,
    resolved_config: ModelConfig,
}

struct Failure {
    code: i32,
    message: String,
}

fn config_err(message: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        message: message.to_string(),
    }
}

fn runtime_err(message: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_RUNTIME,
        message: message.to_string(),
    }
}

fn load_model(args: &ModelArgs) -> Result<PreparedModel, Failure> {
    let text = std::fs::read_to_string(&args.model_config)
        .map_err(|e| config_err(format!("{}: {e}", args.model_config.display())))?;
    let mut cfg = ModelConfig::from_json(&text).map_err(config_err)?;
    if let Some(s) = &args.softmax {
        cfg.softmax = s.parse::<SoftmaxKind>().map_err(config_err)?;
    }
    if let Some(a) = &args.act {
        cfg.activation = a.parse::<ActivationKind>().map_err(config_err)?;
    }
    if let Some(bits) = args.scale_bits {
        cfg.scale_bits = bits;
        cfg.validate().map_err(config_err)?;
    }
    read_weights(&args.weights, &cfg).map_err(config_err)
}

fn parse_grouping(text: &str) -> Result<GroupingSpec, Failure> {
    match text {
        "adjacent" => Ok(GroupingSpec::Adjacent),
        "similar" => Ok(GroupingSpec::Similar),
        other => {
            let path = other
                .strip_prefix("file:")
                .ok_or_else(|| config_err(format!("unknown grouping `{other}`")))?;
            let text =
                std::fs::read_to_string(path).map_err(|e| config_err(format!("{path}: {e}")))?;
            let perm: Vec<usize> =
                serde_json::from_str(&text).map_err(|e| config_err(format!("{path}: {e}")))?;
            Ok(GroupingSpec::Explicit(perm))
        }
    }
}

/// Merge manifest file contents with command-line overrides; a missing
/// freeze entry means the whole model is private (the reference baseline).
fn resolve_manifest(
    flags: &TransformFlags,
    layers: usize,
) -> Result<(TransformManifest, CalibrationConfig), Failure> {
    let mut manifest = match &flags.manifest {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
            TransformManifest::from_json(&text).map_err(config_err)?
        }
        None => TransformManifest::default(),
    };
    if let Some(freeze) = &flags.freeze {
        manifest.freeze = Some(freeze.parse::<Partition>().map_err(config_err)?);
    }
    if manifest.freeze.is_none() {
        manifest.freeze = Some(Partition::fully_private(layers));
    }
    if let Some(rank) = flags.lora_rank {
        manifest.lora = (rank > 0).then(|| LoraConfig::new(rank));
    }
    if let Some(m) = flags.head_merge {
        manifest.head_merge = if m > 1 {
            Some(HeadMergeConfig {
                m,
                grouping: parse_grouping(&flags.grouping)?,
            })
        } else {
            None
        };
    }
    let calib = CalibrationConfig {
        prompts: flags.calib_prompts,
        prompt_len: flags.calib_len,
        seed: flags.calib_seed,
    };
    Ok((manifest, calib))
}

fn resolve_prompt(args: &SimulateArgs, cfg: &ModelConfig) -> Result<Vec<u32>, Failure> {
    match &args.prompt {
        Some(text) => text
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<u32>()
                    .map_err(|e| config_err(format!("prompt token `{t}`: {e}")))
            })
            .collect(),
        None => {
            let mut rng = ChaCha12Rng::seed_from_u64(args.prompt_seed);
            let len = args.prompt_len.clamp(1, cfg.max_seq);
            Ok((0..len)
                .map(|_| rng.gen_range(0..cfg.vocab as u32))
                .collect())
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| runtime_err(format!("{}: {e}", path.display())))
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), Failure> {
    let base = load_model(&args.model)?;
    let (manifest, calib) = resolve_manifest(&args.transforms, base.config.num_layers)?;
    let backend = args.backend.parse::<BackendKind>().map_err(config_err)?;
    let cost_table = match &args.cost_table {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
            CostTable::from_json(&text).map_err(config_err)?
        }
        None => CostTable::default(),
    };
    let (model, partition) =
        apply_manifest(&base, &manifest, &calib, args.transforms.lora_seed).map_err(config_err)?;
    let prompt = resolve_prompt(&args, &model.config)?;

    let pcfg = ProtocolConfig {
        backend,
        partition,
        tokens: args.tokens,
        seed: args.seed,
        cost_table: cost_table.clone(),
        capture_stats: false,
    };
    let run = run_protocol(&pcfg, &model, &prompt).map_err(runtime_err)?;

    let verified = if args.skip_verify {
        None
    } else {
        let want =
            ideal_functionality(&model, &prompt, args.tokens, |t| t).map_err(runtime_err)?;
        if want != run.tokens {
            return Err(runtime_err(format!(
                "protocol output {:?} diverged from ideal functionality {:?}",
                run.tokens, want
            )));
        }
        Some(true)
    };

    let report = SimulationReport {
        schema_version: CostReport::SCHEMA_VERSION,
        scenario: ScenarioEcho {
            model_config: args.model.model_config.display().to_string(),
            weights: args.model.weights.display().to_string(),
            backend: backend.name().to_string(),
            partition,
            manifest,
            prompt: prompt.clone(),
            tokens: args.tokens,
            seed: args.seed,
            lora_seed: args.transforms.lora_seed,
            calibration: calib,
            cost_table,
            resolved_config: model.config.clone(),
        },
        tokens: run.tokens.clone(),
        verified_against_functionality: verified,
        cost: run.transcript.report(),
        client_plain: run.transcript.client_plain,
    };
    write_text(
        &args.report,
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    if let Some(csv) = &args.csv {
        let scenario_id = args
            .report
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("scenario");
        write_text(csv, &report.cost.to_csv(scenario_id))?;
    }
    if let Some(path) = &args.transcript {
        write_text(path, &run.transcript.events_jsonl())?;
    }
    println!(
        "tokens: {:?}  verified: {}  report: {}",
        run.tokens,
        verified.map_or("skipped".to_string(), |v| v.to_string()),
        args.report.display()
    );
    Ok(())
}

fn load_report(path: &Path) -> Result<SimulationReport, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let report: SimulationReport =
        serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    if report.schema_version != CostReport::SCHEMA_VERSION {
        return Err(config_err(format!(
            "{}: schema version {} unsupported",
            path.display(),
            report.schema_version
        )));
    }
    Ok(report)
}

fn cmd_compare(args: CompareArgs) -> Result<(), Failure> {
    let baseline = load_report(&args.baseline)?;
    let variant = load_report(&args.variant)?;
    let baseline_id = args
        .baseline
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("baseline");
    let variant_id = args
        .variant
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("variant");
    let imp =
        improvement(baseline_id, &baseline.cost, variant_id, &variant.cost).map_err(config_err)?;
    println!("improvement factors: {baseline_id} / {variant_id}");
    for (stage, ratios) in &imp.stages {
        println!("  [{stage}]");
        for (metric, r) in ratios {
            let v = if r.infinite {
                "inf".to_string()
            } else {
                format!("{:.4}", r.value.unwrap_or(f64::NAN))
            };
            println!("    {metric:<24} {v}");
        }
    }
    if let Some(path) = &args.out {
        write_text(path, &serde_json::to_string_pretty(&imp).expect("serializes"))?;
    }
    if let Some(path) = &args.csv {
        write_text(path, &imp.to_csv())?;
    }
    Ok(())
}

fn cmd_analyze_heads(args: AnalyzeArgs) -> Result<(), Failure> {
    let model = load_model(&args.model)?;
    if args.merge == 0 || model.config.num_heads % args.merge != 0 {
        return Err(config_err(format!(
            "merge factor {} does not divide {} heads",
            args.merge, model.config.num_heads
        )));
    }
    let calib = CalibrationConfig {
        prompts: args.calib_prompts,
        prompt_len: args.calib_len,
        seed: args.calib_seed,
    };
    let prompts = calibration_prompts(&model, &calib);
    let distances = pairwise_distances(&model, &prompts).map_err(runtime_err)?;
    let groupings =
        groupings_from_distances(&distances, args.merge, calib.seed).map_err(runtime_err)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| runtime_err(format!("{}: {e}", args.out.display())))?;
    write_text(
        &args.out.join("distances.json"),
        &serde_json::to_string_pretty(&distances).expect("serializes"),
    )?;
    write_text(
        &args.out.join("groupings.json"),
        &serde_json::to_string_pretty(&groupings).expect("serializes"),
    )?;
    println!(
        "analyzed {} layers x {} heads -> {}",
        model.config.num_layers,
        model.config.num_heads,
        args.out.display()
    );
    Ok(())
}

fn cmd_transform(args: TransformArgs) -> Result<(), Failure> {
    let base = load_model(&args.model)?;
    let (manifest, calib) = resolve_manifest(&args.transforms, base.config.num_layers)?;
    let (model, _) =
        apply_manifest(&base, &manifest, &calib, args.transforms.lora_seed).map_err(config_err)?;
    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| runtime_err(format!("{}: {e}", args.out_dir.display())))?;
    write_text(&args.out_dir.join("config.json"), &model.config.to_json())?;
    write_weights(&args.out_dir.join("weights.mrlw"), &model).map_err(runtime_err)?;
    write_text(&args.out_dir.join("manifest.json"), &manifest.to_json())?;
    println!(
        "transformed model written to {} (heads {}, head_dim {})",
        args.out_dir.display(),
        model.config.num_heads,
        model.config.head_dim
    );
    Ok(())
}

fn cmd_gen_model(args: GenModelArgs) -> Result<(), Failure> {
    let cfg = ModelConfig {
        num_layers: args.layers,
        num_heads: args.heads,
        head_dim: args.head_dim,
        ffn_dim: args.ffn_dim,
        vocab: args.vocab,
        max_seq: args.max_seq,
        activation: args.act.parse().map_err(config_err)?,
        softmax: args.softmax.parse().map_err(config_err)?,
        norm: Default::default(),
        scale_bits: args.scale_bits,
    };
    cfg.validate().map_err(config_err)?;
    let weights = random_weights(&cfg, args.seed).map_err(runtime_err)?;
    let model = PreparedModel::new(cfg.clone(), weights).map_err(runtime_err)?;
    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| runtime_err(format!("{}: {e}", args.out_dir.display())))?;
    write_text(&args.out_dir.join("config.json"), &cfg.to_json())?;
    write_weights(&args.out_dir.join("weights.mrlw"), &model).map_err(runtime_err)?;
    println!(
        "toy model ({} layers, {} heads x {}d, vocab {}) written to {}",
        cfg.num_layers,
        cfg.num_heads,
        cfg.head_dim,
        cfg.vocab,
        args.out_dir.display()
    );
    Ok(())
}

fn main() {
    // die quietly when piped into head/less
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Simulate(args) => cmd_simulate(args),
        Cmd::Compare(args) => cmd_compare(args),
        Cmd::AnalyzeHeads(args) => cmd_analyze_heads(args),
        Cmd::Transform(args) => cmd_transform(args),
        Cmd::GenModel(args) => cmd_gen_model(args),
    };
    if let Err(failure) = result {
        eprintln!("error: {}", failure.message);
        std::process::exit(failure.code);
    }
}
