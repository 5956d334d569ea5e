use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use avx_core::checkpoint::{self, CheckpointError};
use avx_core::data::{self, DataError};
use avx_core::eval::{self, ApiJudge, EvalError, EvalOptions, Judge, Metric, StubJudge};
use avx_core::model::{adapter_path, merge_adapters, sidecar_path, AvlmConfig, Model, ModelError};
use avx_core::train::{self, StageId, TrainConfig, TrainError};

/// Exit codes: 0 success, 1 validation findings, 2 usage or bad input,
/// 3 numeric abort, 4 transport failure.
struct Fail {
    code: u8,
    err: anyhow::Error,
}

impl Fail {
    fn usage(err: anyhow::Error) -> Fail {
        Fail { code: 2, err }
    }
}

impl From<anyhow::Error> for Fail {
    fn from(err: anyhow::Error) -> Fail {
        Fail { code: 2, err }
    }
}

impl From<DataError> for Fail {
    fn from(err: DataError) -> Fail {
        Fail { code: 2, err: err.into() }
    }
}

impl From<ModelError> for Fail {
    fn from(err: ModelError) -> Fail {
        Fail { code: 2, err: err.into() }
    }
}

impl From<CheckpointError> for Fail {
    fn from(err: CheckpointError) -> Fail {
        Fail { code: 2, err: err.into() }
    }
}

impl From<TrainError> for Fail {
    fn from(err: TrainError) -> Fail {
        let code = match &err {
            TrainError::NumericAbort { .. } => 3,
            _ => 2,
        };
        Fail { code, err: err.into() }
    }
}

impl From<EvalError> for Fail {
    fn from(err: EvalError) -> Fail {
        let code = if err.is_transport() { 4 } else { 2 };
        Fail { code, err: err.into() }
    }
}

#[derive(Parser)]
#[command(name = "avx", version, about = "Audio-visual instruction-tuned LM pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthetic fixture generation and benchmark validation
    Data {
        #[command(subcommand)]
        cmd: DataCmd,
    },
    /// Run one training stage
    Train(TrainArgs),
    /// Greedy generation for one sample
    Infer(InferArgs),
    /// Judge a model over a benchmark and aggregate a scorecard
    Eval(EvalArgs),
    /// Checkpoint inspection and adapter merging
    Ckpt {
        #[command(subcommand)]
        cmd: CkptCmd,
    },
}

#[derive(Subcommand)]
enum DataCmd {
    /// Write WAV + frame + JSONL fixtures under --out
    MakeFixtures(MakeFixturesArgs),
    /// Check a benchmark JSONL: ids, media, answer shape
    Validate(ValidateArgs),
}

#[derive(Args)]
struct MakeFixturesArgs {
    /// Number of samples
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Share of samples whose answer depends on audio alone
    #[arg(long, default_value_t = 0.5)]
    audio_frac: f64,
}

#[derive(Args)]
struct ValidateArgs {
    /// Benchmark JSONL; media paths resolve relative to its directory
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Stage: pretrain-audio | pretrain-vision | finetune-av | finetune-vision-only
    #[arg(long)]
    stage: Option<String>,
    /// TOML config; any key may be omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, dotted paths allowed: --set model.lm.lora_rank=16
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Set both the training seed and the model init seed
    #[arg(long)]
    seed: Option<u64>,
    /// Machine-readable stdout: one summary JSON document
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    question: String,
    #[arg(long)]
    audio: Option<PathBuf>,
    #[arg(long)]
    frames: Option<PathBuf>,
    /// Zero the audio token span (grounding ablation)
    #[arg(long)]
    no_audio: bool,
    #[arg(long, default_value_t = 48)]
    max_new: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum JudgeKind {
    Stub,
    Api,
}

#[derive(Args)]
struct EvalArgs {
    /// Required unless --replay is given
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "stub")]
    judge: JudgeKind,
    /// API judge endpoint; auth comes from AVX_JUDGE_TOKEN
    #[arg(long)]
    endpoint: Option<String>,
    /// Comma-separated subset of: correctness,detail,context,temporal,consistency
    #[arg(long)]
    metrics: Option<String>,
    #[arg(long, default_value_t = 48)]
    max_new: usize,
    #[arg(long, default_value_t = 4)]
    parallelism: usize,
    /// Zero the audio token span for every sample
    #[arg(long)]
    no_audio: bool,
    /// Directory for predictions.jsonl, records.jsonl, scorecard.json
    #[arg(long)]
    out: Option<PathBuf>,
    /// Re-aggregate saved records instead of generating and judging
    #[arg(long, value_name = "RECORDS_JSONL")]
    replay: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum CkptCmd {
    /// List name, shape and checksum for every tensor
    Inspect { path: PathBuf },
    /// Fold W + (alpha/rank) B A into the base weights
    MergeLora(MergeArgs),
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long)]
    base: PathBuf,
    /// Defaults to <base stem>.lora.avlm next to the base
    #[arg(long)]
    adapters: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(fail) => {
            eprintln!("error: {:#}", fail.err);
            ExitCode::from(fail.code)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Fail> {
    match cli.cmd {
        Cmd::Data { cmd: DataCmd::MakeFixtures(a) } => cmd_make_fixtures(a),
        Cmd::Data { cmd: DataCmd::Validate(a) } => cmd_validate(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Infer(a) => cmd_infer(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Ckpt { cmd: CkptCmd::Inspect { path } } => cmd_inspect(&path),
        Cmd::Ckpt { cmd: CkptCmd::MergeLora(a) } => cmd_merge(a),
    }
}

fn cmd_make_fixtures(a: MakeFixturesArgs) -> Result<ExitCode, Fail> {
    if !(0.0..=1.0).contains(&a.audio_frac) {
        return Err(Fail::usage(anyhow!("--audio-frac must be in [0, 1], got {}", a.audio_frac)));
    }
    println!(
        "{}",
        serde_json::json!({
            "cmd": "data make-fixtures",
            "n": a.n, "seed": a.seed, "out": a.out, "audio_frac": a.audio_frac,
        })
    );
    let set = data::make_fixtures(&a.out, a.n, a.seed, a.audio_frac)?;
    println!("wrote {} samples under {}", set.count, a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_validate(a: ValidateArgs) -> Result<ExitCode, Fail> {
    println!("{}", serde_json::json!({"cmd": "data validate", "data": a.data}));
    let samples = data::load_jsonl(&a.data, false)?;
    let root = jsonl_root(&a.data);
    let violations = data::validate_benchmark(&samples, &root);
    if violations.is_empty() {
        println!("ok: {} samples", samples.len());
        return Ok(ExitCode::SUCCESS);
    }
    for v in &violations {
        eprintln!("sample {}: {}", v.sample_id, v.what);
    }
    eprintln!("{} violations in {} samples", violations.len(), samples.len());
    Ok(ExitCode::from(1))
}

/// Media paths inside a JSONL are relative to the file's directory.
fn jsonl_root(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if p.as_os_str().is_empty() => PathBuf::from("."),
        Some(p) => p.to_path_buf(),
        None => PathBuf::from("."),
    }
}

/// Parse `KEY=VALUE` where VALUE is any TOML literal; bare words fall back
/// to strings so paths and stage names need no quoting.
fn apply_set(table: &mut toml::Table, spec: &str) -> Result<(), Fail> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Fail::usage(anyhow!("--set wants KEY=VALUE, got {spec:?}")))?;
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(t) => t["v"].clone(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut node = table;
    let mut parts = path.split('.').peekable();
    while let Some(key) = parts.next() {
        if key.is_empty() {
            return Err(Fail::usage(anyhow!("empty key segment in {spec:?}")));
        }
        if parts.peek().is_none() {
            node.insert(key.to_string(), value);
            break;
        }
        let child = node
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = child
            .as_table_mut()
            .ok_or_else(|| Fail::usage(anyhow!("{key} in {spec:?} is not a table")))?;
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode, Fail> {
    let mut table = match &a.config {
        Some(path) => {
            let raw = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            raw.parse::<toml::Table>()
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => toml::Table::new(),
    };
    if let Some(stage) = &a.stage {
        table.insert("stage".into(), toml::Value::String(stage.clone()));
    }
    for spec in &a.sets {
        apply_set(&mut table, spec)?;
    }
    let mut cfg: TrainConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| Fail::usage(anyhow!("config: {e}")))?;
    // CLI stage names are hyphenated; the config schema uses underscores.
    cfg.stage = cfg.stage.replace('-', "_");
    StageId::parse(&cfg.stage)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
        cfg.model.seed = seed;
    }

    let echo = toml::to_string_pretty(&cfg).expect("config serializes");
    if a.json {
        eprintln!("# effective config\n{echo}");
    } else {
        println!("# effective config\n{echo}");
    }

    let samples = data::load_jsonl(&cfg.data, true)?;
    let root = jsonl_root(&cfg.data);
    let model = match &cfg.checkpoint_in {
        Some(path) => Model::load(path)?,
        None => Model::init(cfg.model.clone()),
    };

    let mut report_file = match &cfg.report {
        Some(path) => {
            let f = fs::File::create(path)
                .with_context(|| format!("creating report {}", path.display()))?;
            Some(std::io::BufWriter::new(f))
        }
        None => None,
    };
    let json_mode = a.json;
    let report = train::run_stage(&model, &samples, &root, &cfg, |rec| {
        let line = serde_json::to_string(rec).expect("record serializes");
        match report_file.as_mut() {
            Some(f) => {
                let _ = writeln!(f, "{line}");
            }
            None if json_mode => eprintln!("{line}"),
            None => println!("{line}"),
        }
    })?;
    if let Some(mut f) = report_file {
        let _ = f.flush();
    }

    model.save(&cfg.checkpoint_out)?;
    let summary = serde_json::json!({
        "stage": report.stage,
        "steps": report.steps,
        "final_loss": report.losses.last(),
        "updated_params": report.updated_params,
        "frozen_params": report.frozen_params,
        "wall_seconds": report.wall_seconds,
        "checksum": report.final_checksum,
        "checkpoint": cfg.checkpoint_out,
    });
    if a.json {
        println!("{summary}");
    } else {
        println!(
            "{} done: {} steps, final loss {:.4}, checkpoint {}",
            report.stage,
            report.steps,
            report.losses.last().copied().unwrap_or(f32::NAN),
            cfg.checkpoint_out.display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_infer(a: InferArgs) -> Result<ExitCode, Fail> {
    // Generation owns stdout; the config echo goes to stderr.
    eprintln!(
        "{}",
        serde_json::json!({
            "cmd": "infer", "ckpt": a.ckpt, "question": a.question,
            "audio": a.audio, "frames": a.frames,
            "no_audio": a.no_audio, "max_new": a.max_new,
        })
    );
    for path in [a.audio.as_deref(), a.frames.as_deref()].into_iter().flatten() {
        if !path.exists() {
            return Err(Fail::usage(anyhow!("media path {} does not exist", path.display())));
        }
    }
    let model = Model::load(&a.ckpt)?;
    let sample = model.prepare(a.audio.as_deref(), a.frames.as_deref(), &a.question, None)?;
    let text = model.answer(&sample, true, a.max_new, a.no_audio)?;
    if a.json {
        println!("{}", serde_json::json!({"prediction": text}));
    } else {
        println!("{text}");
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_metrics(spec: Option<&str>) -> Result<Vec<Metric>, Fail> {
    let Some(spec) = spec else {
        return Ok(Metric::ALL.to_vec());
    };
    let mut out = Vec::new();
    for name in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let m = Metric::parse(name)
            .ok_or_else(|| Fail::usage(anyhow!("unknown metric {name:?}")))?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(Fail::usage(anyhow!("--metrics named no metrics")));
    }
    Ok(out)
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode, Fail> {
    eprintln!(
        "{}",
        serde_json::json!({
            "cmd": "eval", "ckpt": a.ckpt, "data": a.data,
            "judge": match a.judge { JudgeKind::Stub => "stub", JudgeKind::Api => "api" },
            "metrics": a.metrics, "max_new": a.max_new, "parallelism": a.parallelism,
            "no_audio": a.no_audio, "out": a.out, "replay": a.replay,
        })
    );
    let metrics = parse_metrics(a.metrics.as_deref())?;

    if let Some(records_path) = &a.replay {
        let records = eval::read_records(records_path)?;
        let (scorecard, warnings) = eval::aggregate(&records, &metrics);
        return emit_scorecard(&a, &scorecard, &warnings, None);
    }

    let ckpt = a
        .ckpt
        .as_ref()
        .ok_or_else(|| Fail::usage(anyhow!("--ckpt is required unless --replay is given")))?;
    let data_path = a
        .data
        .as_ref()
        .ok_or_else(|| Fail::usage(anyhow!("--data is required unless --replay is given")))?;
    // Judge configuration errors should surface before the checkpoint loads.
    let stub;
    let api;
    let judge: &dyn Judge = match a.judge {
        JudgeKind::Stub => {
            stub = StubJudge;
            &stub
        }
        JudgeKind::Api => {
            let endpoint = a
                .endpoint
                .clone()
                .ok_or_else(|| Fail::usage(anyhow!("--judge api needs --endpoint")))?;
            api = ApiJudge::from_env(endpoint)?;
            &api
        }
    };
    let model = Model::load(ckpt)?;
    let samples = data::load_jsonl(data_path, false)?;
    let root = jsonl_root(data_path);
    let opts = EvalOptions {
        metrics,
        max_new: a.max_new,
        zero_audio: a.no_audio,
        parallelism: a.parallelism.max(1),
    };
    let run = eval::run_eval(&model, &samples, &root, judge, &opts)?;

    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        eval::write_predictions(&dir.join("predictions.jsonl"), &run.predictions)?;
        eval::write_records(&dir.join("records.jsonl"), &run.records)?;
        let path = dir.join("scorecard.json");
        let pretty = serde_json::to_string_pretty(&run.scorecard.to_json()).expect("json");
        fs::write(&path, pretty).with_context(|| format!("writing {}", path.display()))?;
    }
    emit_scorecard(&a, &run.scorecard, &run.warnings, Some(run.records.len()))
}

fn emit_scorecard(
    a: &EvalArgs,
    scorecard: &eval::Scorecard,
    warnings: &[String],
    n_records: Option<usize>,
) -> Result<ExitCode, Fail> {
    for w in warnings {
        eprintln!("warning: {w}");
    }
    if let Some(n) = n_records {
        eprintln!("{n} judge records");
    }
    let doc = if a.json {
        serde_json::json!({"scorecard": scorecard.to_json(), "warnings": warnings})
    } else {
        scorecard.to_json()
    };
    if a.json {
        println!("{doc}");
    } else {
        println!("{}", serde_json::to_string_pretty(&doc).expect("json"));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_inspect(path: &Path) -> Result<ExitCode, Fail> {
    println!("{}", serde_json::json!({"cmd": "ckpt inspect", "path": path}));
    let map = checkpoint::load(path)?;
    for (name, t) in &map {
        let dims: Vec<String> = t.dims.iter().map(usize::to_string).collect();
        println!("{name}  [{}]  {}", dims.join("x"), checkpoint::tensor_checksum(t));
    }
    println!("{} tensors", map.len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_merge(a: MergeArgs) -> Result<ExitCode, Fail> {
    let adapters_path = a.adapters.clone().unwrap_or_else(|| adapter_path(&a.base));
    println!(
        "{}",
        serde_json::json!({
            "cmd": "ckpt merge-lora",
            "base": a.base, "adapters": adapters_path, "out": a.out,
        })
    );
    let sidecar = sidecar_path(&a.base);
    let raw = fs::read_to_string(&sidecar)
        .with_context(|| format!("reading config sidecar {}", sidecar.display()))?;
    let cfg: AvlmConfig =
        serde_json::from_str(&raw).with_context(|| format!("parsing {}", sidecar.display()))?;
    let mut base = checkpoint::load(&a.base)?;
    let adapters = checkpoint::load(&adapters_path)?;
    let merged = merge_adapters(&mut base, &adapters, cfg.lm.lora_alpha, cfg.lm.lora_rank)?;
    checkpoint::save(&a.out, &base)?;
    let out_sidecar = sidecar_path(&a.out);
    fs::write(&out_sidecar, &raw).with_context(|| format!("writing {}", out_sidecar.display()))?;
    println!("merged {} weight matrices into {}", merged.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}
