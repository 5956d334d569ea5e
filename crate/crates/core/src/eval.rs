//! Judged evaluation: five-axis metric prompts, a deterministic stub judge,
//! an HTTP judge, per-sample score records, and scorecard aggregation with
//! fixed display rounding.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::data::InstructionSample;
use crate::model::{Model, ModelError, PreparedSample};
use crate::tokenizer;

/// Environment variable holding the bearer token for the HTTP judge.
pub const JUDGE_TOKEN_VAR: &str = "AVX_JUDGE_TOKEN";

/// One initial call plus three retries on unparsable replies.
pub const JUDGE_ATTEMPTS: usize = 4;

/// Bump when the judge prompt wording changes; recorded scores are only
/// comparable within one prompt version.
pub const JUDGE_PROMPT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("judge transport failure: {0}")]
    Transport(String),
    #[error("judge reply had no \"Score: N\" line after {attempts} attempts; last reply: {raw:?}")]
    JudgeFormat { attempts: usize, raw: String },
    #[error("{JUDGE_TOKEN_VAR} is not set; the api judge needs a bearer token")]
    MissingToken,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
}

impl EvalError {
    /// Transport failures are the only retryable class: the judge endpoint
    /// may come back, a malformed reply will not.
    pub fn is_transport(&self) -> bool {
        matches!(self, EvalError::Transport(_))
    }
}

/// The five scored axes. Serialized names are the lowercase variant names.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Correctness,
    Detail,
    Context,
    Temporal,
    Consistency,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::Correctness,
        Metric::Detail,
        Metric::Context,
        Metric::Temporal,
        Metric::Consistency,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Correctness => "correctness",
            Metric::Detail => "detail",
            Metric::Context => "context",
            Metric::Temporal => "temporal",
            Metric::Consistency => "consistency",
        }
    }

    pub fn parse(s: &str) -> Option<Metric> {
        Metric::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Consistency compares the two paired predictions; every other metric
    /// compares the prediction against the reference answer.
    pub fn needs_pair(self) -> bool {
        matches!(self, Metric::Consistency)
    }

    fn aspect(self) -> &'static str {
        match self {
            Metric::Correctness => "factual correctness of the candidate answer against the reference",
            Metric::Detail => "level of concrete descriptive detail in the candidate answer",
            Metric::Context => "how well the candidate answer stays grounded in the question's context",
            Metric::Temporal => "whether the candidate answer gets the order and timing of events right",
            Metric::Consistency => "agreement between the two answers to the two phrasings of one question",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Lowercased alphanumeric runs; everything else separates tokens.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            for lc in ch.to_lowercase() {
                cur.push(lc);
            }
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Token-overlap score in 1..=5. With multiset overlap `o` and token counts
/// `lp`, `lr`, the bin is `min(5, 10*o / (lp + lr) + 1)` in integer
/// arithmetic, which places F1 = 2o/(lp+lr) into [0,0.2) -> 1 up through
/// [0.8,1] -> 5 without any float boundary error. Two empty texts match (5);
/// exactly one empty scores 1.
pub fn stub_score(reference: &str, prediction: &str) -> u8 {
    let r = normalize_tokens(reference);
    let p = normalize_tokens(prediction);
    if r.is_empty() && p.is_empty() {
        return 5;
    }
    if r.is_empty() || p.is_empty() {
        return 1;
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &r {
        *counts.entry(t.as_str()).or_insert(0) += 1;
    }
    let mut overlap = 0usize;
    for t in &p {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    let score = 10 * overlap / (r.len() + p.len()) + 1;
    score.min(5) as u8
}

/// Everything a judge sees about one (sample, metric) pairing.
pub struct JudgeRequest<'a> {
    pub sample_id: &'a str,
    pub metric: Metric,
    pub question: &'a str,
    pub reference: &'a str,
    pub prediction: &'a str,
    pub paired_question: Option<&'a str>,
    pub paired_prediction: Option<&'a str>,
}

/// A judge returns raw reply text; parsing is shared so the stub exercises
/// the same path as the HTTP judge.
pub trait Judge: Send + Sync {
    fn id(&self) -> &'static str;
    fn reply(&self, req: &JudgeRequest<'_>) -> Result<String, EvalError>;
}

/// Offline judge: bins token overlap and phrases it like a rubric reply.
pub struct StubJudge;

impl Judge for StubJudge {
    fn id(&self) -> &'static str {
        "stub"
    }

    fn reply(&self, req: &JudgeRequest<'_>) -> Result<String, EvalError> {
        let (a, b) = if req.metric.needs_pair() {
            (req.prediction, req.paired_prediction.unwrap_or(""))
        } else {
            (req.reference, req.prediction)
        };
        let score = stub_score(a, b);
        let o = {
            let mut counts: BTreeMap<String, usize> = BTreeMap::new();
            for t in normalize_tokens(a) {
                *counts.entry(t).or_insert(0) += 1;
            }
            let mut o = 0usize;
            for t in normalize_tokens(b) {
                if let Some(c) = counts.get_mut(&t) {
                    if *c > 0 {
                        *c -= 1;
                        o += 1;
                    }
                }
            }
            o
        };
        Ok(format!(
            "Score: {score}\nRationale: {o} overlapping tokens across {} and {} for {}.",
            normalize_tokens(a).len(),
            normalize_tokens(b).len(),
            req.metric,
        ))
    }
}

/// HTTP judge. Posts `{"system", "user"}` JSON with a bearer token and
/// expects `{"text": "..."}` back within the timeout.
pub struct ApiJudge {
    endpoint: String,
    token: String,
    agent: ureq::Agent,
}

impl ApiJudge {
    pub fn new(endpoint: impl Into<String>, token: impl Into<String>, timeout: Duration) -> ApiJudge {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        ApiJudge {
            endpoint: endpoint.into(),
            token: token.into(),
            agent,
        }
    }

    /// Token from `AVX_JUDGE_TOKEN`, 30 second timeout.
    pub fn from_env(endpoint: impl Into<String>) -> Result<ApiJudge, EvalError> {
        let token = std::env::var(JUDGE_TOKEN_VAR).map_err(|_| EvalError::MissingToken)?;
        Ok(ApiJudge::new(endpoint, token, Duration::from_secs(30)))
    }
}

impl Judge for ApiJudge {
    fn id(&self) -> &'static str {
        "api"
    }

    fn reply(&self, req: &JudgeRequest<'_>) -> Result<String, EvalError> {
        let body = serde_json::json!({
            "system": system_prompt(req.metric),
            "user": user_prompt(req),
        });
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.token))
            .send_json(&body)
            .map_err(|e| EvalError::Transport(e.to_string()))?;
        let v: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| EvalError::Transport(e.to_string()))?;
        v.get("text")
            .and_then(|t| t.as_str())
            .map(str::to_owned)
            .ok_or_else(|| EvalError::Transport(format!("judge reply has no text field: {v}")))
    }
}

pub fn system_prompt(metric: Metric) -> String {
    format!(
        "You grade answers from an audio-visual assistant (rubric v{JUDGE_PROMPT_VERSION}). \
         Judge only the {}. Reply with a line \"Score: N\" where N is an integer from 1 \
         (worst) to 5 (best), then one sentence of rationale.",
        metric.aspect()
    )
}

pub fn user_prompt(req: &JudgeRequest<'_>) -> String {
    if req.metric.needs_pair() {
        format!(
            "Question A: {}\nAnswer A: {}\nQuestion B: {}\nAnswer B: {}",
            req.question,
            req.prediction,
            req.paired_question.unwrap_or(""),
            req.paired_prediction.unwrap_or(""),
        )
    } else {
        format!(
            "Question: {}\nReference answer: {}\nCandidate answer: {}",
            req.question, req.reference, req.prediction,
        )
    }
}

/// Extract (score, rationale) from a reply containing a `Score: N` marker
/// with N in 1..=5. The rationale is whatever follows the number, minus
/// separator punctuation and an optional `Rationale:` label; if nothing
/// follows, the whole reply stands in.
pub fn parse_judge_reply(reply: &str) -> Option<(u8, String)> {
    let idx = reply.find("Score:")?;
    let rest = reply[idx + "Score:".len()..].trim_start();
    let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
    if digits.is_empty() {
        return None;
    }
    let score: u32 = digits.parse().ok()?;
    if !(1..=5).contains(&score) {
        return None;
    }
    let mut after = rest[digits.len()..]
        .trim_start_matches(|c: char| c.is_whitespace() || matches!(c, '.' | ',' | ':' | ';' | '-'));
    if let Some(stripped) = after.strip_prefix("Rationale:") {
        after = stripped.trim_start();
    }
    let rationale = if after.trim().is_empty() {
        reply.trim().to_string()
    } else {
        after.trim().to_string()
    };
    Some((score as u8, rationale))
}

/// Ask once, retry up to three more times while replies fail to parse.
/// Transport errors are never retried here; they surface immediately so the
/// caller can distinguish a dead endpoint from a chatty one.
pub fn judge_one(judge: &dyn Judge, req: &JudgeRequest<'_>) -> Result<(u8, String), EvalError> {
    let mut last = String::new();
    for _ in 0..JUDGE_ATTEMPTS {
        let reply = judge.reply(req)?;
        if let Some(parsed) = parse_judge_reply(&reply) {
            return Ok(parsed);
        }
        last = reply;
    }
    Err(EvalError::JudgeFormat {
        attempts: JUDGE_ATTEMPTS,
        raw: last,
    })
}

/// One scored (sample, metric) pairing, the unit persisted to records JSONL.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    pub metric: Metric,
    pub score: u8,
    pub rationale: String,
    pub judge: String,
}

/// Model outputs for one sample, persisted so judging can be replayed
/// without regenerating.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub prediction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paired_prediction: Option<String>,
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<(), EvalError> {
    let err = |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(err)?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).expect("eval rows serialize");
        writeln!(w, "{line}").map_err(err)?;
    }
    w.flush().map_err(err)
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, EvalError> {
    let file = File::open(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|source| EvalError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[EvalRecord]) -> Result<(), EvalError> {
    write_lines(path, records)
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>, EvalError> {
    read_lines(path)
}

pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<(), EvalError> {
    write_lines(path, predictions)
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>, EvalError> {
    read_lines(path)
}

/// Raw per-metric aggregate; `mean` keeps full f64 precision.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricStat {
    pub mean: f64,
    pub n: usize,
}

/// Aggregated results. Means stay unrounded here; `to_json` applies the
/// display rounding.
#[derive(Clone, Debug, PartialEq)]
pub struct Scorecard {
    pub metrics: BTreeMap<String, MetricStat>,
    pub overall: f64,
    pub excluded: Vec<String>,
}

impl Scorecard {
    /// `{metrics: {name: {mean, n}}, overall, excluded}` with means rounded
    /// for display.
    pub fn to_json(&self) -> serde_json::Value {
        let mut metrics = serde_json::Map::new();
        for (name, stat) in &self.metrics {
            metrics.insert(
                name.clone(),
                serde_json::json!({"mean": round2(stat.mean), "n": stat.n}),
            );
        }
        serde_json::json!({
            "metrics": metrics,
            "overall": round2(self.overall),
            "excluded": self.excluded,
        })
    }
}

/// Round half up to two decimals: floor(x * 100 + 0.5) / 100, evaluated in
/// f64 exactly as written. Display rounding only; aggregation keeps full
/// precision.
pub fn round2(x: f64) -> f64 {
    (x * 100.0 + 0.5).floor() / 100.0
}

/// Sequential left-to-right mean; 0 for an empty slice.
pub fn mean_of(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Group records by metric and average. Requested metrics with no records
/// are excluded (with a warning) rather than counted as zero; `overall` is
/// the unweighted mean of the included metric means. Integer scores sum
/// exactly in f64, so any permutation of `records` aggregates identically.
pub fn aggregate(records: &[EvalRecord], requested: &[Metric]) -> (Scorecard, Vec<String>) {
    let mut groups: BTreeMap<&'static str, (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = groups.entry(r.metric.name()).or_insert((0.0, 0));
        e.0 += r.score as f64;
        e.1 += 1;
    }
    let mut metrics = BTreeMap::new();
    for (name, (sum, n)) in &groups {
        metrics.insert(
            name.to_string(),
            MetricStat {
                mean: sum / *n as f64,
                n: *n,
            },
        );
    }
    let mut excluded = Vec::new();
    let mut warnings = Vec::new();
    for m in requested {
        if !metrics.contains_key(m.name()) {
            excluded.push(m.name().to_string());
            warnings.push(format!("metric {m}: no records, excluded from the scorecard"));
        }
    }
    let means: Vec<f64> = metrics.values().map(|s| s.mean).collect();
    let overall = mean_of(&means);
    (
        Scorecard {
            metrics,
            overall,
            excluded,
        },
        warnings,
    )
}

pub struct EvalOptions {
    pub metrics: Vec<Metric>,
    pub max_new: usize,
    pub zero_audio: bool,
    pub parallelism: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            metrics: Metric::ALL.to_vec(),
            max_new: 48,
            zero_audio: false,
            parallelism: 4,
        }
    }
}

pub struct EvalRun {
    pub predictions: Vec<Prediction>,
    pub records: Vec<EvalRecord>,
    pub scorecard: Scorecard,
    pub warnings: Vec<String>,
}

/// Greedy predictions for every sample, in order. The paired question is
/// answered too when consistency is requested; encoded media are reused
/// between the two passes.
pub fn generate_predictions(
    model: &Model,
    samples: &[InstructionSample],
    root: &Path,
    opts: &EvalOptions,
) -> Result<Vec<Prediction>, EvalError> {
    let want_pair = opts.metrics.contains(&Metric::Consistency);
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let prepared = model.prepare(
            s.audio_path(root).as_deref(),
            s.frames_path(root).as_deref(),
            &s.question,
            None,
        )?;
        let prediction = model.answer(&prepared, true, opts.max_new, opts.zero_audio)?;
        let paired_prediction = match &s.paired_question {
            Some(pq) if want_pair => {
                let paired = PreparedSample {
                    audio: prepared.audio,
                    video: prepared.video,
                    prompt_ids: tokenizer::encode(pq, true, false),
                    answer_ids: Vec::new(),
                };
                Some(model.answer(&paired, true, opts.max_new, opts.zero_audio)?)
            }
            _ => None,
        };
        out.push(Prediction {
            sample_id: s.id.clone(),
            prediction,
            paired_prediction,
        });
    }
    Ok(out)
}

struct Task<'a> {
    sample_id: &'a str,
    metric: Metric,
    question: &'a str,
    reference: &'a str,
    prediction: &'a str,
    paired_question: Option<&'a str>,
    paired_prediction: Option<&'a str>,
}

impl Task<'_> {
    fn request(&self) -> JudgeRequest<'_> {
        JudgeRequest {
            sample_id: self.sample_id,
            metric: self.metric,
            question: self.question,
            reference: self.reference,
            prediction: self.prediction,
            paired_question: self.paired_question,
            paired_prediction: self.paired_prediction,
        }
    }
}

/// Score saved predictions. Judging runs on up to `opts.parallelism`
/// threads; results land in per-task slots so record order never depends on
/// scheduling. Unparsable-judge failures become warnings and the run
/// continues; a transport failure aborts the whole run.
pub fn judge_predictions(
    samples: &[InstructionSample],
    predictions: &[Prediction],
    judge: &dyn Judge,
    opts: &EvalOptions,
) -> Result<(Vec<EvalRecord>, Vec<String>), EvalError> {
    let by_id: BTreeMap<&str, &Prediction> =
        predictions.iter().map(|p| (p.sample_id.as_str(), p)).collect();
    let mut warnings = Vec::new();
    let mut tasks = Vec::new();
    for s in samples {
        let Some(pred) = by_id.get(s.id.as_str()) else {
            warnings.push(format!("sample {}: no saved prediction, skipping", s.id));
            continue;
        };
        for &metric in &opts.metrics {
            if metric.needs_pair() {
                let Some(pp) = pred.paired_prediction.as_deref() else {
                    continue;
                };
                tasks.push(Task {
                    sample_id: &s.id,
                    metric,
                    question: &s.question,
                    reference: "",
                    prediction: &pred.prediction,
                    paired_question: s.paired_question.as_deref(),
                    paired_prediction: Some(pp),
                });
            } else {
                let Some(reference) = s.answer.as_deref() else {
                    warnings.push(format!(
                        "sample {}: no reference answer, skipping {metric}",
                        s.id
                    ));
                    continue;
                };
                tasks.push(Task {
                    sample_id: &s.id,
                    metric,
                    question: &s.question,
                    reference,
                    prediction: &pred.prediction,
                    paired_question: None,
                    paired_prediction: None,
                });
            }
        }
    }

    let n = tasks.len();
    let slots: Vec<Mutex<Option<Result<(u8, String), EvalError>>>> =
        (0..n).map(|_| Mutex::new(None)).collect();
    let cursor = AtomicUsize::new(0);
    let workers = opts.parallelism.max(1).min(n.max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = cursor.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let outcome = judge_one(judge, &tasks[i].request());
                *slots[i].lock().expect("slot lock") = Some(outcome);
            });
        }
    });

    let mut records = Vec::with_capacity(n);
    for (task, slot) in tasks.iter().zip(slots) {
        let outcome = slot.into_inner().expect("slot lock").expect("every slot filled");
        match outcome {
            Ok((score, rationale)) => records.push(EvalRecord {
                sample_id: task.sample_id.to_string(),
                metric: task.metric,
                score,
                rationale,
                judge: judge.id().to_string(),
            }),
            Err(EvalError::JudgeFormat { attempts, raw }) => warnings.push(format!(
                "sample {} {}: judge reply unparsable after {attempts} attempts ({raw:?}), skipping",
                task.sample_id, task.metric
            )),
            Err(other) => return Err(other),
        }
    }
    Ok((records, warnings))
}

/// Generate, judge, aggregate. Persistence is the caller's job; everything
/// needed to replay is in the returned `predictions` and `records`.
pub fn run_eval(
    model: &Model,
    samples: &[InstructionSample],
    root: &Path,
    judge: &dyn Judge,
    opts: &EvalOptions,
) -> Result<EvalRun, EvalError> {
    let predictions = generate_predictions(model, samples, root, opts)?;
    let (records, mut warnings) = judge_predictions(samples, &predictions, judge, opts)?;
    let (scorecard, agg_warnings) = aggregate(&records, &opts.metrics);
    warnings.extend(agg_warnings);
    Ok(EvalRun {
        predictions,
        records,
        scorecard,
        warnings,
    })
}
