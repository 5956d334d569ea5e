//! Dataset plumbing: the JSONL instruction schema, prompt templates for
//! converting transcription/captioning corpora, synthetic fixture generation,
//! and the benchmark validator.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write as IoWrite};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, CANONICAL_RATE};
use crate::rng::ComponentRng;
use crate::vision::{self, Frame};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}:{line}: duplicate sample id {id}")]
    DuplicateId { path: PathBuf, line: usize, id: String },
    #[error("sample {id} is missing the answer field required for training")]
    MissingAnswer { id: String },
    #[error("template set for {kind} is empty")]
    NoTemplates { kind: &'static str },
    #[error(transparent)]
    Audio(#[from] audio::AudioError),
    #[error(transparent)]
    Vision(#[from] vision::VisionError),
}

/// One line of the dataset container. Media paths are relative to the
/// directory holding the JSONL file. Unknown keys survive a round trip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstructionSample {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<String>,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paired_question: Option<String>,
    #[serde(flatten)]
    pub extras: BTreeMap<String, serde_json::Value>,
}

impl InstructionSample {
    pub fn audio_path(&self, root: &Path) -> Option<PathBuf> {
        self.audio.as_ref().map(|p| root.join(p))
    }

    pub fn frames_path(&self, root: &Path) -> Option<PathBuf> {
        self.frames.as_ref().map(|p| root.join(p))
    }
}

/// Parse one sample per non-empty line. With `require_answer`, a missing
/// answer is an error naming the sample (training needs supervision).
pub fn load_jsonl(path: &Path, require_answer: bool) -> Result<Vec<InstructionSample>, DataError> {
    let file = fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: InstructionSample =
            serde_json::from_str(&line).map_err(|source| DataError::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                source,
            })?;
        if !seen.insert(sample.id.clone()) {
            return Err(DataError::DuplicateId {
                path: path.to_path_buf(),
                line: idx + 1,
                id: sample.id,
            });
        }
        if require_answer && sample.answer.as_deref().map_or(true, str::is_empty) {
            return Err(DataError::MissingAnswer { id: sample.id });
        }
        out.push(sample);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, samples: &[InstructionSample]) -> Result<(), DataError> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io_err)?;
    for s in samples {
        let line = serde_json::to_string(s).expect("sample serializes");
        writeln!(file, "{line}").map_err(io_err)?;
    }
    Ok(())
}

// -------------------------------------------------------------------
// Prompt templates
// -------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Transcribe,
    Caption,
    Qa,
}

impl TaskKind {
    pub fn required_placeholders(self) -> &'static [&'static str] {
        match self {
            TaskKind::Transcribe | TaskKind::Caption => &["{AUDIO}"],
            TaskKind::Qa => &["{VIDEO}", "{QUESTION}"],
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PromptTemplate {
    pub id: u32,
    pub kind: TaskKind,
    pub text: &'static str,
}

impl PromptTemplate {
    /// The template carries exactly the placeholders its task requires.
    pub fn placeholders_ok(&self) -> bool {
        let all = ["{AUDIO}", "{VIDEO}", "{QUESTION}"];
        let required = self.kind.required_placeholders();
        all.iter().all(|p| {
            let count = self.text.matches(p).count();
            if required.contains(p) {
                count == 1
            } else {
                count == 0
            }
        })
    }
}

macro_rules! templates {
    ($kind:expr, $($text:literal),+ $(,)?) => {{
        let mut id = 0u32;
        [$({ id += 1; PromptTemplate { id, kind: $kind, text: $text } }),+]
    }};
}

pub fn transcribe_templates() -> [PromptTemplate; 10] {
    templates!(
        TaskKind::Transcribe,
        "{AUDIO} Transcribe the speech you hear.",
        "Listen to {AUDIO} and write down exactly what is said.",
        "{AUDIO} What are the spoken words in this clip?",
        "Please provide a transcript of {AUDIO}.",
        "Write out the words spoken in {AUDIO}.",
        "{AUDIO} Give a verbatim transcription.",
        "What does the speaker say in {AUDIO}?",
        "Turn the recording {AUDIO} into plain text.",
        "{AUDIO} Type the sentence you just heard.",
        "Produce an exact transcript for {AUDIO}.",
    )
}

pub fn caption_templates() -> [PromptTemplate; 10] {
    templates!(
        TaskKind::Caption,
        "{AUDIO} Describe the sounds in this clip.",
        "Give a short caption for {AUDIO}.",
        "{AUDIO} What is happening acoustically here?",
        "Summarize the audio scene in {AUDIO}.",
        "Write one sentence describing {AUDIO}.",
        "{AUDIO} Caption this recording.",
        "What would you title the sound in {AUDIO}?",
        "Describe what you hear in {AUDIO}.",
        "{AUDIO} Provide a brief description of the audio.",
        "Characterize the overall sound of {AUDIO}.",
    )
}

/// Wrap a (media, text) pair as an instruction sample: the question is a
/// uniformly drawn template (placeholder kept literal, the audio tokens are
/// prepended at assembly), the answer is the source text verbatim.
pub fn to_instruction(
    id: &str,
    audio_rel_path: &str,
    text: &str,
    kind: TaskKind,
    templates: &[PromptTemplate],
    rng: &mut ComponentRng,
) -> Result<InstructionSample, DataError> {
    if templates.is_empty() {
        return Err(DataError::NoTemplates {
            kind: match kind {
                TaskKind::Transcribe => "transcribe",
                TaskKind::Caption => "caption",
                TaskKind::Qa => "qa",
            },
        });
    }
    let t = &templates[rng.below(templates.len())];
    Ok(InstructionSample {
        id: id.to_string(),
        audio: Some(audio_rel_path.to_string()),
        frames: None,
        question: t.text.to_string(),
        answer: Some(text.to_string()),
        paired_question: None,
        extras: BTreeMap::new(),
    })
}

// -------------------------------------------------------------------
// Synthetic fixtures
// -------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct BenchmarkSet {
    pub name: String,
    pub version: u32,
    pub count: usize,
    #[serde(skip)]
    pub samples: Vec<InstructionSample>,
}

const FIXTURE_COLORS: [(&str, [f32; 3]); 4] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.9, 0.1]),
    ("blue", [0.1, 0.1, 0.9]),
    ("yellow", [0.9, 0.9, 0.1]),
];

// Long enough that the sweep crosses several audio pooling windows at the
// desk-preset budget; direction would not survive mean pooling otherwise.
pub const FIXTURE_TONE_SECONDS: f32 = 8.0;
pub const FIXTURE_TONE_LO: f32 = 300.0;
pub const FIXTURE_TONE_HI: f32 = 600.0;
const FIXTURE_FRAME_SIDE: usize = 32;
const FIXTURE_FRAME_COUNT: usize = 4;

/// Linear chirp between the two fixture frequencies, amplitude 0.5.
pub fn chirp(rises: bool) -> Vec<f32> {
    let n = (FIXTURE_TONE_SECONDS * CANONICAL_RATE as f32) as usize;
    let (f0, f1) = if rises {
        (FIXTURE_TONE_LO, FIXTURE_TONE_HI)
    } else {
        (FIXTURE_TONE_HI, FIXTURE_TONE_LO)
    };
    let dur = FIXTURE_TONE_SECONDS as f64;
    (0..n)
        .map(|i| {
            let t = i as f64 / CANONICAL_RATE as f64;
            let phase = 2.0 * std::f64::consts::PI
                * (f0 as f64 * t + (f1 - f0) as f64 * t * t / (2.0 * dur));
            (0.5 * phase.sin()) as f32
        })
        .collect()
}

fn steady_tone(hz: f32) -> Vec<f32> {
    let n = (FIXTURE_TONE_SECONDS * CANONICAL_RATE as f32) as usize;
    (0..n)
        .map(|i| {
            let t = i as f64 / CANONICAL_RATE as f64;
            (0.3 * (2.0 * std::f64::consts::PI * hz as f64 * t).sin()) as f32
        })
        .collect()
}

fn square_frame(color: [f32; 3], top: usize, left: usize) -> Frame {
    let side = FIXTURE_FRAME_SIDE;
    let block = side / 4;
    let mut pixels = vec![0.0f32; side * side * 3];
    for y in top..(top + block).min(side) {
        for x in left..(left + block).min(side) {
            let base = (y * side + x) * 3;
            pixels[base] = color[0];
            pixels[base + 1] = color[1];
            pixels[base + 2] = color[2];
        }
    }
    Frame {
        width: side,
        height: side,
        pixels,
    }
}

/// Generate `n` synthetic samples under `out`: WAV chirps, moving-square
/// frame PNGs, and QA pairs whose answers are recomputable from the media.
/// `audio_frac` controls the share of audio-dependent samples; those get a
/// visually constant clip so the answer is carried by the audio alone, and
/// the complement gets a shared constant tone so color is carried by pixels.
pub fn make_fixtures(
    out: &Path,
    n: usize,
    seed: u64,
    audio_frac: f64,
) -> Result<BenchmarkSet, DataError> {
    let io_err = |path: &Path| {
        let p = path.to_path_buf();
        move |source| DataError::Io { path: p, source }
    };
    let audio_dir = out.join("audio");
    let frames_dir = out.join("frames");
    if n > 0 {
        fs::create_dir_all(&audio_dir).map_err(io_err(&audio_dir))?;
        fs::create_dir_all(&frames_dir).map_err(io_err(&frames_dir))?;
    }
    let mut rng = ComponentRng::for_component(seed, "fixtures");
    let mut samples = Vec::with_capacity(n);
    let mut audio_emitted = 0usize;
    for i in 0..n {
        let want_audio = ((i + 1) as f64 * audio_frac).floor() as usize > audio_emitted;
        if want_audio {
            audio_emitted += 1;
            let idx = audio_emitted - 1;
            let id = format!("aud-{idx:04}");
            let rises = idx % 2 == 0;
            let wav_rel = format!("audio/{id}.wav");
            audio::save_wav_pcm16(&out.join(&wav_rel), &chirp(rises))?;
            // constant gray square: pixels carry nothing about the answer
            let clip_rel = format!("frames/{id}");
            let clip_dir = out.join(&clip_rel);
            fs::create_dir_all(&clip_dir).map_err(io_err(&clip_dir))?;
            for f in 0..FIXTURE_FRAME_COUNT {
                let frame = square_frame([0.5, 0.5, 0.5], 12, 12);
                vision::save_frame_png(&clip_dir, f, &frame)?;
            }
            // Token-disjoint answers: overlap scoring then puts a
            // wrong-direction guess at the bottom bin instead of one below
            // the top, so audio ablations show up clearly.
            let answer = if rises { "The tone rises." } else { "Pitch slides downward." };
            samples.push(InstructionSample {
                id,
                audio: Some(wav_rel),
                frames: Some(clip_rel),
                question: "Listen to the clip. Does the tone rise or fall?".into(),
                answer: Some(answer.into()),
                paired_question: Some("Is the pitch going up or going down?".into()),
                extras: BTreeMap::new(),
            });
        } else {
            let idx = i - audio_emitted;
            let id = format!("vis-{idx:04}");
            let (color_name, color) = FIXTURE_COLORS[rng.below(FIXTURE_COLORS.len())];
            let wav_rel = format!("audio/{id}.wav");
            audio::save_wav_pcm16(&out.join(&wav_rel), &steady_tone(440.0))?;
            let clip_rel = format!("frames/{id}");
            let clip_dir = out.join(&clip_rel);
            fs::create_dir_all(&clip_dir).map_err(io_err(&clip_dir))?;
            let step = FIXTURE_FRAME_SIDE / 2 / FIXTURE_FRAME_COUNT;
            for f in 0..FIXTURE_FRAME_COUNT {
                let frame = square_frame(color, 8, 4 + f * step);
                vision::save_frame_png(&clip_dir, f, &frame)?;
            }
            samples.push(InstructionSample {
                id,
                audio: Some(wav_rel),
                frames: Some(clip_rel),
                question: "What color is the moving square?".into(),
                answer: Some(format!("The square is {color_name}.")),
                paired_question: Some("Which color does the moving shape have?".into()),
                extras: BTreeMap::new(),
            });
        }
    }
    if n > 0 {
        write_jsonl(&out.join("data.jsonl"), &samples)?;
    }
    let set = BenchmarkSet {
        name: "synthetic-fixtures".into(),
        version: 1,
        count: samples.len(),
        samples,
    };
    if n > 0 {
        let meta = serde_json::to_string_pretty(&set).expect("meta serializes");
        let meta_path = out.join("benchmark.json");
        fs::write(&meta_path, meta).map_err(io_err(&meta_path))?;
    }
    Ok(set)
}

// -------------------------------------------------------------------
// Validator
// -------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Violation {
    pub sample_id: String,
    pub what: String,
}

/// Sentences are spans terminated by . ! or ?; a trailing unterminated span
/// counts as one. "Around 2 sentences" is enforced as a 1..=4 band.
pub fn sentence_count(text: &str) -> usize {
    let mut count = 0;
    let mut span_has_content = false;
    for c in text.chars() {
        match c {
            '.' | '!' | '?' => {
                if span_has_content {
                    count += 1;
                    span_has_content = false;
                }
            }
            c if !c.is_whitespace() => span_has_content = true,
            _ => {}
        }
    }
    if span_has_content {
        count += 1;
    }
    count
}

/// Mechanized checks over a benchmark: unique ids, referenced media exist,
/// answers inside the sentence band, paired questions wellformed. Returns
/// violations rather than failing, so a report can show all of them.
pub fn validate_benchmark(samples: &[InstructionSample], root: &Path) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen: HashSet<&str> = HashSet::new();
    for s in samples {
        let mut fail = |what: String| {
            out.push(Violation {
                sample_id: s.id.clone(),
                what,
            })
        };
        if !seen.insert(&s.id) {
            fail("duplicate id".into());
        }
        if s.question.trim().is_empty() {
            fail("empty question".into());
        }
        if let Some(p) = s.audio_path(root) {
            if !p.is_file() {
                fail(format!("missing file {}", p.display()));
            }
        }
        if let Some(p) = s.frames_path(root) {
            if !p.is_dir() {
                fail(format!("missing frames dir {}", p.display()));
            } else if !has_frame_files(&p) {
                fail(format!("frames dir {} has no frames", p.display()));
            }
        }
        match &s.answer {
            None => fail("missing answer".into()),
            Some(a) => {
                let n = sentence_count(a);
                if !(1..=4).contains(&n) {
                    fail(format!("answer length {n} sentences, want 1..=4"));
                }
            }
        }
        if let Some(p) = &s.paired_question {
            if p.trim().is_empty() {
                fail("paired_question is empty".into());
            } else if p == &s.question {
                fail("paired_question repeats the question verbatim".into());
            }
        }
    }
    out
}

fn has_frame_files(dir: &Path) -> bool {
    fs::read_dir(dir)
        .map(|entries| {
            entries
                .filter_map(Result::ok)
                .any(|e| e.path().extension().is_some_and(|x| x == "png"))
        })
        .unwrap_or(false)
}
