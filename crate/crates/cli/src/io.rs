//! On-disk formats: run manifests, checkpoints, datasets and the small
//! JSON/JSONL/CSV writers every command shares.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use bovila_core::data::{QAExample, VideoFeatures};
use bovila_core::model::{ModelConfig, VideoLm};
use bovila_core::vocab::Vocabulary;
use bovila_core::world::{Episode, QuestionKind};
use bovila_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

pub type IoResult<T> = Result<T, String>;

fn ctx<E: std::fmt::Display>(what: impl std::fmt::Display) -> impl FnOnce(E) -> String {
    move |e| format!("{what}: {e}")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn code_version() -> String {
    format!("bovila {}", env!("CARGO_PKG_VERSION"))
}

/// Everything that determines a command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub code_version: String,
    pub code_hash: String,
    pub output_dir: String,
    /// Input artifacts by role, with their content hashes.
    pub inputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &ExperimentConfig, seed: u64, out: &Path) -> Self {
        let version = code_version();
        Self {
            command: command.to_string(),
            config: config.clone(),
            seed,
            code_hash: env!("BOVILA_SOURCE_HASH").to_string(),
            code_version: version,
            output_dir: out.display().to_string(),
            inputs: BTreeMap::new(),
        }
    }

    /// Content hash of the manifest itself; every output file carries it.
    pub fn id(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("manifest serializes"))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> IoResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(ctx(dir.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(ctx(path.display()))?;
    text.push('\n');
    fs::write(path, text).map_err(ctx(path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> IoResult<T> {
    let text = fs::read_to_string(path).map_err(ctx(path.display()))?;
    serde_json::from_str(&text).map_err(ctx(path.display()))
}

/// Writes one JSON value per line.
pub struct JsonlWriter {
    out: BufWriter<fs::File>,
    path: PathBuf,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> IoResult<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(ctx(dir.display()))?;
        }
        let f = fs::File::create(path).map_err(ctx(path.display()))?;
        Ok(Self { out: BufWriter::new(f), path: path.to_path_buf() })
    }

    pub fn write<T: Serialize>(&mut self, value: &T) -> IoResult<()> {
        serde_json::to_writer(&mut self.out, value).map_err(ctx(self.path.display()))?;
        self.out.write_all(b"\n").map_err(ctx(self.path.display()))
    }

    pub fn finish(mut self) -> IoResult<()> {
        self.out.flush().map_err(ctx(self.path.display()))
    }
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> IoResult<Vec<T>> {
    let f = fs::File::open(path).map_err(ctx(path.display()))?;
    BufReader::new(f)
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|(i, l)| {
            let l = l.map_err(ctx(path.display()))?;
            serde_json::from_str(&l).map_err(ctx(format!("{}:{}", path.display(), i + 1)))
        })
        .collect()
}

pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> IoResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(ctx(dir.display()))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(ctx(path.display()))?;
    w.write_record(header).map_err(ctx(path.display()))?;
    for r in rows {
        w.write_record(r).map_err(ctx(path.display()))?;
    }
    w.flush().map_err(ctx(path.display()))
}

// ---- checkpoints ----

const CHECKPOINT_FORMAT: &str = "bovila-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Always `"f64"`.
    pub dtype: String,
    /// Offset into the blob, in `f64` values.
    pub offset: usize,
    pub len: usize,
}

/// `manifest.json` of a checkpoint directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub model: ModelConfig,
    pub experiment: ExperimentConfig,
    pub tensors: Vec<TensorEntry>,
    /// Little-endian `f64` values of every tensor, in `tensors` order.
    pub blob: String,
    pub blob_sha256: String,
    pub vocab: String,
    /// Id of the run manifest that produced the checkpoint.
    pub run: String,
}

pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub model: VideoLm,
    pub vocab: Vocabulary,
}

pub fn save_checkpoint(
    dir: &Path,
    model: &VideoLm,
    vocab: &Vocabulary,
    experiment: &ExperimentConfig,
    run: &str,
) -> IoResult<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(ctx(dir.display()))?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for p in model.params().iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            dtype: "f64".into(),
            offset: blob.len() / 8,
            len: p.value.len(),
        });
        for x in p.value.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(dir.join("params.bin"), &blob).map_err(ctx(dir.display()))?;
    write_json(&dir.join("vocab.json"), &vocab.tokens())?;
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        model: model.config().clone(),
        experiment: experiment.clone(),
        tensors,
        blob: "params.bin".into(),
        blob_sha256: sha256_hex(&blob),
        vocab: "vocab.json".into(),
        run: run.to_string(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> IoResult<Checkpoint> {
    let manifest: CheckpointManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(format!("{}: unsupported checkpoint format `{}`", dir.display(), manifest.format));
    }
    let blob_path = dir.join(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(ctx(blob_path.display()))?;
    if sha256_hex(&blob) != manifest.blob_sha256 {
        return Err(format!("{}: blob hash mismatch", blob_path.display()));
    }
    let values: Vec<f64> = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let mut loaded = Vec::new();
    for t in &manifest.tensors {
        if t.dtype != "f64" {
            return Err(format!("{}: tensor `{}` has unsupported dtype {}", dir.display(), t.name, t.dtype));
        }
        let data = values
            .get(t.offset..t.offset + t.len)
            .ok_or_else(|| format!("{}: tensor `{}` outside blob", dir.display(), t.name))?
            .to_vec();
        loaded.push((t.name.clone(), Tensor::new(t.shape.clone(), data).map_err(ctx(&t.name))?));
    }
    let model = VideoLm::from_params(manifest.model.clone(), loaded).map_err(ctx(dir.display()))?;
    let tokens: Vec<String> = read_json(&dir.join(&manifest.vocab))?;
    let vocab = Vocabulary::from_tokens(tokens).map_err(ctx(dir.display()))?;
    Ok(Checkpoint { manifest, model, vocab })
}

// ---- datasets ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub slots: usize,
    pub width: usize,
    /// Little-endian `f32` values, base64.
    pub f32le: String,
}

/// One JSONL line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub id: u64,
    pub kind: QuestionKind,
    pub seed_question: Vec<String>,
    pub answer: Vec<String>,
    pub options: Vec<Vec<String>>,
    pub correct_index: usize,
    pub video: VideoRecord,
    pub manifest: String,
}

pub fn episode_record(ep: &Episode, vocab: &Vocabulary, manifest: &str) -> EpisodeRecord {
    let words = |ids: &[usize]| ids.iter().map(|&t| vocab.token(t).to_string()).collect::<Vec<_>>();
    let ex = &ep.example;
    let bytes: Vec<u8> = ex.video.data.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
    EpisodeRecord {
        id: ex.id,
        kind: ep.kind,
        seed_question: words(&ex.seed_question),
        answer: words(&ex.answer),
        options: ex.options.iter().map(|o| words(o)).collect(),
        correct_index: ex.correct_index,
        video: VideoRecord { slots: ex.video.slots, width: ex.video.width, f32le: B64.encode(bytes) },
        manifest: manifest.to_string(),
    }
}

pub fn example_from_record(r: &EpisodeRecord, vocab: &Vocabulary) -> IoResult<QAExample> {
    let ids = |ws: &[String]| ws.iter().map(|w| vocab.id(w).map_err(|e| e.to_string())).collect::<IoResult<Vec<_>>>();
    let bytes = B64.decode(&r.video.f32le).map_err(ctx(format!("episode {}", r.id)))?;
    if bytes.len() % 4 != 0 {
        return Err(format!("episode {}: video blob is not a whole number of f32", r.id));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    let ex = QAExample {
        id: r.id,
        video: VideoFeatures::new(r.video.slots, r.video.width, data).map_err(ctx(format!("episode {}", r.id)))?,
        seed_question: ids(&r.seed_question)?,
        answer: ids(&r.answer)?,
        options: r.options.iter().map(|o| ids(o)).collect::<IoResult<Vec<_>>>()?,
        correct_index: r.correct_index,
    };
    ex.validate().map_err(ctx(format!("episode {}", r.id)))?;
    Ok(ex)
}

pub fn write_dataset(path: &Path, episodes: &[Episode], vocab: &Vocabulary, manifest: &str) -> IoResult<()> {
    let mut w = JsonlWriter::create(path)?;
    for ep in episodes {
        w.write(&episode_record(ep, vocab, manifest))?;
    }
    w.finish()
}

pub fn read_dataset(path: &Path, vocab: &Vocabulary) -> IoResult<Vec<QAExample>> {
    read_jsonl::<EpisodeRecord>(path)?.iter().map(|r| example_from_record(r, vocab)).collect()
}
