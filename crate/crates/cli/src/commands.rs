//! The experiment commands. Each writes its outputs plus `manifest.json`
//! into the output directory and returns a summary for callers.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use bovila_core::data::QAExample;
use bovila_core::experiments::{self, ablation_config, GradcheckRow, LevelSummary};
use bovila_core::model::VideoLm;
use bovila_core::stats::{self, MannWhitney};
use bovila_core::trainer::{self, EpochRecord};
use bovila_core::vocab::Vocabulary;
use bovila_core::world::{Episode, World};
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, ExperimentConfig};
use crate::io::{self, load_checkpoint, save_checkpoint, write_csv, write_json, JsonlWriter, RunManifest};

/// Relative error bound of the gradient suite.
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Debug)]
pub enum CmdError {
    Config(ConfigError),
    Io(String),
    Core(bovila_core::Error),
    /// The command ran but its verdict is negative.
    Check(String),
}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Config(_) => 2,
            CmdError::Check(_) => 3,
            _ => 1,
        }
    }
}

impl fmt::Display for CmdError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CmdError::Config(e) => write!(f, "{e}"),
            CmdError::Io(e) => write!(f, "io: {e}"),
            CmdError::Core(e) => write!(f, "{e}"),
            CmdError::Check(e) => write!(f, "check failed: {e}"),
        }
    }
}

impl std::error::Error for CmdError {}

impl From<ConfigError> for CmdError {
    fn from(e: ConfigError) -> Self {
        CmdError::Config(e)
    }
}

impl From<bovila_core::Error> for CmdError {
    fn from(e: bovila_core::Error) -> Self {
        CmdError::Core(e)
    }
}

impl From<String> for CmdError {
    fn from(e: String) -> Self {
        CmdError::Io(e)
    }
}

pub type CmdResult<T> = Result<T, CmdError>;

/// Generated world and its train/validation split.
pub struct Data {
    pub world: World,
    pub train: Vec<Episode>,
    pub val: Vec<Episode>,
}

impl Data {
    pub fn new(cfg: &ExperimentConfig) -> CmdResult<Self> {
        let world = World::new(cfg.world.clone())?;
        let (train, val) = world.generate_split(cfg.data.n_train, cfg.data.n_val);
        Ok(Self { world, train, val })
    }

    pub fn train_examples(&self) -> Vec<QAExample> {
        self.train.iter().map(|e| e.example.clone()).collect()
    }

    pub fn val_examples(&self) -> Vec<QAExample> {
        self.val.iter().map(|e| e.example.clone()).collect()
    }
}

fn start(command: &str, cfg: &ExperimentConfig, seed: u64, out: &Path) -> CmdResult<RunManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| format!("{}: {e}", out.display()))?;
    Ok(RunManifest::new(command, cfg, seed, out))
}

fn finish(manifest: &RunManifest, out: &Path) -> CmdResult<String> {
    write_json(&out.join("manifest.json"), manifest)?;
    Ok(manifest.id())
}

fn fresh_model(cfg: &ExperimentConfig, seed: u64) -> CmdResult<VideoLm> {
    Ok(VideoLm::new(cfg.model_config(), seed)?)
}

#[derive(Serialize)]
struct Tagged<'a, T: Serialize> {
    #[serde(flatten)]
    inner: &'a T,
    manifest: &'a str,
}

// ---- train ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub manifest: String,
    pub epochs_completed: usize,
    pub final_val_acc: Option<f64>,
    pub val_acc_by_kind: BTreeMap<String, f64>,
    pub final_leakage: Option<f64>,
    pub diverged: Option<String>,
    pub trainable_params: usize,
}

fn accuracy_by_kind(model: &VideoLm, vocab: &Vocabulary, val: &[Episode]) -> CmdResult<BTreeMap<String, f64>> {
    let mut tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for ep in val {
        let key = serde_json::to_value(ep.kind).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
        let t = tally.entry(key).or_default();
        t.1 += 1;
        if trainer::predict(model, vocab, &ep.example)? == ep.example.correct_index {
            t.0 += 1;
        }
    }
    Ok(tally.into_iter().map(|(k, (c, n))| (k, c as f64 / n as f64)).collect())
}

/// Train one model; `on_epoch` sees each epoch record as it completes.
fn train_run(
    cfg: &ExperimentConfig,
    data: &Data,
    epochs_path: Option<&Path>,
    manifest_id: &str,
) -> CmdResult<(trainer::TrainOutcome, Vec<EpochRecord>)> {
    let model = fresh_model(cfg, cfg.train.seed)?;
    let mut log = epochs_path.map(JsonlWriter::create).transpose()?;
    let mut write_err = None;
    let out = trainer::train_with(
        model,
        data.world.vocab(),
        &cfg.train,
        &data.train_examples(),
        &data.val_examples(),
        &mut |rec, _| {
            if let Some(w) = log.as_mut() {
                if let Err(e) = w.write(&Tagged { inner: rec, manifest: manifest_id }) {
                    write_err.get_or_insert(e);
                }
            }
        },
    )?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    if let Some(w) = log {
        w.finish()?;
    }
    let history = out.history.clone();
    Ok((out, history))
}

pub fn cmd_train(cfg: &ExperimentConfig, seed: Option<u64>, out: &Path) -> CmdResult<TrainSummary> {
    let mut cfg = cfg.clone();
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let manifest = start("train", &cfg, cfg.train.seed, out)?;
    let id = manifest.id();
    let data = Data::new(&cfg)?;
    let vocab = data.world.vocab();
    io::write_dataset(&out.join("data/train.jsonl"), &data.train, vocab, &id)?;
    io::write_dataset(&out.join("data/val.jsonl"), &data.val, vocab, &id)?;
    let (outcome, history) = train_run(&cfg, &data, Some(&out.join("epochs.jsonl")), &id)?;
    save_checkpoint(&out.join("checkpoint"), &outcome.model, vocab, &cfg, &id)?;
    let summary = TrainSummary {
        manifest: id.clone(),
        epochs_completed: history.len(),
        final_val_acc: history.last().and_then(|r| r.val_acc),
        val_acc_by_kind: accuracy_by_kind(&outcome.model, vocab, &data.val)?,
        final_leakage: history.last().and_then(|r| r.leakage),
        diverged: outcome.diverged.map(|e| e.to_string()),
        trainable_params: outcome.model.trainable_count(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    finish(&manifest, out)?;
    Ok(summary)
}

// ---- ablate ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub row: String,
    pub seed: u64,
    pub enable_reg: bool,
    pub enable_selfq: bool,
    pub enable_feedback: bool,
    pub enable_edl_filter: bool,
    pub final_val_acc: Option<f64>,
    pub final_leakage: Option<f64>,
    pub diverged: Option<String>,
    pub history: Vec<EpochRecord>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub manifest: String,
    pub seeds: Vec<u64>,
    /// Row name and median final validation accuracy, in run order.
    pub medians: Vec<(String, f64)>,
    pub runs: Vec<AblationRun>,
}

impl AblationSummary {
    pub fn median(&self, row: &str) -> Option<f64> {
        self.medians.iter().find(|(r, _)| r == row).map(|(_, m)| *m)
    }
}

fn row_dir(row: &str) -> String {
    row.replace('+', "plus_")
}

pub fn cmd_ablate(cfg: &ExperimentConfig, seed: Option<u64>, out: &Path) -> CmdResult<AblationSummary> {
    let mut cfg = cfg.clone();
    if let Some(s) = seed {
        cfg.ablation.seeds = (0..cfg.ablation.seeds.len() as u64).map(|i| s + i).collect();
    }
    let manifest = start("ablate", &cfg, cfg.ablation.seeds[0], out)?;
    let id = manifest.id();
    let data = Data::new(&cfg)?;
    let mut runs = Vec::new();
    let mut runs_log = JsonlWriter::create(&out.join("runs.jsonl"))?;
    for row in &cfg.ablation.rows {
        for &s in &cfg.ablation.seeds {
            let mut run_cfg = cfg.clone();
            run_cfg.train = ablation_config(&cfg.train, row)?;
            run_cfg.train.seed = s;
            let t0 = std::time::Instant::now();
            let (outcome, history) = train_run(&run_cfg, &data, None, &id)?;
            let seconds = t0.elapsed().as_secs_f64();
            let final_val_acc = history.last().and_then(|r| r.val_acc);
            eprintln!("ablate {row:<10} seed {s}: val acc {final_val_acc:?} ({seconds:.0}s)");
            if cfg.ablation.save_checkpoints {
                let dir = out.join("checkpoints").join(row_dir(row)).join(format!("seed_{s}"));
                save_checkpoint(&dir, &outcome.model, data.world.vocab(), &run_cfg, &id)?;
            }
            let t = &run_cfg.train;
            let run = AblationRun {
                row: row.clone(),
                seed: s,
                enable_reg: t.enable_reg,
                enable_selfq: t.enable_selfq,
                enable_feedback: t.enable_feedback,
                enable_edl_filter: t.enable_edl_filter,
                final_val_acc,
                final_leakage: history.last().and_then(|r| r.leakage),
                diverged: outcome.diverged.map(|e| e.to_string()),
                history,
                seconds,
            };
            // Wall-clock time is reported on stderr only, so files stay
            // reproducible.
            runs_log.write(&Tagged { inner: &AblationRun { seconds: 0.0, ..run.clone() }, manifest: &id })?;
            runs.push(run);
        }
    }
    runs_log.finish()?;

    let mut header = vec!["row".to_string(), "reg".into(), "selfq".into(), "feedback".into(), "filter".into()];
    header.extend(cfg.ablation.seeds.iter().map(|s| format!("seed_{s}")));
    header.extend(["median".to_string(), "manifest".to_string()]);
    let mut rows = Vec::new();
    let mut medians = Vec::new();
    for row in &cfg.ablation.rows {
        let rr: Vec<&AblationRun> = runs.iter().filter(|r| &r.row == row).collect();
        let accs: Vec<f64> = rr.iter().map(|r| r.final_val_acc.unwrap_or(f64::NAN)).collect();
        let med = stats::median(&accs).unwrap_or(f64::NAN);
        medians.push((row.clone(), med));
        let first = rr[0];
        let mut line = vec![
            row.clone(),
            first.enable_reg.to_string(),
            first.enable_selfq.to_string(),
            first.enable_feedback.to_string(),
            first.enable_edl_filter.to_string(),
        ];
        line.extend(accs.iter().map(|a| format!("{a}")));
        line.extend([format!("{med}"), id.clone()]);
        rows.push(line);
    }
    write_csv(&out.join("ablation.csv"), &header, &rows)?;
    finish(&manifest, out)?;
    Ok(AblationSummary { manifest: id, seeds: cfg.ablation.seeds.clone(), medians, runs })
}

// ---- analyses on a checkpoint ----

/// A loaded checkpoint with the validation set of its experiment.
pub struct Trained {
    pub cfg: ExperimentConfig,
    pub model: VideoLm,
    pub vocab: Vocabulary,
    pub val: Vec<QAExample>,
    pub checkpoint_hash: String,
}

pub fn load_trained(checkpoint: &Path, cfg: Option<&ExperimentConfig>) -> CmdResult<Trained> {
    let ck = load_checkpoint(checkpoint)?;
    let cfg = cfg.cloned().unwrap_or_else(|| ck.manifest.experiment.clone());
    cfg.validate()?;
    let data = Data::new(&cfg)?;
    if data.world.vocab().tokens() != ck.vocab.tokens() {
        return Err(CmdError::Check("checkpoint vocabulary differs from the configured world".into()));
    }
    Ok(Trained {
        val: data.val_examples(),
        cfg,
        model: ck.model,
        vocab: ck.vocab,
        checkpoint_hash: ck.manifest.blob_sha256,
    })
}

fn analysis_manifest(command: &str, t: &Trained, seed: Option<u64>, out: &Path) -> CmdResult<(RunManifest, u64)> {
    let seed = seed.unwrap_or(t.cfg.analysis.seed);
    let mut m = start(command, &t.cfg, seed, out)?;
    m.inputs.insert("checkpoint_params_sha256".into(), t.checkpoint_hash.clone());
    Ok((m, seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub manifest: String,
    pub parameter: String,
    pub levels: Vec<f64>,
    pub u_means: Vec<f64>,
    pub accuracies: Vec<f64>,
    /// Spearman correlation between level and mean `u`.
    pub spearman: f64,
    pub non_decreasing: bool,
    pub spearman_min: f64,
    pub passes: bool,
}

fn write_sweep(out: &Path, file: &str, param: &str, levels: &[LevelSummary], id: &str, min: f64) -> CmdResult<SweepSummary> {
    #[derive(Serialize)]
    struct Row<'a> {
        #[serde(rename = "sigma", skip_serializing_if = "Option::is_none")]
        sigma: Option<f64>,
        #[serde(rename = "rho", skip_serializing_if = "Option::is_none")]
        rho: Option<f64>,
        u_values: &'a [f64],
        u_mean: f64,
        accuracy: f64,
        manifest: &'a str,
    }
    let mut w = JsonlWriter::create(&out.join(format!("{file}.jsonl")))?;
    for l in levels {
        let (sigma, rho) = if param == "sigma" { (Some(l.level), None) } else { (None, Some(l.level)) };
        w.write(&Row { sigma, rho, u_values: &l.u_values, u_mean: l.u_mean, accuracy: l.accuracy, manifest: id })?;
    }
    w.finish()?;
    let lv: Vec<f64> = levels.iter().map(|l| l.level).collect();
    let means: Vec<f64> = levels.iter().map(|l| l.u_mean).collect();
    let rho = stats::spearman(&lv, &means)?;
    let summary = SweepSummary {
        manifest: id.to_string(),
        parameter: param.to_string(),
        non_decreasing: means.windows(2).all(|w| w[1] >= w[0]),
        accuracies: levels.iter().map(|l| l.accuracy).collect(),
        levels: lv,
        u_means: means,
        spearman: rho,
        spearman_min: min,
        passes: rho >= min,
    };
    write_json(&out.join(format!("{file}_summary.json")), &summary)?;
    Ok(summary)
}

pub fn cmd_noise_exp(t: &Trained, seed: Option<u64>, out: &Path) -> CmdResult<SweepSummary> {
    let (manifest, seed) = analysis_manifest("noise-exp", t, seed, out)?;
    let id = manifest.id();
    let mode = t.cfg.train.evidence_mode;
    let levels = experiments::noise_sweep(&t.model, &t.vocab, &t.val, &t.cfg.analysis.sigmas, seed, mode)?;
    let s = write_sweep(out, "noise", "sigma", &levels, &id, t.cfg.analysis.spearman_min)?;
    finish(&manifest, out)?;
    Ok(s)
}

pub fn cmd_text_destroy_exp(t: &Trained, seed: Option<u64>, out: &Path) -> CmdResult<SweepSummary> {
    let (manifest, seed) = analysis_manifest("text-destroy-exp", t, seed, out)?;
    let id = manifest.id();
    let mode = t.cfg.train.evidence_mode;
    let levels = experiments::text_destroy_sweep(&t.model, &t.vocab, &t.val, &t.cfg.analysis.rhos, seed, mode)?;
    let s = write_sweep(out, "text_destroy", "rho", &levels, &id, t.cfg.analysis.spearman_min)?;
    finish(&manifest, out)?;
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistGroup {
    pub ids: Vec<u64>,
    pub u: Vec<f64>,
    pub mean_u: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertHist {
    pub manifest: String,
    pub correct: HistGroup,
    pub incorrect: HistGroup,
    pub mann_whitney_u: Option<f64>,
    pub mann_whitney_z: Option<f64>,
    /// One-sided p-value for "incorrect predictions carry larger `u`".
    pub p_value: Option<f64>,
    pub p_max: f64,
    pub passes: bool,
}

pub fn cmd_uncert_hist(t: &Trained, seed: Option<u64>, out: &Path) -> CmdResult<UncertHist> {
    let (manifest, _) = analysis_manifest("uncert-hist", t, seed, out)?;
    let id = manifest.id();
    let split = experiments::uncertainty_by_correctness(&t.model, &t.vocab, &t.val, t.cfg.train.evidence_mode)?;
    let mw: Option<MannWhitney> = if split.correct_u.is_empty() || split.incorrect_u.is_empty() {
        None
    } else {
        Some(stats::mann_whitney_greater(&split.incorrect_u, &split.correct_u)?)
    };
    let group = |ids: Vec<u64>, u: Vec<f64>| HistGroup { mean_u: stats::mean(&u), ids, u };
    let mean_c = stats::mean(&split.correct_u);
    let mean_i = stats::mean(&split.incorrect_u);
    let hist = UncertHist {
        manifest: id,
        correct: group(split.correct_ids, split.correct_u),
        incorrect: group(split.incorrect_ids, split.incorrect_u),
        mann_whitney_u: mw.map(|m| m.u),
        mann_whitney_z: mw.map(|m| m.z),
        p_value: mw.map(|m| m.p_greater),
        p_max: t.cfg.analysis.p_max,
        passes: mw.is_some_and(|m| m.p_greater < t.cfg.analysis.p_max) && mean_i > mean_c,
    };
    write_json(&out.join("uncert_hist.json"), &hist)?;
    finish(&manifest, out)?;
    Ok(hist)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualitySummary {
    pub manifest: String,
    pub n: usize,
    pub spearman_u_vqbar_a: f64,
    pub spearman_u_reg: f64,
    pub both_positive: bool,
}

pub fn cmd_quality_corr(t: &Trained, seed: Option<u64>, out: &Path) -> CmdResult<QualitySummary> {
    if !t.cfg.train.enable_selfq {
        return Err(CmdError::Check("quality-corr needs a model trained with self-questioning".into()));
    }
    let (manifest, seed) = analysis_manifest("quality-corr", t, seed, out)?;
    let id = manifest.id();
    let rows = experiments::quality_rows(&t.model, &t.vocab, &t.val, &t.cfg.train, seed)?;
    let rep = experiments::quality_report(rows)?;
    let header: Vec<String> = ["id", "u", "l_vqbar_a", "l_reg", "u_norm", "l_vqbar_a_norm", "l_reg_norm", "manifest"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let lines: Vec<Vec<String>> = rep
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            vec![
                r.id.to_string(),
                format!("{}", r.u),
                format!("{}", r.l_vqbar_a),
                format!("{}", r.l_reg),
                format!("{}", rep.u_norm[i]),
                format!("{}", rep.l_vqbar_a_norm[i]),
                format!("{}", rep.l_reg_norm[i]),
                id.clone(),
            ]
        })
        .collect();
    write_csv(&out.join("quality.csv"), &header, &lines)?;
    let summary = QualitySummary {
        manifest: id,
        n: rep.rows.len(),
        spearman_u_vqbar_a: rep.spearman_u_vqbar_a,
        spearman_u_reg: rep.spearman_u_reg,
        both_positive: rep.spearman_u_vqbar_a > 0.0 && rep.spearman_u_reg > 0.0,
    };
    write_json(&out.join("quality_summary.json"), &summary)?;
    finish(&manifest, out)?;
    Ok(summary)
}

// ---- gradcheck ----

pub fn cmd_gradcheck(cfg: &ExperimentConfig, seed: Option<u64>, out: &Path) -> CmdResult<Vec<GradcheckRow>> {
    let seed = seed.unwrap_or(0);
    let manifest = start("gradcheck", cfg, seed, out)?;
    let id = manifest.id();
    let world = World::new(cfg.world.clone())?;
    let rows = experiments::gradcheck_suite(&world, &cfg.arch, &cfg.gradcheck, seed)?;
    let header: Vec<String> = ["loss", "points", "entries_checked", "max_rel_error", "worst_param", "pass", "manifest"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let lines: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.loss.clone(),
                r.points.to_string(),
                r.entries_checked.to_string(),
                format!("{:e}", r.max_rel_error),
                r.worst_param.clone().unwrap_or_default(),
                (r.max_rel_error < GRADCHECK_TOL).to_string(),
                id.clone(),
            ]
        })
        .collect();
    write_csv(&out.join("gradcheck.csv"), &header, &lines)?;
    finish(&manifest, out)?;
    if let Some(bad) = rows.iter().find(|r| !(r.max_rel_error < GRADCHECK_TOL)) {
        return Err(CmdError::Check(format!(
            "{} relative error {:e} >= {GRADCHECK_TOL:e}",
            bad.loss, bad.max_rel_error
        )));
    }
    Ok(rows)
}

// ---- edl-breakdown ----

pub fn cmd_edl_breakdown(
    cfg: &ExperimentConfig,
    seed: Option<u64>,
    out: &Path,
) -> CmdResult<Vec<experiments::BreakdownRow>> {
    let mut cfg = cfg.clone();
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let manifest = start("edl-breakdown", &cfg, cfg.train.seed, out)?;
    let id = manifest.id();
    let data = Data::new(&cfg)?;
    let val = data.val_examples();
    let probe = &val[..cfg.breakdown.probe_examples.min(val.len())];
    let model = fresh_model(&cfg, cfg.train.seed)?;
    let rows =
        experiments::edl_breakdown(&model, data.world.vocab(), &cfg.train, &data.train_examples(), &val, probe)?;
    let mut w = JsonlWriter::create(&out.join("breakdown.jsonl"))?;
    for r in &rows {
        w.write(&Tagged { inner: r, manifest: &id })?;
    }
    w.finish()?;
    let header: Vec<String> =
        ["variant", "epoch", "zero_fraction", "mean_u", "manifest"].iter().map(|s| s.to_string()).collect();
    let mut lines = Vec::new();
    for r in &rows {
        let name = serde_json::to_value(r.variant).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
        for (e, (z, u)) in r.zero_fraction.iter().zip(&r.mean_u).enumerate() {
            lines.push(vec![name.clone(), (e + 1).to_string(), format!("{z}"), format!("{u}"), id.clone()]);
        }
    }
    write_csv(&out.join("breakdown_epochs.csv"), &header, &lines)?;
    finish(&manifest, out)?;
    Ok(rows)
}

/// Default output directory for a command.
pub fn default_out(command: &str) -> PathBuf {
    PathBuf::from("runs").join(command)
}
