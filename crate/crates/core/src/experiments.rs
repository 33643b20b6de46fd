//! Analyses run on a trained model, the ablation switch sets, the gradient
//! suite and the evidence-mode breakdown. Everything here is pure given its
//! seeds; writing results out is the companion crate's job.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::QAExample;
use crate::edl::{self, EvidenceMode};
use crate::error::{Error, Result};
use crate::gradcheck::finite_diff_check_sampled;
use crate::model::{ArchConfig, ModelConfig, QuestionInput, VideoLm};
use crate::param::ParamStore;
use crate::rng::RngStream;
use crate::stats;
use crate::tape::{Tape, Var};
use crate::trainer::{self, StepNoise, TrainConfig, UncertaintySource};
use crate::vocab::Vocabulary;
use crate::world::{corrupt_question, corrupt_video, World};

const TAG_VIDEO_NOISE: u64 = 0x564e_4f49;
const TAG_TEXT_NOISE: u64 = 0x544e_4f49;
const TAG_QUALITY: u64 = 0x5155_414c;
const TAG_FD: u64 = 0x4644_4348;

/// Prediction and its uncertainty for one example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub predicted: usize,
    pub correct: bool,
    pub u: f64,
}

/// Predict by option likelihood, then read `u` off the answer pass of the
/// predicted option.
pub fn score(model: &VideoLm, vocab: &Vocabulary, ex: &QAExample, mode: EvidenceMode) -> Result<Scored> {
    let predicted = trainer::predict(model, vocab, ex)?;
    let u = trainer::answer_uncertainty(model, vocab, ex, &ex.seed_question, predicted, mode)?;
    Ok(Scored { predicted, correct: predicted == ex.correct_index, u })
}

/// `u` samples at one corruption level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub level: f64,
    pub u_values: Vec<f64>,
    pub u_mean: f64,
    pub accuracy: f64,
}

fn summarize(level: f64, scored: &[Scored]) -> LevelSummary {
    let u_values: Vec<f64> = scored.iter().map(|s| s.u).collect();
    let accuracy = scored.iter().filter(|s| s.correct).count() as f64 / scored.len().max(1) as f64;
    LevelSummary { level, u_mean: stats::mean(&u_values), u_values, accuracy }
}

fn check_levels(levels: &[f64], data: &[QAExample]) -> Result<()> {
    if levels.is_empty() || data.is_empty() {
        return Err(Error::Shape("need at least one level and one example".into()));
    }
    Ok(())
}

/// Add `N(0, σ²)` to every video feature and score the validation set, for
/// each `σ` in `sigmas`.
pub fn noise_sweep(
    model: &VideoLm,
    vocab: &Vocabulary,
    data: &[QAExample],
    sigmas: &[f64],
    seed: u64,
    mode: EvidenceMode,
) -> Result<Vec<LevelSummary>> {
    check_levels(sigmas, data)?;
    let root = RngStream::new(seed).split(TAG_VIDEO_NOISE);
    sigmas
        .iter()
        .enumerate()
        .map(|(i, &sigma)| {
            let scored = data
                .iter()
                .map(|ex| {
                    let mut rng = root.split(i as u64).split(ex.id);
                    let mut noisy = ex.clone();
                    noisy.video = corrupt_video(&ex.video, sigma, &mut rng)?;
                    score(model, vocab, &noisy, mode)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(summarize(sigma, &scored))
        })
        .collect()
}

/// Replace a fraction `ρ` of the question's content tokens with `[NULL]`
/// and score the validation set, for each `ρ` in `rhos`.
pub fn text_destroy_sweep(
    model: &VideoLm,
    vocab: &Vocabulary,
    data: &[QAExample],
    rhos: &[f64],
    seed: u64,
    mode: EvidenceMode,
) -> Result<Vec<LevelSummary>> {
    check_levels(rhos, data)?;
    let root = RngStream::new(seed).split(TAG_TEXT_NOISE);
    let null = vocab.control().null;
    rhos.iter()
        .enumerate()
        .map(|(i, &rho)| {
            let scored = data
                .iter()
                .map(|ex| {
                    let mut rng = root.split(i as u64).split(ex.id);
                    let mut broken = ex.clone();
                    broken.seed_question =
                        corrupt_question(&ex.seed_question, rho, null, |t| !vocab.is_control(t), &mut rng)?;
                    score(model, vocab, &broken, mode)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(summarize(rho, &scored))
        })
        .collect()
}

/// Validation `u` split by whether the prediction was right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectnessSplit {
    pub correct_ids: Vec<u64>,
    pub correct_u: Vec<f64>,
    pub incorrect_ids: Vec<u64>,
    pub incorrect_u: Vec<f64>,
}

pub fn uncertainty_by_correctness(
    model: &VideoLm,
    vocab: &Vocabulary,
    data: &[QAExample],
    mode: EvidenceMode,
) -> Result<CorrectnessSplit> {
    let mut out = CorrectnessSplit {
        correct_ids: Vec::new(),
        correct_u: Vec::new(),
        incorrect_ids: Vec::new(),
        incorrect_u: Vec::new(),
    };
    for ex in data {
        let s = score(model, vocab, ex, mode)?;
        if s.correct {
            out.correct_ids.push(ex.id);
            out.correct_u.push(s.u);
        } else {
            out.incorrect_ids.push(ex.id);
            out.incorrect_u.push(s.u);
        }
    }
    Ok(out)
}

/// Question-quality proxies next to the filter uncertainty for one example.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityRow {
    pub id: u64,
    pub u: f64,
    pub l_vqbar_a: f64,
    pub l_reg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub rows: Vec<QualityRow>,
    pub u_norm: Vec<f64>,
    pub l_vqbar_a_norm: Vec<f64>,
    pub l_reg_norm: Vec<f64>,
    pub spearman_u_vqbar_a: f64,
    pub spearman_u_reg: f64,
}

/// Generate one question per example (hard Gumbel samples with fixed noise)
/// and record `u` as the filter would see it together with the generated
/// question's answer loss and its seed-question regularizer.
pub fn quality_rows(
    model: &VideoLm,
    vocab: &Vocabulary,
    data: &[QAExample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<QualityRow>> {
    let k = vocab.len();
    let root = RngStream::new(seed).split(TAG_QUALITY);
    data.iter()
        .map(|ex| {
            let noise = StepNoise::draw(&mut root.split(ex.id), ex.seed_question.len(), k);
            let mut tape = Tape::new();
            let (sample, q_logits) =
                trainer::questioner_step(&mut tape, model, vocab, ex, cfg.gumbel_temperature, &noise)?;
            let l_reg = trainer::seed_regularization(&mut tape, q_logits, &ex.seed_question)?;
            let targets = trainer::answer_targets(vocab, &ex.answer);
            let gen_logits = trainer::answerer_logits(&mut tape, model, vocab, ex, QuestionInput::OneHot(sample))?;
            let l_vqbar_a = trainer::token_nll(&mut tape, gen_logits, &targets)?;
            let u_logits = match cfg.uncertainty_source {
                UncertaintySource::Generated => gen_logits,
                UncertaintySource::Seed => {
                    trainer::answerer_logits(&mut tape, model, vocab, ex, QuestionInput::Tokens(&ex.seed_question))?
                }
            };
            let (w, b) = model.edl_head(&mut tape);
            let vars = edl::alpha_on_tape(&mut tape, u_logits, w, b, cfg.evidence_mode)?;
            let u = edl::uncertainty_on_tape(&mut tape, &vars);
            Ok(QualityRow {
                id: ex.id,
                u: tape.scalar(u),
                l_vqbar_a: tape.scalar(l_vqbar_a),
                l_reg: tape.scalar(l_reg),
            })
        })
        .collect()
}

/// Min-max normalize each column and rank-correlate `u` with both proxies.
pub fn quality_report(rows: Vec<QualityRow>) -> Result<QualityReport> {
    let col = |f: fn(&QualityRow) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
    let (u, g, r) = (col(|x| x.u), col(|x| x.l_vqbar_a), col(|x| x.l_reg));
    Ok(QualityReport {
        spearman_u_vqbar_a: stats::spearman(&u, &g)?,
        spearman_u_reg: stats::spearman(&u, &r)?,
        u_norm: stats::min_max(&u),
        l_vqbar_a_norm: stats::min_max(&g),
        l_reg_norm: stats::min_max(&r),
        rows,
    })
}

/// The cumulative ablation rows, from the answerer-only baseline to the
/// full method.
pub const ABLATION_ROWS: [&str; 5] = ["baseline", "+reg", "+selfq", "+feedback", "+filter"];

/// `base` with the switches of ablation row `name`.
pub fn ablation_config(base: &TrainConfig, name: &str) -> Result<TrainConfig> {
    let level = ABLATION_ROWS
        .iter()
        .position(|r| *r == name)
        .ok_or_else(|| Error::Lookup(alloc::format!("ablation row `{name}`")))?;
    Ok(TrainConfig {
        enable_reg: level >= 1,
        enable_selfq: level >= 2,
        enable_feedback: level >= 3,
        enable_edl_filter: level >= 4,
        ..base.clone()
    })
}

/// Losses covered by the gradient suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckedLoss {
    /// Answer NLL with the seed question.
    Vqa,
    /// Answer NLL with the generated question.
    Aqa,
    /// Seed-question regularizer.
    Reg,
    /// Bayes risk of the seed answer pass.
    EdlRisk,
    /// KL regularizer of the seed answer pass.
    EdlKl,
    /// Weighted sum of all terms.
    Total,
}

impl CheckedLoss {
    pub const ALL: [CheckedLoss; 6] = [
        CheckedLoss::Vqa,
        CheckedLoss::Aqa,
        CheckedLoss::Reg,
        CheckedLoss::EdlRisk,
        CheckedLoss::EdlKl,
        CheckedLoss::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckedLoss::Vqa => "l_vqa",
            CheckedLoss::Aqa => "l_vqbar_a",
            CheckedLoss::Reg => "l_reg",
            CheckedLoss::EdlRisk => "l_vqa_edl",
            CheckedLoss::EdlKl => "l_reg_edl",
            CheckedLoss::Total => "total",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub loss: String,
    pub points: usize,
    pub entries_checked: usize,
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
}

/// Settings of the gradient suite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    pub points: usize,
    /// Entries probed per parameter tensor at each point.
    pub entries_per_param: usize,
    pub eps: f64,
    /// Standard deviation of the perturbation applied to every parameter
    /// to move away from the structured initialization.
    pub jitter: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { points: 20, entries_per_param: 2, eps: 1e-3, jitter: 0.1 }
    }
}

fn loss_var(
    tape: &mut Tape,
    model: &VideoLm,
    vocab: &Vocabulary,
    ex: &QAExample,
    loss: CheckedLoss,
    cfg: &TrainConfig,
    lambda: f64,
    noise: &StepNoise,
) -> Result<Var> {
    let targets = trainer::answer_targets(vocab, &ex.answer);
    match loss {
        CheckedLoss::Vqa => trainer::answerer_nll(tape, model, vocab, ex, QuestionInput::Tokens(&ex.seed_question)),
        CheckedLoss::Aqa => {
            let (sample, _) = trainer::questioner_step(tape, model, vocab, ex, cfg.gumbel_temperature, noise)?;
            let logits = trainer::answerer_logits(tape, model, vocab, ex, QuestionInput::OneHot(sample))?;
            trainer::token_nll(tape, logits, &targets)
        }
        CheckedLoss::Reg => {
            let (_, logits) = trainer::questioner_step(tape, model, vocab, ex, cfg.gumbel_temperature, noise)?;
            trainer::seed_regularization(tape, logits, &ex.seed_question)
        }
        CheckedLoss::EdlRisk | CheckedLoss::EdlKl => {
            let logits = trainer::answerer_logits(tape, model, vocab, ex, QuestionInput::Tokens(&ex.seed_question))?;
            let (risk, kl, _, _) =
                trainer::edl_answer_pass(tape, model, logits, &targets, cfg.evidence_mode, cfg.kl_exclude_target)?;
            Ok(if loss == CheckedLoss::EdlRisk { risk } else { kl })
        }
        CheckedLoss::Total => Ok(trainer::build_losses(tape, model, vocab, ex, cfg, lambda, noise)?.total),
    }
}

/// Central-difference check of every loss at `points` random parameter
/// points. Gumbel samples use fixed noise and the relaxed (soft) sample so
/// each loss is smooth in the parameters.
pub fn gradcheck_suite(world: &World, arch: &ArchConfig, gc: &GradcheckConfig, seed: u64) -> Result<Vec<GradcheckRow>> {
    if gc.points == 0 || gc.entries_per_param == 0 {
        return Err(Error::Config { field: "gradcheck.points".into(), reason: "must be at least 1".into() });
    }
    let vocab = world.vocab();
    let wc = world.config();
    let mcfg = ModelConfig::new(arch, vocab.len(), wc.events_per_video, wc.feature_width);
    let root = RngStream::new(seed).split(TAG_FD);
    let mut rows: Vec<GradcheckRow> = CheckedLoss::ALL
        .iter()
        .map(|l| GradcheckRow {
            loss: l.name().to_string(),
            points: 0,
            entries_checked: 0,
            max_rel_error: 0.0,
            worst_param: None,
        })
        .collect();
    for p in 0..gc.points {
        let mut rng = root.split(p as u64);
        let mut model = VideoLm::new(mcfg.clone(), rng.next_u64())?;
        for prm in model.params_mut().iter_mut() {
            prm.value.data_mut().iter_mut().for_each(|x| *x += gc.jitter * rng.normal());
        }
        let ex = world.episode(rng.next_u64() >> 24).example;
        let noise = StepNoise { hard: false, ..StepNoise::draw(&mut rng, ex.seed_question.len(), vocab.len()) };
        let lambda = 0.1 + 0.9 * rng.uniform();
        let cfg = TrainConfig { gumbel_temperature: 0.5 + rng.uniform(), ..TrainConfig::default() };
        for (row, &loss) in rows.iter_mut().zip(CheckedLoss::ALL.iter()) {
            let mut store: ParamStore = model.params().clone();
            let mut probe = model.clone();
            let report = finite_diff_check_sampled(
                &mut store,
                |s, tape| {
                    *probe.params_mut() = s.clone();
                    loss_var(tape, &probe, vocab, &ex, loss, &cfg, lambda, &noise)
                },
                gc.eps,
                gc.entries_per_param,
                &mut rng.split(loss as u64),
            )?;
            row.points += 1;
            row.entries_checked += report.entries_checked;
            if report.max_rel_error > row.max_rel_error || row.worst_param.is_none() {
                row.max_rel_error = row.max_rel_error.max(report.max_rel_error);
                row.worst_param = report.worst.map(|(n, i)| alloc::format!("{n}[{i}]"));
            }
        }
    }
    Ok(rows)
}

/// Fraction of answer-position logits at or below zero over `data`, i.e.
/// the share of entries ReLU evidence would discard.
pub fn relu_zero_fraction(model: &VideoLm, vocab: &Vocabulary, data: &[QAExample]) -> Result<f64> {
    let (mut zeros, mut total) = (0usize, 0usize);
    for ex in data {
        let mut tape = Tape::new();
        let logits = trainer::answerer_logits(&mut tape, model, vocab, ex, QuestionInput::Tokens(&ex.seed_question))?;
        let v = tape.value(logits);
        zeros += v.iter().filter(|&&z| z <= 0.0).count();
        total += v.len();
    }
    Ok(zeros as f64 / total.max(1) as f64)
}

/// Outcome of training one evidence variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownRow {
    pub variant: EvidenceMode,
    pub epochs_completed: usize,
    pub final_val_acc: Option<f64>,
    /// Divergence message when training stopped on a non-finite loss.
    pub divergence: Option<String>,
    /// Per-epoch fraction of answer-position logits `<= 0`.
    pub zero_fraction: Vec<f64>,
    pub mean_u: Vec<f64>,
}

/// The evidence variants compared by the breakdown.
pub const BREAKDOWN_VARIANTS: [EvidenceMode; 3] = [EvidenceMode::Decoupled, EvidenceMode::Relu, EvidenceMode::ExpSum];

/// Train `model` once per evidence variant with otherwise equal settings.
/// `probe` is the subset used for the per-epoch zero-fraction statistic.
pub fn edl_breakdown(
    model: &VideoLm,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    train_set: &[QAExample],
    val_set: &[QAExample],
    probe: &[QAExample],
) -> Result<Vec<BreakdownRow>> {
    BREAKDOWN_VARIANTS
        .iter()
        .map(|&mode| {
            let vcfg = TrainConfig { evidence_mode: mode, ..cfg.clone() };
            let mut zero_fraction = Vec::new();
            let mut probe_err = None;
            let out = trainer::train_with(model.clone(), vocab, &vcfg, train_set, val_set, &mut |_, m| {
                match relu_zero_fraction(m, vocab, probe) {
                    Ok(z) => zero_fraction.push(z),
                    Err(e) => probe_err = Some(e),
                }
            })?;
            if let Some(e) = probe_err {
                return Err(e);
            }
            Ok(BreakdownRow {
                variant: mode,
                epochs_completed: out.history.len(),
                final_val_acc: out.history.last().and_then(|r| r.val_acc),
                divergence: out.diverged.map(|e| alloc::format!("{e}")),
                zero_fraction,
                mean_u: out.history.iter().map(|r| r.mean_u).collect(),
            })
        })
        .collect()
}
