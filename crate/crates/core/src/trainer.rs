//! The bootstrapping loop: the same model asks a new question about each
//! training example and then answers both the seed and the generated
//! question.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::QAExample;
use crate::edl::{self, EdlVars, EvidenceMode};
use crate::error::{Error, Result};
use crate::gumbel::{self, GumbelConfig};
use crate::model::{QuestionInput, VideoLm};
use crate::optim::{Optimizer, OptimizerKind};
use crate::prompt::{build_answerer_prompt, build_questioner_prompt};
use crate::rng::RngStream;
use crate::tape::{kernels, Tape, Var};
use crate::vocab::Vocabulary;

const TAG_SHUFFLE: u64 = 0x5348_5546;
const TAG_GUMBEL: u64 = 0x4755_4d42;

/// Which answer pass supplies the filter uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintySource {
    #[default]
    Seed,
    Generated,
}

fn default_anneal_epochs() -> usize {
    10
}

fn default_eval_every() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub enable_selfq: bool,
    pub enable_feedback: bool,
    pub enable_edl_filter: bool,
    pub enable_reg: bool,
    pub gumbel_temperature: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub weight_decay: f64,
    pub seed: u64,
    pub edl_annealing: bool,
    /// Epochs for the KL weight to ramp up to 1.
    #[serde(default = "default_anneal_epochs")]
    pub anneal_epochs: usize,
    #[serde(default)]
    pub evidence_mode: EvidenceMode,
    /// Apply the KL regularizer to the concentrations with target evidence
    /// removed; otherwise to the full concentrations.
    #[serde(default = "yes")]
    pub kl_exclude_target: bool,
    #[serde(default)]
    pub uncertainty_source: UncertaintySource,
    /// Validation accuracy is computed every this many epochs and always
    /// after the last one; 0 means only after the last one.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            enable_selfq: true,
            enable_feedback: true,
            enable_edl_filter: true,
            enable_reg: true,
            gumbel_temperature: 1.0,
            epochs: 10,
            batch_size: 8,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            weight_decay: 0.0,
            seed: 0,
            edl_annealing: true,
            anneal_epochs: default_anneal_epochs(),
            evidence_mode: EvidenceMode::Decoupled,
            kl_exclude_target: true,
            uncertainty_source: UncertaintySource::Seed,
            eval_every: default_eval_every(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(Error::Config { field: field.into(), reason: reason.into() });
        GumbelConfig { temperature: self.gumbel_temperature, hard: true }.validate()?;
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be a finite positive number");
        }
        if self.edl_annealing && self.anneal_epochs == 0 {
            return bad("anneal_epochs", "must be at least 1 when annealing is on");
        }
        Ok(())
    }

    /// KL weight for 1-based `epoch`.
    pub fn kl_weight(&self, epoch: usize) -> f64 {
        if self.edl_annealing {
            (epoch as f64 / self.anneal_epochs as f64).min(1.0)
        } else {
            1.0
        }
    }

    fn needs_questioner(&self) -> bool {
        self.enable_selfq || self.enable_reg
    }
}

/// Scalar values of one example's losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_vqa_edl: f64,
    pub l_vqbar_a: f64,
    pub l_reg: f64,
    pub l_reg_edl: f64,
    pub u: f64,
    /// Weight on `l_vqbar_a`: `1 − u` with the filter, 1 without, 0 when
    /// self-questioning is off.
    pub weight: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBundle {
    /// `l_vqa_edl + weight·l_vqbar_a + l_reg + λ·l_reg_edl` from the logged
    /// components.
    pub fn recompute_total(&self) -> f64 {
        self.l_vqa_edl + self.weight * self.l_vqbar_a + self.l_reg + self.lambda * self.l_reg_edl
    }
}

/// Tape handles for one example's losses. Disabled terms are `None`.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l_vqa_edl: Var,
    pub l_vqbar_a: Option<Var>,
    pub l_reg: Option<Var>,
    pub l_reg_edl: Var,
    /// Detached aggregate uncertainty.
    pub u: Var,
    pub total: Var,
    pub question_logits: Option<Var>,
    pub question_onehot: Option<Var>,
    /// Generated question tokens (row-wise argmax of the sample).
    pub generated: Option<Var>,
}

/// Sampling options for one loss evaluation.
#[derive(Debug, Clone)]
pub struct StepNoise {
    /// `N_q x K` Gumbel noise.
    pub gumbel: Vec<f64>,
    /// Straight-through one-hot samples; `false` keeps the relaxed sample,
    /// which makes the whole loss smooth.
    pub hard: bool,
}

impl StepNoise {
    pub fn draw(rng: &mut RngStream, rows: usize, k: usize) -> Self {
        Self { gumbel: gumbel::sample_gumbel(rng, rows * k), hard: true }
    }

    pub fn zero(rows: usize, k: usize) -> Self {
        Self { gumbel: vec![0.0; rows * k], hard: true }
    }
}

/// Answer tokens followed by `[EOS]`.
pub fn answer_targets(vocab: &Vocabulary, answer: &[usize]) -> Vec<usize> {
    let mut t = answer.to_vec();
    t.push(vocab.control().eos);
    t
}

/// One teacher-forced questioner pass. Returns the sampled question rows
/// (`N_q x K`) and the questioner logits at the question positions.
pub fn questioner_step(
    tape: &mut Tape,
    model: &VideoLm,
    vocab: &Vocabulary,
    ex: &QAExample,
    temperature: f64,
    noise: &StepNoise,
) -> Result<(Var, Var)> {
    let prompt = build_questioner_prompt(vocab, ex, model.config().max_len)?;
    let logits = model.target_logits(
        tape,
        &prompt,
        &ex.video,
        QuestionInput::Tokens(&ex.seed_question),
        prompt.question.clone(),
    )?;
    let cfg = GumbelConfig { temperature, hard: noise.hard };
    let sample = gumbel::gumbel_softmax_with_noise(tape, logits, &noise.gumbel, &cfg)?;
    Ok((sample, logits))
}

/// Logits at the rows predicting the answer tokens and `[EOS]` in the
/// answerer layout.
pub fn answerer_logits(
    tape: &mut Tape,
    model: &VideoLm,
    vocab: &Vocabulary,
    ex: &QAExample,
    question: QuestionInput<'_>,
) -> Result<Var> {
    let q_len = match question {
        QuestionInput::Tokens(t) => t.len(),
        QuestionInput::OneHot(v) => tape.dims(v).0,
    };
    let prompt = build_answerer_prompt(vocab, ex, q_len, model.config().max_len)?;
    model.target_logits(tape, &prompt, &ex.video, question, prompt.answer.clone())
}

/// `−Σ_i log softmax(logits_i)[targets_i]`.
pub fn token_nll(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let lp = tape.log_softmax(logits)?;
    let picked = tape.pick_per_row(lp, targets)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0))
}

/// Answer NLL under the answerer layout with the given question.
pub fn answerer_nll(
    tape: &mut Tape,
    model: &VideoLm,
    vocab: &Vocabulary,
    ex: &QAExample,
    question: QuestionInput<'_>,
) -> Result<Var> {
    let logits = answerer_logits(tape, model, vocab, ex, question)?;
    token_nll(tape, logits, &answer_targets(vocab, &ex.answer))
}

/// `Σ_i KL[onehot(q_i) ‖ p(·)]`, which for one-hot targets is the NLL of
/// the seed tokens.
pub fn seed_regularization(tape: &mut Tape, questioner_logits: Var, seed: &[usize]) -> Result<Var> {
    if tape.dims(questioner_logits).0 != seed.len() {
        return Err(Error::Shape(alloc::format!(
            "{} logit rows for {} seed tokens",
            tape.dims(questioner_logits).0,
            seed.len()
        )));
    }
    token_nll(tape, questioner_logits, seed)
}

/// Bayes risk, KL regularizer and (undetached) uncertainty at the answer
/// positions.
pub fn edl_answer_pass(
    tape: &mut Tape,
    model: &VideoLm,
    logits: Var,
    targets: &[usize],
    mode: EvidenceMode,
    kl_exclude_target: bool,
) -> Result<(Var, Var, Var, EdlVars)> {
    if targets.is_empty() {
        return Err(Error::Shape("no answer positions".into()));
    }
    let (w, b) = model.edl_head(tape);
    let vars = edl::alpha_on_tape(tape, logits, w, b, mode)?;
    let risk = edl::bayes_risk_on_tape(tape, &vars, targets)?;
    let kl = if kl_exclude_target {
        edl::misleading_kl_on_tape(tape, &vars, targets)?
    } else {
        edl::kl_on_tape(tape, &vars)?
    };
    let u = edl::uncertainty_on_tape(tape, &vars);
    Ok((risk, kl, u, vars))
}

/// All losses of one example and their weighted total.
pub fn build_losses(
    tape: &mut Tape,
    model: &VideoLm,
    vocab: &Vocabulary,
    ex: &QAExample,
    cfg: &TrainConfig,
    lambda: f64,
    noise: &StepNoise,
) -> Result<LossVars> {
    let targets = answer_targets(vocab, &ex.answer);
    let seed_logits = answerer_logits(tape, model, vocab, ex, QuestionInput::Tokens(&ex.seed_question))?;
    let (l_vqa_edl, l_reg_edl, u_seed, _) = edl_answer_pass(tape, model, seed_logits, &targets, cfg.evidence_mode, cfg.kl_exclude_target)?;

    let mut question_logits = None;
    let mut question_onehot = None;
    let mut generated = None;
    let mut l_reg = None;
    let mut l_vqbar_a = None;
    let mut u = u_seed;
    if cfg.needs_questioner() {
        let (sample, logits) = questioner_step(tape, model, vocab, ex, cfg.gumbel_temperature, noise)?;
        question_logits = Some(logits);
        question_onehot = Some(sample);
        generated = Some(sample);
        if cfg.enable_reg {
            l_reg = Some(seed_regularization(tape, logits, &ex.seed_question)?);
        }
        if cfg.enable_selfq {
            let q = if cfg.enable_feedback { sample } else { tape.detach(sample) };
            let gen_logits = answerer_logits(tape, model, vocab, ex, QuestionInput::OneHot(q))?;
            l_vqbar_a = Some(token_nll(tape, gen_logits, &targets)?);
            if cfg.uncertainty_source == UncertaintySource::Generated {
                let (w, b) = model.edl_head(tape);
                let vars = edl::alpha_on_tape(tape, gen_logits, w, b, cfg.evidence_mode)?;
                u = edl::uncertainty_on_tape(tape, &vars);
            }
        }
    }
    let u = tape.detach(u);

    let kl_term = tape.scale(l_reg_edl, lambda);
    let mut total = tape.add(l_vqa_edl, kl_term)?;
    if let Some(r) = l_reg {
        total = tape.add(total, r)?;
    }
    if let Some(g) = l_vqbar_a {
        let weighted = if cfg.enable_edl_filter {
            let neg_u = tape.scale(u, -1.0);
            let w = tape.add_const(neg_u, 1.0);
            tape.scale_by(g, w)?
        } else {
            g
        };
        total = tape.add(total, weighted)?;
    }
    Ok(LossVars { l_vqa_edl, l_vqbar_a, l_reg, l_reg_edl, u, total, question_logits, question_onehot, generated })
}

/// Read scalar values off the tape, failing on any non-finite component.
pub fn bundle(tape: &Tape, vars: &LossVars, cfg: &TrainConfig, lambda: f64) -> core::result::Result<LossBundle, String> {
    let get = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v));
    let u = tape.scalar(vars.u);
    let b = LossBundle {
        l_vqa_edl: tape.scalar(vars.l_vqa_edl),
        l_vqbar_a: get(vars.l_vqbar_a),
        l_reg: get(vars.l_reg),
        l_reg_edl: tape.scalar(vars.l_reg_edl),
        u,
        weight: match (cfg.enable_selfq, cfg.enable_edl_filter) {
            (false, _) => 0.0,
            (true, true) => 1.0 - u,
            (true, false) => 1.0,
        },
        lambda,
        total: tape.scalar(vars.total),
    };
    for (name, v) in [
        ("l_vqa_edl", b.l_vqa_edl),
        ("l_vqbar_a", b.l_vqbar_a),
        ("l_reg", b.l_reg),
        ("l_reg_edl", b.l_reg_edl),
        ("u", b.u),
        ("total", b.total),
    ] {
        if !v.is_finite() {
            return Err(name.into());
        }
    }
    Ok(b)
}

/// Tokens chosen by each row of a sampled question.
pub fn sampled_tokens(tape: &Tape, sample: Var) -> Vec<usize> {
    let (rows, k) = tape.dims(sample);
    let v = tape.value(sample);
    (0..rows).map(|r| kernels::argmax(&v[r * k..(r + 1) * k])).collect()
}

/// Whether a generated question contains any answer token.
pub fn leaks_answer(question: &[usize], answer: &[usize]) -> bool {
    question.iter().any(|t| answer.contains(t))
}

/// Answer NLL for each of the five options with the seed question.
pub fn option_nlls(model: &VideoLm, vocab: &Vocabulary, ex: &QAExample) -> Result<Vec<f64>> {
    (0..ex.options.len())
        .map(|i| {
            let mut tape = Tape::new();
            let cand = ex.with_option_as_answer(i);
            let l = answerer_nll(&mut tape, model, vocab, &cand, QuestionInput::Tokens(&ex.seed_question))?;
            Ok(tape.scalar(l))
        })
        .collect()
}

/// Index of the lowest-NLL option; ties go to the lowest index.
pub fn predict(model: &VideoLm, vocab: &Vocabulary, ex: &QAExample) -> Result<usize> {
    let nll = option_nlls(model, vocab, ex)?;
    let mut best = 0;
    for (i, &x) in nll.iter().enumerate() {
        if x < nll[best] {
            best = i;
        }
    }
    Ok(best)
}

pub fn evaluate_accuracy(model: &VideoLm, vocab: &Vocabulary, data: &[QAExample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Shape("empty evaluation set".into()));
    }
    let mut correct = 0usize;
    for ex in data {
        if predict(model, vocab, ex)? == ex.correct_index {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Aggregate uncertainty of the answer pass for `ex` with `question` in the
/// question slots and option `answer_index` as the answer.
pub fn answer_uncertainty(
    model: &VideoLm,
    vocab: &Vocabulary,
    ex: &QAExample,
    question: &[usize],
    answer_index: usize,
    mode: EvidenceMode,
) -> Result<f64> {
    let cand = ex.with_option_as_answer(answer_index);
    let mut tape = Tape::new();
    let logits = answerer_logits(&mut tape, model, vocab, &cand, QuestionInput::Tokens(question))?;
    let (w, b) = model.edl_head(&mut tape);
    let vars = edl::alpha_on_tape(&mut tape, logits, w, b, mode)?;
    let u = edl::uncertainty_on_tape(&mut tape, &vars);
    Ok(tape.scalar(u))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_vqa_edl: f64,
    pub l_vqbar_a: f64,
    pub l_reg: f64,
    pub l_reg_edl: f64,
    pub mean_u: f64,
    pub min_u: f64,
    pub max_u: f64,
    pub val_acc: Option<f64>,
    pub total: f64,
    pub lambda: f64,
    /// Fraction of generated questions containing an answer token; `None`
    /// when no questions were generated.
    pub leakage: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the last completed epoch.
    pub model: VideoLm,
    pub history: Vec<EpochRecord>,
    /// Set when a non-finite loss stopped training early.
    pub diverged: Option<Error>,
}

/// Gumbel noise for `ex` in `epoch`; fresh each epoch, independent of
/// visiting order.
pub fn epoch_noise(seed: u64, epoch: usize, ex: &QAExample, rows: usize, k: usize) -> StepNoise {
    let mut rng = RngStream::new(seed).split(TAG_GUMBEL).split(epoch as u64).split(ex.id);
    StepNoise::draw(&mut rng, rows, k)
}

pub fn train(
    model: VideoLm,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    train_set: &[QAExample],
    val_set: &[QAExample],
) -> Result<TrainOutcome> {
    train_with(model, vocab, cfg, train_set, val_set, &mut |_, _| {})
}

/// As [`train`], calling `on_epoch` with the record and the current model
/// after each completed epoch.
pub fn train_with(
    mut model: VideoLm,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    train_set: &[QAExample],
    val_set: &[QAExample],
    on_epoch: &mut dyn FnMut(&EpochRecord, &VideoLm),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Shape("empty training set".into()));
    }
    let k = vocab.len();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate)?.with_weight_decay(cfg.weight_decay)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    model.params_mut().zero_grads();
    for epoch in 1..=cfg.epochs {
        let snapshot = model.clone();
        let lambda = cfg.kl_weight(epoch);
        let mut shuffle = RngStream::new(cfg.seed).split(TAG_SHUFFLE).split(epoch as u64);
        shuffle.shuffle(&mut order);
        let mut sums = [0.0f64; 6];
        let (mut min_u, mut max_u) = (f64::INFINITY, f64::NEG_INFINITY);
        let mut leaked = 0usize;
        let mut generated = 0usize;
        let mut in_batch = 0usize;
        for (step, &idx) in order.iter().enumerate() {
            let ex = &train_set[idx];
            let noise = epoch_noise(cfg.seed, epoch, ex, ex.seed_question.len(), k);
            let mut tape = Tape::new();
            let vars = build_losses(&mut tape, &model, vocab, ex, cfg, lambda, &noise)?;
            let b = match bundle(&tape, &vars, cfg, lambda) {
                Ok(b) => b,
                Err(component) => {
                    return Ok(TrainOutcome {
                        model: snapshot,
                        history,
                        diverged: Some(Error::Divergence { epoch, step, component }),
                    })
                }
            };
            tape.grad(vars.total, model.params_mut())?;
            in_batch += 1;
            if in_batch == cfg.batch_size || step + 1 == order.len() {
                opt.step(model.params_mut(), 1.0 / in_batch as f64);
                in_batch = 0;
            }
            for (s, v) in sums.iter_mut().zip([b.l_vqa_edl, b.l_vqbar_a, b.l_reg, b.l_reg_edl, b.u, b.total]) {
                *s += v;
            }
            min_u = min_u.min(b.u);
            max_u = max_u.max(b.u);
            if let Some(g) = vars.generated {
                generated += 1;
                if leaks_answer(&sampled_tokens(&tape, g), &ex.answer) {
                    leaked += 1;
                }
            }
        }
        let n = train_set.len() as f64;
        let eval_now = epoch == cfg.epochs || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0);
        let val_acc = if eval_now && !val_set.is_empty() {
            Some(evaluate_accuracy(&model, vocab, val_set)?)
        } else {
            None
        };
        let rec = EpochRecord {
            epoch,
            l_vqa_edl: sums[0] / n,
            l_vqbar_a: sums[1] / n,
            l_reg: sums[2] / n,
            l_reg_edl: sums[3] / n,
            mean_u: sums[4] / n,
            min_u,
            max_u,
            val_acc,
            total: sums[5] / n,
            lambda,
            leakage: (generated > 0).then(|| leaked as f64 / generated as f64),
        };
        on_epoch(&rec, &model);
        history.push(rec);
    }
    Ok(TrainOutcome { model, history, diverged: None })
}
