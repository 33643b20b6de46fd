//! Tiny decoder-only language model with a video-feature projector.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::VideoFeatures;
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::prompt::{Piece, Prompt};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// User-facing architecture hyperparameters. Vocabulary size, video slots
/// and feature width come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_width: usize,
    pub max_len: usize,
    pub adapter_rank: usize,
    pub freeze_base: bool,
    /// Share the token embedding matrix with the output projection.
    #[serde(default)]
    pub tie_embeddings: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            width: 32,
            heads: 2,
            mlp_width: 64,
            max_len: 96,
            adapter_rank: 0,
            freeze_base: false,
            tie_embeddings: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_width: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub video_slots: usize,
    pub feature_width: usize,
    pub adapter_rank: usize,
    pub freeze_base: bool,
    pub tie_embeddings: bool,
}

impl ModelConfig {
    pub fn new(arch: &ArchConfig, vocab_size: usize, video_slots: usize, feature_width: usize) -> Self {
        Self {
            layers: arch.layers,
            width: arch.width,
            heads: arch.heads,
            mlp_width: arch.mlp_width,
            vocab_size,
            max_len: arch.max_len,
            video_slots,
            feature_width,
            adapter_rank: arch.adapter_rank,
            freeze_base: arch.freeze_base,
            tie_embeddings: arch.tie_embeddings,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| {
            Err(Error::Config { field: field.into(), reason: reason.into() })
        };
        if self.layers == 0 {
            return bad("layers", "must be at least 1");
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad("width", "must be a positive multiple of heads");
        }
        if self.mlp_width == 0 {
            return bad("mlp_width", "must be at least 1");
        }
        if self.vocab_size < crate::vocab::MIN_VOCAB {
            return bad("vocab_size", "must be at least 30");
        }
        if self.video_slots == 0 {
            return bad("video_slots", "must be at least 1");
        }
        if self.feature_width == 0 {
            return bad("feature_width", "must be at least 1");
        }
        if self.max_len == 0 {
            return bad("max_len", "must be at least 1");
        }
        if self.freeze_base && self.adapter_rank == 0 {
            return bad("freeze_base", "needs adapter_rank >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdapterIds {
    /// `D x r`
    pub down: ParamId,
    /// `r x D`, zero at init
    pub up: ParamId,
}

#[derive(Debug, Clone)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    adapter_q: Option<AdapterIds>,
    adapter_v: Option<AdapterIds>,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct ModelIds {
    tok_emb: ParamId,
    pos_emb: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    temporal: ParamId,
    layers: Vec<LayerIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    w_out: Option<ParamId>,
    b_out: ParamId,
    edl_w: ParamId,
    edl_b: ParamId,
}

/// How the question slots of a prompt are filled.
#[derive(Debug, Clone, Copy)]
pub enum QuestionInput<'a> {
    Tokens(&'a [usize]),
    /// `N_q x K` rows mixed with the token embedding matrix.
    OneHot(Var),
}

impl QuestionInput<'_> {
    fn len(&self, tape: &Tape) -> usize {
        match self {
            QuestionInput::Tokens(t) => t.len(),
            QuestionInput::OneHot(v) => tape.dims(*v).0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VideoLm {
    cfg: ModelConfig,
    params: ParamStore,
    ids: ModelIds,
}

fn normal_tensor(rng: &mut RngStream, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.normal() * std).collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

fn const_tensor(rows: usize, cols: usize, v: f64) -> Tensor {
    Tensor::matrix(rows, cols, alloc::vec![v; rows * cols]).expect("shape")
}

/// Names of parameters that stay trainable in freeze-base mode.
fn is_peft_param(name: &str) -> bool {
    name.starts_with("video.") || name.starts_with("edl.") || name.contains(".adapter_")
}

impl VideoLm {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RngStream::new(seed).split(0x1417);
        let (d, k, m) = (cfg.width, cfg.vocab_size, cfg.mlp_width);
        let lin = |fan_in: usize| 1.0 / libm::sqrt(fan_in as f64);
        let mut ps = ParamStore::new();
        let tok_emb = ps.add("tok_emb", normal_tensor(&mut rng, k, d, 0.5));
        let pos_emb = ps.add("pos_emb", normal_tensor(&mut rng, cfg.max_len, d, 0.5));
        let proj_w = ps.add("video.proj_w", normal_tensor(&mut rng, cfg.feature_width, d, lin(cfg.feature_width)));
        let proj_b = ps.add("video.proj_b", const_tensor(1, d, 0.0));
        let temporal = ps.add("video.temporal", normal_tensor(&mut rng, cfg.video_slots, d, 0.1));
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let add = |ps: &mut ParamStore, name: &str, t: Tensor| ps.add(format!("layers.{l}.{name}"), t);
            let ln1_g = add(&mut ps, "ln1.gain", const_tensor(1, d, 1.0));
            let ln1_b = add(&mut ps, "ln1.bias", const_tensor(1, d, 0.0));
            let wq = add(&mut ps, "attn.wq", normal_tensor(&mut rng, d, d, lin(d)));
            let bq = add(&mut ps, "attn.bq", const_tensor(1, d, 0.0));
            let wk = add(&mut ps, "attn.wk", normal_tensor(&mut rng, d, d, lin(d)));
            let wv = add(&mut ps, "attn.wv", normal_tensor(&mut rng, d, d, lin(d)));
            let bv = add(&mut ps, "attn.bv", const_tensor(1, d, 0.0));
            let wo = add(&mut ps, "attn.wo", normal_tensor(&mut rng, d, d, lin(d)));
            let bo = add(&mut ps, "attn.bo", const_tensor(1, d, 0.0));
            let (adapter_q, adapter_v) = if cfg.adapter_rank > 0 {
                let r = cfg.adapter_rank;
                let mut adapter = |ps: &mut ParamStore, which: &str| AdapterIds {
                    down: ps.add(format!("layers.{l}.attn.adapter_{which}.down"), normal_tensor(&mut rng, d, r, lin(d))),
                    up: ps.add(format!("layers.{l}.attn.adapter_{which}.up"), const_tensor(r, d, 0.0)),
                };
                (Some(adapter(&mut ps, "q")), Some(adapter(&mut ps, "v")))
            } else {
                (None, None)
            };
            let ln2_g = add(&mut ps, "ln2.gain", const_tensor(1, d, 1.0));
            let ln2_b = add(&mut ps, "ln2.bias", const_tensor(1, d, 0.0));
            let w1 = add(&mut ps, "mlp.w1", normal_tensor(&mut rng, d, m, lin(d)));
            let b1 = add(&mut ps, "mlp.b1", const_tensor(1, m, 0.0));
            let w2 = add(&mut ps, "mlp.w2", normal_tensor(&mut rng, m, d, lin(m)));
            let b2 = add(&mut ps, "mlp.b2", const_tensor(1, d, 0.0));
            layers.push(LayerIds {
                ln1_g, ln1_b, wq, bq, wk, wv, bv, wo, bo, adapter_q, adapter_v, ln2_g, ln2_b, w1, b1, w2, b2,
            });
        }
        let lnf_g = ps.add("head.ln.gain", const_tensor(1, d, 1.0));
        let lnf_b = ps.add("head.ln.bias", const_tensor(1, d, 0.0));
        let w_out = (!cfg.tie_embeddings).then(|| ps.add("head.w_out", normal_tensor(&mut rng, d, k, lin(d))));
        let b_out = ps.add("head.b_out", const_tensor(1, k, 0.0));
        let edl_w = ps.add("edl.w", const_tensor(k, 1, 0.0));
        let edl_b = ps.add("edl.b", const_tensor(1, 1, 0.0));
        if cfg.freeze_base {
            for p in ps.iter_mut() {
                p.trainable = is_peft_param(&p.name);
            }
        }
        let ids = ModelIds {
            tok_emb, pos_emb, proj_w, proj_b, temporal, layers, lnf_g, lnf_b, w_out, b_out, edl_w, edl_b,
        };
        Ok(Self { cfg, params: ps, ids })
    }

    /// Rebuild a model around stored parameter values; names and shapes must
    /// match a freshly initialized model of the same configuration.
    pub fn from_params(cfg: ModelConfig, loaded: Vec<(String, Tensor)>) -> Result<Self> {
        let mut m = Self::new(cfg, 0)?;
        if loaded.len() != m.params.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} parameters, model has {}",
                loaded.len(),
                m.params.len()
            )));
        }
        for (name, t) in loaded {
            let id = m.params.id_of(&name)?;
            let p = m.params.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
        }
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn trainable_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Token embedding matrix on the tape (`K x D`).
    pub fn token_embeddings(&self, tape: &mut Tape) -> Var {
        tape.param(&self.params, self.ids.tok_emb)
    }

    /// EDL head `(w: K x 1, b: 1 x 1)` on the tape.
    pub fn edl_head(&self, tape: &mut Tape) -> (Var, Var) {
        (tape.param(&self.params, self.ids.edl_w), tape.param(&self.params, self.ids.edl_b))
    }

    /// `h_v[i] = E(v)[i] · W + b + temporal[i]`.
    pub fn project_video(&self, tape: &mut Tape, video: &VideoFeatures) -> Result<Var> {
        if video.slots != self.cfg.video_slots || video.width != self.cfg.feature_width {
            return Err(Error::Shape(format!(
                "video is {}x{}, model expects {}x{}",
                video.slots, video.width, self.cfg.video_slots, self.cfg.feature_width
            )));
        }
        let feats = tape.constant(video.slots, video.width, video.data.clone())?;
        let w = tape.param(&self.params, self.ids.proj_w);
        let b = tape.param(&self.params, self.ids.proj_b);
        let t = tape.param(&self.params, self.ids.temporal);
        let h = tape.matmul(feats, w)?;
        let h = tape.add_row(h, b)?;
        tape.add(h, t)
    }

    /// Input embeddings for `prompt` (`T x D`, positions included).
    pub fn embed(
        &self,
        tape: &mut Tape,
        prompt: &Prompt,
        video: &VideoFeatures,
        question: QuestionInput<'_>,
    ) -> Result<Var> {
        let t_len = prompt.len();
        if t_len > self.cfg.max_len {
            return Err(Error::Overlength { len: t_len, max: self.cfg.max_len });
        }
        if t_len == 0 {
            return Err(Error::Shape("empty prompt".into()));
        }
        if question.len(tape) != prompt.question.len() {
            return Err(Error::Shape(format!(
                "prompt has {} question slots, got {} question rows",
                prompt.question.len(),
                question.len(tape)
            )));
        }
        let emb = self.token_embeddings(tape);
        let video_h = if prompt.pieces.iter().any(|p| matches!(p, Piece::VideoSlot(_))) {
            Some(self.project_video(tape, video)?)
        } else {
            None
        };
        let question_h = match question {
            QuestionInput::Tokens(ids) if !ids.is_empty() => Some(tape.gather(emb, ids)?),
            QuestionInput::OneHot(oh) => Some(tape.matmul(oh, emb)?),
            _ => None,
        };
        let mut parts = Vec::new();
        let mut i = 0;
        while i < t_len {
            match prompt.pieces[i] {
                Piece::Token(_) => {
                    let mut ids = Vec::new();
                    while let Some(Piece::Token(t)) = prompt.pieces.get(i) {
                        ids.push(*t);
                        i += 1;
                    }
                    parts.push(tape.gather(emb, &ids)?);
                }
                Piece::VideoSlot(s) => {
                    let start = s;
                    let mut n = 0;
                    while let Some(Piece::VideoSlot(x)) = prompt.pieces.get(i) {
                        if *x != start + n {
                            break;
                        }
                        n += 1;
                        i += 1;
                    }
                    parts.push(tape.slice_rows(video_h.expect("video rows"), start, n)?);
                }
                Piece::QuestionSlot(s) => {
                    let start = s;
                    let mut n = 0;
                    while let Some(Piece::QuestionSlot(x)) = prompt.pieces.get(i) {
                        if *x != start + n {
                            break;
                        }
                        n += 1;
                        i += 1;
                    }
                    parts.push(tape.slice_rows(question_h.expect("question rows"), start, n)?);
                }
            }
        }
        let x = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
        let pos = tape.param(&self.params, self.ids.pos_emb);
        let pos = tape.slice_rows(pos, 0, t_len)?;
        tape.add(x, pos)
    }

    /// `base + (x · down) · up`.
    pub fn apply_adapter(&self, tape: &mut Tape, x: Var, base: Var, adapter: AdapterIds) -> Result<Var> {
        let down = tape.param(&self.params, adapter.down);
        let up = tape.param(&self.params, adapter.up);
        let h = tape.matmul(x, down)?;
        let delta = tape.matmul(h, up)?;
        tape.add(base, delta)
    }

    fn linear(&self, tape: &mut Tape, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let w = tape.param(&self.params, w);
        let b = tape.param(&self.params, b);
        let h = tape.matmul(x, w)?;
        tape.add_row(h, b)
    }

    fn attention(&self, tape: &mut Tape, x: Var, l: &LayerIds) -> Result<Var> {
        let mut q = self.linear(tape, x, l.wq, l.bq)?;
        if let Some(a) = l.adapter_q {
            q = self.apply_adapter(tape, x, q, a)?;
        }
        // No key bias: it would shift every score in a row equally.
        let wk = tape.param(&self.params, l.wk);
        let k = tape.matmul(x, wk)?;
        let mut v = self.linear(tape, x, l.wv, l.bv)?;
        if let Some(a) = l.adapter_v {
            v = self.apply_adapter(tape, x, v, a)?;
        }
        let dh = self.cfg.width / self.cfg.heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let (qh, kh, vh) = if self.cfg.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * dh, dh)?,
                    tape.slice_cols(k, h * dh, dh)?,
                    tape.slice_cols(v, h * dh, dh)?,
                )
            };
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let p = tape.causal_softmax(scores)?;
            heads.push(tape.matmul(p, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        self.linear(tape, cat, l.wo, l.bo)
    }

    /// Pre-norm decoder stack over embeddings `x` (`T x D`); returns the
    /// final normalized hidden states.
    pub fn decode(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (t_len, d) = tape.dims(x);
        if t_len > self.cfg.max_len {
            return Err(Error::Overlength { len: t_len, max: self.cfg.max_len });
        }
        if d != self.cfg.width {
            return Err(Error::Shape(format!("embedding width {d}, model width {}", self.cfg.width)));
        }
        let mut h = x;
        for l in &self.ids.layers {
            let g = tape.param(&self.params, l.ln1_g);
            let b = tape.param(&self.params, l.ln1_b);
            let n = tape.layer_norm(h, g, b)?;
            let a = self.attention(tape, n, l)?;
            h = tape.add(h, a)?;
            let g = tape.param(&self.params, l.ln2_g);
            let b = tape.param(&self.params, l.ln2_b);
            let n = tape.layer_norm(h, g, b)?;
            let m = self.linear(tape, n, l.w1, l.b1)?;
            let m = tape.gelu(m);
            let m = self.linear(tape, m, l.w2, l.b2)?;
            h = tape.add(h, m)?;
        }
        let g = tape.param(&self.params, self.ids.lnf_g);
        let b = tape.param(&self.params, self.ids.lnf_b);
        tape.layer_norm(h, g, b)
    }

    /// Logits (`len x K`) for hidden rows `rows`.
    pub fn logits(&self, tape: &mut Tape, hidden: Var, rows: Range<usize>) -> Result<Var> {
        let h = if rows.start == 0 && rows.end == tape.dims(hidden).0 {
            hidden
        } else {
            tape.slice_rows(hidden, rows.start, rows.len())?
        };
        let z = match self.ids.w_out {
            Some(w) => {
                let w = tape.param(&self.params, w);
                tape.matmul(h, w)?
            }
            None => {
                let emb = self.token_embeddings(tape);
                tape.matmul_nt(h, emb)?
            }
        };
        let b = tape.param(&self.params, self.ids.b_out);
        tape.add_row(z, b)
    }

    /// Embeddings, decoder and output head over all positions.
    pub fn decoder_forward(
        &self,
        tape: &mut Tape,
        prompt: &Prompt,
        video: &VideoFeatures,
        question: QuestionInput<'_>,
    ) -> Result<Var> {
        let x = self.embed(tape, prompt, video, question)?;
        let h = self.decode(tape, x)?;
        self.logits(tape, h, 0..prompt.len())
    }

    /// Logits for the rows predicting the tokens at `targets`.
    pub fn target_logits(
        &self,
        tape: &mut Tape,
        prompt: &Prompt,
        video: &VideoFeatures,
        question: QuestionInput<'_>,
        targets: Range<usize>,
    ) -> Result<Var> {
        if targets.start == 0 || targets.end > prompt.len() {
            return Err(Error::Shape(format!("target range {targets:?} out of bounds")));
        }
        let x = self.embed(tape, prompt, video, question)?;
        let h = self.decode(tape, x)?;
        self.logits(tape, h, targets.start - 1..targets.end - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{build_answerer_prompt, build_questioner_prompt};
    use crate::world::{World, WorldConfig};
    use alloc::vec;

    fn setup(adapter_rank: usize, freeze: bool) -> (World, VideoLm) {
        let w = World::new(WorldConfig::default()).unwrap();
        let arch = ArchConfig { adapter_rank, freeze_base: freeze, ..ArchConfig::default() };
        let cfg = ModelConfig::new(&arch, w.vocab().len(), 10, 32);
        (w, VideoLm::new(cfg, 7).unwrap())
    }

    #[test]
    fn zero_projector_gives_temporal() {
        let (_, mut m) = setup(0, false);
        let id = m.params.id_of("video.proj_w").unwrap();
        m.params.get_mut(id).value.fill(0.0);
        let v = VideoFeatures::new(10, 32, vec![0.0; 320]).unwrap();
        let mut tape = Tape::new();
        let h = m.project_video(&mut tape, &v).unwrap();
        let t = m.params.get(m.params.id_of("video.temporal").unwrap()).value.data().to_vec();
        assert_eq!(tape.value(h), &t[..]);
    }

    #[test]
    fn identity_projector_adds_temporal() {
        let w = World::new(WorldConfig::default()).unwrap();
        let arch = ArchConfig::default();
        let cfg = ModelConfig::new(&arch, w.vocab().len(), 10, 32);
        let mut m = VideoLm::new(cfg, 1).unwrap();
        let id = m.params.id_of("video.proj_w").unwrap();
        let mut eye = vec![0.0; 32 * 32];
        (0..32).for_each(|i| eye[i * 32 + i] = 1.0);
        m.params.get_mut(id).value = Tensor::matrix(32, 32, eye).unwrap();
        let v = w.episode(3).example.video;
        let mut tape = Tape::new();
        let h = m.project_video(&mut tape, &v).unwrap();
        let t = m.params.get(m.params.id_of("video.temporal").unwrap()).value.data();
        for (i, x) in tape.value(h).iter().enumerate() {
            assert_eq!(*x, v.data[i] + t[i]);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let (_, m) = setup(0, false);
        let v = VideoFeatures::new(9, 32, vec![0.0; 288]).unwrap();
        assert!(m.project_video(&mut Tape::new(), &v).is_err());
    }

    #[test]
    fn single_token_logits_shape() {
        let (w, m) = setup(0, false);
        let p = Prompt { pieces: vec![Piece::Token(w.vocab().control().sos)], question: 0..0, answer: 0..0 };
        let v = w.episode(0).example.video;
        let mut tape = Tape::new();
        let z = m.decoder_forward(&mut tape, &p, &v, QuestionInput::Tokens(&[])).unwrap();
        assert_eq!(tape.dims(z), (1, w.vocab().len()));
    }

    #[test]
    fn causal_mask_is_exact() {
        let (w, m) = setup(0, false);
        let ex = w.episode(1).example;
        let p = build_answerer_prompt(w.vocab(), &ex, 4, 96).unwrap();
        let mut tape = Tape::new();
        let z = m.decoder_forward(&mut tape, &p, &ex.video, QuestionInput::Tokens(&ex.seed_question)).unwrap();
        let base = tape.value(z).to_vec();
        let k = w.vocab().len();
        let t = p.answer.start;
        let mut p2 = p.clone();
        p2.pieces[t + 1] = Piece::Token(w.vocab().control().null);
        let mut tape = Tape::new();
        let z2 = m.decoder_forward(&mut tape, &p2, &ex.video, QuestionInput::Tokens(&ex.seed_question)).unwrap();
        let other = tape.value(z2);
        assert_eq!(&base[..(t + 1) * k], &other[..(t + 1) * k]);
        assert_ne!(&base[(t + 1) * k..], &other[(t + 1) * k..]);
    }

    #[test]
    fn onehot_path_matches_token_path_bitwise() {
        let (w, m) = setup(2, false);
        let ex = w.episode(2).example;
        let p = build_answerer_prompt(w.vocab(), &ex, 4, 96).unwrap();
        let mut tape = Tape::new();
        let a = m.decoder_forward(&mut tape, &p, &ex.video, QuestionInput::Tokens(&ex.seed_question)).unwrap();
        let k = w.vocab().len();
        let mut oh = vec![0.0; 4 * k];
        ex.seed_question.iter().enumerate().for_each(|(i, &t)| oh[i * k + t] = 1.0);
        let ohv = tape.constant(4, k, oh).unwrap();
        let b = m.decoder_forward(&mut tape, &p, &ex.video, QuestionInput::OneHot(ohv)).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn zero_init_adapter_is_identity() {
        let (w, with) = setup(3, false);
        let ex = w.episode(4).example;
        let p = build_questioner_prompt(w.vocab(), &ex, 96).unwrap();
        let mut without = with.clone();
        // Same base weights, adapters removed from the forward pass.
        without.ids.layers.iter_mut().for_each(|l| {
            l.adapter_q = None;
            l.adapter_v = None;
        });
        let mut t1 = Tape::new();
        let a = with.decoder_forward(&mut t1, &p, &ex.video, QuestionInput::Tokens(&ex.seed_question)).unwrap();
        let mut t2 = Tape::new();
        let b = without.decoder_forward(&mut t2, &p, &ex.video, QuestionInput::Tokens(&ex.seed_question)).unwrap();
        assert_eq!(t1.value(a), t2.value(b));
    }

    #[test]
    fn rank_one_adapter_matches_outer_product() {
        let (_, mut m) = setup(1, false);
        let down = m.params.id_of("layers.0.attn.adapter_q.down").unwrap();
        let up = m.params.id_of("layers.0.attn.adapter_q.up").unwrap();
        let d = 32;
        let dv: Vec<f64> = (0..d).map(|i| (i as f64) * 0.1 - 1.0).collect();
        let uv: Vec<f64> = (0..d).map(|i| 0.5 - (i as f64) * 0.03).collect();
        m.params.get_mut(down).value = Tensor::matrix(d, 1, dv.clone()).unwrap();
        m.params.get_mut(up).value = Tensor::matrix(1, d, uv.clone()).unwrap();
        let x: Vec<f64> = (0..d).map(|i| libm::sin(i as f64)).collect();
        let mut tape = Tape::new();
        let xv = tape.constant(1, d, x.clone()).unwrap();
        let base = tape.constant(1, d, vec![0.25; d]).unwrap();
        let ids = m.ids.layers[0].adapter_q.unwrap();
        let out = m.apply_adapter(&mut tape, xv, base, ids).unwrap();
        let s: f64 = x.iter().zip(&dv).map(|(a, b)| a * b).sum();
        for (j, o) in tape.value(out).iter().enumerate() {
            assert!((o - (0.25 + s * uv[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn freeze_base_trains_only_peft_params() {
        let (_, m) = setup(2, true);
        let expect: usize = m
            .params
            .iter()
            .filter(|p| is_peft_param(&p.name))
            .map(|p| p.value.len())
            .sum();
        assert_eq!(m.trainable_count(), expect);
        assert!(m.params.iter().any(|p| p.name.contains("adapter_")));
        let (_, full) = setup(2, false);
        assert_eq!(full.trainable_count(), full.params.total_count());
    }

    #[test]
    fn frozen_base_gets_zero_grad() {
        let (w, mut m) = setup(2, true);
        let ex = w.episode(0).example;
        let p = build_answerer_prompt(w.vocab(), &ex, 4, 96).unwrap();
        let mut tape = Tape::new();
        let z = m
            .target_logits(&mut tape, &p, &ex.video, QuestionInput::Tokens(&ex.seed_question), p.answer.clone())
            .unwrap();
        let lp = tape.log_softmax(z).unwrap();
        let mut targets: Vec<usize> = ex.answer.clone();
        targets.push(w.vocab().control().eos);
        let picked = tape.pick_per_row(lp, &targets).unwrap();
        let loss = tape.sum(picked);
        tape.grad(loss, &mut m.params).unwrap();
        for p in m.params.iter() {
            if !p.trainable {
                assert!(p.grad.data().iter().all(|&g| g == 0.0), "{}", p.name);
            }
        }
        let proj = m.params.get(m.params.id_of("video.proj_w").unwrap());
        assert!(proj.grad.data().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn overlength_prompt_is_rejected() {
        let w = World::new(WorldConfig::default()).unwrap();
        let arch = ArchConfig { max_len: 20, ..ArchConfig::default() };
        let m = VideoLm::new(ModelConfig::new(&arch, w.vocab().len(), 10, 32), 0).unwrap();
        let ex = w.episode(0).example;
        let p = build_answerer_prompt(w.vocab(), &ex, 4, 96).unwrap();
        let r = m.decoder_forward(&mut Tape::new(), &p, &ex.video, QuestionInput::Tokens(&ex.seed_question));
        assert!(matches!(r, Err(Error::Overlength { .. })));
    }
}
