//! Procedural video-QA episodes.
//!
//! A video is a sequence of events, each a (shape, color, motion) triple at a
//! temporal index. Slot features are a fixed random linear encoding of the
//! one-hot attributes plus the one-hot position, with Gaussian noise. Every
//! question is answerable from the event list alone, and [`oracle_answer`]
//! recomputes the answer from the question tokens and the events.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::data::{QAExample, VideoFeatures};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::vocab::Vocabulary;

const TEMPLATE_WORDS: [&str; 9] = ["what", "color", "motion", "shape", "of", "after", "how", "many", "things"];
const NUMBER_WORDS: [&str; 21] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven",
    "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen", "nineteen",
    "twenty",
];

/// Offset separating validation episode ids from training ids.
pub const VAL_ID_OFFSET: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub shapes: Vec<String>,
    pub colors: Vec<String>,
    pub motions: Vec<String>,
    pub events_per_video: usize,
    pub feature_width: usize,
    pub feature_noise: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect();
        Self {
            shapes: s(&["cube", "sphere", "cone", "ring", "star", "pyramid", "disk", "cylinder"]),
            colors: s(&["red", "blue", "green", "yellow", "purple", "orange"]),
            motions: s(&["spin", "slide", "bounce", "roll", "hover"]),
            events_per_video: 10,
            feature_width: 32,
            feature_noise: 0.1,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| Err(Error::Config { field: field.into(), reason });
        if self.shapes.len() < 5 {
            return bad("world.shapes", "need at least 5 shapes".into());
        }
        if self.colors.len() < 5 {
            return bad("world.colors", "need at least 5 colors".into());
        }
        if self.motions.len() < 5 {
            return bad("world.motions", "need at least 5 motions for five distinct options".into());
        }
        if self.events_per_video < 4 || self.events_per_video >= NUMBER_WORDS.len() {
            return bad(
                "world.events_per_video",
                alloc::format!("must be in 4..{}", NUMBER_WORDS.len()),
            );
        }
        if self.feature_width == 0 {
            return bad("world.feature_width", "must be positive".into());
        }
        if !(self.feature_noise >= 0.0) {
            return bad("world.feature_noise", "must be non-negative".into());
        }
        self.vocabulary().map(|_| ())
    }

    fn content_words(&self) -> Vec<String> {
        let mut w: Vec<String> = TEMPLATE_WORDS.iter().map(|s| s.to_string()).collect();
        w.extend(self.shapes.iter().cloned());
        w.extend(self.colors.iter().cloned());
        w.extend(self.motions.iter().cloned());
        w.extend(NUMBER_WORDS[..=self.events_per_video].iter().map(|s| s.to_string()));
        w
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::with_content(&self.content_words())
    }

    fn encoder_rows(&self) -> usize {
        self.shapes.len() + self.colors.len() + self.motions.len() + self.events_per_video
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub shape: usize,
    pub color: usize,
    pub motion: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    ColorOf,
    MotionOf,
    OrderOf,
    CountOf,
}

impl QuestionKind {
    pub const ALL: [QuestionKind; 4] =
        [QuestionKind::ColorOf, QuestionKind::MotionOf, QuestionKind::OrderOf, QuestionKind::CountOf];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub events: Vec<Event>,
    pub kind: QuestionKind,
    pub example: QAExample,
}

/// Generator bound to one world: vocabulary, attribute token ids and the
/// fixed feature encoder.
#[derive(Debug, Clone)]
pub struct World {
    cfg: WorldConfig,
    vocab: Vocabulary,
    shape_ids: Vec<usize>,
    color_ids: Vec<usize>,
    motion_ids: Vec<usize>,
    number_ids: Vec<usize>,
    encoder: Vec<f64>,
}

/// Gram-Schmidt over the first `min(rows, width)` rows, rescaled to norm
/// `sqrt(width)` so entries keep unit variance on average.
fn orthogonalize_rows(m: &mut [f64], rows: usize, width: usize) {
    let scale = libm::sqrt(width as f64);
    for i in 0..rows.min(width) {
        for j in 0..i {
            let (head, tail) = m.split_at_mut(i * width);
            let prev = &head[j * width..(j + 1) * width];
            let row = &mut tail[..width];
            let d: f64 = prev.iter().zip(row.iter()).map(|(a, b)| a * b).sum::<f64>() / (scale * scale);
            row.iter_mut().zip(prev).for_each(|(r, p)| *r -= d * p);
        }
        let row = &mut m[i * width..(i + 1) * width];
        let n = libm::sqrt(row.iter().map(|x| x * x).sum::<f64>());
        row.iter_mut().for_each(|x| *x *= scale / n);
    }
}

impl World {
    pub fn new(cfg: WorldConfig) -> Result<Self> {
        cfg.validate()?;
        let vocab = cfg.vocabulary()?;
        let ids = |xs: &[String]| xs.iter().map(|x| vocab.id(x)).collect::<Result<Vec<_>>>();
        let shape_ids = ids(&cfg.shapes)?;
        let color_ids = ids(&cfg.colors)?;
        let motion_ids = ids(&cfg.motions)?;
        let number_ids = NUMBER_WORDS[..=cfg.events_per_video]
            .iter()
            .map(|w| vocab.id(w))
            .collect::<Result<Vec<_>>>()?;
        let mut enc_rng = RngStream::new(cfg.seed).split(0xE1C0DE);
        let mut encoder: Vec<f64> = (0..cfg.encoder_rows() * cfg.feature_width).map(|_| enc_rng.normal()).collect();
        orthogonalize_rows(&mut encoder, cfg.encoder_rows(), cfg.feature_width);
        Ok(Self { cfg, vocab, shape_ids, color_ids, motion_ids, number_ids, encoder })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn word(&self, w: &str) -> usize {
        self.vocab.id(w).expect("template word in vocabulary")
    }

    /// Slot features for an event list.
    pub fn encode_events(&self, events: &[Event], rng: &mut RngStream) -> VideoFeatures {
        let w = self.cfg.feature_width;
        let (ns, nc, nm) = (self.cfg.shapes.len(), self.cfg.colors.len(), self.cfg.motions.len());
        let mut data = vec![0.0; events.len() * w];
        for (i, ev) in events.iter().enumerate() {
            let rows = [ev.shape, ns + ev.color, ns + nc + ev.motion, ns + nc + nm + i];
            for j in 0..w {
                let mut v: f64 = rows.iter().map(|&r| self.encoder[r * w + j]).sum();
                v += self.cfg.feature_noise * rng.normal();
                // Features are stored as f32 on disk; keep them f32-exact.
                data[i * w + j] = v as f32 as f64;
            }
        }
        VideoFeatures { slots: events.len(), width: w, data }
    }

    /// Episode `id`; each id draws from its own random stream.
    pub fn episode(&self, id: u64) -> Episode {
        let mut rng = RngStream::new(self.cfg.seed).split(0xDA7A).split(id);
        loop {
            let events: Vec<Event> = (0..self.cfg.events_per_video)
                .map(|_| Event {
                    shape: rng.below(self.cfg.shapes.len()),
                    color: rng.below(self.cfg.colors.len()),
                    motion: rng.below(self.cfg.motions.len()),
                })
                .collect();
            let kind = QuestionKind::ALL[rng.below(4)];
            if let Some((question, answer_word, family)) = self.pose(kind, &events, &mut rng) {
                let (options, correct_index) = self.options(kind, answer_word, &family, &mut rng);
                let video = self.encode_events(&events, &mut rng);
                let example = QAExample {
                    id,
                    video,
                    seed_question: question,
                    answer: vec![answer_word],
                    options,
                    correct_index,
                };
                return Episode { events, kind, example };
            }
        }
    }

    fn pose(&self, kind: QuestionKind, events: &[Event], rng: &mut RngStream) -> Option<(Vec<usize>, usize, Vec<usize>)> {
        let unique = |attr: fn(&Event) -> usize| -> Vec<usize> {
            (0..events.len())
                .filter(|&i| events.iter().filter(|e| attr(e) == attr(&events[i])).count() == 1)
                .collect()
        };
        let shape = |e: &Event| e.shape;
        let color = |e: &Event| e.color;
        let motion = |e: &Event| e.motion;
        match kind {
            QuestionKind::ColorOf | QuestionKind::MotionOf => {
                let by_shape = rng.below(2) == 0;
                let (asked, ref_attr, ref_ids): (fn(&Event) -> usize, fn(&Event) -> usize, &[usize]) =
                    match (kind, by_shape) {
                        (QuestionKind::ColorOf, true) => (color, shape, &self.shape_ids),
                        (QuestionKind::ColorOf, false) => (color, motion, &self.motion_ids),
                        (_, true) => (motion, shape, &self.shape_ids),
                        (_, false) => (motion, color, &self.color_ids),
                    };
                let cands = unique(ref_attr);
                if cands.is_empty() {
                    return None;
                }
                let ev = &events[cands[rng.below(cands.len())]];
                let (head, family) = if kind == QuestionKind::ColorOf {
                    ("color", &self.color_ids)
                } else {
                    ("motion", &self.motion_ids)
                };
                let q = vec![self.word("what"), self.word(head), self.word("of"), ref_ids[ref_attr(ev)]];
                Some((q, family[asked(ev)], family.clone()))
            }
            QuestionKind::OrderOf => {
                let cands: Vec<usize> =
                    unique(shape).into_iter().filter(|&i| i + 1 < events.len()).collect();
                if cands.is_empty() {
                    return None;
                }
                let i = cands[rng.below(cands.len())];
                let q = vec![
                    self.word("what"),
                    self.word("shape"),
                    self.word("after"),
                    self.shape_ids[events[i].shape],
                ];
                Some((q, self.shape_ids[events[i + 1].shape], self.shape_ids.clone()))
            }
            QuestionKind::CountOf => {
                let c = rng.below(self.cfg.colors.len());
                let n = events.iter().filter(|e| e.color == c).count();
                let q = vec![self.word("how"), self.word("many"), self.color_ids[c], self.word("things")];
                Some((q, self.number_ids[n], self.number_ids.clone()))
            }
        }
    }

    fn options(
        &self,
        kind: QuestionKind,
        answer: usize,
        family: &[usize],
        rng: &mut RngStream,
    ) -> (Vec<Vec<usize>>, usize) {
        let mut chosen: Vec<usize> = if kind == QuestionKind::CountOf {
            // A window of five consecutive counts with the answer at a random
            // offset, so option values alone say little about the answer.
            let n = family.iter().position(|&w| w == answer).unwrap();
            let max = family.len() - 1;
            let start = (n as isize - rng.below(5) as isize).clamp(0, max as isize - 4) as usize;
            (start..start + 5).map(|i| family[i]).collect()
        } else {
            let mut rest: Vec<usize> = family.iter().copied().filter(|&w| w != answer).collect();
            rng.shuffle(&mut rest);
            rest.truncate(4);
            rest.push(answer);
            rest
        };
        rng.shuffle(&mut chosen);
        let correct = chosen.iter().position(|&w| w == answer).unwrap();
        (chosen.into_iter().map(|w| vec![w]).collect(), correct)
    }

    pub fn generate(&self, n: usize, id_offset: u64) -> Vec<Episode> {
        (0..n as u64).map(|i| self.episode(id_offset + i)).collect()
    }

    /// Training and validation episodes with disjoint ids.
    pub fn generate_split(&self, n_train: usize, n_val: usize) -> (Vec<Episode>, Vec<Episode>) {
        (self.generate(n_train, 0), self.generate(n_val, VAL_ID_OFFSET))
    }

    /// Attribute word ids for the answer family of `kind`.
    pub fn family(&self, kind: QuestionKind) -> &[usize] {
        match kind {
            QuestionKind::ColorOf => &self.color_ids,
            QuestionKind::MotionOf => &self.motion_ids,
            QuestionKind::OrderOf => &self.shape_ids,
            QuestionKind::CountOf => &self.number_ids,
        }
    }
}

/// Rule-based answer recomputed from question tokens and events.
pub fn oracle_answer(world: &World, events: &[Event], question: &[usize]) -> Option<usize> {
    let [w0, w1, _w2, w3] = <[usize; 4]>::try_from(question).ok()?;
    let find = |ids: &[usize], w: usize| ids.iter().position(|&x| x == w);
    if w0 == world.word("how") {
        let c = find(&world.color_ids, question[2])?;
        let n = events.iter().filter(|e| e.color == c).count();
        return Some(world.number_ids[n]);
    }
    let matches = |e: &Event| {
        find(&world.shape_ids, w3).map(|s| e.shape == s)
            .or_else(|| find(&world.color_ids, w3).map(|c| e.color == c))
            .or_else(|| find(&world.motion_ids, w3).map(|m| e.motion == m))
            .unwrap_or(false)
    };
    let hits: Vec<usize> = (0..events.len()).filter(|&i| matches(&events[i])).collect();
    if hits.len() != 1 {
        return None;
    }
    let ev = &events[hits[0]];
    if w1 == world.word("color") {
        Some(world.color_ids[ev.color])
    } else if w1 == world.word("motion") {
        Some(world.motion_ids[ev.motion])
    } else if w1 == world.word("shape") {
        events.get(hits[0] + 1).map(|next| world.shape_ids[next.shape])
    } else {
        None
    }
}

/// `features + N(0, σ²)` per entry; `σ = 0` is the identity.
pub fn corrupt_video(features: &VideoFeatures, sigma: f64, rng: &mut RngStream) -> Result<VideoFeatures> {
    if !(sigma >= 0.0) {
        return Err(Error::Domain(alloc::format!("noise level {sigma} must be >= 0")));
    }
    let mut out = features.clone();
    if sigma > 0.0 {
        out.data.iter_mut().for_each(|x| *x += sigma * rng.normal());
    }
    Ok(out)
}

/// Replace `⌈ρ · n⌉` uniformly chosen content positions with `null_token`,
/// where `n` counts positions for which `is_content` holds.
pub fn corrupt_question(
    tokens: &[usize],
    rho: f64,
    null_token: usize,
    is_content: impl Fn(usize) -> bool,
    rng: &mut RngStream,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Domain(alloc::format!("destroy fraction {rho} outside [0, 1]")));
    }
    let mut content: Vec<usize> = (0..tokens.len()).filter(|&i| is_content(tokens[i])).collect();
    let k = replaced_count(content.len(), rho);
    rng.shuffle(&mut content);
    let mut out = tokens.to_vec();
    for &i in &content[..k] {
        out[i] = null_token;
    }
    Ok(out)
}

/// `⌈ρ · n⌉`, robust to products like `0.3 * 10 = 3.0000000000000004`.
pub fn replaced_count(n: usize, rho: f64) -> usize {
    (libm::ceil(rho * n as f64 - 1e-9).max(0.0) as usize).min(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> World {
        World::new(WorldConfig::default()).unwrap()
    }

    #[test]
    fn oracle_answers_every_question() {
        let w = world();
        for ep in w.generate(2000, 0) {
            ep.example.validate().unwrap();
            assert_eq!(oracle_answer(&w, &ep.events, &ep.example.seed_question), Some(ep.example.answer[0]));
        }
    }

    #[test]
    fn answer_never_appears_in_seed_question() {
        let w = world();
        for ep in w.generate(2000, 0) {
            assert!(!ep.example.seed_question.contains(&ep.example.answer[0]));
        }
    }

    #[test]
    fn options_are_distinct_and_from_one_family() {
        let w = world();
        for ep in w.generate(500, 0) {
            let fam = w.family(ep.kind);
            let mut opts: Vec<usize> = ep.example.options.iter().map(|o| o[0]).collect();
            assert!(opts.iter().all(|o| fam.contains(o)));
            opts.sort();
            opts.dedup();
            assert_eq!(opts.len(), 5);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = world().generate(50, 0);
        let b = world().generate(50, 0);
        assert_eq!(a, b);
        let other = World::new(WorldConfig { seed: 1, ..WorldConfig::default() }).unwrap();
        assert_ne!(a, other.generate(50, 0));
    }

    #[test]
    fn vocabulary_disjoint_from_control() {
        let w = world();
        assert!(w.vocab().len() >= 30);
        for &id in w.shape_ids.iter().chain(&w.color_ids).chain(&w.motion_ids) {
            assert!(!w.vocab().is_control(id));
        }
    }

    #[test]
    fn corruption_examples() {
        let w = world();
        let ep = w.episode(3);
        let mut rng = RngStream::new(0);
        let same = corrupt_video(&ep.example.video, 0.0, &mut rng).unwrap();
        assert_eq!(same, ep.example.video);

        let q = &ep.example.seed_question;
        let null = w.vocab().control().null;
        let vocab = w.vocab();
        let content = |t: usize| !vocab.is_control(t);
        assert_eq!(&corrupt_question(q, 0.0, null, content, &mut rng).unwrap(), q);
        let all = corrupt_question(q, 1.0, null, content, &mut rng).unwrap();
        assert!(all.iter().all(|&t| t == null));

        let seven: Vec<usize> = (20..27).collect();
        let half = corrupt_question(&seven, 0.5, null, content, &mut rng).unwrap();
        assert_eq!(half.iter().filter(|&&t| t == null).count(), 4);
        assert_eq!(replaced_count(10, 0.3), 3);
        assert!(corrupt_question(q, 1.5, null, content, &mut rng).is_err());
    }
}
