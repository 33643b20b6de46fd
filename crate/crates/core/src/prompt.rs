//! Questioner and answerer input layouts.
//!
//! Questioner: `[SOS] VIDEO: v1..vN CHOICES: (A) o1 .. (E) o5 ANSWER: a [EOS] QUESTION: q1..qM`
//!
//! Answerer:   `[SOS] VIDEO: v1..vN QUESTION: q1..qM CHOICES: (A) o1 .. (E) o5 ANSWER: a [EOS]`

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use crate::data::QAExample;
use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Piece {
    Token(usize),
    VideoSlot(usize),
    QuestionSlot(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub pieces: Vec<Piece>,
    /// Positions holding question slots.
    pub question: Range<usize>,
    /// Positions holding the answer tokens and the trailing `[EOS]`.
    pub answer: Range<usize>,
}

impl Prompt {
    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    /// Rows whose next-token logits predict the tokens in `targets`.
    pub fn predicting_rows(targets: &Range<usize>) -> Vec<usize> {
        targets.clone().map(|p| p - 1).collect()
    }

    /// Text rendering; video slots print as `<v1>`, `<v2>`, ... and question
    /// slots as the given question tokens.
    pub fn render(&self, vocab: &Vocabulary, question: &[usize]) -> String {
        let mut out = String::new();
        for (i, p) in self.pieces.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            match *p {
                Piece::Token(t) => out.push_str(vocab.token(t)),
                Piece::VideoSlot(s) => out.push_str(&alloc::format!("<v{}>", s + 1)),
                Piece::QuestionSlot(q) => out.push_str(vocab.token(question[q])),
            }
        }
        out
    }
}

fn push_choices(pieces: &mut Vec<Piece>, vocab: &Vocabulary, ex: &QAExample) {
    let c = vocab.control();
    pieces.push(Piece::Token(c.choices));
    for (letter, opt) in c.letters.iter().zip(&ex.options) {
        pieces.push(Piece::Token(*letter));
        pieces.extend(opt.iter().map(|&t| Piece::Token(t)));
    }
}

fn push_answer(pieces: &mut Vec<Piece>, vocab: &Vocabulary, ex: &QAExample) -> Range<usize> {
    pieces.push(Piece::Token(vocab.control().answer));
    let start = pieces.len();
    pieces.extend(ex.answer.iter().map(|&t| Piece::Token(t)));
    pieces.push(Piece::Token(vocab.control().eos));
    start..pieces.len()
}

fn check_len(p: Prompt, max_len: usize) -> Result<Prompt> {
    if p.len() > max_len {
        Err(Error::Overlength { len: p.len(), max: max_len })
    } else {
        Ok(p)
    }
}

fn push_video(pieces: &mut Vec<Piece>, vocab: &Vocabulary, ex: &QAExample) {
    pieces.push(Piece::Token(vocab.control().sos));
    pieces.push(Piece::Token(vocab.control().video));
    pieces.extend((0..ex.video.slots).map(Piece::VideoSlot));
}

pub fn build_questioner_prompt(vocab: &Vocabulary, ex: &QAExample, max_len: usize) -> Result<Prompt> {
    let mut pieces = Vec::new();
    push_video(&mut pieces, vocab, ex);
    push_choices(&mut pieces, vocab, ex);
    let answer = push_answer(&mut pieces, vocab, ex);
    pieces.push(Piece::Token(vocab.control().question));
    let start = pieces.len();
    pieces.extend((0..ex.seed_question.len()).map(Piece::QuestionSlot));
    let question = start..pieces.len();
    check_len(Prompt { pieces, question, answer }, max_len)
}

/// `question_len` is the number of question slots (the seed length for both
/// seed and generated questions).
pub fn build_answerer_prompt(
    vocab: &Vocabulary,
    ex: &QAExample,
    question_len: usize,
    max_len: usize,
) -> Result<Prompt> {
    let mut pieces = Vec::new();
    push_video(&mut pieces, vocab, ex);
    pieces.push(Piece::Token(vocab.control().question));
    let start = pieces.len();
    pieces.extend((0..question_len).map(Piece::QuestionSlot));
    let question = start..pieces.len();
    push_choices(&mut pieces, vocab, ex);
    let answer = push_answer(&mut pieces, vocab, ex);
    check_len(Prompt { pieces, question, answer }, max_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{World, WorldConfig};

    #[test]
    fn ranges_are_disjoint_and_in_bounds() {
        let w = World::new(WorldConfig::default()).unwrap();
        let ex = w.episode(0).example;
        for p in [
            build_questioner_prompt(w.vocab(), &ex, 64).unwrap(),
            build_answerer_prompt(w.vocab(), &ex, ex.seed_question.len(), 64).unwrap(),
        ] {
            assert!(p.question.end <= p.len() && p.answer.end <= p.len());
            assert!(p.question.end <= p.answer.start || p.answer.end <= p.question.start);
            assert_eq!(p.answer.len(), ex.answer.len() + 1);
            assert_eq!(p.pieces[p.answer.end - 1], Piece::Token(w.vocab().control().eos));
            assert_eq!(p.pieces[p.answer.start], Piece::Token(ex.answer[0]));
        }
    }

    #[test]
    fn answerer_layout_renders_template() {
        let w = World::new(WorldConfig::default()).unwrap();
        let ex = w.episode(5).example;
        let v = w.vocab();
        let p = build_answerer_prompt(v, &ex, ex.seed_question.len(), 64).unwrap();
        let slots: Vec<String> = (1..=ex.video.slots).map(|i| alloc::format!("<v{i}>")).collect();
        let opts: Vec<String> = ex
            .options
            .iter()
            .enumerate()
            .map(|(i, o)| alloc::format!("{} {}", crate::vocab::OPTION_LETTERS[i], v.decode(o)))
            .collect();
        let expect = alloc::format!(
            "[SOS] VIDEO: {} QUESTION: {} CHOICES: {} ANSWER: {} [EOS]",
            slots.join(" "),
            v.decode(&ex.seed_question),
            opts.join(" "),
            v.decode(&ex.answer)
        );
        assert_eq!(p.render(v, &ex.seed_question), expect);
    }

    #[test]
    fn overlength_is_rejected() {
        let w = World::new(WorldConfig::default()).unwrap();
        let ex = w.episode(0).example;
        assert!(matches!(
            build_answerer_prompt(w.vocab(), &ex, 4, 10),
            Err(Error::Overlength { .. })
        ));
    }
}
