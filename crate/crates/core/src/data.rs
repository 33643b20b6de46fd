use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-slot visual features, `slots x width`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoFeatures {
    pub slots: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl VideoFeatures {
    pub fn new(slots: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if slots == 0 || slots * width != data.len() {
            return Err(Error::Shape(alloc::format!(
                "video {slots}x{width} given {} values",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("video features".into()));
        }
        Ok(Self { slots, width, data })
    }

    pub fn slot(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }
}

/// One multiple-choice episode as the model sees it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAExample {
    pub id: u64,
    pub video: VideoFeatures,
    pub seed_question: Vec<usize>,
    /// Tokens of `options[correct_index]`, without the end marker.
    pub answer: Vec<usize>,
    pub options: Vec<Vec<usize>>,
    pub correct_index: usize,
}

impl QAExample {
    pub fn validate(&self) -> Result<()> {
        if self.seed_question.is_empty() || self.answer.is_empty() {
            return Err(Error::Shape("question and answer must be non-empty".into()));
        }
        if self.options.len() != 5 {
            return Err(Error::Shape(alloc::format!("{} options, need 5", self.options.len())));
        }
        if self.options.get(self.correct_index) != Some(&self.answer) {
            return Err(Error::Shape("answer does not match the correct option".into()));
        }
        Ok(())
    }

    /// Copy with `answer` replaced by option `i` (used to score options).
    pub fn with_option_as_answer(&self, i: usize) -> Self {
        let mut ex = self.clone();
        ex.answer = self.options[i].clone();
        ex
    }
}
