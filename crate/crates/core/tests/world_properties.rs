//! Generator sanity: answerable, balanced, and not solvable from the
//! options alone.

use std::collections::HashMap;

use bovila_core::model::{ArchConfig, ModelConfig, VideoLm};
use bovila_core::trainer::evaluate_accuracy;
use bovila_core::world::{oracle_answer, World, WorldConfig};

const CHI2_4_CRIT_01: f64 = 13.276_704_135_987_62;

fn world() -> World {
    World::new(WorldConfig::default()).unwrap()
}

#[test]
fn oracle_answers_everything() {
    let w = world();
    for ep in w.generate(3000, 0) {
        let ex = &ep.example;
        ex.validate().unwrap();
        assert_eq!(oracle_answer(&w, &ep.events, &ex.seed_question), Some(ex.answer[0]), "episode {}", ex.id);
    }
}

#[test]
fn correct_index_is_uniform() {
    let w = world();
    let n = 5000;
    let mut counts = [0usize; 5];
    for ep in w.generate(n, 0) {
        counts[ep.example.correct_index] += 1;
    }
    let e = n as f64 / 5.0;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    eprintln!("correct_index counts {counts:?} chi2 {stat:.3}");
    assert!(stat < CHI2_4_CRIT_01);
}

/// Scores each option by how often its token was correct in training (with
/// add-one smoothing) plus the log prior of its position.
#[test]
fn question_blind_classifier_stays_below_35_percent() {
    let w = world();
    let (train, val) = w.generate_split(2000, 500);
    let mut seen: HashMap<usize, (f64, f64)> = HashMap::new();
    let mut pos = [1.0f64; 5];
    for ep in &train {
        let ex = &ep.example;
        for (i, o) in ex.options.iter().enumerate() {
            let e = seen.entry(o[0]).or_insert((1.0, 2.0));
            e.1 += 1.0;
            if i == ex.correct_index {
                e.0 += 1.0;
            }
        }
        pos[ex.correct_index] += 1.0;
    }
    let total: f64 = pos.iter().sum();
    let mut correct = 0;
    for ep in &val {
        let ex = &ep.example;
        let score = |i: usize| {
            let (c, n) = seen.get(&ex.options[i][0]).copied().unwrap_or((1.0, 2.0));
            (c / n).ln() + (pos[i] / total).ln()
        };
        let best = (0..5).max_by(|&a, &b| score(a).total_cmp(&score(b))).unwrap();
        if best == ex.correct_index {
            correct += 1;
        }
    }
    let acc = correct as f64 / val.len() as f64;
    eprintln!("blind accuracy {acc:.3}");
    assert!(acc < 0.35);
}

#[test]
fn untrained_model_is_near_chance() {
    let w = world();
    let val: Vec<_> = w.generate(500, 1 << 40).into_iter().map(|e| e.example).collect();
    let mut accs = Vec::new();
    for seed in 0..3 {
        let cfg = ModelConfig::new(&ArchConfig::default(), w.vocab().len(), 10, 32);
        let m = VideoLm::new(cfg, seed).unwrap();
        accs.push(evaluate_accuracy(&m, w.vocab(), &val).unwrap());
    }
    let mean = accs.iter().sum::<f64>() / 3.0;
    eprintln!("untrained accuracies {accs:?}");
    assert!((mean - 0.2).abs() < 0.07, "{accs:?}");
}
