//! The filter weight `1 − u` stays in `[0, 1)` and nothing overflows to NaN
//! across extreme logits and head outputs.

use bovila_core::edl::{self, decouple_evidence, to_dirichlet, uncertainty, EdlHead, EvidenceMode};
use bovila_core::Tape;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const DRAWS: usize = 100_000;

fn draw_vec(rng: &mut StdRng, k: usize) -> Vec<f64> {
    let scale = 10f64.powf(rng.random_range(-3.0..3.0));
    (0..k).map(|_| (rng.random_range(-1.0..1.0) * scale).clamp(-1e3, 1e3)).collect()
}

#[test]
fn weight_in_unit_interval_without_nan() {
    let mut rng = StdRng::seed_from_u64(2024);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..DRAWS {
        let k = rng.random_range(2..=64);
        let z = draw_vec(&mut rng, k);
        let head = EdlHead { weights: draw_vec(&mut rng, k), bias: rng.random_range(-1e3..1e3) };
        let ev = decouple_evidence(&z, &head).unwrap();
        let d = to_dirichlet(&ev);
        let u = uncertainty(std::slice::from_ref(&d)).unwrap().aggregate;
        let w = 1.0 - u;
        assert!(u > 0.0 && u <= 1.0, "draw {i}: u={u}");
        assert!((0.0..1.0).contains(&w), "draw {i}: 1-u={w}");
        assert!(edl::bayes_risk_loss(&d, 0).unwrap().is_finite(), "draw {i}");
        assert!(edl::edl_kl_regularizer(&d).is_finite(), "draw {i}");
        lo = lo.min(u);
        hi = hi.max(u);

        if i % 10 == 0 {
            // The differentiable path agrees and stays finite.
            let mut t = Tape::new();
            let zv = t.constant(1, k, z.clone()).unwrap();
            let wv = t.constant(k, 1, head.weights.clone()).unwrap();
            let bv = t.constant(1, 1, vec![head.bias]).unwrap();
            let vars = edl::alpha_on_tape(&mut t, zv, wv, bv, EvidenceMode::Decoupled).unwrap();
            let ut = edl::uncertainty_on_tape(&mut t, &vars);
            let risk = edl::bayes_risk_on_tape(&mut t, &vars, &[k - 1]).unwrap();
            let kl = edl::kl_on_tape(&mut t, &vars).unwrap();
            let ut = t.scalar(ut);
            assert!(ut > 0.0 && ut <= 1.0 && (ut - u).abs() <= 1e-12 * u.max(1e-300).max(1.0));
            assert!(t.scalar(risk).is_finite() && t.scalar(kl).is_finite(), "draw {i}");
        }
    }
    eprintln!("u range over {DRAWS} draws: [{lo:.3e}, {hi:.6}]");
}

#[test]
fn extreme_heads_hit_the_bounds_safely() {
    let z = vec![1e3, -1e3, 0.0, 5.0];
    let huge = EdlHead { weights: vec![1.0; 4], bias: 1e3 };
    let tiny = EdlHead { weights: vec![1.0; 4], bias: -1e3 };
    let u_huge = uncertainty(&[to_dirichlet(&decouple_evidence(&z, &huge).unwrap())]).unwrap().aggregate;
    let u_tiny = uncertainty(&[to_dirichlet(&decouple_evidence(&z, &tiny).unwrap())]).unwrap().aggregate;
    assert!(u_huge > 0.0 && u_huge < 1e-11);
    assert!(u_tiny <= 1.0 && 1.0 - u_tiny >= 0.0);
}
