//! Gumbel-max frequencies and the straight-through gradient.

use bovila_core::gumbel::{gumbel_softmax, gumbel_softmax_with_noise, sample_gumbel, GumbelConfig};
use bovila_core::special::chi_square_sf;
use bovila_core::{ParamStore, RngStream, Tape, Tensor};

/// Upper 1% point of chi-square with 4 degrees of freedom.
const CHI2_4_CRIT_01: f64 = 13.276_704_135_987_62;

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[test]
fn hard_sample_frequencies_match_softmax() {
    let z = [0.4, -1.1, 1.3, 0.0, 0.7];
    let n = 100_000;
    let cfg = GumbelConfig { temperature: 1.0, hard: true };
    let mut rng = RngStream::new(77);
    let mut counts = [0usize; 5];
    for _ in 0..n {
        let y = gumbel_softmax(&z, &cfg, &mut rng).unwrap();
        assert_eq!(y.iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(y.iter().filter(|&&v| v == 0.0).count(), 4);
        counts[y.iter().position(|&v| v == 1.0).unwrap()] += 1;
    }
    let p = softmax(&z);
    let stat: f64 = counts
        .iter()
        .zip(&p)
        .map(|(&c, &pi)| {
            let e = pi * n as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    eprintln!("counts {counts:?} chi2 {stat:.3}");
    assert!(stat < CHI2_4_CRIT_01, "chi-square {stat}");
    assert!((chi_square_sf(CHI2_4_CRIT_01, 4).unwrap() - 0.01).abs() < 1e-9);
}

#[test]
fn straight_through_gradient_equals_soft_gradient() {
    let mut rng = RngStream::new(8);
    for trial in 0..200 {
        let (rows, k) = (3, 5);
        let z: Vec<f64> = (0..rows * k).map(|_| 2.0 * rng.normal()).collect();
        let w: Vec<f64> = (0..rows * k).map(|_| rng.normal()).collect();
        let noise = sample_gumbel(&mut rng, rows * k);
        let temperature = 0.2 + rng.uniform() * 2.0;
        let mut store = ParamStore::new();
        let id = store.add("z", Tensor::matrix(rows, k, z).unwrap());
        let grad = |hard: bool| {
            let mut t = Tape::new();
            let zv = t.param(&store, id);
            let y = gumbel_softmax_with_noise(&mut t, zv, &noise, &GumbelConfig { temperature, hard }).unwrap();
            if hard {
                assert!(t.value(y).iter().all(|&v| v == 0.0 || v == 1.0));
            }
            let wv = t.constant(rows, k, w.clone()).unwrap();
            let l = t.mul(y, wv).unwrap();
            let l = t.sum(l);
            t.backward(l).unwrap().param_grad(id).unwrap().to_vec()
        };
        let (gh, gs) = (grad(true), grad(false));
        for (a, b) in gh.iter().zip(&gs) {
            assert!((a - b).abs() <= 1e-6, "trial {trial}: {a} vs {b}");
        }
    }
}
