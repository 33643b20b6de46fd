//! Property tests over the numeric core.

use bovila_core::edl::{bayes_risk_loss, decouple_evidence, edl_kl_regularizer, to_dirichlet, uncertainty, DirichletParams, EdlHead};
use bovila_core::special::{digamma, lgamma};
use bovila_core::stats::{mann_whitney_greater, min_max, ranks, spearman};
use bovila_core::world::{corrupt_question, replaced_count};
use bovila_core::{ParamStore, RngStream, Tape, Tensor};
use proptest::prelude::*;

fn vec_f(len: std::ops::Range<usize>, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn softmax_rows_on_simplex(z in vec_f(2..40, -50.0, 50.0)) {
        let mut t = Tape::new();
        let v = t.constant(1, z.len(), z.clone()).unwrap();
        let p = t.softmax(v).unwrap();
        let p = t.value(p);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn log_softmax_is_log_of_softmax(z in vec_f(2..20, -30.0, 30.0)) {
        let mut t = Tape::new();
        let v = t.constant(1, z.len(), z.clone()).unwrap();
        let p = t.softmax(v).unwrap();
        let lp = t.log_softmax(v).unwrap();
        for (a, b) in t.value(p).iter().zip(t.value(lp)) {
            prop_assert!((a.ln() - b).abs() < 1e-9 || *a < 1e-300);
        }
    }

    #[test]
    fn uncertainty_in_unit_interval(z in vec_f(2..30, -1e3, 1e3), h in vec_f(30..31, -5.0, 5.0), b in -1e3f64..1e3) {
        let head = EdlHead { weights: h[..z.len()].to_vec(), bias: b };
        let d = to_dirichlet(&decouple_evidence(&z, &head).unwrap());
        let u = uncertainty(&[d]).unwrap().aggregate;
        prop_assert!(u > 0.0 && u <= 1.0);
        prop_assert!((0.0..1.0).contains(&(1.0 - u)));
    }

    #[test]
    fn bayes_risk_and_kl_nonnegative(ev in vec_f(2..12, 0.0, 50.0), t in 0usize..12) {
        let d = DirichletParams::new(ev.iter().map(|e| e + 1.0).collect()).unwrap();
        let t = t % ev.len();
        prop_assert!(bayes_risk_loss(&d, t).unwrap() >= 0.0);
        prop_assert!(edl_kl_regularizer(&d) >= -1e-10);
    }

    #[test]
    fn more_target_evidence_lowers_risk(ev in vec_f(3..8, 0.0, 20.0), extra in 0.1f64..10.0) {
        let a: Vec<f64> = ev.iter().map(|e| e + 1.0).collect();
        let mut b = a.clone();
        b[0] += extra;
        let ra = bayes_risk_loss(&DirichletParams::new(a).unwrap(), 0).unwrap();
        let rb = bayes_risk_loss(&DirichletParams::new(b).unwrap(), 0).unwrap();
        prop_assert!(rb < ra);
    }

    #[test]
    fn special_recurrences(x in 0.05f64..80.0) {
        prop_assert!((digamma(x + 1.0).unwrap() - digamma(x).unwrap() - 1.0 / x).abs() < 1e-9 * (1.0 / x).max(1.0));
        let l1 = lgamma(x + 1.0).unwrap();
        prop_assert!((l1 - lgamma(x).unwrap() - x.ln()).abs() < 1e-9 * l1.abs().max(1.0));
    }

    #[test]
    fn corrupt_question_replaces_exact_count(
        toks in prop::collection::vec(0usize..20, 1..15),
        rho in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        // ids below 5 play the role of control tokens
        let is_content = |t: usize| t >= 5;
        let n = toks.iter().filter(|&&t| is_content(t)).count();
        let out = corrupt_question(&toks, rho, 99, is_content, &mut RngStream::new(seed)).unwrap();
        prop_assert_eq!(out.iter().filter(|&&t| t == 99).count(), replaced_count(n, rho));
        for (a, b) in toks.iter().zip(&out) {
            prop_assert!(*b == 99 || a == b);
            if !is_content(*a) { prop_assert_eq!(a, b); }
        }
    }

    #[test]
    fn spearman_bounded_and_self_one(x in vec_f(3..40, -10.0, 10.0), y in vec_f(40..41, -10.0, 10.0)) {
        let y = &y[..x.len()];
        let r = spearman(&x, y).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        let distinct = { let mut s = x.clone(); s.sort_by(f64::total_cmp); s.windows(2).all(|w| w[0] < w[1]) };
        if distinct { prop_assert!((spearman(&x, &x).unwrap() - 1.0).abs() < 1e-12); }
        let rk = ranks(&x);
        prop_assert!((rk.iter().sum::<f64>() - (x.len() * (x.len() + 1)) as f64 / 2.0).abs() < 1e-9);
    }

    #[test]
    fn mann_whitney_u_statistics_sum(x in vec_f(1..30, 0.0, 1.0), y in vec_f(1..30, 0.0, 1.0)) {
        let a = mann_whitney_greater(&x, &y).unwrap();
        let b = mann_whitney_greater(&y, &x).unwrap();
        prop_assert!((a.u + b.u - (x.len() * y.len()) as f64).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&a.p_greater));
    }

    #[test]
    fn min_max_spans_unit_interval(x in vec_f(2..50, -1e3, 1e3)) {
        let m = min_max(&x);
        prop_assert!(m.iter().all(|v| (0.0..=1.0).contains(v)));
        let distinct = x.iter().any(|&v| v != x[0]);
        if distinct {
            prop_assert_eq!(m.iter().cloned().fold(f64::INFINITY, f64::min), 0.0);
            prop_assert_eq!(m.iter().cloned().fold(0.0, f64::max), 1.0);
        }
    }

    #[test]
    fn grad_accumulation_doubles(x in vec_f(4..5, -2.0, 2.0), w in vec_f(4..5, -2.0, 2.0)) {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::matrix(2, 2, x).unwrap());
        let run = |store: &mut ParamStore| {
            let mut t = Tape::new();
            let xv = t.param(store, id);
            let e = t.gelu(xv);
            let wv = t.constant(2, 2, w.clone()).unwrap();
            let l = t.mul(e, wv).unwrap();
            let l = t.sum(l);
            t.grad(l, store).unwrap();
        };
        run(&mut store);
        let once = store.get(id).grad.data().to_vec();
        run(&mut store);
        for (a, b) in once.iter().zip(store.get(id).grad.data()) {
            prop_assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn split_streams_are_deterministic(seed in any::<u64>(), tag in any::<u64>()) {
        let mut a = RngStream::new(seed).split(tag);
        let mut b = RngStream::new(seed).split(tag);
        for _ in 0..8 { prop_assert_eq!(a.next_u64(), b.next_u64()); }
    }
}
