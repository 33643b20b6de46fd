//! Central-difference verification of tape gradients.

use alloc::string::String;

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::rng::RngStream;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    /// max |analytic − numeric| / (|analytic| + |numeric| + 1e-12)
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub entries_checked: usize,
}

/// Compare analytic gradients of `loss_fn` against central differences over
/// every entry of every trainable parameter.
///
/// The difference quotient is the fourth-order central stencil
/// `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`. Its small truncation
/// error allows `h` near 1e-3, which keeps roundoff below the tolerance
/// even for entries whose gradient is many orders smaller than the loss.
///
/// `loss_fn` must build the same computation on every call. Perturbed passes
/// replay the detached values of the unperturbed pass, so stop-gradient
/// subexpressions have no numeric effect either.
pub fn finite_diff_check<F>(store: &mut ParamStore, loss_fn: F, eps: f64) -> Result<FdReport>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    check(store, loss_fn, eps, None)
}

/// As [`finite_diff_check`] but probing at most `per_param` randomly chosen
/// entries of each parameter.
pub fn finite_diff_check_sampled<F>(
    store: &mut ParamStore,
    loss_fn: F,
    eps: f64,
    per_param: usize,
    rng: &mut RngStream,
) -> Result<FdReport>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    check(store, loss_fn, eps, Some((per_param, rng)))
}

fn check<F>(
    store: &mut ParamStore,
    mut loss_fn: F,
    eps: f64,
    mut sample: Option<(usize, &mut RngStream)>,
) -> Result<FdReport>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Domain(alloc::format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let mut base = Tape::recording();
    let loss = loss_fn(store, &mut base)?;
    let grads = base.backward(loss)?;
    let record = base.detach_record();

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut t = Tape::replaying(&record);
        let l = loss_fn(store, &mut t)?;
        Ok(t.scalar(l))
    };

    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        entries_checked: 0,
    };
    for id in 0..store.len() {
        if !store.get(id).trainable {
            continue;
        }
        let n = store.get(id).value.len();
        let analytic = grads.param_grad(id).map(|g| g.to_vec());
        let picks: alloc::vec::Vec<usize> = match sample.as_mut() {
            Some((k, rng)) if *k < n => (0..*k).map(|_| rng.below(n)).collect(),
            _ => (0..n).collect(),
        };
        for i in picks {
            let orig = store.get(id).value.data()[i];
            let mut at = |store: &mut ParamStore, h: f64| {
                store.get_mut(id).value.data_mut()[i] = orig + h;
                let v = eval(store);
                store.get_mut(id).value.data_mut()[i] = orig;
                v
            };
            let d1 = at(store, eps)? - at(store, -eps)?;
            let d2 = at(store, 2.0 * eps)? - at(store, -2.0 * eps)?;
            let numeric = (8.0 * d1 - d2) / (12.0 * eps);
            let a = analytic.as_ref().map_or(0.0, |g| g[i]);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            report.entries_checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst = Some((store.get(id).name.clone(), i));
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::vec;

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::from_vec(vec![0.5, -1.5, 2.0]));
        let a = Tensor::from_vec(vec![1.0, 3.0, -2.0]);
        let r = finite_diff_check(
            &mut store,
            |s, t| {
                let pv = t.param(s, p);
                let av = t.constant_tensor(&a);
                let sq = t.mul(pv, pv)?;
                let w = t.mul(sq, av)?;
                Ok(t.sum(w))
            },
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
        assert_eq!(r.entries_checked, 3);
    }

    #[test]
    fn detached_params_have_no_effect() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::from_vec(vec![0.3]));
        let q = store.add("q", Tensor::from_vec(vec![1.1]));
        let r = finite_diff_check(
            &mut store,
            |s, t| {
                let pv = t.param(s, p);
                let qv = t.param(s, q);
                let e = t.exp(pv);
                let d = t.detach(e);
                let prod = t.mul(d, qv)?;
                Ok(t.sum(prod))
            },
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");

        let mut tape = Tape::new();
        let pv = tape.param(&store, p);
        let qv = tape.param(&store, q);
        let e = tape.exp(pv);
        let d = tape.detach(e);
        let prod = tape.mul(d, qv).unwrap();
        let loss = tape.sum(prod);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param_grad(p).map(|g| g[0]).unwrap_or(0.0), 0.0);
    }

    #[test]
    fn eps_out_of_range() {
        let mut store = ParamStore::new();
        let r = finite_diff_check(&mut store, |_, t| Ok(t.scalar_const(1.0)), 1e-2);
        assert!(r.is_err());
    }
}
