//! Rank statistics for the analysis commands.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::special::normal_sf;

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = alloc::vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / libm::sqrt(saa * sbb)
}

/// Spearman rank correlation (Pearson correlation of average ranks). A
/// constant input gives 0.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Shape(alloc::format!("spearman needs two equal-length samples of size >= 2, got {} and {}", a.len(), b.len())));
    }
    Ok(pearson(&ranks(a), &ranks(b)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MannWhitney {
    /// U statistic of the first sample.
    pub u: f64,
    pub z: f64,
    /// One-sided p-value for "first sample tends to be larger".
    pub p_greater: f64,
}

/// Mann-Whitney U test with the tie-corrected normal approximation and a
/// continuity correction.
pub fn mann_whitney_greater(x: &[f64], y: &[f64]) -> Result<MannWhitney> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Shape("mann-whitney needs two non-empty samples".into()));
    }
    let (n1, n2) = (x.len() as f64, y.len() as f64);
    let all: Vec<f64> = x.iter().chain(y).copied().collect();
    let r = ranks(&all);
    let r1: f64 = r[..x.len()].iter().sum();
    let u = r1 - n1 * (n1 + 1.0) / 2.0;
    let n = n1 + n2;
    let mut sorted = all.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    let mean = n1 * n2 / 2.0;
    let (z, p) = if var > 0.0 {
        let z = (u - mean - 0.5) / libm::sqrt(var);
        (z, normal_sf(z))
    } else {
        (0.0, 0.5)
    };
    Ok(MannWhitney { u, z, p_greater: p })
}

/// Rescale to `[0, 1]`; a constant input maps to all zeros.
pub fn min_max(xs: &[f64]) -> Vec<f64> {
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return alloc::vec![0.0; xs.len()];
    }
    xs.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

/// Median; the mean of the two middle values for even lengths.
pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut s = xs.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let m = s.len() / 2;
    Some(if s.len() % 2 == 1 { s[m] } else { (s[m - 1] + s[m]) / 2.0 })
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
    }

    #[test]
    fn spearman_of_monotone_is_one() {
        let a = [0.0, 0.5, 1.0, 2.0];
        let b = [0.1, 0.2, 0.9, 5.0];
        assert!((spearman(&a, &b).unwrap() - 1.0).abs() < 1e-15);
        let c = [5.0, 0.9, 0.2, 0.1];
        assert!((spearman(&a, &c).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn spearman_hand_value() {
        // d = (0, -1, 1, 0, 0): rho = 1 - 6*2 / (5*24) = 0.9
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [1.0, 3.0, 2.0, 4.0, 5.0];
        assert!((spearman(&a, &b).unwrap() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn mann_whitney_separated_samples() {
        let x: Vec<f64> = (10..30).map(|i| i as f64).collect();
        let y: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let r = mann_whitney_greater(&x, &y).unwrap();
        assert!(r.p_greater < 0.01);
        let r = mann_whitney_greater(&y, &x).unwrap();
        assert!(r.p_greater > 0.99);
    }

    #[test]
    fn mann_whitney_u_hand_value() {
        // x = {3, 5}, y = {1, 4}: pairs x > y are (3,1), (5,1), (5,4) -> U = 3
        let r = mann_whitney_greater(&[3.0, 5.0], &[1.0, 4.0]).unwrap();
        assert_eq!(r.u, 3.0);
    }

    #[test]
    fn min_max_bounds() {
        let v = min_max(&[3.0, -1.0, 7.0]);
        assert_eq!(v, vec![0.5, 0.0, 1.0]);
        assert_eq!(min_max(&[2.0, 2.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
