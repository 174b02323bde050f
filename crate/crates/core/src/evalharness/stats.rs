//! Rank-based two-sample and paired tests.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Largest smaller-sample size for which the Mann-Whitney p-value is exact.
pub const MWU_EXACT_MAX: usize = 8;
/// Largest number of nonzero differences for which the signed-rank p-value is exact.
pub const WILCOXON_EXACT_MAX: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PMethod {
    Exact,
    Normal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MwuResult {
    /// U statistic of the first sample.
    pub u: f64,
    pub p_two_sided: f64,
    pub method: PMethod,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of ranks of the positive differences `a - b`.
    pub w_plus: f64,
    pub p_two_sided: f64,
    pub method: PMethod,
    /// Nonzero differences used.
    pub n: usize,
    /// Zero differences dropped.
    pub zeros: usize,
}

/// Average ranks (1-based) and the tie-group sizes.
pub fn average_ranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && values[idx[j]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = avg;
        }
        if j - i > 1 {
            ties.push(j - i);
        }
        i = j;
    }
    (ranks, ties)
}

fn normal_two_sided(z: f64) -> f64 {
    erfc(z / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

/// Number of orderings of `n1 + n2` distinct values giving each U in `0..=n1*n2`.
pub fn mwu_counts(n1: usize, n2: usize) -> Vec<f64> {
    // f[j][u] for the current i, built up over i
    let max_u = n1 * n2;
    let mut f: Vec<Vec<f64>> = (0..=n2)
        .map(|_| {
            let mut v = vec![0.0; max_u + 1];
            v[0] = 1.0;
            v
        })
        .collect();
    for i in 1..=n1 {
        let mut g: Vec<Vec<f64>> = vec![vec![0.0; max_u + 1]; n2 + 1];
        g[0][0] = 1.0;
        for j in 1..=n2 {
            for u in 0..=i * j {
                // largest value from the second sample, or from the first (adds j)
                let from_b = g[j - 1][u];
                let from_a = if u >= j { f[j][u - j] } else { 0.0 };
                g[j][u] = from_b + from_a;
            }
        }
        f = g;
    }
    f.swap_remove(n2)
}

/// Exact two-sided p-value of U for tie-free samples.
pub fn mwu_exact_p(u: f64, n1: usize, n2: usize) -> f64 {
    let counts = mwu_counts(n1, n2);
    let total: f64 = counts.iter().sum();
    let u = u.round() as usize;
    let lower: f64 = counts[..=u.min(counts.len() - 1)].iter().sum();
    let upper: f64 = counts[u.min(counts.len())..].iter().sum();
    (2.0 * lower.min(upper) / total).min(1.0)
}

/// Normal approximation with tie and continuity correction.
pub fn mwu_normal_p(u: f64, n1: usize, n2: usize, ties: &[usize]) -> f64 {
    let (a, b) = (n1 as f64, n2 as f64);
    let n = a + b;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (n * (n - 1.0));
    let var = a * b / 12.0 * ((n + 1.0) - tie_term);
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((u - a * b / 2.0).abs() - 0.5).max(0.0) / var.sqrt();
    normal_two_sided(z)
}

pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MwuResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySample);
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = average_ranks(&pooled);
    let (n1, n2) = (a.len(), b.len());
    let r1: f64 = ranks[..n1].iter().sum();
    let u = r1 - (n1 * (n1 + 1)) as f64 / 2.0;
    if n1.min(n2) <= MWU_EXACT_MAX && ties.is_empty() {
        Ok(MwuResult {
            u,
            p_two_sided: mwu_exact_p(u, n1, n2),
            method: PMethod::Exact,
        })
    } else {
        Ok(MwuResult {
            u,
            p_two_sided: mwu_normal_p(u, n1, n2, &ties),
            method: PMethod::Normal,
        })
    }
}

/// Exact two-sided p for the signed-rank statistic given the ranks of
/// the nonzero differences, by enumerating all sign patterns.
pub fn wilcoxon_exact_p(w_plus: f64, ranks: &[f64]) -> f64 {
    let n = ranks.len();
    // doubled ranks are integers even with averaged ties
    let doubled: Vec<i64> = ranks.iter().map(|r| (2.0 * r).round() as i64).collect();
    let w2 = (2.0 * w_plus).round() as i64;
    let (mut le, mut ge) = (0u64, 0u64);
    for mask in 0u64..1 << n {
        let s: i64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| doubled[i]).sum();
        if s <= w2 {
            le += 1;
        }
        if s >= w2 {
            ge += 1;
        }
    }
    (2.0 * le.min(ge) as f64 / (1u64 << n) as f64).min(1.0)
}

pub fn wilcoxon_normal_p(w_plus: f64, n: usize, ties: &[usize]) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0
        - ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
    normal_two_sided(z)
}

pub fn wilcoxon_signed(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let zeros = a.len() - diffs.len();
    if diffs.is_empty() {
        return Err(Error::AllZeroDifferences);
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let (ranks, ties) = average_ranks(&abs);
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let n = diffs.len();
    let (p, method) = if n <= WILCOXON_EXACT_MAX {
        (wilcoxon_exact_p(w_plus, &ranks), PMethod::Exact)
    } else {
        (wilcoxon_normal_p(w_plus, n, &ties), PMethod::Normal)
    };
    Ok(WilcoxonResult {
        w_plus,
        p_two_sided: p,
        method,
        n,
        zeros,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Two-sided p by listing every split of ranks 1..=n1+n2 into the two samples.
    fn mwu_enumerated(u_obs: f64, n1: usize, n2: usize) -> f64 {
        let n = n1 + n2;
        let (mut le, mut ge, mut total) = (0u64, 0u64, 0u64);
        for mask in 0u32..1 << n {
            if mask.count_ones() as usize != n1 {
                continue;
            }
            let r1: usize = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| i + 1).sum();
            let u = (r1 - n1 * (n1 + 1) / 2) as f64;
            total += 1;
            le += (u <= u_obs) as u64;
            ge += (u >= u_obs) as u64;
        }
        (2.0 * le.min(ge) as f64 / total as f64).min(1.0)
    }

    #[test]
    fn mwu_by_hand() {
        let r = mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(r.u, 0.0);
        assert_eq!(r.method, PMethod::Exact);
        assert!((r.p_two_sided - 1.0 / 3.0).abs() < 1e-15);
        assert!(matches!(mann_whitney_u(&[], &[1.0]), Err(Error::EmptySample)));
    }

    #[test]
    fn mwu_identical_samples() {
        let a: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin()).collect();
        assert!(mann_whitney_u(&a, &a).unwrap().p_two_sided >= 0.99);
        let small = [0.1, 0.5, 0.7];
        assert!(mann_whitney_u(&small, &small).unwrap().p_two_sided >= 0.99);
    }

    #[test]
    fn mwu_large_shift() {
        let a: Vec<f64> = (0..50).map(|i| i as f64 * 0.01).collect();
        let b: Vec<f64> = a.iter().map(|v| v + 100.0).collect();
        let r = mann_whitney_u(&a, &b).unwrap();
        assert_eq!(r.u, 0.0);
        // closed form: z = (1250 - 0.5) / sqrt(50*50*101/12)
        let z: f64 = 1249.5 / (2500.0f64 * 101.0 / 12.0).sqrt();
        let want = erfc(z / std::f64::consts::SQRT_2);
        assert!((r.p_two_sided - want).abs() <= 1e-12 * want);
        assert!(r.p_two_sided < 1e-10);
    }

    #[test]
    fn mwu_counts_sum_to_binomial() {
        let c = mwu_counts(3, 4);
        assert_eq!(c.iter().sum::<f64>(), 35.0);
        assert_eq!(c.len(), 13);
        assert_eq!(c, c.iter().rev().copied().collect::<Vec<_>>());
    }

    #[test]
    fn mwu_exact_matches_enumeration() {
        for n1 in 1..=6 {
            for n2 in 1..=6 {
                for u in 0..=n1 * n2 {
                    let (e, o) = (mwu_exact_p(u as f64, n1, n2), mwu_enumerated(u as f64, n1, n2));
                    assert!((e - o).abs() < 1e-12, "n1={n1} n2={n2} u={u}: {e} vs {o}");
                }
            }
        }
    }

    #[test]
    fn wilcoxon_by_hand() {
        let r = wilcoxon_signed(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(r.w_plus, 6.0);
        assert!((r.p_two_sided - 0.25).abs() < 1e-15);
        assert!(matches!(wilcoxon_signed(&[1.0, 2.0], &[1.0, 2.0]), Err(Error::AllZeroDifferences)));
        assert!(matches!(wilcoxon_signed(&[1.0], &[1.0, 2.0]), Err(Error::LengthMismatch(1, 2))));
        let r = wilcoxon_signed(&[1.0, 5.0, 2.0], &[1.0, 4.0, 4.0]).unwrap();
        assert_eq!((r.n, r.zeros), (2, 1));
    }

    #[test]
    fn wilcoxon_normal_mode_closed_form() {
        // 20 positive differences 1..=20, no ties
        let a: Vec<f64> = (1..=20).map(f64::from).collect();
        let r = wilcoxon_signed(&a, &vec![0.0; 20]).unwrap();
        assert_eq!(r.method, PMethod::Normal);
        assert_eq!(r.w_plus, 210.0);
        let z: f64 = (105.0 - 0.5) / (20.0f64 * 21.0 * 41.0 / 24.0).sqrt();
        assert!((r.p_two_sided - erfc(z / std::f64::consts::SQRT_2)).abs() < 1e-15);
    }

    #[test]
    fn average_ranks_with_ties() {
        let (r, t) = average_ranks(&[3.0, 1.0, 3.0, 2.0]);
        assert_eq!(r, vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(t, vec![2]);
    }

    proptest! {
        #[test]
        fn u_statistics_sum(n1 in 1usize..20, n2 in 1usize..20, seed in any::<u64>()) {
            let mut vals: Vec<f64> = (0..n1 + n2).map(|i| i as f64).collect();
            vals.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let (a, b) = vals.split_at(n1);
            let ua = mann_whitney_u(a, b).unwrap();
            let ub = mann_whitney_u(b, a).unwrap();
            prop_assert_eq!(ua.u + ub.u, (n1 * n2) as f64);
            prop_assert!((ua.p_two_sided - ub.p_two_sided).abs() < 1e-12);
        }

        #[test]
        fn exact_and_normal_agree_at_moderate_sizes(n1 in 15usize..=25, n2 in 15usize..=25, seed in any::<u64>()) {
            let mut vals: Vec<f64> = (0..n1 + n2).map(|i| i as f64).collect();
            vals.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let (a, b) = vals.split_at(n1);
            let r = mann_whitney_u(a, b).unwrap();
            prop_assert_eq!(r.method, PMethod::Normal);
            let exact = mwu_exact_p(r.u, n1, n2);
            prop_assert!((exact - r.p_two_sided).abs() < 0.02, "exact {} normal {}", exact, r.p_two_sided);
        }

        #[test]
        fn wilcoxon_antisymmetric(d in prop::collection::vec(-20i32..20, 1..30)) {
            let a: Vec<f64> = d.iter().map(|&v| v as f64).collect();
            let b = vec![0.0; a.len()];
            match (wilcoxon_signed(&a, &b), wilcoxon_signed(&b, &a)) {
                (Ok(x), Ok(y)) => {
                    prop_assert!((x.p_two_sided - y.p_two_sided).abs() < 1e-12);
                    prop_assert!((0.0..=1.0).contains(&x.p_two_sided));
                    prop_assert_eq!(x.w_plus + y.w_plus, (x.n * (x.n + 1)) as f64 / 2.0);
                }
                (Err(Error::AllZeroDifferences), Err(Error::AllZeroDifferences)) => {}
                other => prop_assert!(false, "{:?}", other),
            }
        }
    }
}
