//! Exact one-sided tests for comparing pair accuracies.

use statrs::distribution::{Binomial, DiscreteCDF, Hypergeometric};

/// `P(X >= k)` for `X ~ Binomial(n, p)`.
pub fn binomial_upper(k: u64, n: u64, p: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    Binomial::new(p.clamp(0.0, 1.0), n).map(|b| b.sf(k - 1)).unwrap_or(f64::NAN)
}

/// Exact sign test on paired outcomes: the chance of at least `wins` among
/// `wins + losses` discordant pairs when each direction is equally likely.
pub fn sign_test(wins: u64, losses: u64) -> f64 {
    binomial_upper(wins, wins + losses, 0.5)
}

/// Fisher's exact test that proportion `a_k / a_n` exceeds `b_k / b_n`.
pub fn fisher_greater(a_k: u64, a_n: u64, b_k: u64, b_n: u64) -> f64 {
    if a_k == 0 {
        return 1.0;
    }
    Hypergeometric::new(a_n + b_n, a_k + b_k, a_n)
        .map(|h| h.sf(a_k - 1))
        .unwrap_or(f64::NAN)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_test_small_cases() {
        assert!((sign_test(3, 0) - 0.125).abs() < 1e-12);
        assert!((sign_test(0, 0) - 1.0).abs() < 1e-12);
        // P(X >= 2 | n = 3) = 4/8
        assert!((sign_test(2, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fisher_matches_hand_enumeration() {
        // 3/3 vs 0/3: only the observed table is as extreme; 1 / C(6, 3)
        assert!((fisher_greater(3, 3, 0, 3) - 0.05).abs() < 1e-12);
        assert!((fisher_greater(0, 3, 3, 3) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn binomial_tail_edges() {
        assert_eq!(binomial_upper(0, 10, 0.3), 1.0);
        assert_eq!(binomial_upper(11, 10, 0.3), 0.0);
        assert!((binomial_upper(10, 10, 0.5) - 0.5f64.powi(10)).abs() < 1e-15);
    }
}
