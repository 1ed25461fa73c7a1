//! pass@k over execution verdicts and single-line infilling exact match.

mod exact;
mod passk;

pub use exact::{fim_exact_match, make_fim_tasks, FimEvalReport, FimRow, FimTask, FimTaskSet};
pub use passk::{
    load_suite, run_passk, verify, CompletionRecord, PassKReport, Problem, ProblemResult, Verdict, DEFAULT_TIMEOUT_SECS,
};

use std::ops::{Mul, Sub};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::One;

use crate::error::{ForgeError, Result};

/// Number types the estimator can be evaluated in.
pub trait Probability: Clone + One + Sub<Output = Self> + Mul<Output = Self> {
    fn ratio(num: u64, den: u64) -> Self;
}

impl Probability for f64 {
    fn ratio(num: u64, den: u64) -> Self {
        num as f64 / den as f64
    }
}

impl Probability for BigRational {
    fn ratio(num: u64, den: u64) -> Self {
        BigRational::new(BigInt::from(num), BigInt::from(den))
    }
}

/// Unbiased pass@k from `c` correct among `n` samples, in the product form
/// `1 − Π_{i=n−c+1..n} (1 − k/i)`.
pub fn pass_at_k<P: Probability>(n: u64, c: u64, k: u64) -> Result<P> {
    if c > n {
        return Err(ForgeError::Invalid(format!("correct count {c} exceeds samples {n}")));
    }
    if k == 0 || k > n {
        return Err(ForgeError::Invalid(format!("k must lie in 1..={n}, got {k}")));
    }
    if n - c < k {
        return Ok(P::one());
    }
    let mut prod = P::one();
    for i in n - c + 1..=n {
        prod = prod * (P::one() - P::ratio(k, i));
    }
    Ok(P::one() - prod)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fraction of k-subsets of n samples (first c correct) holding a correct one.
    fn brute(n: u64, c: u64, k: u64) -> BigRational {
        let (mut hit, mut all) = (0u64, 0u64);
        for mask in 0u32..1 << n {
            if mask.count_ones() as u64 != k {
                continue;
            }
            all += 1;
            if mask & ((1 << c) - 1) != 0 {
                hit += 1;
            }
        }
        BigRational::ratio(hit, all)
    }

    #[test]
    fn examples() {
        assert_eq!(pass_at_k::<f64>(1, 1, 1).unwrap(), 1.0);
        assert_eq!(pass_at_k::<f64>(10, 0, 5).unwrap(), 0.0);
        assert_eq!(pass_at_k::<BigRational>(5, 2, 2).unwrap(), BigRational::ratio(7, 10));
        assert!((pass_at_k::<f64>(5, 2, 2).unwrap() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert!(pass_at_k::<f64>(3, 4, 1).is_err());
        assert!(pass_at_k::<f64>(3, 1, 4).is_err());
        assert!(pass_at_k::<f64>(3, 1, 0).is_err());
    }

    #[test]
    fn matches_enumeration() {
        for n in 1..=8 {
            for c in 0..=n {
                for k in 1..=n {
                    assert_eq!(pass_at_k::<BigRational>(n, c, k).unwrap(), brute(n, c, k), "n={n} c={c} k={k}");
                }
            }
        }
    }

    #[test]
    fn monotone() {
        for n in 1..=20u64 {
            for k in 1..=n {
                let mut prev = -1.0;
                for c in 0..=n {
                    let v = pass_at_k::<f64>(n, c, k).unwrap();
                    assert!(v >= prev);
                    prev = v;
                }
            }
            for c in 0..=n {
                let mut prev = -1.0;
                for k in 1..=n {
                    let v = pass_at_k::<f64>(n, c, k).unwrap();
                    assert!(v >= prev - 1e-15);
                    prev = v;
                }
            }
        }
    }
}
