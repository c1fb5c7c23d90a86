//! Unimodal and log-concave sequences, and the log-concavity penalty used to
//! regularize temporal attention.
//!
//! A non-negative sequence with no internal zeros whose interior entries satisfy
//! `a[i]^2 >= a[i-1] * a[i+1]` is unimodal. The zero condition matters: `[1, 0, 0, 1]`
//! meets every inequality yet has two peaks. [`satisfies_log_concave_inequality`]
//! exposes the bare inequality; [`is_log_concave`] is the full definition.

use crate::error::{Error, Result};

/// True iff some peak index `m` has the sequence non-decreasing up to `m` and
/// non-increasing after it, each comparison relaxed by `tol`.
pub fn is_unimodal(a: &[f64], tol: f64) -> bool {
    let n = a.len();
    if n <= 2 {
        return true;
    }
    // rising[m]: a[0..=m] non-decreasing; falling[m]: a[m..] non-increasing
    let mut rising = vec![true; n];
    for i in 1..n {
        rising[i] = rising[i - 1] && a[i - 1] <= a[i] + tol;
    }
    let mut falling = vec![true; n];
    for i in (0..n - 1).rev() {
        falling[i] = falling[i + 1] && a[i] >= a[i + 1] - tol;
    }
    (0..n).any(|m| rising[m] && falling[m])
}

fn check_non_negative(a: &[f64]) -> Result<()> {
    match a.iter().position(|&x| !(x >= 0.0)) {
        Some(i) => Err(Error::Usage(format!(
            "log-concavity needs non-negative entries; entry {} is {}",
            i + 1,
            a[i]
        ))),
        None => Ok(()),
    }
}

/// `a[i]^2 >= a[i-1] * a[i+1]` at every interior index.
pub fn satisfies_log_concave_inequality(a: &[f64]) -> Result<bool> {
    check_non_negative(a)?;
    Ok(a.windows(3).all(|w| w[1] * w[1] >= w[0] * w[2]))
}

/// A zero with positive entries on both sides of it.
pub fn has_internal_zero(a: &[f64]) -> bool {
    let first = a.iter().position(|&x| x > 0.0);
    let last = a.iter().rposition(|&x| x > 0.0);
    match (first, last) {
        (Some(f), Some(l)) => a[f..=l].iter().any(|&x| x == 0.0),
        _ => false,
    }
}

/// Log-concave: non-negative, no internal zeros, and the interior inequality holds.
pub fn is_log_concave(a: &[f64]) -> Result<bool> {
    Ok(satisfies_log_concave_inequality(a)? && !has_internal_zero(a))
}

/// `sum over interior i of max{0, a[i-1] a[i+1] - a[i]^2}`; zero for fewer than three entries.
pub fn logconcave_penalty(a: &[f64]) -> f64 {
    a.windows(3).map(|w| (w[0] * w[2] - w[1] * w[1]).max(0.0)).sum()
}
