//! Savitzky-Golay smoothing.
//!
//! Weights come from Gram polynomials, which are orthogonal on the discrete
//! window `-m..=m` and avoid forming the ill-conditioned Vandermonde normal
//! equations. The same weights evaluate the fitted polynomial off-center,
//! which is how the first and last `m` points are produced.

use super::{DataError, Result};

pub const DEFAULT_WINDOW: usize = 21;
pub const DEFAULT_ORDER: usize = 2;

/// Gram polynomial of degree `k` on `-m..=m`, evaluated at `i`.
fn gram(i: f64, m: f64, k: usize) -> f64 {
    let (mut prev, mut cur) = (0.0, 1.0);
    for j in 1..=k {
        let jf = j as f64;
        let a = 2.0 * (2.0 * jf - 1.0) / (jf * (2.0 * m - jf + 1.0));
        let b = (jf - 1.0) * (2.0 * m + jf) / (jf * (2.0 * m - jf + 1.0));
        let next = a * i * cur - b * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// `a · (a-1) ⋯ (a-b+1)`.
fn falling(a: f64, b: usize) -> f64 {
    (0..b).map(|j| a - j as f64).product()
}

/// Weight of sample offset `i` when evaluating the order-`order` fit of a
/// half-width-`m` window at offset `t`.
fn weight(i: isize, t: isize, m: usize, order: usize) -> f64 {
    let mf = m as f64;
    (0..=order)
        .map(|k| {
            (2 * k + 1) as f64 * falling(2.0 * mf, k) / falling(2.0 * mf + k as f64 + 1.0, k + 1)
                * gram(i as f64, mf, k)
                * gram(t as f64, mf, k)
        })
        .sum()
}

/// Weights over offsets `-m..=m` for evaluating the fit at offset `t`.
pub fn weights(window_len: usize, order: usize, t: isize) -> Result<Vec<f64>> {
    check(window_len, order)?;
    let m = window_len / 2;
    Ok((-(m as isize)..=m as isize).map(|i| weight(i, t, m, order)).collect())
}

fn check(window_len: usize, order: usize) -> Result<()> {
    if window_len.is_multiple_of(2) {
        return Err(DataError::Savgol(format!("window length {window_len} must be odd")));
    }
    if window_len <= order {
        return Err(DataError::Savgol(format!(
            "window length {window_len} must exceed polynomial order {order}"
        )));
    }
    Ok(())
}

/// Smooths `series`, keeping its length.
pub fn savgol_smooth(series: &[f64], window_len: usize, order: usize) -> Result<Vec<f64>> {
    check(window_len, order)?;
    if series.len() < window_len {
        return Err(DataError::Savgol(format!(
            "window length {window_len} exceeds series length {}",
            series.len()
        )));
    }
    let m = window_len / 2;
    let n = series.len();
    let center = weights(window_len, order, 0)?;
    let mut out = vec![0.0; n];
    for (c, o) in out.iter_mut().enumerate().take(n - m).skip(m) {
        *o = center.iter().zip(&series[c - m..=c + m]).map(|(w, x)| w * x).sum();
    }
    let head = &series[..window_len];
    let tail = &series[n - window_len..];
    for e in 0..m {
        let t = e as isize - m as isize;
        let w = weights(window_len, order, t)?;
        out[e] = w.iter().zip(head).map(|(w, x)| w * x).sum();
        let w = weights(window_len, order, -t)?;
        out[n - 1 - e] = w.iter().zip(tail).map(|(w, x)| w * x).sum();
    }
    Ok(out)
}
