//! Allocation-free helpers for the small dense blocks used in the hot loops.

use nalgebra::{DMatrix, DMatrixView};

/// out += scale · a x
#[inline]
pub fn matvec_add(a: &DMatrixView<'_, f64>, x: &[f64], scale: f64, out: &mut [f64]) {
    let (r, c) = a.shape();
    debug_assert_eq!(x.len(), c);
    debug_assert_eq!(out.len(), r);
    for (col, &xc) in x.iter().enumerate() {
        if xc == 0.0 {
            continue;
        }
        let f = scale * xc;
        for (row, o) in out.iter_mut().enumerate() {
            *o += a[(row, col)] * f;
        }
    }
}

/// out += scale · aᵀ x
#[inline]
pub fn matvec_t_add(a: &DMatrixView<'_, f64>, x: &[f64], scale: f64, out: &mut [f64]) {
    let (r, c) = a.shape();
    debug_assert_eq!(x.len(), r);
    debug_assert_eq!(out.len(), c);
    for (col, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (row, &xr) in x.iter().enumerate() {
            acc += a[(row, col)] * xr;
        }
        *o += scale * acc;
    }
}

/// xᵀ h x
#[inline]
pub fn quad(h: &DMatrixView<'_, f64>, x: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (c, &xc) in x.iter().enumerate() {
        if xc == 0.0 {
            continue;
        }
        for (r, &xr) in x.iter().enumerate() {
            acc += xr * h[(r, c)] * xc;
        }
    }
    acc
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn max_abs(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
}

pub fn norm2(xs: &[f64]) -> f64 {
    xs.iter().map(|v| v * v).sum()
}

/// Asymmetry ‖M − Mᵀ‖_max.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).amax()
}

/// Least-squares slope of log(y) against log(x); `None` if any value is non-positive.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() < 2 || x.len() != y.len() || x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return None;
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    Some(sxy / sxx)
}
