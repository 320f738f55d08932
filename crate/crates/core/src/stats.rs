//! Small numeric helpers shared by the analysis code.

/// Pairwise (cascade) summation; the result depends only on the order of
/// `values`, not on how the caller produced them.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if values.len() <= BLOCK {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(values) / values.len() as f64
}

/// Unbiased sample variance.
pub fn variance(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(values);
    let dev: Vec<f64> = values.iter().map(|x| (x - m) * (x - m)).collect();
    pairwise_sum(&dev) / (n - 1) as f64
}

/// Ordinary (optionally weighted) least-squares line `y = intercept + slope x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_err: f64,
    pub r_squared: f64,
    pub residual: f64,
}

pub fn fit_line(x: &[f64], y: &[f64]) -> Option<LineFit> {
    fit_line_weighted(x, y, None)
}

pub fn fit_line_weighted(x: &[f64], y: &[f64], w: Option<&[f64]>) -> Option<LineFit> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let ones = vec![1.0; n];
    let w = w.unwrap_or(&ones);
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for i in 0..n {
        let dx = x[i] - mx;
        let dy = y[i] - my;
        sxx += w[i] * dx * dx;
        sxy += w[i] * dx * dy;
        syy += w[i] * dy * dy;
    }
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let mut ssr = 0.0;
    for i in 0..n {
        let r = y[i] - intercept - slope * x[i];
        ssr += w[i] * r * r;
    }
    let r_squared = if syy > 0.0 { 1.0 - ssr / syy } else { 1.0 };
    let slope_err = if n > 2 {
        (ssr / (n - 2) as f64 / sxx * n as f64 / sw).sqrt()
    } else {
        0.0
    };
    Some(LineFit {
        slope,
        intercept,
        slope_err,
        r_squared,
        residual: (ssr / sw).sqrt(),
    })
}
