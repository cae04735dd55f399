#![allow(dead_code)]

use covsel::nn::Matrix;

/// Least squares with intercept by Householder QR of `[1 | X]`.
/// Returns `(intercept, coefficients)`.
pub fn qr_least_squares(x: &Matrix, y: &[f64]) -> (f64, Vec<f64>) {
    let (n, p) = x.shape();
    let k = p + 1;
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row = vec![1.0];
            row.extend_from_slice(x.row(i));
            row
        })
        .collect();
    let mut b = y.to_vec();
    for col in 0..k {
        let norm = (col..n).map(|i| a[i][col] * a[i][col]).sum::<f64>().sqrt();
        let alpha = if a[col][col] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (col..n).map(|i| a[i][col]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|e| e * e).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for c in col..k {
            let d: f64 = (col..n).map(|i| v[i - col] * a[i][c]).sum::<f64>() * 2.0 / vnorm2;
            for i in col..n {
                a[i][c] -= d * v[i - col];
            }
        }
        let d: f64 = (col..n).map(|i| v[i - col] * b[i]).sum::<f64>() * 2.0 / vnorm2;
        for i in col..n {
            b[i] -= d * v[i - col];
        }
    }
    let mut sol = vec![0.0; k];
    for r in (0..k).rev() {
        let s: f64 = (r + 1..k).map(|c| a[r][c] * sol[c]).sum();
        sol[r] = (b[r] - s) / a[r][r];
    }
    (sol[0], sol[1..].to_vec())
}

/// `(1/(2n))·RSS + λ‖β‖₁` with the intercept profiled out (ȳ − x̄ᵀβ).
pub fn profiled_objective(x: &Matrix, y: &[f64], beta: &[f64], lambda: f64) -> f64 {
    let n = x.rows();
    let preds: Vec<f64> = (0..n)
        .map(|i| x.row(i).iter().zip(beta).map(|(a, b)| a * b).sum())
        .collect();
    let intercept = (0..n).map(|i| y[i] - preds[i]).sum::<f64>() / n as f64;
    let rss: f64 = (0..n).map(|i| (y[i] - intercept - preds[i]).powi(2)).sum();
    rss / (2.0 * n as f64) + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
}

/// Minimum of the profiled objective over a square coefficient grid with
/// spacing `step` covering `[-radius, radius]^p`, for `p ≤ 2`.
pub fn grid_minimum(x: &Matrix, y: &[f64], lambda: f64, radius: f64, step: f64) -> f64 {
    let p = x.cols();
    assert!((1..=2).contains(&p));
    let m = (radius / step).round() as i64;
    let axis: Vec<f64> = (-m..=m).map(|k| k as f64 * step).collect();
    let mut best = f64::INFINITY;
    if p == 1 {
        for &b in &axis {
            best = best.min(profiled_objective(x, y, &[b], lambda));
        }
    } else {
        // Separable sums keep the 2-D sweep cheap: precompute moments.
        let n = x.rows() as f64;
        let mean = |f: &dyn Fn(usize) -> f64| (0..x.rows()).map(f).sum::<f64>() / n;
        let (m1, m2, my) = (mean(&|i| x.get(i, 0)), mean(&|i| x.get(i, 1)), mean(&|i| y[i]));
        let c11 = mean(&|i| (x.get(i, 0) - m1).powi(2));
        let c22 = mean(&|i| (x.get(i, 1) - m2).powi(2));
        let c12 = mean(&|i| (x.get(i, 0) - m1) * (x.get(i, 1) - m2));
        let c1y = mean(&|i| (x.get(i, 0) - m1) * (y[i] - my));
        let c2y = mean(&|i| (x.get(i, 1) - m2) * (y[i] - my));
        let cyy = mean(&|i| (y[i] - my).powi(2));
        for &b1 in &axis {
            for &b2 in &axis {
                let rss = cyy - 2.0 * (b1 * c1y + b2 * c2y) + b1 * b1 * c11 + 2.0 * b1 * b2 * c12 + b2 * b2 * c22;
                best = best.min(rss / 2.0 + lambda * (b1.abs() + b2.abs()));
            }
        }
    }
    best
}

pub fn random_design(seed: u64, n: usize, p: usize) -> (Matrix, Vec<f64>) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let x = Matrix::from_vec(n, p, (0..n * p).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let beta: Vec<f64> = (0..p).map(|_| rng.random_range(-1.5..1.5)).collect();
    let y = (0..n)
        .map(|i| {
            let signal: f64 = x.row(i).iter().zip(&beta).map(|(a, b)| a * b).sum();
            0.3 + signal + 0.2 * rng.random_range(-1.0..1.0)
        })
        .collect();
    (x, y)
}
