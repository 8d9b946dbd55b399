//! Shared helpers for the integration suites: independent numerical
//! oracles (matrix exponential, dense linear solve) and random-system
//! generators. Everything here is deliberately written without reference
//! to the library's own linear algebra so it can catch its mistakes.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s4cast::linalg::Mat;
use s4cast::ssm::ContinuousSsm;

/// Plain row-major dense matrix product.
pub fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let k = b.len();
    let m = b[0].len();
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for p in 0..k {
            let aip = a[i][p];
            for j in 0..m {
                out[i][j] += aip * b[p][j];
            }
        }
    }
    out
}

pub fn identity(n: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; n]; n];
    for (i, row) in out.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    out
}

/// Infinity norm (max absolute row sum).
pub fn inf_norm(a: &[Vec<f64>]) -> f64 {
    a.iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Matrix exponential by scaling-and-squaring with a Taylor series.
///
/// The argument is scaled down until its norm is below 1/4, the series is
/// summed to machine precision, and the result is squared back up. Good to
/// near machine accuracy for the well-conditioned matrices used in tests.
pub fn expm(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let norm = inf_norm(a);
    let squarings = if norm > 0.25 {
        (norm / 0.25).log2().ceil() as u32
    } else {
        0
    };
    let scale = 0.5_f64.powi(squarings as i32);
    let scaled: Vec<Vec<f64>> = a
        .iter()
        .map(|row| row.iter().map(|v| v * scale).collect())
        .collect();

    // exp(S) = sum S^k / k!
    let mut result = identity(n);
    let mut term = identity(n);
    for k in 1..=40 {
        term = matmul(&term, &scaled);
        let kf = 1.0 / (1..=k).map(|x| x as f64).product::<f64>();
        let mut done = true;
        for i in 0..n {
            for j in 0..n {
                let add = term[i][j] * kf;
                result[i][j] += add;
                if add.abs() > 1e-18 * result[i][j].abs().max(1.0) {
                    done = false;
                }
            }
        }
        if done {
            break;
        }
    }
    for _ in 0..squarings {
        result = matmul(&result, &result);
    }
    result
}

/// Solve A X = B by Gaussian elimination with partial pivoting.
pub fn solve(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let m = b[0].len();
    let mut aug: Vec<Vec<f64>> = a
        .iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().chain(rb.iter()).copied().collect())
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| {
                aug[i][col]
                    .abs()
                    .partial_cmp(&aug[j][col].abs())
                    .expect("finite")
            })
            .expect("non-empty");
        aug.swap(col, pivot);
        let p = aug[col][col];
        assert!(p.abs() > 1e-300, "singular system in oracle solve");
        for row in 0..n {
            if row == col {
                continue;
            }
            let f = aug[row][col] / p;
            for j in col..n + m {
                aug[row][j] -= f * aug[col][j];
            }
        }
    }
    (0..n)
        .map(|i| (0..m).map(|j| aug[i][n + j] / aug[i][i]).collect())
        .collect()
}

/// Convert the library matrix type to plain rows.
pub fn mat_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.rows())
        .map(|i| (0..m.cols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn rows_mat(rows: &[Vec<f64>]) -> Mat {
    let r = rows.len();
    let c = rows[0].len();
    Mat::from_fn(r, c, |i, j| rows[i][j])
}

/// Random continuous system with all eigenvalues strictly in the left
/// half-plane (Gershgorin: diagonal dominates each absolute row sum).
pub fn random_stable_system(rng: &mut ChaCha8Rng, n: usize) -> ContinuousSsm {
    let mut a = Mat::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    for i in 0..n {
        let row_sum: f64 = (0..n).filter(|&j| j != i).map(|j| a[(i, j)].abs()).sum();
        a[(i, i)] = -(row_sum + rng.gen_range(0.1..1.0));
    }
    let b = Mat::from_fn(n, 1, |_, _| rng.gen_range(-1.0..1.0));
    let c = Mat::from_fn(1, n, |_, _| rng.gen_range(-1.0..1.0));
    ContinuousSsm::new(a, b, c)
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Pearson correlation of paired samples.
pub fn correlation(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx.sqrt() * syy.sqrt()).max(1e-300)
}
