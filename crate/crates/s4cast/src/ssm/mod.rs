//! Single-channel linear state-space models: construction, bilinear
//! discretization, and execution in recurrent and convolutional modes.

pub mod nplr;

use crate::linalg::{self, LinalgError, Mat};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SsmError {
    #[error("state size must be at least 1")]
    EmptyState,
    #[error("step size must be positive (got {0})")]
    NonPositiveStep(f64),
    #[error("sequence length mismatch: kernel {kernel} vs input {input}")]
    LengthMismatch { kernel: usize, input: usize },
    #[error("input dimension mismatch: {context} (got {got}, expected {expected})")]
    DimensionMismatch {
        context: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("matrix is not normal after low-rank correction (max symmetric deviation {0:.3e})")]
    NotNormal(f64),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Continuous-time system x'(t) = A x(t) + B u(t), y(t) = C x(t) + D u(t).
///
/// D is held at zero; the field exists so the feedthrough assumption is explicit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousSsm {
    pub a: Mat,
    /// N x 1 input matrix.
    pub b: Mat,
    /// 1 x N output matrix.
    pub c: Mat,
    pub d: f64,
}

impl ContinuousSsm {
    pub fn new(a: Mat, b: Mat, c: Mat) -> Self {
        assert_eq!(a.rows(), a.cols(), "A must be square");
        assert_eq!(b.rows(), a.rows(), "B row count must match state size");
        assert_eq!(b.cols(), 1, "B must be a column");
        assert_eq!(c.rows(), 1, "C must be a row");
        assert_eq!(c.cols(), a.cols(), "C column count must match state size");
        Self { a, b, c, d: 0.0 }
    }

    pub fn state_size(&self) -> usize {
        self.a.rows()
    }
}

/// Discretized system produced by the bilinear map at step `delta`.
///
/// Acts as a cache of the (continuous parameters, delta) pair: rebuild it with
/// [`discretize_bilinear`] whenever either changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteSsm {
    pub a_bar: Mat,
    pub b_bar: Mat,
    pub c: Mat,
    pub delta: f64,
}

impl DiscreteSsm {
    pub fn state_size(&self) -> usize {
        self.a_bar.rows()
    }

    /// Power-iteration estimate of the spectral radius of the discrete state
    /// matrix. A stable discretization keeps this below 1.
    pub fn spectral_radius_estimate(&self) -> f64 {
        let n = self.state_size();
        let mut x = vec![1.0 / (n as f64).sqrt(); n];
        let mut radius = 0.0;
        for _ in 0..200 {
            let y = self.a_bar.matvec(&x);
            let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            radius = norm;
            for (xi, yi) in x.iter_mut().zip(y.iter()) {
                *xi = yi / norm;
            }
        }
        radius
    }
}

/// HiPPO-LegS continuous system of state size `n`.
///
/// A[n][k] = -sqrt(2n+1) sqrt(2k+1) for n > k, -(n+1) on the diagonal, 0 above;
/// B[n] = sqrt(2n+1). C starts at zero and is set by the caller.
pub fn hippo_legs(n: usize) -> Result<ContinuousSsm, SsmError> {
    if n == 0 {
        return Err(SsmError::EmptyState);
    }
    let a = Mat::from_fn(n, n, |row, col| {
        use std::cmp::Ordering;
        match row.cmp(&col) {
            Ordering::Greater => {
                -((2 * row + 1) as f64).sqrt() * ((2 * col + 1) as f64).sqrt()
            }
            Ordering::Equal => -((row + 1) as f64),
            Ordering::Less => 0.0,
        }
    });
    let b = Mat::from_fn(n, 1, |row, _| ((2 * row + 1) as f64).sqrt());
    let c = Mat::zeros(1, n);
    Ok(ContinuousSsm::new(a, b, c))
}

/// Bilinear (Tustin) discretization:
/// Abar = (I - Δ/2 A)⁻¹ (I + Δ/2 A), Bbar = (I - Δ/2 A)⁻¹ Δ B.
pub fn discretize_bilinear(ssm: &ContinuousSsm, delta: f64) -> Result<DiscreteSsm, SsmError> {
    if delta <= 0.0 {
        return Err(SsmError::NonPositiveStep(delta));
    }
    let n = ssm.state_size();
    let half = ssm.a.scaled(delta / 2.0);
    let minus = Mat::identity(n).sub(&half);
    let plus = Mat::identity(n).add(&half);
    let lu = linalg::lu_factor(&minus)?;
    let a_bar = lu.solve_mat(&plus);
    let b_bar = lu.solve_mat(&ssm.b.scaled(delta));
    Ok(DiscreteSsm {
        a_bar,
        b_bar,
        c: ssm.c.clone(),
        delta,
    })
}

/// Run the literal recurrence x_k = Abar x_{k-1} + Bbar u_k, y_k = C x_k.
pub fn ssm_scan(ssm: &DiscreteSsm, input: &[f64], x0: Option<&[f64]>) -> Vec<f64> {
    let n = ssm.state_size();
    let mut x = match x0 {
        Some(v) => {
            assert_eq!(v.len(), n, "x0 length must match state size");
            v.to_vec()
        }
        None => vec![0.0; n],
    };
    let mut y = Vec::with_capacity(input.len());
    let mut next = vec![0.0; n];
    for &u in input {
        for i in 0..n {
            let row = ssm.a_bar.row(i);
            let mut acc = ssm.b_bar[(i, 0)] * u;
            for (a, b) in row.iter().zip(x.iter()) {
                acc += a * b;
            }
            next[i] = acc;
        }
        std::mem::swap(&mut x, &mut next);
        let c = ssm.c.row(0);
        let mut out = 0.0;
        for (ci, xi) in c.iter().zip(x.iter()) {
            out += ci * xi;
        }
        y.push(out);
    }
    y
}

/// Materialize the convolution kernel K[i] = C Abar^i Bbar for i = 0..L-1
/// by iterated multiplication.
pub fn ssm_kernel(ssm: &DiscreteSsm, len: usize) -> Vec<f64> {
    let n = ssm.state_size();
    let mut state: Vec<f64> = (0..n).map(|i| ssm.b_bar[(i, 0)]).collect();
    let mut kernel = Vec::with_capacity(len);
    let c = ssm.c.row(0);
    for step in 0..len {
        let mut out = 0.0;
        for (ci, xi) in c.iter().zip(state.iter()) {
            out += ci * xi;
        }
        kernel.push(out);
        if step + 1 < len {
            state = ssm.a_bar.matvec(&state);
        }
    }
    kernel
}

/// Exact causal convolution y_k = sum_{i<=k} K[i] u[k-i], direct summation.
pub fn ssm_conv(kernel: &[f64], input: &[f64]) -> Result<Vec<f64>, SsmError> {
    if kernel.len() != input.len() {
        return Err(SsmError::LengthMismatch {
            kernel: kernel.len(),
            input: input.len(),
        });
    }
    let len = input.len();
    let mut y = vec![0.0; len];
    for (k, out) in y.iter_mut().enumerate() {
        let mut acc = 0.0;
        for i in 0..=k {
            acc += kernel[i] * input[k - i];
        }
        *out = acc;
    }
    Ok(y)
}

/// Change of basis (A, B, C) -> (V⁻¹AV, V⁻¹B, CV), which leaves the
/// input-output map unchanged.
pub fn conjugate_ssm(ssm: &ContinuousSsm, v: &Mat) -> Result<ContinuousSsm, SsmError> {
    let n = ssm.state_size();
    if v.rows() != n || v.cols() != n {
        return Err(SsmError::DimensionMismatch {
            context: "conjugation basis",
            got: v.rows(),
            expected: n,
        });
    }
    let lu = linalg::lu_factor(v)?;
    let a = lu.solve_mat(&ssm.a.matmul(v));
    let b = lu.solve_mat(&ssm.b);
    let c = ssm.c.matmul(v);
    Ok(ContinuousSsm::new(a, b, c))
}
