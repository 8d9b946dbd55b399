//! Normal-plus-low-rank factorization of the memory matrix.
//!
//! The lower-triangular memory matrix `A` becomes tractable once written as
//! `A = V Λ V* − P Qᵀ`: a normal part diagonalized by a unitary `V` with
//! complex spectrum `Λ`, minus a rank-r real correction. For the LegS matrix
//! the correction is rank 1 with `P[n] = √(n + 1/2)` and `Q = P`, and the
//! corrected matrix `A + PPᵀ` is skew-symmetric plus `−½I`, hence normal.

use super::{ContinuousSsm, SsmError};
use crate::linalg::complex::{hermitian_eigen, CMat};
use crate::linalg::{ComplexScalar, Mat};
use serde::{Deserialize, Serialize};

/// How far `A + PPᵀ` may deviate from (scaled identity + skew) before the
/// decomposition refuses to proceed.
pub const NORMALITY_TOL: f64 = 1e-10;

/// The factorization `A = V Λ V* − P Qᵀ`.
///
/// `lambda[j]` pairs with column `j` of `v`. Eigenvalues are sorted by
/// imaginary part, descending, so conjugate partners sit mirrored around the
/// middle and the representatives with positive imaginary part come first.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NplrForm {
    pub lambda: Vec<ComplexScalar>,
    /// N x r low-rank factor.
    pub p: Mat,
    /// N x r low-rank factor (equal to `p` for LegS).
    pub q: Mat,
    /// Unitary eigenbasis of the normal part, N x N.
    pub v: CMat,
    pub rank: usize,
}

/// Rank-1 basis matrices that make the spectrum-to-matrix map linear.
///
/// With representative eigenvalues `λ_j = a_j + i b_j` (positive imaginary
/// part) and an optional lone real eigenvalue `a` for odd N:
///
/// `V Λ V* = Σ_j (a_j · pair_re[j] + b_j · pair_im[j]) + a · lone`
///
/// where `pair_re[j] = 2 Re(v_j v_j*)` and `pair_im[j] = −2 Im(v_j v_j*)`.
/// The matrices depend only on `V`, so a model can hold the spectrum as plain
/// real parameters and rebuild the real matrix by linear combination.
#[derive(Debug, Clone)]
pub struct SpectrumBasis {
    pub pair_re: Vec<Mat>,
    pub pair_im: Vec<Mat>,
    pub lone: Option<Mat>,
}

impl NplrForm {
    pub fn state_size(&self) -> usize {
        self.lambda.len()
    }

    /// Rebuild the real matrix `V Λ V* − P Qᵀ`.
    pub fn reconstruct(&self) -> Mat {
        let n = self.state_size();
        let normal = self.normal_part_complex();
        Mat::from_fn(n, n, |i, j| {
            let mut low_rank = 0.0;
            for r in 0..self.rank {
                low_rank += self.p[(i, r)] * self.q[(j, r)];
            }
            normal[(i, j)].re - low_rank
        })
    }

    /// Largest imaginary residue of `V Λ V*`; near zero when the spectrum is
    /// conjugate-symmetric, as it must be for a real source matrix.
    pub fn max_imag_residue(&self) -> f64 {
        self.normal_part_complex().max_abs_imag()
    }

    fn normal_part_complex(&self) -> CMat {
        let n = self.state_size();
        let mut scaled = self.v.clone();
        for j in 0..n {
            for i in 0..n {
                scaled[(i, j)] *= self.lambda[j];
            }
        }
        scaled.matmul(&self.v.adjoint())
    }

    /// The spectrum flattened to N reals: `(re, im)` per conjugate pair taken
    /// from the positive-imaginary representatives in column order, then the
    /// lone real eigenvalue when N is odd.
    pub fn spectrum_parameters(&self) -> Vec<f64> {
        let n = self.state_size();
        let pairs = n / 2;
        let mut out = Vec::with_capacity(n);
        for j in 0..pairs {
            out.push(self.lambda[j].re);
            out.push(self.lambda[j].im);
        }
        if n % 2 == 1 {
            out.push(self.lambda[pairs].re);
        }
        out
    }

    /// Basis matrices matching the layout of [`Self::spectrum_parameters`].
    pub fn spectrum_basis(&self) -> SpectrumBasis {
        let n = self.state_size();
        let pairs = n / 2;
        let mut pair_re = Vec::with_capacity(pairs);
        let mut pair_im = Vec::with_capacity(pairs);
        for j in 0..pairs {
            let col = self.v.column(j);
            pair_re.push(Mat::from_fn(n, n, |i, k| {
                2.0 * (col[i] * col[k].conj()).re
            }));
            pair_im.push(Mat::from_fn(n, n, |i, k| {
                -2.0 * (col[i] * col[k].conj()).im
            }));
        }
        let lone = (n % 2 == 1).then(|| {
            let col = self.v.column(pairs);
            Mat::from_fn(n, n, |i, k| (col[i] * col[k].conj()).re)
        });
        SpectrumBasis {
            pair_re,
            pair_im,
            lone,
        }
    }
}

/// Factor a LegS-structured matrix into normal-plus-low-rank form.
///
/// Forms the rank-1 correction `P[n] = √(n + 1/2)`, verifies `A + PPᵀ` is a
/// scaled identity plus a skew-symmetric part, and diagonalizes that normal
/// matrix through the Hermitian eigenproblem of `−i·skew`.
pub fn nplr_decompose(ssm: &ContinuousSsm) -> Result<NplrForm, SsmError> {
    let n = ssm.state_size();
    let p = Mat::from_fn(n, 1, |i, _| ((i as f64) + 0.5).sqrt());
    let corrected = Mat::from_fn(n, n, |i, j| ssm.a[(i, j)] + p[(i, 0)] * p[(j, 0)]);

    let sigma = (0..n).map(|i| corrected[(i, i)]).sum::<f64>() / n as f64;
    let mut deviation = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let sym = 0.5 * (corrected[(i, j)] + corrected[(j, i)]);
            let target = if i == j { sigma } else { 0.0 };
            deviation = deviation.max((sym - target).abs());
        }
    }
    if deviation > NORMALITY_TOL {
        return Err(SsmError::NotNormal(deviation));
    }

    // corrected = σI + S with S real skew-symmetric; H = −iS is Hermitian and
    // shares eigenvectors with S, with real spectrum θ (sorted descending).
    let hermitian = CMat::from_fn(n, n, |i, j| {
        let skew = 0.5 * (corrected[(i, j)] - corrected[(j, i)]);
        ComplexScalar::new(0.0, -skew)
    });
    let (theta, v) = hermitian_eigen(&hermitian);
    let lambda = theta
        .iter()
        .map(|&t| ComplexScalar::new(sigma, t))
        .collect();

    Ok(NplrForm {
        lambda,
        p: p.clone(),
        q: p,
        v,
        rank: 1,
    })
}
