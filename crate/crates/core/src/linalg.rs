//! Dense linear-algebra helpers shared by the protocol and the concentration
//! checks.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};

/// Largest and smallest singular values of a matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectralSummary {
    pub sigma_max: f64,
    pub sigma_min: f64,
}

/// Extreme singular values from the symmetric eigendecomposition of the
/// smaller Gram matrix (`M^T M` when `M` is tall, `M M^T` otherwise).
///
/// For a wide matrix the smallest singular value reported is that of the
/// `min(rows, cols)` nonzero spectrum.
pub fn singular_extremes(m: &DMatrix<f64>) -> SpectralSummary {
    if m.is_empty() {
        return SpectralSummary {
            sigma_max: 0.0,
            sigma_min: 0.0,
        };
    }
    let gram = if m.nrows() >= m.ncols() {
        m.transpose() * m
    } else {
        m * m.transpose()
    };
    let eig = SymmetricEigen::new(gram);
    let hi = eig.eigenvalues.max().max(0.0);
    let lo = eig.eigenvalues.min().max(0.0);
    SpectralSummary {
        sigma_max: hi.sqrt(),
        sigma_min: lo.sqrt(),
    }
}

/// `max_i sum_j |M_ij|`.
pub fn inf_norm(m: &DMatrix<f64>) -> f64 {
    crate::latent_model::row_abs_sum_max(m)
}

/// Least-squares solution of `B z = y` by Householder QR.
///
/// Fails with `RankDeficient` when `sigma_min(B) <= 1e-10 sigma_max(B)`.
pub fn least_squares(b: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    if b.nrows() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: b.nrows(),
            actual: y.len(),
        });
    }
    let s = singular_extremes(b);
    if b.nrows() < b.ncols() || !(s.sigma_min > 1e-10 * s.sigma_max) {
        return Err(Error::RankDeficient {
            sigma_min: if b.nrows() < b.ncols() {
                0.0
            } else {
                s.sigma_min
            },
            sigma_max: s.sigma_max,
        });
    }
    let qr = b.clone().qr();
    let qty = qr.q().transpose() * y;
    let r = qr.r();
    r.solve_upper_triangular(&qty).ok_or(Error::RankDeficient {
        sigma_min: s.sigma_min,
        sigma_max: s.sigma_max,
    })
}

/// Serializes a matrix as a list of rows.
pub(crate) fn serialize_rows<S: serde::Serializer>(
    m: &DMatrix<f64>,
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(m.nrows()))?;
    for r in m.row_iter() {
        seq.serialize_element(&r.iter().copied().collect::<Vec<f64>>())?;
    }
    seq.end()
}
