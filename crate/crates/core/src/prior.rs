//! Samplable prior on Gr(k,D) with exact log-density.
//!
//! The prior is built from a matrix-variate Gaussian on the horizontal space
//! at a mean representative M: ambient noise Z ~ N(0, V (x) U) is projected
//! to the horizontal space and pushed onto the manifold by the fixed-time
//! Cayley retraction. The density of a class [Y] with respect to the
//! normalized invariant (Haar) measure on Gr(k,D) is
//!
//! ```text
//! log p([Y]) = log V_Gr(k,D) + log N_h(xi; 0, Sigma_h) - logdet(dR_M)(xi)
//! ```
//!
//! where `xi = R_M^{-1}(Y_c)` for the chart-canonical representative `Y_c`,
//! `Sigma_h = H^T (V (x) U) H` is the Gaussian covariance expressed in the
//! (D-k)k orthonormal horizontal coordinates, and the last term is the
//! forward chart Jacobian (the chart contracts away from the origin, so its
//! log-determinant is subtracted). Canonicalizing the representative makes
//! the value a function of the subspace alone.

use crate::error::PriorError;
use crate::geometry::{
    horizontal_basis, horizontal_retract, inverse_retract, retraction_jacobian_logdet,
    HorizontalVector, StiefelPoint,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::function::gamma::ln_gamma;

// ---- volume constants -------------------------------------------------------

/// log of the multivariate gamma function Gamma_k(a).
pub fn log_multivariate_gamma(k: usize, a: f64) -> f64 {
    let mut acc = (k as f64) * (k as f64 - 1.0) / 4.0 * std::f64::consts::PI.ln();
    for j in 1..=k {
        acc += ln_gamma(a - (j as f64 - 1.0) / 2.0);
    }
    acc
}

/// log V_St(k,D) = log( 2^k pi^{Dk/2} / Gamma_k(D/2) ).
pub fn log_volume_stiefel(k: usize, d: usize) -> Result<f64, PriorError> {
    if k < 1 || k > d {
        return Err(PriorError::Domain { k, dims: d });
    }
    let pi = std::f64::consts::PI;
    Ok((k as f64) * 2f64.ln() + (d * k) as f64 / 2.0 * pi.ln()
        - log_multivariate_gamma(k, d as f64 / 2.0))
}

/// log V_O(k) = log V_St(k,k).
pub fn log_volume_orthogonal(k: usize) -> Result<f64, PriorError> {
    log_volume_stiefel(k, k)
}

/// log V_Gr(k,D) = log( pi^{k(D-k)/2} Gamma_k(k/2) / Gamma_k(D/2) ).
pub fn log_volume_grassmann(k: usize, d: usize) -> Result<f64, PriorError> {
    if k < 1 || k >= d {
        return Err(PriorError::Domain { k, dims: d });
    }
    let pi = std::f64::consts::PI;
    Ok((k * (d - k)) as f64 / 2.0 * pi.ln() + log_multivariate_gamma(k, k as f64 / 2.0)
        - log_multivariate_gamma(k, d as f64 / 2.0))
}

/// Volume constants of the quotient Gr(k,D) = St(k,D)/O(k), in log units.
#[derive(Debug, Clone, Copy)]
pub struct VolumeTable {
    pub log_v_stiefel: f64,
    pub log_v_orthogonal: f64,
    pub log_v_grassmann: f64,
}

impl VolumeTable {
    pub fn new(k: usize, d: usize) -> Result<Self, PriorError> {
        Ok(Self {
            log_v_stiefel: log_volume_stiefel(k, d)?,
            log_v_orthogonal: log_volume_orthogonal(k)?,
            log_v_grassmann: log_volume_grassmann(k, d)?,
        })
    }
}

// ---- prior -------------------------------------------------------------------

/// Gaussian-based prior p_Gr(k,D) centered at a mean representative.
#[derive(Debug, Clone)]
pub struct GrassmannGaussianPrior {
    mean: StiefelPoint,
    row_cov: DMatrix<f64>,
    col_cov: DMatrix<f64>,
    log_vol_gr: f64,
    h_basis: DMatrix<f64>,
    /// None when the covariance is degenerate (sigma = 0).
    gaussian: Option<HorizontalGaussian>,
}

#[derive(Debug, Clone)]
struct HorizontalGaussian {
    chol_u: DMatrix<f64>,
    chol_v: DMatrix<f64>,
    sigma_h_inv: DMatrix<f64>,
    sigma_h_logdet: f64,
}

impl GrassmannGaussianPrior {
    /// Builds the prior from mean M and positive-definite row/column
    /// covariances U (D x D) and V (k x k). Zero covariances are accepted and
    /// mark the prior degenerate: sampling returns M, log-density errors.
    pub fn new(
        mean: StiefelPoint,
        row_cov: DMatrix<f64>,
        col_cov: DMatrix<f64>,
    ) -> Result<Self, PriorError> {
        let (d, k) = mean.dims();
        if row_cov.shape() != (d, d) {
            return Err(PriorError::NotPositiveDefinite { which: "U (bad shape)" });
        }
        if col_cov.shape() != (k, k) {
            return Err(PriorError::NotPositiveDefinite { which: "V (bad shape)" });
        }
        let h_basis = horizontal_basis(&mean);
        let log_vol_gr = log_volume_grassmann(k, d)?;

        let degenerate = row_cov.norm() == 0.0 || col_cov.norm() == 0.0;
        let gaussian = if degenerate {
            None
        } else {
            let chol_u = row_cov
                .clone()
                .cholesky()
                .ok_or(PriorError::NotPositiveDefinite { which: "U" })?
                .l();
            let chol_v = col_cov
                .clone()
                .cholesky()
                .ok_or(PriorError::NotPositiveDefinite { which: "V" })?
                .l();
            let ambient = col_cov.kronecker(&row_cov);
            let sigma_h = h_basis.transpose() * ambient * &h_basis;
            let chol_h = sigma_h
                .clone()
                .cholesky()
                .ok_or(PriorError::NotPositiveDefinite { which: "H^T (V x U) H" })?;
            let dh = (d - k) * k;
            let sigma_h_logdet =
                (0..dh).map(|i| chol_h.l()[(i, i)].ln()).sum::<f64>() * 2.0;
            let sigma_h_inv = chol_h.inverse();
            Some(HorizontalGaussian {
                chol_u,
                chol_v,
                sigma_h_inv,
                sigma_h_logdet,
            })
        };

        Ok(Self {
            mean,
            row_cov,
            col_cov,
            log_vol_gr,
            h_basis,
            gaussian,
        })
    }

    /// Texture-experiment prior: U = sigma^2 I_D, V = I_k.
    pub fn isotropic(mean: StiefelPoint, sigma: f64) -> Result<Self, PriorError> {
        let (d, k) = mean.dims();
        let u = DMatrix::identity(d, d) * (sigma * sigma);
        let v = DMatrix::identity(k, k);
        Self::new(mean, u, v)
    }

    pub fn mean(&self) -> &StiefelPoint {
        &self.mean
    }

    pub fn row_cov(&self) -> &DMatrix<f64> {
        &self.row_cov
    }

    pub fn col_cov(&self) -> &DMatrix<f64> {
        &self.col_cov
    }

    /// (D, k)
    pub fn dims(&self) -> (usize, usize) {
        self.mean.dims()
    }

    pub fn is_degenerate(&self) -> bool {
        self.gaussian.is_none()
    }

    pub fn log_volume_grassmann(&self) -> f64 {
        self.log_vol_gr
    }

    /// Orthonormal horizontal basis at the mean, cached at construction.
    pub fn horizontal_basis(&self) -> &DMatrix<f64> {
        &self.h_basis
    }

    /// Inverse and log-determinant of the horizontal covariance
    /// Sigma_h = H^T (V (x) U) H. Errors when degenerate.
    pub fn horizontal_covariance_inv(&self) -> Result<(&DMatrix<f64>, f64), PriorError> {
        let g = self
            .gaussian
            .as_ref()
            .ok_or(PriorError::DegenerateCovariance)?;
        Ok((&g.sigma_h_inv, g.sigma_h_logdet))
    }

    /// Draws a representative: Z ~ N(0, V (x) U) reshaped D x k, projected to
    /// the horizontal space at M, then retracted.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> StiefelPoint {
        let (d, k) = self.dims();
        let g = match &self.gaussian {
            None => return self.mean.clone(),
            Some(g) => g,
        };
        let z0 = DMatrix::from_fn(d, k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let z = &g.chol_u * z0 * g.chol_v.transpose();
        let xi = &z - self.mean.matrix() * (self.mean.matrix().transpose() * &z);
        let xi = HorizontalVector::new_unchecked(xi, self.mean.clone());
        horizontal_retract(&xi, 1.0).expect("retraction of horizontal sample")
    }

    /// Chart-canonical column rotation: the Q in O(k) maximizing
    /// tr(M^T Y Q). For k = 1 this is the sign flip putting Y on the near
    /// side of the chart.
    pub fn canonical_rotation(&self, y: &StiefelPoint) -> DMatrix<f64> {
        let k = self.dims().1;
        let mty = self.mean.matrix().transpose() * y.matrix();
        let svd = mty.svd(true, true);
        let u = svd.u.expect("svd u");
        let vt = svd.v_t.expect("svd v_t");
        // maximizer of tr((M^T Y) Q) over O(k)
        let q = vt.transpose() * u.transpose();
        debug_assert_eq!(q.shape(), (k, k));
        q
    }

    /// Representative of [Y] aligned with the chart at M.
    pub fn canonicalize(&self, y: &StiefelPoint) -> StiefelPoint {
        let q = self.canonical_rotation(y);
        StiefelPoint::new_unchecked(y.matrix() * q)
    }

    /// Exact log-density of the class [Y] with respect to the normalized
    /// invariant measure on Gr(k,D). Invariant under Y -> Y Q by
    /// canonicalization of the representative.
    pub fn log_density(&self, y: &StiefelPoint) -> Result<f64, PriorError> {
        let g = self
            .gaussian
            .as_ref()
            .ok_or(PriorError::DegenerateCovariance)?;
        let y_c = self.canonicalize(y);
        let xi = inverse_retract(&self.mean, &y_c)?;
        let (d, k) = self.dims();
        let dh = (d - k) * k;

        let coords = self.h_basis.transpose()
            * DVector::from_column_slice(xi.matrix().as_slice());
        let quad = (coords.transpose() * &g.sigma_h_inv * &coords)[(0, 0)];
        let log_mn = -0.5 * (dh as f64) * (2.0 * std::f64::consts::PI).ln()
            - 0.5 * g.sigma_h_logdet
            - 0.5 * quad;
        let jld = retraction_jacobian_logdet(&self.mean, &xi);
        Ok(self.log_vol_gr + log_mn - jld)
    }
}
