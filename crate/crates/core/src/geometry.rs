//! Stiefel/Grassmann geometric kernels.
//!
//! A point on Gr(k,D) is handled through an orthonormal representative
//! `Y in St(k,D)`; the equivalence class is `[Y] = {Y Q : Q in O(k)}`. Tangent
//! vectors of Gr(k,D) are carried as horizontal vectors at the representative:
//! D x k matrices with `Y^T xi = 0`. All maps here are pure functions over
//! value types and safe to call from any number of threads.
//!
//! The retraction is the economy Cayley transform
//!
//! ```text
//! R_Y(t xi) = Y + t xi - (t^2/2 Y + t^3/4 xi)(I + t^2/4 xi^T xi)^{-1} xi^T xi
//! ```
//!
//! with inverse `R_Y^{-1}(X) = 2 (X - Y Y^T X)(I + Y^T X)^{-1}`. Chart
//! Jacobians are taken with respect to an explicit orthonormal basis of the
//! horizontal space, giving the Gram-determinant form |det(B^T B)|^{1/2} for
//! the D k x (D-k) k derivative restricted to horizontal directions.

use crate::error::GeometryError;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

/// ||Y^T Y - I||_F tolerance for accepting a Stiefel representative.
pub const ORTHONORMALITY_TOL: f64 = 1e-10;
/// ||Y^T xi||_F tolerance for accepting a horizontal vector.
pub const HORIZONTALITY_TOL: f64 = 1e-9;
/// Condition-number threshold on (I + Y^T X) beyond which the chart is
/// treated as singular.
pub const CHART_COND_MAX: f64 = 1e12;
/// Gram-Schmidt pivot threshold below which a column is declared dependent.
pub const GS_PIVOT_MIN: f64 = 1e-12;

/// Orthonormal D x k representative of a subspace in Gr(k,D).
#[derive(Debug, Clone, PartialEq)]
pub struct StiefelPoint {
    matrix: DMatrix<f64>,
}

impl StiefelPoint {
    /// Validates orthonormality to [`ORTHONORMALITY_TOL`].
    pub fn new(matrix: DMatrix<f64>) -> Result<Self, GeometryError> {
        let (d, k) = (matrix.nrows(), matrix.ncols());
        if k < 1 || k >= d {
            return Err(GeometryError::InvalidDims { dims: d, k });
        }
        let residual = (matrix.transpose() * &matrix - DMatrix::identity(k, k)).norm();
        if residual > ORTHONORMALITY_TOL {
            return Err(GeometryError::NotOrthonormal {
                residual,
                tolerance: ORTHONORMALITY_TOL,
            });
        }
        Ok(Self { matrix })
    }

    /// Skips validation; for internal use where orthonormality is structural.
    pub fn new_unchecked(matrix: DMatrix<f64>) -> Self {
        Self { matrix }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    /// (D, k)
    pub fn dims(&self) -> (usize, usize) {
        (self.matrix.nrows(), self.matrix.ncols())
    }

    pub fn orthonormality_residual(&self) -> f64 {
        let k = self.matrix.ncols();
        (self.matrix.transpose() * &self.matrix - DMatrix::identity(k, k)).norm()
    }

    /// Representative with columns rotated by `q`: Y Q.
    pub fn rotated(&self, q: &OrthogonalMatrix) -> StiefelPoint {
        StiefelPoint::new_unchecked(&self.matrix * q.matrix())
    }
}

/// Matrix form of a Grassmann tangent vector: xi with base^T xi = 0.
#[derive(Debug, Clone)]
pub struct HorizontalVector {
    matrix: DMatrix<f64>,
    base: StiefelPoint,
}

impl HorizontalVector {
    /// Validates horizontality to [`HORIZONTALITY_TOL`].
    pub fn new(matrix: DMatrix<f64>, base: StiefelPoint) -> Result<Self, GeometryError> {
        if matrix.shape() != base.matrix().shape() {
            let (er, ec) = base.matrix().shape();
            return Err(GeometryError::ShapeMismatch {
                expected_rows: er,
                expected_cols: ec,
                rows: matrix.nrows(),
                cols: matrix.ncols(),
            });
        }
        let residual = (base.matrix().transpose() * &matrix).norm();
        if residual > HORIZONTALITY_TOL {
            return Err(GeometryError::NotHorizontal {
                residual,
                tolerance: HORIZONTALITY_TOL,
            });
        }
        Ok(Self { matrix, base })
    }

    pub fn new_unchecked(matrix: DMatrix<f64>, base: StiefelPoint) -> Self {
        Self { matrix, base }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn base(&self) -> &StiefelPoint {
        &self.base
    }

    pub fn norm(&self) -> f64 {
        self.matrix.norm()
    }

    /// Horizontal vector xi Q at base Y Q (the horizontal lift at the rotated
    /// representative).
    pub fn rotated(&self, q: &OrthogonalMatrix) -> HorizontalVector {
        HorizontalVector {
            matrix: &self.matrix * q.matrix(),
            base: self.base.rotated(q),
        }
    }
}

/// Element of O(k).
#[derive(Debug, Clone)]
pub struct OrthogonalMatrix {
    matrix: DMatrix<f64>,
}

impl OrthogonalMatrix {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self, GeometryError> {
        let k = matrix.ncols();
        if matrix.nrows() != k {
            return Err(GeometryError::ShapeMismatch {
                expected_rows: k,
                expected_cols: k,
                rows: matrix.nrows(),
                cols: matrix.ncols(),
            });
        }
        let residual = (matrix.transpose() * &matrix - DMatrix::identity(k, k)).norm();
        if residual > ORTHONORMALITY_TOL {
            return Err(GeometryError::NotOrthonormal {
                residual,
                tolerance: ORTHONORMALITY_TOL,
            });
        }
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

// ---- projections ---------------------------------------------------------

/// Projection onto the Stiefel tangent space at Y:
/// `P^t_Y(Z) = Z - Y sym(Y^T Z)` with `sym(B) = (B + B^T)/2`.
pub fn tangent_project(y: &StiefelPoint, z: &DMatrix<f64>) -> Result<DMatrix<f64>, GeometryError> {
    check_shape(y, z)?;
    let ytz = y.matrix().transpose() * z;
    let sym = (&ytz + ytz.transpose()) * 0.5;
    Ok(z - y.matrix() * sym)
}

/// Projection onto the horizontal space at Y: `Z - Y (Y^T Z)`.
pub fn horizontal_project(
    y: &StiefelPoint,
    z: &DMatrix<f64>,
) -> Result<HorizontalVector, GeometryError> {
    check_shape(y, z)?;
    let xi = z - y.matrix() * (y.matrix().transpose() * z);
    Ok(HorizontalVector::new_unchecked(xi, y.clone()))
}

fn check_shape(y: &StiefelPoint, z: &DMatrix<f64>) -> Result<(), GeometryError> {
    if z.shape() != y.matrix().shape() {
        let (er, ec) = y.matrix().shape();
        return Err(GeometryError::ShapeMismatch {
            expected_rows: er,
            expected_cols: ec,
            rows: z.nrows(),
            cols: z.ncols(),
        });
    }
    Ok(())
}

// ---- complement basis ------------------------------------------------------

/// Orthonormal completion Y_perp: D x (D-k) with Y_perp^T Y_perp = I,
/// Y^T Y_perp = 0 and Y Y^T + Y_perp Y_perp^T = I.
///
/// Built by greedy orthogonalization of standard basis vectors with
/// largest-residual pivoting (ties broken by lowest index), so repeated calls
/// on the same Y produce identical output.
pub fn complement_basis(y: &StiefelPoint) -> DMatrix<f64> {
    let (d, k) = y.dims();
    let mut ortho: Vec<nalgebra::DVector<f64>> = (0..k).map(|j| y.matrix().column(j).into()) .collect();
    let mut taken = vec![false; d];
    let mut out = DMatrix::zeros(d, d - k);

    for step in 0..(d - k) {
        let mut best: Option<(usize, f64, nalgebra::DVector<f64>)> = None;
        for j in 0..d {
            if taken[j] {
                continue;
            }
            let mut r = nalgebra::DVector::zeros(d);
            r[j] = 1.0;
            for q in &ortho {
                let c = q.dot(&r);
                r.axpy(-c, q, 1.0);
            }
            let n = r.norm();
            if best.as_ref().map_or(true, |(_, bn, _)| n > *bn + 1e-14) {
                best = Some((j, n, r));
            }
        }
        let (j, _, mut r) = best.expect("complement basis pivot");
        taken[j] = true;
        r /= r.norm();
        // one re-orthogonalization pass
        for q in &ortho {
            let c = q.dot(&r);
            r.axpy(-c, q, 1.0);
        }
        r /= r.norm();
        out.set_column(step, &r);
        ortho.push(r);
    }
    out
}

/// Orthonormal basis of the horizontal space at Y in vectorized coordinates:
/// a Dk x (D-k)k matrix whose column (j*(D-k) + i) is Vec(Y_perp e_i e_j^T).
pub fn horizontal_basis(y: &StiefelPoint) -> DMatrix<f64> {
    let (d, k) = y.dims();
    let yp = complement_basis(y);
    let m = d - k;
    let mut h = DMatrix::zeros(d * k, m * k);
    for j in 0..k {
        for i in 0..m {
            let col = j * m + i;
            for r in 0..d {
                h[(j * d + r, col)] = yp[(r, i)];
            }
        }
    }
    h
}

// ---- retraction ------------------------------------------------------------

/// Economy Cayley-transform horizontal retraction at `xi.base()`, evaluated
/// at scale `t`.
pub fn horizontal_retract(xi: &HorizontalVector, t: f64) -> Result<StiefelPoint, GeometryError> {
    let y = xi.base().matrix();
    let x = xi.matrix();
    let (_, k) = xi.base().dims();
    let s = x.transpose() * x; // xi^T xi
    let inner = DMatrix::identity(k, k) + &s * (t * t / 4.0);
    let chol = inner
        .clone()
        .cholesky()
        .ok_or_else(|| GeometryError::Internal("cayley inner solve failed".into()))?;
    let gs = chol.solve(&s); // (I + t^2/4 S)^{-1} S
    let lead = y * (t * t / 2.0) + x * (t * t * t / 4.0);
    let out = y + x * t - lead * gs;
    Ok(StiefelPoint::new_unchecked(out))
}

/// Inverse of [`horizontal_retract`] at t = 1:
/// `R_Y^{-1}(X) = 2 (X - Y Y^T X)(I + Y^T X)^{-1}`.
///
/// Fails with [`GeometryError::ChartSingular`] when cond(I + Y^T X) exceeds
/// [`CHART_COND_MAX`].
pub fn inverse_retract(
    y: &StiefelPoint,
    x: &StiefelPoint,
) -> Result<HorizontalVector, GeometryError> {
    let (d, k) = y.dims();
    if x.dims() != (d, k) {
        return Err(GeometryError::ShapeMismatch {
            expected_rows: d,
            expected_cols: k,
            rows: x.matrix().nrows(),
            cols: x.matrix().ncols(),
        });
    }
    let n = DMatrix::identity(k, k) + y.matrix().transpose() * x.matrix();
    let cond = condition_number(&n);
    if !cond.is_finite() || cond > CHART_COND_MAX {
        return Err(GeometryError::ChartSingular { cond });
    }
    let n_inv = n
        .lu()
        .try_inverse()
        .ok_or(GeometryError::ChartSingular { cond })?;
    let proj = x.matrix() - y.matrix() * (y.matrix().transpose() * x.matrix());
    let xi = proj * n_inv * 2.0;
    Ok(HorizontalVector::new_unchecked(xi, y.clone()))
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let svd = m.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin == 0.0 {
        f64::INFINITY
    } else {
        smax / smin
    }
}

// ---- chart derivatives ------------------------------------------------------

/// Ambient derivative of the fixed-time retraction: the Dk x Dk matrix
/// dVec(R_M(E))/dVec(E) assembled from the product-rule chain of the economy
/// Cayley formula with Kronecker products and the commutation matrix.
pub fn retraction_derivative(m: &StiefelPoint, xi: &HorizontalVector) -> DMatrix<f64> {
    let (d, k) = m.dims();
    let e = xi.matrix();
    let s = e.transpose() * e; // k x k
    let f = m.matrix() * 0.5 + e * 0.25; // D x k
    let g = (DMatrix::identity(k, k) + &s * 0.25)
        .try_inverse()
        .expect("I + S/4 is positive definite");

    let id_dk = DMatrix::<f64>::identity(d * k, d * k);
    let id_d = DMatrix::<f64>::identity(d, d);
    let id_k = DMatrix::<f64>::identity(k, k);
    let kk = commutation_matrix(k, k);

    // dS = (I + K_{k,k}) (I_k (x) E^T)   [k^2 x Dk]
    let d_s = (DMatrix::identity(k * k, k * k) + kk) * id_k.kronecker(&e.transpose());
    // dG = -1/4 (G^T (x) G) dS
    let d_g = g.transpose().kronecker(&g) * &d_s * (-0.25);
    // d(F G S) = ((G S)^T (x) I_D) dF + (S^T (x) F) dG + (I_k (x) F G) dS,
    // dF = 1/4 I
    let gs = &g * &s;
    let term_f = gs.transpose().kronecker(&id_d) * 0.25;
    let term_g = s.transpose().kronecker(&f) * d_g;
    let fg = &f * &g;
    let term_s = id_k.kronecker(&fg) * d_s;
    id_dk - term_f - term_g - term_s
}

/// Log of |det(B^T B)|^{1/2} where B is [`retraction_derivative`] restricted
/// to the orthonormal horizontal basis at M. Zero at xi = 0.
pub fn retraction_jacobian_logdet(m: &StiefelPoint, xi: &HorizontalVector) -> f64 {
    let dx = retraction_derivative(m, xi);
    let h = horizontal_basis(m);
    let b = dx * h;
    let gram = b.transpose() * &b;
    logdet_spd(&gram) * 0.5
}

fn logdet_spd(m: &DMatrix<f64>) -> f64 {
    if let Some(chol) = m.clone().cholesky() {
        let l = chol.l();
        (0..m.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0
    } else {
        m.clone().lu().determinant().abs().ln()
    }
}

/// Derivative of the inverse retraction: the Dk x Dk matrix
/// dVec(R_Y^{-1}(X))/dVec(X). With N = I + Y^T X and P = I - Y Y^T this is
/// `N^{-T} (x) [2 P (I - X N^{-1} Y^T)]`; at X = Y it acts as the identity on
/// horizontal directions and annihilates the rest.
pub fn inverse_retraction_derivative(
    y: &StiefelPoint,
    x: &StiefelPoint,
) -> Result<DMatrix<f64>, GeometryError> {
    let (d, k) = y.dims();
    let n = DMatrix::identity(k, k) + y.matrix().transpose() * x.matrix();
    let cond = condition_number(&n);
    if !cond.is_finite() || cond > CHART_COND_MAX {
        return Err(GeometryError::ChartSingular { cond });
    }
    let n_inv = n.lu().try_inverse().ok_or(GeometryError::ChartSingular { cond })?;
    let p = DMatrix::identity(d, d) - y.matrix() * y.matrix().transpose();
    let inner = (DMatrix::identity(d, d) - x.matrix() * &n_inv * y.matrix().transpose()) * 2.0;
    let left = &p * inner;
    Ok(n_inv.transpose().kronecker(&left))
}

// ---- commutation matrix ------------------------------------------------------

/// Permutation matrix K with K Vec(A) = Vec(A^T) for every D x k matrix A.
pub fn commutation_matrix(d: usize, k: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(d * k, d * k);
    for j in 0..k {
        for i in 0..d {
            // Vec(A) position of A[i,j] is j*d + i; Vec(A^T) position is i*k + j.
            m[(i * k + j, j * d + i)] = 1.0;
        }
    }
    m
}

// ---- Gram-Schmidt -------------------------------------------------------------

/// Classical Gram-Schmidt with one re-orthogonalization pass. Sign-preserving
/// and span-preserving; fails on a pivot norm below [`GS_PIVOT_MIN`].
pub fn gram_schmidt(p: &DMatrix<f64>) -> Result<StiefelPoint, GeometryError> {
    let (d, k) = p.shape();
    if k < 1 || k > d {
        return Err(GeometryError::InvalidDims { dims: d, k });
    }
    let mut q = DMatrix::zeros(d, k);
    for col in 0..k {
        let mut v: nalgebra::DVector<f64> = p.column(col).into();
        for _pass in 0..2 {
            for prev in 0..col {
                let qc = q.column(prev);
                let c = qc.dot(&v);
                v.axpy(-c, &qc.into_owned(), 1.0);
            }
        }
        let n = v.norm();
        if n < GS_PIVOT_MIN {
            return Err(GeometryError::RankDeficient { col, pivot: n });
        }
        v /= n;
        q.set_column(col, &v);
    }
    Ok(StiefelPoint::new_unchecked(q))
}

// ---- diagnostics ----------------------------------------------------------------

/// Principal angles between span(Y1) and span(Y2), ascending, in [0, pi/2].
pub fn principal_angles(y1: &StiefelPoint, y2: &StiefelPoint) -> Vec<f64> {
    let m = y1.matrix().transpose() * y2.matrix();
    let svd = m.svd(false, false);
    let mut angles: Vec<f64> = svd
        .singular_values
        .iter()
        .map(|&s| s.clamp(-1.0, 1.0).acos())
        .collect();
    angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
    angles
}

/// Largest principal angle; the natural distance diagnostic on Gr(1,D).
pub fn max_principal_angle(y1: &StiefelPoint, y2: &StiefelPoint) -> f64 {
    principal_angles(y1, y2)
        .into_iter()
        .fold(0.0, f64::max)
}

// ---- random elements ---------------------------------------------------------------

/// Haar-uniform element of O(k): QR of a Gaussian matrix with the diagonal of
/// R sign-fixed to be positive.
pub fn haar_orthogonal<R: Rng + ?Sized>(k: usize, rng: &mut R) -> OrthogonalMatrix {
    let g = DMatrix::from_fn(k, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..k {
        if r[(j, j)] < 0.0 {
            for i in 0..k {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    OrthogonalMatrix { matrix: q }
}

/// Uniform-ish random Stiefel representative (Gram-Schmidt of a Gaussian).
pub fn random_stiefel<R: Rng + ?Sized>(d: usize, k: usize, rng: &mut R) -> StiefelPoint {
    loop {
        let g = DMatrix::from_fn(d, k, |_, _| rng.sample::<f64, _>(StandardNormal));
        if let Ok(y) = gram_schmidt(&g) {
            return y;
        }
    }
}

/// Random horizontal vector at Y with entries projected from a Gaussian,
/// rescaled to the requested Frobenius norm.
pub fn random_horizontal<R: Rng + ?Sized>(
    y: &StiefelPoint,
    norm: f64,
    rng: &mut R,
) -> HorizontalVector {
    let (d, k) = y.dims();
    loop {
        let g = DMatrix::from_fn(d, k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let h = horizontal_project(y, &g).expect("shape");
        let n = h.norm();
        if n > 1e-9 {
            return HorizontalVector::new_unchecked(h.matrix() * (norm / n), y.clone());
        }
    }
}
