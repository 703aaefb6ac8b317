//! Covariance building blocks: the RBF kernel, kernel matrices between
//! location sets, the equicorrelation output matrix and the Kronecker
//! structured observation covariance.
//!
//! Vectorization is location-major: the `d` velocity components of a point
//! are contiguous, so a covariance over `N` points is `K ⊗ Ω`, whose `(a, b)`
//! block of size `d × d` is `K[a, b] · Ω`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::num::Real;

/// Squared-exponential kernel `σ0² · exp(-‖x - y‖² / (2ℓ0²))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RbfKernel<T> {
    sigma0_sq: T,
    lengthscale: T,
}

impl<T: Real> RbfKernel<T> {
    pub fn new(sigma0_sq: T, lengthscale: T) -> Result<Self> {
        if !(sigma0_sq.is_finite() && sigma0_sq > T::zero()) {
            return Err(Error::InvalidParameter(format!(
                "kernel variance must be positive, got {sigma0_sq}"
            )));
        }
        if !(lengthscale.is_finite() && lengthscale > T::zero()) {
            return Err(Error::InvalidParameter(format!(
                "kernel lengthscale must be positive, got {lengthscale}"
            )));
        }
        Ok(Self {
            sigma0_sq,
            lengthscale,
        })
    }

    pub fn sigma0_sq(&self) -> T {
        self.sigma0_sq
    }

    pub fn lengthscale(&self) -> T {
        self.lengthscale
    }

    /// Evaluates the kernel between two points of equal dimension.
    pub fn eval(&self, x1: &[T], x2: &[T]) -> Result<T> {
        if x1.len() != x2.len() {
            return Err(Error::DimensionMismatch {
                expected: x1.len(),
                found: x2.len(),
            });
        }
        Ok(self.eval_unchecked(x1, x2))
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, x1: &[T], x2: &[T]) -> T {
        let sq: T = x1
            .iter()
            .zip(x2)
            .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
        let two = T::lit(2.0);
        self.sigma0_sq * (-sq / (two * self.lengthscale * self.lengthscale)).exp()
    }
}

/// `d × d` matrix with unit diagonal and constant off-diagonal `rho`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Equicorr<T> {
    rho: T,
    d: usize,
}

impl<T: Real> Equicorr<T> {
    pub fn new(rho: T, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidParameter("output dimension must be ≥ 1".into()));
        }
        let (lo, hi) = Self::valid_range(d);
        let ok = rho.is_finite() && rho < hi && lo.is_none_or(|lo| rho > lo);
        if !ok {
            return Err(Error::InvalidParameter(format!(
                "equicorrelation {rho} outside the positive-definite range for d = {d}"
            )));
        }
        Ok(Self { rho, d })
    }

    /// Open interval of correlations giving a positive definite matrix.
    /// The lower bound is absent for `d = 1`.
    pub fn valid_range(d: usize) -> (Option<T>, T) {
        let lo = if d > 1 {
            Some(-T::one() / T::count(d - 1))
        } else {
            None
        };
        (lo, T::one())
    }

    pub fn rho(&self) -> T {
        self.rho
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn entry(&self, i: usize, j: usize) -> T {
        if i == j {
            T::one()
        } else {
            self.rho
        }
    }

    pub fn matrix(&self) -> DMatrix<T> {
        DMatrix::from_fn(self.d, self.d, |i, j| self.entry(i, j))
    }
}

/// Ordered set of `p`-dimensional points stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct Locations<T> {
    dim: usize,
    coords: Vec<T>,
}

impl<T: Real> Locations<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            coords: Vec::new(),
        }
    }

    /// Builds from a flat row-major buffer of `len · dim` coordinates.
    pub fn from_flat(dim: usize, coords: Vec<T>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("spatial dimension must be ≥ 1".into()));
        }
        if !coords.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: coords.len() % dim,
            });
        }
        Ok(Self { dim, coords })
    }

    pub fn from_points<P: AsRef<[T]>>(dim: usize, points: &[P]) -> Result<Self> {
        let mut out = Self::new(dim);
        for p in points {
            out.push(p.as_ref())?;
        }
        Ok(out)
    }

    pub fn push(&mut self, point: &[T]) -> Result<()> {
        if point.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: point.len(),
            });
        }
        self.coords.extend_from_slice(point);
        Ok(())
    }

    pub fn extend(&mut self, other: &Locations<T>) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: other.dim,
            });
        }
        self.coords.extend_from_slice(&other.coords);
        Ok(())
    }

    /// Removes the first `n` points.
    pub fn drop_front(&mut self, n: usize) {
        let n = n.min(self.len());
        self.coords.drain(..n * self.dim);
    }

    pub fn len(&self) -> usize {
        self.coords.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[T] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[T]> + '_ {
        self.coords.chunks_exact(self.dim.max(1))
    }

    pub fn as_flat(&self) -> &[T] {
        &self.coords
    }

    /// Mutable access to the raw coordinates; the point count cannot change.
    pub fn coords_mut(&mut self) -> &mut [T] {
        &mut self.coords
    }
}

/// Evaluates `k` at a pair of points.
pub fn rbf_eval<T: Real>(k: &RbfKernel<T>, x1: &[T], x2: &[T]) -> Result<T> {
    k.eval(x1, x2)
}

/// Kernel matrix with entry `(i, j) = k(z1_i, z2_j)`.
pub fn kernel_matrix<T: Real>(
    k: &RbfKernel<T>,
    z1: &Locations<T>,
    z2: &Locations<T>,
) -> Result<DMatrix<T>> {
    if z1.is_empty() || z2.is_empty() {
        return Err(Error::EmptyInput("kernel matrix needs non-empty location sets"));
    }
    if z1.dim() != z2.dim() {
        return Err(Error::DimensionMismatch {
            expected: z1.dim(),
            found: z2.dim(),
        });
    }
    Ok(DMatrix::from_fn(z1.len(), z2.len(), |i, j| {
        k.eval_unchecked(z1.point(i), z2.point(j))
    }))
}

/// Symmetric kernel matrix of a location set with itself; exactly symmetric.
pub fn gram_matrix<T: Real>(k: &RbfKernel<T>, z: &Locations<T>) -> Result<DMatrix<T>> {
    if z.is_empty() {
        return Err(Error::EmptyInput("kernel matrix needs non-empty location sets"));
    }
    let n = z.len();
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        out[(i, i)] = k.sigma0_sq();
        for j in 0..i {
            let v = k.eval_unchecked(z.point(i), z.point(j));
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}

/// `K ⊗ Ω` for a rectangular kernel matrix `K`.
pub fn kron_equicorr<T: Real>(k: &DMatrix<T>, omega: &Equicorr<T>) -> DMatrix<T> {
    let d = omega.dim();
    let (r, c) = k.shape();
    DMatrix::from_fn(r * d, c * d, |i, j| {
        k[(i / d, j / d)] * omega.entry(i % d, j % d)
    })
}

/// Observation covariance `K ⊗ Ω + σ² I` over the points spanned by `K`.
pub fn obs_covariance<T: Real>(k: &DMatrix<T>, omega: &Equicorr<T>, sigma_sq: T) -> Result<DMatrix<T>> {
    if !k.is_square() {
        return Err(Error::DimensionMismatch {
            expected: k.nrows(),
            found: k.ncols(),
        });
    }
    if sigma_sq < T::zero() || !sigma_sq.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "noise variance must be nonnegative, got {sigma_sq}"
        )));
    }
    let mut out = kron_equicorr(k, omega);
    for i in 0..out.nrows() {
        out[(i, i)] += sigma_sq;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Cholesky;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    fn unit() -> RbfKernel<f64> {
        RbfKernel::new(1.0, 1.0).unwrap()
    }

    #[test]
    fn rbf_closed_form_values() {
        let k = unit();
        assert_eq!(k.eval(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 1.0);
        let v = k.eval(&[0.0, 0.0], &[2f64.sqrt(), 0.0]).unwrap();
        assert!(close(v, (-1.0f64).exp(), 1e-15));
        assert!(close(v, 0.367879, 1e-6));

        let small = RbfKernel::new(0.01, 0.1).unwrap();
        let v = small.eval(&[0.0, 0.0], &[0.1, 0.0]).unwrap();
        // 0.01 * exp(-0.01 / 0.02)
        assert!(close(v, 0.01 * (-0.5f64).exp(), 1e-14));
        assert!(close(v, 0.006065306597126334, 1e-14));
    }

    #[test]
    fn rbf_rejects_dimension_mismatch() {
        assert!(matches!(
            unit().eval(&[0.0], &[0.0, 1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn kernel_rejects_bad_hyperparameters() {
        assert!(RbfKernel::new(0.0, 1.0).is_err());
        assert!(RbfKernel::new(1.0, -1.0).is_err());
        assert!(RbfKernel::new(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn equicorr_bounds() {
        assert!(Equicorr::new(0.3, 2).is_ok());
        assert!(Equicorr::new(-0.5, 3).is_err());
        assert!(Equicorr::new(-0.49, 3).is_ok());
        assert!(Equicorr::new(1.0, 2).is_err());
        assert!(Equicorr::new(-5.0, 1).is_ok());
        let m = Equicorr::new(0.25, 3).unwrap().matrix();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m[(i, j)], if i == j { 1.0 } else { 0.25 });
            }
        }
    }

    #[test]
    fn kernel_matrix_small_cases() {
        let k = RbfKernel::new(2.5, 1.0).unwrap();
        let one = Locations::from_points(2, &[[0.0, 0.0]]).unwrap();
        assert_eq!(kernel_matrix(&k, &one, &one).unwrap(), DMatrix::from_element(1, 1, 2.5));

        let dup = Locations::from_points(2, &[[0.3, 0.1], [0.3, 0.1]]).unwrap();
        let m = kernel_matrix(&k, &dup, &dup).unwrap();
        assert_eq!(m, DMatrix::from_element(2, 2, 2.5));
        assert_eq!(m.rank(1e-12), 1);

        let empty = Locations::<f64>::new(2);
        assert!(matches!(
            kernel_matrix(&k, &empty, &one),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn kernel_matrix_matches_pointwise_eval() {
        let k = RbfKernel::new(0.7, 0.4).unwrap();
        let pts: [[f64; 2]; 5] = [[0.1, 0.9], [-0.3, 0.2], [1.5, -1.1], [0.0, 0.0], [0.8, 0.8]];
        let z = Locations::from_points(2, &pts).unwrap();
        let m = kernel_matrix(&k, &z, &z).unwrap();
        let g = gram_matrix(&k, &z).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let sq: f64 = (0..2).map(|c| (pts[i][c] - pts[j][c]).powi(2)).sum();
                let want = 0.7 * (-sq / (2.0 * 0.16)).exp();
                assert!(close(m[(i, j)], want, 1e-14));
                assert!(close(g[(i, j)], want, 1e-14));
            }
        }
    }

    #[test]
    fn obs_covariance_collapsed_cases() {
        let k = DMatrix::from_element(1, 1, 1.0);
        let c = obs_covariance(&k, &Equicorr::new(0.0, 2).unwrap(), 0.5).unwrap();
        assert_eq!(c, DMatrix::from_row_slice(2, 2, &[1.5, 0.0, 0.0, 1.5]));
        let c = obs_covariance(&k, &Equicorr::new(0.3, 2).unwrap(), 0.0).unwrap();
        assert_eq!(c, DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]));
        assert!(obs_covariance(&k, &Equicorr::new(0.3, 2).unwrap(), -1.0).is_err());
    }

    #[test]
    fn obs_covariance_matches_brute_force_kronecker() {
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 0.9]);
        let om = Equicorr::new(-0.2, 2).unwrap();
        let c = obs_covariance(&k, &om, 0.1).unwrap();
        let o = [[1.0, -0.2], [-0.2, 1.0]];
        for a in 0..2 {
            for b in 0..2 {
                for i in 0..2 {
                    for j in 0..2 {
                        let mut want = k[(a, b)] * o[i][j];
                        if a == b && i == j {
                            want += 0.1;
                        }
                        assert!(close(c[(a * 2 + i, b * 2 + j)], want, 1e-15));
                    }
                }
            }
        }
        // nalgebra's kronecker uses the same (a, b) block layout
        let mut want = k.kronecker(&om.matrix());
        want += DMatrix::identity(4, 4) * 0.1;
        assert_eq!(c, want);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn rbf_symmetric_and_bounded(
            a in proptest::collection::vec(-5.0f64..5.0, 3),
            b in proptest::collection::vec(-5.0f64..5.0, 3),
            s in 0.01f64..4.0,
            l in 0.05f64..3.0,
        ) {
            let k = RbfKernel::new(s, l).unwrap();
            let ab = k.eval(&a, &b).unwrap();
            let ba = k.eval(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ab >= 0.0 && ab <= s);
            prop_assert_eq!(k.eval(&a, &a).unwrap(), s);
        }

        #[test]
        fn obs_covariance_symmetric_pd_and_block_consistent(
            pts in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 1..12),
            d in 1usize..4,
            rho_frac in 0.02f64..0.98,
            sigma_sq in 0.01f64..1.0,
        ) {
            let (lo, hi) = Equicorr::<f64>::valid_range(d);
            let lo = lo.unwrap_or(-1.0);
            let rho = lo + (hi - lo) * rho_frac;
            let om = Equicorr::new(rho, d).unwrap();
            let z = Locations::from_points(2, &pts.iter().map(|&(x, y)| [x, y]).collect::<Vec<_>>()).unwrap();
            let kern = RbfKernel::new(1.0, 0.8).unwrap();
            let k = gram_matrix(&kern, &z).unwrap();
            let c = obs_covariance(&k, &om, sigma_sq).unwrap();
            prop_assert_eq!(&c, &c.transpose());
            prop_assert!(Cholesky::new(c.clone()).is_some());
            let kx = kron_equicorr(&k, &om);
            for a in 0..z.len() {
                for b in 0..z.len() {
                    let block = kx.view((a * d, b * d), (d, d)).into_owned();
                    prop_assert_eq!(block, om.matrix() * k[(a, b)]);
                }
            }
        }
    }
}
