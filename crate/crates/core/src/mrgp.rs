//! Per-cluster multi-response GP model.
//!
//! A [`ClusterModel`] stores every observation assigned to one hidden state
//! together with the cached inverse `Λ = (K(Z, Z) ⊗ Ω(ρ) + σ² I)⁻¹`. New
//! frames extend `Λ` through a block Schur-complement update, so only the
//! `n_new · d` square block belonging to the new points is ever factorized.
//!
//! For univariate fields observed repeatedly at one fixed location set the
//! inverse is kept in spectral form instead (see [`SpectralInverse`]).

use std::borrow::Cow;
use std::collections::VecDeque;

use log::{debug, warn};
use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::kernel::{gram_matrix, kernel_matrix, kron_equicorr, obs_covariance, Equicorr, Locations, RbfKernel};
use crate::num::Real;

/// Margin kept between an estimated correlation and the edge of its valid range.
pub const RHO_MARGIN: f64 = 1e-6;

/// Relative diagonal jitter added to predictive covariances before factorization.
pub const PREDICTIVE_JITTER: f64 = 1e-9;

/// How the cross-output correlation of a cluster evolves as it absorbs frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RhoMode {
    /// Estimated once from the first frame and held fixed; `Λ` stays an exact inverse.
    #[default]
    Frozen,
    /// Re-estimated for every new block: the old block keeps its `Λ`, the
    /// cross block uses the previous estimate, the new block the fresh one.
    AppendixFaithful,
}

/// Hyperparameters shared by every cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct Mrgp<T> {
    pub kernel: RbfKernel<T>,
    pub sigma_sq: T,
    pub d: usize,
    pub rho_init: T,
    pub rho_mode: RhoMode,
    pub point_cap: Option<usize>,
    /// Allow the spectral fast path for `d = 1` clusters with repeated locations.
    pub spectral: bool,
}

impl<T: Real> Mrgp<T> {
    pub fn new(kernel: RbfKernel<T>, sigma_sq: T, d: usize) -> Result<Self> {
        if !(sigma_sq.is_finite() && sigma_sq > T::zero()) {
            return Err(Error::InvalidParameter(format!(
                "noise variance must be positive, got {sigma_sq}"
            )));
        }
        if d == 0 {
            return Err(Error::InvalidParameter("output dimension must be ≥ 1".into()));
        }
        Ok(Self {
            kernel,
            sigma_sq,
            d,
            rho_init: T::zero(),
            rho_mode: RhoMode::Frozen,
            point_cap: None,
            spectral: true,
        })
    }

    pub fn with_rho_init(mut self, rho: T) -> Result<Self> {
        Equicorr::new(rho, self.d)?;
        self.rho_init = rho;
        Ok(self)
    }

    pub fn with_rho_mode(mut self, mode: RhoMode) -> Self {
        self.rho_mode = mode;
        self
    }

    pub fn with_point_cap(mut self, cap: Option<usize>) -> Result<Self> {
        if cap == Some(0) {
            return Err(Error::InvalidParameter("cluster point cap must be ≥ 1".into()));
        }
        self.point_cap = cap;
        Ok(self)
    }

    pub fn with_spectral(mut self, enabled: bool) -> Self {
        self.spectral = enabled;
        self
    }

    fn omega(&self, rho: T) -> Result<Equicorr<T>> {
        Equicorr::new(rho, self.d)
    }

    fn jitter(&self) -> T {
        T::lit(PREDICTIVE_JITTER) * self.kernel.sigma0_sq()
    }

    fn check_frame(&self, frame: &Frame<T>, p: Option<usize>) -> Result<()> {
        frame.validate()?;
        if frame.dim() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                found: frame.dim(),
            });
        }
        if let Some(p) = p {
            if frame.locations.dim() != p {
                return Err(Error::DimensionMismatch {
                    expected: p,
                    found: frame.locations.dim(),
                });
            }
        }
        Ok(())
    }

    /// A cluster with no data, whose prior uses `rho_init`.
    pub fn empty_cluster(&self, created_at: usize) -> ClusterModel<T> {
        ClusterModel {
            locations: Locations::new(0),
            obs: DVector::zeros(0),
            frames: VecDeque::new(),
            inverse: Inverse::Empty,
            weights: DVector::zeros(0),
            rho: self.rho_init,
            frame_count: 0,
            created_at,
        }
    }

    /// Prior covariance of the field at `query`, `K(z, z) ⊗ Ω`.
    fn prior_cov(&self, query: &Locations<T>, rho: T) -> Result<DMatrix<T>> {
        let k = gram_matrix(&self.kernel, query)?;
        Ok(kron_equicorr(&k, &self.omega(rho)?))
    }

    /// Posterior mean (stacked) and covariance of the noiseless field at `query`.
    fn field_moments(&self, c: &ClusterModel<T>, query: &Locations<T>) -> Result<(DVector<T>, DMatrix<T>)> {
        if query.is_empty() {
            return Err(Error::EmptyInput("query locations"));
        }
        if !c.is_empty() && query.dim() != c.locations.dim() {
            return Err(Error::DimensionMismatch {
                expected: c.locations.dim(),
                found: query.dim(),
            });
        }
        if let Inverse::Rotated(rot) = &c.inverse {
            let (means, covs) = self.rotated_moments(rot, c, query)?;
            let d = self.d;
            let md = query.len() * d;
            let v = &rot.basis;
            let mean = DVector::from_fn(md, |r, _| {
                (0..d).fold(T::zero(), |acc, comp| acc + v[(r % d, comp)] * means[comp][r / d])
            });
            let mut cov = DMatrix::from_fn(md, md, |r, s| {
                let (i, a, j, b) = (r / d, r % d, s / d, s % d);
                (0..d).fold(T::zero(), |acc, comp| acc + v[(a, comp)] * v[(b, comp)] * covs[comp][(i, j)])
            });
            symmetrize(&mut cov);
            return Ok((mean, cov));
        }
        let mut cov = self.prior_cov(query, c.rho)?;
        let md = cov.nrows();
        match &c.inverse {
            Inverse::Empty => Ok((DVector::zeros(md), cov)),
            Inverse::Rotated(_) => unreachable!("handled above"),
            Inverse::Dense(lambda) => {
                let cross = kron_equicorr(&kernel_matrix(&self.kernel, query, &c.locations)?, &self.omega(c.rho)?);
                let mean = &cross * &c.weights;
                let cl = &cross * lambda;
                let explained = &cl * cross.transpose();
                cov -= explained;
                symmetrize(&mut cov);
                Ok((mean, cov))
            }
            Inverse::Spectral(spec) => {
                let n = spec.base_len();
                let base = base_locations(&c.locations, n);
                let cb = kernel_matrix(&self.kernel, query, &base)?;
                let reps = T::count(spec.repeats);
                let mut wsum = DVector::zeros(n);
                for r in 0..spec.repeats {
                    wsum += c.weights.rows(r * n, n);
                }
                let mean = &cb * wsum;
                let cv = &cb * &spec.eigenvectors;
                let dscaled = DMatrix::from_diagonal(&spec.diagonal());
                let low = &cv * dscaled * cv.transpose() * reps;
                let direct = &cb * cb.transpose() * (reps / spec.sigma_sq);
                cov -= low + direct;
                symmetrize(&mut cov);
                Ok((mean, cov))
            }
        }
    }

    /// Posterior of the field at `query` given everything absorbed by `c`.
    /// With `noise`, the covariance is that of a fresh noisy observation.
    pub fn posterior_field(&self, c: &ClusterModel<T>, query: &Locations<T>, noise: bool) -> Result<FieldEstimate<T>> {
        let (mean, mut cov) = self.field_moments(c, query)?;
        if noise {
            add_diagonal(&mut cov, self.sigma_sq);
        }
        let m = query.len();
        let d = self.d;
        Ok(FieldEstimate {
            mean: DMatrix::from_fn(m, d, |i, j| mean[i * d + j]),
            cov,
        })
    }

    /// Log predictive density of the frame's stacked velocities under the
    /// cluster. An empty cluster gives the prior marginal likelihood.
    pub fn predictive_loglik(&self, c: &ClusterModel<T>, frame: &Frame<T>) -> Result<T> {
        self.check_frame(frame, (!c.is_empty()).then(|| c.locations.dim()))?;
        let noise = self.sigma_sq + self.jitter();
        if let Inverse::Rotated(rot) = &c.inverse {
            // The rotation is orthogonal, so the density factorizes over components.
            let (means, covs) = self.rotated_moments(rot, c, &frame.locations)?;
            let ys = rotate(&frame.stacked(), &rot.basis);
            let mut total = T::zero();
            for ((y, mean), mut cov) in ys.iter().zip(&means).zip(covs) {
                add_diagonal(&mut cov, noise);
                total += gaussian_logpdf(y, mean, cov)?;
            }
            return Ok(total);
        }
        let (mean, mut cov) = self.field_moments(c, &frame.locations)?;
        add_diagonal(&mut cov, noise);
        gaussian_logpdf(&frame.stacked(), &mean, cov)
    }

    /// Per-component posterior mean and covariance in the eigenbasis of `Ω`.
    fn rotated_moments(
        &self,
        rot: &RotatedInverse<T>,
        c: &ClusterModel<T>,
        query: &Locations<T>,
    ) -> Result<ComponentMoments<T>> {
        let kq = kernel_matrix(&self.kernel, query, &c.locations)?;
        let kqq = gram_matrix(&self.kernel, query)?;
        let mut means = Vec::with_capacity(self.d);
        let mut covs = Vec::with_capacity(self.d);
        for comp in 0..self.d {
            let e = rot.scales[comp];
            means.push(&kq * &rot.weights[comp] * e);
            let kb = &kq * &rot.blocks[comp];
            let mut cov = &kqq * e - (kb * kq.transpose()) * (e * e);
            symmetrize(&mut cov);
            covs.push(cov);
        }
        Ok((means, covs))
    }

    /// Moment-matched correlation from one frame with mean field `xbar`
    /// (stacked like the frame).
    pub fn estimate_rho(&self, frame: &Frame<T>, xbar: &DVector<T>) -> Result<RhoEstimate<T>> {
        self.check_frame(frame, None)?;
        let d = self.d;
        if d == 1 {
            return Ok(RhoEstimate {
                rho: T::zero(),
                raw: None,
                applicable: false,
            });
        }
        let x = frame.stacked();
        if xbar.len() != x.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                found: xbar.len(),
            });
        }
        let k = gram_matrix(&self.kernel, &frame.locations)?;
        let nd = x.len();
        let y = x - xbar;
        let scale = T::one() / T::count(nd);
        let a = DMatrix::from_fn(nd, nd, |i, j| {
            if i % d == j % d {
                T::zero()
            } else {
                k[(i / d, j / d)]
            }
        });
        let b = DMatrix::from_fn(nd, nd, |i, j| {
            let mut v = y[i] * y[j] * scale;
            if i == j {
                v -= self.sigma_sq;
            }
            if i % d == j % d {
                v -= k[(i / d, j / d)];
            }
            v
        });
        Ok(match rho_moment_match(&a, &b) {
            Some(raw) => RhoEstimate {
                rho: clamp_rho(raw, d),
                raw: Some(raw),
                applicable: true,
            },
            None => RhoEstimate {
                rho: T::zero(),
                raw: None,
                applicable: false,
            },
        })
    }

    /// Per-point mean over every absorbed observation at a coincident location,
    /// the frame's own observation included.
    pub fn running_mean(&self, c: &ClusterModel<T>, frame: &Frame<T>) -> DVector<T> {
        let d = self.d;
        let x = frame.stacked();
        let mut out = x.clone();
        for i in 0..frame.len() {
            let zi = frame.locations.point(i);
            let mut count = 1usize;
            let mut sum: Vec<T> = (0..d).map(|c| x[i * d + c]).collect();
            for (j, zj) in c.locations.iter().enumerate() {
                if zj == zi {
                    count += 1;
                    for (comp, s) in sum.iter_mut().enumerate() {
                        *s += c.obs[j * d + comp];
                    }
                }
            }
            for (comp, s) in sum.into_iter().enumerate() {
                out[i * d + comp] = s / T::count(count);
            }
        }
        out
    }

    fn dense_inverse(&self, locations: &Locations<T>, rho: T) -> Result<DMatrix<T>> {
        let k = gram_matrix(&self.kernel, locations)?;
        let cov = obs_covariance(&k, &self.omega(rho)?, self.sigma_sq)?;
        spd_inverse(cov, "observation covariance")
    }

    /// Absorbs a frame into the cluster, extending `Λ` by a Schur-complement
    /// block update.
    pub fn schur_extend(&self, c: &ClusterModel<T>, frame: &Frame<T>) -> Result<ClusterModel<T>> {
        self.check_frame(frame, (!c.is_empty()).then(|| c.locations.dim()))?;
        let d = self.d;
        let x_new = frame.stacked();

        if c.is_empty() {
            let rho = if d > 1 {
                self.estimate_rho(frame, &DVector::zeros(x_new.len()))?.rho
            } else {
                T::zero()
            };
            let inverse = if self.spectral && d == 1 {
                let k = gram_matrix(&self.kernel, &frame.locations)?;
                Inverse::Spectral(SpectralInverse::from_kernel_matrix(k, 1, self.sigma_sq)?)
            } else if self.rho_mode == RhoMode::Frozen || d == 1 {
                Inverse::Rotated(self.rotated_inverse(&frame.locations, rho)?)
            } else {
                Inverse::Dense(self.dense_inverse(&frame.locations, rho)?)
            };
            let mut out = ClusterModel {
                locations: frame.locations.clone(),
                obs: x_new,
                frames: VecDeque::from([frame.len()]),
                inverse,
                weights: DVector::zeros(0),
                rho,
                frame_count: 1,
                created_at: c.created_at,
            };
            out.refresh_weights();
            return Ok(out);
        }

        let mut locations = c.locations.clone();
        locations.extend(&frame.locations)?;
        let mut obs = DVector::zeros(c.obs.len() + x_new.len());
        obs.rows_mut(0, c.obs.len()).copy_from(&c.obs);
        obs.rows_mut(c.obs.len(), x_new.len()).copy_from(&x_new);
        let mut frames = c.frames.clone();
        frames.push_back(frame.len());

        let (inverse, rho) = match &c.inverse {
            Inverse::Spectral(spec)
                if frame.len() == spec.base_len()
                    && frame.locations.as_flat() == base_locations(&c.locations, spec.base_len()).as_flat() =>
            {
                (Inverse::Spectral(spec.with_repeats(spec.repeats + 1)), c.rho)
            }
            Inverse::Dense(lambda_old) => {
                let rho_new = match self.rho_mode {
                    RhoMode::AppendixFaithful if d > 1 => {
                        let xbar = self.running_mean(c, frame);
                        self.estimate_rho(frame, &xbar)?.rho
                    }
                    _ => c.rho,
                };
                let a12 = kron_equicorr(
                    &kernel_matrix(&self.kernel, &c.locations, &frame.locations)?,
                    &self.omega(c.rho)?,
                );
                let a22 = obs_covariance(
                    &gram_matrix(&self.kernel, &frame.locations)?,
                    &self.omega(rho_new)?,
                    self.sigma_sq,
                )?;
                let lambda = match schur_block_update(lambda_old, &a12, a22) {
                    Ok(l) => l,
                    Err(e) => {
                        warn!("Schur block update failed ({e}); re-inverting the full covariance densely");
                        self.dense_inverse(&locations, rho_new)?
                    }
                };
                (Inverse::Dense(lambda), rho_new)
            }
            Inverse::Rotated(rot) => (
                Inverse::Rotated(self.rotated_extend(rot, &c.locations, &frame.locations, &locations)?),
                c.rho,
            ),
            Inverse::Spectral(spec) => {
                let rot = RotatedInverse::univariate(spec.to_dense());
                (
                    Inverse::Rotated(self.rotated_extend(&rot, &c.locations, &frame.locations, &locations)?),
                    c.rho,
                )
            }
            Inverse::Empty => unreachable!("empty clusters are handled above"),
        };

        let mut out = ClusterModel {
            locations,
            obs,
            frames,
            inverse,
            weights: DVector::zeros(0),
            rho,
            frame_count: c.frame_count + 1,
            created_at: c.created_at,
        };
        if let Some(cap) = self.point_cap {
            if out.len() > cap && out.frames.len() > 1 {
                self.enforce_cap(&mut out, cap)?;
            }
        }
        out.refresh_weights();
        Ok(out)
    }

    /// `Λ` in the eigenbasis of `Ω(ρ)`, one inverted block per component.
    fn rotated_inverse(&self, locations: &Locations<T>, rho: T) -> Result<RotatedInverse<T>> {
        let k = gram_matrix(&self.kernel, locations)?;
        let (basis, scales) = equicorr_eigen(rho, self.d);
        let blocks = scales
            .iter()
            .map(|&e| self.component_inverse(&k, e))
            .collect::<Result<Vec<_>>>()?;
        Ok(RotatedInverse {
            basis,
            scales,
            blocks,
            weights: Vec::new(),
        })
    }

    fn component_inverse(&self, k: &DMatrix<T>, e: T) -> Result<DMatrix<T>> {
        let mut cov = k * e;
        add_diagonal(&mut cov, self.sigma_sq);
        spd_inverse(cov, "observation covariance")
    }

    fn rotated_extend(
        &self,
        rot: &RotatedInverse<T>,
        z_old: &Locations<T>,
        z_new: &Locations<T>,
        z_all: &Locations<T>,
    ) -> Result<RotatedInverse<T>> {
        let k12 = kernel_matrix(&self.kernel, z_old, z_new)?;
        let k22 = gram_matrix(&self.kernel, z_new)?;
        let mut blocks = Vec::with_capacity(self.d);
        for (block, &e) in rot.blocks.iter().zip(rot.scales.iter()) {
            let mut a22 = &k22 * e;
            add_diagonal(&mut a22, self.sigma_sq);
            let updated = match schur_block_update(block, &(&k12 * e), a22) {
                Ok(l) => l,
                Err(err) => {
                    warn!("Schur block update failed ({err}); re-inverting the full covariance densely");
                    self.component_inverse(&gram_matrix(&self.kernel, z_all)?, e)?
                }
            };
            blocks.push(updated);
        }
        Ok(RotatedInverse {
            basis: rot.basis.clone(),
            scales: rot.scales.clone(),
            blocks,
            weights: Vec::new(),
        })
    }

    /// Drops the oldest frames until at most `cap` points remain (the newest
    /// frame is always kept) and rebuilds the inverse.
    fn enforce_cap(&self, c: &mut ClusterModel<T>, cap: usize) -> Result<()> {
        let mut drop_points = 0usize;
        let mut dropped_frames = 0usize;
        let mut total = c.len();
        while total > cap && c.frames.len() > 1 {
            let n = c.frames.pop_front().expect("len > 1");
            total -= n;
            drop_points += n;
            dropped_frames += 1;
        }
        debug!("cluster cap {cap}: dropped {dropped_frames} frames ({drop_points} points)");
        c.locations.drop_front(drop_points);
        let d = self.d;
        c.obs = c.obs.rows(drop_points * d, c.obs.len() - drop_points * d).into_owned();
        c.inverse = match &c.inverse {
            Inverse::Spectral(spec) => Inverse::Spectral(spec.with_repeats(spec.repeats - dropped_frames)),
            Inverse::Rotated(_) => Inverse::Rotated(self.rotated_inverse(&c.locations, c.rho)?),
            _ => Inverse::Dense(self.dense_inverse(&c.locations, c.rho)?),
        };
        Ok(())
    }
}

/// Result of the moment-matching correlation estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhoEstimate<T> {
    /// Clamped estimate, always a valid equicorrelation.
    pub rho: T,
    /// Unclamped least-squares value, absent when not applicable.
    pub raw: Option<T>,
    /// False when `d = 1` (no off-diagonal structure to match).
    pub applicable: bool,
}

/// Minimizer of `‖ρA − B‖_F`, `Σ A_ij B_ij / Σ A_ij²`; `None` when `A = 0`.
pub fn rho_moment_match<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> Option<T> {
    let den = a.iter().fold(T::zero(), |acc, &v| acc + v * v);
    if den == T::zero() {
        return None;
    }
    let num = a.iter().zip(b.iter()).fold(T::zero(), |acc, (&u, &v)| acc + u * v);
    Some(num / den)
}

/// Clamps into `(−1/(d−1) + ε, 1 − ε)`.
pub fn clamp_rho<T: Real>(raw: T, d: usize) -> T {
    let eps = T::lit(RHO_MARGIN);
    let (lo, hi) = Equicorr::<T>::valid_range(d);
    let hi = hi - eps;
    let mut v = if raw > hi { hi } else { raw };
    if let Some(lo) = lo {
        let lo = lo + eps;
        if v < lo {
            v = lo;
        }
    }
    v
}

#[derive(Debug, Clone, PartialEq)]
enum Inverse<T> {
    Empty,
    Dense(DMatrix<T>),
    Rotated(RotatedInverse<T>),
    Spectral(SpectralInverse<T>),
}

/// `Λ` of a cluster with fixed `ρ`, kept in the eigenbasis `Ω = V diag(e) Vᵀ`
/// where it splits into one `N × N` block `(e_c K + σ² I)⁻¹` per component.
#[derive(Debug, Clone, PartialEq)]
struct RotatedInverse<T> {
    basis: DMatrix<T>,
    scales: DVector<T>,
    blocks: Vec<DMatrix<T>>,
    /// `blocks[c]` applied to the rotated observations of component `c`.
    weights: Vec<DVector<T>>,
}

impl<T: Real> RotatedInverse<T> {
    fn univariate(lambda: DMatrix<T>) -> Self {
        Self {
            basis: DMatrix::identity(1, 1),
            scales: DVector::from_element(1, T::one()),
            blocks: vec![lambda],
            weights: Vec::new(),
        }
    }

    fn to_dense(&self) -> DMatrix<T> {
        let d = self.basis.nrows();
        let n = self.blocks[0].nrows();
        let v = &self.basis;
        let mut m = DMatrix::from_fn(n * d, n * d, |r, s| {
            let (i, a, j, b) = (r / d, r % d, s / d, s % d);
            (0..d).fold(T::zero(), |acc, c| acc + v[(a, c)] * v[(b, c)] * self.blocks[c][(i, j)])
        });
        symmetrize(&mut m);
        m
    }
}

type ComponentMoments<T> = (Vec<DVector<T>>, Vec<DMatrix<T>>);

/// Orthonormal eigenvectors (columns) and eigenvalues of the equicorrelation
/// matrix: `𝟙/√d` with `1 + (d−1)ρ`, then a Helmert basis with `1 − ρ`.
fn equicorr_eigen<T: Real>(rho: T, d: usize) -> (DMatrix<T>, DVector<T>) {
    let mut basis = DMatrix::zeros(d, d);
    let mut scales = DVector::zeros(d);
    let inv_sqrt_d = T::one() / T::count(d).sqrt();
    for a in 0..d {
        basis[(a, 0)] = inv_sqrt_d;
    }
    scales[0] = T::one() + T::count(d - 1) * rho;
    for k in 1..d {
        let norm = T::one() / T::count(k * (k + 1)).sqrt();
        for a in 0..k {
            basis[(a, k)] = norm;
        }
        basis[(k, k)] = -T::count(k) * norm;
        scales[k] = T::one() - rho;
    }
    (basis, scales)
}

/// Splits a location-major stacked vector into its components in `basis`.
fn rotate<T: Real>(x: &DVector<T>, basis: &DMatrix<T>) -> Vec<DVector<T>> {
    let d = basis.nrows();
    let n = x.len() / d;
    (0..d)
        .map(|c| DVector::from_fn(n, |i, _| (0..d).fold(T::zero(), |acc, a| acc + x[i * d + a] * basis[(a, c)])))
        .collect()
}

/// Extends `Λ = A11⁻¹` to the inverse of `[[A11, A12], [A12ᵀ, A22]]`.
fn schur_block_update<T: Real>(lambda_old: &DMatrix<T>, a12: &DMatrix<T>, a22: DMatrix<T>) -> Result<DMatrix<T>> {
    let p = lambda_old * a12;
    let mut schur = a22 - a12.tr_mul(&p);
    symmetrize(&mut schur);
    let lambda22 = spd_inverse(schur, "Schur complement block")?;
    let q = &p * &lambda22;
    let old = lambda_old.nrows();
    let new = lambda22.nrows();
    let mut out = DMatrix::zeros(old + new, old + new);
    let mut top_left = lambda_old + &q * p.transpose();
    symmetrize(&mut top_left);
    out.view_mut((0, 0), (old, old)).copy_from(&top_left);
    out.view_mut((0, old), (old, new)).copy_from(&(-&q));
    out.view_mut((old, 0), (new, old)).copy_from(&(-q.transpose()));
    out.view_mut((old, old), (new, new)).copy_from(&lambda22);
    Ok(out)
}

/// Observations and cached inverse covariance of one discovered pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel<T> {
    locations: Locations<T>,
    obs: DVector<T>,
    frames: VecDeque<usize>,
    inverse: Inverse<T>,
    weights: DVector<T>,
    rho: T,
    frame_count: usize,
    created_at: usize,
}

impl<T: Real> ClusterModel<T> {
    fn refresh_weights(&mut self) {
        self.weights = match &self.inverse {
            Inverse::Empty => DVector::zeros(0),
            Inverse::Dense(l) => l * &self.obs,
            Inverse::Rotated(_) => DVector::zeros(0),
            Inverse::Spectral(s) => s.apply(&self.obs),
        };
        if let Inverse::Rotated(rot) = &mut self.inverse {
            let ys = rotate(&self.obs, &rot.basis);
            rot.weights = rot.blocks.iter().zip(&ys).map(|(b, y)| b * y).collect();
        }
    }

    /// All absorbed locations, oldest first.
    pub fn locations(&self) -> &Locations<T> {
        &self.locations
    }

    /// Stacked observations aligned with [`Self::locations`].
    pub fn obs(&self) -> &DVector<T> {
        &self.obs
    }

    /// `Λ`, materialized from the spectral form when necessary.
    pub fn lambda(&self) -> Option<Cow<'_, DMatrix<T>>> {
        match &self.inverse {
            Inverse::Empty => None,
            Inverse::Dense(l) => Some(Cow::Borrowed(l)),
            Inverse::Rotated(r) => Some(Cow::Owned(r.to_dense())),
            Inverse::Spectral(s) => Some(Cow::Owned(s.to_dense())),
        }
    }

    pub fn spectral(&self) -> Option<&SpectralInverse<T>> {
        match &self.inverse {
            Inverse::Spectral(s) => Some(s),
            _ => None,
        }
    }

    pub fn rho(&self) -> T {
        self.rho
    }

    /// Frames absorbed since creation, including any dropped by the point cap.
    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    /// Point counts of the frames currently retained, oldest first.
    pub fn retained_frames(&self) -> impl ExactSizeIterator<Item = usize> + '_ {
        self.frames.iter().copied()
    }

    pub fn created_at(&self) -> usize {
        self.created_at
    }

    /// Number of retained points.
    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Posterior of the field at `m` query points.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldEstimate<T> {
    /// `m × d` posterior mean velocities.
    pub mean: DMatrix<T>,
    /// `md × md` covariance, location-major.
    pub cov: DMatrix<T>,
}

impl<T: Real> FieldEstimate<T> {
    /// Marginal posterior standard deviations, `m × d`.
    pub fn marginal_sd(&self) -> DMatrix<T> {
        let (m, d) = self.mean.shape();
        DMatrix::from_fn(m, d, |i, j| {
            let v = self.cov[(i * d + j, i * d + j)];
            if v > T::zero() {
                v.sqrt()
            } else {
                T::zero()
            }
        })
    }
}

/// Structured inverse `UDUᵀ + σ⁻² I` of `𝟙𝟙ᵀ ⊗ K + σ² I` for a univariate
/// field observed `repeats` times at the same `N` locations.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralInverse<T> {
    pub eigenvalues: DVector<T>,
    /// Columns are orthonormal eigenvectors of `K`.
    pub eigenvectors: DMatrix<T>,
    pub repeats: usize,
    pub sigma_sq: T,
}

/// Builds the structured inverse from the eigenpairs of the `N × N` kernel matrix.
pub fn spectral_inverse<T: Real>(
    eigenvalues: DVector<T>,
    eigenvectors: DMatrix<T>,
    repeat_count: usize,
    sigma_sq: T,
) -> Result<SpectralInverse<T>> {
    if sigma_sq.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::InvalidParameter(format!(
            "spectral inverse needs positive noise variance, got {sigma_sq}"
        )));
    }
    if repeat_count == 0 {
        return Err(Error::InvalidParameter("repeat count must be ≥ 1".into()));
    }
    if eigenvectors.nrows() != eigenvalues.len() || !eigenvectors.is_square() {
        return Err(Error::DimensionMismatch {
            expected: eigenvalues.len(),
            found: eigenvectors.nrows(),
        });
    }
    Ok(SpectralInverse {
        eigenvalues,
        eigenvectors,
        repeats: repeat_count,
        sigma_sq,
    })
}

impl<T: Real> SpectralInverse<T> {
    pub fn from_kernel_matrix(k: DMatrix<T>, repeat_count: usize, sigma_sq: T) -> Result<Self> {
        let eig = SymmetricEigen::new(k);
        spectral_inverse(eig.eigenvalues, eig.eigenvectors, repeat_count, sigma_sq)
    }

    fn with_repeats(&self, repeats: usize) -> Self {
        Self {
            repeats,
            ..self.clone()
        }
    }

    pub fn base_len(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Total dimension `N · N_k`.
    pub fn dim(&self) -> usize {
        self.base_len() * self.repeats
    }

    /// Diagonal of `D`: `−N_k λ_i / (σ² (N_k λ_i + σ²))`.
    pub fn diagonal(&self) -> DVector<T> {
        let nk = T::count(self.repeats);
        let s2 = self.sigma_sq;
        self.eigenvalues.map(|l| -(nk * l) / (s2 * (nk * l + s2)))
    }

    /// `U` with columns `𝟙 ⊗ v_i / √N_k`.
    pub fn u_matrix(&self) -> DMatrix<T> {
        let n = self.base_len();
        let scale = T::one() / T::count(self.repeats).sqrt();
        DMatrix::from_fn(self.dim(), n, |r, i| self.eigenvectors[(r % n, i)] * scale)
    }

    /// Eigenvalues of the covariance the inverse belongs to: `N_k λ_i + σ²`
    /// once each, then `σ²` with multiplicity `N · N_k − N`.
    pub fn covariance_eigenvalues(&self) -> Vec<T> {
        let nk = T::count(self.repeats);
        let mut out: Vec<T> = self.eigenvalues.iter().map(|&l| nk * l + self.sigma_sq).collect();
        out.extend(std::iter::repeat_n(self.sigma_sq, self.dim() - self.base_len()));
        out
    }

    /// Applies the inverse to a vector of length `N · N_k` without forming it.
    pub fn apply(&self, x: &DVector<T>) -> DVector<T> {
        let n = self.base_len();
        assert_eq!(x.len(), self.dim(), "spectral inverse applied to wrong length");
        let mut sum = DVector::zeros(n);
        for r in 0..self.repeats {
            sum += x.rows(r * n, n);
        }
        let proj = self.eigenvectors.tr_mul(&sum);
        let scaled = proj.component_mul(&self.diagonal());
        let back = &self.eigenvectors * scaled / T::count(self.repeats);
        let mut out = x / self.sigma_sq;
        for r in 0..self.repeats {
            let mut block = out.rows_mut(r * n, n);
            block += &back;
        }
        out
    }

    /// Dense `UDUᵀ + σ⁻² I`.
    pub fn to_dense(&self) -> DMatrix<T> {
        let n = self.base_len();
        let block = &self.eigenvectors * DMatrix::from_diagonal(&self.diagonal()) * self.eigenvectors.transpose()
            / T::count(self.repeats);
        let inv_s2 = T::one() / self.sigma_sq;
        let mut m = DMatrix::from_fn(self.dim(), self.dim(), |i, j| {
            let v = block[(i % n, j % n)];
            if i == j {
                v + inv_s2
            } else {
                v
            }
        });
        symmetrize(&mut m);
        m
    }
}

fn base_locations<T: Real>(all: &Locations<T>, n: usize) -> Locations<T> {
    Locations::from_flat(all.dim(), all.as_flat()[..n * all.dim()].to_vec()).expect("prefix of valid locations")
}

fn symmetrize<T: Real>(m: &mut DMatrix<T>) {
    let n = m.nrows();
    let half = T::lit(0.5);
    for j in 0..n {
        for i in 0..j {
            let v = (m[(i, j)] + m[(j, i)]) * half;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

fn add_diagonal<T: Real>(m: &mut DMatrix<T>, v: T) {
    for i in 0..m.nrows() {
        m[(i, i)] += v;
    }
}

fn spd_inverse<T: Real>(m: DMatrix<T>, what: &'static str) -> Result<DMatrix<T>> {
    let chol = Cholesky::new(m).ok_or(Error::NotPositiveDefinite(what))?;
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

/// `log N(x | mean, cov)` through a Cholesky factorization.
pub fn gaussian_logpdf<T: Real>(x: &DVector<T>, mean: &DVector<T>, cov: DMatrix<T>) -> Result<T> {
    let n = x.len();
    let chol = Cholesky::new(cov).ok_or(Error::NotPositiveDefinite("predictive covariance"))?;
    let r = x - mean;
    let y = chol
        .l_dirty()
        .solve_lower_triangular(&r)
        .ok_or(Error::NotPositiveDefinite("predictive covariance"))?;
    let l = chol.l_dirty();
    let logdet_half = (0..n).fold(T::zero(), |acc, i| acc + l[(i, i)].ln());
    let half = T::lit(0.5);
    let log2pi = (T::two_pi()).ln();
    Ok(-half * y.norm_squared() - logdet_half - half * T::count(n) * log2pi)
}
