//! One-pass sequential MAP estimation of the infinite HMM over GP fields.
//!
//! Each frame is scored against every discovered cluster and against a fresh
//! cluster drawn from the prior; the MAP state and oracle indicator are then
//! committed and the chosen cluster absorbs the frame. Scoring fans out over
//! clusters in parallel and is reduced in cluster order, so results do not
//! depend on the thread count.

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::ihmm::{state_posterior, HmmCounts, StateDecision, TransitionMatrix};
use crate::kernel::{Equicorr, RbfKernel};
use crate::mrgp::{ClusterModel, Mrgp, RhoMode};
use crate::num::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig<T> {
    pub alpha: T,
    pub gamma: T,
    /// Observation noise variance σ².
    pub sigma_sq: T,
    pub kernel: RbfKernel<T>,
    pub rho_init: T,
    pub rho_mode: RhoMode,
    pub cluster_point_cap: Option<usize>,
    /// Output (velocity) dimension.
    pub d: usize,
    /// Spatial dimension.
    pub p: usize,
    /// Score clusters on the rayon pool.
    pub parallel: bool,
}

impl<T: Real> EngineConfig<T> {
    /// Defaults for planar velocity fields: `α = γ = 1`, `ρ_init = 0`, frozen ρ.
    pub fn planar(sigma_sq: T, kernel: RbfKernel<T>) -> Self {
        Self {
            alpha: T::one(),
            gamma: T::one(),
            sigma_sq,
            kernel,
            rho_init: T::zero(),
            rho_mode: RhoMode::Frozen,
            cluster_point_cap: None,
            d: 2,
            p: 2,
            parallel: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("gamma", self.gamma), ("sigma_sq", self.sigma_sq)] {
            if !(v.is_finite() && v > T::zero()) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if self.d == 0 || self.p == 0 {
            return Err(Error::InvalidParameter("dimensions must be ≥ 1".into()));
        }
        if self.cluster_point_cap == Some(0) {
            return Err(Error::InvalidParameter("cluster point cap must be ≥ 1".into()));
        }
        Equicorr::new(self.rho_init, self.d)?;
        Ok(())
    }

    pub fn mrgp(&self) -> Result<Mrgp<T>> {
        Mrgp::new(self.kernel, self.sigma_sq, self.d)?
            .with_rho_init(self.rho_init)?
            .with_rho_mode(self.rho_mode)
            .with_point_cap(self.cluster_point_cap)
    }
}

/// Serializable echo of a configuration, for manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSummary {
    pub alpha: f64,
    pub gamma: f64,
    pub sigma_sq: f64,
    pub sigma0_sq: f64,
    pub lengthscale: f64,
    pub rho_init: f64,
    pub rho_mode: RhoMode,
    pub cluster_point_cap: Option<usize>,
    pub d: usize,
    pub p: usize,
}

impl<T: Real> From<&EngineConfig<T>> for ConfigSummary {
    fn from(c: &EngineConfig<T>) -> Self {
        Self {
            alpha: c.alpha.as_f64(),
            gamma: c.gamma.as_f64(),
            sigma_sq: c.sigma_sq.as_f64(),
            sigma0_sq: c.kernel.sigma0_sq().as_f64(),
            lengthscale: c.kernel.lengthscale().as_f64(),
            rho_init: c.rho_init.as_f64(),
            rho_mode: c.rho_mode,
            cluster_point_cap: c.cluster_point_cap,
            d: c.d,
            p: c.p,
        }
    }
}

/// Per-frame outcome of the estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Assignment<T> {
    pub t: usize,
    /// 0-based state index.
    pub state: usize,
    pub oracle: bool,
    /// Predictive log-density of the frame under the chosen cluster at decision time.
    pub loglik: T,
}

/// History of the run so far plus the live cluster models.
#[derive(Debug, Clone)]
pub struct EngineState<T> {
    pub counts: HmmCounts<T>,
    pub clusters: Vec<ClusterModel<T>>,
    pub step: usize,
    pub s_hist: Vec<usize>,
    pub o_hist: Vec<bool>,
    pub step_logliks: Vec<T>,
    pub loglik_sum: T,
    /// Likelihood evaluations that failed to factorize and were scored −∞.
    pub degenerate_evaluations: usize,
}

pub struct Engine<T: Real> {
    config: EngineConfig<T>,
    mrgp: Mrgp<T>,
    state: EngineState<T>,
}

impl<T: Real> Engine<T> {
    /// Starts a run: the first frame founds state 0 through the oracle.
    pub fn init(config: EngineConfig<T>, first: &Frame<T>) -> Result<Self> {
        config.validate()?;
        let mrgp = config.mrgp()?;
        check_dims(&config, first)?;
        let empty = mrgp.empty_cluster(first.t);
        let loglik = mrgp.predictive_loglik(&empty, first)?;
        let cluster = mrgp.schur_extend(&empty, first)?;
        let state = EngineState {
            counts: HmmCounts::new(config.alpha, config.gamma)?,
            clusters: vec![cluster],
            step: 1,
            s_hist: vec![0],
            o_hist: vec![true],
            step_logliks: vec![loglik],
            loglik_sum: loglik,
            degenerate_evaluations: 0,
        };
        Ok(Self { config, mrgp, state })
    }

    pub fn config(&self) -> &EngineConfig<T> {
        &self.config
    }

    pub fn mrgp(&self) -> &Mrgp<T> {
        &self.mrgp
    }

    pub fn state(&self) -> &EngineState<T> {
        &self.state
    }

    /// Predictive log-likelihood of the frame under every cluster, then under a
    /// new prior cluster; failed factorizations score −∞.
    pub fn candidate_logliks(&self, frame: &Frame<T>) -> Result<(Vec<T>, usize)> {
        let score = |c: &ClusterModel<T>| match self.mrgp.predictive_loglik(c, frame) {
            Ok(v) => Ok(Some(v)),
            Err(e) if e.is_numerical() => Ok(None),
            Err(e) => Err(e),
        };
        let new = self.mrgp.empty_cluster(frame.t);
        let scored: Vec<Result<Option<T>>> = if self.config.parallel && self.state.clusters.len() > 1 {
            self.state
                .clusters
                .par_iter()
                .chain(rayon::iter::once(&new))
                .map(score)
                .collect()
        } else {
            self.state.clusters.iter().chain(std::iter::once(&new)).map(score).collect()
        };
        let mut degenerate = 0;
        let mut out = Vec::with_capacity(scored.len());
        for (j, r) in scored.into_iter().enumerate() {
            match r? {
                Some(v) => out.push(v),
                None => {
                    warn!("frame {}: predictive covariance of candidate {j} is degenerate", frame.t);
                    degenerate += 1;
                    out.push(-T::lit(f64::INFINITY));
                }
            }
        }
        Ok((out, degenerate))
    }

    /// Processes one frame and commits the MAP decision.
    pub fn step(&mut self, frame: &Frame<T>) -> Result<StateDecision<T>> {
        check_dims(&self.config, frame)?;
        let prior = self.state.counts.transition_prior();
        let (logliks, degenerate) = self.candidate_logliks(frame)?;
        self.state.degenerate_evaluations += degenerate;
        let (posterior, state) = state_posterior(&prior, &logliks)?;
        let k = self.state.counts.k_tilde();
        let p_oracle = self.state.counts.oracle_posterior(state)?;
        // argmax over {0, 1}; ties go to 0
        let oracle = p_oracle > T::one() - p_oracle;
        self.state.counts.update(state, oracle)?;

        let cluster = if state == k {
            self.mrgp.schur_extend(&self.mrgp.empty_cluster(frame.t), frame)?
        } else {
            self.mrgp.schur_extend(&self.state.clusters[state], frame)?
        };
        if state == k {
            self.state.clusters.push(cluster);
        } else {
            self.state.clusters[state] = cluster;
        }
        let ll = logliks[state];
        self.state.step += 1;
        self.state.s_hist.push(state);
        self.state.o_hist.push(oracle);
        self.state.step_logliks.push(ll);
        self.state.loglik_sum += ll;
        debug!("frame {}: state {state} (new = {}) oracle = {oracle} loglik = {ll}", frame.t, state == k);
        Ok(StateDecision {
            state,
            oracle,
            posterior,
            is_new: state == k,
        })
    }

    pub fn transition(&self, steps: usize) -> TransitionMatrix<T> {
        self.state.counts.empirical_transition(steps)
    }

    pub fn finish(self, frame_times: &[usize]) -> FitResult<T> {
        let transition = self.state.counts.empirical_transition(1);
        let assignments = self
            .state
            .s_hist
            .iter()
            .zip(&self.state.o_hist)
            .zip(&self.state.step_logliks)
            .zip(frame_times)
            .map(|(((&state, &oracle), &loglik), &t)| Assignment { t, state, oracle, loglik })
            .collect();
        FitResult {
            assignments,
            k_found: self.state.counts.k_tilde(),
            total_loglik: self.state.loglik_sum,
            counts: self.state.counts,
            clusters: self.state.clusters,
            transition,
            degenerate_evaluations: self.state.degenerate_evaluations,
        }
    }
}

fn check_dims<T: Real>(config: &EngineConfig<T>, frame: &Frame<T>) -> Result<()> {
    frame.validate()?;
    if frame.locations.dim() != config.p {
        return Err(Error::DimensionMismatch {
            expected: config.p,
            found: frame.locations.dim(),
        });
    }
    if frame.dim() != config.d {
        return Err(Error::DimensionMismatch {
            expected: config.d,
            found: frame.dim(),
        });
    }
    Ok(())
}

/// Output of a complete run.
#[derive(Debug, Clone)]
pub struct FitResult<T> {
    pub assignments: Vec<Assignment<T>>,
    pub k_found: usize,
    pub total_loglik: T,
    pub counts: HmmCounts<T>,
    pub clusters: Vec<ClusterModel<T>>,
    /// One-step empirical transition matrix.
    pub transition: TransitionMatrix<T>,
    pub degenerate_evaluations: usize,
}

impl<T> FitResult<T> {
    pub fn states(&self) -> Vec<usize> {
        self.assignments.iter().map(|a| a.state).collect()
    }
}

/// Runs the estimator over an ordered stream of frames.
pub fn run<T: Real>(config: EngineConfig<T>, frames: &[Frame<T>]) -> Result<FitResult<T>> {
    run_with(config, frames, |_, _| {})
}

/// Like [`run`], calling `observe(step_index, decision)` after each step.
pub fn run_with<T: Real, F>(config: EngineConfig<T>, frames: &[Frame<T>], mut observe: F) -> Result<FitResult<T>>
where
    F: FnMut(usize, Option<&StateDecision<T>>),
{
    let (first, rest) = frames.split_first().ok_or(Error::EmptyInput("frame stream"))?;
    let mut engine = Engine::init(config, first)?;
    observe(0, None);
    for (i, frame) in rest.iter().enumerate() {
        let decision = engine.step(frame)?;
        observe(i + 1, Some(&decision));
    }
    let times: Vec<usize> = frames.iter().map(|f| f.t).collect();
    Ok(engine.finish(&times))
}
