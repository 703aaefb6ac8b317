//! Infinite-HMM bookkeeping: transition and oracle counts, the sequential
//! transition prior over the discovered states plus one new state, the
//! discrete posteriors used by the one-pass MAP estimator, and empirical
//! transition-matrix export.
//!
//! States are 0-based. With `k` discovered states, index `k` denotes the
//! not-yet-seen state.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::num::Real;

/// Count statistics of a processed state/oracle trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmCounts<T> {
    /// `n[i][j]`: direct transitions `i → j`.
    n: Vec<Vec<u64>>,
    /// `m[j]`: arrivals in `j` through the oracle (initialization counts once).
    m: Vec<u64>,
    /// `visits[j]`: time steps spent in `j`.
    visits: Vec<u64>,
    current: usize,
    alpha: T,
    gamma: T,
}

impl<T: Real> HmmCounts<T> {
    /// Initial counts after the first step: one state, `n = [0]`, `m = [1]`.
    pub fn new(alpha: T, gamma: T) -> Result<Self> {
        for (name, v) in [("alpha", alpha), ("gamma", gamma)] {
            if !(v.is_finite() && v > T::zero()) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(Self {
            n: vec![vec![0]],
            m: vec![1],
            visits: vec![1],
            current: 0,
            alpha,
            gamma,
        })
    }

    /// Builds counts directly; used by tests and replay tools.
    pub fn from_parts(n: Vec<Vec<u64>>, m: Vec<u64>, visits: Vec<u64>, current: usize, alpha: T, gamma: T) -> Result<Self> {
        let k = m.len();
        if k == 0 || n.len() != k || n.iter().any(|r| r.len() != k) || visits.len() != k {
            return Err(Error::InvalidParameter("count shapes disagree".into()));
        }
        if current >= k {
            return Err(Error::StateOutOfRange { index: current, max: k - 1 });
        }
        let mut out = Self::new(alpha, gamma)?;
        out.n = n;
        out.m = m;
        out.visits = visits;
        out.current = current;
        Ok(out)
    }

    pub fn k_tilde(&self) -> usize {
        self.m.len()
    }

    pub fn current_state(&self) -> usize {
        self.current
    }

    pub fn n(&self) -> &[Vec<u64>] {
        &self.n
    }

    pub fn m(&self) -> &[u64] {
        &self.m
    }

    pub fn visits(&self) -> &[u64] {
        &self.visits
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn gamma(&self) -> T {
        self.gamma
    }

    fn row_total(&self) -> u64 {
        self.n[self.current].iter().sum()
    }

    fn m_total(&self) -> u64 {
        self.m.iter().sum()
    }

    /// Prior of the next state given the current one, length `k + 1`.
    pub fn transition_prior(&self) -> Vec<T> {
        let row = &self.n[self.current];
        let direct_den = T::count(self.row_total() as usize) + self.alpha;
        let oracle_den = T::count(self.m_total() as usize) + self.gamma;
        let mut out: Vec<T> = row
            .iter()
            .zip(&self.m)
            .map(|(&nij, &mj)| {
                T::count(nij as usize) / direct_den + self.alpha * T::count(mj as usize) / (direct_den * oracle_den)
            })
            .collect();
        out.push(self.alpha * self.gamma / (direct_den * oracle_den));
        out
    }

    /// `P(o = 1 | s_next = j, history)`.
    pub fn oracle_posterior(&self, j: usize) -> Result<T> {
        let k = self.k_tilde();
        if j > k {
            return Err(Error::StateOutOfRange { index: j, max: k });
        }
        if j == k {
            return Ok(T::one());
        }
        let row_total = self.row_total();
        if row_total == 0 {
            return Ok(T::one());
        }
        let direct_den = T::count(row_total as usize) + self.alpha;
        let p_oracle = self.alpha / direct_den;
        let via_oracle = T::count(self.m[j] as usize) / (T::count(self.m_total() as usize) + self.gamma) * p_oracle;
        let via_direct =
            T::count(self.n[self.current][j] as usize) / T::count(row_total as usize) * (T::one() - p_oracle);
        let total = via_oracle + via_direct;
        if total == T::zero() {
            // state never reached by either route; pure 0/0
            return Ok(T::one());
        }
        Ok(via_oracle / total)
    }

    /// Records the transition into `s_next`, creating it when `s_next == k`.
    pub fn update(&mut self, s_next: usize, oracle: bool) -> Result<()> {
        let k = self.k_tilde();
        if s_next > k {
            return Err(Error::StateOutOfRange { index: s_next, max: k });
        }
        if s_next == k {
            for row in &mut self.n {
                row.push(0);
            }
            self.n.push(vec![0; k + 1]);
            self.m.push(0);
            self.visits.push(0);
        }
        if oracle {
            self.m[s_next] += 1;
        } else {
            self.n[self.current][s_next] += 1;
        }
        self.visits[s_next] += 1;
        self.current = s_next;
        Ok(())
    }

    /// Steps processed so far.
    pub fn steps(&self) -> u64 {
        self.visits.iter().sum()
    }

    /// `k`-step power of the row-normalized direct-transition counts.
    pub fn empirical_transition(&self, steps: usize) -> TransitionMatrix<T> {
        let k = self.k_tilde();
        let mut zero_rows = Vec::new();
        let one_step = DMatrix::from_fn(k, k, |i, j| {
            let total: u64 = self.n[i].iter().sum();
            if total == 0 {
                T::one() / T::count(k)
            } else {
                T::count(self.n[i][j] as usize) / T::count(total as usize)
            }
        });
        for (i, row) in self.n.iter().enumerate() {
            if row.iter().all(|&v| v == 0) {
                zero_rows.push(i);
            }
        }
        TransitionMatrix {
            matrix: matrix_power(&one_step, steps.max(1)),
            steps: steps.max(1),
            uniform_rows: zero_rows,
        }
    }
}

/// Row-stochastic matrix exported by [`HmmCounts::empirical_transition`].
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix<T> {
    pub matrix: DMatrix<T>,
    pub steps: usize,
    /// States without observed outgoing transitions, replaced by the uniform row.
    pub uniform_rows: Vec<usize>,
}

fn matrix_power<T: Real>(m: &DMatrix<T>, mut e: usize) -> DMatrix<T> {
    let mut base = m.clone();
    let mut acc = DMatrix::identity(m.nrows(), m.ncols());
    while e > 0 {
        if e & 1 == 1 {
            acc = &acc * &base;
        }
        e >>= 1;
        if e > 0 {
            base = &base * &base;
        }
    }
    acc
}

/// Decision for one step of the sequential estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct StateDecision<T> {
    pub state: usize,
    pub oracle: bool,
    pub posterior: Vec<T>,
    pub is_new: bool,
}

/// Normalized `prior · exp(loglik)` and its argmax (lowest index on ties).
pub fn state_posterior<T: Real>(prior: &[T], logliks: &[T]) -> Result<(Vec<T>, usize)> {
    if prior.len() != logliks.len() {
        return Err(Error::DimensionMismatch {
            expected: prior.len(),
            found: logliks.len(),
        });
    }
    if prior.is_empty() {
        return Err(Error::EmptyInput("state posterior needs at least one candidate"));
    }
    let max = prior
        .iter()
        .zip(logliks)
        .filter(|(&p, &l)| p > T::zero() && l.is_finite())
        .map(|(_, &l)| l)
        .reduce(|a, b| if b > a { b } else { a })
        .ok_or(Error::NumericalCollapse)?;
    let weights: Vec<T> = prior
        .iter()
        .zip(logliks)
        .map(|(&p, &l)| {
            if p > T::zero() && l.is_finite() {
                p * (l - max).exp()
            } else {
                T::zero()
            }
        })
        .collect();
    let total = weights.iter().fold(T::zero(), |a, &b| a + b);
    if !(total.is_finite() && total > T::zero()) {
        return Err(Error::NumericalCollapse);
    }
    let posterior: Vec<T> = weights.into_iter().map(|w| w / total).collect();
    let mut best = 0;
    for (j, &p) in posterior.iter().enumerate() {
        if p > posterior[best] {
            best = j;
        }
    }
    Ok((posterior, best))
}
