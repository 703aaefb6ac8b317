//! Synthetic data: a library of smooth planar fields, a random transition
//! matrix, a Markov state sequence and noisy velocity observations at
//! Poisson-many uniform locations per frame.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::kernel::Locations;

/// Analytic planar vector field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VectorField {
    Rotation,
    Source,
    Sink,
    Saddle,
    Shear,
    ConstantEast,
    ConstantNorth,
    SwirlSink,
}

impl VectorField {
    pub const ALL: [VectorField; 8] = [
        VectorField::Rotation,
        VectorField::Source,
        VectorField::Sink,
        VectorField::Saddle,
        VectorField::Shear,
        VectorField::ConstantEast,
        VectorField::ConstantNorth,
        VectorField::SwirlSink,
    ];

    pub fn eval(self, x: f64, y: f64) -> [f64; 2] {
        match self {
            VectorField::Rotation => [-y, x],
            VectorField::Source => [x, y],
            VectorField::Sink => [-x, -y],
            VectorField::Saddle => [x, -y],
            VectorField::Shear => [y, 0.0],
            VectorField::ConstantEast => [1.5, 0.0],
            VectorField::ConstantNorth => [0.0, 1.5],
            VectorField::SwirlSink => [-x - y, x - y],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            VectorField::Rotation => "rotation",
            VectorField::Source => "source",
            VectorField::Sink => "sink",
            VectorField::Saddle => "saddle",
            VectorField::Shear => "shear",
            VectorField::ConstantEast => "constant-east",
            VectorField::ConstantNorth => "constant-north",
            VectorField::SwirlSink => "swirl-sink",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }
}

/// The eight built-in fields, in a fixed order.
pub fn builtin_fields() -> Vec<VectorField> {
    VectorField::ALL.to_vec()
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl Domain {
    pub fn square(lo: f64, hi: f64) -> Self {
        Self { lo: [lo, lo], hi: [hi, hi] }
    }

    pub fn is_valid(&self) -> bool {
        (0..2).all(|i| self.lo[i].is_finite() && self.hi[i].is_finite() && self.hi[i] > self.lo[i])
    }

    /// `nx × ny` regular grid including the box corners, x varying fastest.
    pub fn grid(&self, nx: usize, ny: usize) -> Vec<[f64; 2]> {
        let step = |i: usize, n: usize, a: usize| {
            if n <= 1 {
                0.5 * (self.lo[a] + self.hi[a])
            } else {
                self.lo[a] + (self.hi[a] - self.lo[a]) * i as f64 / (n - 1) as f64
            }
        };
        let mut out = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                out.push([step(i, nx, 0), step(j, ny, 1)]);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub k_true: usize,
    pub steps: usize,
    pub mean_points: f64,
    pub noise_sd: f64,
    pub domain: Domain,
    pub dirichlet_conc: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            k_true: 8,
            steps: 100,
            mean_points: 100.0,
            noise_sd: 1.0,
            domain: Domain::square(-2.0, 2.0),
            dirichlet_conc: 1.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_true == 0 || self.k_true > VectorField::ALL.len() {
            return Err(Error::InvalidParameter(format!(
                "k_true must be in 1..={}, got {}",
                VectorField::ALL.len(),
                self.k_true
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidParameter("steps must be ≥ 1".into()));
        }
        if !(self.mean_points.is_finite() && self.mean_points > 0.0) {
            return Err(Error::InvalidParameter("mean_points must be positive".into()));
        }
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return Err(Error::InvalidParameter("noise_sd must be nonnegative".into()));
        }
        if !(self.dirichlet_conc.is_finite() && self.dirichlet_conc > 0.0) {
            return Err(Error::InvalidParameter("dirichlet_conc must be positive".into()));
        }
        if !self.domain.is_valid() {
            return Err(Error::InvalidParameter("domain must be a non-degenerate box".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub frames: Vec<Frame<f64>>,
    /// 0-based indices into `fields`.
    pub true_states: Vec<usize>,
    pub true_transition: DMatrix<f64>,
    pub fields: Vec<VectorField>,
}

/// `k × k` matrix with independent symmetric Dirichlet rows.
pub fn gen_transition<R: Rng + ?Sized>(k: usize, conc: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be ≥ 1".into()));
    }
    let gamma = Gamma::new(conc, 1.0).map_err(|e| Error::InvalidParameter(format!("Dirichlet concentration: {e}")))?;
    let mut out = DMatrix::zeros(k, k);
    for i in 0..k {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        for (j, g) in draws.into_iter().enumerate() {
            out[(i, j)] = g / total;
        }
    }
    Ok(out)
}

fn sample_row<R: Rng + ?Sized>(row: impl Iterator<Item = f64>, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (j, p) in row.enumerate() {
        acc += p;
        last = j;
        if u < acc {
            return j;
        }
    }
    last
}

pub fn simulate(cfg: &SimConfig) -> Result<SimOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fields: Vec<VectorField> = builtin_fields().into_iter().take(cfg.k_true).collect();
    let k = fields.len();
    let transition = gen_transition(k, cfg.dirichlet_conc, &mut rng)?;
    let poisson = Poisson::new(cfg.mean_points).map_err(|e| Error::InvalidParameter(format!("Poisson rate: {e}")))?;
    let noise = Normal::new(0.0, cfg.noise_sd).map_err(|e| Error::InvalidParameter(format!("noise: {e}")))?;

    let mut states = Vec::with_capacity(cfg.steps);
    let mut frames = Vec::with_capacity(cfg.steps);
    let mut s = rng.random_range(0..k);
    for t in 0..cfg.steps {
        if t > 0 {
            s = sample_row(transition.row(s).iter().copied(), &mut rng);
        }
        states.push(s);
        let mut n = poisson.sample(&mut rng) as usize;
        while n == 0 {
            n = poisson.sample(&mut rng) as usize;
        }
        let mut coords = Vec::with_capacity(2 * n);
        let mut vel = DMatrix::zeros(n, 2);
        for i in 0..n {
            let x = rng.random_range(cfg.domain.lo[0]..cfg.domain.hi[0]);
            let y = rng.random_range(cfg.domain.lo[1]..cfg.domain.hi[1]);
            coords.extend_from_slice(&[x, y]);
            let v = fields[s].eval(x, y);
            for c in 0..2 {
                let eps = if cfg.noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                vel[(i, c)] = v[c] + eps;
            }
        }
        frames.push(Frame::new(t, Locations::from_flat(2, coords)?, vel)?);
    }
    Ok(SimOutput {
        frames,
        true_states: states,
        true_transition: transition,
        fields,
    })
}
