use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernel::Locations;
use crate::num::Real;

/// Observations of one time step: `n` locations and a velocity per location.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame<T> {
    pub t: usize,
    pub locations: Locations<T>,
    /// `n × d`, row `i` is the velocity observed at location `i`.
    pub velocities: DMatrix<T>,
}

impl<T: Real> Frame<T> {
    pub fn new(t: usize, locations: Locations<T>, velocities: DMatrix<T>) -> Result<Self> {
        let frame = Self {
            t,
            locations,
            velocities,
        };
        frame.validate()?;
        Ok(frame)
    }

    pub fn validate(&self) -> Result<()> {
        if self.locations.is_empty() {
            return Err(Error::InvalidFrame(format!("frame {} has no points", self.t)));
        }
        if self.locations.len() != self.velocities.nrows() {
            return Err(Error::InvalidFrame(format!(
                "frame {}: {} locations but {} velocity rows",
                self.t,
                self.locations.len(),
                self.velocities.nrows()
            )));
        }
        let finite = self.locations.as_flat().iter().all(|v| v.is_finite())
            && self.velocities.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidFrame(format!(
                "frame {} contains non-finite values",
                self.t
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    /// Output dimension `d`.
    pub fn dim(&self) -> usize {
        self.velocities.ncols()
    }

    /// Velocities stacked location-major into a vector of length `n · d`.
    pub fn stacked(&self) -> DVector<T> {
        let (n, d) = self.velocities.shape();
        DVector::from_fn(n * d, |i, _| self.velocities[(i / d, i % d)])
    }
}
