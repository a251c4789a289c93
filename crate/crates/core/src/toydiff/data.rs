//! 2-D Gaussian-mixture dataset with class modes on a circle.

use crate::error::{Error, Result};
use crate::metrics::SplitMix64;

use super::Point;

/// K equidistant class modes on a circle of `radius`, each with isotropic
/// noise `sigma`. Radius and sigma default so that samples stay inside
/// [-1, 1]^2.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub classes: usize,
    pub sigma: f64,
    pub radius: f64,
    pub modes: Vec<Point>,
}

impl ToyDataset {
    pub fn new(classes: usize, sigma: f64, radius: f64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "dataset needs at least 2 classes, got {classes}"
            )));
        }
        if !(sigma > 0.0) || !(radius > 0.0 && radius <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "bad dataset params sigma={sigma} radius={radius}"
            )));
        }
        let modes = (0..classes)
            .map(|c| {
                let theta = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
                [radius * theta.cos(), radius * theta.sin()]
            })
            .collect();
        Ok(ToyDataset {
            classes,
            sigma,
            radius,
            modes,
        })
    }

    pub fn mode(&self, c: usize) -> Point {
        self.modes[c]
    }

    /// Draws (x, class) with the class uniform and x = mode + sigma * N(0, I).
    pub fn sample(&self, rng: &mut SplitMix64) -> (Point, usize) {
        let c = rng.below(self.classes as u64) as usize;
        let m = self.modes[c];
        (
            [m[0] + self.sigma * rng.normal(), m[1] + self.sigma * rng.normal()],
            c,
        )
    }
}
