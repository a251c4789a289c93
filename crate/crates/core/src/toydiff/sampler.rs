//! Deterministic DDIM sampling with classifier-free guidance.

use crate::error::{Error, Result};
use crate::metrics::SplitMix64;

use super::model::{DenoiserParams, TimeFeatureTable};
use super::schedule::NoiseSchedule;
use super::Point;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleSpec {
    pub steps: usize,
    pub guidance: f64,
}

impl SampleSpec {
    pub fn validate(&self, t_total: usize) -> Result<()> {
        if self.steps < 1 || self.steps > t_total {
            return Err(Error::InvalidArgument(format!(
                "{} inference steps outside [1, {t_total}]",
                self.steps
            )));
        }
        if !(self.guidance >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "guidance scale {} below 1",
                self.guidance
            )));
        }
        Ok(())
    }
}

/// eps = w * eps_c - (w - 1) * eps_u.
pub fn cfg_combine(eps_c: Point, eps_u: Point, w: f64) -> Point {
    [
        w * eps_c[0] - (w - 1.0) * eps_u[0],
        w * eps_c[1] - (w - 1.0) * eps_u[1],
    ]
}

/// Uniform-stride inference steps t_k = k*T/S, descending.
pub fn ddim_steps(t_total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps < 1 || steps > t_total {
        return Err(Error::InvalidArgument(format!(
            "{steps} inference steps outside [1, {t_total}]"
        )));
    }
    Ok((0..steps).rev().map(|k| k * t_total / steps).collect())
}

/// One deterministic (eta = 0) DDIM update:
/// x0 = (z - sqrt(1-abar_t)*eps) / sqrt(abar_t), then
/// z_prev = sqrt(abar_prev)*x0 + sqrt(1-abar_prev)*eps.
pub fn ddim_update(z: Point, eps: Point, abar_t: f64, abar_prev: f64) -> (Point, Point) {
    let (sa, sb) = (abar_t.sqrt(), (1.0 - abar_t).sqrt());
    let x0 = [(z[0] - sb * eps[0]) / sa, (z[1] - sb * eps[1]) / sa];
    let (pa, pb) = (abar_prev.sqrt(), (1.0 - abar_prev).sqrt());
    let z_prev = [pa * x0[0] + pb * eps[0], pa * x0[1] + pb * eps[1]];
    (x0, z_prev)
}

/// DDIM trajectory from a given initial latent. Time features come from
/// `table` when present, otherwise from the time-projection layers.
pub fn ddim_sample_from(
    p: &DenoiserParams,
    sched: &NoiseSchedule,
    table: Option<&TimeFeatureTable>,
    c: usize,
    spec: SampleSpec,
    z0: Point,
) -> Result<Point> {
    spec.validate(sched.t_total)?;
    let ts = ddim_steps(sched.t_total, spec.steps)?;
    let mut z = z0;
    for (k, &t) in ts.iter().enumerate() {
        let scratch;
        let fv: Vec<&[f64]> = match table {
            Some(tab) => tab.features_at(t)?,
            None => {
                scratch = p.time_features(t)?;
                scratch.iter().map(|v| v.as_slice()).collect()
            }
        };
        let (eps_c, _) = p.forward(z, &fv, Some(c))?;
        let eps = if spec.guidance == 1.0 {
            eps_c
        } else {
            let (eps_u, _) = p.forward(z, &fv, None)?;
            cfg_combine(eps_c, eps_u, spec.guidance)
        };
        let abar_prev = if k + 1 < ts.len() {
            sched.alpha_bars[ts[k + 1]]
        } else {
            1.0
        };
        let (_, z_prev) = ddim_update(z, eps, sched.alpha_bars[t], abar_prev);
        z = z_prev;
    }
    Ok(z)
}

/// DDIM sample with the initial latent drawn from `rng`.
pub fn ddim_sample(
    p: &DenoiserParams,
    sched: &NoiseSchedule,
    table: Option<&TimeFeatureTable>,
    c: usize,
    spec: SampleSpec,
    rng: &mut SplitMix64,
) -> Result<Point> {
    let z0 = [rng.normal(), rng.normal()];
    ddim_sample_from(p, sched, table, c, spec, z0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toydiff::{cache_time_features, forward_diffuse, make_schedule, ModelDims};

    #[test]
    fn cfg_identities() {
        let ec = [1.0, 0.0];
        let eu = [0.0, 1.0];
        assert_eq!(cfg_combine(ec, eu, 1.0), ec);
        assert_eq!(cfg_combine(ec, ec, 4.0), ec);
        assert_eq!(cfg_combine(ec, eu, 7.5), [7.5, -6.5]);
    }

    #[test]
    fn step_schedule_is_uniform_and_descending() {
        let ts = ddim_steps(1000, 50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 980);
        assert_eq!(ts[49], 0);
        for w in ts.windows(2) {
            assert_eq!(w[0] - w[1], 20);
        }
        let short = ddim_steps(10, 7).unwrap();
        let mut dedup = short.clone();
        dedup.dedup();
        assert_eq!(short, dedup);
        assert!(ddim_steps(10, 11).is_err());
        assert!(ddim_steps(10, 0).is_err());
    }

    #[test]
    fn single_update_inverts_forward_diffusion() {
        let sched = make_schedule(1000, 0.00085, 0.012).unwrap();
        let x = [0.62, -0.35];
        let eps = [1.1, -0.4];
        for &t in &[0usize, 313, 999] {
            let z = forward_diffuse(x, t, eps, &sched);
            let (x0, z_prev) = ddim_update(z, eps, sched.alpha_bars[t], 1.0);
            assert!((x0[0] - x[0]).abs() < 1e-12 && (x0[1] - x[1]).abs() < 1e-12);
            assert_eq!(z_prev, x0);
        }
    }

    fn small_model(seed: u64) -> DenoiserParams {
        let mut rng = SplitMix64::new(seed);
        DenoiserParams::init(
            ModelDims {
                hidden: 8,
                embed: 4,
                blocks: 2,
                classes: 3,
            },
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn fixed_seed_reproduces_samples() {
        let p = small_model(41);
        let sched = make_schedule(1000, 0.00085, 0.012).unwrap();
        let spec = SampleSpec {
            steps: 10,
            guidance: 3.0,
        };
        let a = ddim_sample(&p, &sched, None, 1, spec, &mut SplitMix64::new(1024)).unwrap();
        let b = ddim_sample(&p, &sched, None, 1, spec, &mut SplitMix64::new(1024)).unwrap();
        assert_eq!(a, b);
        let c = ddim_sample(&p, &sched, None, 1, spec, &mut SplitMix64::new(1025)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn cached_and_on_the_fly_trajectories_are_bit_identical() {
        let p = small_model(42);
        let sched = make_schedule(1000, 0.00085, 0.012).unwrap();
        let spec = SampleSpec {
            steps: 25,
            guidance: 7.5,
        };
        let steps = ddim_steps(sched.t_total, spec.steps).unwrap();
        let table = cache_time_features(&p, &steps, sched.t_total).unwrap();
        for seed in 0..5u64 {
            let direct = ddim_sample(&p, &sched, None, 2, spec, &mut SplitMix64::new(seed)).unwrap();
            let cached =
                ddim_sample(&p, &sched, Some(&table), 2, spec, &mut SplitMix64::new(seed)).unwrap();
            assert_eq!(direct, cached);
        }
    }

    #[test]
    fn guidance_below_one_rejected() {
        let p = small_model(43);
        let sched = make_schedule(100, 0.001, 0.02).unwrap();
        let spec = SampleSpec {
            steps: 5,
            guidance: 0.5,
        };
        assert!(ddim_sample(&p, &sched, None, 0, spec, &mut SplitMix64::new(0)).is_err());
    }
}
