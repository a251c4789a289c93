//! Noise schedule, forward process and sinusoidal time embedding.

use crate::error::{Error, Result};

use super::Point;

/// Variance schedule with precomputed cumulative products
/// (alpha_bars[t] = prod_{i<=t} (1 - beta_i)).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub t_total: usize,
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

/// Scaled-linear schedule: beta_t = (sqrt(bs) + (t/(T-1))*(sqrt(be) - sqrt(bs)))^2.
pub fn make_schedule(t_total: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_total < 2 {
        return Err(Error::InvalidArgument(format!(
            "schedule needs at least 2 steps, got {t_total}"
        )));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "beta range ({beta_start}, {beta_end}) outside 0 < start <= end < 1"
        )));
    }
    let (sbs, sbe) = (beta_start.sqrt(), beta_end.sqrt());
    let mut betas = Vec::with_capacity(t_total);
    let mut alpha_bars = Vec::with_capacity(t_total);
    let mut prod = 1.0;
    for t in 0..t_total {
        let frac = t as f64 / (t_total - 1) as f64;
        let b = (sbs + frac * (sbe - sbs)).powi(2);
        prod *= 1.0 - b;
        betas.push(b);
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule {
        t_total,
        betas,
        alpha_bars,
    })
}

/// z_t = sqrt(abar_t) * x + sqrt(1 - abar_t) * eps.
pub fn forward_diffuse(x: Point, t: usize, eps: Point, sched: &NoiseSchedule) -> Point {
    let ab = sched.alpha_bars[t];
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    [sa * x[0] + sb * eps[0], sa * x[1] + sb * eps[1]]
}

/// Standard sinusoidal embedding: d/2 frequencies geometric from 1 down to
/// 1e-4, laid out as [sin(w_k t)...; cos(w_k t)...].
pub fn time_embedding(t: usize, d: usize) -> Result<Vec<f64>> {
    if d < 2 || d % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "embedding dim {d} must be even and >= 2"
        )));
    }
    let half = d / 2;
    let mut out = vec![0.0; d];
    for k in 0..half {
        let exp = if half == 1 {
            0.0
        } else {
            k as f64 / (half - 1) as f64
        };
        let omega = 10_000f64.powf(-exp);
        let arg = omega * t as f64;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_schedule() -> NoiseSchedule {
        make_schedule(1000, 0.00085, 0.012).unwrap()
    }

    #[test]
    fn schedule_endpoints_and_regression_constant() {
        let s = default_schedule();
        assert!((s.alpha_bars[0] - (1.0 - 0.00085)).abs() < 1e-15);
        assert!((s.betas[999] - 0.012).abs() < 1e-15);
        // frozen from an independent cumulative-product script
        assert!((s.alpha_bars[999] - 0.004660098513077236).abs() < 1e-15);
        assert!((s.alpha_bars[499] - 0.27766965045646763).abs() < 1e-15);
    }

    #[test]
    fn alpha_bars_strictly_decreasing_in_unit_interval() {
        let s = default_schedule();
        for t in 0..s.t_total {
            assert!(s.alpha_bars[t] > 0.0 && s.alpha_bars[t] < 1.0);
            if t > 0 {
                assert!(s.alpha_bars[t] < s.alpha_bars[t - 1]);
            }
        }
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(make_schedule(1, 0.001, 0.01).is_err());
        assert!(make_schedule(100, 0.0, 0.01).is_err());
        assert!(make_schedule(100, 0.02, 0.01).is_err());
        assert!(make_schedule(100, 0.001, 1.0).is_err());
    }

    #[test]
    fn forward_diffuse_limits() {
        let mut s = default_schedule();
        let x = [0.3, -0.7];
        let eps = [1.5, 0.25];
        s.alpha_bars[0] = 1.0;
        assert_eq!(forward_diffuse(x, 0, eps, &s), x);
        s.alpha_bars[0] = 0.0;
        assert_eq!(forward_diffuse(x, 0, eps, &s), eps);
    }

    #[test]
    fn forward_diffuse_preserves_unit_variance() {
        // Var(z) = abar*Var(x) + (1-abar)*Var(eps) = 1 for unit inputs.
        let s = default_schedule();
        let mut rng = crate::metrics::SplitMix64::new(77);
        for &t in &[100usize, 500, 900] {
            let mut acc = 0.0;
            let n = 100_000;
            for _ in 0..n {
                let z = forward_diffuse([rng.normal(), rng.normal()], t, [rng.normal(), rng.normal()], &s);
                acc += z[0] * z[0] + z[1] * z[1];
            }
            let var = acc / (2 * n) as f64;
            assert!((var - 1.0).abs() < 0.02, "t={t}: var {var}");
        }
    }

    #[test]
    fn time_embedding_at_zero_and_determinism() {
        let e = time_embedding(0, 8).unwrap();
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
        assert_eq!(time_embedding(123, 64).unwrap(), time_embedding(123, 64).unwrap());
        assert!(time_embedding(1, 5).is_err());
        assert!(time_embedding(1, 0).is_err());
    }

    #[test]
    fn time_embedding_d4_hand_values() {
        // w_0 = 1, w_1 = 1e-4
        let e = time_embedding(1, 4).unwrap();
        assert!((e[0] - 0.8414709848078965).abs() < 1e-15);
        assert!((e[1] - 9.999999983333334e-05).abs() < 1e-18);
        assert!((e[2] - 0.5403023058681398).abs() < 1e-15);
        assert!((e[3] - 0.999999995).abs() < 1e-15);
    }
}
