//! Deterministic RNG and the small set of scalar metrics used across the
//! pipeline.
//!
//! Everything downstream (data synthesis, training, sampling, evaluation)
//! draws from [`SplitMix64`] so that runs are reproducible from a single
//! root seed. Normal variates come from Box-Muller over the same uniform
//! stream; no platform RNG is ever consulted.

use crate::error::{Error, Result};

/// Weyl increment from the reference SplitMix64 (Steele, Lea, Flood 2014).
const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Finalizer from the same reference implementation.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a root seed and a list of tag words
/// (layer index, candidate bit width, stage id, ...). Children of
/// different tags are decorrelated; the same tags always give the same
/// child.
pub fn derive_seed(root: u64, words: &[u64]) -> u64 {
    let mut z = mix64(root.wrapping_add(GOLDEN_GAMMA));
    for &w in words {
        z = mix64(z.wrapping_add(GOLDEN_GAMMA) ^ mix64(w.wrapping_add(GOLDEN_GAMMA)));
    }
    z
}

/// SplitMix64 generator with Box-Muller normals layered on top.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
    spare_normal: Option<f64>,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 {
            state: seed,
            spare_normal: None,
        }
    }

    /// Child generator for a tagged subtask; see [`derive_seed`].
    pub fn fork(&self, words: &[u64]) -> Self {
        SplitMix64::new(derive_seed(self.state, words))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). Uses rejection to stay unbiased.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Standard normal via Box-Muller. Consumes two uniforms per pair and
    /// caches the second variate.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - U keeps the argument of ln() in (0, 1].
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn uniform_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.uniform()).collect()
    }
}

/// Mean squared error between two equal-length slices.
pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "mse: {} vs {} elements",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument("mse of empty slices".into()));
    }
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len() as f64)
}

/// Peak signal-to-noise ratio in dB for a given peak value. Identical
/// inputs give +inf.
pub fn psnr(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::InvalidArgument(format!("psnr peak {peak} not positive")));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// Pearson correlation coefficient. Constant inputs have no defined
/// correlation and are rejected.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "pearson: {} vs {} elements",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument("pearson needs at least 2 points".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let dx = x - ma;
        let dy = y - mb;
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::InvalidArgument("pearson of constant input".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

/// Population skewness m3 / m2^(3/2).
pub fn skewness(x: &[f64]) -> Result<f64> {
    if x.len() < 2 {
        return Err(Error::InvalidArgument("skewness needs at least 2 points".into()));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let mut m2 = 0.0;
    let mut m3 = 0.0;
    for &v in x {
        let d = v - mean;
        m2 += d * d;
        m3 += d * d * d;
    }
    m2 /= n;
    m3 /= n;
    if m2 == 0.0 {
        return Err(Error::InvalidArgument("skewness of constant input".into()));
    }
    Ok(m3 / m2.powf(1.5))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_vectors() {
        // First outputs for seed 0 from the published reference
        // implementation, plus our own frozen values for seed 1024.
        let mut r = SplitMix64::new(0);
        assert_eq!(r.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(r.next_u64(), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(r.next_u64(), 0x06C4_5D18_8009_454F);

        let mut r = SplitMix64::new(1024);
        assert_eq!(r.next_u64(), 0x4426_ACBA_529F_17CC);
        assert_eq!(r.next_u64(), 0xF2A4_6C01_9ABE_148A);
        assert_eq!(r.next_u64(), 0x45BD_647C_85A0_130F);
    }

    #[test]
    fn uniform_and_normal_frozen_values() {
        let mut r = SplitMix64::new(1024);
        assert!((r.uniform() - 0.26621512936491976).abs() < 1e-15);
        assert!((r.uniform() - 0.9478213790814538).abs() < 1e-15);

        let mut r = SplitMix64::new(1024);
        let z0 = r.normal();
        let z1 = r.normal();
        assert!((z0 - 0.7449078317455865).abs() < 1e-12);
        assert!((z1 - -0.2533596108588549).abs() < 1e-12);
    }

    #[test]
    fn uniform_stays_in_unit_interval() {
        let mut r = SplitMix64::new(7);
        for _ in 0..10_000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut r = SplitMix64::new(42);
        let xs = r.normal_vec(200_000);
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn below_is_in_range_and_covers() {
        let mut r = SplitMix64::new(3);
        let mut seen = [false; 7];
        for _ in 0..1000 {
            seen[r.below(7) as usize] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn derive_seed_is_stable_and_tag_sensitive() {
        let a = derive_seed(1024, &[3, 2]);
        let b = derive_seed(1024, &[3, 2]);
        let c = derive_seed(1024, &[2, 3]);
        let d = derive_seed(1025, &[3, 2]);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn mse_oracle() {
        let a = [0.5, -1.25, 2.0, 0.75, -0.5];
        let b = [0.4, -1.0, 2.2, 0.9, -0.7];
        assert!((mse(&a, &b).unwrap() - 0.035).abs() < 1e-15);
        assert!(mse(&a, &b[..4]).is_err());
        assert!(mse(&[], &[]).is_err());
    }

    #[test]
    fn psnr_oracle_and_infinity() {
        let a = [0.5, -1.25, 2.0, 0.75, -0.5];
        let b = [0.4, -1.0, 2.2, 0.9, -0.7];
        assert!((psnr(&a, &b, 2.0).unwrap() - 20.57991946977687).abs() < 1e-10);
        assert!(psnr(&a, &a, 2.0).unwrap().is_infinite());
        assert!(psnr(&a, &b, 0.0).is_err());
    }

    #[test]
    fn pearson_oracle() {
        let a = [0.5, -1.25, 2.0, 0.75, -0.5];
        let b = [0.4, -1.0, 2.2, 0.9, -0.7];
        assert!((pearson(&a, &b).unwrap() - 0.988443882690606).abs() < 1e-12);
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((pearson(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(pearson(&a, &[1.0; 5]).is_err());
    }

    #[test]
    fn skewness_oracle() {
        let x = [1.0, 2.0, 2.0, 3.0, 10.0];
        assert!((skewness(&x).unwrap() - 1.3608927294433224).abs() < 1e-12);
        // Mirroring flips the sign.
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((skewness(&neg).unwrap() + 1.3608927294433224).abs() < 1e-12);
        assert!(skewness(&[5.0, 5.0, 5.0]).is_err());
    }
}
