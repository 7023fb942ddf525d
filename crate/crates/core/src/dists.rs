//! Diagonal Gaussian algebra.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_len, Error, Result};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    std: Vec<f64>,
}

/// Partial derivatives of `kl(p, q)` with respect to both arguments.
#[derive(Debug, Clone, PartialEq)]
pub struct KlGrads {
    pub p_mean: Vec<f64>,
    pub p_std: Vec<f64>,
    pub q_mean: Vec<f64>,
    pub q_std: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        check_len("gaussian std", mean.len(), std.len())?;
        if !mean.iter().all(|m| m.is_finite()) {
            return Err(Error::Numeric("gaussian mean".into()));
        }
        if !std.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::Numeric("gaussian std must be positive".into()));
        }
        Ok(DiagGaussian { mean, std })
    }

    pub fn standard(dim: usize) -> Self {
        DiagGaussian {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    /// Reparameterized sample `mean + std * noise`.
    pub fn sample(&self, noise: &[f64]) -> Vec<f64> {
        debug_assert_eq!(noise.len(), self.dim());
        self.mean
            .iter()
            .zip(&self.std)
            .zip(noise)
            .map(|((m, s), e)| m + s * e)
            .collect()
    }

    pub fn sample_rng<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let noise = standard_normal(rng, self.dim());
        self.sample(&noise)
    }

    pub fn log_prob(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim());
        self.mean
            .iter()
            .zip(&self.std)
            .zip(x)
            .map(|((m, s), xi)| {
                let u = (xi - m) / s;
                -0.5 * u * u - s.ln() - HALF_LN_2PI
            })
            .sum()
    }

    pub fn entropy(&self) -> f64 {
        self.std.iter().map(|s| 0.5 + HALF_LN_2PI + s.ln()).sum()
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Closed-form `KL(p || q)`.
pub fn kl(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64> {
    check_len("kl dimensions", p.dim(), q.dim())?;
    Ok(kl_unchecked(p, q))
}

pub(crate) fn kl_unchecked(p: &DiagGaussian, q: &DiagGaussian) -> f64 {
    let mut total = 0.0;
    for i in 0..p.dim() {
        let (mp, sp, mq, sq) = (p.mean[i], p.std[i], q.mean[i], q.std[i]);
        let d = mp - mq;
        total += (sq / sp).ln() + (sp * sp + d * d) / (2.0 * sq * sq) - 0.5;
    }
    total
}

pub fn kl_grads(p: &DiagGaussian, q: &DiagGaussian) -> KlGrads {
    let n = p.dim();
    let mut g = KlGrads {
        p_mean: vec![0.0; n],
        p_std: vec![0.0; n],
        q_mean: vec![0.0; n],
        q_std: vec![0.0; n],
    };
    for i in 0..n {
        let (mp, sp, mq, sq) = (p.mean[i], p.std[i], q.mean[i], q.std[i]);
        let d = mp - mq;
        let sq2 = sq * sq;
        g.p_mean[i] = d / sq2;
        g.q_mean[i] = -d / sq2;
        g.p_std[i] = -1.0 / sp + sp / sq2;
        g.q_std[i] = 1.0 / sq - (sp * sp + d * d) / (sq2 * sq);
    }
    g
}

/// `d entropy / d std`.
pub fn entropy_std_grad(d: &DiagGaussian) -> Vec<f64> {
    d.std.iter().map(|s| 1.0 / s).collect()
}

/// Clips into the `[-1, 1]` action box.
pub fn clip_action(a: &mut [f64]) {
    a.iter_mut().for_each(|x| *x = x.clamp(-1.0, 1.0));
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn g(m: &[f64], s: &[f64]) -> DiagGaussian {
        DiagGaussian::new(m.to_vec(), s.to_vec()).unwrap()
    }

    #[test]
    fn sample_is_affine() {
        assert_eq!(g(&[0.0, 0.0], &[1.0, 1.0]).sample(&[0.0, 0.0]), vec![0.0, 0.0]);
        assert_eq!(g(&[1.0, -1.0], &[2.0, 0.5]).sample(&[1.0, -2.0]), vec![3.0, -2.0]);
    }

    #[test]
    fn sample_mean_monte_carlo() {
        let d = g(&[0.3], &[0.2]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 1_000_000;
        let mean = (0..n).map(|_| d.sample_rng(&mut rng)[0]).sum::<f64>() / n as f64;
        assert!((mean - 0.3).abs() < 3.0 * 0.2 / 1000.0);
    }

    #[test]
    fn log_prob_values() {
        assert!((g(&[0.0], &[1.0]).log_prob(&[0.0]) + 0.918_938_5).abs() < 1e-7);
        assert!((g(&[0.0, 0.0], &[1.0, 1.0]).log_prob(&[0.0, 0.0]) + 1.837_877_1).abs() < 1e-7);
        // N(1, 0.25) at 2: density exp(-2)/sqrt(2*pi*0.25)
        let expected = (-(1.0f64) / (2.0 * 0.25)).exp() / (2.0 * std::f64::consts::PI * 0.25).sqrt();
        assert!((g(&[1.0], &[0.5]).log_prob(&[2.0]) - expected.ln()).abs() < 1e-10);
    }

    #[test]
    fn log_density_normalizes_under_quadrature() {
        let d = g(&[1.0], &[0.5]);
        let (a, b, n) = (-6.0, 8.0, 200_000);
        let h = (b - a) / n as f64;
        let mut s = 0.0;
        for i in 0..=n {
            let x = a + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            s += w * d.log_prob(&[x]).exp();
        }
        assert!((s * h - 1.0).abs() < 1e-10);
    }

    #[test]
    fn entropy_values() {
        assert!((g(&[0.0], &[1.0]).entropy() - 1.418_938_5).abs() < 1e-7);
        assert!((g(&[0.0, 0.0], &[1.0, 1.0]).entropy() - 2.0 * 1.418_938_533).abs() < 1e-8);
        let d = g(&[0.0], &[0.5]);
        assert!((d.entropy() - 0.725_791_3).abs() < 1e-7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 1_000_000;
        let lp: Vec<f64> = (0..n).map(|_| -d.log_prob(&d.sample_rng(&mut rng))).collect();
        let m = lp.iter().sum::<f64>() / n as f64;
        let var = lp.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
        assert!((m - d.entropy()).abs() < 3.0 * (var / n as f64).sqrt());
    }

    #[test]
    fn kl_values() {
        let p = g(&[0.2, -1.0], &[0.3, 2.0]);
        assert_eq!(kl(&p, &p).unwrap(), 0.0);
        assert!((kl(&g(&[0.0], &[1.0]), &g(&[1.0], &[1.0])).unwrap() - 0.5).abs() < 1e-15);
        let k = kl(&g(&[0.0], &[2.0]), &g(&[0.0], &[1.0])).unwrap();
        assert!((k - (2.0 - 2f64.ln() - 0.5)).abs() < 1e-15);
        assert!(kl(&g(&[0.0], &[1.0]), &g(&[0.0, 0.0], &[1.0, 1.0])).is_err());
    }

    #[test]
    fn invalid_std_rejected() {
        assert!(DiagGaussian::new(vec![0.0], vec![0.0]).is_err());
        assert!(DiagGaussian::new(vec![0.0], vec![-1.0]).is_err());
        assert!(DiagGaussian::new(vec![f64::NAN], vec![1.0]).is_err());
    }

    #[test]
    fn kl_grads_match_finite_differences() {
        let p = g(&[0.3, -0.4], &[0.7, 1.3]);
        let q = g(&[-0.1, 0.5], &[1.1, 0.4]);
        let gr = kl_grads(&p, &q);
        let h = 1e-6;
        for i in 0..2 {
            let bump = |d: &DiagGaussian, mean: bool, delta: f64| {
                let (mut m, mut s) = (d.mean.clone(), d.std.clone());
                if mean {
                    m[i] += delta
                } else {
                    s[i] += delta
                }
                g(&m, &s)
            };
            let fd = |f: &dyn Fn(f64) -> f64| (f(h) - f(-h)) / (2.0 * h);
            let pm = fd(&|e| kl_unchecked(&bump(&p, true, e), &q));
            let ps = fd(&|e| kl_unchecked(&bump(&p, false, e), &q));
            let qm = fd(&|e| kl_unchecked(&p, &bump(&q, true, e)));
            let qs = fd(&|e| kl_unchecked(&p, &bump(&q, false, e)));
            assert!((pm - gr.p_mean[i]).abs() < 1e-7);
            assert!((ps - gr.p_std[i]).abs() < 1e-7);
            assert!((qm - gr.q_mean[i]).abs() < 1e-7);
            assert!((qs - gr.q_std[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn reparameterized_sample_derivatives() {
        let noise = [0.7, -1.2];
        let d = g(&[0.1, 0.2], &[0.5, 0.9]);
        let base = d.sample(&noise);
        let h = 1e-6;
        for i in 0..2 {
            let mut m = d.mean.clone();
            m[i] += h;
            let dm = g(&m, &d.std).sample(&noise);
            let mut s = d.std.clone();
            s[i] += h;
            let ds = g(&d.mean, &s).sample(&noise);
            for j in 0..2 {
                let eye = if i == j { 1.0 } else { 0.0 };
                assert!(((dm[j] - base[j]) / h - eye).abs() < 1e-8);
                assert!(((ds[j] - base[j]) / h - eye * noise[j]).abs() < 1e-8);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn kl_nonnegative_and_asymmetric(
            mp in -2.0f64..2.0, mq in -2.0f64..2.0,
            sp in 0.1f64..3.0, sq in 0.1f64..3.0,
        ) {
            let p = g(&[mp], &[sp]);
            let q = g(&[mq], &[sq]);
            let a = kl(&p, &q).unwrap();
            proptest::prop_assert!(a >= -1e-12);
            if (sp - sq).abs() > 1e-3 {
                proptest::prop_assert!(a != kl(&q, &p).unwrap());
                proptest::prop_assert!(a > 1e-12);
            }
        }
    }
}
