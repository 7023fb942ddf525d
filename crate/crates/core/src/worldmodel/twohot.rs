//! Symlog compression and two-hot discrete regression.

#[inline]
pub fn symlog(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}

#[inline]
pub fn symexp(y: f64) -> f64 {
    y.signum() * y.abs().exp_m1()
}

/// Softmax with max-subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

/// Log-softmax, stable for large logits.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Equally spaced bins over `[min, max]` in symlog space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoHot {
    pub num_bins: usize,
    pub min: f64,
    pub max: f64,
}

impl TwoHot {
    pub fn new(num_bins: usize, min: f64, max: f64) -> Self {
        assert!(num_bins >= 2 && max > min);
        TwoHot { num_bins, min, max }
    }

    #[inline]
    pub fn bin_value(&self, k: usize) -> f64 {
        self.min + k as f64 * (self.max - self.min) / (self.num_bins - 1) as f64
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..self.num_bins).map(|k| self.bin_value(k)).collect()
    }

    /// Splits mass between the two bins bracketing `symlog(v)`, clamped to the grid.
    pub fn encode(&self, v: f64) -> Vec<f64> {
        let mut w = vec![0.0; self.num_bins];
        let y = symlog(v).clamp(self.min, self.max);
        let pos = (y - self.min) * (self.num_bins - 1) as f64 / (self.max - self.min);
        let lo = (pos.floor() as usize).min(self.num_bins - 1);
        let frac = pos - lo as f64;
        if lo == self.num_bins - 1 || frac == 0.0 {
            w[lo] = 1.0;
        } else {
            w[lo] = 1.0 - frac;
            w[lo + 1] = frac;
        }
        w
    }

    /// Expected bin value under `softmax(logits)`, mapped back through symexp.
    pub fn decode(&self, logits: &[f64]) -> f64 {
        debug_assert_eq!(logits.len(), self.num_bins);
        let p = softmax(logits);
        let y: f64 = p.iter().enumerate().map(|(k, pk)| pk * self.bin_value(k)).sum();
        symexp(y)
    }

    /// Decoded value and its gradient with respect to the logits.
    pub fn decode_with_grad(&self, logits: &[f64]) -> (f64, Vec<f64>) {
        let p = softmax(logits);
        let y: f64 = p.iter().enumerate().map(|(k, pk)| pk * self.bin_value(k)).sum();
        let dv_dy = y.abs().exp();
        let grad = p
            .iter()
            .enumerate()
            .map(|(k, pk)| dv_dy * pk * (self.bin_value(k) - y))
            .collect();
        (symexp(y), grad)
    }

    /// Cross-entropy of `softmax(logits)` against `target` weights, and its
    /// logit gradient `softmax(logits) - target`.
    pub fn cross_entropy(logits: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
        let lsm = log_softmax(logits);
        let ce = -lsm.iter().zip(target).map(|(l, t)| if *t == 0.0 { 0.0 } else { t * l }).sum::<f64>();
        let grad = lsm.iter().zip(target).map(|(l, t)| l.exp() - t).collect();
        (ce, grad)
    }
}
