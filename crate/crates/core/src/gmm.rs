//! Two-component 1-D Gaussian mixture fitted by EM, used to split samples by
//! loss into a low-loss ("clean") and a high-loss component.

use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    pub max_iters: usize,
    /// Stop once the log-likelihood gain drops below this.
    pub tol: f64,
    pub variance_floor: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-6,
            variance_floor: 1e-8,
        }
    }
}

/// Component 0 always has the lower mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gmm1d {
    pub weights: [f64; 2],
    pub means: [f64; 2],
    pub variances: [f64; 2],
    /// Total log-likelihood before each M-step; the last entry belongs to the
    /// returned parameters.
    pub log_likelihood: Vec<f64>,
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

impl Gmm1d {
    pub fn from_parts(weights: [f64; 2], means: [f64; 2], variances: [f64; 2]) -> Result<Self> {
        if weights.iter().any(|w| !(*w > 0.0 && *w < 1.0)) || ((weights[0] + weights[1]) - 1.0).abs() > 1e-12 {
            return Err(Error::param("weights", format!("{weights:?}"), "must lie in (0, 1) and sum to 1"));
        }
        if variances.iter().any(|v| !(*v > 0.0) || !v.is_finite()) || means.iter().any(|m| !m.is_finite()) {
            return Err(Error::param("variances", format!("{variances:?}"), "must be positive and finite"));
        }
        let mut g = Self {
            weights,
            means,
            variances,
            log_likelihood: Vec::new(),
        };
        g.canonicalize();
        Ok(g)
    }

    fn canonicalize(&mut self) {
        if self.means[0] > self.means[1] {
            self.weights.swap(0, 1);
            self.means.swap(0, 1);
            self.variances.swap(0, 1);
        }
    }

    /// `ln π_k + ln N(x; μ_k, σ²_k)` for both components.
    fn log_joint(&self, x: f64) -> [f64; 2] {
        std::array::from_fn(|k| {
            let d = x - self.means[k];
            self.weights[k].ln() - 0.5 * (LN_2PI + self.variances[k].ln()) - d * d / (2.0 * self.variances[k])
        })
    }

    /// Posterior of the low-mean component. Always strictly positive: deep
    /// tails saturate at the smallest normal `f64` instead of underflowing.
    pub fn posterior_clean(&self, x: f64) -> f64 {
        let [a, b] = self.log_joint(x);
        if a == b {
            return 0.5;
        }
        // 1 / (1 + e^{b−a}) evaluated on the side that cannot overflow.
        if b > a {
            let e = (a - b).exp();
            (e / (1.0 + e)).max(f64::MIN_POSITIVE)
        } else {
            1.0 / (1.0 + (b - a).exp())
        }
    }

    pub fn posteriors(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|&v| self.posterior_clean(v)).collect()
    }

    pub fn log_likelihood_of(&self, values: &[f64]) -> f64 {
        values.iter().map(|&x| log_sum_exp(self.log_joint(x))).sum()
    }
}

fn log_sum_exp([a, b]: [f64; 2]) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// EM from a deterministic start: means at min and max, equal weights, both
/// variances at the sample variance.
pub fn fit_em(values: &[f64], opts: &EmOptions) -> Result<Gmm1d> {
    if values.len() < 2 {
        return Err(Error::EmptyInput("EM needs at least two values"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("values", "non-finite", "EM input must be finite"));
    }
    if !(opts.variance_floor > 0.0) || !(opts.tol >= 0.0) {
        return Err(Error::param("em options", format!("{opts:?}"), "floor must be positive and tol non-negative"));
    }
    let n = values.len() as f64;
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if lo == hi {
        return Err(Error::Degenerate(format!("all {} EM inputs equal {lo}", values.len())));
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).max(opts.variance_floor);

    let mut g = Gmm1d {
        weights: [0.5, 0.5],
        means: [lo, hi],
        variances: [var, var],
        log_likelihood: Vec::new(),
    };
    let mut resp = vec![0.0f64; values.len()];
    let mut prev = f64::NEG_INFINITY;
    for iter in 0..=opts.max_iters {
        // E-step: responsibilities of component 0.
        let mut ll = 0.0;
        for (r, &x) in resp.iter_mut().zip(values) {
            let lj = g.log_joint(x);
            let total = log_sum_exp(lj);
            ll += total;
            *r = (lj[0] - total).exp();
        }
        g.log_likelihood.push(ll);
        if iter == opts.max_iters || (iter > 0 && ll - prev < opts.tol) {
            break;
        }
        prev = ll;

        // M-step.
        let n0: f64 = resp.iter().sum();
        let n1 = n - n0;
        let sums = values
            .iter()
            .zip(&resp)
            .fold([0.0f64; 2], |[a, b], (&x, &r)| [a + r * x, b + (1.0 - r) * x]);
        let counts = [n0, n1];
        let means: [f64; 2] = std::array::from_fn(|k| if counts[k] > 0.0 { sums[k] / counts[k] } else { g.means[k] });
        let mut sq = [0.0f64; 2];
        for (&x, &r) in values.iter().zip(&resp) {
            sq[0] += r * (x - means[0]) * (x - means[0]);
            sq[1] += (1.0 - r) * (x - means[1]) * (x - means[1]);
        }
        for k in 0..2 {
            // A component with no mass keeps its previous shape.
            if counts[k] > 0.0 {
                g.means[k] = means[k];
                g.variances[k] = (sq[k] / counts[k]).max(opts.variance_floor);
            }
            g.weights[k] = (counts[k] / n).clamp(f64::MIN_POSITIVE, 1.0);
        }
        let total = g.weights[0] + g.weights[1];
        g.weights[0] /= total;
        g.weights[1] /= total;
    }
    g.canonicalize();
    Ok(g)
}

/// The subset of samples whose clean posterior strictly exceeds `p_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub kept: Vec<usize>,
    pub posteriors: Vec<f64>,
    pub p_t: f64,
}

pub fn split_by_threshold(dataset: &LabeledDataset, posteriors: Vec<f64>, p_t: f64) -> Result<SplitResult> {
    if posteriors.len() != dataset.len() {
        return Err(Error::LengthMismatch {
            what: "posteriors",
            expected: dataset.len(),
            found: posteriors.len(),
        });
    }
    if !(0.0..=1.0).contains(&p_t) {
        return Err(Error::param("p_t", p_t, "must lie in [0, 1]"));
    }
    let kept = posteriors
        .iter()
        .enumerate()
        .filter(|(_, &g)| g > p_t)
        .map(|(i, _)| i)
        .collect();
    Ok(SplitResult { kept, posteriors, p_t })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::make_toy_biased;
    use rand::Rng as _;
    use rand_distr::{Distribution, Normal};

    fn planted(n: usize, m0: f64, m1: f64, sd: f64, seed: u64) -> Vec<f64> {
        let mut rng = crate::rng::seeded(seed, 99);
        let a = Normal::new(m0, sd).unwrap();
        let b = Normal::new(m1, sd).unwrap();
        (0..n)
            .map(|i| if i % 2 == 0 { a.sample(&mut rng) } else { b.sample(&mut rng) })
            .collect()
    }

    #[test]
    fn recovers_planted_means() {
        let v = planted(1000, 0.01, 5.0, 0.05, 3);
        let g = fit_em(&v, &EmOptions::default()).unwrap();
        assert!((g.means[0] - 0.01).abs() < 0.05, "{:?}", g.means);
        assert!((g.means[1] - 5.0).abs() < 0.05, "{:?}", g.means);
        assert!((g.weights[0] - 0.5).abs() < 1e-3);
    }

    #[test]
    fn trace_is_nondecreasing() {
        let mut rng = crate::rng::seeded(5, 99);
        for _ in 0..20 {
            let v: Vec<f64> = (0..200).map(|_| rng.random::<f64>().powi(3) * 4.0).collect();
            let g = fit_em(&v, &EmOptions::default()).unwrap();
            for w in g.log_likelihood.windows(2) {
                assert!(w[1] >= w[0] - 1e-9, "{w:?}");
            }
        }
    }

    #[test]
    fn mirrored_input_mirrors_means() {
        let v = planted(400, 0.5, 3.0, 0.2, 8);
        let g = fit_em(&v, &EmOptions::default()).unwrap();
        let mirrored: Vec<f64> = v.iter().map(|x| 10.0 - x).collect();
        let h = fit_em(&mirrored, &EmOptions::default()).unwrap();
        assert!((h.means[0] - (10.0 - g.means[1])).abs() < 1e-6);
        assert!((h.means[1] - (10.0 - g.means[0])).abs() < 1e-6);
    }

    #[test]
    fn identical_values_are_degenerate() {
        assert!(matches!(fit_em(&[2.0; 10], &EmOptions::default()), Err(Error::Degenerate(_))));
        assert!(fit_em(&[1.0], &EmOptions::default()).is_err());
    }

    #[test]
    fn posterior_symmetry_and_extremes() {
        let g = Gmm1d::from_parts([0.5, 0.5], [0.0, 2.0], [1.0, 1.0]).unwrap();
        assert_eq!(g.posterior_clean(1.0), 0.5);
        let sep = Gmm1d::from_parts([0.5, 0.5], [0.0, 20.0], [1.0, 1.0]).unwrap();
        assert!(sep.posterior_clean(0.0) > 0.999);
        assert!(sep.posterior_clean(20.0) < 0.001);
        // Far tails never produce NaN.
        assert!(sep.posterior_clean(1e6).is_finite());
        assert!(sep.posterior_clean(-1e6).is_finite());
    }

    #[test]
    fn split_thresholds() {
        let d = make_toy_biased(6, 0.0, 0.0, 1).unwrap();
        let post = vec![0.0, 0.2, 0.5, 0.9, 1.0, 0.5];
        assert!(split_by_threshold(&d, post.clone(), 1.0).unwrap().kept.is_empty());
        assert_eq!(split_by_threshold(&d, post.clone(), 0.0).unwrap().kept, vec![1, 2, 3, 4, 5]);
        assert_eq!(split_by_threshold(&d, post.clone(), 0.5).unwrap().kept, vec![3, 4]);
        assert!(split_by_threshold(&d, vec![0.1], 0.5).is_err());
    }
}
