//! Two-component Gaussian mixture fits with a fixed mixing weight.
//!
//! Data are drawn from a known two-Gaussian mixture with proportion `p1` on
//! the first component. For each candidate weight `m` we maximise the
//! likelihood over the component means and variances by EM with `m` held
//! fixed, then compare the attained log-likelihoods across `m`.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::DetRng;

pub const VARIANCE_FLOOR: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixtureSpec {
    pub p1: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub var1: f64,
    pub var2: f64,
    pub n: usize,
    pub seed: u64,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.p1 > 0.0 && self.p1 <= 0.5) {
            return Err(Error::param(format!("p1 must be in (0, 0.5], got {}", self.p1)));
        }
        if !(self.var1 > 0.0 && self.var2 > 0.0) {
            return Err(Error::param("component variances must be positive"));
        }
        if self.n < 10 {
            return Err(Error::param(format!("need at least 10 samples, got {}", self.n)));
        }
        Ok(())
    }

    pub fn p2(&self) -> f64 {
        1.0 - self.p1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSample {
    pub values: Vec<f64>,
    /// Ground-truth component (1 or 2) of each value.
    pub components: Vec<u8>,
}

/// `floor(n·p1)` draws from the first component, the rest from the second.
pub fn sample_mixture(spec: &MixtureSpec) -> Result<MixtureSample> {
    spec.validate()?;
    let mut rng = DetRng::seed_from_u64(spec.seed);
    let n1 = (spec.n as f64 * spec.p1).floor() as usize;
    let c1 = Normal::new(spec.mu1, spec.var1.sqrt()).map_err(|e| Error::param(e.to_string()))?;
    let c2 = Normal::new(spec.mu2, spec.var2.sqrt()).map_err(|e| Error::param(e.to_string()))?;
    let mut values = Vec::with_capacity(spec.n);
    let mut components = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        if i < n1 {
            values.push(c1.sample(&mut rng));
            components.push(1);
        } else {
            values.push(c2.sample(&mut rng));
            components.push(2);
        }
    }
    Ok(MixtureSample { values, components })
}

/// Starting point for EM.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixtureInit {
    pub mu1: f64,
    pub mu2: f64,
    pub var1: f64,
    pub var2: f64,
}

impl MixtureInit {
    /// Means at the 25th and 75th percentiles, both variances at the overall
    /// variance.
    pub fn from_quantiles(data: &[f64]) -> Result<Self> {
        if data.len() < 2 {
            return Err(Error::param("need at least two points to initialise"));
        }
        let mut sorted = data.to_vec();
        sorted.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (sorted.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
        };
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        let var = (data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).max(VARIANCE_FLOOR);
        Ok(Self {
            mu1: q(0.25),
            mu2: q(0.75),
            var1: var,
            var2: var,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MixtureFit {
    pub m: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub var1: f64,
    pub var2: f64,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Log-likelihood after each iteration, starting with the initial point.
    #[serde(skip)]
    pub trace: Vec<f64>,
}

fn log_normal(x: f64, mu: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln() + (x - mu).powi(2) / var)
}

fn log_add(a: f64, b: f64) -> f64 {
    let hi = a.max(b);
    hi + ((a - hi).exp() + (b - hi).exp()).ln()
}

/// Total log-likelihood of `data` under `m·N(μ1, σ1²) + (1−m)·N(μ2, σ2²)`.
pub fn log_likelihood(data: &[f64], m: f64, mu1: f64, var1: f64, mu2: f64, var2: f64) -> f64 {
    let (lm, l1m) = (m.ln(), (1.0 - m).ln());
    data.iter()
        .map(|&x| log_add(lm + log_normal(x, mu1, var1), l1m + log_normal(x, mu2, var2)))
        .sum()
}

/// `∂ log L / ∂ μ1 = Σ (x − μ1)/σ1² · r1(x)`, where `r1` is the posterior
/// responsibility of the first component. Near zero at an EM fixed point.
pub fn dloglik_dmu1(data: &[f64], fit: &MixtureFit) -> f64 {
    let (lm, l1m) = (fit.m.ln(), (1.0 - fit.m).ln());
    data.iter()
        .map(|&x| {
            let a = lm + log_normal(x, fit.mu1, fit.var1);
            let b = l1m + log_normal(x, fit.mu2, fit.var2);
            let r1 = (a - log_add(a, b)).exp();
            (x - fit.mu1) / fit.var1 * r1
        })
        .sum()
}

/// EM over both means and variances with the mixing weight fixed at `m`.
/// Stops once an iteration improves the log-likelihood by less than `tol`.
/// If `max_iter` is reached first the last fit is returned with
/// `converged = false`.
pub fn fit_fixed_m(data: &[f64], m: f64, init: MixtureInit, max_iter: usize, tol: f64) -> Result<MixtureFit> {
    if !(m > 0.0 && m < 1.0) {
        return Err(Error::param(format!("mixing weight must be in (0, 1), got {m}")));
    }
    if data.is_empty() {
        return Err(Error::param("no data to fit"));
    }
    let (lm, l1m) = (m.ln(), (1.0 - m).ln());
    let (mut mu1, mut mu2) = (init.mu1, init.mu2);
    let (mut var1, mut var2) = (init.var1.max(VARIANCE_FLOOR), init.var2.max(VARIANCE_FLOOR));
    let mut ll = log_likelihood(data, m, mu1, var1, mu2, var2);
    let mut trace = vec![ll];
    let mut resp = vec![0.0; data.len()];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iter {
        iterations += 1;
        for (r, &x) in resp.iter_mut().zip(data) {
            let a = lm + log_normal(x, mu1, var1);
            let b = l1m + log_normal(x, mu2, var2);
            *r = (a - log_add(a, b)).exp();
        }
        let w1: f64 = resp.iter().sum();
        let w2 = data.len() as f64 - w1;
        if w1 > 0.0 {
            mu1 = resp.iter().zip(data).map(|(r, x)| r * x).sum::<f64>() / w1;
            var1 = (resp.iter().zip(data).map(|(r, x)| r * (x - mu1).powi(2)).sum::<f64>() / w1)
                .max(VARIANCE_FLOOR);
        }
        if w2 > 0.0 {
            mu2 = resp.iter().zip(data).map(|(r, x)| (1.0 - r) * x).sum::<f64>() / w2;
            var2 = (resp.iter().zip(data).map(|(r, x)| (1.0 - r) * (x - mu2).powi(2)).sum::<f64>() / w2)
                .max(VARIANCE_FLOOR);
        }
        let next = log_likelihood(data, m, mu1, var1, mu2, var2);
        trace.push(next);
        let gain = next - ll;
        ll = next;
        if gain.abs() < tol {
            converged = true;
            break;
        }
    }

    Ok(MixtureFit {
        m,
        mu1,
        mu2,
        var1,
        var2,
        loglik: ll,
        iterations,
        converged,
        trace,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Sweep {
    pub best_m: f64,
    pub fits: Vec<MixtureFit>,
}

impl Sweep {
    pub fn best(&self) -> &MixtureFit {
        self.fits
            .iter()
            .find(|f| f.m == self.best_m)
            .expect("best_m comes from the table")
    }
}

pub const SWEEP_MAX_ITER: usize = 2000;
pub const SWEEP_TOL: f64 = 1e-9;

/// Evenly spaced grid `step, 2·step, …` strictly inside `(0, 1)`.
pub fn grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step < 0.5) {
        return Err(Error::param(format!("grid step must be in (0, 0.5), got {step}")));
    }
    let count = (1.0 / step).round() as usize;
    Ok((1..count)
        .map(|i| (i as f64 * step * 1e9).round() / 1e9)
        .filter(|&m| m > 0.0 && m < 1.0)
        .collect())
}

/// Fits every grid weight from the same quantile initialisation and returns
/// the weight with the largest log-likelihood, first one on ties. Results
/// keep grid order.
pub fn sweep_m(data: &[f64], grid: &[f64]) -> Result<Sweep> {
    if grid.is_empty() {
        return Err(Error::param("empty mixing-weight grid"));
    }
    if let Some(bad) = grid.iter().find(|&&m| !(m > 0.0 && m < 1.0)) {
        return Err(Error::param(format!("grid value {bad} outside (0, 1)")));
    }
    let init = MixtureInit::from_quantiles(data)?;
    let fits = grid
        .iter()
        .map(|&m| fit_fixed_m(data, m, init, SWEEP_MAX_ITER, SWEEP_TOL))
        .collect::<Result<Vec<_>>>()?;
    let best = fits
        .iter()
        .fold(&fits[0], |best, f| if f.loglik > best.loglik { f } else { best });
    Ok(Sweep {
        best_m: best.m,
        fits,
    })
}

/// Writes `m, loglik, mu1', mu2', var1', var2', converged`.
pub fn write_sweep_csv<W: std::io::Write>(sweep: &Sweep, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["m", "loglik", "mu1'", "mu2'", "var1'", "var2'", "converged"])?;
    for f in &sweep.fits {
        w.write_record([
            f.m.to_string(),
            f.loglik.to_string(),
            f.mu1.to_string(),
            f.mu2.to_string(),
            f.var1.to_string(),
            f.var2.to_string(),
            f.converged.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(p1: f64, mu1: f64, mu2: f64, seed: u64) -> MixtureSpec {
        MixtureSpec {
            p1,
            mu1,
            mu2,
            var1: 1.0,
            var2: 1.0,
            n: 5000,
            seed,
        }
    }

    #[test]
    fn sample_counts_and_moments() {
        let s = sample_mixture(&spec(0.3, 0.0, 4.0, 1)).unwrap();
        assert_eq!(s.components.iter().filter(|&&c| c == 1).count(), 1500);
        let mean = s.values.iter().sum::<f64>() / 5000.0;
        // overall sd is sqrt(1 + p1 p2 16) ≈ 2.05
        assert!((mean - 0.7 * 4.0).abs() < 4.0 * 2.05 / 5000f64.sqrt(), "{mean}");

        let s = sample_mixture(&spec(0.5, 1.0, 1.0, 2)).unwrap();
        let mean = s.values.iter().sum::<f64>() / 5000.0;
        assert!((mean - 1.0).abs() < 4.0 / 5000f64.sqrt());
    }

    #[test]
    fn sample_validation() {
        let mut bad = spec(0.3, 0.0, 4.0, 1);
        bad.n = 9;
        assert!(sample_mixture(&bad).is_err());
        assert!(sample_mixture(&spec(0.6, 0.0, 4.0, 1)).is_err());
        assert!(sample_mixture(&spec(0.0, 0.0, 4.0, 1)).is_err());
        let mut bad = spec(0.3, 0.0, 4.0, 1);
        bad.var2 = 0.0;
        assert!(sample_mixture(&bad).is_err());
    }

    #[test]
    fn single_gaussian_fit() {
        let s = sample_mixture(&spec(0.5, 2.0, 2.0, 3)).unwrap();
        let init = MixtureInit::from_quantiles(&s.values).unwrap();
        let fit = fit_fixed_m(&s.values, 0.5, init, 20000, 1e-10).unwrap();
        // the likelihood optimum splits the components slightly around the
        // single mean, so only the mixture's first two moments are pinned
        let mean = 0.5 * (fit.mu1 + fit.mu2);
        let var = 0.5 * (fit.var1 + fit.var2) + 0.25 * (fit.mu1 - fit.mu2).powi(2);
        assert!((mean - 2.0).abs() < 4.0 / 5000f64.sqrt(), "{fit:?}");
        assert!((var - 1.0).abs() < 0.1, "{fit:?}");
        assert!((fit.mu1 - 2.0).abs() < 0.6 && (fit.mu2 - 2.0).abs() < 0.6, "{fit:?}");
    }

    #[test]
    fn matched_weight_recovers_means() {
        let s = sample_mixture(&spec(0.3, 0.0, 4.0, 4)).unwrap();
        let init = MixtureInit::from_quantiles(&s.values).unwrap();
        let fit = fit_fixed_m(&s.values, 0.3, init, 5000, 1e-10).unwrap();
        assert!(fit.converged);
        assert!((fit.mu1 - 0.0).abs() < 0.1 && (fit.mu2 - 4.0).abs() < 0.1, "{fit:?}");
        assert!(dloglik_dmu1(&s.values, &fit).abs() < 1e-2);
    }

    #[test]
    fn em_is_monotone() {
        let s = sample_mixture(&spec(0.3, 0.0, 4.0, 5)).unwrap();
        let init = MixtureInit::from_quantiles(&s.values).unwrap();
        for m in [0.1, 0.3, 0.5, 0.8] {
            let fit = fit_fixed_m(&s.values, m, init, 500, 1e-12).unwrap();
            for w in fit.trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-9, "m={m}: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn non_convergence_is_reported() {
        let s = sample_mixture(&spec(0.3, 0.0, 4.0, 6)).unwrap();
        let init = MixtureInit {
            mu1: -5.0,
            mu2: 10.0,
            var1: 1.0,
            var2: 1.0,
        };
        let fit = fit_fixed_m(&s.values, 0.3, init, 1, 1e-12).unwrap();
        assert!(!fit.converged);
        assert_eq!(fit.iterations, 1);
        assert!(fit.loglik.is_finite());
        assert!(fit_fixed_m(&s.values, 1.0, init, 1, 1e-12).is_err());
    }

    #[test]
    fn sweep_finds_true_proportion() {
        let s = sample_mixture(&spec(0.3, 0.0, 4.0, 7)).unwrap();
        let sweep = sweep_m(&s.values, &grid(0.05).unwrap()).unwrap();
        assert!((0.25..=0.35).contains(&sweep.best_m), "{}", sweep.best_m);
        assert_eq!(sweep.fits.len(), 19);
        assert!(sweep.fits.windows(2).all(|w| w[0].m < w[1].m));
    }

    #[test]
    fn true_parameters_prefer_true_weight() {
        let s = sample_mixture(&spec(0.3, 0.0, 4.0, 8)).unwrap();
        let at = |m: f64| log_likelihood(&s.values, m, 0.0, 1.0, 4.0, 1.0);
        let best = at(0.3);
        for m in grid(0.05).unwrap() {
            if (m - 0.3).abs() > 1e-9 {
                assert!(best >= at(m), "m={m}");
            }
        }
    }

    #[test]
    fn symmetric_case_is_symmetric() {
        let s = sample_mixture(&spec(0.5, 0.0, 4.0, 9)).unwrap();
        let sweep = sweep_m(&s.values, &grid(0.05).unwrap()).unwrap();
        let n = sweep.fits.len();
        let range = sweep.fits.iter().map(|f| f.loglik).fold(f64::NEG_INFINITY, f64::max)
            - sweep.fits.iter().map(|f| f.loglik).fold(f64::INFINITY, f64::min);
        for i in 0..n / 2 {
            let (a, b) = (sweep.fits[i].loglik, sweep.fits[n - 1 - i].loglik);
            assert!((a - b).abs() < 0.05 * range + 5.0, "{a} vs {b}");
        }
        assert!((sweep.best_m - 0.5).abs() <= 0.1);
    }

    #[test]
    fn single_component_is_flat() {
        let s = sample_mixture(&spec(0.5, 1.0, 1.0, 10)).unwrap();
        let sweep = sweep_m(&s.values, &grid(0.05).unwrap()).unwrap();
        let lls: Vec<f64> = sweep.fits.iter().map(|f| f.loglik).collect();
        let spread = lls.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            - lls.iter().copied().fold(f64::INFINITY, f64::min);
        // a two-parameter refinement can buy at most a few nats on 5000 points
        assert!(spread < 10.0, "{spread}");
    }

    #[test]
    fn sweep_is_deterministic_and_validates() {
        let s = sample_mixture(&spec(0.3, 0.0, 4.0, 11)).unwrap();
        let g = grid(0.1).unwrap();
        assert_eq!(sweep_m(&s.values, &g).unwrap(), sweep_m(&s.values, &g).unwrap());
        assert!(sweep_m(&s.values, &[]).is_err());
        assert!(sweep_m(&s.values, &[0.2, 1.0]).is_err());
        assert!(grid(0.0).is_err());
    }
}
