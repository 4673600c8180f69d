//! Least-squares fits: the saturated Kerr curve, exponential growth and power laws.
//!
//! Nonlinear fits use a Levenberg–Marquardt iteration with analytic Jacobians in
//! normalised units. Reported uncertainties are 1σ estimates from (JᵀWJ)⁻¹ scaled by
//! the residual variance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::constants::W_PER_CM2;
use crate::error::{Error, Result};

/// Saturation intensities (W/cm²) at or above this value mean "not saturating".
pub const I_SAT_SENTINEL: f64 = 1e12;

const MAX_RESTARTS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KerrSigma {
    pub n2: f64,
    pub i_sat: f64,
    pub offset: f64,
}

/// Fit of y(I) = n₂·I/(1 + I/I_S) + b.
///
/// `n2` is the slope per W/m² of the fitted quantity: m²/W when y is Δn, rad·m²/W
/// when y is a phase. `i_sat` is in W/cm².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KerrFit {
    pub n2: f64,
    pub i_sat: f64,
    pub offset: f64,
    pub sigma: KerrSigma,
    pub residual_rms: f64,
    /// False when the data are indistinguishable from a straight line.
    pub saturation_resolved: bool,
}

impl KerrFit {
    /// Model value at intensity `i` (W/cm²).
    pub fn eval(&self, i: f64) -> f64 {
        self.nonlinear(i) + self.offset
    }

    /// n₂·I/(1 + I/I_S) without the offset.
    pub fn nonlinear(&self, i: f64) -> f64 {
        let i_si = i * W_PER_CM2;
        if self.saturation_resolved {
            self.n2 * i_si / (1.0 + i / self.i_sat)
        } else {
            self.n2 * i_si
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub exponent: f64,
    pub prefactor: f64,
    pub sigma_exponent: f64,
    /// 1σ of ln(prefactor).
    pub sigma_log_prefactor: f64,
}

impl PowerLawFit {
    pub fn eval(&self, x: f64) -> f64 {
        self.prefactor * x.powf(self.exponent)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpGrowthFit {
    pub tau: f64,
    pub amplitude: f64,
    pub sigma_tau: f64,
    pub sigma_amplitude: f64,
    pub residual_rms: f64,
    /// The last sample lies beyond 3τ.
    pub plateau_reached: bool,
    /// σ_τ/τ < 0.5 and the amplitude is resolved above 3σ.
    pub tau_well_determined: bool,
}

impl ExpGrowthFit {
    pub fn eval(&self, t: f64) -> f64 {
        self.amplitude * (1.0 - (-t / self.tau).exp())
    }
}

/// Result of a Levenberg–Marquardt run on weighted residuals.
#[derive(Debug, Clone)]
pub(crate) struct LmOutcome {
    pub params: Vec<f64>,
    /// Σ rᵢ² at the optimum.
    pub cost: f64,
    /// (JᵀJ)⁻¹ at the optimum, if invertible.
    pub jtj_inv: Option<DMatrix<f64>>,
    pub converged: bool,
}

/// Minimises Σ rᵢ(p)². `eval` fills the residual vector and its Jacobian; `project`
/// maps a trial point back into the feasible set.
pub(crate) fn levenberg_marquardt(
    n_obs: usize,
    p0: &[f64],
    eval: &dyn Fn(&[f64], &mut DVector<f64>, &mut DMatrix<f64>),
    project: &dyn Fn(&mut [f64]),
    max_iter: usize,
) -> LmOutcome {
    let np = p0.len();
    let mut p = p0.to_vec();
    project(&mut p);
    let mut r = DVector::zeros(n_obs);
    let mut j = DMatrix::zeros(n_obs, np);
    eval(&p, &mut r, &mut j);
    let mut cost = r.norm_squared();
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut trial_r = DVector::zeros(n_obs);
    let mut trial_j = DMatrix::zeros(n_obs, np);

    if !cost.is_finite() {
        return LmOutcome { params: p, cost, jtj_inv: None, converged: false };
    }

    for _ in 0..max_iter {
        let jtj = j.transpose() * &j;
        let g = j.transpose() * &r;
        if g.amax() <= 1e-300 || cost == 0.0 {
            converged = true;
            break;
        }
        let mut improved = false;
        for _ in 0..40 {
            let mut m = jtj.clone();
            for k in 0..np {
                let d = jtj[(k, k)].max(1e-30);
                m[(k, k)] += lambda * d;
            }
            // Parameters the projection would clamp are held fixed and the step is
            // re-solved for the rest, so a minimum on a bound is reached directly.
            let mut fixed = vec![false; np];
            let mut trial = Vec::new();
            let mut solved = false;
            for _ in 0..=np {
                let mut mm = m.clone();
                let mut rhs = -&g;
                for k in (0..np).filter(|&k| fixed[k]) {
                    mm.row_mut(k).fill(0.0);
                    mm.column_mut(k).fill(0.0);
                    mm[(k, k)] = 1.0;
                    rhs[k] = 0.0;
                }
                let step = match mm.clone().cholesky() {
                    Some(ch) => ch.solve(&rhs),
                    None => match mm.lu().solve(&rhs) {
                        Some(s) => s,
                        None => break,
                    },
                };
                let raw: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
                trial = raw.clone();
                project(&mut trial);
                solved = true;
                let clamped: Vec<usize> = (0..np).filter(|&k| !fixed[k] && trial[k] != raw[k]).collect();
                if clamped.is_empty() {
                    break;
                }
                for k in clamped {
                    fixed[k] = true;
                }
            }
            if !solved {
                lambda *= 10.0;
                continue;
            }
            eval(&trial, &mut trial_r, &mut trial_j);
            let trial_cost = trial_r.norm_squared();
            if trial_cost.is_finite() && trial_cost <= cost {
                let dp: f64 = trial.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let pn: f64 = p.iter().map(|a| a * a).sum::<f64>().sqrt();
                let rel_drop = (cost - trial_cost) / cost.max(1e-300);
                p = trial;
                std::mem::swap(&mut r, &mut trial_r);
                std::mem::swap(&mut j, &mut trial_j);
                cost = trial_cost;
                lambda = (lambda * 0.3).max(1e-12);
                improved = true;
                if dp <= 1e-14 * (pn + 1e-14) || rel_drop < 1e-15 {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
            if lambda > 1e16 {
                break;
            }
        }
        if !improved {
            // No downhill step exists at any damping: a (local) minimum.
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }
    let jtj = j.transpose() * &j;
    let jtj_inv = jtj.try_inverse().filter(|m| m.iter().all(|x| x.is_finite()));
    LmOutcome { params: p, cost, jtj_inv, converged }
}

fn check_finite(points: &[(f64, f64)]) -> Result<()> {
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::arg("non-finite data point"));
    }
    Ok(())
}

/// Fits y = n₂·I/(1 + I/I_S) + b to (I in W/cm², y) pairs. `sigma` optionally gives
/// per-point standard deviations used as weights 1/σ².
pub fn fit_saturated(points: &[(f64, f64)], sigma: Option<&[f64]>) -> Result<KerrFit> {
    if points.len() < 4 {
        return Err(Error::arg("fit_saturated needs at least 4 points"));
    }
    check_finite(points)?;
    if let Some(s) = sigma {
        if s.len() != points.len() || s.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::arg("sigma must be positive and match the data length"));
        }
    }
    let mut pts: Vec<(f64, f64, f64)> = points
        .iter()
        .enumerate()
        .map(|(k, &(i, y))| (i, y, sigma.map_or(1.0, |s| 1.0 / s[k])))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let i_min = pts[0].0;
    let i_max = pts[pts.len() - 1].0;
    if i_min < 0.0 || !(i_max > 0.0) {
        return Err(Error::arg("intensities must be non-negative and not all zero"));
    }
    if i_min > 0.0 && i_max / i_min < 5.0 {
        return Err(Error::arg("intensities must span at least a factor 5"));
    }

    let y_scale = pts.iter().map(|p| p.1.abs()).fold(0.0, f64::max).max(1e-300);
    let u: Vec<f64> = pts.iter().map(|p| p.0 / i_max).collect();
    let v: Vec<f64> = pts.iter().map(|p| p.1 / y_scale).collect();
    let w: Vec<f64> = pts.iter().map(|p| p.2).collect();
    let n = pts.len();

    // Model in normalised units: v = a·u/(1 + r·u) + c, r = I_max/I_S ≥ 0.
    let eval = |p: &[f64], r: &mut DVector<f64>, jac: &mut DMatrix<f64>| {
        let (a, rr, c) = (p[0], p[1], p[2]);
        for k in 0..n {
            let d = 1.0 + rr * u[k];
            let m = a * u[k] / d + c;
            r[k] = w[k] * (m - v[k]);
            jac[(k, 0)] = w[k] * u[k] / d;
            jac[(k, 1)] = -w[k] * a * u[k] * u[k] / (d * d);
            jac[(k, 2)] = w[k];
        }
    };
    let project = |p: &mut [f64]| {
        if !(p[1] >= 0.0) {
            p[1] = 0.0;
        }
    };

    // Deterministic initial guess: for each r on a log grid the model is linear in
    // (a, c); keep the r with the lowest weighted cost.
    let linear = |r: f64| {
        let (mut sw, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for k in 0..n {
            let ww = w[k] * w[k];
            let x = u[k] / (1.0 + r * u[k]);
            sw += ww;
            sx += ww * x;
            sy += ww * v[k];
            sxx += ww * x * x;
            sxy += ww * x * v[k];
        }
        let det = sw * sxx - sx * sx;
        if !(det.abs() > 1e-300) {
            return None;
        }
        let a = (sw * sxy - sx * sy) / det;
        let c = (sy - a * sx) / sw;
        let cost: f64 = (0..n).map(|k| (w[k] * (a * u[k] / (1.0 + r * u[k]) + c - v[k])).powi(2)).sum();
        Some((cost, a, c))
    };
    let mut r0 = 0.0;
    let (mut a0, mut c0, mut best_cost) = (0.0, 0.0, f64::INFINITY);
    for r in std::iter::once(0.0).chain((0..=30).map(|k| 10f64.powf(-2.0 + k as f64 * 0.15))) {
        if let Some((cost, a, c)) = linear(r) {
            if cost < best_cost {
                (best_cost, r0, a0, c0) = (cost, r, a, c);
            }
        }
    }
    if r0 == 0.0 {
        r0 = 1e-3;
    }

    let mut best: Option<LmOutcome> = None;
    for (attempt, factor) in [1.0, 0.1, 10.0, 0.01, 100.0].iter().enumerate().take(MAX_RESTARTS) {
        let r_start = r0 * factor;
        let p0 = [a0 * (1.0 + r_start * 0.5) / (1.0 + r0 * 0.5), r_start, c0];
        let out = levenberg_marquardt(n, &p0, &eval, &project, 500);
        let better = best.as_ref().is_none_or(|b| out.cost < b.cost);
        let done = out.converged && out.jtj_inv.is_some();
        if better {
            best = Some(out);
        }
        if done && attempt == 0 {
            break;
        }
    }
    let out = best.expect("at least one attempt");
    if !out.converged || !out.cost.is_finite() {
        let rms = (out.cost / n as f64).sqrt() * y_scale;
        return Err(Error::FitNonConvergence {
            reason: "saturated-model fit did not converge after restarts".into(),
            residual_rms: rms,
        });
    }
    let (a, r, c) = (out.params[0], out.params[1], out.params[2]);
    let dof = (n as f64 - 3.0).max(1.0);
    let s2 = out.cost / dof;
    let residual_rms = unweighted_rms(&u, &v, |x| a * x / (1.0 + r * x) + c) * y_scale;

    // n₂ per W/m².
    let to_n2 = y_scale / (i_max * W_PER_CM2);
    let saturation_resolved = r * I_SAT_SENTINEL > i_max;
    let i_sat = if saturation_resolved { i_max / r } else { I_SAT_SENTINEL };

    let (sa, sr, sc) = match &out.jtj_inv {
        Some(cov) => (
            (cov[(0, 0)] * s2).max(0.0).sqrt(),
            (cov[(1, 1)] * s2).max(0.0).sqrt(),
            (cov[(2, 2)] * s2).max(0.0).sqrt(),
        ),
        None => {
            // r pinned at its bound: treat the model as linear in (a, c).
            let cov = linear_cov(&u, &w);
            match cov {
                Some((caa, ccc)) => ((caa * s2).sqrt(), 0.0, (ccc * s2).sqrt()),
                None => (f64::MAX, f64::MAX, f64::MAX),
            }
        }
    };
    let sigma_i_sat = if saturation_resolved {
        (i_max * sr / (r * r)).min(f64::MAX)
    } else {
        I_SAT_SENTINEL
    };
    Ok(KerrFit {
        n2: a * to_n2,
        i_sat,
        offset: c * y_scale,
        sigma: KerrSigma {
            n2: sa * to_n2,
            i_sat: sigma_i_sat,
            offset: sc * y_scale,
        },
        residual_rms,
        saturation_resolved,
    })
}

fn unweighted_rms(u: &[f64], v: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    let s: f64 = u.iter().zip(v).map(|(&x, &y)| (f(x) - y).powi(2)).sum();
    (s / u.len() as f64).sqrt()
}

/// Diagonal of (XᵀWX)⁻¹ for X = [u, 1].
fn linear_cov(u: &[f64], w: &[f64]) -> Option<(f64, f64)> {
    let (mut s00, mut s01, mut s11) = (0.0, 0.0, 0.0);
    for (&x, &wk) in u.iter().zip(w) {
        let w2 = wk * wk;
        s00 += w2 * x * x;
        s01 += w2 * x;
        s11 += w2;
    }
    let det = s00 * s11 - s01 * s01;
    if det.abs() <= 1e-300 {
        return None;
    }
    Some((s11 / det, s00 / det))
}

/// Ordinary least squares of ln y on ln x.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    power_law_ols(points, 4)
}

/// [`fit_power_law`] with a caller-chosen minimum number of points (at least 3).
pub(crate) fn power_law_ols(points: &[(f64, f64)], min_points: usize) -> Result<PowerLawFit> {
    if points.len() < min_points.max(3) {
        return Err(Error::arg(format!("power-law fit needs at least {} points", min_points.max(3))));
    }
    check_finite(points)?;
    if points.iter().any(|&(x, y)| !(x > 0.0) || !(y > 0.0)) {
        return Err(Error::arg("power-law fit requires strictly positive x and y"));
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::arg("power-law fit needs at least two distinct x values"));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let s2 = rss / (n - 2.0);
    Ok(PowerLawFit {
        exponent: slope,
        prefactor: intercept.exp(),
        sigma_exponent: (s2 / sxx).sqrt(),
        sigma_log_prefactor: (s2 * (1.0 / n + mx * mx / sxx)).sqrt(),
    })
}

/// Fits y = A(1 − e^{−t/τ}).
pub fn fit_exp_growth(points: &[(f64, f64)]) -> Result<ExpGrowthFit> {
    if points.len() < 4 {
        return Err(Error::arg("fit_exp_growth needs at least 4 points"));
    }
    check_finite(points)?;
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    if pts[0].0 < 0.0 {
        return Err(Error::arg("times must be non-negative"));
    }
    let t_max = pts[pts.len() - 1].0;
    if !(t_max > 0.0) {
        return Err(Error::arg("times must not all be zero"));
    }
    let y_scale = pts.iter().map(|p| p.1.abs()).fold(0.0, f64::max);
    let n = pts.len();
    let tn: Vec<f64> = pts.iter().map(|p| p.0 / t_max).collect();

    if y_scale == 0.0 {
        return Ok(ExpGrowthFit {
            tau: t_max,
            amplitude: 0.0,
            sigma_tau: f64::INFINITY,
            sigma_amplitude: 0.0,
            residual_rms: 0.0,
            plateau_reached: false,
            tau_well_determined: false,
        });
    }
    let yn: Vec<f64> = pts.iter().map(|p| p.1 / y_scale).collect();

    // Plateau estimate from the latest samples, τ from the 63 % crossing.
    let tail = (n / 4).max(1);
    let a0 = yn[n - tail..].iter().sum::<f64>() / tail as f64;
    let target = (1.0 - (-1.0f64).exp()) * a0;
    let mut tau0 = 0.3;
    for k in 1..n {
        let (y0, y1) = (yn[k - 1], yn[k]);
        if (y0 - target) * (y1 - target) <= 0.0 && y1 != y0 {
            tau0 = tn[k - 1] + (target - y0) / (y1 - y0) * (tn[k] - tn[k - 1]);
            break;
        }
    }
    let tau0 = tau0.max(1e-3);

    // Parameters (A, ln τ) so that τ stays positive.
    let eval = |p: &[f64], r: &mut DVector<f64>, jac: &mut DMatrix<f64>| {
        let (a, lt) = (p[0], p[1]);
        let tau = lt.exp();
        for k in 0..n {
            let e = (-tn[k] / tau).exp();
            r[k] = a * (1.0 - e) - yn[k];
            jac[(k, 0)] = 1.0 - e;
            // ∂/∂lnτ of −A e^{−t/τ} = −A e^{−t/τ}·(t/τ)
            jac[(k, 1)] = -a * e * tn[k] / tau;
        }
    };
    let project = |p: &mut [f64]| {
        p[1] = p[1].clamp(-30.0, 30.0);
    };
    let mut best: Option<LmOutcome> = None;
    for factor in [1.0, 0.3, 3.0, 0.1, 10.0].iter().take(MAX_RESTARTS) {
        let out = levenberg_marquardt(n, &[a0, (tau0 * factor).ln()], &eval, &project, 500);
        let ok = out.converged && out.jtj_inv.is_some();
        if best.as_ref().is_none_or(|b| out.cost < b.cost) {
            best = Some(out);
        }
        if ok {
            break;
        }
    }
    let out = best.expect("at least one attempt");
    if !out.cost.is_finite() {
        return Err(Error::FitNonConvergence {
            reason: "exponential-growth fit diverged".into(),
            residual_rms: f64::NAN,
        });
    }
    let (a, lt) = (out.params[0], out.params[1]);
    let tau = lt.exp() * t_max;
    let dof = (n as f64 - 2.0).max(1.0);
    let s2 = out.cost / dof;
    let (sa, slt) = match &out.jtj_inv {
        Some(cov) => ((cov[(0, 0)] * s2).max(0.0).sqrt(), (cov[(1, 1)] * s2).max(0.0).sqrt()),
        None => (f64::INFINITY, f64::INFINITY),
    };
    let amplitude = a * y_scale;
    let sigma_amplitude = sa * y_scale;
    let sigma_tau = slt * tau;
    let residual_rms = (out.cost / n as f64).sqrt() * y_scale;
    Ok(ExpGrowthFit {
        tau,
        amplitude,
        sigma_tau,
        sigma_amplitude,
        residual_rms,
        plateau_reached: t_max >= 3.0 * tau,
        tau_well_determined: sigma_tau.is_finite()
            && sigma_tau < 0.5 * tau
            && amplitude.abs() > 3.0 * sigma_amplitude,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn kerr(n2_cm2: f64, i_s: f64, b: f64, i: f64) -> f64 {
        n2_cm2 * i / (1.0 + i / i_s) + b
    }

    #[test]
    fn exact_saturated_data_recovered() {
        let (n2, is, b) = (-3e-6, 40.0, 2e-7);
        let pts: Vec<_> = (0..12).map(|k| {
            let i = 2.0 + 18.0 * k as f64;
            (i, kerr(n2, is, b, i))
        }).collect();
        let fit = fit_saturated(&pts, None).unwrap();
        assert!((fit.n2 * W_PER_CM2 / n2 - 1.0).abs() < 1e-9, "{fit:?}");
        assert!((fit.i_sat / is - 1.0).abs() < 1e-9);
        assert!((fit.offset - b).abs() < 1e-12 * n2.abs() * 200.0);
        let scale = pts.iter().map(|p| p.1.abs()).fold(0.0, f64::max);
        assert!(fit.residual_rms < 1e-12 * scale);
        assert!(fit.saturation_resolved);
    }

    #[test]
    fn linear_data_hits_sentinel() {
        let pts: Vec<_> = (1..=8).map(|k| (k as f64 * 10.0, 0.5 * k as f64 * 10.0 - 1.0)).collect();
        let fit = fit_saturated(&pts, None).unwrap();
        assert!(fit.i_sat >= I_SAT_SENTINEL);
        assert!(!fit.saturation_resolved);
        assert!((fit.n2 * W_PER_CM2 - 0.5).abs() < 1e-9);
        assert!((fit.offset + 1.0).abs() < 1e-9);
        assert!(fit.sigma.n2.is_finite() && fit.sigma.i_sat.is_finite());
    }

    #[test]
    fn weak_saturation_matches_linear_regression() {
        let pts: Vec<_> = (1..=10).map(|k| {
            let i = k as f64 * 0.1;
            (i, kerr(2.0, 1e4, 0.1, i))
        }).collect();
        let fit = fit_saturated(&pts, None).unwrap();
        // slope of an ordinary regression through the same data
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let slope = sxy / sxx;
        assert!((fit.n2 * W_PER_CM2 / slope - 1.0).abs() < 0.01);
    }

    #[test]
    fn noisy_saturated_within_one_sigma_mostly() {
        let (n2, is, b) = (1.5, 60.0, 0.3);
        let mut inside = [0usize; 3];
        let trials = 200;
        for seed in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let peak = kerr(n2, is, 0.0, 300.0);
            let noise = Normal::new(0.0, 0.01 * peak).unwrap();
            let pts: Vec<_> = (0..60).map(|k| {
                let i = 5.0 + 5.0 * k as f64;
                (i, kerr(n2, is, b, i) + noise.sample(&mut rng))
            }).collect();
            let fit = fit_saturated(&pts, None).unwrap();
            let got = [fit.n2 * W_PER_CM2, fit.i_sat, fit.offset];
            let sig = [fit.sigma.n2 * W_PER_CM2, fit.sigma.i_sat, fit.sigma.offset];
            for (k, want) in [n2, is, b].iter().enumerate() {
                if (got[k] - want).abs() <= sig[k] {
                    inside[k] += 1;
                }
            }
        }
        // 1σ coverage ≈ 68 %
        for c in inside {
            let frac = c as f64 / trials as f64;
            assert!((0.58..0.78).contains(&frac), "{inside:?}");
        }
    }

    #[test]
    fn saturated_guards() {
        assert!(fit_saturated(&[(1.0, 1.0), (2.0, 2.0), (3.0, 3.0)], None).is_err());
        assert!(fit_saturated(&[(1.0, 1.0), (2.0, 2.0), (3.0, 3.0), (4.0, 4.0)], None).is_err());
        assert!(fit_saturated(&[(1.0, 1.0), (2.0, f64::NAN), (3.0, 3.0), (9.0, 4.0)], None).is_err());
    }

    #[test]
    fn power_law_exact() {
        let pts: Vec<_> = [0.3, 0.5, 0.9, 1.4, 1.8].iter().map(|&x: &f64| (x, 3.0 * x * x)).collect();
        let fit = fit_power_law(&pts).unwrap();
        assert!((fit.exponent - 2.0).abs() < 1e-12);
        assert!((fit.prefactor - 3.0).abs() < 1e-12);
        let lin: Vec<_> = (1..6).map(|k| (k as f64, 7.0 * k as f64)).collect();
        assert!((fit_power_law(&lin).unwrap().exponent - 1.0).abs() < 1e-12);
        assert!(fit_power_law(&[(1.0, 1.0), (2.0, -1.0), (3.0, 1.0), (4.0, 1.0)]).is_err());
    }

    #[test]
    fn exp_growth_exact() {
        let tau = 0.8e-6;
        let pts: Vec<_> = (0..25).map(|k| {
            let t = k as f64 * 0.2e-6;
            (t, -2e-5 * (1.0 - (-t / tau).exp()))
        }).collect();
        let fit = fit_exp_growth(&pts).unwrap();
        assert!((fit.tau / tau - 1.0).abs() < 1e-6, "{fit:?}");
        assert!((fit.amplitude / -2e-5 - 1.0).abs() < 1e-6);
        assert!(fit.plateau_reached && fit.tau_well_determined);
    }

    #[test]
    fn exp_growth_noisy_coverage() {
        let tau = 0.6e-6;
        let trials = 200;
        let mut inside = 0;
        for seed in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let noise = Normal::new(0.0, 0.05).unwrap();
            let pts: Vec<_> = (1..=30).map(|k| {
                let t = k as f64 * 0.1e-6;
                (t, 1.0 - (-t / tau).exp() + noise.sample(&mut rng))
            }).collect();
            let fit = fit_exp_growth(&pts).unwrap();
            if (fit.tau - tau).abs() <= fit.sigma_tau {
                inside += 1;
            }
        }
        let frac = inside as f64 / trials as f64;
        assert!((0.55..0.8).contains(&frac), "{frac}");
    }

    #[test]
    fn exp_growth_constant_data_flagged() {
        let pts: Vec<_> = (0..10).map(|k| (k as f64 * 1e-7, 0.0)).collect();
        let fit = fit_exp_growth(&pts).unwrap();
        assert_eq!(fit.amplitude, 0.0);
        assert!(!fit.tau_well_determined);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(500))]

            #[test]
            fn power_law_scale_equivariant(
                p in 0.2f64..2.5, c in 0.01f64..100.0, a in 0.01f64..100.0, b in 0.01f64..100.0,
                jitter in proptest::collection::vec(-0.05f64..0.05, 6),
            ) {
                let xs: [f64; 6] = [0.3, 0.45, 0.7, 1.0, 1.4, 1.8];
                let pts: Vec<_> = xs.iter().zip(&jitter).map(|(&x, j)| (x, c * x.powf(p) * (1.0 + j))).collect();
                let scaled: Vec<_> = pts.iter().map(|&(x, y)| (a * x, b * y)).collect();
                let f1 = fit_power_law(&pts).unwrap();
                let f2 = fit_power_law(&scaled).unwrap();
                prop_assert!((f1.exponent - f2.exponent).abs() < 1e-9);
                prop_assert!(f1.sigma_exponent >= 0.0);
            }

            #[test]
            fn kerr_fit_invariants(
                n2 in -10.0f64..10.0, is_ in 5.0f64..2000.0, b in -1.0f64..1.0,
                noise in proptest::collection::vec(-0.01f64..0.01, 12),
            ) {
                prop_assume!(n2.abs() > 1e-3);
                let pts: Vec<_> = (0..12).map(|k| {
                    let i = 1.0 + 20.0 * k as f64;
                    let clean = kerr(n2, is_, b, i);
                    (i, clean + noise[k] * kerr(n2, is_, 0.0, 221.0).abs())
                }).collect();
                let fit = fit_saturated(&pts, None).unwrap();
                prop_assert!(fit.i_sat > 0.0);
                for s in [fit.sigma.n2, fit.sigma.i_sat, fit.sigma.offset] {
                    prop_assert!(s.is_finite() && s >= 0.0);
                }
                let again = fit_saturated(&pts, None).unwrap();
                prop_assert_eq!(fit, again);
            }

            #[test]
            fn exp_growth_tau_positive(
                tau in 0.1e-6f64..3e-6, amp in -1.0f64..1.0,
                noise in proptest::collection::vec(-0.02f64..0.02, 20),
            ) {
                let pts: Vec<_> = (1..=20).map(|k| {
                    let t = k as f64 * 0.25e-6;
                    (t, amp * (1.0 - (-t / tau).exp()) + noise[k - 1])
                }).collect();
                let fit = fit_exp_growth(&pts).unwrap();
                prop_assert!(fit.tau > 0.0);
            }
        }
    }
}
