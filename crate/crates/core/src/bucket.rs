//! Bucket-detector retrieval: the mean signal of a small region at the beam centre is
//! recorded while the signal intensity is ramped, and the fringe motion is fitted with a
//! cosine whose argument is the saturated non-linear phase.

use std::borrow::Borrow;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::constants::W_PER_CM2;
use crate::error::{Error, Result};
use crate::fitting::{levenberg_marquardt, KerrFit, KerrSigma, I_SAT_SENTINEL};
use crate::interferometry::Interferogram;

/// Region whose mean pixel value is the bucket signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Roi {
    /// `size` pixels centred on `center` (x, y); even sizes extend one pixel less to
    /// the lower side.
    Window { center: [usize; 2], size: [usize; 2] },
    /// The whole frame.
    Photodiode,
}

impl Roi {
    /// Pixel bounds (x0, y0, x1, y1), exclusive upper.
    pub fn bounds(&self, width: usize, height: usize) -> Result<(usize, usize, usize, usize)> {
        match *self {
            Roi::Photodiode => Ok((0, 0, width, height)),
            Roi::Window { center, size } => {
                if size[0] == 0 || size[1] == 0 {
                    return Err(Error::arg("ROI size must be positive"));
                }
                let x0 = center[0] as isize - (size[0] as isize - 1) / 2;
                let y0 = center[1] as isize - (size[1] as isize - 1) / 2;
                let (x1, y1) = (x0 + size[0] as isize, y0 + size[1] as isize);
                if x0 < 0 || y0 < 0 || x1 > width as isize || y1 > height as isize {
                    return Err(Error::arg(format!(
                        "ROI {size:?} at {center:?} is not inside the {width}×{height} frame"
                    )));
                }
                Ok((x0 as usize, y0 as usize, x1 as usize, y1 as usize))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RampTrace {
    /// Sample times (s).
    pub times: Vec<f64>,
    /// Signal-beam intensity (W/cm²), non-decreasing.
    pub intensities: Vec<f64>,
    pub bucket_signal: Vec<f64>,
    pub roi: Roi,
}

impl RampTrace {
    pub fn new(times: Vec<f64>, intensities: Vec<f64>, bucket_signal: Vec<f64>, roi: Roi) -> Result<Self> {
        if times.len() != intensities.len() || times.len() != bucket_signal.len() {
            return Err(Error::arg("times, intensities and bucket signal differ in length"));
        }
        if intensities.iter().chain(&bucket_signal).chain(&times).any(|v| !v.is_finite()) {
            return Err(Error::arg("ramp trace contains non-finite values"));
        }
        if intensities.iter().any(|&i| i < 0.0) || intensities.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::arg("ramp intensities must be non-negative and non-decreasing"));
        }
        Ok(RampTrace {
            times,
            intensities,
            bucket_signal,
            roi,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Mean ROI value of every frame.
pub fn extract_trace<I, F>(frames: I, roi: Roi, intensities: &[f64], times: &[f64]) -> Result<RampTrace>
where
    I: IntoIterator<Item = F>,
    F: Borrow<Interferogram>,
{
    let mut signal = Vec::with_capacity(intensities.len());
    for frame in frames {
        let f = frame.borrow();
        let (x0, y0, x1, y1) = roi.bounds(f.width, f.height)?;
        let mut sum = 0.0;
        for y in y0..y1 {
            sum += f.pixels[y * f.width + x0..y * f.width + x1].iter().sum::<f64>();
        }
        signal.push(sum / ((x1 - x0) * (y1 - y0)) as f64);
    }
    RampTrace::new(times.to_vec(), intensities.to_vec(), signal, roi)
}

/// How the fringe amplitude and background depend on the ramp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AmplitudeModel {
    /// A·cos(·) + C with constant A and C.
    Constant,
    /// The ramped signal beam interferes with a fixed reference:
    /// √Ĩ·A·cos(·) + C₀ + C₁·Ĩ.
    SignalScaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineFitOptions {
    /// Sign of the non-linear phase (−1 for a self-defocusing medium). A single cosine
    /// cannot distinguish ±Φ_NL.
    pub phase_sign: f64,
    /// αL of the cell; intensities are replaced by Ĩ = I(1 − e^{−αL})/(αL) when set.
    pub alpha_length: Option<f64>,
    /// Fixed Φ₀ for traces shorter than one fringe.
    pub fixed_phi0: Option<f64>,
    pub amplitude: AmplitudeModel,
}

impl Default for CosineFitOptions {
    fn default() -> Self {
        CosineFitOptions {
            phase_sign: -1.0,
            alpha_length: None,
            fixed_phi0: None,
            amplitude: AmplitudeModel::SignalScaled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineFit {
    /// Φ_NL(Ĩ) as n₂·Ĩ/(1 + Ĩ/I_S); `offset` holds Φ₀.
    pub kerr: KerrFit,
    /// Fringe amplitude (at Ĩ_max for the signal-scaled model).
    pub amplitude: f64,
    /// C₀ and C₁ (per W/cm²); C₁ = 0 for the constant model.
    pub background: [f64; 2],
    /// |Φ_NL| at the top of the ramp (rad).
    pub total_phase: f64,
    /// Turning points found in the trace.
    pub extrema: usize,
    /// Less than one fringe period (2π) was seen.
    pub weak_phase: bool,
    pub residual_rms: f64,
    pub alpha_length: Option<f64>,
}

impl CosineFit {
    /// Reconstructed Φ_NL at raw intensity `i` (W/cm²).
    pub fn phase(&self, i: f64) -> f64 {
        self.kerr.nonlinear(effective(i, self.alpha_length))
    }
}

fn effective(i: f64, alpha_length: Option<f64>) -> f64 {
    match alpha_length {
        Some(al) if al > 1e-12 => i * (-(-al).exp_m1()) / al,
        _ => i,
    }
}

/// Turning points with hysteresis `frac` of the signal range.
pub fn count_extrema(signal: &[f64], frac: f64) -> usize {
    let (lo, hi) = signal.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let delta = frac * (hi - lo);
    if !(delta > 0.0) {
        return 0;
    }
    let mut n = 0;
    let mut dir = 0i8;
    let (mut cur_max, mut cur_min) = (signal[0], signal[0]);
    for &v in &signal[1..] {
        cur_max = cur_max.max(v);
        cur_min = cur_min.min(v);
        match dir {
            0 => {
                if v > cur_min + delta {
                    dir = 1;
                    cur_max = v;
                } else if v < cur_max - delta {
                    dir = -1;
                    cur_min = v;
                }
            }
            1 => {
                if v < cur_max - delta {
                    n += 1;
                    dir = -1;
                    cur_min = v;
                }
            }
            _ => {
                if v > cur_min + delta {
                    n += 1;
                    dir = 1;
                    cur_max = v;
                }
            }
        }
    }
    n
}

/// Residual of a straight-line fit of `y` against `x`.
fn detrend(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    x.iter().zip(y).map(|(a, b)| b - my - slope * (a - mx)).collect()
}

/// Shape of the model for given normalised intensities.
struct Model<'a> {
    u: &'a [f64],
    y: &'a [f64],
    scaled: bool,
    phi0: Option<f64>,
}

impl Model<'_> {
    fn n_lin(&self) -> usize {
        let osc = if self.phi0.is_some() { 1 } else { 2 };
        osc + if self.scaled { 2 } else { 1 }
    }

    fn basis(&self, k: usize, theta: f64) -> Vec<f64> {
        let u = self.u[k];
        let g = if self.scaled { u.sqrt() } else { 1.0 };
        let mut b = Vec::with_capacity(4);
        match self.phi0 {
            Some(p) => b.push(g * (theta + p).cos()),
            None => {
                b.push(g * theta.cos());
                b.push(g * theta.sin());
            }
        }
        b.push(1.0);
        if self.scaled {
            b.push(u);
        }
        b
    }

    /// Linear coefficients and cost for fixed (a, r).
    fn project(&self, a: f64, r: f64) -> Option<(Vec<f64>, f64)> {
        let m = self.n_lin();
        let n = self.u.len();
        let mut x = DMatrix::zeros(n, m);
        for k in 0..n {
            let th = a * self.u[k] / (1.0 + r * self.u[k]);
            for (j, v) in self.basis(k, th).into_iter().enumerate() {
                x[(k, j)] = v;
            }
        }
        let y = DVector::from_column_slice(self.y);
        let beta = x.clone().svd(true, true).solve(&y, 1e-12).ok()?;
        let res = &x * &beta - y;
        Some((beta.iter().copied().collect(), res.norm_squared()))
    }
}

/// Fits the bucket trace. Grid search over the total phase (seeded by the fringe
/// count) and I_S, then Levenberg–Marquardt on all parameters.
pub fn fit_cosine(trace: &RampTrace, opts: &CosineFitOptions) -> Result<CosineFit> {
    let n = trace.len();
    if n < 8 {
        return Err(Error::arg("a ramp trace needs at least 8 samples"));
    }
    if opts.phase_sign.abs() != 1.0 {
        return Err(Error::arg("phase_sign must be ±1"));
    }
    let ieff: Vec<f64> = trace.intensities.iter().map(|&i| effective(i, opts.alpha_length)).collect();
    let i_max = ieff[n - 1];
    if !(i_max > 0.0) {
        return Err(Error::arg("ramp never leaves zero intensity"));
    }
    let u: Vec<f64> = ieff.iter().map(|i| i / i_max).collect();
    let mean = trace.bucket_signal.iter().sum::<f64>() / n as f64;
    let scale = {
        let v = trace.bucket_signal.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n as f64;
        if v > 0.0 { v.sqrt() } else { 1.0 }
    };
    let y: Vec<f64> = trace.bucket_signal.iter().map(|s| (s - mean) / scale).collect();

    let scaled = opts.amplitude == AmplitudeModel::SignalScaled;
    let model = Model {
        u: &u,
        y: &y,
        scaled,
        phi0: opts.fixed_phi0,
    };
    // Fringe count on the detrended trace, with the √Ĩ envelope divided out.
    let flat = detrend(&u, &trace.bucket_signal);
    let norm: Vec<f64> = if scaled {
        u.iter().zip(&flat).filter(|(u, _)| **u > 0.05).map(|(u, y)| y / u.sqrt()).collect()
    } else {
        flat
    };
    let extrema = if norm.len() > 2 { count_extrema(&norm, 0.15) } else { 0 };

    // Grid search on the projected cost.
    let theta_max = PI * (extrema as f64 + 4.0).max(8.0);
    let n_theta = (theta_max / (PI / 16.0)).ceil() as usize;
    let rs = [0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];
    let mut grid: Vec<(f64, f64, f64)> = Vec::new();
    for it in 0..=n_theta {
        let theta = it as f64 * theta_max / n_theta as f64;
        for &r in &rs {
            let a = opts.phase_sign * theta * (1.0 + r);
            if let Some((_, c)) = model.project(a, r) {
                grid.push((c, a, r));
            }
        }
    }
    grid.sort_by(|p, q| p.0.total_cmp(&q.0));
    let Some(&(_, a0, r0)) = grid.first() else {
        return Err(Error::FitNonConvergence {
            reason: "no feasible starting point".into(),
            residual_rms: 0.0,
        });
    };

    let best = refine(&model, a0, r0, opts.phase_sign)?;
    let total = |p: &[f64]| (p[0] / (1.0 + p[1])).abs();

    // The fringe count is ambiguous when a solution one fringe away fits as well.
    for shift in [-2.0 * PI, 2.0 * PI] {
        let t_alt = total(&best.params) + shift;
        if t_alt <= 0.0 {
            continue;
        }
        let r = best.params[1];
        if let Ok(alt) = refine(&model, opts.phase_sign * t_alt * (1.0 + r), r, opts.phase_sign) {
            if (total(&alt.params) - total(&best.params)).abs() > PI && alt.cost <= 1.1 * best.cost {
                return Err(Error::FitNonConvergence {
                    reason: format!(
                        "fringe count ambiguous: total phase {:.2} and {:.2} rad fit equally well",
                        total(&best.params),
                        total(&alt.params)
                    ),
                    residual_rms: (best.cost / n as f64).sqrt() * scale,
                });
            }
        }
    }

    let p = &best.params;
    let (a, r) = (p[0], p[1]);
    let weak_phase = total(p) < 2.0 * PI;
    if weak_phase && opts.fixed_phi0.is_none() {
        return Err(Error::FitNonConvergence {
            reason: format!(
                "trace spans less than one fringe ({:.2} rad); supply a fixed Φ₀ prior",
                total(p)
            ),
            residual_rms: (best.cost / n as f64).sqrt() * scale,
        });
    }
    let n_par = p.len();
    let dof = (n as f64 - n_par as f64).max(1.0);
    let s2 = best.cost / dof;
    let cov = |i: usize, j: usize| best.jtj_inv.as_ref().map_or(f64::NAN, |m| m[(i, j)] * s2);
    let var = |i: usize| cov(i, i).max(0.0).sqrt();

    let to_n2 = 1.0 / (i_max * W_PER_CM2);
    let saturation_resolved = r * I_SAT_SENTINEL > i_max;
    let i_sat = if saturation_resolved { i_max / r } else { I_SAT_SENTINEL };
    let sigma_i_sat = if saturation_resolved { i_max * var(1) / (r * r) } else { I_SAT_SENTINEL };

    let (phi0, sigma_phi0, amplitude, c0, c1) = match opts.fixed_phi0 {
        Some(phi0) => {
            let amp = p[2];
            // a negative amplitude is a π shift of Φ₀
            let (amp, phi0) = if amp < 0.0 { (-amp, phi0 + PI) } else { (amp, phi0) };
            (phi0, 0.0, amp, p[3], if scaled { p[4] } else { 0.0 })
        }
        None => {
            let (pc, qs) = (p[2], p[3]);
            // p·cosθ + q·sinθ = A·cos(θ + Φ₀) with p = A cosΦ₀, q = −A sinΦ₀
            let amp = pc.hypot(qs);
            let phi0 = (-qs).atan2(pc);
            let d2 = amp * amp;
            let (gp, gq) = (qs / d2, -pc / d2);
            let v = gp * gp * cov(2, 2) + 2.0 * gp * gq * cov(2, 3) + gq * gq * cov(3, 3);
            (phi0, v.max(0.0).sqrt(), amp, p[4], if scaled { p[5] } else { 0.0 })
        }
    };
    let residual_rms = (best.cost / n as f64).sqrt() * scale;
    let kerr = KerrFit {
        n2: a * to_n2,
        i_sat,
        offset: phi0,
        sigma: KerrSigma {
            n2: var(0) * to_n2,
            i_sat: sigma_i_sat,
            offset: sigma_phi0,
        },
        residual_rms,
        saturation_resolved,
    };
    Ok(CosineFit {
        kerr,
        amplitude: amplitude * scale,
        background: [mean + c0 * scale, c1 * scale / i_max],
        total_phase: total(p),
        extrema,
        weak_phase,
        residual_rms,
        alpha_length: opts.alpha_length,
    })
}

/// Full least squares from (a, r) with the linear coefficients projected out first.
fn refine(model: &Model, a0: f64, r0: f64, sign: f64) -> Result<crate::fitting::LmOutcome> {
    let Some((beta, _)) = model.project(a0, r0) else {
        return Err(Error::FitNonConvergence {
            reason: "singular design matrix".into(),
            residual_rms: 0.0,
        });
    };
    let mut p0 = vec![a0, r0];
    p0.extend(beta);
    let n = model.u.len();
    let eval = |p: &[f64], res: &mut DVector<f64>, jac: &mut DMatrix<f64>| {
        let (a, r) = (p[0], p[1]);
        for k in 0..n {
            let u = model.u[k];
            let den = 1.0 + r * u;
            let th = a * u / den;
            let b = model.basis(k, th);
            let lin = &p[2..];
            let val: f64 = b.iter().zip(lin).map(|(x, c)| x * c).sum();
            let g = if model.scaled { u.sqrt() } else { 1.0 };
            let dth = match model.phi0 {
                Some(phi0) => -lin[0] * g * (th + phi0).sin(),
                None => g * (-lin[0] * th.sin() + lin[1] * th.cos()),
            };
            res[k] = val - model.y[k];
            jac[(k, 0)] = dth * u / den;
            jac[(k, 1)] = -dth * a * u * u / (den * den);
            for (j, x) in b.into_iter().enumerate() {
                jac[(k, 2 + j)] = x;
            }
        }
    };
    let project = |p: &mut [f64]| {
        p[1] = p[1].max(0.0);
        if p[0] * sign < 0.0 {
            p[0] = 0.0;
        }
    };
    let out = levenberg_marquardt(n, &p0, &eval, &project, 500);
    if !out.params.iter().all(|v| v.is_finite()) {
        return Err(Error::FitNonConvergence {
            reason: "non-finite parameters".into(),
            residual_rms: (out.cost / n as f64).sqrt(),
        });
    }
    Ok(out)
}

/// Bucket trace of a synthetic intensity ramp `0..=peak` in `samples` steps, read in a
/// `roi_size`² window at the beam centre.
pub fn synthetic_ramp(
    scene: &crate::interferometry::KerrScene,
    peak_intensity: f64,
    samples: usize,
    roi_size: usize,
    duration: f64,
) -> Result<RampTrace> {
    if samples < 2 {
        return Err(Error::arg("a ramp needs at least 2 samples"));
    }
    let ints: Vec<f64> = (0..samples).map(|k| peak_intensity * k as f64 / (samples - 1) as f64).collect();
    let times: Vec<f64> = (0..samples).map(|k| duration * k as f64 / (samples - 1) as f64).collect();
    let c = scene.size / 2;
    let roi = Roi::Window { center: [c, c], size: [roi_size, roi_size] };
    // one frame at a time keeps memory bounded
    let mut signal = Vec::with_capacity(samples);
    for (k, &i) in ints.iter().enumerate() {
        let (frame, _) = scene.frame(i, peak_intensity, k as u64)?;
        signal.push(extract_trace([&frame], roi, &[i], &[0.0])?.bucket_signal[0]);
    }
    RampTrace::new(times, ints, signal, roi)
}
