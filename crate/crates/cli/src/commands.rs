//! Implementations of `simulate`, `retrieve` and `fit`.

use std::path::{Path, PathBuf};

use kerrvapor_core::bucket::{self, CosineFit};
use kerrvapor_core::interferometry::{self, KerrScene, Retrieval, RetrievalOptions};
use kerrvapor_core::montecarlo::{self, PointResult};
use kerrvapor_core::{fitting, AtomicSystem, BeamField, Interferogram, RampTrace, Roi};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{self, BucketSection, FourierSection, SimulateConfig, SimulateMode, SynthConfig};
use crate::error::{CliError, Result, Stage};
use crate::io::{self, OutputDir};
use crate::manifest::RunManifest;

/// Path of a constants file replacing the compiled-in atomic constants.
pub const ENV_CONSTANTS: &str = "KERRVAPOR_CONSTANTS";
/// Overrides Γ/2π (MHz) on top of whatever constants are in use.
pub const ENV_GAMMA_MHZ: &str = "KERRVAPOR_GAMMA_MHZ";

/// Trajectory cap applied by `--quick`.
pub const QUICK_N_TRAJ: usize = 100;

/// Flags shared by every command.
#[derive(Debug, Clone)]
pub struct Common {
    pub seed: Option<u64>,
    pub workers: usize,
    pub out: PathBuf,
    pub quick: bool,
    pub command: Vec<String>,
}

/// Atomic constants in effect, after environment overrides.
pub fn runtime_system() -> Result<AtomicSystem> {
    let mut sys = match std::env::var_os(ENV_CONSTANTS) {
        Some(p) => {
            let path = PathBuf::from(p);
            let bytes = io::read_bytes(&path)?;
            let text = String::from_utf8_lossy(&bytes);
            AtomicSystem::from_constants(&text).stage("constants")?
        }
        None => AtomicSystem::rb87_d2(),
    };
    if let Ok(v) = std::env::var(ENV_GAMMA_MHZ) {
        let g: f64 = v
            .trim()
            .parse()
            .map_err(|e| CliError::usage(format!("{ENV_GAMMA_MHZ}={v}: {e}")))?;
        sys = sys.with_override("gamma_mhz", g).stage("constants")?;
    }
    Ok(sys)
}

/// Runs `f` on a dedicated pool of `workers` threads.
pub fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Numeric(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

// ---------------------------------------------------------------- simulate

pub fn simulate(config_path: &Path, common: &Common) -> Result<RunManifest> {
    let (mut cfg, bytes) = config::load_simulate(config_path)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if common.quick {
        cfg.monte_carlo.n_traj = cfg.monte_carlo.n_traj.min(QUICK_N_TRAJ);
    }
    let system = runtime_system()?;
    let mut manifest = RunManifest::new(common.command.clone(), common.workers);
    manifest.config_sha256 = Some(io::sha256_hex(&bytes));
    manifest.seed = Some(cfg.seed);
    manifest.add_input(config_path, &bytes);

    let mut out = OutputDir::create(&common.out)?;
    out.write_json("config_effective.json", &cfg)?;
    with_pool(common.workers, || run_simulation(&cfg, &system, &mut out))??;
    manifest.finish(&mut out)
}

fn run_simulation(cfg: &SimulateConfig, system: &AtomicSystem, out: &mut OutputDir) -> Result<()> {
    let mm = |v: &[f64]| v.iter().map(|w| w * 1e-3).collect::<Vec<_>>();
    match cfg.mode {
        SimulateMode::WaistSweep | SimulateMode::AnalyticSweep => {
            let s = cfg.waist_sweep.as_ref().expect("checked");
            let rc = cfg.run_config(cfg.detuning()?);
            let waists = mm(&s.waists_mm);
            let sweep = if cfg.mode == SimulateMode::WaistSweep {
                let (sweep, points) = montecarlo::waist_sweep(system, &rc, &waists, s.intensity_wcm2).stage("simulate")?;
                for (k, p) in points.iter().enumerate() {
                    write_point(out, &format!("p{k:02}"), p, rc.center_radius, true)?;
                }
                sweep
            } else {
                montecarlo::analytic_waist_sweep(system, &rc, &waists, s.intensity_wcm2).stage("simulate")?
            };
            let rows: Vec<Vec<f64>> = sweep.points.iter().map(|&(w, d)| vec![w * 1e3, d]).collect();
            out.write_csv("waist_sweep.csv", &["waist_mm", "delta_n"], &rows)?;
            out.write_json(
                "exponent.json",
                &json!({
                    "model": if cfg.mode == SimulateMode::WaistSweep { "monte_carlo" } else { "analytic" },
                    "exponent": sweep.fit.exponent,
                    "sigma_exponent": sweep.fit.sigma_exponent,
                    "prefactor": sweep.fit.prefactor,
                    "monotone": sweep.monotone,
                    "intensity_wcm2": s.intensity_wcm2,
                }),
            )?;
        }
        SimulateMode::RampSweep => {
            let s = cfg.ramp_sweep.as_ref().expect("checked");
            let rc = cfg.run_config(cfg.detuning()?);
            let (sweep, all) =
                montecarlo::ramp_sweep(system, &rc, &mm(&s.waists_mm), &s.intensities_wcm2).stage("simulate")?;
            let mut rows = Vec::new();
            for (j, points) in all.iter().enumerate() {
                for (k, p) in points.iter().enumerate() {
                    rows.push(vec![p.waist * 1e3, p.intensity_wcm2, p.delta_n]);
                    write_point(out, &format!("w{j:02}_i{k:02}"), p, rc.center_radius, false)?;
                }
            }
            out.write_csv("ramp.csv", &["waist_mm", "intensity_wcm2", "delta_n"], &rows)?;
            let fits: Vec<Vec<f64>> = sweep
                .waists
                .iter()
                .map(|w| vec![w.waist * 1e3, w.fit.n2, w.fit.sigma.n2, w.fit.i_sat, w.fit.sigma.i_sat])
                .collect();
            out.write_csv(
                "ramp_fits.csv",
                &["waist_mm", "n2_m2_per_w", "sigma_n2", "i_sat_wcm2", "sigma_i_sat"],
                &fits,
            )?;
            out.write_json("ramp_sweep.json", &sweep)?;
        }
        SimulateMode::PulsedResponse => {
            let s = cfg.pulsed.as_ref().expect("checked");
            let waist = s.waist_mm * 1e-3;
            let intensity = match (s.intensity_wcm2, s.power_w) {
                (Some(i), _) => i,
                (None, Some(p)) => BeamField::from_power(waist, p, system.wavevector())
                    .stage("simulate")?
                    .peak_intensity_wcm2(),
                (None, None) => unreachable!("checked"),
            };
            let delays: Vec<f64> = s.delays_us.iter().map(|d| d * 1e-6).collect();
            let mut rows = Vec::new();
            let mut taus = Vec::new();
            let mut fits = Vec::new();
            for &d in &s.detunings_ghz {
                let rc = cfg.run_config(d);
                let r = montecarlo::pulsed_response(system, &rc, waist, intensity, &delays).stage("simulate")?;
                rows.extend(r.points.iter().map(|&(t, dn)| vec![d, t * 1e6, dn]));
                taus.push(vec![d, r.fit.tau * 1e6, r.fit.sigma_tau * 1e6, r.bound * 1e6]);
                fits.push(json!({ "detuning_ghz": d, "fit": r.fit, "bound_s": r.bound, "stats": r.stats }));
            }
            out.write_csv("pulsed.csv", &["detuning_ghz", "delay_us", "delta_n"], &rows)?;
            out.write_csv("tau.csv", &["detuning_ghz", "tau_us", "sigma_tau_us", "bound_us"], &taus)?;
            out.write_json("pulsed_fits.json", &json!({ "intensity_wcm2": intensity, "detunings": fits }))?;
        }
    }
    Ok(())
}

/// Velocity-averaged χ maps and Δn map of one point; with `grids`, also the raw
/// per-class coherence sums.
fn write_point(out: &mut OutputDir, name: &str, p: &PointResult, center_radius: f64, grids: bool) -> Result<()> {
    let n = p.high.n;
    let meta = json!({
        "waist_m": p.waist,
        "intensity_wcm2": p.intensity_wcm2,
        "box_size_m": p.high.box_size,
        "delta_n_center": p.delta_n,
        "stats": p.stats,
        "run": p.high.meta,
    });
    let mut chi = Vec::with_capacity(4 * n * n);
    for map in [&p.high, &p.low] {
        chi.extend(map.chi.iter().map(|c| c.re));
        chi.extend(map.chi.iter().map(|c| c.im));
    }
    out.write_array(
        &format!("maps/{name}_chi"),
        &chi,
        &[4, n, n],
        "dimensionless; channels re/im high, re/im low",
        meta.clone(),
    )?;
    let dn = montecarlo::delta_n(&p.high, &p.low, center_radius * p.waist).stage("simulate")?;
    out.write_array(&format!("maps/{name}_delta_n"), &dn.map, &[n, n], "dimensionless; NaN where masked", meta)?;
    if grids {
        for (c, g) in p.high_grids.iter().enumerate() {
            let mut data = Vec::with_capacity(5 * n * n);
            data.extend(g.sum13.iter().map(|z| z.re));
            data.extend(g.sum13.iter().map(|z| z.im));
            data.extend(g.sum23.iter().map(|z| z.re));
            data.extend(g.sum23.iter().map(|z| z.im));
            data.extend(g.counts.iter().map(|&k| k as f64));
            out.write_array(
                &format!("grids/{name}_class{c}"),
                &data,
                &[5, g.n, g.n],
                "coherence sums; channels re/im rho13, re/im rho23, sample count",
                json!({
                    "box_size_m": g.box_size,
                    "trajectories": g.trajectories,
                    "failed": g.failed,
                    "speed_m_s": p.high.meta.speed,
                }),
            )?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- retrieve

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Fourier,
    Bucket,
}

#[derive(Debug, Clone, Default)]
pub struct RetrieveInputs {
    pub synth: Option<PathBuf>,
    pub frames: Option<PathBuf>,
    /// Intensity map (W/cm²) co-registered with the frames.
    pub intensity: Option<PathBuf>,
    /// Peak intensity used to scale the demodulated amplitude when no map is given.
    pub peak_intensity_wcm2: Option<f64>,
    /// Bucket trace CSV (time_s, intensity_wcm2, signal).
    pub trace: Option<PathBuf>,
    /// Ramp CSV (time_s, intensity_wcm2), one row per frame.
    pub ramp: Option<PathBuf>,
    /// TOML with optional [fourier] and [bucket] sections.
    pub options: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RetrieveOptionsFile {
    #[serde(default)]
    fourier: FourierSection,
    #[serde(default)]
    bucket: BucketSection,
}

/// Fourier retrieval of a synthetic frame at the configured peak intensity.
pub fn fourier_synth(cfg: &SynthConfig, seed: Option<u64>) -> Result<(Retrieval, Vec<f64>, KerrScene, Option<String>)> {
    let scene = cfg.scene(seed);
    let peak = cfg.peak_intensity_wcm2;
    // the frame id keeps this frame's noise independent of the bucket ramp frames
    let (frame, warning) = scene.frame(peak, peak, u32::MAX as u64).stage("retrieve/synthesize")?;
    let intensity = scene.intensity_map(peak);
    let r = interferometry::retrieve(&frame, &intensity, &cfg.fourier.options()?, cfg.fourier.conjugate)
        .stage("retrieve/fourier")?;
    Ok((r, intensity, scene, warning))
}

/// Bucket fit of a synthetic ramp from 0 to the configured peak intensity.
pub fn bucket_synth(cfg: &SynthConfig, seed: Option<u64>) -> Result<(RampTrace, CosineFit)> {
    let scene = cfg.scene(seed);
    let b = &cfg.bucket;
    let trace = bucket::synthetic_ramp(&scene, cfg.peak_intensity_wcm2, b.samples, b.roi_px, b.duration_s)
        .stage("retrieve/synthesize")?;
    let fit = bucket::fit_cosine(&trace, &b.options()?).stage("retrieve/bucket")?;
    Ok((trace, fit))
}

/// Φ_NL averaged in `bins` intensity bins centred at I_max·k/bins, k = 1..=bins:
/// rows (mean intensity of the bin, mean phase, pixel count). Empty bins are skipped.
pub fn binned_profile(phase: &[f64], mask: &[bool], intensity: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    let i_max = intensity
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&i, _)| i)
        .fold(0.0, f64::max);
    if !(i_max > 0.0) || bins == 0 {
        return Vec::new();
    }
    let width = i_max / bins as f64;
    let mut sums = vec![(0.0, 0.0, 0usize); bins + 1];
    for ((&p, &m), &i) in phase.iter().zip(mask).zip(intensity) {
        if !m {
            continue;
        }
        let k = (i / width).round() as usize;
        if (1..=bins).contains(&k) {
            sums[k].0 += i;
            sums[k].1 += p;
            sums[k].2 += 1;
        }
    }
    // the top bin is only half populated, so its centre would misplace it
    sums.iter()
        .filter(|s| s.2 > 0)
        .map(|s| (s.0 / s.2 as f64, s.1 / s.2 as f64, s.2))
        .collect()
}

/// RMS difference between a binned Fourier profile and a bucket curve, relative to
/// the largest |Φ_NL| of the profile.
pub fn profile_divergence(profile: &[(f64, f64, usize)], bucket: &CosineFit) -> f64 {
    let peak = profile.iter().map(|p| p.1.abs()).fold(0.0, f64::max);
    let ms = profile.iter().map(|p| (p.1 - bucket.phase(p.0)).powi(2)).sum::<f64>() / profile.len().max(1) as f64;
    ms.sqrt() / peak
}

fn write_fourier(out: &mut OutputDir, prefix: &str, r: &Retrieval, intensity: &[f64], bins: usize, warnings: &[String]) -> Result<()> {
    let (w, h) = (r.phi_nl.width, r.phi_nl.height);
    let masked: Vec<f64> = r
        .phi_nl
        .phase
        .iter()
        .zip(&r.phi_nl.mask)
        .map(|(&p, &m)| if m { p } else { f64::NAN })
        .collect();
    out.write_array(
        &format!("{prefix}phi_nl"),
        &masked,
        &[h, w],
        "rad; NaN outside the valid region",
        json!({ "k_perp_rad_per_px": r.phi_nl.k_perp }),
    )?;
    out.write_array(&format!("{prefix}intensity"), intensity, &[h, w], "W/cm^2", json!({}))?;
    let rows: Vec<Vec<f64>> = binned_profile(&r.phi_nl.phase, &r.phi_nl.mask, intensity, bins)
        .into_iter()
        .map(|(i, p, n)| vec![i, p, r.fit.nonlinear(i), n as f64])
        .collect();
    out.write_csv(
        &format!("{prefix}profile.csv"),
        &["intensity_wcm2", "phi_nl_rad", "phi_fit_rad", "pixels"],
        &rows,
    )?;
    out.write_json(
        &format!("{prefix}kerr_fit.json"),
        &json!({
            "method": "fourier",
            "fit": r.fit,
            "units": { "n2": "rad per W/m^2", "i_sat": "W/cm^2", "offset": "rad" },
            "k_perp_rad_per_px": r.phi_nl.k_perp,
            "satellite_centroid_bins": r.detection.centroid,
            "satellite_area_px": r.detection.area,
            "valid_pixels": r.phi_nl.valid_count(),
            "warnings": warnings,
        }),
    )?;
    Ok(())
}

fn write_bucket(out: &mut OutputDir, trace: &RampTrace, fit: &CosineFit) -> Result<()> {
    let rows: Vec<Vec<f64>> = (0..trace.len())
        .map(|k| {
            let i = trace.intensities[k];
            vec![trace.times[k], i, trace.bucket_signal[k], fit.phase(i)]
        })
        .collect();
    out.write_csv("trace.csv", &["time_s", "intensity_wcm2", "signal", "phi_nl_fit_rad"], &rows)?;
    out.write_json(
        "kerr_fit.json",
        &json!({
            "method": "bucket",
            "fit": fit.kerr,
            "units": { "n2": "rad per W/m^2", "i_sat": "W/cm^2", "offset": "rad (phi0)" },
            "amplitude": fit.amplitude,
            "background": fit.background,
            "total_phase_rad": fit.total_phase,
            "extrema": fit.extrema,
            "weak_phase": fit.weak_phase,
            "residual_rms": fit.residual_rms,
            "roi": trace.roi,
        }),
    )?;
    Ok(())
}

pub fn retrieve(method: Method, inputs: &RetrieveInputs, common: &Common) -> Result<RunManifest> {
    let mut manifest = RunManifest::new(common.command.clone(), common.workers);
    manifest.seed = common.seed;
    let opts_file: RetrieveOptionsFile = match &inputs.options {
        Some(p) => {
            let (v, bytes) = config::load(p)?;
            manifest.add_input(p, &bytes);
            v
        }
        None => RetrieveOptionsFile::default(),
    };

    if let Some(path) = &inputs.synth {
        let (cfg, bytes) = config::load_synth(path)?;
        manifest.config_sha256 = Some(io::sha256_hex(&bytes));
        manifest.add_input(path, &bytes);
        manifest.seed = Some(common.seed.or(cfg.scene.seed).unwrap_or(1));
        let mut out = OutputDir::create(&common.out)?;
        match method {
            Method::Fourier => {
                let (r, intensity, _, warning) = with_pool(common.workers, || fourier_synth(&cfg, common.seed))??;
                let warnings: Vec<String> = warning.into_iter().collect();
                for w in &warnings {
                    eprintln!("warning: {w}");
                }
                write_fourier(&mut out, "", &r, &intensity, cfg.fourier.profile_bins, &warnings)?;
            }
            Method::Bucket => {
                let (trace, fit) = with_pool(common.workers, || bucket_synth(&cfg, common.seed))??;
                write_bucket(&mut out, &trace, &fit)?;
            }
        }
        return manifest.finish(&mut out);
    }

    match method {
        Method::Fourier => {
            let frames_path = inputs
                .frames
                .as_ref()
                .ok_or_else(|| CliError::usage("fourier retrieval needs --synth or --frames"))?;
            let paths = io::frame_paths(frames_path)?;
            let intensity_map = match &inputs.intensity {
                Some(p) => {
                    let (data, _) = io::read_array(p)?;
                    manifest.add_input(p, &io::read_bytes(&p.with_extension("f64"))?);
                    Some(data)
                }
                None => None,
            };
            if intensity_map.is_none() && inputs.peak_intensity_wcm2.is_none() {
                return Err(CliError::usage("fourier retrieval of frames needs --intensity or --peak-intensity"));
            }
            let mut frames = Vec::with_capacity(paths.len());
            for p in &paths {
                let f = io::read_frame(p)?;
                manifest.add_input(p, &io::read_bytes(p)?);
                frames.push(f);
            }
            let opts = opts_file.fourier.options()?;
            let conj = opts_file.fourier.conjugate;
            let peak = inputs.peak_intensity_wcm2;
            let results: Vec<Result<(Retrieval, Vec<f64>)>> = with_pool(common.workers, || {
                frames
                    .par_iter()
                    .map(|f| retrieve_frame(f, intensity_map.as_deref(), peak, &opts, conj))
                    .collect()
            })?;
            let mut out = OutputDir::create(&common.out)?;
            let single = results.len() == 1;
            for (k, res) in results.into_iter().enumerate() {
                let (r, intensity) = res?;
                let prefix = if single { String::new() } else { format!("frame{k:04}_") };
                write_fourier(&mut out, &prefix, &r, &intensity, opts_file.fourier.profile_bins, &[])?;
            }
            manifest.finish(&mut out)
        }
        Method::Bucket => {
            let trace = if let Some(p) = &inputs.trace {
                manifest.add_input(p, &io::read_bytes(p)?);
                let (_, rows) = io::read_csv(p, 3)?;
                let col = |c: usize| rows.iter().map(|r| r[c]).collect::<Vec<_>>();
                RampTrace::new(col(0), col(1), col(2), Roi::Photodiode).stage("retrieve/bucket")?
            } else if let (Some(fp), Some(rp)) = (&inputs.frames, &inputs.ramp) {
                manifest.add_input(rp, &io::read_bytes(rp)?);
                let (_, rows) = io::read_csv(rp, 2)?;
                let paths = io::frame_paths(fp)?;
                if paths.len() != rows.len() {
                    return Err(CliError::usage(format!(
                        "{} frames but {} ramp rows",
                        paths.len(),
                        rows.len()
                    )));
                }
                let mut frames = Vec::with_capacity(paths.len());
                for p in &paths {
                    manifest.add_input(p, &io::read_bytes(p)?);
                    frames.push(io::read_frame(p)?);
                }
                let (w, h) = (frames[0].width, frames[0].height);
                let roi = Roi::Window {
                    center: [w / 2, h / 2],
                    size: [opts_file.bucket.roi_px, opts_file.bucket.roi_px],
                };
                let times: Vec<f64> = rows.iter().map(|r| r[0]).collect();
                let ints: Vec<f64> = rows.iter().map(|r| r[1]).collect();
                bucket::extract_trace(&frames, roi, &ints, &times).stage("retrieve/bucket")?
            } else {
                return Err(CliError::usage("bucket retrieval needs --synth, --trace, or --frames with --ramp"));
            };
            let fit = bucket::fit_cosine(&trace, &opts_file.bucket.options()?).stage("retrieve/bucket")?;
            let mut out = OutputDir::create(&common.out)?;
            write_bucket(&mut out, &trace, &fit)?;
            manifest.finish(&mut out)
        }
    }
}

fn retrieve_frame(
    frame: &Interferogram,
    intensity: Option<&[f64]>,
    peak: Option<f64>,
    opts: &RetrievalOptions,
    conjugate: bool,
) -> Result<(Retrieval, Vec<f64>)> {
    let intensity = match intensity {
        Some(map) => {
            if map.len() != frame.pixels.len() {
                return Err(CliError::usage("intensity map does not match the frame size"));
            }
            map.to_vec()
        }
        None => {
            // amplitude estimate from a first demodulation
            let (w, h) = (frame.width, frame.height);
            let spec = interferometry::spectrum(frame);
            let mag = interferometry::fourier_magnitude(&spec, w, h);
            let mut det = interferometry::detect_satellite(&mag, w, h, opts).stage("retrieve/fourier")?;
            if conjugate {
                det = det.conjugate();
            }
            let (field, _) = interferometry::demodulate(&spec, &det, opts).stage("retrieve/fourier")?;
            interferometry::intensity_from_field(&field, peak.expect("checked"))
        }
    };
    let r = interferometry::retrieve(frame, &intensity, opts, conjugate).stage("retrieve/fourier")?;
    Ok((r, intensity))
}

// ---------------------------------------------------------------- fit

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitModel {
    Saturated,
    PowerLaw,
    ExpGrowth,
}

/// JSON fit request: `{"model": "saturated", "points": [[x, y], ...], "sigma": [...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitRequest {
    pub model: Option<FitModel>,
    pub points: Vec<(f64, f64)>,
    #[serde(default)]
    pub sigma: Option<Vec<f64>>,
}

/// Runs a fit; the result is the model's fit structure as JSON.
pub fn run_fit(model: FitModel, points: &[(f64, f64)], sigma: Option<&[f64]>) -> Result<serde_json::Value> {
    let v = match model {
        FitModel::Saturated => serde_json::to_value(fitting::fit_saturated(points, sigma).stage("fit")?),
        FitModel::PowerLaw => serde_json::to_value(fitting::fit_power_law(points).stage("fit")?),
        FitModel::ExpGrowth => serde_json::to_value(fitting::fit_exp_growth(points).stage("fit")?),
    };
    v.map_err(|e| CliError::Numeric(e.to_string()))
}

pub fn fit(model: Option<FitModel>, input: &Path, common: &Common) -> Result<RunManifest> {
    let bytes = io::read_bytes(input)?;
    let mut manifest = RunManifest::new(common.command.clone(), common.workers);
    manifest.add_input(input, &bytes);
    let (model, points, sigma) = if input.extension().and_then(|e| e.to_str()) == Some("json") {
        let req: FitRequest = serde_json::from_slice(&bytes)
            .map_err(|e| CliError::usage(format!("{}: {e}", input.display())))?;
        let model = model
            .or(req.model)
            .ok_or_else(|| CliError::usage("no fit model given (--model or \"model\" in the request)"))?;
        (model, req.points, req.sigma)
    } else {
        let model = model.ok_or_else(|| CliError::usage("--model is required for CSV input"))?;
        let (_, rows) = io::read_csv(input, 2)?;
        let points = rows.iter().map(|r| (r[0], r[1])).collect();
        let sigma = rows.first().is_some_and(|r| r.len() > 2).then(|| rows.iter().map(|r| r[2]).collect());
        (model, points, sigma)
    };
    let result = run_fit(model, &points, sigma.as_deref())?;
    let mut out = OutputDir::create(&common.out)?;
    out.write_json("fit.json", &json!({ "model": model, "result": result }))?;
    manifest.finish(&mut out)
}
