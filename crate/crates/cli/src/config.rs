//! TOML run configurations. Every dimensional key carries its unit in the name.

use std::path::Path;

use kerrvapor_core::bloch::IntegratorConfig;
use kerrvapor_core::bucket::{AmplitudeModel, CosineFitOptions};
use kerrvapor_core::interferometry::{BorderReference, KerrScene, RetrievalOptions};
use kerrvapor_core::RunConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulateMode {
    WaistSweep,
    AnalyticSweep,
    RampSweep,
    PulsedResponse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub mode: SimulateMode,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub physics: Physics,
    #[serde(default)]
    pub monte_carlo: MonteCarlo,
    pub waist_sweep: Option<WaistSweepSection>,
    pub ramp_sweep: Option<RampSweepSection>,
    pub pulsed: Option<PulsedSection>,
}

fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Physics {
    pub temperature_k: f64,
    #[serde(default = "default_cell_length")]
    pub cell_length_mm: f64,
    /// Unused by pulsed runs, which take a list of detunings.
    #[serde(default)]
    pub detuning_ghz: Option<f64>,
    #[serde(default = "yes")]
    pub doppler: bool,
}

fn default_cell_length() -> f64 {
    10.0
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonteCarlo {
    pub n_traj: usize,
    pub n_classes: usize,
    pub grid_size: usize,
    pub box_waists: f64,
    pub center_radius_waists: f64,
    pub low_ratio: f64,
    pub rtol: f64,
    pub atol: f64,
    pub max_step_us: f64,
    pub switch_sigma_ns: f64,
    pub max_failure_fraction: f64,
}

impl Default for MonteCarlo {
    fn default() -> Self {
        let r = RunConfig::default();
        MonteCarlo {
            n_traj: r.n_traj,
            n_classes: r.n_classes,
            grid_size: r.grid_size,
            box_waists: r.box_factor,
            center_radius_waists: r.center_radius,
            low_ratio: r.low_ratio,
            rtol: r.integrator.rtol,
            atol: r.integrator.atol,
            max_step_us: r.integrator.max_step * 1e6,
            switch_sigma_ns: r.switch_sigma * 1e9,
            max_failure_fraction: r.max_failure_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaistSweepSection {
    pub waists_mm: Vec<f64>,
    pub intensity_wcm2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RampSweepSection {
    pub waists_mm: Vec<f64>,
    pub intensities_wcm2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulsedSection {
    pub waist_mm: f64,
    /// Either the peak intensity or the total beam power.
    pub intensity_wcm2: Option<f64>,
    pub power_w: Option<f64>,
    pub detunings_ghz: Vec<f64>,
    pub delays_us: Vec<f64>,
}

impl SimulateConfig {
    /// Monte-Carlo settings for the given detuning.
    pub fn run_config(&self, detuning_ghz: f64) -> RunConfig {
        let mc = &self.monte_carlo;
        RunConfig {
            temperature: self.physics.temperature_k,
            cell_length: self.physics.cell_length_mm * 1e-3,
            detuning_hz: detuning_ghz * 1e9,
            n_traj: mc.n_traj,
            n_classes: mc.n_classes,
            grid_size: mc.grid_size,
            box_factor: mc.box_waists,
            seed: self.seed,
            doppler: self.physics.doppler,
            low_ratio: mc.low_ratio,
            center_radius: mc.center_radius_waists,
            max_failure_fraction: mc.max_failure_fraction,
            integrator: IntegratorConfig {
                rtol: mc.rtol,
                atol: mc.atol,
                max_step: mc.max_step_us * 1e-6,
            },
            switch_sigma: mc.switch_sigma_ns * 1e-9,
            ..RunConfig::default()
        }
    }

    pub fn detuning(&self) -> Result<f64> {
        self.physics
            .detuning_ghz
            .ok_or_else(|| CliError::usage("physics.detuning_ghz is required for this mode"))
    }

    /// Checks that the section required by `mode` is present and self-consistent.
    pub fn check(&self) -> std::result::Result<(), String> {
        match self.mode {
            SimulateMode::WaistSweep | SimulateMode::AnalyticSweep => {
                let s = self.waist_sweep.as_ref().ok_or("mode needs a [waist_sweep] section")?;
                if s.waists_mm.len() < 4 {
                    return Err("waist_sweep.waists_mm needs at least 4 entries".into());
                }
                self.physics.detuning_ghz.ok_or("physics.detuning_ghz is required")?;
            }
            SimulateMode::RampSweep => {
                let s = self.ramp_sweep.as_ref().ok_or("mode needs a [ramp_sweep] section")?;
                if s.waists_mm.len() < 3 || s.intensities_wcm2.len() < 6 {
                    return Err("ramp_sweep needs at least 3 waists and 6 intensities".into());
                }
                self.physics.detuning_ghz.ok_or("physics.detuning_ghz is required")?;
            }
            SimulateMode::PulsedResponse => {
                let s = self.pulsed.as_ref().ok_or("mode needs a [pulsed] section")?;
                if s.intensity_wcm2.is_some() == s.power_w.is_some() {
                    return Err("pulsed needs exactly one of intensity_wcm2 and power_w".into());
                }
                if s.detunings_ghz.is_empty() || s.delays_us.len() < 3 {
                    return Err("pulsed needs detunings and at least 3 delays".into());
                }
            }
        }
        let rc = self.run_config(self.physics.detuning_ghz.unwrap_or(-1.0));
        rc.validate().map_err(|e| e.to_string())
    }
}

/// Synthetic interferometry setup for `retrieve --synth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub peak_intensity_wcm2: f64,
    #[serde(default)]
    pub scene: SceneSection,
    #[serde(default)]
    pub fourier: FourierSection,
    #[serde(default)]
    pub bucket: BucketSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSection {
    pub size_px: usize,
    pub waist_px: f64,
    pub reference_waist_px: f64,
    pub k_perp_rad_per_px: [f64; 2],
    /// Non-linear phase at the peak intensity; takes precedence over `n2_rad_per_wcm2`.
    pub peak_phase_rad: Option<f64>,
    pub n2_rad_per_wcm2: f64,
    pub i_sat_wcm2: f64,
    /// `inf` disables noise.
    pub snr_db: f64,
    pub seed: Option<u64>,
}

impl Default for SceneSection {
    fn default() -> Self {
        let s = KerrScene::default();
        SceneSection {
            size_px: s.size,
            waist_px: s.waist_px,
            reference_waist_px: s.reference_waist_px,
            k_perp_rad_per_px: s.k_perp,
            peak_phase_rad: None,
            n2_rad_per_wcm2: s.n2_phase,
            i_sat_wcm2: s.i_sat,
            snr_db: s.snr_db,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FourierSection {
    pub dc_radius_px: f64,
    pub log_floor: f64,
    pub smoothing_px: usize,
    pub dilation_px: usize,
    pub integer_shift: bool,
    pub mask_fraction: f64,
    pub border_width_px: usize,
    /// "plane", "mean" or "none".
    pub border_reference: String,
    pub residue_limit: f64,
    /// Take the mirror satellite (negated phase).
    pub conjugate: bool,
    /// Bins of the plot-ready Φ_NL(I) table.
    pub profile_bins: usize,
}

impl Default for FourierSection {
    fn default() -> Self {
        let o = RetrievalOptions::default();
        FourierSection {
            dc_radius_px: o.dc_radius,
            log_floor: o.log_floor,
            smoothing_px: o.smoothing,
            dilation_px: o.dilation,
            integer_shift: o.integer_shift,
            mask_fraction: o.mask_fraction,
            border_width_px: o.border_width,
            border_reference: "plane".into(),
            residue_limit: o.residue_limit,
            conjugate: false,
            profile_bins: 50,
        }
    }
}

impl FourierSection {
    pub fn options(&self) -> Result<RetrievalOptions> {
        let reference = match self.border_reference.as_str() {
            "plane" => BorderReference::Plane,
            "mean" => BorderReference::Mean,
            "none" => BorderReference::None,
            other => return Err(CliError::usage(format!("unknown border_reference `{other}`"))),
        };
        Ok(RetrievalOptions {
            dc_radius: self.dc_radius_px,
            log_floor: self.log_floor,
            smoothing: self.smoothing_px,
            dilation: self.dilation_px,
            integer_shift: self.integer_shift,
            mask_fraction: self.mask_fraction,
            border_width: self.border_width_px,
            reference,
            residue_limit: self.residue_limit,
            ..RetrievalOptions::default()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BucketSection {
    pub samples: usize,
    pub roi_px: usize,
    pub duration_s: f64,
    pub phase_sign: f64,
    /// "signal_scaled" or "constant".
    pub amplitude_model: String,
    pub alpha_length: Option<f64>,
    pub fixed_phi0_rad: Option<f64>,
}

impl Default for BucketSection {
    fn default() -> Self {
        BucketSection {
            samples: 100,
            roi_px: 4,
            duration_s: 1e-3,
            phase_sign: -1.0,
            amplitude_model: "signal_scaled".into(),
            alpha_length: None,
            fixed_phi0_rad: None,
        }
    }
}

impl BucketSection {
    pub fn options(&self) -> Result<CosineFitOptions> {
        let amplitude = match self.amplitude_model.as_str() {
            "signal_scaled" => AmplitudeModel::SignalScaled,
            "constant" => AmplitudeModel::Constant,
            other => return Err(CliError::usage(format!("unknown amplitude_model `{other}`"))),
        };
        if self.phase_sign.abs() != 1.0 {
            return Err(CliError::usage("bucket.phase_sign must be 1 or -1"));
        }
        Ok(CosineFitOptions {
            phase_sign: self.phase_sign,
            alpha_length: self.alpha_length,
            fixed_phi0: self.fixed_phi0_rad,
            amplitude,
        })
    }
}

impl SynthConfig {
    pub fn scene(&self, seed_override: Option<u64>) -> KerrScene {
        let s = &self.scene;
        let scene = KerrScene {
            size: s.size_px,
            waist_px: s.waist_px,
            reference_waist_px: s.reference_waist_px,
            k_perp: s.k_perp_rad_per_px,
            n2_phase: s.n2_rad_per_wcm2,
            i_sat: s.i_sat_wcm2,
            snr_db: s.snr_db,
            seed: seed_override.or(s.seed).unwrap_or(1),
        };
        match s.peak_phase_rad {
            Some(p) => scene.with_peak_phase(p, self.peak_intensity_wcm2),
            None => scene,
        }
    }

    pub fn check(&self) -> std::result::Result<(), String> {
        if !(self.peak_intensity_wcm2 > 0.0 && self.peak_intensity_wcm2.is_finite()) {
            return Err("peak_intensity_wcm2 must be positive".into());
        }
        let s = &self.scene;
        if s.size_px < 16 || !(s.waist_px > 0.0) || !(s.reference_waist_px > 0.0) || !(s.i_sat_wcm2 > 0.0) {
            return Err("scene sizes, waists and i_sat_wcm2 must be positive (size_px ≥ 16)".into());
        }
        if self.bucket.samples < 8 || self.bucket.roi_px == 0 || self.bucket.roi_px > s.size_px {
            return Err("bucket needs ≥ 8 samples and a ROI inside the frame".into());
        }
        if self.fourier.profile_bins == 0 {
            return Err("fourier.profile_bins must be positive".into());
        }
        Ok(())
    }
}

/// Reads and parses a TOML file; schema violations are usage errors.
pub fn load<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<(T, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|source| CliError::Input {
        path: path.to_path_buf(),
        source,
    })?;
    let text = std::str::from_utf8(&bytes).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let value = toml::from_str(text).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok((value, bytes))
}

pub fn load_simulate(path: &Path) -> Result<(SimulateConfig, Vec<u8>)> {
    let (cfg, bytes): (SimulateConfig, _) = load(path)?;
    cfg.check().map_err(|message| CliError::Config {
        path: path.to_path_buf(),
        message,
    })?;
    Ok((cfg, bytes))
}

pub fn load_synth(path: &Path) -> Result<(SynthConfig, Vec<u8>)> {
    let (cfg, bytes): (SynthConfig, _) = load(path)?;
    cfg.check().map_err(|message| CliError::Config {
        path: path.to_path_buf(),
        message,
    })?;
    Ok((cfg, bytes))
}
