//! Transit-resolved Monte-Carlo simulation of the vapor response.
//!
//! Atoms cross a Gaussian beam along straight chords of a square computation box.
//! Each atom starts in the thermal ground state far from the beam, its Bloch equations
//! are integrated with Γ_t = 0 and Ω(t) read from the beam profile along the path,
//! and its instantaneous coherences are accumulated on a grid. The grid average gives
//! the local susceptibility; velocity classes are averaged with Maxwell–Boltzmann
//! weights and the non-linear index is the difference between a high- and a
//! low-intensity run that share the same trajectories.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atomvapor::{
    sample_velocity_classes, transit_rate, AtomicSystem, VaporCell, VelocityClass,
};
use crate::bloch::{
    self, assemble, integrate_driven, rabi_frequencies, refractive_index, switch_on,
    DensityState, DrivenBloch, IntegratorConfig, HERMITICITY_TOL, POPULATION_TOL,
};
use crate::constants::{field_from_intensity, TWO_PI, W_PER_CM2};
use crate::error::{Error, Result};
use crate::fitting::{self, ExpGrowthFit, KerrFit, PowerLawFit};

/// Trajectories per parallel work item. Fixed so that results do not depend on the
/// number of workers.
const CHUNK: usize = 64;

/// Gaussian beam in the transverse plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamField {
    /// 1/e² intensity radius w₀ (m).
    pub waist: f64,
    /// Peak intensity I₀ (W/m²).
    pub peak_intensity: f64,
    /// Optical wavevector (rad/m).
    pub wavevector: f64,
}

impl BeamField {
    /// Beam with peak intensity given in W/cm².
    pub fn new(waist: f64, peak_intensity_wcm2: f64, wavevector: f64) -> Result<Self> {
        if !(waist.is_finite() && waist > 0.0) {
            return Err(Error::arg(format!("waist must be positive, got {waist}")));
        }
        if !(peak_intensity_wcm2.is_finite() && peak_intensity_wcm2 >= 0.0) {
            return Err(Error::arg("peak intensity must be finite and non-negative"));
        }
        Ok(BeamField {
            waist,
            peak_intensity: peak_intensity_wcm2 * W_PER_CM2,
            wavevector,
        })
    }

    /// Beam carrying total power `power` (W).
    pub fn from_power(waist: f64, power: f64, wavevector: f64) -> Result<Self> {
        let b = Self::new(waist, 0.0, wavevector)?;
        Ok(b.with_peak_intensity(2.0 * power / (std::f64::consts::PI * waist * waist)))
    }

    pub fn with_peak_intensity(&self, intensity: f64) -> Self {
        BeamField {
            peak_intensity: intensity,
            ..*self
        }
    }

    pub fn peak_intensity_wcm2(&self) -> f64 {
        self.peak_intensity / W_PER_CM2
    }

    /// Total power π w₀² I₀ / 2 (W).
    pub fn power(&self) -> f64 {
        0.5 * std::f64::consts::PI * self.waist * self.waist * self.peak_intensity
    }

    /// Local intensity I₀ e^{−2r²/w₀²} (W/m²).
    pub fn intensity_at(&self, x: f64, y: f64) -> f64 {
        self.peak_intensity * (-2.0 * (x * x + y * y) / (self.waist * self.waist)).exp()
    }

    /// Local field amplitude 𝓔₀ e^{−r²/w₀²} (V/m).
    pub fn field_at(&self, x: f64, y: f64) -> f64 {
        field_from_intensity(self.peak_intensity) * (-(x * x + y * y) / (self.waist * self.waist)).exp()
    }
}

/// One straight transverse chord across the computation box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Entry point on the box boundary (m), box centred on the beam axis.
    pub start: [f64; 2],
    /// Transverse velocity (m/s).
    pub velocity: [f64; 2],
    /// Time from entry to exit (s).
    pub duration: f64,
    /// Doppler shift k·v_z (rad/s) from the longitudinal velocity; 0 when disabled.
    pub doppler: f64,
    /// Phase of the accumulation clock in units of the sampling interval, in [0, 1).
    pub sample_phase: f64,
}

impl Trajectory {
    pub fn position(&self, t: f64) -> [f64; 2] {
        [self.start[0] + self.velocity[0] * t, self.start[1] + self.velocity[1] * t]
    }

    pub fn speed(&self) -> f64 {
        self.velocity[0].hypot(self.velocity[1])
    }

    pub fn exit(&self) -> [f64; 2] {
        self.position(self.duration)
    }

    /// Time before entry at which the path is `radius` from the beam axis, or 0 when
    /// the entry point is already that far out.
    pub fn lead_in(&self, radius: f64) -> f64 {
        let [x, y] = self.start;
        let [vx, vy] = self.velocity;
        let v2 = vx * vx + vy * vy;
        let c = x * x + y * y - radius * radius;
        if c >= 0.0 || v2 == 0.0 {
            return 0.0;
        }
        let b = x * vx + y * vy;
        // Root of |s + v t|² = R² with t < 0.
        let t = (-b - (b * b - v2 * c).sqrt()) / v2;
        -t
    }

    /// Chord-time interval spent within `radius` of the axis, if any.
    pub fn disk_crossing(&self, radius: f64) -> Option<(f64, f64)> {
        let [x, y] = self.start;
        let [vx, vy] = self.velocity;
        let v2 = vx * vx + vy * vy;
        let b = x * vx + y * vy;
        let c = x * x + y * y - radius * radius;
        let disc = b * b - v2 * c;
        if v2 == 0.0 || disc <= 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        let t0 = ((-b - sq) / v2).max(0.0);
        let t1 = ((-b + sq) / v2).min(self.duration);
        (t1 > t0).then_some((t0, t1))
    }
}

/// Independent random stream for trajectory `index` of velocity class `class`.
pub fn trajectory_rng(seed: u64, class: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(class.wrapping_add(0x5bd1_e995))));
    rng.set_stream(index);
    rng
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Draws one chord: entry uniform on the perimeter, direction cosine-weighted about
/// the inward normal (the flux of an isotropic gas through the boundary).
fn draw_chord(rng: &mut ChaCha8Rng, box_size: f64, speed: f64) -> Trajectory {
    let h = 0.5 * box_size;
    let s: f64 = rng.random::<f64>() * 4.0 * box_size;
    let side = ((s / box_size) as usize).min(3);
    let a = s - side as f64 * box_size - h;
    // (entry point, inward normal, tangent)
    let (p, n, t) = match side {
        0 => ([a, -h], [0.0, 1.0], [1.0, 0.0]),
        1 => ([h, a], [-1.0, 0.0], [0.0, 1.0]),
        2 => ([-a, h], [0.0, -1.0], [-1.0, 0.0]),
        _ => ([-h, -a], [1.0, 0.0], [0.0, -1.0]),
    };
    let sin_t: f64 = 2.0 * rng.random::<f64>() - 1.0;
    let cos_t = (1.0 - sin_t * sin_t).max(0.0).sqrt();
    let d = [cos_t * n[0] + sin_t * t[0], cos_t * n[1] + sin_t * t[1]];
    // Distance to the exit wall along d.
    let mut len = f64::INFINITY;
    for k in 0..2 {
        if d[k] > 0.0 {
            len = len.min((h - p[k]) / d[k]);
        } else if d[k] < 0.0 {
            len = len.min((-h - p[k]) / d[k]);
        }
    }
    let len = if len.is_finite() { len.max(0.0) } else { 0.0 };
    Trajectory {
        start: p,
        velocity: [speed * d[0], speed * d[1]],
        duration: if speed > 0.0 { len / speed } else { f64::INFINITY },
        doppler: 0.0,
        sample_phase: 0.0,
    }
}

/// Samples `n_traj` chords for one velocity class.
///
/// `doppler_sigma` is the standard deviation of the longitudinal velocity (m/s); each
/// atom gets a detuning offset k·v_z. Zero disables the Doppler shift.
pub fn sample_trajectories(
    beam: &BeamField,
    box_size: f64,
    n_traj: usize,
    speed: f64,
    seed: u64,
    class_index: u64,
    doppler_sigma: f64,
) -> Result<Vec<Trajectory>> {
    check_box(beam, box_size)?;
    if n_traj == 0 {
        return Err(Error::arg("need at least one trajectory"));
    }
    if !(speed.is_finite() && speed > 0.0) {
        return Err(Error::arg(format!("speed must be positive, got {speed}")));
    }
    Ok((0..n_traj as u64)
        .map(|i| {
            let mut rng = trajectory_rng(seed, class_index, i);
            sample_one(&mut rng, beam, box_size, speed, doppler_sigma)
        })
        .collect())
}

fn sample_one(
    rng: &mut ChaCha8Rng,
    beam: &BeamField,
    box_size: f64,
    speed: f64,
    doppler_sigma: f64,
) -> Trajectory {
    let mut tr = draw_chord(rng, box_size, speed);
    tr.sample_phase = rng.random::<f64>();
    let z: f64 = rng.sample(StandardNormal);
    tr.doppler = beam.wavevector * doppler_sigma * z;
    tr
}

/// Samples chords that pass within `radius` of the axis, continuing the same
/// per-index streams as [`sample_trajectories`] and skipping misses.
pub fn sample_central_trajectories(
    beam: &BeamField,
    box_size: f64,
    n_traj: usize,
    speed: f64,
    seed: u64,
    class_index: u64,
    doppler_sigma: f64,
    radius: f64,
) -> Result<Vec<(u64, Trajectory)>> {
    check_box(beam, box_size)?;
    if !(radius > 0.0) {
        return Err(Error::arg("central radius must be positive"));
    }
    let mut out = Vec::with_capacity(n_traj);
    let mut i = 0u64;
    while out.len() < n_traj {
        let mut rng = trajectory_rng(seed, class_index, i);
        let tr = sample_one(&mut rng, beam, box_size, speed, doppler_sigma);
        if tr.disk_crossing(radius).is_some() {
            out.push((i, tr));
        }
        i += 1;
        if i > 1000 * n_traj as u64 + 1_000_000 {
            return Err(Error::arg("central radius too small to be hit"));
        }
    }
    Ok(out)
}

fn check_box(beam: &BeamField, box_size: f64) -> Result<()> {
    if !(box_size.is_finite() && box_size >= 4.0 * beam.waist * (1.0 - 1e-12)) {
        return Err(Error::arg(format!(
            "box {box_size} m is smaller than the beam support 4·w₀ = {} m",
            4.0 * beam.waist
        )));
    }
    Ok(())
}

/// Accumulated coherences on an n×n grid covering [−L/2, L/2]².
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceGrid {
    pub n: usize,
    pub box_size: f64,
    pub sum13: Vec<Complex64>,
    pub sum23: Vec<Complex64>,
    pub counts: Vec<u64>,
    pub trajectories: usize,
    pub failed: usize,
    pub invariant_violations: usize,
}

impl CoherenceGrid {
    pub fn new(n: usize, box_size: f64) -> Self {
        let z = Complex64::new(0.0, 0.0);
        CoherenceGrid {
            n,
            box_size,
            sum13: vec![z; n * n],
            sum23: vec![z; n * n],
            counts: vec![0; n * n],
            trajectories: 0,
            failed: 0,
            invariant_violations: 0,
        }
    }

    pub fn cell_size(&self) -> f64 {
        self.box_size / self.n as f64
    }

    /// Flat index (row-major, row = y) of the cell containing (x, y).
    pub fn index(&self, x: f64, y: f64) -> Option<usize> {
        let c = self.cell_size();
        let h = 0.5 * self.box_size;
        let i = ((x + h) / c).floor();
        let j = ((y + h) / c).floor();
        if i < 0.0 || j < 0.0 || i >= self.n as f64 || j >= self.n as f64 {
            return None;
        }
        Some(j as usize * self.n + i as usize)
    }

    /// Centre (x, y) of the cell with flat index `k`.
    pub fn cell_center(&self, k: usize) -> (f64, f64) {
        let c = self.cell_size();
        let h = 0.5 * self.box_size;
        let (i, j) = (k % self.n, k / self.n);
        (-h + (i as f64 + 0.5) * c, -h + (j as f64 + 0.5) * c)
    }

    /// Averaged (ρ₁₃, ρ₂₃) of a cell; `None` for unvisited cells.
    pub fn mean(&self, k: usize) -> Option<(Complex64, Complex64)> {
        let c = self.counts[k];
        (c > 0).then(|| (self.sum13[k] / c as f64, self.sum23[k] / c as f64))
    }

    fn merge(&mut self, other: &CoherenceGrid) {
        for k in 0..self.sum13.len() {
            self.sum13[k] += other.sum13[k];
            self.sum23[k] += other.sum23[k];
            self.counts[k] += other.counts[k];
        }
        self.trajectories += other.trajectories;
        self.failed += other.failed;
        self.invariant_violations += other.invariant_violations;
    }
}

/// Settings for [`accumulate_class`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccumulationOptions {
    pub grid_size: usize,
    pub box_size: f64,
    /// Interval between accumulation samples (s).
    pub sample_dt: f64,
    pub integrator: IntegratorConfig,
    /// Integration starts where the path is this many waists from the axis.
    pub lead_in_radius: f64,
    /// Fraction of failed trajectories tolerated before the run fails.
    pub max_failure_fraction: f64,
}

/// Distance (in waists) at which e^{−r²/w₀²} = 10⁻⁸.
pub const DEFAULT_LEAD_IN_RADIUS: f64 = 4.3;

/// Integrates every trajectory with Γ_t = 0 and accumulates ρ₁₃, ρ₂₃ on the grid.
pub fn accumulate_class(
    system: &AtomicSystem,
    beam: &BeamField,
    trajectories: &[Trajectory],
    detuning: f64,
    opts: &AccumulationOptions,
) -> Result<CoherenceGrid> {
    if opts.grid_size == 0 || !(opts.sample_dt > 0.0) {
        return Err(Error::arg("grid size and sample interval must be positive"));
    }
    check_box(beam, opts.box_size)?;
    let (o13, o23) = rabi_frequencies(system, beam.peak_intensity);
    let w2 = beam.waist * beam.waist;
    let lead_radius = opts.lead_in_radius * beam.waist;

    let one = |tr: &Trajectory, grid: &mut CoherenceGrid| {
        grid.trajectories += 1;
        let tr = *tr;
        let dynamics = DrivenBloch::new(system, detuning - tr.doppler, 0.0, move |t: f64| {
            let [x, y] = tr.position(t);
            let e = (-(x * x + y * y) / w2).exp();
            (o13 * e, o23 * e)
        });
        let dt = opts.sample_dt;
        let n_samples = ((tr.duration / dt) - tr.sample_phase).floor().max(-1.0) as i64 + 1;
        let times = (0..n_samples.max(0)).map(|k| (k as f64 + tr.sample_phase) * dt);
        let mut local: Vec<(usize, Complex64, Complex64)> = Vec::new();
        let mut violations = 0usize;
        let res = integrate_driven(
            &dynamics,
            DensityState::ground(system),
            (-tr.lead_in(lead_radius), tr.duration),
            &opts.integrator,
            times,
            |t, rho| {
                if rho.check_invariants(POPULATION_TOL, HERMITICITY_TOL).is_err() {
                    violations += 1;
                }
                let [x, y] = tr.position(t);
                if let Some(k) = grid.index(x, y) {
                    local.push((k, rho.rho13(), rho.rho23()));
                }
            },
        );
        match res {
            Ok(_) => {
                for (k, r13, r23) in local {
                    grid.sum13[k] += r13;
                    grid.sum23[k] += r23;
                    grid.counts[k] += 1;
                }
                grid.invariant_violations += violations;
            }
            Err(_) => grid.failed += 1,
        }
    };

    let mut total = CoherenceGrid::new(opts.grid_size, opts.box_size);
    let chunks: Vec<&[Trajectory]> = trajectories.chunks(CHUNK).collect();
    // Bounded batches keep the number of live partial grids small.
    for batch in chunks.chunks(64) {
        let partials: Vec<CoherenceGrid> = batch
            .par_iter()
            .map(|chunk| {
                let mut g = CoherenceGrid::new(opts.grid_size, opts.box_size);
                for tr in chunk.iter() {
                    one(tr, &mut g);
                }
                g
            })
            .collect();
        for p in &partials {
            total.merge(p);
        }
    }
    if total.failed as f64 > opts.max_failure_fraction * total.trajectories as f64 {
        return Err(Error::TrajectoryFailures {
            failed: total.failed,
            total: total.trajectories,
        });
    }
    Ok(total)
}

/// Run parameters attached to a susceptibility map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapMetadata {
    pub waist: f64,
    /// Peak intensity (W/cm²).
    pub intensity_wcm2: f64,
    /// Detuning Δ (Hz).
    pub detuning_hz: f64,
    pub temperature: f64,
    pub seed: u64,
    /// Class speed (m/s); the weighted mean speed for velocity averages.
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SusceptibilityMap {
    pub n: usize,
    pub box_size: f64,
    pub chi: Vec<Complex64>,
    /// False for unvisited cells and cells whose field is below the floor.
    pub valid: Vec<bool>,
    /// Visited cells dropped because of the field floor.
    pub masked_low_field: usize,
    pub meta: MapMetadata,
}

/// Cells whose local field is below this fraction of the peak are masked.
pub const FIELD_FLOOR: f64 = 1e-6;

/// χ(r) = 2N/(ε₀𝓔(r))(μ₂₃ρ₃₂(r) + μ₁₃ρ₃₁(r)) with the local field at each cell centre.
pub fn susceptibility_map(
    grid: &CoherenceGrid,
    beam: &BeamField,
    cell: &VaporCell,
    system: &AtomicSystem,
    meta: MapMetadata,
) -> SusceptibilityMap {
    let n2 = grid.n * grid.n;
    let mut chi = vec![Complex64::new(0.0, 0.0); n2];
    let mut valid = vec![false; n2];
    let mut masked = 0;
    let floor = FIELD_FLOOR * field_from_intensity(beam.peak_intensity);
    for k in 0..n2 {
        let Some((r13, r23)) = grid.mean(k) else { continue };
        let (x, y) = grid.cell_center(k);
        let e = beam.field_at(x, y);
        if !(e > floor) || !(e > 0.0) {
            masked += 1;
            continue;
        }
        let c = bloch::susceptibility(system, cell.density, e, r13, r23);
        if c.re.is_finite() && c.im.is_finite() {
            chi[k] = c;
            valid[k] = true;
        }
    }
    SusceptibilityMap {
        n: grid.n,
        box_size: grid.box_size,
        chi,
        valid,
        masked_low_field: masked,
        meta,
    }
}

/// χ_avg(r) = Σ w_k χ_k(r).
pub fn velocity_average(maps: &[(SusceptibilityMap, VelocityClass)]) -> Result<SusceptibilityMap> {
    let Some((first, _)) = maps.first() else {
        return Err(Error::arg("no maps to average"));
    };
    for (m, _) in maps {
        let same = m.n == first.n
            && m.box_size == first.box_size
            && m.meta.waist == first.meta.waist
            && m.meta.intensity_wcm2 == first.meta.intensity_wcm2
            && m.meta.detuning_hz == first.meta.detuning_hz
            && m.meta.temperature == first.meta.temperature
            && m.meta.seed == first.meta.seed;
        if !same {
            return Err(Error::arg("maps differ in grid or run parameters"));
        }
    }
    let n2 = first.n * first.n;
    let mut chi = vec![Complex64::new(0.0, 0.0); n2];
    let mut valid = vec![true; n2];
    let mut speed = 0.0;
    for (m, class) in maps {
        speed += class.weight * class.speed;
        for k in 0..n2 {
            chi[k] += m.chi[k] * class.weight;
            valid[k] &= m.valid[k];
        }
    }
    for k in 0..n2 {
        if !valid[k] {
            chi[k] = Complex64::new(0.0, 0.0);
        }
    }
    Ok(SusceptibilityMap {
        n: first.n,
        box_size: first.box_size,
        chi,
        valid,
        masked_low_field: maps.iter().map(|(m, _)| m.masked_low_field).max().unwrap_or(0),
        meta: MapMetadata { speed, ..first.meta },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaN {
    /// Δn at the beam centre.
    pub center: f64,
    /// Per-cell Δn; NaN where either map is masked.
    pub map: Vec<f64>,
    /// Cells that entered the centre average.
    pub center_cells: usize,
}

/// Δn = n(high) − n(low) with n = √(1 + Re χ). The centre value uses the mean χ of
/// the valid cells within `center_radius` (m) of the axis, or the cells adjacent to
/// the axis when the radius is below a cell.
pub fn delta_n(high: &SusceptibilityMap, low: &SusceptibilityMap, center_radius: f64) -> Result<DeltaN> {
    if high.n != low.n || high.box_size != low.box_size || high.meta.waist != low.meta.waist {
        return Err(Error::arg("high and low maps have different geometry"));
    }
    let n = high.n;
    let cell = high.box_size / n as f64;
    let h = 0.5 * high.box_size;
    let radius = center_radius.max(0.75 * cell);
    let mut map = vec![f64::NAN; n * n];
    let (mut ch, mut cl, mut count) = (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0), 0usize);
    for k in 0..n * n {
        if !(high.valid[k] && low.valid[k]) {
            continue;
        }
        map[k] = refractive_index(high.chi[k]) - refractive_index(low.chi[k]);
        let x = -h + ((k % n) as f64 + 0.5) * cell;
        let y = -h + ((k / n) as f64 + 0.5) * cell;
        if x.hypot(y) <= radius {
            ch += high.chi[k];
            cl += low.chi[k];
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::arg("no valid cells at the beam centre"));
    }
    let center = refractive_index(ch / count as f64) - refractive_index(cl / count as f64);
    Ok(DeltaN { center, map, center_cells: count })
}

/// Length-averaged Δn over `n_slices` slices at intensities I_k = I₀e^{−αz_k}.
pub fn absorption_sliced_delta_n(
    base_intensity_wcm2: f64,
    cell: &VaporCell,
    n_slices: usize,
    mut delta_n_at: impl FnMut(f64) -> Result<f64>,
) -> Result<f64> {
    if n_slices == 0 {
        return Err(Error::arg("need at least one slice"));
    }
    if cell.alpha == 0.0 || cell.length == 0.0 {
        return delta_n_at(base_intensity_wcm2);
    }
    let mut acc = 0.0;
    for k in 0..n_slices {
        let z = (k as f64 + 0.5) * cell.length / n_slices as f64;
        acc += delta_n_at(base_intensity_wcm2 * (-cell.alpha * z).exp())?;
    }
    Ok(acc / n_slices as f64)
}

/// Parameters shared by the Monte-Carlo pipelines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Cell temperature (K).
    pub temperature: f64,
    /// Cell length (m).
    pub cell_length: f64,
    /// Detuning Δ (Hz); negative is red.
    pub detuning_hz: f64,
    /// Trajectories per velocity class.
    pub n_traj: usize,
    pub n_classes: usize,
    pub grid_size: usize,
    /// Box side in waists.
    pub box_factor: f64,
    pub seed: u64,
    /// Per-atom Doppler shift from the longitudinal velocity.
    pub doppler: bool,
    /// I_low / I_high.
    pub low_ratio: f64,
    /// Radius (in waists) of the central region used for Δn.
    pub center_radius: f64,
    /// The fastest class advances this fraction of a cell between samples.
    pub sample_cell_fraction: f64,
    pub lead_in_radius: f64,
    pub max_failure_fraction: f64,
    pub integrator: IntegratorConfig,
    /// Rise parameter σ of the switch-on in pulsed runs (s).
    pub switch_sigma: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            temperature: 423.15,
            cell_length: 0.01,
            detuning_hz: -2.2e9,
            n_traj: 10_000,
            n_classes: 8,
            grid_size: 64,
            box_factor: 4.0,
            seed: 1,
            doppler: true,
            low_ratio: 1e-3,
            center_radius: 0.125,
            sample_cell_fraction: 0.45,
            lead_in_radius: DEFAULT_LEAD_IN_RADIUS,
            max_failure_fraction: 1e-3,
            integrator: IntegratorConfig::monte_carlo(),
            switch_sigma: bloch::DEFAULT_SWITCH_SIGMA,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::arg(m.to_string()));
        if self.n_traj == 0 {
            return bad("n_traj must be at least 1");
        }
        if self.n_classes < 2 {
            return bad("n_classes must be at least 2");
        }
        if self.grid_size < 2 {
            return bad("grid_size must be at least 2");
        }
        if !(self.box_factor >= 4.0) {
            return bad("box_factor must be at least 4");
        }
        if !(self.low_ratio > 0.0 && self.low_ratio < 1.0) {
            return bad("low_ratio must lie in (0, 1)");
        }
        if !(self.sample_cell_fraction > 0.0 && self.sample_cell_fraction < 0.5) {
            return bad("sample_cell_fraction must lie in (0, 0.5)");
        }
        if !(self.center_radius >= 0.0) || !(self.lead_in_radius >= 0.0) {
            return bad("radii must be non-negative");
        }
        if !self.detuning_hz.is_finite() {
            return bad("detuning must be finite");
        }
        if !(self.integrator.max_step > 0.0 && self.integrator.rtol > 0.0 && self.integrator.atol > 0.0) {
            return bad("integrator tolerances must be positive");
        }
        Ok(())
    }

    pub fn cell(&self, system: &AtomicSystem) -> Result<VaporCell> {
        VaporCell::new(system, self.temperature, self.cell_length)
    }

    fn doppler_sigma(&self, cell: &VaporCell) -> f64 {
        if self.doppler {
            cell.most_probable_speed() / std::f64::consts::SQRT_2
        } else {
            0.0
        }
    }
}

/// Summary counters of a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub trajectories: usize,
    pub failed: usize,
    pub invariant_violations: usize,
}

impl RunStats {
    fn add(&mut self, g: &CoherenceGrid) {
        self.trajectories += g.trajectories;
        self.failed += g.failed;
        self.invariant_violations += g.invariant_violations;
    }
}

/// High- and low-intensity runs at one (waist, intensity).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointResult {
    pub waist: f64,
    pub intensity_wcm2: f64,
    pub delta_n: f64,
    pub high: SusceptibilityMap,
    pub low: SusceptibilityMap,
    /// Per-class grids of the high run, kept for output.
    pub high_grids: Vec<CoherenceGrid>,
    pub stats: RunStats,
}

/// Runs the full Monte-Carlo pipeline at one waist and each of `intensities_wcm2`.
/// All intensities share the same trajectories; each gets its own low-intensity
/// reference at `low_ratio` times its intensity.
pub fn simulate_waist(
    system: &AtomicSystem,
    cfg: &RunConfig,
    waist: f64,
    intensities_wcm2: &[f64],
) -> Result<Vec<PointResult>> {
    cfg.validate()?;
    let cell = cfg.cell(system)?;
    let classes = sample_velocity_classes(&cell, cfg.n_classes)?;
    let box_size = cfg.box_factor * waist;
    let v_max = classes.iter().map(|c| c.speed).fold(0.0, f64::max);
    let opts = AccumulationOptions {
        grid_size: cfg.grid_size,
        box_size,
        sample_dt: cfg.sample_cell_fraction * box_size / cfg.grid_size as f64 / v_max,
        integrator: cfg.integrator,
        lead_in_radius: cfg.lead_in_radius,
        max_failure_fraction: cfg.max_failure_fraction,
    };
    let detuning = TWO_PI * cfg.detuning_hz;
    let base = BeamField::new(waist, 0.0, system.wavevector())?;
    let sigma_vz = cfg.doppler_sigma(&cell);

    let mut per_point: Vec<(Vec<(SusceptibilityMap, VelocityClass)>, Vec<(SusceptibilityMap, VelocityClass)>, Vec<CoherenceGrid>, RunStats)> =
        intensities_wcm2.iter().map(|_| (Vec::new(), Vec::new(), Vec::new(), RunStats::default())).collect();

    for (k, class) in classes.iter().enumerate() {
        let trajectories = sample_trajectories(&base, box_size, cfg.n_traj, class.speed, cfg.seed, k as u64, sigma_vz)?;
        for (p, &i_wcm2) in intensities_wcm2.iter().enumerate() {
            if !(i_wcm2 > 0.0) {
                return Err(Error::arg("intensities must be positive"));
            }
            let meta = MapMetadata {
                waist,
                intensity_wcm2: i_wcm2,
                detuning_hz: cfg.detuning_hz,
                temperature: cfg.temperature,
                seed: cfg.seed,
                speed: class.speed,
            };
            let hi_beam = base.with_peak_intensity(i_wcm2 * W_PER_CM2);
            let lo_beam = base.with_peak_intensity(i_wcm2 * W_PER_CM2 * cfg.low_ratio);
            let g_hi = accumulate_class(system, &hi_beam, &trajectories, detuning, &opts)?;
            let g_lo = accumulate_class(system, &lo_beam, &trajectories, detuning, &opts)?;
            let slot = &mut per_point[p];
            slot.3.add(&g_hi);
            slot.3.add(&g_lo);
            slot.0.push((susceptibility_map(&g_hi, &hi_beam, &cell, system, meta), *class));
            slot.1.push((susceptibility_map(&g_lo, &lo_beam, &cell, system, meta), *class));
            slot.2.push(g_hi);
        }
    }

    intensities_wcm2
        .iter()
        .zip(per_point)
        .map(|(&i_wcm2, (hi, lo, grids, stats))| {
            let high = velocity_average(&hi)?;
            let low = velocity_average(&lo)?;
            let dn = delta_n(&high, &low, cfg.center_radius * waist)?;
            Ok(PointResult {
                waist,
                intensity_wcm2: i_wcm2,
                delta_n: dn.center,
                high,
                low,
                high_grids: grids,
                stats,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaistSweep {
    /// (w₀ in m, Δn)
    pub points: Vec<(f64, f64)>,
    /// Power law fitted to |Δn| against w₀.
    pub fit: PowerLawFit,
    /// |Δn| strictly increases with w₀.
    pub monotone: bool,
}

fn finish_waist_sweep(points: Vec<(f64, f64)>) -> Result<WaistSweep> {
    let abs: Vec<(f64, f64)> = points.iter().map(|&(w, d)| (w, d.abs())).collect();
    let fit = fitting::fit_power_law(&abs)?;
    let mut sorted = abs.clone();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let monotone = sorted.windows(2).all(|p| p[1].1 > p[0].1);
    Ok(WaistSweep { points, fit, monotone })
}

/// Monte-Carlo Δn at the beam centre against waist, with a power-law fit.
pub fn waist_sweep(
    system: &AtomicSystem,
    cfg: &RunConfig,
    waists: &[f64],
    intensity_wcm2: f64,
) -> Result<(WaistSweep, Vec<PointResult>)> {
    if waists.len() < 4 {
        return Err(Error::arg("a waist sweep needs at least 4 waists"));
    }
    let mut results = Vec::with_capacity(waists.len());
    for &w in waists {
        let mut r = simulate_waist(system, cfg, w, &[intensity_wcm2])?;
        results.push(r.remove(0));
    }
    let points = results.iter().map(|r| (r.waist, r.delta_n)).collect();
    Ok((finish_waist_sweep(points)?, results))
}

/// The same sweep with the phenomenological steady-state model: χ₂₃ of the analytic
/// far-detuned formula with Γ_t from the waist.
pub fn analytic_waist_sweep(
    system: &AtomicSystem,
    cfg: &RunConfig,
    waists: &[f64],
    intensity_wcm2: f64,
) -> Result<WaistSweep> {
    if waists.len() < 4 {
        return Err(Error::arg("a waist sweep needs at least 4 waists"));
    }
    let cell = cfg.cell(system)?;
    let det = TWO_PI * cfg.detuning_hz;
    let e_hi = field_from_intensity(intensity_wcm2 * W_PER_CM2);
    let e_lo = field_from_intensity(intensity_wcm2 * W_PER_CM2 * cfg.low_ratio);
    let mut points = Vec::with_capacity(waists.len());
    for &w in waists {
        let gt = transit_rate(&cell, w)?;
        let hi = bloch::analytic_chi23(system, &cell, e_hi, det, gt);
        let lo = bloch::analytic_chi23(system, &cell, e_lo, det, gt);
        points.push((w, refractive_index(hi) - refractive_index(lo)));
    }
    finish_waist_sweep(points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RampWaist {
    pub waist: f64,
    /// (I in W/cm², Δn)
    pub points: Vec<(f64, f64)>,
    pub fit: KerrFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RampSweep {
    pub waists: Vec<RampWaist>,
    /// |n₂| against w₀.
    pub n2_law: PowerLawFit,
    /// I_S against w₀.
    pub isat_law: PowerLawFit,
}

/// Simulated intensity ramps: per waist, Δn(I) fitted to the saturated model; across
/// waists, power laws of n₂ and I_S.
pub fn ramp_sweep(
    system: &AtomicSystem,
    cfg: &RunConfig,
    waists: &[f64],
    intensities_wcm2: &[f64],
) -> Result<(RampSweep, Vec<Vec<PointResult>>)> {
    if intensities_wcm2.len() < 6 {
        return Err(Error::arg("a ramp needs at least 6 intensities"));
    }
    if waists.len() < 3 {
        return Err(Error::arg("a ramp sweep needs at least 3 waists"));
    }
    let mut per_waist = Vec::new();
    let mut all = Vec::new();
    for &w in waists {
        let results = simulate_waist(system, cfg, w, intensities_wcm2)?;
        let points: Vec<(f64, f64)> = results.iter().map(|r| (r.intensity_wcm2, r.delta_n)).collect();
        let fit = fitting::fit_saturated(&points, None)?;
        per_waist.push(RampWaist { waist: w, points, fit });
        all.push(results);
    }
    let n2: Vec<(f64, f64)> = per_waist.iter().map(|r| (r.waist, r.fit.n2.abs())).collect();
    let is: Vec<(f64, f64)> = per_waist.iter().map(|r| (r.waist, r.fit.i_sat)).collect();
    Ok((
        RampSweep {
            n2_law: fitting::power_law_ols(&n2, 3)?,
            isat_law: fitting::power_law_ols(&is, 3)?,
            waists: per_waist,
        },
        all,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulsedResponse {
    /// (delay in s, Δn)
    pub points: Vec<(f64, f64)>,
    pub fit: ExpGrowthFit,
    /// Eigenvalue bound 1/min|Re dᵢ| at the peak intensity with Γ_t from the waist.
    pub bound: f64,
    pub stats: RunStats,
}

/// Δn at the beam centre a time `delay` after the beam is switched on everywhere.
///
/// Before the switch-on all atoms are in the ground state. For an atom found at chord
/// time s inside the central disk at the delay, the light has acted since chord time
/// s − delay (or since it entered, if later). Each trajectory through the disk
/// contributes one uniformly drawn s per delay, weighted by the length of its central
/// segment.
pub fn pulsed_response(
    system: &AtomicSystem,
    cfg: &RunConfig,
    waist: f64,
    intensity_wcm2: f64,
    delays: &[f64],
) -> Result<PulsedResponse> {
    cfg.validate()?;
    if delays.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
        return Err(Error::arg("delays must be positive"));
    }
    let cell = cfg.cell(system)?;
    let classes = sample_velocity_classes(&cell, cfg.n_classes)?;
    let box_size = cfg.box_factor * waist;
    let base = BeamField::new(waist, intensity_wcm2, system.wavevector())?;
    let radius = cfg.center_radius.max(1e-3) * waist;
    let detuning = TWO_PI * cfg.detuning_hz;
    let sigma_vz = cfg.doppler_sigma(&cell);
    let lead_radius = cfg.lead_in_radius * waist;
    let w2 = waist * waist;
    let mut stats = RunStats::default();

    // χ sums per delay: (high, low), over classes with class weights.
    let nd = delays.len();
    let mut chi_hi = vec![Complex64::new(0.0, 0.0); nd];
    let mut chi_lo = vec![Complex64::new(0.0, 0.0); nd];

    for (k, class) in classes.iter().enumerate() {
        let trajectories = sample_central_trajectories(
            &base, box_size, cfg.n_traj, class.speed, cfg.seed, k as u64, sigma_vz, radius,
        )?;
        let work = |(idx, tr): &(u64, Trajectory)| -> (Vec<Complex64>, Vec<Complex64>, f64, usize, usize) {
            let (s_in, s_out) = tr.disk_crossing(radius).expect("filtered");
            let weight = s_out - s_in;
            let mut rng = trajectory_rng(cfg.seed ^ 0x7075_6c73, k as u64, *idx);
            let mut hi = vec![Complex64::new(0.0, 0.0); nd];
            let mut lo = vec![Complex64::new(0.0, 0.0); nd];
            let mut failed = 0;
            let mut violations = 0;
            let lead = tr.lead_in(lead_radius);
            for (d, &delay) in delays.iter().enumerate() {
                let s = s_in + rng.random::<f64>() * (s_out - s_in);
                let t_from = (s - delay).max(-lead);
                let [x, y] = tr.position(s);
                for (ratio, out) in [(1.0, &mut hi), (cfg.low_ratio, &mut lo)] {
                    let beam = base.with_peak_intensity(base.peak_intensity * ratio);
                    let (o13, o23) = rabi_frequencies(system, beam.peak_intensity);
                    let tr = *tr;
                    let sigma = cfg.switch_sigma;
                    let dynamics = DrivenBloch::new(system, detuning - tr.doppler, 0.0, move |t: f64| {
                        let [x, y] = tr.position(t);
                        let f = (-(x * x + y * y) / w2).exp() * switch_on(t - s + delay, sigma);
                        (o13 * f, o23 * f)
                    });
                    match integrate_driven(
                        &dynamics,
                        DensityState::ground(system),
                        (t_from, s),
                        &cfg.integrator,
                        std::iter::empty(),
                        |_, _| {},
                    ) {
                        Ok((rho, _)) => {
                            if rho.check_invariants(POPULATION_TOL, HERMITICITY_TOL).is_err() {
                                violations += 1;
                            }
                            let e = beam.field_at(x, y);
                            out[d] = bloch::susceptibility(system, cell.density, e, rho.rho13(), rho.rho23()) * weight;
                        }
                        Err(_) => failed += 1,
                    }
                }
            }
            (hi, lo, weight, failed, violations)
        };
        let mut class_hi = vec![Complex64::new(0.0, 0.0); nd];
        let mut class_lo = vec![Complex64::new(0.0, 0.0); nd];
        let mut wsum = 0.0;
        let chunks: Vec<&[(u64, Trajectory)]> = trajectories.chunks(CHUNK).collect();
        let partials: Vec<_> = chunks
            .par_iter()
            .map(|chunk| chunk.iter().map(work).collect::<Vec<_>>())
            .collect();
        for (hi, lo, w, failed, violations) in partials.into_iter().flatten() {
            stats.trajectories += 1;
            stats.failed += failed;
            stats.invariant_violations += violations;
            if failed == 0 {
                for d in 0..nd {
                    class_hi[d] += hi[d];
                    class_lo[d] += lo[d];
                }
                wsum += w;
            }
        }
        if stats.failed as f64 > cfg.max_failure_fraction * (2 * nd * stats.trajectories) as f64 {
            return Err(Error::TrajectoryFailures {
                failed: stats.failed,
                total: 2 * nd * stats.trajectories,
            });
        }
        for d in 0..nd {
            chi_hi[d] += class_hi[d] / wsum * class.weight;
            chi_lo[d] += class_lo[d] / wsum * class.weight;
        }
    }
    let points: Vec<(f64, f64)> = delays
        .iter()
        .enumerate()
        .map(|(d, &t)| (t, refractive_index(chi_hi[d]) - refractive_index(chi_lo[d])))
        .collect();
    let fit = fitting::fit_exp_growth(&points)?;
    let (o13, o23) = rabi_frequencies(system, base.peak_intensity);
    let op = assemble(system, o13, o23, detuning, transit_rate(&cell, waist)?);
    let bound = bloch::response_timescale(&op)?;
    Ok(PulsedResponse { points, fit, bound, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bloch::steady_state;

    fn sys() -> AtomicSystem {
        AtomicSystem::rb87_d2()
    }

    fn opts(box_size: f64, dt: f64) -> AccumulationOptions {
        AccumulationOptions {
            grid_size: 16,
            box_size,
            sample_dt: dt,
            integrator: IntegratorConfig::monte_carlo(),
            lead_in_radius: DEFAULT_LEAD_IN_RADIUS,
            max_failure_fraction: 1e-3,
        }
    }

    #[test]
    fn beam_profile_invariants() {
        let b = BeamField::new(1e-3, 17.8, 8e6).unwrap();
        assert_eq!(b.intensity_at(0.0, 0.0), 17.8 * W_PER_CM2);
        assert!((b.intensity_at(1e-3, 0.0) / b.peak_intensity - (-2.0f64).exp()).abs() < 1e-15);
        let p = BeamField::from_power(0.66e-3, 0.4, 8e6).unwrap();
        assert!((p.power() - 0.4).abs() < 1e-10 * 0.4);
        assert!((p.peak_intensity_wcm2() - 58.46).abs() < 0.01);
        assert!(BeamField::new(0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn trajectories_are_boundary_chords() {
        let b = BeamField::new(1e-3, 1.0, 8e6).unwrap();
        let l = 4e-3;
        let tr = sample_trajectories(&b, l, 2000, 300.0, 3, 0, 0.0).unwrap();
        for t in &tr {
            let on_boundary = |p: [f64; 2]| {
                let m = p[0].abs().max(p[1].abs());
                (m - 0.5 * l).abs() < 1e-12 && p[0].abs() <= 0.5 * l + 1e-12 && p[1].abs() <= 0.5 * l + 1e-12
            };
            assert!(on_boundary(t.start) && on_boundary(t.exit()));
            let mid = t.position(0.5 * t.duration);
            assert!(mid[0].abs() < 0.5 * l && mid[1].abs() < 0.5 * l);
            assert!((t.speed() - 300.0).abs() < 1e-9);
        }
        assert!(sample_trajectories(&b, 3e-3, 10, 300.0, 3, 0, 0.0).is_err());
    }

    /// Chord-length CDF of isotropic uniform random lines through a square of side L.
    fn chord_cdf(x: f64, l: f64) -> f64 {
        let m = 4000;
        let (mut num, mut den) = (0.0, 0.0);
        for k in 0..m {
            let phi = (k as f64 + 0.5) / m as f64 * std::f64::consts::FRAC_PI_2;
            let (c, s) = (phi.cos(), phi.sin());
            let width = l * (c + s);
            let lmax = l / c.max(s);
            let r = l * c.min(s);
            let below = if x >= lmax { width } else { 2.0 * r * x / lmax };
            num += below;
            den += width;
        }
        num / den
    }

    #[test]
    fn chord_lengths_match_isotropic_law() {
        let b = BeamField::new(1e-3, 1.0, 8e6).unwrap();
        let l = 4e-3;
        let mut lens: Vec<f64> = sample_trajectories(&b, l, 100_000, 1.0, 11, 2, 0.0)
            .unwrap()
            .iter()
            .map(|t| t.duration)
            .collect();
        lens.sort_by(f64::total_cmp);
        let n = lens.len() as f64;
        let mut ks: f64 = 0.0;
        for (i, &x) in lens.iter().enumerate().step_by(7) {
            let f = chord_cdf(x, l);
            ks = ks.max((f - i as f64 / n).abs()).max((f - (i + 1) as f64 / n).abs());
        }
        assert!(ks < 0.01, "KS = {ks}");
        // Cauchy: mean chord πL/4
        let mean = lens.iter().sum::<f64>() / n;
        assert!((mean / (std::f64::consts::PI * l / 4.0) - 1.0).abs() < 0.01);
    }

    #[test]
    fn zero_intensity_leaves_ground_state() {
        let s = sys();
        let b = BeamField::new(1e-3, 0.0, s.wavevector()).unwrap();
        let tr = sample_trajectories(&b, 4e-3, 50, 300.0, 5, 0, 0.0).unwrap();
        let g = accumulate_class(&s, &b, &tr, -TWO_PI * 2.2e9, &opts(4e-3, 1e-7)).unwrap();
        assert!(g.counts.iter().sum::<u64>() > 0);
        assert!(g.sum13.iter().chain(&g.sum23).all(|z| z.norm() == 0.0));
        assert_eq!(g.invariant_violations, 0);
    }

    #[test]
    fn slow_atom_at_centre_reaches_steady_state() {
        let s = sys();
        let w = 1e-3;
        let b = BeamField::new(w, 17.8, s.wavevector()).unwrap();
        let l = 4.0 * w;
        let v = 0.5;
        let tr = Trajectory {
            start: [-0.5 * l, 0.0],
            velocity: [v, 0.0],
            duration: l / v,
            doppler: 0.0,
            sample_phase: 0.5,
        };
        let det = -TWO_PI * 2.2e9;
        let o = AccumulationOptions { grid_size: 64, ..opts(l, 2e-6) };
        let g = accumulate_class(&s, &b, &[tr], det, &o).unwrap();
        let k = g.index(1e-6, 1e-6).unwrap();
        let (_, r23) = g.mean(k).unwrap();
        let (x, y) = g.cell_center(k);
        let (o13, o23) = rabi_frequencies(&s, b.intensity_at(x, y));
        let ss = steady_state(&assemble(&s, o13, o23, det, 0.0)).unwrap();
        assert!((r23 - ss.rho23()).norm() / ss.rho23().norm() < 0.02, "{r23} vs {}", ss.rho23());
    }

    #[test]
    fn slower_atoms_are_pumped_further() {
        // Longer dwell drives the centre closer to the Γ_t = 0 steady state, which has
        // |2⟩ depleted and hence a smaller |ρ₂₃| than a freshly arrived atom.
        let s = sys();
        let w = 0.5e-3;
        let b = BeamField::new(w, 30.0, s.wavevector()).unwrap();
        let l = 4.0 * w;
        let det = -TWO_PI * 1.0e9;
        let centre = |v: f64| {
            let tr = sample_central_trajectories(&b, l, 150, v, 9, 0, 0.0, 0.1 * w).unwrap();
            let tr: Vec<_> = tr.into_iter().map(|p| p.1).collect();
            let o = AccumulationOptions { grid_size: 8, ..opts(l, 0.2 * l / 8.0 / 1000.0) };
            let g = accumulate_class(&s, &b, &tr, det, &o).unwrap();
            let ks = [27usize, 28, 35, 36];
            ks.iter().map(|&k| g.mean(k).unwrap().1).sum::<Complex64>() / 4.0
        };
        let (x, y) = (0.5 * l / 8.0, 0.5 * l / 8.0);
        let (o13, o23) = rabi_frequencies(&s, b.intensity_at(x, y));
        let ss = steady_state(&assemble(&s, o13, o23, det, 0.0)).unwrap().rho23();
        let slow = centre(100.0);
        let fast = centre(1000.0);
        assert!(slow.norm() < fast.norm(), "fast {fast} slow {slow}");
        assert!((slow - ss).norm() < (fast - ss).norm());
    }

    fn small_map(chi: Complex64, valid: bool) -> SusceptibilityMap {
        SusceptibilityMap {
            n: 4,
            box_size: 4e-3,
            chi: vec![chi; 16],
            valid: vec![valid; 16],
            masked_low_field: 0,
            meta: MapMetadata {
                waist: 1e-3,
                intensity_wcm2: 1.0,
                detuning_hz: -1e9,
                temperature: 400.0,
                seed: 0,
                speed: 100.0,
            },
        }
    }

    #[test]
    fn susceptibility_map_hand_value_and_scaling() {
        let s = sys();
        let b = BeamField::new(1e-3, 10.0, s.wavevector()).unwrap();
        let mut g = CoherenceGrid::new(4, 4e-3);
        let k = g.index(0.5e-3, 0.5e-3).unwrap();
        let r13 = Complex64::new(1e-4, 2e-6);
        let r23 = Complex64::new(3e-4, -1e-6);
        g.sum13[k] = r13 * 2.0;
        g.sum23[k] = r23 * 2.0;
        g.counts[k] = 2;
        let cell = VaporCell::with_density(&s, 400.0, 0.01, 1e19).unwrap();
        let meta = small_map(Complex64::new(0.0, 0.0), true).meta;
        let m = susceptibility_map(&g, &b, &cell, &s, meta);
        let (x, y) = g.cell_center(k);
        let e = b.field_at(x, y);
        let hand = 2.0 * 1e19 / (crate::constants::EPSILON_0 * e) * (s.mu23 * r23.conj() + s.mu13 * r13.conj());
        assert!((m.chi[k] - hand).norm() < 1e-12 * hand.norm());
        assert_eq!(m.valid.iter().filter(|v| **v).count(), 1);
        let cell2 = VaporCell::with_density(&s, 400.0, 0.01, 2e19).unwrap();
        let m2 = susceptibility_map(&g, &b, &cell2, &s, meta);
        assert!((m2.chi[k] - m.chi[k] * 2.0).norm() < 1e-12 * hand.norm());
        g.sum13[k] = Complex64::new(0.0, 0.0);
        g.sum23[k] = Complex64::new(0.0, 0.0);
        assert_eq!(susceptibility_map(&g, &b, &cell, &s, meta).chi[k], Complex64::new(0.0, 0.0));
    }

    #[test]
    fn velocity_average_identities() {
        let m = small_map(Complex64::new(2e-4, 1e-6), true);
        let one = VelocityClass { speed: 100.0, weight: 1.0 };
        assert_eq!(velocity_average(&[(m.clone(), one)]).unwrap().chi, m.chi);
        let a = VelocityClass { speed: 100.0, weight: 0.3 };
        let b = VelocityClass { speed: 200.0, weight: 0.7 };
        let avg = velocity_average(&[(m.clone(), a), (m.clone(), b)]).unwrap();
        for k in 0..16 {
            assert!((avg.chi[k] - m.chi[k]).norm() < 1e-18);
        }
        let mut other = m.clone();
        other.n = 2;
        assert!(velocity_average(&[(m, a), (other, b)]).is_err());
    }

    #[test]
    fn delta_n_of_identical_maps_is_zero() {
        let m = small_map(Complex64::new(2e-4, 1e-6), true);
        assert_eq!(delta_n(&m, &m, 1e-4).unwrap().center, 0.0);
        let mut bad = m.clone();
        bad.box_size = 1.0;
        assert!(delta_n(&m, &bad, 1e-4).is_err());
        assert!(delta_n(&small_map(Complex64::new(0.0, 0.0), false), &m, 1e-4).is_err());
    }

    #[test]
    fn absorption_slicing() {
        let s = sys();
        let model = |i: f64| Ok(-1e-6 * i / (1.0 + i / 50.0));
        let clear = VaporCell::new(&s, 400.0, 0.01).unwrap();
        assert_eq!(absorption_sliced_delta_n(20.0, &clear, 7, model).unwrap(), model(20.0).unwrap());
        let cell = clear.with_alpha(15.0);
        let one = absorption_sliced_delta_n(20.0, &cell, 1, model).unwrap();
        let eff = model(cell.effective_intensity(20.0)).unwrap();
        assert!((one / eff - 1.0).abs() < 0.01, "{one} {eff}");
        let mut prev = 0.0f64;
        for alpha in [0.0, 20.0, 60.0, 150.0] {
            let v = absorption_sliced_delta_n(20.0, &clear.with_alpha(alpha), 16, model).unwrap().abs();
            if alpha > 0.0 {
                assert!(v < prev);
            }
            prev = v;
        }
    }

    fn tiny_cfg() -> RunConfig {
        RunConfig {
            n_traj: 200,
            n_classes: 3,
            grid_size: 16,
            center_radius: 0.25,
            ..RunConfig::default()
        }
    }

    #[test]
    fn red_detuning_defocuses() {
        let s = sys();
        let r = simulate_waist(&s, &tiny_cfg(), 0.5e-3, &[17.8]).unwrap();
        assert!(r[0].delta_n < 0.0);
        assert_eq!(r[0].stats.invariant_violations, 0);
        assert_eq!(r[0].stats.failed, 0);
    }

    #[test]
    fn worker_count_does_not_change_grids() {
        let s = sys();
        let b = BeamField::new(0.5e-3, 17.8, s.wavevector()).unwrap();
        let tr = sample_trajectories(&b, 2e-3, 300, 250.0, 21, 1, 200.0).unwrap();
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| accumulate_class(&s, &b, &tr, -TWO_PI * 2.2e9, &opts(2e-3, 5e-8)).unwrap())
        };
        let a = run(1);
        let c = run(3);
        assert_eq!(a, c);
        let bits = |g: &CoherenceGrid| g.sum23.iter().map(|z| (z.re.to_bits(), z.im.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&c));
    }

    #[test]
    fn analytic_sweep_is_defocusing_and_growing() {
        let s = sys();
        let cfg = RunConfig::default();
        let w = [0.3e-3, 0.6e-3, 1.2e-3, 1.8e-3];
        let sweep = analytic_waist_sweep(&s, &cfg, &w, 17.8).unwrap();
        assert!(sweep.points.iter().all(|p| p.1 < 0.0));
        assert!(sweep.monotone);
    }

    #[test]
    fn pulsed_response_starts_at_zero() {
        let s = sys();
        let cfg = RunConfig { n_traj: 40, n_classes: 2, detuning_hz: -5.5e9, temperature: 413.15, ..RunConfig::default() };
        let delays = [1e-9, 0.3e-6, 0.6e-6, 1.2e-6, 2.4e-6];
        let r = pulsed_response(&s, &cfg, 0.66e-3, 58.5, &delays).unwrap();
        let plateau = r.points.last().unwrap().1;
        assert!(plateau < 0.0);
        assert!(r.points[0].1.abs() < 1e-3 * plateau.abs());
        assert!(r.bound > 0.0);
    }
}
