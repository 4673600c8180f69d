//! Three-level optical Bloch equations with a phenomenological transit rate.
//!
//! The reduced density vector is (ρ₁₁, ρ₂₂, ρ₂₁, ρ₁₂, ρ₃₁, ρ₁₃, ρ₃₂, ρ₂₃); ρ₃₃ is
//! eliminated through ρ₃₃ = 1 − ρ₁₁ − ρ₂₂, which is where the affine term `b` and the
//! seemingly asymmetric Ω factors of the population-difference terms come from
//! (e.g. iΩ₁₃ρ₁₁ + iΩ₁₃ρ₂₂/2 − iΩ₁₃/2 = iΩ₁₃(ρ₁₁ − ρ₃₃)/2). The matrix is transcribed
//! entry by entry and not symmetrised.
//!
//! Detunings: γ̃₃₂ = Γ − iΔ and γ̃₃₁ = Γ − i(Δ − δ), so Δ is the detuning seen on
//! |2⟩→|3⟩ and Δ − δ the one seen on |1⟩→|3⟩.

use nalgebra::linalg::Schur;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::atomvapor::{AtomicSystem, VaporCell};
use crate::constants::{field_from_intensity, EPSILON_0, HBAR};
use crate::error::{Error, Result};
use crate::ode::{self, CMatrix, CVector, IntegrationStats, LinearSystem, Lu, StepOptions};

pub const RHO11: usize = 0;
pub const RHO22: usize = 1;
pub const RHO21: usize = 2;
pub const RHO12: usize = 3;
pub const RHO31: usize = 4;
pub const RHO13: usize = 5;
pub const RHO32: usize = 6;
pub const RHO23: usize = 7;

/// Default tolerance for population bounds.
pub const POPULATION_TOL: f64 = 1e-6;
/// Default tolerance for reality of populations and conjugate symmetry.
pub const HERMITICITY_TOL: f64 = 1e-9;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

#[inline]
fn re(x: f64) -> Complex64 {
    Complex64::new(x, 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityState {
    pub components: [Complex64; 8],
}

impl DensityState {
    /// Thermal ground state (G₁, G₂, 0, …, 0).
    pub fn ground(system: &AtomicSystem) -> Self {
        let mut components = [Complex64::new(0.0, 0.0); 8];
        components[RHO11] = re(system.g1);
        components[RHO22] = re(system.g2);
        DensityState { components }
    }

    pub fn from_vector(v: &CVector<8>) -> Self {
        let mut components = [Complex64::new(0.0, 0.0); 8];
        components.copy_from_slice(v.as_slice());
        DensityState { components }
    }

    pub fn to_vector(&self) -> CVector<8> {
        CVector::<8>::from_column_slice(&self.components)
    }

    pub fn rho11(&self) -> f64 {
        self.components[RHO11].re
    }
    pub fn rho22(&self) -> f64 {
        self.components[RHO22].re
    }
    pub fn rho33(&self) -> f64 {
        1.0 - self.rho11() - self.rho22()
    }
    pub fn rho13(&self) -> Complex64 {
        self.components[RHO13]
    }
    pub fn rho23(&self) -> Complex64 {
        self.components[RHO23]
    }

    /// Checks reality of populations, the population bounds and conjugate symmetry of
    /// the coherence pairs.
    pub fn check_invariants(&self, pop_tol: f64, herm_tol: f64) -> std::result::Result<(), String> {
        let c = &self.components;
        for (name, idx) in [("rho11", RHO11), ("rho22", RHO22)] {
            if c[idx].im.abs() > herm_tol {
                return Err(format!("Im({name}) = {:e}", c[idx].im));
            }
            if c[idx].re < -pop_tol || c[idx].re > 1.0 + pop_tol {
                return Err(format!("{name} = {} out of [0, 1]", c[idx].re));
            }
        }
        if c[RHO11].re + c[RHO22].re > 1.0 + pop_tol {
            return Err(format!("rho11 + rho22 = {}", c[RHO11].re + c[RHO22].re));
        }
        for (a, b) in [(RHO21, RHO12), (RHO31, RHO13), (RHO32, RHO23)] {
            if (c[a] - c[b].conj()).norm() > herm_tol {
                return Err(format!("coherence pair ({a}, {b}) not conjugate"));
            }
        }
        if c.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
            return Err("non-finite component".into());
        }
        Ok(())
    }
}

/// A(Ω, Δ, Γ_t) and b of ∂ₜρ = Aρ + b, together with the rates used to build them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlochOperator {
    pub a: CMatrix<8>,
    pub b: CVector<8>,
    /// γ̃₃₂ = Γ − iΔ
    pub gamma32: Complex64,
    /// γ̃₃₁ = Γ − i(Δ − δ)
    pub gamma31: Complex64,
    /// γ̃₂₁ = Γ_t + iδ
    pub gamma21: Complex64,
    pub rabi13: f64,
    pub rabi23: f64,
    pub transit: f64,
    pub detuning: f64,
}

/// Builds the Bloch operator. All rates in rad/s.
pub fn assemble(
    system: &AtomicSystem,
    rabi13: f64,
    rabi23: f64,
    detuning: f64,
    transit: f64,
) -> BlochOperator {
    let g = system.gamma;
    let gt = transit;
    let g32 = Complex64::new(g, -detuning);
    let g31 = Complex64::new(g, -(detuning - system.delta_hf));
    let g21 = Complex64::new(gt, system.delta_hf);
    let o13 = re(rabi13);
    let o23 = re(rabi23);
    let o13c = o13.conj();
    let o23c = o23.conj();
    let z = Complex64::new(0.0, 0.0);
    let h = 0.5;

    #[rustfmt::skip]
    let rows: [[Complex64; 8]; 8] = [
        [re(-gt - g * h), re(-g * h), z, z, I * o13c * h, -I * o13 * h, z, z],
        [re(-g * h), re(-gt - g * h), z, z, z, z, I * o23c * h, -I * o23 * h],
        [z, z, -g21, z, I * o23c * h, z, z, -I * o13 * h],
        [z, z, z, -g21.conj(), z, -I * o23 * h, I * o13c * h, z],
        [I * o13, I * o13 * h, I * o23 * h, z, -g31, z, z, z],
        [-I * o13c, -I * o13c * h, z, -I * o23c * h, z, -g31.conj(), z, z],
        [I * o23 * h, I * o23, z, I * o13 * h, z, z, -g32, z],
        [-I * o23c * h, -I * o23c, -I * o13c * h, z, z, z, z, -g32.conj()],
    ];
    let b = CVector::<8>::from_column_slice(&[
        re(g * h + system.g1 * gt),
        re(g * h + system.g2 * gt),
        z,
        z,
        -I * o13 * h,
        I * o13c * h,
        -I * o23 * h,
        I * o23c * h,
    ]);
    let mut a = CMatrix::<8>::zeros();
    for (r, row) in rows.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            a[(r, c)] = *v;
        }
    }
    BlochOperator {
        a,
        b,
        gamma32: g32,
        gamma31: g31,
        gamma21: g21,
        rabi13,
        rabi23,
        transit,
        detuning,
    }
}

/// Rabi frequencies (Ω₁₃, Ω₂₃) in rad/s for a peak intensity in W/m², Ω = μ𝓔/ħ.
pub fn rabi_frequencies(system: &AtomicSystem, intensity: f64) -> (f64, f64) {
    let e = field_from_intensity(intensity);
    (system.mu13 * e / HBAR, system.mu23 * e / HBAR)
}

/// Solves Aρ = −b.
pub fn steady_state(op: &BlochOperator) -> Result<DensityState> {
    let singular = |ratio: f64| {
        Error::Singular(format!(
            "Bloch matrix has pivot ratio {ratio:e} (zero field with Γ_t = 0 leaves the ground manifold undetermined)"
        ))
    };
    let lu = Lu::factor(op.a).ok_or_else(|| singular(0.0))?;
    let (lo, hi) = lu.pivot_range();
    if lo <= 1e-13 * hi {
        return Err(singular(lo / hi));
    }
    let rhs = -op.b;
    let mut x = lu.solve(&rhs);
    // One step of iterative refinement.
    let r = rhs - op.a * x;
    x += lu.solve(&r);
    Ok(DensityState::from_vector(&x))
}

/// Eigenvalues of A.
pub fn eigenvalues(op: &BlochOperator) -> Vec<Complex64> {
    let (_, t) = Schur::new(op.a).unpack();
    (0..8).map(|k| t[(k, k)]).collect()
}

/// Slowest relaxation time 1/min|Re dᵢ|: an upper bound on the response time.
pub fn response_timescale(op: &BlochOperator) -> Result<f64> {
    let eig = eigenvalues(op);
    let max_re = eig.iter().map(|d| d.re).fold(f64::NEG_INFINITY, f64::max);
    if !(max_re < 0.0) {
        return Err(Error::NonDecaying { max_re });
    }
    let slowest = eig.iter().map(|d| d.re.abs()).fold(f64::INFINITY, f64::min);
    Ok(1.0 / slowest)
}

/// Far-detuned steady-state susceptibility of the |2⟩→|3⟩ transition with transit
/// rate Γ_t, for a field amplitude in V/m.
pub fn analytic_chi23(
    system: &AtomicSystem,
    cell: &VaporCell,
    field: f64,
    detuning: f64,
    transit: f64,
) -> Complex64 {
    let g = system.gamma;
    let a = 0.5 * g / (0.5 * g + transit);
    let b = transit / (0.5 * g + transit);
    let scale = (2.0 * b * (1.0 + a) / (1.0 + b)).sqrt();
    let e_sat = scale * HBAR * g / system.mu23;
    let x = detuning / g;
    let prefactor =
        scale * system.g2 * cell.density * system.mu23 * system.mu23 / (EPSILON_0 * HBAR * g);
    let denom = 1.0 + x * x + (field / e_sat).powi(2);
    prefactor * Complex64::new(-x, 1.0) / denom
}

/// χ = 2N/(ε₀𝓔)(μ₂₃ρ₃₂ + μ₁₃ρ₃₁).
///
/// The optical coherences enter through their e^{−iωt} components ρ₃ⱼ = ρⱼ₃*, which
/// makes Im χ > 0 for an absorbing vapor with the sign conventions of [`assemble`].
/// Re χ is the same whichever member of each conjugate pair is used.
pub fn susceptibility(
    system: &AtomicSystem,
    density: f64,
    field: f64,
    rho13: Complex64,
    rho23: Complex64,
) -> Complex64 {
    2.0 * density / (EPSILON_0 * field) * (system.mu23 * rho23.conj() + system.mu13 * rho13.conj())
}

/// Refractive index n = √(1 + Re χ), without linearisation.
pub fn refractive_index(chi: Complex64) -> f64 {
    (1.0 + chi.re).sqrt()
}

/// Precomputed affine dependence of the operator on real Rabi frequencies:
/// A = A₀ + Ω₁₃A₁₃ + Ω₂₃A₂₃ and likewise for b. Only the few entries touched by the
/// drive are stored for A₁₃ and A₂₃.
#[derive(Debug, Clone)]
pub struct BlochBasis {
    a0: CMatrix<8>,
    /// (flat index, coefficient of Ω₁₃, coefficient of Ω₂₃)
    a_drive: Vec<(usize, Complex64, Complex64)>,
    b0: CVector<8>,
    b13: CVector<8>,
    b23: CVector<8>,
}

impl BlochBasis {
    pub fn new(system: &AtomicSystem, detuning: f64, transit: f64) -> Self {
        let base = assemble(system, 0.0, 0.0, detuning, transit);
        let p13 = assemble(system, 1.0, 0.0, detuning, transit);
        let p23 = assemble(system, 0.0, 1.0, detuning, transit);
        let d13 = p13.a - base.a;
        let d23 = p23.a - base.a;
        let a_drive = (0..64)
            .filter(|&k| d13[k].norm() != 0.0 || d23[k].norm() != 0.0)
            .map(|k| (k, d13[k], d23[k]))
            .collect();
        BlochBasis {
            a0: base.a,
            a_drive,
            b0: base.b,
            b13: p13.b - base.b,
            b23: p23.b - base.b,
        }
    }

    #[inline]
    pub fn fill(&self, rabi13: f64, rabi23: f64, a: &mut CMatrix<8>, b: &mut CVector<8>) {
        *a = self.a0;
        for &(k, c13, c23) in &self.a_drive {
            a[k] += c13 * rabi13 + c23 * rabi23;
        }
        for k in 0..8 {
            b[k] = self.b0[k] + self.b13[k] * rabi13 + self.b23[k] * rabi23;
        }
    }
}

/// Bloch dynamics with a smooth, time-dependent drive t ↦ (Ω₁₃(t), Ω₂₃(t)).
pub struct DrivenBloch<F> {
    basis: BlochBasis,
    rabi: F,
}

impl<F: Fn(f64) -> (f64, f64)> DrivenBloch<F> {
    pub fn new(system: &AtomicSystem, detuning: f64, transit: f64, rabi: F) -> Self {
        DrivenBloch {
            basis: BlochBasis::new(system, detuning, transit),
            rabi,
        }
    }
}

impl<F: Fn(f64) -> (f64, f64)> LinearSystem<8> for DrivenBloch<F> {
    #[inline]
    fn coefficients(&self, t: f64, a: &mut CMatrix<8>, b: &mut CVector<8>) {
        let (o13, o23) = (self.rabi)(t);
        self.basis.fill(o13, o23, a, b);
    }
}

struct OperatorFn<F>(F);

impl<F: Fn(f64) -> BlochOperator> LinearSystem<8> for OperatorFn<F> {
    fn coefficients(&self, t: f64, a: &mut CMatrix<8>, b: &mut CVector<8>) {
        let op = (self.0)(t);
        *a = op.a;
        *b = op.b;
    }
}

/// Smooth switch-on ½(1 + erf((t − 3σ)/σ)), essentially 0 at t = 0 and 1 after 6σ.
///
/// An instantaneous switch excites the ground-state coherence ρ₂₁ at the hyperfine
/// frequency, which is undamped when Γ_t = 0 and would have to be resolved at the
/// picosecond scale. A rise of a few ns is adiabatic with respect to Δ and δ.
pub fn switch_on(t: f64, sigma: f64) -> f64 {
    if sigma <= 0.0 {
        return if t >= 0.0 { 1.0 } else { 0.0 };
    }
    0.5 * (1.0 + libm::erf((t - 3.0 * sigma) / sigma))
}

/// Default rise parameter σ of [`switch_on`] (s).
pub const DEFAULT_SWITCH_SIGMA: f64 = 10e-9;

/// Integrator settings for the Bloch equations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub rtol: f64,
    pub atol: f64,
    /// Maximum step (s); 0.1 µs by default.
    pub max_step: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            rtol: 1e-8,
            atol: 1e-10,
            max_step: 1e-7,
        }
    }
}

impl IntegratorConfig {
    /// Tolerances used for Monte-Carlo trajectories. Grid-averaged coherences agree
    /// with the default tolerances to about 1e-7 relative at 5–30× fewer steps.
    pub fn monte_carlo() -> Self {
        IntegratorConfig {
            rtol: 1e-6,
            atol: 1e-8,
            ..Self::default()
        }
    }

    pub fn step_options(&self) -> StepOptions {
        StepOptions {
            rtol: self.rtol,
            atol: self.atol,
            max_step: self.max_step,
            ..StepOptions::default()
        }
    }
}

/// Integrates ∂ₜρ = A(t)ρ + b(t) for an arbitrary operator-valued function and returns
/// the state after every accepted step (including the initial state).
pub fn integrate<F>(
    op_of_t: F,
    rho0: DensityState,
    t_span: (f64, f64),
    config: &IntegratorConfig,
) -> Result<Vec<(f64, DensityState)>>
where
    F: Fn(f64) -> BlochOperator,
{
    let sys = OperatorFn(op_of_t);
    let mut out = vec![(t_span.0, rho0)];
    ode::integrate(&sys, rho0.to_vector(), t_span.0, t_span.1, &config.step_options(), |s| {
        out.push((s.t1, DensityState::from_vector(&s.y1)));
    })?;
    Ok(out)
}

/// Integrates a driven system, reporting interpolated states at `sample_times`.
pub fn integrate_driven<F>(
    dynamics: &DrivenBloch<F>,
    rho0: DensityState,
    t_span: (f64, f64),
    config: &IntegratorConfig,
    sample_times: impl IntoIterator<Item = f64>,
    mut on_sample: impl FnMut(f64, DensityState),
) -> Result<(DensityState, IntegrationStats)>
where
    F: Fn(f64) -> (f64, f64),
{
    let (y, stats) = ode::integrate_sampled(
        dynamics,
        rho0.to_vector(),
        t_span.0,
        t_span.1,
        &config.step_options(),
        sample_times,
        |t, y| on_sample(t, DensityState::from_vector(y)),
    )?;
    Ok((DensityState::from_vector(&y), stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constants::{TWO_PI, W_PER_CM2};

    fn sys() -> AtomicSystem {
        AtomicSystem::rb87_d2()
    }

    #[test]
    fn zero_field_steady_state_is_thermal() {
        let op = assemble(&sys(), 0.0, 0.0, -TWO_PI * 2.2e9, TWO_PI * 50e3);
        let rho = steady_state(&op).unwrap();
        assert!((rho.rho11() - 0.375).abs() < 1e-10);
        assert!((rho.rho22() - 0.625).abs() < 1e-10);
        for k in 2..8 {
            assert!(rho.components[k].norm() < 1e-10);
        }
    }

    #[test]
    fn zero_field_without_transit_is_singular() {
        let op = assemble(&sys(), 0.0, 0.0, -TWO_PI * 2.2e9, 0.0);
        assert!(matches!(steady_state(&op), Err(Error::Singular(_))));
    }

    #[test]
    fn resonant_rate_is_real() {
        let op = assemble(&sys(), 1e8, 1e8, 0.0, 1e5);
        assert_eq!(op.gamma32.im, 0.0);
        assert_eq!(op.gamma32.re, sys().gamma);
    }

    #[test]
    fn steady_state_residual_small() {
        let (o13, o23) = rabi_frequencies(&sys(), 17.8 * W_PER_CM2);
        let op = assemble(&sys(), o13, o23, -TWO_PI * 2.2e9, 3e5);
        let rho = steady_state(&op).unwrap();
        let r = op.a * rho.to_vector() + op.b;
        assert!(r.norm() < 1e-10 * op.b.norm());
        rho.check_invariants(POPULATION_TOL, HERMITICITY_TOL).unwrap();
    }

    #[test]
    fn zero_field_timescale_is_inverse_transit() {
        let gt = TWO_PI * 80e3;
        let op = assemble(&sys(), 0.0, 0.0, -TWO_PI * 3e9, gt);
        let tau = response_timescale(&op).unwrap();
        assert!((tau * gt - 1.0).abs() < 1e-6, "{tau}");
    }

    #[test]
    fn non_decaying_mode_rejected() {
        let op = assemble(&sys(), 0.0, 0.0, -TWO_PI * 3e9, 0.0);
        assert!(matches!(response_timescale(&op), Err(Error::NonDecaying { .. })));
    }

    #[test]
    fn basis_reproduces_assemble() {
        let s = sys();
        let basis = BlochBasis::new(&s, -1.3e10, 2e5);
        let op = assemble(&s, 3.1e8, -1.7e8, -1.3e10, 2e5);
        let mut a = CMatrix::<8>::zeros();
        let mut b = CVector::<8>::zeros();
        basis.fill(3.1e8, -1.7e8, &mut a, &mut b);
        assert!((a - op.a).norm() < 1e-6 * op.a.norm());
        assert!((b - op.b).norm() < 1e-9 * op.b.norm());
    }

    #[test]
    fn analytic_chi_signs_and_half_point() {
        let s = sys();
        let cell = VaporCell::new(&s, 423.15, 0.01).unwrap();
        let gt = 3e5;
        for det in [-5e10, -1e9, 0.0, 1e9, 5e10] {
            assert!(analytic_chi23(&s, &cell, 1e3, det, gt).im > 0.0);
        }
        let det = -TWO_PI * 2.2e9;
        let lo = analytic_chi23(&s, &cell, 1e3, det, gt);
        let hi = analytic_chi23(&s, &cell, 2e4, det, gt);
        assert!(lo.re > 0.0 && hi.re < lo.re);
        // at 𝓔 = 𝓔_S and Δ = 0 the denominator doubles
        let g = s.gamma;
        let (a, b) = (0.5 * g / (0.5 * g + gt), gt / (0.5 * g + gt));
        let e_sat = (2.0 * b * (1.0 + a) / (1.0 + b)).sqrt() * HBAR * g / s.mu23;
        let weak = analytic_chi23(&s, &cell, 1e-6 * e_sat, 0.0, gt);
        let sat = analytic_chi23(&s, &cell, e_sat, 0.0, gt);
        assert!((sat.norm() / weak.norm() - 0.5).abs() < 1e-9);
    }

    /// The equations of motion written out in terms of the full density matrix with
    /// ρ₃₃ = 1 − ρ₁₁ − ρ₂₂, independently of the matrix layout.
    fn physical_rhs(
        s: &AtomicSystem,
        o13: Complex64,
        o23: Complex64,
        det: f64,
        gt: f64,
        r: &[Complex64; 8],
    ) -> [Complex64; 8] {
        let g = s.gamma;
        let g32 = Complex64::new(g, -det);
        let g31 = Complex64::new(g, -(det - s.delta_hf));
        let g21 = Complex64::new(gt, s.delta_hf);
        let [r11, r22, r21, r12, r31, r13, r32, r23] = *r;
        let r33 = 1.0 - r11 - r22;
        let h = 0.5;
        [
            -gt * r11 + s.g1 * gt + g * h * r33 + I * h * (o13.conj() * r31 - o13 * r13),
            -gt * r22 + s.g2 * gt + g * h * r33 + I * h * (o23.conj() * r32 - o23 * r23),
            -g21 * r21 + I * h * (o23.conj() * r31 - o13 * r23),
            -g21.conj() * r12 + I * h * (o13.conj() * r32 - o23 * r13),
            -g31 * r31 + I * o13 * h * (r11 - r33) + I * o23 * h * r21,
            -g31.conj() * r13 - I * o13.conj() * h * (r11 - r33) - I * o23.conj() * h * r12,
            -g32 * r32 + I * o23 * h * (r22 - r33) + I * o13 * h * r12,
            -g32.conj() * r23 - I * o23.conj() * h * (r22 - r33) - I * o13.conj() * h * r21,
        ]
    }

    fn random_state(rng: &mut impl rand::Rng) -> [Complex64; 8] {
        let mut r = [Complex64::new(0.0, 0.0); 8];
        for z in r.iter_mut() {
            *z = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        }
        r
    }

    #[test]
    fn matrix_matches_equations_of_motion() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let s = sys();
        for _ in 0..200 {
            let o13 = rng.random_range(-3e9..3e9);
            let o23 = rng.random_range(-3e9..3e9);
            let det = rng.random_range(-8e10..8e10);
            let gt = rng.random_range(0.0..2e6);
            let op = assemble(&s, o13, o23, det, gt);
            let r = random_state(&mut rng);
            let lhs = op.a * CVector::<8>::from_column_slice(&r) + op.b;
            let rhs = physical_rhs(&s, re(o13), re(o23), det, gt, &r);
            let scale = 1e-12 * (3e9 + 8e10);
            for k in 0..8 {
                assert!((lhs[k] - rhs[k]).norm() < scale, "component {k}");
            }
        }
    }

    #[test]
    fn constant_operator_from_steady_state_stays_put() {
        let s = sys();
        let (o13, o23) = rabi_frequencies(&s, 17.8 * W_PER_CM2);
        let op = assemble(&s, o13, o23, -TWO_PI * 2.2e9, 4e5);
        let rho = steady_state(&op).unwrap();
        let traj = integrate(|_| op, rho, (0.0, 20e-6), &IntegratorConfig::default()).unwrap();
        for (_, r) in &traj {
            for k in 0..8 {
                assert!((r.components[k] - rho.components[k]).norm() < 1e-7);
            }
        }
    }

    fn relax_to_steady(s: &AtomicSystem, intensity: f64, det: f64, gt: f64) -> (DensityState, DensityState) {
        let (o13, o23) = rabi_frequencies(s, intensity);
        let op = assemble(s, o13, o23, det, gt);
        let tau = response_timescale(&op).unwrap();
        let sigma = DEFAULT_SWITCH_SIGMA;
        let basis = DrivenBloch::new(s, det, gt, move |t| {
            let f = switch_on(t, sigma);
            (o13 * f, o23 * f)
        });
        let (end, _) = integrate_driven(
            &basis,
            DensityState::ground(s),
            (0.0, 6.0 * sigma + 20.0 * tau),
            &IntegratorConfig::default(),
            std::iter::empty(),
            |_, _| {},
        )
        .unwrap();
        (end, steady_state(&op).unwrap())
    }

    #[test]
    fn long_time_limit_matches_steady_state() {
        let s = sys();
        for (i, det_ghz, gt) in [(17.8, -2.2, 3e5), (1.0, -6.0, 1e6), (60.0, -1.0, 2e4)] {
            let (end, ss) = relax_to_steady(&s, i * W_PER_CM2, TWO_PI * det_ghz * 1e9, gt);
            for k in 0..8 {
                assert!((end.components[k] - ss.components[k]).norm() < 1e-6, "{k}");
            }
        }
    }

    #[test]
    fn populations_stay_physical_at_reference_point() {
        let s = sys();
        let (o13, o23) = rabi_frequencies(&s, 17.8 * W_PER_CM2);
        let basis = DrivenBloch::new(&s, -TWO_PI * 2.2e9, 0.0, move |t: f64| {
            let e = (-((t - 5e-6) / 2e-6).powi(2)).exp();
            (o13 * e, o23 * e)
        });
        let times: Vec<f64> = (0..=500).map(|k| k as f64 * 2e-8).collect();
        let mut n = 0;
        integrate_driven(
            &basis,
            DensityState::ground(&s),
            (0.0, 10e-6),
            &IntegratorConfig::default(),
            times,
            |_, r| {
                r.check_invariants(POPULATION_TOL, HERMITICITY_TOL).unwrap();
                n += 1;
            },
        )
        .unwrap();
        assert_eq!(n, 501);
    }

    #[test]
    fn without_transit_population_returns_to_ground_manifold() {
        let s = sys();
        let op = assemble(&s, 0.0, 0.0, -TWO_PI * 2e9, 0.0);
        let mut rho = DensityState::ground(&s);
        rho.components[RHO11] = re(0.2);
        rho.components[RHO22] = re(0.3);
        let traj = integrate(|_| op, rho, (0.0, 2e-6), &IntegratorConfig::default()).unwrap();
        let (_, last) = traj.last().unwrap();
        assert!((last.rho11() + last.rho22() - 1.0).abs() < 1e-8);
        let t = 0.3e-6;
        let (_, mid) = traj.iter().min_by(|a, b| (a.0 - t).abs().total_cmp(&(b.0 - t).abs())).unwrap();
        let (tm, _) = traj.iter().min_by(|a, b| (a.0 - t).abs().total_cmp(&(b.0 - t).abs())).unwrap();
        let expected = 1.0 - 0.5 * (-s.gamma * tm).exp();
        assert!((mid.rho11() + mid.rho22() - expected).abs() < 1e-6);
    }

    #[test]
    fn switch_on_is_monotone_and_saturates() {
        assert!(switch_on(0.0, 1e-8) < 2e-5);
        assert!((switch_on(1e-7, 1e-8) - 1.0).abs() < 1e-12);
        let mut prev = 0.0;
        for k in 0..100 {
            let f = switch_on(k as f64 * 1e-9, 1e-8);
            assert!(f >= prev);
            prev = f;
        }
        assert_eq!(switch_on(-1.0, 0.0), 0.0);
        assert_eq!(switch_on(0.0, 0.0), 1.0);
    }

    #[test]
    fn timescale_shrinks_toward_resonance() {
        let s = sys();
        let (o13, o23) = rabi_frequencies(&s, 58.0 * W_PER_CM2);
        let gt = 3e5;
        let far = response_timescale(&assemble(&s, o13, o23, -TWO_PI * 9.5e9, gt)).unwrap();
        let near = response_timescale(&assemble(&s, o13, o23, -TWO_PI * 5.5e9, gt)).unwrap();
        assert!(near < far);
    }

    #[test]
    fn steady_state_approaches_analytic_model_far_detuned() {
        let s = sys();
        let cell = VaporCell::new(&s, 423.15, 0.01).unwrap();
        let gt = 0.5 * s.gamma;
        let det = -TWO_PI * 3.0e9;
        let dn = |intensity: f64, analytic: bool| {
            let e = field_from_intensity(intensity);
            let chi = if analytic {
                analytic_chi23(&s, &cell, e, det, gt)
            } else {
                let (o13, o23) = rabi_frequencies(&s, intensity);
                let rho = steady_state(&assemble(&s, o13, o23, det, gt)).unwrap();
                // |2⟩→|3⟩ contribution only, to match the analytic model.
                susceptibility(&s, cell.density, e, Complex64::new(0.0, 0.0), rho.rho23())
            };
            refractive_index(chi)
        };
        let (hi, lo) = (500.0 * W_PER_CM2, 0.5 * W_PER_CM2);
        let numeric = dn(hi, false) - dn(lo, false);
        let analytic = dn(hi, true) - dn(lo, true);
        assert!(numeric < 0.0 && analytic < 0.0);
        assert!((numeric / analytic - 1.0).abs() < 0.15, "{numeric:e} vs {analytic:e}");
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(500))]

            #[test]
            fn steady_states_are_physical(
                det_ghz in -10.0f64..-1.0,
                i_wcm2 in 0.1f64..100.0,
                gt in 1.0f64..(TWO_PI * 200e3),
            ) {
                let s = AtomicSystem::rb87_d2();
                let (o13, o23) = rabi_frequencies(&s, i_wcm2 * W_PER_CM2);
                let op = assemble(&s, o13, o23, TWO_PI * det_ghz * 1e9, gt);
                let rho = steady_state(&op).unwrap();
                prop_assert!(rho.check_invariants(POPULATION_TOL, HERMITICITY_TOL).is_ok());
                let r = op.a * rho.to_vector() + op.b;
                prop_assert!(r.norm() < 1e-10 * op.b.norm());
            }

            #[test]
            fn eigenvalues_decay(
                det_ghz in -10.0f64..10.0,
                i_wcm2 in 0.0f64..500.0,
                gt in 0.0f64..(TWO_PI * 200e3),
            ) {
                let s = AtomicSystem::rb87_d2();
                let (o13, o23) = rabi_frequencies(&s, i_wcm2 * W_PER_CM2);
                let op = assemble(&s, o13, o23, TWO_PI * det_ghz * 1e9, gt);
                for d in eigenvalues(&op) {
                    prop_assert!(d.re <= 1e-6 * s.gamma);
                }
            }

            #[test]
            fn hermiticity_is_preserved(
                det_ghz in -10.0f64..-1.0,
                i_wcm2 in 0.1f64..100.0,
                gt in 0.0f64..(TWO_PI * 200e3),
                t_cross in 0.5e-6f64..5e-6,
            ) {
                let s = AtomicSystem::rb87_d2();
                let (o13, o23) = rabi_frequencies(&s, i_wcm2 * W_PER_CM2);
                let dyn_ = DrivenBloch::new(&s, TWO_PI * det_ghz * 1e9, gt, move |t: f64| {
                    let e = (-((t - t_cross) / (0.2 * t_cross)).powi(2)).exp();
                    (o13 * e, o23 * e)
                });
                let times: Vec<f64> = (0..=40).map(|k| 2.0 * t_cross * k as f64 / 40.0).collect();
                let mut bad = None;
                integrate_driven(&dyn_, DensityState::ground(&s), (0.0, 2.0 * t_cross),
                    &IntegratorConfig::monte_carlo(), times, |t, r| {
                        if let Err(e) = r.check_invariants(POPULATION_TOL, HERMITICITY_TOL) {
                            bad.get_or_insert((t, e));
                        }
                    }).unwrap();
                prop_assert!(bad.is_none(), "{:?}", bad);
            }
        }
    }
}
