//! Atomic constants, vapor-cell parameters and thermal velocity statistics.
//!
//! Rates are stored as angular frequencies (rad/s). Anything a user types in is an
//! ordinary frequency (MHz/GHz/THz) and is converted exactly once, here.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::constants::{ATOMIC_MASS_UNIT, BOLTZMANN, SPEED_OF_LIGHT, TORR, TWO_PI};
use crate::error::{Error, Result};

/// Compiled-in default constants (Rb87 D2).
pub const DEFAULT_CONSTANTS: &str = include_str!("../data/rb87_d2.conf");

/// Keys understood by [`AtomicSystem::from_constants`].
pub const CONSTANT_KEYS: [&str; 8] = [
    "gamma_mhz",
    "hyperfine_ghz",
    "nu0_thz",
    "mu13_cm",
    "mu23_cm",
    "g1",
    "g2",
    "mass_amu",
];

/// Three-level atom: ground levels |1⟩ (F=1), |2⟩ (F=2) and excited manifold |3⟩.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtomicSystem {
    /// Decay rate Γ (rad/s).
    pub gamma: f64,
    /// Ground hyperfine splitting δ (rad/s).
    pub delta_hf: f64,
    /// Line centre frequency ν₀ (Hz).
    pub nu0: f64,
    /// Dipole moment of |1⟩→|3⟩ (C·m).
    pub mu13: f64,
    /// Dipole moment of |2⟩→|3⟩ (C·m).
    pub mu23: f64,
    pub g1: f64,
    pub g2: f64,
    /// Atomic mass (kg).
    pub mass: f64,
}

impl Default for AtomicSystem {
    fn default() -> Self {
        Self::rb87_d2()
    }
}

impl AtomicSystem {
    /// The compiled-in Rb87 D2 parameters.
    pub fn rb87_d2() -> Self {
        Self::from_constants(DEFAULT_CONSTANTS).expect("bundled constants file is valid")
    }

    /// Parses a `key = value` constants file. Keys missing from `text` keep their
    /// compiled-in default; unknown keys are rejected.
    pub fn from_constants(text: &str) -> Result<Self> {
        let mut values = default_values();
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Constants {
                line: line_no + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim();
            let slot = CONSTANT_KEYS
                .iter()
                .position(|k| *k == key)
                .ok_or_else(|| Error::Constants {
                    line: line_no + 1,
                    message: format!("unknown key `{key}`"),
                })?;
            values[slot] = value.trim().parse::<f64>().map_err(|e| Error::Constants {
                line: line_no + 1,
                message: format!("`{key}`: {e}"),
            })?;
        }
        Self::from_values(&values)
    }

    /// Returns a copy with one constant replaced, `key` as in [`CONSTANT_KEYS`].
    pub fn with_override(&self, key: &str, value: f64) -> Result<Self> {
        let mut values = self.to_values();
        let slot = CONSTANT_KEYS
            .iter()
            .position(|k| *k == key)
            .ok_or_else(|| Error::arg(format!("unknown constant `{key}`")))?;
        values[slot] = value;
        Self::from_values(&values)
    }

    fn from_values(v: &[f64; 8]) -> Result<Self> {
        let sys = AtomicSystem {
            gamma: TWO_PI * v[0] * 1e6,
            delta_hf: TWO_PI * v[1] * 1e9,
            nu0: v[2] * 1e12,
            mu13: v[3],
            mu23: v[4],
            g1: v[5],
            g2: v[6],
            mass: v[7] * ATOMIC_MASS_UNIT,
        };
        sys.validate()?;
        Ok(sys)
    }

    fn to_values(&self) -> [f64; 8] {
        [
            self.gamma / TWO_PI / 1e6,
            self.delta_hf / TWO_PI / 1e9,
            self.nu0 / 1e12,
            self.mu13,
            self.mu23,
            self.g1,
            self.g2,
            self.mass / ATOMIC_MASS_UNIT,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("gamma", self.gamma),
            ("delta_hf", self.delta_hf),
            ("nu0", self.nu0),
            ("mu13", self.mu13),
            ("mu23", self.mu23),
            ("mass", self.mass),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::Domain {
                    name,
                    value,
                    reason: "must be finite and strictly positive".into(),
                });
            }
        }
        if !(self.g1 >= 0.0 && self.g2 >= 0.0) || (self.g1 + self.g2 - 1.0).abs() > 1e-12 {
            return Err(Error::Domain {
                name: "g1 + g2",
                value: self.g1 + self.g2,
                reason: "degeneracy fractions must be non-negative and sum to 1".into(),
            });
        }
        Ok(())
    }

    /// Optical wavevector k = 2πν₀/c (rad/m).
    pub fn wavevector(&self) -> f64 {
        TWO_PI * self.nu0 / SPEED_OF_LIGHT
    }
}

fn default_values() -> [f64; 8] {
    // Only used as the starting point for parsing; the bundled file sets every key.
    [6.07, 6.835, 380.284, 2.069e-29, 2.069e-29, 0.375, 0.625, 86.909180527]
}

/// Lowest temperature accepted by [`VaporCell::new`] unless overridden.
pub const HOT_VAPOR_MIN_TEMPERATURE: f64 = 273.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaporCell {
    /// Temperature (K).
    pub temperature: f64,
    /// Cell length (m).
    pub length: f64,
    /// Atomic number density N(T) (atoms/m³).
    pub density: f64,
    /// Linear intensity absorption coefficient α (1/m).
    pub alpha: f64,
    /// Atomic mass (kg), copied from the [`AtomicSystem`] the cell was built for.
    pub mass: f64,
}

impl VaporCell {
    /// Cell with N(T) from [`vapor_density`] and no absorption.
    pub fn new(system: &AtomicSystem, temperature: f64, length: f64) -> Result<Self> {
        let density = vapor_density(temperature)?;
        Self::with_density(system, temperature, length, density)
    }

    pub fn with_density(
        system: &AtomicSystem,
        temperature: f64,
        length: f64,
        density: f64,
    ) -> Result<Self> {
        Self::with_min_temperature(system, temperature, length, density, HOT_VAPOR_MIN_TEMPERATURE)
    }

    /// Same as [`VaporCell::with_density`] with a custom hot-vapor guard.
    pub fn with_min_temperature(
        system: &AtomicSystem,
        temperature: f64,
        length: f64,
        density: f64,
        min_temperature: f64,
    ) -> Result<Self> {
        if !(temperature.is_finite() && temperature > min_temperature) {
            return Err(Error::Domain {
                name: "temperature",
                value: temperature,
                reason: format!("must exceed {min_temperature} K"),
            });
        }
        if !(density.is_finite() && density > 0.0) {
            return Err(Error::Domain {
                name: "density",
                value: density,
                reason: "must be strictly positive".into(),
            });
        }
        if !(length.is_finite() && length >= 0.0) {
            return Err(Error::Domain {
                name: "length",
                value: length,
                reason: "must be non-negative".into(),
            });
        }
        Ok(VaporCell {
            temperature,
            length,
            density,
            alpha: 0.0,
            mass: system.mass,
        })
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha.max(0.0);
        self
    }

    /// Most probable speed u = √(2 k_B T / m).
    pub fn most_probable_speed(&self) -> f64 {
        (2.0 * BOLTZMANN * self.temperature / self.mass).sqrt()
    }

    /// Absorption-averaged intensity Ĩ = I (1 − e^{−αL}) / (αL).
    pub fn effective_intensity(&self, intensity: f64) -> f64 {
        let al = self.alpha * self.length;
        if al < 1e-12 {
            intensity
        } else {
            intensity * (-(-al).exp_m1()) / al
        }
    }
}

/// Rubidium number density from the liquid-phase vapor-pressure curve
///
/// log₁₀(P/Torr) = 15.88253 − 4529.635/T + 0.00058663·T − 2.99138·log₁₀T
///
/// and the ideal gas law N = P/(k_B T). The liquid branch is used over the whole
/// domain, so the curve stays smooth and monotone below the 312.46 K melting point.
pub fn vapor_density(temperature: f64) -> Result<f64> {
    if !(300.0..=500.0).contains(&temperature) {
        return Err(Error::Domain {
            name: "temperature",
            value: temperature,
            reason: "vapor-pressure model valid on [300, 500] K".into(),
        });
    }
    let t = temperature;
    let log_p = 15.882_53 - 4529.635 / t + 0.000_586_63 * t - 2.991_38 * t.log10();
    Ok(10f64.powf(log_p) * TORR / (BOLTZMANN * t))
}

/// One thermal speed class of the transverse (2D) Maxwell–Boltzmann distribution.
/// Trajectory directions are drawn separately, so a class is fully described by its
/// speed and probability mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VelocityClass {
    /// Transverse speed (m/s).
    pub speed: f64,
    /// Probability mass; the classes of one sampling sum to 1.
    pub weight: f64,
}

/// Speed classes for the 2D speed density p(v) = (2v/u²) e^{−v²/u²}.
///
/// Nodes sit at the probability midpoints q = (k + ½)/n of the speed CDF; each weight
/// is the exact probability of the node's Voronoi interval, so the weights telescope
/// to one.
pub fn sample_velocity_classes(cell: &VaporCell, n_classes: usize) -> Result<Vec<VelocityClass>> {
    if n_classes < 2 {
        return Err(Error::arg(format!("need at least 2 velocity classes, got {n_classes}")));
    }
    let u = cell.most_probable_speed();
    let nodes: Vec<f64> = (0..n_classes)
        .map(|k| {
            let q = (k as f64 + 0.5) / n_classes as f64;
            u * (-(-q).ln_1p()).sqrt()
        })
        .collect();
    // Survival function S(v) = exp(-v²/u²) at the Voronoi edges.
    let survival = |v: f64| (-(v * v) / (u * u)).exp();
    let mut classes = Vec::with_capacity(n_classes);
    for (k, &v) in nodes.iter().enumerate() {
        let lo = if k == 0 { 0.0 } else { 0.5 * (nodes[k - 1] + v) };
        let hi_s = if k + 1 == n_classes {
            0.0
        } else {
            survival(0.5 * (v + nodes[k + 1]))
        };
        classes.push(VelocityClass {
            speed: v,
            weight: survival(lo) - hi_s,
        });
    }
    let total: f64 = classes.iter().map(|c| c.weight).sum();
    for c in &mut classes {
        c.weight /= total;
    }
    Ok(classes)
}

/// Phenomenological transit rate Γ_t = (2/√π)(u/w₀) in rad/s.
pub fn transit_rate(cell: &VaporCell, waist: f64) -> Result<f64> {
    if !(waist.is_finite() && waist > 0.0) {
        return Err(Error::arg(format!("waist must be positive, got {waist}")));
    }
    Ok(2.0 / PI.sqrt() * cell.most_probable_speed() / waist)
}
