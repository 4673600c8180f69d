//! Physical constants in SI units (CODATA 2018).

pub const HBAR: f64 = 1.054_571_817e-34;
pub const BOLTZMANN: f64 = 1.380_649e-23;
pub const EPSILON_0: f64 = 8.854_187_812_8e-12;
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const ATOMIC_MASS_UNIT: f64 = 1.660_539_066_60e-27;
/// 1 Torr in pascal.
pub const TORR: f64 = 133.322_368;

pub const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// W/cm² to W/m².
pub const W_PER_CM2: f64 = 1.0e4;

/// Peak field amplitude for an intensity in W/m², using I = ½ ε₀ c 𝓔².
#[inline]
pub fn field_from_intensity(intensity: f64) -> f64 {
    (2.0 * intensity.max(0.0) / (EPSILON_0 * SPEED_OF_LIGHT)).sqrt()
}

/// Inverse of [`field_from_intensity`].
#[inline]
pub fn intensity_from_field(field: f64) -> f64 {
    0.5 * EPSILON_0 * SPEED_OF_LIGHT * field * field
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_intensity_round_trip() {
        let i = 17.8 * W_PER_CM2;
        let e = field_from_intensity(i);
        assert!((intensity_from_field(e) / i - 1.0).abs() < 1e-14);
        // ~11.6 kV/m at 17.8 W/cm²
        assert!((e - 11_580.0).abs() < 20.0);
    }
}
