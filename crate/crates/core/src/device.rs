//! Behavioral subthreshold MOSFET model with body-bias threshold modulation.

use serde::{Deserialize, Serialize};

use crate::data::BodyDac;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::train::{LadderSpec, LogMap};

pub const BOLTZMANN: f64 = 1.380_649e-23;
pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;
pub const ZERO_CELSIUS: f64 = 273.15;

/// Reference temperature of the optional `I_t(T)` hook.
pub const REFERENCE_KELVIN: f64 = 300.15;

/// Bound on `|exponent|` inside every `exp` of the current model. `e^80`
/// is far beyond any physical operating point yet keeps sums finite.
pub const EXPONENT_CLAMP: f64 = 80.0;

pub fn celsius_to_kelvin<T: Scalar>(c: T) -> T {
    c + T::lit(ZERO_CELSIUS)
}

pub fn kelvin_to_celsius<T: Scalar>(k: T) -> T {
    k - T::lit(ZERO_CELSIUS)
}

/// `kT/q` in volts.
pub fn thermal_voltage<T: Scalar>(kelvin: T) -> T {
    kelvin * T::lit(BOLTZMANN / ELEMENTARY_CHARGE)
}

/// `1 - exp(-V_ds / V_T)`, zero for non-positive `V_ds`.
#[inline]
pub fn drain_factor<T: Scalar>(vds: T, vt: T) -> T {
    if vds > T::zero() {
        -(-vds / vt).exp_m1()
    } else {
        T::zero()
    }
}

#[inline]
pub(crate) fn clamped_exp<T: Scalar>(x: T) -> T {
    let c = T::lit(EXPONENT_CLAMP);
    x.max(-c).min(c).exp()
}

/// Transistor and sensing-circuit constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", default)]
pub struct DeviceParams<T> {
    /// Zero-body-bias threshold voltage (V).
    pub vth0: T,
    /// Subthreshold slope factor.
    pub n: T,
    /// Current at `V_gs = V_th` for unit W/L (A).
    pub i_t: T,
    /// Width over length.
    pub wl: T,
    /// Body coefficient (V^0.5).
    pub gamma: T,
    /// Supply and precharge level (V).
    pub vdd: T,
    /// Sensing-line capacitance (F).
    pub c_sen: T,
    /// Junction temperature (K).
    pub temperature: T,
    /// Threshold offset applied to every device (V).
    pub delta_vth: T,
    /// Common source rail of the array (V). Body-source bias is measured from it.
    pub source_voltage: T,
    /// `I_t(T) = I_t * (T / 300.15 K)^k`; `k = 0` disables the hook.
    pub i_t_temp_exponent: T,
    /// Fixed energy of the decision network per classification (J).
    pub extractor_energy: T,
}

impl<T: Scalar> Default for DeviceParams<T> {
    fn default() -> Self {
        Self {
            vth0: T::lit(0.610),
            n: T::lit(1.5),
            i_t: T::lit(1e-7),
            wl: T::lit(4.0),
            gamma: T::lit(0.10),
            vdd: T::lit(0.900),
            c_sen: T::lit(50e-15),
            temperature: celsius_to_kelvin(T::lit(27.0)),
            delta_vth: T::zero(),
            source_voltage: T::lit(0.2),
            i_t_temp_exponent: T::zero(),
            extractor_energy: T::zero(),
        }
    }
}

impl<T: Scalar> DeviceParams<T> {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.n >= T::one(), "slope factor n must be >= 1"),
            (self.i_t > T::zero(), "I_t must be positive"),
            (self.wl > T::zero(), "W/L must be positive"),
            (
                self.gamma >= T::zero(),
                "body coefficient must be non-negative",
            ),
            (self.c_sen > T::zero(), "C_sen must be positive"),
            (self.temperature > T::zero(), "temperature must be positive"),
            (self.vdd > T::zero(), "V_DD must be positive"),
            (
                self.source_voltage >= T::zero() && self.source_voltage < self.vdd,
                "source rail must lie in [0, V_DD)",
            ),
            (
                self.extractor_energy >= T::zero(),
                "extractor energy must be non-negative",
            ),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Parameter(msg.into()));
            }
        }
        let all = [
            self.vth0,
            self.n,
            self.i_t,
            self.wl,
            self.gamma,
            self.vdd,
            self.c_sen,
            self.temperature,
            self.delta_vth,
            self.source_voltage,
            self.i_t_temp_exponent,
            self.extractor_energy,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("device parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn thermal_voltage(&self) -> T {
        thermal_voltage(self.temperature)
    }

    /// `I_t` at the configured temperature.
    pub fn i_t_at_temperature(&self) -> T {
        if self.i_t_temp_exponent == T::zero() {
            self.i_t
        } else {
            self.i_t * (self.temperature / T::lit(REFERENCE_KELVIN)).powf(self.i_t_temp_exponent)
        }
    }

    /// `n V_T`.
    pub fn slope_voltage(&self) -> T {
        self.n * self.thermal_voltage()
    }
}

/// Terminal voltages of one device, all relative to its source.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BiasPoint<T> {
    pub vgs: T,
    pub vbs: T,
    pub vds: T,
}

impl<T: Scalar> BiasPoint<T> {
    pub fn new(vgs: T, vbs: T, vds: T) -> Result<Self> {
        if !(vbs >= T::zero()) {
            return Err(Error::Domain(format!(
                "body-source bias {vbs} must be non-negative"
            )));
        }
        if !(vds >= T::zero()) {
            return Err(Error::Domain(format!(
                "drain-source bias {vds} must be non-negative"
            )));
        }
        Ok(Self { vgs, vbs, vds })
    }
}

/// Threshold voltage `V_th0 + delta - gamma * sqrt(V_bs)`.
pub fn vth<T: Scalar>(p: &DeviceParams<T>, vbs: T) -> Result<T> {
    if !(vbs >= T::zero()) {
        return Err(Error::Domain(format!(
            "body-source bias {vbs} must be non-negative"
        )));
    }
    Ok(p.vth0 + p.delta_vth - p.gamma * vbs.sqrt())
}

/// Saturated (`V_ds >> V_T`) current with an extra per-device threshold shift.
#[inline]
pub(crate) fn saturated_current<T: Scalar>(
    p: &DeviceParams<T>,
    vgs: T,
    vbs: T,
    extra_vth: T,
    slope: T,
) -> T {
    let vth = p.vth0 + p.delta_vth + extra_vth - p.gamma * vbs.sqrt();
    p.wl * p.i_t_at_temperature() * clamped_exp((vgs - vth) / slope)
}

/// Subthreshold drain current
/// `WL I_t exp((V_gs - V_th) / (n V_T)) (1 - exp(-V_ds / V_T))`.
pub fn i_sub<T: Scalar>(p: &DeviceParams<T>, b: &BiasPoint<T>) -> T {
    let vt = p.thermal_voltage();
    saturated_current(p, b.vgs, b.vbs, T::zero(), p.n * vt) * drain_factor(b.vds, vt)
}

/// Drain current in the `V_ds >> V_T` limit.
pub fn i_sub_saturated<T: Scalar>(p: &DeviceParams<T>, vgs: T, vbs: T) -> Result<T> {
    if !(vbs >= T::zero()) {
        return Err(Error::Domain(format!(
            "body-source bias {vbs} must be non-negative"
        )));
    }
    Ok(saturated_current(p, vgs, vbs, T::zero(), p.slope_voltage()))
}

/// Inverse weight and feature maps: gate voltage back to `|w|`, body
/// voltage back to `x`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearizationMaps<T> {
    pub ladder: LadderSpec<T>,
    pub log_map: LogMap<T>,
    pub dac: BodyDac<T>,
}

impl<T: Scalar> LinearizationMaps<T> {
    /// Log map whose span equals the e-folds of current the ladder swing
    /// produces, anchored so the top tap represents `|w| = 1`.
    pub fn matched(ladder: LadderSpec<T>, dac: BodyDac<T>, p: &DeviceParams<T>) -> Self {
        let span = (ladder.v_high - ladder.v_low) / p.slope_voltage();
        Self {
            ladder,
            log_map: LogMap {
                ln_min: -span,
                ln_max: T::zero(),
            },
            dac,
        }
    }

    /// Normalized feature a body voltage encodes.
    pub fn feature(&self, v_body: T) -> T {
        ((v_body - self.dac.v_lo) / (self.dac.v_hi - self.dac.v_lo)).max(T::zero())
    }

    /// The ideal product `|w| * sqrt(x)` a device at `(v_gate, v_body)` stands for.
    pub fn product(&self, v_gate: T, v_body: T) -> T {
        self.log_map.magnitude_at(v_gate, &self.ladder) * self.feature(v_body).sqrt()
    }
}

/// Convenience wrapper for [`LinearizationMaps::product`].
pub fn linearized_product<T: Scalar>(maps: &LinearizationMaps<T>, v_gate: T, v_body: T) -> T {
    maps.product(v_gate, v_body)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn params() -> DeviceParams<f64> {
        DeviceParams::default()
    }

    #[test]
    fn thermal_voltage_examples() {
        assert_relative_eq!(thermal_voltage(300.15), 0.025_865, max_relative = 1e-4);
        assert_relative_eq!(thermal_voltage(243.15), 0.020_953, max_relative = 1e-4);
        assert_relative_eq!(
            thermal_voltage(600.0),
            2.0 * thermal_voltage(300.0),
            max_relative = 1e-15
        );
    }

    #[test]
    fn vth_examples() {
        assert_eq!(vth(&params(), 0.0).unwrap(), 0.610);
        let p = DeviceParams {
            gamma: 0.1,
            ..params()
        };
        assert_relative_eq!(vth(&p, 0.49).unwrap(), 0.540, max_relative = 1e-12);
        let flat = DeviceParams {
            gamma: 0.0,
            ..params()
        };
        assert_eq!(vth(&flat, 0.0).unwrap(), vth(&flat, 0.6).unwrap());
        assert!(matches!(vth(&p, -0.01), Err(Error::Domain(_))));
    }

    #[test]
    fn current_at_threshold_is_it() {
        let p = params();
        let v = vth(&p, 0.3).unwrap();
        let i = i_sub(&p, &BiasPoint::new(v, 0.3, 1.0).unwrap());
        assert_relative_eq!(i, p.wl * p.i_t, max_relative = 1e-12);
    }

    #[test]
    fn zero_drain_bias_zero_current() {
        let i = i_sub(&params(), &BiasPoint::new(0.5, 0.2, 0.0).unwrap());
        assert_eq!(i, 0.0);
    }

    #[test]
    fn decade_per_slope_ln10() {
        let p = params();
        let step = p.slope_voltage() * std::f64::consts::LN_10;
        let a = i_sub(&p, &BiasPoint::new(0.40, 0.3, 0.5).unwrap());
        let b = i_sub(&p, &BiasPoint::new(0.40 + step, 0.3, 0.5).unwrap());
        assert_relative_eq!(b / a, 10.0, max_relative = 1e-12);
    }

    #[test]
    fn saturation_limit() {
        let p = params();
        let vt = p.thermal_voltage();
        let i = i_sub(&p, &BiasPoint::new(0.45, 0.2, 10.0 * vt).unwrap());
        let sat = i_sub_saturated(&p, 0.45, 0.2).unwrap();
        assert!((sat - i).abs() / i < 1e-4);
    }

    #[test]
    fn current_ratio_independent_of_it() {
        let base = DeviceParams {
            gamma: 0.0,
            ..params()
        };
        for it in [1e-9, 1e-7, 3e-6] {
            for t in [243.15, 300.15, 398.15] {
                let p = DeviceParams {
                    i_t: it,
                    temperature: t,
                    ..base
                };
                let r = i_sub(&p, &BiasPoint::new(0.5, 0.1, 0.3).unwrap())
                    / i_sub(&p, &BiasPoint::new(0.4, 0.1, 0.3).unwrap());
                let reference = DeviceParams {
                    i_t: 1e-7,
                    temperature: t,
                    ..base
                };
                let r0 = i_sub(&reference, &BiasPoint::new(0.5, 0.1, 0.3).unwrap())
                    / i_sub(&reference, &BiasPoint::new(0.4, 0.1, 0.3).unwrap());
                assert_relative_eq!(r, r0, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn temperature_hook_defaults_off() {
        let p = DeviceParams {
            temperature: 398.15,
            ..params()
        };
        assert_eq!(p.i_t_at_temperature(), p.i_t);
        let hot = DeviceParams {
            i_t_temp_exponent: 1.5,
            ..p
        };
        assert!(hot.i_t_at_temperature() > p.i_t);
    }

    #[test]
    fn exponent_is_clamped() {
        let p = params();
        let i = i_sub(&p, &BiasPoint::new(100.0, 0.0, 1.0).unwrap());
        assert!(i.is_finite());
    }

    #[test]
    fn invalid_inputs_rejected() {
        assert!(BiasPoint::new(0.5, -0.1, 0.1).is_err());
        assert!(BiasPoint::new(0.5, 0.1, -0.1).is_err());
        assert!(DeviceParams { n: 0.5, ..params() }.validate().is_err());
        assert!(DeviceParams {
            c_sen: 0.0,
            ..params()
        }
        .validate()
        .is_err());
        assert!(params().validate().is_ok());
    }

    #[test]
    fn linearized_product_examples() {
        let p = params();
        let maps = LinearizationMaps::matched(LadderSpec::default(), BodyDac::default(), &p);
        assert_eq!(linearized_product(&maps, 0.45, 0.2), 0.0);
        assert_relative_eq!(maps.product(0.61, 0.8), 1.0, max_relative = 1e-12);
        // Each 10 mV tap is a constant factor in |w|, matching the device exponent.
        let ratio = maps.product(0.52, 0.8) / maps.product(0.51, 0.8);
        assert_relative_eq!(
            ratio,
            (0.01 / p.slope_voltage()).exp(),
            max_relative = 1e-12
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn monotone_in_gate_and_body(vg in 0.2f64..0.7, dv in 0.0f64..0.1, vb in 0.0f64..0.6, db in 0.0f64..0.2, vds in 0.001f64..0.9) {
                let p = params();
                let base = i_sub(&p, &BiasPoint::new(vg, vb, vds).unwrap());
                prop_assert!(base > 0.0);
                prop_assert!(i_sub(&p, &BiasPoint::new(vg + dv, vb, vds).unwrap()) >= base);
                prop_assert!(i_sub(&p, &BiasPoint::new(vg, vb + db, vds).unwrap()) >= base);
            }

            #[test]
            fn vth_non_increasing(a in 0.0f64..1.0, b in 0.0f64..1.0) {
                let p = params();
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                prop_assert!(vth(&p, hi).unwrap() <= vth(&p, lo).unwrap());
            }
        }
    }
}
