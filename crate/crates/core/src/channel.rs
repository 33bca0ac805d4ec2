//! Link budget: Gaussian-beam diffraction, secant-airmass atmosphere and
//! detector efficiencies combined into a single detection probability.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodyn::LinkGeometry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Satellite transmits, ground receives.
    Downlink,
    /// Ground transmits, satellite receives.
    Uplink,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelParams {
    /// [m]
    pub wavelength: f64,
    /// Satellite telescope aperture radius [m].
    pub sat_radius: f64,
    /// Ground telescope aperture radius [m].
    pub gs_radius: f64,
    pub det_eff_sat: f64,
    pub det_eff_gs: f64,
    /// Atmospheric transmittance looking straight up.
    pub atm_zenith_transmittance: f64,
    /// Angle-independent loss (pointing, coupling) applied with the atmosphere.
    pub pointing_efficiency: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams {
            wavelength: 810e-9,
            sat_radius: 0.10,
            gs_radius: 0.60,
            det_eff_sat: 0.5,
            det_eff_gs: 0.5,
            atm_zenith_transmittance: 0.5,
            pointing_efficiency: 1.0,
        }
    }
}

impl ChannelParams {
    /// Clear-sky setting used by the bundled figure configurations: no
    /// elevation-dependent absorption, a flat 30% pointing/coupling budget.
    pub fn clear_sky() -> Self {
        ChannelParams {
            atm_zenith_transmittance: 1.0,
            pointing_efficiency: 0.3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channel.wavelength", self.wavelength),
            ("channel.sat_radius", self.sat_radius),
            ("channel.gs_radius", self.gs_radius),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, "must be a finite value > 0"));
            }
        }
        let probs = [
            ("channel.det_eff_sat", self.det_eff_sat),
            ("channel.det_eff_gs", self.det_eff_gs),
            ("channel.atm_zenith_transmittance", self.atm_zenith_transmittance),
            ("channel.pointing_efficiency", self.pointing_efficiency),
        ];
        for (name, v) in probs {
            check_probability(name, v)?;
        }
        Ok(())
    }

    /// (transmitter, receiver) aperture radii for a direction.
    pub fn apertures(&self, direction: Direction) -> (f64, f64) {
        match direction {
            Direction::Downlink => (self.sat_radius, self.gs_radius),
            Direction::Uplink => (self.gs_radius, self.sat_radius),
        }
    }
}

pub(crate) fn check_probability(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("{v} is not a probability in [0, 1]")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkEfficiency {
    pub eta_fs: f64,
    pub eta_atm: f64,
    pub eta_total: f64,
    pub direction: Direction,
}

/// Gaussian beam radius after propagating `distance` from a waist `w0`.
pub fn beam_radius(wavelength: f64, w0: f64, distance: f64) -> f64 {
    let zr = std::f64::consts::PI * w0 * w0 / wavelength;
    w0 * (1.0 + (distance / zr).powi(2)).sqrt()
}

pub fn free_space_transmittance(
    params: &ChannelParams,
    distance: f64,
    direction: Direction,
) -> Result<f64> {
    if !(distance > 0.0) {
        return Err(Error::invalid("distance", "must be > 0"));
    }
    let (w0, r_rx) = params.apertures(direction);
    let w = beam_radius(params.wavelength, w0, distance);
    Ok((-(-2.0 * r_rx * r_rx / (w * w)).exp_m1()).clamp(0.0, 1.0))
}

/// Beer-Lambert with secant airmass; zero at or below the horizon.
pub fn atmospheric_transmittance(params: &ChannelParams, zenith_angle: f64) -> f64 {
    if !(zenith_angle < FRAC_PI_2) {
        return 0.0;
    }
    let t0 = params.atm_zenith_transmittance;
    let airmass = 1.0 / zenith_angle.cos();
    if t0 == 0.0 {
        0.0
    } else {
        t0.powf(airmass).clamp(0.0, 1.0)
    }
}

pub fn link_efficiency(
    params: &ChannelParams,
    geom: &LinkGeometry,
    direction: Direction,
) -> Result<LinkEfficiency> {
    if !geom.visible {
        return Err(Error::NotVisible {
            zenith_deg: geom.zenith_angle.to_degrees(),
        });
    }
    let eta_fs = free_space_transmittance(params, geom.distance, direction)?;
    let eta_atm =
        params.pointing_efficiency * atmospheric_transmittance(params, geom.zenith_angle);
    Ok(LinkEfficiency {
        eta_fs,
        eta_atm,
        eta_total: eta_fs * eta_atm * params.det_eff_sat * params.det_eff_gs,
        direction,
    })
}
