//! Circular-orbit propagation over a rotating spherical Earth and the
//! satellite/ground link geometry derived from it.
//!
//! All positions are Earth-centered inertial (ECI) and in metres. The Earth
//! frame coincides with the inertial frame at `t = 0`, so a ground station at
//! longitude `lon` sits at inertial longitude `lon + rotation_rate * t`.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3(pub [f64; 3]);

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3([x, y, z])
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.0[0] * o.0[0] + self.0[1] * o.0[1] + self.0[2] * o.0[2]
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn x(self) -> f64 {
        self.0[0]
    }
    pub fn y(self) -> f64 {
        self.0[1]
    }
    pub fn z(self) -> f64 {
        self.0[2]
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, k: f64) -> Vec3 {
        Vec3([self.0[0] * k, self.0[1] * k, self.0[2] * k])
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        self * -1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EarthModel {
    /// Mean radius [m].
    pub radius: f64,
    /// Sidereal rotation rate [rad/s].
    pub rotation_rate: f64,
    /// Gravitational parameter [m^3/s^2].
    pub mu: f64,
}

impl Default for EarthModel {
    fn default() -> Self {
        EarthModel {
            radius: 6_371_000.0,
            rotation_rate: 7.292_115_9e-5,
            mu: 3.986_004_418e14,
        }
    }
}

impl EarthModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) {
            return Err(Error::invalid("earth.radius", "must be > 0"));
        }
        if !(self.rotation_rate >= 0.0) {
            return Err(Error::invalid("earth.rotation_rate", "must be >= 0"));
        }
        if !(self.mu > 0.0) {
            return Err(Error::invalid("earth.mu", "must be > 0"));
        }
        Ok(())
    }

    /// Earth-frame rotation angle accumulated since the epoch.
    pub fn rotation_angle(&self, t: f64) -> f64 {
        self.rotation_rate * t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrbitSpec {
    /// Altitude above the spherical surface [m].
    pub altitude: f64,
    /// [rad], in `[0, pi]`.
    pub inclination: f64,
    /// Right ascension of the ascending node [rad].
    pub raan: f64,
    /// Argument of latitude at `t = 0` [rad].
    pub phase_at_epoch: f64,
}

impl OrbitSpec {
    /// Polar orbit whose ascending node lies on the prime meridian at the epoch.
    pub fn polar(altitude: f64, phase_at_epoch: f64) -> Self {
        OrbitSpec {
            altitude,
            inclination: PI / 2.0,
            raan: 0.0,
            phase_at_epoch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.altitude > 0.0) {
            return Err(Error::invalid("orbit.altitude", "must be > 0"));
        }
        if !(0.0..=PI).contains(&self.inclination) {
            return Err(Error::invalid("orbit.inclination", "must lie in [0, pi]"));
        }
        if !self.raan.is_finite() || !self.phase_at_epoch.is_finite() {
            return Err(Error::invalid("orbit", "angles must be finite"));
        }
        Ok(())
    }

    pub fn radius(&self, earth: &EarthModel) -> f64 {
        earth.radius + self.altitude
    }

    /// Mean motion [rad/s].
    pub fn mean_motion(&self, earth: &EarthModel) -> f64 {
        (earth.mu / self.radius(earth).powi(3)).sqrt()
    }

    pub fn period(&self, earth: &EarthModel) -> f64 {
        2.0 * PI / self.mean_motion(earth)
    }

    /// `n` equally phased satellites sharing this orbital plane.
    pub fn ring(&self, n: usize) -> Vec<OrbitSpec> {
        (0..n)
            .map(|k| OrbitSpec {
                phase_at_epoch: self.phase_at_epoch + 2.0 * PI * k as f64 / n as f64,
                ..*self
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SatelliteState {
    pub position: Vec3,
    pub velocity: Vec3,
    pub epoch_offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundStation {
    /// [rad]
    pub latitude: f64,
    /// [rad]
    pub longitude: f64,
    #[serde(default)]
    pub name: String,
}

impl GroundStation {
    pub fn new(name: impl Into<String>, latitude: f64, longitude: f64) -> Self {
        GroundStation {
            latitude,
            longitude: wrap_longitude(longitude),
            name: name.into(),
        }
    }

    pub fn from_degrees(name: impl Into<String>, lat_deg: f64, lon_deg: f64) -> Self {
        Self::new(name, lat_deg.to_radians(), lon_deg.to_radians())
    }

    pub fn validate(&self) -> Result<()> {
        if !(-PI / 2.0..=PI / 2.0).contains(&self.latitude) {
            return Err(Error::invalid(
                format!("station `{}`.latitude", self.name),
                "must lie in [-pi/2, pi/2]",
            ));
        }
        if !(-PI..PI).contains(&self.longitude) {
            return Err(Error::invalid(
                format!("station `{}`.longitude", self.name),
                "must lie in [-pi, pi)",
            ));
        }
        Ok(())
    }

    /// Inertial position and velocity at time `t`.
    pub fn inertial_state(&self, earth: &EarthModel, t: f64) -> (Vec3, Vec3) {
        let lon = self.longitude + earth.rotation_angle(t);
        let (slat, clat) = self.latitude.sin_cos();
        let (slon, clon) = lon.sin_cos();
        let r = earth.radius;
        let pos = Vec3::new(r * clat * clon, r * clat * slon, r * slat);
        let w = earth.rotation_rate;
        let vel = Vec3::new(-w * pos.y(), w * pos.x(), 0.0);
        (pos, vel)
    }
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_longitude(lon: f64) -> f64 {
    let w = (lon + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Great-circle central angle between two (lat, lon) points [rad].
pub fn central_angle(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    // haversine, well conditioned for small separations
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let a = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * a.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkGeometry {
    /// Slant range [m].
    pub distance: f64,
    pub visible: bool,
    /// d(distance)/dt [m/s], positive when receding.
    pub radial_velocity: f64,
    /// [rad]
    pub zenith_angle: f64,
}

/// Spherical cap of ground points that see the satellite above the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    /// Sub-satellite point in Earth-fixed coordinates [rad].
    pub center_lat: f64,
    pub center_lon: f64,
    /// Cap half-angle measured at the Earth center [rad].
    pub half_angle: f64,
}

impl Footprint {
    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        central_angle(self.center_lat, self.center_lon, lat, lon) < self.half_angle
    }

    pub fn ground_radius(&self, earth: &EarthModel) -> f64 {
        earth.radius * self.half_angle
    }

    /// Cap area on the sphere [m^2].
    pub fn area(&self, earth: &EarthModel) -> f64 {
        2.0 * PI * earth.radius.powi(2) * (1.0 - self.half_angle.cos())
    }
}

pub fn propagate(orbit: &OrbitSpec, earth: &EarthModel, t: f64) -> SatelliteState {
    let r = orbit.radius(earth);
    let n = orbit.mean_motion(earth);
    let u = orbit.phase_at_epoch + n * t;
    let (si, ci) = orbit.inclination.sin_cos();
    let (so, co) = orbit.raan.sin_cos();
    // perifocal unit vectors of the circular orbit
    let p = Vec3::new(co, so, 0.0);
    let q = Vec3::new(-so * ci, co * ci, si);
    let (su, cu) = u.sin_cos();
    SatelliteState {
        position: (p * cu + q * su) * r,
        velocity: (p * -su + q * cu) * (r * n),
        epoch_offset: t,
    }
}

/// Geometry of the link between `sat` and `gs` at time `t`.
///
/// `sat` is expected to be the state propagated to the same `t`.
pub fn link_geometry(
    sat: &SatelliteState,
    gs: &GroundStation,
    earth: &EarthModel,
    t: f64,
) -> LinkGeometry {
    let (gpos, gvel) = gs.inertial_state(earth, t);
    let d = sat.position - gpos;
    let distance = d.norm();
    let up = gpos * (1.0 / gpos.norm());
    let cos_z = if distance > 0.0 { d.dot(up) / distance } else { 1.0 };
    let zenith_angle = cos_z.clamp(-1.0, 1.0).acos();
    let radial_velocity = if distance > 0.0 {
        d.dot(sat.velocity - gvel) / distance
    } else {
        0.0
    };
    LinkGeometry {
        distance,
        visible: zenith_angle < PI / 2.0,
        radial_velocity,
        zenith_angle,
    }
}

/// Earth-fixed latitude/longitude of the point beneath the satellite.
pub fn subsatellite_point(sat: &SatelliteState, earth: &EarthModel) -> (f64, f64) {
    let p = sat.position;
    let lat = (p.z() / p.norm()).clamp(-1.0, 1.0).asin();
    let lon = wrap_longitude(p.y().atan2(p.x()) - earth.rotation_angle(sat.epoch_offset));
    (lat, lon)
}

pub fn visibility_footprint(sat: &SatelliteState, earth: &EarthModel) -> Footprint {
    let (center_lat, center_lon) = subsatellite_point(sat, earth);
    let r = sat.position.norm();
    Footprint {
        center_lat,
        center_lon,
        half_angle: (earth.radius / r).clamp(-1.0, 1.0).acos(),
    }
}

/// True iff the straight segment between the two satellites clears the Earth.
pub fn intersat_visible(a: &SatelliteState, b: &SatelliteState, earth: &EarthModel) -> bool {
    let d = b.position - a.position;
    let len2 = d.dot(d);
    let s = if len2 > 0.0 {
        (-a.position.dot(d) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let closest = a.position + d * s;
    closest.norm() > earth.radius
}

/// Station placed `central_angle` away from the sub-satellite point along
/// the given initial bearing (0 = north, pi/2 = east).
pub fn station_at_offset(
    name: impl Into<String>,
    center_lat: f64,
    center_lon: f64,
    central_angle: f64,
    bearing: f64,
) -> GroundStation {
    let (sl, cl) = center_lat.sin_cos();
    let (sd, cd) = central_angle.sin_cos();
    let lat = (sl * cd + cl * sd * bearing.cos()).clamp(-1.0, 1.0).asin();
    let lon = center_lon + (bearing.sin() * sd * cl).atan2(cd - sl * lat.sin());
    GroundStation::new(name, lat, lon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn earth() -> EarthModel {
        EarthModel::default()
    }

    #[test]
    fn period_matches_kepler() {
        let orbit = OrbitSpec::polar(500e3, 0.0);
        let e = earth();
        let expected = 2.0 * PI * ((6_871_000.0f64).powi(3) / 3.986_004_418e14).sqrt();
        assert!((orbit.period(&e) - expected).abs() < 1e-9);
        assert!((orbit.period(&e) - 5668.14).abs() < 0.05);
    }

    #[test]
    fn epoch_and_full_period_positions() {
        let e = earth();
        let orbit = OrbitSpec {
            altitude: 500e3,
            inclination: 1.1,
            raan: 0.4,
            phase_at_epoch: 0.7,
        };
        let s0 = propagate(&orbit, &e, 0.0);
        let r = 6_871_000.0;
        let expected = Vec3::new(0.4f64.cos(), 0.4f64.sin(), 0.0) * (0.7f64.cos() * r)
            + Vec3::new(-0.4f64.sin() * 1.1f64.cos(), 0.4f64.cos() * 1.1f64.cos(), 1.1f64.sin())
                * (0.7f64.sin() * r);
        assert!((s0.position - expected).norm() < 1e-6);
        let s1 = propagate(&orbit, &e, orbit.period(&e));
        assert!((s1.position - s0.position).norm() / r < 1e-9);
    }

    #[test]
    fn radius_is_constant_along_trajectory() {
        let e = earth();
        let orbit = OrbitSpec::polar(500e3, 0.3);
        for k in 0..200 {
            let s = propagate(&orbit, &e, k as f64 * 37.3);
            assert_relative_eq!(s.position.norm(), 6_871_000.0, max_relative = 1e-6);
            assert!(s.position.dot(s.velocity).abs() < 1e-3 * s.velocity.norm());
        }
    }

    #[test]
    fn nadir_station_sees_satellite_at_zenith() {
        let e = earth();
        let orbit = OrbitSpec::polar(500e3, 0.0);
        let sat = propagate(&orbit, &e, 0.0);
        let gs = GroundStation::from_degrees("nadir", 0.0, 0.0);
        let g = link_geometry(&sat, &gs, &e, 0.0);
        assert_relative_eq!(g.distance, 500e3, epsilon = 1e-6);
        assert!(g.zenith_angle < 1e-9);
        assert!(g.visible);
    }

    #[test]
    fn horizon_limit_distance() {
        let e = earth();
        let orbit = OrbitSpec::polar(500e3, 0.0);
        let sat = propagate(&orbit, &e, 0.0);
        let fp = visibility_footprint(&sat, &e);
        let gs = station_at_offset("edge", 0.0, 0.0, fp.half_angle, PI / 2.0);
        let g = link_geometry(&sat, &gs, &e, 0.0);
        assert!((g.zenith_angle - PI / 2.0).abs() < 1e-9);
        let expected = (6_871_000.0f64.powi(2) - 6_371_000.0f64.powi(2)).sqrt();
        assert_relative_eq!(g.distance, expected, max_relative = 1e-9);
        assert!((g.distance - 2_573_130.0).abs() < 1.0);
    }

    #[test]
    fn antipode_is_hidden() {
        let e = earth();
        let sat = propagate(&OrbitSpec::polar(500e3, 0.0), &e, 0.0);
        let gs = GroundStation::from_degrees("anti", 0.0, -180.0);
        assert!(!link_geometry(&sat, &gs, &e, 0.0).visible);
    }

    #[test]
    fn footprint_half_angle() {
        let e = earth();
        let sat = propagate(&OrbitSpec::polar(500e3, 0.0), &e, 0.0);
        let fp = visibility_footprint(&sat, &e);
        assert!((fp.half_angle.to_degrees() - 21.9929).abs() < 1e-3);
        assert!((fp.ground_radius(&e) / 1e3 - 2445.5).abs() < 1.0);
        let low = propagate(&OrbitSpec::polar(1e-3, 0.0), &e, 0.0);
        assert!(visibility_footprint(&low, &e).half_angle < 1e-3);
    }

    #[test]
    fn intersat_cases() {
        let e = earth();
        let ring = OrbitSpec::polar(500e3, 0.2).ring(10);
        let a = propagate(&ring[0], &e, 0.0);
        let b = propagate(&ring[1], &e, 0.0);
        assert!(intersat_visible(&a, &b, &e));
        let anti = propagate(&ring[5], &e, 0.0);
        assert!(!intersat_visible(&a, &anti, &e));
        assert!(intersat_visible(&a, &a, &e));
        // closest approach of the chord to the Earth centre
        let mid = (a.position + b.position) * 0.5;
        assert!((mid.norm() - 6_871_000.0 * 18f64.to_radians().cos()).abs() < 1.0);
    }

    #[test]
    fn radial_velocity_matches_finite_difference() {
        let e = earth();
        let orbit = OrbitSpec::polar(500e3, 0.1);
        let gs = GroundStation::from_degrees("x", 8.0, 6.0);
        for &t in &[0.0, 40.0, 120.0] {
            let g = link_geometry(&propagate(&orbit, &e, t), &gs, &e, t);
            let h = 1e-3;
            let lp = link_geometry(&propagate(&orbit, &e, t + h), &gs, &e, t + h).distance;
            let lm = link_geometry(&propagate(&orbit, &e, t - h), &gs, &e, t - h).distance;
            let fd = (lp - lm) / (2.0 * h);
            assert!((g.radial_velocity - fd).abs() < 1e-3, "{} vs {}", g.radial_velocity, fd);
        }
    }

    #[test]
    fn wrap_longitude_range() {
        assert_eq!(wrap_longitude(PI), -PI);
        assert!((wrap_longitude(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_longitude(-0.25) + 0.25).abs() < 1e-15);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(OrbitSpec::polar(-1.0, 0.0).validate().is_err());
        let mut o = OrbitSpec::polar(500e3, 0.0);
        o.inclination = 4.0;
        assert!(o.validate().is_err());
        assert!(GroundStation {
            latitude: 2.0,
            longitude: 0.0,
            name: "bad".into()
        }
        .validate()
        .is_err());
        assert!(GroundStation::from_degrees("ok", 10.0, 170.0).validate().is_ok());
    }
}
