//! Spherical great-circle geometry.
//!
//! Panorama spacing along a road is 10-20 m, so a spherical Earth of mean
//! radius [`EARTH_RADIUS_M`] is accurate enough for every distance and bearing
//! the pipeline computes.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius in metres.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("latitude {0} outside [-90, 90]")]
    LatitudeOutOfRange(f64),
    #[error("longitude {0} outside [-180, 180]")]
    LongitudeOutOfRange(f64),
    #[error("undefined bearing: points coincide")]
    UndefinedBearing,
}

/// A WGS84-style latitude/longitude pair in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPoint", into = "RawPoint")]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

#[derive(Serialize, Deserialize)]
struct RawPoint {
    lat: f64,
    lon: f64,
}

impl TryFrom<RawPoint> for GeoPoint {
    type Error = GeoError;
    fn try_from(raw: RawPoint) -> Result<Self, Self::Error> {
        GeoPoint::new(raw.lat, raw.lon)
    }
}

impl From<GeoPoint> for RawPoint {
    fn from(p: GeoPoint) -> Self {
        RawPoint { lat: p.lat, lon: p.lon }
    }
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !(-90.0..=90.0).contains(&lat) {
            return Err(GeoError::LatitudeOutOfRange(lat));
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(GeoError::LongitudeOutOfRange(lon));
        }
        Ok(GeoPoint { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }
}

impl fmt::Display for GeoPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.6}, {:.6})", self.lat, self.lon)
    }
}

/// Degrees clockwise from true north, always in `[0, 360)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(from = "f64", into = "f64")]
pub struct Bearing(f64);

impl Bearing {
    /// Normalizes any finite angle into `[0, 360)`.
    pub fn new(degrees: f64) -> Self {
        let mut d = degrees.rem_euclid(360.0);
        // rem_euclid can round tiny negatives up to exactly 360.0
        if d >= 360.0 {
            d = 0.0;
        }
        Bearing(d)
    }

    pub fn degrees(self) -> f64 {
        self.0
    }

    pub fn offset(self, delta: f64) -> Self {
        Bearing::new(self.0 + delta)
    }

    /// Smallest absolute angle between two bearings, in `[0, 180]`.
    pub fn angular_distance(self, other: Bearing) -> f64 {
        let d = (self.0 - other.0).abs();
        d.min(360.0 - d)
    }
}

impl From<f64> for Bearing {
    fn from(d: f64) -> Self {
        Bearing::new(d)
    }
}

impl From<Bearing> for f64 {
    fn from(b: Bearing) -> Self {
        b.0
    }
}

impl fmt::Display for Bearing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}°", self.0)
    }
}

/// One of the eight 45° compass sectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CompassOctant {
    N,
    NE,
    E,
    SE,
    S,
    SW,
    W,
    NW,
}

impl CompassOctant {
    pub const ALL: [CompassOctant; 8] = [
        CompassOctant::N,
        CompassOctant::NE,
        CompassOctant::E,
        CompassOctant::SE,
        CompassOctant::S,
        CompassOctant::SW,
        CompassOctant::W,
        CompassOctant::NW,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i % 8]
    }

    pub fn center(self) -> Bearing {
        Bearing(self.index() as f64 * 45.0)
    }

    /// The octant `steps` positions clockwise (negative for anticlockwise).
    pub fn rotate(self, steps: i32) -> Self {
        Self::from_index((self.index() as i32 + steps).rem_euclid(8) as usize)
    }

    pub fn name(self) -> &'static str {
        match self {
            CompassOctant::N => "N",
            CompassOctant::NE => "NE",
            CompassOctant::E => "E",
            CompassOctant::SE => "SE",
            CompassOctant::S => "S",
            CompassOctant::SW => "SW",
            CompassOctant::W => "W",
            CompassOctant::NW => "NW",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|o| o.name().eq_ignore_ascii_case(name.trim()))
    }
}

impl fmt::Display for CompassOctant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which verge, relative to the direction of travel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VergeSide {
    Left,
    Right,
}

impl VergeSide {
    pub fn name(self) -> &'static str {
        match self {
            VergeSide::Left => "left",
            VergeSide::Right => "right",
        }
    }
}

pub fn haversine_distance(a: GeoPoint, b: GeoPoint) -> f64 {
    let phi1 = a.lat.to_radians();
    let phi2 = b.lat.to_radians();
    let dphi = (b.lat - a.lat).to_radians();
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    let h = h.clamp(0.0, 1.0);
    2.0 * EARTH_RADIUS_M * h.sqrt().atan2((1.0 - h).sqrt())
}

/// Initial great-circle azimuth from `from` towards `to`.
pub fn forward_bearing(from: GeoPoint, to: GeoPoint) -> Result<Bearing, GeoError> {
    if from == to {
        return Err(GeoError::UndefinedBearing);
    }
    let phi1 = from.lat.to_radians();
    let phi2 = to.lat.to_radians();
    let dlambda = (to.lon - from.lon).to_radians();
    let y = dlambda.sin() * phi2.cos();
    let x = phi1.cos() * phi2.sin() - phi1.sin() * phi2.cos() * dlambda.cos();
    if x == 0.0 && y == 0.0 {
        return Err(GeoError::UndefinedBearing);
    }
    Ok(Bearing::new(y.atan2(x).to_degrees()))
}

/// Bearing pointing at the verge on `side` of a road travelling along `road`.
pub fn perpendicular_bearing(road: Bearing, side: VergeSide) -> Bearing {
    match side {
        VergeSide::Right => road.offset(90.0),
        VergeSide::Left => road.offset(270.0),
    }
}

/// Octant whose half-open interval `[center - 22.5, center + 22.5)` holds `b`.
pub fn octant_of(b: Bearing) -> CompassOctant {
    let d = b.degrees();
    let mut idx = ((d + 22.5) / 45.0).floor() as i32;
    // Correct floating rounding against the exactly representable boundaries.
    while d < idx as f64 * 45.0 - 22.5 {
        idx -= 1;
    }
    while d >= idx as f64 * 45.0 + 22.5 {
        idx += 1;
    }
    CompassOctant::from_index(idx.rem_euclid(8) as usize)
}

/// Point reached by travelling `distance_m` from `start` along initial bearing `bearing`.
pub fn destination(start: GeoPoint, bearing: Bearing, distance_m: f64) -> GeoPoint {
    let delta = distance_m / EARTH_RADIUS_M;
    let theta = bearing.degrees().to_radians();
    let phi1 = start.lat.to_radians();
    let lambda1 = start.lon.to_radians();
    let sin_phi2 = phi1.sin() * delta.cos() + phi1.cos() * delta.sin() * theta.cos();
    let phi2 = sin_phi2.clamp(-1.0, 1.0).asin();
    let y = theta.sin() * delta.sin() * phi1.cos();
    let x = delta.cos() - phi1.sin() * sin_phi2;
    let lambda2 = lambda1 + y.atan2(x);
    let lon = (lambda2.to_degrees() + 540.0).rem_euclid(360.0) - 180.0;
    GeoPoint {
        lat: phi2.to_degrees().clamp(-90.0, 90.0),
        lon,
    }
}

/// Point at `fraction` of the way along the great circle from `a` to `b`.
pub fn intermediate(a: GeoPoint, b: GeoPoint, fraction: f64) -> GeoPoint {
    let delta = haversine_distance(a, b) / EARTH_RADIUS_M;
    if delta == 0.0 {
        return a;
    }
    let (phi1, lambda1) = (a.lat.to_radians(), a.lon.to_radians());
    let (phi2, lambda2) = (b.lat.to_radians(), b.lon.to_radians());
    let wa = ((1.0 - fraction) * delta).sin() / delta.sin();
    let wb = (fraction * delta).sin() / delta.sin();
    let x = wa * phi1.cos() * lambda1.cos() + wb * phi2.cos() * lambda2.cos();
    let y = wa * phi1.cos() * lambda1.sin() + wb * phi2.cos() * lambda2.sin();
    let z = wa * phi1.sin() + wb * phi2.sin();
    GeoPoint {
        lat: z.atan2((x * x + y * y).sqrt()).to_degrees().clamp(-90.0, 90.0),
        lon: y.atan2(x).to_degrees().clamp(-180.0, 180.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    #[test]
    fn rejects_out_of_range() {
        assert_eq!(
            GeoPoint::new(91.0, 0.0),
            Err(GeoError::LatitudeOutOfRange(91.0))
        );
        assert_eq!(
            GeoPoint::new(0.0, -180.5),
            Err(GeoError::LongitudeOutOfRange(-180.5))
        );
        assert!(GeoPoint::new(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn distance_examples() {
        assert_eq!(haversine_distance(p(53.3, -0.2), p(53.3, -0.2)), 0.0);
        let half = haversine_distance(p(0.0, 0.0), p(0.0, 180.0));
        assert!((half - std::f64::consts::PI * EARTH_RADIUS_M).abs() < 1e-6);
        assert!((half - 20_015_086.796).abs() < 1.0);
    }

    #[test]
    fn bearing_examples() {
        assert!(forward_bearing(p(0.0, 0.0), p(1.0, 0.0)).unwrap().degrees().abs() < 1e-12);
        assert!((forward_bearing(p(0.0, 0.0), p(0.0, 1.0)).unwrap().degrees() - 90.0).abs() < 1e-12);
        assert_eq!(
            forward_bearing(p(10.0, 10.0), p(10.0, 10.0)),
            Err(GeoError::UndefinedBearing)
        );
    }

    #[test]
    fn perpendicular_examples() {
        assert_eq!(perpendicular_bearing(Bearing::new(0.0), VergeSide::Right).degrees(), 90.0);
        assert_eq!(perpendicular_bearing(Bearing::new(350.0), VergeSide::Right).degrees(), 80.0);
        assert_eq!(perpendicular_bearing(Bearing::new(180.0), VergeSide::Left).degrees(), 90.0);
    }

    #[test]
    fn octant_examples() {
        assert_eq!(octant_of(Bearing::new(90.0)), CompassOctant::E);
        assert_eq!(octant_of(Bearing::new(112.4)), CompassOctant::E);
        assert_eq!(octant_of(Bearing::new(112.5)), CompassOctant::SE);
        assert_eq!(octant_of(Bearing::new(337.5)), CompassOctant::N);
        assert_eq!(octant_of(Bearing::new(337.49)), CompassOctant::NW);
        assert_eq!(octant_of(Bearing::new(22.5)), CompassOctant::NE);
        assert_eq!(octant_of(Bearing::new(359.999)), CompassOctant::N);
    }

    #[test]
    fn bearing_normalization() {
        assert_eq!(Bearing::new(-1e-18).degrees(), 0.0);
        assert_eq!(Bearing::new(720.0).degrees(), 0.0);
        assert_eq!(Bearing::new(-90.0).degrees(), 270.0);
        assert_eq!(Bearing::new(10.0).angular_distance(Bearing::new(350.0)), 20.0);
    }

    #[test]
    fn centers() {
        for (i, o) in CompassOctant::ALL.iter().enumerate() {
            assert_eq!(o.center().degrees(), i as f64 * 45.0);
            assert_eq!(CompassOctant::from_name(o.name()), Some(*o));
        }
        assert_eq!(CompassOctant::N.rotate(-1), CompassOctant::NW);
    }

    #[test]
    fn destination_round_trip() {
        let start = p(53.3, -0.2);
        let end = destination(start, Bearing::new(37.0), 1234.5);
        assert!((haversine_distance(start, end) - 1234.5).abs() < 1e-6);
        assert!((forward_bearing(start, end).unwrap().degrees() - 37.0).abs() < 1e-9);
        let mid = intermediate(start, end, 0.5);
        assert!((haversine_distance(start, mid) - 617.25).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn normalization_idempotent(d in -1e6f64..1e6) {
            let b = Bearing::new(d);
            prop_assert!((0.0..360.0).contains(&b.degrees()));
            prop_assert_eq!(Bearing::new(b.degrees()), b);
        }

        #[test]
        fn verge_octants_opposite(d in 0.0f64..360.0) {
            let b = Bearing::new(d);
            let right = octant_of(perpendicular_bearing(b, VergeSide::Right));
            let left = octant_of(perpendicular_bearing(b, VergeSide::Left));
            prop_assert_eq!(right.rotate(4), left);
        }

        #[test]
        fn short_arc_back_azimuth(
            lat in -70.0f64..70.0,
            lon in -179.0f64..179.0,
            brg in 0.0f64..360.0,
            dist in 1.0f64..1000.0,
        ) {
            let a = p(lat, lon);
            let b = destination(a, Bearing::new(brg), dist);
            let fwd = forward_bearing(a, b).unwrap();
            let back = forward_bearing(b, a).unwrap();
            // Reversal is exact only up to meridian convergence.
            let convergence = (b.lon() - a.lon()).abs() * ((a.lat() + b.lat()) / 2.0).to_radians().sin().abs();
            let gap = fwd.offset(180.0).angular_distance(back);
            prop_assert!((gap - convergence).abs() < 1e-5, "gap {} convergence {}", gap, convergence);
            if lat.abs() < 1.0 {
                prop_assert!(gap < 1e-3);
            }
        }

        #[test]
        fn distance_symmetric(
            a in (-90.0f64..=90.0, -180.0f64..=180.0),
            b in (-90.0f64..=90.0, -180.0f64..=180.0),
        ) {
            let (a, b) = (p(a.0, a.1), p(b.0, b.1));
            let ab = haversine_distance(a, b);
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, haversine_distance(b, a));
        }
    }
}
