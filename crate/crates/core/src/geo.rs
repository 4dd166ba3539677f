//! Local NED frame helpers.
//!
//! Positions are kept as `x` = North, `y` = East, `z` = depth (positive
//! down), in meters relative to a mission origin. Conversion to WGS84 uses
//! an equirectangular projection about that origin.

use serde::{Deserialize, Serialize};

/// WGS84 equatorial radius.
pub const EARTH_RADIUS_M: f64 = 6_378_137.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoOrigin {
    pub lat: f64,
    pub lon: f64,
}

impl GeoOrigin {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }

    pub fn to_lat_lon(&self, north: f64, east: f64) -> (f64, f64) {
        let lat = self.lat + (north / EARTH_RADIUS_M).to_degrees();
        let lon = self.lon + (east / (EARTH_RADIUS_M * self.lat.to_radians().cos())).to_degrees();
        (lat, wrap_lon(lon))
    }

    pub fn to_local(&self, lat: f64, lon: f64) -> (f64, f64) {
        let north = (lat - self.lat).to_radians() * EARTH_RADIUS_M;
        let east =
            wrap_lon(lon - self.lon).to_radians() * EARTH_RADIUS_M * self.lat.to_radians().cos();
        (north, east)
    }
}

fn wrap_lon(lon: f64) -> f64 {
    if (-180.0..180.0).contains(&lon) {
        lon
    } else {
        (lon + 180.0).rem_euclid(360.0) - 180.0
    }
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    if (-PI..PI).contains(&a) {
        a
    } else {
        (a + PI).rem_euclid(2.0 * PI) - PI
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, o: Point2) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }

    pub fn lerp(self, o: Point2, t: f64) -> Point2 {
        Point2::new(self.x + (o.x - self.x) * t, self.y + (o.y - self.y) * t)
    }

    /// Rotates about `pivot` by `angle` radians (North towards East).
    pub fn rotate_about(self, pivot: Point2, angle: f64) -> Point2 {
        let (s, c) = angle.sin_cos();
        let dx = self.x - pivot.x;
        let dy = self.y - pivot.y;
        Point2::new(pivot.x + dx * c - dy * s, pivot.y + dx * s + dy * c)
    }
}
