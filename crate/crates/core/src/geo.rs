//! Planar geometry primitives: poses, distances, and heading arithmetic.
//!
//! Coordinates are assumed already projected to a local planar metric frame
//! (east/north in meters). Headings are degrees in `[0, 360)`, measured
//! counter-clockwise from east, so the unit view direction of heading `h` is
//! `(cos h, sin h)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A camera pose on the ground plane: metric position plus view heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanarPose {
    /// East coordinate in meters.
    pub east: f64,
    /// North coordinate in meters.
    pub north: f64,
    /// Heading in degrees, normalized to `[0, 360)`.
    heading: f64,
}

impl PlanarPose {
    /// Builds a pose, normalizing the heading into `[0, 360)`.
    ///
    /// Non-finite coordinates or headings are rejected so that every
    /// constructed pose satisfies the preconditions of the geometric
    /// operations below.
    pub fn new(east: f64, north: f64, heading_deg: f64) -> Result<Self> {
        if !east.is_finite() || !north.is_finite() || !heading_deg.is_finite() {
            return Err(Error::InvalidInput(format!(
                "pose components must be finite, got ({east}, {north}, {heading_deg})"
            )));
        }
        Ok(Self {
            east,
            north,
            heading: normalize_heading(heading_deg),
        })
    }

    /// Heading in degrees, guaranteed to lie in `[0, 360)`.
    pub fn heading(&self) -> f64 {
        self.heading
    }

    /// Unit view-direction vector `(cos h, sin h)`.
    pub fn view_direction(&self) -> [f64; 2] {
        let rad = self.heading.to_radians();
        [rad.cos(), rad.sin()]
    }
}

/// Reduces an arbitrary finite heading to `[0, 360)`.
pub fn normalize_heading(heading_deg: f64) -> f64 {
    let r = heading_deg.rem_euclid(360.0);
    // rem_euclid can return 360.0 for tiny negative inputs.
    if r >= 360.0 {
        0.0
    } else {
        r
    }
}

/// Euclidean distance on the (east, north) plane, in meters.
///
/// All geographic thresholds (25 m retrieval positives, 100 m class
/// separation, 10 m scan overlap) are measured with this metric.
pub fn planar_distance(a: &PlanarPose, b: &PlanarPose) -> f64 {
    let de = a.east - b.east;
    let dn = a.north - b.north;
    de.hypot(dn)
}

/// Minimal absolute circular difference between two headings, in `[0, 180]`.
pub fn angular_difference(h1_deg: f64, h2_deg: f64) -> Result<f64> {
    if !h1_deg.is_finite() || !h2_deg.is_finite() {
        return Err(Error::InvalidInput(format!(
            "headings must be finite, got ({h1_deg}, {h2_deg})"
        )));
    }
    let d = (normalize_heading(h1_deg) - normalize_heading(h2_deg)).abs();
    Ok(if d > 180.0 { 360.0 - d } else { d })
}

/// Heading (degrees in `[0, 360)`) of the vector from `from` to `(east, north)`.
///
/// Undefined for a zero vector; callers must keep targets away from `from`.
pub fn bearing_to(from: &PlanarPose, east: f64, north: f64) -> f64 {
    let rad = (north - from.north).atan2(east - from.east);
    normalize_heading(rad.to_degrees())
}
