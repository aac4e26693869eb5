//! Core domain types: radar targets, frames, ego state and oriented boxes.
//!
//! Units are fixed across the whole crate: meters, meters/second, radians,
//! dBsm. Angles are normalized into `(-pi, pi]`. All types here are plain
//! immutable value objects and safe to share across threads.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One radar reflection: position in the sensor frame (x forward, y left),
/// ego-motion-compensated Doppler velocity (positive receding) and RCS.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadarTarget {
    pub x: f64,
    pub y: f64,
    pub v_r: f64,
    pub rcs: f64,
}

impl RadarTarget {
    pub fn new(x: f64, y: f64, v_r: f64, rcs: f64) -> Result<Self> {
        if ![x, y, v_r, rcs].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("radar target fields must be finite"));
        }
        if x == 0.0 && y == 0.0 {
            return Err(Error::invalid("radar target cannot sit at the sensor origin"));
        }
        Ok(Self { x, y, v_r, rcs })
    }

    /// Distance from the sensor origin.
    pub fn range(&self) -> f64 {
        self.x.hypot(self.y)
    }
}

/// Per-point / per-patch class label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PointLabel {
    Car,
    Clutter,
}

impl PointLabel {
    pub fn is_car(self) -> bool {
        matches!(self, PointLabel::Car)
    }

    /// Class index used by the networks (0 = clutter, 1 = car).
    pub fn class_index(self) -> usize {
        match self {
            PointLabel::Clutter => 0,
            PointLabel::Car => 1,
        }
    }
}

/// Amodal oriented bounding box in the plane: center, heading, length
/// along the heading, width across it.
///
/// Labels and size templates follow the `length >= width` convention;
/// [`canonicalize_box`] re-establishes it for arbitrary boxes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox2D {
    pub xc: f64,
    pub yc: f64,
    pub theta: f64,
    pub length: f64,
    pub width: f64,
}

impl OrientedBox2D {
    /// Validates finiteness and positive dimensions and normalizes the
    /// heading into `(-pi, pi]`.
    pub fn new(xc: f64, yc: f64, theta: f64, length: f64, width: f64) -> Result<Self> {
        if ![xc, yc, theta, length, width].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("box fields must be finite"));
        }
        if length <= 0.0 || width <= 0.0 {
            return Err(Error::invalid(format!(
                "box dimensions must be positive (got {length} x {width})"
            )));
        }
        Ok(Self {
            xc,
            yc,
            theta: normalize_angle(theta)?,
            length,
            width,
        })
    }

    pub fn center(&self) -> [f64; 2] {
        [self.xc, self.yc]
    }

    pub fn area(&self) -> f64 {
        self.length * self.width
    }
}

/// Ego vehicle motion state plus the radar mount position in the vehicle
/// frame; needed to reproduce/compensate the sensor's own motion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    /// Forward speed of the vehicle origin, m/s.
    pub vx: f64,
    /// Yaw rate, rad/s (positive counter-clockwise).
    pub yaw_rate: f64,
    /// Sensor mount position in the vehicle frame, meters.
    pub sensor_offset: [f64; 2],
}

impl EgoState {
    pub fn stationary(sensor_offset: [f64; 2]) -> Self {
        Self {
            vx: 0.0,
            yaw_rate: 0.0,
            sensor_offset,
        }
    }

    /// Velocity of the sensor mount point in the vehicle frame
    /// (translation plus the yaw-induced component at the mount).
    pub fn sensor_velocity(&self) -> [f64; 2] {
        let [mx, my] = self.sensor_offset;
        [
            self.vx - self.yaw_rate * my,
            self.yaw_rate * mx,
        ]
    }
}

/// All targets of one radar measurement cycle, with ego state, optional
/// ground-truth box (sensor frame) and optional per-target labels.
#[derive(Clone, Debug, PartialEq)]
pub struct RadarFrame {
    pub frame_id: u64,
    pub maneuver_id: String,
    pub targets: Vec<RadarTarget>,
    pub ego: EgoState,
    pub gt_box: Option<OrientedBox2D>,
    pub point_labels: Option<Vec<PointLabel>>,
}

impl RadarFrame {
    /// Checks the structural invariants (label alignment).
    pub fn validate(&self) -> Result<()> {
        if let Some(labels) = &self.point_labels {
            if labels.len() != self.targets.len() {
                return Err(Error::invalid(format!(
                    "frame {}: {} labels for {} targets",
                    self.frame_id,
                    labels.len(),
                    self.targets.len()
                )));
            }
        }
        Ok(())
    }
}

/// Normalizes an angle into `(-pi, pi]`.
pub fn normalize_angle(theta: f64) -> Result<f64> {
    if !theta.is_finite() {
        return Err(Error::invalid("angle must be finite"));
    }
    let two_pi = 2.0 * PI;
    let mut a = theta % two_pi;
    if a <= -PI {
        a += two_pi;
    } else if a > PI {
        a -= two_pi;
    }
    Ok(a)
}

/// Rotates a point about the origin by `angle`.
pub fn rotate(p: [f64; 2], angle: f64) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

/// Re-establishes the `length >= width` convention: if the input is wider
/// than long, dimensions are swapped and the heading turned a quarter turn,
/// leaving the footprint unchanged.
pub fn canonicalize_box(b: &OrientedBox2D) -> Result<OrientedBox2D> {
    if b.length <= 0.0 || b.width <= 0.0 {
        return Err(Error::invalid("box dimensions must be positive"));
    }
    if b.width > b.length {
        Ok(OrientedBox2D {
            xc: b.xc,
            yc: b.yc,
            theta: normalize_angle(b.theta + PI / 2.0)?,
            length: b.width,
            width: b.length,
        })
    } else {
        Ok(*b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn normalize_angle_examples() {
        assert_eq!(normalize_angle(0.0).unwrap(), 0.0);
        assert_relative_eq!(normalize_angle(3.0 * PI).unwrap(), PI, epsilon = 1e-12);
        assert_relative_eq!(normalize_angle(-PI).unwrap(), PI, epsilon = 1e-12);
        assert!(normalize_angle(f64::NAN).is_err());
        assert!(normalize_angle(f64::INFINITY).is_err());
    }

    #[test]
    fn normalize_angle_idempotent() {
        for i in 0..1000 {
            let x = -20.0 + 0.04 * i as f64;
            let once = normalize_angle(x).unwrap();
            let twice = normalize_angle(once).unwrap();
            assert_eq!(once, twice);
            assert!(once > -PI && once <= PI);
        }
    }

    #[test]
    fn canonicalize_examples() {
        let b = OrientedBox2D::new(0.0, 0.0, 0.0, 4.0, 2.0).unwrap();
        assert_eq!(canonicalize_box(&b).unwrap(), b);

        let b = OrientedBox2D::new(0.0, 0.0, 0.0, 2.0, 4.0).unwrap();
        let c = canonicalize_box(&b).unwrap();
        assert_relative_eq!(c.theta, PI / 2.0);
        assert_eq!((c.length, c.width), (4.0, 2.0));

        let sq = OrientedBox2D::new(1.0, 2.0, PI / 3.0, 3.0, 3.0).unwrap();
        assert_eq!(canonicalize_box(&sq).unwrap(), sq);
    }

    #[test]
    fn canonicalize_idempotent() {
        let b = OrientedBox2D::new(1.0, -2.0, 1.2, 1.5, 3.5).unwrap();
        let once = canonicalize_box(&b).unwrap();
        let twice = canonicalize_box(&once).unwrap();
        assert_eq!(once, twice);
        assert!(once.length >= once.width);
    }

    #[test]
    fn canonicalize_rejects_degenerate() {
        let b = OrientedBox2D {
            xc: 0.0,
            yc: 0.0,
            theta: 0.0,
            length: 0.0,
            width: 1.0,
        };
        assert!(canonicalize_box(&b).is_err());
    }

    #[test]
    fn target_validation() {
        assert!(RadarTarget::new(0.0, 0.0, 0.0, 0.0).is_err());
        assert!(RadarTarget::new(1.0, f64::NAN, 0.0, 0.0).is_err());
        let t = RadarTarget::new(3.0, 4.0, 0.0, 0.0).unwrap();
        assert_relative_eq!(t.range(), 5.0);
    }

    #[test]
    fn sensor_velocity_components() {
        let ego = EgoState {
            vx: 10.0,
            yaw_rate: 0.0,
            sensor_offset: [3.7, 0.9],
        };
        assert_eq!(ego.sensor_velocity(), [10.0, 0.0]);

        let ego = EgoState {
            vx: 0.0,
            yaw_rate: 0.5,
            sensor_offset: [3.7, 0.9],
        };
        let v = ego.sensor_velocity();
        assert_relative_eq!(v[0], -0.45);
        assert_relative_eq!(v[1], 1.85);
    }
}
