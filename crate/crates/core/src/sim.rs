//! Synthetic radar scene generator.
//!
//! Stands in for a test-track recording: an ego vehicle with a single
//! forward radar and one target vehicle driving scripted maneuvers.
//! Reflections are sampled from sites on the target (visible contour,
//! wheel hubs, license plates, occasional far-side leak-through) with
//! Doppler taken from the rigid-body velocity of the site projected onto
//! the line of sight, then ego-motion compensated. Clutter comes from
//! static world clusters plus a uniform background.
//!
//! Generation is a pure function of `(spec, params)`; reruns are
//! bit-identical.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;
use crate::types::{
    normalize_angle, rotate, EgoState, OrientedBox2D, PointLabel, RadarFrame, RadarTarget,
};

/// Ground-truth boxes are grown by this much in length and in width
/// (total, i.e. half per side) before point labeling, absorbing
/// measurement noise at the vehicle boundary.
pub const BOX_LABEL_EXTENSION: f64 = 0.35;

/// Scripted driving maneuvers. The `*_standing_ego`, `circle_around_ego`,
/// `lead_in_front` and `follow_overtake` kinds form the held-out
/// evaluation set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManeuverKind {
    Circle,
    FigureEight,
    Follow,
    FollowOvertake,
    ApproachHeadOn,
    PassStandingEgo,
    CrossStandingEgo,
    CircleAroundEgo,
    LeadInFront,
    RandomDrive,
    StaticClutterOnly,
}

impl ManeuverKind {
    pub const ALL: [ManeuverKind; 11] = [
        ManeuverKind::Circle,
        ManeuverKind::FigureEight,
        ManeuverKind::Follow,
        ManeuverKind::FollowOvertake,
        ManeuverKind::ApproachHeadOn,
        ManeuverKind::PassStandingEgo,
        ManeuverKind::CrossStandingEgo,
        ManeuverKind::CircleAroundEgo,
        ManeuverKind::LeadInFront,
        ManeuverKind::RandomDrive,
        ManeuverKind::StaticClutterOnly,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ManeuverKind::Circle => "circle",
            ManeuverKind::FigureEight => "figure_eight",
            ManeuverKind::Follow => "follow",
            ManeuverKind::FollowOvertake => "follow_overtake",
            ManeuverKind::ApproachHeadOn => "approach_head_on",
            ManeuverKind::PassStandingEgo => "pass_standing_ego",
            ManeuverKind::CrossStandingEgo => "cross_standing_ego",
            ManeuverKind::CircleAroundEgo => "circle_around_ego",
            ManeuverKind::LeadInFront => "lead_in_front",
            ManeuverKind::RandomDrive => "random_drive",
            ManeuverKind::StaticClutterOnly => "static_clutter_only",
        }
    }
}

impl fmt::Display for ManeuverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ManeuverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ManeuverKind::ALL
            .iter()
            .find(|k| k.name() == s)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown maneuver kind `{s}`")))
    }
}

/// One maneuver instance to simulate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManeuverSpec {
    pub kind: ManeuverKind,
    /// Seconds of driving.
    pub duration: f64,
    /// Seconds per radar measurement cycle.
    pub cycle_period: f64,
    pub seed: u64,
}

impl ManeuverSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) {
            return Err(Error::invalid("maneuver duration must be positive"));
        }
        if !(self.cycle_period > 0.0) {
            return Err(Error::invalid("cycle period must be positive"));
        }
        Ok(())
    }
}

/// Reflection and sensor model. Rates and spreads are per-cycle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReflectionModelParams {
    /// Poisson mean of reflections per visible car per cycle (min 1).
    pub mean_targets_per_car: f64,
    /// Extra Doppler spread on wheel-hub reflections, m/s.
    pub wheel_doppler_std: f64,
    /// RCS bonus of license-plate reflections, dBsm.
    pub plate_rcs_bonus: f64,
    pub body_rcs_mean: f64,
    pub body_rcs_std: f64,
    /// Expected clutter targets per cycle (clusters plus background).
    pub clutter_rate: f64,
    pub clutter_rcs_mean: f64,
    pub clutter_rcs_std: f64,
    /// Fraction of car reflections leaking through from the far side.
    pub occlusion_leak_prob: f64,
    /// Fraction of car reflections placed on wheel hubs.
    pub wheel_site_frac: f64,
    /// Fraction of car reflections placed on the license plate.
    pub plate_site_frac: f64,
    /// Number of static clutter clusters scattered along the route.
    pub clutter_clusters: usize,
    /// Spatial spread of each clutter cluster, meters.
    pub clutter_cluster_sigma: f64,
    /// Fraction of the clutter rate drawn uniformly over the field of view.
    pub clutter_background_frac: f64,
    /// Residual Doppler spread of (static-world) clutter after
    /// compensation, m/s.
    pub clutter_doppler_std: f64,
    /// Field of view half-angle, radians.
    pub fov_half_angle: f64,
    pub max_range: f64,
    pub range_noise_std: f64,
    pub azimuth_noise_std: f64,
    pub doppler_noise_std: f64,
    pub rcs_noise_std: f64,
    /// Target vehicle footprint (also the ground-truth box size).
    pub car_length: f64,
    pub car_width: f64,
}

impl Default for ReflectionModelParams {
    fn default() -> Self {
        Self {
            mean_targets_per_car: 10.0,
            wheel_doppler_std: 0.5,
            plate_rcs_bonus: 10.0,
            body_rcs_mean: 8.0,
            body_rcs_std: 4.0,
            clutter_rate: 90.0,
            clutter_rcs_mean: -3.0,
            clutter_rcs_std: 6.0,
            occlusion_leak_prob: 0.10,
            wheel_site_frac: 0.20,
            plate_site_frac: 0.10,
            clutter_clusters: 6,
            clutter_cluster_sigma: 2.2,
            clutter_background_frac: 0.20,
            clutter_doppler_std: 0.3,
            fov_half_angle: 60f64.to_radians(),
            max_range: 100.0,
            range_noise_std: 0.15,
            azimuth_noise_std: 0.3f64.to_radians(),
            doppler_noise_std: 0.1,
            rcs_noise_std: 1.0,
            car_length: 4.6,
            car_width: 1.8,
        }
    }
}

impl ReflectionModelParams {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            self.mean_targets_per_car,
            self.wheel_doppler_std,
            self.body_rcs_std,
            self.clutter_rate,
            self.clutter_rcs_std,
            self.clutter_cluster_sigma,
            self.clutter_doppler_std,
            self.range_noise_std,
            self.azimuth_noise_std,
            self.doppler_noise_std,
            self.rcs_noise_std,
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid("rates and noise spreads must be >= 0"));
        }
        let probs = [
            self.occlusion_leak_prob,
            self.wheel_site_frac,
            self.plate_site_frac,
            self.clutter_background_frac,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("site fractions must lie in [0, 1]"));
        }
        if self.occlusion_leak_prob + self.wheel_site_frac + self.plate_site_frac > 1.0 {
            return Err(Error::invalid("site fractions must sum to at most 1"));
        }
        if !(self.car_length > 0.0 && self.car_width > 0.0 && self.car_length >= self.car_width)
        {
            return Err(Error::invalid("car footprint must satisfy length >= width > 0"));
        }
        if !(self.fov_half_angle > 0.0 && self.max_range > 0.0) {
            return Err(Error::invalid("field of view and range must be positive"));
        }
        Ok(())
    }

    /// Copy with every stochastic spread zeroed; used by kinematic tests.
    pub fn noise_free(&self) -> Self {
        Self {
            wheel_doppler_std: 0.0,
            body_rcs_std: 0.0,
            clutter_rcs_std: 0.0,
            clutter_doppler_std: 0.0,
            range_noise_std: 0.0,
            azimuth_noise_std: 0.0,
            doppler_noise_std: 0.0,
            rcs_noise_std: 0.0,
            ..self.clone()
        }
    }
}

/// World-frame pose.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub pos: [f64; 2],
    pub heading: f64,
}

/// World-frame rigid-body velocity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Twist {
    pub vel: [f64; 2],
    pub omega: f64,
}

/// Per-frame ground truth retained for kinematic consistency checks.
#[derive(Clone, Debug)]
pub struct FrameTruth {
    pub ego_pose: Pose,
    pub sensor_world: [f64; 2],
    pub sensor_vel_world: [f64; 2],
    pub target: Option<(Pose, Twist)>,
    pub car_sites: Vec<CarSiteTruth>,
}

/// Noise-free truth of one car reflection.
#[derive(Clone, Copy, Debug)]
pub struct CarSiteTruth {
    pub world_pos: [f64; 2],
    pub world_vel: [f64; 2],
    /// Compensated Doppler before measurement noise (includes wheel
    /// jitter, which models wheel surface rotation).
    pub doppler_true: f64,
    /// Index into the frame's target list.
    pub target_index: usize,
}

/// Removes the sensor's own motion from a raw radial velocity so static
/// world points read as zero. `target_pos` is in the sensor frame.
pub fn compensate_doppler(raw_radial: f64, target_pos: [f64; 2], ego: &EgoState) -> Result<f64> {
    let range = target_pos[0].hypot(target_pos[1]);
    if range <= 0.0 {
        return Err(Error::invalid("target range must be positive"));
    }
    let u = [target_pos[0] / range, target_pos[1] / range];
    let vs = ego.sensor_velocity();
    Ok(raw_radial + vs[0] * u[0] + vs[1] * u[1])
}

/// Labels every target inside the ground-truth box grown by
/// [`BOX_LABEL_EXTENSION`] (in length and in width) as car, the rest as
/// clutter; without a box everything is clutter. Boundary points count as
/// inside.
pub fn auto_label(frame: &RadarFrame) -> RadarFrame {
    let labels = match &frame.gt_box {
        None => vec![PointLabel::Clutter; frame.targets.len()],
        Some(b) => {
            let grown = OrientedBox2D {
                length: b.length + BOX_LABEL_EXTENSION,
                width: b.width + BOX_LABEL_EXTENSION,
                ..*b
            };
            frame
                .targets
                .iter()
                .map(|t| {
                    if point_in_box([t.x, t.y], &grown) {
                        PointLabel::Car
                    } else {
                        PointLabel::Clutter
                    }
                })
                .collect()
        }
    };
    RadarFrame {
        point_labels: Some(labels),
        ..frame.clone()
    }
}

/// Point-in-oriented-box test in the box frame, boundary inclusive.
pub fn point_in_box(p: [f64; 2], b: &OrientedBox2D) -> bool {
    let local = rotate([p[0] - b.xc, p[1] - b.yc], -b.theta);
    local[0].abs() <= b.length / 2.0 && local[1].abs() <= b.width / 2.0
}

/// Generates one frame per cycle of the maneuver.
pub fn generate_maneuver(
    spec: &ManeuverSpec,
    params: &ReflectionModelParams,
) -> Result<Vec<RadarFrame>> {
    Ok(generate_maneuver_with_truth(spec, params)?
        .into_iter()
        .map(|(f, _)| f)
        .collect())
}

/// As [`generate_maneuver`], additionally returning per-frame kinematic
/// truth for consistency tests.
pub fn generate_maneuver_with_truth(
    spec: &ManeuverSpec,
    params: &ReflectionModelParams,
) -> Result<Vec<(RadarFrame, FrameTruth)>> {
    spec.validate()?;
    params.validate()?;

    let scenario = Scenario::build(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(spec.seed, 0x5c31));
    let clusters = place_clutter_clusters(&scenario, spec, params, &mut rng);

    let n_cycles = (spec.duration / spec.cycle_period).floor() as usize;
    let mut out = Vec::with_capacity(n_cycles);
    for cycle in 0..n_cycles {
        let t = cycle as f64 * spec.cycle_period;
        let frame =
            generate_frame(&scenario, spec, params, &clusters, cycle as u64, t, &mut rng)?;
        out.push(frame);
    }
    Ok(out)
}

// ---- trajectories ----------------------------------------------------

/// Smoothstep ramp on [0, 1].
fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

/// Ego motion: constant speed and yaw rate, integrated analytically from
/// the origin with initial heading zero.
#[derive(Clone, Copy, Debug)]
struct EgoMotion {
    speed: f64,
    yaw_rate: f64,
}

impl EgoMotion {
    fn pose(&self, t: f64) -> Pose {
        if self.yaw_rate.abs() < 1e-9 {
            Pose {
                pos: [self.speed * t, 0.0],
                heading: 0.0,
            }
        } else {
            let r = self.speed / self.yaw_rate;
            let a = self.yaw_rate * t;
            Pose {
                pos: [r * a.sin(), r * (1.0 - a.cos())],
                heading: normalize_angle(a).expect("finite"),
            }
        }
    }

    fn twist(&self, t: f64) -> Twist {
        let h = self.pose(t).heading;
        Twist {
            vel: [self.speed * h.cos(), self.speed * h.sin()],
            omega: self.yaw_rate,
        }
    }
}

type PathFn = Box<dyn Fn(f64) -> [f64; 2]>;

struct Scenario {
    ego: EgoMotion,
    /// Target path in world coordinates, when a target exists.
    target_path: Option<PathFn>,
}

impl Scenario {
    fn build(spec: &ManeuverSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(spec.seed, 0x70a7));
        let phase: f64 = rng.gen_range(0.0..2.0 * PI);
        let (ego, target_path): (EgoMotion, Option<PathFn>) = match spec.kind {
            ManeuverKind::Circle => (
                EgoMotion {
                    speed: 5.0,
                    yaw_rate: 0.06,
                },
                Some(Box::new(move |t| {
                    let a = 0.55 * t + phase;
                    [35.0 + 12.0 * a.cos(), 12.0 * a.sin()]
                })),
            ),
            ManeuverKind::FigureEight => (
                EgoMotion {
                    speed: 0.0,
                    yaw_rate: 0.0,
                },
                Some(Box::new(move |t| {
                    let tau = 0.30 * t + phase;
                    [28.0 + 13.0 * tau.sin(), 13.0 * tau.sin() * tau.cos()]
                })),
            ),
            ManeuverKind::Follow => (
                EgoMotion {
                    speed: 8.0,
                    yaw_rate: 0.0,
                },
                Some(Box::new(|t| [18.0 + 8.0 * t, 0.0])),
            ),
            ManeuverKind::FollowOvertake => (
                EgoMotion {
                    speed: 9.0,
                    yaw_rate: 0.0,
                },
                Some(Box::new(|t| {
                    // Slower lead vehicle moves over; the ego passes it.
                    [30.0 + 6.0 * t, 3.5 * smoothstep((t - 6.0) / 3.0)]
                })),
            ),
            ManeuverKind::ApproachHeadOn => (
                EgoMotion {
                    speed: 8.0,
                    yaw_rate: 0.0,
                },
                Some(Box::new(|t| [120.0 - 8.0 * t, 3.5])),
            ),
            ManeuverKind::PassStandingEgo => (
                EgoMotion {
                    speed: 0.0,
                    yaw_rate: 0.0,
                },
                Some(Box::new(|t| [55.0 - 7.0 * t, 4.0])),
            ),
            ManeuverKind::CrossStandingEgo => (
                EgoMotion {
                    speed: 0.0,
                    yaw_rate: 0.0,
                },
                Some(Box::new(|t| [26.0, -32.0 + 8.0 * t])),
            ),
            ManeuverKind::CircleAroundEgo => (
                EgoMotion {
                    speed: 0.0,
                    yaw_rate: 0.0,
                },
                Some(Box::new(move |t| {
                    let a = 0.538 * t + phase;
                    [13.0 * a.cos(), 13.0 * a.sin()]
                })),
            ),
            ManeuverKind::LeadInFront => (
                EgoMotion {
                    speed: 8.0,
                    yaw_rate: 0.0,
                },
                Some(Box::new(|t| {
                    [15.0 + 8.0 * t + 4.0 * (0.35 * t).sin(), 0.8 * (0.2 * t).sin()]
                })),
            ),
            ManeuverKind::RandomDrive => {
                let ego = EgoMotion {
                    speed: 3.0,
                    yaw_rate: 0.0,
                };
                let table = random_drive_table(spec, ego);
                (
                    ego,
                    Some(Box::new(move |t| sample_table(&table, RANDOM_DRIVE_DT, t))),
                )
            }
            ManeuverKind::StaticClutterOnly => (
                EgoMotion {
                    speed: 0.0,
                    yaw_rate: 0.0,
                },
                None,
            ),
        };
        Scenario { ego, target_path }
    }

    /// Target pose/twist via central differences of the path; the heading
    /// follows the velocity direction.
    fn target_state(&self, t: f64) -> Option<(Pose, Twist)> {
        let path = self.target_path.as_ref()?;
        let h = 1e-3;
        let t0 = (t - h).max(0.0);
        let p0 = path(t0);
        let p1 = path(t + h);
        let dt = t + h - t0;
        let vel = [(p1[0] - p0[0]) / dt, (p1[1] - p0[1]) / dt];
        let heading = vel[1].atan2(vel[0]);
        // Yaw rate from the heading change over the same stencil.
        let head_at = |tt: f64| {
            let a = path((tt - h).max(0.0));
            let b = path(tt + h);
            (b[1] - a[1]).atan2(b[0] - a[0])
        };
        let dh = normalize_angle(head_at(t + h) - head_at(t0)).expect("finite");
        let omega = (dh / dt).clamp(-3.0, 3.0);
        Some((
            Pose {
                pos: path(t),
                heading,
            },
            Twist { vel, omega },
        ))
    }
}

const RANDOM_DRIVE_DT: f64 = 0.02;

/// Integrates a waypoint-chasing target at fixed steps; waypoints are
/// drawn ahead of the ego so the target stays in view most of the time.
fn random_drive_table(spec: &ManeuverSpec, ego: EgoMotion) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(spec.seed, 0xd21e));
    let steps = (spec.duration / RANDOM_DRIVE_DT).ceil() as usize + 200;
    let mut pos: [f64; 2] = [20.0, rng.gen_range(-6.0..6.0)];
    let mut heading: f64 = rng.gen_range(-0.5..0.5);
    let speed = 6.0;
    let mut waypoint = pos;
    let mut next_repick = 0.0;
    let mut table = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        let t = i as f64 * RANDOM_DRIVE_DT;
        let to_wp = [waypoint[0] - pos[0], waypoint[1] - pos[1]];
        if t >= next_repick || to_wp[0].hypot(to_wp[1]) < 3.0 {
            let anchor = ego.pose(t + 2.0);
            let range = rng.gen_range(14.0..38.0);
            let bearing = rng.gen_range(-0.8..0.8);
            let dir = anchor.heading + bearing;
            waypoint = [
                anchor.pos[0] + range * dir.cos(),
                anchor.pos[1] + range * dir.sin(),
            ];
            next_repick = t + 4.0;
        }
        table.push(pos);
        let desired = (waypoint[1] - pos[1]).atan2(waypoint[0] - pos[0]);
        let err = normalize_angle(desired - heading).expect("finite");
        let omega = (2.0 * err).clamp(-0.7, 0.7);
        heading += omega * RANDOM_DRIVE_DT;
        pos[0] += speed * heading.cos() * RANDOM_DRIVE_DT;
        pos[1] += speed * heading.sin() * RANDOM_DRIVE_DT;
    }
    table
}

fn sample_table(table: &[[f64; 2]], dt: f64, t: f64) -> [f64; 2] {
    let idx = (t / dt).max(0.0);
    let lo = (idx.floor() as usize).min(table.len() - 1);
    let hi = (lo + 1).min(table.len() - 1);
    let frac = idx - lo as f64;
    [
        table[lo][0] + (table[hi][0] - table[lo][0]) * frac,
        table[lo][1] + (table[hi][1] - table[lo][1]) * frac,
    ]
}

// ---- reflection sampling ----------------------------------------------

const SENSOR_OFFSET: [f64; 2] = [3.7, 0.9];

fn sensor_world(ego_pose: &Pose) -> [f64; 2] {
    let m = rotate(SENSOR_OFFSET, ego_pose.heading);
    [ego_pose.pos[0] + m[0], ego_pose.pos[1] + m[1]]
}

fn sensor_velocity_world(ego_pose: &Pose, ego_twist: &Twist) -> [f64; 2] {
    let m = rotate(SENSOR_OFFSET, ego_pose.heading);
    [
        ego_twist.vel[0] - ego_twist.omega * m[1],
        ego_twist.vel[1] + ego_twist.omega * m[0],
    ]
}

fn world_to_sensor(p: [f64; 2], ego_pose: &Pose, sensor: [f64; 2]) -> [f64; 2] {
    rotate([p[0] - sensor[0], p[1] - sensor[1]], -ego_pose.heading)
}

fn in_fov(p_sensor: [f64; 2], params: &ReflectionModelParams) -> bool {
    let range = p_sensor[0].hypot(p_sensor[1]);
    if range < 0.5 || range > params.max_range {
        return false;
    }
    p_sensor[1].atan2(p_sensor[0]).abs() <= params.fov_half_angle
}

struct ClutterCluster {
    center: [f64; 2],
    rate: f64,
}

fn place_clutter_clusters(
    scenario: &Scenario,
    spec: &ManeuverSpec,
    params: &ReflectionModelParams,
    rng: &mut ChaCha8Rng,
) -> Vec<ClutterCluster> {
    let k = params.clutter_clusters;
    if k == 0 {
        return Vec::new();
    }
    let cluster_rate = params.clutter_rate * (1.0 - params.clutter_background_frac) / k as f64;
    (0..k)
        .map(|_| {
            // Anchor each cluster to the view at some moment of the run.
            let t = rng.gen_range(0.0..spec.duration);
            let pose = scenario.ego.pose(t);
            let range = rng.gen_range(10.0..50.0f64.min(params.max_range * 0.5));
            let bearing = rng.gen_range(-0.85..0.85) * params.fov_half_angle;
            let dir = pose.heading + bearing;
            let s = sensor_world(&pose);
            ClutterCluster {
                center: [s[0] + range * dir.cos(), s[1] + range * dir.sin()],
                rate: cluster_rate,
            }
        })
        .collect()
}

fn poisson_count(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean)
        .map(|d| d.sample(rng) as usize)
        .unwrap_or(0)
}

fn gaussian(rng: &mut ChaCha8Rng, mean: f64, std: f64) -> f64 {
    if std <= 0.0 {
        return mean;
    }
    Normal::new(mean, std).expect("valid normal").sample(rng)
}

/// Which box edges face the sensor (sensor position in the box frame).
/// Order: front (+x), left (+y), rear (-x), right (-y).
fn visible_edges(sensor_body: [f64; 2], half_l: f64, half_w: f64) -> [bool; 4] {
    [
        sensor_body[0] > half_l,
        sensor_body[1] > half_w,
        sensor_body[0] < -half_l,
        sensor_body[1] < -half_w,
    ]
}

/// Uniform point along the listed edges of the footprint, in body frame.
fn sample_on_edges(rng: &mut ChaCha8Rng, edges: &[usize], half_l: f64, half_w: f64) -> [f64; 2] {
    let lengths: Vec<f64> = edges
        .iter()
        .map(|e| if *e % 2 == 0 { 2.0 * half_w } else { 2.0 * half_l })
        .collect();
    let total: f64 = lengths.iter().sum();
    let mut pick = rng.gen_range(0.0..total);
    for (e, len) in edges.iter().zip(lengths.iter()) {
        if pick <= *len {
            let along = pick - len / 2.0;
            return match e {
                0 => [half_l, along.clamp(-half_w, half_w)],
                1 => [along.clamp(-half_l, half_l), half_w],
                2 => [-half_l, along.clamp(-half_w, half_w)],
                _ => [along.clamp(-half_l, half_l), -half_w],
            };
        }
        pick -= len;
    }
    [half_l, 0.0]
}

enum SiteKind {
    Contour,
    Wheel,
    Plate,
    FarSide,
}

#[allow(clippy::too_many_arguments)]
fn generate_frame(
    scenario: &Scenario,
    spec: &ManeuverSpec,
    params: &ReflectionModelParams,
    clusters: &[ClutterCluster],
    cycle: u64,
    t: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(RadarFrame, FrameTruth)> {
    let ego_pose = scenario.ego.pose(t);
    let ego_twist = scenario.ego.twist(t);
    let sensor = sensor_world(&ego_pose);
    let sensor_vel = sensor_velocity_world(&ego_pose, &ego_twist);

    let mut targets = Vec::new();
    let mut car_sites = Vec::new();
    let mut gt_box = None;

    let target_state = scenario.target_state(t);
    if let Some((pose, twist)) = &target_state {
        let center_sensor = world_to_sensor(pose.pos, &ego_pose, sensor);
        // The target is part of the sensed scene only while its center is
        // within the field of view.
        if in_fov(center_sensor, params) {
            gt_box = Some(OrientedBox2D::new(
                center_sensor[0],
                center_sensor[1],
                normalize_angle(pose.heading - ego_pose.heading)?,
                params.car_length,
                params.car_width,
            )?);
            let n = poisson_count(rng, params.mean_targets_per_car).max(1);
            for _ in 0..n {
                if let Some((target, truth)) =
                    sample_car_reflection(params, &ego_pose, sensor, pose, twist, rng)
                {
                    car_sites.push(CarSiteTruth {
                        target_index: targets.len(),
                        ..truth
                    });
                    targets.push(target);
                }
            }
        }
    }

    // Static clutter clusters re-scintillate every cycle.
    for cluster in clusters {
        for _ in 0..poisson_count(rng, cluster.rate) {
            let p_world = [
                gaussian(rng, cluster.center[0], params.clutter_cluster_sigma),
                gaussian(rng, cluster.center[1], params.clutter_cluster_sigma),
            ];
            let p = world_to_sensor(p_world, &ego_pose, sensor);
            if !in_fov(p, params) {
                continue;
            }
            targets.push(make_clutter_target(p, params, rng));
        }
    }
    // Uniform background.
    let n_bg = poisson_count(rng, params.clutter_rate * params.clutter_background_frac);
    for _ in 0..n_bg {
        let range = rng.gen_range(1.0..params.max_range);
        let bearing = rng.gen_range(-params.fov_half_angle..params.fov_half_angle);
        let p = [range * bearing.cos(), range * bearing.sin()];
        targets.push(make_clutter_target(p, params, rng));
    }

    let frame = RadarFrame {
        frame_id: cycle,
        maneuver_id: format!("{}#{}", spec.kind, spec.seed),
        targets,
        ego: EgoState {
            vx: scenario.ego.speed,
            yaw_rate: scenario.ego.yaw_rate,
            sensor_offset: SENSOR_OFFSET,
        },
        gt_box,
        point_labels: None,
    };
    let truth = FrameTruth {
        ego_pose,
        sensor_world: sensor,
        sensor_vel_world: sensor_vel,
        target: target_state,
        car_sites,
    };
    Ok((frame, truth))
}

fn make_clutter_target(
    p_sensor: [f64; 2],
    params: &ReflectionModelParams,
    rng: &mut ChaCha8Rng,
) -> RadarTarget {
    RadarTarget {
        x: p_sensor[0],
        y: p_sensor[1],
        v_r: gaussian(rng, 0.0, params.clutter_doppler_std),
        rcs: gaussian(rng, params.clutter_rcs_mean, params.clutter_rcs_std),
    }
}

fn sample_car_reflection(
    params: &ReflectionModelParams,
    ego_pose: &Pose,
    sensor: [f64; 2],
    pose: &Pose,
    twist: &Twist,
    rng: &mut ChaCha8Rng,
) -> Option<(RadarTarget, CarSiteTruth)> {
    let half_l = params.car_length / 2.0;
    let half_w = params.car_width / 2.0;
    let sensor_body = rotate(
        [sensor[0] - pose.pos[0], sensor[1] - pose.pos[1]],
        -pose.heading,
    );
    let vis = visible_edges(sensor_body, half_l, half_w);
    let visible: Vec<usize> = (0..4).filter(|e| vis[*e]).collect();
    let hidden: Vec<usize> = (0..4).filter(|e| !vis[*e]).collect();

    let roll: f64 = rng.gen_range(0.0..1.0);
    let (kind, body_pos) = if roll < params.wheel_site_frac {
        let hubs = [
            [0.3 * params.car_length, 0.42 * params.car_width],
            [0.3 * params.car_length, -0.42 * params.car_width],
            [-0.3 * params.car_length, 0.42 * params.car_width],
            [-0.3 * params.car_length, -0.42 * params.car_width],
        ];
        let hub = hubs[rng.gen_range(0..4)];
        (
            SiteKind::Wheel,
            [
                hub[0] + gaussian(rng, 0.0, 0.05),
                hub[1] + gaussian(rng, 0.0, 0.05),
            ],
        )
    } else if roll < params.wheel_site_frac + params.plate_site_frac {
        let x = if sensor_body[0] >= 0.0 { half_l } else { -half_l };
        (SiteKind::Plate, [x, gaussian(rng, 0.0, 0.05)])
    } else if roll
        < params.wheel_site_frac + params.plate_site_frac + params.occlusion_leak_prob
        && !hidden.is_empty()
    {
        (
            SiteKind::FarSide,
            sample_on_edges(rng, &hidden, half_l, half_w),
        )
    } else {
        let edges = if visible.is_empty() {
            vec![0, 1, 2, 3]
        } else {
            visible
        };
        (
            SiteKind::Contour,
            sample_on_edges(rng, &edges, half_l, half_w),
        )
    };

    let offset_world = rotate(body_pos, pose.heading);
    let world_pos = [pose.pos[0] + offset_world[0], pose.pos[1] + offset_world[1]];
    let world_vel = [
        twist.vel[0] - twist.omega * offset_world[1],
        twist.vel[1] + twist.omega * offset_world[0],
    ];

    let p_sensor_true = world_to_sensor(world_pos, ego_pose, sensor);
    if !in_fov(p_sensor_true, params) {
        return None;
    }

    let rel = [world_pos[0] - sensor[0], world_pos[1] - sensor[1]];
    let range_true = rel[0].hypot(rel[1]);
    let u = [rel[0] / range_true, rel[1] / range_true];
    // Compensated Doppler: radial speed of the site over the ground.
    let mut doppler_true = world_vel[0] * u[0] + world_vel[1] * u[1];
    if matches!(kind, SiteKind::Wheel) {
        doppler_true += gaussian(rng, 0.0, params.wheel_doppler_std);
    }

    let mut rcs = gaussian(rng, params.body_rcs_mean, params.body_rcs_std);
    if matches!(kind, SiteKind::Plate) {
        rcs += params.plate_rcs_bonus;
    }

    // Measurement noise in polar coordinates.
    let range_noisy = (range_true + gaussian(rng, 0.0, params.range_noise_std)).max(0.5);
    let az_true = p_sensor_true[1].atan2(p_sensor_true[0]);
    let az_noisy = az_true + gaussian(rng, 0.0, params.azimuth_noise_std);
    let target = RadarTarget {
        x: range_noisy * az_noisy.cos(),
        y: range_noisy * az_noisy.sin(),
        v_r: doppler_true + gaussian(rng, 0.0, params.doppler_noise_std),
        rcs: rcs + gaussian(rng, 0.0, params.rcs_noise_std),
    };
    let truth = CarSiteTruth {
        world_pos,
        world_vel,
        doppler_true,
        target_index: 0,
    };
    Some((target, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spec(kind: ManeuverKind, seed: u64) -> ManeuverSpec {
        ManeuverSpec {
            kind,
            duration: 10.0,
            cycle_period: 0.5,
            seed,
        }
    }

    #[test]
    fn compensation_examples() {
        // Stationary world point dead ahead of a straight-moving ego: the
        // raw reading is the closing speed, compensation cancels it.
        let ego = EgoState {
            vx: 10.0,
            yaw_rate: 0.0,
            sensor_offset: [3.7, 0.9],
        };
        let raw = -10.0;
        assert_relative_eq!(
            compensate_doppler(raw, [20.0, 0.0], &ego).unwrap(),
            0.0,
            epsilon = 1e-12
        );

        // Stationary ego: compensation is the identity.
        let ego = EgoState::stationary([3.7, 0.9]);
        assert_eq!(compensate_doppler(0.7, [5.0, 2.0], &ego).unwrap(), 0.7);

        // Yaw-only ego, point abeam the mount. Mount velocity is
        // omega x r = 0.5 * (-0.9, 3.7) = (-0.45, 1.85); along u = (0, 1)
        // its projection is 1.85.
        let ego = EgoState {
            vx: 0.0,
            yaw_rate: 0.5,
            sensor_offset: [3.7, 0.9],
        };
        assert_relative_eq!(
            compensate_doppler(0.0, [0.0, 10.0], &ego).unwrap(),
            1.85,
            epsilon = 1e-12
        );

        assert!(compensate_doppler(0.0, [0.0, 0.0], &ego).is_err());
    }

    #[test]
    fn auto_label_boundary_cases() {
        // Box at the origin so the boundary coordinates below are exact
        // (no rounding from re-centering).
        let half_grown_l = (4.0 + BOX_LABEL_EXTENSION) / 2.0;
        let half_grown_w = (1.8 + BOX_LABEL_EXTENSION) / 2.0;
        let frame = RadarFrame {
            frame_id: 0,
            maneuver_id: "test".into(),
            targets: vec![
                RadarTarget::new(0.1, 0.0, 0.0, 0.0).unwrap(), // near box center
                RadarTarget::new(half_grown_l + 1.0, 0.0, 0.0, 0.0).unwrap(), // 1 m beyond
                RadarTarget::new(2.1, 0.0, 0.0, 0.0).unwrap(), // 0.1 m beyond raw, inside grown
                RadarTarget::new(half_grown_l, 0.0, 0.0, 0.0).unwrap(), // exactly on boundary
                RadarTarget::new(half_grown_l + 1e-9, 0.0, 0.0, 0.0).unwrap(), // just outside
                RadarTarget::new(0.0, half_grown_w, 0.0, 0.0).unwrap(), // width boundary
            ],
            ego: EgoState::stationary([0.0, 0.0]),
            gt_box: Some(OrientedBox2D::new(0.0, 0.0, 0.0, 4.0, 1.8).unwrap()),
            point_labels: None,
        };
        let labeled = auto_label(&frame);
        let labels = labeled.point_labels.unwrap();
        use PointLabel::*;
        assert_eq!(labels, vec![Car, Clutter, Car, Car, Clutter, Car]);
    }

    #[test]
    fn auto_label_without_box_is_all_clutter() {
        let frame = RadarFrame {
            frame_id: 0,
            maneuver_id: "test".into(),
            targets: vec![RadarTarget::new(5.0, 0.0, 0.0, 0.0).unwrap()],
            ego: EgoState::stationary([0.0, 0.0]),
            gt_box: None,
            point_labels: None,
        };
        let labeled = auto_label(&frame);
        assert_eq!(labeled.point_labels.unwrap(), vec![PointLabel::Clutter]);
    }

    #[test]
    fn auto_label_rotated_box_boundary() {
        let b = OrientedBox2D::new(8.0, 3.0, 0.9, 4.0, 1.8).unwrap();
        let grown_half_l = (4.0 + BOX_LABEL_EXTENSION) / 2.0;
        let on_edge = rotate([grown_half_l, 0.0], 0.9);
        let frame = RadarFrame {
            frame_id: 0,
            maneuver_id: "test".into(),
            targets: vec![
                RadarTarget::new(8.0 + on_edge[0], 3.0 + on_edge[1], 0.0, 0.0).unwrap(),
            ],
            ego: EgoState::stationary([0.0, 0.0]),
            gt_box: Some(b),
            point_labels: None,
        };
        let labeled = auto_label(&frame);
        assert_eq!(labeled.point_labels.unwrap(), vec![PointLabel::Car]);
    }

    #[test]
    fn unknown_kind_is_rejected() {
        let err = "hover_in_place".parse::<ManeuverKind>().unwrap_err();
        assert!(err.to_string().contains("hover_in_place"));
        assert_eq!(
            "circle".parse::<ManeuverKind>().unwrap(),
            ManeuverKind::Circle
        );
    }

    #[test]
    fn deterministic_given_seed() {
        let params = ReflectionModelParams::default();
        let s = spec(ManeuverKind::Circle, 99);
        let a = generate_maneuver(&s, &params).unwrap();
        let b = generate_maneuver(&s, &params).unwrap();
        assert_eq!(a, b);
        let c = generate_maneuver(&spec(ManeuverKind::Circle, 100), &params).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn clutter_only_has_no_boxes_and_expected_rate() {
        let params = ReflectionModelParams {
            clutter_rate: 20.0,
            ..ReflectionModelParams::default()
        };
        let s = ManeuverSpec {
            kind: ManeuverKind::StaticClutterOnly,
            duration: 40.0,
            cycle_period: 0.5,
            seed: 5,
        };
        let frames = generate_maneuver(&s, &params).unwrap();
        assert!(!frames.is_empty());
        assert!(frames.iter().all(|f| f.gt_box.is_none()));
        let mean =
            frames.iter().map(|f| f.targets.len()).sum::<usize>() as f64 / frames.len() as f64;
        // Clusters sit inside the view most of the time; expect the mean
        // within a loose band around the configured rate.
        assert!((8.0..30.0).contains(&mean), "mean clutter per frame {mean}");
    }

    #[test]
    fn follow_has_near_zero_relative_radial_speed() {
        // Equal speeds in a straight line: the raw (relative) radial
        // velocity is zero; the compensated reading equals the target's
        // over-ground radial speed.
        let params = ReflectionModelParams::default().noise_free();
        let s = spec(ManeuverKind::Follow, 3);
        let frames = generate_maneuver_with_truth(&s, &params).unwrap();
        let mut checked = 0;
        for (frame, truth) in &frames {
            for site in &truth.car_sites {
                let rel = [
                    site.world_pos[0] - truth.sensor_world[0],
                    site.world_pos[1] - truth.sensor_world[1],
                ];
                let range = rel[0].hypot(rel[1]);
                let u = [rel[0] / range, rel[1] / range];
                let raw = (site.world_vel[0] - truth.sensor_vel_world[0]) * u[0]
                    + (site.world_vel[1] - truth.sensor_vel_world[1]) * u[1];
                assert!(raw.abs() < 0.1, "relative radial speed {raw}");
                let stored = frame.targets[site.target_index].v_r;
                let vs_proj =
                    truth.sensor_vel_world[0] * u[0] + truth.sensor_vel_world[1] * u[1];
                assert_relative_eq!(stored, raw + vs_proj, epsilon = 1e-9);
                checked += 1;
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn doppler_matches_site_kinematics_noise_free() {
        let params = ReflectionModelParams::default().noise_free();
        for kind in [
            ManeuverKind::Circle,
            ManeuverKind::CrossStandingEgo,
            ManeuverKind::LeadInFront,
        ] {
            let frames = generate_maneuver_with_truth(&spec(kind, 17), &params).unwrap();
            let mut checked = 0;
            for (frame, truth) in &frames {
                for site in &truth.car_sites {
                    let rel = [
                        site.world_pos[0] - truth.sensor_world[0],
                        site.world_pos[1] - truth.sensor_world[1],
                    ];
                    let range = rel[0].hypot(rel[1]);
                    let u = [rel[0] / range, rel[1] / range];
                    let analytic = site.world_vel[0] * u[0] + site.world_vel[1] * u[1];
                    assert_relative_eq!(
                        frame.targets[site.target_index].v_r,
                        analytic,
                        epsilon = 1e-6
                    );
                    checked += 1;
                }
            }
            assert!(checked > 30, "{kind}: only {checked} sites");
        }
    }

    #[test]
    fn doppler_with_noise_stays_within_three_sigma_mostly() {
        let params = ReflectionModelParams {
            wheel_doppler_std: 0.0,
            ..ReflectionModelParams::default()
        };
        let s = ManeuverSpec {
            kind: ManeuverKind::Circle,
            duration: 20.0,
            cycle_period: 0.5,
            seed: 23,
        };
        let frames = generate_maneuver_with_truth(&s, &params).unwrap();
        let mut total = 0;
        let mut within = 0;
        for (frame, truth) in &frames {
            for site in &truth.car_sites {
                let err = (frame.targets[site.target_index].v_r - site.doppler_true).abs();
                total += 1;
                if err <= 3.0 * params.doppler_noise_std {
                    within += 1;
                }
            }
        }
        assert!(total > 40, "only {total} car reflections");
        assert!(within as f64 / total as f64 >= 0.985, "{within}/{total}");
    }

    #[test]
    fn circle_around_ego_doppler_sign_follows_range_rate() {
        // The target circles the ego origin while the sensor sits at the
        // mount offset, so the range oscillates; the mean car Doppler must
        // flip sign with the analytic range rate of the box center.
        let params = ReflectionModelParams {
            wheel_doppler_std: 0.0,
            ..ReflectionModelParams::default().noise_free()
        };
        let s = ManeuverSpec {
            kind: ManeuverKind::CircleAroundEgo,
            duration: 24.0,
            cycle_period: 0.25,
            seed: 8,
        };
        let frames = generate_maneuver_with_truth(&s, &params).unwrap();
        let mut pos_frames = 0;
        let mut neg_frames = 0;
        for (frame, truth) in &frames {
            let Some((pose, twist)) = &truth.target else {
                continue;
            };
            if truth.car_sites.is_empty() {
                continue;
            }
            let rel = [
                pose.pos[0] - truth.sensor_world[0],
                pose.pos[1] - truth.sensor_world[1],
            ];
            let range = rel[0].hypot(rel[1]);
            let analytic_rate = (twist.vel[0] * rel[0] + twist.vel[1] * rel[1]) / range;
            if analytic_rate.abs() < 0.5 {
                continue;
            }
            let mean_doppler: f64 = truth
                .car_sites
                .iter()
                .map(|s| frame.targets[s.target_index].v_r)
                .sum::<f64>()
                / truth.car_sites.len() as f64;
            assert_eq!(
                mean_doppler.signum(),
                analytic_rate.signum(),
                "rate {analytic_rate} vs mean doppler {mean_doppler}"
            );
            if analytic_rate > 0.0 {
                pos_frames += 1;
            } else {
                neg_frames += 1;
            }
        }
        assert!(pos_frames > 5, "receding half missing ({pos_frames})");
        assert!(neg_frames > 5, "approaching half missing ({neg_frames})");
    }

    #[test]
    fn car_labels_lie_inside_grown_box() {
        let params = ReflectionModelParams::default();
        for kind in [ManeuverKind::Circle, ManeuverKind::PassStandingEgo] {
            let frames = generate_maneuver(&spec(kind, 31), &params).unwrap();
            for frame in &frames {
                let labeled = auto_label(frame);
                let Some(b) = &labeled.gt_box else {
                    continue;
                };
                let grown = OrientedBox2D {
                    length: b.length + BOX_LABEL_EXTENSION,
                    width: b.width + BOX_LABEL_EXTENSION,
                    ..*b
                };
                for (t, l) in labeled
                    .targets
                    .iter()
                    .zip(labeled.point_labels.as_ref().unwrap())
                {
                    if l.is_car() {
                        assert!(point_in_box([t.x, t.y], &grown));
                    }
                }
            }
        }
    }

    #[test]
    fn every_maneuver_kind_generates() {
        let params = ReflectionModelParams::default();
        for kind in ManeuverKind::ALL {
            let frames = generate_maneuver(&spec(kind, 1), &params).unwrap();
            assert_eq!(frames.len(), 20, "{kind}");
            if kind != ManeuverKind::StaticClutterOnly {
                // The target leaves the field of view in parts of most
                // maneuvers; require a reasonable visible share.
                let with_box = frames.iter().filter(|f| f.gt_box.is_some()).count();
                assert!(with_box >= 4, "{kind}: only {with_box} frames see the car");
            }
        }
    }

    #[test]
    fn targets_respect_field_of_view() {
        let params = ReflectionModelParams::default();
        let frames =
            generate_maneuver(&spec(ManeuverKind::FollowOvertake, 2), &params).unwrap();
        for f in &frames {
            for t in &f.targets {
                // Azimuth noise can push a stored position slightly past
                // the configured cone; allow a small margin.
                let bearing = t.y.atan2(t.x).abs();
                assert!(bearing <= params.fov_half_angle + 0.05);
                assert!(t.range() <= params.max_range + 1.0);
            }
        }
    }
}
