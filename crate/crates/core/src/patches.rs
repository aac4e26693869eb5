//! Patch proposal and preparation.
//!
//! A patch is the region of interest around one radar target (its
//! anchor). The pipeline is: propose one patch per target, rotate it to
//! the center view (anchor on the +x axis), filter by the minimum point
//! counts, then draw a fixed-size point set per epoch (with augmentation
//! during training).
//!
//! Patch membership is an axis-aligned square in the center-view
//! orientation, i.e. a square aligned with the anchor's radial direction.
//! This keeps the proposal invariant under rotations of the whole frame
//! about the sensor.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::ManeuverKind;
use crate::types::{normalize_angle, rotate, OrientedBox2D, PointLabel, RadarFrame, RadarTarget};

/// Fixed point count per patch fed to the classification/segmentation
/// network.
pub const PATCH_POINTS: usize = 48;

/// Point budget of the box regression network.
pub const BOX_NET_POINTS: usize = 32;

/// Default patch edge length, meters.
pub const DEFAULT_PATCH_SIZE: f64 = 10.0;

/// A patch through its lifecycle: variable-length directly after
/// proposal, exactly `n` slots after [`sample_points`] (`valid_count`
/// tracks how many distinct original points the slots cover).
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    /// Points in center-view coordinates once normalized.
    pub points: Vec<RadarTarget>,
    pub point_labels: Vec<PointLabel>,
    /// Slot -> index of the original point it replicates.
    pub origin_indices: Vec<usize>,
    /// Distinct original points represented.
    pub valid_count: usize,
    /// Label of the anchor target.
    pub patch_label: PointLabel,
    /// Rotation applied by the center-view normalization.
    pub view_angle: f64,
    /// The proposing target, sensor frame.
    pub anchor: [f64; 2],
    /// Ground-truth box in the patch's current coordinate frame; present
    /// iff the patch is a car patch.
    pub gt_box_local: Option<OrientedBox2D>,
    pub maneuver_id: String,
    pub frame_id: u64,
}

impl Patch {
    pub fn is_car(&self) -> bool {
        self.patch_label.is_car()
    }

    pub fn car_point_count(&self) -> usize {
        self.point_labels.iter().filter(|l| l.is_car()).count()
    }

    pub fn clutter_point_count(&self) -> usize {
        self.point_labels.iter().filter(|l| !l.is_car()).count()
    }
}

/// Sampling regime: training keeps every car point and only samples
/// clutter; testing samples class-agnostically.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Train,
    Test,
}

/// Train-time perturbations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentParams {
    /// Uniform shift range: dx, dy ~ U(-shift_range, shift_range).
    pub shift_range: f64,
    /// Doppler noise added to car points.
    pub car_doppler_std: f64,
    /// RCS noise added to car points.
    pub car_rcs_std: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            shift_range: 1.0,
            car_doppler_std: 0.2,
            car_rcs_std: 1.0,
        }
    }
}

/// One patch per radar target, containing every frame target within the
/// patch square around the anchor. Points stay in the sensor frame;
/// membership is evaluated in the anchor's center-view orientation.
pub fn propose_patches(frame: &RadarFrame, patch_size: f64) -> Vec<Patch> {
    let half = patch_size / 2.0;
    let labels = frame.point_labels.as_ref();
    let mut out = Vec::with_capacity(frame.targets.len());
    for (i, anchor) in frame.targets.iter().enumerate() {
        let view = anchor.y.atan2(anchor.x);
        let anchor_range = anchor.range();
        let mut points = Vec::new();
        let mut point_labels = Vec::new();
        for (j, t) in frame.targets.iter().enumerate() {
            let q = rotate([t.x, t.y], -view);
            if (q[0] - anchor_range).abs() <= half && q[1].abs() <= half {
                points.push(*t);
                point_labels.push(labels.map(|ls| ls[j]).unwrap_or(PointLabel::Clutter));
            }
        }
        let patch_label = labels.map(|ls| ls[i]).unwrap_or(PointLabel::Clutter);
        let n = points.len();
        out.push(Patch {
            points,
            point_labels,
            origin_indices: (0..n).collect(),
            valid_count: n,
            patch_label,
            view_angle: 0.0,
            anchor: [anchor.x, anchor.y],
            gt_box_local: if patch_label.is_car() {
                frame.gt_box
            } else {
                None
            },
            maneuver_id: frame.maneuver_id.clone(),
            frame_id: frame.frame_id,
        });
    }
    out
}

/// Rotates the patch about the sensor origin so the anchor lands on the
/// positive x axis. Doppler and RCS are rotation-invariant and unchanged.
pub fn center_view_normalize(patch: &Patch) -> Result<Patch> {
    let [ax, ay] = patch.anchor;
    if ax == 0.0 && ay == 0.0 {
        return Err(Error::invalid("anchor at the sensor origin"));
    }
    let view = ay.atan2(ax);
    let points = patch
        .points
        .iter()
        .map(|t| {
            let p = rotate([t.x, t.y], -view);
            RadarTarget {
                x: p[0],
                y: p[1],
                ..*t
            }
        })
        .collect();
    let gt_box_local = match &patch.gt_box_local {
        Some(b) => {
            let c = rotate([b.xc, b.yc], -view);
            Some(OrientedBox2D {
                xc: c[0],
                yc: c[1],
                theta: normalize_angle(b.theta - view)?,
                ..*b
            })
        }
        None => None,
    };
    Ok(Patch {
        points,
        gt_box_local,
        view_angle: view,
        ..patch.clone()
    })
}

/// Keeps car patches with at least `min_car` car points and clutter
/// patches with at least `min_clutter` clutter points.
pub fn filter_valid(patches: Vec<Patch>, min_car: usize, min_clutter: usize) -> Vec<Patch> {
    patches
        .into_iter()
        .filter(|p| {
            if p.is_car() {
                p.car_point_count() >= min_car
            } else {
                p.clutter_point_count() >= min_clutter
            }
        })
        .collect()
}

/// Draws exactly `n` point slots from the patch.
///
/// Training mode keeps all car points (sampling them down only if they
/// alone exceed `n`) and fills the remainder with clutter, without
/// replacement while possible. Test mode samples class-agnostically.
/// Short patches are padded by re-drawing originals with replacement;
/// `valid_count` reports the distinct originals covered.
pub fn sample_points(patch: &Patch, n: usize, mode: SampleMode, seed: u64) -> Result<Patch> {
    if patch.points.is_empty() {
        return Err(Error::invalid("cannot sample an empty patch"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = patch.points.len();

    let mut picked: Vec<usize> = match mode {
        SampleMode::Train => {
            let car: Vec<usize> = (0..total)
                .filter(|&i| patch.point_labels[i].is_car())
                .collect();
            let clutter: Vec<usize> = (0..total)
                .filter(|&i| !patch.point_labels[i].is_car())
                .collect();
            if car.len() >= n {
                let mut car = car;
                car.shuffle(&mut rng);
                car.truncate(n);
                car
            } else {
                let mut picked = car;
                let need = n - picked.len();
                if clutter.len() >= need {
                    let mut cl = clutter;
                    cl.shuffle(&mut rng);
                    picked.extend_from_slice(&cl[..need]);
                } else {
                    picked.extend_from_slice(&clutter);
                }
                picked
            }
        }
        SampleMode::Test => {
            if total >= n {
                let mut all: Vec<usize> = (0..total).collect();
                all.shuffle(&mut rng);
                all.truncate(n);
                all
            } else {
                (0..total).collect()
            }
        }
    };

    // Pad with replacement from what was picked so far.
    while picked.len() < n {
        let i = picked[rng.gen_range(0..picked.len())];
        picked.push(i);
    }

    let mut distinct: Vec<usize> = picked.clone();
    distinct.sort_unstable();
    distinct.dedup();

    Ok(Patch {
        points: picked.iter().map(|&i| patch.points[i]).collect(),
        point_labels: picked.iter().map(|&i| patch.point_labels[i]).collect(),
        valid_count: distinct.len(),
        origin_indices: picked,
        ..patch.clone()
    })
}

/// Train-time augmentation: one uniform shift of every point (and the
/// box center), then Doppler/RCS noise on car points only.
pub fn augment(patch: &Patch, params: &AugmentParams, seed: u64) -> Patch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = params.shift_range;
    let shift = if r > 0.0 {
        [rng.gen_range(-r..r), rng.gen_range(-r..r)]
    } else {
        [0.0, 0.0]
    };
    let doppler = Normal::new(0.0, params.car_doppler_std.max(f64::MIN_POSITIVE)).unwrap();
    let rcs = Normal::new(0.0, params.car_rcs_std.max(f64::MIN_POSITIVE)).unwrap();

    let points = patch
        .points
        .iter()
        .zip(patch.point_labels.iter())
        .map(|(t, label)| {
            let mut t = RadarTarget {
                x: t.x + shift[0],
                y: t.y + shift[1],
                ..*t
            };
            if label.is_car() {
                if params.car_doppler_std > 0.0 {
                    t.v_r += doppler.sample(&mut rng);
                }
                if params.car_rcs_std > 0.0 {
                    t.rcs += rcs.sample(&mut rng);
                }
            }
            t
        })
        .collect();
    let gt_box_local = patch.gt_box_local.map(|b| OrientedBox2D {
        xc: b.xc + shift[0],
        yc: b.yc + shift[1],
        ..b
    });
    Patch {
        points,
        gt_box_local,
        ..patch.clone()
    }
}

/// Split role of a maneuver instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    Train,
    Val,
    Test,
}

/// Patch lists per split plus the instance-level assignment that
/// produced them.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: Vec<Patch>,
    pub val: Vec<Patch>,
    pub test: Vec<Patch>,
    pub split_manifest: BTreeMap<String, SplitRole>,
}

/// Assigns maneuver instances to splits: held-out kinds go to test, the
/// rest are split train/val per kind at `val_fraction` (instance level,
/// never frame level). A kind with a single instance cannot be split and
/// lands in train with a warning.
pub fn assign_instances(
    kinds: &BTreeMap<String, ManeuverKind>,
    test_kinds: &HashSet<ManeuverKind>,
    val_fraction: f64,
    seed: u64,
) -> BTreeMap<String, SplitRole> {
    let mut by_kind: BTreeMap<&str, Vec<&String>> = BTreeMap::new();
    let mut kind_of: BTreeMap<&str, ManeuverKind> = BTreeMap::new();
    for (id, kind) in kinds {
        by_kind.entry(kind.name()).or_default().push(id);
        kind_of.insert(kind.name(), *kind);
    }
    let mut out = BTreeMap::new();
    for (kind_name, mut ids) in by_kind {
        let kind = kind_of[kind_name];
        if test_kinds.contains(&kind) {
            for id in ids {
                out.insert(id.clone(), SplitRole::Test);
            }
            continue;
        }
        if ids.len() == 1 {
            log::warn!(
                "maneuver kind {kind} has a single instance; assigning it to train \
                 (no validation coverage for this kind)"
            );
            out.insert(ids[0].clone(), SplitRole::Train);
            continue;
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(crate::seeds::derive(seed, kind_name.len() as u64));
        ids.sort();
        ids.shuffle(&mut rng);
        let n_val = ((ids.len() as f64 * val_fraction).round() as usize)
            .min(ids.len() - 1)
            .max(usize::from(val_fraction > 0.0));
        for (i, id) in ids.iter().enumerate() {
            let role = if i < n_val {
                SplitRole::Val
            } else {
                SplitRole::Train
            };
            out.insert((*id).clone(), role);
        }
    }
    out
}

/// Buckets ready patches per split according to the instance assignment.
pub fn split_dataset(
    patches: Vec<Patch>,
    kinds: &BTreeMap<String, ManeuverKind>,
    test_kinds: &HashSet<ManeuverKind>,
    val_fraction: f64,
    seed: u64,
) -> DatasetSplit {
    let manifest = assign_instances(kinds, test_kinds, val_fraction, seed);
    let mut split = DatasetSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        split_manifest: manifest,
    };
    for p in patches {
        match split.split_manifest.get(&p.maneuver_id) {
            Some(SplitRole::Train) => split.train.push(p),
            Some(SplitRole::Val) => split.val.push(p),
            Some(SplitRole::Test) => split.test.push(p),
            None => log::warn!("patch from unknown maneuver instance {}", p.maneuver_id),
        }
    }
    split
}
