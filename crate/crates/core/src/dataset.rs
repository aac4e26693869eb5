//! Corpus generation, on-disk dataset format, and split materialization.
//!
//! A dataset directory holds `frames.jsonl` (one JSON object per radar
//! frame, pre-normalization) and `manifest.json` (format version, split
//! assignment per maneuver instance, generator parameters, seeds and
//! feature statistics). Patches are materialized on load so sampling and
//! augmentation seeds can vary per epoch.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patches::{
    center_view_normalize, filter_valid, propose_patches, split_dataset, AugmentParams,
    DatasetSplit, Patch, SplitRole, BOX_NET_POINTS, DEFAULT_PATCH_SIZE, PATCH_POINTS,
};
use crate::seeds;
use crate::sim::{auto_label, generate_maneuver, ManeuverKind, ManeuverSpec, ReflectionModelParams};
use crate::types::{EgoState, OrientedBox2D, PointLabel, RadarFrame, RadarTarget};

pub const DATASET_VERSION: u32 = 1;

/// Patch-pipeline constants for a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchParams {
    /// Patch edge length, meters.
    pub patch_size: f64,
    /// Points per patch fed to classification/segmentation.
    pub points_per_patch: usize,
    /// Points fed to the box regression network.
    pub box_net_points: usize,
    /// Minimum car points for a valid car patch.
    pub min_car_points: usize,
    /// Minimum clutter points for a valid clutter patch.
    pub min_clutter_points: usize,
    pub augment: AugmentParams,
    /// Materialize at most this many anchors per frame (0 keeps all);
    /// controls corpus size without shortening maneuvers.
    pub max_anchors_per_frame: usize,
}

impl Default for PatchParams {
    fn default() -> Self {
        Self {
            patch_size: DEFAULT_PATCH_SIZE,
            points_per_patch: PATCH_POINTS,
            box_net_points: BOX_NET_POINTS,
            min_car_points: 2,
            min_clutter_points: 16,
            augment: AugmentParams::default(),
            max_anchors_per_frame: 8,
        }
    }
}

/// How many instances of one maneuver kind to drive, and for how long.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManeuverPlan {
    pub kind: ManeuverKind,
    pub instances: usize,
    pub duration: f64,
    pub cycle_period: f64,
}

/// Full corpus recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub maneuvers: Vec<ManeuverPlan>,
    /// Kinds held out entirely for testing.
    pub test_kinds: Vec<ManeuverKind>,
    /// Fraction of each trained kind's instances assigned to validation.
    pub val_fraction: f64,
    pub reflection: ReflectionModelParams,
    pub patch: PatchParams,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        let plan = |kind, instances, duration| ManeuverPlan {
            kind,
            instances,
            duration,
            cycle_period: 0.5,
        };
        Self {
            seed: 42,
            maneuvers: vec![
                plan(ManeuverKind::Circle, 4, 18.0),
                plan(ManeuverKind::FigureEight, 4, 18.0),
                plan(ManeuverKind::Follow, 4, 18.0),
                plan(ManeuverKind::ApproachHeadOn, 4, 12.0),
                plan(ManeuverKind::RandomDrive, 4, 18.0),
                plan(ManeuverKind::StaticClutterOnly, 4, 10.0),
                plan(ManeuverKind::CircleAroundEgo, 1, 20.0),
                plan(ManeuverKind::CrossStandingEgo, 1, 9.0),
                plan(ManeuverKind::PassStandingEgo, 1, 11.0),
                plan(ManeuverKind::LeadInFront, 1, 18.0),
                plan(ManeuverKind::FollowOvertake, 1, 16.0),
            ],
            test_kinds: vec![
                ManeuverKind::CircleAroundEgo,
                ManeuverKind::CrossStandingEgo,
                ManeuverKind::PassStandingEgo,
                ManeuverKind::LeadInFront,
                ManeuverKind::FollowOvertake,
            ],
            val_fraction: 0.25,
            reflection: ReflectionModelParams::default(),
            patch: PatchParams::default(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.maneuvers.is_empty() {
            return Err(Error::invalid("corpus needs at least one maneuver plan"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid("val_fraction must lie in [0, 1)"));
        }
        self.reflection.validate()?;
        if self.patch.points_per_patch == 0 || self.patch.box_net_points == 0 {
            return Err(Error::invalid("point budgets must be positive"));
        }
        Ok(())
    }
}

/// Per-dataset standardization constants for the non-spatial features.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub v_r_mean: f64,
    pub v_r_std: f64,
    pub rcs_mean: f64,
    pub rcs_std: f64,
}

impl FeatureStats {
    pub fn from_targets<'a>(targets: impl Iterator<Item = &'a RadarTarget>) -> Self {
        let mut n = 0.0;
        let (mut sv, mut svv, mut sr, mut srr) = (0.0, 0.0, 0.0, 0.0);
        for t in targets {
            n += 1.0;
            sv += t.v_r;
            svv += t.v_r * t.v_r;
            sr += t.rcs;
            srr += t.rcs * t.rcs;
        }
        if n < 1.0 {
            return Self {
                v_r_mean: 0.0,
                v_r_std: 1.0,
                rcs_mean: 0.0,
                rcs_std: 1.0,
            };
        }
        let v_mean = sv / n;
        let r_mean = sr / n;
        Self {
            v_r_mean: v_mean,
            v_r_std: (svv / n - v_mean * v_mean).max(1e-12).sqrt().max(1e-6),
            rcs_mean: r_mean,
            rcs_std: (srr / n - r_mean * r_mean).max(1e-12).sqrt().max(1e-6),
        }
    }

    pub fn standardize_v_r(&self, v: f64) -> f64 {
        (v - self.v_r_mean) / self.v_r_std
    }

    pub fn standardize_rcs(&self, r: f64) -> f64 {
        (r - self.rcs_mean) / self.rcs_std
    }
}

/// One maneuver instance in the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub kind: ManeuverKind,
    pub duration: f64,
    pub cycle_period: f64,
    pub seed: u64,
    pub role: SplitRole,
    pub frames: usize,
}

/// Patch counts recorded at generation time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PatchCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub car: usize,
    pub clutter: usize,
}

impl PatchCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn car_fraction(&self) -> f64 {
        if self.car + self.clutter == 0 {
            0.0
        } else {
            self.car as f64 / (self.car + self.clutter) as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub val_fraction: f64,
    pub test_kinds: Vec<ManeuverKind>,
    pub maneuvers: Vec<ManifestEntry>,
    pub reflection: ReflectionModelParams,
    pub patch: PatchParams,
    pub standardization: FeatureStats,
    pub patch_counts: PatchCounts,
}

impl DatasetManifest {
    pub fn kind_map(&self) -> BTreeMap<String, ManeuverKind> {
        self.maneuvers
            .iter()
            .map(|m| (m.id.clone(), m.kind))
            .collect()
    }

    pub fn role_of(&self, maneuver_id: &str) -> Option<SplitRole> {
        self.maneuvers
            .iter()
            .find(|m| m.id == maneuver_id)
            .map(|m| m.role)
    }
}

/// Generated corpus: labeled frames plus the manifest describing them.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub frames: Vec<RadarFrame>,
    pub manifest: DatasetManifest,
}

impl Corpus {
    pub fn frames_with_role(&self, role: SplitRole) -> Vec<&RadarFrame> {
        let ids: HashSet<&str> = self
            .manifest
            .maneuvers
            .iter()
            .filter(|m| m.role == role)
            .map(|m| m.id.as_str())
            .collect();
        self.frames
            .iter()
            .filter(|f| ids.contains(f.maneuver_id.as_str()))
            .collect()
    }
}

/// Simulates every maneuver instance, auto-labels the frames, assigns
/// instance-level split roles and computes feature statistics over the
/// training split.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;

    struct InstancePlan {
        id: String,
        spec: ManeuverSpec,
    }
    let mut plans = Vec::new();
    for (plan_idx, plan) in config.maneuvers.iter().enumerate() {
        for inst in 0..plan.instances {
            plans.push(InstancePlan {
                id: format!("{}#{inst}", plan.kind),
                spec: ManeuverSpec {
                    kind: plan.kind,
                    duration: plan.duration,
                    cycle_period: plan.cycle_period,
                    seed: seeds::derive2(config.seed, plan_idx as u64, inst as u64),
                },
            });
        }
    }

    let generated: Vec<Result<Vec<RadarFrame>>> = plans
        .par_iter()
        .map(|p| generate_maneuver(&p.spec, &config.reflection))
        .collect();

    let mut frames = Vec::new();
    let mut entries = Vec::new();
    let mut kind_map = BTreeMap::new();
    let mut offset = 0u64;
    for (plan, result) in plans.iter().zip(generated) {
        let mut fs = result?;
        for f in &mut fs {
            f.frame_id += offset;
            f.maneuver_id = plan.id.clone();
            *f = auto_label(f);
        }
        offset += fs.len() as u64;
        kind_map.insert(plan.id.clone(), plan.spec.kind);
        entries.push(ManifestEntry {
            id: plan.id.clone(),
            kind: plan.spec.kind,
            duration: plan.spec.duration,
            cycle_period: plan.spec.cycle_period,
            seed: plan.spec.seed,
            role: SplitRole::Train, // assigned below
            frames: fs.len(),
        });
        frames.extend(fs);
    }

    let test_kinds: HashSet<ManeuverKind> = config.test_kinds.iter().copied().collect();
    let assignment =
        crate::patches::assign_instances(&kind_map, &test_kinds, config.val_fraction, config.seed);
    for e in &mut entries {
        e.role = assignment[&e.id];
    }

    let mut manifest = DatasetManifest {
        version: DATASET_VERSION,
        seed: config.seed,
        val_fraction: config.val_fraction,
        test_kinds: config.test_kinds.clone(),
        maneuvers: entries,
        reflection: config.reflection.clone(),
        patch: config.patch.clone(),
        standardization: FeatureStats {
            v_r_mean: 0.0,
            v_r_std: 1.0,
            rcs_mean: 0.0,
            rcs_std: 1.0,
        },
        patch_counts: PatchCounts::default(),
    };

    let corpus_tmp = Corpus {
        frames,
        manifest: manifest.clone(),
    };
    manifest.standardization = FeatureStats::from_targets(
        corpus_tmp
            .frames_with_role(SplitRole::Train)
            .iter()
            .flat_map(|f| f.targets.iter()),
    );

    let mut corpus = Corpus {
        frames: corpus_tmp.frames,
        manifest,
    };
    let split = materialize_split(&corpus)?;
    let all = split
        .train
        .iter()
        .chain(split.val.iter())
        .chain(split.test.iter());
    let mut counts = PatchCounts {
        train: split.train.len(),
        val: split.val.len(),
        test: split.test.len(),
        ..PatchCounts::default()
    };
    for p in all {
        if p.is_car() {
            counts.car += 1;
        } else {
            counts.clutter += 1;
        }
    }
    corpus.manifest.patch_counts = counts;
    Ok(corpus)
}

/// Proposes, normalizes and filters patches for every frame and buckets
/// them by the manifest's instance roles. Anchor subsampling (if
/// configured) is seeded by the frame id and applied before filtering.
pub fn materialize_split(corpus: &Corpus) -> Result<DatasetSplit> {
    let params = &corpus.manifest.patch;
    let per_frame: Vec<Vec<Patch>> = corpus
        .frames
        .par_iter()
        .map(|frame| -> Result<Vec<Patch>> {
            let mut proposed = propose_patches(frame, params.patch_size);
            if params.max_anchors_per_frame > 0 && proposed.len() > params.max_anchors_per_frame
            {
                let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive2(
                    corpus.manifest.seed,
                    frame.frame_id,
                    0xa5c0,
                ));
                proposed.shuffle(&mut rng);
                proposed.truncate(params.max_anchors_per_frame);
            }
            let normalized = proposed
                .iter()
                .map(center_view_normalize)
                .collect::<Result<Vec<_>>>()?;
            Ok(filter_valid(
                normalized,
                params.min_car_points,
                params.min_clutter_points,
            ))
        })
        .collect::<Result<_>>()?;

    let patches: Vec<Patch> = per_frame.into_iter().flatten().collect();
    let kind_map = corpus.manifest.kind_map();
    let test_kinds: HashSet<ManeuverKind> =
        corpus.manifest.test_kinds.iter().copied().collect();
    let mut split = split_dataset(
        patches,
        &kind_map,
        &test_kinds,
        corpus.manifest.val_fraction,
        corpus.manifest.seed,
    );
    // The roles were fixed at generation time; re-assigning must agree.
    for (id, role) in &split.split_manifest {
        if let Some(expected) = corpus.manifest.role_of(id) {
            debug_assert_eq!(*role, expected, "split drift for {id}");
        }
    }
    split.split_manifest = corpus
        .manifest
        .maneuvers
        .iter()
        .map(|m| (m.id.clone(), m.role))
        .collect();
    Ok(split)
}

// ---- on-disk format ---------------------------------------------------

#[derive(Serialize, Deserialize)]
struct EgoRecord {
    vx: f64,
    yaw_rate: f64,
    sensor_offset: [f64; 2],
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    frame_id: u64,
    maneuver_id: String,
    ego: EgoRecord,
    targets: Vec<[f64; 4]>,
    gt_box: Option<[f64; 5]>,
    point_labels: Option<Vec<u8>>,
}

impl FrameRecord {
    fn from_frame(f: &RadarFrame) -> Self {
        Self {
            frame_id: f.frame_id,
            maneuver_id: f.maneuver_id.clone(),
            ego: EgoRecord {
                vx: f.ego.vx,
                yaw_rate: f.ego.yaw_rate,
                sensor_offset: f.ego.sensor_offset,
            },
            targets: f.targets.iter().map(|t| [t.x, t.y, t.v_r, t.rcs]).collect(),
            gt_box: f
                .gt_box
                .map(|b| [b.xc, b.yc, b.theta, b.length, b.width]),
            point_labels: f.point_labels.as_ref().map(|ls| {
                ls.iter()
                    .map(|l| if l.is_car() { 1u8 } else { 0u8 })
                    .collect()
            }),
        }
    }

    fn into_frame(self) -> Result<RadarFrame> {
        let targets = self
            .targets
            .iter()
            .map(|t| RadarTarget::new(t[0], t[1], t[2], t[3]))
            .collect::<Result<Vec<_>>>()?;
        let gt_box = match self.gt_box {
            Some(b) => Some(OrientedBox2D::new(b[0], b[1], b[2], b[3], b[4])?),
            None => None,
        };
        let point_labels = self.point_labels.map(|ls| {
            ls.iter()
                .map(|&v| if v == 1 { PointLabel::Car } else { PointLabel::Clutter })
                .collect()
        });
        let frame = RadarFrame {
            frame_id: self.frame_id,
            maneuver_id: self.maneuver_id,
            targets,
            ego: EgoState {
                vx: self.ego.vx,
                yaw_rate: self.ego.yaw_rate,
                sensor_offset: self.ego.sensor_offset,
            },
            gt_box,
            point_labels,
        };
        frame.validate()?;
        Ok(frame)
    }
}

/// Writes `frames.jsonl` and `manifest.json` into `dir`.
pub fn write_dataset(dir: &Path, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest_json = serde_json::to_string_pretty(&corpus.manifest)?;
    fs::write(dir.join("manifest.json"), manifest_json)?;

    let file = fs::File::create(dir.join("frames.jsonl"))?;
    let mut w = BufWriter::new(file);
    for frame in &corpus.frames {
        let record = FrameRecord::from_frame(frame);
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset directory back; fails loudly on version mismatch or
/// any malformed record.
pub fn read_dataset(dir: &Path) -> Result<Corpus> {
    let manifest_path = dir.join("manifest.json");
    let manifest_text = fs::read_to_string(&manifest_path)?;
    let version_probe: serde_json::Value = serde_json::from_str(&manifest_text)?;
    let found = version_probe
        .get("version")
        .and_then(|v| v.as_u64())
        .unwrap_or(0) as u32;
    if found != DATASET_VERSION {
        return Err(Error::UnsupportedVersion {
            found,
            expected: DATASET_VERSION,
        });
    }
    let manifest: DatasetManifest =
        serde_json::from_str(&manifest_text).map_err(|e| Error::Parse {
            path: manifest_path.display().to_string(),
            record: 0,
            msg: e.to_string(),
        })?;

    let frames_path = dir.join("frames.jsonl");
    let reader = BufReader::new(fs::File::open(&frames_path)?);
    let mut frames = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: FrameRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: frames_path.display().to_string(),
            record: i,
            msg: e.to_string(),
        })?;
        frames.push(record.into_frame().map_err(|e| Error::Parse {
            path: frames_path.display().to_string(),
            record: i,
            msg: e.to_string(),
        })?);
    }
    Ok(Corpus { frames, manifest })
}
