//! Oriented-box geometry: corners, exact polygon IoU, corner distance and
//! the heading/size bin encoding used by the box regression head.

use std::cmp::Ordering;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{normalize_angle, rotate, OrientedBox2D};

/// Default number of heading bins over `(-pi, pi]` (30 degree bins).
pub const DEFAULT_NUM_HEADING_BINS: usize = 12;

/// Intersection areas below this are treated as zero to suppress clipping
/// noise from edge-touching boxes.
pub const AREA_EPS: f64 = 1e-12;

/// Network-facing box encoding: center residual from a reference origin,
/// heading bin plus in-bin residual, size template plus residual.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxTargetEncoding {
    pub center_delta: [f64; 2],
    pub heading_bin: usize,
    /// Radians; magnitude bounded by half the bin width.
    pub heading_residual: f64,
    pub size_template: usize,
    /// (length, width) residual in meters relative to the template.
    pub size_residual: [f64; 2],
}

/// Predefined box size templates, `length >= width` each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeTemplateTable {
    pub templates: Vec<[f64; 2]>,
}

impl Default for SizeTemplateTable {
    fn default() -> Self {
        // Single template: mid-size station wagon footprint.
        Self {
            templates: vec![[4.6, 1.8]],
        }
    }
}

impl SizeTemplateTable {
    pub fn new(templates: Vec<[f64; 2]>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::invalid("size template table must not be empty"));
        }
        for t in &templates {
            if !(t[0] > 0.0 && t[1] > 0.0 && t[0] >= t[1]) {
                return Err(Error::invalid(format!(
                    "size template must be positive with length >= width, got {t:?}"
                )));
            }
        }
        Ok(Self { templates })
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }
}

/// Center of heading bin `k` out of `num_bins` uniform bins over `(-pi, pi]`.
pub fn heading_bin_center(k: usize, num_bins: usize) -> f64 {
    let width = 2.0 * PI / num_bins as f64;
    -PI + (k as f64 + 0.5) * width
}

/// Corners of the box, counter-clockwise starting at the front-left
/// (heading is +x of the box frame, left is +y).
pub fn box_corners(b: &OrientedBox2D) -> [[f64; 2]; 4] {
    let hl = b.length / 2.0;
    let hw = b.width / 2.0;
    let offsets = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
    let mut out = [[0.0; 2]; 4];
    for (o, corner) in offsets.iter().zip(out.iter_mut()) {
        let r = rotate(*o, b.theta);
        *corner = [b.xc + r[0], b.yc + r[1]];
    }
    out
}

/// Signed area of a polygon (positive for counter-clockwise orientation).
fn shoelace(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    acc / 2.0
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn segment_intersection(p0: [f64; 2], p1: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let d1 = [p1[0] - p0[0], p1[1] - p0[1]];
    let d2 = [b[0] - a[0], b[1] - a[1]];
    let denom = d1[0] * d2[1] - d1[1] * d2[0];
    // Caller only asks for intersections of edges that straddle the clip
    // line, so denom is bounded away from zero there.
    let t = ((a[0] - p0[0]) * d2[1] - (a[1] - p0[1]) * d2[0]) / denom;
    [p0[0] + t * d1[0], p0[1] + t * d1[1]]
}

/// Sutherland-Hodgman clip of a convex `subject` polygon against a convex
/// counter-clockwise `clip` polygon.
fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(segment_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(segment_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

fn box_order_key(b: &OrientedBox2D) -> [f64; 5] {
    [b.xc, b.yc, b.theta, b.length, b.width]
}

fn cmp_boxes(a: &OrientedBox2D, b: &OrientedBox2D) -> Ordering {
    box_order_key(a)
        .iter()
        .zip(box_order_key(b).iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| *o != Ordering::Equal)
        .unwrap_or(Ordering::Equal)
}

/// Exact intersection-over-union of two oriented boxes (footprint only,
/// heading-agnostic). Zero for disjoint or edge-touching boxes.
///
/// The operands are ordered canonically first so the result is bitwise
/// symmetric in its arguments.
pub fn iou(a: &OrientedBox2D, b: &OrientedBox2D) -> f64 {
    let (p, q) = if cmp_boxes(a, b) != Ordering::Greater {
        (a, b)
    } else {
        (b, a)
    };
    let inter = clip_convex(&box_corners(p), &box_corners(q));
    let inter_area = shoelace(&inter).abs();
    if inter_area < AREA_EPS {
        return 0.0;
    }
    let union = p.area() + q.area() - inter_area;
    inter_area / union
}

/// Summed Euclidean distance between corresponding corners, minimized over
/// a pi heading flip of the ground truth (a rectangle is invariant under
/// it, so the flip must not be penalized).
pub fn corner_distance(pred: &OrientedBox2D, gt: &OrientedBox2D) -> f64 {
    let pc = box_corners(pred);
    let gc = box_corners(gt);
    let flipped = OrientedBox2D {
        theta: normalize_angle(gt.theta + PI).expect("finite angle"),
        ..*gt
    };
    let gf = box_corners(&flipped);
    let sum = |other: &[[f64; 2]; 4]| -> f64 {
        pc.iter()
            .zip(other.iter())
            .map(|(p, g)| (p[0] - g[0]).hypot(p[1] - g[1]))
            .sum()
    };
    sum(&gc).min(sum(&gf))
}

/// Encodes a box relative to `origin` into bin/residual form.
pub fn encode_box(
    b: &OrientedBox2D,
    origin: [f64; 2],
    templates: &SizeTemplateTable,
    num_heading_bins: usize,
) -> Result<BoxTargetEncoding> {
    if templates.is_empty() {
        return Err(Error::invalid("empty size template table"));
    }
    if num_heading_bins == 0 {
        return Err(Error::invalid("need at least one heading bin"));
    }

    let mut heading_bin = 0;
    let mut heading_residual = f64::INFINITY;
    for k in 0..num_heading_bins {
        let diff = normalize_angle(b.theta - heading_bin_center(k, num_heading_bins))?;
        if diff.abs() < heading_residual.abs() {
            heading_bin = k;
            heading_residual = diff;
        }
    }

    let mut size_template = 0;
    let mut best = f64::INFINITY;
    for (i, t) in templates.templates.iter().enumerate() {
        let cost = (b.length - t[0]).abs() + (b.width - t[1]).abs();
        if cost < best {
            best = cost;
            size_template = i;
        }
    }
    let t = templates.templates[size_template];

    Ok(BoxTargetEncoding {
        center_delta: [b.xc - origin[0], b.yc - origin[1]],
        heading_bin,
        heading_residual,
        size_template,
        size_residual: [b.length - t[0], b.width - t[1]],
    })
}

/// Exact inverse of [`encode_box`] on its image.
pub fn decode_box(
    e: &BoxTargetEncoding,
    origin: [f64; 2],
    templates: &SizeTemplateTable,
    num_heading_bins: usize,
) -> Result<OrientedBox2D> {
    if e.heading_bin >= num_heading_bins {
        return Err(Error::invalid(format!(
            "heading bin {} out of range (num bins {num_heading_bins})",
            e.heading_bin
        )));
    }
    let t = templates
        .templates
        .get(e.size_template)
        .ok_or_else(|| {
            Error::invalid(format!(
                "size template {} out of range (table has {})",
                e.size_template,
                templates.len()
            ))
        })?;
    let length = t[0] + e.size_residual[0];
    let width = t[1] + e.size_residual[1];
    if length <= 0.0 || width <= 0.0 {
        return Err(Error::invalid("decoded box has non-positive dimensions"));
    }
    Ok(OrientedBox2D {
        xc: origin[0] + e.center_delta[0],
        yc: origin[1] + e.center_delta[1],
        theta: normalize_angle(
            heading_bin_center(e.heading_bin, num_heading_bins) + e.heading_residual,
        )?,
        length,
        width,
    })
}

/// Max corner-to-corner deviation between two boxes, allowing a pi flip.
pub fn max_corner_error(a: &OrientedBox2D, b: &OrientedBox2D) -> f64 {
    let ca = box_corners(a);
    let cb = box_corners(b);
    let flipped = OrientedBox2D {
        theta: normalize_angle(b.theta + PI).expect("finite angle"),
        ..*b
    };
    let cf = box_corners(&flipped);
    let max_for = |other: &[[f64; 2]; 4]| -> f64 {
        ca.iter()
            .zip(other.iter())
            .map(|(p, q)| (p[0] - q[0]).hypot(p[1] - q[1]))
            .fold(0.0, f64::max)
    };
    max_for(&cb).min(max_for(&cf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_square_at(x: f64) -> OrientedBox2D {
        OrientedBox2D::new(x, 0.0, 0.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn corners_axis_aligned() {
        let b = OrientedBox2D::new(0.0, 0.0, 0.0, 4.0, 2.0).unwrap();
        let c = box_corners(&b);
        assert_eq!(c, [[2.0, 1.0], [-2.0, 1.0], [-2.0, -1.0], [2.0, -1.0]]);
    }

    #[test]
    fn corners_translation() {
        let b = OrientedBox2D::new(1.0, 1.0, 0.0, 4.0, 2.0).unwrap();
        let c = box_corners(&b);
        assert_eq!(c, [[3.0, 2.0], [-1.0, 2.0], [-1.0, 0.0], [3.0, 0.0]]);
    }

    #[test]
    fn corners_quarter_turn() {
        let b = OrientedBox2D::new(0.0, 0.0, PI / 2.0, 4.0, 2.0).unwrap();
        let c = box_corners(&b);
        let expect = [[-1.0, 2.0], [-1.0, -2.0], [1.0, -2.0], [1.0, 2.0]];
        for (got, want) in c.iter().zip(expect.iter()) {
            assert_relative_eq!(got[0], want[0], epsilon = 1e-12);
            assert_relative_eq!(got[1], want[1], epsilon = 1e-12);
        }
    }

    #[test]
    fn iou_identical_is_one() {
        let b = OrientedBox2D::new(1.0, 2.0, 0.7, 4.6, 1.8).unwrap();
        assert_relative_eq!(iou(&b, &b), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn iou_half_shifted_unit_squares() {
        let a = unit_square_at(0.0);
        let b = unit_square_at(0.5);
        assert_relative_eq!(iou(&a, &b), 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn iou_disjoint_and_touching() {
        let a = unit_square_at(0.0);
        assert_eq!(iou(&a, &unit_square_at(5.0)), 0.0);
        // Edge contact: zero-area intersection.
        assert_eq!(iou(&a, &unit_square_at(1.0)), 0.0);
    }

    fn random_box(rng: &mut impl Rng, spread: f64) -> OrientedBox2D {
        let l = rng.gen_range(1.0..6.0);
        let w = rng.gen_range(0.5..l);
        OrientedBox2D::new(
            rng.gen_range(-spread..spread),
            rng.gen_range(-spread..spread),
            rng.gen_range(-PI..PI),
            l,
            w,
        )
        .unwrap()
    }

    #[test]
    fn iou_symmetric_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let a = random_box(&mut rng, 3.0);
            let b = random_box(&mut rng, 3.0);
            assert_eq!(iou(&a, &b), iou(&b, &a));
        }
    }

    #[test]
    fn iou_rigid_motion_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let a = random_box(&mut rng, 2.0);
            let b = random_box(&mut rng, 2.0);
            let phi: f64 = rng.gen_range(-PI..PI);
            let t = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
            let mv = |bx: &OrientedBox2D| {
                let c = rotate([bx.xc, bx.yc], phi);
                OrientedBox2D {
                    xc: c[0] + t[0],
                    yc: c[1] + t[1],
                    theta: normalize_angle(bx.theta + phi).unwrap(),
                    ..*bx
                }
            };
            let before = iou(&a, &b);
            let after = iou(&mv(&a), &mv(&b));
            assert!((before - after).abs() < 1e-9, "{before} vs {after}");
        }
    }

    /// Monte-Carlo IoU over the union's bounding box; the heavyweight
    /// version with 1e6 samples runs in the acceptance suite.
    pub(crate) fn monte_carlo_iou(
        a: &OrientedBox2D,
        b: &OrientedBox2D,
        samples: usize,
        seed: u64,
    ) -> f64 {
        let inside = |bx: &OrientedBox2D, p: [f64; 2]| {
            let d = rotate([p[0] - bx.xc, p[1] - bx.yc], -bx.theta);
            d[0].abs() <= bx.length / 2.0 && d[1].abs() <= bx.width / 2.0
        };
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for c in box_corners(a).iter().chain(box_corners(b).iter()) {
            for k in 0..2 {
                lo[k] = lo[k].min(c[k]);
                hi[k] = hi[k].max(c[k]);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut inter, mut union) = (0u64, 0u64);
        for _ in 0..samples {
            let p = [rng.gen_range(lo[0]..hi[0]), rng.gen_range(lo[1]..hi[1])];
            let ia = inside(a, p);
            let ib = inside(b, p);
            if ia && ib {
                inter += 1;
            }
            if ia || ib {
                union += 1;
            }
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    #[test]
    fn iou_matches_monte_carlo_smoke() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for i in 0..20 {
            let a = random_box(&mut rng, 2.0);
            let b = random_box(&mut rng, 2.0);
            let exact = iou(&a, &b);
            let mc = monte_carlo_iou(&a, &b, 200_000, 1000 + i);
            assert!(
                (exact - mc).abs() < 5e-3,
                "pair {i}: exact {exact} vs mc {mc}"
            );
        }
    }

    #[test]
    fn corner_distance_examples() {
        let gt = OrientedBox2D::new(1.0, 2.0, 0.4, 4.6, 1.8).unwrap();
        assert_eq!(corner_distance(&gt, &gt), 0.0);

        let flipped = OrientedBox2D {
            theta: normalize_angle(gt.theta + PI).unwrap(),
            ..gt
        };
        assert!(corner_distance(&flipped, &gt) < 1e-9);

        let shifted = OrientedBox2D {
            xc: gt.xc + 0.1,
            ..gt
        };
        assert_relative_eq!(corner_distance(&shifted, &gt), 0.4, epsilon = 1e-12);
    }

    #[test]
    fn encode_trivial_cases() {
        let templates = SizeTemplateTable::default();
        let nh = DEFAULT_NUM_HEADING_BINS;
        let b = OrientedBox2D::new(0.0, 0.0, heading_bin_center(0, nh), 4.6, 1.8).unwrap();
        let e = encode_box(&b, [0.0, 0.0], &templates, nh).unwrap();
        assert_eq!(e.heading_bin, 0);
        assert_relative_eq!(e.heading_residual, 0.0, epsilon = 1e-12);
        assert_eq!(e.size_template, 0);
        assert_eq!(e.center_delta, [0.0, 0.0]);
        assert_eq!(e.size_residual, [0.0, 0.0]);

        let b = OrientedBox2D::new(1.0, -1.0, heading_bin_center(3, nh) + 0.1, 4.6, 1.8).unwrap();
        let e = encode_box(&b, [0.0, 0.0], &templates, nh).unwrap();
        assert_eq!(e.heading_bin, 3);
        assert_relative_eq!(e.heading_residual, 0.1, epsilon = 1e-12);
        assert!(e.heading_residual.abs() <= PI / nh as f64 + 1e-9);
    }

    #[test]
    fn decode_trivial_cases() {
        let templates = SizeTemplateTable::default();
        let nh = DEFAULT_NUM_HEADING_BINS;
        let zero = BoxTargetEncoding {
            center_delta: [0.0, 0.0],
            heading_bin: 0,
            heading_residual: 0.0,
            size_template: 0,
            size_residual: [0.0, 0.0],
        };
        let b = decode_box(&zero, [0.0, 0.0], &templates, nh).unwrap();
        assert_eq!((b.xc, b.yc), (0.0, 0.0));
        assert_relative_eq!(b.theta, heading_bin_center(0, nh));
        assert_eq!((b.length, b.width), (4.6, 1.8));

        for k in 0..nh {
            let e = BoxTargetEncoding {
                heading_bin: k,
                ..zero
            };
            let b = decode_box(&e, [0.0, 0.0], &templates, nh).unwrap();
            assert_relative_eq!(b.theta, heading_bin_center(k, nh), epsilon = 1e-12);
        }

        let bad = BoxTargetEncoding {
            heading_bin: nh,
            ..zero
        };
        assert!(decode_box(&bad, [0.0, 0.0], &templates, nh).is_err());
        let bad = BoxTargetEncoding {
            size_template: 1,
            ..zero
        };
        assert!(decode_box(&bad, [0.0, 0.0], &templates, nh).is_err());
    }

    #[test]
    fn encode_requires_templates() {
        let b = OrientedBox2D::new(0.0, 0.0, 0.0, 4.0, 2.0).unwrap();
        let empty = SizeTemplateTable { templates: vec![] };
        assert!(encode_box(&b, [0.0, 0.0], &empty, 12).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(
            xc in -50.0..50.0f64,
            yc in -50.0..50.0f64,
            theta in -PI..PI,
            length in 1.0..8.0f64,
            frac in 0.2..1.0f64,
            ox in -5.0..5.0f64,
            oy in -5.0..5.0f64,
        ) {
            let b = OrientedBox2D::new(xc, yc, theta, length, length * frac).unwrap();
            let templates = SizeTemplateTable::default();
            let e = encode_box(&b, [ox, oy], &templates, DEFAULT_NUM_HEADING_BINS).unwrap();
            let d = decode_box(&e, [ox, oy], &templates, DEFAULT_NUM_HEADING_BINS).unwrap();
            prop_assert!(max_corner_error(&b, &d) < 1e-6);
        }

        #[test]
        fn canonicalize_preserves_corner_set(
            xc in -10.0..10.0f64,
            yc in -10.0..10.0f64,
            theta in -PI..PI,
            length in 0.5..6.0f64,
            width in 0.5..6.0f64,
        ) {
            let b = OrientedBox2D::new(xc, yc, theta, length, width).unwrap();
            let c = crate::types::canonicalize_box(&b).unwrap();
            let mut orig: Vec<[f64;2]> = box_corners(&b).to_vec();
            let mut canon: Vec<[f64;2]> = box_corners(&c).to_vec();
            let key = |p: &[f64;2]| (p[0] * 1e9).round() as i64 * 1_000_003
                + (p[1] * 1e9).round() as i64;
            orig.sort_by_key(key);
            canon.sort_by_key(key);
            for (o, n) in orig.iter().zip(canon.iter()) {
                prop_assert!((o[0] - n[0]).abs() < 1e-9 && (o[1] - n[1]).abs() < 1e-9);
            }
        }
    }
}
