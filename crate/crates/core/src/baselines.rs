//! Comparison methods: sparse corner matching with a Kabsch fit, and projective
//! point-to-plane ICP with intensity-based pair rejection. Both run per object on
//! the same segmentation and depth inputs as the tracker.

use nalgebra::{Matrix3, Matrix6, Vector2, Vector3, Vector6};

use crate::camera::Intrinsics;
use crate::config::{IcpConfig, KeypointConfig};
use crate::correspondence::patch_descriptor;
use crate::error::{Error, Result};
use crate::liegroup::{RigidMotion, Twist};
use crate::scene::{near_other_label, Frame, FramePair, Grid, ObjectLabel};

/// Relative singular-value threshold below which a point set counts as collinear.
const COLLINEAR_TOLERANCE: f64 = 1e-9;
/// Fewest inlier pairs that still determine six degrees of freedom.
const MIN_ICP_PAIRS: usize = 6;

/// Weighted least-squares rigid motion taking `source` onto `target`.
pub fn kabsch(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    weights: Option<&[f64]>,
) -> Result<RigidMotion> {
    if source.len() != target.len() || weights.is_some_and(|w| w.len() != source.len()) {
        return Err(Error::Config("kabsch: point and weight counts differ".into()));
    }
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let used = (0..source.len()).filter(|&i| w(i) > 0.0).count();
    if used < 3 {
        return Err(Error::TooFewPoints(used));
    }
    let total: f64 = (0..source.len()).map(w).sum();
    let cs = (0..source.len()).map(|i| source[i] * w(i)).sum::<Vector3<f64>>() / total;
    let ct = (0..source.len()).map(|i| target[i] * w(i)).sum::<Vector3<f64>>() / total;

    let mut cross = Matrix3::zeros();
    let mut scatter = Matrix3::zeros();
    for i in 0..source.len() {
        let (a, b) = (source[i] - cs, target[i] - ct);
        cross += a * b.transpose() * w(i);
        scatter += a * a.transpose() * w(i);
    }
    let spread = scatter.symmetric_eigenvalues();
    let (lo, hi) = (spread.min(), spread.max());
    let sorted_mid = spread.sum() - lo - hi;
    if hi <= 0.0 || sorted_mid <= COLLINEAR_TOLERANCE * hi {
        return Err(Error::DegenerateConfiguration);
    }

    let svd = cross.svd(true, true);
    let (u, v_t) = (svd.u.expect("computed"), svd.v_t.expect("computed"));
    let mut correction = Matrix3::identity();
    if (v_t.transpose() * u.transpose()).determinant() < 0.0 {
        correction[(2, 2)] = -1.0;
    }
    let r = v_t.transpose() * correction * u.transpose();
    let rotation = nalgebra::UnitQuaternion::from_matrix(&r);
    let translation = ct - rotation * cs;
    Ok(RigidMotion::from_rotation(rotation, translation))
}

/// Per-object outcome of a baseline on one frame pair.
#[derive(Debug)]
pub struct BaselineEstimate {
    pub patient: Result<RigidMotion>,
    pub drill: Result<RigidMotion>,
}

impl BaselineEstimate {
    pub fn object(&self, label: ObjectLabel) -> &Result<RigidMotion> {
        match label {
            ObjectLabel::Drill => &self.drill,
            _ => &self.patient,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    pub position: Vector2<f64>,
    pub descriptor: Vec<f32>,
    pub label: ObjectLabel,
    pub response: f64,
}

/// Harris corner response `det(M) - k tr(M)^2` over a 5x5 box window of central
/// difference gradients.
pub fn harris_response(gray: &Grid<f32>, k: f64) -> Grid<f64> {
    let (w, h) = (gray.width(), gray.height());
    let at = |u: isize, v: isize| gray.get_clamped(u, v) as f64;
    let gx = Grid::from_fn(w, h, |u, v| {
        let (u, v) = (u as isize, v as isize);
        0.5 * (at(u + 1, v) - at(u - 1, v))
    });
    let gy = Grid::from_fn(w, h, |u, v| {
        let (u, v) = (u as isize, v as isize);
        0.5 * (at(u, v + 1) - at(u, v - 1))
    });
    Grid::from_fn(w, h, |u, v| {
        let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
        for dv in -2..=2isize {
            for du in -2..=2isize {
                let x = gx.get_clamped(u as isize + du, v as isize + dv);
                let y = gy.get_clamped(u as isize + du, v as isize + dv);
                a += x * x;
                b += x * y;
                c += y * y;
            }
        }
        a * c - b * b - k * (a + c) * (a + c)
    })
}

/// Corners on both objects: above a fraction of the frame's strongest response,
/// non-maximum suppressed, away from label boundaries, with valid depth. Each object keeps its `max_keypoints` strongest.
pub fn detect_keypoints(frame: &Frame, config: &KeypointConfig) -> Vec<Keypoint> {
    let response = harris_response(&frame.gray, config.harris_k);
    let threshold = config.harris_quality * response.data().iter().fold(0.0f64, |m, &r| m.max(r));
    let (w, h) = (frame.width(), frame.height());
    let r = config.nms_radius as isize;
    let margin = config.patch_radius.max(3);
    let mut found = Vec::new();
    for v in 0..h {
        for u in 0..w {
            let i = frame.seg.index_of(u, v);
            let score = response.at(i);
            let label = frame.seg.at(i);
            if score <= threshold
                || label == ObjectLabel::Background
                || !frame.has_valid_depth(i)
                || near_other_label(&frame.seg, u, v, margin)
            {
                continue;
            }
            let is_max = (-r..=r).all(|dv| {
                (-r..=r).all(|du| {
                    let (x, y) = (u as isize + du, v as isize + dv);
                    if (du, dv) == (0, 0) || x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                        return true;
                    }
                    let other = response.get(x as usize, y as usize);
                    // ties go to the earlier pixel in raster order
                    other < score || (other == score && (dv, du) > (0, 0))
                })
            });
            if !is_max {
                continue;
            }
            if let Some(descriptor) = patch_descriptor(&frame.gray, u, v, config.patch_radius) {
                found.push(Keypoint {
                    position: Vector2::new(u as f64, v as f64),
                    descriptor,
                    label,
                    response: score,
                });
            }
        }
    }
    found.sort_by(|a, b| b.response.total_cmp(&a.response));
    let mut kept = [0usize; 3];
    found.retain(|kp| {
        kept[kp.label as usize] += 1;
        kept[kp.label as usize] <= config.max_keypoints
    });
    found
}

fn descriptor_distance(a: &Keypoint, b: &Keypoint) -> f64 {
    let dot: f64 = a.descriptor.iter().zip(&b.descriptor).map(|(x, y)| (*x * *y) as f64).sum();
    (2.0 - 2.0 * dot).max(0.0).sqrt()
}

/// Index of the nearest candidate and the distances to the nearest and second
/// nearest; the first candidate wins ties.
fn nearest_two(query: &Keypoint, candidates: &[Keypoint]) -> Option<(usize, f64, f64)> {
    let mut best = (usize::MAX, f64::INFINITY);
    let mut second = f64::INFINITY;
    for (j, c) in candidates.iter().enumerate() {
        let d = descriptor_distance(query, c);
        if d < best.1 {
            second = best.1;
            best = (j, d);
        } else if d < second {
            second = d;
        }
    }
    (best.0 != usize::MAX).then_some((best.0, best.1, second))
}

/// Brute-force nearest neighbours in descriptor space with a ratio test on the
/// Euclidean distances, optionally restricted to mutual nearest neighbours.
/// Returns `(source index, target index)` pairs.
pub fn match_keypoints(
    source: &[Keypoint],
    target: &[Keypoint],
    ratio: f64,
    cross_check: bool,
) -> Vec<(usize, usize)> {
    let mut matches = Vec::new();
    for (i, s) in source.iter().enumerate() {
        let Some((j, best, second)) = nearest_two(s, target) else {
            continue;
        };
        if !(second.is_finite() && best < ratio * second) {
            continue;
        }
        if cross_check && nearest_two(&target[j], source).map(|(back, _, _)| back) != Some(i) {
            continue;
        }
        matches.push((i, j));
    }
    matches
}

fn keypoint_object(
    pair: &FramePair<'_>,
    source: &[Keypoint],
    target: &[Keypoint],
    label: ObjectLabel,
    config: &KeypointConfig,
) -> Result<RigidMotion> {
    let k = pair.intrinsics();
    let src: Vec<Keypoint> = source.iter().filter(|kp| kp.label == label).cloned().collect();
    let tgt: Vec<Keypoint> = target.iter().filter(|kp| kp.label == label).cloned().collect();
    let matches = match_keypoints(&src, &tgt, config.ratio, config.cross_check);
    let mut a = Vec::with_capacity(matches.len());
    let mut b = Vec::with_capacity(matches.len());
    for (i, j) in matches {
        let (ps, pt) = (&src[i].position, &tgt[j].position);
        let ds = pair.source.depth.get(ps.x as usize, ps.y as usize) as f64;
        let dt = pair.target.depth.get(pt.x as usize, pt.y as usize) as f64;
        if let (Ok(x), Ok(y)) = (k.backproject(ps, ds), k.backproject(pt, dt)) {
            a.push(x);
            b.push(y);
        }
    }
    kabsch(&a, &b, None)
}

/// Sparse keypoint baseline. An object fails when fewer than three matches survive.
pub fn keypoint_track(pair: &FramePair<'_>, config: &KeypointConfig) -> BaselineEstimate {
    let (source, target) = rayon::join(
        || detect_keypoints(pair.source, config),
        || detect_keypoints(pair.target, config),
    );
    let (patient, drill) = rayon::join(
        || keypoint_object(pair, &source, &target, ObjectLabel::Patient, config),
        || keypoint_object(pair, &source, &target, ObjectLabel::Drill, config),
    );
    BaselineEstimate { patient, drill }
}

/// Camera-frame points and normals of the target object. Normals come from central
/// differences of backprojected neighbours and face the camera; `None` where any
/// neighbour is missing or belongs to another label.
fn surface_map(frame: &Frame, label: ObjectLabel) -> Vec<Option<(Vector3<f64>, Vector3<f64>)>> {
    let k = &frame.intrinsics;
    let (w, h) = (frame.width(), frame.height());
    let point = |u: usize, v: usize| -> Option<Vector3<f64>> {
        let i = frame.seg.index_of(u, v);
        if frame.seg.at(i) != label || !frame.has_valid_depth(i) {
            return None;
        }
        k.backproject(&Vector2::new(u as f64, v as f64), frame.depth.at(i) as f64).ok()
    };
    let mut out = vec![None; w * h];
    for v in 1..h.saturating_sub(1) {
        for u in 1..w.saturating_sub(1) {
            let (Some(c), Some(l), Some(r), Some(up), Some(dn)) = (
                point(u, v),
                point(u - 1, v),
                point(u + 1, v),
                point(u, v - 1),
                point(u, v + 1),
            ) else {
                continue;
            };
            let n = (r - l).cross(&(dn - up));
            let norm = n.norm();
            if norm < 1e-12 {
                continue;
            }
            let mut n = n / norm;
            if n.dot(&c) > 0.0 {
                n = -n;
            }
            out[v * w + u] = Some((c, n));
        }
    }
    out
}

/// Point-to-plane pairs for the current motion: (source point, target point,
/// target normal).
fn icp_pairs(
    points: &[(Vector3<f64>, f32)],
    motion: &RigidMotion,
    target: &Frame,
    surface: &[Option<(Vector3<f64>, Vector3<f64>)>],
    k: &Intrinsics,
    config: &IcpConfig,
) -> Vec<(Vector3<f64>, Vector3<f64>, Vector3<f64>)> {
    let mut pairs = Vec::new();
    let mut dists = Vec::new();
    for (p, intensity) in points {
        let q = motion.act(p);
        let Ok(px) = k.project(&q) else { continue };
        let (u, v) = (px.x.round(), px.y.round());
        if u < 0.0 || v < 0.0 || u >= k.width as f64 || v >= k.height as f64 {
            continue;
        }
        let i = v as usize * k.width + u as usize;
        let Some((tp, tn)) = surface[i] else { continue };
        if (target.gray.at(i) - intensity).abs() as f64 > config.intensity_threshold {
            continue;
        }
        dists.push((q - tp).norm());
        pairs.push((*p, tp, tn));
    }
    if pairs.is_empty() {
        return pairs;
    }
    let mut sorted = dists.clone();
    sorted.sort_by(f64::total_cmp);
    let limit = config.distance_factor * sorted[sorted.len() / 2];
    pairs
        .into_iter()
        .zip(dists)
        .filter(|(_, d)| *d <= limit)
        .map(|(p, _)| p)
        .collect()
}

fn plane_energy(pairs: &[(Vector3<f64>, Vector3<f64>, Vector3<f64>)], motion: &RigidMotion) -> f64 {
    pairs
        .iter()
        .map(|(p, tp, tn)| tn.dot(&(motion.act(p) - tp)).powi(2))
        .sum()
}

/// Result of ICP on one object.
#[derive(Debug, Clone)]
pub struct IcpSolution {
    pub motion: RigidMotion,
    pub iterations: usize,
    pub converged: bool,
    /// Energy before and after each accepted update, on that iteration's pairs.
    pub energy_trace: Vec<(f64, f64)>,
}

pub fn icp_object(pair: &FramePair<'_>, label: ObjectLabel, config: &IcpConfig) -> Result<IcpSolution> {
    let k = pair.intrinsics();
    let src = pair.source;
    let stride = config.stride.max(1);
    let mut points = Vec::new();
    for v in (0..src.height()).step_by(stride) {
        for u in (0..src.width()).step_by(stride) {
            let i = src.seg.index_of(u, v);
            if src.seg.at(i) != label || !src.has_valid_depth(i) {
                continue;
            }
            if let Ok(p) = k.backproject(&Vector2::new(u as f64, v as f64), src.depth.at(i) as f64) {
                points.push((p, src.gray.at(i)));
            }
        }
    }
    if points.len() < config.min_pixels {
        return Err(Error::EmptyObject(label));
    }
    let surface = surface_map(pair.target, label);
    let mut motion = RigidMotion::identity();
    let mut solution = IcpSolution {
        motion,
        iterations: 0,
        converged: false,
        energy_trace: Vec::new(),
    };
    for it in 0..config.max_iterations {
        solution.iterations = it + 1;
        let pairs = icp_pairs(&points, &motion, pair.target, &surface, k, config);
        if pairs.len() < MIN_ICP_PAIRS {
            return Err(Error::EmptyObject(label));
        }
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for (p, tp, tn) in &pairs {
            let q = motion.act(p);
            let r = tn.dot(&(q - tp));
            let c = q.cross(tn);
            let j = Vector6::new(tn.x, tn.y, tn.z, c.x, c.y, c.z);
            h += j * j.transpose();
            g += j * r;
        }
        // Symmetric surfaces leave directions unconstrained; a small ridge keeps
        // the step finite there.
        let ridge = 1e-6 * h.trace().max(1e-12);
        let Some(step) = (h + Matrix6::identity() * ridge).cholesky().map(|c| c.solve(&(-g))) else {
            return Err(Error::SingularNormalEquations { condition: f64::INFINITY });
        };
        let before = plane_energy(&pairs, &motion);
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..8 {
            let candidate = motion.retract(&Twist::from_vector(&(step * scale)));
            let after = plane_energy(&pairs, &candidate);
            if after <= before {
                accepted = Some((candidate, after));
                break;
            }
            scale *= 0.5;
        }
        let Some((candidate, after)) = accepted else {
            solution.converged = true;
            break;
        };
        motion = candidate;
        solution.energy_trace.push((before, after));
        if (step * scale).norm() < config.convergence {
            solution.converged = true;
            break;
        }
    }
    solution.motion = motion;
    Ok(solution)
}

/// Projective point-to-plane ICP per object.
pub fn icp_track(pair: &FramePair<'_>, config: &IcpConfig) -> BaselineEstimate {
    let (patient, drill) = rayon::join(
        || icp_object(pair, ObjectLabel::Patient, config).map(|s| s.motion),
        || icp_object(pair, ObjectLabel::Drill, config).map(|s| s.motion),
    );
    BaselineEstimate { patient, drill }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud() -> Vec<Vector3<f64>> {
        (0..10)
            .map(|i| {
                let t = i as f64;
                Vector3::new((1.3 * t).sin() * 20.0, (0.7 * t).cos() * 15.0, 300.0 + 5.0 * t)
            })
            .collect()
    }

    #[test]
    fn kabsch_identity_and_known_motion() {
        let a = cloud();
        let m = kabsch(&a, &a, None).unwrap();
        assert!(m.translation().norm() < 1e-9 && m.angle() < 1e-9);

        let truth = RigidMotion::from_axis_angle(&Vector3::new(0.3, -0.5, 0.8), 0.4)
            .compose(&RigidMotion::from_translation(Vector3::new(3.0, -1.0, 2.0)));
        let b: Vec<_> = a.iter().map(|p| truth.act(p)).collect();
        let m = kabsch(&a, &b, None).unwrap();
        assert!((m.to_matrix() - truth.to_matrix()).abs().max() < 1e-9);
    }

    #[test]
    fn kabsch_failure_modes() {
        let a = cloud();
        assert!(matches!(kabsch(&a[..2], &a[..2], None), Err(Error::TooFewPoints(2))));
        let line: Vec<_> = (0..5).map(|i| Vector3::new(i as f64, 2.0 * i as f64, 1.0)).collect();
        assert!(matches!(kabsch(&line, &line, None), Err(Error::DegenerateConfiguration)));
    }

    #[test]
    fn kabsch_never_reflects() {
        let a = cloud();
        let b: Vec<_> = a.iter().map(|p| Vector3::new(-p.x, p.y, p.z)).collect();
        let m = kabsch(&a, &b, None).unwrap();
        assert!((m.rotation_matrix().determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flat_image_has_no_corners() {
        let g = Grid::filled(20, 20, 0.5f32);
        assert!(harris_response(&g, 0.04).data().iter().all(|&r| r == 0.0));
    }

    #[test]
    fn ratio_test_rejects_ambiguous() {
        let kp = |d: [f32; 2]| Keypoint {
            position: Vector2::zeros(),
            descriptor: d.to_vec(),
            label: ObjectLabel::Patient,
            response: 1.0,
        };
        let src = [kp([1.0, 0.0])];
        let clear = [kp([1.0, 0.0]), kp([0.0, 1.0])];
        let twins = [kp([1.0, 0.0]), kp([1.0, 0.0])];
        assert_eq!(match_keypoints(&src, &clear, 0.8, true), vec![(0, 0)]);
        assert!(match_keypoints(&src, &twins, 0.8, false).is_empty());
        assert!(match_keypoints(&src, &clear[..1], 0.8, false).is_empty());
        // the second source point is the target's nearest, so cross-check drops the first
        let two = [kp([0.8, 0.6]), kp([1.0, 0.0])];
        let far = [kp([0.0, 1.0]), kp([1.0, 0.05])];
        assert_eq!(match_keypoints(&two[..1], &far, 0.8, false).len(), 1);
        assert_eq!(match_keypoints(&two, &far, 0.8, true), vec![(1, 1)]);
    }
}
