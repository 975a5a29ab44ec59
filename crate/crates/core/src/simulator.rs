//! Ground-truth scene generator: a bumpy hemispherical skull and a capped
//! cylindrical drill ray-cast to intensity, depth and segmentation, with
//! configurable sensor noise.
//!
//! Object geometry is given in the camera frame at the first frame, so the initial
//! poses are the identity and a pose maps object coordinates to camera coordinates.

use std::path::Path;

use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal, StandardNormal};
use rand_xoshiro::Xoshiro256StarStar;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{is_valid_depth, Intrinsics};
use crate::error::{Error, Result};
use crate::liegroup::RigidMotion;
use crate::scene::save_sequence;
use crate::scene::{near_other_label, Frame, Grid, ObjectLabel, ObjectPoses, Sequence};

/// Pixels within this Chebyshev distance of a label change count as boundary.
pub const BOUNDARY_RADIUS: usize = 2;

const MIN_MARCH_STEP_MM: f64 = 0.25;
const ROOT_ITERATIONS: usize = 60;
/// Offsets the noise streams from the motion streams of the same seed.
const NOISE_STREAM: u64 = 0x5EED_0F_D47A;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkullSpec {
    pub center: Vector3<f64>,
    pub radius: f64,
    /// Peak radial displacement of the bumps (mm).
    pub bump_amplitude: f64,
    /// Angular frequency of the bumps on the unit sphere.
    pub bump_frequency: f64,
    /// Cell size of the albedo pattern (mm).
    pub texture_scale: f64,
    /// Peak-to-peak albedo variation.
    pub texture_contrast: f64,
}

impl Default for SkullSpec {
    fn default() -> Self {
        Self {
            center: Vector3::new(0.0, 0.0, 380.0),
            radius: 70.0,
            bump_amplitude: 2.0,
            bump_frequency: 9.0,
            texture_scale: 4.0,
            texture_contrast: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DrillSpec {
    /// Handle end of the axis (mm).
    pub start: Vector3<f64>,
    /// Tip end of the axis (mm).
    pub end: Vector3<f64>,
    pub radius: f64,
    pub texture_scale: f64,
    pub texture_contrast: f64,
}

impl Default for DrillSpec {
    fn default() -> Self {
        Self {
            start: Vector3::new(85.0, -50.0, 245.0),
            end: Vector3::new(35.0, 5.0, 305.0),
            radius: 8.0,
            texture_scale: 3.0,
            texture_contrast: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub intrinsics: Intrinsics,
    pub skull: SkullSpec,
    pub drill: DrillSpec,
    /// Direction from the surface towards the light, camera frame.
    pub light_direction: Vector3<f64>,
    pub ambient: f64,
    pub background_intensity: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            intrinsics: Intrinsics {
                fx: 800.0,
                fy: 800.0,
                cx: 320.0,
                cy: 240.0,
                width: 640,
                height: 480,
            },
            skull: SkullSpec::default(),
            drill: DrillSpec::default(),
            light_direction: Vector3::new(0.2, -0.3, -1.0),
            ambient: 0.5,
            background_intensity: 0.05,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let s = &self.skull;
        let d = &self.drill;
        let checks = [
            (s.radius > 0.0, "skull.radius must be > 0"),
            (s.bump_amplitude >= 0.0, "skull.bump_amplitude must be >= 0"),
            (s.bump_amplitude < s.radius, "skull.bump_amplitude must be below the radius"),
            (s.texture_scale > 0.0, "skull.texture_scale must be > 0"),
            (d.radius > 0.0, "drill.radius must be > 0"),
            ((d.end - d.start).norm() > 0.0, "drill length must be > 0"),
            (d.texture_scale > 0.0, "drill.texture_scale must be > 0"),
            (self.light_direction.norm() > 0.0, "light_direction must be nonzero"),
            ((0.0..=1.0).contains(&self.ambient), "ambient must be in [0, 1]"),
            (
                (0.0..=1.0).contains(&self.background_intensity),
                "background_intensity must be in [0, 1]",
            ),
        ];
        if let Some((_, msg)) = checks.iter().find(|(ok, _)| !ok) {
            return Err(Error::Config((*msg).to_string()));
        }
        let k = &self.intrinsics;
        let visible = |p: &Vector3<f64>| k.project(p).map(|x| k.contains(&x)).unwrap_or(false);
        if !visible(&(s.center - Vector3::z() * s.radius)) {
            return Err(Error::Config("skull is outside the view at frame 0".into()));
        }
        if !visible(&d.start) && !visible(&d.end) {
            return Err(Error::Config("drill is outside the view at frame 0".into()));
        }
        Ok(())
    }
}

/// Per-frame motion magnitudes, drawn uniformly from `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionSampler {
    pub translation_mm: [f64; 2],
    pub rotation_deg: [f64; 2],
}

impl MotionSampler {
    fn validate(&self, what: &str) -> Result<()> {
        for [lo, hi] in [self.translation_mm, self.rotation_deg] {
            if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::Config(format!(
                    "{what}: magnitude ranges must satisfy 0 <= lo <= hi"
                )));
            }
        }
        Ok(())
    }

    fn draw(&self, rng: &mut impl Rng) -> (Vector3<f64>, f64, Vector3<f64>) {
        let uniform = |rng: &mut dyn rand::RngCore, [lo, hi]: [f64; 2]| {
            if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            }
        };
        let axis = unit_vector(rng);
        let angle = uniform(rng, self.rotation_deg).to_radians();
        let direction = unit_vector(rng);
        let shift = uniform(rng, self.translation_mm);
        (axis, angle, direction * shift)
    }
}

fn unit_vector(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n: f64 = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectorySpec {
    pub frames: usize,
    pub seed: u64,
    pub patient: MotionSampler,
    pub drill: MotionSampler,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            frames: 100,
            seed: 2023,
            patient: MotionSampler {
                translation_mm: [0.05, 0.15],
                rotation_deg: [0.015, 0.045],
            },
            drill: MotionSampler {
                translation_mm: [0.55, 1.65],
                rotation_deg: [0.19, 0.57],
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ConfModel {
    /// Confidences computed from the known corruption.
    #[default]
    Oracle,
    /// Confidences estimated from the observed maps only.
    Heuristic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Standard deviation of additive Gaussian depth noise (mm).
    pub depth_sigma: f64,
    /// Fraction of valid depth pixels replaced uniformly within `[0.5 z, 1.5 z]`.
    pub outlier_fraction: f64,
    /// Flip probability for labels within two pixels of a boundary.
    pub seg_boundary_flip: f64,
    pub conf_model: ConfModel,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.depth_sigma >= 0.0 && self.depth_sigma.is_finite(), "depth_sigma must be >= 0"),
            ((0.0..=1.0).contains(&self.outlier_fraction), "outlier_fraction must be in [0, 1]"),
            ((0.0..=1.0).contains(&self.seg_boundary_flip), "seg_boundary_flip must be in [0, 1]"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config((*msg).to_string())),
            None => Ok(()),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.depth_sigma == 0.0 && self.outlier_fraction == 0.0 && self.seg_boundary_flip == 0.0
    }
}

/// Everything needed to generate a dataset; the JSON scenario file layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub scene: SceneSpec,
    pub trajectory: TrajectorySpec,
    pub noise: NoiseSpec,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.trajectory.frames == 0 {
            return Err(Error::Config("trajectory.frames must be >= 1".into()));
        }
        self.trajectory.patient.validate("trajectory.patient")?;
        self.trajectory.drill.validate("trajectory.drill")?;
        self.noise.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Hit {
    t: f64,
    label: ObjectLabel,
    /// Camera-frame unit normal.
    normal: Vector3<f64>,
    /// Object-frame hit point, for the albedo lookup.
    local: Vector3<f64>,
}

/// Radial displacement pattern in `[-1, 1]` over unit directions.
fn bump(direction: &Vector3<f64>, frequency: f64) -> f64 {
    let f = frequency;
    let coarse = (f * direction.x + 0.3).sin() * (f * direction.y + 1.1).sin() * (f * direction.z + 2.0).sin();
    let fine = (2.3 * f * direction.y - 0.7).sin() * (1.9 * f * direction.x + 2.3 * f * direction.z).sin();
    (coarse + 0.5 * fine) / 1.5
}

/// Signed distance-like function of the displaced sphere: negative inside.
fn skull_field(spec: &SkullSpec, p: &Vector3<f64>) -> f64 {
    let r = p - spec.center;
    let n = r.norm();
    if n < 1e-12 {
        return -spec.radius;
    }
    n - spec.radius - spec.bump_amplitude * bump(&(r / n), spec.bump_frequency)
}

/// Only the half facing the camera at frame 0 is present.
fn in_skull_shell(spec: &SkullSpec, p: &Vector3<f64>) -> bool {
    p.z <= spec.center.z
}

/// Root of `f` bracketed by `f(lo) > 0 >= f(hi)`, by the Illinois variant of
/// regula falsi.
fn refine_root(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let (mut f_lo, mut f_hi) = (f(lo), f(hi));
    let mut side = 0i8;
    for _ in 0..ROOT_ITERATIONS {
        if hi - lo < 1e-12 {
            break;
        }
        let mut t = (lo * f_hi - hi * f_lo) / (f_hi - f_lo);
        if !(t > lo && t < hi) {
            t = 0.5 * (lo + hi);
        }
        let ft = f(t);
        if ft == 0.0 {
            return t;
        }
        if ft > 0.0 {
            lo = t;
            f_lo = ft;
            if side == 1 {
                f_hi *= 0.5;
            }
            side = 1;
        } else {
            hi = t;
            f_hi = ft;
            if side == -1 {
                f_lo *= 0.5;
            }
            side = -1;
        }
        if f_lo.abs() < 1e-13 {
            return lo;
        }
    }
    if f_lo.abs() < f_hi.abs() {
        lo
    } else {
        hi
    }
}

/// Upper bound on the gradient norm of `skull_field`, used as the sphere-tracing
/// step divisor.
fn skull_lipschitz(spec: &SkullSpec) -> f64 {
    // |grad_d bump| <= 2.41 f; the tangential gradient scales with 1 / |p - c|.
    1.0 + spec.bump_amplitude * 2.41 * spec.bump_frequency / (spec.radius - spec.bump_amplitude)
}

fn intersect_skull(spec: &SkullSpec, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    let bound = spec.radius + spec.bump_amplitude;
    let oc = origin - spec.center;
    let a = dir.norm_squared();
    let b = oc.dot(dir);
    let c = oc.norm_squared() - bound * bound;
    let disc = b * b - a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let speed = a.sqrt();
    let min_step = MIN_MARCH_STEP_MM / speed;
    // start just outside the bound so the first sample is strictly positive
    let t_in = ((-b - sq) / a - min_step).max(0.0);
    let t_out = (-b + sq) / a;
    let lipschitz = skull_lipschitz(spec);
    let mut prev_t = t_in;
    let mut t = t_in;
    while t < t_out {
        let p = origin + dir * t;
        if !in_skull_shell(spec, &p) {
            if dir.z > 0.0 {
                return None;
            }
            prev_t = t;
            t += min_step;
            continue;
        }
        let g = skull_field(spec, &p);
        if g <= 0.0 {
            if t == prev_t {
                return None;
            }
            let t_hit = refine_root(|t| skull_field(spec, &(origin + dir * t)), prev_t, t);
            return Some((t_hit, skull_normal(spec, &(origin + dir * t_hit))));
        }
        prev_t = t;
        t += (g / (lipschitz * speed)).max(min_step);
    }
    None
}

fn skull_normal(spec: &SkullSpec, p: &Vector3<f64>) -> Vector3<f64> {
    let r = p - spec.center;
    let n = r.norm();
    let d = r / n;
    let grad_d = bump_gradient(&d, spec.bump_frequency);
    let tangential = grad_d - d * d.dot(&grad_d);
    (d - tangential * (spec.bump_amplitude / n)).normalize()
}

/// Gradient of `bump` with respect to its (unnormalized) argument.
fn bump_gradient(direction: &Vector3<f64>, frequency: f64) -> Vector3<f64> {
    let f = frequency;
    let (s1, c1) = (f * direction.x + 0.3).sin_cos();
    let (s2, c2) = (f * direction.y + 1.1).sin_cos();
    let (s3, c3) = (f * direction.z + 2.0).sin_cos();
    let (q1, k1) = (2.3 * f * direction.y - 0.7).sin_cos();
    let (q2, k2) = (1.9 * f * direction.x + 2.3 * f * direction.z).sin_cos();
    let coarse = Vector3::new(c1 * s2 * s3, s1 * c2 * s3, s1 * s2 * c3) * f;
    let fine = Vector3::new(1.9 * q1 * k2, 2.3 * k1 * q2, 2.3 * q1 * k2) * f;
    (coarse + fine * 0.5) / 1.5
}

fn intersect_drill(spec: &DrillSpec, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    let axis_vec = spec.end - spec.start;
    let length = axis_vec.norm();
    let axis = axis_vec / length;
    let o = origin - spec.start;
    let od = o.dot(&axis);
    let dd = dir.dot(&axis);
    let op = o - axis * od;
    let dp = dir - axis * dd;
    let mut best: Option<(f64, Vector3<f64>)> = None;
    let mut offer = |t: f64, n: Vector3<f64>| {
        if t > 0.0 && best.is_none_or(|(b, _)| t < b) {
            best = Some((t, n));
        }
    };
    let a = dp.norm_squared();
    if a > 1e-15 {
        let b = op.dot(&dp);
        let c = op.norm_squared() - spec.radius * spec.radius;
        let disc = b * b - a * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            for t in [(-b - sq) / a, (-b + sq) / a] {
                let s = od + t * dd;
                if (0.0..=length).contains(&s) {
                    let radial = op + dp * t;
                    offer(t, radial / spec.radius);
                }
            }
        }
    }
    if dd.abs() > 1e-15 {
        for (s_cap, n) in [(0.0, -axis), (length, axis)] {
            let t = (s_cap - od) / dd;
            if (op + dp * t).norm_squared() <= spec.radius * spec.radius {
                offer(t, n);
            }
        }
    }
    best
}

fn hash3(i: i64, j: i64, k: i64) -> f64 {
    let mut h = (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (j as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (k as u64).wrapping_mul(0x1656_67B1_9E37_79F9);
    h ^= h >> 31;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 29;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smooth lattice value noise in `[0, 1]`.
fn value_noise(p: &Vector3<f64>) -> f64 {
    let f = p.map(f64::floor);
    let w = (p - f).map(|x| x * x * (3.0 - 2.0 * x));
    let (i, j, k) = (f.x as i64, f.y as i64, f.z as i64);
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let wx = if dx == 1 { w.x } else { 1.0 - w.x };
                let wy = if dy == 1 { w.y } else { 1.0 - w.y };
                let wz = if dz == 1 { w.z } else { 1.0 - w.z };
                acc += wx * wy * wz * hash3(i + dx, j + dy, k + dz);
            }
        }
    }
    acc
}

fn albedo(p: &Vector3<f64>, scale: f64, contrast: f64) -> f64 {
    let v = (2.0 * value_noise(&(p / scale)) + value_noise(&(p * 2.0 / scale + Vector3::repeat(17.3)))) / 3.0;
    0.55 + contrast * 1.5 * (v - 0.5)
}

fn cast(
    scene: &SceneSpec,
    pose_patient: &RigidMotion,
    pose_drill: &RigidMotion,
    inv_patient: &RigidMotion,
    inv_drill: &RigidMotion,
    dir: &Vector3<f64>,
) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    let candidates = [
        (ObjectLabel::Patient, pose_patient, inv_patient),
        (ObjectLabel::Drill, pose_drill, inv_drill),
    ];
    for (label, pose, inv) in candidates {
        let origin = *inv.translation();
        let d = inv.rotation() * dir;
        let hit = match label {
            ObjectLabel::Patient => intersect_skull(&scene.skull, &origin, &d),
            _ => intersect_drill(&scene.drill, &origin, &d),
        };
        if let Some((t, n)) = hit {
            if best.is_none_or(|b| t < b.t) {
                best = Some(Hit {
                    t,
                    label,
                    normal: pose.rotation() * n,
                    local: origin + d * t,
                });
            }
        }
    }
    best
}

fn shade(scene: &SceneSpec, hit: Option<Hit>) -> f64 {
    let Some(hit) = hit else {
        return scene.background_intensity;
    };
    let a = match hit.label {
        ObjectLabel::Drill => albedo(&hit.local, scene.drill.texture_scale, scene.drill.texture_contrast),
        _ => albedo(&hit.local, scene.skull.texture_scale, scene.skull.texture_contrast),
    };
    let light = scene.light_direction.normalize();
    let diffuse = hit.normal.dot(&light).max(0.0);
    (a * (scene.ambient + (1.0 - scene.ambient) * diffuse)).clamp(0.0, 1.0)
}

/// Noise-free frame for the given object poses. Intensity is 2x2 supersampled and
/// quantized to 8 bits; depth and labels come from the pixel-center ray.
pub fn render(scene: &SceneSpec, pose_patient: &RigidMotion, pose_drill: &RigidMotion) -> Frame {
    let k = &scene.intrinsics;
    let (w, h) = (k.width, k.height);
    let inv_patient = pose_patient.inverse();
    let inv_drill = pose_drill.inverse();
    let ray = |u: f64, v: f64| Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
    let rows: Vec<Vec<(f32, f32, ObjectLabel)>> = (0..h)
        .into_par_iter()
        .map(|v| {
            (0..w)
                .map(|u| {
                    let (uf, vf) = (u as f64, v as f64);
                    let center = cast(scene, pose_patient, pose_drill, &inv_patient, &inv_drill, &ray(uf, vf));
                    let mut sum = 0.0;
                    for (du, dv) in [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)] {
                        let hit = cast(
                            scene,
                            pose_patient,
                            pose_drill,
                            &inv_patient,
                            &inv_drill,
                            &ray(uf + du, vf + dv),
                        );
                        sum += shade(scene, hit);
                    }
                    let gray = ((sum / 4.0) * 255.0).round() / 255.0;
                    match center {
                        Some(hit) => (gray as f32, hit.t as f32, hit.label),
                        None => (gray as f32, 0.0, ObjectLabel::Background),
                    }
                })
                .collect()
        })
        .collect();
    let cells: Vec<_> = rows.into_iter().flatten().collect();
    let gray = Grid::from_vec(w, h, cells.iter().map(|c| c.0).collect()).expect("sized");
    let depth = Grid::from_vec(w, h, cells.iter().map(|c| c.1).collect()).expect("sized");
    let seg = Grid::from_vec(w, h, cells.iter().map(|c| c.2).collect()).expect("sized");
    Frame::new(gray, depth, Grid::filled(w, h, 1.0), seg, Grid::filled(w, h, 1.0), *k, 0)
        .expect("rendered maps match the intrinsics")
}

/// Whether a different label occurs within `radius` (Chebyshev) of each pixel.
pub fn boundary_mask(seg: &Grid<ObjectLabel>, radius: usize) -> Grid<bool> {
    Grid::from_fn(seg.width(), seg.height(), |u, v| near_other_label(seg, u, v, radius))
}

fn most_common_other(seg: &Grid<ObjectLabel>, u: usize, v: usize) -> ObjectLabel {
    let own = seg.get(u, v);
    let r = BOUNDARY_RADIUS as isize;
    let mut counts = [0usize; 3];
    for dv in -r..=r {
        for du in -r..=r {
            counts[seg.get_clamped(u as isize + du, v as isize + dv) as usize] += 1;
        }
    }
    counts[own as usize] = 0;
    let best = (0..3).max_by_key(|&i| (counts[i], std::cmp::Reverse(i))).expect("nonempty");
    ObjectLabel::from_u8(best as u8).expect("label index")
}

fn median3x3(depth: &Grid<f32>, u: usize, v: usize) -> Option<f32> {
    let mut vals = [0.0f32; 9];
    let mut n = 0;
    for dv in -1..=1isize {
        for du in -1..=1isize {
            let d = depth.get_clamped(u as isize + du, v as isize + dv);
            if is_valid_depth(d as f64) {
                vals[n] = d;
                n += 1;
            }
        }
    }
    if n == 0 {
        return None;
    }
    let vals = &mut vals[..n];
    vals.sort_by(f32::total_cmp);
    Some(if n % 2 == 1 {
        vals[n / 2]
    } else {
        0.5 * (vals[n / 2 - 1] + vals[n / 2])
    })
}

/// Corrupts a rendered frame and fills in the confidence maps.
pub fn apply_noise(clean: &Frame, noise: &NoiseSpec, rng: &mut impl Rng) -> Frame {
    let mut frame = clean.clone();
    if noise.is_zero() {
        return frame;
    }
    let (w, h) = (clean.width(), clean.height());
    let valid: Vec<usize> = (0..w * h).filter(|&i| clean.has_valid_depth(i)).collect();

    if noise.depth_sigma > 0.0 {
        let normal = Normal::new(0.0, noise.depth_sigma).expect("finite sigma");
        for &i in &valid {
            let z = clean.depth.at(i) as f64 + normal.sample(rng);
            frame.depth.data_mut()[i] = z.max(1e-3) as f32;
        }
    }
    let outliers = (noise.outlier_fraction * valid.len() as f64).floor() as usize;
    if outliers > 0 {
        for k in sample(rng, valid.len(), outliers).into_iter() {
            let i = valid[k];
            let z = clean.depth.at(i) as f64;
            frame.depth.data_mut()[i] = rng.random_range(0.5 * z..=1.5 * z) as f32;
        }
    }
    let mut flipped = vec![false; w * h];
    if noise.seg_boundary_flip > 0.0 {
        let boundary = boundary_mask(&clean.seg, BOUNDARY_RADIUS);
        for i in 0..w * h {
            if boundary.at(i) && rng.random::<f64>() < noise.seg_boundary_flip {
                let (u, v) = clean.seg.coords_of(i);
                frame.seg.data_mut()[i] = most_common_other(&clean.seg, u, v);
                flipped[i] = true;
            }
        }
    }

    let (depth_conf, seg_conf) = match noise.conf_model {
        ConfModel::Oracle => {
            let scale = noise.depth_sigma.max(1e-6);
            let depth_conf = Grid::from_fn(w, h, |u, v| {
                let err = (frame.depth.get(u, v) - clean.depth.get(u, v)).abs() as f64;
                (-(err / scale).powi(2)).exp() as f32
            });
            let seg_conf = Grid::from_fn(w, h, |u, v| if flipped[v * w + u] { 0.5 } else { 1.0 });
            (depth_conf, seg_conf)
        }
        ConfModel::Heuristic => {
            let scale = (3.0 * noise.depth_sigma).max(1.0);
            let depth_conf = Grid::from_fn(w, h, |u, v| {
                let d = frame.depth.get(u, v);
                match median3x3(&frame.depth, u, v) {
                    Some(m) if is_valid_depth(d as f64) => {
                        (-((d - m).abs() as f64 / scale).powi(2)).exp() as f32
                    }
                    _ => 0.0,
                }
            });
            let boundary = boundary_mask(&frame.seg, BOUNDARY_RADIUS);
            let seg_conf = Grid::from_fn(w, h, |u, v| if boundary.get(u, v) { 0.5 } else { 1.0 });
            (depth_conf, seg_conf)
        }
    };
    Frame::new(
        frame.gray,
        frame.depth,
        depth_conf,
        frame.seg,
        seg_conf,
        frame.intrinsics,
        frame.timestamp_index,
    )
    .expect("same dimensions")
}

fn frame_rng(seed: u64, index: usize) -> Xoshiro256StarStar {
    Xoshiro256StarStar::seed_from_u64(seed.wrapping_add(index as u64))
}

/// Ground-truth poses of every frame. Each step rotates an object about its
/// current centroid by a sampled angle, then translates it by a sampled vector.
pub fn sample_trajectory(scenario: &Scenario) -> Vec<ObjectPoses> {
    let traj = &scenario.trajectory;
    let skull_centroid = scenario.scene.skull.center;
    let drill_centroid = 0.5 * (scenario.scene.drill.start + scenario.scene.drill.end);
    let mut patient = RigidMotion::identity();
    let mut drill = RigidMotion::identity();
    let mut poses = Vec::with_capacity(traj.frames);
    for t in 0..traj.frames {
        if t > 0 {
            let mut rng = frame_rng(traj.seed, t);
            for (pose, sampler, centroid) in [
                (&mut patient, &traj.patient, &skull_centroid),
                (&mut drill, &traj.drill, &drill_centroid),
            ] {
                let (axis, angle, shift) = sampler.draw(&mut rng);
                let c = pose.act(centroid);
                let step = RigidMotion::from_translation(shift)
                    .compose(&RigidMotion::rotation_about(&c, &axis, angle));
                *pose = step.compose(pose);
            }
        }
        poses.push(ObjectPoses {
            patient: Some(patient),
            drill: Some(drill),
        });
    }
    poses
}

/// Noise-free rendering of every frame of the scenario's trajectory.
pub fn render_sequence(scenario: &Scenario) -> Result<Sequence> {
    scenario.validate()?;
    let poses = sample_trajectory(scenario);
    let frames = poses
        .iter()
        .enumerate()
        .map(|(t, p)| {
            let mut frame = render(&scenario.scene, &p.patient.expect("set"), &p.drill.expect("set"));
            frame.timestamp_index = t;
            frame
        })
        .collect();
    Ok(Sequence {
        intrinsics: scenario.scene.intrinsics,
        frames,
        poses,
    })
}

/// Applies `noise` to every frame of a clean sequence. Frame `t` draws from its own
/// stream derived from `seed` and `t`, so prefixes of a sequence corrupt identically.
pub fn add_noise(clean: &Sequence, noise: &NoiseSpec, seed: u64) -> Sequence {
    let frames = clean
        .frames
        .iter()
        .enumerate()
        .map(|(t, frame)| apply_noise(frame, noise, &mut frame_rng(seed ^ NOISE_STREAM, t)))
        .collect();
    Sequence {
        intrinsics: clean.intrinsics,
        frames,
        poses: clean.poses.clone(),
    }
}

/// Renders and corrupts the whole sequence in memory.
pub fn simulate(scenario: &Scenario) -> Result<Sequence> {
    let clean = render_sequence(scenario)?;
    Ok(add_noise(&clean, &scenario.noise, scenario.trajectory.seed))
}

/// Simulates the scenario and writes it as a dataset directory.
pub fn generate_sequence(scenario: &Scenario, out_dir: impl AsRef<Path>) -> Result<Sequence> {
    let sequence = simulate(scenario)?;
    save_sequence(out_dir, &sequence)?;
    Ok(sequence)
}
