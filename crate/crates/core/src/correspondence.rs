//! Cross-frame correspondences.
//!
//! Each source pixel is first associated with the pixel its back-projected point
//! reprojects to under the current motion of its object. The target is then refined
//! by a local correlation search over zero-mean, unit-norm intensity patches, and
//! every pair receives a joint probability built from the depth, segmentation and
//! refinement confidences on both ends.

use std::io::Write;

use nalgebra::Vector2;
use rayon::prelude::*;

use crate::config::TrackerConfig;
use crate::error::{Error, Result};
use crate::liegroup::RigidMotion;
use crate::scene::{bilinear_taps, near_other_label, Frame, FramePair, Grid, ObjectLabel};

/// Patches with squared norm below this (after mean removal) are textureless.
const DEGENERATE_NORM2: f32 = 1e-10;
const CONF_EPS: f64 = 1e-6;

/// Dense per-pixel patch descriptors of one intensity image.
///
/// Besides the descriptors, the map caches dot products between each pixel and its
/// right, lower, lower-right neighbors and between the right and lower neighbors,
/// which makes correlation against bilinearly blended descriptors cheap.
#[derive(Debug, Clone)]
pub struct PatchFeatureMap {
    radius: usize,
    dim: usize,
    width: usize,
    height: usize,
    descriptors: Vec<f32>,
    degenerate: Vec<bool>,
    // [right, down, diag, anti] per pixel
    neighbor_dots: Vec<[f32; 4]>,
}

/// Writes the zero-mean unit-norm patch around `(u, v)` into `out` (length
/// `(2 radius + 1)^2`). Returns false, leaving zeros, for a zero-variance patch.
fn fill_descriptor(gray: &Grid<f32>, u: usize, v: usize, radius: usize, out: &mut [f32]) -> bool {
    let r = radius as isize;
    let mut k = 0;
    for dv in -r..=r {
        for du in -r..=r {
            out[k] = gray.get_clamped(u as isize + du, v as isize + dv);
            k += 1;
        }
    }
    let mean = out.iter().sum::<f32>() / out.len() as f32;
    out.iter_mut().for_each(|x| *x -= mean);
    let n2: f32 = out.iter().map(|x| x * x).sum();
    if n2 < DEGENERATE_NORM2 {
        out.iter_mut().for_each(|x| *x = 0.0);
        return false;
    }
    let inv = 1.0 / n2.sqrt();
    out.iter_mut().for_each(|x| *x *= inv);
    true
}

/// Descriptor of a single pixel, `None` for a zero-variance patch.
pub fn patch_descriptor(gray: &Grid<f32>, u: usize, v: usize, radius: usize) -> Option<Vec<f32>> {
    let side = 2 * radius + 1;
    let mut out = vec![0.0; side * side];
    fill_descriptor(gray, u, v, radius, &mut out).then_some(out)
}

impl PatchFeatureMap {
    pub fn build(gray: &Grid<f32>, radius: usize) -> Self {
        let (width, height) = (gray.width(), gray.height());
        let side = 2 * radius + 1;
        let dim = side * side;

        let mut descriptors = vec![0.0f32; width * height * dim];
        let mut degenerate = vec![false; width * height];
        descriptors
            .par_chunks_mut(width * dim)
            .zip(degenerate.par_chunks_mut(width))
            .enumerate()
            .for_each(|(v, (row, flags))| {
                for u in 0..width {
                    flags[u] = !fill_descriptor(gray, u, v, radius, &mut row[u * dim..(u + 1) * dim]);
                }
            });

        let mut map = Self {
            radius,
            dim,
            width,
            height,
            descriptors,
            degenerate,
            neighbor_dots: Vec::new(),
        };
        let dots: Vec<[f32; 4]> = (0..width * height)
            .into_par_iter()
            .map(|i| {
                let (u, v) = (i % width, i / width);
                let right = (u + 1 < width).then(|| i + 1);
                let down = (v + 1 < height).then(|| i + width);
                let diag = right.and(down).map(|_| i + width + 1);
                [
                    right.map_or(0.0, |j| map.dot(i, j)),
                    down.map_or(0.0, |j| map.dot(i, j)),
                    diag.map_or(0.0, |j| map.dot(i, j)),
                    right.zip(down).map_or(0.0, |(a, b)| map.dot(a, b)),
                ]
            })
            .collect();
        map.neighbor_dots = dots;
        map
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn descriptor(&self, index: usize) -> &[f32] {
        &self.descriptors[index * self.dim..(index + 1) * self.dim]
    }

    pub fn is_degenerate(&self, index: usize) -> bool {
        self.degenerate[index]
    }

    fn dot(&self, a: usize, b: usize) -> f32 {
        dot(self.descriptor(a), self.descriptor(b))
    }

    /// Correlation of `query` with the descriptor interpolated at a continuous pixel,
    /// computed by explicit blending and renormalization. `None` outside the image or
    /// when the blend vanishes.
    pub fn correlation_at(&self, query: &[f32], u: f64, v: f64) -> Option<f64> {
        let taps = bilinear_taps(self.width, self.height, u, v)?;
        let mut blend = vec![0.0f64; self.dim];
        for &(i, w) in &taps {
            for (b, d) in blend.iter_mut().zip(self.descriptor(i)) {
                *b += w * *d as f64;
            }
        }
        let n = blend.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-6 {
            return None;
        }
        Some(
            blend
                .iter()
                .zip(query)
                .map(|(b, q)| b * *q as f64)
                .sum::<f64>()
                / n,
        )
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn build_features(frame: &Frame, config: &TrackerConfig) -> PatchFeatureMap {
    PatchFeatureMap::build(&frame.gray, config.patch_radius)
}

/// Forward correlation of `query` against target positions `center + (dx, dy)` for
/// integer offsets in `[-radius, radius]^2`, row-major by `dy` then `dx`. Positions
/// outside the image (or with a vanishing blend) are `None`.
pub fn forward_window(
    query: &[f32],
    features: &PatchFeatureMap,
    center: &Vector2<f64>,
    radius: usize,
) -> Vec<Option<f64>> {
    let r = radius as isize;
    let side = 2 * radius + 1;
    let (w, h) = (features.width as isize, features.height as isize);
    let mut out = vec![None; side * side];

    // Every candidate shares the fractional part of `center`, so all blends use the
    // same four weights over an integer lattice of descriptors.
    let fu = center.x.floor();
    let fv = center.y.floor();
    let a = center.x - fu;
    let b = center.y - fv;
    let (w00, w10, w01, w11) = ((1.0 - a) * (1.0 - b), a * (1.0 - b), (1.0 - a) * b, a * b);
    let base_u = fu as isize - r;
    let base_v = fv as isize - r;

    // Dot products of the query with the (side + 1)^2 lattice, NaN off-image.
    let lat = side + 1;
    let mut q = vec![f64::NAN; lat * lat];
    for j in 0..lat {
        let v = base_v + j as isize;
        if v < 0 || v >= h {
            continue;
        }
        for i in 0..lat {
            let u = base_u + i as isize;
            if u < 0 || u >= w {
                continue;
            }
            let idx = v as usize * features.width + u as usize;
            q[j * lat + i] = dot(query, features.descriptor(idx)) as f64;
        }
    }

    for dy in 0..side {
        for dx in 0..side {
            let cu = center.x + (dx as isize - r) as f64;
            let cv = center.y + (dy as isize - r) as f64;
            if !(cu >= 0.0 && cv >= 0.0 && cu <= (w - 1) as f64 && cv <= (h - 1) as f64) {
                continue;
            }
            // Lattice cell of this candidate; at the far border the cell is shifted
            // back by one with the weight moved onto its far corner.
            let mut u0 = base_u + dx as isize;
            let mut v0 = base_v + dy as isize;
            let (mut ww00, mut ww10, mut ww01, mut ww11) = (w00, w10, w01, w11);
            let mut li = dx;
            let mut lj = dy;
            if u0 >= w - 1 {
                u0 = w - 2;
                li -= 1;
                ww10 += ww00;
                ww11 += ww01;
                ww00 = 0.0;
                ww01 = 0.0;
            }
            if v0 >= h - 1 {
                v0 = h - 2;
                lj -= 1;
                ww01 += ww00;
                ww11 += ww10;
                ww00 = 0.0;
                ww10 = 0.0;
            }
            let i00 = v0 as usize * features.width + u0 as usize;
            let i10 = i00 + 1;
            let i01 = i00 + features.width;
            let i11 = i01 + 1;
            let num = ww00 * q[lj * lat + li]
                + ww10 * q[lj * lat + li + 1]
                + ww01 * q[(lj + 1) * lat + li]
                + ww11 * q[(lj + 1) * lat + li + 1];
            let n2 = |i: usize| if features.degenerate[i] { 0.0 } else { 1.0 };
            let d00 = features.neighbor_dots[i00];
            let d10 = features.neighbor_dots[i10];
            let d01 = features.neighbor_dots[i01];
            let norm2 = ww00 * ww00 * n2(i00)
                + ww10 * ww10 * n2(i10)
                + ww01 * ww01 * n2(i01)
                + ww11 * ww11 * n2(i11)
                + 2.0
                    * (ww00 * ww10 * d00[0] as f64
                        + ww01 * ww11 * d01[0] as f64
                        + ww00 * ww01 * d00[1] as f64
                        + ww10 * ww11 * d10[1] as f64
                        + ww00 * ww11 * d00[2] as f64
                        + ww10 * ww01 * d00[3] as f64);
            if norm2 < 1e-12 || !num.is_finite() {
                continue;
            }
            out[dy * side + dx] = Some((num / norm2.sqrt()).clamp(-1.0, 1.0));
        }
    }
    out
}

/// Unit-norm descriptor interpolated at a continuous pixel.
pub fn blended_descriptor(features: &PatchFeatureMap, u: f64, v: f64) -> Option<Vec<f32>> {
    let taps = bilinear_taps(features.width, features.height, u, v)?;
    let mut blend = vec![0.0f32; features.dim];
    for &(i, w) in &taps {
        for (b, d) in blend.iter_mut().zip(features.descriptor(i)) {
            *b += w as f32 * d;
        }
    }
    let n = dot(&blend, &blend).sqrt();
    if n < 1e-6 {
        return None;
    }
    blend.iter_mut().for_each(|x| *x /= n);
    Some(blend)
}

/// Scores of the candidate matches `source -> center + (dx, dy)` over the
/// `(2 radius + 1)^2` window, row-major by `dy` then `dx`.
///
/// Each score is the mean of the forward correlation (source descriptor against the
/// target descriptor at the candidate) and the backward correlation (target
/// descriptor at `center` against the source descriptor at `source - (dx, dy)`).
/// Near the true match this score is symmetric in the offset, so the quadratic peak
/// fit has no bias at the fixed point. Candidates off either image are `None`.
pub fn correlation_window(
    features_t: &PatchFeatureMap,
    source_index: usize,
    features_t1: &PatchFeatureMap,
    center: &Vector2<f64>,
    radius: usize,
) -> Vec<Option<f64>> {
    let side = 2 * radius + 1;
    let r = radius as isize;
    let mut scores = forward_window(features_t.descriptor(source_index), features_t1, center, radius);
    let Some(anchor) = blended_descriptor(features_t1, center.x, center.y) else {
        return vec![None; side * side];
    };
    let (su, sv) = (
        (source_index % features_t.width) as isize,
        (source_index / features_t.width) as isize,
    );
    for dy in 0..side {
        for dx in 0..side {
            let k = dy * side + dx;
            let Some(fwd) = scores[k] else { continue };
            let u = su - (dx as isize - r);
            let v = sv - (dy as isize - r);
            if u < 0 || v < 0 || u >= features_t.width as isize || v >= features_t.height as isize {
                scores[k] = None;
                continue;
            }
            let idx = v as usize * features_t.width + u as usize;
            let bwd = dot(&anchor, features_t.descriptor(idx)) as f64;
            scores[k] = Some((0.5 * (fwd + bwd)).clamp(-1.0, 1.0));
        }
    }
    scores
}

/// Per-source-pixel correspondences, stored column-wise in a fixed pixel order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorrespondenceField {
    /// Linear indices (`v * width + u`) of source pixels in frame t.
    pub source_pixels: Vec<usize>,
    /// Source pixel coordinates.
    pub source: Vec<Vector2<f64>>,
    /// Current continuous target location in frame t+1.
    pub target: Vec<Vector2<f64>>,
    /// Last refinement update applied to the target.
    pub residual: Vec<Vector2<f64>>,
    /// `target - source`.
    pub flow: Vec<Vector2<f64>>,
    pub refine_conf: Vec<f64>,
    pub joint_prob: Vec<f64>,
    pub label: Vec<ObjectLabel>,
}

impl CorrespondenceField {
    pub fn len(&self) -> usize {
        self.source_pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_pixels.is_empty()
    }

    pub fn count(&self, label: ObjectLabel) -> usize {
        self.label.iter().filter(|&&l| l == label).count()
    }

    fn push(&mut self, index: usize, source: Vector2<f64>, target: Vector2<f64>, label: ObjectLabel) {
        self.source_pixels.push(index);
        self.source.push(source);
        self.target.push(target);
        self.residual.push(Vector2::zeros());
        self.flow.push(target - source);
        self.refine_conf.push(1.0);
        self.joint_prob.push(1.0);
        self.label.push(label);
    }

    /// Debug dump: `u_t,v_t,u_t1,v_t1,flow_u,flow_v,refine_conf,joint_prob,label`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "u_t,v_t,u_t1,v_t1,flow_u,flow_v,refine_conf,joint_prob,label")?;
        for i in 0..self.len() {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                self.source[i].x,
                self.source[i].y,
                self.target[i].x,
                self.target[i].y,
                self.flow[i].x,
                self.flow[i].y,
                self.refine_conf[i],
                self.joint_prob[i],
                self.label[i]
            )?;
        }
        Ok(())
    }
}

fn motion_for(label: ObjectLabel, patient: &RigidMotion, drill: &RigidMotion) -> RigidMotion {
    match label {
        ObjectLabel::Drill => *drill,
        _ => *patient,
    }
}

/// Associates the source pixels of the given objects and reports which of them have
/// fewer than `min_pixels` usable correspondences. Entries of failed objects are
/// still kept in the field.
pub fn associate_objects(
    pair: &FramePair<'_>,
    motion_patient: &RigidMotion,
    motion_drill: &RigidMotion,
    labels: &[ObjectLabel],
    config: &TrackerConfig,
) -> (CorrespondenceField, Vec<ObjectLabel>) {
    let src = pair.source;
    let k = pair.intrinsics();
    let stride = config.stride.max(1);
    let mut field = CorrespondenceField::default();
    let mut empty = Vec::new();

    for &label in labels {
        let motion = motion_for(label, motion_patient, motion_drill);
        let before = field.len();
        for v in (0..src.height()).step_by(stride) {
            for u in (0..src.width()).step_by(stride) {
                let i = src.seg.index_of(u, v);
                if src.seg.at(i) != label
                    || (src.seg_conf.at(i) as f64) < config.conf_floor
                    || !src.has_valid_depth(i)
                    || (config.boundary_margin > 0
                        && near_other_label(&src.seg, u, v, config.boundary_margin))
                {
                    continue;
                }
                let px = Vector2::new(u as f64, v as f64);
                let Ok(p) = k.backproject(&px, src.depth.at(i) as f64) else {
                    continue;
                };
                let Ok(t) = k.project_with_min(&motion.act(&p), config.z_min) else {
                    continue;
                };
                if !k.contains(&t) {
                    continue;
                }
                field.push(i, px, t, label);
            }
        }
        if field.len() - before < config.min_pixels {
            empty.push(label);
        }
    }
    (field, empty)
}

/// Projective association of both objects under their current motions.
pub fn associate(
    pair: &FramePair<'_>,
    motion_patient: &RigidMotion,
    motion_drill: &RigidMotion,
    config: &TrackerConfig,
) -> Result<CorrespondenceField> {
    if !motion_patient.is_finite() || !motion_drill.is_finite() {
        return Err(Error::Config("non-finite motion".into()));
    }
    let (field, empty) = associate_objects(
        pair,
        motion_patient,
        motion_drill,
        &ObjectLabel::OBJECTS,
        config,
    );
    match empty.first() {
        Some(&label) => Err(Error::EmptyObject(label)),
        None => Ok(field),
    }
}

struct Refined {
    target: Vector2<f64>,
    residual: Vector2<f64>,
    conf: f64,
}

fn refine_one(
    features_t: &PatchFeatureMap,
    source_index: usize,
    target: Vector2<f64>,
    features_t1: &PatchFeatureMap,
    config: &TrackerConfig,
) -> Refined {
    if features_t.is_degenerate(source_index) {
        return Refined {
            target,
            residual: Vector2::zeros(),
            conf: config.flat_conf,
        };
    }
    let radius = config.search_radius;
    let side = 2 * radius + 1;
    let scores = correlation_window(features_t, source_index, features_t1, &target, radius);

    let mut best: Option<(usize, f64)> = None;
    for (k, s) in scores.iter().enumerate() {
        if let Some(s) = *s {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((k, s));
            }
        }
    }
    let Some((kbest, c1)) = best else {
        return Refined {
            target,
            residual: Vector2::zeros(),
            conf: 0.0,
        };
    };
    let (bx, by) = (kbest % side, kbest / side);

    // Runner-up outside the peak's 8-neighborhood.
    let c2 = scores
        .iter()
        .enumerate()
        .filter(|(k, _)| (k % side).abs_diff(bx) > 1 || (k / side).abs_diff(by) > 1)
        .filter_map(|(_, s)| *s)
        .fold(-1.0f64, f64::max);

    let at = |x: usize, y: usize| scores[y * side + x];
    let parabola = |lo: Option<f64>, hi: Option<f64>| match (lo, hi) {
        (Some(lo), Some(hi)) => {
            let denom = lo - 2.0 * c1 + hi;
            if denom < 0.0 {
                (0.5 * (lo - hi) / denom).clamp(-0.5, 0.5)
            } else {
                0.0
            }
        }
        _ => 0.0,
    };
    let off_x = parabola(
        bx.checked_sub(1).and_then(|x| at(x, by)),
        (bx + 1 < side).then(|| at(bx + 1, by)).flatten(),
    );
    let off_y = parabola(
        by.checked_sub(1).and_then(|y| at(bx, y)),
        (by + 1 < side).then(|| at(bx, by + 1)).flatten(),
    );
    let residual = Vector2::new(
        bx as f64 - radius as f64 + off_x,
        by as f64 - radius as f64 + off_y,
    );
    let sharpness = ((c1 - c2) / c1.max(CONF_EPS)).clamp(0.0, 1.0);
    Refined {
        target: target + residual,
        residual,
        conf: sharpness * c1.clamp(0.0, 1.0),
    }
}

/// Local correlation search around each current target, with quadratic sub-pixel
/// interpolation of the peak and a peak-sharpness confidence.
pub fn refine(
    pair: &FramePair<'_>,
    field: &CorrespondenceField,
    features_t: &PatchFeatureMap,
    features_t1: &PatchFeatureMap,
    config: &TrackerConfig,
) -> CorrespondenceField {
    let k = pair.intrinsics();
    let refined: Vec<Refined> = (0..field.len())
        .into_par_iter()
        .map(|n| {
            let i = field.source_pixels[n];
            let r = refine_one(
                features_t,
                i,
                field.target[n],
                features_t1,
                config,
            );
            // The quadratic step can leave the image by a fraction of a pixel.
            if k.contains(&r.target) {
                r
            } else {
                Refined {
                    target: field.target[n],
                    residual: Vector2::zeros(),
                    conf: 0.0,
                }
            }
        })
        .collect();

    let mut out = field.clone();
    for (n, r) in refined.into_iter().enumerate() {
        out.target[n] = r.target;
        out.residual[n] = r.residual;
        out.flow[n] = r.target - out.source[n];
        out.refine_conf[n] = r.conf;
    }
    out
}

/// The five confidence factors of one correspondence: source segmentation, source
/// depth, refinement, target segmentation (probability of the source's label) and
/// target depth.
pub fn confidence_factors(pair: &FramePair<'_>, field: &CorrespondenceField, n: usize) -> [f64; 5] {
    let src = pair.source;
    let tgt = pair.target;
    let i = field.source_pixels[n];
    let t = field.target[n];
    let label = field.label[n];
    [
        src.seg_conf.at(i) as f64,
        src.depth_conf.at(i) as f64,
        field.refine_conf[n],
        tgt.label_probability(t.x, t.y, label).unwrap_or(0.0),
        tgt.depth_conf.sample_bilinear(t.x, t.y).unwrap_or(0.0),
    ]
}

/// Product of independent confidence factors.
pub fn joint_from_factors(factors: &[f64]) -> f64 {
    factors.iter().map(|f| f.clamp(0.0, 1.0)).product()
}

pub fn joint_probability(pair: &FramePair<'_>, field: &CorrespondenceField) -> CorrespondenceField {
    let mut out = field.clone();
    for n in 0..field.len() {
        out.joint_prob[n] = joint_from_factors(&confidence_factors(pair, field, n));
    }
    out
}
