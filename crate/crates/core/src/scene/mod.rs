//! Per-frame inputs: intensity, depth, segmentation and their confidences.

mod io;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::camera::{is_valid_depth, Intrinsics};
use crate::error::{Error, Result};
use crate::liegroup::RigidMotion;

pub use io::{load_sequence, save_sequence, Manifest, ManifestFrame, FORMAT_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum ObjectLabel {
    Background = 0,
    Patient = 1,
    Drill = 2,
}

impl ObjectLabel {
    /// The two tracked objects, in output order.
    pub const OBJECTS: [ObjectLabel; 2] = [ObjectLabel::Patient, ObjectLabel::Drill];

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::Background),
            1 => Some(Self::Patient),
            2 => Some(Self::Drill),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Background => "background",
            Self::Patient => "patient",
            Self::Drill => "drill",
        }
    }
}

impl fmt::Display for ObjectLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Row-major `width x height` raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch {
                what: "raster buffer".into(),
                expected_width: width,
                expected_height: height,
                width: data.len(),
                height: 1,
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                data.push(f(u, v));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> T {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn at(&self, index: usize) -> T {
        self.data[index]
    }

    /// Sample with coordinates clamped to the raster.
    #[inline]
    pub fn get_clamped(&self, u: isize, v: isize) -> T {
        let u = u.clamp(0, self.width as isize - 1) as usize;
        let v = v.clamp(0, self.height as isize - 1) as usize;
        self.get(u, v)
    }

    pub fn set(&mut self, u: usize, v: usize, value: T) {
        self.data[v * self.width + u] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn index_of(&self, u: usize, v: usize) -> usize {
        v * self.width + u
    }

    #[inline]
    pub fn coords_of(&self, index: usize) -> (usize, usize) {
        (index % self.width, index / self.width)
    }
}

/// The four integer neighbors and bilinear weights of a continuous pixel, or `None`
/// when the point is outside the raster.
#[inline]
pub(crate) fn bilinear_taps(width: usize, height: usize, u: f64, v: f64) -> Option<[(usize, f64); 4]> {
    if !(u >= 0.0 && v >= 0.0 && u <= (width - 1) as f64 && v <= (height - 1) as f64) {
        return None;
    }
    let u0 = (u.floor() as usize).min(width.saturating_sub(2));
    let v0 = (v.floor() as usize).min(height.saturating_sub(2));
    let u1 = (u0 + 1).min(width - 1);
    let v1 = (v0 + 1).min(height - 1);
    let a = u - u0 as f64;
    let b = v - v0 as f64;
    Some([
        (v0 * width + u0, (1.0 - a) * (1.0 - b)),
        (v0 * width + u1, a * (1.0 - b)),
        (v1 * width + u0, (1.0 - a) * b),
        (v1 * width + u1, a * b),
    ])
}

impl Grid<f32> {
    /// Plain bilinear interpolation; `None` outside the raster.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> Option<f64> {
        let taps = bilinear_taps(self.width, self.height, u, v)?;
        Some(taps.iter().map(|&(i, w)| w * self.data[i] as f64).sum())
    }

    /// Bilinear interpolation over valid depths only, weights renormalized.
    pub fn sample_depth(&self, u: f64, v: f64) -> Option<f64> {
        let taps = bilinear_taps(self.width, self.height, u, v)?;
        let mut acc = 0.0;
        let mut wsum = 0.0;
        for &(i, w) in &taps {
            let d = self.data[i] as f64;
            if w > 0.0 && is_valid_depth(d) {
                acc += w * d;
                wsum += w;
            }
        }
        (wsum > 1e-12).then(|| acc / wsum)
    }
}

/// One time instant of pre-processed input.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub gray: Grid<f32>,
    pub depth: Grid<f32>,
    pub depth_conf: Grid<f32>,
    pub seg: Grid<ObjectLabel>,
    pub seg_conf: Grid<f32>,
    pub intrinsics: Intrinsics,
    pub timestamp_index: usize,
}

impl Frame {
    /// Checks map dimensions against the intrinsics, clamps confidences to `[0, 1]`
    /// and zeroes the depth confidence wherever depth is invalid.
    pub fn new(
        gray: Grid<f32>,
        depth: Grid<f32>,
        mut depth_conf: Grid<f32>,
        seg: Grid<ObjectLabel>,
        mut seg_conf: Grid<f32>,
        intrinsics: Intrinsics,
        timestamp_index: usize,
    ) -> Result<Self> {
        let (w, h) = (intrinsics.width, intrinsics.height);
        let dims = [
            ("image", gray.width(), gray.height()),
            ("depth", depth.width(), depth.height()),
            ("depth_conf", depth_conf.width(), depth_conf.height()),
            ("seg", seg.width(), seg.height()),
            ("seg_conf", seg_conf.width(), seg_conf.height()),
        ];
        for (what, width, height) in dims {
            if width != w || height != h {
                return Err(Error::DimensionMismatch {
                    what: what.into(),
                    expected_width: w,
                    expected_height: h,
                    width,
                    height,
                });
            }
        }
        for (c, d) in depth_conf.data_mut().iter_mut().zip(depth.data()) {
            *c = if is_valid_depth(*d as f64) {
                c.clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
        for c in seg_conf.data_mut() {
            *c = c.clamp(0.0, 1.0);
        }
        Ok(Self {
            gray,
            depth,
            depth_conf,
            seg,
            seg_conf,
            intrinsics,
            timestamp_index,
        })
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn has_valid_depth(&self, index: usize) -> bool {
        is_valid_depth(self.depth.at(index) as f64)
    }

    /// Probability that the (continuous) pixel carries `label`, bilinearly sampled.
    /// Pixels labeled otherwise contribute the complement of their confidence.
    pub fn label_probability(&self, u: f64, v: f64, label: ObjectLabel) -> Option<f64> {
        let taps = bilinear_taps(self.width(), self.height(), u, v)?;
        Some(
            taps.iter()
                .map(|&(i, w)| {
                    let c = self.seg_conf.at(i) as f64;
                    w * if self.seg.at(i) == label { c } else { 1.0 - c }
                })
                .sum(),
        )
    }
}

/// Pixels of `label` with `seg_conf >= conf_floor` and valid depth, in raster order.
pub fn object_pixels(frame: &Frame, label: ObjectLabel, conf_floor: f64) -> Vec<usize> {
    (0..frame.intrinsics.pixel_count())
        .filter(|&i| {
            frame.seg.at(i) == label
                && frame.seg_conf.at(i) as f64 >= conf_floor
                && frame.has_valid_depth(i)
        })
        .collect()
}

/// Whether a label other than the one at `(u, v)` occurs within Chebyshev distance
/// `radius`. Coordinates outside the map are clamped.
pub fn near_other_label(seg: &Grid<ObjectLabel>, u: usize, v: usize, radius: usize) -> bool {
    let own = seg.get(u, v);
    let r = radius as isize;
    (-r..=r).any(|dv| (-r..=r).any(|du| seg.get_clamped(u as isize + du, v as isize + dv) != own))
}

/// Ground-truth object-to-camera poses of one frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectPoses {
    pub patient: Option<RigidMotion>,
    pub drill: Option<RigidMotion>,
}

impl ObjectPoses {
    pub fn get(&self, label: ObjectLabel) -> Option<RigidMotion> {
        match label {
            ObjectLabel::Patient => self.patient,
            ObjectLabel::Drill => self.drill,
            ObjectLabel::Background => None,
        }
    }
}

/// An ordered sequence of frames with optional ground-truth poses.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub intrinsics: Intrinsics,
    pub frames: Vec<Frame>,
    pub poses: Vec<ObjectPoses>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// The first `n` frames (all of them if `n` exceeds the length).
    pub fn prefix(&self, n: usize) -> Sequence {
        Sequence {
            intrinsics: self.intrinsics,
            frames: self.frames.iter().take(n).cloned().collect(),
            poses: self.poses.iter().take(n).copied().collect(),
        }
    }

    pub fn has_ground_truth(&self) -> bool {
        !self.poses.is_empty()
            && self
                .poses
                .iter()
                .all(|p| p.patient.is_some() && p.drill.is_some())
    }

    /// Camera-frame motion of `label` from frame `t` to `t + 1`: `pose_{t+1} * pose_t^-1`.
    pub fn gt_interframe_motion(&self, t: usize, label: ObjectLabel) -> Result<RigidMotion> {
        let pose = |i: usize| {
            self.poses
                .get(i)
                .and_then(|p| p.get(label))
                .ok_or(Error::MissingPose { index: i, label })
        };
        let a = pose(t)?;
        let b = pose(t + 1)?;
        Ok(b.compose(&a.inverse()))
    }

    /// Consecutive frame pairs; ground truth attached when both poses exist.
    pub fn pairs(&self) -> impl Iterator<Item = FramePair<'_>> + '_ {
        (0..self.frames.len().saturating_sub(1)).map(move |t| FramePair {
            source: &self.frames[t],
            target: &self.frames[t + 1],
            gt_motion_patient: self.gt_interframe_motion(t, ObjectLabel::Patient).ok(),
            gt_motion_drill: self.gt_interframe_motion(t, ObjectLabel::Drill).ok(),
        })
    }

    pub fn pair(&self, t: usize) -> FramePair<'_> {
        FramePair {
            source: &self.frames[t],
            target: &self.frames[t + 1],
            gt_motion_patient: self.gt_interframe_motion(t, ObjectLabel::Patient).ok(),
            gt_motion_drill: self.gt_interframe_motion(t, ObjectLabel::Drill).ok(),
        }
    }
}

/// Frames at `t` and `t + 1`.
#[derive(Debug, Clone, Copy)]
pub struct FramePair<'a> {
    pub source: &'a Frame,
    pub target: &'a Frame,
    pub gt_motion_patient: Option<RigidMotion>,
    pub gt_motion_drill: Option<RigidMotion>,
}

impl<'a> FramePair<'a> {
    pub fn new(source: &'a Frame, target: &'a Frame) -> Result<Self> {
        if source.intrinsics != target.intrinsics {
            return Err(Error::Config(
                "frame pair has different intrinsics".to_string(),
            ));
        }
        Ok(Self {
            source,
            target,
            gt_motion_patient: None,
            gt_motion_drill: None,
        })
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.source.intrinsics
    }

    pub fn gt_motion(&self, label: ObjectLabel) -> Option<RigidMotion> {
        match label {
            ObjectLabel::Patient => self.gt_motion_patient,
            ObjectLabel::Drill => self.gt_motion_drill,
            ObjectLabel::Background => None,
        }
    }
}
