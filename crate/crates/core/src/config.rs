//! Tracker and baseline parameters, loadable from one JSON file.
//!
//! Tracker fields live at the top level and baseline parameters under
//! `"baseline": {"keypoint": {...}, "icp": {...}}`. Every field is optional;
//! unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RobustKernel {
    /// Huber on the pixel residual norm, quadratic below `huber_delta`.
    #[default]
    Huber,
    /// Plain weighted least squares, `r^2 / 2`.
    None,
    /// Un-squared residual norm `r`, minimized by reweighting.
    Norm,
}

impl RobustKernel {
    /// Cost of a residual with norm `r`.
    pub fn rho(&self, r: f64, delta: f64) -> f64 {
        match self {
            RobustKernel::Huber if r > delta => delta * (r - 0.5 * delta),
            RobustKernel::Huber | RobustKernel::None => 0.5 * r * r,
            RobustKernel::Norm => r,
        }
    }

    /// `rho'(r) / r`, the IRLS weight multiplying the squared residual.
    pub fn weight(&self, r: f64, delta: f64) -> f64 {
        match self {
            RobustKernel::Huber if r > delta => delta / r,
            RobustKernel::Huber | RobustKernel::None => 1.0,
            RobustKernel::Norm => 1.0 / r.max(1e-9),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// Outer associate/refine/optimize iterations.
    pub outer_iterations: usize,
    /// Levenberg-Marquardt iterations per object per outer iteration.
    pub gn_iterations: usize,
    pub damping_init: f64,
    pub damping_factor: f64,
    /// Huber threshold in pixels.
    pub huber_delta: f64,
    pub robust_kernel: RobustKernel,
    pub min_pixels: usize,
    /// Correspondences with joint probability below this are ignored; source pixels
    /// with lower segmentation confidence are never associated.
    pub conf_floor: f64,
    /// Half-width of the correlation search window (pixels).
    pub search_radius: usize,
    /// Half-width of the intensity patch descriptor (pixels).
    pub patch_radius: usize,
    /// Source pixel subsampling step.
    pub stride: usize,
    /// Refinement confidence given to textureless source patches.
    pub flat_conf: f64,
    /// Source pixels closer than this (Chebyshev, pixels) to another label are not
    /// associated; their patches mix two independently moving surfaces. 0 disables.
    pub boundary_margin: usize,
    /// When false every correspondence gets unit weight (ablation switch).
    pub use_joint_probability: bool,
    /// Minimum depth (mm) for a point to count as in front of the camera.
    pub z_min: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            outer_iterations: 3,
            gn_iterations: 10,
            damping_init: 1e-4,
            damping_factor: 10.0,
            huber_delta: 2.0,
            robust_kernel: RobustKernel::Huber,
            min_pixels: 50,
            conf_floor: 0.05,
            search_radius: 4,
            patch_radius: 3,
            stride: 2,
            flat_conf: 0.2,
            boundary_margin: 3,
            use_joint_probability: true,
            z_min: crate::camera::DEFAULT_Z_MIN,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.outer_iterations >= 1, "outer_iterations must be >= 1"),
            (self.gn_iterations >= 1, "gn_iterations must be >= 1"),
            (self.damping_init > 0.0, "damping_init must be > 0"),
            (self.damping_factor > 1.0, "damping_factor must be > 1"),
            (self.huber_delta > 0.0, "huber_delta must be > 0"),
            ((0.0..=1.0).contains(&self.conf_floor), "conf_floor must be in [0, 1]"),
            ((0.0..=1.0).contains(&self.flat_conf), "flat_conf must be in [0, 1]"),
            (self.stride >= 1, "stride must be >= 1"),
            (self.search_radius >= 1, "search_radius must be >= 1"),
            (self.z_min > 0.0, "z_min must be > 0"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config((*msg).to_string())),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeypointConfig {
    pub harris_k: f64,
    /// Corners must exceed this fraction of the frame's strongest Harris response.
    pub harris_quality: f64,
    pub nms_radius: usize,
    pub max_keypoints: usize,
    pub ratio: f64,
    /// Keep only mutual nearest neighbours.
    pub cross_check: bool,
    pub patch_radius: usize,
}

impl Default for KeypointConfig {
    fn default() -> Self {
        Self {
            harris_k: 0.04,
            harris_quality: 0.01,
            nms_radius: 3,
            max_keypoints: 500,
            ratio: 0.8,
            cross_check: true,
            patch_radius: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcpConfig {
    pub max_iterations: usize,
    /// Reject pairs farther apart than this multiple of the median distance.
    pub distance_factor: f64,
    /// Reject pairs whose intensities differ by more than this.
    pub intensity_threshold: f64,
    /// Stop when the update twist norm falls below this.
    pub convergence: f64,
    pub min_pixels: usize,
    pub stride: usize,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iterations: 30,
            distance_factor: 3.0,
            intensity_threshold: 0.1,
            convergence: 1e-6,
            min_pixels: 50,
            stride: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub keypoint: KeypointConfig,
    pub icp: IcpConfig,
}

/// Everything a run needs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub tracker: TrackerConfig,
    pub baseline: BaselineConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let obj = value
            .as_object_mut()
            .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
        let baseline = match obj.remove("baseline") {
            Some(b) => serde_json::from_value(b).map_err(|e| Error::Config(format!("baseline: {e}")))?,
            None => BaselineConfig::default(),
        };
        let tracker: TrackerConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        tracker.validate()?;
        Ok(Self { tracker, baseline })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// The resolved configuration in the same layout `from_json` accepts.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(&self.tracker).expect("config serializes");
        v.as_object_mut().expect("object").insert(
            "baseline".into(),
            serde_json::to_value(&self.baseline).expect("config serializes"),
        );
        v
    }
}
