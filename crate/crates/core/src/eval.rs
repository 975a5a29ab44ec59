//! Benchmark harness: per-pair geodesic errors for each method, summary
//! statistics, per-frame CSV export and navigation-mode pose chaining.

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{icp_object, keypoint_track};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::liegroup::{geodesic_error, GeodesicError, RigidMotion};
use crate::scene::{ObjectLabel, Sequence, FORMAT_VERSION};
use crate::solver::track;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Tatoo,
    Keypoint,
    Icp,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Tatoo, Method::Keypoint, Method::Icp];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Tatoo => "tatoo",
            Method::Keypoint => "keypoint",
            Method::Icp => "icp",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tatoo" => Ok(Method::Tatoo),
            "keypoint" => Ok(Method::Keypoint),
            "icp" => Ok(Method::Icp),
            other => Err(Error::Config(format!(
                "unknown method {other:?} (expected tatoo, keypoint or icp)"
            ))),
        }
    }
}

/// One object's predicted motion for one frame pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectPrediction {
    /// The motion, or why the method produced none.
    pub motion: std::result::Result<RigidMotion, String>,
    /// Wall-clock time of the estimate. Joint methods report the whole pair.
    pub elapsed_ms: f64,
    /// Accepted-step energies per outer iteration; empty for the baselines.
    pub energy_trace: Vec<Vec<f64>>,
}

impl ObjectPrediction {
    fn exact(motion: RigidMotion) -> Self {
        Self {
            motion: Ok(motion),
            elapsed_ms: 0.0,
            energy_trace: Vec::new(),
        }
    }
}

/// Both objects' predicted motions from frame `frame` to `frame + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairPrediction {
    pub frame: usize,
    pub patient: ObjectPrediction,
    pub drill: ObjectPrediction,
}

impl PairPrediction {
    pub fn object(&self, label: ObjectLabel) -> &ObjectPrediction {
        match label {
            ObjectLabel::Drill => &self.drill,
            _ => &self.patient,
        }
    }
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

fn predict_pair(sequence: &Sequence, t: usize, method: Method, config: &RunConfig) -> PairPrediction {
    let pair = sequence.pair(t);
    match method {
        Method::Tatoo => {
            let start = Instant::now();
            let est = track(&pair, &config.tracker);
            let ms = elapsed_ms(start);
            let convert = |label| {
                let o = est.object(label);
                ObjectPrediction {
                    motion: if o.tracked {
                        Ok(o.motion)
                    } else {
                        Err(o.reason.clone().unwrap_or_else(|| "not tracked".into()))
                    },
                    elapsed_ms: ms,
                    energy_trace: o.energy_trace.clone(),
                }
            };
            PairPrediction {
                frame: t,
                patient: convert(ObjectLabel::Patient),
                drill: convert(ObjectLabel::Drill),
            }
        }
        Method::Keypoint => {
            let start = Instant::now();
            let est = keypoint_track(&pair, &config.baseline.keypoint);
            let ms = elapsed_ms(start);
            let convert = |r: &Result<RigidMotion>| ObjectPrediction {
                motion: r.as_ref().map(|m| *m).map_err(|e| e.to_string()),
                elapsed_ms: ms,
                energy_trace: Vec::new(),
            };
            PairPrediction {
                frame: t,
                patient: convert(&est.patient),
                drill: convert(&est.drill),
            }
        }
        Method::Icp => {
            let run = |label| {
                let start = Instant::now();
                let r = icp_object(&pair, label, &config.baseline.icp);
                ObjectPrediction {
                    motion: r.map(|s| s.motion).map_err(|e| e.to_string()),
                    elapsed_ms: elapsed_ms(start),
                    energy_trace: Vec::new(),
                }
            };
            PairPrediction {
                frame: t,
                patient: run(ObjectLabel::Patient),
                drill: run(ObjectLabel::Drill),
            }
        }
    }
}

fn require_ground_truth(sequence: &Sequence) -> Result<()> {
    for (index, poses) in sequence.poses.iter().enumerate().take(sequence.len()) {
        for label in ObjectLabel::OBJECTS {
            if poses.get(label).is_none() {
                return Err(Error::MissingPose { index, label });
            }
        }
    }
    if sequence.poses.len() < sequence.len() {
        return Err(Error::MissingPose {
            index: sequence.poses.len(),
            label: ObjectLabel::Patient,
        });
    }
    Ok(())
}

/// Runs `method` on every consecutive pair. Pairs are processed in parallel;
/// the output is in frame order and independent of the thread count.
pub fn predict_sequence(sequence: &Sequence, method: Method, config: &RunConfig) -> Vec<PairPrediction> {
    (0..sequence.len().saturating_sub(1))
        .into_par_iter()
        .map(|t| predict_pair(sequence, t, method, config))
        .collect()
}

/// Ground-truth inter-frame motions dressed as predictions.
pub fn oracle_predictions(sequence: &Sequence) -> Result<Vec<PairPrediction>> {
    require_ground_truth(sequence)?;
    (0..sequence.len().saturating_sub(1))
        .map(|t| {
            Ok(PairPrediction {
                frame: t,
                patient: ObjectPrediction::exact(sequence.gt_interframe_motion(t, ObjectLabel::Patient)?),
                drill: ObjectPrediction::exact(sequence.gt_interframe_motion(t, ObjectLabel::Drill)?),
            })
        })
        .collect()
}

/// Error or failure of one object on one frame pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Error(GeodesicError),
    Failure(String),
}

impl Outcome {
    pub fn error(&self) -> Option<&GeodesicError> {
        match self {
            Outcome::Error(e) => Some(e),
            Outcome::Failure(_) => None,
        }
    }

    pub fn is_failure(&self) -> bool {
        matches!(self, Outcome::Failure(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectResult {
    pub outcome: Outcome,
    pub elapsed_ms: f64,
}

/// Per-pair evaluation, indexed by the source frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame: usize,
    pub patient: ObjectResult,
    pub drill: ObjectResult,
}

impl FrameResult {
    pub fn object(&self, label: ObjectLabel) -> &ObjectResult {
        match label {
            ObjectLabel::Drill => &self.drill,
            _ => &self.patient,
        }
    }
}

/// Scores predictions against the sequence's ground-truth inter-frame motions.
pub fn evaluate_predictions(sequence: &Sequence, predictions: &[PairPrediction]) -> Result<Vec<FrameResult>> {
    require_ground_truth(sequence)?;
    predictions
        .iter()
        .map(|p| {
            let score = |label| -> Result<ObjectResult> {
                let pred = p.object(label);
                let outcome = match &pred.motion {
                    Ok(m) => {
                        let gt = sequence.gt_interframe_motion(p.frame, label)?;
                        match geodesic_error(m, &gt) {
                            Ok(e) => Outcome::Error(e),
                            Err(e) => Outcome::Failure(e.to_string()),
                        }
                    }
                    Err(reason) => Outcome::Failure(reason.clone()),
                };
                Ok(ObjectResult {
                    outcome,
                    elapsed_ms: pred.elapsed_ms,
                })
            };
            Ok(FrameResult {
                frame: p.frame,
                patient: score(ObjectLabel::Patient)?,
                drill: score(ObjectLabel::Drill)?,
            })
        })
        .collect()
}

pub fn evaluate_sequence(sequence: &Sequence, method: Method, config: &RunConfig) -> Result<Vec<FrameResult>> {
    require_ground_truth(sequence)?;
    evaluate_predictions(sequence, &predict_sequence(sequence, method, config))
}

/// Summary of one object under one method. Error statistics cover the
/// non-failed frames only and are `None` when every frame failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectStats {
    pub frames: usize,
    pub failures: usize,
    pub failure_rate: f64,
    pub trans_mean_mm: Option<f64>,
    pub trans_std_mm: Option<f64>,
    pub rot_mean_deg: Option<f64>,
    pub rot_std_deg: Option<f64>,
    /// Fraction of non-failed frames with translation error at most 1 mm.
    pub within_1mm: Option<f64>,
    /// Fraction of non-failed frames with rotation error at most 1 degree.
    pub within_1deg: Option<f64>,
}

/// Mean and sample standard deviation. Summation runs over sorted values so
/// the result does not depend on frame order.
fn mean_std(values: &mut [f64]) -> (f64, f64) {
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let mut sq: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
    sq.sort_by(f64::total_cmp);
    (mean, (sq.iter().sum::<f64>() / (n - 1.0)).sqrt())
}

fn object_stats(results: &[FrameResult], label: ObjectLabel) -> ObjectStats {
    let errors: Vec<GeodesicError> = results
        .iter()
        .filter_map(|r| r.object(label).outcome.error().copied())
        .collect();
    let frames = results.len();
    let failures = frames - errors.len();
    let mut stats = ObjectStats {
        frames,
        failures,
        failure_rate: if frames == 0 { 0.0 } else { failures as f64 / frames as f64 },
        trans_mean_mm: None,
        trans_std_mm: None,
        rot_mean_deg: None,
        rot_std_deg: None,
        within_1mm: None,
        within_1deg: None,
    };
    if errors.is_empty() {
        return stats;
    }
    let n = errors.len() as f64;
    let mut trans: Vec<f64> = errors.iter().map(|e| e.tau_norm).collect();
    let mut rot: Vec<f64> = errors.iter().map(|e| e.phi_norm).collect();
    stats.within_1mm = Some(trans.iter().filter(|&&t| t <= 1.0).count() as f64 / n);
    stats.within_1deg = Some(rot.iter().filter(|&&r| r <= 1.0).count() as f64 / n);
    let (tm, ts) = mean_std(&mut trans);
    let (rm, rs) = mean_std(&mut rot);
    stats.trans_mean_mm = Some(tm);
    stats.trans_std_mm = Some(ts);
    stats.rot_mean_deg = Some(rm);
    stats.rot_std_deg = Some(rs);
    stats
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub patient: ObjectStats,
    pub drill: ObjectStats,
}

impl MethodReport {
    pub fn object(&self, label: ObjectLabel) -> &ObjectStats {
        match label {
            ObjectLabel::Drill => &self.drill,
            _ => &self.patient,
        }
    }
}

pub fn aggregate(method: Method, results: &[FrameResult]) -> MethodReport {
    MethodReport {
        method,
        patient: object_stats(results, ObjectLabel::Patient),
        drill: object_stats(results, ObjectLabel::Drill),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub format_version: u32,
    pub pairs: usize,
    pub methods: Vec<MethodReport>,
}

impl BenchmarkReport {
    pub fn new(methods: Vec<MethodReport>) -> Self {
        let pairs = methods.first().map_or(0, |m| m.patient.frames);
        Self {
            format_version: FORMAT_VERSION,
            pairs,
            methods,
        }
    }

    pub fn method(&self, method: Method) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == method)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Aligned columns, one row per method and object.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<9} {:<8} {:>20} {:>20} {:>7} {:>7} {:>8}",
            "method", "object", "trans mm (mean±std)", "rot deg (mean±std)", "<=1mm", "<=1deg", "failure"
        );
        let pm = |m: Option<f64>, s: Option<f64>| match (m, s) {
            (Some(m), Some(s)) => format!("{m:.3} ± {s:.3}"),
            _ => "-".to_string(),
        };
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.1}%", 100.0 * v));
        for m in &self.methods {
            for label in ObjectLabel::OBJECTS {
                let s = m.object(label);
                let _ = writeln!(
                    out,
                    "{:<9} {:<8} {:>20} {:>20} {:>7} {:>7} {:>8}",
                    m.method.as_str(),
                    label.as_str(),
                    pm(s.trans_mean_mm, s.trans_std_mm),
                    pm(s.rot_mean_deg, s.rot_std_deg),
                    pct(s.within_1mm),
                    pct(s.within_1deg),
                    pct(Some(s.failure_rate)),
                );
            }
        }
        let _ = writeln!(out, "{} frame pairs, format version {}", self.pairs, self.format_version);
        out
    }
}

pub const FRAMES_CSV_HEADER: &str = "frame,method,object,trans_err_mm,rot_err_deg,failed";

/// Per-frame errors as CSV. Floats are written in shortest round-trip form, so
/// the report can be recomputed exactly from this export; failed rows leave the
/// error columns empty.
pub fn frames_csv(runs: &[(Method, Vec<FrameResult>)]) -> String {
    let mut out = String::from(FRAMES_CSV_HEADER);
    out.push('\n');
    for (method, results) in runs {
        for r in results {
            for label in ObjectLabel::OBJECTS {
                let _ = match r.object(label).outcome.error() {
                    Some(e) => writeln!(
                        out,
                        "{},{},{},{},{},0",
                        r.frame,
                        method,
                        label.as_str(),
                        e.tau_norm,
                        e.phi_norm
                    ),
                    None => writeln!(out, "{},{},{},,,1", r.frame, method, label.as_str()),
                };
            }
        }
    }
    out
}

/// One chained frame: the drill pose in the patient frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavigationFrame {
    pub frame: usize,
    pub predicted: RigidMotion,
    pub ground_truth: RigidMotion,
    pub error: GeodesicError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truncation {
    /// Source frame of the pair that failed; chaining stops there.
    pub frame: usize,
    pub object: ObjectLabel,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Navigation {
    /// Frame 0 onwards until the chain ends.
    pub frames: Vec<NavigationFrame>,
    pub truncated: Option<Truncation>,
    /// Means over the chained frames after frame 0; `None` if there are none.
    pub mean_trans_mm: Option<f64>,
    pub mean_rot_deg: Option<f64>,
}

fn drill_in_patient(patient: &RigidMotion, drill: &RigidMotion) -> RigidMotion {
    patient.inverse().compose(drill)
}

/// Chains predicted inter-frame motions onto the ground-truth poses of frame 0
/// and scores the drill-to-patient transform at every frame.
pub fn navigate_predictions(sequence: &Sequence, predictions: &[PairPrediction]) -> Result<Navigation> {
    require_ground_truth(sequence)?;
    if sequence.is_empty() {
        return Err(Error::Config("navigation needs at least one frame".into()));
    }
    let gt_rel = |t: usize| {
        let p = &sequence.poses[t];
        drill_in_patient(
            &p.patient.expect("checked above"),
            &p.drill.expect("checked above"),
        )
    };
    let mut patient = sequence.poses[0].patient.expect("checked above");
    let mut drill = sequence.poses[0].drill.expect("checked above");
    let first = gt_rel(0);
    let mut frames = vec![NavigationFrame {
        frame: 0,
        predicted: drill_in_patient(&patient, &drill),
        ground_truth: first,
        error: geodesic_error(&drill_in_patient(&patient, &drill), &first)?,
    }];
    let mut truncated = None;
    for p in predictions.iter().take(sequence.len() - 1) {
        let failure = ObjectLabel::OBJECTS
            .into_iter()
            .find_map(|label| p.object(label).motion.as_ref().err().map(|r| (label, r.clone())));
        if let Some((object, reason)) = failure {
            truncated = Some(Truncation {
                frame: p.frame,
                object,
                reason,
            });
            break;
        }
        patient = p.patient.motion.as_ref().expect("checked").compose(&patient);
        drill = p.drill.motion.as_ref().expect("checked").compose(&drill);
        let predicted = drill_in_patient(&patient, &drill);
        let ground_truth = gt_rel(p.frame + 1);
        let error = match geodesic_error(&predicted, &ground_truth) {
            Ok(e) => e,
            Err(e) => {
                truncated = Some(Truncation {
                    frame: p.frame,
                    object: ObjectLabel::Drill,
                    reason: e.to_string(),
                });
                break;
            }
        };
        frames.push(NavigationFrame {
            frame: p.frame + 1,
            predicted,
            ground_truth,
            error,
        });
    }
    let tail = &frames[1..];
    let (mean_trans_mm, mean_rot_deg) = if tail.is_empty() {
        (None, None)
    } else {
        let n = tail.len() as f64;
        (
            Some(tail.iter().map(|f| f.error.tau_norm).sum::<f64>() / n),
            Some(tail.iter().map(|f| f.error.phi_norm).sum::<f64>() / n),
        )
    };
    Ok(Navigation {
        frames,
        truncated,
        mean_trans_mm,
        mean_rot_deg,
    })
}

pub fn navigate(sequence: &Sequence, method: Method, config: &RunConfig) -> Result<Navigation> {
    require_ground_truth(sequence)?;
    navigate_predictions(sequence, &predict_sequence(sequence, method, config))
}

fn motion_columns(m: &RigidMotion) -> String {
    let q = m.rotation().quaternion();
    let t = m.translation();
    format!("{},{},{},{},{},{},{}", t.x, t.y, t.z, q.w, q.i, q.j, q.k)
}

impl Navigation {
    /// Per-frame CSV; a trailing `# truncated ...` line marks an aborted chain.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "frame,pred_tx,pred_ty,pred_tz,pred_qw,pred_qx,pred_qy,pred_qz,\
             gt_tx,gt_ty,gt_tz,gt_qw,gt_qx,gt_qy,gt_qz,trans_err_mm,rot_err_deg\n",
        );
        for f in &self.frames {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                f.frame,
                motion_columns(&f.predicted),
                motion_columns(&f.ground_truth),
                f.error.tau_norm,
                f.error.phi_norm
            );
        }
        if let Some(t) = &self.truncated {
            let _ = writeln!(out, "# truncated at frame {} ({}): {}", t.frame, t.object.as_str(), t.reason);
        }
        out
    }
}
