//! Joint tracking of the patient and drill motions.
//!
//! [`track`] alternates projective association, correlation refinement and
//! confidence weighting with a per-object damped Gauss-Newton minimization of the
//! weighted pixel reprojection energy
//!
//! ```text
//! E(T) = sum_i w_i * rho(|| j_i - project(T * backproject(i)) ||)
//! ```
//!
//! where `w_i` is the joint probability of the pair and `rho` the configured robust
//! kernel. Updates are applied on the left, `T <- exp(delta) * T`.

use nalgebra::{Matrix2x6, Matrix6, SymmetricEigen, Vector2, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TrackerConfig;
use crate::correspondence::{
    associate_objects, build_features, joint_probability, refine, CorrespondenceField,
};
use crate::error::{Error, Result};
use crate::liegroup::{RigidMotion, Twist};
use crate::scene::{FramePair, ObjectLabel};
use crate::camera::Intrinsics;

/// Energy charged for a correspondence whose point ends up behind the camera.
pub const BEHIND_CAMERA_PENALTY: f64 = 1e6;
/// Damped normal equations with a larger condition estimate are treated as singular.
pub const MAX_CONDITION: f64 = 1e12;
const MIN_STEP: f64 = 1e-8;
const MIN_REL_DECREASE: f64 = 1e-10;

/// Weighted correspondences of one object with cached source points.
#[derive(Debug, Clone)]
struct ObjectProblem<'a> {
    intrinsics: &'a Intrinsics,
    points: Vec<Vector3<f64>>,
    targets: Vec<Vector2<f64>>,
    weights: Vec<f64>,
    config: &'a TrackerConfig,
}

impl<'a> ObjectProblem<'a> {
    fn new(
        pair: &'a FramePair<'_>,
        field: &CorrespondenceField,
        label: ObjectLabel,
        config: &'a TrackerConfig,
    ) -> Result<Self> {
        let k = pair.intrinsics();
        let src = pair.source;
        let mut points = Vec::new();
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        for n in 0..field.len() {
            if field.label[n] != label {
                continue;
            }
            let w = if config.use_joint_probability {
                field.joint_prob[n]
            } else {
                1.0
            };
            if !(w >= config.conf_floor) || w <= 0.0 {
                continue;
            }
            let i = field.source_pixels[n];
            let Ok(p) = k.backproject(&field.source[n], src.depth.at(i) as f64) else {
                continue;
            };
            points.push(p);
            targets.push(field.target[n]);
            weights.push(w);
        }
        if points.is_empty() {
            return Err(Error::EmptyObject(label));
        }
        Ok(Self {
            intrinsics: k,
            points,
            targets,
            weights,
            config,
        })
    }

    fn len(&self) -> usize {
        self.points.len()
    }

    fn energy(&self, motion: &RigidMotion) -> f64 {
        let (kernel, delta) = (self.config.robust_kernel, self.config.huber_delta);
        let mut e = 0.0;
        for n in 0..self.len() {
            let q = motion.act(&self.points[n]);
            match self.intrinsics.project_with_min(&q, self.config.z_min) {
                Ok(uv) => {
                    e += self.weights[n] * kernel.rho((self.targets[n] - uv).norm(), delta)
                }
                Err(_) => e += BEHIND_CAMERA_PENALTY,
            }
        }
        e
    }

    /// Gauss-Newton system `(J^T W J, J^T W r)` with IRLS weights folded into `W`.
    fn normal_equations(&self, motion: &RigidMotion) -> (Matrix6<f64>, Vector6<f64>) {
        let (kernel, delta) = (self.config.robust_kernel, self.config.huber_delta);
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for n in 0..self.len() {
            let q = motion.act(&self.points[n]);
            let Ok(uv) = self.intrinsics.project_with_min(&q, self.config.z_min) else {
                continue;
            };
            let r = self.targets[n] - uv;
            let w = self.weights[n] * kernel.weight(r.norm(), delta);
            let j: Matrix2x6<f64> =
                -(self.intrinsics.project_jacobian(&q) * motion.point_jacobian(&self.points[n]));
            h += j.transpose() * j * w;
            g += j.transpose() * r * w;
        }
        (h, g)
    }
}

/// Weighted robust reprojection energy of the `label` correspondences under `motion`.
pub fn energy(
    pair: &FramePair<'_>,
    field: &CorrespondenceField,
    motion: &RigidMotion,
    label: ObjectLabel,
    config: &TrackerConfig,
) -> Result<f64> {
    Ok(ObjectProblem::new(pair, field, label, config)?.energy(motion))
}

/// Derivative of [`energy`] with respect to a left twist perturbation of `motion`,
/// ordered `(tau, phi)`.
pub fn gradient(
    pair: &FramePair<'_>,
    field: &CorrespondenceField,
    motion: &RigidMotion,
    label: ObjectLabel,
    config: &TrackerConfig,
) -> Result<Vector6<f64>> {
    Ok(ObjectProblem::new(pair, field, label, config)?
        .normal_equations(motion)
        .1)
}

/// Outcome of one per-object minimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSolution {
    pub motion: RigidMotion,
    pub initial_energy: f64,
    pub final_energy: f64,
    /// Energy after the start and after every accepted step.
    pub accepted_energies: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Sum of the correspondence weights that entered the problem.
    pub weight_sum: f64,
    pub correspondences: usize,
}

fn condition_estimate(a: &Matrix6<f64>) -> f64 {
    let eig = SymmetricEigen::new(*a);
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, v| m.min(*v));
    if !(min > 0.0) {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Levenberg-Marquardt minimization of the energy of one object, starting at `initial`.
pub fn solve_object(
    pair: &FramePair<'_>,
    field: &CorrespondenceField,
    label: ObjectLabel,
    initial: &RigidMotion,
    config: &TrackerConfig,
) -> Result<ObjectSolution> {
    let problem = ObjectProblem::new(pair, field, label, config)?;
    if problem.len() < config.min_pixels {
        return Err(Error::EmptyObject(label));
    }

    let mut motion = *initial;
    let mut e = problem.energy(&motion);
    let initial_energy = e;
    let mut trace = vec![e];
    let mut lambda = config.damping_init;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < config.gn_iterations {
        iterations += 1;
        let (h, g) = problem.normal_equations(&motion);
        let mut a = h;
        for d in 0..6 {
            a[(d, d)] += lambda * h[(d, d)];
        }
        let condition = condition_estimate(&a);
        if condition > MAX_CONDITION {
            return Err(Error::SingularNormalEquations { condition });
        }
        let Some(chol) = a.cholesky() else {
            return Err(Error::SingularNormalEquations { condition });
        };
        let step = -chol.solve(&g);
        let candidate = motion.retract(&Twist::from_vector(&step));
        let e_new = problem.energy(&candidate);
        let step_norm = step.norm();
        if e_new <= e {
            let rel = if e > 0.0 { (e - e_new) / e } else { 0.0 };
            motion = candidate;
            e = e_new;
            trace.push(e);
            lambda = (lambda / config.damping_factor).max(1e-12);
            if step_norm < MIN_STEP || rel < MIN_REL_DECREASE {
                converged = true;
                break;
            }
        } else {
            lambda *= config.damping_factor;
            if step_norm < MIN_STEP {
                converged = true;
                break;
            }
        }
    }

    Ok(ObjectSolution {
        motion,
        initial_energy,
        final_energy: e,
        accepted_energies: trace,
        iterations,
        converged,
        weight_sum: problem.weights.iter().sum(),
        correspondences: problem.len(),
    })
}

/// Per-object part of a [`MotionEstimate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectEstimate {
    pub motion: RigidMotion,
    /// False when the object could not be tracked; `reason` says why.
    pub tracked: bool,
    /// Whether the last minimization met a convergence test before its iteration cap.
    pub converged: bool,
    pub reason: Option<String>,
    pub energy: f64,
    pub weight_sum: f64,
    pub correspondences: usize,
    /// Accepted-step energies of every minimization, one list per outer iteration.
    pub energy_trace: Vec<Vec<f64>>,
}

impl ObjectEstimate {
    fn new() -> Self {
        Self {
            motion: RigidMotion::identity(),
            tracked: true,
            converged: false,
            reason: None,
            energy: 0.0,
            weight_sum: 0.0,
            correspondences: 0,
            energy_trace: Vec::new(),
        }
    }

    fn fail(&mut self, reason: String) {
        self.tracked = false;
        self.converged = false;
        self.reason = Some(reason);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionEstimate {
    pub patient: ObjectEstimate,
    pub drill: ObjectEstimate,
}

impl MotionEstimate {
    pub fn object(&self, label: ObjectLabel) -> &ObjectEstimate {
        match label {
            ObjectLabel::Drill => &self.drill,
            _ => &self.patient,
        }
    }

    fn object_mut(&mut self, label: ObjectLabel) -> &mut ObjectEstimate {
        match label {
            ObjectLabel::Drill => &mut self.drill,
            _ => &mut self.patient,
        }
    }
}

/// Estimates the camera-frame motions of both objects from `pair.source` to
/// `pair.target`, starting from the identity.
pub fn track(pair: &FramePair<'_>, config: &TrackerConfig) -> MotionEstimate {
    let features_t = build_features(pair.source, config);
    let features_t1 = build_features(pair.target, config);
    let mut est = MotionEstimate {
        patient: ObjectEstimate::new(),
        drill: ObjectEstimate::new(),
    };
    let mut active: Vec<ObjectLabel> = ObjectLabel::OBJECTS.to_vec();

    for _ in 0..config.outer_iterations {
        if active.is_empty() {
            break;
        }
        let (field, empty) = associate_objects(
            pair,
            &est.patient.motion,
            &est.drill.motion,
            &active,
            config,
        );
        for label in empty {
            est.object_mut(label)
                .fail(Error::EmptyObject(label).to_string());
            active.retain(|&l| l != label);
        }
        let field = refine(pair, &field, &features_t, &features_t1, config);
        let field = joint_probability(pair, &field);

        let solutions: Vec<(ObjectLabel, Result<ObjectSolution>)> = active
            .par_iter()
            .map(|&label| {
                let initial = est.object(label).motion;
                (label, solve_object(pair, &field, label, &initial, config))
            })
            .collect();
        for (label, solution) in solutions {
            let obj = est.object_mut(label);
            match solution {
                Ok(s) => {
                    obj.motion = s.motion;
                    obj.converged = s.converged;
                    obj.reason = (!s.converged).then(|| "iteration limit reached".to_string());
                    obj.energy = s.final_energy;
                    obj.weight_sum = s.weight_sum;
                    obj.correspondences = s.correspondences;
                    obj.energy_trace.push(s.accepted_energies);
                }
                Err(e) => {
                    obj.fail(e.to_string());
                    active.retain(|&l| l != label);
                }
            }
        }
    }
    est
}
