mod common;

use std::sync::OnceLock;

use common::{small_scenario, still_scenario};
use jointtrack::config::RobustKernel;
use jointtrack::correspondence::{associate_objects, CorrespondenceField};
use jointtrack::baselines::kabsch;
use jointtrack::simulator::render_sequence;
use jointtrack::solver::{energy, gradient, solve_object};
use jointtrack::{geodesic_error, track, ObjectLabel, RigidMotion, Sequence, TrackerConfig, Twist};
use nalgebra::{Vector2, Vector3, Vector6};
use proptest::prelude::*;

fn moving() -> &'static Sequence {
    static SEQ: OnceLock<Sequence> = OnceLock::new();
    SEQ.get_or_init(|| render_sequence(&small_scenario(3, 11)).unwrap())
}

fn base_field() -> &'static CorrespondenceField {
    static FIELD: OnceLock<CorrespondenceField> = OnceLock::new();
    FIELD.get_or_init(|| {
        let pair = moving().pair(0);
        let id = RigidMotion::identity();
        associate_objects(&pair, &id, &id, &ObjectLabel::OBJECTS, &TrackerConfig::default()).0
    })
}

/// Deterministic pseudo-random offset in `[-1, 1]^2` per correspondence.
fn jitter(n: usize, salt: u64) -> Vector2<f64> {
    let mut h = (n as u64 ^ salt.rotate_left(17)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    h ^= h >> 29;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 32;
    let a = (h & 0xFFFF) as f64 / 32767.5 - 1.0;
    let b = ((h >> 16) & 0xFFFF) as f64 / 32767.5 - 1.0;
    Vector2::new(a, b)
}

fn kernel() -> impl Strategy<Value = RobustKernel> {
    prop_oneof![Just(RobustKernel::Huber), Just(RobustKernel::None), Just(RobustKernel::Norm)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn gradient_matches_central_differences(
        tau in prop::array::uniform3(-2.0..2.0f64),
        phi in prop::array::uniform3(-0.02..0.02f64),
        spread in 0.1..6.0f64,
        salt in any::<u64>(),
        kernel in kernel(),
        delta in 0.5..4.0f64,
        drill in any::<bool>(),
    ) {
        let pair = moving().pair(0);
        let mut field = base_field().clone();
        for n in 0..field.len() {
            field.target[n] += jitter(n, salt) * spread;
            field.joint_prob[n] = 0.1 + 0.9 * (0.5 + 0.5 * jitter(n, !salt).x);
        }
        let config = TrackerConfig { robust_kernel: kernel, huber_delta: delta, ..TrackerConfig::default() };
        let label = if drill { ObjectLabel::Drill } else { ObjectLabel::Patient };
        let motion = RigidMotion::exp(&Twist::new(Vector3::from(tau), Vector3::from(phi)));

        let analytic = gradient(&pair, &field, &motion, label, &config).unwrap();
        let h = 1e-6;
        let mut numeric = Vector6::zeros();
        for k in 0..6 {
            let mut d = Vector6::zeros();
            d[k] = h;
            let plus = energy(&pair, &field, &motion.retract(&Twist::from_vector(&d)), label, &config).unwrap();
            let minus = energy(&pair, &field, &motion.retract(&Twist::from_vector(&-d)), label, &config).unwrap();
            numeric[k] = (plus - minus) / (2.0 * h);
        }
        let rel = (numeric - analytic).norm() / analytic.norm();
        prop_assert!(rel < 1e-4, "relative error {rel}: {numeric:?} vs {analytic:?}");
    }
}

#[test]
fn lm_steps_never_increase_energy() {
    let pair = moving().pair(0);
    let field = base_field();
    for label in ObjectLabel::OBJECTS {
        let s = solve_object(&pair, field, label, &RigidMotion::identity(), &TrackerConfig::default()).unwrap();
        assert!(s.accepted_energies.windows(2).all(|w| w[1] <= w[0]), "{:?}", s.accepted_energies);
        assert!(s.final_energy <= s.initial_energy);
    }
}

#[test]
fn still_pair_tracks_to_identity() {
    let seq = render_sequence(&still_scenario(2)).unwrap();
    let est = track(&seq.pair(0), &TrackerConfig::default());
    for label in ObjectLabel::OBJECTS {
        let o = est.object(label);
        assert!(o.tracked, "{label}: {:?}", o.reason);
        let e = geodesic_error(&o.motion, &RigidMotion::identity()).unwrap();
        assert!(e.tau_norm < 1e-3 && e.phi_norm < 1e-3, "{label}: {e:?}");
    }
}

#[test]
fn moving_pair_recovers_patient_motion() {
    // Quarter resolution: the patient spans ~800 sampled pixels, the drill a few dozen.
    let seq = moving();
    for pair in seq.pairs() {
        let est = track(&pair, &TrackerConfig::default());
        for label in ObjectLabel::OBJECTS {
            for trace in &est.object(label).energy_trace {
                assert!(trace.windows(2).all(|w| w[1] <= w[0]));
            }
        }
        let o = &est.patient;
        assert!(o.tracked);
        let e = geodesic_error(&o.motion, &pair.gt_motion(ObjectLabel::Patient).unwrap()).unwrap();
        assert!(e.tau_norm < 0.2 && e.phi_norm < 0.05, "{e:?}");
    }
}

#[test]
fn tracking_is_deterministic() {
    let pair = moving().pair(1);
    let config = TrackerConfig::default();
    assert_eq!(track(&pair, &config), track(&pair, &config));
}

#[test]
fn absent_drill_is_reported_not_fatal() {
    let mut seq = render_sequence(&still_scenario(2)).unwrap();
    for frame in &mut seq.frames {
        for l in frame.seg.data_mut() {
            if *l == ObjectLabel::Drill {
                *l = ObjectLabel::Background;
            }
        }
    }
    let est = track(&seq.pair(0), &TrackerConfig::default());
    assert!(est.patient.tracked);
    assert!(!est.drill.tracked);
    assert!(est.drill.reason.as_deref().unwrap_or("").contains("drill"));
}

fn oracle_field() -> CorrespondenceField {
    let pair = moving().pair(0);
    let p = pair.gt_motion(ObjectLabel::Patient).unwrap();
    let d = pair.gt_motion(ObjectLabel::Drill).unwrap();
    associate_objects(&pair, &p, &d, &ObjectLabel::OBJECTS, &TrackerConfig::default()).0
}

#[test]
fn exact_targets_are_solved_from_identity() {
    let pair = moving().pair(0);
    let field = oracle_field();
    let config = TrackerConfig::default();
    for label in ObjectLabel::OBJECTS {
        let truth = pair.gt_motion(label).unwrap();
        let s = solve_object(&pair, &field, label, &RigidMotion::identity(), &config).unwrap();
        let e = geodesic_error(&s.motion, &truth).unwrap();
        assert!(e.tau_norm < 1e-4 && e.phi_norm < 1e-4, "{label}: {e:?}");
        let again = solve_object(&pair, &field, label, &truth, &config).unwrap();
        let e = geodesic_error(&again.motion, &truth).unwrap();
        assert!(e.tau_norm < 1e-8 && e.phi_norm < 1e-8, "{label}: {e:?}");
    }
}

#[test]
fn uniform_weight_scale_does_not_move_the_solution() {
    let pair = moving().pair(0);
    let config = TrackerConfig::default();
    let mut field = base_field().clone();
    for n in 0..field.len() {
        field.target[n] += jitter(n, 7) * 0.5 + Vector2::new(1.5, -0.5);
        field.joint_prob[n] = 0.2 + 0.8 * (0.5 + 0.5 * jitter(n, 8).x);
    }
    let mut scaled = field.clone();
    for w in &mut scaled.joint_prob {
        *w *= 0.5;
    }
    let a = solve_object(&pair, &field, ObjectLabel::Patient, &RigidMotion::identity(), &config).unwrap();
    let b = solve_object(&pair, &scaled, ObjectLabel::Patient, &RigidMotion::identity(), &config).unwrap();
    let e = geodesic_error(&a.motion, &b.motion).unwrap();
    assert!(e.tau_norm < 1e-9 && e.phi_norm < 1e-9, "{e:?}");
    assert!((b.final_energy - 0.5 * a.final_energy).abs() <= 1e-9 * a.final_energy.max(1.0));
}

#[test]
fn objects_are_solved_independently() {
    let pair = moving().pair(0);
    let config = TrackerConfig::default();
    let field = oracle_field();
    let mut disturbed = field.clone();
    for n in 0..disturbed.len() {
        if disturbed.label[n] == ObjectLabel::Drill {
            disturbed.target[n] += Vector2::new(3.0, 4.0);
            disturbed.joint_prob[n] = 0.3;
        }
    }
    let a = solve_object(&pair, &field, ObjectLabel::Patient, &RigidMotion::identity(), &config).unwrap();
    let b = solve_object(&pair, &disturbed, ObjectLabel::Patient, &RigidMotion::identity(), &config).unwrap();
    assert_eq!(a, b);
}

#[test]
fn exact_reprojection_agrees_with_kabsch() {
    let pair = moving().pair(0);
    let config = TrackerConfig::default();
    let axis = Vector3::new(0.3, -0.8, 0.5).normalize();
    let truth = RigidMotion::exp(&Twist::new(
        Vector3::new(1.2, -1.0, 1.2),
        axis * 1f64.to_radians(),
    ));
    let (field, empty) = associate_objects(&pair, &truth, &truth, &ObjectLabel::OBJECTS, &config);
    assert!(empty.is_empty());
    let k = pair.intrinsics();
    let label = ObjectLabel::Patient;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for n in (0..field.len()).filter(|&n| field.label[n] == label) {
        let p = k.backproject(&field.source[n], pair.source.depth.at(field.source_pixels[n]) as f64).unwrap();
        a.push(p);
        b.push(truth.act(&p));
    }
    let procrustes = kabsch(&a, &b, None).unwrap();
    let s = solve_object(&pair, &field, label, &RigidMotion::identity(), &config).unwrap();
    let e = geodesic_error(&s.motion, &truth).unwrap();
    assert!(e.tau_norm < 1e-4 && e.phi_norm < 1e-4, "{e:?}");
    let e = geodesic_error(&s.motion, &procrustes).unwrap();
    assert!(e.tau_norm < 1e-3 && e.phi_norm < 1e-3, "{e:?}");
}
