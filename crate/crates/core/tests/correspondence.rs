mod common;

use std::sync::OnceLock;

use common::small_scenario;
use jointtrack::correspondence::{
    associate, build_features, joint_from_factors, joint_probability, refine, CorrespondenceField,
};
use jointtrack::simulator::render_sequence;
use jointtrack::{Error, ObjectLabel, RigidMotion, Sequence, TrackerConfig, Twist};
use nalgebra::{Vector2, Vector3};
use proptest::prelude::*;

fn moving() -> &'static Sequence {
    static SEQ: OnceLock<Sequence> = OnceLock::new();
    SEQ.get_or_init(|| render_sequence(&small_scenario(2, 21)).unwrap())
}

fn gt_field(config: &TrackerConfig) -> CorrespondenceField {
    let pair = moving().pair(0);
    let p = pair.gt_motion(ObjectLabel::Patient).unwrap();
    let d = pair.gt_motion(ObjectLabel::Drill).unwrap();
    associate(&pair, &p, &d, config).unwrap()
}

/// Projection of source pixel `n` under its object's true motion, computed directly.
fn true_target(field: &CorrespondenceField, n: usize) -> Vector2<f64> {
    let seq = moving();
    let pair = seq.pair(0);
    let k = &seq.intrinsics;
    let i = field.source_pixels[n];
    let z = pair.source.depth.at(i) as f64;
    let s = field.source[n];
    let p = Vector3::new((s.x - k.cx) * z / k.fx, (s.y - k.cy) * z / k.fy, z);
    let q = pair.gt_motion(field.label[n]).unwrap().act(&p);
    Vector2::new(k.fx * q.x / q.z + k.cx, k.fy * q.y / q.z + k.cy)
}

#[test]
fn identity_association_has_zero_flow() {
    let pair = moving().pair(0);
    let id = RigidMotion::identity();
    let field = associate(&pair, &id, &id, &TrackerConfig::default()).unwrap();
    assert!(field.count(ObjectLabel::Patient) > 0 && field.count(ObjectLabel::Drill) > 0);
    for n in 0..field.len() {
        assert!(field.flow[n].norm() < 1e-9);
    }
}

#[test]
fn association_uses_each_objects_own_motion() {
    let field = gt_field(&TrackerConfig::default());
    let pair = moving().pair(0);
    for n in 0..field.len() {
        assert_eq!(pair.source.seg.at(field.source_pixels[n]), field.label[n]);
        assert!((field.target[n] - true_target(&field, n)).norm() < 1e-6);
    }
}

#[test]
fn drill_leaving_the_view_is_an_empty_object() {
    let pair = moving().pair(0);
    let away = RigidMotion::exp(&Twist::new(Vector3::new(500.0, 0.0, 0.0), Vector3::zeros()));
    let r = associate(&pair, &RigidMotion::identity(), &away, &TrackerConfig::default());
    assert!(matches!(r, Err(Error::EmptyObject(ObjectLabel::Drill))));
}

#[test]
fn refinement_stays_on_true_targets() {
    let config = TrackerConfig::default();
    let pair = moving().pair(0);
    let field = gt_field(&config);
    let ft = build_features(pair.source, &config);
    let ft1 = build_features(pair.target, &config);
    let refined = refine(&pair, &field, &ft, &ft1, &config);
    let textured: Vec<usize> = (0..field.len())
        .filter(|&n| field.label[n] == ObjectLabel::Patient && !ft.is_degenerate(field.source_pixels[n]))
        .collect();
    let close = textured
        .iter()
        .filter(|&&n| (refined.target[n] - true_target(&field, n)).norm() < 0.5)
        .count();
    let frac = close as f64 / textured.len() as f64;
    assert!(frac >= 0.95, "{close}/{}", textured.len());
}

#[test]
fn refinement_recovers_displaced_targets() {
    let config = TrackerConfig::default();
    let pair = moving().pair(0);
    let mut field = gt_field(&config);
    let ft = build_features(pair.source, &config);
    let ft1 = build_features(pair.target, &config);
    let shift = Vector2::new(2.0, -1.0);
    for n in 0..field.len() {
        field.target[n] += shift;
    }
    let refined = refine(&pair, &field, &ft, &ft1, &config);
    let textured: Vec<usize> = (0..field.len())
        .filter(|&n| {
            field.label[n] == ObjectLabel::Patient
                && !ft.is_degenerate(field.source_pixels[n])
                && pair.intrinsics().contains(&field.target[n])
        })
        .collect();
    let close = textured
        .iter()
        .filter(|&&n| (refined.target[n] - true_target(&field, n)).norm() < 1.0)
        .count();
    let frac = close as f64 / textured.len() as f64;
    assert!(frac >= 0.8, "{close}/{}", textured.len());
}

#[test]
fn refinement_is_nearly_idempotent() {
    let config = TrackerConfig::default();
    let pair = moving().pair(0);
    let field = gt_field(&config);
    let ft = build_features(pair.source, &config);
    let ft1 = build_features(pair.target, &config);
    let once = refine(&pair, &field, &ft, &ft1, &config);
    let twice = refine(&pair, &once, &ft, &ft1, &config);
    let moved = (0..once.len())
        .filter(|&n| !ft.is_degenerate(once.source_pixels[n]))
        .filter(|&n| (twice.target[n] - once.target[n]).norm() > 0.1)
        .count();
    assert!(moved as f64 <= 0.05 * once.len() as f64, "{moved}/{}", once.len());
}

#[test]
fn joint_probabilities_are_bounded_by_refinement() {
    let config = TrackerConfig::default();
    let pair = moving().pair(0);
    let field = gt_field(&config);
    let ft = build_features(pair.source, &config);
    let ft1 = build_features(pair.target, &config);
    let weighted = joint_probability(&pair, &refine(&pair, &field, &ft, &ft1, &config));
    for n in 0..weighted.len() {
        let w = weighted.joint_prob[n];
        assert!((0.0..=1.0).contains(&w));
        assert!(w <= weighted.refine_conf[n] + 1e-12);
    }
}

#[test]
fn csv_dump_has_one_row_per_correspondence() {
    let field = gt_field(&TrackerConfig::default());
    let mut out = Vec::new();
    field.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "u_t,v_t,u_t1,v_t1,flow_u,flow_v,refine_conf,joint_prob,label");
    assert_eq!(lines.clone().count(), field.len());
    assert!(lines.all(|l| l.split(',').count() == 9));
}

proptest! {
    #[test]
    fn joint_probability_is_monotone(
        factors in prop::array::uniform5(0.0..=1.0f64),
        k in 0usize..5,
        bump in 0.0..=1.0f64,
    ) {
        let base = joint_from_factors(&factors);
        let mut raised = factors;
        raised[k] = (raised[k] + bump).min(1.0);
        prop_assert!(joint_from_factors(&raised) >= base);
        prop_assert!(base <= factors.iter().cloned().fold(1.0, f64::min) + 1e-15);
    }
}
