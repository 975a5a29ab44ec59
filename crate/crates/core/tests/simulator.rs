mod common;

use std::sync::OnceLock;

use common::{oracle_geodesic, small_scenario, still_scenario};
use jointtrack::camera::is_valid_depth;
use jointtrack::simulator::{
    add_noise, boundary_mask, render, render_sequence, sample_trajectory, simulate, ConfModel, NoiseSpec,
    Scenario, BOUNDARY_RADIUS,
};
use jointtrack::{ObjectLabel, RigidMotion, Sequence};
use nalgebra::Vector2;

fn clean() -> &'static Sequence {
    static SEQ: OnceLock<Sequence> = OnceLock::new();
    SEQ.get_or_init(|| render_sequence(&small_scenario(4, 5)).unwrap())
}

fn noise(sigma: f64, outliers: f64, flip: f64) -> NoiseSpec {
    NoiseSpec {
        depth_sigma: sigma,
        outlier_fraction: outliers,
        seg_boundary_flip: flip,
        conf_model: ConfModel::Oracle,
    }
}

fn valid_pixels(seq: &Sequence, t: usize) -> Vec<usize> {
    (0..seq.frames[t].depth.data().len())
        .filter(|&i| seq.frames[t].has_valid_depth(i))
        .collect()
}

#[test]
fn depth_noise_has_requested_spread() {
    let noisy = add_noise(clean(), &noise(0.5, 0.0, 0.0), 3);
    let mut diffs = Vec::new();
    for t in 0..clean().len() {
        for i in valid_pixels(clean(), t) {
            diffs.push(noisy.frames[t].depth.at(i) as f64 - clean().frames[t].depth.at(i) as f64);
        }
    }
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((0.45..=0.55).contains(&std), "std {std}");
    assert!(mean.abs() < 0.02, "mean {mean}");
}

#[test]
fn outlier_count_and_range() {
    let noisy = add_noise(clean(), &noise(0.0, 0.2, 0.0), 3);
    for t in 0..clean().len() {
        let valid = valid_pixels(clean(), t);
        let changed: Vec<usize> = valid
            .iter()
            .copied()
            .filter(|&i| noisy.frames[t].depth.at(i) != clean().frames[t].depth.at(i))
            .collect();
        assert_eq!(changed.len(), (0.2 * valid.len() as f64).floor() as usize);
        for i in changed {
            let z = clean().frames[t].depth.at(i) as f64;
            let d = noisy.frames[t].depth.at(i) as f64;
            assert!(d >= 0.5 * z - 1e-3 && d <= 1.5 * z + 1e-3);
            assert!(noisy.frames[t].depth_conf.at(i) < 1.0);
        }
    }
}

#[test]
fn label_flips_stay_near_boundaries() {
    let noisy = add_noise(clean(), &noise(0.0, 0.0, 0.5), 9);
    let mut flips = 0;
    for t in 0..clean().len() {
        let c = &clean().frames[t];
        let n = &noisy.frames[t];
        let near = boundary_mask(&c.seg, BOUNDARY_RADIUS);
        for i in 0..c.seg.data().len() {
            if c.seg.at(i) != n.seg.at(i) {
                flips += 1;
                assert!(near.at(i));
                assert_eq!(n.seg_conf.at(i), 0.5);
            } else {
                assert_eq!(n.seg_conf.at(i), 1.0);
            }
        }
    }
    assert!(flips > 0);
}

#[test]
fn heuristic_confidences_use_observed_maps_only() {
    let spec = NoiseSpec {
        conf_model: ConfModel::Heuristic,
        ..noise(0.5, 0.05, 0.2)
    };
    let noisy = add_noise(clean(), &spec, 4);
    let f = &noisy.frames[1];
    let near = boundary_mask(&f.seg, BOUNDARY_RADIUS);
    for i in 0..f.seg.data().len() {
        let expected = if near.at(i) { 0.5 } else { 1.0 };
        assert_eq!(f.seg_conf.at(i), expected);
        assert!((0.0..=1.0).contains(&f.depth_conf.at(i)));
    }
}

#[test]
fn zero_noise_leaves_frames_untouched() {
    assert_eq!(&add_noise(clean(), &NoiseSpec::default(), 1), clean());
}

#[test]
fn generation_is_deterministic_and_prefix_stable() {
    let s = small_scenario(3, 5);
    let mut noisy = s.clone();
    noisy.noise = noise(0.5, 0.05, 0.2);
    let a = simulate(&noisy).unwrap();
    assert_eq!(a, simulate(&noisy).unwrap());
    assert_eq!(render_sequence(&s).unwrap(), clean().prefix(3));
    assert_eq!(add_noise(clean(), &noisy.noise, 5).prefix(3), a);

    let mut other = noisy.clone();
    other.trajectory.seed = 6;
    assert_ne!(simulate(&other).unwrap().poses, a.poses);
}

#[test]
fn interframe_motions_telescope() {
    let mut s = Scenario::default();
    s.trajectory.frames = 30;
    let poses = sample_trajectory(&s);
    let seq = Sequence {
        intrinsics: s.scene.intrinsics,
        frames: Vec::new(),
        poses,
    };
    for label in ObjectLabel::OBJECTS {
        let mut chained = RigidMotion::identity();
        for t in 0..29 {
            chained = seq.gt_interframe_motion(t, label).unwrap().compose(&chained);
            let direct = seq.poses[t + 1].get(label).unwrap();
            let (mm, deg) = oracle_geodesic(&chained, &direct);
            assert!(mm < 1e-9 && deg < 1e-9, "{label} frame {t}: {mm} {deg}");
        }
    }
}

#[test]
fn sampled_motions_have_requested_magnitudes() {
    let mut s = Scenario::default();
    s.trajectory.frames = 200;
    let poses = sample_trajectory(&s);
    let skull = s.scene.skull.center;
    let drill = 0.5 * (s.scene.drill.start + s.scene.drill.end);
    for (label, centroid, sampler) in [
        (ObjectLabel::Patient, skull, &s.trajectory.patient),
        (ObjectLabel::Drill, drill, &s.trajectory.drill),
    ] {
        let mut angles = Vec::new();
        for t in 0..199 {
            let a = poses[t].get(label).unwrap();
            let b = poses[t + 1].get(label).unwrap();
            let step = b.compose(&a.inverse());
            let deg = step.angle().to_degrees();
            let shift = (b.act(&centroid) - a.act(&centroid)).norm();
            assert!(deg >= sampler.rotation_deg[0] - 1e-9 && deg <= sampler.rotation_deg[1] + 1e-9);
            assert!(shift >= sampler.translation_mm[0] - 1e-9 && shift <= sampler.translation_mm[1] + 1e-9);
            angles.push(deg);
        }
        let mean = angles.iter().sum::<f64>() / angles.len() as f64;
        let mid = 0.5 * (sampler.rotation_deg[0] + sampler.rotation_deg[1]);
        assert!((mean - mid).abs() < 0.1 * mid, "{label} mean {mean}");
    }
}

#[test]
fn rendered_points_lie_on_the_primitives() {
    let mut s = still_scenario(1);
    s.scene.skull.bump_amplitude = 0.0;
    let f = render(&s.scene, &RigidMotion::identity(), &RigidMotion::identity());
    let k = &s.scene.intrinsics;
    let (a, b) = (s.scene.drill.start, s.scene.drill.end);
    let axis = (b - a).normalize();
    let (mut patient, mut drill) = (0, 0);
    for i in 0..f.depth.data().len() {
        let (u, v) = f.seg.coords_of(i);
        let d = f.depth.at(i) as f64;
        match f.seg.at(i) {
            ObjectLabel::Background => assert!(!is_valid_depth(d)),
            ObjectLabel::Patient => {
                patient += 1;
                let p = k.backproject(&Vector2::new(u as f64, v as f64), d).unwrap();
                let r = (p - s.scene.skull.center).norm();
                assert!((r - s.scene.skull.radius).abs() < 0.05, "radius {r}");
                assert!(p.z <= s.scene.skull.center.z + 0.05);
            }
            ObjectLabel::Drill => {
                drill += 1;
                let p = k.backproject(&Vector2::new(u as f64, v as f64), d).unwrap();
                let along = (p - a).dot(&axis);
                let radial = ((p - a) - axis * along).norm();
                let len = (b - a).norm();
                let on_side = (radial - s.scene.drill.radius).abs() < 0.05;
                let on_cap = (along.abs() < 0.05 || (along - len).abs() < 0.05) && radial <= s.scene.drill.radius + 0.05;
                assert!(on_side || on_cap, "along {along} radial {radial}");
            }
        }
    }
    assert!(patient > 1000 && drill > 50, "{patient} {drill}");
}

#[test]
fn intensity_is_quantized() {
    let f = &clean().frames[0];
    for &g in f.gray.data() {
        let k = (g as f64 * 255.0).round();
        assert!((g as f64 - k / 255.0).abs() < 1e-6);
    }
}
