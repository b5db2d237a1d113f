use std::collections::HashSet;
use std::fs;

use luvt_core::dataset::*;
use luvt_core::wavesim::{advance, init_field, simulate_series, DefectSpec, GrayImage, PlateSpec};
use luvt_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn quiet_spec(defect: Option<DefectSpec>) -> PlateSpec {
    PlateSpec {
        grid_nx: 96,
        grid_ny: 96,
        image_width: 48,
        image_height: 48,
        noise_sigma: 0.0,
        defects: defect.into_iter().collect(),
        ..PlateSpec::default()
    }
}

/// Labels recomputed from two independently stepped fields: arrival from the
/// closest point of an axis-aligned slit, energy against the twin's peak.
fn brute_force_labels(spec: &PlateSpec, n: usize, stride: usize, eps: f64) -> Vec<bool> {
    let d = &spec.defects[0];
    let nearest_x = spec.probe_pos.0.clamp(d.center.0 - d.length_mm / 2.0, d.center.0 + d.length_mm / 2.0);
    let nearest_y = spec.probe_pos.1.clamp(d.center.1 - d.width_mm / 2.0, d.center.1 + d.width_mm / 2.0);
    let dist = (nearest_x - spec.probe_pos.0).hypot(nearest_y - spec.probe_pos.1);
    let arrival = (dist / spec.wave_speed_mm_per_us / spec.time_step_us()).ceil() as usize;

    let free_spec = PlateSpec {
        defects: vec![],
        ..spec.clone()
    };
    let mut a = init_field(spec).unwrap();
    let mut b = init_field(&free_spec).unwrap();
    let mut rows = Vec::new();
    for _ in 0..n {
        for _ in 0..stride {
            advance(&mut a, spec).unwrap();
            advance(&mut b, &free_spec).unwrap();
        }
        let diff: f64 = a.u_curr.iter().zip(&b.u_curr).map(|(x, y)| (x - y) * (x - y)).sum();
        let free: f64 = b.u_curr.iter().map(|x| x * x).sum();
        rows.push((a.t_index, diff, free));
    }
    let peak = rows.iter().map(|r| r.2).fold(0.0, f64::max);
    rows.iter().map(|&(t, diff, _)| t >= arrival && diff / peak >= eps).collect()
}

#[test]
fn labels_match_frame_by_frame_oracle() {
    for (x, y) in [(40.0, 40.0), (60.0, 22.0), (20.0, 58.0)] {
        let spec = quiet_spec(Some(DefectSpec::slit_at(x, y)));
        let series = simulate_series(&spec, 80, 3).unwrap();
        let labels = auto_label(&series, &spec, DEFAULT_VISIBILITY).unwrap();
        let oracle = brute_force_labels(&spec, 80, 3, DEFAULT_VISIBILITY);
        let got: Vec<bool> = labels.iter().map(|a| a.label == Class::Defect).collect();
        assert_eq!(got, oracle, "slit at ({x}, {y})");
        assert!(got.iter().any(|&p| p), "slit at ({x}, {y}) never visible");
        // Nothing is positive before the front reaches the slit.
        let arrival = series.defects[0].arrival_step;
        for (m, a) in series.meta.iter().zip(&labels) {
            if m.step < arrival {
                assert_eq!(a.label, Class::NoDefect);
            } else if a.label == Class::Defect {
                assert_eq!(a.center_px, Some(spec.mm_to_px((x, y))));
            }
        }
    }
}

#[test]
fn defect_free_series_is_all_negative() {
    let spec = quiet_spec(None);
    let series = simulate_series(&spec, 30, 3).unwrap();
    let labels = auto_label(&series, &spec, DEFAULT_VISIBILITY).unwrap();
    assert!(labels.iter().all(|a| *a == Annotation::no_defect()));
}

#[test]
fn labeling_needs_metadata() {
    let spec = quiet_spec(Some(DefectSpec::slit_at(40.0, 40.0)));
    let mut series = simulate_series(&spec, 4, 3).unwrap();
    series.meta[2].scattered_energy = None;
    assert!(matches!(auto_label(&series, &spec, 0.01), Err(Error::Validation(_))));
}

fn fake_series(id: u32, frames: usize) -> LabeledSeries {
    LabeledSeries {
        id,
        frames: vec![GrayImage::new(8, 8); frames],
        annotations: vec![Annotation::no_defect(); frames],
    }
}

#[test]
fn series_split_six_two_two() {
    let all: Vec<_> = (1..=10).map(|id| fake_series(id, 3 + id as usize)).collect();
    let (tr, va, te) = split_by_series(all, &SplitConfig::default()).unwrap();
    assert_eq!((tr.len(), va.len(), te.len()), (6, 2, 2));
    let key = |v: &[LabeledSeries]| -> HashSet<(u32, usize)> {
        v.iter().flat_map(|s| s.samples(8)).map(|s| (s.series_id, s.frame_index)).collect()
    };
    let (a, b, c) = (key(&tr), key(&va), key(&te));
    assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
    assert_eq!(a.len() + b.len() + c.len(), (1..=10).map(|id| 3 + id as usize).sum::<usize>());
}

#[test]
fn split_config_errors() {
    let all = || (1..=4).map(|id| fake_series(id, 1)).collect::<Vec<_>>();
    let bad = [
        SplitConfig {
            train_series: vec![1, 2],
            val_series: vec![],
            test_series: vec![3, 4],
        },
        SplitConfig {
            train_series: vec![1, 2],
            val_series: vec![3],
            test_series: vec![3, 4],
        },
        SplitConfig {
            train_series: vec![1],
            val_series: vec![2],
            test_series: vec![3],
        },
        SplitConfig {
            train_series: vec![1, 2],
            val_series: vec![3],
            test_series: vec![9],
        },
    ];
    for cfg in bad {
        assert!(split_by_series(all(), &cfg).is_err(), "{cfg:?}");
    }
}

#[test]
fn layout_mirrors_the_specimen_table() {
    let layout = standard_layout();
    assert_eq!(layout.len(), 10);
    assert_eq!(layout.iter().filter(|e| e.defect.is_none()).count(), 1);
    let positions: HashSet<(i64, i64)> = layout
        .iter()
        .filter_map(|e| e.defect.as_ref())
        .map(|d| (d.center.0 as i64, d.center.1 as i64))
        .collect();
    assert_eq!(positions.len(), 9);
    assert!(layout.iter().flat_map(|e| e.defect.as_ref()).all(|d| d.length_mm == 20.0));
}

fn blank_sample(center: Option<(f64, f64)>) -> Sample {
    let annotation = match center {
        Some((x, y)) => Annotation::defect(x, y),
        None => Annotation::no_defect(),
    };
    Sample {
        image: vec![0.5; 64 * 64],
        width: 64,
        height: 64,
        annotation,
        series_id: 1,
        frame_index: 0,
    }
}

#[test]
fn identity_augmentation_is_bit_exact() {
    let mut s = blank_sample(Some((20.0, 30.0)));
    s.image.iter_mut().enumerate().for_each(|(i, v)| *v = (i % 97) as f32 / 97.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    assert_eq!(augment(&s, &AugmentParams::identity(), &mut rng), s);
}

#[test]
fn shift_moves_the_centre() {
    let m = Affine::translation(10.0, 0.0);
    assert_eq!(m.apply((32.0, 32.0)), (42.0, 32.0));
    let mut img = vec![0.0f32; 64 * 64];
    img[32 * 64 + 32] = 1.0;
    let out = warp(&img, 64, 64, 64, 64, &m, 0.0);
    assert_eq!(out[32 * 64 + 42], 1.0);
}

#[test]
fn quarter_turn_matches_reference_rotation() {
    // Reference: rotate (p - c) by +90° with y pointing down, i.e.
    // (dx, dy) -> (-dy, dx), about the pixel-grid centre (31.5, 31.5).
    let c = (31.5, 31.5);
    let p = (10.0, 32.0);
    let expect = (c.0 - (p.1 - c.1), c.1 + (p.0 - c.0));
    let m = Affine::rotate_scale(c, 90.0, 1.0);
    let got = m.apply(p);
    assert!((got.0 - expect.0).abs() < 1e-12 && (got.1 - expect.1).abs() < 1e-12, "{got:?}");
    assert!((got.0 - 31.0).abs() < 1e-12 && (got.1 - 10.0).abs() < 1e-12);
}

fn brightest(img: &[f32], w: usize) -> (f64, f64) {
    let k = img
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap()
        .0;
    ((k % w) as f64, (k / w) as f64)
}

fn geometric_only() -> AugmentParams {
    AugmentParams {
        brightness: 0.0,
        contrast_min: 1.0,
        contrast_max: 1.0,
        gamma_min: 1.0,
        gamma_max: 1.0,
        noise_sigma: 0.0,
        prob: 1.0,
        ..AugmentParams::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn bright_pixel_follows_the_centre(x in 4usize..60, y in 4usize..60, seed in any::<u64>()) {
        let mut s = blank_sample(Some((x as f64, y as f64)));
        s.image[y * 64 + x] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = augment(&s, &geometric_only(), &mut rng);
        let c = out.annotation.center_px.unwrap();
        let b = brightest(&out.image, 64);
        prop_assert!((b.0 - c.0).hypot(b.1 - c.1) <= 1.5, "centre {:?} brightest {:?}", c, b);
    }

    #[test]
    fn labels_survive_augmentation(x in 0.0f64..63.0, y in 0.0f64..63.0, positive in any::<bool>(), seed in any::<u64>()) {
        let s = blank_sample(positive.then_some((x, y)));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = AugmentParams { prob: 1.0, ..AugmentParams::default() };
        let out = augment(&s, &params, &mut rng);
        prop_assert_eq!(out.annotation.label, s.annotation.label);
        if let Some(c) = out.annotation.center_px {
            prop_assert!(c.0 >= 0.0 && c.0 <= 63.0 && c.1 >= 0.0 && c.1 <= 63.0);
        }
        prop_assert!(out.image.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn augmentation_is_deterministic(seed in any::<u64>(), frame in 0usize..200, epoch in 0usize..50) {
        let s = blank_sample(Some((20.0, 40.0)));
        let params = AugmentParams { prob: 1.0, ..AugmentParams::default() };
        let a = augment(&s, &params, &mut sample_rng(seed, 3, frame, epoch));
        let b = augment(&s, &params, &mut sample_rng(seed, 3, frame, epoch));
        prop_assert_eq!(a, b);
    }
}

#[test]
fn photometric_steps_keep_the_centre() {
    let s = blank_sample(Some((12.0, 50.0)));
    let params = AugmentParams {
        shift: 0.0,
        scale_min: 1.0,
        scale_max: 1.0,
        rotate_deg: 0.0,
        crop_min: 1.0,
        prob: 1.0,
        ..AugmentParams::default()
    };
    let out = augment(&s, &params, &mut ChaCha8Rng::seed_from_u64(5));
    assert_eq!(out.annotation, s.annotation);
    assert_ne!(out.image, s.image);
}

#[test]
fn unplaceable_centre_falls_back_to_the_original() {
    // A fixed 3x zoom about the middle always throws a corner centre out.
    let mut s = blank_sample(Some((63.0, 63.0)));
    s.image[5] = 0.9;
    let params = AugmentParams {
        shift: 0.0,
        scale_min: 3.0,
        scale_max: 3.0,
        rotate_deg: 0.0,
        crop_min: 1.0,
        ..geometric_only()
    };
    let out = augment(&s, &params, &mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(out, s);
}

#[test]
fn series_round_trip_through_disk() {
    let spec = PlateSpec {
        noise_sigma: 0.02,
        seed: 4,
        ..quiet_spec(Some(DefectSpec::slit_at(40.0, 40.0)))
    };
    let entry = LayoutEntry {
        id: 7,
        position: "test",
        defect: Some(DefectSpec::slit_at(40.0, 40.0)),
    };
    let corpus = CorpusConfig {
        n_snapshots: 60,
        ..CorpusConfig::default()
    };
    let series = simulate_entry(&spec, &entry, &corpus).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = save_series(&series, dir.path()).unwrap();
    assert!(path.join("series007_frame0059.pgm").exists());
    assert_eq!(load_series(&path).unwrap(), series);
    assert_eq!(load_corpus(dir.path()).unwrap(), vec![series]);
}

#[test]
fn annotation_csv_rules() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("annotations.csv");
    fs::write(&path, format!("{ANNOTATION_HEADER}\n0,0,,\n1,2,,\n2,1,3.5,4\n")).unwrap();
    let rows = read_annotations(&path).unwrap();
    assert_eq!(rows, vec![Annotation::no_defect(), Annotation::no_defect(), Annotation::defect(3.5, 4.0)]);

    fs::write(&path, format!("{ANNOTATION_HEADER}\n0,2,,\n1,1,,7\n")).unwrap();
    match read_annotations(&path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected parse error, got {other:?}"),
    }
    let msg = read_annotations(&path).unwrap_err().to_string();
    assert!(msg.contains("annotations.csv"), "{msg}");
}

#[test]
fn malformed_pgm_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.pgm");
    fs::write(&path, b"P5\n4 4\n255\n\x00\x01").unwrap();
    assert!(matches!(read_pgm(&path), Err(Error::Parse { .. })));
    fs::write(&path, b"P2\n1 1\n255\n0").unwrap();
    assert!(matches!(read_pgm(&path), Err(Error::Parse { .. })));
    let img = GrayImage {
        width: 3,
        height: 2,
        data: vec![0, 1, 2, 253, 254, 255],
    };
    write_pgm(&path, &img).unwrap();
    assert_eq!(read_pgm(&path).unwrap(), img);
}

#[test]
fn resized_frames_carry_the_centre() {
    let mut frame = GrayImage::new(32, 32);
    frame.data[10 * 32 + 20] = 255;
    let s = Sample::from_frame(&frame, Annotation::defect(20.0, 10.0), 64, 1, 0);
    let c = s.annotation.center_px.unwrap();
    assert_eq!((s.width, s.height), (64, 64));
    assert!((c.0 - 40.5).abs() < 1e-12 && (c.1 - 20.5).abs() < 1e-12);
    let b = brightest(&s.image, 64);
    assert!((b.0 - c.0).hypot(b.1 - c.1) <= 1.5);
}
