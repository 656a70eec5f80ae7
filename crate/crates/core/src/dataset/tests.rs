use std::fs;

use proptest::prelude::*;

use super::*;
use crate::flow::{flow_epe, lk_flow, FlowField, LkParams};
use crate::geometry::{accumulate, decompose, format_kitti_poses, PoseIncrement, PoseMatrix};
use crate::Exec;

fn inc(dp: f64, dphi: f64) -> PoseIncrement {
    PoseIncrement::new(dp, dphi).unwrap()
}

/// Independent ray-casting: unproject with explicit trig, intersect the
/// ground, move the point into the next vehicle frame, project again.
fn raycast_flow(spec: &SceneSpec, dp: f64, dphi: f64, x: f64, y: f64) -> (f64, f64) {
    let (cx, cy) = ((spec.width as f64 - 1.0) / 2.0, (spec.height as f64 - 1.0) / 2.0);
    let (sp, cp) = spec.pitch.sin_cos();
    let (a, b) = ((x - cx) / spec.focal, (y - cy) / spec.focal);
    // camera → vehicle
    let (vx, vy, vz) = (a, cp * b + sp, -sp * b + cp);
    let lam = spec.cam_height / vy;
    let (gx, gy, gz) = (lam * vx, lam * vy, lam * vz);
    // next vehicle frame: translate back by dp along z, then undo the yaw
    let (tx, tz) = (gx, gz - dp);
    let (s, c) = dphi.sin_cos();
    let (nx, nz) = (c * tx + s * tz, -s * tx + c * tz);
    let ny = gy;
    // vehicle → camera
    let (kx, ky, kz) = (nx, cp * ny - sp * nz, sp * ny + cp * nz);
    if kz <= 0.0 {
        return (f64::NAN, f64::NAN);
    }
    (spec.focal * kx / kz + cx - x, spec.focal * ky / kz + cy - y)
}

#[test]
fn homography_matches_raycast_oracle() {
    let spec = SceneSpec::default();
    for &(dp, dphi) in &[(1.0, 0.0), (0.2, 0.05), (0.0, -0.1), (2.5, 0.2)] {
        let f = ground_flow(&spec, &inc(dp, dphi));
        for y in (0..spec.height).step_by(7) {
            for x in (0..spec.width).step_by(11) {
                let (u, v) = f.at(x, y);
                let (ou, ov) = raycast_flow(&spec, dp, dphi, x as f64, y as f64);
                if ou.is_nan() {
                    assert!(u.is_nan() && v.is_nan());
                    continue;
                }
                assert!((u - ou).abs() < 0.1 && (v - ov).abs() < 0.1, "({x},{y}) dp={dp}: {u},{v} vs {ou},{ov}");
                assert!((u - ou).abs() < 1e-8 && (v - ov).abs() < 1e-8);
            }
        }
    }
}

#[test]
fn forward_motion_expands_from_focus() {
    let spec = SceneSpec::default();
    let f = ground_flow(&spec, &inc(1.0, 0.0));
    let cx = (spec.width as f64 - 1.0) / 2.0;
    for y in 0..spec.height {
        for x in 0..spec.width {
            let (u, v) = f.at(x, y);
            // ground points move down and away from the centre column
            assert!(v > 0.0);
            let dx = x as f64 - cx;
            if dx.abs() > 1.0 {
                assert_eq!(u.signum(), dx.signum(), "({x},{y})");
            }
        }
    }
}

#[test]
fn zero_increment_gives_identical_frames() {
    let spec = SceneSpec { seed: 4, ..SceneSpec::default() };
    let s = render_pair(&spec, &inc(0.0, 0.0)).unwrap();
    assert_eq!(s.prev, s.next);
    assert_eq!(s.gt, inc(0.0, 0.0));
}

#[test]
fn seeds_change_texture() {
    let a = render_view(&SceneSpec { seed: 1, ..SceneSpec::default() }, &CameraPose::default(), Exec::Sequential)
        .unwrap();
    let b = render_view(&SceneSpec { seed: 2, ..SceneSpec::default() }, &CameraPose::default(), Exec::Sequential)
        .unwrap();
    let d = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(d > 0.1, "max difference {d}");
}

#[test]
fn excessive_motion_rejected() {
    let spec = SceneSpec::default();
    assert!(matches!(render_pair(&spec, &inc(3.0, 0.2)), Err(DatasetError::TooMuchMotion { .. })));
}

#[test]
fn bad_scene_rejected() {
    for spec in [
        SceneSpec { focal: 0.0, ..SceneSpec::default() },
        SceneSpec { cam_height: -1.0, ..SceneSpec::default() },
        SceneSpec { pitch: 0.0, ..SceneSpec::default() },
    ] {
        assert!(render_view(&spec, &CameraPose::default(), Exec::Sequential).is_err());
    }
}

#[test]
fn warped_next_matches_direct_render() {
    // warping the first view and rendering the second view from the texture
    // agree away from the clamped border
    let spec = SceneSpec { seed: 8, ..SceneSpec::default() };
    let i = inc(0.15, 0.03);
    let pair = render_pair(&spec, &i).unwrap();
    let direct = render_view(&spec, &CameraPose::default().step(&i), Exec::Sequential).unwrap();
    let flow = ground_flow(&spec, &i);
    let mut total = 0.0;
    let mut n = 0;
    for y in 10..spec.height - 10 {
        for x in 20..spec.width - 20 {
            let (u, v) = flow.at(x, y);
            let (nx, ny) = (x as f64 + u, y as f64 + v);
            if nx < 2.0 || ny < 2.0 || nx > spec.width as f64 - 3.0 || ny > spec.height as f64 - 3.0 {
                continue;
            }
            total += (pair.next.sample(nx, ny) - direct.sample(nx, ny)).abs();
            n += 1;
        }
    }
    let mad = total / n as f64;
    assert!(mad < 0.02, "mean abs difference {mad}");
}

fn margin_epe(est: &FlowField, gt: &FlowField, spec: &SceneSpec, margin: usize) -> f64 {
    // only pixels whose target stays inside the frame
    let mut total = 0.0;
    let mut n = 0;
    for y in margin..spec.height - margin {
        for x in margin..spec.width - margin {
            let (gu, gv) = gt.at(x, y);
            let (tx, ty) = (x as f64 + gu, y as f64 + gv);
            if tx < 0.0 || ty < 0.0 || tx > (spec.width - 1) as f64 || ty > (spec.height - 1) as f64 {
                continue;
            }
            let (eu, ev) = est.at(x, y);
            total += ((eu - gu).powi(2) + (ev - gv).powi(2)).sqrt();
            n += 1;
        }
    }
    total / n as f64
}

#[test]
fn lk_recovers_rendered_flow() {
    let params = LkParams::default();
    for (seed, dp, dphi) in [(1, 0.1, 0.0), (2, 0.2, 0.03), (3, 0.25, -0.05), (4, 0.05, 0.05)] {
        let spec = SceneSpec { seed, ..SceneSpec::default() };
        let i = inc(dp, dphi);
        let pair = render_pair(&spec, &i).unwrap();
        let est = lk_flow(&pair.prev, &pair.next, &params).unwrap();
        let gt = ground_flow(&spec, &i);
        let epe = margin_epe(&est, &gt, &spec, 8);
        assert!(epe < 0.5, "seed {seed}: EPE {epe}");
        let _ = flow_epe;
    }
}

#[test]
fn synth_increments_basic() {
    let r = SynthRanges::default();
    assert!(synth_increments(3, 0, &r).unwrap().is_empty());
    assert_eq!(synth_increments(3, 50, &r).unwrap(), synth_increments(3, 50, &r).unwrap());
    assert_ne!(synth_increments(3, 50, &r).unwrap(), synth_increments(4, 50, &r).unwrap());
}

#[test]
fn synth_increments_stay_in_range() {
    let r = SynthRanges { dp: (0.5, 2.0), dphi: (-0.15, 0.1) };
    let v = synth_increments(9, 10_000, &r).unwrap();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut plo, mut phi) = (f64::INFINITY, f64::NEG_INFINITY);
    for w in v.windows(2) {
        assert!((w[1].dphi - w[0].dphi).abs() <= 0.02 + 1e-15);
    }
    for i in &v {
        lo = lo.min(i.dp);
        hi = hi.max(i.dp);
        plo = plo.min(i.dphi);
        phi = phi.max(i.dphi);
    }
    assert!(lo >= 0.5 && hi <= 2.0 && plo >= -0.15 && phi <= 0.1);
    // the walk actually explores the range
    assert!(hi - lo > 1.0 && phi - plo > 0.15);
}

#[test]
fn synth_ranges_validated() {
    for r in [
        SynthRanges { dp: (-0.1, 1.0), dphi: (0.0, 0.1) },
        SynthRanges { dp: (0.0, 3.5), dphi: (0.0, 0.1) },
        SynthRanges { dp: (1.0, 0.5), dphi: (0.0, 0.1) },
        SynthRanges { dp: (0.0, 1.0), dphi: (-0.3, 0.1) },
    ] {
        assert!(synth_increments(0, 5, &r).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn increment_round_trips_through_matrices(dp in 0.0f64..3.0, dphi in -0.2f64..0.2) {
        let gt = inc(dp, dphi);
        let (_, poses) = accumulate(&[gt]);
        let back = decompose(&poses[0], &poses[1]).unwrap();
        prop_assert!((back.dp - gt.dp).abs() < 1e-12);
        prop_assert!((back.dphi - gt.dphi).abs() < 1e-12);
    }

    #[test]
    fn batches_are_a_permutation(n in 0usize..60, b in 1usize..9, seed in 0u64..100) {
        let items: Vec<usize> = (0..n).map(|i| i * 3).collect();
        let batches = make_batches(&items, b, seed).unwrap();
        prop_assert!(batches.iter().all(|x| !x.is_empty() && x.len() <= b));
        let mut flat: Vec<usize> = batches.concat();
        flat.sort_unstable();
        prop_assert_eq!(flat, items);
    }
}

#[test]
fn batch_sizes_and_determinism() {
    let items: Vec<u32> = (0..10).collect();
    let b = make_batches(&items, 4, 7).unwrap();
    assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
    assert_eq!(b, make_batches(&items, 4, 7).unwrap());
    assert_ne!(b, make_batches(&items, 4, 8).unwrap());
    assert!(make_batches(&items, 0, 0).is_err());
}

fn write_rgb(path: &std::path::Path, w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) {
    image::RgbImage::from_fn(w, h, |x, y| image::Rgb(f(x, y))).save(path).unwrap();
}

#[test]
fn load_two_frames_with_poses() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("image_2")).unwrap();
    write_rgb(&dir.path().join("image_2/000000.png"), 6, 4, |x, y| [(x * 40) as u8, (y * 60) as u8, 10]);
    write_rgb(&dir.path().join("image_2/000001.png"), 6, 4, |_, _| [255, 0, 0]);
    let poses = vec![PoseMatrix::identity(), PoseMatrix::identity()];
    fs::write(dir.path().join("poses.txt"), format_kitti_poses(&poses)).unwrap();

    let seq = load_kitti(dir.path(), &LoadOptions::default()).unwrap();
    let samples = seq.samples().unwrap();
    assert_eq!(samples.len(), 1);
    assert_eq!(samples[0].gt, PoseIncrement { dp: 0.0, dphi: 0.0 });
    // luma oracle
    let want = (0.299 * 80.0 + 0.587 * 60.0 + 0.114 * 10.0) / 255.0;
    assert!((samples[0].prev.get(2, 1) - want).abs() < 1e-12);
    assert!((samples[0].next.get(0, 0) - 0.299).abs() < 1e-12);
    assert_eq!((seq.manifest.width, seq.manifest.height), (6, 4));

    let again = load_kitti(dir.path(), &LoadOptions::default()).unwrap();
    assert_eq!(seq, again);
}

#[test]
fn pose_count_mismatch_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("image_2")).unwrap();
    for i in 0..2 {
        write_rgb(&dir.path().join(format!("image_2/{i:06}.png")), 4, 4, |_, _| [9, 9, 9]);
    }
    let poses = vec![PoseMatrix::identity(); 3];
    fs::write(dir.path().join("poses.txt"), format_kitti_poses(&poses)).unwrap();
    assert!(matches!(
        load_kitti(dir.path(), &LoadOptions::default()),
        Err(DatasetError::PoseCount { poses: 3, images: 2 })
    ));
}

#[test]
fn center_crop_and_stride() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("image_2")).unwrap();
    for i in 0..5u32 {
        write_rgb(&dir.path().join(format!("image_2/{i:06}.png")), 8, 6, move |x, y| {
            [(x * 30 + i) as u8, (y * 40) as u8, 0]
        });
    }
    let poses: Vec<PoseMatrix> = (0..5).map(|i| PoseMatrix::planar(0.0, 0.0, i as f64)).collect();
    fs::write(dir.path().join("poses.txt"), format_kitti_poses(&poses)).unwrap();
    let opts = LoadOptions { size: Some((4, 2)), stride: 2, ..LoadOptions::default() };
    let seq = load_kitti(dir.path(), &opts).unwrap();
    assert_eq!(seq.images.len(), 3);
    assert_eq!(seq.increments.as_ref().unwrap().iter().map(|i| i.dp).collect::<Vec<_>>(), vec![2.0, 2.0]);
    // crop origin (2, 2); frame index 2
    let want = (0.299 * (2.0 * 30.0 + 2.0) + 0.587 * 80.0) / 255.0;
    assert!((seq.images[1].get(0, 0) - want).abs() < 1e-12);

    let too_big = LoadOptions { size: Some((10, 6)), ..LoadOptions::default() };
    assert!(matches!(load_kitti(dir.path(), &too_big), Err(DatasetError::TooSmall { .. })));
    let zero = LoadOptions { stride: 0, ..LoadOptions::default() };
    assert!(load_kitti(dir.path(), &zero).is_err());
}

#[test]
fn missing_inputs_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_kitti(dir.path(), &LoadOptions::default()), Err(DatasetError::Missing(_))));
    fs::create_dir(dir.path().join("image_2")).unwrap();
    fs::write(dir.path().join("image_2/000000.png"), b"not a png").unwrap();
    fs::write(dir.path().join("image_2/000001.png"), b"not a png").unwrap();
    assert!(matches!(load_kitti(dir.path(), &LoadOptions::default()), Err(DatasetError::Image { .. })));
    let opts = LoadOptions { poses: Some(dir.path().join("nope.txt")), ..LoadOptions::default() };
    assert!(matches!(load_kitti(dir.path(), &opts), Err(DatasetError::Missing(_))));
}

#[test]
fn written_sequence_loads_back() {
    let spec = SceneSpec { width: 64, height: 32, focal: 60.0, seed: 5, ..SceneSpec::default() };
    let incs = vec![inc(0.1, 0.02), inc(0.12, 0.0)];
    let frames = render_sequence(&spec, &incs, Exec::Sequential).unwrap();
    let (_, poses) = accumulate(&incs);
    let dir = tempfile::tempdir().unwrap();
    write_sequence(dir.path(), &frames, Some(&poses)).unwrap();
    let seq = load_kitti(dir.path(), &LoadOptions::default()).unwrap();
    assert_eq!(seq.images.len(), 3);
    for (a, b) in seq.images.iter().zip(&frames) {
        let d = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(d <= 0.5 / 255.0 + 1e-12);
        assert_eq!(a, &quantize_8bit(b));
    }
    for (got, want) in seq.increments.unwrap().iter().zip(&incs) {
        assert!((got.dp - want.dp).abs() < 1e-12 && (got.dphi - want.dphi).abs() < 1e-12);
    }
    let single = read_gray_image(&seq.manifest.images[1]).unwrap();
    assert_eq!(single, seq.images[1]);
}

#[test]
fn plain_png_folder_loads() {
    let spec = SceneSpec { width: 64, height: 32, focal: 60.0, ..SceneSpec::default() };
    let frames = render_sequence(&spec, &[inc(0.1, 0.0)], Exec::Sequential).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_sequence(dir.path(), &frames, None).unwrap();
    let flat = dir.path().join("image_2");
    let seq = load_kitti(&flat, &LoadOptions::default()).unwrap();
    assert_eq!(seq.images.len(), 2);
    assert!(seq.poses.is_none());
}
