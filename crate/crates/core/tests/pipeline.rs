use std::fs;

use proptest::prelude::*;
use selrcn::layers::Mode;
use selrcn::pipeline::manifest::{frame_path, load_dataset, load_manifest, read_ppm, write_dataset, write_ppm};
use selrcn::pipeline::synth::{synth_generate, SynthConfig};
use selrcn::pipeline::{
    augment_segment, crop, denormalize, flip_horizontal, gather_segment, normalize, resize_bilinear,
    resize_short_side, segment_starts, segment_video, short_side_size, AugmentConfig, SegmentSpec, VideoSample,
};
use selrcn::{rng, Error, Tensor};

fn ramp(c: usize, h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_fn(&[c, h, w], |i| i as f32)
}

fn video(frames: usize, h: usize, w: usize) -> VideoSample {
    let data = Tensor::from_fn(&[frames, 3, h, w], |i| ((i * 37) % 251) as f32 / 250.0);
    VideoSample::new(data, 1, "v").unwrap()
}

#[test]
fn segment_counts_for_standard_windows() {
    let spec = SegmentSpec::full();
    for (t, n) in [(1, 1), (20, 1), (30, 1), (31, 2), (40, 2), (45, 2), (46, 3), (75, 4)] {
        assert_eq!(segment_starts(t, &spec).unwrap().len(), n, "T = {t}");
    }
    assert_eq!(segment_starts(10, &SegmentSpec::tiny()).unwrap(), vec![0]);
    assert_eq!(segment_starts(21, &SegmentSpec::tiny()).unwrap(), vec![0, 5, 10, 15]);
}

#[test]
fn invalid_specs_are_rejected() {
    for spec in [SegmentSpec { length: 0, stride: 1 }, SegmentSpec { length: 4, stride: 0 }, SegmentSpec { length: 4, stride: 5 }] {
        assert!(matches!(segment_starts(10, &spec), Err(Error::Input(_))));
    }
}

#[test]
fn last_segment_wraps_to_first_frame() {
    let segs = segment_video(40, 2, &SegmentSpec::full()).unwrap();
    assert_eq!(segs.iter().map(|s| s.start).collect::<Vec<_>>(), vec![0, 15]);
    let want: Vec<usize> = (15..40).chain(0..5).collect();
    assert_eq!(segs[1].frames, want);
    assert!(segs.iter().all(|s| s.label == 2));
}

#[test]
fn gathered_segment_copies_frames() {
    let v = video(4, 5, 6);
    let segs = segment_video(4, 1, &SegmentSpec { length: 6, stride: 3 }).unwrap();
    let seg = gather_segment(&v, &segs[0]).unwrap();
    assert_eq!(seg.shape(), &[6, 3, 5, 6]);
    for (row, &t) in segs[0].frames.iter().enumerate() {
        assert_eq!(seg.slice_outer(row, 1).unwrap().data(), v.frames.slice_outer(t, 1).unwrap().data());
    }
}

#[test]
fn normalize_examples() {
    let cfg = AugmentConfig::tiny();
    let mut x = Tensor::<f32>::zeros(&[3, 2, 2]);
    for (c, m) in cfg.mean.iter().enumerate() {
        for i in 0..4 {
            x.data_mut()[c * 4 + i] = *m;
        }
    }
    assert!(normalize(&x, &cfg).unwrap().data().iter().all(|&v| v == 0.0));
    let ones = normalize(&Tensor::ones(&[3, 1, 1]), &cfg).unwrap();
    for c in 0..3 {
        assert!((ones.data()[c] - (1.0 - cfg.mean[c]) / cfg.std[c]).abs() < 1e-6);
    }
    assert!(normalize(&Tensor::<f32>::zeros(&[4, 2, 2]), &cfg).is_err());
}

#[test]
fn short_side_resize_sizes() {
    assert_eq!(short_side_size(480, 640, 256), (256, 341));
    assert_eq!(short_side_size(640, 480, 256), (341, 256));
    assert_eq!(short_side_size(18, 18, 18), (18, 18));
    let f = resize_short_side(&Tensor::<f32>::ones(&[3, 24, 32]), 18).unwrap();
    assert_eq!(f.shape(), &[3, 18, 24]);
}

#[test]
fn bilinear_resize_examples() {
    let f = Tensor::<f32>::from_f64(&[1, 1, 2], &[0.0, 1.0]).unwrap();
    let up = resize_bilinear(&f, 1, 4).unwrap();
    assert_eq!(up.data(), &[0.0, 0.25, 0.75, 1.0]);
    let constant = resize_bilinear(&Tensor::<f32>::full(&[3, 5, 7], 0.3), 9, 4).unwrap();
    assert!(constant.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
    let down = resize_bilinear(&ramp(1, 4, 4), 2, 2).unwrap();
    assert_eq!(down.data(), &[2.5, 4.5, 10.5, 12.5]);
}

#[test]
fn crop_and_flip_examples() {
    let f = ramp(2, 3, 4);
    let c = crop(&f, 1, 2, 2).unwrap();
    assert_eq!(c.data(), &[6.0, 7.0, 10.0, 11.0, 18.0, 19.0, 22.0, 23.0]);
    assert!(crop(&f, 2, 0, 2).is_err());
    let flipped = flip_horizontal(&ramp(1, 2, 3)).unwrap();
    assert_eq!(flipped.data(), &[2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
}

#[test]
fn eval_augment_is_centre_crop_without_flip() {
    let cfg = AugmentConfig::tiny();
    let seg = video(3, 18, 18).frames;
    let out = augment_segment(&seg, &cfg, Mode::Eval, &mut rng::seeded(0)).unwrap();
    assert_eq!(out.shape(), &[3, 3, 16, 16]);
    let back = denormalize(&out, &cfg).unwrap();
    for t in 0..3 {
        let f = seg.slice_outer(t, 1).unwrap().reshape(&[3, 18, 18]).unwrap();
        let want = crop(&f, 1, 1, 16).unwrap();
        let got = back.slice_outer(t, 1).unwrap();
        assert!(want.max_abs_diff(&got.reshape(&[3, 16, 16]).unwrap()) < 1e-6);
    }
}

#[test]
fn train_augment_is_seeded_and_shared_across_frames() {
    let cfg = AugmentConfig::tiny();
    let seg = video(4, 20, 24).frames;
    let a = augment_segment(&seg, &cfg, Mode::Train, &mut rng::seeded(5)).unwrap();
    let b = augment_segment(&seg, &cfg, Mode::Train, &mut rng::seeded(5)).unwrap();
    assert_eq!(a.data(), b.data());
    assert_eq!(a.shape(), &[4, 3, 16, 16]);

    // A constant-in-time segment must stay constant in time after augmenting.
    let frame = seg.slice_outer(0, 1).unwrap().reshape(&[3, 20, 24]).unwrap();
    let still = Tensor::stack(&[frame.clone(), frame.clone(), frame]).unwrap();
    for seed in 0..10 {
        let out = augment_segment(&still, &cfg, Mode::Train, &mut rng::seeded(seed)).unwrap();
        assert_eq!(out.slice_outer(0, 1).unwrap().data(), out.slice_outer(2, 1).unwrap().data());
    }
}

#[test]
fn ppm_round_trip_is_exact_for_8_bit_values() {
    let dir = tempfile::tempdir().unwrap();
    let f = Tensor::<f32>::from_fn(&[3, 5, 7], |i| ((i * 29) % 256) as f32 / 255.0);
    let p = dir.path().join("x.ppm");
    write_ppm(&p, &f).unwrap();
    assert_eq!(read_ppm(&p).unwrap().data(), f.data());
    assert!(write_ppm(&p, &Tensor::zeros(&[1, 2, 2])).is_err());
}

#[test]
fn dataset_round_trip_through_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_generate(&SynthConfig::new(3, 4, 5, 0.1, 9)).unwrap();
    let manifest = write_dataset(dir.path(), &data.videos).unwrap();
    let loaded = load_dataset(&manifest).unwrap();
    assert_eq!(loaded.len(), 4);
    for (a, b) in loaded.iter().zip(&data.videos) {
        assert_eq!(a.label, b.label);
        assert!(a.frames.max_abs_diff(&b.frames) <= 0.5 / 255.0 + 1e-7);
    }
}

#[test]
fn manifest_without_header_and_with_relative_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let vid = dir.path().join("clip");
    fs::create_dir(&vid).unwrap();
    for t in 0..2 {
        write_ppm(&frame_path(&vid, t), &Tensor::full(&[3, 2, 2], 0.5)).unwrap();
    }
    let m = dir.path().join("m.csv");
    fs::write(&m, "clip,3,2\n\n").unwrap();
    let entries = load_manifest(&m).unwrap();
    assert_eq!(entries.len(), 1);
    assert_eq!((entries[0].label, entries[0].frame_count, entries[0].line), (3, 2, 1));
    assert_eq!(entries[0].dir, vid);
}

#[test]
fn manifest_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let vid = dir.path().join("clip");
    fs::create_dir(&vid).unwrap();
    write_ppm(&frame_path(&vid, 0), &Tensor::full(&[3, 2, 2], 0.5)).unwrap();
    let m = dir.path().join("m.csv");
    let cases = [
        ("video_dir,label_index,frame_count\nclip,0,1\nclip,x,1\n", 3),
        ("clip,0,1\nclip,0\n", 2),
        ("clip,0,0\n", 1),
        ("clip,0,2\n", 1),
        ("clip,0,1\nmissing,0,1\n", 2),
    ];
    for (text, line) in cases {
        fs::write(&m, text).unwrap();
        match load_manifest(&m) {
            Err(Error::Manifest { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
            other => panic!("{text:?}: {other:?}"),
        }
    }
    let missing = dir.path().join("none.csv");
    let err = load_manifest(&missing).unwrap_err().to_string();
    assert!(err.contains("none.csv"));
}

#[test]
fn synthetic_data_is_seeded_and_labelled_round_robin() {
    let cfg = SynthConfig::new(4, 8, 10, 0.3, 1);
    let a = synth_generate(&cfg).unwrap();
    let b = synth_generate(&cfg).unwrap();
    let c = synth_generate(&SynthConfig { seed: 2, ..cfg.clone() }).unwrap();
    assert_eq!(a.videos, b.videos);
    assert_ne!(a.videos[0].frames, c.videos[0].frames);
    let labels: Vec<usize> = a.videos.iter().map(|v| v.label).collect();
    assert_eq!(labels, vec![0, 1, 2, 3, 0, 1, 2, 3]);
    for (v, mask) in a.videos.iter().zip(&a.informative) {
        assert_eq!(v.frames.shape(), &[10, 3, 18, 18]);
        assert_eq!(mask.iter().filter(|&&m| m).count(), cfg.run_len());
        let first = mask.iter().position(|&m| m).unwrap();
        assert_eq!(first, cfg.run_start(v.label));
        assert!(v.frames.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }
    assert!(synth_generate(&SynthConfig::new(1, 4, 10, 0.3, 0)).is_err());
}

#[test]
fn synthetic_noise_free_frames_are_the_pattern() {
    let cfg = SynthConfig::new(2, 2, 10, 0.0, 3);
    let d = synth_generate(&cfg).unwrap();
    for (v, mask) in d.videos.iter().zip(&d.informative) {
        for (t, &info) in mask.iter().enumerate() {
            let f = v.frame(t).unwrap();
            if info {
                assert!(f.data().iter().any(|&p| p == 1.0));
            } else {
                assert!(f.data().iter().all(|&p| p == 0.5));
            }
        }
    }
}

proptest! {
    #[test]
    fn segments_cover_every_frame(t in 1usize..200, len in 1usize..40, stride_frac in 0.05f64..1.0) {
        let stride = ((len as f64 * stride_frac).ceil() as usize).clamp(1, len);
        let spec = SegmentSpec { length: len, stride };
        let segs = segment_video(t, 0, &spec).unwrap();
        let expected = if t <= len { 1 } else { (t - len).div_ceil(stride) + 1 };
        prop_assert_eq!(segs.len(), expected);
        let mut seen = vec![false; t];
        for s in &segs {
            prop_assert_eq!(s.frames.len(), len);
            prop_assert!(s.start < t);
            for &f in &s.frames {
                prop_assert!(f < t);
                seen[f] = true;
            }
        }
        prop_assert!(seen.iter().all(|&b| b));
    }

    #[test]
    fn normalize_inverts(vals in prop::collection::vec(0.0f32..1.0, 12)) {
        let cfg = AugmentConfig::tiny();
        let x = Tensor::new(&[3, 2, 2], vals).unwrap();
        let back = denormalize(&normalize(&x, &cfg).unwrap(), &cfg).unwrap();
        prop_assert!(x.max_abs_diff(&back) < 1e-6);
    }

    #[test]
    fn double_flip_is_identity(h in 1usize..6, w in 1usize..6) {
        let f = ramp(3, h, w);
        prop_assert_eq!(flip_horizontal(&flip_horizontal(&f).unwrap()).unwrap(), f);
    }
}
