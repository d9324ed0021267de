use std::fs;

use angioseg::data::*;
use angioseg::metrics::BinaryMask;
use image::{GrayImage, Luma, Rgb, RgbImage};

fn tiny_clip(id: &str, len: usize, size: u32) -> Clip {
    let frames = (0..len).map(|i| GrayImage::from_pixel(size, size, Luma([(i * 3) as u8]))).collect();
    let labels = (0..len)
        .map(|i| {
            let mut m = BinaryMask::empty(size as usize, size as usize);
            m.set(i % size as usize, 0, true);
            m
        })
        .collect();
    Clip::new(id, frames, labels).unwrap()
}

#[test]
fn partition_is_a_disjoint_contiguous_cover() {
    for seed in 0..4u64 {
        let lengths: Vec<usize> = (6..=60).collect();
        let p = partition_lengths(&lengths, seed).unwrap();
        for (c, &len) in lengths.iter().enumerate() {
            let (tr, te) = (&p.train[c], &p.test[c]);
            assert_eq!((tr.clip, te.clip), (c, c));
            let mut seen = vec![0u8; len];
            for i in tr.range.clone().chain(te.range.clone()) {
                seen[i] += 1;
            }
            assert!(seen.iter().all(|&s| s == 1), "len {len}");
            assert_eq!(te.len(), ((len as f64 / 6.0).round() as usize).max(1));
            match p.side {
                TestSide::Front => assert_eq!((te.range.start, tr.range.end), (0, len)),
                TestSide::Back => assert_eq!((tr.range.start, te.range.end), (0, len)),
            }
        }
        assert_eq!(p, partition_lengths(&lengths, seed).unwrap());
    }
}

#[test]
fn window_laws_exhaustive() {
    for len in 1..=60usize {
        for n in 0..=3usize {
            let slice: Vec<usize> = (0..len).collect();
            let padded = pad_temporal(&slice, n);
            assert_eq!(padded.len(), len + 2 * n);
            let windows = window_ranges(padded.len(), n);
            assert_eq!(windows.len(), len);
            for (center, r) in windows.iter().enumerate() {
                assert_eq!(r.len(), 2 * n + 1);
                assert_eq!(padded[r.start + n], center);
                // neighbours are the clamped original indices
                for (k, &v) in padded[r.clone()].iter().enumerate() {
                    let want = (center as isize + k as isize - n as isize).clamp(0, len as isize - 1) as usize;
                    assert_eq!(v, want);
                }
            }
        }
    }
}

#[test]
fn samples_stay_inside_their_slice() {
    let clips = vec![tiny_clip("a", 12, 8), tiny_clip("b", 7, 8)];
    let p = partition(&clips, 1).unwrap();
    for n in 0..=2 {
        let train = build_samples(&clips, &p.train, n, 8, 8).unwrap();
        let test = build_samples(&clips, &p.test, n, 8, 8).unwrap();
        assert_eq!(train.len() + test.len(), 19);
        for (slices, samples) in [(&p.train, &train), (&p.test, &test)] {
            for s in samples.iter() {
                let clip = clips.iter().position(|c| c.id == s.clip_id).unwrap();
                let range = &slices.iter().find(|x| x.clip == clip).unwrap().range;
                assert!(range.contains(&s.center_index));
                assert_eq!(s.window.shape(), &[2 * n + 1, 8, 8]);
                assert_eq!(s.target, clips[clip].labels[s.center_index]);
                // frames carry their index as intensity 3*i
                for k in 0..=2 * n {
                    let want = (s.center_index as isize + k as isize - n as isize)
                        .clamp(range.start as isize, range.end as isize - 1);
                    let got = (s.window.at(&[k, 0, 0]) * 255.0).round() as isize;
                    assert_eq!(got, want * 3);
                }
            }
        }
    }
    let short = vec![tiny_clip("short", 5, 8)];
    let err = partition(&short, 0).unwrap_err().to_string();
    assert!(err.contains("short"), "{err}");
}

#[test]
fn load_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_dataset(dir.path()).unwrap().is_empty());

    let mut clip = tiny_clip("clip_a", 52, 16);
    clip.frame_rate = Some(12.5);
    save_clip(&clip, dir.path()).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded.len(), 1);
    assert_eq!(loaded[0], clip);

    fs::remove_file(dir.path().join("clip_a/labels/00051.png")).unwrap();
    let err = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains("clip_a") && err.contains("52") && err.contains("51"), "{err}");

    let dir = tempfile::tempdir().unwrap();
    save_clip(&tiny_clip("mixed", 6, 16), dir.path()).unwrap();
    write_png(&GrayImage::new(8, 8), &dir.path().join("mixed/frames/00003.png")).unwrap();
    let err = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains("mixed") && err.contains("resolution"), "{err}");

    let dir = tempfile::tempdir().unwrap();
    save_clip(&tiny_clip("junk", 6, 16), dir.path()).unwrap();
    fs::write(dir.path().join("junk/frames/00002.png"), b"not a png").unwrap();
    let err = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains("junk"), "{err}");
}

#[test]
fn colour_frames_collapse_to_luma() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.png");
    RgbImage::from_pixel(4, 4, Rgb([200, 200, 200])).save(&path).unwrap();
    let g = read_gray(&path).unwrap();
    assert_eq!(g.get_pixel(1, 1)[0], 200);
}

#[test]
fn preprocess_is_idempotent_on_sized_inputs() {
    let clip = gen_phantom(&PhantomParams { seed: 3, ..Default::default() }, "p").unwrap();
    let t = preprocess_frame(&clip.frames[0], 64, 64).unwrap();
    let back = GrayImage::from_raw(64, 64, t.data().iter().map(|&v| (v * 255.0).round() as u8).collect()).unwrap();
    assert_eq!(back, clip.frames[0]);
    assert_eq!(preprocess_frame(&back, 64, 64).unwrap(), t);
    let m = preprocess_mask(&clip.labels[0], 64, 64).unwrap();
    assert_eq!(m, clip.labels[0]);
    let up = preprocess_mask(&m, 96, 96).unwrap();
    assert!(up.count() > m.count());
}

#[test]
fn phantom_determinism_and_ground_truth() {
    let p = PhantomParams { seed: 21, ..Default::default() };
    assert_eq!(gen_phantom(&p, "x").unwrap(), gen_phantom(&p, "x").unwrap());
    let q = PhantomParams { seed: 22, ..Default::default() };
    assert_ne!(gen_phantom(&p, "x").unwrap().frames[0], gen_phantom(&q, "x").unwrap().frames[0]);

    for seed in 0..6 {
        let clean = PhantomParams { seed, ..Default::default() }.clean();
        let clip = gen_phantom(&clean, "c").unwrap();
        let background = clip.frames[0].as_raw().iter().copied().max().unwrap();
        for (f, m) in clip.frames.iter().zip(&clip.labels) {
            assert!(m.count() > 0);
            for (&v, &l) in f.as_raw().iter().zip(m.data()) {
                assert_eq!(v < background, l == 1);
            }
        }
    }
}

#[test]
fn occlusion_crossing_overlaps_and_separates() {
    for seed in 0..10 {
        let r = render_phantom(&PhantomParams { seed, ..Default::default() }, "o").unwrap();
        let o = r.crossing_overlap.unwrap();
        assert!(o.iter().any(|&v| v > 0), "seed {seed}: {o:?}");
        assert!(o.contains(&0), "seed {seed}: {o:?}");
    }
    let off = render_phantom(&PhantomParams { occlusion: false, ..Default::default() }, "o").unwrap();
    assert!(off.crossing_overlap.is_none());
}

#[test]
fn phantom_dataset_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let template = PhantomParams { frames: 8, ..Default::default() };
    let made = gen_phantom_dataset(dir.path(), 4, &template, 7).unwrap();
    let dirs = fs::read_dir(dir.path()).unwrap().count();
    assert_eq!(dirs, 4);
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded.len(), 4);
    for (a, b) in made.iter().zip(&loaded) {
        assert_eq!(a.len(), b.len());
        assert_eq!(a, b);
    }
    assert_ne!(loaded[0].frames[0], loaded[1].frames[0]);
    let again = tempfile::tempdir().unwrap();
    assert_eq!(gen_phantom_dataset(again.path(), 4, &template, 7).unwrap(), made);
}

#[test]
fn phantom_config_keys() {
    let mut p = PhantomParams::default();
    let c = angioseg::config::KvConfig::parse("size=32\nocclusion=false\nnoise_std=0.1").unwrap();
    c.ensure_known(PHANTOM_KEYS).unwrap();
    p.apply_config(&c).unwrap();
    assert_eq!((p.size, p.occlusion, p.noise_std), (32, false, 0.1));
    assert!(PhantomParams { motion_period: 1.5, ..Default::default() }.validate().is_err());
}
