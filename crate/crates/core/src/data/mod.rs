//! Clip datasets: on-disk layout, hard-cut temporal partitioning, edge
//! padding, sliding windows and image preprocessing.
//!
//! Layout: `<root>/<clip_id>/frames/00000.png`, `<root>/<clip_id>/labels/00000.png`
//! and an optional `<root>/<clip_id>/meta.txt` holding `fps=<float>`.

mod phantom;

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::tensor::Tensor;

pub use phantom::{gen_phantom, gen_phantom_dataset, render_phantom, PhantomParams, PhantomRender, PHANTOM_KEYS};

/// Minimum clip length accepted by [`partition`].
pub const MIN_CLIP_LEN: usize = 6;

/// One angiographic sequence at native resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub id: String,
    pub frames: Vec<GrayImage>,
    pub labels: Vec<BinaryMask>,
    pub frame_rate: Option<f64>,
}

impl Clip {
    pub fn new(id: impl Into<String>, frames: Vec<GrayImage>, labels: Vec<BinaryMask>) -> Result<Self> {
        let clip = Clip {
            id: id.into(),
            frames,
            labels,
            frame_rate: None,
        };
        clip.validate()?;
        Ok(clip)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn resolution(&self) -> Option<(usize, usize)> {
        self.frames.first().map(|f| (f.height() as usize, f.width() as usize))
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != self.labels.len() {
            return Err(Error::Dataset(format!(
                "clip `{}`: {} frames but {} labels",
                self.id,
                self.frames.len(),
                self.labels.len()
            )));
        }
        if let Some((h, w)) = self.resolution() {
            let frames_ok = self.frames.iter().all(|f| (f.height() as usize, f.width() as usize) == (h, w));
            let labels_ok = self.labels.iter().all(|m| (m.height(), m.width()) == (h, w));
            if !frames_ok || !labels_ok {
                return Err(Error::Dataset(format!("clip `{}`: mixed resolutions", self.id)));
            }
        }
        Ok(())
    }
}

/// A network input: `2N+1` preprocessed frames and the central frame's mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipSample {
    pub clip_id: String,
    pub center_index: usize,
    /// `[2N+1, H, W]` in `[0, 1]`.
    pub window: Tensor<f32>,
    pub target: BinaryMask,
}

fn image_error(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads an image as 8-bit grayscale; colour images are collapsed by luminance.
pub fn read_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| image_error(path, e))?;
    let gray = img.to_luma8();
    if gray.width() == 0 || gray.height() == 0 {
        return Err(Error::Dataset(format!("{}: empty image", path.display())));
    }
    Ok(gray)
}

pub fn mask_from_gray(img: &GrayImage) -> BinaryMask {
    let data = img.as_raw().iter().map(|&v| (v > 127) as u8).collect();
    BinaryMask::new(img.height() as usize, img.width() as usize, data).expect("dimensions come from the image")
}

pub fn mask_to_gray(mask: &BinaryMask) -> GrayImage {
    let data = mask.data().iter().map(|&v| v * 255).collect();
    GrayImage::from_raw(mask.width() as u32, mask.height() as u32, data).expect("mask dimensions are consistent")
}

pub fn write_png(img: &GrayImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| image_error(path, e))
}

fn sorted_pngs(dir: &Path, clip: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Dataset(format!("clip `{clip}`: cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn read_meta(path: &Path, clip: &str) -> Result<Option<f64>> {
    if !path.exists() {
        return Ok(None);
    }
    let meta = crate::config::KvConfig::load(path)
        .map_err(|e| Error::Dataset(format!("clip `{clip}`: meta.txt: {e}")))?;
    meta.get::<f64>("fps").map_err(|e| Error::Dataset(format!("clip `{clip}`: meta.txt: {e}")))
}

/// Reads every PNG of a directory in file-name order as grayscale.
pub fn load_frames(dir: &Path) -> Result<Vec<GrayImage>> {
    let name = dir.display().to_string();
    sorted_pngs(dir, &name)?.iter().map(|p| read_gray(p)).collect()
}

/// Loads one clip directory.
pub fn load_clip(dir: &Path) -> Result<Clip> {
    let id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    let frame_files = sorted_pngs(&dir.join("frames"), &id)?;
    let label_files = sorted_pngs(&dir.join("labels"), &id)?;
    if frame_files.len() != label_files.len() {
        return Err(Error::Dataset(format!(
            "clip `{id}`: {} frames but {} labels",
            frame_files.len(),
            label_files.len()
        )));
    }
    let wrap = |e: Error| match e {
        Error::Dataset(m) => Error::Dataset(m),
        other => Error::Dataset(format!("clip `{id}`: {other}")),
    };
    let frames = frame_files.iter().map(|p| read_gray(p)).collect::<Result<Vec<_>>>().map_err(wrap)?;
    let labels = label_files
        .iter()
        .map(|p| read_gray(p).map(|g| mask_from_gray(&g)))
        .collect::<Result<Vec<_>>>()
        .map_err(wrap)?;
    let mut clip = Clip::new(id.clone(), frames, labels)?;
    clip.frame_rate = read_meta(&dir.join("meta.txt"), &id)?;
    Ok(clip)
}

/// Loads every clip directory under `root`, sorted by id.
pub fn load_dataset(root: &Path) -> Result<Vec<Clip>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::Dataset(format!("cannot read dataset root {}: {e}", root.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        log::warn!("dataset root {} contains no clips", root.display());
    }
    let mut clips = dirs.iter().map(|d| load_clip(d)).collect::<Result<Vec<_>>>()?;
    clips.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(clips)
}

/// Writes one clip in the dataset layout.
pub fn save_clip(clip: &Clip, root: &Path) -> Result<()> {
    let dir = root.join(&clip.id);
    let (fdir, ldir) = (dir.join("frames"), dir.join("labels"));
    fs::create_dir_all(&fdir)?;
    fs::create_dir_all(&ldir)?;
    for (i, (f, m)) in clip.frames.iter().zip(&clip.labels).enumerate() {
        write_png(f, &fdir.join(format!("{i:05}.png")))?;
        write_png(&mask_to_gray(m), &ldir.join(format!("{i:05}.png")))?;
    }
    if let Some(fps) = clip.frame_rate {
        fs::write(dir.join("meta.txt"), format!("fps={fps}\n"))?;
    }
    Ok(())
}

/// Which end of every clip is held out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TestSide {
    Front,
    Back,
}

/// A contiguous frame range of one clip.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipSlice {
    pub clip: usize,
    pub range: Range<usize>,
}

impl ClipSlice {
    pub fn len(&self) -> usize {
        self.range.len()
    }

    pub fn is_empty(&self) -> bool {
        self.range.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub side: TestSide,
    pub train: Vec<ClipSlice>,
    pub test: Vec<ClipSlice>,
}

/// Held-out frame count for a clip: `round(len / 6)`, at least 1.
pub fn test_len(len: usize) -> usize {
    ((len as f64 / 6.0).round() as usize).max(1)
}

/// Splits clip lengths into contiguous test / train ranges.
pub fn partition_lengths(lengths: &[usize], seed: u64) -> Result<Partition> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7061_7274);
    let side = if rng.random_bool(0.5) { TestSide::Front } else { TestSide::Back };
    let mut train = Vec::with_capacity(lengths.len());
    let mut test = Vec::with_capacity(lengths.len());
    for (clip, &len) in lengths.iter().enumerate() {
        if len < MIN_CLIP_LEN {
            return Err(Error::Dataset(format!(
                "clip #{clip} has {len} frames, partitioning needs at least {MIN_CLIP_LEN}"
            )));
        }
        let t = test_len(len);
        let (te, tr) = match side {
            TestSide::Front => (0..t, t..len),
            TestSide::Back => (len - t..len, 0..len - t),
        };
        test.push(ClipSlice { clip, range: te });
        train.push(ClipSlice { clip, range: tr });
    }
    Ok(Partition { side, train, test })
}

/// Hard-cut partition of clips. The held-out side is drawn once from `seed`.
pub fn partition(clips: &[Clip], seed: u64) -> Result<Partition> {
    let lengths: Vec<usize> = clips.iter().map(Clip::len).collect();
    partition_lengths(&lengths, seed).map_err(|e| match e {
        Error::Dataset(m) => {
            let id = lengths
                .iter()
                .position(|&l| l < MIN_CLIP_LEN)
                .map(|i| clips[i].id.as_str())
                .unwrap_or("?");
            Error::Dataset(format!("clip `{id}`: {m}"))
        }
        other => other,
    })
}

/// Prepends `n` copies of the first item and appends `n` copies of the last.
pub fn pad_temporal<T: Clone>(slice: &[T], n: usize) -> Vec<T> {
    let (Some(first), Some(last)) = (slice.first(), slice.last()) else {
        return Vec::new();
    };
    let mut out = Vec::with_capacity(slice.len() + 2 * n);
    out.extend(std::iter::repeat_n(first.clone(), n));
    out.extend_from_slice(slice);
    out.extend(std::iter::repeat_n(last.clone(), n));
    out
}

/// Index ranges into a padded sequence of `padded_len` items, one window of
/// `2n+1` per original item.
pub fn window_ranges(padded_len: usize, n: usize) -> Vec<Range<usize>> {
    let span = 2 * n + 1;
    if padded_len < span {
        return Vec::new();
    }
    (0..=padded_len - span).map(|i| i..i + span).collect()
}

/// Builds one sample per original frame from an edge-padded frame sequence.
/// `labels` are the unpadded masks and `first_index` is the clip-level index
/// of `labels[0]`.
pub fn window_samples(
    padded: &[Tensor<f32>],
    labels: &[BinaryMask],
    n: usize,
    clip_id: &str,
    first_index: usize,
) -> Result<Vec<ClipSample>> {
    if padded.len() != labels.len() + 2 * n {
        return Err(Error::invalid(format!(
            "padded length {} does not equal {} labels + 2*{n}",
            padded.len(),
            labels.len()
        )));
    }
    window_ranges(padded.len(), n)
        .into_iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (r, target))| {
            Ok(ClipSample {
                clip_id: clip_id.to_string(),
                center_index: first_index + i,
                window: Tensor::stack(&padded[r])?,
                target: target.clone(),
            })
        })
        .collect()
}

/// Bilinear resize to `height x width`, scaled to `[0, 1]`; returns `[H, W]`.
pub fn preprocess_frame(img: &GrayImage, height: usize, width: usize) -> Result<Tensor<f32>> {
    if img.width() == 0 || img.height() == 0 || height == 0 || width == 0 {
        return Err(Error::invalid("cannot preprocess an empty image"));
    }
    let resized;
    let src = if (img.height() as usize, img.width() as usize) == (height, width) {
        img
    } else {
        resized = imageops::resize(img, width as u32, height as u32, FilterType::Triangle);
        &resized
    };
    let data = src.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Tensor::from_vec(&[height, width], data)
}

/// Nearest-neighbour resize, re-binarized.
pub fn preprocess_mask(mask: &BinaryMask, height: usize, width: usize) -> Result<BinaryMask> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("cannot resize a mask to zero size"));
    }
    if (mask.height(), mask.width()) == (height, width) {
        return Ok(mask.clone());
    }
    let resized = imageops::resize(&mask_to_gray(mask), width as u32, height as u32, FilterType::Nearest);
    Ok(mask_from_gray(&resized))
}

/// Preprocesses, pads and windows every slice.
pub fn build_samples(
    clips: &[Clip],
    slices: &[ClipSlice],
    n: usize,
    height: usize,
    width: usize,
) -> Result<Vec<ClipSample>> {
    let mut out = Vec::new();
    for s in slices {
        let clip = clips
            .get(s.clip)
            .ok_or_else(|| Error::invalid(format!("slice refers to missing clip #{}", s.clip)))?;
        if s.range.end > clip.len() {
            return Err(Error::invalid(format!("slice {:?} exceeds clip `{}`", s.range, clip.id)));
        }
        let frames = clip.frames[s.range.clone()]
            .iter()
            .map(|f| preprocess_frame(f, height, width))
            .collect::<Result<Vec<_>>>()?;
        let labels = clip.labels[s.range.clone()]
            .iter()
            .map(|m| preprocess_mask(m, height, width))
            .collect::<Result<Vec<_>>>()?;
        out.extend(window_samples(&pad_temporal(&frames, n), &labels, n, &clip.id, s.range.start)?);
    }
    Ok(out)
}

/// Stacks samples into a `[B, 1, 2N+1, H, W]` network input plus targets.
pub fn collate(samples: &[&ClipSample]) -> Result<(Tensor<f32>, Vec<BinaryMask>)> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot collate an empty batch"));
    }
    let windows: Vec<Tensor<f32>> = samples.iter().map(|s| s.window.clone()).collect();
    let x = Tensor::stack(&windows)?.unsqueeze_axis(1)?;
    Ok((x, samples.iter().map(|s| s.target.clone()).collect()))
}
