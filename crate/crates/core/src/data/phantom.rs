//! Synthetic angiography clips with exact vessel labels.
//!
//! A branching tree of quadratic Bezier tubes is opacified by a contrast
//! front that advances along the tree's arclength, moved by a smooth
//! periodic displacement, and drawn darker than a blotchy background with
//! additive and signal-dependent noise. With `occlusion` set, a second
//! vessel slides across the trunk so that some frames show the two
//! overlapping and others show them apart.

use std::f64::consts::PI;
use std::path::Path;

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{save_clip, Clip};
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::metrics::BinaryMask;

/// Background level when blobs are disabled.
const BASE_LEVEL: f64 = 0.8;
/// Bezier samples per pixel of chord length.
const SAMPLES_PER_PX: f64 = 2.0;
const CHILD_RADIUS_DECAY: f64 = 0.72;
const CHILD_LENGTH_DECAY: f64 = 0.7;

/// Keys accepted by [`PhantomParams::apply_config`].
pub const PHANTOM_KEYS: &[&str] = &[
    "size",
    "frames",
    "depth",
    "radius_min",
    "radius_max",
    "front_speed",
    "motion_amplitude",
    "motion_period",
    "noise_std",
    "noise_signal",
    "blobs",
    "occlusion",
    "contrast",
    "fps",
    "seed",
];

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomParams {
    /// Square frame side in pixels.
    pub size: usize,
    pub frames: usize,
    /// Branching generations below the trunk.
    pub depth: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Contrast front advance in pixels of arclength per frame.
    pub front_speed: f64,
    /// Peak cardiac displacement in pixels.
    pub motion_amplitude: f64,
    /// Cardiac period in frames.
    pub motion_period: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise_std: f64,
    /// Scale of noise proportional to the square root of intensity.
    pub noise_signal: f64,
    /// Number of background blobs; 0 gives a flat background.
    pub blobs: usize,
    pub occlusion: bool,
    /// Fractional darkening at a vessel's centreline.
    pub contrast: f64,
    pub fps: f64,
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            size: 64,
            frames: 24,
            depth: 3,
            radius_min: 1.0,
            radius_max: 3.0,
            front_speed: 3.0,
            motion_amplitude: 2.0,
            motion_period: 12.0,
            noise_std: 0.03,
            noise_signal: 0.02,
            blobs: 6,
            occlusion: true,
            contrast: 0.6,
            fps: 15.0,
            seed: 0,
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("phantom: {m}")));
        if self.size < 16 {
            return bad(format!("size {} below 16", self.size));
        }
        if self.frames == 0 {
            return bad("frames must be positive".into());
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return bad(format!("radius range [{}, {}] invalid", self.radius_min, self.radius_max));
        }
        if self.radius_max > self.size as f64 / 4.0 {
            return bad(format!("radius_max {} too large for size {}", self.radius_max, self.size));
        }
        if !(self.front_speed > 0.0) {
            return bad("front_speed must be positive".into());
        }
        if !(self.motion_amplitude >= 0.0) {
            return bad("motion_amplitude must be non-negative".into());
        }
        if !(self.motion_period >= 2.0) {
            return bad(format!("motion_period {} below 2 frames", self.motion_period));
        }
        if !(self.noise_std >= 0.0 && self.noise_signal >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return bad(format!("contrast {} outside (0, 1]", self.contrast));
        }
        if !(self.fps > 0.0) {
            return bad("fps must be positive".into());
        }
        if self.occlusion && self.frames < 2 {
            return bad("occlusion needs at least 2 frames".into());
        }
        Ok(())
    }

    pub fn apply_config(&mut self, c: &KvConfig) -> Result<()> {
        c.apply("size", &mut self.size)?;
        c.apply("frames", &mut self.frames)?;
        c.apply("depth", &mut self.depth)?;
        c.apply("radius_min", &mut self.radius_min)?;
        c.apply("radius_max", &mut self.radius_max)?;
        c.apply("front_speed", &mut self.front_speed)?;
        c.apply("motion_amplitude", &mut self.motion_amplitude)?;
        c.apply("motion_period", &mut self.motion_period)?;
        c.apply("noise_std", &mut self.noise_std)?;
        c.apply("noise_signal", &mut self.noise_signal)?;
        c.apply("blobs", &mut self.blobs)?;
        c.apply("occlusion", &mut self.occlusion)?;
        c.apply("contrast", &mut self.contrast)?;
        c.apply("fps", &mut self.fps)?;
        c.apply("seed", &mut self.seed)?;
        Ok(())
    }

    /// No noise and a flat background: pixels are dark exactly on the label.
    pub fn clean(mut self) -> Self {
        self.noise_std = 0.0;
        self.noise_signal = 0.0;
        self.blobs = 0;
        self
    }
}

#[derive(Clone, Copy, Debug)]
struct P2 {
    x: f64,
    y: f64,
}

impl P2 {
    fn add(self, o: P2) -> P2 {
        P2 { x: self.x + o.x, y: self.y + o.y }
    }
    fn sub(self, o: P2) -> P2 {
        P2 { x: self.x - o.x, y: self.y - o.y }
    }
    fn scale(self, s: f64) -> P2 {
        P2 { x: self.x * s, y: self.y * s }
    }
    fn dot(self, o: P2) -> f64 {
        self.x * o.x + self.y * o.y
    }
    fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }
    fn dir(angle: f64) -> P2 {
        P2 { x: angle.cos(), y: angle.sin() }
    }
}

/// Polyline sample of a tube centreline.
#[derive(Clone, Copy, Debug)]
struct Node {
    at: P2,
    radius: f64,
    /// Arclength from the tree root.
    s: f64,
}

/// A tube as a chain of nodes; consecutive nodes form capsules.
#[derive(Clone, Debug)]
struct Tube {
    nodes: Vec<Node>,
}

fn bezier(p0: P2, p1: P2, p2: P2, t: f64) -> P2 {
    let u = 1.0 - t;
    p0.scale(u * u).add(p1.scale(2.0 * u * t)).add(p2.scale(t * t))
}

fn sample_curve(p0: P2, p1: P2, p2: P2, r0: f64, r1: f64, s0: f64) -> Tube {
    let chord = p2.sub(p0).norm() + p1.sub(p0).norm().max(p2.sub(p1).norm());
    let steps = ((chord * SAMPLES_PER_PX).ceil() as usize).max(2);
    let mut nodes = Vec::with_capacity(steps + 1);
    let mut s = s0;
    let mut prev = p0;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let at = bezier(p0, p1, p2, t);
        s += at.sub(prev).norm();
        prev = at;
        nodes.push(Node {
            at,
            radius: r0 + (r1 - r0) * t,
            s,
        });
    }
    Tube { nodes }
}

#[allow(clippy::too_many_arguments)]
fn grow(
    tubes: &mut Vec<Tube>,
    rng: &mut ChaCha8Rng,
    start: P2,
    angle: f64,
    length: f64,
    radius: f64,
    s0: f64,
    generation: usize,
    p: &PhantomParams,
) {
    let bend = rng.random_range(-0.5..0.5);
    let end = start.add(P2::dir(angle + bend).scale(length));
    let ctrl = start.add(P2::dir(angle - 0.5 * bend).scale(0.5 * length));
    let r_end = (radius * CHILD_RADIUS_DECAY.sqrt()).max(p.radius_min);
    let tube = sample_curve(start, ctrl, end, radius, r_end, s0);
    let s_end = tube.nodes.last().map_or(s0, |n| n.s);
    tubes.push(tube);
    if generation >= p.depth {
        return;
    }
    let child_r = (radius * CHILD_RADIUS_DECAY).max(p.radius_min);
    let spread = rng.random_range(0.35..0.8);
    for side in [-1.0, 1.0] {
        let a = angle + bend + side * spread + rng.random_range(-0.15..0.15);
        grow(tubes, rng, end, a, length * CHILD_LENGTH_DECAY, child_r, s_end, generation + 1, p);
    }
}

/// Cardiac displacement of a point at frame `t`.
fn motion(at: P2, t: f64, p: &PhantomParams) -> P2 {
    let phase = (2.0 * PI * t / p.motion_period).sin();
    let s = p.size as f64;
    let a = p.motion_amplitude * phase;
    P2 {
        x: a * (0.6 + 0.4 * (PI * at.y / s).cos()),
        y: 0.5 * a * (PI * at.x / s).sin(),
    }
}

/// Per-pixel centreline darkening in `[0.5, 1]` of the vessel's contrast on
/// its support, 0 elsewhere. Only the part of `tube` with arclength at most
/// `front` is drawn.
fn rasterize(tube: &Tube, front: f64, offset: impl Fn(P2) -> P2, size: usize, out: &mut [f64]) {
    let pts: Vec<Node> = tube
        .nodes
        .iter()
        .map(|n| Node {
            at: n.at.add(offset(n.at)),
            ..*n
        })
        .collect();
    for w in pts.windows(2) {
        let (a, mut b) = (w[0], w[1]);
        if a.s > front {
            break;
        }
        if b.s > front {
            let f = (front - a.s) / (b.s - a.s).max(1e-12);
            b = Node {
                at: a.at.add(b.at.sub(a.at).scale(f)),
                radius: a.radius + (b.radius - a.radius) * f,
                s: front,
            };
        }
        let rmax = a.radius.max(b.radius);
        let x0 = ((a.at.x.min(b.at.x) - rmax).floor().max(0.0)) as usize;
        let y0 = ((a.at.y.min(b.at.y) - rmax).floor().max(0.0)) as usize;
        let x1 = ((a.at.x.max(b.at.x) + rmax).ceil().max(0.0) as usize).min(size);
        let y1 = ((a.at.y.max(b.at.y) + rmax).ceil().max(0.0) as usize).min(size);
        let ab = b.at.sub(a.at);
        let len2 = ab.dot(ab);
        for y in y0..y1 {
            for x in x0..x1 {
                let c = P2 {
                    x: x as f64 + 0.5,
                    y: y as f64 + 0.5,
                };
                let t = if len2 > 0.0 { (c.sub(a.at).dot(ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
                let r = a.radius + (b.radius - a.radius) * t;
                let d = c.sub(a.at.add(ab.scale(t))).norm();
                if d <= r {
                    let depth = 0.5 + 0.5 * (1.0 - (d / r).powi(2)).max(0.0).sqrt();
                    let cell = &mut out[y * size + x];
                    *cell = cell.max(depth);
                }
            }
        }
    }
}

struct Blob {
    at: P2,
    sigma: f64,
    amp: f64,
}

fn to_mask(field: &[f64], size: usize) -> BinaryMask {
    BinaryMask::new(size, size, field.iter().map(|&v| (v > 0.0) as u8).collect()).expect("square field")
}

fn overlap(a: &[f64], b: &[f64]) -> usize {
    a.iter().zip(b).filter(|(&x, &y)| x > 0.0 && y > 0.0).count()
}

/// Renders one clip. Deterministic in `params` (including `seed`).
pub fn gen_phantom(params: &PhantomParams, id: &str) -> Result<Clip> {
    render_phantom(params, id).map(|r| r.clip)
}

/// A rendered clip plus, when the crossing vessel is enabled, the per-frame
/// pixel overlap between the crossing vessel and the tree.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomRender {
    pub clip: Clip,
    pub crossing_overlap: Option<Vec<usize>>,
}

pub fn render_phantom(params: &PhantomParams, id: &str) -> Result<PhantomRender> {
    params.validate()?;
    let p = params;
    let size = p.size;
    let s = size as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);

    // trunk enters from the top edge, heading roughly downward
    let start = P2 {
        x: s * rng.random_range(0.3..0.7),
        y: s * 0.05,
    };
    let angle = PI / 2.0 + rng.random_range(-0.3..0.3);
    let trunk_len = s * 0.42;
    let mut tubes = Vec::new();
    grow(&mut tubes, &mut rng, start, angle, trunk_len, p.radius_max, 0.0, 0, p);

    // the front starts part-way down the trunk so every frame is opacified
    let trunk_end = tubes[0].nodes.last().map_or(0.0, |n| n.s);
    let initial_fill = 0.6 * trunk_end;

    // crossing vessel: a copy of the filled trunk section, displaced along its
    // normal by gap * (1 + cos(2 pi t / frames)) / 2
    let crossing = if p.occlusion {
        let nodes: Vec<Node> = tubes[0].nodes.iter().copied().filter(|n| n.s <= initial_fill).collect();
        let first = nodes[0].at;
        let last = nodes[nodes.len() - 1].at;
        let d = last.sub(first);
        let normal = P2 { x: -d.y, y: d.x }.scale(1.0 / d.norm().max(1e-12));
        let r = p.radius_max;
        let gap = 2.0 * r + 1.0 + 3.0;
        let nodes = nodes.into_iter().map(|n| Node { radius: r, s: 0.0, ..n }).collect();
        Some((Tube { nodes }, normal, gap))
    } else {
        None
    };

    let blobs: Vec<Blob> = (0..p.blobs)
        .map(|_| Blob {
            at: P2 {
                x: rng.random_range(0.0..s),
                y: rng.random_range(0.0..s),
            },
            sigma: s * rng.random_range(0.08..0.3),
            amp: rng.random_range(-0.25..0.15),
        })
        .collect();
    let background: Vec<f64> = (0..size * size)
        .map(|i| {
            let c = P2 {
                x: (i % size) as f64 + 0.5,
                y: (i / size) as f64 + 0.5,
            };
            let v: f64 = blobs
                .iter()
                .map(|b| b.amp * (-c.sub(b.at).dot(c.sub(b.at)) / (2.0 * b.sigma * b.sigma)).exp())
                .sum();
            (BASE_LEVEL + v).clamp(0.3, 0.95)
        })
        .collect();

    let mut frames = Vec::with_capacity(p.frames);
    let mut labels = Vec::with_capacity(p.frames);
    let mut overlaps = Vec::with_capacity(p.frames);
    for t in 0..p.frames {
        let tf = t as f64;
        let front = initial_fill + p.front_speed * tf;
        let mut tree = vec![0.0f64; size * size];
        for tube in &tubes {
            rasterize(tube, front, |at| motion(at, tf, p), size, &mut tree);
        }
        let mut cross = vec![0.0f64; size * size];
        if let Some((tube, normal, gap)) = &crossing {
            let shift = normal.scale(gap * (1.0 + (2.0 * PI * tf / p.frames as f64).cos()) / 2.0);
            rasterize(tube, f64::INFINITY, |at| motion(at, tf, p).add(shift), size, &mut cross);
            overlaps.push(overlap(&tree, &cross));
        }
        let mut img = GrayImage::new(size as u32, size as u32);
        for (i, px) in img.pixels_mut().enumerate() {
            // overlapping vessels attenuate multiplicatively
            let mut v = background[i] * (1.0 - p.contrast * tree[i]) * (1.0 - p.contrast * cross[i]);
            if p.noise_std > 0.0 {
                let n: f64 = StandardNormal.sample(&mut rng);
                v += p.noise_std * n;
            }
            if p.noise_signal > 0.0 {
                let n: f64 = StandardNormal.sample(&mut rng);
                v += p.noise_signal * v.max(0.0).sqrt() * n;
            }
            *px = Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8]);
        }
        let support = tree.iter().zip(&cross).map(|(&a, &b)| a.max(b)).collect::<Vec<_>>();
        frames.push(img);
        labels.push(to_mask(&support, size));
    }
    let overlapped = overlaps.iter().any(|&o| o > 0);
    let separated = overlaps.contains(&0);
    if crossing.is_some() && !(overlapped && separated) {
        return Err(Error::invalid(format!(
            "phantom `{id}`: occlusion self-check failed (overlap seen: {overlapped}, separation seen: {separated})"
        )));
    }
    let mut clip = Clip::new(id, frames, labels)?;
    clip.frame_rate = Some(p.fps);
    Ok(PhantomRender {
        clip,
        crossing_overlap: crossing.is_some().then_some(overlaps),
    })
}

/// Per-clip seeds derived from a master seed.
fn clip_seeds(n: usize, seed: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random()).collect()
}

/// Writes `n_clips` phantom clips under `root` (ids `clip000`, `clip001`, ...)
/// and returns them.
pub fn gen_phantom_dataset(root: &Path, n_clips: usize, template: &PhantomParams, seed: u64) -> Result<Vec<Clip>> {
    template.validate()?;
    std::fs::create_dir_all(root)?;
    let mut clips = Vec::with_capacity(n_clips);
    for (i, clip_seed) in clip_seeds(n_clips, seed).into_iter().enumerate() {
        let params = PhantomParams {
            seed: clip_seed,
            ..template.clone()
        };
        let clip = gen_phantom(&params, &format!("clip{i:03}"))?;
        save_clip(&clip, root)?;
        clips.push(clip);
    }
    Ok(clips)
}
