//! Setups shared by the acceptance checks and the trend benchmark.

use angioseg::data::{self, Clip, ClipSample, ClipSlice, PhantomParams};
use angioseg::Result;

/// Two 64x64 phantom clips of 24 frames, every frame used for training.
pub fn overfit_samples(n: usize) -> Result<Vec<ClipSample>> {
    let clips: Vec<Clip> = (0..2u64)
        .map(|i| {
            let p = PhantomParams {
                seed: 100 + i,
                ..PhantomParams::default()
            };
            data::gen_phantom(&p, &format!("overfit{i}"))
        })
        .collect::<Result<_>>()?;
    let slices: Vec<ClipSlice> = clips
        .iter()
        .enumerate()
        .map(|(clip, c)| ClipSlice { clip, range: 0..c.len() })
        .collect();
    data::build_samples(&clips, &slices, n, 64, 64)
}

/// Phantom template of the trend benchmark: crossing vessel and heavy noise.
pub fn trend_phantom() -> PhantomParams {
    PhantomParams {
        size: 64,
        frames: 24,
        occlusion: true,
        noise_std: 0.1,
        noise_signal: 0.05,
        ..PhantomParams::default()
    }
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}
