//! Trend benchmark: median test IOU of the 2D baseline (N=0) against N=1
//! and N=2 on phantom datasets with a crossing vessel and heavy noise.
//!
//! cargo run --release -p angioseg-validation --example trend_benchmark -- --help
//!
//! Reported, not gated. Prints one row per run, medians per N and whether
//! the ordering N=0 <= N=1 <= N=2 holds.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use angioseg::data;
use angioseg::pipeline::{self, TrainConfig};
use angioseg_validation::{median, trend_phantom};
use clap::Parser;

#[derive(Parser)]
struct Args {
    /// Clips per dataset.
    #[arg(long, default_value_t = 12)]
    clips: usize,
    /// Frames per clip.
    #[arg(long, default_value_t = 24)]
    frames: usize,
    /// Square frame side and network input size.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    /// Seeds 0..seeds; each seed draws its own dataset, split and init.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Half-windows to compare.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    ns: Vec<usize>,
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 64)]
    base_channels: usize,
    /// Optional CSV of per-run results.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> angioseg::Result<()> {
    let a = Args::parse();
    let template = data::PhantomParams {
        size: a.size,
        frames: a.frames,
        ..trend_phantom()
    };
    let mut csv = String::from("seed,n,raw_iou,post_iou,post_sensitivity,post_specificity,seconds\n");
    let mut post: Vec<Vec<f64>> = vec![Vec::new(); a.ns.len()];
    println!("seed  N  raw_iou  post_iou  seconds");
    for seed in 0..a.seeds {
        let dir = tempfile::tempdir()?;
        let clips = data::gen_phantom_dataset(dir.path(), a.clips, &template, seed)?;
        for (k, &n) in a.ns.iter().enumerate() {
            let cfg = TrainConfig {
                n,
                height: a.size,
                width: a.size,
                epochs: a.epochs,
                lr: a.lr,
                batch_size: a.batch_size,
                base_channels: a.base_channels,
                seed,
                split_seed: seed,
                shuffle_seed: seed,
                eval_every: 0,
                ..TrainConfig::default()
            };
            let started = Instant::now();
            let out = pipeline::train(&cfg, &clips)?;
            let secs = started.elapsed().as_secs_f64();
            let report = &out.log.evals.last().expect("final evaluation").report;
            let (r, p) = (&report.raw_summary, &report.post_summary);
            println!("{seed:>4} {n:>2} {:>8.4} {:>9.4} {secs:>8.0}", r.mean_iou, p.mean_iou);
            let _ = writeln!(
                csv,
                "{seed},{n},{:.6},{:.6},{:.6},{:.6},{secs:.1}",
                r.mean_iou, p.mean_iou, p.mean_sensitivity, p.mean_specificity
            );
            post[k].push(p.mean_iou);
        }
    }
    let medians: Vec<f64> = post.iter().map(|v| median(v)).collect();
    for (n, m) in a.ns.iter().zip(&medians) {
        println!("median post IOU N={n}: {m:.4}");
    }
    let ordered = medians.windows(2).all(|w| w[0] <= w[1]);
    println!("ordering {}: {}", a.ns.iter().map(|n| format!("N={n}")).collect::<Vec<_>>().join(" <= "), if ordered { "holds" } else { "does not hold" });
    if let Some(path) = a.out {
        std::fs::write(path, csv)?;
    }
    Ok(())
}
