//! Timing sweep over grid resolutions.

use std::time::{Duration, Instant};

use pillardet::net::{init_params, Architecture, Network};
use pillardet::pillars::{assign_pillars, decorate, densify, scatter};
use pillardet::pipeline::{Detector, StageTimes};
use pillardet::rng::Rng;
use pillardet::types::{grid_dims, Point};

use crate::commands::median;
use crate::config::RunConfig;
use crate::error::CliError;

/// Median timings of one resolution.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub resolution: f64,
    pub max_pillars: usize,
    pub pillars: usize,
    pub height: usize,
    pub width: usize,
    /// Pillarize, decorate, encode and scatter.
    pub encoder: Duration,
    /// Relative spread (max - min) / median of the encoder time over repeats.
    pub spread: f64,
    /// Full forward pass with decoding and suppression, when requested.
    pub full: Option<StageTimes>,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub slack: f64,
}

impl BenchReport {
    /// Pillar counts never grow as cells get coarser.
    pub fn pillars_monotone(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].pillars <= w[0].pillars)
    }

    /// Encoder time never rises by more than the slack from one resolution
    /// to the next coarser one.
    pub fn encoder_monotone(&self) -> bool {
        self.rows
            .windows(2)
            .all(|w| w[1].encoder.as_secs_f64() <= w[0].encoder.as_secs_f64() * (1.0 + self.slack))
    }

    pub fn stable(&self) -> bool {
        self.rows.iter().all(|r| r.spread < self.slack)
    }
}

fn encoder_pass(net: &Network, points: &[Point], spec: &pillardet::types::GridSpec, seed: u64) -> Result<(usize, Duration), CliError> {
    let (h, w) = grid_dims(spec)?;
    let t = Instant::now();
    let a = assign_pillars(points, spec)?;
    let tensor = densify(&decorate(&a, points, spec), spec, &mut Rng::new(seed));
    let feats = net.pfn_forward(&tensor);
    let canvas = scatter(&feats, net.arch().pfn_channels, &tensor.indices, h, w)?;
    let elapsed = t.elapsed();
    std::hint::black_box(canvas);
    Ok((a.len(), elapsed))
}

/// Times the encoder (and optionally the whole network) at every configured
/// resolution on the same point cloud.
pub fn run(cfg: &RunConfig, points: &[Point], full: bool) -> Result<BenchReport, CliError> {
    let base = cfg.grid_spec();
    let classes = cfg.class_specs();
    let mut rows = Vec::new();
    for (&res, &budget) in cfg.bench.resolutions.iter().zip(&cfg.bench.max_pillars) {
        let spec = base.snapped(res, budget);
        spec.validate()?;
        let arch = Architecture::standard(64, cfg.architecture().blocks[0].stride, classes.len());
        let params = init_params(&mut Rng::new(cfg.seed), &arch)?;
        let net = Network::new(arch.clone(), &params)?;
        // one warm-up pass so allocation effects stay out of the medians
        encoder_pass(&net, points, &spec, cfg.seed)?;
        let mut times = Vec::new();
        let mut pillars = 0;
        for _ in 0..cfg.bench.repeats {
            let (n, t) = encoder_pass(&net, points, &spec, cfg.seed)?;
            pillars = n;
            times.push(t);
        }
        let med = median(&times);
        let (lo, hi) = (times.iter().min().unwrap(), times.iter().max().unwrap());
        let spread = (*hi - *lo).as_secs_f64() / med.as_secs_f64().max(1e-12);
        let full = if full {
            let det = Detector::new(spec.clone(), arch, classes.clone(), &params, cfg.postproc.clone())?;
            let mut st = StageTimes::default();
            det.detect(points, &mut Rng::new(cfg.seed), &mut st)?;
            Some(st)
        } else {
            None
        };
        let (height, width) = grid_dims(&spec)?;
        rows.push(BenchRow { resolution: res, max_pillars: budget, pillars, height, width, encoder: med, spread, full });
    }
    Ok(BenchReport { rows, slack: cfg.bench.slack })
}

pub fn print(report: &BenchReport) {
    println!("{:>6} {:>7} {:>9} {:>9} {:>12} {:>8} {:>10}", "res", "budget", "grid", "pillars", "encoder ms", "spread", "frames/s");
    for r in &report.rows {
        let ms = r.encoder.as_secs_f64() * 1e3;
        let fps = r.full.map_or(1e3 / ms, |st| 1.0 / st.total().as_secs_f64());
        println!(
            "{:>6.2} {:>7} {:>9} {:>9} {:>12.2} {:>7.1}% {:>10.2}",
            r.resolution,
            r.max_pillars,
            format!("{}x{}", r.height, r.width),
            r.pillars,
            ms,
            r.spread * 100.0,
            fps
        );
        if let Some(st) = &r.full {
            for (name, d) in StageTimes::NAMES.iter().zip(st.values()) {
                println!("         {:<20} {:>10.2} ms", name, d.as_secs_f64() * 1e3);
            }
        }
    }
    let yes = |b: bool| if b { "yes" } else { "NO" };
    println!("pillar count non-increasing: {}", yes(report.pillars_monotone()));
    println!("encoder time non-increasing (slack {:.0}%): {}", report.slack * 100.0, yes(report.encoder_monotone()));
    println!("median timing spread below {:.0}%: {}", report.slack * 100.0, yes(report.stable()));
}
