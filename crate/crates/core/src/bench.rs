//! Compute-cost accounting: analytic FLOPs, measured throughput and the
//! content-agnostic random-drop baseline.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::model::ViTConfig;
use crate::tokenizer::{GridDims, SelectionMask};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BenchError {
    #[error("drop ratio {ratio} outside [0, {max}]")]
    Ratio { ratio: f64, max: f64 },
    #[error("throughput needs at least one timed repeat")]
    NoRepeats,
}

/// Forward-pass FLOPs for one clip of `n` tokens:
///
/// ```text
/// embed  2·n·P·d                       (P = t_p·C·p²)
/// layer  8·n·d² + 4·n²·d + 4·n·d²·r    (attention projections, scores and
///                                       weighted sum, MLP with ratio r)
/// head   2·d·K
/// ```
pub fn estimate_flops(cfg: &ViTConfig, n: usize) -> f64 {
    let (n, d) = (n as f64, cfg.embed_dim as f64);
    let embed = 2.0 * n * cfg.block_len() as f64 * d;
    let layer = 8.0 * n * d * d + 4.0 * n * n * d + 4.0 * n * d * d * cfg.mlp_ratio as f64;
    let head = 2.0 * d * cfg.n_classes as f64;
    embed + cfg.n_layers as f64 * layer + head
}

/// Uniformly random mask dropping `round(ratio·N)` tokens outside the first
/// temporal slice.
pub fn random_drop_mask(dims: GridDims, ratio: f64, seed: u64) -> Result<SelectionMask, BenchError> {
    let first = dims.slice_len();
    let max = 1.0 - 1.0 / dims.n_t as f64;
    if !(0.0..=max + 1e-12).contains(&ratio) {
        return Err(BenchError::Ratio { ratio, max });
    }
    let droppable = dims.len() - first;
    let n_drop = ((ratio * dims.len() as f64).round() as usize).min(droppable);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bits = vec![true; dims.len()];
    for i in sample(&mut rng, droppable, n_drop) {
        bits[first + i] = false;
    }
    Ok(SelectionMask::from_bits(dims, bits).expect("length matches the grid"))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Throughput {
    pub clips_per_sec: f64,
    /// Half-width of a normal-approximation 95% interval; infinite for one repeat.
    pub ci_half_width: f64,
    pub repeats: usize,
}

/// Times `run` (which processes `clips` clips) `repeats` times after
/// `warmup` untimed calls.
pub fn measure_throughput<E: From<BenchError>>(clips: usize, warmup: usize, repeats: usize, mut run: impl FnMut() -> Result<(), E>) -> Result<Throughput, E> {
    if repeats == 0 {
        return Err(BenchError::NoRepeats.into());
    }
    for _ in 0..warmup {
        run()?;
    }
    let mut rates = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        run()?;
        rates.push(clips as f64 / t0.elapsed().as_secs_f64().max(1e-12));
    }
    rates.sort_by(f64::total_cmp);
    let m = rates.len();
    let median = if m % 2 == 1 { rates[m / 2] } else { 0.5 * (rates[m / 2 - 1] + rates[m / 2]) };
    let ci_half_width = if m < 2 {
        f64::INFINITY
    } else {
        let mean = rates.iter().sum::<f64>() / m as f64;
        let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
        1.96 * (var / m as f64).sqrt()
    };
    Ok(Throughput {
        clips_per_sec: median,
        ci_half_width,
        repeats,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EfficiencyRow {
    pub method: String,
    pub accuracy: f64,
    pub mean_tokens: f64,
    pub flops: f64,
    pub relative_cost: f64,
    pub clips_per_sec: f64,
    pub train_seconds: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EfficiencyReport {
    pub rows: Vec<EfficiencyRow>,
    pub environment: Vec<(String, String)>,
}

impl EfficiencyReport {
    /// Adds a row; relative cost is measured against `full_flops`.
    pub fn push(&mut self, method: &str, accuracy: f64, mean_tokens: f64, flops: f64, full_flops: f64, clips_per_sec: f64, train_seconds: Option<f64>) {
        self.rows.push(EfficiencyRow {
            method: method.to_string(),
            accuracy,
            mean_tokens,
            flops,
            relative_cost: flops / full_flops,
            clips_per_sec,
            train_seconds,
        });
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,accuracy,mean_tokens,flops,relative_cost,clips_per_sec,train_seconds\n");
        for r in &self.rows {
            let train = r.train_seconds.map(|t| t.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{},{},{},{}", r.method, r.accuracy, r.mean_tokens, r.flops, r.relative_cost, r.clips_per_sec, train);
        }
        s
    }

    pub fn to_text(&self) -> String {
        let header = ["method", "acc", "tokens", "GFLOPs", "cost", "clips/s", "train s"];
        let cells: Vec<[String; 7]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.method.clone(),
                    format!("{:.4}", r.accuracy),
                    format!("{:.1}", r.mean_tokens),
                    format!("{:.4}", r.flops / 1e9),
                    format!("{:.2}x", r.relative_cost),
                    format!("{:.1}", r.clips_per_sec),
                    r.train_seconds.map(|t| format!("{t:.1}")).unwrap_or_else(|| "-".into()),
                ]
            })
            .collect();
        let mut width = header.map(str::len);
        for row in &cells {
            for (w, c) in width.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut s = String::new();
        let line = |s: &mut String, row: &[String]| {
            let parts: Vec<String> = row.iter().zip(width).enumerate().map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") }).collect();
            let _ = writeln!(s, "{}", parts.join("  ").trim_end());
        };
        line(&mut s, &header.map(String::from));
        for row in &cells {
            line(&mut s, row);
        }
        for (k, v) in &self.environment {
            let _ = writeln!(s, "# {k}: {v}");
        }
        s
    }

    /// One JSON object per row, newline-separated.
    pub fn to_json_lines(&self) -> String {
        self.rows.iter().map(|r| serde_json::to_string(r).expect("plain data serialises") + "\n").collect()
    }
}

/// Host description recorded next to throughput numbers.
pub fn environment() -> Vec<(String, String)> {
    vec![
        ("os".into(), std::env::consts::OS.into()),
        ("arch".into(), std::env::consts::ARCH.into()),
        (
            "threads".into(),
            std::thread::available_parallelism().map(|n| n.get().to_string()).unwrap_or_else(|_| "?".into()),
        ),
        ("profile".into(), if cfg!(debug_assertions) { "debug" } else { "release" }.into()),
    ]
}
