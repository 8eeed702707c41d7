//! Block micro-benchmarks: wall-clock medians next to the analytic FLOP
//! and parameter counters.
//!
//! Everything runs on the calling thread. The GEMM and FFT backends are
//! single-threaded, so each timed run owns one core.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::array::Tensor;
use crate::autodiff::Tape;
use crate::blocks::{AnyBlock, Block, BlockKind};
use crate::error::{invalid, Result};
use crate::params::ParamStore;

pub const MIN_WARMUPS: usize = 3;
pub const MIN_RUNS: usize = 20;

/// One benchmarked configuration: a block with `channels` in and out
/// channels over `spatial` extents, batch 1.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchShape {
    pub channels: usize,
    pub spatial: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchConfig {
    pub warmups: usize,
    pub runs: usize,
    /// Also time forward plus backward.
    pub backward: bool,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            warmups: MIN_WARMUPS,
            runs: MIN_RUNS,
            backward: true,
            seed: 0,
        }
    }
}

/// Order statistics of repeated timings, in milliseconds.
#[derive(Clone, Debug, PartialEq)]
pub struct Timing {
    pub runs: usize,
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

impl Timing {
    fn from_samples(mut ms: Vec<f64>) -> Self {
        ms.sort_by(f64::total_cmp);
        let n = ms.len();
        let median = if n % 2 == 1 { ms[n / 2] } else { 0.5 * (ms[n / 2 - 1] + ms[n / 2]) };
        Self {
            runs: n,
            median_ms: median,
            min_ms: ms[0],
            max_ms: ms[n - 1],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub kind: BlockKind,
    pub shape: BenchShape,
    pub params: usize,
    pub gflops: f64,
    pub forward: Timing,
    pub forward_backward: Option<Timing>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, kind: BlockKind, shape: &BenchShape) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.kind == kind && &r.shape == shape)
    }

    /// Largest relative change of any forward median against `other`.
    pub fn max_median_drift(&self, other: &BenchReport) -> Option<f64> {
        self.rows
            .iter()
            .map(|r| {
                other
                    .row(r.kind, &r.shape)
                    .map(|o| (r.forward.median_ms - o.forward.median_ms).abs() / o.forward.median_ms)
            })
            .try_fold(0.0f64, |m, d| d.map(|d| m.max(d)))
    }

    pub fn to_csv(&self, comment: &str) -> String {
        let mut s = format!(
            "# {comment}\nkind,channels,spatial,params,gflops,runs,forward-median-ms,forward-min-ms,forward-max-ms,train-median-ms\n"
        );
        for r in &self.rows {
            let spatial = r.shape.spatial.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
            let train = r.forward_backward.as_ref().map_or(String::new(), |t| t.median_ms.to_string());
            s.push_str(&format!(
                "{},{},{spatial},{},{},{},{},{},{},{train}\n",
                r.kind,
                r.shape.channels,
                r.params,
                r.gflops,
                r.forward.runs,
                r.forward.median_ms,
                r.forward.min_ms,
                r.forward.max_ms,
            ));
        }
        s
    }
}

fn time_runs(cfg: &BenchConfig, mut f: impl FnMut() -> Result<()>) -> Result<Timing> {
    for _ in 0..cfg.warmups {
        f()?;
    }
    let mut ms = Vec::with_capacity(cfg.runs);
    for _ in 0..cfg.runs {
        let t0 = Instant::now();
        f()?;
        ms.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    Ok(Timing::from_samples(ms))
}

/// Times every kind at every shape. Each timed call records onto a fresh
/// tape, so no run reuses buffers of the previous one.
pub fn bench_blocks(shapes: &[BenchShape], kinds: &[BlockKind], cfg: BenchConfig) -> Result<BenchReport> {
    if cfg.warmups < MIN_WARMUPS || cfg.runs < MIN_RUNS {
        return Err(invalid(
            "bench_blocks",
            format!("need at least {MIN_WARMUPS} warmups and {MIN_RUNS} runs, got {} and {}", cfg.warmups, cfg.runs),
        ));
    }
    let mut rows = Vec::new();
    for shape in shapes {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut dims = vec![1, shape.channels];
        dims.extend_from_slice(&shape.spatial);
        let n = dims.iter().product();
        let x = Tensor::from_vec(&dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        for &kind in kinds {
            let mut store = ParamStore::new();
            let rank = shape.spatial.len();
            let block = AnyBlock::new(kind, &mut store, "bench", shape.channels, shape.channels, rank, &mut rng)?;
            let forward = time_runs(&cfg, || {
                let mut t = Tape::inference();
                let v = t.constant(x.clone());
                block.forward(&mut t, &store, v).map(|_| ())
            })?;
            let forward_backward = if cfg.backward {
                Some(time_runs(&cfg, || {
                    let mut t = Tape::new();
                    let v = t.constant(x.clone());
                    let y = block.forward(&mut t, &store, v)?;
                    let l = t.sum(y);
                    t.backward(l)
                })?)
            } else {
                None
            };
            rows.push(BenchRow {
                kind,
                shape: shape.clone(),
                params: store.count(),
                gflops: block.flops(&shape.spatial) / 1e9,
                forward,
                forward_backward,
            });
        }
    }
    Ok(BenchReport { config: cfg, rows })
}
