//! Registration metrics, evaluation reports and latency benchmarking.

mod icp;

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use icp::{icp_register, icp_register_with, kabsch, IcpConfig, RegistrationResult, Rotation, IDENTITY};

use crate::csidata::{ModelInput, PointCloud, Sample};
use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::model::{Model, Model32, Precision};
use crate::neighbors::nearest_all;

/// Exact nearest target point for every query point: indices and
/// Euclidean distances. Ties go to the lowest target index.
pub fn nearest_neighbors(query: &PointCloud, target: &PointCloud) -> Result<(Vec<usize>, Vec<f64>)> {
    if target.is_empty() {
        return Err(Error::shape("nearest_neighbors: empty target cloud"));
    }
    Ok(nearest_all(query.points(), target.points(), 0)
        .into_iter()
        .map(|(i, d2)| (i, d2.sqrt()))
        .unzip())
}

/// Something that maps a sample to a predicted cloud.
pub trait Predictor: Sync {
    fn predict(&self, sample: &Sample) -> Result<PointCloud>;
}

impl Predictor for Model {
    fn predict(&self, sample: &Sample) -> Result<PointCloud> {
        Model::predict(self, &sample.input)
    }
}

impl Predictor for Model32<'_> {
    fn predict(&self, sample: &Sample) -> Result<PointCloud> {
        Model32::predict(self, &sample.input)
    }
}

/// Returns the ground truth itself; a debugging aid for the metric
/// pipeline.
pub struct GroundTruthOracle;

impl Predictor for GroundTruthOracle {
    fn predict(&self, sample: &Sample) -> Result<PointCloud> {
        Ok(sample.target.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub fitness: f64,
    pub inlier_rmse: f64,
    pub iterations: usize,
    /// Registration found fewer than 3 inliers; fitness is recorded as 0.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    #[serde(default)]
    pub precision: Precision,
    pub n_runs: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub runs_ms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub threshold: f64,
    pub n_samples: usize,
    pub mean_fitness: f64,
    pub mean_inlier_rmse: f64,
    pub n_degenerate: usize,
    pub samples: Vec<SampleMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencyStats>,
}

impl MetricsReport {
    /// Per-sample rows as CSV with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,fitness,inlier_rmse,iterations,degenerate\n");
        for m in &self.samples {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                csv_field(&m.id),
                m.fitness,
                m.inlier_rmse,
                m.iterations,
                m.degenerate
            );
        }
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Mean that does not depend on the order of `values`.
fn order_free_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

/// Predicts every sample and registers the prediction onto its ground
/// truth. Degenerate registrations are recorded, not fatal.
pub fn evaluate(predictor: &dyn Predictor, dataset: &[Sample], config: &IcpConfig) -> Result<MetricsReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::config("evaluate: empty dataset"));
    }
    let samples: Vec<SampleMetrics> = dataset
        .par_iter()
        .map(|s| {
            let pred = predictor.predict(s)?;
            Ok(match icp_register_with(&pred, &s.target, config) {
                Ok(r) => SampleMetrics {
                    id: s.id.clone(),
                    fitness: r.fitness,
                    inlier_rmse: r.inlier_rmse,
                    iterations: r.iterations,
                    degenerate: false,
                },
                Err(Error::Degenerate { reason, partial }) => {
                    log::warn!("sample {}: {reason}", s.id);
                    SampleMetrics {
                        id: s.id.clone(),
                        fitness: 0.0,
                        inlier_rmse: partial.inlier_rmse,
                        iterations: partial.iterations,
                        degenerate: true,
                    }
                }
                Err(e) => return Err(e),
            })
        })
        .collect::<Result<_>>()?;
    Ok(MetricsReport {
        threshold: config.threshold,
        n_samples: samples.len(),
        mean_fitness: order_free_mean(samples.iter().map(|m| m.fitness)),
        mean_inlier_rmse: order_free_mean(samples.iter().map(|m| m.inlier_rmse)),
        n_degenerate: samples.iter().filter(|m| m.degenerate).count(),
        samples,
        latency: None,
    })
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Wall-clock latency of single-sample inference at the model's own
/// input shape. The one-time f32 weight conversion is not timed.
pub fn bench_latency(model: &Model, n_warmup: usize, n_runs: usize, precision: Precision) -> Result<LatencyStats> {
    if n_runs == 0 {
        return Err(Error::config("bench_latency: n_runs must be >= 1"));
    }
    let c = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (antenna_index, subcarrier_index) = ModelInput::pair_indices(c.antennas, c.subcarriers);
    let input = ModelInput {
        features: Tensor::from_fn(&[c.pairs(), 2, c.time_slices], |_| rng.gen_range(-2.0..2.0)),
        antenna_index,
        subcarrier_index,
    };
    let fast = (precision == Precision::F32).then(|| Model32::new(model));
    let run = || match &fast {
        Some(m) => m.predict(&input),
        None => model.predict(&input),
    };
    for _ in 0..n_warmup {
        run()?;
    }
    let mut runs = Vec::with_capacity(n_runs);
    for _ in 0..n_runs {
        let start = Instant::now();
        run()?;
        runs.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mut sorted = runs.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(LatencyStats {
        precision,
        n_runs,
        mean_ms: runs.iter().sum::<f64>() / n_runs as f64,
        p50_ms: percentile(&sorted, 0.5),
        p95_ms: percentile(&sorted, 0.95),
        min_ms: sorted[0],
        max_ms: sorted[n_runs - 1],
        runs_ms: runs,
    })
}

#[cfg(test)]
mod tests;
