//! Timing harness for the input discard-rate sweep.
//!
//! Each effective rate is reached by choosing the per-bin cap whose kept
//! count comes closest to `(1 - rate) * N`, so the bin mechanism stays intact
//! while the x-axis reads as a plain discard rate.

use std::io::Write;
use std::time::Instant;

use serde::Serialize;

use crate::geometry::{voxelize, AugmentationRecord, Calibration, SparsePointCloud};
use crate::net::{virconvnet_forward_tensor, NetError, NetWeights, VirConvNetSpec};
use crate::rng::SeededRng;
use crate::stvd::{keep_for_discard_rate, StvdConfig};

pub const BENCH_CSV_VERSION: u32 = 1;
pub const MIN_REPEATS: usize = 5;
pub const DEFAULT_SWEEP: [f64; 6] = [0.0, 0.5, 0.8, 0.9, 0.95, 0.99];

/// Timed stages, in CSV column order. Stages a run does not execute read 0.
pub const STAGES: [&str; 6] = ["voxelize", "input_stvd", "block1", "block2", "block3", "block4"];

/// A zero or non-finite duration is treated as a clock anomaly and measured
/// again, at most this many times.
const MAX_REMEASURE: usize = 3;

#[derive(Clone, Debug, Serialize)]
pub struct BenchConfig {
    pub rates: Vec<f64>,
    pub repeats: usize,
    pub seed: u64,
    pub stvd: StvdConfig,
    pub net: VirConvNetSpec,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            rates: DEFAULT_SWEEP.to_vec(),
            repeats: MIN_REPEATS,
            seed: 0,
            stvd: StvdConfig::default(),
            net: VirConvNetSpec::default(),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.repeats < MIN_REPEATS {
            return Err(NetError::Spec(format!("at least {MIN_REPEATS} repeats required, got {}", self.repeats)));
        }
        if self.rates.is_empty() {
            return Err(NetError::Spec("empty rate sweep".into()));
        }
        if let Some(r) = self.rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(NetError::Spec(format!("discard rate {r} outside [0, 1)")));
        }
        self.stvd.validate()?;
        self.net.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub scenario: String,
    pub rate: f64,
    /// `None` for the no-discard baseline.
    pub keep_per_nearby_bin: Option<usize>,
    pub voxels_before: usize,
    pub voxels_after: usize,
    pub repeats: usize,
    /// Median per stage, aligned with [`STAGES`].
    pub stage_ms: Vec<f64>,
    pub total_ms: f64,
    /// Median baseline total over median total of this row.
    pub speedup: f64,
    /// Clock anomalies that forced a re-measurement.
    pub remeasured: usize,
    pub seed: u64,
    pub config_hash: String,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

struct Sample {
    stages: [f64; STAGES.len()],
    total: f64,
    voxels_after: usize,
}

fn run_once(
    cloud: &SparsePointCloud,
    calib: &Calibration,
    weights: &NetWeights,
    cfg: &BenchConfig,
    stvd: Option<&StvdConfig>,
) -> Result<Sample, NetError> {
    let mut rng = SeededRng::new(cfg.seed);
    let start = Instant::now();
    let t0 = Instant::now();
    let tensor = voxelize(cloud, &cfg.net.grid)?;
    let vox_ms = t0.elapsed().as_secs_f64() * 1e3;
    let out = virconvnet_forward_tensor(
        &tensor,
        &cfg.net,
        stvd,
        calib,
        &AugmentationRecord::identity(),
        weights,
        &mut rng,
        false,
    )?;
    let total = start.elapsed().as_secs_f64() * 1e3;
    let mut stages = [0.0; STAGES.len()];
    stages[0] = vox_ms;
    for t in &out.timings {
        if let Some(i) = STAGES.iter().position(|s| *s == t.stage) {
            stages[i] = t.ms;
        }
    }
    Ok(Sample {
        stages,
        total,
        voxels_after: out.after_input_stvd,
    })
}

/// Runs the sweep: one warm-up then `repeats` timed forwards per rate.
/// Rows come back in the order of `cfg.rates`; the baseline is always timed
/// even when rate 0 is not requested.
pub fn bench_stvd_sweep(
    scenario: &str,
    cloud: &SparsePointCloud,
    calib: &Calibration,
    weights: &NetWeights,
    cfg: &BenchConfig,
) -> Result<Vec<BenchReport>, NetError> {
    cfg.validate()?;
    weights.validate(&cfg.net)?;
    let hash = crate::config_hash(cfg);
    let tensor = voxelize(cloud, &cfg.net.grid)?;

    let measure = |stvd: Option<&StvdConfig>| -> Result<(Vec<Sample>, usize), NetError> {
        run_once(cloud, calib, weights, cfg, stvd)?;
        let mut samples = Vec::with_capacity(cfg.repeats);
        let mut remeasured = 0;
        while samples.len() < cfg.repeats {
            let s = run_once(cloud, calib, weights, cfg, stvd)?;
            if (s.total <= 0.0 || !s.total.is_finite()) && remeasured < MAX_REMEASURE * cfg.repeats {
                remeasured += 1;
                continue;
            }
            samples.push(s);
        }
        Ok((samples, remeasured))
    };

    let (baseline, baseline_remeasured) = measure(None)?;
    let baseline_total = median(&baseline.iter().map(|s| s.total).collect::<Vec<_>>());

    let mut rows = Vec::with_capacity(cfg.rates.len());
    for &rate in &cfg.rates {
        let keep = keep_for_discard_rate(&tensor, &cfg.stvd, rate)?;
        let stvd = keep.map(|k| StvdConfig {
            keep_per_nearby_bin: k,
            ..cfg.stvd.clone()
        });
        let row = match &stvd {
            None => report(scenario, rate, None, &tensor, &baseline, baseline_remeasured, baseline_total, 1.0, cfg, &hash),
            Some(s) => {
                let (samples, remeasured) = measure(Some(s))?;
                let total = median(&samples.iter().map(|s| s.total).collect::<Vec<_>>());
                report(scenario, rate, keep, &tensor, &samples, remeasured, total, baseline_total / total, cfg, &hash)
            }
        };
        rows.push(row);
    }
    Ok(rows)
}

#[allow(clippy::too_many_arguments)]
fn report(
    scenario: &str,
    rate: f64,
    keep: Option<usize>,
    tensor: &crate::tensor::SparseVoxelTensor,
    samples: &[Sample],
    remeasured: usize,
    total: f64,
    speedup: f64,
    cfg: &BenchConfig,
    hash: &str,
) -> BenchReport {
    let stage_ms = (0..STAGES.len())
        .map(|i| median(&samples.iter().map(|s| s.stages[i]).collect::<Vec<_>>()))
        .collect();
    BenchReport {
        scenario: scenario.to_string(),
        rate,
        keep_per_nearby_bin: keep,
        voxels_before: tensor.len(),
        voxels_after: samples[0].voxels_after,
        repeats: samples.len(),
        stage_ms,
        total_ms: total,
        speedup,
        remeasured,
        seed: cfg.seed,
        config_hash: hash.to_string(),
    }
}

/// Column names after the version line. Timing columns are the ones ending
/// in `_ms` plus `speedup`.
pub fn csv_header() -> String {
    let mut cols = vec![
        "scenario".to_string(),
        "rate".into(),
        "keep_per_nearby_bin".into(),
        "voxels_before".into(),
        "voxels_after".into(),
        "repeats".into(),
    ];
    cols.extend(STAGES.iter().map(|s| format!("{s}_ms")));
    cols.extend(["total_ms", "speedup", "remeasured", "seed", "config_hash"].map(String::from));
    cols.join(",")
}

pub fn write_csv<W: Write>(mut w: W, rows: &[BenchReport]) -> std::io::Result<()> {
    let (seed, hash) = rows.first().map_or((0, ""), |r| (r.seed, r.config_hash.as_str()));
    writeln!(w, "# virconv bench_stvd version={BENCH_CSV_VERSION} seed={seed} config_hash={hash}")?;
    writeln!(w, "{}", csv_header())?;
    for r in rows {
        let keep = r.keep_per_nearby_bin.map_or_else(String::new, |k| k.to_string());
        let stages: Vec<String> = r.stage_ms.iter().map(|m| format!("{m:.3}")).collect();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{:.3},{:.4},{},{},{}",
            r.scenario,
            r.rate,
            keep,
            r.voxels_before,
            r.voxels_after,
            r.repeats,
            stages.join(","),
            r.total_ms,
            r.speedup,
            r.remeasured,
            r.seed,
            r.config_hash
        )?;
    }
    Ok(())
}
