//! Experiment driver: configuration in, deterministic report out.
//!
//! [`run_experiment`] loads the data, builds the classifier, attacks
//! the requested test samples (optionally also with the reference
//! attack and the exhaustive search), and aggregates the outcomes.
//! Samples run in parallel on a dedicated thread pool, but results are
//! collected in sample order and every attack derives its own seed from
//! the experiment seed and the sample index — the report is therefore
//! byte-identical across runs and worker counts, unless wall-clock
//! timing is explicitly recorded.

mod config;
mod report;

pub use config::{
    load_config, parse_config, AttackParams, DataConfig, EvalConfig, ExperimentConfig, FilterSpec,
    LayerSpec, ModelConfig,
};
pub use report::{
    compute_metrics, parse_report, render_report, render_sample, render_summary, write_report,
    AttackOutcome, OracleOutcome, SampleRecord, Summary,
};

use std::time::Instant;

use rayon::prelude::*;

use crate::attack::{is_success, run_attack, run_attack_sw_baseline, AttackMode, AttackResult};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::knn::{KnnModel, Metric};
use crate::oracle::exact_min_attack;

/// Seed for one sample: the experiment seed and the sample index mixed
/// through a 64-bit finalizer, so neighboring indices get unrelated
/// streams.
pub fn sample_seed(global: u64, index: usize) -> u64 {
    let mut z = global ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Re-classifies a claimed success before it is written to the report;
/// a mismatch means an internal bug, never a reportable outcome.
fn verify_success(model: &KnnModel, y: usize, mode: AttackMode, res: &AttackResult) -> Result<()> {
    if !res.success {
        return Ok(());
    }
    let adv = res
        .adv
        .as_deref()
        .ok_or_else(|| Error::Validation("successful attack without a point".into()))?;
    let vote = model.classify(adv)?;
    if !is_success(&vote, y, mode) {
        return Err(Error::Validation(
            "stored adversarial point does not satisfy the attack goal".into(),
        ));
    }
    Ok(())
}

fn attack_one(
    model: &KnnModel,
    test: &Dataset,
    index: usize,
    cfg: &ExperimentConfig,
) -> Result<SampleRecord> {
    let x = test.feature(index);
    let y = test.label(index);
    let clean_prediction = model.classify(x)?.predicted;
    let seed = sample_seed(cfg.eval.seed, index);
    let timing = cfg.eval.record_timing;

    let attack_cfg = cfg.attack.to_config(model.k(), seed)?;
    let res = run_attack(model, x, y, &attack_cfg)?;
    verify_success(model, y, attack_cfg.mode, &res)?;
    let ours = AttackOutcome {
        success: res.success,
        norm: res.norm,
        steps: res.steps,
        restarts: res.restarts_used,
        millis: timing.then_some(res.wall.as_millis()),
    };

    let baseline = if cfg.eval.with_baseline {
        let base_cfg = cfg.attack.to_baseline_config(model.k(), seed)?;
        let res = run_attack_sw_baseline(model, x, y, &base_cfg)?;
        verify_success(model, y, base_cfg.mode, &res)?;
        Some(AttackOutcome {
            success: res.success,
            norm: res.norm,
            steps: res.steps,
            restarts: res.restarts_used,
            millis: timing.then_some(res.wall.as_millis()),
        })
    } else {
        None
    };

    let oracle = if cfg.eval.with_oracle {
        let t0 = Instant::now();
        let res = exact_min_attack(model, x, y)?;
        let millis = timing.then(|| t0.elapsed().as_millis());
        Some(match res {
            Some(o) => OracleOutcome {
                found: true,
                norm: Some(o.norm),
                subsets: o.subsets_examined,
                qps: o.qps_solved,
                millis,
            },
            None => OracleOutcome {
                found: false,
                norm: None,
                subsets: 0,
                qps: 0,
                millis,
            },
        })
    } else {
        None
    };

    Ok(SampleRecord {
        index,
        label: y,
        clean_prediction,
        ours,
        baseline,
        oracle,
    })
}

/// Runs the configured experiment and returns the per-sample records
/// (in sample order) with their summary.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(Vec<SampleRecord>, Summary)> {
    let (train, test) = cfg.data.load()?;
    let model = cfg.model.build(train)?;

    let mode = cfg.attack.mode()?;
    if cfg.eval.with_oracle {
        if mode != AttackMode::Untargeted {
            return Err(Error::Config(
                "the exhaustive search finds untargeted minima; it cannot be \
                 compared against a targeted or credibility attack"
                    .into(),
            ));
        }
        let plain = matches!(model.map(), FeatureMap::Identity { .. })
            && model.num_layers() == 1
            && model.layers()[0].metric == Metric::Euclidean;
        if !plain {
            return Err(Error::Config(
                "the exhaustive search needs a raw-input euclidean model".into(),
            ));
        }
    }

    let n = cfg
        .eval
        .num_samples
        .map_or(test.len(), |cap| cap.min(test.len()));
    // A targeted attack cannot aim a sample at its own class.
    let indices: Vec<usize> = (0..n)
        .filter(|&i| !matches!(mode, AttackMode::Targeted(t) if test.label(i) == t))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.eval.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot build the worker pool: {}", e)))?;
    let records: Result<Vec<SampleRecord>> = pool.install(|| {
        indices
            .par_iter()
            .map(|&i| attack_one(&model, &test, i, cfg))
            .collect()
    });
    let records = records?;
    let summary = compute_metrics(&records);
    Ok((records, summary))
}
