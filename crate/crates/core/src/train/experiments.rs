//! Repeated runs, the drop-fraction sweep and the scale ablation.

use crate::bagdata::{Dataset, Split};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::train::{evaluate, train, TrainConfig, TrainOutcome};

/// Mean and sample standard deviation; the deviation is 0 for one value.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RepeatSummary {
    /// Best validation metric per run.
    pub val: Vec<f64>,
    /// Test metric of each run's best checkpoint.
    pub test: Vec<f64>,
}

impl RepeatSummary {
    pub fn val_mean_sd(&self) -> (f64, f64) {
        mean_sd(&self.val)
    }

    pub fn test_mean_sd(&self) -> (f64, f64) {
        mean_sd(&self.test)
    }
}

/// Seed of repeat `r`; repeat 0 keeps the configured seed.
pub fn repeat_seed(seed: u64, r: usize) -> u64 {
    if r == 0 {
        seed
    } else {
        derive_seed(seed, "repeat", &[r as u64])
    }
}

/// Trains `repeats` times with derived seeds and scores each best checkpoint
/// on the test split.
pub fn train_repeats(dataset: &Dataset, cfg: &TrainConfig, repeats: usize) -> Result<(Vec<TrainOutcome>, RepeatSummary)> {
    if repeats == 0 {
        return Err(Error::Argument("repeats must be at least 1".into()));
    }
    let mut outcomes = Vec::with_capacity(repeats);
    let mut summary = RepeatSummary {
        val: Vec::new(),
        test: Vec::new(),
    };
    for r in 0..repeats {
        let run = TrainConfig {
            seed: repeat_seed(cfg.seed, r),
            ..cfg.clone()
        };
        let out = train(dataset, &run)?;
        summary.val.push(out.report[out.best_epoch].val_metric);
        summary.test.push(evaluate(&out.best, dataset, Split::Test)?.metric());
        outcomes.push(out);
    }
    Ok((outcomes, summary))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub summary: RepeatSummary,
}

pub fn sweep_alpha(dataset: &Dataset, cfg: &TrainConfig, grid: &[f64], repeats: usize) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::Argument("empty alpha grid".into()));
    }
    if let Some(a) = grid.iter().find(|a| !(0.0..1.0).contains(*a)) {
        return Err(Error::Argument(format!("alpha {a} outside [0, 1)")));
    }
    grid.iter()
        .map(|&alpha| {
            let run = TrainConfig {
                drop_alpha: alpha,
                ..cfg.clone()
            };
            Ok(SweepRow {
                alpha,
                summary: train_repeats(dataset, &run, repeats)?.1,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: &'static str,
    pub summary: RepeatSummary,
}

/// Coarsest level only, finest level only, and all levels with fusion.
pub fn ablate_scales(dataset: &Dataset, cfg: &TrainConfig, repeats: usize) -> Result<Vec<AblationRow>> {
    let levels = dataset.num_levels();
    if levels < 2 {
        return Err(Error::Config(format!(
            "scale ablation needs at least two levels, the data has {levels}"
        )));
    }
    let variants = [
        ("coarse-only", dataset.single_level(0)?),
        ("fine-only", dataset.single_level(levels - 1)?),
        ("combined", dataset.clone()),
    ];
    variants
        .into_iter()
        .map(|(name, ds)| {
            Ok(AblationRow {
                name,
                summary: train_repeats(&ds, cfg, repeats)?.1,
            })
        })
        .collect()
}
