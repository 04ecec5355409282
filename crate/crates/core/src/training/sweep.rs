//! Staged hyperparameter search: learning rate with cross-entropy, then focal
//! gamma at the best learning rate, then weight decay and finally LoRA on top
//! of the best configuration so far. The winner is scored once on the test set.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::trainer::{evaluate, fine_tune, TrainOptions};
use super::{
    LoraSettings, LossKind, Result, RunResult, TrainConfig, TrainError, GAMMAS, LEARNING_RATES, LORA_GRID,
    WEIGHT_DECAYS,
};
use crate::artifact::Artifact;
use crate::corpus::Sample;
use crate::metrics::ClassificationReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    LearningRate,
    Gamma,
    WeightDecay,
    Lora,
    /// The base configuration as given.
    Single,
}

impl StageKind {
    pub const ALL: [StageKind; 4] = [StageKind::LearningRate, StageKind::Gamma, StageKind::WeightDecay, StageKind::Lora];
}

/// Which stages to run, in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagePlan {
    pub stages: Vec<StageKind>,
}

impl StagePlan {
    pub fn full() -> Self {
        Self {
            stages: StageKind::ALL.to_vec(),
        }
    }

    pub fn single() -> Self {
        Self {
            stages: vec![StageKind::Single],
        }
    }

    pub fn without_lora() -> Self {
        Self {
            stages: vec![StageKind::LearningRate, StageKind::Gamma, StageKind::WeightDecay],
        }
    }
}

pub trait RunExecutor {
    fn run(&mut self, config: &TrainConfig) -> Result<RunResult>;
    /// Test-set report for the selected run.
    fn test(&mut self, winner: &RunResult) -> Result<ClassificationReport>;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StagedRun {
    pub stage: StageKind,
    pub result: RunResult,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub runs: Vec<StagedRun>,
    /// Index into `runs`.
    pub winner: usize,
    pub test_report: ClassificationReport,
}

impl SweepOutcome {
    pub fn winner(&self) -> &StagedRun {
        &self.runs[self.winner]
    }

    pub fn grid_row(&self) -> GridRow {
        GridRow::from_outcome(self)
    }
}

/// Index of the run with the highest validation macro F1; the earliest wins ties.
pub fn select_best(runs: &[RunResult]) -> Result<usize> {
    if runs.is_empty() {
        return Err(TrainError::EmptyInput);
    }
    let mut best = 0;
    for (i, r) in runs.iter().enumerate().skip(1) {
        if r.best_val_f1_macro > runs[best].best_val_f1_macro {
            best = i;
        }
    }
    Ok(best)
}

fn best_config(runs: &[StagedRun]) -> Option<TrainConfig> {
    let results: Vec<RunResult> = runs.iter().map(|r| r.result.clone()).collect();
    select_best(&results).ok().map(|i| results[i].config.clone())
}

pub fn sweep(base: &TrainConfig, plan: &StagePlan, executor: &mut dyn RunExecutor) -> Result<SweepOutcome> {
    let mut runs: Vec<StagedRun> = Vec::new();
    let mut anchor = TrainConfig {
        loss: LossKind::CrossEntropy,
        weight_decay: 0.0,
        lora: None,
        ..base.clone()
    };
    for &stage in &plan.stages {
        let candidates: Vec<TrainConfig> = match stage {
            StageKind::LearningRate => LEARNING_RATES
                .iter()
                .map(|&lr| TrainConfig {
                    learning_rate: lr,
                    ..anchor.clone()
                })
                .collect(),
            StageKind::Gamma => GAMMAS
                .iter()
                .map(|&gamma| TrainConfig {
                    loss: LossKind::Focal { gamma },
                    ..anchor.clone()
                })
                .collect(),
            StageKind::WeightDecay => WEIGHT_DECAYS
                .iter()
                .map(|&wd| TrainConfig {
                    weight_decay: wd,
                    ..anchor.clone()
                })
                .collect(),
            StageKind::Lora => LORA_GRID
                .iter()
                .map(|&(rank, alpha)| TrainConfig {
                    lora: Some(LoraSettings { rank, alpha }),
                    ..anchor.clone()
                })
                .collect(),
            StageKind::Single => vec![base.clone()],
        };
        for config in candidates {
            let result = executor.run(&config)?;
            runs.push(StagedRun { stage, result });
        }
        // The gamma stage is anchored on the learning-rate winner only; later
        // stages build on the best run so far.
        if stage == StageKind::LearningRate {
            let lr_runs: Vec<StagedRun> = runs.iter().filter(|r| r.stage == stage).cloned().collect();
            anchor = best_config(&lr_runs).unwrap_or(anchor);
        } else {
            anchor = best_config(&runs).unwrap_or(anchor);
        }
        anchor.lora = None;
    }
    let results: Vec<RunResult> = runs.iter().map(|r| r.result.clone()).collect();
    let winner = select_best(&results)?;
    let test_report = executor.test(&runs[winner].result)?;
    Ok(SweepOutcome {
        runs,
        winner,
        test_report,
    })
}

/// One checkpoint's row of the sweep grid: validation macro F1 per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub checkpoint_id: String,
    pub learning_rate: [Option<f64>; 3],
    pub gamma: [Option<f64>; 4],
    pub weight_decay: [Option<f64>; 2],
    /// Best over alphas for ranks 8 and 16.
    pub lora: [Option<f64>; 2],
    /// Stage and cell index of the selected run.
    pub highlight: Option<(StageKind, usize)>,
}

fn cell_of(run: &StagedRun) -> Option<usize> {
    let c = &run.result.config;
    match run.stage {
        StageKind::LearningRate => LEARNING_RATES.iter().position(|&x| x == c.learning_rate),
        StageKind::Gamma => GAMMAS.iter().position(|&x| x == c.loss.gamma()),
        StageKind::WeightDecay => WEIGHT_DECAYS.iter().position(|&x| x == c.weight_decay),
        StageKind::Lora => match c.lora?.rank {
            8 => Some(0),
            16 => Some(1),
            _ => None,
        },
        StageKind::Single => None,
    }
}

impl GridRow {
    pub fn from_outcome(outcome: &SweepOutcome) -> Self {
        let mut row = GridRow {
            checkpoint_id: outcome.winner().result.config.checkpoint_id.clone(),
            learning_rate: [None; 3],
            gamma: [None; 4],
            weight_decay: [None; 2],
            lora: [None; 2],
            highlight: None,
        };
        for (i, run) in outcome.runs.iter().enumerate() {
            let Some(cell) = cell_of(run) else { continue };
            let slot = match run.stage {
                StageKind::LearningRate => &mut row.learning_rate[cell],
                StageKind::Gamma => &mut row.gamma[cell],
                StageKind::WeightDecay => &mut row.weight_decay[cell],
                StageKind::Lora => &mut row.lora[cell],
                StageKind::Single => continue,
            };
            let f1 = run.result.best_val_f1_macro;
            *slot = Some(slot.map_or(f1, |old| old.max(f1)));
            if i == outcome.winner {
                row.highlight = Some((run.stage, cell));
            }
        }
        row
    }

    pub fn header() -> &'static str {
        "checkpoint | lr 1e-5 | lr 5e-5 | lr 1e-4 | g2 | g4 | g8 | g12 | wd 0.01 | wd 0.1 | lora 8 | lora 16"
    }

    /// Two-decimal cells separated by ` | `; the selected cell is starred.
    pub fn render(&self) -> String {
        let mut out = self.checkpoint_id.clone();
        let groups: [(StageKind, &[Option<f64>]); 4] = [
            (StageKind::LearningRate, &self.learning_rate),
            (StageKind::Gamma, &self.gamma),
            (StageKind::WeightDecay, &self.weight_decay),
            (StageKind::Lora, &self.lora),
        ];
        for (stage, cells) in groups {
            for (i, cell) in cells.iter().enumerate() {
                let star = if self.highlight == Some((stage, i)) { "*" } else { "" };
                match cell {
                    Some(v) => write!(out, " | {v:.2}{star}").unwrap(),
                    None => out.push_str(" | -"),
                }
            }
        }
        out
    }
}

/// Trains every configuration for real, one run directory per configuration.
pub struct DiskExecutor<'a> {
    pub root: PathBuf,
    pub train: &'a [Sample],
    pub val: &'a [Sample],
    pub test: &'a [Sample],
    pub on_epoch: Option<&'a dyn Fn(&super::EpochRecord)>,
    count: usize,
}

impl<'a> DiskExecutor<'a> {
    pub fn new(root: PathBuf, train: &'a [Sample], val: &'a [Sample], test: &'a [Sample]) -> Self {
        Self {
            root,
            train,
            val,
            test,
            on_epoch: None,
            count: 0,
        }
    }
}

impl RunExecutor for DiskExecutor<'_> {
    fn run(&mut self, config: &TrainConfig) -> Result<RunResult> {
        self.count += 1;
        let options = TrainOptions {
            run_dir: Some(self.root.join(format!("run-{:02}", self.count))),
            on_epoch: self.on_epoch,
            ..Default::default()
        };
        Ok(fine_tune(config, self.train, self.val, options)?.result)
    }

    fn test(&mut self, winner: &RunResult) -> Result<ClassificationReport> {
        let dir = winner
            .model_artifact
            .as_ref()
            .ok_or_else(|| TrainError::InvalidConfig("winning run has no saved artifact".into()))?;
        let report = evaluate(&Artifact::load(dir)?, self.test)?;
        let path = self.root.join("test_report.json");
        fs::write(&path, serde_json::to_string_pretty(&report).expect("report serializes"))
            .map_err(|source| TrainError::Io { path, source })?;
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics;
    use crate::taxonomy::Fallacy;

    struct Scripted {
        calls: Vec<TrainConfig>,
        tested: Option<TrainConfig>,
    }

    impl RunExecutor for Scripted {
        fn run(&mut self, config: &TrainConfig) -> Result<RunResult> {
            self.calls.push(config.clone());
            // Peaks at lr 5e-5, gamma 4, wd 0.1; LoRA is worse.
            let mut f1 = match config.learning_rate {
                x if x == 5e-5 => 0.5,
                _ => 0.3,
            };
            if config.loss.gamma() == 4.0 {
                f1 += 0.1;
            }
            if config.weight_decay == 0.1 {
                f1 += 0.05;
            }
            if config.lora.is_some() {
                f1 -= 0.2;
            }
            Ok(RunResult {
                config: config.clone(),
                history: vec![],
                best_epoch: 1,
                best_val_f1_macro: f1,
                stopped_early: false,
                params: Default::default(),
                model_version: None,
                model_artifact: None,
                test_report: None,
            })
        }

        fn test(&mut self, winner: &RunResult) -> Result<ClassificationReport> {
            self.tested = Some(winner.config.clone());
            Ok(metrics::report(&[Fallacy::AdHominem], &[Some(Fallacy::AdHominem)])?)
        }
    }

    #[test]
    fn stages_build_on_previous_winners() {
        let mut exec = Scripted {
            calls: vec![],
            tested: None,
        };
        let base = TrainConfig::new("scratch:tiny", 1e-3);
        let outcome = sweep(&base, &StagePlan::full(), &mut exec).unwrap();
        assert_eq!(exec.calls.len(), 3 + 4 + 2 + 4);
        assert!(exec.calls[3..7].iter().all(|c| c.learning_rate == 5e-5 && c.weight_decay == 0.0));
        assert!(exec.calls[7..9].iter().all(|c| c.loss.gamma() == 4.0));
        assert!(exec.calls[9..].iter().all(|c| c.weight_decay == 0.1 && c.lora.is_some()));
        let winner = &outcome.winner().result.config;
        assert_eq!((winner.learning_rate, winner.loss.gamma(), winner.weight_decay), (5e-5, 4.0, 0.1));
        assert_eq!(exec.tested.as_ref(), Some(winner));
        let row = outcome.grid_row();
        assert_eq!(row.highlight, Some((StageKind::WeightDecay, 1)));
        assert!(row.render().contains("0.65*"));
    }

    #[test]
    fn single_plan_runs_the_base_config_once() {
        let mut exec = Scripted {
            calls: vec![],
            tested: None,
        };
        let mut base = TrainConfig::new("scratch:tiny", 1e-4);
        base.weight_decay = 0.1;
        let outcome = sweep(&base, &StagePlan::single(), &mut exec).unwrap();
        assert_eq!(exec.calls, vec![base.clone()]);
        assert_eq!(outcome.winner, 0);
        assert_eq!(outcome.grid_row().highlight, None);
    }

    #[test]
    fn select_best_prefers_earliest_tie() {
        let mut exec = Scripted {
            calls: vec![],
            tested: None,
        };
        let a = exec.run(&TrainConfig::new("x", 5e-5)).unwrap();
        let b = exec.run(&TrainConfig::new("y", 5e-5)).unwrap();
        assert_eq!(select_best(&[a, b]).unwrap(), 0);
        assert!(matches!(select_best(&[]), Err(TrainError::EmptyInput)));
    }
}
