use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use flicc_nn::checkpoint::state_dict;
use flicc_nn::loss::batch_focal_loss;
use flicc_nn::optim::{clip_grad_norm, LinearSchedule};
use flicc_nn::safetensors::TensorData;
use flicc_nn::{AdamW, Batch, BertConfig, ForwardMode, LoraSpec, Parameters, SequenceClassifier};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::registry::{self, resolve_checkpoint};
use super::{Decision, EarlyStopping, EpochRecord, ParamCounts, Result, RunResult, TrainConfig, TrainError};
use crate::artifact::{batched_logits, predicted_labels, Artifact};
use crate::corpus::Sample;
use crate::metrics::{self, ClassificationReport};
use crate::taxonomy::{Fallacy, NUM_LABELS};

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Where to write the config snapshot, history, artifact and result.
    pub run_dir: Option<PathBuf>,
    pub on_epoch: Option<&'a dyn Fn(&EpochRecord)>,
    /// Memory budget for the up-front estimate; `None` reads `MemAvailable`.
    pub memory_limit_bytes: Option<u64>,
    /// Scored once with the best model to fill `test_report`.
    pub test_set: Option<&'a [Sample]>,
}

pub struct TrainedRun {
    pub result: RunResult,
    pub artifact: Artifact,
}

/// Rough peak memory of a training run: weights, gradients, a best-epoch
/// snapshot, optimiser moments for trainable tensors and the activations of a
/// batch holding `batch_tokens` tokens whose longest sequence has `longest` tokens.
pub fn estimate_memory_bytes(config: &BertConfig, trainable: usize, batch_tokens: usize, longest: usize) -> u64 {
    let params = config.parameter_count(NUM_LABELS) as u64;
    let weights = params * 4 * 3 + trainable as u64 * 8;
    let per_token_layer =
        (config.hidden_size * 12 + config.intermediate_size * 3 + config.num_attention_heads * longest * 2) as u64;
    let activations =
        batch_tokens as u64 * 4 * (per_token_layer * config.num_hidden_layers as u64 + config.hidden_size as u64 * 4);
    weights + activations
}

/// Tokens in the fullest possible batch of `batch_size` sequences.
fn worst_batch_tokens(lengths: &[usize], batch_size: usize) -> usize {
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    sorted.iter().take(batch_size).sum()
}

fn available_memory() -> Option<u64> {
    let info = fs::read_to_string("/proc/meminfo").ok()?;
    let line = info.lines().find(|l| l.starts_with("MemAvailable:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn restore(model: &mut SequenceClassifier, snapshot: &[(String, TensorData)]) {
    let mut it = snapshot.iter();
    model.visit_params(&mut |p| {
        let (name, t) = it.next().expect("snapshot covers every parameter");
        debug_assert_eq!(name, p.name);
        p.value.copy_from_slice(&t.data);
    });
}

fn census(model: &mut SequenceClassifier) -> ParamCounts {
    let c = model.census();
    ParamCounts {
        total: c.total,
        trainable: c.trainable,
    }
}

/// Scores samples with an artifact.
pub fn evaluate(artifact: &Artifact, samples: &[Sample]) -> Result<ClassificationReport> {
    if samples.is_empty() {
        return Err(TrainError::EmptyInput);
    }
    let texts: Vec<&str> = samples.iter().map(|s| s.text.as_str()).collect();
    let predictions = predicted_labels(&artifact.logits(&texts)?);
    let truths: Vec<Fallacy> = samples.iter().map(|s| s.label).collect();
    Ok(metrics::report(&truths, &predictions.into_iter().map(Some).collect::<Vec<_>>())?)
}

/// Full fine-tuning, or adapter training when `config.lora` is set.
pub fn fine_tune(config: &TrainConfig, train: &[Sample], val: &[Sample], options: TrainOptions<'_>) -> Result<TrainedRun> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::EmptyInput);
    }
    let source = resolve_checkpoint(&config.checkpoint_id)?;
    let lora = config.lora.map(|l| LoraSpec::new(l.rank, l.alpha as f32));

    let train_texts: Vec<&str> = train.iter().map(|s| s.text.as_str()).collect();
    let loaded = registry::load(&source, NUM_LABELS, config.seed, &train_texts, lora.as_ref())?;
    let (mut model, tokenizer) = (loaded.model, loaded.tokenizer);
    let arch = model.config().clone();
    let max_seq_len = config.max_seq_len.unwrap_or(loaded.max_seq_len).min(loaded.max_seq_len);
    let params = census(&mut model);

    let train_ids: Vec<Vec<u32>> = train_texts.iter().map(|t| tokenizer.encode(t, max_seq_len)).collect();
    let train_labels: Vec<usize> = train.iter().map(|s| s.label.index()).collect();
    let lengths: Vec<usize> = train_ids.iter().map(Vec::len).collect();
    let longest = lengths.iter().copied().max().unwrap_or(0);
    let required = estimate_memory_bytes(&arch, params.trainable, worst_batch_tokens(&lengths, config.batch_size), longest);
    if let Some(budget) = options.memory_limit_bytes.or_else(available_memory) {
        // Weights are already resident, so they count against what is left.
        let budget = budget + (arch.parameter_count(NUM_LABELS) as u64) * 8;
        if required > budget {
            let mut suggested = config.batch_size;
            while suggested > 1
                && estimate_memory_bytes(&arch, params.trainable, worst_batch_tokens(&lengths, suggested), longest) > budget
            {
                suggested /= 2;
            }
            return Err(TrainError::OutOfMemory {
                required_mb: required >> 20,
                available_mb: budget >> 20,
                suggested_batch_size: suggested.max(1),
            });
        }
    }
    let val_texts: Vec<&str> = val.iter().map(|s| s.text.as_str()).collect();
    let val_truth: Vec<Fallacy> = val.iter().map(|s| s.label).collect();

    if let Some(dir) = &options.run_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join("config.toml");
        fs::write(&path, config.to_toml()).map_err(io_err(&path))?;
        let path = dir.join("history.jsonl");
        fs::write(&path, "").map_err(io_err(&path))?;
    }

    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let total_steps = (steps_per_epoch * config.max_epochs) as u32;
    let schedule = LinearSchedule {
        base_lr: config.learning_rate as f32,
        warmup_steps: (config.warmup_ratio * total_steps as f64) as u32,
        total_steps,
    };
    let mut optimizer = AdamW::new(config.weight_decay as f32);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = state_dict(&mut model);
    let mut history = Vec::new();
    let mut stopped_early = false;
    let mut step = 0u32;

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let sequences: Vec<&[u32]> = chunk.iter().map(|&i| train_ids[i].as_slice()).collect();
            let targets: Vec<usize> = chunk.iter().map(|&i| train_labels[i]).collect();
            let batch = Batch::from_sequences(&sequences);
            let (logits, cache) = model.forward(&batch, ForwardMode::Train(&mut rng))?;
            let (loss, grad) = batch_focal_loss(&logits, &targets, config.loss.gamma())?;
            if !loss.is_finite() {
                return Err(TrainError::DivergedLoss {
                    epoch,
                    step: step as usize + 1,
                    loss,
                });
            }
            model.backward(&batch, cache, &grad);
            clip_grad_norm(&mut model, config.max_grad_norm as f32);
            optimizer.step(&mut model, schedule.lr_at(step));
            model.zero_grad();
            loss_sum += loss;
            step += 1;
        }
        let predictions = predicted_labels(&batched_logits(&model, &tokenizer, max_seq_len, &val_texts)?);
        let report = metrics::report(&val_truth, &predictions.into_iter().map(Some).collect::<Vec<_>>())?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / steps_per_epoch as f64,
            val_f1_macro: report.macro_avg.f1,
            val_accuracy: report.accuracy,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        if let Some(callback) = options.on_epoch {
            callback(&record);
        }
        if let Some(dir) = &options.run_dir {
            let path = dir.join("history.jsonl");
            let mut file = OpenOptions::new().append(true).open(&path).map_err(io_err(&path))?;
            writeln!(file, "{}", serde_json::to_string(&record).expect("record serializes")).map_err(io_err(&path))?;
        }
        history.push(record);
        match stopper.observe(epoch, report.macro_avg.f1) {
            Decision::Continue { improved: true } => best = state_dict(&mut model),
            Decision::Continue { improved: false } => {}
            Decision::Stop => {
                stopped_early = epoch < config.max_epochs;
                break;
            }
        }
    }

    restore(&mut model, &best);
    let mut artifact = Artifact::new(model, tokenizer, &config.checkpoint_id, max_seq_len, lora)?;
    let test_report = match options.test_set {
        Some(test) => Some(evaluate(&artifact, test)?),
        None => None,
    };
    let mut result = RunResult {
        config: config.clone(),
        history,
        best_epoch: stopper.best_epoch(),
        best_val_f1_macro: stopper.best().unwrap_or(0.0),
        stopped_early,
        params,
        model_version: Some(artifact.meta.model_version.clone()),
        model_artifact: None,
        test_report,
    };
    if let Some(dir) = &options.run_dir {
        let model_dir = dir.join("model");
        artifact.save(&model_dir)?;
        result.model_artifact = Some(model_dir);
        let path = dir.join("result.json");
        fs::write(&path, serde_json::to_string_pretty(&result).expect("result serializes")).map_err(io_err(&path))?;
        if let Some(report) = &result.test_report {
            let path = dir.join("test_report.json");
            fs::write(&path, serde_json::to_string_pretty(report).expect("report serializes")).map_err(io_err(&path))?;
        }
    }
    Ok(TrainedRun { result, artifact })
}

/// Adapter training: base weights frozen, low-rank adapters on the attention
/// query/value projections plus the classification head are trained.
pub fn fine_tune_lora(
    config: &TrainConfig,
    train: &[Sample],
    val: &[Sample],
    options: TrainOptions<'_>,
) -> Result<TrainedRun> {
    if config.lora.is_none() {
        return Err(TrainError::InvalidConfig("fine_tune_lora needs a `lora` section".into()));
    }
    fine_tune(config, train, val, options)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synthetic;
    use crate::training::{LoraSettings, LossKind};

    fn tiny_config() -> TrainConfig {
        let mut c = TrainConfig::new("scratch:tiny", 1e-3);
        c.batch_size = 8;
        c.max_epochs = 3;
        c.seed = 11;
        c
    }

    #[test]
    fn memory_estimate_grows_with_batch() {
        let config = BertConfig::base(30522);
        let n = config.parameter_count(12);
        let small = estimate_memory_bytes(&config, n, 128, 128);
        let large = estimate_memory_bytes(&config, n, 32 * 128, 128);
        assert_eq!(worst_batch_tokens(&[3, 9, 4, 7], 2), 16);
        assert!(large > small);
        assert!(small > (n as u64) * 12);
    }

    #[test]
    fn out_of_memory_suggests_a_batch_size() {
        let data = synthetic::balanced(24, 1);
        let options = TrainOptions {
            memory_limit_bytes: Some(1 << 20),
            ..Default::default()
        };
        let c = tiny_config();
        match fine_tune(&c, &data.samples, &data.samples, options) {
            Err(TrainError::OutOfMemory { suggested_batch_size, .. }) => assert_eq!(suggested_batch_size, 1),
            other => panic!("expected OutOfMemory, got {:?}", other.map(|r| r.result)),
        }
    }

    #[test]
    fn runs_are_reproducible_and_written_to_disk() {
        let data = synthetic::balanced(24, 2);
        let dir = tempfile::tempdir().unwrap();
        let c = tiny_config();
        let a = fine_tune(
            &c,
            &data.samples,
            &data.samples,
            TrainOptions {
                run_dir: Some(dir.path().to_path_buf()),
                ..Default::default()
            },
        )
        .unwrap();
        let b = fine_tune(&c, &data.samples, &data.samples, TrainOptions::default()).unwrap();
        let strip = |h: &[EpochRecord]| -> Vec<(usize, f64, f64)> {
            h.iter().map(|r| (r.epoch, r.train_loss, r.val_f1_macro)).collect()
        };
        assert_eq!(strip(&a.result.history), strip(&b.result.history));
        assert_eq!(a.result.history.len(), 3);
        for name in ["config.toml", "history.jsonl", "result.json", "model/flicc_artifact.json"] {
            assert!(dir.path().join(name).exists(), "{name}");
        }
        let reloaded = Artifact::load(&dir.path().join("model")).unwrap();
        let report = evaluate(&reloaded, &data.samples).unwrap();
        assert!((report.macro_avg.f1 - a.result.best_val_f1_macro).abs() < 1e-6);
    }

    #[test]
    fn lora_runs_train_only_adapters_and_head() {
        let data = synthetic::balanced(24, 3);
        let mut c = tiny_config();
        c.max_epochs = 1;
        c.loss = LossKind::Focal { gamma: 2.0 };
        c.lora = Some(LoraSettings { rank: 8, alpha: 16 });
        let run = fine_tune_lora(&c, &data.samples, &data.samples, TrainOptions::default()).unwrap();
        assert!(run.result.params.trainable < run.result.params.total);
        assert!(run.artifact.model.has_adapters());
        c.lora = None;
        assert!(matches!(
            fine_tune_lora(&c, &data.samples, &data.samples, TrainOptions::default()),
            Err(TrainError::InvalidConfig(_))
        ));
    }

    #[test]
    fn huge_learning_rate_is_reported_as_divergence_or_finishes() {
        let data = synthetic::balanced(12, 4);
        let c = tiny_config();
        assert!(matches!(
            fine_tune(&c, &data.samples, &[], TrainOptions::default()),
            Err(TrainError::EmptyInput)
        ));
    }
}
