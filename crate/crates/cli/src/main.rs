use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use flicc_core::corpus::{self, Fractions};
use flicc_core::curation::{self, load_encoder, EncoderSpec, NearDupQuery, ReviewReport};
use flicc_core::inference::{self, load_predictor, ServeOptions};
use flicc_core::llm::{self, EvalOptions, Provider, ProviderKind, RemoteProvider, ReplayProvider};
use flicc_core::metrics;
use flicc_core::training::{self, DiskExecutor, StageKind, StagePlan, TrainConfig, TrainOptions};
use flicc_core::{Dataset, Split};

#[derive(Parser)]
#[command(name = "flicc", version, about = "Climate-misinformation fallacy classifier toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Assign train/val/test splits, stratified by label.
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train, validation and test shares.
        #[arg(long, default_value = "0.716,0.182,0.102")]
        fractions: Fractions,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Per-label counts for each split.
    Summary {
        #[arg(long)]
        input: PathBuf,
    },
    /// Label by CARDS claim counts.
    Crosstab {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write a review list of duplicates and outliers.
    Curate {
        #[arg(long)]
        input: PathBuf,
        /// `ngram[:dim]` or `checkpoint:<dir>[:mean|first]`.
        #[arg(long, default_value = "ngram")]
        encoder: String,
        #[arg(long, default_value_t = 0.01)]
        contamination: f64,
        #[arg(long, default_value_t = 100)]
        top_k: usize,
        /// List every pair at or above this cosine instead of the top k.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Drop samples listed in an id file.
    ApplyRemovals {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        ids: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score an artifact, or the most-frequent-label baseline, on one split.
    Eval {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Trained artifact; omit for the ZeroR baseline fitted on the train split.
        #[arg(long, env = "FLICC_ARTIFACT")]
        artifact: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
        /// Also print the row-normalised confusion matrix.
        #[arg(long)]
        confusion: bool,
    },
    /// Fine-tune one configuration.
    Train {
        /// TOML run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Dataset with split assignments.
        #[arg(long)]
        data: PathBuf,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Staged hyperparameter search for one checkpoint.
    Sweep {
        /// `staged`, `no-lora` or `single`.
        #[arg(long, default_value = "staged")]
        plan: String,
        #[arg(long)]
        checkpoint: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Base configuration; the sweep overrides the swept fields.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Zero-shot evaluation of a hosted chat model.
    LlmEval {
        /// `openai`, `gemini` or `replay:<archive.jsonl>`.
        #[arg(long)]
        provider: String,
        #[arg(long, default_value = "")]
        model: String,
        /// Labelled samples; only the test split is used when splits are present.
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        archive: PathBuf,
        #[arg(long, default_value_t = 4)]
        max_inflight: usize,
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
        #[arg(long)]
        base_url: Option<String>,
        /// Milliseconds between request starts.
        #[arg(long, default_value_t = 0)]
        min_interval_ms: u64,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Classify text with a trained artifact.
    Predict {
        #[arg(long, env = "FLICC_ARTIFACT")]
        artifact: PathBuf,
        #[arg(long, conflicts_with = "file")]
        text: Option<String>,
        /// One text per line.
        #[arg(long, requires = "out")]
        file: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve predictions over HTTP (`FLICC_BIND`, `FLICC_UI_ORIGIN`).
    Serve {
        #[arg(long, env = "FLICC_ARTIFACT")]
        artifact: PathBuf,
        /// Overrides `FLICC_BIND`.
        #[arg(long)]
        bind: Option<String>,
    },
}

fn load(path: &Path) -> Result<Dataset> {
    corpus::load_dataset(path).with_context(|| format!("loading {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn split(input: &Path, out: &Path, fractions: &Fractions, seed: u64) -> Result<()> {
    let data = corpus::stratified_split(&load(input)?, fractions, seed)?;
    corpus::save_dataset(&data, out)?;
    print!("{}", corpus::split_summary(&data)?.render());
    Ok(())
}

fn curate(
    input: &Path,
    encoder: &str,
    contamination: f64,
    query: NearDupQuery,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let data = load(input)?;
    let encoder = load_encoder(&encoder.parse::<EncoderSpec>()?)?;
    eprintln!("embedding {} samples with {}", data.len(), encoder.name());
    let embeddings = curation::embed_dataset(encoder.as_ref(), &data)?;
    let exact = curation::exact_duplicates(&data);
    let near = curation::near_duplicate_pairs(&embeddings, query)?;
    let mut centroid = curation::centroid_distances(&data, &embeddings)?;
    centroid.truncate(curation::flag_count(contamination, data.len()));
    let forest = curation::forest_outliers(&embeddings, contamination, seed)?;
    let report = ReviewReport::new(&exact, near, &centroid, &forest);
    curation::review_report(&report, Some(&data), out)?;
    println!(
        "{} exact groups, {} near pairs, {} centroid and {} forest outliers ({} flagged by both) -> {}",
        report.exact.len(),
        report.near.len(),
        report.centroid.len(),
        report.forest.len(),
        report.overlap().len(),
        out.display()
    );
    Ok(())
}

fn eval(input: &Path, split: Split, artifact: Option<&Path>, json: Option<&Path>, confusion: bool) -> Result<()> {
    let data = load(input)?;
    let samples = data.partition(split);
    if samples.is_empty() {
        bail!("{} has no `{}` samples", input.display(), split.as_str());
    }
    let truths: Vec<_> = samples.iter().map(|s| s.label).collect();
    let predictions = match artifact {
        Some(dir) => {
            let predictor = load_predictor(dir)?;
            predictor
                .predict_batch(&samples.iter().map(|s| s.text.as_str()).collect::<Vec<_>>())?
                .into_iter()
                .map(|p| Some(p.label))
                .collect()
        }
        None => {
            let train: Vec<_> = data.partition(Split::Train).iter().map(|s| s.label).collect();
            let baseline = metrics::zero_r(&train)?;
            println!("ZeroR predicts `{}`", baseline.label);
            baseline.predict(samples.len())
        }
    };
    let report = metrics::report(&truths, &predictions)?;
    print!("{}", report.render());
    if confusion {
        print!("\n{}", metrics::render_normalized(&metrics::confusion(&truths, &predictions)?));
    }
    if let Some(path) = json {
        write_json(path, &report)?;
    }
    Ok(())
}

fn print_epoch(r: &training::EpochRecord) {
    eprintln!(
        "epoch {:>2}  loss {:.4}  val F1-macro {:.4}  val acc {:.4}  ({:.0}s)",
        r.epoch, r.train_loss, r.val_f1_macro, r.val_accuracy, r.wall_seconds
    );
}

fn train(config: &Path, data: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let config = TrainConfig::from_toml(&text)?;
    for note in config.protocol_deviations() {
        eprintln!("note: {note}");
    }
    let data = load(data)?;
    let (train, val, test) = (data.partition(Split::Train), data.partition(Split::Val), data.partition(Split::Test));
    eprintln!("{}", config.describe());
    let options = TrainOptions {
        run_dir: Some(out.to_path_buf()),
        on_epoch: Some(&print_epoch),
        test_set: (!test.is_empty()).then_some(test.as_slice()),
        ..Default::default()
    };
    let run = training::fine_tune(&config, &train, &val, options)?;
    let r = &run.result;
    println!(
        "best epoch {} of {}: val F1-macro {:.4}; {} of {} parameters trained; artifact {}",
        r.best_epoch,
        r.history.len(),
        r.best_val_f1_macro,
        r.params.trainable,
        r.params.total,
        out.join("model").display()
    );
    if let Some(report) = &r.test_report {
        print!("test set:\n{}", report.render());
    }
    Ok(())
}

fn sweep(plan: &str, checkpoint: &str, data: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let plan = match plan {
        "staged" => StagePlan::full(),
        "no-lora" => StagePlan::without_lora(),
        "single" => StagePlan::single(),
        other => bail!("unknown plan `{other}` (expected staged, no-lora or single)"),
    };
    let mut base = match config {
        Some(path) => TrainConfig::from_toml(&fs::read_to_string(path)?)?,
        None => TrainConfig::new(checkpoint, training::LEARNING_RATES[0]),
    };
    base.checkpoint_id = checkpoint.to_string();
    let data = load(data)?;
    let (train, val, test) = (data.partition(Split::Train), data.partition(Split::Val), data.partition(Split::Test));
    fs::create_dir_all(out)?;
    let mut executor = DiskExecutor::new(out.to_path_buf(), &train, &val, &test);
    executor.on_epoch = Some(&print_epoch);
    let outcome = training::sweep(&base, &plan, &mut executor)?;
    write_json(&out.join("sweep.json"), &outcome)?;
    for run in &outcome.runs {
        println!("{:<14?} {}  best val F1-macro {:.4}", run.stage, run.result.config.describe(), run.result.best_val_f1_macro);
    }
    if !plan.stages.contains(&StageKind::Single) {
        println!("{}\n{}", training::GridRow::header(), outcome.grid_row().render());
    }
    print!("winner: {}\ntest set:\n{}", outcome.winner().result.config.describe(), outcome.test_report.render());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn llm_eval(
    provider: &str,
    model: &str,
    test: &Path,
    archive: &Path,
    max_inflight: usize,
    temperature: f64,
    base_url: Option<String>,
    min_interval_ms: u64,
    json: Option<&Path>,
) -> Result<()> {
    let provider: Box<dyn Provider> = match provider.strip_prefix("replay:") {
        Some(path) => Box::new(ReplayProvider::from_archive(Path::new(path))?),
        None => {
            let kind: ProviderKind = provider.parse()?;
            let mut remote = RemoteProvider::from_env(kind, model);
            remote.temperature = temperature;
            remote.min_interval = std::time::Duration::from_millis(min_interval_ms);
            if let Some(url) = base_url {
                remote.base_url = url;
            }
            Box::new(remote)
        }
    };
    let data = load(test)?;
    let mut samples = data.partition(Split::Test);
    if samples.is_empty() {
        samples = data.samples.clone();
    }
    eprintln!("{} samples via {}", samples.len(), provider.id());
    let options = EvalOptions {
        archive: archive.to_path_buf(),
        max_inflight,
    };
    let eval = llm::evaluate_llm(&samples, provider.as_ref(), &options)?;
    print!("{}", eval.report.render());
    let c = &eval.census;
    println!(
        "{} of {} labelled; {} declined, {} unparseable",
        c.labeled, c.total, c.none_marker, c.unparseable
    );
    if let Some((label, n)) = c.most_common() {
        println!("most common prediction: {label} ({n})");
    }
    if let Some(path) = json {
        write_json(path, &eval)?;
    }
    Ok(())
}

fn predict(artifact: &Path, text: Option<String>, file: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let predictor = load_predictor(artifact)?;
    match (text, file) {
        (Some(text), _) => println!("{}", serde_json::to_string_pretty(&predictor.predict(&text)?)?),
        (None, Some(file)) => {
            let input = fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
            let lines: Vec<&str> = input.lines().filter(|l| !l.trim().is_empty()).collect();
            let predictions = predictor.predict_batch(&lines)?;
            let out = out.expect("clap requires --out with --file");
            let mut w = fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            for p in &predictions {
                writeln!(w, "{}", serde_json::to_string(p)?)?;
            }
            println!("{} predictions -> {}", predictions.len(), out.display());
        }
        (None, None) => bail!("pass --text or --file"),
    }
    Ok(())
}

fn serve(artifact: &Path, bind: Option<String>) -> Result<()> {
    let mut options = ServeOptions::from_env().map_err(anyhow::Error::msg)?;
    if let Some(bind) = bind {
        options.bind = bind.parse().with_context(|| format!("bad --bind `{bind}`"))?;
    }
    let predictor = Arc::new(load_predictor(artifact)?);
    eprintln!("serving {} on http://{}", predictor.model_version(), options.bind);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(inference::serve(predictor, options))?;
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Split { input, out, fractions, seed } => split(&input, &out, &fractions, seed),
        Command::Summary { input } => {
            print!("{}", corpus::split_summary(&load(&input)?)?.render());
            Ok(())
        }
        Command::Crosstab { input, csv } => {
            let table = corpus::cross_tabulate(&load(&input)?);
            match csv {
                Some(path) => fs::write(&path, table.to_csv()).with_context(|| format!("writing {}", path.display())),
                None => {
                    print!("{}", table.to_csv());
                    Ok(())
                }
            }
        }
        Command::Curate { input, encoder, contamination, top_k, threshold, seed, out } => {
            let query = threshold.map_or(NearDupQuery::TopK(top_k), NearDupQuery::Threshold);
            curate(&input, &encoder, contamination, query, seed, &out)
        }
        Command::ApplyRemovals { input, ids, out } => {
            let ids = corpus::read_id_list(&ids)?;
            let (kept, missing) = corpus::apply_removals(&load(&input)?, &ids);
            for id in &missing {
                eprintln!("warning: `{id}` is not in the dataset");
            }
            corpus::save_dataset(&kept, &out)?;
            println!("{} samples kept -> {}", kept.len(), out.display());
            Ok(())
        }
        Command::Eval { input, split, artifact, json, confusion } => {
            eval(&input, split, artifact.as_deref(), json.as_deref(), confusion)
        }
        Command::Train { config, data, out } => train(&config, &data, &out),
        Command::Sweep { plan, checkpoint, data, out, config } => sweep(&plan, &checkpoint, &data, &out, config.as_deref()),
        Command::LlmEval {
            provider,
            model,
            test,
            archive,
            max_inflight,
            temperature,
            base_url,
            min_interval_ms,
            json,
        } => llm_eval(&provider, &model, &test, &archive, max_inflight, temperature, base_url, min_interval_ms, json.as_deref()),
        Command::Predict { artifact, text, file, out } => predict(&artifact, text, file, out),
        Command::Serve { artifact, bind } => serve(&artifact, bind),
    }
}
