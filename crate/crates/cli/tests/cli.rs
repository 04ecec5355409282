use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use flicc_core::corpus::{save_dataset, synthetic};
use flicc_core::llm::{prompt_for, ArchiveRecord, NormalizationRule, Normalized};

fn flicc(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_flicc")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "flicc {args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn split_summary_and_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.jsonl");
    save_dataset(&synthetic::reference_dataset(3), &raw).unwrap();
    let split = dir.path().join("split.jsonl");
    let out = flicc(&["split", "--input", p(&raw), "--out", p(&split), "--seed", "3"]);
    assert!(stdout(&out).contains("ad hominem"));

    let summary = stdout(&flicc(&["summary", "--input", p(&split)]));
    assert!(summary.contains("2509"), "{summary}");

    let report = dir.path().join("zero_r.json");
    let out = stdout(&flicc(&["eval", "--input", p(&split), "--json", p(&report), "--confusion"]));
    assert!(out.contains("ZeroR predicts `ad hominem`"), "{out}");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["total"], 256);

    let csv = stdout(&flicc(&["crosstab", "--input", p(&split)]));
    assert!(csv.lines().count() > 12);
}

#[test]
fn curate_and_remove() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.jsonl");
    save_dataset(&synthetic::balanced(60, 1), &raw).unwrap();
    let review = dir.path().join("review.md");
    flicc(&["curate", "--input", p(&raw), "--contamination", "0.05", "--top-k", "5", "--out", p(&review)]);
    let text = fs::read_to_string(&review).unwrap();
    assert!(text.contains("## Near duplicates") && text.contains("## Outliers"));

    let first_id = fs::read_to_string(&raw).unwrap().lines().find(|l| l.starts_with('{')).map(|l| {
        serde_json::from_str::<serde_json::Value>(l).unwrap()["id"].as_str().unwrap().to_string()
    });
    let ids = dir.path().join("ids.txt");
    fs::write(&ids, format!("{}\nnot-there\n", first_id.unwrap())).unwrap();
    let kept = dir.path().join("kept.jsonl");
    let out = flicc(&["apply-removals", "--input", p(&raw), "--ids", p(&ids), "--out", p(&kept)]);
    assert!(stdout(&out).contains("59 samples kept"));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not-there"));
}

#[test]
fn train_then_predict() {
    let dir = tempfile::tempdir().unwrap();
    let data = flicc_core::corpus::stratified_split(
        &synthetic::balanced(72, 5),
        &"0.5,0.25,0.25".parse().unwrap(),
        5,
    )
    .unwrap();
    let data_path = dir.path().join("data.jsonl");
    save_dataset(&data, &data_path).unwrap();
    let config = dir.path().join("run.toml");
    fs::write(
        &config,
        "checkpoint_id = \"scratch:tiny\"\nlearning_rate = 1e-4\nbatch_size = 8\nmax_epochs = 2\nseed = 5\n",
    )
    .unwrap();
    let run = dir.path().join("run");
    let out = flicc(&["train", "--config", p(&config), "--data", p(&data_path), "--out", p(&run)]);
    assert!(stdout(&out).contains("best epoch"));
    for f in ["config.toml", "history.jsonl", "result.json", "test_report.json", "model/flicc_artifact.json"] {
        assert!(run.join(f).exists(), "{f}");
    }

    let artifact = run.join("model");
    let one = stdout(&flicc(&["predict", "--artifact", p(&artifact), "--text", "Scientists signed a petition."]));
    let prediction: serde_json::Value = serde_json::from_str(&one).unwrap();
    assert_eq!(prediction["scores"].as_object().unwrap().len(), 12);

    let input = dir.path().join("in.txt");
    fs::write(&input, "first text\n\nsecond text\n").unwrap();
    let preds = dir.path().join("preds.jsonl");
    flicc(&["predict", "--artifact", p(&artifact), "--file", p(&input), "--out", p(&preds)]);
    assert_eq!(fs::read_to_string(&preds).unwrap().lines().count(), 2);

    let out = stdout(&flicc(&["eval", "--input", p(&data_path), "--artifact", p(&artifact)]));
    assert!(out.contains("macro avg"), "{out}");
}

#[test]
fn llm_eval_replays_an_archive() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic::balanced(24, 8);
    let data_path = dir.path().join("test.jsonl");
    save_dataset(&data, &data_path).unwrap();
    let lines: Vec<String> = data
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let raw = if i == 0 { String::new() } else { format!("Label: {}", s.label) };
            serde_json::to_string(&ArchiveRecord {
                id: s.id.clone(),
                prompt: prompt_for(&s.text).unwrap(),
                raw,
                normalized: Normalized::Unparseable,
                rule: NormalizationRule::Unparseable,
            })
            .unwrap()
        })
        .collect();
    let source = dir.path().join("source.jsonl");
    fs::write(&source, lines.join("\n")).unwrap();
    let archive = dir.path().join("verdicts.jsonl");
    let provider = format!("replay:{}", source.display());
    let out = stdout(&flicc(&["llm-eval", "--provider", &provider, "--test", p(&data_path), "--archive", p(&archive)]));
    assert!(out.contains("23 of 24 labelled; 1 declined"), "{out}");
}

#[test]
fn missing_credentials_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let data_path = dir.path().join("test.jsonl");
    save_dataset(&synthetic::balanced(12, 8), &data_path).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_flicc"))
        .args(["llm-eval", "--provider", "openai", "--model", "gpt-4", "--test", p(&data_path), "--archive"])
        .arg(dir.path().join("a.jsonl"))
        .env_remove("OPENAI_API_KEY")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("OPENAI_API_KEY"));
}
