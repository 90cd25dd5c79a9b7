use std::fs;
use std::path::{Path, PathBuf};

use avparse::data::annotations::format_predictions;
use avparse::metrics::VideoParse;
use avparse_cli::commands::{load_split, prediction_rows, MANIFEST, PARSER_CHECKPOINT, PREDICTIONS, RESOLVED_CONFIG};
use avparse_cli::{run, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_VERIFICATION};
use serde_json::Value;
use tempfile::TempDir;

fn avparse(cmd: &str, args: &[&str]) -> i32 {
    let mut argv = vec!["avparse", cmd];
    argv.extend_from_slice(args);
    run(argv)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small dataset under `<tmp>/data`.
fn small_data(tmp: &TempDir, extra: &[&str]) -> PathBuf {
    let data = tmp.path().join("data");
    let mut args = vec!["--out", s(&data), "--num-videos", "24", "--test-videos", "4"];
    args.extend_from_slice(extra);
    assert_eq!(avparse("gen-synth", &args), 0);
    data
}

const FAST_TRAIN: [&str; 6] = ["--epochs", "2", "--batch-size", "8", "--lr", "3e-3"];
const FAST_PRETRAIN: [&str; 10] = [
    "--pretrain-steps",
    "3",
    "--pretrain-model-dim",
    "16",
    "--pretrain-ff-dim",
    "32",
    "--pretrain-layers",
    "1",
    "--pretrain-batch-size",
    "4",
];

fn train(data: &Path, out: &Path) -> i32 {
    let mut args = vec!["--data", s(data), "--out", s(out)];
    args.extend_from_slice(&FAST_TRAIN);
    avparse("train", &args)
}

fn metrics_of(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap()
}

fn write_truth_predictions(data: &Path, path: &Path, keep: impl Fn(&VideoParse) -> VideoParse) {
    let ds = load_split(data, "test").unwrap();
    let parses: Vec<VideoParse> = (0..ds.len()).map(|i| keep(&ds.truth(i))).collect();
    fs::write(path, format_predictions(&prediction_rows(&ds, &parses), &ds.vocab)).unwrap();
}

#[test]
fn default_gen_synth_splits_and_manifest_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(avparse("gen-synth", &["--out", s(&a)]), 0);
    assert_eq!(avparse("gen-synth", &["--out", s(&b), "--parallel", "true"]), 0);
    let manifest = fs::read_to_string(a.join(MANIFEST)).unwrap();
    let doc: Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(doc["videos"]["train"], 200);
    assert_eq!(doc["videos"]["test"], 40);
    assert_eq!(manifest, fs::read_to_string(b.join(MANIFEST)).unwrap());
}

#[test]
fn configuration_errors_exit_two() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("o");
    assert_eq!(avparse("gen-synth", &["--out", s(&out), "--num-videos", "0"]), EXIT_CONFIG);
    assert_eq!(
        avparse("train", &["--data", s(&tmp.path().join("missing")), "--out", s(&out)]),
        EXIT_CONFIG
    );
    assert_eq!(
        avparse("pretrain", &["--data", s(&tmp.path().join("missing")), "--out", s(&out)]),
        EXIT_CONFIG
    );
    assert_eq!(avparse("train", &["--learning-rate", "1"]), EXIT_CONFIG);
    assert_eq!(avparse("gen-synth", &["--out", s(&out), "--noise-sigma", "abc"]), EXIT_CONFIG);
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "no_such_key=1\n").unwrap();
    assert_eq!(avparse("gen-synth", &["--config", s(&cfg)]), EXIT_CONFIG);
}

#[test]
fn gradcheck_passes_and_injected_fault_exits_five() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("gc");
    assert_eq!(avparse("gradcheck", &["--gradcheck-seeds", "1", "--out", s(&out)]), 0);
    let report = fs::read_to_string(out.join("gradcheck.tsv")).unwrap();
    assert!(report.starts_with("suite\tchecked\tmax_rel_err\tstatus\n"));
    assert!(report.lines().skip(1).all(|l| l.ends_with("pass")));

    let bad = tmp.path().join("bad");
    assert_eq!(
        avparse("gradcheck", &["--gradcheck-seeds", "1", "--inject-fault", "sigmoid", "--out", s(&bad)]),
        EXIT_VERIFICATION
    );
    let report = fs::read_to_string(bad.join("gradcheck.tsv")).unwrap();
    assert!(report.contains("FAIL"));
    assert!(report.lines().any(|l| l.starts_with("failure\tprimitives:sigmoid:")));
    assert_eq!(avparse("gradcheck", &["--inject-fault", "no_such_op"]), EXIT_CONFIG);
}

#[test]
fn training_prediction_and_evaluation_are_deterministic() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(&tmp, &[]);
    let mut reports = Vec::new();
    let mut checkpoints = Vec::new();
    for run_dir in ["r1", "r2"] {
        let out = tmp.path().join(run_dir);
        assert_eq!(train(&data, &out), 0);
        let ckpt = out.join(PARSER_CHECKPOINT);
        assert_eq!(
            avparse("predict", &["--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&out)]),
            0
        );
        assert_eq!(
            avparse(
                "eval",
                &["--predictions", s(&out.join(PREDICTIONS)), "--data", s(&data), "--out", s(&out)]
            ),
            0
        );
        checkpoints.push(fs::read(ckpt).unwrap());
        reports.push(fs::read(out.join("metrics.json")).unwrap());
    }
    assert_eq!(checkpoints[0], checkpoints[1]);
    assert_eq!(reports[0], reports[1]);
    let doc = metrics_of(&tmp.path().join("r1"));
    for level in ["segment", "event"] {
        let keys: Vec<&String> = doc[level].as_object().unwrap().keys().collect();
        assert_eq!(keys.len(), 5);
        for k in ["audio", "visual", "av", "type_at_av", "event_at_av"] {
            assert!(doc[level][k].is_f64(), "{level}.{k}");
        }
    }
}

#[test]
fn resolved_config_reproduces_the_run() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(&tmp, &[]);
    let out = tmp.path().join("run");
    assert_eq!(train(&data, &out), 0);
    let first = fs::read(out.join(PARSER_CHECKPOINT)).unwrap();
    let log = fs::read(out.join("train.log")).unwrap();
    let resolved = out.join(RESOLVED_CONFIG);
    let text = fs::read_to_string(&resolved).unwrap();
    assert!(text.contains("seed=1\n") && text.contains("epochs=2\n"));
    let saved = tmp.path().join("replay.cfg");
    fs::copy(&resolved, &saved).unwrap();
    fs::remove_dir_all(&out).unwrap();
    assert_eq!(avparse("train", &["--config", s(&saved)]), 0);
    assert_eq!(fs::read(out.join(PARSER_CHECKPOINT)).unwrap(), first);
    assert_eq!(fs::read(out.join("train.log")).unwrap(), log);
    assert_eq!(fs::read_to_string(out.join(RESOLVED_CONFIG)).unwrap(), text);
}

#[test]
fn ablation_flags_are_accepted() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(&tmp, &[]);
    let mut args = vec!["--data", s(&data), "--epochs", "1", "--batch-size", "8"];
    let out = tmp.path().join("base");
    args.extend(["--out", s(&out), "--skip=false", "--adv=false", "--gcaa=false"]);
    assert_eq!(avparse("train", &args), 0);
    let log = fs::read_to_string(out.join("train.log")).unwrap();
    let row: Vec<&str> = log.lines().nth(1).unwrap().split('\t').collect();
    assert_eq!(row[4].parse::<f64>().unwrap(), 0.0);
}

#[test]
fn evaluating_the_truth_scores_one_hundred() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(&tmp, &[]);
    let pred = tmp.path().join("truth.tsv");
    write_truth_predictions(&data, &pred, Clone::clone);
    let out = tmp.path().join("eval");
    assert_eq!(avparse("eval", &["--predictions", s(&pred), "--data", s(&data), "--out", s(&out)]), 0);
    let doc = metrics_of(&out);
    for level in ["segment", "event"] {
        for k in ["audio", "visual", "av", "type_at_av", "event_at_av"] {
            assert_eq!(doc[level][k], 100.0, "{level}.{k}");
        }
    }
    let cats = fs::read_to_string(out.join("categories.tsv")).unwrap();
    assert!(cats.starts_with("category\tmodality\tsegment_f\tevent_f\n"));
}

#[test]
fn empty_predictions_score_zero() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(&tmp, &[]);
    let pred = tmp.path().join("empty.tsv");
    write_truth_predictions(&data, &pred, |t| VideoParse::empty(t.audio.len(), t.audio[0].len()));
    let out = tmp.path().join("eval");
    assert_eq!(avparse("eval", &["--predictions", s(&pred), "--data", s(&data), "--out", s(&out)]), 0);
    let doc = metrics_of(&out);
    for k in ["audio", "visual"] {
        assert_eq!(doc["segment"][k], 0.0, "{k}");
    }
}

#[test]
fn unknown_prediction_videos_are_listed() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(&tmp, &[]);
    let ds = load_split(&data, "test").unwrap();
    let pred = tmp.path().join("stray.tsv");
    let cat = ds.vocab.name(0);
    fs::write(
        &pred,
        format!("video_id\tmodality\tcategory\tstart\tend\nghost_b\ta\t{cat}\t0\t1\nghost_a\tv\t{cat}\t2\t3\n"),
    )
    .unwrap();
    let out = tmp.path().join("eval");
    assert_eq!(
        avparse("eval", &["--predictions", s(&pred), "--data", s(&data), "--out", s(&out)]),
        EXIT_CONFIG
    );
    let rows = avparse::data::annotations::parse_predictions(&pred, &ds.vocab, ds.snippets).unwrap();
    let err = avparse_cli::commands::parses_from_rows(&rows, &ds).unwrap_err();
    assert!(err.message.ends_with("ghost_a, ghost_b"), "{}", err.message);
}

#[test]
fn empty_test_split_yields_header_only_predictions() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(
        avparse("gen-synth", &["--out", s(&data), "--num-videos", "12", "--test-videos", "0"]),
        0
    );
    let out = tmp.path().join("run");
    assert_eq!(train(&data, &out), 0);
    assert_eq!(
        avparse(
            "predict",
            &["--checkpoint", s(&out.join(PARSER_CHECKPOINT)), "--data", s(&data), "--out", s(&out)]
        ),
        0
    );
    assert_eq!(
        fs::read_to_string(out.join(PREDICTIONS)).unwrap(),
        "video_id\tmodality\tcategory\tstart\tend\n"
    );
}

#[test]
fn checkpoint_dimension_mismatch_exits_two() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(&tmp, &[]);
    let out = tmp.path().join("run");
    assert_eq!(train(&data, &out), 0);
    let other = tmp.path().join("narrow");
    assert_eq!(
        avparse("gen-synth", &["--out", s(&other), "--num-videos", "8", "--test-videos", "2", "--feature-dim", "32"]),
        0
    );
    let ckpt = out.join(PARSER_CHECKPOINT);
    assert_eq!(
        avparse("predict", &["--checkpoint", s(&ckpt), "--data", s(&other), "--out", s(&out)]),
        EXIT_CONFIG
    );
    assert_eq!(
        avparse("predict", &["--checkpoint", s(&tmp.path().join("none.avft")), "--data", s(&data), "--out", s(&out)]),
        EXIT_CONFIG
    );
}

fn pretrain(data: &Path, out: &Path, variant: &str) -> i32 {
    let mut args = vec!["--data", s(data), "--out", s(out), "--variant", variant];
    args.extend_from_slice(&FAST_PRETRAIN);
    avparse("pretrain", &args)
}

#[test]
fn pretraining_variants_are_selected_and_deterministic() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(&tmp, &[]);
    let mut logs = Vec::new();
    for variant in ["uni", "cross", "multi"] {
        let out = tmp.path().join(variant);
        assert_eq!(pretrain(&data, &out, variant), 0);
        let log = fs::read_to_string(out.join("pretrain.log")).unwrap();
        let rows: Vec<Vec<&str>> = log.lines().skip(1).map(|l| l.split('\t').collect()).collect();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r[1] == variant));
        let first: f64 = rows[0][2].parse().unwrap();
        logs.push(first);
        let train = avparse::data::Dataset::load(&out.join("features").join("train")).unwrap();
        assert_eq!(train.feature_dim, 16);
        assert!(out.join("features").join("test").is_dir());
    }
    // At initialization the multi objective is the sum of the other two.
    assert!((logs[2] - logs[0] - logs[1]).abs() < 1e-5, "{logs:?}");

    let again = tmp.path().join("again");
    assert_eq!(pretrain(&data, &again, "multi"), 0);
    for f in ["pretrainer.avft", "pretrain.log"] {
        assert_eq!(fs::read(again.join(f)).unwrap(), fs::read(tmp.path().join("multi").join(f)).unwrap(), "{f}");
    }
    let features = |d: &Path| fs::read(d.join("features").join("test").join("features.avft")).unwrap();
    assert_eq!(features(&again), features(&tmp.path().join("multi")));

    let concat = tmp.path().join("concat");
    let mut args = vec!["--data", s(&data), "--out", s(&concat), "--export-mode", "concat"];
    args.extend_from_slice(&FAST_PRETRAIN);
    assert_eq!(avparse("pretrain", &args), 0);
    let exported = avparse::data::Dataset::load(&concat.join("features").join("train")).unwrap();
    assert_eq!(exported.feature_dim, 64 + 16);

    let trained = tmp.path().join("on_exported");
    assert_eq!(train(&concat.join("features"), &trained), 0);
}

#[test]
fn exploding_learning_rate_exits_four() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(&tmp, &[]);
    let out = tmp.path().join("boom");
    let args = ["--data", s(&data), "--out", s(&out), "--epochs", "3", "--batch-size", "8"];
    let mut argv = args.to_vec();
    argv.extend(["--optimizer", "sgd", "--lr", "1e150"]);
    assert_eq!(avparse("train", &argv), EXIT_DIVERGENCE);
    assert!(!out.join(PARSER_CHECKPOINT).exists());
}
