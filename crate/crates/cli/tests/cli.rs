//! End-to-end CLI checks: synth → train → eval → predict on a tiny world.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stqa"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const CONFIG: &str = r#"
seed = 3

[model.encoder]
d = 16
visual_dim = 12
id_embed_dim = 8
max_question_len = 8
joint_layers = 1
heads = 2
ffn_mult = 2
max_frames = 32
max_tracks = 32
question_buckets = 64
word_buckets = 128
max_seq = 256

[model.grounding]
k1 = 2
k2 = 2

[model.decoder]
layers = 1
steps = 4
vocab_size = 0
d = 16
heads = 2

[synth]
t = 8
s = 4
visual_dim = 12
distractors_per_frame = 2
n_pairs = 4
n_distractor_words = 8
signal_strength = 3.0
seed = 11

[dataset]
train = 6
val = 3
test = 3

[optimizer]
lr = 0.002
milestones = []
batch_size = 2
max_iterations = 12
eval_every = 6
log_every = 0
"#;

struct Fixture {
    _dir: tempfile::TempDir,
    config: std::path::PathBuf,
    data: std::path::PathBuf,
    out: std::path::PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, CONFIG).unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("run");
    Fixture { _dir: dir, config, data, out }
}

fn synth(f: &Fixture) {
    let out = run(&[
        "synth",
        "--config",
        f.config.to_str().unwrap(),
        "--out",
        f.data.to_str().unwrap(),
    ]);
    assert_ok(&out);
}

fn train(f: &Fixture) {
    let out = run(&[
        "train",
        "--config",
        f.config.to_str().unwrap(),
        "--data",
        f.data.to_str().unwrap(),
        "--out",
        f.out.to_str().unwrap(),
    ]);
    assert_ok(&out);
}

#[test]
fn synth_writes_all_artifacts_and_is_reproducible() {
    let f = fixture();
    synth(&f);
    for split in ["train", "val", "test"] {
        assert!(f.data.join(split).join("manifest.json").is_file());
        assert!(f.data.join(split).join("annotations.json").is_file());
        assert!(f.data.join(split).join("ocr.json").is_file());
        assert!(f.data.join(split).join("features").join("ep00000.bin").is_file());
    }
    assert!(f.data.join("vocab.txt").is_file());

    // second generation into another directory is byte-identical
    let f2 = fixture();
    synth(&f2);
    for split in ["train", "val", "test"] {
        for name in ["manifest.json", "annotations.json", "ocr.json"] {
            let a = std::fs::read(f.data.join(split).join(name)).unwrap();
            let b = std::fs::read(f2.data.join(split).join(name)).unwrap();
            assert_eq!(a, b, "{split}/{name} differs between identical runs");
        }
    }
}

#[test]
fn train_eval_predict_roundtrip() {
    let f = fixture();
    synth(&f);
    train(&f);
    assert!(f.out.join("last.ckpt").is_file());
    assert!(f.out.join("best.ckpt").is_file());

    let pred_path = f.out.join("preds.json");
    let out = run(&[
        "eval",
        "--config",
        f.config.to_str().unwrap(),
        "--checkpoint",
        f.out.join("best.ckpt").to_str().unwrap(),
        "--data",
        f.data.to_str().unwrap(),
        "--split",
        "test",
        "--regime",
        "1x1",
        "--out",
        pred_path.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("Top 1x1"), "missing 1x1 table:\n{stdout}");
    assert!(stdout.contains("Top 5x5"), "missing 5x5 table:\n{stdout}");
    assert!(pred_path.is_file());

    // the emitted prediction file replays to the same report
    let preds = stqa_core::io::load_predictions(&pred_path).unwrap();
    let episodes = stqa_core::synth::load_split(&f.data.join("test")).unwrap();
    let mut gts = std::collections::BTreeMap::new();
    for ep in &episodes {
        gts.insert(
            ep.id.clone(),
            stqa_core::io::AnnotatedEpisode::from_annotation(
                &ep.id,
                &ep.question,
                &ep.answers,
                ep.annotation.as_ref().unwrap(),
            ),
        );
    }
    let replay =
        stqa_core::metrics::evaluate(&preds, &gts, (1, 1), &stqa_core::metrics::DEFAULT_TAUS)
            .unwrap();
    let report_path = pred_path.with_file_name("report_test_1x1.json");
    assert!(report_path.is_file());
    let written: stqa_core::metrics::MetricReport =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(written, replay, "report must equal a replay on the emitted file");

    // predict on a known id prints the answer; repeated calls are stable
    let ckpt = f.out.join("best.ckpt");
    let args = [
        "predict",
        "--config",
        f.config.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        f.data.to_str().unwrap(),
        "--split",
        "test",
        "--episode-id",
        "ep00001",
    ];
    let a = run(&args);
    assert_ok(&a);
    let b = run(&args);
    assert_eq!(a.stdout, b.stdout, "predict must be stable across calls");
    assert!(String::from_utf8_lossy(&a.stdout).contains("answer:"));

    // unknown id → validation exit code 2
    let out = run(&[
        "predict",
        "--config",
        f.config.to_str().unwrap(),
        "--checkpoint",
        f.out.join("best.ckpt").to_str().unwrap(),
        "--data",
        f.data.to_str().unwrap(),
        "--episode-id",
        "nope",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_and_checkpoint_mismatch_is_a_validation_error() {
    let f = fixture();
    synth(&f);
    train(&f);
    // a config with a different seed hashes differently → exit 2
    let other = f.config.with_file_name("other.toml");
    std::fs::write(&other, CONFIG.replace("seed = 3", "seed = 4")).unwrap();
    let out = run(&[
        "eval",
        "--config",
        other.to_str().unwrap(),
        "--checkpoint",
        f.out.join("best.ckpt").to_str().unwrap(),
        "--data",
        f.data.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn malformed_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "optimizer = { batch_size = 0 }").unwrap();
    let out = run(&["synth", "--config", config.to_str().unwrap(), "--out", dir.path().join("d").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_dataset_is_a_runtime_error() {
    let f = fixture();
    let out = run(&[
        "train",
        "--config",
        f.config.to_str().unwrap(),
        "--data",
        f.data.join("missing").to_str().unwrap(),
        "--out",
        f.out.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn lambda_zero_ablation_trains() {
    let f = fixture();
    synth(&f);
    let cfg = f.config.with_file_name("l0.toml");
    std::fs::write(
        &cfg,
        format!("{CONFIG}\n[model.loss]\nlambda = 0.0\n"),
    )
    .unwrap();
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        f.data.to_str().unwrap(),
        "--out",
        f.out.to_str().unwrap(),
    ]);
    assert_ok(&out);
    assert!(Path::new(&f.out).join("last.ckpt").is_file());
}
