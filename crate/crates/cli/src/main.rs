//! Command-line entry points: `synth`, `train`, `eval`, `predict`.
//!
//! Exit codes: 0 on success, 2 on validation/config errors, 3 on runtime
//! failures.

use clap::{Parser, Subcommand, ValueEnum};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use stqa_core::decode::Vocab;
use stqa_core::error::CoreError;
use stqa_core::io::save_predictions;
use stqa_core::metrics::DEFAULT_TAUS;
use stqa_core::pipeline::Model;
use stqa_core::synth::{self, split_seed, World};
use stqa_core::train::{
    evaluate_episodes, load_dataset, train_episodes, Checkpoint, RunConfig,
};
use stqa_core::types::Episode;

#[derive(Parser)]
#[command(
    name = "stqa",
    about = "Grounded scene-text video QA: synthetic data, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Regime {
    #[value(name = "1x1")]
    Top1x1,
    #[value(name = "5x5")]
    Top5x5,
}

impl Regime {
    fn pair(self) -> (usize, usize) {
        match self {
            Regime::Top1x1 => (1, 1),
            Regime::Top5x5 => (5, 5),
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test splits plus the vocabulary file.
    Synth {
        /// TOML run configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset root (overrides the config's data_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Generation seed (overrides the config's synth seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; saves best/last checkpoints under the output directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset root (overrides the config's data_dir).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for checkpoints (overrides the config's out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Training seed (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from a checkpoint written by an identical config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a split; prints both regimes and writes the
    /// prediction file.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Regime for the report written to disk (both are printed).
        #[arg(long, value_enum, default_value = "1x1")]
        regime: Regime,
        /// Prediction file path (default: <out_dir>/predictions_<split>.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a single episode and print the answer with its grounded boxes.
    Predict {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Episode id, e.g. ep00042.
        #[arg(long)]
        episode_id: String,
        /// Optional JSON dump of the overlay coordinates.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig, CoreError> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let cfg: RunConfig = toml::from_str(&text)
        .map_err(|e| CoreError::parse(path.display().to_string(), e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn build_model(cfg: &RunConfig, vocab: Vocab, checkpoint: &Path) -> Result<Model, CoreError> {
    let ck = Checkpoint::load(checkpoint)?;
    if ck.config_hash != cfg.hash() {
        return Err(CoreError::Config(format!(
            "checkpoint was trained under config {} but this config hashes to {}",
            ck.config_hash,
            cfg.hash()
        )));
    }
    let mut model = Model::new(cfg.model.clone(), vocab, cfg.seed)?;
    ck.apply(&mut model, None)?;
    Ok(model)
}

fn pick_split(
    split: Split,
    data: (Vec<Episode>, Vec<Episode>, Vec<Episode>),
) -> Vec<Episode> {
    match split {
        Split::Train => data.0,
        Split::Val => data.1,
        Split::Test => data.2,
    }
}

fn cmd_synth(
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<(), CoreError> {
    let mut cfg = load_config(&config)?;
    if let Some(out) = out {
        cfg.data_dir = out;
    }
    if let Some(seed) = seed {
        cfg.synth.seed = seed;
    }
    cfg.synth.validate()?;
    if cfg.data_dir.as_os_str().is_empty() {
        return Err(CoreError::Config("an output directory is required (--out)".into()));
    }
    let world = World::build(&cfg.synth);
    let vocab = Vocab::from_content_words(world.vocab_words());
    std::fs::create_dir_all(&cfg.data_dir)
        .map_err(|e| CoreError::io(cfg.data_dir.display().to_string(), e))?;
    vocab.save(&cfg.data_dir.join("vocab.txt"))?;
    println!("config hash: {}", cfg.hash());
    println!(
        "{:<8} {:>9} {:>12} {:>12} {:>12}",
        "split", "episodes", "seg ratio", "box area", "tokens/frame"
    );
    for (name, n, salt) in [
        ("train", cfg.dataset.train, 1u64),
        ("val", cfg.dataset.val, 2),
        ("test", cfg.dataset.test, 3),
    ] {
        let dir = cfg.data_dir.join(name);
        let manifest = synth::generate_split(&cfg.synth, n, split_seed(cfg.synth.seed, salt), &dir)?;
        let episodes = synth::load_split(&dir)?;
        let stats = synth::split_stats(&episodes);
        println!(
            "{:<8} {:>9} {:>12.4} {:>12.6} {:>12.2}",
            name, manifest.n_episodes, stats.mean_segment_ratio, stats.mean_box_area_ratio,
            stats.mean_tokens_per_frame
        );
    }
    Ok(())
}

fn cmd_train(
    config: Option<PathBuf>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    resume: Option<PathBuf>,
) -> Result<(), CoreError> {
    let mut cfg = load_config(&config)?;
    if let Some(data) = data {
        cfg.data_dir = data;
    }
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let (train, val, _test, vocab) = load_dataset(&cfg.data_dir)?;
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CoreError::io(cfg.out_dir.display().to_string(), e))?;
    let resume_ck = match &resume {
        Some(p) => Some(Checkpoint::load(p)?),
        None => None,
    };
    let mut model = Model::new(cfg.model.clone(), vocab, cfg.seed)?;
    println!("config hash: {}", cfg.hash());
    let summary = train_episodes(
        &mut model,
        &cfg,
        &train,
        &val,
        resume_ck.as_ref(),
        Some(&cfg.out_dir),
    )?;
    println!(
        "done: {} iterations, best val acc {:.2}, final loss {:.6}",
        summary.iterations_run, summary.best_val_acc, summary.final_loss
    );
    println!("checkpoints: {}", cfg.out_dir.display());
    Ok(())
}

fn cmd_eval(
    config: Option<PathBuf>,
    checkpoint: PathBuf,
    data: Option<PathBuf>,
    split: Split,
    regime: Regime,
    out: Option<PathBuf>,
) -> Result<(), CoreError> {
    let mut cfg = load_config(&config)?;
    if let Some(data) = data {
        cfg.data_dir = data;
    }
    let (train, val, test, vocab) = load_dataset(&cfg.data_dir)?;
    let model = build_model(&cfg, vocab, &checkpoint)?;
    let episodes = pick_split(split, (train, val, test));
    let split_name = format!("{split:?}").to_lowercase();

    let mut chosen_report = None;
    for r in [Regime::Top1x1, Regime::Top5x5] {
        let (report, results) = evaluate_episodes(&model, &episodes, r.pair(), &DEFAULT_TAUS)?;
        print!("{}", report.table());
        if r.pair() == regime.pair() {
            let pred_path = out.clone().unwrap_or_else(|| {
                let dir = if cfg.out_dir.as_os_str().is_empty() {
                    PathBuf::from(".")
                } else {
                    cfg.out_dir.clone()
                };
                dir.join(format!("predictions_{split_name}.json"))
            });
            if let Some(parent) = pred_path.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)
                        .map_err(|e| CoreError::io(parent.display().to_string(), e))?;
                }
            }
            let map: BTreeMap<String, (String, stqa_core::types::GroundingResult)> = results;
            save_predictions(&map, &pred_path)?;
            let report_path = pred_path.with_file_name(format!(
                "report_{split_name}_{}x{}.json",
                regime.pair().0,
                regime.pair().1
            ));
            let json = serde_json::to_string_pretty(&report)
                .map_err(|e| CoreError::parse(report_path.display().to_string(), e.to_string()))?;
            std::fs::write(&report_path, json)
                .map_err(|e| CoreError::io(report_path.display().to_string(), e))?;
            println!("predictions: {}", pred_path.display());
            println!("report:      {}", report_path.display());
            chosen_report = Some(report);
        }
    }
    let _ = chosen_report;
    Ok(())
}

fn cmd_predict(
    config: Option<PathBuf>,
    checkpoint: PathBuf,
    data: Option<PathBuf>,
    split: Split,
    episode_id: String,
    out: Option<PathBuf>,
) -> Result<(), CoreError> {
    let mut cfg = load_config(&config)?;
    if let Some(data) = data {
        cfg.data_dir = data;
    }
    let (train, val, test, vocab) = load_dataset(&cfg.data_dir)?;
    let model = build_model(&cfg, vocab, &checkpoint)?;
    let episodes = pick_split(split, (train, val, test));
    let ep = episodes
        .iter()
        .find(|e| e.id == episode_id)
        .ok_or_else(|| CoreError::Validation(format!("unknown episode id {episode_id:?}")))?;
    let output = model.predict(&ep.without_annotation())?;
    println!("episode:  {}", ep.id);
    println!("question: {}", ep.question);
    println!("answer:   {}", output.answer);
    println!("grounded frames and boxes:");
    for fs in &output.grounding.frames {
        println!("  frame {:>4}  score {:+.6}", fs.frame, fs.score);
        if let Some(toks) = output.grounding.boxes.get(&fs.frame) {
            for st in toks {
                let b = st.token.bbox;
                println!(
                    "      [{:.4}, {:.4}, {:.4}, {:.4}]  score {:+.6}  text {:?}",
                    b.x1, b.y1, b.x2, b.y2, st.score, st.token.text
                );
            }
        }
    }
    if let Some(out) = out {
        let dump = serde_json::json!({
            "id": ep.id,
            "question": ep.question,
            "answer": output.answer,
            "frames": output.grounding.frames.iter().map(|fs| {
                let boxes: Vec<serde_json::Value> = output
                    .grounding
                    .boxes
                    .get(&fs.frame)
                    .map(|toks| toks.iter().map(|st| {
                        let b = st.token.bbox;
                        serde_json::json!([b.x1, b.y1, b.x2, b.y2, st.score, st.token.text])
                    }).collect())
                    .unwrap_or_default();
                serde_json::json!({"frame": fs.frame, "score": fs.score, "boxes": boxes})
            }).collect::<Vec<_>>(),
        });
        let text = serde_json::to_string_pretty(&dump)
            .map_err(|e| CoreError::parse(out.display().to_string(), e.to_string()))?;
        std::fs::write(&out, text).map_err(|e| CoreError::io(out.display().to_string(), e))?;
        println!("overlay dump: {}", out.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { config, out, seed } => cmd_synth(config, out, seed),
        Command::Train { config, data, out, seed, resume } => {
            cmd_train(config, data, out, seed, resume)
        }
        Command::Eval { config, checkpoint, data, split, regime, out } => {
            cmd_eval(config, checkpoint, data, split, regime, out)
        }
        Command::Predict { config, checkpoint, data, split, episode_id, out } => {
            cmd_predict(config, checkpoint, data, split, episode_id, out)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
