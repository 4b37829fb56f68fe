use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sslpdl_core::labeling::write_proportions_csv;
use sslpdl_core::nn::{load_checkpoint, save_checkpoint, Precision};
use sslpdl_core::pipeline::{
    ablate, evaluate, finetune, label_proportions, pretrain, save_ablation_csv, CheckpointMeta, ExperimentConfig,
    FinetuneStart, InitMode, LabelMode, RunReport, Sweep,
};
use sslpdl_core::synth::gen_dataset;
use sslpdl_core::{Error, Result};

#[derive(Parser)]
#[command(name = "sslpdl", version, about = "Masked pre-training and density labeling for rainfall segmentation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset and its manifest.
    Gen {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write class proportions of the training split.
    Label {
        #[arg(long)]
        config: PathBuf,
        /// onehot, pdl or smooth.
        #[arg(long, default_value = "pdl")]
        kind: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Masked reconstruction pre-training.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a saved pre-training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Segmentation fine-tuning.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        /// Pre-trained checkpoint, or `scratch`.
        #[arg(long)]
        init: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a saved fine-tuning checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a fine-tuned model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Overrides the config stored in the model.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report prefix; `.csv` and `.json` are appended.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grid sweep of fine-tuning runs.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        sweep: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if std::env::var_os(Precision::ENV).is_some() {
        cfg.precision = Precision::from_env()?;
    }
    Ok(cfg)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn print_report(r: &RunReport) {
    if let (Some(first), Some(last)) = (r.epoch_losses.first(), r.epoch_losses.last()) {
        println!("{}: {} epochs, loss {first:.6} -> {last:.6}, {} steps, {:.1}s", r.stage, r.epoch_losses.len(), r.steps, r.wall_clock_s);
    }
    if let Some(m) = &r.metrics {
        for t in &m.thresholds {
            let s = t.scores;
            println!("tau {:>6}: csi {:.4} f1 {:.4} precision {:.4} recall {:.4}", t.threshold, s.csi, s.f1, s.precision, s.recall);
        }
        println!("miou {:.4}", m.miou);
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Gen { config } => {
            let cfg = load_config(&config)?;
            let m = gen_dataset(&cfg.data.synth, cfg.data.counts, &cfg.data.dir)?;
            println!("wrote {} samples to {}", m.len(), cfg.data.manifest_path().display());
        }
        Cmd::Label { config, kind, out } => {
            let cfg = load_config(&config)?;
            let mode = LabelMode::parse(&kind)?;
            let (one_hot, other) = label_proportions(&cfg, mode)?;
            let out = out.unwrap_or_else(|| cfg.out_dir.join(format!("proportions_{}.csv", mode.name())));
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
            }
            write_proportions_csv(&out, &one_hot, &other)?;
            for (c, (a, b)) in one_hot.iter().zip(&other).enumerate() {
                println!("class {c}: one_hot {a:.6} {} {b:.6}", mode.name());
            }
            println!("wrote {}", out.display());
        }
        Cmd::Pretrain { config, out, resume } => {
            let cfg = load_config(&config)?;
            let resume = resume.map(|p| load_checkpoint(&p)).transpose()?;
            let (ck, report) = pretrain(&cfg, resume)?;
            save_checkpoint(&ck, &out)?;
            report.save(&with_suffix(&out, ".report.json"))?;
            print_report(&report);
            println!("wrote {}", out.display());
        }
        Cmd::Finetune { config, init, out, resume } => {
            let cfg = load_config(&config)?;
            let start = match (resume, init.as_deref()) {
                (Some(p), _) => FinetuneStart::Resume(load_checkpoint(&p)?),
                (None, Some("scratch")) => FinetuneStart::Scratch,
                (None, Some(p)) => FinetuneStart::Pretrained(load_checkpoint(Path::new(p))?),
                (None, None) => match (cfg.finetune.init, &cfg.finetune.checkpoint) {
                    (InitMode::Scratch, _) => FinetuneStart::Scratch,
                    (InitMode::Pretrained, Some(p)) => FinetuneStart::Pretrained(load_checkpoint(p)?),
                    (InitMode::Pretrained, None) => {
                        return Err(Error::Config("init is pretrained but no checkpoint given (--init or finetune.checkpoint)".into()))
                    }
                },
            };
            let out = out.unwrap_or_else(|| cfg.out_dir.join("finetune.sslc"));
            let (ck, report) = finetune(&cfg, start)?;
            save_checkpoint(&ck, &out)?;
            report.save(&with_suffix(&out, ".report.json"))?;
            print_report(&report);
            println!("wrote {}", out.display());
        }
        Cmd::Eval { model, split, config, out } => {
            let ck = load_checkpoint(&model)?;
            let cfg = match config {
                Some(p) => load_config(&p)?,
                None => CheckpointMeta::of(&ck)?.config,
            };
            let report = evaluate(&ck, &cfg, &split)?;
            let prefix = out.unwrap_or_else(|| with_suffix(&model, &format!(".eval_{split}")));
            let metrics = report.metrics.as_ref().expect("evaluation fills metrics");
            metrics.save(&with_suffix(&prefix, ".csv"), &with_suffix(&prefix, ".json"))?;
            print_report(&report);
            println!("wrote {}", with_suffix(&prefix, ".csv").display());
        }
        Cmd::Ablate { config, sweep, out } => {
            let cfg = load_config(&config)?;
            let sweep = Sweep::load(&sweep)?;
            let rows = ablate(&cfg, &sweep)?;
            save_ablation_csv(&rows, &out)?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            println!("{} cells, {failed} failed; wrote {}", rows.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
