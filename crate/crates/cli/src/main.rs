use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use wsdf::dataset::{generate_synthetic, write_manifest, ManifestEntry, SplitKind, SyntheticFactorSpec};
use wsdf::evaluation::figures::{render_metric_bars, render_strip};
use wsdf::evaluation::{export_latents, interpolate, InterpolationMode, MetricsReport, Summary};
use wsdf::mesh::io::{read_obj_mesh, write_obj};
use wsdf::mesh::ScanRecord;
use wsdf::trainer::{self, ablation_suite, Checkpoint, DataKind, TrainConfig};
use wsdf::WsdfError;

/// Weakly-supervised identity/expression disentanglement for registered face meshes.
#[derive(Parser)]
#[command(name = "wsdf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set loss.lambda_jac=0.2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to `<output root>/<verb>`.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Root for default output directories.
    #[arg(long, env = "WSDF_OUTPUT_ROOT", default_value = "runs")]
    output_root: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic dataset as OBJ files plus a manifest.
    GenerateData(Common),
    /// Train a model; writes config.toml, metrics.jsonl and final.wsdf.
    Train(Common),
    /// Evaluate a checkpoint and write report.toml, a per-sample dump and a figure.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate the training split instead of the test split.
        #[arg(long)]
        train_split: bool,
    },
    /// Train and evaluate the cumulative ablation ladder.
    Ablate(Common),
    /// Decode a path between the latent codes of two meshes.
    Interpolate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        to: PathBuf,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        /// joint, id-only or exp-only
        #[arg(long, default_value = "joint")]
        mode: String,
    },
    /// Write posterior means of every scan to latents.tsv.
    ExportLatents {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Tabulate and plot one or more report.toml files.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

impl Common {
    fn config(&self, base: Option<TrainConfig>) -> anyhow::Result<TrainConfig> {
        let mut cfg = match (&self.config, base) {
            (Some(path), _) => TrainConfig::read(path)?,
            (None, Some(cfg)) => cfg,
            (None, None) => TrainConfig::default(),
        };
        for o in &self.overrides {
            cfg.set_override(o)?;
        }
        if let Some(e) = self.epochs {
            cfg.set_override(&format!("epochs={e}"))?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    fn out_dir(&self, verb: &str) -> anyhow::Result<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| self.output_root.join(verb));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err.downcast_ref::<WsdfError>().map_or(1, WsdfError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenerateData(common) => generate_data(&common),
        Command::Train(common) => {
            let cfg = common.config(None)?;
            let out = common.out_dir("train")?;
            let outcome = trainer::train(&cfg, Some(&out))?;
            if let Some(last) = outcome.log.last() {
                println!("step {} total {:.6} rec {:.6}", last.step, last.total, last.rec);
            }
            println!("checkpoint {}", out.join("final.wsdf").display());
            Ok(())
        }
        Command::Evaluate { common, checkpoint, train_split } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let cfg = common.config(Some(ckpt.trained.config.clone()))?;
            let data = cfg.data.load()?;
            let out = common.out_dir("evaluate")?;
            let ev = if train_split {
                trainer::evaluate_records(&ckpt.trained, &data.split.train, &data.ground_truth)?
            } else {
                trainer::evaluate(&ckpt.trained, &data)?
            };
            ev.report.write(&out.join("report.toml"))?;
            ev.dump.write(&out.join("samples"))?;
            render_metric_bars(std::slice::from_ref(&ev.report), &out.join("metrics.png"))?;
            print!("{}", ev.report.to_toml()?);
            Ok(())
        }
        Command::Ablate(common) => {
            let cfg = common.config(None)?;
            let out = common.out_dir("ablate")?;
            let report = ablation_suite(&cfg, Some(&out))?;
            let reports: Vec<MetricsReport> = report.rows.iter().map(|r| r.report.clone()).collect();
            render_metric_bars(&reports, &out.join("ablation.png"))?;
            print!("{}", report.to_table());
            Ok(())
        }
        Command::Interpolate { common, checkpoint, from, to, steps, mode } => {
            let mode: InterpolationMode = mode.parse()?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let topology = ckpt.trained.model.topology().clone();
            let a = read_obj_mesh(&from, &topology)?;
            let b = read_obj_mesh(&to, &topology)?;
            let out = common.out_dir("interpolate")?;
            let meshes = interpolate(&ckpt.trained, &a, &b, steps, mode)?;
            for (k, m) in meshes.iter().enumerate() {
                write_obj(&out.join(format!("step_{k:03}.obj")), m)?;
            }
            render_strip(&meshes, 160, &out.join("strip.png"))?;
            println!("wrote {} meshes to {}", meshes.len(), out.display());
            Ok(())
        }
        Command::ExportLatents { common, checkpoint } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let cfg = common.config(Some(ckpt.trained.config.clone()))?;
            let data = cfg.data.load()?;
            let out = common.out_dir("latents")?;
            let records: Vec<ScanRecord> = data.split.train.iter().chain(&data.split.test).cloned().collect();
            let rows = export_latents(&ckpt.trained, &records, &out.join("latents.tsv"))?;
            println!("wrote {} latent rows to {}", rows.len(), out.join("latents.tsv").display());
            Ok(())
        }
        Command::Report { common, reports } => {
            let loaded = reports.iter().map(|p| MetricsReport::read(p)).collect::<Result<Vec<_>, _>>()?;
            let out = common.out_dir("report")?;
            render_metric_bars(&loaded, &out.join("metrics.png"))?;
            println!("{}", report_table(&reports, &loaded));
            Ok(())
        }
    }
}

fn report_table(paths: &[PathBuf], reports: &[MetricsReport]) -> String {
    let cell = |s: Option<Summary>| s.map_or("-".to_owned(), |s| format!("{:.4}", s.mean));
    let mut lines = vec![format!("{:<32} {:>8} {:>10} {:>10} {:>10} {:>10}", "report", "scans", "avd", "id", "exp", "neu")];
    for (p, r) in paths.iter().zip(reports) {
        lines.push(format!(
            "{:<32} {:>8} {:>10} {:>10} {:>10} {:>10}",
            p.display(),
            r.scans,
            cell(Some(r.avd)),
            cell(r.id),
            cell(r.exp),
            cell(r.neu)
        ));
    }
    lines.join("\n")
}

fn generate_data(common: &Common) -> anyhow::Result<()> {
    let cfg = common.config(None)?;
    if cfg.data.kind != DataKind::Synthetic {
        bail!(WsdfError::Config("generate-data needs data.kind = \"synthetic\"".into()));
    }
    let out = common.out_dir("data")?;
    let spec = SyntheticFactorSpec::from_config(&cfg.data.synthetic)?;
    let data = generate_synthetic(&spec)?;
    let mut entries = Vec::new();
    let io = |p: &Path| format!("creating {}", p.display());
    for (kind, records) in [(SplitKind::Train, &data.split.train), (SplitKind::Test, &data.split.test)] {
        for r in records {
            let label = r.expression_label.clone().unwrap_or_else(|| "scan".into());
            let rel = PathBuf::from("scans").join(&r.subject_id).join(format!("{label}.obj"));
            let dir = out.join(rel.parent().expect("has parent"));
            fs::create_dir_all(&dir).with_context(|| io(&dir))?;
            write_obj(&out.join(&rel), &r.mesh)?;
            entries.push(ManifestEntry { subject_id: r.subject_id.clone(), path: rel, split: kind, expression_label: r.expression_label.clone() });
        }
    }
    let neutral_dir = out.join("neutrals");
    fs::create_dir_all(&neutral_dir).with_context(|| io(&neutral_dir))?;
    for (subject, mesh) in &data.ground_truth {
        let rel = PathBuf::from("neutrals").join(format!("{subject}.obj"));
        write_obj(&out.join(&rel), mesh)?;
        entries.push(ManifestEntry { subject_id: subject.clone(), path: rel, split: SplitKind::Neutral, expression_label: None });
    }
    let template = data.ground_truth.values().next().context("dataset has no subjects")?;
    write_obj(&out.join("template.obj"), template)?;
    write_manifest(&out.join("manifest.tsv"), &entries)?;
    let mut manifest_cfg = cfg.clone();
    manifest_cfg.data.kind = DataKind::Manifest;
    manifest_cfg.data.path = Some(out.join("manifest.tsv"));
    manifest_cfg.data.template = Some(out.join("template.obj"));
    fs::write(out.join("synthetic.toml"), toml::to_string(&cfg.data.synthetic)?).with_context(|| io(&out))?;
    fs::write(out.join("train.toml"), manifest_cfg.to_toml()?).with_context(|| io(&out))?;
    println!(
        "wrote {} scans of {} subjects to {}",
        data.split.train.len() + data.split.test.len(),
        data.ground_truth.len(),
        out.display()
    );
    Ok(())
}
