use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dcqe::config::{Overrides, RunConfig, VERSION};
use dcqe::desk::DeskSet;
use dcqe::error::{Error, Result};
use dcqe::harness::{
    load_image_dir, parse_cycles_csv, render_table, summarize, write_cycles_csv, write_summary_csv, Case, ExperimentReport,
    Harness,
};
use dcqe::image::{load_pnm, ImageBuffer};
use dcqe::models::init_params;
use dcqe::theory::train_toy;
use dcqe::training::{train_loop, PatchPool, TrainOutputs};

#[derive(Parser)]
#[command(name = "dcqe", version, about = "Domain-consistent quality enhancement toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Harness worker threads (default: one per processor).
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    cycles: Option<usize>,
    /// JPEG-style quality used for training inputs and evaluation.
    #[arg(long)]
    quality: Option<u8>,
    /// same_method | vary_method | vary_method_and_codec (or 1 | 2 | 3).
    #[arg(long)]
    case: Option<String>,
    #[arg(long = "lambda-iden")]
    lambda_iden: Option<f64>,
    #[arg(long = "lambda-idem")]
    lambda_idem: Option<f64>,
    #[arg(long = "lambda-comp")]
    lambda_comp: Option<f64>,
    #[arg(long)]
    a: Option<f64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train an enhancement model; writes model.ckpt and loss.csv.
    Train(Common),
    /// Run one image through the enhancement cycles.
    Cycle {
        #[command(flatten)]
        common: Common,
        /// Image to cycle (overrides data.image).
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// Run the multi-enhancement protocol over a dataset.
    Experiment(Common),
    /// Train and evaluate the 2-D toy model.
    Toy(Common),
    /// Summarize a per-cycle CSV into DI tables.
    Report {
        #[command(flatten)]
        common: Common,
        /// Per-cycle CSV (overrides report.input).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Write the procedural desk dataset as PGM files.
    Desk(Common),
}

/// Output directory that deletes what it wrote unless committed.
struct OutDir {
    root: PathBuf,
    created: bool,
    files: Vec<PathBuf>,
    committed: bool,
}

impl OutDir {
    fn open(root: &Path) -> Result<Self> {
        let created = !root.exists();
        std::fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
        Ok(OutDir {
            root: root.to_path_buf(),
            created,
            files: Vec::new(),
            committed: false,
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.root.join(name);
        self.files.push(p.clone());
        p
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let p = self.path(name);
        std::fs::write(&p, contents).map_err(|e| io_err(&p, e))
    }

    fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        if self.created {
            let _ = std::fs::remove_dir_all(&self.root);
        } else {
            for f in &self.files {
                let _ = if f.is_dir() {
                    std::fs::remove_dir_all(f)
                } else {
                    std::fs::remove_file(f)
                };
            }
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::io(path, e)
}

fn build_config(common: &Common, command: &str) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.command = command.to_string();
    let case = common.case.as_deref().map(str::parse::<Case>).transpose()?;
    cfg.apply(&Overrides {
        seed: common.seed,
        workers: common.workers,
        out: common.out.clone(),
        cycles: common.cycles,
        quality: common.quality,
        case,
        lambda_iden: common.lambda_iden,
        lambda_idem: common.lambda_idem,
        lambda_comp: common.lambda_comp,
        a: common.a,
    })?;
    cfg.resolve()?;
    Ok(cfg)
}

fn write_provenance(out: &mut OutDir, cfg: &RunConfig) -> Result<()> {
    out.write("config.toml", &cfg.to_toml()?)?;
    out.write("seed.txt", &format!("{}\n", cfg.seed))?;
    out.write("version.txt", &format!("dcqe {VERSION}\n"))
}

fn check_color(cfg: &RunConfig, images: &[ImageBuffer]) -> Result<()> {
    let want = cfg.data.color.channels();
    match images.iter().find(|i| i.channels() != want) {
        Some(i) => Err(Error::Dataset(format!(
            "data.color declares {want} channel(s) but an image has {}",
            i.channels()
        ))),
        None => Ok(()),
    }
}

fn training_images(cfg: &RunConfig) -> Result<Vec<ImageBuffer>> {
    let images = match &cfg.data.train {
        Some(dir) => load_image_dir(dir)?.into_iter().map(|(_, i)| i).collect(),
        None => DeskSet::generate(&cfg.data.desk())?.train,
    };
    check_color(cfg, &images)?;
    Ok(images)
}

fn test_images(cfg: &RunConfig) -> Result<Vec<(String, ImageBuffer)>> {
    let images = match &cfg.data.test {
        Some(dir) => load_image_dir(dir)?,
        None => DeskSet::generate(&cfg.data.desk())?
            .test
            .into_iter()
            .enumerate()
            .map(|(i, img)| (format!("desk_{i:03}"), img))
            .collect(),
    };
    check_color(cfg, &images.iter().map(|(_, i)| i.clone()).collect::<Vec<_>>())?;
    Ok(images)
}

fn cmd_train(cfg: &RunConfig, out: &mut OutDir) -> Result<()> {
    let spec = cfg.model_spec()?;
    let codec = cfg.data.codec_setting()?.config()?;
    let mut pool = PatchPool::from_raw_images(
        &training_images(cfg)?,
        &codec,
        cfg.train.patch_size,
        cfg.train.patch_stride,
        cfg.seed,
    )?;
    log::info!("{} training patches, {} parameters", pool.len(), spec.parameter_count());
    let outputs = TrainOutputs {
        checkpoint: Some(out.path("model.ckpt")),
        loss_csv: Some(out.path("loss.csv")),
    };
    let params = init_params(&spec, cfg.seed)?;
    train_loop(
        &spec,
        params,
        &cfg.train,
        &mut pool,
        &cfg.loss,
        &cfg.straightforward,
        &outputs,
    )?;
    Ok(())
}

fn write_experiment(out: &mut OutDir, report: &ExperimentReport, cycles: usize) -> Result<String> {
    out.write("cycles.csv", &write_cycles_csv(&report.rows))?;
    out.write("summary.csv", &write_summary_csv(&report.summary, cycles))?;
    out.write("trace.csv", &report.trace_csv())?;
    let table = render_table(&report.summary, cycles);
    out.write("report.txt", &table)?;
    Ok(table)
}

fn cmd_cycle(cfg: &RunConfig, out: &mut OutDir) -> Result<()> {
    let path = cfg
        .data
        .image
        .as_deref()
        .ok_or_else(|| Error::config("data.image", "the cycle command needs an image (--image)"))?;
    let img = load_pnm(path)?;
    check_color(cfg, std::slice::from_ref(&img))?;
    let harness = Harness::new(cfg.cycles.clone(), cfg.metrics.clone())?;
    let name = path.file_name().map_or("image".into(), |n| n.to_string_lossy().into_owned());
    let report = harness.run_experiment(&[(name, img)], 1)?;
    if let Some(e) = report.reports.iter().find_map(|r| r.error.as_ref()) {
        return Err(Error::Operator {
            name: "cycle".into(),
            reason: e.clone(),
        });
    }
    print!("{}", write_experiment(out, &report, cfg.cycles.cycles)?);
    Ok(())
}

fn cmd_experiment(cfg: &RunConfig, out: &mut OutDir) -> Result<()> {
    let images = test_images(cfg)?;
    let harness = Harness::new(cfg.cycles.clone(), cfg.metrics.clone())?;
    let report = harness.run_experiment(&images, cfg.workers())?;
    print!("{}", write_experiment(out, &report, cfg.cycles.cycles)?);
    Ok(())
}

fn cmd_toy(cfg: &RunConfig, out: &mut OutDir) -> Result<()> {
    let dist = cfg.toy.distribution()?;
    let (_, diag) = train_toy(&dist, &cfg.toy, &cfg.loss)?;
    let mut loss = String::from(dcqe::training::LossRecord::CSV_HEADER);
    loss.push('\n');
    for r in &diag.curve {
        loss.push_str(&r.csv_row());
        loss.push('\n');
    }
    out.write("loss.csv", &loss)?;
    out.write("samples.csv", &diag.samples_csv())?;
    out.write("drift.csv", &diag.drift_csv())?;
    let summary = diag.summary_csv();
    out.write("toy_summary.csv", &summary)?;
    print!("{summary}");
    Ok(())
}

fn cmd_report(cfg: &RunConfig, out: &mut OutDir) -> Result<()> {
    let path = cfg
        .report
        .input
        .as_deref()
        .ok_or_else(|| Error::config("report.input", "the report command needs a per-cycle CSV (--input)"))?;
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let rows = parse_cycles_csv(&text)?;
    let cycles = rows.iter().map(|r| r.cycle).max().unwrap_or(0);
    let summary = summarize(&rows, cycles);
    out.write("summary.csv", &write_summary_csv(&summary, cycles))?;
    let table = render_table(&summary, cycles);
    out.write("report.txt", &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_desk(cfg: &RunConfig, out: &mut OutDir) -> Result<()> {
    let set = DeskSet::generate(&cfg.data.desk())?;
    out.files.push(out.root.join("train"));
    out.files.push(out.root.join("test"));
    let written = set.write(&out.root)?;
    println!("wrote {} images to {}", written.len(), out.root.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let (common, name) = match &cli.command {
        Cmd::Train(c) => (c, "train"),
        Cmd::Cycle { common, .. } => (common, "cycle"),
        Cmd::Experiment(c) => (c, "experiment"),
        Cmd::Toy(c) => (c, "toy"),
        Cmd::Report { common, .. } => (common, "report"),
        Cmd::Desk(c) => (c, "desk"),
    };
    let mut cfg = build_config(common, name)?;
    match &cli.command {
        Cmd::Cycle { image: Some(p), .. } => cfg.data.image = Some(p.clone()),
        Cmd::Report { input: Some(p), .. } => cfg.report.input = Some(p.clone()),
        _ => {}
    }
    let mut out = OutDir::open(&cfg.out)?;
    write_provenance(&mut out, &cfg)?;
    match &cli.command {
        Cmd::Train(_) => cmd_train(&cfg, &mut out)?,
        Cmd::Cycle { .. } => cmd_cycle(&cfg, &mut out)?,
        Cmd::Experiment(_) => cmd_experiment(&cfg, &mut out)?,
        Cmd::Toy(_) => cmd_toy(&cfg, &mut out)?,
        Cmd::Report { .. } => cmd_report(&cfg, &mut out)?,
        Cmd::Desk(_) => cmd_desk(&cfg, &mut out)?,
    }
    out.commit();
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
