mod settings;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use luvt_core::dataset::{load_corpus, read_pgm, save_series, simulate_corpus, split_by_series};
use luvt_core::eval::{default_r_grid, latency_bench, latency_csv, pr_csv, pr_curve};
use luvt_core::train::run_schedule_with;
use luvt_core::{Annotation, Error, LabeledSeries, ModelParams, Result, Sample};
use settings::RunConfig;

#[derive(Parser)]
#[command(name = "luvt", version, about = "Synthetic wave-image defect detection: simulate, train, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Run seed; overrides `seed` from the file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root holding data/, ckpt/ and reports/.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the ten-series corpus into data/.
    Simulate,
    /// Train on the train split and write checkpoints and the epoch report.
    Train,
    /// Precision and recall on the test split over the margin grid.
    Evaluate,
    /// Classify and localise one PGM image.
    Predict { image: PathBuf },
    /// Single-image latency of the configured backbone and its halved twin.
    Bench,
}

struct Layout {
    data: PathBuf,
    ckpt: PathBuf,
    reports: PathBuf,
}

impl Layout {
    fn new(root: &Path) -> Self {
        Layout {
            data: root.join("data"),
            ckpt: root.join("ckpt"),
            reports: root.join("reports"),
        }
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|source| Error::Io { path: p.to_path_buf(), source })
}

fn write(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|source| Error::Io { path: p.to_path_buf(), source })
}

fn samples(series: &[LabeledSeries], size: usize) -> Vec<Sample> {
    series.iter().flat_map(|s| s.samples(size)).collect()
}

fn checkpoint(cfg: &RunConfig, layout: &Layout) -> PathBuf {
    cfg.checkpoint.clone().unwrap_or_else(|| layout.ckpt.join("best.ckpt"))
}

fn simulate(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    create_dir(&layout.data)?;
    let corpus = simulate_corpus(&cfg.plate, &cfg.corpus)?;
    for s in &corpus {
        let dir = save_series(s, &layout.data)?;
        println!("series {} frames={} positives={} dir={}", s.id, s.frames.len(), s.positives(), dir.display());
    }
    Ok(())
}

fn train(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    let (train, val, _) = split_by_series(load_corpus(&layout.data)?, &cfg.split)?;
    let size = cfg.model.input_size;
    let (train, val) = (samples(&train, size), samples(&val, size));
    let mut params = ModelParams::new(cfg.model.clone(), cfg.seed)?;
    let total = cfg.train.schedule.total_epochs();
    let (report, best) = run_schedule_with(&train, &val, &cfg.train, &mut params, |e| {
        eprintln!(
            "epoch {}/{total} stage {} train_loss={:.5} val_loss={:.5} val_f={:.4}",
            e.epoch, e.stage, e.train_loss, e.val_loss, e.val_metric
        );
    })?;
    create_dir(&layout.ckpt)?;
    create_dir(&layout.reports)?;
    best.save(&layout.ckpt.join("best.ckpt"))?;
    params.save(&layout.ckpt.join("last.ckpt"))?;
    write(&layout.reports.join("train.csv"), &report.to_csv())?;
    println!("selected epoch {} of {total} by {}", report.selected_epoch, report.metric);
    Ok(())
}

fn evaluate(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    let model = ModelParams::load(&checkpoint(cfg, layout))?;
    let (_, _, test) = split_by_series(load_corpus(&layout.data)?, &cfg.split)?;
    let test = samples(&test, model.config.input_size);
    let mut preds = Vec::with_capacity(test.len());
    for chunk in test.chunks(64) {
        let imgs: Vec<&[f32]> = chunk.iter().map(|s| s.image.as_slice()).collect();
        preds.extend(model.predict_batch(&imgs)?);
    }
    let truths: Vec<Annotation> = test.iter().map(|s| s.annotation).collect();
    let grid = cfg.r_grid.clone().unwrap_or_else(|| default_r_grid(model.config.input_size));
    let curve = pr_curve(&preds, &truths, &grid)?;
    create_dir(&layout.reports)?;
    write(&layout.reports.join("pr.csv"), &pr_csv(&curve))?;
    for p in &curve {
        println!("r={:.3} precision={:.4} recall={:.4}", p.r, p.precision, p.recall);
    }
    Ok(())
}

fn predict(cfg: &RunConfig, layout: &Layout, image: &Path) -> Result<()> {
    let model = ModelParams::load(&checkpoint(cfg, layout))?;
    let frame = read_pgm(image)?;
    let size = model.config.input_size;
    let sample = Sample::from_frame(&frame, Annotation::no_defect(), size, 0, 0);
    let p = model.predict(&sample.image)?;
    // Back to the pixel grid of the file.
    let x = (p.center_px.0 + 0.5) * frame.width as f64 / size as f64 - 0.5;
    let y = (p.center_px.1 + 0.5) * frame.height as f64 / size as f64 - 0.5;
    println!(
        "class={} probability={:.6} x={x:.3} y={y:.3}",
        p.predicted_class.label(),
        p.probability
    );
    Ok(())
}

fn bench(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    let full = ModelParams::new(cfg.model.clone(), cfg.seed)?;
    let half = ModelParams::new(cfg.model.halved(), cfg.seed)?;
    let side = cfg.model.input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let images: Vec<Vec<f32>> = (0..8).map(|_| (0..side * side).map(|_| rng.random::<f32>()).collect()).collect();
    let refs: Vec<&[f32]> = images.iter().map(|v| v.as_slice()).collect();
    let mut rows = Vec::new();
    for (label, model) in [("full", &full), ("halved", &half)] {
        let r = latency_bench(model, &refs, cfg.bench_warmup, cfg.bench_reps)?;
        println!("{label} widths={:?} median_ms={:.4} p90_ms={:.4}", model.config.widths, r.median_ms, r.p90_ms);
        rows.push((label.to_string(), r));
    }
    create_dir(&layout.reports)?;
    write(&layout.reports.join("latency.csv"), &latency_csv(&rows))
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.set, cli.seed)?;
    let layout = Layout::new(&cli.out);
    match &cli.command {
        Command::Simulate => simulate(&cfg, &layout),
        Command::Train => train(&cfg, &layout),
        Command::Evaluate => evaluate(&cfg, &layout),
        Command::Predict { image } => predict(&cfg, &layout, image),
        Command::Bench => bench(&cfg, &layout),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={} msg={msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
