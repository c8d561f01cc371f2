//! `cellmixer` command-line front end.
//!
//! Every stage of the pipeline is a subcommand; `run-experiment` chains them.
//! Settings come from a TOML config (`--config`), `--set section.key=value`
//! overrides and per-command flags, in increasing order of precedence.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error,
//! 3 numerical or training failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use cellmixer::config::{
    full_scale_overrides, sidecar_path, write_sidecar, PipelineConfig, Stamp, SIDECAR_NAME,
};
use cellmixer::experiment::run_experiment;
use cellmixer::foreground::extract_batch;
use cellmixer::imaging::io::{load_image, load_labels, save_labels};
use cellmixer::manifest::{split_manifest, DatasetManifest, Split};
use cellmixer::metrics::{
    compare_report, evaluate_model, format_table, load_labelled, AccuracyConvention, Aggregation,
    Comparison, EvalReport,
};
use cellmixer::mixer::{synthesize_set, SamplePool};
use cellmixer::overlay::render_overlay;
use cellmixer::phantom::{
    generate_population, generate_true_mixture, parse_class_mix, save_phantoms,
};
use cellmixer::segmenter::{sliding_window_infer, train, PixelClassifier, TrainMode};
use cellmixer::{ErrorKind, TOOL_VERSION};

#[derive(Parser)]
#[command(
    name = "cellmixer",
    version,
    about = "Annotated mixed-population training data from homogeneous cultures"
)]
struct Cli {
    #[command(flatten)]
    global: Global,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config value, e.g. `--set train.iterations=500`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Global seed; all module seeds derive from it.
    #[arg(long, env = "CELLMIXER_SEED", global = true)]
    seed: Option<u64>,

    /// Cap on worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Use the full-scale training schedule (518 px crops, 20k iterations).
    #[arg(long, global = true)]
    full_scale: bool,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Render homogeneous phantom images of one class.
    Phantom {
        #[arg(long)]
        class: u8,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render true-mixture phantom scenes, e.g. `--mix 1:0.5,2:0.5`.
    PhantomMix {
        #[arg(long)]
        mix: String,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract foreground masks and write pseudo-label maps.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Tag a per-class fraction of records as `val`.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.10)]
        val_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write artificial mixtures of labelled homogeneous records.
    Mix {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Only mix records of this split.
        #[arg(long)]
        split: Option<SplitArg>,
    },
    /// Train a pixel classifier.
    Train {
        #[arg(long)]
        mode: TrainMode,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: SplitArg,
        /// Also write the per-iteration loss trace (JSON).
        #[arg(long)]
        loss_trace: Option<PathBuf>,
    },
    /// Predict a label map for one image.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        window: WindowArgs,
    },
    /// Evaluate one or more models on a labelled manifest.
    Eval {
        /// Repeat to evaluate several models; two models are also compared.
        #[arg(long, required = true)]
        model: Vec<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dataset name used in the report.
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        split: Option<SplitArg>,
        #[command(flatten)]
        window: WindowArgs,
        #[arg(long, value_parser = parse_convention)]
        convention: Option<AccuracyConvention>,
        #[arg(long, value_parser = parse_aggregation)]
        aggregation: Option<Aggregation>,
    },
    /// Render a label map over its image.
    Overlay {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline on phantoms (or the manifests named in the config).
    RunExperiment {
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the version and, optionally, the resolved config.
    Info {
        #[arg(long)]
        show_config: bool,
    },
    /// Check a config and print it fully resolved.
    ValidateConfig,
}

#[derive(Args)]
struct WindowArgs {
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

fn parse_convention(s: &str) -> std::result::Result<AccuracyConvention, String> {
    match s {
        "recall" => Ok(AccuracyConvention::Recall),
        "precision" => Ok(AccuracyConvention::Precision),
        _ => Err(format!("expected recall or precision, got {s:?}")),
    }
}

fn parse_aggregation(s: &str) -> std::result::Result<Aggregation, String> {
    match s {
        "pooled" => Ok(Aggregation::Pooled),
        "per-image" => Ok(Aggregation::PerImage),
        _ => Err(format!("expected pooled or per-image, got {s:?}")),
    }
}

fn load_config(g: &Global) -> Result<PipelineConfig> {
    let mut overrides = if g.full_scale {
        full_scale_overrides()
    } else {
        Vec::new()
    };
    overrides.extend(g.overrides.iter().cloned());
    if let Some(seed) = g.seed {
        overrides.push(format!("seed={seed}"));
    }
    Ok(PipelineConfig::load(g.config.as_deref(), &overrides)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(value: serde_json::Value, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(&value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Sidecar for a directory: lists every file in it except the sidecar.
fn dir_sidecar(dir: &Path, stamp: &Stamp) -> Result<()> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_file() {
            let name = path
                .file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            if name != SIDECAR_NAME {
                names.push(name);
            }
        }
    }
    Ok(write_sidecar(&dir.join(SIDECAR_NAME), stamp, names)?)
}

fn file_sidecar(file: &Path, stamp: &Stamp) -> Result<()> {
    let name = file
        .file_name()
        .unwrap_or_default()
        .to_string_lossy()
        .into_owned();
    Ok(write_sidecar(&sidecar_path(file), stamp, vec![name])?)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    let seeded = cfg.seeded();
    let stamp = cfg.stamp();

    match cli.command {
        Command::Phantom { class, count, out } => {
            let images = generate_population(class, count, &seeded.phantom)?;
            let manifest = save_phantoms(
                &images,
                &out,
                &format!("class{class}"),
                Some(class),
                Split::Train,
            )?;
            manifest.save(out.join("manifest.jsonl"))?;
            let skipped: usize = images.iter().map(|p| p.skipped_cells).sum();
            info!(
                "wrote {count} images to {} ({skipped} cells skipped)",
                out.display()
            );
            dir_sidecar(&out, &stamp)?;
        }
        Command::PhantomMix { mix, count, out } => {
            let mix = parse_class_mix(&mix)?;
            let images = generate_true_mixture(&mix, count, &seeded.phantom)?;
            let manifest = save_phantoms(&images, &out, "mixture", None, Split::Test)?;
            manifest.save(out.join("manifest.jsonl"))?;
            dir_sidecar(&out, &stamp)?;
        }
        Command::Extract {
            manifest,
            out,
            report,
        } => {
            let m = DatasetManifest::load(&manifest)?;
            let (summary, labelled) = extract_batch(&m, &cfg.extraction, &out)?;
            labelled.save(out.join("manifest.jsonl"))?;
            match report {
                Some(path) => {
                    write_json(serde_json::to_value(&summary)?, &path)?;
                    file_sidecar(&path, &stamp)?;
                }
                None => println!("{}", serde_json::to_string_pretty(&summary)?),
            }
            dir_sidecar(&out, &stamp)?;
        }
        Command::Split {
            manifest,
            val_fraction,
            out,
        } => {
            let m = DatasetManifest::load(&manifest)?;
            let split = split_manifest(&m, val_fraction, cfg.seeds().split)?;
            // Keep the record paths valid from the new location.
            let records = split
                .records
                .iter()
                .map(|r| cellmixer::manifest::ManifestRecord {
                    image: split.resolve(&r.image),
                    labels: r.labels.as_ref().map(|l| split.resolve(l)),
                    ..r.clone()
                })
                .collect();
            DatasetManifest::new(split.root.clone(), records).save(&out)?;
            file_sidecar(&out, &stamp)?;
        }
        Command::Mix {
            manifest,
            count,
            out,
            split,
        } => {
            let m = DatasetManifest::load(&manifest)?;
            let pool = SamplePool::from_manifest(&m, split.map(Split::from))?;
            synthesize_set(&pool, &seeded.mixer, count, &out)?;
            dir_sidecar(&out, &stamp)?;
        }
        Command::Train {
            mode,
            manifest,
            out,
            split,
            loss_trace,
        } => {
            let m = DatasetManifest::load(&manifest)?;
            let pool = SamplePool::from_manifest(&m, Some(split.into()))?;
            info!("training {mode} on {} records", pool.len());
            let result = train(&pool, &seeded.train, mode, &seeded.mixer)?;
            result.model.save(&out)?;
            file_sidecar(&out, &stamp)?;
            if let Some(path) = loss_trace {
                write_json(serde_json::to_value(&result.loss_trace)?, &path)?;
                file_sidecar(&path, &stamp)?;
            }
        }
        Command::Infer {
            model,
            image,
            out,
            window,
        } => {
            let model = PixelClassifier::load(&model)?;
            let img = load_image(&image)?;
            let labels = sliding_window_infer(
                &model,
                &img,
                window.window.unwrap_or(cfg.eval.window),
                window.stride.unwrap_or(cfg.eval.stride),
            )?;
            save_labels(&labels, &out)?;
            file_sidecar(&out, &stamp)?;
        }
        Command::Eval {
            model,
            manifest,
            out,
            name,
            split,
            window,
            convention,
            aggregation,
        } => {
            let mut settings = cfg.eval;
            settings.window = window.window.unwrap_or(settings.window);
            settings.stride = window.stride.unwrap_or(settings.stride);
            settings.convention = convention.unwrap_or(settings.convention);
            settings.aggregation = aggregation.unwrap_or(settings.aggregation);
            settings.validate()?;
            let m = DatasetManifest::load(&manifest)?;
            let samples = load_labelled(&m, split.map(Split::from))?;
            let dataset = name.unwrap_or_else(|| stem(&manifest));
            let reports = model
                .iter()
                .map(|path| {
                    let clf = PixelClassifier::load(path)?;
                    Ok(evaluate_model(
                        &clf,
                        &stem(path),
                        &dataset,
                        &samples,
                        &settings,
                    )?)
                })
                .collect::<Result<Vec<EvalReport>>>()?;
            let comparison: Option<Comparison> = match reports.as_slice() {
                [a, b] => Some(compare_report(
                    std::slice::from_ref(a),
                    std::slice::from_ref(b),
                )?),
                _ => None,
            };
            print!("{}", format_table(&reports));
            write_json(
                serde_json::json!({ "reports": reports, "comparison": comparison }),
                &out,
            )?;
            file_sidecar(&out, &stamp)?;
        }
        Command::Overlay { image, labels, out } => {
            render_overlay(&load_image(&image)?, &load_labels(&labels)?, &out)?;
            file_sidecar(&out, &stamp)?;
        }
        Command::RunExperiment { out } => {
            create_dir(&out)?;
            let report = run_experiment(&cfg, &out)?;
            print!("{}", report.to_text());
        }
        Command::Info { show_config } => {
            println!("{TOOL_VERSION}");
            println!("config hash {}", stamp.config_hash);
            println!("seed {}", cfg.seed);
            println!("threads {}", rayon::current_num_threads());
            if show_config {
                print!("\n{}", cfg.to_toml()?);
            }
        }
        Command::ValidateConfig => {
            print!("{}", cfg.to_toml()?);
            eprintln!("config ok ({})", stamp.config_hash);
        }
    }
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}

/// The error chain joined with `: `, skipping causes already quoted by
/// an outer message.
fn describe(err: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in err.chain() {
        let s = cause.to_string();
        if !msg.contains(&s) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&s);
        }
    }
    msg
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err
        .chain()
        .find_map(|e| e.downcast_ref::<cellmixer::Error>())
    {
        Some(e) => match e.kind() {
            ErrorKind::Usage => 1,
            ErrorKind::Data => 2,
            ErrorKind::Numerical => 3,
        },
        None if err.chain().any(|e| e.is::<std::io::Error>()) => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.global.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
