use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vtg_core::adapter::AdapterParams;
use vtg_core::bench::{bench_csv, bench_pipeline, linearity_check, score_points, BenchConfig};
use vtg_core::datastore::{read_manifest, synthesize_corpus, Corpus, SynthSpec};
use vtg_core::eval::{
    ablation_csv, evaluate, flatten, ground_truths, run_ablation, sweep_csv, sweep_window_length,
    AblationCheckpoints,
};
use vtg_core::kv::KeyValues;
use vtg_core::pipeline::{
    ground_corpus, prepare_videos, read_predictions, train_models, write_predictions,
    PipelineConfig, ScoreSource, WindowCount,
};
use vtg_core::scorer::{read_external_scores, ScorerParams};
use vtg_core::Error;

const THREADS_ENV: &str = "VTG_THREADS";
const ADAPTER_FILE: &str = "adapter.ckpt";
const SCORER_FILE: &str = "scorer.ckpt";
const SCORER_NOCON_FILE: &str = "scorer_nocon.ckpt";

#[derive(Parser)]
#[command(
    name = "vtg",
    version,
    about = "Window-based temporal grounding over precomputed embeddings"
)]
struct Cli {
    /// Worker threads (default: 1 for bench, all cores otherwise; env VTG_THREADS)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat `key = value` config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set top_k_windows=all` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus from a flat spec file
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check that a manifest and every feature file it references load cleanly
    Validate {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train the adapter and the proposal scorer
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory for checkpoints
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lambda_con: Option<f64>,
        /// Also train the scorer with lambda_con = 0 for `ablate`
        #[arg(long)]
        with_ablation: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Ground every query and write ranked predictions as JSONL
    Ground {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        /// Proposal scores from an external base model; replaces the internal scorer
        #[arg(long)]
        external_scores: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Recall@k at IoU thresholds for a predictions file, or a window-length sweep
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, required_unless_present = "sweep")]
        predictions: Option<PathBuf>,
        /// Comma-separated window lengths; trains once per length on --train-manifest
        #[arg(long, value_delimiter = ',', requires = "train_manifest")]
        sweep: Option<Vec<usize>>,
        #[arg(long)]
        train_manifest: Option<PathBuf>,
        /// Output path; `.csv` writes CSV, anything else JSON
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate the five ablation variants
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Time the grounding stages over a sweep of selected-window counts
    Bench {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoints: PathBuf,
        /// Comma-separated window counts (`all` allowed)
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,all")]
        k_sweep: Vec<WindowCount>,
        #[arg(long, default_value_t = 3)]
        warmups: usize,
        #[arg(long, default_value_t = 5)]
        repetitions: usize,
        /// Ground queries in parallel (throughput mode)
        #[arg(long)]
        parallel: bool,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_)
            | Error::InvalidSpec(_)
            | Error::InvalidWindowLength(_)
            | Error::MissingCheckpoint(_) => 2,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("no such file: {}", path.display())))
    }
}

fn parse_overrides(items: &[String]) -> CliResult<KeyValues> {
    let mut kv = KeyValues::new();
    for item in items {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{item}`")))?;
        kv.set(k.trim(), v.trim());
    }
    Ok(kv)
}

fn load_kv(file: Option<&Path>, overrides: &[String]) -> CliResult<KeyValues> {
    let mut kv = match file {
        Some(p) => {
            require_file(p)?;
            KeyValues::parse(&fs::read_to_string(p).map_err(Error::from)?)?
        }
        None => KeyValues::new(),
    };
    kv.merge(&parse_overrides(overrides)?);
    Ok(kv)
}

fn resolve_config(args: &ConfigArgs, lambda_con: Option<f64>) -> CliResult<PipelineConfig> {
    let mut kv = load_kv(args.config.as_deref(), &args.overrides)?;
    if let Some(l) = lambda_con {
        kv.set("lambda_con", l);
    }
    Ok(PipelineConfig::from_kv(&kv)?)
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".config");
    PathBuf::from(s)
}

fn write_sidecar(path: &Path, kv: &KeyValues) -> CliResult<()> {
    fs::write(sidecar_path(path), kv.to_string()).map_err(Error::from)?;
    Ok(())
}

fn write_with_sidecar(path: &Path, contents: &str, kv: &KeyValues) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::from)?;
    }
    fs::write(path, contents).map_err(Error::from)?;
    write_sidecar(path, kv)
}

fn load_corpus(manifest: &Path, cfg: &PipelineConfig) -> CliResult<Corpus> {
    require_file(manifest)?;
    Ok(read_manifest(manifest, cfg.normalize_features)?)
}

fn load_adapter(dir: &Path, cfg: &PipelineConfig) -> CliResult<Option<AdapterParams>> {
    if !cfg.use_adapter {
        return Ok(None);
    }
    let path = dir.join(ADAPTER_FILE);
    if !path.is_file() {
        return Err(Error::MissingCheckpoint(path.display().to_string()).into());
    }
    Ok(Some(AdapterParams::load(&path)?))
}

fn load_scorer(dir: &Path, name: &str) -> CliResult<ScorerParams> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(Error::MissingCheckpoint(path.display().to_string()).into());
    }
    Ok(ScorerParams::load(&path)?)
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "csv")
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth {
            spec,
            overrides,
            out,
        } => {
            let kv = load_kv(spec.as_deref(), &overrides)?;
            let spec = SynthSpec::from_kv(&kv)?;
            let corpus = synthesize_corpus(&spec)?;
            corpus.write(&out)?;
            write_sidecar(&out.join("manifest.jsonl"), &spec.to_kv())?;
            println!(
                "wrote {} videos, {} queries to {}",
                corpus.videos.len(),
                corpus.records.len(),
                out.display()
            );
        }
        Command::Validate { manifest } => {
            require_file(&manifest)?;
            let corpus = read_manifest(&manifest, false)?;
            let dim = corpus
                .instances
                .first()
                .map_or(0, |i| i.query.features.dim());
            println!(
                "ok: {} videos, {} queries, dim {}",
                corpus.videos.len(),
                corpus.instances.len(),
                dim
            );
        }
        Command::Train {
            manifest,
            out,
            lambda_con,
            with_ablation,
            cfg,
        } => {
            let cfg = resolve_config(&cfg, lambda_con)?;
            let corpus = load_corpus(&manifest, &cfg)?;
            fs::create_dir_all(&out).map_err(Error::from)?;
            let models = train_models(&corpus, &cfg)?;
            let kv = cfg.to_kv();
            let adapter_path = out.join(ADAPTER_FILE);
            models.adapter.save(&adapter_path)?;
            write_sidecar(&adapter_path, &kv)?;
            let scorer_path = out.join(SCORER_FILE);
            models.scorer.save(&scorer_path)?;
            write_sidecar(&scorer_path, &kv)?;
            println!(
                "scorer: {} accepted epochs, best epoch {}",
                models.scorer_history.train_loss.len() - 1,
                models.scorer_history.best_epoch
            );
            if with_ablation {
                let nocon = PipelineConfig {
                    lambda_con: 0.0,
                    ..cfg.clone()
                };
                let ablated = train_models(&corpus, &nocon)?;
                let path = out.join(SCORER_NOCON_FILE);
                ablated.scorer.save(&path)?;
                write_sidecar(&path, &nocon.to_kv())?;
            }
            println!("checkpoints in {}", out.display());
        }
        Command::Ground {
            manifest,
            checkpoints,
            external_scores,
            out,
            cfg,
        } => {
            let cfg = resolve_config(&cfg, None)?;
            let corpus = load_corpus(&manifest, &cfg)?;
            let adapter = match &checkpoints {
                Some(dir) => load_adapter(dir, &cfg)?,
                None => None,
            };
            let videos = prepare_videos(&corpus, adapter.as_ref())?;
            let groundings = match (&external_scores, &checkpoints) {
                (Some(path), _) => {
                    require_file(path)?;
                    let rows = read_external_scores(path)?;
                    ground_corpus(&corpus, &videos, ScoreSource::External(&rows), &cfg)?
                }
                (None, Some(dir)) => {
                    let scorer = load_scorer(dir, SCORER_FILE)?;
                    ground_corpus(&corpus, &videos, ScoreSource::Internal(&scorer), &cfg)?
                }
                (None, None) => {
                    return Err(usage("ground needs --checkpoints or --external-scores"))
                }
            };
            let preds = flatten(&groundings);
            write_predictions(&out, &preds)?;
            write_sidecar(&out, &cfg.to_kv())?;
            println!(
                "{} predictions for {} queries",
                preds.len(),
                groundings.len()
            );
        }
        Command::Eval {
            manifest,
            predictions,
            sweep,
            train_manifest,
            out,
            cfg,
        } => {
            let cfg = resolve_config(&cfg, None)?;
            let corpus = load_corpus(&manifest, &cfg)?;
            let kv = cfg.to_kv();
            if let Some(lengths) = sweep {
                let train_path =
                    train_manifest.ok_or_else(|| usage("--sweep needs --train-manifest"))?;
                let train = load_corpus(&train_path, &cfg)?;
                let rows = sweep_window_length(&train, &corpus, &lengths, &cfg)?;
                let text = if is_csv(&out) {
                    sweep_csv(&rows)
                } else {
                    serde_json::to_string_pretty(&rows).map_err(Error::from)?
                };
                write_with_sidecar(&out, &text, &kv)?;
                print!("{}", sweep_csv(&rows));
                return Ok(());
            }
            let path = predictions.ok_or_else(|| usage("eval needs --predictions or --sweep"))?;
            require_file(&path)?;
            let preds = read_predictions(&path)?;
            let mut report = evaluate(
                &preds,
                &ground_truths(&corpus),
                &cfg.eval_k,
                &cfg.eval_thresholds,
                cfg.iou_strict,
            )?;
            report.config = kv
                .keys()
                .map(|k| (k.to_string(), kv.get(k).unwrap_or_default().to_string()))
                .collect();
            let text = if is_csv(&out) {
                report.to_csv()
            } else {
                report.to_json()?
            };
            write_with_sidecar(&out, &text, &kv)?;
            for e in &report.recalls {
                println!("R{}@{} = {:.2}", e.k, e.theta, e.recall);
            }
        }
        Command::Ablate {
            manifest,
            checkpoints,
            out,
            cfg,
        } => {
            let cfg = resolve_config(&cfg, None)?;
            let corpus = load_corpus(&manifest, &cfg)?;
            let adapter_cfg = PipelineConfig {
                use_adapter: true,
                ..cfg.clone()
            };
            let ckpt = AblationCheckpoints {
                adapter: load_adapter(&checkpoints, &adapter_cfg)?,
                scorer: Some(load_scorer(&checkpoints, SCORER_FILE)?),
                scorer_nocon: Some(load_scorer(&checkpoints, SCORER_NOCON_FILE)?),
            };
            let rows = run_ablation(&corpus, &ckpt, &cfg)?;
            let text = if is_csv(&out) {
                ablation_csv(&rows)
            } else {
                serde_json::to_string_pretty(&rows).map_err(Error::from)?
            };
            write_with_sidecar(&out, &text, &cfg.to_kv())?;
            print!("{}", ablation_csv(&rows));
        }
        Command::Bench {
            manifest,
            checkpoints,
            k_sweep,
            warmups,
            repetitions,
            parallel,
            out,
            cfg,
        } => {
            let cfg = resolve_config(&cfg, None)?;
            let corpus = load_corpus(&manifest, &cfg)?;
            let adapter = load_adapter(&checkpoints, &cfg)?;
            let scorer = load_scorer(&checkpoints, SCORER_FILE)?;
            let videos = prepare_videos(&corpus, adapter.as_ref())?;
            let bench = BenchConfig {
                warmups,
                repetitions,
                parallel,
            };
            let (rows, _) = bench_pipeline(
                &corpus,
                &videos,
                ScoreSource::Internal(&scorer),
                &cfg,
                &k_sweep,
                &bench,
            )?;
            let mut kv = cfg.to_kv();
            kv.set("bench_warmups", warmups);
            kv.set("bench_repetitions", repetitions);
            kv.set("bench_parallel", parallel);
            let csv = bench_csv(&rows);
            write_with_sidecar(&out, &csv, &kv)?;
            print!("{csv}");
            match linearity_check(&score_points(&rows)) {
                Ok(l) => println!(
                    "score stage: slope {:.1} ns/window, R^2 {:.4}",
                    l.slope, l.r_squared
                ),
                Err(e) => println!("linearity: {e}"),
            }
        }
    }
    Ok(())
}

fn thread_count(flag: Option<usize>, bench: bool) -> CliResult<Option<usize>> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| {
            usage(format!(
                "{THREADS_ENV} must be a positive integer, got `{v}`"
            ))
        }),
        Err(_) => Ok(bench.then_some(1)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let bench = matches!(cli.command, Command::Bench { .. });
    let result = thread_count(cli.threads, bench).and_then(|threads| {
        if let Some(n) = threads {
            if n == 0 {
                return Err(usage("--threads must be >= 1"));
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Failure {
                    code: 1,
                    message: e.to_string(),
                })?;
        }
        run(cli)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
