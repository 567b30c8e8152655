use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use selfner::pipeline::{
    compare_reports, Pipeline, PoolSource, RunConfig, SweepAxis, ANNOTATED_FILE, INDEX_FILE, POOL_FILE,
};
use selfner::Error;

#[derive(Parser)]
#[command(name = "selfner", version, about = "Self-improving zero-shot NER with LLMs")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every subcommand. Flags override the config file.
#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set th_entity=3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory; relative output paths resolve against it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    labelset: Option<String>,
    /// `scripted` or `remote`.
    #[arg(long, global = true)]
    backend: Option<String>,
    #[arg(long, global = true)]
    model: Option<String>,
    /// Comma-separated test subsampling seeds.
    #[arg(long, global = true)]
    seeds: Option<String>,
    #[arg(long, global = true)]
    selection: Option<String>,
    #[arg(long, global = true)]
    retrieval: Option<String>,
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    iterations: Option<usize>,
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    /// Sample 5 answers at temperature 0.7 and vote at test time.
    #[arg(long, global = true)]
    infer_sc: bool,
    #[arg(long, global = true)]
    self_verify: bool,
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a dataset, optionally subsample it or turn gold into a pool.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        subsample: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        as_pool: bool,
    },
    /// Self-annotate an unlabeled corpus.
    Annotate {
        #[arg(long)]
        unlabeled: PathBuf,
        #[arg(long)]
        prior_pool: Option<PathBuf>,
        #[arg(long)]
        prior_index: Option<PathBuf>,
        #[arg(long, default_value = ANNOTATED_FILE)]
        output: PathBuf,
    },
    /// Select reliable annotations.
    Select {
        #[arg(long)]
        annotated: PathBuf,
        #[arg(long, default_value = POOL_FILE)]
        output: PathBuf,
    },
    /// Embed a pool.
    Index {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, default_value = INDEX_FILE)]
        output: PathBuf,
    },
    /// Predict the test subsamples with retrieved demonstrations.
    Infer {
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
    },
    /// Score predictions against gold.
    Eval {
        #[arg(long)]
        test: PathBuf,
        /// Directory holding the predictions files (default: the output directory).
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Run the iterative self-improving loop.
    Loop {
        #[arg(long)]
        unlabeled: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Run select, infer and eval for each value of one parameter.
    Sweep {
        /// `th_entity`, `th_sample`, `k` or `pool_size`.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        unlabeled: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Export vote histograms for true and false predictions.
    Density {
        #[arg(long)]
        annotated: PathBuf,
        #[arg(long, default_value_t = 5)]
        bins: usize,
    },
    /// Tabulate several reports, given as `name=path/to/report.json`.
    Report {
        #[arg(required = true)]
        reports: Vec<String>,
    },
}

fn build_config(c: &Common) -> selfner::Result<RunConfig> {
    let mut cfg = RunConfig::from_env();
    if let Some(path) = &c.config {
        cfg.apply_file(path)?;
    }
    let flags: [(&str, Option<String>); 10] = [
        ("out", c.out.as_ref().map(|p| p.display().to_string())),
        ("labelset", c.labelset.clone()),
        ("backend", c.backend.clone()),
        ("model", c.model.clone()),
        ("seeds", c.seeds.clone()),
        ("selection", c.selection.clone()),
        ("retrieval", c.retrieval.clone()),
        ("k", c.k.map(|v| v.to_string())),
        ("iterations", c.iterations.map(|v| v.to_string())),
        ("parallelism", c.parallelism.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    if c.infer_sc {
        cfg.infer_sc = true;
    }
    if c.self_verify {
        cfg.self_verify = true;
    }
    for o in &c.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    Ok(cfg)
}

fn under(out: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        out.join(p)
    }
}

fn run(cli: Cli) -> selfner::Result<()> {
    if let Command::Report { reports } = &cli.command {
        let named = reports
            .iter()
            .map(|r| {
                r.split_once('=')
                    .map(|(n, p)| (n.to_string(), PathBuf::from(p)))
                    .ok_or_else(|| Error::Config(format!("expected name=path, got {r:?}")))
            })
            .collect::<selfner::Result<Vec<_>>>()?;
        let table = compare_reports(&named)?;
        print!("{}", table.to_text());
        if let Some(out) = &cli.common.out {
            std::fs::create_dir_all(out).map_err(|e| Error::io("creating output directory", e))?;
            std::fs::write(out.join("comparison.csv"), table.to_csv())
                .map_err(|e| Error::io("writing comparison.csv", e))?;
        }
        return Ok(());
    }

    let cfg = build_config(&cli.common)?;
    let out = cfg.out.clone();
    let p = Pipeline::new(cfg)?;
    log::info!("config digest {}", p.digest());
    match cli.command {
        Command::Ingest {
            input,
            output,
            subsample,
            seed,
            as_pool,
        } => {
            let n = p.run_ingest(&input, &under(&out, &output), subsample, seed, as_pool)?;
            println!("wrote {n} samples");
        }
        Command::Annotate {
            unlabeled,
            prior_pool,
            prior_index,
            output,
        } => {
            let prior = prior_pool.as_deref().map(|pool| PoolSource {
                pool,
                index: prior_index.as_deref(),
            });
            let a = p.run_annotate(&unlabeled, prior, &under(&out, &output))?;
            println!("annotated {} samples ({} backend calls)", a.len(), p.backend_calls());
        }
        Command::Select { annotated, output } => {
            let s = p.run_select(&annotated, &under(&out, &output))?;
            let kept: usize = s.iter().map(|a| a.predictions.len()).sum();
            println!("selected {} samples with {kept} entities", s.len());
        }
        Command::Index { pool, output } => {
            let idx = p.run_index(&pool, &under(&out, &output))?;
            println!("indexed {} samples with {}", idx.entries.len(), idx.embedder);
        }
        Command::Infer { test, pool, index } => {
            let src = pool.as_deref().map(|pool| PoolSource {
                pool,
                index: index.as_deref(),
            });
            for f in p.run_infer(src, &test, &out)? {
                println!("wrote {}", f.display());
            }
        }
        Command::Eval { test, predictions } => {
            let r = p.run_eval(&test, predictions.as_deref().unwrap_or(&out), &out)?;
            println!("P {}  R {}  F1 {}", r.formatted.precision, r.formatted.recall, r.formatted.f1);
        }
        Command::Loop { unlabeled, test } => {
            let reports = p.run_loop(&unlabeled, &test, &out)?;
            for (t, r) in reports.iter().enumerate() {
                println!("iter_{t}  F1 {}", r.formatted.f1);
            }
        }
        Command::Sweep {
            axis,
            values,
            unlabeled,
            test,
        } => {
            let axis: SweepAxis = axis.parse()?;
            let table = p.run_sweep(axis, &values, &unlabeled, &test, &out)?;
            print!("{}", table.to_text());
        }
        Command::Density { annotated, bins } => {
            let d = p.run_density(&annotated, bins, &out)?;
            let fmt = |m: Option<f64>| m.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
            println!("mean votes: true {}  false {}", fmt(d.mean_true), fmt(d.mean_false));
        }
        Command::Report { .. } => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = if cli.common.verbose { "debug" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
