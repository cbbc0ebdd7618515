mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use antlab_core::corpus::{Corpus, Prompt, Record, Split};
use antlab_core::denoiser::{attention_profile_csv, capture_attention_profile};
use antlab_core::diffusion::{SamplerMethod, SamplerPlan};
use antlab_core::eval::{bench_csv, bench_sampling, evaluate, metrics_csv, EvalConfig, Evaluator, FeatureScaler};
use antlab_core::guidance::{grid_search, CellMetrics, guided_sample_batch, GuidanceMode, GuidancePolicy, SampleOptions};
use antlab_core::params::{Checkpoint, Model, SigmaMode};
use antlab_core::spectral::{bins_csv, dependency_csv, run_suite};
use antlab_core::train::{log_csv, Trainer};
use antlab_core::{io::write_atomic, rng};
use clap::{Args, Parser, Subcommand};
use rand::Rng as _;

use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] antlab_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
}

#[derive(Parser, Debug)]
#[command(name = "antlab", version, about = "Text-to-motion diffusion toolkit on a synthetic corpus")]
struct Cli {
    /// TOML run config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Corpus directory.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// Checkpoint file.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Default)]
struct GuideArgs {
    #[arg(long)]
    omega_max: Option<f64>,
    #[arg(long)]
    omega_min: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Elapsed denoising fraction after which the conditional branch is skipped.
    #[arg(long)]
    skip_frac: Option<f64>,
    /// Constant guidance scale `omega_max`.
    #[arg(long)]
    static_cfg: bool,
    /// Skip the early steps `t > skip_frac·T` instead of the late ones.
    #[arg(long)]
    literal_skip: bool,
    /// Sampling steps.
    #[arg(long)]
    steps: Option<usize>,
    /// `ddim` or `dpm2m`.
    #[arg(long)]
    sampler: Option<SamplerMethod>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate the synthetic corpus and its split manifest.
    Corpus {
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train a model and write a checkpoint and loss log.
    Train {
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        dropout: Option<f64>,
        /// Train the static-condition baseline.
        #[arg(long)]
        no_sta: bool,
        /// `statistic` or `learned`.
        #[arg(long)]
        sta_sigma: Option<SigmaMode>,
        /// Stop at this step while keeping the schedule horizon at `--steps`.
        #[arg(long)]
        until: Option<u64>,
        /// Continue from the existing checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Sample motions with guidance.
    Sample {
        #[command(flatten)]
        guide: GuideArgs,
        /// Prompt text, repeatable; defaults to test-split prompts.
        #[arg(long)]
        prompt: Vec<String>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Run the spectral verification suite.
    Spectrum {
        #[arg(long)]
        draws: Option<usize>,
    },
    /// Cross-attention statistics per sampling step on the validation split.
    Attention {
        #[command(flatten)]
        guide: GuideArgs,
        #[arg(long)]
        prompts: Option<usize>,
    },
    /// Time batched sampling with and without dynamic guidance.
    Bench {
        #[command(flatten)]
        guide: GuideArgs,
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Grid search over (omega_min, omega_max) on the validation split.
    Grid {
        #[command(flatten)]
        guide: GuideArgs,
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Metrics of generated motions against a corpus split.
    Eval {
        #[command(flatten)]
        guide: GuideArgs,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        prompts: Option<usize>,
        /// `train`, `val` or `test`.
        #[arg(long)]
        split: Option<String>,
    },
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::Corpus { .. } => "corpus",
            Cmd::Train { .. } => "train",
            Cmd::Sample { .. } => "sample",
            Cmd::Spectrum { .. } => "spectrum",
            Cmd::Attention { .. } => "attention",
            Cmd::Bench { .. } => "bench",
            Cmd::Grid { .. } => "grid",
            Cmd::Eval { .. } => "eval",
        }
    }
}

fn apply_guide(cfg: &mut RunConfig, g: &GuideArgs) {
    let p = &mut cfg.guidance;
    if let Some(v) = g.omega_max {
        p.omega_max = v;
    }
    if let Some(v) = g.omega_min {
        p.omega_min = v;
    }
    if let Some(v) = g.lambda {
        p.lambda = v;
    }
    if let Some(v) = g.skip_frac {
        p.skip_fraction = v;
    }
    if g.static_cfg {
        p.mode = GuidanceMode::Static;
    }
    if g.literal_skip {
        p.literal_skip = true;
    }
    if let Some(v) = g.steps {
        cfg.sampler.steps = v;
    }
    if let Some(v) = g.sampler {
        cfg.sampler.method = v;
    }
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(CliError::Usage(format!("unknown split `{s}` (train|val|test)"))),
    }
}

/// Defaults, then the config file, then flags.
fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(p) = &cli.out {
        cfg.paths.out = p.clone();
    }
    if let Some(p) = &cli.corpus {
        cfg.paths.corpus = p.clone();
    }
    if let Some(p) = &cli.checkpoint {
        cfg.paths.checkpoint = p.clone();
    }
    match &cli.cmd {
        Cmd::Corpus { size } => {
            if let Some(s) = size {
                cfg.corpus.size = *s;
            }
        }
        Cmd::Train {
            steps,
            batch_size,
            lr,
            dropout,
            no_sta,
            sta_sigma,
            until,
            ..
        } => {
            if until.is_some() {
                cfg.train_until = *until;
            }
            if let Some(v) = steps {
                cfg.train.steps = *v;
            }
            if let Some(v) = batch_size {
                cfg.train.batch_size = *v;
            }
            if let Some(v) = lr {
                cfg.train.lr = *v;
            }
            if let Some(v) = dropout {
                cfg.train.cond_dropout = *v;
            }
            if *no_sta {
                cfg.model.sta = false;
            }
            if let Some(v) = sta_sigma {
                cfg.model.sta_sigma = *v;
            }
        }
        Cmd::Sample { guide, prompt, count } => {
            apply_guide(&mut cfg, guide);
            if !prompt.is_empty() {
                cfg.sample.prompts = prompt.clone();
            }
            if let Some(c) = count {
                cfg.sample.count = *c;
            }
        }
        Cmd::Spectrum { draws } => {
            if let Some(d) = draws {
                cfg.spectrum.draws = *d;
            }
        }
        Cmd::Attention { guide, prompts } => {
            apply_guide(&mut cfg, guide);
            if let Some(p) = prompts {
                cfg.eval.prompts = *p;
            }
        }
        Cmd::Bench { guide, reps } => {
            apply_guide(&mut cfg, guide);
            if let Some(r) = reps {
                cfg.bench.reps = *r;
            }
        }
        Cmd::Grid { guide, reps } => {
            apply_guide(&mut cfg, guide);
            if let Some(r) = reps {
                cfg.grid.reps = *r;
            }
        }
        Cmd::Eval {
            guide,
            reps,
            prompts,
            split,
        } => {
            apply_guide(&mut cfg, guide);
            if let Some(r) = reps {
                cfg.eval.reps = *r;
            }
            if let Some(p) = prompts {
                cfg.eval.prompts = *p;
            }
            if let Some(s) = split {
                cfg.eval.split = parse_split(s)?;
            }
        }
    }
    cfg.normalize();
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn load_model(cfg: &RunConfig) -> Result<Model, CliError> {
    let ck = Checkpoint::load(&cfg.paths.checkpoint)?;
    Ok(Model::from_checkpoint(&ck)?)
}

fn plan(cfg: &RunConfig, model: &Model) -> Result<SamplerPlan, CliError> {
    Ok(SamplerPlan::equispaced(model.config.timesteps, cfg.sampler.steps, cfg.sampler.method)?)
}

/// Whether every verification in the run passed.
type Verdict = bool;

fn cmd_corpus(cfg: &RunConfig) -> Result<Verdict, CliError> {
    let corpus = Corpus::generate(cfg.seed, cfg.corpus.size);
    corpus.write_dir(&cfg.paths.corpus)?;
    println!(
        "corpus: {} train / {} val / {} test records in {}",
        corpus.train.len(),
        corpus.val.len(),
        corpus.test.len(),
        cfg.paths.corpus.display()
    );
    Ok(true)
}

fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<Verdict, CliError> {
    let corpus = Corpus::read_dir(&cfg.paths.corpus)?;
    let log_path = cfg.paths.out.join("train_log.csv");
    let echo = serde_json::to_value(cfg).expect("config serializes");
    let mut trainer = if resume {
        let ck = Checkpoint::load(&cfg.paths.checkpoint)?;
        Trainer::resume(&ck, &cfg.model, cfg.train.clone())?
    } else {
        Trainer::new(cfg.model.clone(), cfg.train.clone())?
    };
    let start = trainer.step;
    trainer.run_until(cfg.train_until.unwrap_or(cfg.train.steps), &corpus.train, &corpus.val)?;
    let mut log = if resume && start > 0 {
        std::fs::read_to_string(&log_path).unwrap_or_else(|_| log_csv(&[]))
    } else {
        log_csv(&[])
    };
    log.push_str(log_csv(&trainer.log).split_once('\n').map(|(_, rows)| rows).unwrap_or(""));
    write(&log_path, &log)?;
    trainer.checkpoint(echo).save(&cfg.paths.checkpoint)?;
    let last = trainer.log.last();
    println!(
        "train: steps {start}..{} loss {} val {}",
        trainer.step,
        last.map(|r| r.loss.to_string()).unwrap_or_else(|| "-".into()),
        last.and_then(|r| r.val_loss).map(|v| v.to_string()).unwrap_or_else(|| "-".into())
    );
    Ok(true)
}

fn cmd_sample(cfg: &RunConfig) -> Result<Verdict, CliError> {
    let model = load_model(cfg)?;
    let prompts: Vec<Prompt> = if cfg.sample.prompts.is_empty() {
        let corpus = Corpus::read_dir(&cfg.paths.corpus)?;
        corpus.test.iter().take(cfg.sample.count).map(|r| r.prompt().clone()).collect()
    } else {
        cfg.sample.prompts.iter().map(|p| Prompt::parse(p)).collect::<Result<_, _>>()?
    };
    if prompts.is_empty() {
        return Err(CliError::Usage("no prompts to sample".into()));
    }
    let plan = plan(cfg, &model)?;
    let mut r = rng::stream(cfg.seed, "sample");
    let (n, d) = (model.config.frames, model.config.motion_dim);
    let starts: Vec<_> = prompts.iter().map(|_| rng::normal_tensor(&mut r, &[n, d])).collect();
    let refs: Vec<&Prompt> = prompts.iter().collect();
    let mut motions = String::new();
    let mut cost = String::from("index,prompt,cond_evals,uncond_evals,total_evals\n");
    let mut wall = std::time::Duration::ZERO;
    let mut index = 0;
    for (ps, xs) in refs.chunks(32).zip(starts.chunks(32)) {
        for tr in guided_sample_batch(xs, ps, &model, &plan, &cfg.guidance, SampleOptions::default())? {
            let p = refs[index];
            let line = serde_json::json!({ "index": index, "prompt": p.to_string(), "frames": tr.motion });
            motions.push_str(&line.to_string());
            motions.push('\n');
            cost.push_str(&format!("{index},{p},{},{},{}\n", tr.cost.cond, tr.cost.uncond, tr.cost.total()));
            wall += tr.cost.wall;
            index += 1;
        }
    }
    write(&cfg.paths.out.join("motions.jsonl"), &motions)?;
    write(&cfg.paths.out.join("cost.csv"), &cost)?;
    println!("sample: {index} motions, {:.3}s sampling", wall.as_secs_f64());
    Ok(true)
}

fn cmd_spectrum(cfg: &RunConfig) -> Result<Verdict, CliError> {
    let suite = run_suite(cfg.spectrum.draws, cfg.seed)?;
    let out = &cfg.paths.out;
    for (name, rep) in &suite.psd {
        write(&out.join(format!("psd_{name}.csv")), &bins_csv(&rep.rows))?;
    }
    write(&out.join("crossing.csv"), &bins_csv(&suite.crossing.rows))?;
    write(
        &out.join("dependency.csv"),
        &dependency_csv(&[("correlated", &suite.dependency), ("independent", &suite.independent)]),
    )?;
    let summary: String = suite.checks.iter().map(|c| c.line() + "\n").collect();
    write(&out.join("spectrum_summary.txt"), &summary)?;
    print!("{summary}");
    Ok(suite.checks.iter().all(|c| c.passed))
}

fn cmd_attention(cfg: &RunConfig) -> Result<Verdict, CliError> {
    let model = load_model(cfg)?;
    let corpus = Corpus::read_dir(&cfg.paths.corpus)?;
    let prompts: Vec<&Prompt> = corpus.val.iter().take(cfg.eval.prompts).map(Record::prompt).collect();
    if prompts.is_empty() {
        return Err(CliError::Usage("validation split is empty".into()));
    }
    let plan = plan(cfg, &model)?;
    let profile = capture_attention_profile(&prompts, &model, &plan, &cfg.guidance, cfg.seed)?;
    write(&cfg.paths.out.join("attention.csv"), &attention_profile_csv(&profile))?;
    let k = 3.min(profile.len());
    let mean = |s: &[antlab_core::denoiser::AttentionStep]| s.iter().map(|p| p.variance).sum::<f64>() / s.len() as f64;
    let (first, last) = (mean(&profile[..k]), mean(&profile[profile.len() - k..]));
    let passed = last < first;
    println!(
        "{} attention-trend: mean variance first {k} steps {first:.6}, last {k} steps {last:.6}",
        if passed { "PASS" } else { "FAIL" }
    );
    Ok(passed)
}

fn cmd_bench(cfg: &RunConfig) -> Result<Verdict, CliError> {
    let model = load_model(cfg)?;
    let corpus = Corpus::read_dir(&cfg.paths.corpus)?;
    let prompts: Vec<&Prompt> = corpus.train.iter().cycle().take(cfg.bench.batch).map(Record::prompt).collect();
    let plan = plan(cfg, &model)?;
    let baseline = GuidancePolicy {
        mode: GuidanceMode::Static,
        skip_fraction: 1.0,
        literal_skip: false,
        ..cfg.guidance.clone()
    };
    let rows = bench_sampling(
        &model,
        &prompts,
        &[("cfg", baseline), ("dcfg", cfg.guidance.clone())],
        &plan,
        cfg.bench.reps,
        cfg.bench.warmup,
        cfg.seed,
    )?;
    write(&cfg.paths.out.join("bench.csv"), &bench_csv(&rows))?;
    let ratio = rows[1].median.as_secs_f64() / rows[0].median.as_secs_f64();
    let passed = ratio <= 0.85;
    println!(
        "{} bench: dcfg/cfg wall-time ratio {ratio:.3}, evaluations {} vs {}",
        if passed { "PASS" } else { "FAIL" },
        rows[1].cond + rows[1].uncond,
        rows[0].cond + rows[0].uncond
    );
    Ok(passed)
}

fn cmd_grid(cfg: &RunConfig) -> Result<Verdict, CliError> {
    let model = load_model(cfg)?;
    let corpus = Corpus::read_dir(&cfg.paths.corpus)?;
    let scaler = FeatureScaler::from_records(&corpus.train)?;
    let mut ev = Evaluator::new(scaler, &corpus.val, model.config.frames)?;
    let plan = plan(cfg, &model)?;
    let result = grid_search(&cfg.guidance, &cfg.grid.omega_min, &cfg.grid.omega_max, cfg.grid.reps, |policy, rep| {
        let seed = rng::substream(cfg.seed, "grid", rep as u64).random::<u64>();
        let ec = EvalConfig {
            reps: 1,
            mm_prompts: 0,
            seed,
            ..cfg.eval.clone()
        };
        let m = evaluate(&model, &mut ev, &plan, policy, &ec)?;
        Ok(CellMetrics {
            top1: m.top1.mean,
            fid: m.fid.mean,
        })
    })?;
    write(&cfg.paths.out.join("grid.csv"), &result.cells_csv())?;
    write(&cfg.paths.out.join("grid_table.csv"), &result.table_csv())?;
    match result.best {
        Some(i) => {
            let c = &result.cells[i];
            println!("grid: best omega_min {} omega_max {}", c.omega_min, c.omega_max);
            Ok(true)
        }
        None => {
            println!("FAIL grid: no cell produced metrics");
            Ok(false)
        }
    }
}

fn cmd_eval(cfg: &RunConfig) -> Result<Verdict, CliError> {
    let model = load_model(cfg)?;
    let corpus = Corpus::read_dir(&cfg.paths.corpus)?;
    let scaler = FeatureScaler::from_records(&corpus.train)?;
    let mut ev = Evaluator::new(scaler, corpus.split(cfg.eval.split), model.config.frames)?;
    let plan = plan(cfg, &model)?;
    let report = evaluate(&model, &mut ev, &plan, &cfg.guidance, &cfg.eval)?;
    let name = if model.config.sta { "sta" } else { "no-sta" };
    let csv = metrics_csv(&[(name, &report)]);
    write(&cfg.paths.out.join("metrics.csv"), &csv)?;
    print!("{csv}");
    for f in &report.flags {
        println!("note: {f}");
    }
    Ok(true)
}

fn run(cli: &Cli) -> Result<Verdict, CliError> {
    let cfg = resolve(cli)?;
    std::fs::create_dir_all(&cfg.paths.out).map_err(|e| CliError::Io {
        path: cfg.paths.out.clone(),
        source: e,
    })?;
    write(&cfg.paths.out.join(format!("{}.config.toml", cli.cmd.name())), &cfg.to_toml())?;
    match &cli.cmd {
        Cmd::Corpus { .. } => cmd_corpus(&cfg),
        Cmd::Train { resume, .. } => cmd_train(&cfg, *resume),
        Cmd::Sample { .. } => cmd_sample(&cfg),
        Cmd::Spectrum { .. } => cmd_spectrum(&cfg),
        Cmd::Attention { .. } => cmd_attention(&cfg),
        Cmd::Bench { .. } => cmd_bench(&cfg),
        Cmd::Grid { .. } => cmd_grid(&cfg),
        Cmd::Eval { .. } => cmd_eval(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
