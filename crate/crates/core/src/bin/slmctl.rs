use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use slmkit::distill::Recipe;
use slmkit::quant::QuantScheme;
use slmkit::random::derive_seed;
use slmkit::slmctl::{
    bench, initial_student, run_pipeline, write_synth, BenchConfig, PipelineConfig, PipelineRun, Stage,
};
use slmkit::toylm::ToyModel;
use slmkit::{Error, Result};

#[derive(Parser)]
#[command(name = "slmctl", version, about = "Distill, prune, quantize and benchmark toy transformers")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// TOML pipeline configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for checkpoints and reports
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 1 is the bit-reproducible mode
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic train/val/teacher/calibration datasets
    Synth,
    /// Distill a student (trains the teacher first unless given)
    Distill {
        #[arg(long)]
        recipe: Option<Recipe>,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Structured pruning of MLP neurons or attention heads
    Prune {
        #[arg(long)]
        student: Option<PathBuf>,
        #[arg(long)]
        calib: Option<PathBuf>,
        /// Prune attention heads instead of MLP neurons
        #[arg(long)]
        heads: bool,
    },
    /// Post-training quantization
    Quantize {
        #[arg(long)]
        student: Option<PathBuf>,
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long)]
        scheme: Option<QuantScheme>,
    },
    /// Validation loss and AUC of a checkpoint
    Eval {
        #[arg(long)]
        student: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Prefill/decode latency over shared-prefix prompts
    Bench {
        #[arg(long)]
        student: Option<PathBuf>,
        #[arg(long)]
        context: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, conflicts_with = "cold")]
        hot: bool,
        #[arg(long)]
        cold: bool,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Run the configured stage list
    Pipeline,
}

fn missing(field: &str, flag: &str) -> Error {
    Error::Config(format!("missing field `{field}` (set it in the config or pass {flag})"))
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    if common.out.is_some() {
        cfg.paths.out = common.out.clone();
    }
    Ok(cfg)
}

fn finish(run: &PipelineRun) {
    print!("{}", run.summary());
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.common)?;
    match cli.cmd {
        Command::Synth => {
            let out = cfg.paths.out.clone().ok_or_else(|| missing("paths.out", "--out"))?;
            cfg.validate()?;
            for p in write_synth(&cfg, &out)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Distill { recipe, teacher } => {
            if let Some(r) = recipe {
                cfg.distill.recipe = r;
            }
            if teacher.is_some() {
                cfg.paths.teacher = teacher;
            }
            cfg.stages = vec![Stage::Distill];
            finish(&run_pipeline(&cfg)?);
        }
        Command::Prune { student, calib, heads } => {
            cfg.paths.student = student.or(cfg.paths.student);
            cfg.paths.calib_data = calib.or(cfg.paths.calib_data);
            if cfg.paths.student.is_none() {
                return Err(missing("paths.student", "--student"));
            }
            if cfg.paths.calib_data.is_none() {
                return Err(missing("paths.calib_data", "--calib"));
            }
            cfg.stages = vec![if heads { Stage::PruneHeads } else { Stage::PruneMlp }];
            adopt_checkpoint_shape(&mut cfg)?;
            finish(&run_pipeline(&cfg)?);
        }
        Command::Quantize { student, calib, scheme } => {
            cfg.paths.student = student.or(cfg.paths.student);
            cfg.paths.calib_data = calib.or(cfg.paths.calib_data);
            if let Some(s) = scheme {
                cfg.quantize.scheme = s;
            }
            if cfg.paths.student.is_none() {
                return Err(missing("paths.student", "--student"));
            }
            if cfg.quantize.scheme.needs_calibration() && cfg.paths.calib_data.is_none() {
                return Err(missing("paths.calib_data", "--calib"));
            }
            cfg.stages = vec![Stage::Quantize];
            adopt_checkpoint_shape(&mut cfg)?;
            finish(&run_pipeline(&cfg)?);
        }
        Command::Eval { student, data } => {
            cfg.paths.student = student.or(cfg.paths.student);
            cfg.paths.val_data = data.or(cfg.paths.val_data);
            if cfg.paths.student.is_none() {
                return Err(missing("paths.student", "--student"));
            }
            cfg.stages = vec![Stage::Eval];
            adopt_checkpoint_shape(&mut cfg)?;
            let run = run_pipeline(&cfg)?;
            for r in &run.records {
                println!("{}", serde_json::to_string(r).expect("records serialize"));
            }
            finish(&run);
        }
        Command::Bench {
            student,
            context,
            k,
            hot,
            cold,
            repeats,
        } => {
            cfg.paths.student = student.or(cfg.paths.student);
            let mut b: BenchConfig = cfg.bench.clone();
            if let Some(c) = context {
                b.context_len = c;
            }
            if let Some(k) = k {
                b.k_candidates = k;
            }
            if let Some(r) = repeats {
                b.repeats = r;
            }
            if hot || cold {
                b.hot = hot;
            }
            b.seed = derive_seed(cfg.seed, b.seed);
            let model = match &cfg.paths.student {
                Some(_) => initial_student(&cfg)?,
                None => {
                    let mut mc = cfg.student.clone();
                    mc.max_seq_len = mc.max_seq_len.max(b.context_len + b.decode_tokens);
                    ToyModel::new_random(mc, derive_seed(cfg.seed, 5))?
                }
            };
            let report = bench(&model, &b)?;
            let line = serde_json::to_string(&report).expect("bench report serializes");
            if let Some(out) = &cfg.paths.out {
                std::fs::create_dir_all(out)?;
                std::fs::write(out.join("bench.jsonl"), format!("{line}\n"))?;
            }
            println!("{line}");
            println!("{:>6} {:>5} {:>10}", "prompt", "hot", "ttft_ms");
            for e in &report.entries {
                println!("{:>6} {:>5} {:>10.3}", e.prompt, e.hot, e.ttft_ms);
            }
            println!(
                "p50 {:.3} ms, p99 {:.3} ms, tpot {:.3} ms, attention {:.3} / mlp {:.3} / other {:.3} ms",
                report.p50_ttft_ms,
                report.p99_ttft_ms,
                report.tpot_ms,
                report.split.attention_ms,
                report.split.mlp_ms,
                report.split.other_ms
            );
        }
        Command::Pipeline => finish(&run_pipeline(&cfg)?),
    }
    Ok(())
}

/// Stage validation checks against `[student]`; take the loaded
/// checkpoint's architecture instead.
fn adopt_checkpoint_shape(cfg: &mut PipelineConfig) -> Result<()> {
    let m = initial_student(cfg)?;
    cfg.student = m.config.clone();
    if let Some(inter) = m.layer_shapes().iter().map(|s| s.d_intermediate).min() {
        cfg.student.d_intermediate = inter;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("slmctl: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
