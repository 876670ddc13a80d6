//! Command-line harness: workload generation, oracle verification, balance
//! benchmarking and plan inspection. Reports are JSON on stdout.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use attnkit::harness::{self, bounds_for};
use attnkit::layout::write_tensor;
use attnkit::runtime::RunOptions;
use attnkit::scalar::Scalar;
use attnkit::schedule::{build_plan, estimate_workspace, select_tile_size};
use attnkit::variant::{variant_from_json, VariantSpec};
use attnkit::workload::{generate_workload, LengthDistribution, WorkloadMode, WorkloadProfile};
use attnkit::{Error, HeadConfig, Result};

/// Environment variable overriding the worker count.
const WORKERS_ENV: &str = "ATTNKIT_WORKERS";

#[derive(Parser)]
#[command(
    name = "attnkit",
    about = "CPU attention engine harness: verify, bench, plan-dump, gen",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run plan+run and compare against the f64 oracle.
    Verify(VerifyArgs),
    /// Report schedule balance and wall time over repeats.
    Bench(BenchArgs),
    /// Emit the scheduler plan for a workload as JSON.
    PlanDump(PlanDumpArgs),
    /// Generate a workload and dump its tensors as FIKV files.
    Gen(GenArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Decode,
    PrefillCausal,
    IncrementalPrefill,
}

impl From<ModeArg> for WorkloadMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Decode => WorkloadMode::Decode,
            ModeArg::PrefillCausal => WorkloadMode::PrefillCausal,
            ModeArg::IncrementalPrefill => WorkloadMode::IncrementalPrefill,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DistArg {
    Constant,
    Uniform,
    Zipf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

/// Workload selection: either a profile JSON file or inline flags.
#[derive(Args)]
struct ProfileArgs {
    /// Path to a WorkloadProfile JSON file (overrides the inline flags).
    #[arg(long)]
    profile: Option<PathBuf>,

    #[arg(long, value_enum, default_value = "decode")]
    mode: ModeArg,
    #[arg(long, value_enum, default_value = "constant")]
    dist: DistArg,
    /// Constant distribution length.
    #[arg(long, default_value_t = 1024)]
    len: usize,
    /// Uniform distribution bounds.
    #[arg(long, default_value_t = 512)]
    lo: usize,
    #[arg(long, default_value_t = 1024)]
    hi: usize,
    /// Zipf target mean.
    #[arg(long, default_value_t = 1024)]
    mean: usize,
    /// Zipf exponent.
    #[arg(long, default_value_t = 1.1)]
    exponent: f64,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    qo_heads: usize,
    #[arg(long, default_value_t = 2)]
    kv_heads: usize,
    #[arg(long, default_value_t = 64)]
    head_dim: usize,
}

impl ProfileArgs {
    fn resolve(&self) -> Result<WorkloadProfile> {
        if let Some(path) = &self.profile {
            let text = fs::read_to_string(path)?;
            return serde_json::from_str(&text)
                .map_err(|e| Error::InvalidProfile(format!("{}: {e}", path.display())));
        }
        let distribution = match self.dist {
            DistArg::Constant => LengthDistribution::Constant { len: self.len },
            DistArg::Uniform => LengthDistribution::Uniform {
                lo: self.lo,
                hi: self.hi,
            },
            DistArg::Zipf => LengthDistribution::Zipf {
                mean: self.mean,
                exponent: self.exponent,
            },
        };
        let profile = WorkloadProfile {
            distribution,
            batch: self.batch,
            mode: self.mode.into(),
            seed: self.seed,
            num_qo_heads: self.qo_heads,
            num_kv_heads: self.kv_heads,
            head_dim: self.head_dim,
        };
        profile.validate()?;
        Ok(profile)
    }
}

#[derive(Args)]
struct EngineArgs {
    /// Variant selection as JSON, e.g. '{"variant":"softcap","cap":30.0}'.
    #[arg(long, default_value = r#"{"variant":"causal"}"#)]
    variant: String,
    #[arg(long, default_value_t = 16)]
    num_ctas: usize,
    /// Kv page size (block column width of the sparse structure).
    #[arg(long, default_value_t = 1)]
    page_size: usize,
    #[arg(long, value_enum, default_value = "f32")]
    precision: PrecisionArg,
    /// Worker threads (default: ATTNKIT_WORKERS env, else the global pool).
    #[arg(long)]
    workers: Option<usize>,
}

impl EngineArgs {
    fn variant(&self, cfg: &HeadConfig) -> Result<VariantSpec> {
        let json: serde_json::Value = serde_json::from_str(&self.variant)
            .map_err(|e| Error::InvalidVariant(format!("variant json: {e}")))?;
        variant_from_json(&json, cfg)
    }

    fn workers(&self) -> Option<usize> {
        self.workers
            .or_else(|| std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse().ok()))
    }
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    profile: ProfileArgs,
    #[command(flatten)]
    engine: EngineArgs,
    /// Negative control: corrupt the contraction stage (must fail).
    #[arg(long, hide = true)]
    corrupt_contraction: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    profile: ProfileArgs,
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
}

#[derive(Args)]
struct PlanDumpArgs {
    #[command(flatten)]
    profile: ProfileArgs,
    #[arg(long, default_value_t = 16)]
    num_ctas: usize,
    #[arg(long, default_value_t = 1)]
    page_size: usize,
    /// Query tile size; defaults to the heuristic choice.
    #[arg(long)]
    tile_size: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    profile: ProfileArgs,
    /// Output directory for workload.json and the FIKV tensor dumps.
    #[arg(long)]
    out: PathBuf,
}

fn print_json<S: Serialize>(value: &S) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("serializable")
    );
}

fn run_verify<T: Scalar>(args: &VerifyArgs) -> Result<bool> {
    let profile = args.profile.resolve()?;
    let cfg = profile.head_config()?;
    let variant = args.engine.variant(&cfg)?;
    let report = harness::verify::<T>(
        &profile,
        &variant,
        args.engine.num_ctas,
        args.engine.page_size,
        args.engine.workers(),
        RunOptions {
            corrupt_contraction: args.corrupt_contraction,
        },
    )?;
    print_json(&report);
    Ok(report.pass)
}

fn run_bench<T: Scalar>(args: &BenchArgs) -> Result<()> {
    let profile = args.profile.resolve()?;
    let cfg = profile.head_config()?;
    let variant = args.engine.variant(&cfg)?;
    let report = harness::bench::<T>(
        &profile,
        &variant,
        args.engine.num_ctas,
        args.engine.page_size,
        args.repeats,
        args.engine.workers(),
    )?;
    print_json(&report);
    Ok(())
}

#[derive(Serialize)]
struct PlanDump<'a> {
    plan: &'a attnkit::schedule::Plan,
    workspace: attnkit::schedule::WorkspaceLayout,
}

fn run_plan_dump(args: &PlanDumpArgs) -> Result<()> {
    let profile = args.profile.resolve()?;
    let gen = generate_workload::<f32>(&profile)?;
    let mut spec = gen.workload_spec(args.num_ctas, 1, args.page_size);
    spec.alpha = args.alpha;
    spec.beta = args.beta;
    spec.tile_size = match args.tile_size {
        Some(t) => t,
        None => select_tile_size(&spec)?,
    };
    let plan = build_plan(&spec)?;
    let workspace = estimate_workspace(&bounds_for(&spec), 4)?;
    print_json(&PlanDump {
        plan: &plan,
        workspace,
    });
    Ok(())
}

#[derive(Serialize)]
struct GenManifest<'a> {
    profile: &'a WorkloadProfile,
    qo_lens: &'a [usize],
    kv_lens: &'a [usize],
    files: [&'static str; 3],
}

fn run_gen(args: &GenArgs) -> Result<()> {
    let profile = args.profile.resolve()?;
    let gen = generate_workload::<f32>(&profile)?;
    fs::create_dir_all(&args.out)?;
    let cfg = gen.heads;
    let write =
        |name: &str, tensor: &attnkit::layout::RaggedTensor<f32>, heads: usize| -> Result<()> {
            let file = fs::File::create(args.out.join(name))?;
            write_tensor(
                std::io::BufWriter::new(file),
                [
                    tensor.total_rows() as u32,
                    heads as u32,
                    cfg.head_dim as u32,
                    1,
                ],
                tensor.data(),
            )
        };
    write("q.fikv", &gen.q, cfg.num_qo_heads)?;
    write("k.fikv", &gen.keys, cfg.num_kv_heads)?;
    write("v.fikv", &gen.values, cfg.num_kv_heads)?;
    let manifest = GenManifest {
        profile: &profile,
        qo_lens: &gen.qo_lens,
        kv_lens: &gen.kv_lens,
        files: ["q.fikv", "k.fikv", "v.fikv"],
    };
    fs::write(
        args.out.join("workload.json"),
        serde_json::to_string_pretty(&manifest).expect("serializable"),
    )?;
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Verify(args) => match args.engine.precision {
            PrecisionArg::F32 => run_verify::<f32>(&args),
            PrecisionArg::F64 => run_verify::<f64>(&args),
        },
        Command::Bench(args) => {
            match args.engine.precision {
                PrecisionArg::F32 => run_bench::<f32>(&args)?,
                PrecisionArg::F64 => run_bench::<f64>(&args)?,
            }
            Ok(true)
        }
        Command::PlanDump(args) => run_plan_dump(&args).map(|_| true),
        Command::Gen(args) => run_gen(&args).map(|_| true),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
