use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use adapt_core::bridge;
use adapt_core::compare::{compare, plot_csv, DEFAULT_ATOL};
use adapt_core::concept::PromptPlan;
use adapt_core::embedding::{
    gram_schmidt_combine, lsm_combine, lsm_orthogonalize, lsm_orthogonalize_rows,
    pem_combine_detailed, project_out, EmbeddingVector, LsmParams, PemParams,
};
use adapt_core::json::{to_canonical_pretty, to_canonical_string};
use adapt_core::llm::{map_concepts, ChatBackend, FixtureBackend, HttpBackend, DEFAULT_MODEL};
use adapt_core::mock::{run_session, whitespace_tokens, MockConfig, TokenDynamics};
use adapt_core::scheduler::{
    SchedulerKind, ScoreScope, SessionConfig, TransitionOrder,
};
use adapt_core::scoring::{
    aggregate_blocks, aggregate_heads, semantic_positions, token_scores, AttentionTensor,
    ScoreAggregation, AXIS_HEAD,
};
use adapt_core::tensor_file::{atomic_write, TensorFile};
use adapt_core::trace::Trace;
use adapt_core::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

/// Vectors up to this many elements are written inline in the manifest.
const INLINE_VECTOR_LIMIT: usize = 8192;

#[derive(Parser)]
#[command(name = "adapt", version, about = "Rare-concept prompt scheduling engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split a prompt into rare/frequent concept pairs via a language model.
    Plan(PlanArgs),
    /// Run a full sampling session against synthetic attention.
    Simulate(SimulateArgs),
    /// Vector operations on tensor files.
    #[command(subcommand)]
    Embed(EmbedCommand),
    /// Compare two traces step by step.
    Compare(CompareArgs),
    /// Token scores from captured attention maps.
    Score(ScoreArgs),
    /// Serve the line-delimited JSON protocol on stdin/stdout.
    Bridge(BridgeArgs),
}

#[derive(Args)]
struct PlanArgs {
    prompt: String,
    /// `fixture:DIR` or `http:URL`.
    #[arg(long)]
    backend: String,
    #[arg(long, default_value = DEFAULT_MODEL)]
    model: String,
    /// Store HTTP replies as fixtures in this directory.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 60)]
    timeout_secs: u64,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchedulerArg {
    Aps,
    R2f,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderArg {
    Index,
    Saturation,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    AllTokens,
    Untransitioned,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregationArg {
    Individual,
    Mean,
    Cumulative,
}

#[derive(Args)]
struct SimulateArgs {
    /// Concept map JSON as written by `plan`.
    #[arg(long)]
    concept_map: PathBuf,
    /// Per-token synthetic dynamics. Defaults to b=0.02, a=0.5, kappa=10 for
    /// every token of the target prompt.
    #[arg(long)]
    mock_config: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 0.025, allow_hyphen_values = true)]
    tau_s: f64,
    #[arg(long, default_value_t = 0.3, allow_hyphen_values = true)]
    lambda_pool: f64,
    #[arg(long, default_value_t = 0.15, allow_hyphen_values = true)]
    lambda_attr: f64,
    #[arg(long, default_value_t = 2.0, allow_hyphen_values = true)]
    s: f64,
    #[arg(long, default_value_t = 100.0, allow_hyphen_values = true)]
    p: f64,
    #[arg(long, default_value_t = 0.93, allow_hyphen_values = true)]
    epsilon: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, value_enum, default_value = "aps")]
    scheduler: SchedulerArg,
    /// Visual-detail level per pair (1..=5); a single value applies to all.
    #[arg(long, value_delimiter = ',')]
    r2f_levels: Vec<u8>,
    #[arg(long, value_enum, default_value = "index")]
    transition_order: OrderArg,
    #[arg(long, value_enum, default_value = "all-tokens")]
    score_scope: ScopeArg,
    #[arg(long, value_enum, default_value = "individual")]
    score_aggregation: AggregationArg,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PemArgs {
    #[arg(long, default_value_t = 0.3)]
    lambda_pool: f64,
    #[arg(long, default_value_t = 2.0)]
    s: f64,
    #[arg(long, default_value_t = 100.0)]
    p: f64,
    #[arg(long, default_value_t = 0.93)]
    epsilon: f64,
}

#[derive(Subcommand)]
enum EmbedCommand {
    /// Component of A orthogonal to B.
    Project {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Pooled-embedding manipulation; prints gamma and delta.
    Pem {
        #[arg(long)]
        c_f: PathBuf,
        #[arg(long)]
        c_r: PathBuf,
        #[command(flatten)]
        params: PemArgs,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Latent-space guidance on an attention-layer output.
    Lsm {
        #[arg(long)]
        l_base: PathBuf,
        #[arg(long)]
        l_attr: PathBuf,
        #[arg(long)]
        l_null: PathBuf,
        #[arg(long, default_value_t = 0.15)]
        lambda_attr: f64,
        /// Orthogonalize per row of this length instead of the whole vector.
        #[arg(long)]
        row_len: Option<usize>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Mix the progressive embedding with the orthogonal part of the target.
    GramSchmidt {
        #[arg(long)]
        c_tar: PathBuf,
        #[arg(long)]
        c_prog: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        lambda: f64,
        #[arg(long, short)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct CompareArgs {
    a: PathBuf,
    b: PathBuf,
    #[arg(long, default_value_t = DEFAULT_ATOL)]
    atol: f64,
    /// Write score curves of both traces as CSV.
    #[arg(long)]
    plot_csv: Option<PathBuf>,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    /// One attention tensor per block, axes [head,]height,width,sequence.
    #[arg(required = true)]
    blocks: Vec<PathBuf>,
    /// Sequence positions left out of scoring.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    exclude: Vec<usize>,
    /// Token labels, one per scored position.
    #[arg(long, value_delimiter = ',')]
    labels: Vec<String>,
    /// Also evaluate the transition test with this threshold.
    #[arg(long)]
    tau_s: Option<f64>,
    /// Rank used by the transition test.
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long, value_enum, default_value = "individual")]
    aggregation: AggregationArg,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BridgeArgs {
    /// Directory for result vectors too large to send inline.
    #[arg(long)]
    spill_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = json!({ "error": { "code": e.code(), "message": e.to_string() } });
            let _ = writeln!(io::stderr(), "{}", to_canonical_string(&body).unwrap_or_default());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Plan(args) => cmd_plan(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Embed(cmd) => cmd_embed(cmd),
        Command::Compare(args) => cmd_compare(args),
        Command::Score(args) => cmd_score(args),
        Command::Bridge(args) => cmd_bridge(args),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => atomic_write(path, text.as_bytes())?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn cmd_plan(args: PlanArgs) -> Result<()> {
    let backend: Box<dyn ChatBackend> = match args.backend.split_once(':') {
        Some(("fixture", dir)) => Box::new(FixtureBackend::new(dir, &args.model)),
        Some(("http", url)) => {
            let mut http = HttpBackend::new(url, &args.model);
            http.timeout = Duration::from_secs(args.timeout_secs);
            http.cache_dir = args.cache_dir.clone();
            Box::new(http)
        }
        _ => {
            return Err(Error::Config(format!(
                "backend {:?} must be fixture:DIR or http:URL",
                args.backend
            )))
        }
    };
    let plan = map_concepts(&args.prompt, backend.as_ref())?;
    let text = to_canonical_pretty(&plan).map_err(|e| Error::Config(e.to_string()))?;
    emit(args.out.as_deref(), &format!("{text}\n"))
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let plan: PromptPlan = read_json(&args.concept_map)?;
    let mut mock = match &args.mock_config {
        Some(path) => read_json::<MockConfig>(path)?,
        None => MockConfig {
            total_steps: args.steps,
            tokens: vec![TokenDynamics::new(0.02, 0.5, 10.0); whitespace_tokens(&plan.target()).len()],
            seed: args.seed,
            noise_scale: 0.0,
            dim: 64,
        },
    };
    mock.total_steps = args.steps;
    mock.seed = args.seed;

    let r2f_levels = match (args.scheduler, args.r2f_levels.as_slice()) {
        (SchedulerArg::R2f, [single]) => vec![*single; plan.m()],
        (SchedulerArg::R2f, []) => vec![1; plan.m()],
        (_, levels) => levels.to_vec(),
    };
    let session = SessionConfig {
        total_steps: args.steps,
        tau_s: args.tau_s,
        scheduler: match args.scheduler {
            SchedulerArg::Aps => SchedulerKind::Aps,
            SchedulerArg::R2f => SchedulerKind::R2f,
            SchedulerArg::None => SchedulerKind::None,
        },
        transition_order: match args.transition_order {
            OrderArg::Index => TransitionOrder::Index,
            OrderArg::Saturation => TransitionOrder::Saturation,
        },
        r2f_levels,
        score_scope: match args.score_scope {
            ScopeArg::AllTokens => ScoreScope::AllTokens,
            ScopeArg::Untransitioned => ScoreScope::Untransitioned,
        },
        score_aggregation: aggregation(args.score_aggregation),
    };
    session.validate()?;
    let pem = PemParams::new(args.lambda_pool, args.s, args.p, args.epsilon)?;
    let lsm = LsmParams::new(args.lambda_attr)?;
    let trace = run_session(&mock, &plan, &session, &pem, &lsm)?;
    emit(args.out.as_deref(), &trace.to_ndjson()?)
}

fn aggregation(arg: AggregationArg) -> ScoreAggregation {
    match arg {
        AggregationArg::Individual => ScoreAggregation::Individual,
        AggregationArg::Mean => ScoreAggregation::Mean,
        AggregationArg::Cumulative => ScoreAggregation::Cumulative,
    }
}

fn read_vector(path: &Path) -> Result<EmbeddingVector> {
    Ok(EmbeddingVector::new(TensorFile::read(path)?.data)?)
}

fn write_vector(path: &Path, v: EmbeddingVector) -> Result<()> {
    let inline = v.dim() <= INLINE_VECTOR_LIMIT;
    TensorFile::vector(v.into_values()).write(path, inline)?;
    Ok(())
}

fn cmd_embed(cmd: EmbedCommand) -> Result<()> {
    match cmd {
        EmbedCommand::Project { a, b, out } => {
            write_vector(&out, project_out(&read_vector(&a)?, &read_vector(&b)?)?)
        }
        EmbedCommand::Pem {
            c_f,
            c_r,
            params,
            out,
        } => {
            let params = PemParams::new(params.lambda_pool, params.s, params.p, params.epsilon)?;
            let res = pem_combine_detailed(&read_vector(&c_f)?, &read_vector(&c_r)?, &params)?;
            write_vector(&out, res.pooled)?;
            let summary = json!({ "gamma": res.gamma, "delta": res.delta });
            emit(None, &format!("{}\n", to_canonical_string(&summary).expect("serializes")))
        }
        EmbedCommand::Lsm {
            l_base,
            l_attr,
            l_null,
            lambda_attr,
            row_len,
            out,
        } => {
            let params = LsmParams::new(lambda_attr)?;
            let (attr, null) = (read_vector(&l_attr)?, read_vector(&l_null)?);
            let l_prime = match row_len {
                Some(r) => lsm_orthogonalize_rows(&attr, &null, r)?,
                None => lsm_orthogonalize(&attr, &null)?,
            };
            write_vector(&out, lsm_combine(&read_vector(&l_base)?, &l_prime, &params)?)
        }
        EmbedCommand::GramSchmidt {
            c_tar,
            c_prog,
            lambda,
            out,
        } => write_vector(
            &out,
            gram_schmidt_combine(&read_vector(&c_tar)?, &read_vector(&c_prog)?, lambda)?,
        ),
    }
}

fn read_trace(path: &Path) -> Result<Trace> {
    let text = std::fs::read_to_string(path)?;
    let trace = Trace::parse_ndjson(&text)?;
    trace.validate()?;
    Ok(trace)
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let (a, b) = (read_trace(&args.a)?, read_trace(&args.b)?);
    let report = compare(&a, &b, args.atol)?;
    if let Some(path) = &args.plot_csv {
        atomic_write(path, plot_csv(&a, &b).as_bytes())?;
    }
    let text = to_canonical_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
    emit(args.out.as_deref(), &format!("{text}\n"))
}

fn cmd_score(args: ScoreArgs) -> Result<()> {
    let blocks = args
        .blocks
        .iter()
        .map(|path| {
            let tensor = AttentionTensor::try_from(TensorFile::read(path)?)?;
            if tensor.axes().iter().any(|a| a == AXIS_HEAD) {
                Ok(aggregate_heads(&tensor)?)
            } else {
                Ok(tensor)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let merged = aggregate_blocks(&blocks)?;
    let seq_len = merged.dims()[merged.axis_index(adapt_core::scoring::AXIS_SEQUENCE)?];
    let positions = semantic_positions(seq_len, &args.exclude);
    let labels = if args.labels.is_empty() {
        positions.iter().map(|p| format!("#{p}")).collect()
    } else {
        args.labels.clone()
    };
    let scores = token_scores(&merged, &positions, &labels)?;
    let mut report = json!({
        "positions": positions,
        "labels": scores.token_labels(),
        "scores": scores.values(),
    });
    if let Some(tau) = args.tau_s {
        let agg = aggregation(args.aggregation);
        report["statistic"] = json!(agg.statistic(&scores, args.k)?);
        report["transition"] = json!(agg.should_transition(&scores, args.k, tau)?);
    }
    let text = to_canonical_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
    emit(args.out.as_deref(), &format!("{text}\n"))
}

fn cmd_bridge(args: BridgeArgs) -> Result<()> {
    let mut b = bridge::Bridge::new();
    if let Some(dir) = args.spill_dir {
        b = b.with_spill_dir(dir);
    }
    bridge::serve_with(b, io::stdin().lock(), io::stdout().lock())?;
    Ok(())
}
