use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use swarmpipe::bench::{self, Experiment, ExperimentSpec, OffloadCase};
use swarmpipe::client::{ClientConfig, InferenceSession, Strategy};
use swarmpipe::model::{reference_generate, DecodeMode, Model, ModelConfig};
use swarmpipe::netsim::{NetProfile, SimNetwork};
use swarmpipe::server::{serve_tcp, BlockServer, ServerConfig};
use swarmpipe::swarm::{replicated_spans, SimSwarm};
use swarmpipe::transport::{TcpTransport, Transport};

#[derive(Parser)]
#[command(name = "swarmpipe", version, about = "Fault-tolerant pipeline-parallel inference over unreliable servers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate tokens through a simulated swarm, or through TCP servers.
    Generate(GenerateArgs),
    /// Run one of the benchmark experiments and write its outputs.
    Bench(BenchArgs),
    /// Serve blocks over TCP using a server config file.
    Serve(ServeArgs),
}

#[derive(Parser)]
struct GenerateArgs {
    /// Comma-separated prefix token ids.
    #[arg(long, value_delimiter = ',', required = true)]
    prefix: Vec<u32>,
    #[arg(long)]
    steps: usize,
    #[arg(long, default_value = "dual-cache")]
    strategy: Strategy,
    /// Seeds the simulated network.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seeds the model weights; clients and servers must agree.
    #[arg(long, default_value_t = 0)]
    model_seed: u64,
    /// Per-message loss probability on the simulated network.
    #[arg(long, default_value_t = 0.0)]
    p: f64,
    #[arg(long, default_value_t = 4)]
    stages: usize,
    #[arg(long, default_value_t = 2)]
    replicas: usize,
    /// Beam width; greedy decoding when absent.
    #[arg(long)]
    beam: Option<usize>,
    /// 8-bit blockwise activations on the wire.
    #[arg(long)]
    quantize: bool,
    /// Also run the single-process reference and compare.
    #[arg(long)]
    verify: bool,
    /// Comma-separated server addresses; uses TCP instead of the simulator.
    #[arg(long, value_delimiter = ',')]
    servers: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchKind {
    FailureRate,
    LoadBalance,
    Offload,
}

#[derive(Parser)]
struct BenchArgs {
    kind: BenchKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Load-balance study at 206 servers and 70 blocks.
    #[arg(long)]
    full_scale: bool,
    /// JSON experiment spec; command-line flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    parallel_trials: bool,
    /// Offload case as BYTES:BITS_PER_S; repeatable.
    #[arg(long = "case")]
    cases: Vec<String>,
}

#[derive(Parser)]
struct ServeArgs {
    /// JSON server config.
    #[arg(long)]
    config: PathBuf,
    /// Listen address; defaults to the config's `address`.
    #[arg(long)]
    listen: Option<String>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Generate(a) => generate(a),
        Command::Bench(a) => run_bench(a),
        Command::Serve(a) => serve(a),
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let config = ModelConfig {
        seed: a.model_seed,
        max_seq_len: ModelConfig::default().max_seq_len.max(a.prefix.len() + a.steps),
        ..Default::default()
    };
    let model = Model::new(config).context("building the model")?;
    let mode = match a.beam {
        Some(width) => DecodeMode::Beam { width },
        None => DecodeMode::Greedy,
    };
    let mut session = InferenceSession::new(model.config.clone(), model.client.clone(), a.strategy, ClientConfig::default());
    let (tokens, elapsed) = if a.servers.is_empty() {
        let net = SimNetwork::new(
            NetProfile {
                failure_prob: a.p,
                ..Default::default()
            },
            a.seed,
        )?;
        let base = ServerConfig {
            model: model.config.clone(),
            quantize: a.quantize,
            ..Default::default()
        };
        let spans = replicated_spans(model.config.n_blocks, a.stages, a.replicas);
        let mut swarm = SimSwarm::uniform(net, model.blocks.clone(), &spans, &base)?.with_quantization(a.quantize);
        let tokens = session.generate(&mut swarm, &a.prefix, a.steps, mode)?;
        (tokens, swarm.now())
    } else {
        let mut t = TcpTransport::new(a.servers.clone(), Duration::from_secs(10), a.quantize);
        let tokens = session.generate(&mut t, &a.prefix, a.steps, mode)?;
        (tokens, t.now())
    };
    let c = session.counters();
    let mut out = json!({
        "tokens": tokens,
        "strategy": a.strategy.name(),
        "elapsed_s": elapsed,
        "steps_per_s": a.steps as f64 / elapsed,
        "bytes_total": c.bytes_total(),
        "recoveries": c.recoveries,
        "restarts": c.restarts,
        "failed_calls": c.failed_calls,
    });
    if a.verify {
        let want = reference_generate(&model, &a.prefix, a.steps, mode)?;
        out["matches_reference"] = json!(want == tokens);
        if want != tokens {
            println!("{}", serde_json::to_string(&out)?);
            bail!("distributed output differs from the reference");
        }
    }
    println!("{}", serde_json::to_string(&out)?);
    Ok(())
}

fn parse_case(s: &str) -> Result<OffloadCase> {
    let (b, l) = s.split_once(':').context("offload case must look like BYTES:BITS_PER_S")?;
    Ok(OffloadCase {
        params_bytes: b.trim().parse().context("parameter bytes")?,
        link_bits_per_s: l.trim().parse().context("link bits per second")?,
    })
}

fn run_bench(a: BenchArgs) -> Result<()> {
    let mut spec: ExperimentSpec = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => ExperimentSpec::default(),
    };
    spec.experiment = match a.kind {
        BenchKind::FailureRate => Experiment::FailureRate,
        BenchKind::LoadBalance => Experiment::LoadBalance,
        BenchKind::Offload => Experiment::OffloadEstimate,
    };
    spec.seed = a.seed;
    spec.out = a.out;
    spec.full_scale |= a.full_scale;
    spec.parallel_trials |= a.parallel_trials;
    if !a.cases.is_empty() {
        spec.offload.cases = a.cases.iter().map(|c| parse_case(c)).collect::<Result<_>>()?;
    }
    let out = bench::run_experiment(&spec)?;
    for r in &out.records {
        println!(
            "{:<20} p={:<8} len={:<5} {:>14.4} completed={}",
            r.strategy, r.p, r.length, r.steps_per_s, r.completed
        );
    }
    for f in &out.files {
        eprintln!("wrote {}", f.display());
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let mut config: ServerConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", a.config.display()))?;
    if let Some(addr) = a.listen {
        config.address = addr;
    }
    if config.address.is_empty() {
        bail!("no listen address: set `address` in the config or pass --listen");
    }
    let model = Model::new(config.model.clone())?;
    let listener = TcpListener::bind(&config.address).with_context(|| format!("binding {}", config.address))?;
    let server = BlockServer::new(config, model.blocks.clone())?;
    eprintln!("serving blocks {} on {}", server.blocks(), listener.local_addr()?);
    serve_tcp(Arc::new(Mutex::new(server)), listener)?.join();
    Ok(())
}
