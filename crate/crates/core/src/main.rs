use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hybridkv::harness::report::{emit_report, ReportFormat};
use hybridkv::harness::{gen_trace, run_pipeline, AttentionMode, OutlierSpec, PipelineConfig, SyntheticSpec, Trace};
use hybridkv::identifier::{calibrate, CalibrationLayer, LayerLabel, SparsityProbe};
use hybridkv::kv_model::ModelConfig;
use hybridkv::memsim::{
    build_timeline, hybrid_footprint, memory_footprint, simulate, write_footprint_csv, FootprintMethod,
    FootprintParams, FootprintRow, LinkModel,
};
use hybridkv::{KvError, Result};

#[derive(Parser)]
#[command(name = "hybridkv", version, about = "Layer-adaptive KV-cache compression toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trace file.
    GenTrace(GenTraceArgs),
    /// Score every layer of a trace and print the layer profiles as JSON.
    Calibrate(CalibrateArgs),
    /// Run the full pipeline over a trace and write the report.
    Run(RunArgs),
    /// Print device memory footprints as CSV.
    Footprint(FootprintArgs),
    /// Simulate one decode step and write the event timeline as JSON.
    Timeline(TimelineArgs),
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    query_heads: usize,
    #[arg(long, default_value_t = 2)]
    kv_heads: usize,
    #[arg(long, default_value_t = 64)]
    head_dim: usize,
}

impl ModelArgs {
    fn model(&self) -> Result<ModelConfig> {
        ModelConfig::new(self.layers, self.query_heads, self.kv_heads, self.head_dim)
    }
}

#[derive(Args)]
struct GenTraceArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON synthetic spec; replaces all other generator flags.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 1024)]
    prefill_len: usize,
    #[arg(long, default_value_t = 4)]
    decode_steps: usize,
    /// Trailing prompt positions whose queries are stored for calibration.
    #[arg(long, default_value_t = 32)]
    query_rows: usize,
    /// Comma-separated layer modes: `dense` or `sparse:<num_dominant>:<mass>`.
    /// Default: first layer dense, the rest `sparse:4:0.99`.
    #[arg(long)]
    pattern: Option<String>,
    #[arg(long, default_value_t = 8)]
    outlier_channels: usize,
    #[arg(long, default_value_t = 0.95)]
    magnitude_ratio: f64,
    #[arg(long)]
    drift: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Store preset layer labels in the header, e.g. `QSSS`.
    #[arg(long)]
    labels: Option<String>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    tau: f64,
    #[arg(long, default_value_t = 32)]
    n_q: usize,
    /// Keys kept per query; default 5% of the prompt.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    /// `hybrid-1` or `hybrid-2`.
    #[arg(long, default_value = "hybrid-1")]
    preset: String,
    /// JSON pipeline config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    n_q: Option<usize>,
    #[arg(long)]
    bits: Option<u8>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    n_local: Option<usize>,
    #[arg(long)]
    n_topk: Option<usize>,
    #[arg(long)]
    critical_channels: Option<usize>,
    /// Comma-separated quantized layers, or `none`.
    #[arg(long)]
    q_layers: Option<String>,
    /// Link bandwidth in GB/s (4 and 32 are the presets).
    #[arg(long)]
    link_gbps: Option<f64>,
}

impl PipelineArgs {
    fn config(&self) -> Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)
                .map_err(|e| KvError::Config(format!("{}: {e}", p.display())))?,
            None => PipelineConfig::preset(&self.preset)?,
        };
        if let Some(v) = self.tau {
            c.tau = v;
        }
        if let Some(v) = self.n_q {
            c.n_q = v;
        }
        if let Some(v) = self.bits {
            c.bits = v;
        }
        if let Some(v) = self.group_size {
            c.group_size = v;
        }
        if let Some(v) = self.n_local {
            c.retrieval.n_local = v;
        }
        if let Some(v) = self.n_topk {
            c.retrieval.n_topk = v;
        }
        if let Some(v) = self.critical_channels {
            c.retrieval.critical_channels = v;
        }
        if let Some(q) = &self.q_layers {
            c.q_layers = Some(parse_layer_list(q)?);
        }
        if let Some(g) = self.link_gbps {
            c.link = link_from_gbps(g)?;
        }
        Ok(c)
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// `json`, `csv` or `json,csv`.
    #[arg(long, default_value = "json,csv")]
    format: String,
}

#[derive(Args)]
struct FootprintArgs {
    /// original, snapkv, quest, quant-layers, sparse-layers or hybrid.
    #[arg(long, default_value = "hybrid")]
    method: String,
    #[arg(long, default_value_t = 32)]
    layers: u64,
    #[arg(long, default_value_t = 131072)]
    seq_len: u64,
    #[arg(long, default_value_t = 8)]
    kv_heads: u64,
    #[arg(long, default_value_t = 128)]
    head_dim: u64,
    /// SnapKV kept fraction as `num/den`.
    #[arg(long)]
    budget: Option<String>,
    #[arg(long)]
    page_size: Option<u64>,
    #[arg(long)]
    quant_layers: Option<u64>,
    #[arg(long)]
    group_size: Option<u64>,
    #[arg(long)]
    bits: Option<u64>,
    #[arg(long)]
    critical_channels: Option<u64>,
    /// Layer labels for `hybrid`, e.g. `QSSS`; default Q then all S.
    #[arg(long)]
    labels: Option<String>,
    #[arg(long, default_value_t = 64)]
    n_local: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TimelineArgs {
    /// Layer labels, e.g. `QSSS`.
    #[arg(long, default_value = "QSSS")]
    labels: String,
    #[arg(long, default_value_t = 32)]
    query_heads: usize,
    #[arg(long, default_value_t = 8)]
    kv_heads: usize,
    #[arg(long, default_value_t = 128)]
    head_dim: usize,
    #[arg(long, default_value_t = 32768)]
    seq_len: usize,
    #[arg(long, default_value_t = 1)]
    steps: usize,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn link_from_gbps(g: f64) -> Result<LinkModel> {
    if !g.is_finite() {
        return Err(KvError::Config(format!("link bandwidth {g} GB/s")));
    }
    LinkModel::new(g * 1e9, LinkModel::pcie_4gbps().base_latency)
}

fn parse_layer_list(s: &str) -> Result<Vec<usize>> {
    if s.trim().is_empty() || s.trim() == "none" {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|x| x.trim().parse().map_err(|_| KvError::Config(format!("bad layer index `{x}`"))))
        .collect()
}

fn parse_labels(s: &str) -> Result<Vec<LayerLabel>> {
    s.chars()
        .map(|c| match c.to_ascii_uppercase() {
            'Q' => Ok(LayerLabel::QuantizationFriendly),
            'S' => Ok(LayerLabel::SparsityFriendly),
            _ => Err(KvError::Config(format!("label `{c}` is not Q or S"))),
        })
        .collect()
}

fn parse_pattern(s: &str, layers: usize) -> Result<Vec<AttentionMode>> {
    let modes: Vec<AttentionMode> = s
        .split(',')
        .map(|item| {
            let parts: Vec<&str> = item.trim().split(':').collect();
            match parts.as_slice() {
                ["dense"] => Ok(AttentionMode::Dense),
                ["sparse", k, m] => Ok(AttentionMode::Sparse {
                    num_dominant: k.parse().map_err(|_| KvError::Config(format!("bad num_dominant in `{item}`")))?,
                    mass: m.parse().map_err(|_| KvError::Config(format!("bad mass in `{item}`")))?,
                }),
                _ => Err(KvError::Config(format!("bad layer mode `{item}`"))),
            }
        })
        .collect::<Result<_>>()?;
    if modes.len() != layers {
        return Err(KvError::Config(format!("{} layer modes for {layers} layers", modes.len())));
    }
    Ok(modes)
}

fn write_or_print(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn gen_trace_cmd(a: &GenTraceArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)
            .map_err(|e| KvError::Config(format!("{}: {e}", p.display())))?,
        None => {
            let model = a.model.model()?;
            let mut spec = SyntheticSpec::dense_then_sparse(model, a.prefill_len, a.decode_steps, a.seed);
            spec.prefill_query_rows = a.query_rows;
            spec.outliers = OutlierSpec {
                num_channels: a.outlier_channels,
                magnitude_ratio: a.magnitude_ratio,
                drift: a.drift,
            };
            if let Some(p) = &a.pattern {
                spec.layers = parse_pattern(p, model.num_layers)?;
            }
            spec
        }
    };
    let mut trace = gen_trace(&spec)?;
    if let Some(l) = &a.labels {
        let labels = parse_labels(l)?;
        if labels.len() != spec.model.num_layers {
            return Err(KvError::Config(format!("{} labels for {} layers", labels.len(), spec.model.num_layers)));
        }
        trace.header.labels = Some(labels);
    }
    trace.save(&a.out)?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

fn calibrate_cmd(a: &CalibrateArgs) -> Result<()> {
    let trace = Trace::load(&a.trace)?;
    let layers: Vec<CalibrationLayer<'_>> = trace
        .layers
        .iter()
        .map(|l| CalibrationLayer { cache: &l.prefill, queries: &l.prefill_queries })
        .collect();
    let probe = SparsityProbe { k: a.k, n_q: a.n_q, tau: a.tau };
    let profiles = calibrate(trace.model(), &layers, &probe)?;
    write_or_print(&a.out, &serde_json::to_string_pretty(&profiles)?)
}

fn run_cmd(a: &RunArgs) -> Result<()> {
    let cfg = a.pipeline.config()?;
    let formats = a
        .format
        .split(',')
        .map(|f| match f.trim() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(KvError::Config(format!("unknown format `{other}`"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let trace = Trace::load(&a.trace)?;
    let report = run_pipeline(&trace, &cfg)?;
    for p in emit_report(&report, &formats, &a.out_dir)? {
        eprintln!("wrote {}", p.display());
    }
    let labels: String = report.labels().iter().map(LayerLabel::short).collect();
    let f = &report.fidelity;
    println!("labels {labels}");
    println!("min cosine {:.6}", f.min_cosine);
    if let Some(r) = f.mean_recall {
        println!("mean recall {r:.4}");
    }
    println!("step latency {:.3} ms", report.timeline.simulation.total * 1e3);
    Ok(())
}

fn footprint_cmd(a: &FootprintArgs) -> Result<()> {
    let budget = a
        .budget
        .as_deref()
        .map(|b| {
            let (n, d) = b.split_once('/').ok_or_else(|| KvError::Config(format!("budget `{b}` is not num/den")))?;
            let p = |x: &str| x.trim().parse::<u64>().map_err(|_| KvError::Config(format!("budget `{b}`")));
            Ok::<_, KvError>((p(n)?, p(d)?))
        })
        .transpose()?;
    let params = FootprintParams {
        num_layers: a.layers,
        seq_len: a.seq_len,
        num_kv_heads: a.kv_heads,
        head_dim: a.head_dim,
        element_bytes: 2,
        budget,
        page_size: a.page_size,
        quant_layers: a.quant_layers,
        group_size: a.group_size,
        bits: a.bits,
        critical_channels: a.critical_channels,
    };
    let method = match a.method.as_str() {
        "original" => Some(FootprintMethod::Original),
        "snapkv" => Some(FootprintMethod::SnapKv),
        "quest" => Some(FootprintMethod::Quest),
        "quant-layers" => Some(FootprintMethod::QuantLayers),
        "sparse-layers" => Some(FootprintMethod::SparseLayers),
        "hybrid" => None,
        m => return Err(KvError::Config(format!("unknown method `{m}`"))),
    };
    let rows = match method {
        Some(m) => vec![FootprintRow { method: m.name().into(), layer: None, bytes: memory_footprint(m, &params)? }],
        None => {
            let labels = match &a.labels {
                Some(l) => parse_labels(l)?,
                None => (0..a.layers)
                    .map(|i| if i == 0 { LayerLabel::QuantizationFriendly } else { LayerLabel::SparsityFriendly })
                    .collect(),
            };
            let p = FootprintParams {
                group_size: params.group_size.or(Some(64)),
                bits: params.bits.or(Some(1)),
                critical_channels: params.critical_channels.or(Some(8)),
                ..params
            };
            hybrid_footprint(&labels, &p, a.n_local)?
        }
    };
    let mut buf = Vec::new();
    write_footprint_csv(&rows, &mut buf)?;
    let text = String::from_utf8(buf).expect("csv is utf-8");
    write_or_print(&a.out, text.trim_end())
}

fn timeline_cmd(a: &TimelineArgs) -> Result<()> {
    let labels = parse_labels(&a.labels)?;
    let model = ModelConfig::new(labels.len().max(1), a.query_heads, a.kv_heads, a.head_dim)?;
    if labels.is_empty() {
        return Err(KvError::Config("no layer labels".into()));
    }
    let cfg = a.pipeline.config()?;
    cfg.validate(&model)?;
    let costs = labels
        .iter()
        .map(|&l| cfg.cost.layer_costs(&model, l, a.seq_len, &cfg))
        .collect::<Result<Vec<_>>>()?;
    let (timeline, report) = simulate(&build_timeline(&costs, &cfg.link, a.steps)?)?;
    if let Some(p) = &a.out {
        std::fs::write(p, serde_json::to_string_pretty(&timeline)?)?;
        eprintln!("wrote {}", p.display());
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenTrace(a) => gen_trace_cmd(a),
        Command::Calibrate(a) => calibrate_cmd(a),
        Command::Run(a) => run_cmd(a),
        Command::Footprint(a) => footprint_cmd(a),
        Command::Timeline(a) => timeline_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
