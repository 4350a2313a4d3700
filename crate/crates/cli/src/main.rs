use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use privalign_core::empa::{empa_assess, AssessConfig};
use privalign_core::experiment::{
    generate_synthetic, reference_seed, run_protocol, ProtocolConfig, SyntheticConfig,
};
use privalign_core::grouping::{group, SensitivityScorer};
use privalign_core::io::{
    aggregate_csv, assessment_csv, load_config, partitions_from_str, partitions_to_string,
    projection_csv, read_bundle, read_report, to_json_string, write_bundle_with, write_report,
    PayloadMode, SYNTHETIC_DEFAULT_NAME,
};
use privalign_core::model::{
    GroupingResult, LayeredFeatureBundle, Matrix, NoiseFamily, ReferenceMechanism, Strategy,
};
use privalign_core::noise::{perturb_sensitive, NoiseConfig};
use privalign_core::projection::pca_2d;
use privalign_core::{Error, Result};

const THREADS_ENV: &str = "BODHI_THREADS";

#[derive(Parser)]
#[command(
    name = "privalign",
    version,
    about = "Sensitive-feature grouping and budget-alignment auditing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic layered bundle.
    Synth(SynthArgs),
    /// Add calibrated noise to the sensitive vectors of a bundle.
    Perturb(PerturbArgs),
    /// Partition every layer into sensitive and non-sensitive groups.
    Group(GroupArgs),
    /// Score a perturbed bundle against a reference mechanism.
    Assess(AssessArgs),
    /// Run the multi-seed, multi-budget synthetic protocol.
    Experiment(ExperimentArgs),
    /// Render a saved report, or a 2-D projection of a bundle.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Bua,
    Tda,
    Random,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Bua => Strategy::Bua,
            StrategyArg::Tda => Strategy::Tda,
            StrategyArg::Random => Strategy::Random,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MechanismArg {
    Laplace,
    Gaussian,
}

impl From<MechanismArg> for NoiseFamily {
    fn from(m: MechanismArg) -> Self {
        match m {
            MechanismArg::Laplace => NoiseFamily::Laplace,
            MechanismArg::Gaussian => NoiseFamily::Gaussian,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum PayloadArg {
    Auto,
    Inline,
    Sibling,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProjectionArg {
    Pca,
}

#[derive(Args)]
struct ConfigArg {
    /// Config file path, or `synthetic_default` for the built-in config.
    #[arg(long, value_name = "PATH", default_value = SYNTHETIC_DEFAULT_NAME)]
    config: String,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Generation seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output bundle manifest path.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Payload placement; `auto` inlines payloads below 8 MiB.
    #[arg(long, value_enum, default_value = "auto")]
    payload: PayloadArg,
}

#[derive(Args)]
struct GroupingInput {
    /// Partition file from `group`; takes precedence over --strategy.
    #[arg(long, value_name = "PATH")]
    partitions: Option<PathBuf>,
    /// Grouping strategy used when no partition file is given.
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
}

#[derive(Args)]
struct PerturbArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Original bundle.
    #[arg(long, value_name = "PATH")]
    input: PathBuf,
    #[command(flatten)]
    grouping: GroupingInput,
    /// Privacy budget.
    #[arg(long)]
    epsilon: f64,
    /// Noise family; defaults to the config's mechanism.
    #[arg(long, value_enum)]
    mechanism: Option<MechanismArg>,
    /// Noise seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output bundle manifest path.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "auto")]
    payload: PayloadArg,
}

#[derive(Args)]
struct GroupArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Bundle to partition.
    #[arg(long, value_name = "PATH")]
    input: PathBuf,
    /// Grouping strategy.
    #[arg(long, value_enum, default_value = "bua")]
    strategy: StrategyArg,
    /// Seed for random partitions and synthetic scoring when the bundle
    /// does not record one.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output partition file; stdout when absent.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AssessArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Original bundle.
    #[arg(long, value_name = "PATH")]
    input: PathBuf,
    /// Perturbed bundle.
    #[arg(long, value_name = "PATH")]
    perturbed: PathBuf,
    #[command(flatten)]
    grouping: GroupingInput,
    /// Reference budget.
    #[arg(long)]
    epsilon: f64,
    /// Reference family; defaults to the config's reference.
    #[arg(long, value_enum)]
    mechanism: Option<MechanismArg>,
    /// Run seed; the reference draws use a seed derived from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Output file; stdout when absent.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Seeds, comma separated; overrides the config.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Budgets, comma separated; overrides the config.
    #[arg(long, value_delimiter = ',')]
    epsilon: Vec<f64>,
    /// Strategies, comma separated; overrides the config.
    #[arg(long, value_enum, value_delimiter = ',')]
    strategy: Vec<StrategyArg>,
    /// Observed noise family; overrides the config.
    #[arg(long, value_enum)]
    mechanism: Option<MechanismArg>,
    /// Metric names, comma separated, or `all`.
    #[arg(long, value_delimiter = ',')]
    metric: Vec<String>,
    /// Output directory for the report files.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// A report.json from `experiment`, or a bundle with --projection.
    #[arg(long, value_name = "PATH")]
    input: PathBuf,
    /// Emit 2-D projection coordinates of the bundle's vectors.
    #[arg(long, value_enum)]
    projection: Option<ProjectionArg>,
    #[command(flatten)]
    grouping: GroupingInput,
    #[command(flatten)]
    config: ConfigArg,
    /// Seed for grouping when projecting.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `csv` renders the aggregate table, `json` the full report.
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Output file; stdout when absent.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

fn payload_mode(p: PayloadArg) -> PayloadMode {
    match p {
        PayloadArg::Auto => PayloadMode::Auto,
        PayloadArg::Inline => PayloadMode::Inline,
        PayloadArg::Sibling => PayloadMode::Sibling,
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => Ok(fs::write(p, text)?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Stored scores when every layer has them, otherwise synthetic scores from
/// the planted flags.
fn scorer_for(bundle: &LayeredFeatureBundle, fallback_seed: u64) -> Result<SensitivityScorer> {
    if bundle.layers.iter().all(|l| l.scores.is_some()) {
        return Ok(SensitivityScorer::External);
    }
    if bundle.layers.iter().all(|l| l.sensitive_flags.is_some()) {
        let seed = match bundle.metadata.get("synthetic.seed") {
            Some(s) => s
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad synthetic.seed '{s}'")))?,
            None => fallback_seed,
        };
        return Ok(SensitivityScorer::GroundTruth { seed });
    }
    Err(Error::InvalidInput(
        "bundle has neither sensitivity scores nor sensitive flags; pass --partitions".into(),
    ))
}

/// Partition file, then explicit strategy, then planted flags, then BUA.
fn resolve_grouping(
    bundle: &LayeredFeatureBundle,
    input: &GroupingInput,
    cfg: &ProtocolConfig,
    seed: u64,
) -> Result<GroupingResult> {
    if let Some(p) = &input.partitions {
        return partitions_from_str(&fs::read_to_string(p)?, bundle);
    }
    let strategy = match input.strategy {
        Some(s) => s.into(),
        None if bundle.layers.iter().all(|l| l.sensitive_flags.is_some()) => Strategy::Flags,
        None => Strategy::Bua,
    };
    group(
        bundle,
        strategy,
        &scorer_for(bundle, seed)?,
        &cfg.grouping.to_config(),
        seed,
    )
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = load_config(&a.config.config)?;
    let (bundle, _) = generate_synthetic(&SyntheticConfig {
        seed: a.seed,
        ..cfg.synthetic
    })?;
    write_bundle_with(&bundle, &a.out, payload_mode(a.payload))
}

fn perturb(a: PerturbArgs) -> Result<()> {
    let cfg = load_config(&a.config.config)?;
    let bundle = read_bundle(&a.input)?;
    let grouping = resolve_grouping(&bundle, &a.grouping, &cfg, a.seed)?;
    let family = a.mechanism.map_or(cfg.noise.mechanism, Into::into);
    let mech = ReferenceMechanism::new(family, a.epsilon, cfg.noise.c)?;
    let noise = NoiseConfig {
        mechanism: mech,
        seed: a.seed,
        target: cfg.noise.target,
    };
    let (perturbed, _) = perturb_sensitive(&bundle, &grouping, &noise)?;
    write_bundle_with(&perturbed, &a.out, payload_mode(a.payload))
}

fn group_cmd(a: GroupArgs) -> Result<()> {
    let cfg = load_config(&a.config.config)?;
    let bundle = read_bundle(&a.input)?;
    let scorer = scorer_for(&bundle, a.seed)?;
    let g = group(
        &bundle,
        a.strategy.into(),
        &scorer,
        &cfg.grouping.to_config(),
        a.seed,
    )?;
    emit(a.out.as_deref(), &partitions_to_string(&g)?)
}

fn assess(a: AssessArgs) -> Result<()> {
    let cfg = load_config(&a.config.config)?;
    let original = read_bundle(&a.input)?;
    let perturbed = read_bundle(&a.perturbed)?;
    let grouping = resolve_grouping(&original, &a.grouping, &cfg, a.seed)?;
    let family = a.mechanism.map_or(cfg.reference_family(), Into::into);
    let mech = ReferenceMechanism::new(family, a.epsilon, cfg.noise.c)?;
    let assessment = empa_assess(
        &original,
        &perturbed,
        &grouping,
        &mech,
        &AssessConfig {
            em: cfg.em,
            reference_seed: reference_seed(a.seed),
            layers: None,
        },
    )?;
    let text = match a.format {
        Format::Csv => assessment_csv(&assessment),
        Format::Json => to_json_string(&assessment)? + "\n",
    };
    emit(a.out.as_deref(), &text)
}

fn experiment(a: ExperimentArgs) -> Result<()> {
    let mut cfg = load_config(&a.config.config)?;
    if !a.seed.is_empty() {
        cfg.protocol.seeds = a.seed;
    }
    if !a.epsilon.is_empty() {
        cfg.protocol.epsilons = a.epsilon;
    }
    if !a.strategy.is_empty() {
        cfg.protocol.strategies = a.strategy.into_iter().map(Into::into).collect();
    }
    if let Some(m) = a.mechanism {
        cfg.noise.mechanism = m.into();
    }
    if !a.metric.is_empty() {
        cfg.protocol.metrics = a.metric;
    }
    cfg.validate()?;
    let report = run_protocol(&cfg)?;
    fs::create_dir_all(&a.out)?;
    write_report(&report, &a.out)?;
    let failed = report.failures().count();
    if failed > 0 {
        eprintln!("warning: {failed} cell(s) failed; see failures.csv");
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    if a.projection.is_some() {
        let cfg = load_config(&a.config.config)?;
        let bundle = read_bundle(&a.input)?;
        let grouping = resolve_grouping(&bundle, &a.grouping, &cfg, a.seed)?;
        let mut rows = Vec::new();
        let mut parts = Vec::new();
        for (layer, part) in bundle.layers.iter().zip(&grouping.partitions) {
            rows.extend((0..layer.len()).map(|j| (layer.index, j, part.is_sensitive(j))));
            parts.push(layer.to_matrix());
        }
        let coords = pca_2d(&Matrix::vstack(&parts)?)?;
        return emit(a.out.as_deref(), &projection_csv(&rows, &coords));
    }
    let r = read_report(&a.input)?;
    let text = match a.format {
        Format::Csv => aggregate_csv(&r),
        Format::Json => to_json_string(&r)? + "\n",
    };
    emit(a.out.as_deref(), &text)
}

fn init_threads() -> std::result::Result<(), String> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| format!("{THREADS_ENV} must be a non-negative integer, got '{v}'"))?;
    // 0 leaves rayon's automatic sizing in place
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                // --help and --version
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("usage error"));
            return ExitCode::from(1);
        }
    };
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Perturb(a) => perturb(a),
        Command::Group(a) => group_cmd(a),
        Command::Assess(a) => assess(a),
        Command::Experiment(a) => experiment(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { 2 } else { 1 })
        }
    }
}
