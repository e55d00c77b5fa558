//! The `esm` command line.
//!
//! Exit codes: 0 success, 1 invalid invocation or failed check, 2 I/O failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command as Process;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use crate::decomp::{self, SpectrumKind};
use crate::linalg;
use crate::merge::{self, AlphaPolicy, Decomposition, MergeConfig, MergeError, RankRule, ScalingOrder, ScalingToggles};
use crate::scaling::{self, LayerRules, NormOrder, Variant};
use crate::tensorstore::{self, TensorMap, TensorStoreError};
use crate::verify::{self, Suite};

#[derive(Debug, Parser)]
#[command(name = "esm", version, about = "Merge fine-tuned checkpoints in their essential subspaces")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Merge expert checkpoints into one.
    Merge(MergeArgs),
    /// Run the numerical oracles.
    Verify(VerifyArgs),
    /// Emit per-layer energy-retention curves as CSV.
    Energy(EnergyArgs),
    /// List tensors with shapes, layer types and norms.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(long, value_name = "PATH")]
    pub base: PathBuf,
    /// Expert checkpoint; repeat once per task.
    #[arg(long = "expert", value_name = "PATH", required = true)]
    pub experts: Vec<PathBuf>,
    /// Proxy input container, paired with `--expert` by position.
    #[arg(long = "proxy", value_name = "PATH")]
    pub proxies: Vec<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    #[arg(long, conflicts_with = "alpha_search")]
    pub alpha: Option<f64>,
    #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
    pub alpha_search: Option<Vec<f64>>,
    /// Scoring command; receives the candidate checkpoint path as its last argument
    /// and must print one number (higher is better).
    #[arg(long, value_name = "STRING")]
    pub scorer_cmd: Option<String>,
    /// `auto` (⌊ratio · d_out / T⌋) or a fixed per-task rank.
    #[arg(long, default_value = "auto")]
    pub rank: String,
    #[arg(long, default_value_t = 1.0)]
    pub rank_ratio: f64,
    /// Comma-separated subset of `task,dim,layer`, or `none`.
    #[arg(long, default_value = "task,dim,layer")]
    pub scaling: String,
    /// full | reverse | noise- | signal+ | none
    #[arg(long, default_value = "full", value_parser = parse_variant)]
    pub variant: Variant,
    #[arg(long, default_value_t = scaling::DEFAULT_EXPONENT)]
    pub exponent: f64,
    /// task-dim | dim-task
    #[arg(long, default_value = "task-dim", value_parser = parse_order)]
    pub order: ScalingOrder,
    /// esd | svd
    #[arg(long, default_value = "esd", value_parser = ["esd", "svd"])]
    pub decomp: String,
    /// Use mean-centered PCA for ESD.
    #[arg(long)]
    pub centered: bool,
    #[arg(long, value_name = "PATH")]
    pub rules: Option<PathBuf>,
    #[arg(long, env = "ESM_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// all | svd | esd | procrustes | compare
    #[arg(long, default_value = "all")]
    pub suite: String,
    #[arg(long, default_value_t = 4)]
    pub dim_min: usize,
    #[arg(long, default_value_t = 32)]
    pub dim_max: usize,
    /// Print one JSON object per report instead of text.
    #[arg(long)]
    pub json: bool,
    /// Also write JSON reports (one per line) to this file.
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
    #[arg(long, env = "ESM_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EnergyArgs {
    #[arg(long, value_name = "PATH")]
    pub base: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub expert: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub proxy: Option<PathBuf>,
    /// esd | svd
    #[arg(long, default_value = "esd", value_parser = ["esd", "svd"])]
    pub mode: String,
    #[arg(long)]
    pub centered: bool,
    #[arg(long, value_name = "PATH")]
    pub rules: Option<PathBuf>,
    /// Write the CSV here instead of standard output.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Checkpoint to list.
    pub file: PathBuf,
    /// Subtract this checkpoint first and list the update instead.
    #[arg(long, value_name = "PATH")]
    pub base: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub rules: Option<PathBuf>,
    /// descending | ascending | random
    #[arg(long)]
    pub order: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: scaling::ScalingError| e.to_string())
}

fn parse_order(s: &str) -> Result<ScalingOrder, String> {
    match s {
        "task-dim" => Ok(ScalingOrder::TaskThenDim),
        "dim-task" => Ok(ScalingOrder::DimThenTask),
        _ => Err(format!("unknown order `{s}` (task-dim|dim-task)")),
    }
}

#[derive(Debug)]
pub enum CliError {
    Invalid(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Io(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Invalid(m) | CliError::Io(m) => m,
        }
    }
}

impl From<TensorStoreError> for CliError {
    fn from(e: TensorStoreError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<MergeError> for CliError {
    fn from(e: MergeError) -> Self {
        match e {
            MergeError::Tensor(t) => t.into(),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

type CliResult = Result<i32, CliError>;

/// Parse `args` (including the program name), run the command and return the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    let result = match cli.command {
        Command::Merge(a) => cmd_merge(&a, out),
        Command::Verify(a) => cmd_verify(&a, out),
        Command::Energy(a) => cmd_energy(&a, out),
        Command::Inspect(a) => cmd_inspect(&a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            e.exit_code()
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn load_rules(path: Option<&Path>) -> Result<LayerRules, CliError> {
    match path {
        None => Ok(LayerRules::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(io_err(p))?;
            LayerRules::parse(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", p.display())))
        }
    }
}

fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Invalid(format!("cannot start thread pool: {e}")))
}

fn parse_toggles(spec: &str) -> Result<ScalingToggles, CliError> {
    let mut t = ScalingToggles::NONE;
    if spec.trim() == "none" || spec.trim().is_empty() {
        return Ok(t);
    }
    for part in spec.split(',').map(str::trim) {
        match part {
            "task" => t.task = true,
            "dim" => t.dim = true,
            "layer" => t.layer = true,
            _ => {
                return Err(CliError::Invalid(format!(
                    "--scaling: unknown level `{part}` (expected a subset of task,dim,layer or `none`)"
                )))
            }
        }
    }
    Ok(t)
}

/// Run `cmd` with the candidate path appended and parse the last non-empty output line.
fn run_scorer(program: &str, args: &[String], candidate: &Path) -> Result<f64, String> {
    let output = Process::new(program)
        .args(args)
        .arg(candidate)
        .output()
        .map_err(|e| format!("cannot run `{program}`: {e}"))?;
    if !output.status.success() {
        return Err(format!("`{program}` exited with {}", output.status));
    }
    let stdout = String::from_utf8_lossy(&output.stdout);
    let line = stdout.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("");
    line.trim()
        .parse::<f64>()
        .map_err(|_| format!("`{program}` printed `{}`, expected a number", line.trim()))
}

pub fn merge_config(a: &MergeArgs) -> Result<MergeConfig, CliError> {
    let decomposition = if a.decomp == "svd" {
        Decomposition::Svd
    } else {
        Decomposition::Esd { centered: a.centered }
    };
    if decomposition != Decomposition::Svd {
        if a.proxies.is_empty() {
            return Err(CliError::Invalid("--proxy is required (once per --expert) unless --decomp svd".into()));
        }
        if a.proxies.len() != a.experts.len() {
            return Err(CliError::Invalid(format!(
                "--proxy given {} times but --expert {} times; they pair by position",
                a.proxies.len(),
                a.experts.len()
            )));
        }
    }
    let rank_rule = match a.rank.as_str() {
        "auto" => {
            if !(0.5..=2.0).contains(&a.rank_ratio) {
                return Err(CliError::Invalid(format!("--rank-ratio must lie in [0.5, 2.0], got {}", a.rank_ratio)));
            }
            RankRule::Auto { ratio: a.rank_ratio }
        }
        s => match s.parse::<usize>() {
            Ok(k) if k >= 1 => RankRule::Fixed(k),
            _ => return Err(CliError::Invalid(format!("--rank must be `auto` or a positive integer, got `{s}`"))),
        },
    };
    if !(a.exponent >= 0.0) {
        return Err(CliError::Invalid(format!("--exponent must be >= 0, got {}", a.exponent)));
    }
    let alpha = match (&a.alpha, &a.alpha_search, &a.scorer_cmd) {
        (Some(v), None, _) => AlphaPolicy::Fixed(*v),
        (None, Some(range), Some(cmd)) => {
            let (lo, hi) = (range[0], range[1]);
            if !(lo < hi) {
                return Err(CliError::Invalid(format!("--alpha-search needs LO < HI, got {lo} {hi}")));
            }
            let mut words = cmd.split_whitespace().map(str::to_string);
            let program = words
                .next()
                .ok_or_else(|| CliError::Invalid("--scorer-cmd is empty".into()))?;
            let args: Vec<String> = words.collect();
            let dir = Arc::new(tempfile::tempdir().map_err(|e| CliError::Io(format!("temp dir: {e}")))?);
            let scorer: merge::Scorer = Arc::new(move |model: &TensorMap| {
                let path = dir.path().join("candidate.safetensors");
                tensorstore::save_tensor_map(model, &path).map_err(|e| e.to_string())?;
                run_scorer(&program, &args, &path)
            });
            AlphaPolicy::Search { lo, hi, scorer }
        }
        (None, Some(_), None) => return Err(CliError::Invalid("--alpha-search requires --scorer-cmd".into())),
        (None, None, _) => {
            return Err(CliError::Invalid(
                "either --alpha or --alpha-search LO HI with --scorer-cmd is required".into(),
            ))
        }
        (Some(_), Some(_), _) => unreachable!("clap rejects --alpha with --alpha-search"),
    };
    Ok(MergeConfig {
        rank_rule,
        scaling: parse_toggles(&a.scaling)?,
        variant: a.variant,
        exponent: a.exponent,
        order: a.order,
        alpha,
        decomposition,
        layer_rules: load_rules(a.rules.as_deref())?,
    })
}

pub fn cmd_merge(a: &MergeArgs, out: &mut dyn Write) -> CliResult {
    let cfg = merge_config(a)?;
    let pool = thread_pool(a.threads)?;
    let outcome = pool.install(|| -> Result<_, CliError> {
        let base = tensorstore::load_tensor_map(&a.base)?;
        let experts = a
            .experts
            .iter()
            .map(tensorstore::load_tensor_map)
            .collect::<Result<Vec<_>, _>>()?;
        let proxies = if cfg.decomposition == Decomposition::Svd {
            Vec::new()
        } else {
            a.proxies
                .iter()
                .map(tensorstore::load_tensor_map)
                .collect::<Result<Vec<_>, _>>()?
        };
        Ok(merge::merge_model(&base, &experts, &proxies, &cfg)?)
    })?;
    tensorstore::save_tensor_map(&outcome.model, &a.out)?;

    let mut text = String::new();
    let _ = writeln!(text, "alpha\t{:.6}", outcome.alpha);
    let _ = writeln!(text, "layer\ttype\trank\tbeta\tstatus");
    let m = &outcome.merged;
    for name in m.layers.keys() {
        let _ = writeln!(
            text,
            "{name}\t{}\t{}\t{:.6}\t{}",
            cfg.layer_rules.classify(name),
            m.ranks[name],
            m.betas[name],
            if m.zero_layers.contains(name) { "zero-update" } else { "merged" }
        );
    }
    out.write_all(text.as_bytes()).map_err(|e| CliError::Io(e.to_string()))?;
    Ok(0)
}

pub fn cmd_verify(a: &VerifyArgs, out: &mut dyn Write) -> CliResult {
    let suite: Suite = a.suite.parse().map_err(CliError::Invalid)?;
    if a.trials == 0 {
        return Err(CliError::Invalid("--trials must be >= 1".into()));
    }
    if a.dim_min == 0 || a.dim_min > a.dim_max {
        return Err(CliError::Invalid(format!(
            "need 1 <= --dim-min <= --dim-max, got {} and {}",
            a.dim_min, a.dim_max
        )));
    }
    let pool = thread_pool(a.threads)?;
    let reports = pool
        .install(|| verify::run_suite(suite, a.trials, a.seed, a.dim_min..=a.dim_max))
        .map_err(|e| CliError::Invalid(e.to_string()))?;
    let mut text = String::new();
    let mut json = String::new();
    for r in &reports {
        let _ = writeln!(text, "{}", r.summary());
        let _ = writeln!(json, "{}", r.to_json());
    }
    out.write_all(if a.json { json.as_bytes() } else { text.as_bytes() })
        .map_err(|e| CliError::Io(e.to_string()))?;
    if let Some(path) = &a.report {
        std::fs::write(path, json).map_err(io_err(path))?;
    }
    Ok(if reports.iter().all(|r| r.pass) { 0 } else { 1 })
}

pub fn cmd_energy(a: &EnergyArgs, out: &mut dyn Write) -> CliResult {
    let esd = a.mode == "esd";
    if esd && a.proxy.is_none() {
        return Err(CliError::Invalid("--proxy is required for --mode esd".into()));
    }
    let rules = load_rules(a.rules.as_deref())?;
    let base = tensorstore::load_tensor_map(&a.base)?;
    let expert = tensorstore::load_tensor_map(&a.expert)?;
    let proxy = a.proxy.as_ref().map(tensorstore::load_tensor_map).transpose()?;
    let update = tensorstore::compute_task_update(&base, &expert, &rules).map_err(|e| CliError::Invalid(e.to_string()))?;

    let mut csv = String::from("layer,fraction_retained,energy\n");
    for (name, dw) in &update.matrix_layers {
        let spectrum = if let Some(p) = &proxy {
            let key = merge::proxy_key(name);
            let x = p
                .get(&key)
                .or_else(|| p.get(&format!("{name}.input")))
                .and_then(|t| t.to_row_matrix())
                .ok_or_else(|| CliError::Invalid(format!("proxy container has no `{key}`")))?;
            if x.ncols() != dw.ncols() {
                return Err(CliError::Invalid(format!(
                    "proxy `{key}` has {} columns, layer expects {}",
                    x.ncols(),
                    dw.ncols()
                )));
            }
            let shift = decomp::activation_shift(&x, dw).map_err(|e| CliError::Invalid(e.to_string()))?;
            linalg::pca_basis(&shift, a.centered)
                .map_err(|e| CliError::Invalid(e.to_string()))?
                .values
        } else {
            linalg::thin_svd(dw).map_err(|e| CliError::Invalid(e.to_string()))?.s
        };
        let kind = if esd { SpectrumKind::Esd } else { SpectrumKind::Svd };
        match decomp::energy_retention(&spectrum, kind) {
            Ok(curve) => {
                let n = curve.len() as f64;
                for (i, e) in curve.iter().enumerate() {
                    let _ = writeln!(csv, "{name},{},{}", (i + 1) as f64 / n, e);
                }
            }
            Err(_) => {
                let _ = writeln!(csv, "{name},error,zero-update");
            }
        }
    }
    match &a.out {
        Some(path) => std::fs::write(path, csv).map_err(io_err(path))?,
        None => out.write_all(csv.as_bytes()).map_err(|e| CliError::Io(e.to_string()))?,
    }
    Ok(0)
}

pub fn cmd_inspect(a: &InspectArgs, out: &mut dyn Write) -> CliResult {
    let rules = load_rules(a.rules.as_deref())?;
    let file = tensorstore::load_tensor_map(&a.file)?;
    let map = match &a.base {
        None => file,
        Some(base_path) => {
            let base = tensorstore::load_tensor_map(base_path)?;
            let u = tensorstore::compute_task_update(&base, &file, &rules).map_err(|e| CliError::Invalid(e.to_string()))?;
            u.matrix_layers
                .iter()
                .map(|(k, m)| (k.clone(), tensorstore::DenseTensor::from_matrix(m)))
                .chain(u.other_params)
                .collect()
        }
    };
    let tensors: std::collections::BTreeMap<String, tensorstore::DenseTensor> =
        map.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
    let names: Vec<String> = match a.order.as_deref() {
        None => tensors.keys().cloned().collect(),
        Some(o) => {
            let order = match o.parse::<NormOrder>().map_err(|e| CliError::Invalid(e.to_string()))? {
                NormOrder::Random(_) => NormOrder::Random(a.seed),
                other => other,
            };
            scaling::norm_order(&tensors, order)
        }
    };
    let mut text = String::new();
    for name in names {
        let t = &tensors[&name];
        let shape = t.shape().iter().map(usize::to_string).collect::<Vec<_>>().join("x");
        let kind = if t.is_matrix() && rules.is_matrix_layer(&name) {
            rules.classify(&name).to_string()
        } else {
            "-".to_string()
        };
        let _ = writeln!(text, "{name}\t{}\t{kind}\t{:.6}", if shape.is_empty() { "scalar".into() } else { shape }, t.frobenius_norm());
    }
    out.write_all(text.as_bytes()).map_err(|e| CliError::Io(e.to_string()))?;
    Ok(0)
}
