//! Command-line front end. Exit codes: 0 success, 2 input or validation error, 3 numerical failure.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::aggregation::{
    compare_weights, dump_dynamic, evaluate_aggregator, export_aggregator, train_linguistic_dws, train_linguistic_ws,
    Aggregator,
};
use crate::error::{Error, Result};
use crate::lfa::{self, hex_digest, LayeredDataset};
use crate::mi::{layerwise_analysis, snr_analysis, MIReport, Precision, ReportEntry, TrainConfig};
use crate::synth::{self, Family, SynthSpec, SNR_GRID_DB};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser, Serialize)]
#[command(
    name = "lingagg",
    version,
    about = "MI lower bounds and layer aggregation for layered features"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case", tag = "subcommand")]
pub enum Command {
    /// Check an LFA file and print one line per invariant.
    Validate { path: PathBuf },
    /// Generate a synthetic LFA file.
    Synth(SynthArgs),
    /// Per-layer (and per-SNR, if present) MI lower bounds.
    Analyze(AnalyzeArgs),
    /// Train a linguistic weighted-sum aggregator and export it.
    TrainWs(TrainArgs),
    /// Train a linguistic attention aggregator and export it.
    TrainDws(TrainArgs),
    /// MI lower bound of an aggregator's fused view.
    Eval(EvalArgs),
    /// Per-frame attention layer weights.
    DumpDynamic(DumpArgs),
    /// Normalized layer weights of several aggregators.
    CompareWeights(CompareArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    Mlp,
    Linear,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionArg {
    F32,
    F64,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainFlags {
    #[arg(long, env = "LING_AGG_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 15)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.2)]
    pub eval_frac: f64,
    /// Hidden widths of the MLP probe.
    #[arg(long, value_delimiter = ',', default_value = "256,256")]
    pub probe_hidden: Vec<usize>,
    #[arg(long, value_enum, default_value_t = ProbeKind::Mlp)]
    pub probe: ProbeKind,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    #[arg(long, value_enum, default_value_t = PrecisionArg::F32)]
    pub precision: PrecisionArg,
    /// Worker threads for per-layer work; 1 is the reproducibility reference.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Add an `mi_bits` column to CSV reports.
    #[arg(long)]
    pub bits: bool,
}

impl TrainFlags {
    pub fn config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            seed: self.seed,
            eval_fraction: self.eval_frac,
            hidden: match self.probe {
                ProbeKind::Mlp => self.probe_hidden.clone(),
                ProbeKind::Linear => Vec::new(),
            },
            dropout: self.dropout,
            precision: match self.precision {
                PrecisionArg::F32 => Precision::F32,
                PrecisionArg::F64 => Precision::F64,
            },
            threads: self.threads.max(1),
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub family: Family,
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// Number of classes; the binary channel always uses 2.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long, env = "LING_AGG_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Flip probability of the binary channel.
    #[arg(long = "p", default_value_t = 0.1)]
    pub flip_p: f64,
    /// Informative layer(s): planted layer, SNR peak, or the switching rotation.
    #[arg(long, value_delimiter = ',')]
    pub informative: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub snr_levels: Option<Vec<f64>>,
    #[arg(long, default_value_t = 50)]
    pub segment: usize,
    #[arg(long, default_value_t = 0.6)]
    pub layer_decay: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise_std: f64,
    #[arg(long, default_value_t = 0.0)]
    pub offset: f64,
    #[arg(long, default_value_t = 0.0)]
    pub marker: f64,
    #[arg(long)]
    pub out: PathBuf,
}

impl SynthArgs {
    pub fn spec(&self) -> SynthSpec {
        let d = SynthSpec::default();
        let classes = match self.family {
            Family::BinaryChannel => self.classes.unwrap_or(2),
            _ => self.classes.unwrap_or(d.classes),
        };
        let informative = self.informative.clone().unwrap_or_else(|| match self.family {
            Family::LayerSwitching => vec![0, self.layers.saturating_sub(1)],
            Family::NoisySnr => vec![self.layers / 2],
            _ => vec![self.layers.min(2).saturating_sub(1)],
        });
        SynthSpec {
            family: self.family,
            n: self.n,
            layers: self.layers,
            dim: self.dim,
            classes,
            seed: self.seed,
            flip_p: self.flip_p,
            informative,
            snr_levels: self.snr_levels.clone().unwrap_or(d.snr_levels),
            segment: self.segment,
            layer_decay: self.layer_decay,
            noise_std: self.noise_std,
            offset: self.offset,
            marker: self.marker,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct AnalyzeArgs {
    pub input: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
    /// SNR levels to bin by; defaults to the levels recorded in the file.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub snr_grid: Option<Vec<f64>>,
    /// Output CSV; stdout if absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    pub input: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Export with the hybrid trainable mask (only w_0 / b_0 trainable).
    #[arg(long)]
    pub hybrid: bool,
    /// Attention projection width (train-dws only); defaults to the feature width.
    #[arg(long)]
    pub d_k: Option<usize>,
    /// Aggregator JSON path; stdout if absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    pub aggregator: PathBuf,
    pub input: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct DumpArgs {
    pub aggregator: PathBuf,
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct CompareArgs {
    #[arg(required = true)]
    pub aggregators: Vec<PathBuf>,
    /// Row labels, one per aggregator; file stems if absent.
    #[arg(long, value_delimiter = ',')]
    pub labels: Option<Vec<String>>,
    /// Dataset for averaging attention weights.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to reproduce a run.
#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub subcommand: String,
    pub argv: Vec<String>,
    pub config: &'a Command,
    pub inputs: Vec<InputHash>,
    pub version: &'static str,
    pub seed: Option<u64>,
    pub outputs: Vec<String>,
    pub wall_clock_s: f64,
}

/// Inputs read and outputs written by one subcommand.
#[derive(Default)]
struct RunLog {
    inputs: Vec<InputHash>,
    outputs: Vec<String>,
    /// Where the manifest goes; stderr if `None`.
    manifest_path: Option<PathBuf>,
}

impl RunLog {
    fn read(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
        self.inputs.push(InputHash {
            path: path.display().to_string(),
            sha256: hex_digest(&bytes),
        });
        Ok(bytes)
    }

    fn dataset(&mut self, path: &Path) -> Result<LayeredDataset> {
        lfa::decode(&self.read(path)?)
    }

    fn aggregator(&mut self, path: &Path) -> Result<Aggregator> {
        let bytes = self.read(path)?;
        Aggregator::from_json(&String::from_utf8_lossy(&bytes))
    }

    /// Writes `text` to `out` (recording it and placing the manifest beside it) or to stdout.
    fn emit(&mut self, out: Option<&Path>, text: &str) -> Result<()> {
        match out {
            Some(p) => {
                std::fs::write(p, text)?;
                self.outputs.push(p.display().to_string());
                self.manifest_path.get_or_insert_with(|| manifest_path(p));
            }
            None => print!("{text}"),
        }
        Ok(())
    }
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

/// Parses `argv`, runs the subcommand and returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<std::ffi::OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    let start = Instant::now();
    let mut log = RunLog::default();
    let result = dispatch(&cli.command, &mut log);
    let code = match &result {
        Ok(code) => *code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                EXIT_NUMERICAL
            } else {
                EXIT_INPUT
            }
        }
    };
    if code == EXIT_OK {
        let manifest = RunManifest {
            subcommand: subcommand_name(&cli.command).into(),
            argv: argv.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
            config: &cli.command,
            inputs: log.inputs,
            version: env!("CARGO_PKG_VERSION"),
            seed: seed_of(&cli.command),
            outputs: log.outputs,
            wall_clock_s: start.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        match &log.manifest_path {
            Some(p) => {
                if let Err(e) = std::fs::write(p, text + "\n") {
                    eprintln!("error: writing manifest {}: {e}", p.display());
                    return EXIT_INPUT;
                }
            }
            None => eprintln!("{text}"),
        }
    }
    code
}

fn subcommand_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Validate { .. } => "validate",
        Command::Synth(_) => "synth",
        Command::Analyze(_) => "analyze",
        Command::TrainWs(_) => "train-ws",
        Command::TrainDws(_) => "train-dws",
        Command::Eval(_) => "eval",
        Command::DumpDynamic(_) => "dump-dynamic",
        Command::CompareWeights(_) => "compare-weights",
    }
}

fn seed_of(cmd: &Command) -> Option<u64> {
    match cmd {
        Command::Synth(a) => Some(a.seed),
        Command::Analyze(a) => Some(a.train.seed),
        Command::TrainWs(a) | Command::TrainDws(a) => Some(a.train.seed),
        Command::Eval(a) => Some(a.train.seed),
        _ => None,
    }
}

fn dispatch(cmd: &Command, log: &mut RunLog) -> Result<i32> {
    match cmd {
        Command::Validate { path } => cmd_validate(path, log),
        Command::Synth(a) => cmd_synth(a, log),
        Command::Analyze(a) => cmd_analyze(a, log),
        Command::TrainWs(a) => cmd_train(a, false, log),
        Command::TrainDws(a) => cmd_train(a, true, log),
        Command::Eval(a) => cmd_eval(a, log),
        Command::DumpDynamic(a) => cmd_dump_dynamic(a, log),
        Command::CompareWeights(a) => cmd_compare(a, log),
    }
}

fn cmd_validate(path: &Path, log: &mut RunLog) -> Result<i32> {
    let ds = lfa::decode_unchecked(&log.read(path)?)?;
    let checks = ds.check_invariants();
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(if checks.iter().all(|c| c.passed) {
        EXIT_OK
    } else {
        EXIT_INPUT
    })
}

fn cmd_synth(a: &SynthArgs, log: &mut RunLog) -> Result<i32> {
    let ds = synth::generate(&a.spec())?;
    lfa::write_lfa(&ds, &a.out)?;
    log.outputs.push(a.out.display().to_string());
    log.manifest_path = Some(manifest_path(&a.out));
    eprintln!(
        "wrote {} frames x {} layers x {} dims to {}",
        ds.n_frames(),
        ds.n_layers(),
        ds.dim(),
        a.out.display()
    );
    Ok(EXIT_OK)
}

fn cmd_analyze(a: &AnalyzeArgs, log: &mut RunLog) -> Result<i32> {
    let ds = log.dataset(&a.input)?;
    let cfg = a.train.config();
    let mut report = layerwise_analysis(&ds, &cfg)?;
    if ds.snr_db().is_some() {
        let grid = match &a.snr_grid {
            Some(g) => g.clone(),
            None if !ds.meta().snr_levels.is_empty() => ds.meta().snr_levels.clone(),
            None => SNR_GRID_DB.to_vec(),
        };
        let snr = snr_analysis(&ds, &grid, &cfg)?;
        report.entries.extend(snr.entries);
        report.averaging = snr.averaging;
    }
    log.emit(a.out.as_deref(), &report.to_csv(a.train.bits))?;
    Ok(EXIT_OK)
}

fn estimate_csv(entry: ReportEntry, bits: bool) -> String {
    MIReport {
        entries: vec![entry],
        averaging: None,
    }
    .to_csv(bits)
}

fn cmd_train(a: &TrainArgs, attention: bool, log: &mut RunLog) -> Result<i32> {
    let ds = log.dataset(&a.input)?;
    let cfg = a.train.config();
    let (agg, estimate) = if attention {
        let fit = train_linguistic_dws(&ds, &cfg, a.d_k)?;
        let agg = if a.hybrid {
            fit.aggregator.into_hybrid()
        } else {
            fit.aggregator
        };
        (Aggregator::Dws(agg), fit.estimate)
    } else {
        if a.d_k.is_some() {
            return Err(Error::InvalidArgument("--d-k applies to train-dws only".into()));
        }
        let fit = train_linguistic_ws(&ds, &cfg)?;
        let agg = if a.hybrid {
            fit.aggregator.into_hybrid()
        } else {
            fit.aggregator
        };
        (Aggregator::Ws(agg), fit.estimate)
    };
    let row = estimate_csv(
        ReportEntry {
            context: estimate.context.clone(),
            estimate: Some(estimate),
        },
        a.train.bits,
    );
    match &a.out {
        Some(p) => {
            export_aggregator(&agg, p)?;
            log.outputs.push(p.display().to_string());
            log.manifest_path = Some(manifest_path(p));
            print!("{row}");
        }
        None => {
            println!("{}", agg.to_json()?);
            eprint!("{row}");
        }
    }
    Ok(EXIT_OK)
}

fn cmd_eval(a: &EvalArgs, log: &mut RunLog) -> Result<i32> {
    let agg = log.aggregator(&a.aggregator)?;
    let ds = log.dataset(&a.input)?;
    let est = evaluate_aggregator(&agg, &ds, &a.train.config())?;
    let csv = estimate_csv(
        ReportEntry {
            context: est.context.clone(),
            estimate: Some(est),
        },
        a.train.bits,
    );
    log.emit(a.out.as_deref(), &csv)?;
    Ok(EXIT_OK)
}

fn cmd_dump_dynamic(a: &DumpArgs, log: &mut RunLog) -> Result<i32> {
    let agg = log.aggregator(&a.aggregator)?;
    let Aggregator::Dws(dws) = agg else {
        return Err(Error::InvalidArgument(format!(
            "{} is a weighted-sum aggregator with no per-frame weights; use compare-weights for its static weights",
            a.aggregator.display()
        )));
    };
    let ds = log.dataset(&a.input)?;
    log.emit(a.out.as_deref(), &dump_dynamic(&dws, &ds)?)?;
    Ok(EXIT_OK)
}

fn cmd_compare(a: &CompareArgs, log: &mut RunLog) -> Result<i32> {
    let labels: Vec<String> = match &a.labels {
        Some(l) if l.len() != a.aggregators.len() => {
            return Err(Error::InvalidArgument(format!(
                "{} labels for {} aggregators",
                l.len(),
                a.aggregators.len()
            )))
        }
        Some(l) => l.clone(),
        None => a
            .aggregators
            .iter()
            .map(|p| {
                p.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default()
            })
            .collect(),
    };
    let mut aggs = Vec::with_capacity(a.aggregators.len());
    for (label, path) in labels.into_iter().zip(&a.aggregators) {
        aggs.push((label, log.aggregator(path)?));
    }
    let reference = a.reference.as_deref().map(|p| log.dataset(p)).transpose()?;
    log.emit(a.out.as_deref(), &compare_weights(&aggs, reference.as_ref())?)?;
    Ok(EXIT_OK)
}
