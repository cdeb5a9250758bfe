//! Command-line front end: `transfer` and `table1`.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::imageio::{self, fit_longest_side, RgbImage};
use crate::loss::{filter_response, LapFilter, LapTerm, LossConfig, LossReport, StyleLayer};
use crate::net::{build_tiny_vgg19, build_vgg19, resolve_tap_name, NetworkGraph, PoolingMode, DEFAULT_STYLE_TAPS};
use crate::optim::{AdamConfig, LbfgsConfig};
use crate::synth::{normalized_report, synthesize_with, Init, LossRow, NormalizedReport, Optimizer, SynthesisConfig};
use crate::tensor::Tensor;
use crate::weights::WeightStore;

/// Seed of the tiny test network's weights.
pub const TINY_NET_SEED: u64 = 0;
/// Iterations between progress lines.
pub const PROGRESS_EVERY: usize = 50;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn runtime(msg: impl std::fmt::Display) -> CliError {
    CliError::Runtime(msg.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "lapstyle", version, about = "Neural style transfer with a Laplacian loss")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Stylize one content image.
    Transfer(TransferArgs),
    /// Run each content/style pair with and without the Laplacian term and tabulate the losses.
    Table1(Table1Args),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FilterArg {
    Pool,
    Log5,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Lbfgs,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    Content,
    Random,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PoolArg {
    Max,
    Avg,
}

fn parse_lap(s: &str) -> Result<LapTerm, String> {
    let (p, g) = s.split_once(':').ok_or_else(|| format!("expected P:GAMMA, got `{s}`"))?;
    let pool: usize = p.trim().parse().map_err(|_| format!("bad pool size `{p}`"))?;
    let gamma: f64 = g.trim().parse().map_err(|_| format!("bad weight `{g}`"))?;
    if pool == 0 {
        return Err("pool size must be at least 1".into());
    }
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(format!("weight must be a finite number >= 0, got `{g}`"));
    }
    Ok(LapTerm::new(pool, gamma))
}

/// Options shared by both subcommands.
#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Longest side of the working image, in pixels.
    #[arg(long, default_value_t = 512)]
    pub size: usize,
    /// Content weight.
    #[arg(long, default_value_t = 5.0)]
    pub content_weight: f64,
    /// Style weight.
    #[arg(long, default_value_t = 100.0)]
    pub style_weight: f64,
    /// Laplacian term as POOL:WEIGHT, repeatable. Defaults to 4:100.
    #[arg(long = "lap", value_name = "P:GAMMA", value_parser = parse_lap)]
    pub lap: Vec<LapTerm>,
    /// Drop the Laplacian term entirely.
    #[arg(long, conflicts_with = "lap")]
    pub no_lap: bool,
    #[arg(long, value_enum, default_value_t = FilterArg::Pool)]
    pub lap_filter: FilterArg,
    #[arg(long, default_value = "conv4_2")]
    pub content_layer: String,
    /// Comma-separated layers, each optionally NAME:WEIGHT. Defaults to conv1_1..conv5_1, equal weights.
    #[arg(long)]
    pub style_layers: Option<String>,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Lbfgs)]
    pub optimizer: OptimizerArg,
    /// Adam learning rate.
    #[arg(long, default_value_t = 10.0)]
    pub lr: f64,
    #[arg(long, default_value_t = 1000)]
    pub iters: usize,
    #[arg(long, value_enum)]
    pub init: Option<InitArg>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// LSW1 weight file for the full network.
    #[arg(long, required_unless_present = "tiny_net")]
    pub weights: Option<PathBuf>,
    /// Use the seeded reduced-channel test network instead of real weights.
    #[arg(long, conflicts_with = "weights")]
    pub tiny_net: bool,
    /// Style image size relative to --size.
    #[arg(long, default_value_t = 1.0)]
    pub style_scale: f64,
    #[arg(long, value_enum, default_value_t = PoolArg::Max)]
    pub vgg_pool: PoolArg,
}

#[derive(Debug, Clone, Args)]
pub struct TransferArgs {
    #[arg(long)]
    pub content: PathBuf,
    #[arg(long)]
    pub style: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
    /// Per-iteration losses as CSV.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    /// Directory for content and output Laplacian images.
    #[arg(long)]
    pub save_laplacians: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct Table1Args {
    /// Text file with one `CONTENT STYLE` pair per line; relative paths
    /// resolve against the file's directory.
    #[arg(long)]
    pub pairs: PathBuf,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NetSource {
    Tiny,
    Weights(PathBuf),
}

/// Fully resolved run settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunPlan {
    pub synthesis: SynthesisConfig,
    pub net: NetSource,
    pub pooling: PoolingMode,
    pub size: usize,
    pub style_scale: f64,
}

fn layer_names() -> Vec<String> {
    build_tiny_vgg19(TINY_NET_SEED, PoolingMode::Max)
        .layers()
        .iter()
        .map(|l| l.name.clone())
        .collect()
}

fn check_layer(name: &str, known: &[String]) -> Result<String, CliError> {
    let tap = resolve_tap_name(name.trim());
    if known.contains(&tap) {
        Ok(tap)
    } else {
        Err(usage(format!("unknown layer `{name}`")))
    }
}

fn parse_style_layers(list: Option<&str>, known: &[String]) -> Result<Vec<StyleLayer>, CliError> {
    let Some(list) = list else {
        let w = 1.0 / DEFAULT_STYLE_TAPS.len() as f64;
        return Ok(DEFAULT_STYLE_TAPS
            .iter()
            .map(|l| StyleLayer {
                layer: (*l).to_owned(),
                weight: w,
            })
            .collect());
    };
    let items: Vec<&str> = list.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(usage("--style-layers is empty"));
    }
    let default_weight = 1.0 / items.len() as f64;
    items
        .iter()
        .map(|item| {
            let (name, weight) = match item.split_once(':') {
                Some((n, w)) => (
                    n,
                    w.trim()
                        .parse::<f64>()
                        .map_err(|_| usage(format!("bad style layer weight in `{item}`")))?,
                ),
                None => (*item, default_weight),
            };
            Ok(StyleLayer {
                layer: check_layer(name, known)?,
                weight,
            })
        })
        .collect()
}

impl RunArgs {
    /// Resolves flags into a plan; `default_init` applies when `--init` is absent.
    pub fn plan(&self, default_init: Init) -> Result<RunPlan, CliError> {
        let known = layer_names();
        let lap_filter = match self.lap_filter {
            FilterArg::Pool => LapFilter::PooledLaplacian,
            FilterArg::Log5 => LapFilter::Log5,
        };
        let lap_terms = if self.no_lap {
            vec![]
        } else if self.lap.is_empty() {
            vec![LapTerm::new(4, 100.0)]
        } else {
            self.lap.clone()
        };
        if lap_filter == LapFilter::Log5 && lap_terms.len() > 1 {
            return Err(usage("--lap-filter log5 takes at most one --lap term"));
        }
        let loss = LossConfig {
            alpha: self.content_weight,
            beta: self.style_weight,
            content_layer: check_layer(&self.content_layer, &known)?,
            style_layers: parse_style_layers(self.style_layers.as_deref(), &known)?,
            lap_terms,
            lap_filter,
        };
        loss.validate().map_err(|e| usage(e.to_string()))?;
        let weight_sum = loss.alpha + loss.beta + loss.lap_terms.iter().map(|t| t.gamma).sum::<f64>();
        if !(weight_sum > 0.0) {
            return Err(usage("at least one loss weight must be positive"));
        }
        if self.iters == 0 {
            return Err(usage("--iters must be at least 1"));
        }
        if self.size == 0 {
            return Err(usage("--size must be at least 1"));
        }
        if !(self.style_scale > 0.0 && self.style_scale.is_finite()) {
            return Err(usage("--style-scale must be positive"));
        }
        let optimizer = match self.optimizer {
            OptimizerArg::Lbfgs => Optimizer::Lbfgs(LbfgsConfig::default()),
            OptimizerArg::Adam => {
                if !(self.lr > 0.0 && self.lr.is_finite()) {
                    return Err(usage("--lr must be positive"));
                }
                Optimizer::Adam(AdamConfig {
                    lr: self.lr,
                    ..AdamConfig::default()
                })
            }
        };
        let init = match self.init {
            None => default_init,
            Some(InitArg::Content) => Init::Content,
            Some(InitArg::Random) => Init::Random,
            Some(InitArg::Uniform) => Init::Uniform,
        };
        let net = match (&self.weights, self.tiny_net) {
            (_, true) => NetSource::Tiny,
            (Some(p), false) => NetSource::Weights(p.clone()),
            (None, false) => return Err(usage("either --weights or --tiny-net is required")),
        };
        Ok(RunPlan {
            synthesis: SynthesisConfig {
                loss,
                optimizer,
                iterations: self.iters,
                init,
                seed: self.seed,
            },
            net,
            pooling: match self.vgg_pool {
                PoolArg::Max => PoolingMode::Max,
                PoolArg::Avg => PoolingMode::Avg,
            },
            size: self.size,
            style_scale: self.style_scale,
        })
    }
}

impl RunPlan {
    /// Network with the plan's taps, trimmed after the deepest one.
    pub fn build_graph(&self) -> Result<NetworkGraph, CliError> {
        let graph = match &self.net {
            NetSource::Tiny => build_tiny_vgg19(TINY_NET_SEED, self.pooling),
            NetSource::Weights(path) => {
                let store = WeightStore::load(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
                build_vgg19(&store, self.pooling).map_err(|e| runtime(format!("{}: {e}", path.display())))?
            }
        };
        Ok(graph
            .with_taps(self.synthesis.loss.taps())
            .map_err(|e| usage(e.to_string()))?
            .pruned())
    }

    /// Content tensor at the working size and style tensor at the scaled size.
    pub fn prepare(&self, content: &RgbImage, style: &RgbImage) -> Result<(Tensor, Tensor), CliError> {
        let (cw, ch) = fit_longest_side(content.width(), content.height(), self.size);
        let style_side = ((self.size as f64 * self.style_scale).round() as usize).max(1);
        let (sw, sh) = fit_longest_side(style.width(), style.height(), style_side);
        let c = imageio::preprocess(content, cw, ch).map_err(runtime)?;
        let s = imageio::preprocess(style, sw, sh).map_err(runtime)?;
        Ok((c, s))
    }
}

/// Column header of the per-iteration loss CSV.
pub fn loss_csv_header(config: &LossConfig) -> String {
    let mut cols = vec!["iter".to_owned(), "total".into(), "content".into(), "style".into()];
    cols.extend((0..config.lap_terms.len()).map(|k| format!("lap_{}", config.lap_label(k))));
    cols.join(",")
}

/// Formats a value with six significant digits.
pub fn fmt_value(v: f64) -> String {
    format!("{v:.5e}")
}

pub fn loss_csv_row(iter: usize, report: &LossReport) -> String {
    let mut cols = vec![
        iter.to_string(),
        fmt_value(report.total),
        fmt_value(report.content),
        fmt_value(report.style),
    ];
    cols.extend(report.lap.iter().map(|&l| fmt_value(l)));
    cols.join(",")
}

fn progress_line(iter: usize, total_iters: usize, report: &LossReport, config: &LossConfig) -> String {
    let mut line = format!(
        "iter {iter}/{total_iters} total {} content {} style {}",
        fmt_value(report.total),
        fmt_value(report.content),
        fmt_value(report.style)
    );
    for (k, l) in report.lap.iter().enumerate() {
        line.push_str(&format!(" lap_{} {}", config.lap_label(k), fmt_value(*l)));
    }
    line
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn decode(path: &Path) -> Result<RgbImage, CliError> {
    imageio::decode(path).map_err(runtime)
}

pub fn run_transfer(args: &TransferArgs) -> Result<(), CliError> {
    let plan = args.run.plan(Init::Content)?;
    let content_img = decode(&args.content)?;
    let style_img = decode(&args.style)?;
    let (content, style) = plan.prepare(&content_img, &style_img)?;
    let graph = plan.build_graph()?;
    let config = &plan.synthesis;

    let mut csv = match &args.loss_csv {
        Some(path) => {
            let mut w = create(path)?;
            writeln!(w, "{}", loss_csv_header(&config.loss)).map_err(runtime)?;
            Some(w)
        }
        None => None,
    };
    let mut csv_error: Option<io::Error> = None;
    let result = synthesize_with(&graph, &content, &style, config, |it, report| {
        if let Some(w) = csv.as_mut() {
            if csv_error.is_none() {
                if let Err(e) = writeln!(w, "{}", loss_csv_row(it, report)) {
                    csv_error = Some(e);
                }
            }
        }
        if it > 0 && (it % PROGRESS_EVERY == 0 || it == config.iterations) {
            eprintln!("{}", progress_line(it, config.iterations, report, &config.loss));
        }
    });
    if let Some(w) = csv.as_mut() {
        if let Err(e) = w.flush() {
            csv_error.get_or_insert(e);
        }
    }
    let result = result.map_err(runtime)?;
    if let Some(e) = csv_error {
        return Err(runtime(format!("loss CSV: {e}")));
    }
    if result.history.len() < config.iterations {
        eprintln!(
            "line search stalled after {} of {} iterations",
            result.history.len(),
            config.iterations
        );
    }

    let out = imageio::deprocess(&result.image).map_err(runtime)?;
    imageio::encode(&out, &args.out).map_err(runtime)?;

    if let Some(dir) = &args.save_laplacians {
        std::fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
        for (k, term) in config.loss.lap_terms.iter().enumerate() {
            let label = config.loss.lap_label(k);
            for (name, image) in [("content", &content), ("output", &result.image)] {
                let lap = filter_response(config.loss.lap_filter, image, term.pool).map_err(runtime)?;
                imageio::export_laplacian_image(&lap, dir.join(format!("{name}_{label}.png"))).map_err(runtime)?;
            }
        }
    }
    Ok(())
}

/// Loss tables of one content/style pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairTables {
    /// Optimised with the configured Laplacian terms.
    pub lapstyle: NormalizedReport,
    /// Optimised with every Laplacian weight set to zero.
    pub gatys: NormalizedReport,
}

impl PairTables {
    /// Final Lapstyle losses over final Gatys-style losses.
    pub fn lapstyle_over_gatys(&self) -> LossRow {
        let (a, b) = (self.lapstyle.last, self.gatys.last);
        LossRow {
            total: a.total / b.total,
            lap: a.lap / b.lap,
            content: a.content / b.content,
            style: a.style / b.style,
        }
    }
}

/// Runs both arms for one pair. Both are reported with the Lapstyle weights
/// and normalised by their own initial Laplacian loss.
pub fn run_pair(plan: &RunPlan, graph: &NetworkGraph, content: &Tensor, style: &Tensor) -> Result<PairTables, CliError> {
    let lap_config = &plan.synthesis;
    if lap_config.loss.lap_terms.iter().all(|t| t.gamma == 0.0) {
        return Err(usage("table1 needs a Laplacian term with a positive weight"));
    }
    let mut gatys_config = lap_config.clone();
    gatys_config.loss.lap_terms.iter_mut().for_each(|t| t.gamma = 0.0);

    let mut tables = Vec::with_capacity(2);
    for (arm, config) in [("lapstyle", lap_config), ("gatys", &gatys_config)] {
        let result = synthesize_with(graph, content, style, config, |it, report| {
            if it > 0 && (it % PROGRESS_EVERY == 0 || it == config.iterations) {
                eprintln!("{arm}: {}", progress_line(it, config.iterations, report, &config.loss));
            }
        })
        .map_err(|e| runtime(format!("{arm}: {e}")))?;
        let table = normalized_report(&result.full_history(), &lap_config.loss).map_err(|e| runtime(format!("{arm}: {e}")))?;
        tables.push(table);
    }
    let gatys = tables.pop().expect("two arms");
    let lapstyle = tables.pop().expect("two arms");
    Ok(PairTables { lapstyle, gatys })
}

/// Reads a pair list; blank lines and `#` comments are skipped.
pub fn read_pairs(path: &Path) -> Result<Vec<(PathBuf, PathBuf)>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).collect();
        if fields.len() != 2 {
            return Err(usage(format!("{}:{}: expected `CONTENT STYLE`", path.display(), n + 1)));
        }
        pairs.push((base.join(fields[0]), base.join(fields[1])));
    }
    if pairs.is_empty() {
        return Err(usage(format!("{}: no pairs", path.display())));
    }
    Ok(pairs)
}

pub const TABLE1_HEADER: &str = "pair,init,row,total,lap,content,style";

fn init_name(init: Init) -> &'static str {
    match init {
        Init::Content => "content",
        Init::Random => "random",
        Init::Uniform => "uniform",
    }
}

fn table_row(pair: &str, init: Init, row: &str, values: LossRow) -> String {
    format!(
        "{pair},{},{row},{},{},{},{}",
        init_name(init),
        fmt_value(values.total),
        fmt_value(values.lap),
        fmt_value(values.content),
        fmt_value(values.style)
    )
}

/// Table rows for one pair (or the mean over pairs).
pub fn table1_rows(pair: &str, init: Init, t: &PairTables) -> Vec<String> {
    vec![
        table_row(pair, init, "init", t.lapstyle.initial),
        table_row(pair, init, "lapstyle_final", t.lapstyle.last),
        table_row(pair, init, "lapstyle_frac", t.lapstyle.fraction),
        table_row(pair, init, "lapstyle_ratio", t.lapstyle.ratio),
        table_row(pair, init, "gatys_final", t.gatys.last),
        table_row(pair, init, "gatys_frac", t.gatys.fraction),
        table_row(pair, init, "gatys_ratio", t.gatys.ratio),
        table_row(pair, init, "lapstyle_over_gatys", t.lapstyle_over_gatys()),
    ]
}

fn mean_row(rows: impl Iterator<Item = LossRow>) -> LossRow {
    let mut sum = LossRow {
        total: 0.0,
        lap: 0.0,
        content: 0.0,
        style: 0.0,
    };
    let mut n = 0.0;
    for r in rows {
        sum.total += r.total;
        sum.lap += r.lap;
        sum.content += r.content;
        sum.style += r.style;
        n += 1.0;
    }
    LossRow {
        total: sum.total / n,
        lap: sum.lap / n,
        content: sum.content / n,
        style: sum.style / n,
    }
}

fn mean_report(reports: &[&NormalizedReport]) -> NormalizedReport {
    let initial = mean_row(reports.iter().map(|r| r.initial));
    let last = mean_row(reports.iter().map(|r| r.last));
    let div = |a: LossRow, b: LossRow| LossRow {
        total: a.total / b.total,
        lap: a.lap / b.lap,
        content: a.content / b.content,
        style: a.style / b.style,
    };
    let total = LossRow {
        total: last.total,
        lap: last.total,
        content: last.total,
        style: last.total,
    };
    NormalizedReport {
        normalizer: reports.iter().map(|r| r.normalizer).sum::<f64>() / reports.len() as f64,
        initial,
        last,
        fraction: div(last, total),
        ratio: div(last, initial),
    }
}

/// Mean tables across pairs; fractions and ratios are taken of the means.
pub fn mean_tables(tables: &[PairTables]) -> PairTables {
    PairTables {
        lapstyle: mean_report(&tables.iter().map(|t| &t.lapstyle).collect::<Vec<_>>()),
        gatys: mean_report(&tables.iter().map(|t| &t.gatys).collect::<Vec<_>>()),
    }
}

pub fn run_table1(args: &Table1Args) -> Result<(), CliError> {
    let plan = args.run.plan(Init::Random)?;
    if plan.synthesis.loss.lap_terms.iter().all(|t| t.gamma == 0.0) {
        return Err(usage("table1 needs a Laplacian term with a positive weight"));
    }
    let pairs = read_pairs(&args.pairs)?;
    let graph = plan.build_graph()?;
    let init = plan.synthesis.init;
    let mut out = create(&args.out)?;
    writeln!(out, "{TABLE1_HEADER}").map_err(runtime)?;

    let mut done = Vec::new();
    let mut failures = 0;
    for (i, (content_path, style_path)) in pairs.iter().enumerate() {
        let id = (i + 1).to_string();
        eprintln!("pair {id}: {} + {}", content_path.display(), style_path.display());
        let attempt = (|| {
            let (content, style) = plan.prepare(&decode(content_path)?, &decode(style_path)?)?;
            run_pair(&plan, &graph, &content, &style)
        })();
        match attempt {
            Ok(tables) => {
                for row in table1_rows(&id, init, &tables) {
                    writeln!(out, "{row}").map_err(runtime)?;
                }
                done.push(tables);
            }
            Err(e) => {
                failures += 1;
                eprintln!("pair {id} failed: {e}");
                writeln!(out, "{id},{},failed,,,,", init_name(init)).map_err(runtime)?;
            }
        }
        out.flush().map_err(runtime)?;
    }
    if !done.is_empty() {
        for row in table1_rows("mean", init, &mean_tables(&done)) {
            writeln!(out, "{row}").map_err(runtime)?;
        }
    }
    out.flush().map_err(runtime)?;
    if failures > 0 {
        return Err(runtime(format!("{failures} of {} pairs failed", pairs.len())));
    }
    Ok(())
}

/// Parses `argv` (including the program name) and runs it; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Transfer(args) => run_transfer(args),
        Command::Table1(args) => run_table1(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
