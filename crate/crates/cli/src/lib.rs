//! The `eprb` command line: simulate datasets, pair events, and produce the
//! CHSH, single-count, coincidence-count and correlation tables.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use eprb_core::coincidence::{
    difference_histogram, estimate_global_offset, match_dataset, CountsTable, Policy, DEFAULT_BIN_PS, DEFAULT_RANGE_PS,
};
use eprb_core::dataset::{load_dataset, write_dataset, Dataset};
use eprb_core::efficiency::{consistency_table, Cell, Measured, Moments, SolverOptions};
use eprb_core::sim::{self, Efficiency, LocalParams, OutcomeModel, SignRule, SimConfig};
use eprb_core::stats::{
    analyze_window, chsh, chsh_cells_from_runs, estimates_from_counts, hypothesis_test, read_rotated_runs,
    window_sweep, CellSettings, ChshAngles, Estimates, SweepOptions, Verdict, CELL_LABELS, DEFAULT_NC_FLOOR,
};
use eprb_core::Error;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_VERDICT: i32 = 4;

pub const REPORT_FILE: &str = "run_report.json";

/// Windows used when no grid is given: 1, 2, 5 x 10^k ns from 1 ns to 10 us.
pub const DEFAULT_WINDOW_GRID_PS: [i64; 13] = [
    1_000, 2_000, 5_000, 10_000, 20_000, 50_000, 100_000, 200_000, 500_000, 1_000_000, 2_000_000, 5_000_000, 10_000_000,
];

#[derive(Debug, Parser)]
#[command(name = "eprb", version, about = "Two-station photon-pair time-tag analysis and simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Generate a synthetic dataset.
    Simulate(SimulateArgs),
    /// Histogram of time-tag differences t1 - t2.
    Histogram(HistogramArgs),
    /// Global offset: minus the position of the histogram maximum.
    Offset(HistogramArgs),
    /// Pair events of the two stations at one window.
    Coincidences(CoincidenceArgs),
    /// S and all averages as a function of the window.
    Sweep(SweepArgs),
    /// The CHSH function at one window, or from count tables.
    Chsh(CellArgs),
    /// Check that single-station averages do not depend on the remote setting.
    Hypothesis(CellArgs),
    /// Fit the detector-efficiency model to the four setting pairs.
    EfficiencyFit(EfficiencyArgs),
    /// Sweep, singles, counts and correlation tables plus hypothesis tests.
    Report(ReportArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Histogram(_) => "histogram",
            Command::Offset(_) => "offset",
            Command::Coincidences(_) => "coincidences",
            Command::Sweep(_) => "sweep",
            Command::Chsh(_) => "chsh",
            Command::Hypothesis(_) => "hypothesis",
            Command::EfficiencyFit(_) => "efficiency-fit",
            Command::Report(_) => "report",
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Model {
    Singlet,
    Product,
    Local,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum RuleArg {
    Malus,
    Deterministic,
}

#[derive(Debug, Args, Serialize)]
struct SimulateArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Read the whole SimConfig from this JSON file; the model flags are ignored.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "singlet")]
    model: Model,
    #[arg(long, default_value_t = 1_000_000)]
    pairs: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Switched-setting angles A,AP,B,BP in degrees, or `chsh-default`.
    #[arg(long, default_value = "chsh-default", value_parser = parse_angles)]
    angles: ChshAngles,
    /// One setting per station for the whole run: A,B in degrees.
    #[arg(long, value_parser = parse_pair)]
    fixed: Option<[f64; 2]>,
    /// With --fixed: record only +1 detections.
    #[arg(long, requires = "fixed")]
    plus_only: bool,
    #[arg(long, default_value_t = sim::DEFAULT_MEAN_INTERVAL_PS)]
    mean_interval_ps: f64,
    #[arg(long, default_value_t = sim::DEFAULT_JITTER_PS)]
    jitter_ps: f64,
    #[arg(long, default_value_t = 1)]
    tick_ps: i64,
    /// Product model polarizations P1,P2 in degrees.
    #[arg(long, default_value = "0,0", value_parser = parse_pair)]
    polarizations: [f64; 2],
    /// Local model maximum delay.
    #[arg(long, default_value_t = sim::DEFAULT_T0_PS)]
    t0_ps: f64,
    /// Local model delay exponent d.
    #[arg(long, default_value_t = sim::DEFAULT_EXPONENT)]
    exponent: f64,
    #[arg(long, value_enum, default_value = "malus")]
    sign_rule: RuleArg,
    /// Station-1 detector efficiencies for +1,-1.
    #[arg(long, value_parser = parse_pair)]
    eta1: Option<[f64; 2]>,
    /// Station-2 detector efficiencies for +1,-1.
    #[arg(long, value_parser = parse_pair)]
    eta2: Option<[f64; 2]>,
}

#[derive(Debug, Args, Serialize)]
struct HistogramArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BIN_PS)]
    bin: i64,
    #[arg(long, default_value_t = DEFAULT_RANGE_PS)]
    range: i64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct CoincidenceArgs {
    #[arg(long)]
    data: PathBuf,
    /// Coincidence window W in ps.
    #[arg(long)]
    window: i64,
    /// Shift added to station-1 tags before pairing (non-zero is acausal).
    #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
    delta_g: i64,
    #[arg(long, default_value = "greedy")]
    policy: Policy,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    /// START:STOP:STEP in ps, STOP included.
    #[arg(long, value_parser = parse_grid)]
    window_grid: Option<Grid>,
    #[arg(long, default_value = "chsh-default", value_parser = parse_angles)]
    angles: ChshAngles,
    #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
    delta_g: i64,
    #[arg(long, default_value = "greedy")]
    policy: Policy,
    #[arg(long, default_value_t = DEFAULT_NC_FLOOR)]
    nc_floor: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct CellArgs {
    /// Dataset directory; needs --window.
    #[arg(long, conflicts_with = "counts")]
    data: Option<PathBuf>,
    /// Count tables: a counts CSV as written by `report`, or with
    /// --rotated-runs a CSV `a_deg,b_deg,cpp` of single-detector runs.
    #[arg(long)]
    counts: Option<PathBuf>,
    #[arg(long, requires = "counts")]
    rotated_runs: bool,
    #[arg(long)]
    window: Option<i64>,
    #[arg(long, default_value = "chsh-default", value_parser = parse_angles)]
    angles: ChshAngles,
    #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
    delta_g: i64,
    #[arg(long, default_value = "greedy")]
    policy: Policy,
    /// Exit with status 4 when the hypothesis test fails.
    #[arg(long)]
    strict: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct EfficiencyArgs {
    #[command(flatten)]
    #[serde(flatten)]
    cells: CellArgs,
    /// Seed of the solver restarts.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct ReportArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_parser = parse_grid)]
    window_grid: Option<Grid>,
    #[arg(long, default_value = "chsh-default", value_parser = parse_angles)]
    angles: ChshAngles,
    #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
    delta_g: i64,
    /// Permit a non-zero --delta-g.
    #[arg(long)]
    allow_acausal: bool,
    #[arg(long, default_value = "greedy")]
    policy: Policy,
    #[arg(long, default_value_t = DEFAULT_NC_FLOOR)]
    nc_floor: u64,
    #[arg(long)]
    strict: bool,
    #[arg(long)]
    out: PathBuf,
}

fn parse_angles(s: &str) -> Result<ChshAngles, String> {
    if s == "chsh-default" {
        return Ok(ChshAngles::DEFAULT);
    }
    let v = parse_list(s)?;
    match v[..] {
        [a, ap, b, bp] => Ok(ChshAngles::from_degrees(a, ap, b, bp)),
        _ => Err(format!("expected A,AP,B,BP in degrees or chsh-default, got `{s}`")),
    }
}

fn parse_pair(s: &str) -> Result<[f64; 2], String> {
    match parse_list(s)?[..] {
        [x, y] => Ok([x, y]),
        _ => Err(format!("expected two comma-separated numbers, got `{s}`")),
    }
}

fn parse_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|x| x.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| format!("bad number `{x}`")))
        .collect()
}

/// Window values in ps.
#[derive(Debug, Clone, Serialize)]
struct Grid(Vec<i64>);

fn parse_grid(s: &str) -> Result<Grid, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [start, stop, step] = parts[..] else {
        return Err(format!("expected START:STOP:STEP, got `{s}`"));
    };
    let num = |x: &str| x.trim().parse::<i64>().map_err(|_| format!("bad integer `{x}` in window grid"));
    let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
    if start < 0 || step <= 0 || stop < start {
        return Err(format!("window grid needs 0 <= START <= STOP and STEP > 0, got `{s}`"));
    }
    if (stop - start) / step >= 100_000 {
        return Err("window grid has more than 100000 points".into());
    }
    Ok(Grid((start..=stop).step_by(step as usize).collect()))
}

/// Something the run could not do, with the exit status it maps to.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    fn data(message: impl Into<String>) -> Self {
        Self { code: EXIT_DATA, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Parameter(_) | Error::Config(_) => EXIT_USAGE,
            _ => EXIT_DATA,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::data(e.to_string())
    }
}

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub command: String,
    pub argv: Vec<String>,
    pub config: Value,
    pub acausal_flag: bool,
    pub manifest: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verdicts: Option<Value>,
    pub exit_code: i32,
    pub wall_time_s: f64,
}

/// Where the artifacts go: files under `--out`, or the primary table on
/// stdout.
struct Sink {
    dir: Option<PathBuf>,
    manifest: Vec<String>,
}

impl Sink {
    fn new(dir: Option<&Path>) -> Result<Self, Failure> {
        if let Some(d) = dir {
            fs::create_dir_all(d).map_err(|e| Failure::data(format!("cannot create {}: {e}", d.display())))?;
        }
        Ok(Self { dir: dir.map(Path::to_path_buf), manifest: Vec::new() })
    }

    /// Writes `name.csv` and its JSON mirror `name.json`, or prints the CSV.
    fn table(&mut self, name: &str, write: impl FnOnce(&mut Vec<u8>) -> eprb_core::Result<()>) -> Result<(), Failure> {
        let mut buf = Vec::new();
        write(&mut buf)?;
        match &self.dir {
            Some(_) => {
                let mirror = csv_to_json(&buf)?;
                self.file(&format!("{name}.csv"), &buf)?;
                self.file(&format!("{name}.json"), &pretty(&mirror))?;
            }
            None => io::stdout().write_all(&buf)?,
        }
        Ok(())
    }

    fn json(&mut self, name: &str, value: &Value) -> Result<(), Failure> {
        if self.dir.is_some() {
            self.file(&format!("{name}.json"), &pretty(value))?;
        }
        Ok(())
    }

    fn file(&mut self, name: &str, bytes: &[u8]) -> Result<(), Failure> {
        let dir = self.dir.as_ref().expect("file output needs a directory");
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Failure::data(format!("cannot write {}: {e}", path.display())))?;
        self.manifest.push(name.to_string());
        Ok(())
    }
}

fn pretty(v: &Value) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("json values serialize");
    s.push(b'\n');
    s
}

/// One object per CSV row. Numbers become numbers; `NaN` and `--` become null.
fn csv_to_json(bytes: &[u8]) -> Result<Value, Failure> {
    let mut rdr = csv::Reader::from_reader(bytes);
    let header = rdr.headers().map_err(|e| Failure::data(e.to_string()))?.clone();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Failure::data(e.to_string()))?;
        let obj: serde_json::Map<String, Value> = header
            .iter()
            .zip(rec.iter())
            .map(|(k, v)| {
                let value = if v == "NaN" || v == "--" {
                    Value::Null
                } else if let Ok(i) = v.parse::<i64>() {
                    json!(i)
                } else if let Some(f) = v.parse::<f64>().ok().filter(|f| f.is_finite()) {
                    json!(f)
                } else {
                    json!(v)
                };
                (k.to_string(), value)
            })
            .collect();
        rows.push(Value::Object(obj));
    }
    Ok(Value::Array(rows))
}

struct Outcome {
    acausal: bool,
    verdicts: Option<Value>,
    strict_failure: bool,
}

impl Outcome {
    fn plain(acausal: bool) -> Self {
        Self { acausal, verdicts: None, strict_failure: false }
    }
}

fn load(dir: &Path) -> Result<Dataset, Failure> {
    Ok(load_dataset(dir)?.dataset)
}

fn grid(g: &Option<Grid>) -> Vec<i64> {
    g.as_ref().map_or_else(|| DEFAULT_WINDOW_GRID_PS.to_vec(), |g| g.0.clone())
}

fn simulate(a: &SimulateArgs, sink: &mut Sink) -> Result<Outcome, Failure> {
    let cfg = match &a.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str::<SimConfig>(&text)
                .map_err(|e| Failure::usage(format!("{}: invalid simulation config: {e}", path.display())))?
        }
        None => {
            let settings = match a.fixed {
                Some([x, y]) => sim::Settings::Fixed { a: x.to_radians(), b: y.to_radians(), plus_only: a.plus_only },
                None => {
                    let ChshAngles { a, ap, b, bp } = a.angles;
                    sim::Settings::Switched { a, ap, b, bp }
                }
            };
            let model = match a.model {
                Model::Singlet => OutcomeModel::Singlet,
                Model::Product => {
                    OutcomeModel::Product { p1: a.polarizations[0].to_radians(), p2: a.polarizations[1].to_radians() }
                }
                Model::Local => OutcomeModel::LocalTimetag(LocalParams {
                    t0_ps: a.t0_ps,
                    exponent: a.exponent,
                    sign_rule: match a.sign_rule {
                        RuleArg::Malus => SignRule::Malus,
                        RuleArg::Deterministic => SignRule::Deterministic,
                    },
                }),
            };
            let efficiency = (a.eta1.is_some() || a.eta2.is_some()).then(|| Efficiency {
                eta1: a.eta1.unwrap_or([1.0; 2]),
                eta2: a.eta2.unwrap_or([1.0; 2]),
                kappa1: [1.0; 2],
                kappa2: [1.0; 2],
            });
            SimConfig {
                n_pairs: a.pairs,
                mean_interval_ps: a.mean_interval_ps,
                jitter_ps: a.jitter_ps,
                settings,
                outcome_model: model,
                efficiency,
                seed: a.seed,
                tick_ps: a.tick_ps,
            }
        }
    };
    let d = sim::simulate(&cfg)?;
    write_dataset(&a.out, &d)?;
    sink.manifest.extend(["meta.json", "station1.csv", "station2.csv"].map(String::from));
    sink.json("sim_config", &serde_json::to_value(&cfg).expect("config serializes"))?;
    println!(
        "simulated {} pairs: {} events at station 1, {} at station 2",
        cfg.n_pairs,
        d.station1.len(),
        d.station2.len()
    );
    Ok(Outcome::plain(false))
}

fn histogram(a: &HistogramArgs, sink: &mut Sink) -> Result<Outcome, Failure> {
    let d = load(&a.data)?;
    let h = difference_histogram(&d.station1, &d.station2, a.bin, a.range)?;
    sink.table("histogram", |w| h.write_csv(w))?;
    Ok(Outcome::plain(false))
}

fn offset(a: &HistogramArgs, sink: &mut Sink) -> Result<Outcome, Failure> {
    let d = load(&a.data)?;
    let h = difference_histogram(&d.station1, &d.station2, a.bin, a.range)?;
    let delta = estimate_global_offset(&h)?;
    println!("delta_g_ps={delta}");
    sink.json(
        "offset",
        &json!({ "delta_g_ps": delta, "bin_ps": a.bin, "range_ps": a.range, "peak_count": h.count_at(-delta) }),
    )?;
    Ok(Outcome::plain(false))
}

fn coincidences(a: &CoincidenceArgs, sink: &mut Sink) -> Result<Outcome, Failure> {
    let d = load(&a.data)?;
    let pairs = match_dataset(&d, a.window, a.delta_g, a.policy)?;
    if sink.dir.is_some() {
        println!("Nc={}", pairs.len());
    }
    sink.table("coincidences", |w| pairs.write_csv(w))?;
    Ok(Outcome::plain(a.delta_g != 0))
}

fn sweep(a: &SweepArgs, sink: &mut Sink) -> Result<Outcome, Failure> {
    let d = load(&a.data)?;
    let opts = SweepOptions { offset_ps: a.delta_g, policy: a.policy, nc_floor: a.nc_floor };
    let table = window_sweep(&d, &a.angles, &grid(&a.window_grid), &opts)?;
    sink.table("sweep", |w| table.write_csv(w))?;
    Ok(Outcome::plain(table.acausal))
}

#[derive(Debug, Deserialize)]
struct CountsRow {
    #[serde(rename = "W_ps")]
    window_ps: Option<i64>,
    cell: String,
    #[serde(rename = "Cpp")]
    pp: u64,
    #[serde(rename = "Cpm")]
    pm: u64,
    #[serde(rename = "Cmp")]
    mp: u64,
    #[serde(rename = "Cmm")]
    mm: u64,
}

fn read_counts_file(path: &Path, window: Option<i64>) -> Result<[CountsTable; 4], Failure> {
    let name = path.display().to_string();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Failure::data(format!("cannot read {name}: {e}")))?;
    let mut rows = Vec::new();
    for rec in rdr.deserialize::<CountsRow>() {
        rows.push(rec.map_err(|e| Failure::data(format!("{name}: {e}")))?);
    }
    let mut windows: Vec<Option<i64>> = rows.iter().map(|r| r.window_ps).collect();
    windows.dedup();
    let want = match window {
        Some(w) => Some(w),
        None if windows.len() <= 1 => windows.first().copied().flatten(),
        None => return Err(Failure::usage(format!("{name} holds several windows; pick one with --window"))),
    };
    let mut out = [None; 4];
    for r in rows.iter().filter(|r| want.is_none() || r.window_ps == want) {
        let k = CELL_LABELS
            .iter()
            .position(|l| *l == r.cell)
            .ok_or_else(|| Failure::data(format!("{name}: unknown cell `{}`", r.cell)))?;
        out[k] = Some(CountsTable { pp: r.pp, pm: r.pm, mp: r.mp, mm: r.mm });
    }
    let mut tables = [CountsTable::default(); 4];
    for (k, t) in out.iter().enumerate() {
        tables[k] = t.ok_or_else(|| {
            Failure::data(format!(
                "{name}: missing cell {} at W={}",
                CELL_LABELS[k],
                want.map_or("-".into(), |w| w.to_string())
            ))
        })?;
    }
    Ok(tables)
}

/// Count tables of the four CHSH cells from whichever input was given.
fn cell_counts(a: &CellArgs) -> Result<[CountsTable; 4], Failure> {
    match (&a.data, &a.counts) {
        (Some(dir), None) => {
            let w = a.window.ok_or_else(|| Failure::usage("--data needs --window"))?;
            let d = load(dir)?;
            let cells = CellSettings::resolve(&d, &a.angles)?;
            let opts = SweepOptions { offset_ps: a.delta_g, policy: a.policy, nc_floor: DEFAULT_NC_FLOOR };
            Ok(analyze_window(&d, &a.angles, &cells, w, &opts)?.counts)
        }
        (None, Some(path)) if a.rotated_runs => {
            let file =
                fs::File::open(path).map_err(|e| Failure::data(format!("cannot read {}: {e}", path.display())))?;
            let runs = read_rotated_runs(file, &path.display().to_string())?;
            Ok(chsh_cells_from_runs(&runs, &a.angles)?)
        }
        (None, Some(path)) => read_counts_file(path, a.window),
        _ => Err(Failure::usage("give either --data DIR --window PS or --counts FILE")),
    }
}

fn cell_estimates(counts: &[CountsTable; 4]) -> Result<[Estimates; 4], Failure> {
    let mut out = Vec::with_capacity(4);
    for (c, label) in counts.iter().zip(CELL_LABELS) {
        out.push(estimates_from_counts(c).map_err(|_| Failure::data(format!("no coincidences in cell {label}")))?);
    }
    Ok([out[0], out[1], out[2], out[3]])
}

fn write_cells_csv(w: &mut Vec<u8>, angles: &ChshAngles, est: &[Estimates; 4]) -> eprb_core::Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    w.write_record(["cell", "a_deg", "b_deg", "Nc", "E1", "E2", "E", "bound"])?;
    for ((label, (a, b)), e) in CELL_LABELS.iter().zip(angles.cells()).zip(est) {
        w.write_record(&[
            label.to_string(),
            a.to_degrees().to_string(),
            b.to_degrees().to_string(),
            e.nc.to_string(),
            e.e1.to_string(),
            e.e2.to_string(),
            e.e.to_string(),
            e.bound.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn chsh_cmd(a: &CellArgs, sink: &mut Sink) -> Result<Outcome, Failure> {
    let est = cell_estimates(&cell_counts(a)?)?;
    let r = chsh(&est, a.angles);
    println!(
        "S={:.3} (|S|={:.3}, bound {:.4}, Nc={})",
        r.s,
        r.s.abs(),
        r.s_bound,
        est.iter().map(|e| e.nc).sum::<u64>()
    );
    if sink.dir.is_some() {
        sink.table("chsh_cells", |w| write_cells_csv(w, &a.angles, &est))?;
    }
    sink.json("chsh", &serde_json::to_value(r).expect("serializes"))?;
    Ok(Outcome::plain(a.delta_g != 0))
}

fn hypothesis(a: &CellArgs, sink: &mut Sink) -> Result<Outcome, Failure> {
    let est = cell_estimates(&cell_counts(a)?)?;
    let mut report = hypothesis_test(&est)?;
    report.acausal_flag = a.delta_g != 0;
    for c in &report.comparisons {
        println!(
            "{:<24} {:+.4} vs {:+.4}  diff {:+.4}  {:.2} sigma  {:?}{}",
            c.quantity,
            c.left,
            c.right,
            c.difference,
            c.sigmas_combined,
            c.verdict,
            if c.warning { "  (warning)" } else { "" }
        );
    }
    println!("overall: {:?}", report.overall);
    let value = serde_json::to_value(&report).expect("serializes");
    sink.json("hypothesis", &value)?;
    Ok(Outcome {
        acausal: report.acausal_flag,
        strict_failure: a.strict && report.overall == Verdict::Fail,
        verdicts: Some(
            json!({ "hypothesis": report.overall, "comparisons": report.comparisons.iter().map(|c| (c.quantity.clone(), c.verdict)).collect::<Vec<_>>() }),
        ),
    })
}

fn efficiency_fit(a: &EfficiencyArgs, sink: &mut Sink) -> Result<Outcome, Failure> {
    let est = cell_estimates(&cell_counts(&a.cells)?)?;
    let measured = Cell::ALL.map(|c| {
        let e = est[c.index()];
        Measured { cell: c, averages: Moments { e1: e.e1, e2: e.e2, e: e.e } }
    });
    let opts = SolverOptions { seed: a.seed, ..SolverOptions::default() };
    let t = consistency_table(&measured, &opts)?;
    sink.table("efficiency", |w| t.write_csv(w))?;
    sink.json("efficiency_solutions", &serde_json::to_value(&t).expect("serializes"))?;
    if sink.dir.is_some() {
        println!("converged {}/4, discrepancy {:.3e}", t.converged(), t.discrepancy);
    }
    Ok(Outcome::plain(a.cells.delta_g != 0))
}

fn report(a: &ReportArgs, sink: &mut Sink) -> Result<Outcome, Failure> {
    if a.delta_g != 0 && !a.allow_acausal {
        return Err(Failure::usage(
            "refusing to shift station 1 by a global offset: coincidences should be counted without \
             compensating for it; pass --allow-acausal to do it anyway",
        ));
    }
    let data = a.data.as_ref().ok_or_else(|| Failure::data("missing input: --data DIR"))?;
    let d = load(data)?;
    let opts = SweepOptions { offset_ps: a.delta_g, policy: a.policy, nc_floor: a.nc_floor };
    let table = window_sweep(&d, &a.angles, &grid(&a.window_grid), &opts)?;
    sink.table("sweep", |w| table.write_csv(w))?;
    sink.table("singles", |w| table.write_singles_csv(w))?;
    sink.table("counts", |w| table.write_counts_csv(w))?;
    sink.table("correlations", |w| table.write_correlations_csv(w))?;

    let mut per_window = Vec::new();
    let mut any_fail = false;
    for row in &table.rows {
        if let [Some(ab), Some(abp), Some(apb), Some(apbp)] = row.estimates {
            let mut h = hypothesis_test(&[ab, abp, apb, apbp])?;
            h.acausal_flag = table.acausal;
            any_fail |= h.overall == Verdict::Fail;
            per_window.push(json!({ "W_ps": row.window_ps, "report": h }));
        }
    }
    sink.json("hypothesis", &Value::Array(per_window.clone()))?;
    let verdicts: Vec<Value> =
        per_window.iter().map(|v| json!({ "W_ps": v["W_ps"], "hypothesis": v["report"]["overall"] })).collect();
    println!("wrote {} windows to {}", table.rows.len(), a.out.display());
    Ok(Outcome { acausal: table.acausal, verdicts: Some(Value::Array(verdicts)), strict_failure: a.strict && any_fail })
}

fn out_dir(c: &Command) -> Option<&Path> {
    match c {
        Command::Simulate(a) => Some(&a.out),
        Command::Histogram(a) | Command::Offset(a) => a.out.as_deref(),
        Command::Coincidences(a) => a.out.as_deref(),
        Command::Sweep(a) => a.out.as_deref(),
        Command::Chsh(a) | Command::Hypothesis(a) => a.out.as_deref(),
        Command::EfficiencyFit(a) => a.cells.out.as_deref(),
        Command::Report(a) => Some(&a.out),
    }
}

fn execute(c: &Command, sink: &mut Sink) -> Result<Outcome, Failure> {
    match c {
        Command::Simulate(a) => simulate(a, sink),
        Command::Histogram(a) => histogram(a, sink),
        Command::Offset(a) => offset(a, sink),
        Command::Coincidences(a) => coincidences(a, sink),
        Command::Sweep(a) => sweep(a, sink),
        Command::Chsh(a) => chsh_cmd(a, sink),
        Command::Hypothesis(a) => hypothesis(a, sink),
        Command::EfficiencyFit(a) => efficiency_fit(a, sink),
        Command::Report(a) => report(a, sink),
    }
}

/// Runs the command line and returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let start = Instant::now();
    let command = &cli.command;
    let mut sink = match Sink::new(out_dir(command)) {
        Ok(s) => s,
        Err(f) => {
            eprintln!("eprb: error: {}", f.message);
            return f.code;
        }
    };
    let result = execute(command, &mut sink);
    let (code, acausal, verdicts) = match result {
        Ok(o) => (if o.strict_failure { EXIT_VERDICT } else { EXIT_OK }, o.acausal, o.verdicts),
        Err(f) => {
            eprintln!("eprb: error: {}", f.message);
            (f.code, false, None)
        }
    };
    if code == EXIT_VERDICT {
        eprintln!("eprb: hypothesis test failed (--strict)");
    }

    let config = serde_json::to_value(command).expect("arguments serialize");
    let mut report = RunReport {
        command: command.name().to_string(),
        argv: argv.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
        config: config.as_object().and_then(|o| o.values().next().cloned()).unwrap_or(config),
        acausal_flag: acausal,
        manifest: sink.manifest.clone(),
        verdicts,
        exit_code: code,
        wall_time_s: 0.0,
    };
    report.wall_time_s = start.elapsed().as_secs_f64();
    match &sink.dir {
        Some(dir) => {
            report.manifest.push(REPORT_FILE.to_string());
            let bytes = pretty(&serde_json::to_value(&report).expect("report serializes"));
            if let Err(e) = fs::write(dir.join(REPORT_FILE), bytes) {
                eprintln!("eprb: error: cannot write {}: {e}", dir.join(REPORT_FILE).display());
                return if code == EXIT_OK { EXIT_DATA } else { code };
            }
        }
        None => eprintln!("{}", serde_json::to_string(&report).expect("report serializes")),
    }
    code
}
