//! Single-particle averages, two-particle correlations, the CHSH function and
//! the five-sigma test on the single-particle averages.

use std::f64::consts::FRAC_PI_2;
use std::f64::consts::PI;
use std::io;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coincidence::{count_coincidences, match_dataset, CountsTable, Policy};
use crate::dataset::{Dataset, Style, ANGLE_TOLERANCE};
use crate::error::{Error, Result};

/// Multiple of the 1/sqrt(Nc) bound at which a difference counts as a conflict.
pub const DECISION_SIGMAS: f64 = 5.0;
/// Multiple used for plotted error bars.
pub const ERROR_BAR_SIGMAS: f64 = 2.5;
/// Multiple above which a passing comparison is still warned about.
pub const WARNING_SIGMAS: f64 = 4.0;
/// Rows with fewer coincidences than this in some cell are flagged.
pub const DEFAULT_NC_FLOOR: u64 = 100;

/// Cell order used throughout: (a,b), (a,b'), (a',b), (a',b').
pub const CELL_LABELS: [&str; 4] = ["ab", "abp", "apb", "apbp"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimates {
    /// Mean of x over the coincidences.
    pub e1: f64,
    /// Mean of y.
    pub e2: f64,
    /// Mean of x*y.
    pub e: f64,
    pub nc: u64,
    /// 1/sqrt(nc), an upper bound on the standard deviation of each mean.
    pub bound: f64,
}

pub fn estimates_from_counts(c: &CountsTable) -> Result<Estimates> {
    let nc = c.nc();
    if nc == 0 {
        return Err(Error::EmptyCell(format!("{c:?}")));
    }
    let n = nc as f64;
    Ok(Estimates {
        e1: c.sum_x() as f64 / n,
        e2: c.sum_y() as f64 / n,
        e: c.sum_xy() as f64 / n,
        nc,
        bound: 1.0 / n.sqrt(),
    })
}

/// Analyzer angles in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChshAngles {
    pub a: f64,
    pub ap: f64,
    pub b: f64,
    pub bp: f64,
}

impl ChshAngles {
    /// a = 0, a' = pi/4, b = pi/8, b' = 3pi/8.
    pub const DEFAULT: ChshAngles = ChshAngles { a: 0.0, ap: PI / 4.0, b: PI / 8.0, bp: 3.0 * PI / 8.0 };

    pub fn from_degrees(a: f64, ap: f64, b: f64, bp: f64) -> Self {
        Self { a: a.to_radians(), ap: ap.to_radians(), b: b.to_radians(), bp: bp.to_radians() }
    }

    /// `(station-1 angle, station-2 angle)` for each cell in [`CELL_LABELS`] order.
    pub fn cells(&self) -> [(f64, f64); 4] {
        [(self.a, self.b), (self.a, self.bp), (self.ap, self.b), (self.ap, self.bp)]
    }

    pub fn degrees(&self) -> [f64; 4] {
        [self.a, self.ap, self.b, self.bp].map(f64::to_degrees)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChshResult {
    /// E(a,b) - E(a,b') + E(a',b) + E(a',b').
    pub s: f64,
    pub angles: ChshAngles,
    pub per_pair: [Estimates; 4],
    /// sqrt(sum of 1/Nc over the four cells).
    pub s_bound: f64,
}

impl ChshResult {
    pub fn error_bar(&self) -> f64 {
        ERROR_BAR_SIGMAS * self.s_bound
    }

    pub fn decision_bound(&self) -> f64 {
        DECISION_SIGMAS * self.s_bound
    }
}

pub fn chsh(per_pair: &[Estimates; 4], angles: ChshAngles) -> ChshResult {
    let [ab, abp, apb, apbp] = per_pair;
    ChshResult {
        s: ab.e - abp.e + apb.e + apbp.e,
        angles,
        per_pair: *per_pair,
        s_bound: per_pair.iter().map(|c| 1.0 / c.nc as f64).sum::<f64>().sqrt(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// e.g. `E1(a,b) vs E1(a,b')`.
    pub quantity: String,
    pub left: f64,
    pub right: f64,
    pub difference: f64,
    /// sqrt(1/Nc + 1/Nc').
    pub combined_bound: f64,
    /// 5 x combined bound.
    pub threshold: f64,
    /// 1/sqrt(min(Nc, Nc')).
    pub single_cell_bound: f64,
    pub single_cell_threshold: f64,
    /// |difference| in units of the combined bound.
    pub sigmas_combined: f64,
    /// |difference| in units of the single-cell bound.
    pub sigmas_single_cell: f64,
    pub verdict: Verdict,
    /// Passed, but by less than the 4-sigma single-cell margin.
    pub warning: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisReport {
    pub comparisons: Vec<Comparison>,
    pub overall: Verdict,
    pub warnings: bool,
    pub acausal_flag: bool,
    pub rule: String,
}

pub const HYPOTHESIS_RULE: &str = "each comparison fails when |difference| > 5 * sqrt(1/Nc + 1/Nc'); \
     overall passes only if every comparison passes (per-comparison test, no family-wise correction)";

fn compare(quantity: &str, left: (f64, u64), right: (f64, u64)) -> Comparison {
    let difference = left.0 - right.0;
    let combined_bound = (1.0 / left.1 as f64 + 1.0 / right.1 as f64).sqrt();
    let single_cell_bound = 1.0 / (left.1.min(right.1) as f64).sqrt();
    let threshold = DECISION_SIGMAS * combined_bound;
    let verdict = if difference.abs() > threshold { Verdict::Fail } else { Verdict::Pass };
    Comparison {
        quantity: quantity.to_string(),
        left: left.0,
        right: right.0,
        difference,
        combined_bound,
        threshold,
        single_cell_bound,
        single_cell_threshold: DECISION_SIGMAS * single_cell_bound,
        sigmas_combined: difference.abs() / combined_bound,
        sigmas_single_cell: difference.abs() / single_cell_bound,
        verdict,
        warning: verdict == Verdict::Pass && difference.abs() > WARNING_SIGMAS * single_cell_bound,
    }
}

/// Checks that each station's single-particle average does not depend on the
/// remote setting: E1 must not change between b and b', E2 not between a and a'.
pub fn hypothesis_test(per_pair: &[Estimates; 4]) -> Result<HypothesisReport> {
    if let Some(i) = per_pair.iter().position(|c| c.nc == 0) {
        return Err(Error::NotTestable(format!("cell {} has no coincidences", CELL_LABELS[i])));
    }
    let [ab, abp, apb, apbp] = per_pair;
    let comparisons = vec![
        compare("E1(a,b) vs E1(a,b')", (ab.e1, ab.nc), (abp.e1, abp.nc)),
        compare("E1(a',b) vs E1(a',b')", (apb.e1, apb.nc), (apbp.e1, apbp.nc)),
        compare("E2(a,b) vs E2(a',b)", (ab.e2, ab.nc), (apb.e2, apb.nc)),
        compare("E2(a,b') vs E2(a',b')", (abp.e2, abp.nc), (apbp.e2, apbp.nc)),
    ];
    let overall = if comparisons.iter().all(|c| c.verdict == Verdict::Pass) { Verdict::Pass } else { Verdict::Fail };
    Ok(HypothesisReport {
        warnings: comparisons.iter().any(|c| c.warning),
        comparisons,
        overall,
        acausal_flag: false,
        rule: HYPOTHESIS_RULE.to_string(),
    })
}

/// Empty cells make the test impossible rather than failing it.
pub fn hypothesis_test_counts(cells: &[CountsTable; 4]) -> Result<HypothesisReport> {
    let mut est = Vec::with_capacity(4);
    for (c, label) in cells.iter().zip(CELL_LABELS) {
        est.push(
            estimates_from_counts(c).map_err(|_| Error::NotTestable(format!("cell {label} has no coincidences")))?,
        );
    }
    hypothesis_test(&[est[0], est[1], est[2], est[3]])
}

/// Station-2 settings index pairs for the four CHSH cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSettings(pub [(u32, u32); 4]);

impl CellSettings {
    pub fn resolve(d: &Dataset, angles: &ChshAngles) -> Result<Self> {
        let find = |s: &crate::dataset::StationStream, angle: f64, name: &str| {
            s.setting_index(angle).map(|i| i as u32).ok_or_else(|| {
                Error::Parameter(format!(
                    "{name} = {} deg is not among station {} angles",
                    angle.to_degrees(),
                    s.station_id()
                ))
            })
        };
        let a = find(&d.station1, angles.a, "a")?;
        let ap = find(&d.station1, angles.ap, "a'")?;
        let b = find(&d.station2, angles.b, "b")?;
        let bp = find(&d.station2, angles.bp, "b'")?;
        Ok(CellSettings([(a, b), (a, bp), (ap, b), (ap, bp)]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub window_ps: i64,
    /// Coincidences summed over the four cells.
    pub nc: u64,
    pub counts: [CountsTable; 4],
    pub estimates: [Option<Estimates>; 4],
    pub chsh: Option<ChshResult>,
    /// Some cell has fewer coincidences than the floor.
    pub low_count: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub angles: ChshAngles,
    pub offset_ps: i64,
    pub acausal: bool,
    pub policy: Policy,
    pub nc_floor: u64,
    pub rows: Vec<SweepRow>,
}

#[derive(Clone, Copy, Debug)]
pub struct SweepOptions {
    pub offset_ps: i64,
    pub policy: Policy,
    pub nc_floor: u64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self { offset_ps: 0, policy: Policy::GreedyDelta, nc_floor: DEFAULT_NC_FLOOR }
    }
}

/// Pairs, counts and CHSH for one window.
pub fn analyze_window(
    d: &Dataset,
    angles: &ChshAngles,
    cells: &CellSettings,
    window_ps: i64,
    opts: &SweepOptions,
) -> Result<SweepRow> {
    let pairs = match_dataset(d, window_ps, opts.offset_ps, opts.policy)?;
    let by_setting = count_coincidences(&pairs, &d.station1, &d.station2);
    let counts = cells.0.map(|k| by_setting.get(&k).copied().unwrap_or_default());
    let estimates = counts.map(|c| estimates_from_counts(&c).ok());
    let chsh = match estimates {
        [Some(ab), Some(abp), Some(apb), Some(apbp)] => Some(chsh(&[ab, abp, apb, apbp], *angles)),
        _ => None,
    };
    Ok(SweepRow {
        window_ps,
        nc: counts.iter().map(CountsTable::nc).sum(),
        counts,
        estimates,
        chsh,
        low_count: counts.iter().any(|c| c.nc() < opts.nc_floor),
    })
}

pub fn window_sweep(d: &Dataset, angles: &ChshAngles, w_grid: &[i64], opts: &SweepOptions) -> Result<SweepTable> {
    if w_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Parameter("window grid must be strictly increasing".into()));
    }
    let cells = CellSettings::resolve(d, angles)?;
    let rows = w_grid.par_iter().map(|&w| analyze_window(d, angles, &cells, w, opts)).collect::<Result<Vec<_>>>()?;
    Ok(SweepTable {
        angles: *angles,
        offset_ps: opts.offset_ps,
        acausal: opts.offset_ps != 0,
        policy: opts.policy,
        nc_floor: opts.nc_floor,
        rows,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NaN".to_string(), |x| x.to_string())
}

fn csv_writer<W: io::Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w)
}

pub const SWEEP_HEADER: [&str; 16] = [
    "W_ps", "S", "S_bound", "Nc", "E1_ab", "E1_abp", "E1_apb", "E1_apbp", "E2_ab", "E2_apb", "E2_abp", "E2_apbp",
    "E_ab", "E_abp", "E_apb", "E_apbp",
];

impl SweepTable {
    /// S and all averages versus W.
    pub fn write_csv<W: io::Write>(&self, w: W) -> Result<()> {
        let mut w = csv_writer(w);
        w.write_record(SWEEP_HEADER)?;
        for r in &self.rows {
            let e = |i: usize, f: fn(&Estimates) -> f64| fmt_opt(r.estimates[i].as_ref().map(f));
            let mut rec = vec![
                r.window_ps.to_string(),
                fmt_opt(r.chsh.map(|c| c.s)),
                fmt_opt(r.chsh.map(|c| c.s_bound)),
                r.nc.to_string(),
            ];
            rec.extend((0..4).map(|i| e(i, |x| x.e1)));
            rec.extend([0, 2, 1, 3].map(|i| e(i, |x| x.e2)));
            rec.extend((0..4).map(|i| e(i, |x| x.e)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Single-particle averages versus W with 2.5x and 5x bounds.
    pub fn write_singles_csv<W: io::Write>(&self, w: W) -> Result<()> {
        let mut w = csv_writer(w);
        w.write_record(["W_ps", "cell", "a_deg", "b_deg", "Nc", "E1", "E2", "bound_2_5", "bound_5"])?;
        let cells = self.angles.cells();
        for r in &self.rows {
            for i in 0..4 {
                let est = r.estimates[i];
                w.write_record(&[
                    r.window_ps.to_string(),
                    CELL_LABELS[i].to_string(),
                    cells[i].0.to_degrees().to_string(),
                    cells[i].1.to_degrees().to_string(),
                    r.counts[i].nc().to_string(),
                    fmt_opt(est.map(|e| e.e1)),
                    fmt_opt(est.map(|e| e.e2)),
                    fmt_opt(est.map(|e| ERROR_BAR_SIGMAS * e.bound)),
                    fmt_opt(est.map(|e| DECISION_SIGMAS * e.bound)),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// The coincidence counts per cell versus W.
    pub fn write_counts_csv<W: io::Write>(&self, w: W) -> Result<()> {
        let mut w = csv_writer(w);
        w.write_record(["W_ps", "cell", "a_deg", "b_deg", "Cpp", "Cpm", "Cmp", "Cmm", "Nc"])?;
        let cells = self.angles.cells();
        for r in &self.rows {
            for (i, c) in r.counts.iter().enumerate() {
                w.write_record(&[
                    r.window_ps.to_string(),
                    CELL_LABELS[i].to_string(),
                    cells[i].0.to_degrees().to_string(),
                    cells[i].1.to_degrees().to_string(),
                    c.pp.to_string(),
                    c.pm.to_string(),
                    c.mp.to_string(),
                    c.mm.to_string(),
                    c.nc().to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Two-particle correlations per cell versus W.
    pub fn write_correlations_csv<W: io::Write>(&self, w: W) -> Result<()> {
        let mut w = csv_writer(w);
        w.write_record(["W_ps", "cell", "a_deg", "b_deg", "E", "bound_2_5", "bound_5"])?;
        let cells = self.angles.cells();
        for r in &self.rows {
            for i in 0..4 {
                let est = r.estimates[i];
                w.write_record(&[
                    r.window_ps.to_string(),
                    CELL_LABELS[i].to_string(),
                    cells[i].0.to_degrees().to_string(),
                    cells[i].1.to_degrees().to_string(),
                    fmt_opt(est.map(|e| e.e)),
                    fmt_opt(est.map(|e| ERROR_BAR_SIGMAS * e.bound)),
                    fmt_opt(est.map(|e| DECISION_SIGMAS * e.bound)),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// The ++ count of one fixed-setting run (single detector per station).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotatedRun {
    /// Station-1 angle, radians.
    pub a: f64,
    /// Station-2 angle, radians.
    pub b: f64,
    pub cpp: u64,
}

/// Coincidences of a fixed-run dataset, as the run's ++ count.
pub fn fixed_run_count(d: &Dataset, window_ps: i64, policy: Policy) -> Result<RotatedRun> {
    if d.style != Style::FixedRun {
        return Err(Error::Parameter(format!("expected a fixed-run dataset, got {:?}", d.style)));
    }
    let pairs = match_dataset(d, window_ps, 0, policy)?;
    Ok(RotatedRun { a: d.station1.angles()[0], b: d.station2.angles()[0], cpp: pairs.len() as u64 })
}

fn same_angle(x: f64, y: f64) -> bool {
    (x - y).abs() <= ANGLE_TOLERANCE
}

fn same_angle_mod_pi(x: f64, y: f64) -> bool {
    let d = (x - y).rem_euclid(PI);
    d <= ANGLE_TOLERANCE || PI - d <= ANGLE_TOLERANCE
}

fn fmt_deg(rad: f64) -> String {
    let d = (rad.to_degrees() * 1e9).round() / 1e9;
    format!("{d}")
}

/// Assembles full count tables from ++ counts of runs with one or both
/// analyzers turned by 90 degrees: C+- comes from (a, b+90), C-+ from
/// (a+90, b), C-- from (a+90, b+90). Angles match modulo 180 degrees; an
/// exact match is preferred when both exist.
pub fn combine_rotated_runs(runs: &[RotatedRun], requests: &[(f64, f64)]) -> Result<Vec<((f64, f64), CountsTable)>> {
    let lookup = |a: f64, b: f64| {
        runs.iter()
            .find(|r| same_angle(r.a, a) && same_angle(r.b, b))
            .or_else(|| runs.iter().find(|r| same_angle_mod_pi(r.a, a) && same_angle_mod_pi(r.b, b)))
            .map(|r| r.cpp)
    };
    requests
        .iter()
        .map(|&(a, b)| {
            let get = |da: f64, db: f64| {
                lookup(a + da, b + db).ok_or_else(|| {
                    let sa = if da == 0.0 { format!("a={}", fmt_deg(a)) } else { format!("a+90={}", fmt_deg(a + da)) };
                    let sb = if db == 0.0 { format!("b={}", fmt_deg(b)) } else { format!("b+90={}", fmt_deg(b + db)) };
                    Error::IncompleteSet(format!("{sa}, {sb}"))
                })
            };
            let table = CountsTable {
                pp: get(0.0, 0.0)?,
                pm: get(0.0, FRAC_PI_2)?,
                mp: get(FRAC_PI_2, 0.0)?,
                mm: get(FRAC_PI_2, FRAC_PI_2)?,
            };
            Ok(((a, b), table))
        })
        .collect()
}

pub const ROTATED_RUNS_HEADER: [&str; 3] = ["a_deg", "b_deg", "cpp"];

/// Reads rotated-run counts from CSV with header `a_deg,b_deg,cpp`.
pub fn read_rotated_runs<R: std::io::Read>(r: R, name: &str) -> Result<Vec<RotatedRun>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let header = rdr.headers()?.clone();
    if header.iter().ne(ROTATED_RUNS_HEADER) {
        return Err(Error::Parse {
            file: name.to_string(),
            line: 0,
            message: format!(
                "expected header {}, got {}",
                ROTATED_RUNS_HEADER.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let mut runs = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k as u64 + 1;
        let rec = rec?;
        let bad = |message: String| Error::Parse { file: name.to_string(), line, message };
        if rec.len() != 3 {
            return Err(bad(format!("expected 3 fields, got {}", rec.len())));
        }
        let angle = |i: usize| {
            rec[i].parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| bad(format!("bad angle {:?}", &rec[i])))
        };
        let cpp = rec[2].parse::<u64>().map_err(|_| bad(format!("bad count {:?}", &rec[2])))?;
        runs.push(RotatedRun { a: angle(0)?.to_radians(), b: angle(1)?.to_radians(), cpp });
    }
    Ok(runs)
}

/// Count tables for the four CHSH cells from rotated runs.
pub fn chsh_cells_from_runs(runs: &[RotatedRun], angles: &ChshAngles) -> Result<[CountsTable; 4]> {
    let combined = combine_rotated_runs(runs, &angles.cells())?;
    Ok([combined[0].1, combined[1].1, combined[2].1, combined[3].1])
}
