//! Per-station event streams and the canonical on-disk dataset layout.
//!
//! A dataset directory holds three files:
//!
//! * `meta.json` with `style`, `tick_ps`, `angles_station1`, `angles_station2`
//!   and a free-form `provenance` string map;
//! * `station1.csv` and `station2.csv`, header `t_ps,setting,outcome`, one event
//!   per LF-terminated row.
//!
//! Time tags are signed 64-bit picoseconds so that window comparisons are exact.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const META_FILE: &str = "meta.json";
pub const CSV_HEADER: [&str; 3] = ["t_ps", "setting", "outcome"];

/// Angles closer than this (radians) are the same setting.
pub const ANGLE_TOLERANCE: f64 = 1e-9;

pub fn station_file(station_id: u8) -> String {
    format!("station{station_id}.csv")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Outcome {
    Plus,
    Minus,
}

impl Outcome {
    pub fn sign(self) -> i64 {
        match self {
            Outcome::Plus => 1,
            Outcome::Minus => -1,
        }
    }

    pub fn from_sign(v: i64) -> Option<Self> {
        match v {
            1 => Some(Outcome::Plus),
            -1 => Some(Outcome::Minus),
            _ => None,
        }
    }
}

/// One detection: time tag, index into the station's angle table, and the
/// detector that fired.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EventRecord {
    pub t: i64,
    pub setting: u32,
    pub outcome: Outcome,
}

impl EventRecord {
    pub fn new(t: i64, setting: u32, outcome: Outcome) -> Self {
        Self { t, setting, outcome }
    }
}

/// Time-ordered detections recorded at one station.
#[derive(Clone, Debug, PartialEq)]
pub struct StationStream {
    station_id: u8,
    angles: Vec<f64>,
    events: Vec<EventRecord>,
    tick_ps: i64,
}

impl StationStream {
    /// Builds a stream, rejecting unsorted events and any invariant violation.
    pub fn new(station_id: u8, angles: Vec<f64>, events: Vec<EventRecord>, tick_ps: i64) -> Result<Self> {
        let s = Self { station_id, angles, events, tick_ps };
        s.validate_header()?;
        if let Some(i) = s.events.windows(2).position(|w| w[0].t > w[1].t) {
            return Err(Error::Invalid(format!(
                "station {station_id}: events not sorted by time (event {} at {} ps precedes {} ps)",
                i,
                s.events[i].t,
                s.events[i + 1].t
            )));
        }
        s.validate_settings()?;
        Ok(s)
    }

    /// Like [`StationStream::new`], but sorts the events by time (stably)
    /// first. The flag reports whether a reorder was needed.
    pub fn from_unsorted(
        station_id: u8,
        angles: Vec<f64>,
        mut events: Vec<EventRecord>,
        tick_ps: i64,
    ) -> Result<(Self, bool)> {
        let sorted = events.windows(2).all(|w| w[0].t <= w[1].t);
        if !sorted {
            events.sort_by_key(|e| e.t);
        }
        Ok((Self::new(station_id, angles, events, tick_ps)?, !sorted))
    }

    fn validate_header(&self) -> Result<()> {
        if !(1..=2).contains(&self.station_id) {
            return Err(Error::Invalid(format!("station id must be 1 or 2, got {}", self.station_id)));
        }
        if self.tick_ps <= 0 {
            return Err(Error::Invalid(format!("tick_ps must be positive, got {}", self.tick_ps)));
        }
        if let Some(a) = self.angles.iter().find(|a| !(0.0..TAU).contains(*a)) {
            return Err(Error::Invalid(format!("station {}: angle {a} rad outside [0, 2pi)", self.station_id)));
        }
        Ok(())
    }

    fn validate_settings(&self) -> Result<()> {
        let n = self.angles.len();
        match self.events.iter().position(|e| e.setting as usize >= n) {
            Some(i) => Err(Error::Invalid(format!(
                "station {}: event {i} has setting {} but only {n} angles are defined",
                self.station_id, self.events[i].setting
            ))),
            None => Ok(()),
        }
    }

    pub fn station_id(&self) -> u8 {
        self.station_id
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn events(&self) -> &[EventRecord] {
        &self.events
    }

    pub fn tick_ps(&self) -> i64 {
        self.tick_ps
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn times(&self) -> impl Iterator<Item = i64> + '_ {
        self.events.iter().map(|e| e.t)
    }

    /// Index of the angle matching `angle` (radians) within [`ANGLE_TOLERANCE`].
    pub fn setting_index(&self, angle: f64) -> Option<usize> {
        self.angles.iter().position(|a| (a - angle).abs() <= ANGLE_TOLERANCE)
    }
}

/// Shifts every time tag by `delta_ps`. Fails if any tag would overflow.
pub fn apply_offset(s: &StationStream, delta_ps: i64) -> Result<StationStream> {
    let events = s
        .events
        .iter()
        .map(|e| {
            e.t.checked_add(delta_ps).map(|t| EventRecord { t, ..*e }).ok_or(Error::Range { tag: e.t, delta: delta_ps })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StationStream { events, ..s.clone() })
}

/// How the settings were varied while the data were taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Style {
    /// Settings chosen at random per event at both stations.
    Switched,
    /// One setting pair for the whole run, only the +1 detector recorded.
    FixedRun,
    /// Station 1 fixed, station 2 stepped through a list of angles.
    Swept,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub station1: StationStream,
    pub station2: StationStream,
    pub style: Style,
    pub provenance: BTreeMap<String, String>,
}

impl Dataset {
    pub fn new(
        station1: StationStream,
        station2: StationStream,
        style: Style,
        provenance: BTreeMap<String, String>,
    ) -> Result<Self> {
        if station1.station_id != 1 || station2.station_id != 2 {
            return Err(Error::Invalid("streams must be station 1 and station 2 in that order".into()));
        }
        if station1.tick_ps != station2.tick_ps {
            return Err(Error::Invalid(format!(
                "stations disagree on tick_ps ({} vs {})",
                station1.tick_ps, station2.tick_ps
            )));
        }
        if style == Style::FixedRun {
            for s in [&station1, &station2] {
                if s.angles.len() != 1 {
                    return Err(Error::Invalid(format!(
                        "fixed-run station {} must have exactly one angle, has {}",
                        s.station_id,
                        s.angles.len()
                    )));
                }
                if let Some(i) = s.events.iter().position(|e| e.outcome != Outcome::Plus) {
                    return Err(Error::Invalid(format!(
                        "fixed-run station {} records only +1 outcomes; event {i} is -1",
                        s.station_id
                    )));
                }
            }
        }
        Ok(Self { station1, station2, style, provenance })
    }

    pub fn tick_ps(&self) -> i64 {
        self.station1.tick_ps
    }

    /// Station 1 shifted by `delta_ps`; station 2 untouched.
    pub fn with_offset(&self, delta_ps: i64) -> Result<Dataset> {
        if delta_ps == 0 {
            return Ok(self.clone());
        }
        Ok(Dataset { station1: apply_offset(&self.station1, delta_ps)?, ..self.clone() })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    style: Style,
    tick_ps: i64,
    angles_station1: Vec<f64>,
    angles_station2: Vec<f64>,
    #[serde(default)]
    provenance: BTreeMap<String, String>,
}

/// A loaded dataset together with the stations whose rows had to be re-sorted.
#[derive(Debug)]
pub struct Loaded {
    pub dataset: Dataset,
    pub resorted: Vec<u8>,
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Loaded> {
    let dir = dir.as_ref();
    let meta_path = dir.join(META_FILE);
    let file = File::open(&meta_path).map_err(|source| Error::Load { path: meta_path.clone(), source })?;
    let meta: Meta = serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Parse {
        file: META_FILE.into(),
        line: e.line() as u64,
        message: e.to_string(),
    })?;

    let mut resorted = Vec::new();
    let mut load = |id: u8, angles: Vec<f64>| -> Result<StationStream> {
        let events = read_station_csv(&dir.join(station_file(id)), angles.len())?;
        let (stream, reordered) = StationStream::from_unsorted(id, angles, events, meta.tick_ps)?;
        if reordered {
            log::warn!("station{id}.csv was not sorted by time; events re-sorted");
            resorted.push(id);
        }
        Ok(stream)
    };
    let station1 = load(1, meta.angles_station1)?;
    let station2 = load(2, meta.angles_station2)?;
    let dataset = Dataset::new(station1, station2, meta.style, meta.provenance)?;
    Ok(Loaded { dataset, resorted })
}

/// Parses one station file. Error line numbers count data rows from 1,
/// not counting the header.
fn read_station_csv(path: &Path, n_angles: usize) -> Result<Vec<EventRecord>> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let file = File::open(path).map_err(|source| Error::Load { path: path.to_path_buf(), source })?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(BufReader::new(file));

    let parse_err = |line: u64, message: String| Error::Parse { file: name.clone(), line, message };

    let header = rdr.headers().map_err(|e| parse_err(0, e.to_string()))?;
    if header.iter().ne(CSV_HEADER) {
        return Err(parse_err(0, format!("header must be `{}`", CSV_HEADER.join(","))));
    }

    let mut events = Vec::new();
    let mut record = csv::StringRecord::new();
    let mut row = 0u64;
    loop {
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => return Err(parse_err(row + 1, e.to_string())),
        }
        row += 1;
        if record.len() != 3 {
            return Err(parse_err(row, format!("expected 3 fields, found {}", record.len())));
        }
        let t: i64 =
            record[0].parse().map_err(|_| parse_err(row, format!("time tag `{}` is not an integer", &record[0])))?;
        let setting: u32 = record[1]
            .parse()
            .map_err(|_| parse_err(row, format!("setting `{}` is not a non-negative integer", &record[1])))?;
        if setting as usize >= n_angles {
            return Err(parse_err(row, format!("setting index {setting} out of range ({n_angles} angles defined)")));
        }
        let outcome = record[2]
            .parse::<i64>()
            .ok()
            .and_then(Outcome::from_sign)
            .ok_or_else(|| parse_err(row, format!("outcome must be ±1, got `{}`", &record[2])))?;
        events.push(EventRecord { t, setting, outcome });
    }
    Ok(events)
}

/// Writes `d` in the canonical layout. Loading the result yields `d` again.
pub fn write_dataset(dir: impl AsRef<Path>, d: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let meta = Meta {
        style: d.style,
        tick_ps: d.tick_ps(),
        angles_station1: d.station1.angles.clone(),
        angles_station2: d.station2.angles.clone(),
        provenance: d.provenance.clone(),
    };
    let mut f = BufWriter::new(File::create(dir.join(META_FILE))?);
    serde_json::to_writer_pretty(&mut f, &meta)?;
    f.write_all(b"\n")?;
    f.flush()?;

    for s in [&d.station1, &d.station2] {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(BufWriter::new(File::create(dir.join(station_file(s.station_id)))?));
        w.write_record(CSV_HEADER)?;
        for e in &s.events {
            w.write_record(&[e.t.to_string(), e.setting.to_string(), e.outcome.sign().to_string()])?;
        }
        w.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_dir(station1: &str, station2: &str) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join(META_FILE),
            r#"{"style":"switched","tick_ps":1,"angles_station1":[0.0,0.7853981633974483],"angles_station2":[0.39269908169872414,1.1780972450961724],"provenance":{}}"#,
        )
        .unwrap();
        std::fs::write(dir.path().join("station1.csv"), station1).unwrap();
        std::fs::write(dir.path().join("station2.csv"), station2).unwrap();
        dir
    }

    const EMPTY: &str = "t_ps,setting,outcome\n";

    #[test]
    fn parses_three_rows() {
        let dir = write_dir("t_ps,setting,outcome\n0,0,1\n500,1,-1\n1200,0,1\n", EMPTY);
        let loaded = load_dataset(dir.path()).unwrap();
        let s1 = &loaded.dataset.station1;
        assert_eq!(s1.len(), 3);
        assert_eq!(s1.times().collect::<Vec<_>>(), vec![0, 500, 1200]);
        assert_eq!(s1.events()[1], EventRecord::new(500, 1, Outcome::Minus));
        assert!(loaded.resorted.is_empty());
        assert!(loaded.dataset.station2.is_empty());
    }

    #[test]
    fn bad_outcome_names_row() {
        let dir = write_dir("t_ps,setting,outcome\n100,0,2\n", EMPTY);
        let err = load_dataset(dir.path()).unwrap_err();
        match &err {
            Error::Parse { file, line, message } => {
                assert_eq!(file, "station1.csv");
                assert_eq!(*line, 1);
                assert!(message.contains("outcome must be ±1"), "{message}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn bad_rows_are_located() {
        for (body, line, needle) in [
            ("t_ps,setting,outcome\n0,0,1\n1.5,0,1\n", 2, "not an integer"),
            ("t_ps,setting,outcome\n0,0,1\n5,0,1\n9,2,1\n", 3, "out of range"),
            ("t_ps,setting,outcome\n0,-1,1\n", 1, "setting"),
            ("t_ps,setting,outcome\n1,000,0,1\n", 1, "fields"),
        ] {
            let dir = write_dir(body, EMPTY);
            match load_dataset(dir.path()).unwrap_err() {
                Error::Parse { line: l, message, .. } => {
                    assert_eq!(l, line, "{body}");
                    assert!(message.contains(needle), "{message}");
                }
                other => panic!("unexpected error {other:?}"),
            }
        }
    }

    #[test]
    fn missing_file_is_load_error() {
        let dir = write_dir(EMPTY, EMPTY);
        std::fs::remove_file(dir.path().join("station2.csv")).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Load { .. })));
        assert!(matches!(load_dataset(dir.path().join("nope")), Err(Error::Load { .. })));
    }

    #[test]
    fn unsorted_rows_are_resorted_and_flagged() {
        let dir = write_dir("t_ps,setting,outcome\n50,0,1\n10,1,-1\n", EMPTY);
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.resorted, vec![1]);
        assert_eq!(loaded.dataset.station1.times().collect::<Vec<_>>(), vec![10, 50]);
    }

    #[test]
    fn wrong_header_rejected() {
        let dir = write_dir("t,setting,outcome\n", EMPTY);
        assert!(matches!(load_dataset(dir.path()), Err(Error::Parse { line: 0, .. })));
    }

    #[test]
    fn offset_shifts_tags() {
        let s = StationStream::new(
            1,
            vec![0.0],
            vec![EventRecord::new(0, 0, Outcome::Plus), EventRecord::new(500, 0, Outcome::Minus)],
            1,
        )
        .unwrap();
        assert_eq!(apply_offset(&s, 0).unwrap(), s);
        let shifted = apply_offset(&s, 3).unwrap();
        assert_eq!(shifted.times().collect::<Vec<_>>(), vec![3, 503]);
        assert_eq!(shifted.events()[1].outcome, Outcome::Minus);
    }

    #[test]
    fn offset_overflow_is_range_error() {
        let s = StationStream::new(1, vec![0.0], vec![EventRecord::new(i64::MAX - 1, 0, Outcome::Plus)], 1).unwrap();
        assert!(matches!(apply_offset(&s, 2), Err(Error::Range { .. })));
    }

    #[test]
    fn stream_invariants() {
        let ev = |t| EventRecord::new(t, 0, Outcome::Plus);
        assert!(StationStream::new(3, vec![0.0], vec![], 1).is_err());
        assert!(StationStream::new(1, vec![0.0], vec![], 0).is_err());
        assert!(StationStream::new(1, vec![TAU], vec![], 1).is_err());
        assert!(StationStream::new(1, vec![0.0], vec![ev(5), ev(1)], 1).is_err());
        assert!(StationStream::new(1, vec![], vec![ev(1)], 1).is_err());
    }

    #[test]
    fn fixed_run_requires_plus_outcomes() {
        let s1 = StationStream::new(1, vec![0.0], vec![EventRecord::new(0, 0, Outcome::Minus)], 1).unwrap();
        let s2 = StationStream::new(2, vec![0.0], vec![], 1).unwrap();
        assert!(Dataset::new(s1.clone(), s2.clone(), Style::FixedRun, BTreeMap::new()).is_err());
        assert!(Dataset::new(s1, s2, Style::Switched, BTreeMap::new()).is_ok());
    }
}
