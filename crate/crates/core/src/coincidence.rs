//! Pairing of detection events across the two stations.
//!
//! Two events form a coincidence when their tags differ by at most the window
//! `W` (an exact integer comparison), and each event takes part in at most one
//! pair. Which pairs win when candidates overlap is a policy choice; the exact
//! maximum matching is available only as a small-instance oracle.

use std::collections::BTreeMap;
use std::io;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Outcome, StationStream};
use crate::error::{Error, Result};

pub const DEFAULT_BIN_PS: i64 = 500;
pub const DEFAULT_RANGE_PS: i64 = 1_000_000;

/// Largest station size accepted by [`oracle_max_matching`].
pub const ORACLE_LIMIT: usize = 64;

/// Counts of time-tag differences `t1 - t2`.
///
/// Bin `k` is centred on `k * bin_ps` and holds the `bin_ps` integer
/// differences starting at `k * bin_ps - bin_ps / 2`. Only differences with
/// `|t1 - t2| <= range_ps` are counted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_ps: i64,
    pub range_ps: i64,
    first_bin: i64,
    pub counts: Vec<u64>,
}

impl Histogram {
    fn bin_of(&self, delta: i64) -> i64 {
        (delta + self.bin_ps / 2).div_euclid(self.bin_ps)
    }

    pub fn center_ps(&self, index: usize) -> i64 {
        (self.first_bin + index as i64) * self.bin_ps
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `(bin centre, count)` pairs in increasing centre order.
    pub fn bins(&self) -> impl Iterator<Item = (i64, u64)> + '_ {
        self.counts.iter().enumerate().map(|(i, &c)| (self.center_ps(i), c))
    }

    pub fn count_at(&self, delta: i64) -> u64 {
        if delta.abs() > self.range_ps {
            return 0;
        }
        self.counts[(self.bin_of(delta) - self.first_bin) as usize]
    }

    pub fn write_csv<W: io::Write>(&self, w: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        w.write_record(["bin_center_ps", "count"])?;
        for (c, n) in self.bins() {
            w.write_record(&[c.to_string(), n.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Histogram of `t1 - t2` over all cross-station event pairs within
/// `range_ps`, built with a sliding window over the two sorted streams.
pub fn difference_histogram(s1: &StationStream, s2: &StationStream, bin_ps: i64, range_ps: i64) -> Result<Histogram> {
    if bin_ps <= 0 {
        return Err(Error::Parameter(format!("histogram bin must be positive, got {bin_ps} ps")));
    }
    if range_ps < bin_ps {
        return Err(Error::Parameter(format!(
            "histogram range {range_ps} ps is smaller than the bin width {bin_ps} ps"
        )));
    }
    let half = bin_ps / 2;
    let first_bin = (-range_ps + half).div_euclid(bin_ps);
    let last_bin = (range_ps + half).div_euclid(bin_ps);
    let mut h = Histogram { bin_ps, range_ps, first_bin, counts: vec![0; (last_bin - first_bin + 1) as usize] };

    let t2: Vec<i64> = s2.times().collect();
    let mut lo = 0;
    for t1 in s1.times() {
        while lo < t2.len() && t2[lo] < t1.saturating_sub(range_ps) {
            lo += 1;
        }
        for &t in t2[lo..].iter().take_while(|&&t| t <= t1.saturating_add(range_ps)) {
            let k = h.bin_of(t1 - t);
            h.counts[(k - first_bin) as usize] += 1;
        }
    }
    Ok(h)
}

/// The global offset that moves the histogram maximum to zero: minus the
/// centre of the tallest bin. Ties go to the smallest |offset|, then to the
/// negative one.
pub fn estimate_global_offset(h: &Histogram) -> Result<i64> {
    let max = h.counts.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return Err(Error::NoPeak);
    }
    h.bins().filter(|&(_, n)| n == max).map(|(c, _)| -c).min_by_key(|&d| (d.unsigned_abs(), d)).ok_or(Error::NoPeak)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    /// Accept candidate pairs in order of increasing |t1 - t2|.
    #[default]
    GreedyDelta,
    /// One forward pass; each station-1 event takes the earliest free
    /// station-2 event inside the window.
    Sequential,
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" | "greedy-delta" => Ok(Policy::GreedyDelta),
            "sequential" => Ok(Policy::Sequential),
            other => Err(Error::Parameter(format!("unknown pairing policy `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub i1: usize,
    pub i2: usize,
    pub delta_ps: i64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairList {
    pub pairs: Vec<Pair>,
    pub window_ps: i64,
    pub offset_ps: i64,
    pub policy: Policy,
}

impl PairList {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn write_csv<W: io::Write>(&self, w: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        w.write_record(["i1", "i2", "delta_ps"])?;
        for p in &self.pairs {
            w.write_record(&[p.i1.to_string(), p.i2.to_string(), p.delta_ps.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Pairs events with `|t1 - t2| <= window_ps`, each event used at most once.
/// Pairs are returned sorted by station-1 index.
pub fn match_coincidences(s1: &StationStream, s2: &StationStream, window_ps: i64, policy: Policy) -> Result<PairList> {
    if window_ps < 0 {
        return Err(Error::Parameter(format!("window must be non-negative, got {window_ps} ps")));
    }
    let t1: Vec<i64> = s1.times().collect();
    let t2: Vec<i64> = s2.times().collect();
    let mut pairs = match policy {
        Policy::GreedyDelta => greedy_delta(&t1, &t2, window_ps),
        Policy::Sequential => sequential(&t1, &t2, window_ps),
    };
    pairs.sort_unstable_by_key(|p| p.i1);
    Ok(PairList { pairs, window_ps, offset_ps: 0, policy })
}

/// Shifts station 1 by `offset_ps` (zero keeps the analysis causal) and
/// matches. The offset is recorded in the returned list.
pub fn match_dataset(d: &Dataset, window_ps: i64, offset_ps: i64, policy: Policy) -> Result<PairList> {
    let mut p = if offset_ps == 0 {
        match_coincidences(&d.station1, &d.station2, window_ps, policy)?
    } else {
        let shifted = crate::dataset::apply_offset(&d.station1, offset_ps)?;
        match_coincidences(&shifted, &d.station2, window_ps, policy)?
    };
    p.offset_ps = offset_ps;
    Ok(p)
}

fn greedy_delta(t1: &[i64], t2: &[i64], w: i64) -> Vec<Pair> {
    // (|delta|, t1, t2, i1, i2): tuple order is the acceptance order.
    let mut candidates: Vec<(u64, i64, i64, usize, usize)> = Vec::new();
    let mut lo = 0;
    for (i, &a) in t1.iter().enumerate() {
        while lo < t2.len() && t2[lo] < a.saturating_sub(w) {
            lo += 1;
        }
        for (j, &b) in t2.iter().enumerate().skip(lo).take_while(|&(_, &b)| b <= a.saturating_add(w)) {
            candidates.push(((a - b).unsigned_abs(), a, b, i, j));
        }
    }
    candidates.sort_unstable();

    let mut used1 = vec![false; t1.len()];
    let mut used2 = vec![false; t2.len()];
    let mut pairs = Vec::new();
    for (_, a, b, i, j) in candidates {
        if !used1[i] && !used2[j] {
            used1[i] = true;
            used2[j] = true;
            pairs.push(Pair { i1: i, i2: j, delta_ps: a - b });
        }
    }
    pairs
}

fn sequential(t1: &[i64], t2: &[i64], w: i64) -> Vec<Pair> {
    // Everything before `next` is either matched or too early for any later
    // station-1 event.
    let mut next = 0;
    let mut pairs = Vec::new();
    for (i, &a) in t1.iter().enumerate() {
        while next < t2.len() && t2[next] < a.saturating_sub(w) {
            next += 1;
        }
        if next < t2.len() && t2[next] <= a.saturating_add(w) {
            pairs.push(Pair { i1: i, i2: next, delta_ps: a - t2[next] });
            next += 1;
        }
    }
    pairs
}

/// The four coincidence counts of one setting pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountsTable {
    pub pp: u64,
    pub pm: u64,
    pub mp: u64,
    pub mm: u64,
}

impl CountsTable {
    pub fn new(pp: u64, pm: u64, mp: u64, mm: u64) -> Self {
        Self { pp, pm, mp, mm }
    }

    pub fn add(&mut self, x: Outcome, y: Outcome) {
        match (x, y) {
            (Outcome::Plus, Outcome::Plus) => self.pp += 1,
            (Outcome::Plus, Outcome::Minus) => self.pm += 1,
            (Outcome::Minus, Outcome::Plus) => self.mp += 1,
            (Outcome::Minus, Outcome::Minus) => self.mm += 1,
        }
    }

    pub fn get(&self, x: Outcome, y: Outcome) -> u64 {
        match (x, y) {
            (Outcome::Plus, Outcome::Plus) => self.pp,
            (Outcome::Plus, Outcome::Minus) => self.pm,
            (Outcome::Minus, Outcome::Plus) => self.mp,
            (Outcome::Minus, Outcome::Minus) => self.mm,
        }
    }

    pub fn nc(&self) -> u64 {
        self.pp + self.pm + self.mp + self.mm
    }

    /// Sum of x over the coincidences.
    pub fn sum_x(&self) -> i64 {
        (self.pp + self.pm) as i64 - (self.mp + self.mm) as i64
    }

    /// Sum of y over the coincidences.
    pub fn sum_y(&self) -> i64 {
        (self.pp + self.mp) as i64 - (self.pm + self.mm) as i64
    }

    /// Sum of x*y over the coincidences.
    pub fn sum_xy(&self) -> i64 {
        (self.pp + self.mm) as i64 - (self.pm + self.mp) as i64
    }
}

/// Counts keyed by `(station-1 setting index, station-2 setting index)`.
pub type CountsBySetting = BTreeMap<(u32, u32), CountsTable>;

pub fn count_coincidences(p: &PairList, s1: &StationStream, s2: &StationStream) -> CountsBySetting {
    let mut out = CountsBySetting::new();
    for pair in &p.pairs {
        let e1 = s1.events()[pair.i1];
        let e2 = s2.events()[pair.i2];
        out.entry((e1.setting, e2.setting)).or_default().add(e1.outcome, e2.outcome);
    }
    out
}

/// Size of a maximum matching in the bipartite graph of in-window pairs,
/// by augmenting paths. Test-scale only.
pub fn oracle_max_matching(s1: &StationStream, s2: &StationStream, window_ps: i64) -> Result<usize> {
    let t1: Vec<i64> = s1.times().collect();
    let t2: Vec<i64> = s2.times().collect();
    oracle_max_matching_tags(&t1, &t2, window_ps)
}

pub fn oracle_max_matching_tags(t1: &[i64], t2: &[i64], window_ps: i64) -> Result<usize> {
    if t1.len() > ORACLE_LIMIT || t2.len() > ORACLE_LIMIT {
        return Err(Error::Size { n1: t1.len(), n2: t2.len() });
    }
    let adj: Vec<Vec<usize>> = t1
        .iter()
        .map(|&a| (0..t2.len()).filter(|&j| (a - t2[j]).unsigned_abs() <= window_ps as u64).collect())
        .collect();

    fn augment(u: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &v in &adj[u] {
            if seen[v] {
                continue;
            }
            seen[v] = true;
            if owner[v].is_none_or(|w| augment(w, adj, seen, owner)) {
                owner[v] = Some(u);
                return true;
            }
        }
        false
    }

    let mut owner = vec![None; t2.len()];
    let mut size = 0;
    for u in 0..t1.len() {
        let mut seen = vec![false; t2.len()];
        if augment(u, &adj, &mut seen, &mut owner) {
            size += 1;
        }
    }
    Ok(size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::EventRecord;

    fn stream(id: u8, tags: &[i64]) -> StationStream {
        let events = tags.iter().map(|&t| EventRecord::new(t, 0, Outcome::Plus)).collect();
        StationStream::new(id, vec![0.0], events, 1).unwrap()
    }

    fn brute_histogram(t1: &[i64], t2: &[i64], range: i64) -> BTreeMap<i64, u64> {
        let mut m = BTreeMap::new();
        for a in t1 {
            for b in t2 {
                if (a - b).abs() <= range {
                    *m.entry(a - b).or_insert(0) += 1;
                }
            }
        }
        m
    }

    #[test]
    fn histogram_small_example() {
        let (t1, t2) = ([0, 10, 20], [3, 13, 23]);
        // enumeration of all nine differences: -3 three times, +7 twice, the rest out of range
        let brute = brute_histogram(&t1, &t2, 10);
        assert_eq!(brute, BTreeMap::from([(-3, 3), (7, 2)]));

        let h = difference_histogram(&stream(1, &t1), &stream(2, &t2), 2, 10).unwrap();
        assert_eq!(h.total(), 5);
        assert_eq!(h.count_at(-3), 3);
        assert_eq!(h.count_at(7), 2);
        let occupied: Vec<_> = h.bins().filter(|&(_, n)| n > 0).collect();
        // -3 lands in the bin centred on -2 (covering -3..=-2), +7 in the one on +8 (7..=8)
        assert_eq!(occupied, vec![(-2, 3), (8, 2)]);
        assert_eq!(h.bins().next().unwrap().0, -10);
        assert_eq!(h.bins().last().unwrap().0, 10);
    }

    #[test]
    fn histogram_identical_streams_peak_at_zero() {
        let s = stream(1, &[0, 7, 19, 40]);
        let s2 = stream(2, &[0, 7, 19, 40]);
        let h = difference_histogram(&s, &s2, 1, 50).unwrap();
        let (c, n) = h.bins().max_by_key(|&(_, n)| n).unwrap();
        assert_eq!((c, n), (0, 4));
        assert_eq!(estimate_global_offset(&h).unwrap(), 0);
    }

    #[test]
    fn histogram_empty_station2() {
        let h = difference_histogram(&stream(1, &[0, 5]), &stream(2, &[]), 500, 1_000_000).unwrap();
        assert_eq!(h.total(), 0);
        assert!(matches!(estimate_global_offset(&h), Err(Error::NoPeak)));
    }

    #[test]
    fn histogram_parameter_errors() {
        let (a, b) = (stream(1, &[]), stream(2, &[]));
        assert!(matches!(difference_histogram(&a, &b, 0, 10), Err(Error::Parameter(_))));
        assert!(matches!(difference_histogram(&a, &b, 20, 10), Err(Error::Parameter(_))));
    }

    #[test]
    fn histogram_odd_bin_edges() {
        let t1: Vec<i64> = (0..40).map(|i| i * 37 % 101).collect::<Vec<_>>();
        let mut t1 = t1;
        t1.sort();
        let t2: Vec<i64> = (0..30).map(|i| i * 13 % 97).collect();
        let mut t2 = t2;
        t2.sort();
        for (bin, range) in [(3, 10), (3, 11), (2, 9), (7, 7), (1, 100)] {
            let h = difference_histogram(&stream(1, &t1), &stream(2, &t2), bin, range).unwrap();
            let brute = brute_histogram(&t1, &t2, range);
            assert_eq!(h.total(), brute.values().sum::<u64>());
            for (c, n) in h.bins() {
                let expected: u64 =
                    brute.iter().filter(|(&d, _)| d >= c - bin / 2 && d < c - bin / 2 + bin).map(|(_, &n)| n).sum();
                assert_eq!(n, expected, "bin {c} (bin {bin}, range {range})");
            }
        }
    }

    fn hist_with(peaks: &[(i64, u64)]) -> Histogram {
        let mut h = difference_histogram(&stream(1, &[]), &stream(2, &[]), 1, 10).unwrap();
        for &(d, n) in peaks {
            let i = (h.bin_of(d) - h.first_bin) as usize;
            h.counts[i] = n;
        }
        h
    }

    #[test]
    fn global_offset_examples() {
        assert_eq!(estimate_global_offset(&hist_with(&[(-3, 9), (4, 2)])).unwrap(), 3);
        assert_eq!(estimate_global_offset(&hist_with(&[(0, 5)])).unwrap(), 0);
        assert_eq!(estimate_global_offset(&hist_with(&[(-5, 4), (5, 4)])).unwrap(), -5);
        assert_eq!(estimate_global_offset(&hist_with(&[(-5, 4), (2, 4), (-2, 4)])).unwrap(), -2);
    }

    #[test]
    fn offset_then_histogram_peaks_at_zero() {
        let s1 = stream(1, &[100, 300, 700]);
        let s2 = stream(2, &[97, 297, 697]);
        let h = difference_histogram(&s1, &s2, 1, 50).unwrap();
        let d = estimate_global_offset(&h).unwrap();
        assert_eq!(d, -3);
        let shifted = crate::dataset::apply_offset(&s1, d).unwrap();
        let h2 = difference_histogram(&shifted, &s2, 1, 50).unwrap();
        assert_eq!(estimate_global_offset(&h2).unwrap(), 0);
    }

    #[test]
    fn matching_examples() {
        let s1 = stream(1, &[0, 1000, 5000]);
        let s2 = stream(2, &[100, 4950]);
        for policy in [Policy::GreedyDelta, Policy::Sequential] {
            let p = match_coincidences(&s1, &s2, 200, policy).unwrap();
            assert_eq!(p.pairs, vec![Pair { i1: 0, i2: 0, delta_ps: -100 }, Pair { i1: 2, i2: 1, delta_ps: 50 }]);
        }

        let p = match_coincidences(&stream(1, &[0]), &stream(2, &[-50, 60]), 100, Policy::GreedyDelta).unwrap();
        assert_eq!(p.pairs, vec![Pair { i1: 0, i2: 0, delta_ps: 50 }]);
    }

    #[test]
    fn greedy_ties_prefer_earlier_tags() {
        // station-2 event at 10 is 10 ps from both station-1 events
        let p = match_coincidences(&stream(1, &[0, 20]), &stream(2, &[10]), 10, Policy::GreedyDelta).unwrap();
        assert_eq!(p.pairs, vec![Pair { i1: 0, i2: 0, delta_ps: -10 }]);
        let p = match_coincidences(&stream(1, &[10]), &stream(2, &[0, 20]), 10, Policy::GreedyDelta).unwrap();
        assert_eq!(p.pairs, vec![Pair { i1: 0, i2: 0, delta_ps: 10 }]);
    }

    #[test]
    fn window_is_inclusive() {
        let (s1, s2) = (stream(1, &[0]), stream(2, &[100]));
        assert_eq!(match_coincidences(&s1, &s2, 100, Policy::GreedyDelta).unwrap().len(), 1);
        assert_eq!(match_coincidences(&s1, &s2, 99, Policy::GreedyDelta).unwrap().len(), 0);
        assert_eq!(match_coincidences(&s1, &s2, 99, Policy::Sequential).unwrap().len(), 0);
        assert!(matches!(match_coincidences(&s1, &s2, -1, Policy::GreedyDelta), Err(Error::Parameter(_))));
    }

    #[test]
    fn sequential_differs_from_greedy() {
        // sequential gives 0 the earliest partner (-90); greedy prefers the closer 5
        let (s1, s2) = (stream(1, &[0]), stream(2, &[-90, 5]));
        let seq = match_coincidences(&s1, &s2, 100, Policy::Sequential).unwrap();
        let gr = match_coincidences(&s1, &s2, 100, Policy::GreedyDelta).unwrap();
        assert_eq!(seq.pairs[0].i2, 0);
        assert_eq!(gr.pairs[0].i2, 1);
    }

    #[test]
    fn oracle_examples() {
        assert_eq!(oracle_max_matching(&stream(1, &[0, 100]), &stream(2, &[50]), 100).unwrap(), 1);
        let (s1, s2) = (stream(1, &[0, 90]), stream(2, &[95]));
        assert_eq!(oracle_max_matching(&s1, &s2, 100).unwrap(), 1);
        for policy in [Policy::GreedyDelta, Policy::Sequential] {
            assert_eq!(match_coincidences(&s1, &s2, 100, policy).unwrap().len(), 1);
        }
        // greedy takes (10, 10) and strands both neighbours; the maximum is 2
        let (s1, s2) = (stream(1, &[0, 10]), stream(2, &[10, 20]));
        assert_eq!(oracle_max_matching(&s1, &s2, 10).unwrap(), 2);
        assert_eq!(match_coincidences(&s1, &s2, 10, Policy::GreedyDelta).unwrap().len(), 1);
    }

    #[test]
    fn oracle_rejects_large_instances() {
        let tags: Vec<i64> = (0..65).collect();
        assert!(matches!(oracle_max_matching(&stream(1, &tags), &stream(2, &[0]), 1), Err(Error::Size { .. })));
    }

    #[test]
    fn counts_single_pair() {
        let s1 = StationStream::new(1, vec![0.0, 1.0], vec![EventRecord::new(0, 1, Outcome::Plus)], 1).unwrap();
        let s2 = StationStream::new(2, vec![0.5, 1.5], vec![EventRecord::new(3, 0, Outcome::Minus)], 1).unwrap();
        let p = match_coincidences(&s1, &s2, 10, Policy::GreedyDelta).unwrap();
        let c = count_coincidences(&p, &s1, &s2);
        assert_eq!(c, CountsBySetting::from([((1, 0), CountsTable::new(0, 1, 0, 0))]));
    }

    #[test]
    fn counts_fixed_run_only_plus_plus() {
        let (s1, s2) = (stream(1, &[0, 50, 90]), stream(2, &[1, 52, 300]));
        let p = match_coincidences(&s1, &s2, 5, Policy::GreedyDelta).unwrap();
        let c = count_coincidences(&p, &s1, &s2);
        assert_eq!(c[&(0, 0)], CountsTable::new(2, 0, 0, 0));
    }

    #[test]
    fn csv_exports() {
        let h = difference_histogram(&stream(1, &[0]), &stream(2, &[1]), 1, 1).unwrap();
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "bin_center_ps,count\n-1,1\n0,0\n1,0\n");

        let p = match_coincidences(&stream(1, &[0]), &stream(2, &[1]), 1, Policy::GreedyDelta).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "i1,i2,delta_ps\n0,0,-1\n");
    }
}
