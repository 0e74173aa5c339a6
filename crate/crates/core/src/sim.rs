//! Event-by-event generation of synthetic two-station datasets.
//!
//! A seeded Poisson source emits pairs. Each station picks its setting,
//! produces an outcome and a time tag (emission time plus model delay plus
//! Gaussian jitter), and may lose the event to a finite detection
//! efficiency. Three random streams are used: the source's and one per
//! station, all derived from the config seed, so a station's draws do not
//! depend on how the other station consumes its stream.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, EventRecord, Outcome, StationStream, Style};
use crate::efficiency::{pair_probabilities, Moments};
use crate::{Error, Result};

pub const DEFAULT_MEAN_INTERVAL_PS: f64 = 3.0e7;
pub const DEFAULT_JITTER_PS: f64 = 1000.0;
pub const DEFAULT_T0_PS: f64 = 1.0e6;
pub const DEFAULT_EXPONENT: f64 = 2.0;

const SOURCE_STREAM: u64 = 0;

/// How settings are chosen. Angles in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum Settings {
    /// Each station picks one of its two angles at random per event.
    Switched { a: f64, ap: f64, b: f64, bp: f64 },
    /// One angle per station for the whole run. With `plus_only`, only the
    /// +1 detectors are recorded, as in a rotated-run experiment.
    Fixed {
        a: f64,
        b: f64,
        #[serde(default)]
        plus_only: bool,
    },
}

impl Settings {
    fn angles(&self) -> (Vec<f64>, Vec<f64>) {
        match *self {
            Settings::Switched { a, ap, b, bp } => (vec![a, ap], vec![b, bp]),
            Settings::Fixed { a, b, .. } => (vec![a], vec![b]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignRule {
    /// x = sign(cos 2(theta - setting)).
    Deterministic,
    /// x = +1 with probability cos^2(theta - setting).
    Malus,
}

/// Parameters of the local time-tag model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalParams {
    /// Maximum delay.
    pub t0_ps: f64,
    /// Delay bound is `t0_ps * |sin 2(theta - setting)|^(2 d)`.
    pub exponent: f64,
    pub sign_rule: SignRule,
}

impl Default for LocalParams {
    fn default() -> Self {
        Self { t0_ps: DEFAULT_T0_PS, exponent: DEFAULT_EXPONENT, sign_rule: SignRule::Malus }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "model")]
pub enum OutcomeModel {
    /// Outcomes drawn from the singlet distribution: E1 = E2 = 0,
    /// E(a, b) = -cos 2(a - b).
    Singlet,
    /// Uncorrelated photons polarized along p1 and p2:
    /// E_i = cos 2(setting - p_i), E = E1 E2.
    Product { p1: f64, p2: f64 },
    /// Each photon carries a hidden polarization; outcome and delay are
    /// local functions of it and the station's setting.
    LocalTimetag(LocalParams),
}

impl OutcomeModel {
    /// Quantum moments at settings (a, b); `None` for the local model.
    pub fn moments(&self, a: f64, b: f64) -> Option<Moments> {
        match *self {
            OutcomeModel::Singlet => Some(Moments { e1: 0.0, e2: 0.0, e: -(2.0 * (a - b)).cos() }),
            OutcomeModel::Product { p1, p2 } => {
                let e1 = (2.0 * (a - p1)).cos();
                let e2 = (2.0 * (b - p2)).cos();
                Some(Moments { e1, e2, e: e1 * e2 })
            }
            OutcomeModel::LocalTimetag(_) => None,
        }
    }
}

/// Detection probability of an emitted photon at station i is
/// `kappa_i[setting] * eta_i[outcome]`, with outcome index 0 for +1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Efficiency {
    pub eta1: [f64; 2],
    pub eta2: [f64; 2],
    #[serde(default = "unit")]
    pub kappa1: [f64; 2],
    #[serde(default = "unit")]
    pub kappa2: [f64; 2],
}

fn unit() -> [f64; 2] {
    [1.0; 2]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_pairs: u64,
    #[serde(default = "default_mean_interval")]
    pub mean_interval_ps: f64,
    #[serde(default = "default_jitter")]
    pub jitter_ps: f64,
    pub settings: Settings,
    pub outcome_model: OutcomeModel,
    #[serde(default)]
    pub efficiency: Option<Efficiency>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tick")]
    pub tick_ps: i64,
}

fn default_mean_interval() -> f64 {
    DEFAULT_MEAN_INTERVAL_PS
}

fn default_jitter() -> f64 {
    DEFAULT_JITTER_PS
}

fn default_tick() -> i64 {
    1
}

impl SimConfig {
    /// Defaults for everything but the size, settings and model.
    pub fn new(n_pairs: u64, settings: Settings, outcome_model: OutcomeModel) -> Self {
        Self {
            n_pairs,
            mean_interval_ps: DEFAULT_MEAN_INTERVAL_PS,
            jitter_ps: DEFAULT_JITTER_PS,
            settings,
            outcome_model,
            efficiency: None,
            seed: 0,
            tick_ps: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_pairs < 1 {
            return bad("n_pairs must be at least 1".into());
        }
        if !(self.mean_interval_ps > 0.0 && self.mean_interval_ps.is_finite()) {
            return bad(format!("mean_interval_ps must be positive, got {}", self.mean_interval_ps));
        }
        if !(self.jitter_ps >= 0.0 && self.jitter_ps.is_finite()) {
            return bad(format!("jitter_ps must be non-negative, got {}", self.jitter_ps));
        }
        if self.tick_ps <= 0 {
            return bad(format!("tick_ps must be positive, got {}", self.tick_ps));
        }
        let (angles1, angles2) = self.settings.angles();
        if let Some(a) = angles1.iter().chain(&angles2).find(|a| !a.is_finite()) {
            return bad(format!("angle {a} is not finite"));
        }
        if let Some(eff) = &self.efficiency {
            let all = eff.eta1.iter().chain(&eff.eta2).chain(&eff.kappa1).chain(&eff.kappa2);
            if let Some(v) = all.copied().find(|v| !(*v > 0.0 && *v <= 1.0)) {
                return bad(format!("efficiencies must lie in (0, 1], got {v}"));
            }
        }
        match self.outcome_model {
            OutcomeModel::LocalTimetag(p) => {
                if !(p.t0_ps > 0.0 && p.t0_ps.is_finite()) {
                    return bad(format!("t0_ps must be positive, got {}", p.t0_ps));
                }
                if !(p.exponent >= 1.0 && p.exponent.is_finite()) {
                    return bad(format!("exponent must be at least 1, got {}", p.exponent));
                }
            }
            model => {
                for &a in &angles1 {
                    for &b in &angles2 {
                        let m = model.moments(a, b).expect("quantum model");
                        pair_probabilities(&m).map_err(|e| Error::Config(e.to_string()))?;
                    }
                }
            }
        }
        // the last emission must stay far inside i64
        let span = self.n_pairs as f64 * self.mean_interval_ps;
        if span > 1e17 {
            return bad(format!("run length {span:e} ps is too long"));
        }
        Ok(())
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Draws a joint outcome from `P(xy|ab) = (1 + x E1 + y E2 + xy E) / 4`.
pub fn sample_pair_quantum<R: Rng + ?Sized>(
    a: f64,
    b: f64,
    model: &OutcomeModel,
    rng: &mut R,
) -> Result<(Outcome, Outcome)> {
    let m = model
        .moments(a, b)
        .ok_or_else(|| Error::Parameter("the local time-tag model has no joint distribution".into()))?;
    let p = pair_probabilities(&m)?;
    Ok(pick_joint(&p, rng.random()))
}

fn pick_joint(p: &[f64; 4], u: f64) -> (Outcome, Outcome) {
    use Outcome::{Minus, Plus};
    const ORDER: [(Outcome, Outcome); 4] = [(Plus, Plus), (Plus, Minus), (Minus, Plus), (Minus, Minus)];
    let total: f64 = p.iter().sum();
    let mut acc = 0.0;
    for (k, &pk) in p.iter().enumerate().take(3) {
        acc += pk / total;
        if u < acc {
            return ORDER[k];
        }
    }
    ORDER[3]
}

/// One photon of the local time-tag model: outcome and delay for hidden
/// polarization `theta` meeting an analyzer at `setting`.
pub fn local_timetag_event<R: Rng + ?Sized>(
    theta: f64,
    setting: f64,
    params: &LocalParams,
    rng: &mut R,
) -> (Outcome, f64) {
    let phi = theta - setting;
    let x = match params.sign_rule {
        SignRule::Deterministic => {
            if (2.0 * phi).cos() >= 0.0 {
                Outcome::Plus
            } else {
                Outcome::Minus
            }
        }
        SignRule::Malus => {
            let c = phi.cos();
            if rng.random::<f64>() < c * c {
                Outcome::Plus
            } else {
                Outcome::Minus
            }
        }
    };
    let bound = params.t0_ps * (2.0 * phi).sin().abs().powf(2.0 * params.exponent);
    let delay = rng.random::<f64>() * bound;
    (x, delay)
}

struct Station {
    rng: ChaCha8Rng,
    angles: Vec<f64>,
    jitter: Option<Normal<f64>>,
    efficiency: Option<([f64; 2], [f64; 2])>,
    plus_only: bool,
    events: Vec<EventRecord>,
}

impl Station {
    fn choose_setting(&mut self) -> usize {
        if self.angles.len() == 1 {
            0
        } else {
            usize::from(self.rng.random::<bool>())
        }
    }

    fn record(&mut self, emitted: f64, delay: f64, setting: usize, x: Outcome, tick: i64) {
        if let Some((kappa, eta)) = self.efficiency {
            let o = usize::from(x == Outcome::Minus);
            if self.rng.random::<f64>() >= kappa[setting] * eta[o] {
                return;
            }
        }
        let noise = self.jitter.map_or(0.0, |n| n.sample(&mut self.rng));
        if self.plus_only && x == Outcome::Minus {
            return;
        }
        let t = ((emitted + delay + noise) / tick as f64).round() as i64 * tick;
        self.events.push(EventRecord::new(t, setting as u32, x));
    }
}

/// Generates a dataset. Identical configs give identical datasets.
pub fn simulate(cfg: &SimConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (angles1, angles2) = cfg.settings.angles();
    let plus_only = matches!(cfg.settings, Settings::Fixed { plus_only: true, .. });
    let jitter = (cfg.jitter_ps > 0.0).then(|| Normal::new(0.0, cfg.jitter_ps).expect("validated jitter"));
    let station = |id: u8, angles: Vec<f64>| {
        let efficiency = cfg.efficiency.map(|e| if id == 1 { (e.kappa1, e.eta1) } else { (e.kappa2, e.eta2) });
        Station {
            rng: stream(cfg.seed, u64::from(id)),
            angles,
            jitter,
            efficiency,
            plus_only,
            events: Vec::with_capacity(cfg.n_pairs as usize),
        }
    };
    let mut s1 = station(1, angles1);
    let mut s2 = station(2, angles2);
    let mut source = stream(cfg.seed, SOURCE_STREAM);
    let spacing = Exp::new(1.0 / cfg.mean_interval_ps).expect("validated interval");
    let tick = cfg.tick_ps;

    let mut emitted = 0.0;
    for _ in 0..cfg.n_pairs {
        emitted += spacing.sample(&mut source);
        let (i, j) = (s1.choose_setting(), s2.choose_setting());
        let (a, b) = (s1.angles[i], s2.angles[j]);
        let ((x, d1), (y, d2)) = match &cfg.outcome_model {
            OutcomeModel::LocalTimetag(p) => {
                let theta = source.random::<f64>() * TAU;
                (
                    local_timetag_event(theta, a, p, &mut s1.rng),
                    local_timetag_event(theta + FRAC_PI_2, b, p, &mut s2.rng),
                )
            }
            model => {
                let (x, y) = sample_pair_quantum(a, b, model, &mut source)?;
                ((x, 0.0), (y, 0.0))
            }
        };
        s1.record(emitted, d1, i, x, tick);
        s2.record(emitted, d2, j, y, tick);
    }

    let canonical = |s: Station, id: u8| -> Result<StationStream> {
        let angles = s.angles.iter().map(|a| a.rem_euclid(TAU)).map(|a| if a >= TAU { 0.0 } else { a }).collect();
        Ok(StationStream::from_unsorted(id, angles, s.events, tick)?.0)
    };
    let style = match cfg.settings {
        Settings::Switched { .. } => Style::Switched,
        Settings::Fixed { plus_only: true, .. } => Style::FixedRun,
        Settings::Fixed { plus_only: false, .. } => Style::Swept,
    };
    let mut provenance = BTreeMap::new();
    provenance.insert("generator".to_string(), format!("eprb-core {}", env!("CARGO_PKG_VERSION")));
    provenance.insert("sim_config".to_string(), serde_json::to_string(cfg)?);
    Dataset::new(canonical(s1, 1)?, canonical(s2, 2)?, style, provenance)
}
