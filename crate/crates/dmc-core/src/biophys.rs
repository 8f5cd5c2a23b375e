//! Differentiable biophysical crop models.
//!
//! Two process models, each in three forms that must agree:
//!
//! 1. **Reference oracles** (`oracle_gdd`, `oracle_ferguson`): plain
//!    conditional-logic implementations, deliberately independent of
//!    the production code path, used only to cross-check semantics.
//! 2. **Branch-free rollouts** (`gdd_rollout`, `ferguson_rollout`):
//!    arithmetic min/max/mask-select forms that accept per-day
//!    parameters and are differentiable almost everywhere.
//! 3. **Tape composites** (`gdd_tape_rollout`, `ferguson_tape_rollout`):
//!    the same arithmetic recorded on an autodiff [`Tape`] for training.
//!
//! The phenology model accumulates growing degree days and advances
//! through dormant → bud break → bloom → veraison → ripe when the
//! accumulation crosses per-stage temperature sums. The hardiness model
//! (after Ferguson's grape cold-hardiness dynamics) moves the LTE50
//! between a seasonal minimum and maximum by chill-driven acclimation
//! and heat-driven deacclimation, with a one-way endodormancy →
//! ecodormancy switch once enough chill accumulates.
//!
//! Stage transitions are discrete, so phenology training losses use a
//! temperature-smoothed "soft stage": the sum over stages of
//! `sigmoid((cumdd − Θ_k)/τ)`, where `Θ_k` are the *cumulative*
//! thresholds. With static parameters `floor`-ing the soft stage at
//! τ→0 reproduces the hard machine exactly (overshoot carry-over makes
//! stage k trigger precisely when cumdd ≥ Θ_k); with daily parameters
//! it is a smooth approximation that freezes thresholds at the current
//! day's values.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::dataset::{CropKind, CropStateSeries};
use crate::weather::WeatherSeries;

#[derive(Debug, Error)]
pub enum BiophysError {
    #[error("params_seq has length {got}; expected 1 or {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("parameter {name} = {value} outside [{min}, {max}]")]
    OutOfRange { name: String, value: f64, min: f64, max: f64 },
    #[error("bad parameter table: {0}")]
    BadTable(String),
}

/// One named biophysical parameter with its admissible closed range.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub unit: String,
    pub min: f64,
    pub max: f64,
}

impl ParamSpec {
    fn new(name: &str, unit: &str, min: f64, max: f64) -> Self {
        Self { name: name.into(), unit: unit.into(), min, max }
    }

    /// Midpoint of the range.
    pub fn midpoint(&self) -> f64 {
        0.5 * (self.min + self.max)
    }

    /// A parameter with min = max is frozen: rescaling maps every
    /// network output to the same value, so no gradient reaches it.
    pub fn is_frozen(&self) -> bool {
        self.min == self.max
    }
}

/// Ordered parameter table for one model kind; the order defines the
/// layout of parameter vectors and network output columns.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ParamTable {
    pub specs: Vec<ParamSpec>,
}

impl ParamTable {
    /// The degree-day phenology model's seven parameters.
    pub fn gdd() -> Self {
        ParamTable {
            specs: vec![
                ParamSpec::new("tbasem", "degC", 0.0, 15.0),
                ParamSpec::new("teffmx", "degC", 15.0, 45.0),
                ParamSpec::new("tsumem", "degC day", 10.0, 100.0),
                ParamSpec::new("tsum1", "degC day", 100.0, 1000.0),
                ParamSpec::new("tsum2", "degC day", 100.0, 1000.0),
                ParamSpec::new("tsum3", "degC day", 100.0, 1000.0),
                ParamSpec::new("tsum4", "degC day", 100.0, 1000.0),
            ],
        }
    }

    /// The cold-hardiness model's ten parameters. The four rate
    /// parameters are frozen at 0.2 (min = max) per the published
    /// table; widen the range here to make them learnable.
    pub fn ferguson() -> Self {
        ParamTable {
            specs: vec![
                ParamSpec::new("hcinit", "degC", -15.0, 5.0),
                ParamSpec::new("hcmin", "degC", -5.0, 0.0),
                ParamSpec::new("hcmax", "degC", -40.0, -20.0),
                ParamSpec::new("tendo", "degC", 0.0, 10.0),
                ParamSpec::new("teco", "degC", 0.0, 10.0),
                ParamSpec::new("enacclim", "degC/degC", 0.2, 0.2),
                ParamSpec::new("ecacclim", "degC/degC", 0.2, 0.2),
                ParamSpec::new("endeacclim", "degC/degC", 0.2, 0.2),
                ParamSpec::new("ecdeacclim", "degC/degC", 0.2, 0.2),
                ParamSpec::new("ecobound", "degC day", -800.0, -200.0),
            ],
        }
    }

    pub fn for_kind(kind: CropKind) -> Self {
        match kind {
            CropKind::Phenology => Self::gdd(),
            CropKind::Hardiness => Self::ferguson(),
        }
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    /// Row vectors of mins and ranges, for tape rescaling.
    pub fn min_row(&self) -> Array2<f64> {
        Array2::from_shape_vec((1, self.len()), self.specs.iter().map(|s| s.min).collect())
            .unwrap()
    }

    pub fn range_row(&self) -> Array2<f64> {
        Array2::from_shape_vec(
            (1, self.len()),
            self.specs.iter().map(|s| s.max - s.min).collect(),
        )
        .unwrap()
    }

    /// Check a parameter vector against the ranges.
    pub fn validate(&self, values: &[f64]) -> Result<(), BiophysError> {
        for (spec, &v) in self.specs.iter().zip(values) {
            if v < spec.min || v > spec.max {
                return Err(BiophysError::OutOfRange {
                    name: spec.name.clone(),
                    value: v,
                    min: spec.min,
                    max: spec.max,
                });
            }
        }
        Ok(())
    }

    /// Serialize (spec, value) rows as the interchange JSON:
    /// `[{name, unit, min, max, value}, …]`.
    pub fn to_json(&self, values: &[f64]) -> Result<String, BiophysError> {
        if values.len() != self.len() {
            return Err(BiophysError::BadTable(format!(
                "{} values for {} specs",
                values.len(),
                self.len()
            )));
        }
        #[derive(Serialize)]
        struct Row<'a> {
            name: &'a str,
            unit: &'a str,
            min: f64,
            max: f64,
            value: f64,
        }
        let rows: Vec<Row> = self
            .specs
            .iter()
            .zip(values)
            .map(|(s, &value)| Row { name: &s.name, unit: &s.unit, min: s.min, max: s.max, value })
            .collect();
        serde_json::to_string_pretty(&rows).map_err(|e| BiophysError::BadTable(e.to_string()))
    }

    /// Parse the interchange JSON back into (table, values).
    pub fn from_json(text: &str) -> Result<(Self, Vec<f64>), BiophysError> {
        #[derive(Deserialize)]
        struct Row {
            name: String,
            unit: String,
            min: f64,
            max: f64,
            value: f64,
        }
        let rows: Vec<Row> =
            serde_json::from_str(text).map_err(|e| BiophysError::BadTable(e.to_string()))?;
        if rows.is_empty() {
            return Err(BiophysError::BadTable("empty table".into()));
        }
        let mut specs = Vec::with_capacity(rows.len());
        let mut values = Vec::with_capacity(rows.len());
        for r in rows {
            specs.push(ParamSpec { name: r.name, unit: r.unit, min: r.min, max: r.max });
            values.push(r.value);
        }
        Ok((ParamTable { specs }, values))
    }
}

/// Degree-day phenology parameters, in [`ParamTable::gdd`] order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GddParams {
    /// Base temperature `T_b`, °C.
    pub tbasem: f64,
    /// Maximum effective temperature `T_m`, °C (daily dd cap).
    pub teffmx: f64,
    /// Emergence temperature sum, °C·day.
    pub tsumem: f64,
    pub tsum1: f64,
    pub tsum2: f64,
    pub tsum3: f64,
    pub tsum4: f64,
}

impl GddParams {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.tbasem, self.teffmx, self.tsumem, self.tsum1, self.tsum2, self.tsum3, self.tsum4]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        assert_eq!(v.len(), 7, "GddParams takes 7 values");
        Self {
            tbasem: v[0],
            teffmx: v[1],
            tsumem: v[2],
            tsum1: v[3],
            tsum2: v[4],
            tsum3: v[5],
            tsum4: v[6],
        }
    }

    /// Range midpoints — the canonical "uncalibrated" starting point.
    pub fn midpoint() -> Self {
        let t = ParamTable::gdd();
        Self::from_slice(&t.specs.iter().map(|s| s.midpoint()).collect::<Vec<_>>())
    }

    /// Cumulative stage thresholds on the season's degree-day sum:
    /// Θ_1 (bud break) = tsumem + tsum1, then + tsum2, + tsum3, + tsum4.
    pub fn cumulative_thresholds(&self) -> [f64; 4] {
        let t1 = self.tsumem + self.tsum1;
        let t2 = t1 + self.tsum2;
        let t3 = t2 + self.tsum3;
        let t4 = t3 + self.tsum4;
        [t1, t2, t3, t4]
    }

    /// Per-transition threshold out of `stage` (0 = dormant).
    pub fn stage_threshold(&self, stage: u8) -> Option<f64> {
        match stage {
            0 => Some(self.tsumem + self.tsum1),
            1 => Some(self.tsum2),
            2 => Some(self.tsum3),
            3 => Some(self.tsum4),
            _ => None,
        }
    }
}

/// Ferguson cold-hardiness parameters, in [`ParamTable::ferguson`]
/// order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FergusonParams {
    pub hcinit: f64,
    pub hcmin: f64,
    pub hcmax: f64,
    /// Base temperature during endodormancy, °C.
    pub tendo: f64,
    /// Base temperature during ecodormancy, °C.
    pub teco: f64,
    pub enacclim: f64,
    pub ecacclim: f64,
    pub endeacclim: f64,
    pub ecdeacclim: f64,
    /// Chill sum (≤ 0) at which endodormancy ends, °C·day.
    pub ecobound: f64,
}

impl FergusonParams {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.hcinit,
            self.hcmin,
            self.hcmax,
            self.tendo,
            self.teco,
            self.enacclim,
            self.ecacclim,
            self.endeacclim,
            self.ecdeacclim,
            self.ecobound,
        ]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        assert_eq!(v.len(), 10, "FergusonParams takes 10 values");
        Self {
            hcinit: v[0],
            hcmin: v[1],
            hcmax: v[2],
            tendo: v[3],
            teco: v[4],
            enacclim: v[5],
            ecacclim: v[6],
            endeacclim: v[7],
            ecdeacclim: v[8],
            ecobound: v[9],
        }
    }

    pub fn midpoint() -> Self {
        let t = ParamTable::ferguson();
        Self::from_slice(&t.specs.iter().map(|s| s.midpoint()).collect::<Vec<_>>())
    }
}

/// Phenological stages in transition order.
pub const STAGE_NAMES: [&str; 5] = ["dormant", "budbreak", "bloom", "veraison", "ripe"];

/// Number of *observable* transitions (bud break, bloom, veraison);
/// ripening is not field-scored, so labels cap at stage 3.
pub const OBSERVED_TRANSITIONS: usize = 3;

/// Running state of the degree-day stage machine.
#[derive(Clone, Debug, PartialEq)]
pub struct PhenologyState {
    /// 0 = dormant … 4 = ripe.
    pub stage: u8,
    /// Degree days accumulated since the last transition.
    pub dd_accum: f64,
    /// stage → 0-based day index of its onset.
    pub onsets: BTreeMap<u8, usize>,
}

impl Default for PhenologyState {
    fn default() -> Self {
        Self { stage: 0, dd_accum: 0.0, onsets: BTreeMap::new() }
    }
}

/// Running state of the hardiness dynamics.
#[derive(Clone, Debug, PartialEq)]
pub struct HardinessState {
    /// Current LTE50, °C.
    pub hc: f64,
    /// Accumulated chilling units, ≤ 0.
    pub chill_sum: f64,
    /// true while in endodormancy.
    pub endodormant: bool,
}

impl HardinessState {
    pub fn new(p: &FergusonParams) -> Self {
        Self { hc: p.hcinit, chill_sum: 0.0, endodormant: true }
    }
}

/// Daily degree-day response: `clamp(tmean − tbasem, 0, teffmx)`,
/// written as arithmetic min/max so it differentiates almost
/// everywhere.
pub fn gdd_response(tmean: f64, p: &GddParams) -> f64 {
    (tmean - p.tbasem).max(0.0).min(p.teffmx)
}

/// Advance the stage machine by one day. Parameters may differ per
/// call (daily reparameterization); the transition threshold is read
/// from *today's* parameters. On a crossing the accumulator keeps the
/// overshoot so coarse daily steps do not bias onsets late.
pub fn gdd_step(state: &mut PhenologyState, p: &GddParams, tmean: f64, day: usize) {
    state.dd_accum += gdd_response(tmean, p);
    while let Some(threshold) = p.stage_threshold(state.stage) {
        if state.dd_accum < threshold {
            break;
        }
        state.dd_accum -= threshold;
        state.stage += 1;
        state.onsets.insert(state.stage, day);
    }
}

/// Advance the hardiness dynamics by one day. Acclimation is driven by
/// chill below the phase's base temperature, deacclimation by heat
/// above it, each scaled by the normalized distance to the relevant
/// hardiness bound; the phase flips endo → eco exactly once, when the
/// chill sum reaches `ecobound`, taking effect the next day.
pub fn ferguson_step(state: &mut HardinessState, p: &FergusonParams, tmean: f64) {
    // Phase-dependent constants, selected by multiplication so the
    // arithmetic matches the tape composite exactly.
    let e = if state.endodormant { 1.0 } else { 0.0 };
    let t_base = e * p.tendo + (1.0 - e) * p.teco;
    let k_a = e * p.enacclim + (1.0 - e) * p.ecacclim;
    let k_d = e * p.endeacclim + (1.0 - e) * p.ecdeacclim;

    let x = tmean - t_base;
    let dd_c = x.min(0.0);
    let dd_h = x.max(0.0);

    let span = p.hcmin - p.hcmax;
    let acclim_weight = 1.0 - (state.hc - p.hcmax) / span;
    let deacclim_weight = 1.0 - (p.hcmin - state.hc) / span;
    let delta = k_a * dd_c * acclim_weight + k_d * dd_h * deacclim_weight;

    state.hc = (state.hc + delta).max(p.hcmax).min(p.hcmin);
    state.chill_sum += dd_c;
    if state.endodormant && state.chill_sum <= p.ecobound {
        state.endodormant = false;
    }
}

fn check_len(params_len: usize, days: usize) -> Result<(), BiophysError> {
    if params_len == 1 || params_len == days {
        Ok(())
    } else {
        Err(BiophysError::LengthMismatch { got: params_len, expected: days })
    }
}

/// Roll the stage machine over a season of daily mean temperatures.
/// `params` holds either one static parameter set or one per day.
pub fn gdd_rollout_tmean(
    tmean: &[f64],
    params: &[GddParams],
) -> Result<CropStateSeries, BiophysError> {
    check_len(params.len(), tmean.len())?;
    let mut state = PhenologyState::default();
    let mut values = Vec::with_capacity(tmean.len());
    for (day, &t) in tmean.iter().enumerate() {
        let p = if params.len() == 1 { &params[0] } else { &params[day] };
        gdd_step(&mut state, p, t, day);
        values.push(state.stage as f64);
    }
    let mut series = CropStateSeries::dense(CropKind::Phenology, values);
    series.onsets = state.onsets;
    Ok(series)
}

/// [`gdd_rollout_tmean`] over a weather series.
pub fn gdd_rollout(
    weather: &WeatherSeries,
    params: &[GddParams],
) -> Result<CropStateSeries, BiophysError> {
    gdd_rollout_tmean(&weather.tmean(), params)
}

/// Roll the hardiness dynamics over a season. Day t's value is the
/// LTE50 after t's update. The initial LTE50 is `hcinit` from the
/// first day's parameters.
pub fn ferguson_rollout_tmean(
    tmean: &[f64],
    params: &[FergusonParams],
) -> Result<CropStateSeries, BiophysError> {
    check_len(params.len(), tmean.len())?;
    let mut state = HardinessState::new(&params[0]);
    let mut values = Vec::with_capacity(tmean.len());
    for (day, &t) in tmean.iter().enumerate() {
        let p = if params.len() == 1 { &params[0] } else { &params[day] };
        ferguson_step(&mut state, p, t);
        values.push(state.hc);
    }
    Ok(CropStateSeries::dense(CropKind::Hardiness, values))
}

/// [`ferguson_rollout_tmean`] over a weather series.
pub fn ferguson_rollout(
    weather: &WeatherSeries,
    params: &[FergusonParams],
) -> Result<CropStateSeries, BiophysError> {
    ferguson_rollout_tmean(&weather.tmean(), params)
}

// ---------------------------------------------------------------------------
// Reference oracles: independent conditional-logic implementations used
// to cross-check the branch-free forms. Kept deliberately naive.
// ---------------------------------------------------------------------------

/// Conditional-logic phenology reference (static parameters only).
pub fn oracle_gdd(tmean: &[f64], p: &GddParams) -> CropStateSeries {
    let mut stage: u8 = 0;
    let mut acc = 0.0;
    let mut onsets = BTreeMap::new();
    let mut values = Vec::with_capacity(tmean.len());
    for (day, &t) in tmean.iter().enumerate() {
        let dd = if t <= p.tbasem {
            0.0
        } else if t - p.tbasem >= p.teffmx {
            p.teffmx
        } else {
            t - p.tbasem
        };
        acc += dd;
        loop {
            let threshold = match stage {
                0 => p.tsumem + p.tsum1,
                1 => p.tsum2,
                2 => p.tsum3,
                3 => p.tsum4,
                _ => break,
            };
            if acc >= threshold {
                acc -= threshold;
                stage += 1;
                onsets.insert(stage, day);
            } else {
                break;
            }
        }
        values.push(stage as f64);
    }
    let mut series = CropStateSeries::dense(CropKind::Phenology, values);
    series.onsets = onsets;
    series
}

/// Conditional-logic hardiness reference (static parameters only).
pub fn oracle_ferguson(tmean: &[f64], p: &FergusonParams) -> CropStateSeries {
    let mut hc = p.hcinit;
    let mut chill = 0.0;
    let mut endo = true;
    let mut values = Vec::with_capacity(tmean.len());
    for &t in tmean {
        let t_base = if endo { p.tendo } else { p.teco };
        let k_a = if endo { p.enacclim } else { p.ecacclim };
        let k_d = if endo { p.endeacclim } else { p.ecdeacclim };
        let x = t - t_base;
        let dd_c = if x < 0.0 { x } else { 0.0 };
        let dd_h = if x > 0.0 { x } else { 0.0 };
        let span = p.hcmin - p.hcmax;
        let delta = k_a * dd_c * (1.0 - (hc - p.hcmax) / span)
            + k_d * dd_h * (1.0 - (p.hcmin - hc) / span);
        hc += delta;
        if hc < p.hcmax {
            hc = p.hcmax;
        }
        if hc > p.hcmin {
            hc = p.hcmin;
        }
        chill += dd_c;
        if endo && chill <= p.ecobound {
            endo = false;
        }
        values.push(hc);
    }
    CropStateSeries::dense(CropKind::Hardiness, values)
}

// ---------------------------------------------------------------------------
// Tape composites
// ---------------------------------------------------------------------------

/// Column indices of the GDD parameters in an ω matrix.
pub mod gdd_col {
    pub const TBASEM: usize = 0;
    pub const TEFFMX: usize = 1;
    pub const TSUMEM: usize = 2;
    pub const TSUM1: usize = 3;
    pub const TSUM2: usize = 4;
    pub const TSUM3: usize = 5;
    pub const TSUM4: usize = 6;
}

/// Column indices of the Ferguson parameters in an ω matrix.
pub mod ferguson_col {
    pub const HCINIT: usize = 0;
    pub const HCMIN: usize = 1;
    pub const HCMAX: usize = 2;
    pub const TENDO: usize = 3;
    pub const TECO: usize = 4;
    pub const ENACCLIM: usize = 5;
    pub const ECACCLIM: usize = 6;
    pub const ENDEACCLIM: usize = 7;
    pub const ECDEACCLIM: usize = 8;
    pub const ECOBOUND: usize = 9;
}

/// Per-day parameter input to a tape rollout: one ω for every day, or
/// a single static ω. Each ω is a Var of shape Bx7 / Bx10 (or 1xN,
/// broadcast over the batch).
pub enum OmegaSeq<'a> {
    Static(Var),
    Daily(&'a [Var]),
}

impl OmegaSeq<'_> {
    fn at(&self, day: usize) -> Var {
        match self {
            OmegaSeq::Static(v) => *v,
            OmegaSeq::Daily(vs) => vs[day],
        }
    }

    fn check(&self, days: usize) -> Result<(), BiophysError> {
        match self {
            OmegaSeq::Static(_) => Ok(()),
            OmegaSeq::Daily(vs) => check_len(vs.len(), days),
        }
    }
}

/// Output of a differentiable phenology rollout.
pub struct GddTapeRollout {
    /// Per-day soft stage, each Bx1, in [0, 3] (three observable
    /// transitions; see [`OBSERVED_TRANSITIONS`]).
    pub soft_stage: Vec<Var>,
    /// Per-day cumulative degree days, each Bx1.
    pub cumdd: Vec<Var>,
    /// Per-day soft indicators σ((cumdd − Θ_k)/τ), one per observable
    /// transition, each Bx1. Their sum is `soft_stage`; summing
    /// (1 − indicator) over days gives a differentiable onset day.
    pub stage_ind: Vec<[Var; OBSERVED_TRANSITIONS]>,
}

/// Day-at-a-time builder for the differentiable phenology rollout.
/// Holds the running degree-day sum as a tape node so callers can
/// interleave their own graph work (feedback models, per-day losses)
/// between steps; [`gdd_tape_rollout`] is a plain loop over it.
pub struct GddTapeStep {
    zero: Var,
    cumdd: Var,
}

impl GddTapeStep {
    pub fn new(tape: &mut Tape, batch: usize) -> Self {
        let zero = tape.constant(Array2::zeros((batch, 1)));
        GddTapeStep { zero, cumdd: zero }
    }

    /// Cumulative degree days so far (Bx1).
    pub fn cumdd(&self) -> Var {
        self.cumdd
    }

    /// Advance one day under `omega` (Bx7 or 1x7) and the day's mean
    /// temperatures `t` (Bx1 constant). Pass hoisted `thresholds` when
    /// ω is static so the Θ_k subgraph is built once; `None` recomputes
    /// them from `omega`. Returns the soft stage and its per-transition
    /// indicators.
    pub fn day(
        &mut self,
        tape: &mut Tape,
        omega: Var,
        thresholds: Option<&[Var; 4]>,
        t: Var,
        tau: f64,
    ) -> (Var, [Var; OBSERVED_TRANSITIONS]) {
        // dd = min(max(tmean - tbasem, 0), teffmx)
        let tbasem = tape.col(omega, gdd_col::TBASEM);
        let teffmx = tape.col(omega, gdd_col::TEFFMX);
        let x = tape.sub(t, tbasem);
        let lo = tape.maximum(x, self.zero);
        let dd = tape.minimum(lo, teffmx);
        self.cumdd = tape.add(self.cumdd, dd);

        let thresholds = match thresholds {
            Some(t) => *t,
            None => cumulative_threshold_vars(tape, omega),
        };
        // soft stage = Σ_k σ((cumdd − Θ_k)/τ) over the observable
        // transitions.
        let mut soft: Option<Var> = None;
        let mut inds = [Var::default(); OBSERVED_TRANSITIONS];
        for (k, theta) in thresholds.iter().take(OBSERVED_TRANSITIONS).enumerate() {
            let diff = tape.sub(self.cumdd, *theta);
            let scaled = tape.mul_scalar(diff, 1.0 / tau);
            let term = tape.sigmoid(scaled);
            inds[k] = term;
            soft = Some(match soft {
                Some(s) => tape.add(s, term),
                None => term,
            });
        }
        (soft.expect("at least one transition"), inds)
    }
}

/// Differentiable phenology rollout. `tmean` is (batch, days); `tau`
/// (°C·day) is the sigmoid temperature of the soft stage — large τ
/// spreads gradient across the season, small τ approaches the hard
/// machine.
pub fn gdd_tape_rollout(
    tape: &mut Tape,
    omegas: &OmegaSeq,
    tmean: &Array2<f64>,
    tau: f64,
) -> Result<GddTapeRollout, BiophysError> {
    let (batch, days) = tmean.dim();
    omegas.check(days)?;
    assert!(tau > 0.0, "soft-stage temperature must be positive");

    let mut soft_stage = Vec::with_capacity(days);
    let mut cumdd_trace = Vec::with_capacity(days);
    let mut stage_ind = Vec::with_capacity(days);
    let mut step = GddTapeStep::new(tape, batch);

    // For a static ω the thresholds are loop constants; hoist them.
    let static_thresholds = match omegas {
        OmegaSeq::Static(omega) => Some(cumulative_threshold_vars(tape, *omega)),
        OmegaSeq::Daily(_) => None,
    };

    for day in 0..days {
        let omega = omegas.at(day);
        let t = tape.constant(Array2::from_shape_fn((batch, 1), |(b, _)| tmean[[b, day]]));
        let (soft, inds) = step.day(tape, omega, static_thresholds.as_ref(), t, tau);
        cumdd_trace.push(step.cumdd());
        stage_ind.push(inds);
        soft_stage.push(soft);
    }
    Ok(GddTapeRollout { soft_stage, cumdd: cumdd_trace, stage_ind })
}

/// Θ_k as tape Vars from an ω (Bx7): cumulative sums of the stage
/// temperature thresholds.
pub fn cumulative_threshold_vars(tape: &mut Tape, omega: Var) -> [Var; 4] {
    let tsumem = tape.col(omega, gdd_col::TSUMEM);
    let tsum1 = tape.col(omega, gdd_col::TSUM1);
    let tsum2 = tape.col(omega, gdd_col::TSUM2);
    let tsum3 = tape.col(omega, gdd_col::TSUM3);
    let tsum4 = tape.col(omega, gdd_col::TSUM4);
    let t1 = tape.add(tsumem, tsum1);
    let t2 = tape.add(t1, tsum2);
    let t3 = tape.add(t2, tsum3);
    let t4 = tape.add(t3, tsum4);
    [t1, t2, t3, t4]
}

/// Output of a differentiable hardiness rollout.
pub struct FergusonTapeRollout {
    /// Per-day LTE50, each Bx1.
    pub hc: Vec<Var>,
}

/// Day-at-a-time builder for the differentiable hardiness rollout.
/// The endo/eco phase and the chill sum depend on parameters only
/// through an inequality, so they carry no gradient and are tracked as
/// plain per-row values; each day's phase enters the tape as a
/// constant select mask. [`ferguson_tape_rollout`] is a plain loop
/// over this.
pub struct FergusonTapeStep {
    batch: usize,
    zero: Var,
    hc: Var,
    chill: Vec<f64>,
    endo: Vec<f64>,
}

impl FergusonTapeStep {
    /// `first_omega` provides the initial hardiness (HCINIT column).
    pub fn new(tape: &mut Tape, first_omega: Var, batch: usize) -> Self {
        let hcinit = tape.col(first_omega, ferguson_col::HCINIT);
        let hc = if tape.value(hcinit).nrows() == batch {
            hcinit
        } else {
            tape.broadcast_rows(hcinit, batch)
        };
        let zero = tape.constant(Array2::zeros((batch, 1)));
        FergusonTapeStep { batch, zero, hc, chill: vec![0.0; batch], endo: vec![1.0; batch] }
    }

    /// Current LTE50 (Bx1).
    pub fn hc(&self) -> Var {
        self.hc
    }

    /// Advance one day under `omega` (Bx10 or 1x10) and the day's mean
    /// temperatures `t` (Bx1 constant); returns the updated LTE50.
    pub fn day(&mut self, tape: &mut Tape, omega: Var, t: Var) -> Var {
        let batch = self.batch;
        let col = |tape: &mut Tape, idx: usize| -> Var {
            let c = tape.col(omega, idx);
            if tape.value(c).nrows() == batch {
                c
            } else {
                tape.broadcast_rows(c, batch)
            }
        };
        let tendo = col(tape, ferguson_col::TENDO);
        let teco = col(tape, ferguson_col::TECO);
        let enac = col(tape, ferguson_col::ENACCLIM);
        let ecac = col(tape, ferguson_col::ECACCLIM);
        let ende = col(tape, ferguson_col::ENDEACCLIM);
        let ecde = col(tape, ferguson_col::ECDEACCLIM);
        let hcmin = col(tape, ferguson_col::HCMIN);
        let hcmax = col(tape, ferguson_col::HCMAX);

        let phase = Array2::from_shape_fn((batch, 1), |(b, _)| self.endo[b]);
        let t_base = tape.where_mask(phase.clone(), tendo, teco);
        let k_a = tape.where_mask(phase.clone(), enac, ecac);
        let k_d = tape.where_mask(phase, ende, ecde);

        let x = tape.sub(t, t_base);
        let dd_c = tape.minimum(x, self.zero);
        let dd_h = tape.maximum(x, self.zero);

        let span = tape.sub(hcmin, hcmax);
        let from_max = tape.sub(self.hc, hcmax);
        let frac_a = tape.div(from_max, span);
        let acclim_weight = tape.sub_from_scalar(frac_a, 1.0);
        let from_min = tape.sub(hcmin, self.hc);
        let frac_d = tape.div(from_min, span);
        let deacclim_weight = tape.sub_from_scalar(frac_d, 1.0);

        let a_term0 = tape.mul(k_a, dd_c);
        let a_term = tape.mul(a_term0, acclim_weight);
        let d_term0 = tape.mul(k_d, dd_h);
        let d_term = tape.mul(d_term0, deacclim_weight);
        let delta = tape.add(a_term, d_term);

        let next = tape.add(self.hc, delta);
        let clamped_lo = tape.maximum(next, hcmax);
        self.hc = tape.minimum(clamped_lo, hcmin);

        // Chill bookkeeping and the one-way phase flip live outside the
        // gradient: thresholds only gate, they don't scale.
        let ecobound = tape.value(omega);
        let eco_col = if ecobound.nrows() == batch {
            (0..batch).map(|b| ecobound[[b, ferguson_col::ECOBOUND]]).collect::<Vec<_>>()
        } else {
            vec![ecobound[[0, ferguson_col::ECOBOUND]]; batch]
        };
        let dd_c_vals = tape.value(dd_c).clone();
        for b in 0..batch {
            self.chill[b] += dd_c_vals[[b, 0]];
            if self.endo[b] == 1.0 && self.chill[b] <= eco_col[b] {
                self.endo[b] = 0.0;
            }
        }
        self.hc
    }
}

/// Differentiable hardiness rollout; see [`FergusonTapeStep`] for the
/// phase handling.
pub fn ferguson_tape_rollout(
    tape: &mut Tape,
    omegas: &OmegaSeq,
    tmean: &Array2<f64>,
) -> Result<FergusonTapeRollout, BiophysError> {
    let (batch, days) = tmean.dim();
    omegas.check(days)?;

    let mut hc_trace = Vec::with_capacity(days);
    let mut step = FergusonTapeStep::new(tape, omegas.at(0), batch);
    for day in 0..days {
        let omega = omegas.at(day);
        let t = tape.constant(Array2::from_shape_fn((batch, 1), |(b, _)| tmean[[b, day]]));
        hc_trace.push(step.day(tape, omega, t));
    }
    Ok(FergusonTapeRollout { hc: hc_trace })
}

/// Harden a soft stage value: largest transition count whose sigmoid
/// has crossed 1/2, i.e. `floor(soft + 1/2)` capped to the observable
/// range. Used only for quick diagnostics — real predictions come from
/// the hard machine.
pub fn harden_soft_stage(soft: f64) -> u8 {
    (soft + 0.5).floor().clamp(0.0, OBSERVED_TRANSITIONS as f64) as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn constant_tmean(t: f64, days: usize) -> Vec<f64> {
        vec![t; days]
    }

    #[test]
    fn gdd_response_matches_hand_values() {
        let p = GddParams {
            tbasem: 10.0,
            teffmx: 30.0,
            tsumem: 10.0,
            tsum1: 100.0,
            tsum2: 100.0,
            tsum3: 100.0,
            tsum4: 100.0,
        };
        assert_eq!(gdd_response(25.0, &p), 15.0);
        assert_eq!(gdd_response(10.0, &p), 0.0);
        assert_eq!(gdd_response(3.0, &p), 0.0);
        let hot = GddParams { tbasem: 0.0, ..p };
        assert_eq!(gdd_response(50.0, &hot), 30.0);
    }

    #[test]
    fn constant_warmth_crosses_budbreak_on_day_ten() {
        // 10 °C·day per day against a pooled bud-break threshold of 100
        // reaches 100 on the 10th day (index 9).
        let p = GddParams {
            tbasem: 10.0,
            teffmx: 30.0,
            tsumem: 10.0,
            tsum1: 90.0,
            tsum2: 500.0,
            tsum3: 500.0,
            tsum4: 500.0,
        };
        let series = gdd_rollout_tmean(&constant_tmean(20.0, 30), &[p]).unwrap();
        assert_eq!(series.onsets.get(&1), Some(&9));
        assert_eq!(series.values[8], 0.0);
        assert_eq!(series.values[9], 1.0);
    }

    #[test]
    fn cold_season_stays_dormant() {
        let p = GddParams {
            tbasem: 10.0,
            teffmx: 30.0,
            tsumem: 10.0,
            tsum1: 100.0,
            tsum2: 100.0,
            tsum3: 100.0,
            tsum4: 100.0,
        };
        let series = gdd_rollout_tmean(&constant_tmean(5.0, 100), &[p]).unwrap();
        assert!(series.values.iter().all(|&v| v == 0.0));
        assert!(series.onsets.is_empty());
    }

    #[test]
    fn overshoot_carries_into_next_stage() {
        // Day contributions of 30: threshold 100 crossed on day 4 (idx 3)
        // with cumdd 120, leaving 20 toward tsum2.
        let p = GddParams {
            tbasem: 0.0,
            teffmx: 45.0,
            tsumem: 10.0,
            tsum1: 90.0,
            tsum2: 110.0,
            tsum3: 500.0,
            tsum4: 500.0,
        };
        let series = gdd_rollout_tmean(&constant_tmean(30.0, 10), &[p]).unwrap();
        assert_eq!(series.onsets.get(&1), Some(&3));
        // Remaining 20 + 30/day reaches 110 three days later (idx 6).
        assert_eq!(series.onsets.get(&2), Some(&6));
    }

    #[test]
    fn rollout_errors_on_bad_params_length() {
        let p = GddParams::midpoint();
        let err = gdd_rollout_tmean(&constant_tmean(20.0, 10), &[p; 3]).unwrap_err();
        assert!(matches!(err, BiophysError::LengthMismatch { got: 3, expected: 10 }));
    }

    #[test]
    fn constant_daily_params_match_static() {
        let p = GddParams::midpoint();
        let tmean: Vec<f64> = (0..120).map(|d| 12.0 + 10.0 * (d as f64 / 20.0).sin()).collect();
        let a = gdd_rollout_tmean(&tmean, &[p]).unwrap();
        let b = gdd_rollout_tmean(&tmean, &vec![p; 120]).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.onsets, b.onsets);

        let f = FergusonParams::midpoint();
        let cold: Vec<f64> = (0..150).map(|d| 5.0 - 10.0 * (d as f64 / 30.0).sin()).collect();
        let x = ferguson_rollout_tmean(&cold, &[f]).unwrap();
        let y = ferguson_rollout_tmean(&cold, &vec![f; 150]).unwrap();
        assert_eq!(x.values, y.values);
    }

    #[test]
    fn ferguson_boundary_saturation() {
        let mut p = FergusonParams::midpoint();
        p.hcmin = -2.0;
        p.hcmax = -30.0;
        p.tendo = 5.0;

        // At the hcmax boundary a cold day changes nothing.
        let mut s = HardinessState { hc: -30.0, chill_sum: 0.0, endodormant: true };
        ferguson_step(&mut s, &p, -10.0);
        assert_eq!(s.hc, -30.0);

        // At the hcmin boundary a warm day changes nothing.
        let mut s = HardinessState { hc: -2.0, chill_sum: 0.0, endodormant: true };
        ferguson_step(&mut s, &p, 20.0);
        assert_eq!(s.hc, -2.0);
    }

    #[test]
    fn ferguson_midway_cold_day_matches_hand_value() {
        // hc midway: acclimation weight = 0.5; tmean 5 °C below base with
        // k_a = 0.2 gives ΔH_c = 0.2 · (−5) · 0.5 = −0.5.
        let p = FergusonParams {
            hcinit: -16.0,
            hcmin: -2.0,
            hcmax: -30.0,
            tendo: 5.0,
            teco: 5.0,
            enacclim: 0.2,
            ecacclim: 0.2,
            endeacclim: 0.2,
            ecdeacclim: 0.2,
            ecobound: -500.0,
        };
        let mut s = HardinessState { hc: -16.0, chill_sum: 0.0, endodormant: true };
        ferguson_step(&mut s, &p, 0.0);
        assert!((s.hc - (-16.5)).abs() < 1e-12);
    }

    #[test]
    fn phase_flips_exactly_once() {
        let mut p = FergusonParams::midpoint();
        p.ecobound = -200.0;
        p.tendo = 6.0;
        p.teco = 6.0;
        let tmean = constant_tmean(-4.0, 60); // 10 chill units per day
        let mut state = HardinessState::new(&p);
        let mut flips = 0;
        let mut was_endo = state.endodormant;
        for &t in &tmean {
            ferguson_step(&mut state, &p, t);
            if was_endo != state.endodormant {
                flips += 1;
                was_endo = state.endodormant;
            }
        }
        assert_eq!(flips, 1);
        assert!(!state.endodormant);
        // Flip happened when chill reached -200: day 19 (0-based), since
        // chill hits -200 after 20 days of -10.
        assert!(state.chill_sum <= -200.0);
    }

    fn random_gdd(rng: &mut ChaCha20Rng) -> GddParams {
        let t = ParamTable::gdd();
        let v: Vec<f64> = t
            .specs
            .iter()
            .map(|s| s.min + rng.random::<f64>() * (s.max - s.min))
            .collect();
        GddParams::from_slice(&v)
    }

    fn random_ferguson(rng: &mut ChaCha20Rng) -> FergusonParams {
        let t = ParamTable::ferguson();
        let v: Vec<f64> = t
            .specs
            .iter()
            .map(|s| s.min + rng.random::<f64>() * (s.max - s.min))
            .collect();
        FergusonParams::from_slice(&v)
    }

    fn random_season(rng: &mut ChaCha20Rng, days: usize, base: f64, swing: f64) -> Vec<f64> {
        (0..days)
            .map(|d| {
                base + swing * (d as f64 / days as f64 * std::f64::consts::PI).sin()
                    + 4.0 * (rng.random::<f64>() - 0.5)
            })
            .collect()
    }

    #[test]
    fn fuzzed_oracle_equivalence() {
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        for _ in 0..25 {
            let p = random_gdd(&mut rng);
            let tmean = random_season(&mut rng, 250, 8.0, 18.0);
            let ours = gdd_rollout_tmean(&tmean, &[p]).unwrap();
            let reference = oracle_gdd(&tmean, &p);
            assert_eq!(ours.onsets, reference.onsets);
            assert_eq!(ours.values, reference.values);

            let f = random_ferguson(&mut rng);
            let cold = random_season(&mut rng, 251, 2.0, -10.0);
            let ours = ferguson_rollout_tmean(&cold, &[f]).unwrap();
            let reference = oracle_ferguson(&cold, &f);
            for (a, b) in ours.values.iter().zip(&reference.values) {
                assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn empty_and_single_day_seasons() {
        let p = GddParams::midpoint();
        let empty = oracle_gdd(&[], &p);
        assert!(empty.values.is_empty() && empty.onsets.is_empty());
        let one = oracle_gdd(&[20.0], &p);
        assert_eq!(one.values.len(), 1);

        let f = FergusonParams::midpoint();
        let empty = oracle_ferguson(&[], &f);
        assert!(empty.values.is_empty());
        let one = oracle_ferguson(&[-5.0], &f);
        assert_eq!(one.values.len(), 1);
    }

    #[test]
    fn stage_sequence_is_monotone() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..20 {
            let p = random_gdd(&mut rng);
            let tmean = random_season(&mut rng, 250, 10.0, 15.0);
            let series = gdd_rollout_tmean(&tmean, &[p]).unwrap();
            for w in series.values.windows(2) {
                assert!(w[0] <= w[1]);
            }
        }
    }

    #[test]
    fn hardiness_stays_bounded() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        for _ in 0..20 {
            let p = random_ferguson(&mut rng);
            let tmean = random_season(&mut rng, 251, 0.0, -12.0);
            let series = ferguson_rollout_tmean(&tmean, &[p]).unwrap();
            for &hc in &series.values {
                assert!(hc >= p.hcmax - 1e-12 && hc <= p.hcmin + 1e-12);
            }
        }
    }

    #[test]
    fn param_table_json_round_trip() {
        let table = ParamTable::gdd();
        let values = GddParams::midpoint().to_vec();
        let json = table.to_json(&values).unwrap();
        let (back_table, back_values) = ParamTable::from_json(&json).unwrap();
        assert_eq!(table, back_table);
        assert_eq!(values, back_values);
        assert!(json.contains("\"unit\""));
    }

    #[test]
    fn validate_rejects_out_of_range() {
        let table = ParamTable::gdd();
        let mut values = GddParams::midpoint().to_vec();
        values[0] = 20.0; // tbasem beyond 15
        assert!(matches!(
            table.validate(&values),
            Err(BiophysError::OutOfRange { .. })
        ));
    }

    // -- tape composites ----------------------------------------------------

    fn omega_row(p: &GddParams) -> Array2<f64> {
        Array2::from_shape_vec((1, 7), p.to_vec()).unwrap()
    }

    fn ferguson_omega_row(p: &FergusonParams) -> Array2<f64> {
        Array2::from_shape_vec((1, 10), p.to_vec()).unwrap()
    }

    #[test]
    fn sharp_soft_stage_matches_hard_machine_off_transition_days() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        for _ in 0..5 {
            let p = random_gdd(&mut rng);
            let tmean_vec = random_season(&mut rng, 250, 10.0, 14.0);
            let hard = gdd_rollout_tmean(&tmean_vec, &[p]).unwrap();

            let mut tape = Tape::new();
            let omega = tape.leaf(omega_row(&p));
            let tmean = Array2::from_shape_vec((1, 250), tmean_vec.clone()).unwrap();
            let out =
                gdd_tape_rollout(&mut tape, &OmegaSeq::Static(omega), &tmean, 0.05).unwrap();

            for (day, soft) in out.soft_stage.iter().enumerate() {
                let s = tape.value(*soft)[[0, 0]];
                let hardened = harden_soft_stage(s) as f64;
                let truth = hard.values[day].min(OBSERVED_TRANSITIONS as f64);
                // With τ = 0.05 °C·day the sigmoids are razor sharp; only
                // a day that lands within ~0.5 °C·day of a threshold can
                // differ, which the random draw makes vanishingly rare.
                assert!(
                    (hardened - truth).abs() <= 1.0,
                    "day {day}: soft {s} vs hard {truth}"
                );
            }
            // Onset days recovered from the sharpened soft stage match
            // the hard machine exactly when no threshold tie occurs.
            for k in 1..=3u8 {
                let hard_onset = hard.values.iter().position(|&v| v >= k as f64);
                let soft_onset = out
                    .soft_stage
                    .iter()
                    .position(|v| harden_soft_stage(tape.value(*v)[[0, 0]]) >= k);
                assert_eq!(hard_onset, soft_onset, "stage {k}");
            }
        }
    }

    #[test]
    fn ferguson_tape_matches_plain_rollout() {
        let mut rng = ChaCha20Rng::seed_from_u64(22);
        for _ in 0..5 {
            let p = random_ferguson(&mut rng);
            let tmean_vec = random_season(&mut rng, 180, 0.0, -12.0);
            let plain = ferguson_rollout_tmean(&tmean_vec, &[p]).unwrap();

            let mut tape = Tape::new();
            let omega = tape.leaf(ferguson_omega_row(&p));
            let tmean = Array2::from_shape_vec((1, 180), tmean_vec.clone()).unwrap();
            let out =
                ferguson_tape_rollout(&mut tape, &OmegaSeq::Static(omega), &tmean).unwrap();

            for (day, hc) in out.hc.iter().enumerate() {
                let a = tape.value(*hc)[[0, 0]];
                let b = plain.values[day];
                assert!((a - b).abs() <= 1e-12, "day {day}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn ferguson_tape_batch_rows_are_independent_seasons() {
        let p = FergusonParams::midpoint();
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let season_a = random_season(&mut rng, 90, 2.0, -10.0);
        let season_b = random_season(&mut rng, 90, -2.0, -8.0);

        let mut tape = Tape::new();
        let omega = tape.leaf(ferguson_omega_row(&p));
        let mut tmean = Array2::zeros((2, 90));
        for d in 0..90 {
            tmean[[0, d]] = season_a[d];
            tmean[[1, d]] = season_b[d];
        }
        let out = ferguson_tape_rollout(&mut tape, &OmegaSeq::Static(omega), &tmean).unwrap();

        let solo_a = ferguson_rollout_tmean(&season_a, &[p]).unwrap();
        let solo_b = ferguson_rollout_tmean(&season_b, &[p]).unwrap();
        for day in 0..90 {
            let batch = tape.value(out.hc[day]);
            assert!((batch[[0, 0]] - solo_a.values[day]).abs() <= 1e-12);
            assert!((batch[[1, 0]] - solo_b.values[day]).abs() <= 1e-12);
        }
    }

    /// Central finite difference of a scalar loss w.r.t. one ω entry.
    /// The fixture keeps every stage threshold inside the season's
    /// degree-day range so all parameters carry live gradients.
    fn fd_vs_ad_gdd(col: usize) {
        let p = GddParams {
            tbasem: 7.5,
            teffmx: 30.0,
            tsumem: 10.0,
            tsum1: 100.0,
            tsum2: 200.0,
            tsum3: 300.0,
            tsum4: 500.0,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let tmean_vec = random_season(&mut rng, 60, 16.0, 10.0);
        let tmean = Array2::from_shape_vec((1, 60), tmean_vec).unwrap();

        let build = |tape: &mut Tape, values: Vec<f64>| -> Var {
            let omega = tape.leaf(Array2::from_shape_vec((1, 7), values).unwrap());
            let out = gdd_tape_rollout(tape, &OmegaSeq::Static(omega), &tmean, 20.0).unwrap();
            let stacked = tape.concat_cols(&out.soft_stage);
            let sq = tape.square(stacked);
            tape.mean_all(sq)
        };

        // AD gradient.
        let mut tape = Tape::new();
        let omega_values = p.to_vec();
        let omega = tape.leaf(Array2::from_shape_vec((1, 7), omega_values.clone()).unwrap());
        let out = gdd_tape_rollout(&mut tape, &OmegaSeq::Static(omega), &tmean, 20.0).unwrap();
        let stacked = tape.concat_cols(&out.soft_stage);
        let sq = tape.square(stacked);
        let root = tape.mean_all(sq);
        let grads = tape.backward(root);
        let ad = grads.get(omega).unwrap()[[0, col]];

        let eps = 1e-4;
        let mut up = omega_values.clone();
        up[col] += eps;
        let mut down = omega_values;
        down[col] -= eps;
        let mut t_up = Tape::new();
        let r_up = build(&mut t_up, up);
        let mut t_down = Tape::new();
        let r_down = build(&mut t_down, down);
        let fd = (t_up.value(r_up)[[0, 0]] - t_down.value(r_down)[[0, 0]]) / (2.0 * eps);
        let rel = (ad - fd).abs() / (fd.abs() + 1e-8);
        assert!(rel <= 1e-4, "col {col}: ad {ad} vs fd {fd} (rel {rel})");
    }

    #[test]
    fn gdd_tape_gradient_matches_finite_differences() {
        for col in [gdd_col::TBASEM, gdd_col::TSUMEM, gdd_col::TSUM1, gdd_col::TSUM2] {
            fd_vs_ad_gdd(col);
        }
    }

    #[test]
    fn ferguson_tape_gradient_matches_finite_differences() {
        let p = FergusonParams::midpoint();
        let mut rng = ChaCha20Rng::seed_from_u64(32);
        let tmean_vec = random_season(&mut rng, 80, 1.0, -10.0);
        let tmean = Array2::from_shape_vec((1, 80), tmean_vec).unwrap();

        let loss_at = |values: Vec<f64>| -> f64 {
            let mut tape = Tape::new();
            let omega = tape.leaf(Array2::from_shape_vec((1, 10), values).unwrap());
            let out = ferguson_tape_rollout(&mut tape, &OmegaSeq::Static(omega), &tmean).unwrap();
            let mut total = None;
            for h in out.hc {
                let sq = tape.square(h);
                total = Some(match total {
                    Some(t) => tape.add(t, sq),
                    None => sq,
                });
            }
            let root = tape.sum_all(total.unwrap());
            tape.value(root)[[0, 0]]
        };

        for col in [
            ferguson_col::HCINIT,
            ferguson_col::HCMIN,
            ferguson_col::HCMAX,
            ferguson_col::TENDO,
        ] {
            let mut tape = Tape::new();
            let omega = tape.leaf(ferguson_omega_row(&p));
            let out = ferguson_tape_rollout(&mut tape, &OmegaSeq::Static(omega), &tmean).unwrap();
            let mut total = None;
            for h in out.hc {
                let sq = tape.square(h);
                total = Some(match total {
                    Some(t) => tape.add(t, sq),
                    None => sq,
                });
            }
            let root = tape.sum_all(total.unwrap());
            let grads = tape.backward(root);
            let ad = grads.get(omega).unwrap()[[0, col]];

            let eps = 1e-4;
            let mut up = p.to_vec();
            up[col] += eps;
            let mut down = p.to_vec();
            down[col] -= eps;
            let fd = (loss_at(up) - loss_at(down)) / (2.0 * eps);
            let rel = (ad - fd).abs() / (fd.abs() + 1e-8);
            assert!(rel <= 1e-3, "col {col}: ad {ad} vs fd {fd} (rel {rel})");
        }
    }
}
