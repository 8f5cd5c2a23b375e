//! The hybrid composition: each day the parameter network reads the
//! normalized weather, emits a fresh biophysical parameter vector, and
//! the biophysical model — driven by the raw mean temperature — steps
//! once under those parameters. Crop-state predictions therefore
//! inherit the physics' invariants (monotone stages, bounded
//! hardiness) no matter what the network does.
//!
//! Inference walks an explicit [`RolloutState`] cursor, so a season
//! can be split at any day, saved, and resumed bit-exactly; medium
//! range forecasting is just the cursor continuing onto caller-supplied
//! future weather. Training rebuilds the identical arithmetic on the
//! autodiff tape (the parameter traces agree bitwise) and fits the
//! observed daily states with masked MSE through a soft-stage
//! surrogate whose temperature anneals across epochs.

use std::collections::VecDeque;

use ndarray::{Array2, Axis};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::biophys::{
    ferguson_step, ferguson_tape_rollout, gdd_step, gdd_tape_rollout, BiophysError,
    FergusonParams, GddParams, HardinessState, OmegaSeq, ParamTable, PhenologyState,
    OBSERVED_TRANSITIONS,
};
use crate::dataset::{CropKind, CropStateSeries, Dataset};
use crate::gradtrain::{
    geometric_ramp, masked_mse, train, Objective, TrainConfig, TrainError, TrainOutcome,
};
use crate::paramnet::{rescale, ForwardState, NetError, NetWeights, TapeNet};
use crate::weather::{normalize, NormStats, SeasonWindow, WeatherSeries};

#[derive(Debug, Error)]
pub enum HybridError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Biophys(#[from] BiophysError),
    #[error("forecast horizon {horizon} exceeds the supplied future weather ({days} days)")]
    Horizon { horizon: usize, days: usize },
    #[error("bad model config: {0}")]
    BadConfig(String),
}

impl From<HybridError> for TrainError {
    fn from(e: HybridError) -> Self {
        match e {
            HybridError::Net(e) => TrainError::Net(e),
            HybridError::Biophys(e) => TrainError::Biophys(e),
            other => TrainError::BadConfig(other.to_string()),
        }
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// A parameter network bound to the biophysical model it drives, plus
/// the normalization statistics its inputs were fitted with.
#[derive(Clone, Debug)]
pub struct DmcModel {
    pub net: NetWeights,
    /// Parameter ranges for the bound model kind; its width equals the
    /// network's output width.
    pub table: ParamTable,
    pub kind: CropKind,
    /// Input normalization fitted on the training split.
    pub stats: NormStats,
    /// Delta parameterization: daily outputs become increments of
    /// `factor · range` on yesterday's parameters instead of absolute
    /// values. `None` predicts absolute parameters.
    pub smoothing: Option<f64>,
    /// Sliding-window length: day t's parameters are predicted from a
    /// recurrence over the last k days only. `None` runs the
    /// recurrence over the whole season.
    pub window: Option<usize>,
    /// Apply each day's predicted parameters to the *next* day's
    /// biophysical step; day 0 runs on the range midpoints.
    pub delayed: bool,
}

impl DmcModel {
    pub fn new(net: NetWeights, kind: CropKind, stats: NormStats) -> Result<Self, HybridError> {
        let table = ParamTable::for_kind(kind);
        if net.config.out_dim != table.len() {
            return Err(HybridError::BadConfig(format!(
                "network emits {} outputs but the {} parameter table has {}",
                net.config.out_dim,
                kind.as_str(),
                table.len()
            )));
        }
        Ok(Self { net, table, kind, stats, smoothing: None, window: None, delayed: false })
    }

    /// Enable the delta parameterization with scale `s` ∈ (0, 1].
    pub fn with_smoothing(mut self, s: f64) -> Result<Self, HybridError> {
        if !(s > 0.0 && s <= 1.0) {
            return Err(HybridError::BadConfig(format!("smoothing factor {s} outside (0, 1]")));
        }
        self.smoothing = Some(s);
        Ok(self)
    }

    /// Restrict the recurrence to a sliding window of `k` ≥ 1 days.
    pub fn with_window(mut self, k: usize) -> Result<Self, HybridError> {
        if k == 0 {
            return Err(HybridError::BadConfig("window length must be ≥ 1".into()));
        }
        self.window = Some(k);
        Ok(self)
    }

    /// Apply parameters one day after they are predicted.
    pub fn with_delayed(mut self) -> Self {
        self.delayed = true;
        self
    }

    /// Range midpoints in table order — the parameters used before the
    /// network has said anything (delta-mode day 0, delayed day 0).
    fn midpoints(&self) -> Vec<f64> {
        self.table.specs.iter().map(|s| s.midpoint()).collect()
    }
}

// ---------------------------------------------------------------------------
// Inference: cursor, rollout, forecast
// ---------------------------------------------------------------------------

/// Everything needed to resume a rollout mid-season. Cloning the state
/// and stepping the copy continues the original rollout bit-exactly,
/// which is what lets a forecast pick up where the observed season
/// ends.
#[derive(Clone, Debug)]
pub struct RolloutState {
    /// Recurrent hidden state (1 × recur_dim).
    h: ForwardState,
    /// Trailing normalized input rows for windowed models.
    recent: VecDeque<Array2<f64>>,
    /// Phenology stage machine.
    phen: PhenologyState,
    /// Hardiness dynamics; created on the first step so its initial
    /// LTE50 is the first applied `hcinit`.
    hard: Option<HardinessState>,
    /// Previous day's target parameters (delta recurrence and delayed
    /// application both need them).
    omega_prev: Option<Vec<f64>>,
    /// Days stepped so far.
    day: usize,
}

/// One season's predictions plus the parameter trace that produced
/// them (days × parameter count, in table order). The trace records
/// the parameters *applied* to each day's biophysical step.
#[derive(Clone, Debug)]
pub struct DmcRollout {
    pub states: CropStateSeries,
    pub omegas: Array2<f64>,
}

impl DmcModel {
    /// Fresh cursor at day 0.
    pub fn begin(&self) -> RolloutState {
        RolloutState {
            h: self.net.init_state(1),
            recent: VecDeque::new(),
            phen: PhenologyState::default(),
            hard: None,
            omega_prev: None,
            day: 0,
        }
    }

    /// Advance one day: predict parameters from the normalized feature
    /// row (1 × input_dim), apply them to the biophysical step driven
    /// by the raw daily mean temperature, and return the day's state
    /// value with the applied parameter vector.
    /// Raw network outputs (1 × out_dim, pre-rescale) for one day,
    /// honoring the windowed recurrence when configured. Advances the
    /// cursor's network state but not its biophysical state.
    pub(crate) fn raw_day(
        &self,
        state: &mut RolloutState,
        features: &Array2<f64>,
        cultivar: usize,
    ) -> Result<Array2<f64>, HybridError> {
        Ok(match self.window {
            None => self.net.step(&mut state.h, features, &[cultivar])?,
            Some(k) => {
                state.recent.push_back(features.clone());
                while state.recent.len() > k {
                    state.recent.pop_front();
                }
                let mut h = self.net.init_state(1);
                let mut y = Array2::zeros((1, self.net.config.out_dim));
                for row in &state.recent {
                    y = self.net.step(&mut h, row, &[cultivar])?;
                }
                y
            }
        })
    }

    pub fn step_day(
        &self,
        state: &mut RolloutState,
        features: &Array2<f64>,
        tmean: f64,
        cultivar: usize,
    ) -> Result<(f64, Vec<f64>), HybridError> {
        let raw = self.raw_day(state, features, cultivar)?;

        let target: Vec<f64> = match self.smoothing {
            None => rescale(&raw, &self.table).row(0).to_vec(),
            Some(s) => match &state.omega_prev {
                // Day 0 of the delta walk starts at the midpoints; the
                // day's raw output is deliberately unused.
                None => self.midpoints(),
                Some(prev) => self
                    .table
                    .specs
                    .iter()
                    .enumerate()
                    .map(|(j, p)| {
                        let v = prev[j] + raw[[0, j]] * (p.max - p.min) * s;
                        v.max(p.min).min(p.max)
                    })
                    .collect(),
            },
        };

        let applied: Vec<f64> = if self.delayed {
            match state.omega_prev.take() {
                None => self.midpoints(),
                Some(prev) => prev,
            }
        } else {
            target.clone()
        };
        state.omega_prev = Some(target);

        let value = match self.kind {
            CropKind::Phenology => {
                let p = GddParams::from_slice(&applied);
                gdd_step(&mut state.phen, &p, tmean, state.day);
                state.phen.stage as f64
            }
            CropKind::Hardiness => {
                let p = FergusonParams::from_slice(&applied);
                let hard = state.hard.get_or_insert_with(|| HardinessState::new(&p));
                ferguson_step(hard, &p, tmean);
                hard.hc
            }
        };
        state.day += 1;
        Ok((value, applied))
    }
}

/// Roll a model over pre-normalized inputs (days × input_dim) and the
/// matching raw daily mean temperatures.
pub fn dmc_rollout_inputs(
    model: &DmcModel,
    inputs: &Array2<f64>,
    tmean: &[f64],
    cultivar: usize,
) -> Result<DmcRollout, HybridError> {
    let days = tmean.len();
    if inputs.nrows() != days {
        return Err(HybridError::BadConfig(format!(
            "inputs cover {} days but tmean has {days}",
            inputs.nrows()
        )));
    }
    let mut state = model.begin();
    let mut values = Vec::with_capacity(days);
    let mut omegas = Array2::zeros((days, model.table.len()));
    for t in 0..days {
        let row = inputs.row(t).insert_axis(Axis(0)).to_owned();
        let (v, omega) = model.step_day(&mut state, &row, tmean[t], cultivar)?;
        values.push(v);
        for (j, &w) in omega.iter().enumerate() {
            omegas[[t, j]] = w;
        }
    }
    let mut states = CropStateSeries::dense(model.kind, values);
    if model.kind == CropKind::Phenology {
        states.onsets = state.phen.onsets.clone();
    }
    Ok(DmcRollout { states, omegas })
}

/// Roll a model over one weather season: normalize with the model's
/// own statistics, predict daily parameters, and step the biophysical
/// model under them.
pub fn dmc_rollout(
    model: &DmcModel,
    series: &WeatherSeries,
    cultivar: usize,
) -> Result<DmcRollout, HybridError> {
    let inputs = normalize(series, &model.stats);
    dmc_rollout_inputs(model, &inputs, &series.tmean(), cultivar)
}

/// [`dmc_rollout`] under the delta parameterization with an explicit
/// scale, overriding whatever the model carries. Any `s` > 0 is
/// accepted here (at `s` ≥ 1 the walk can cross a full range in one
/// day, recovering the absolute variant's reach).
pub fn dmc_rollout_smoothed(
    model: &DmcModel,
    s: f64,
    series: &WeatherSeries,
    cultivar: usize,
) -> Result<DmcRollout, HybridError> {
    if s <= 0.0 {
        return Err(HybridError::BadConfig(format!("smoothing factor {s} must be positive")));
    }
    let mut m = model.clone();
    m.smoothing = Some(s);
    dmc_rollout(&m, series, cultivar)
}

/// Warm the model on the observed season, then continue over the
/// first `horizon` days of caller-supplied future weather (the engine
/// never fabricates weather). Returns the horizon's predictions;
/// phenology onsets are indexed relative to the horizon start and
/// cover only transitions that happen inside it.
pub fn forecast(
    model: &DmcModel,
    past: &WeatherSeries,
    future: &WeatherSeries,
    horizon: usize,
    cultivar: usize,
) -> Result<DmcRollout, HybridError> {
    if horizon > future.len() {
        return Err(HybridError::Horizon { horizon, days: future.len() });
    }
    let mut state = model.begin();
    let past_inputs = normalize(past, &model.stats);
    let past_tmean = past.tmean();
    for t in 0..past.len() {
        let row = past_inputs.row(t).insert_axis(Axis(0)).to_owned();
        model.step_day(&mut state, &row, past_tmean[t], cultivar)?;
    }

    let future_inputs = normalize(future, &model.stats);
    let future_tmean = future.tmean();
    let mut values = Vec::with_capacity(horizon);
    let mut omegas = Array2::zeros((horizon, model.table.len()));
    for t in 0..horizon {
        let row = future_inputs.row(t).insert_axis(Axis(0)).to_owned();
        let (v, omega) = model.step_day(&mut state, &row, future_tmean[t], cultivar)?;
        values.push(v);
        for (j, &w) in omega.iter().enumerate() {
            omegas[[t, j]] = w;
        }
    }
    let mut states = CropStateSeries::dense(model.kind, values);
    if model.kind == CropKind::Phenology {
        states.onsets = state
            .phen
            .onsets
            .iter()
            .filter(|&(_, &d)| d >= past.len())
            .map(|(&s, &d)| (s, d - past.len()))
            .collect();
    }
    Ok(DmcRollout { states, omegas })
}

/// Render one rollout as the per-season prediction CSV: date, the
/// day's predicted state (stage or LTE50), then one column per
/// biophysical parameter.
pub fn prediction_csv(model: &DmcModel, series: &WeatherSeries, roll: &DmcRollout) -> String {
    let mut out = String::from("date,state");
    for spec in &model.table.specs {
        out.push(',');
        out.push_str(&spec.name);
    }
    out.push('\n');
    for t in 0..roll.states.len() {
        out.push_str(&format!("{},{}", series.dates[t], roll.states.values[t]));
        for j in 0..model.table.len() {
            out.push_str(&format!(",{}", roll.omegas[[t, j]]));
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Training objective
// ---------------------------------------------------------------------------

/// Settings for the daily-state fitting objective.
#[derive(Clone, Debug)]
pub struct DmcObjectiveConfig {
    /// Seasons per minibatch.
    pub batch_size: usize,
    /// Soft-stage temperature (°C·day) at the first and last epoch;
    /// annealed geometrically between them. Wide early so saturated
    /// thresholds still receive gradient, tight late so the surrogate
    /// hugs the hard stage machine.
    pub tau_start: f64,
    pub tau_end: f64,
    /// Fit a single transition's soft indicator (1-based) instead of
    /// the full stage sum; phenology only.
    pub stage_only: Option<u8>,
}

impl Default for DmcObjectiveConfig {
    fn default() -> Self {
        Self { batch_size: 12, tau_start: 150.0, tau_end: 5.0, stage_only: None }
    }
}

/// One padded minibatch of seasons.
struct DmcBatch {
    /// Per-day normalized inputs, each (B × input_dim); padded rows
    /// are zero.
    features: Vec<Array2<f64>>,
    /// (B × days) raw daily mean temperature; the padding sentinel
    /// freezes degree-day accumulation past each season's end.
    tmean: Array2<f64>,
    /// (B × days) 1.0 in season, 0.0 on padding; freezes the recurrent
    /// state past each season's end.
    day_mask: Array2<f64>,
    /// Network-side cultivar id per row.
    cultivars: Vec<usize>,
    /// (B × days) observed daily states (or indicator targets).
    target: Array2<f64>,
    /// (B × days) observation mask ∧ day mask.
    mask: Array2<bool>,
}

/// Held-out season evaluated with the plain (hard) rollout.
struct ValCase {
    inputs: Array2<f64>,
    tmean: Vec<f64>,
    cultivar: usize,
    target: Vec<f64>,
    mask: Vec<bool>,
}

/// Masked MSE on observed daily crop states, differentiated through
/// the network and the biophysical rollout jointly. Plugs into
/// [`train`].
pub struct DmcObjective {
    kind: CropKind,
    table: ParamTable,
    smoothing: Option<f64>,
    window: Option<usize>,
    delayed: bool,
    stage_only: Option<u8>,
    batches: Vec<DmcBatch>,
    val: Vec<ValCase>,
    /// Template for validation rollouts; its weights are replaced by
    /// the candidate parameters on every call.
    template: DmcModel,
    epochs: usize,
    tau_start: f64,
    tau_end: f64,
    tau: f64,
}

impl DmcObjective {
    /// Build the padded minibatches for a dataset split. Seasons are
    /// grouped by window (growing vs dormancy) so batch padding stays
    /// modest, then chunked in the given order. Records are normalized
    /// with the model's statistics; the network-side cultivar id is
    /// the record's cultivar, or 0 for cultivar-blind networks
    /// (`n_cultivars` = 1).
    pub fn new(
        model: &DmcModel,
        dataset: &Dataset,
        train_idx: &[usize],
        val_idx: &[usize],
        epochs: usize,
        cfg: &DmcObjectiveConfig,
    ) -> Result<Self, TrainError> {
        if train_idx.is_empty() {
            return Err(TrainError::EmptyData("no training records".into()));
        }
        if cfg.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be ≥ 1".into()));
        }
        if let Some(k) = cfg.stage_only {
            if model.kind != CropKind::Phenology {
                return Err(TrainError::BadConfig(
                    "stage_only applies to phenology models only".into(),
                ));
            }
            if k == 0 || k as usize > OBSERVED_TRANSITIONS {
                return Err(TrainError::BadConfig(format!(
                    "stage_only {k} outside 1..={OBSERVED_TRANSITIONS}"
                )));
            }
        }

        let n_cultivars = model.net.config.n_cultivars;
        let net_cultivar = |c: usize| -> Result<usize, TrainError> {
            if n_cultivars == 1 {
                Ok(0)
            } else if c < n_cultivars {
                Ok(c)
            } else {
                Err(TrainError::BadConfig(format!(
                    "record cultivar {c} exceeds the network's {n_cultivars} cultivars"
                )))
            }
        };

        let pad = match model.kind {
            CropKind::Phenology => -100.0,
            CropKind::Hardiness => 5.0,
        };

        let mut groups: Vec<Vec<usize>> = vec![Vec::new(), Vec::new()];
        for &r in train_idx {
            let g = match dataset.records[r].weather.window {
                SeasonWindow::Phenology => 0,
                SeasonWindow::Dormancy => 1,
            };
            groups[g].push(r);
        }

        let mut batches = Vec::new();
        for group in &groups {
            for chunk in group.chunks(cfg.batch_size) {
                let rows = chunk.len();
                let lens: Vec<usize> =
                    chunk.iter().map(|&r| dataset.records[r].weather.len()).collect();
                let days = *lens.iter().max().unwrap();
                let input_dim = model.net.config.input_dim;

                let mut features = vec![Array2::zeros((rows, input_dim)); days];
                let mut tmean = Array2::from_elem((rows, days), pad);
                let mut day_mask = Array2::zeros((rows, days));
                let mut target = Array2::zeros((rows, days));
                let mut mask = Array2::from_elem((rows, days), false);
                let mut cultivars = Vec::with_capacity(rows);

                for (row, &r) in chunk.iter().enumerate() {
                    let rec = &dataset.records[r];
                    cultivars.push(net_cultivar(rec.cultivar)?);
                    let inputs = normalize(&rec.weather, &model.stats);
                    if inputs.ncols() != input_dim {
                        return Err(TrainError::BadConfig(format!(
                            "normalized inputs have {} columns but the network expects {}",
                            inputs.ncols(),
                            input_dim
                        )));
                    }
                    let t = rec.weather.tmean();
                    for d in 0..lens[row] {
                        features[d].row_mut(row).assign(&inputs.row(d));
                        tmean[[row, d]] = t[d];
                        day_mask[[row, d]] = 1.0;
                    }
                    let truth = &rec.truth;
                    for d in 0..lens[row].min(truth.values.len()) {
                        target[[row, d]] = match cfg.stage_only {
                            None => truth.values[d],
                            Some(k) => {
                                if truth.values[d] >= k as f64 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        mask[[row, d]] = truth.observed[d];
                    }
                }
                batches.push(DmcBatch { features, tmean, day_mask, cultivars, target, mask });
            }
        }

        let mut val = Vec::with_capacity(val_idx.len());
        for &r in val_idx {
            let rec = &dataset.records[r];
            let truth = &rec.truth;
            let target = truth
                .values
                .iter()
                .map(|&v| match cfg.stage_only {
                    None => v,
                    Some(k) => {
                        if v >= k as f64 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                })
                .collect();
            val.push(ValCase {
                inputs: normalize(&rec.weather, &model.stats),
                tmean: rec.weather.tmean(),
                cultivar: net_cultivar(rec.cultivar)?,
                target,
                mask: truth.observed.clone(),
            });
        }

        Ok(Self {
            kind: model.kind,
            table: model.table.clone(),
            smoothing: model.smoothing,
            window: model.window,
            delayed: model.delayed,
            stage_only: cfg.stage_only,
            batches,
            val,
            template: model.clone(),
            epochs,
            tau_start: cfg.tau_start,
            tau_end: cfg.tau_end,
            tau: cfg.tau_start,
        })
    }

    /// Per-day applied parameter vectors (B × table width each) on the
    /// tape, matching [`DmcModel::step_day`]'s arithmetic bit for bit.
    fn tape_omegas(&self, tape: &mut Tape, net: &TapeNet, b: &DmcBatch) -> Vec<Var> {
        let days = b.features.len();
        let rows = b.cultivars.len();

        // Assembled inputs once per day; windowed replays reuse them.
        let assembled: Vec<Var> = b
            .features
            .iter()
            .map(|f| {
                let x = tape.constant(f.clone());
                net.assemble(tape, x, &b.cultivars)
            })
            .collect();

        let mut raws = Vec::with_capacity(days);
        match self.window {
            None => {
                let mut h = net.zero_state(tape, rows);
                for t in 0..days {
                    let (h_new, raw) = net.step(tape, h, assembled[t], &b.cultivars);
                    raws.push(raw);
                    // Freeze the recurrence past each row's season end.
                    let m = tape
                        .constant(b.day_mask.column(t).to_owned().insert_axis(Axis(1)));
                    let keep = tape.mul(h_new, m);
                    let inv = tape.sub_from_scalar(m, 1.0);
                    let old = tape.mul(h, inv);
                    h = tape.add(keep, old);
                }
            }
            Some(k) => {
                for t in 0..days {
                    let start = (t + 1).saturating_sub(k);
                    let mut h = net.zero_state(tape, rows);
                    let mut raw = None;
                    for s in start..=t {
                        let (h_new, r) = net.step(tape, h, assembled[s], &b.cultivars);
                        h = h_new;
                        raw = Some(r);
                    }
                    raws.push(raw.expect("window covers at least the day itself"));
                }
            }
        }

        let midpoint_rows = || {
            Array2::from_shape_fn((rows, self.table.len()), |(_, j)| {
                self.table.specs[j].midpoint()
            })
        };

        let targets: Vec<Var> = match self.smoothing {
            None => {
                raws.iter().map(|&r| crate::paramnet::tape_rescale(tape, r, &self.table)).collect()
            }
            Some(s) => {
                let width = tape.constant(self.table.range_row());
                let min_c = tape.constant(self.table.min_row());
                let max_c = tape.constant(&self.table.min_row() + &self.table.range_row());
                let mut prev = tape.constant(midpoint_rows());
                let mut out = vec![prev];
                for t in 1..days {
                    let d0 = tape.mul(raws[t], width);
                    let d1 = tape.mul_scalar(d0, s);
                    let sum = tape.add(prev, d1);
                    let lo = tape.maximum(sum, min_c);
                    let next = tape.minimum(lo, max_c);
                    out.push(next);
                    prev = next;
                }
                out
            }
        };

        if self.delayed {
            let mid = tape.constant(midpoint_rows());
            let mut applied = vec![mid];
            applied.extend_from_slice(&targets[..days - 1]);
            applied
        } else {
            targets
        }
    }
}

impl Objective<NetWeights> for DmcObjective {
    fn begin_epoch(&mut self, epoch: usize) {
        self.tau = geometric_ramp(self.tau_start, self.tau_end, epoch, self.epochs);
    }

    fn n_batches(&self) -> usize {
        self.batches.len()
    }

    fn batch_loss_grad(
        &mut self,
        params: &NetWeights,
        batch: usize,
    ) -> Result<(f64, Vec<(String, Array2<f64>)>), TrainError> {
        let b = &self.batches[batch];
        let mut tape = Tape::new();
        let net = TapeNet::leaf(&mut tape, params);
        let applied = self.tape_omegas(&mut tape, &net, b);

        let loss = match self.kind {
            CropKind::Phenology => {
                let roll =
                    gdd_tape_rollout(&mut tape, &OmegaSeq::Daily(&applied), &b.tmean, self.tau)?;
                let cols: Vec<Var> = match self.stage_only {
                    None => roll.soft_stage,
                    Some(k) => {
                        roll.stage_ind.iter().map(|inds| inds[k as usize - 1]).collect()
                    }
                };
                let pred = tape.concat_cols(&cols);
                masked_mse(&mut tape, pred, &b.target, &b.mask)
            }
            CropKind::Hardiness => {
                let roll = ferguson_tape_rollout(&mut tape, &OmegaSeq::Daily(&applied), &b.tmean)?;
                let pred = tape.concat_cols(&roll.hc);
                masked_mse(&mut tape, pred, &b.target, &b.mask)
            }
        };
        let loss_value = tape.value(loss)[[0, 0]];
        let grads = tape.backward_checked(loss).map_err(|op| TrainError::NonFinite { op })?;
        Ok((loss_value, net.gradients(&tape, &grads)))
    }

    /// Pooled masked MSE of the *hard* rollout over the validation
    /// seasons — the same scale the training loss approaches as its
    /// surrogate temperature anneals.
    fn val_loss(&mut self, params: &NetWeights) -> Result<Option<f64>, TrainError> {
        if self.val.is_empty() {
            return Ok(None);
        }
        let mut model = self.template.clone();
        model.net = params.clone();
        let mut sse = 0.0;
        let mut n = 0usize;
        for case in &self.val {
            let roll = dmc_rollout_inputs(&model, &case.inputs, &case.tmean, case.cultivar)?;
            for (t, (&truth, &obs)) in case.target.iter().zip(&case.mask).enumerate() {
                if !obs || t >= roll.states.values.len() {
                    continue;
                }
                let pred = match self.stage_only {
                    None => roll.states.values[t],
                    Some(k) => {
                        if roll.states.values[t] >= k as f64 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                };
                let d = pred - truth;
                sse += d * d;
                n += 1;
            }
        }
        if n == 0 {
            return Ok(None);
        }
        Ok(Some(sse / n as f64))
    }
}

/// Fit a model on a dataset split. Returns the optimizer outcome and
/// the model rebuilt around the best-validation weights.
pub fn train_dmc(
    model: &DmcModel,
    dataset: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
    train_cfg: &TrainConfig,
    obj_cfg: &DmcObjectiveConfig,
) -> Result<(TrainOutcome<NetWeights>, DmcModel), TrainError> {
    let mut objective =
        DmcObjective::new(model, dataset, train_idx, val_idx, train_cfg.epochs, obj_cfg)?;
    let outcome = train(&mut objective, model.net.clone(), train_cfg)?;
    let mut trained = model.clone();
    trained.net = outcome.best_params.clone();
    Ok((outcome, trained))
}
