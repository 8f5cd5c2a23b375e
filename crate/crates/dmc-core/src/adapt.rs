//! In-season adaptation from sparse observations. A frozen hybrid
//! model is wrapped with a small error-encoding network (EEN): each
//! day the EEN reads yesterday's observation error — observed minus
//! predicted, in the state's natural units — together with a learned
//! per-cultivar scalar, and emits a bounded correction that is added
//! to the backbone's raw outputs before rescaling into parameter
//! ranges.
//!
//! The EEN carries no bias terms anywhere, and the cultivar scalar is
//! gated off whenever the error input is zero, so until the first
//! nonzero error arrives every correction is exactly zero: with no
//! observations the wrapped rollout reproduces the frozen model bit
//! for bit, for any EEN weights. Training freezes the backbone and
//! fits only the EEN, hiding observations past a per-season cutoff day
//! (redrawn uniformly each epoch) while keeping the loss on every
//! ground-truth day — the network is rewarded for turning early-season
//! errors into better late-season predictions.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDate;
use ndarray::{array, Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::autodiff::Tape;
use crate::biophys::{
    ferguson_step, gdd_step, FergusonParams, FergusonTapeStep, GddParams, GddTapeStep,
    HardinessState, ParamTable, PhenologyState,
};
use crate::dataset::{CropKind, CropStateSeries, Dataset};
use crate::gradtrain::{
    geometric_ramp, masked_mse, train, Objective, Parameters, TrainConfig, TrainError,
    TrainOutcome,
};
use crate::hybrid::{DmcModel, DmcRollout, HybridError};
use crate::paramnet::{
    init_weights, rescale, tape_rescale, Arch, EmbedMode, NetConfig, NetError, NetWeights,
    TapeNet,
};
use crate::weather::{normalize, SeasonWindow, WeatherSeries};

/// Scale on the EEN's raw output before it joins the backbone's raw
/// parameters: corrections nudge the prediction, they don't overwrite
/// it, and the sum is clamped back into [-1, 1] so the rescaled
/// parameters stay inside their physical ranges.
pub const DELTA_SCALE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Hybrid(#[from] HybridError),
    #[error("observation on day {day} falls outside the {days}-day season")]
    ObservationOutsideSeason { day: usize, days: usize },
    #[error("observation date {0} is not in the season window")]
    UnknownDate(NaiveDate),
    #[error("bad adaptation config: {0}")]
    BadConfig(String),
}

impl From<AdaptError> for TrainError {
    fn from(e: AdaptError) -> Self {
        match e {
            AdaptError::Net(e) => TrainError::Net(e),
            AdaptError::Hybrid(e) => e.into(),
            other => TrainError::BadConfig(other.to_string()),
        }
    }
}

// ---------------------------------------------------------------------------
// Error-encoding network
// ---------------------------------------------------------------------------

/// Weights of the error-encoding network: a bias-free copy of the
/// backbone stack whose assembled input is two-wide — the previous
/// day's error and the cultivar scalar. Bias-freedom is what makes
/// "no error yet" propagate to an exactly-zero correction.
#[derive(Clone, Debug, PartialEq)]
pub struct EenWeights {
    pub net: NetWeights,
}

impl EenWeights {
    /// Configuration shadowing `base`: same stack widths, no biases,
    /// a single error input and a scalar cultivar embedding.
    /// `recurrent = false` is the feed-forward ablation — it reacts to
    /// an error only on the day after it is seen and then forgets.
    pub fn config_for(base: &NetConfig, recurrent: bool) -> NetConfig {
        let (arch, pre_dims, recur_dim, post_dims) = if recurrent {
            (Arch::Recurrent, base.pre_dims.clone(), base.recur_dim, base.post_dims.clone())
        } else {
            // A feed-forward stack carries no recurrent or post stage;
            // keep the same depth by folding everything into the pre
            // layers.
            let mut pre = base.pre_dims.clone();
            pre.push(base.recur_dim);
            pre.extend(&base.post_dims);
            (Arch::FeedForward, pre, 0, Vec::new())
        };
        NetConfig {
            arch,
            input_dim: 1,
            embed_mode: EmbedMode::Concat,
            embed_dim: 1,
            pre_dims,
            recur_dim,
            post_dims,
            out_dim: base.out_dim,
            n_cultivars: base.n_cultivars,
            bias: false,
        }
    }

    pub fn init(base: &NetConfig, recurrent: bool, seed: u64) -> Result<Self, AdaptError> {
        Ok(Self { net: init_weights(&Self::config_for(base, recurrent), seed)? })
    }

    /// Wrap existing weights (e.g. a loaded checkpoint), enforcing the
    /// EEN shape invariants.
    pub fn from_net(net: NetWeights) -> Result<Self, AdaptError> {
        let c = &net.config;
        if c.bias {
            return Err(AdaptError::BadConfig(
                "the error-encoding network must be bias-free".into(),
            ));
        }
        if c.input_dim != 1 || c.embed_mode != EmbedMode::Concat || c.embed_dim != 1 {
            return Err(AdaptError::BadConfig(
                "the error-encoding network takes one error input plus a scalar cultivar \
                 embedding"
                    .into(),
            ));
        }
        Ok(Self { net })
    }
}

impl Parameters for EenWeights {
    fn names(&self) -> Vec<String> {
        self.net.names()
    }

    fn array(&self, name: &str) -> Option<&Array2<f64>> {
        self.net.array(name)
    }

    fn array_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.net.array_mut(name)
    }

    fn save(&self, path: &Path) -> Result<(), TrainError> {
        self.net.save(path)
    }
}

/// The EEN's assembled input for one day: the error, and the cultivar
/// scalar gated off when the error is zero (so an error-free day
/// contributes nothing at all).
fn een_input_row(een: &EenWeights, err: f64, cultivar: usize) -> Array2<f64> {
    let emb = if err == 0.0 { 0.0 } else { een.net.embedding[[cultivar, 0]] };
    array![[err, emb]]
}

/// Run the EEN over a per-day error sequence (day t's entry is the
/// error available *on* day t), returning the (days × out_dim) raw
/// corrections in [-1, 1]. Days before the first nonzero error map to
/// exactly-zero rows.
pub fn een_forward(
    een: &EenWeights,
    errors: &[f64],
    cultivar: usize,
) -> Result<Array2<f64>, AdaptError> {
    if cultivar >= een.net.config.n_cultivars {
        return Err(AdaptError::BadConfig(format!(
            "cultivar {cultivar} out of range ({} known)",
            een.net.config.n_cultivars
        )));
    }
    let out_dim = een.net.config.out_dim;
    let mut state = een.net.init_state(1);
    let mut out = Array2::zeros((errors.len(), out_dim));
    for (t, &e) in errors.iter().enumerate() {
        let x = een_input_row(een, e, cultivar);
        let y = een.net.step_assembled(&mut state, &x, &[cultivar]);
        out.row_mut(t).assign(&y.row(0));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Adapted rollout
// ---------------------------------------------------------------------------

fn check_pair(base: &DmcModel, een: &EenWeights) -> Result<(), AdaptError> {
    if base.smoothing.is_some() || base.delayed {
        return Err(AdaptError::BadConfig(
            "in-season adaptation wraps the absolute parameterization; disable smoothing \
             and delayed application"
                .into(),
        ));
    }
    if een.net.config.out_dim != base.table.len() {
        return Err(AdaptError::BadConfig(format!(
            "EEN emits {} corrections but the {} parameter table has {}",
            een.net.config.out_dim,
            base.kind.as_str(),
            base.table.len()
        )));
    }
    if een.net.config.n_cultivars != base.net.config.n_cultivars {
        return Err(AdaptError::BadConfig(format!(
            "EEN knows {} cultivars but the backbone knows {}",
            een.net.config.n_cultivars, base.net.config.n_cultivars
        )));
    }
    Ok(())
}

/// Adapted rollout over pre-normalized inputs. `observations` maps day
/// index → observed state in natural units; day t's error (observed −
/// predicted) reaches the EEN on day t + 1. With no observations the
/// result equals the frozen model's rollout bit for bit.
pub fn adapt_rollout_inputs(
    base: &DmcModel,
    een: &EenWeights,
    inputs: &Array2<f64>,
    tmean: &[f64],
    cultivar: usize,
    observations: &BTreeMap<usize, f64>,
) -> Result<DmcRollout, AdaptError> {
    check_pair(base, een)?;
    let days = tmean.len();
    if inputs.nrows() != days {
        return Err(AdaptError::BadConfig(format!(
            "inputs cover {} days but tmean has {days}",
            inputs.nrows()
        )));
    }
    if let Some((&day, _)) = observations.range(days..).next() {
        return Err(AdaptError::ObservationOutsideSeason { day, days });
    }

    let p = base.table.len();
    let mut bstate = base.begin();
    let mut estate = een.net.init_state(1);
    let mut phen = PhenologyState::default();
    let mut hard: Option<HardinessState> = None;
    let mut prev_err = 0.0_f64;
    let mut values = Vec::with_capacity(days);
    let mut omegas = Array2::zeros((days, p));

    for t in 0..days {
        let row = inputs.row(t).insert_axis(Axis(0)).to_owned();
        let mut combined = base.raw_day(&mut bstate, &row, cultivar)?;
        let x = een_input_row(een, prev_err, cultivar);
        let delta = een.net.step_assembled(&mut estate, &x, &[cultivar]);
        for j in 0..p {
            combined[[0, j]] =
                (combined[[0, j]] + DELTA_SCALE * delta[[0, j]]).max(-1.0).min(1.0);
        }
        let omega: Vec<f64> = rescale(&combined, &base.table).row(0).to_vec();

        let value = match base.kind {
            CropKind::Phenology => {
                let gp = GddParams::from_slice(&omega);
                gdd_step(&mut phen, &gp, tmean[t], t);
                phen.stage as f64
            }
            CropKind::Hardiness => {
                let fp = FergusonParams::from_slice(&omega);
                let h = hard.get_or_insert_with(|| HardinessState::new(&fp));
                ferguson_step(h, &fp, tmean[t]);
                h.hc
            }
        };
        prev_err = match observations.get(&t) {
            Some(&obs) => obs - value,
            None => 0.0,
        };
        values.push(value);
        for (j, &w) in omega.iter().enumerate() {
            omegas[[t, j]] = w;
        }
    }

    let mut states = CropStateSeries::dense(base.kind, values);
    if base.kind == CropKind::Phenology {
        states.onsets = phen.onsets.clone();
    }
    Ok(DmcRollout { states, omegas })
}

/// [`adapt_rollout_inputs`] over one weather season, normalizing with
/// the backbone's own statistics.
pub fn adapt_rollout(
    base: &DmcModel,
    een: &EenWeights,
    series: &WeatherSeries,
    cultivar: usize,
    observations: &BTreeMap<usize, f64>,
) -> Result<DmcRollout, AdaptError> {
    let inputs = normalize(series, &base.stats);
    adapt_rollout_inputs(base, een, &inputs, &series.tmean(), cultivar, observations)
}

// ---------------------------------------------------------------------------
// Observation files
// ---------------------------------------------------------------------------

/// Parse a sparse observation table — CSV rows of
/// `date,cultivar,value` with an optional header — into per-cultivar
/// day-indexed maps, resolving each date against the season's
/// calendar.
pub fn parse_observations(
    text: &str,
    dates: &[NaiveDate],
) -> Result<BTreeMap<String, BTreeMap<usize, f64>>, AdaptError> {
    let index: BTreeMap<NaiveDate, usize> =
        dates.iter().enumerate().map(|(i, &d)| (d, i)).collect();
    let mut out: BTreeMap<String, BTreeMap<usize, f64>> = BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (ln == 0 && line.eq_ignore_ascii_case("date,cultivar,value")) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(AdaptError::BadConfig(format!(
                "observation line {}: expected date,cultivar,value",
                ln + 1
            )));
        }
        let date: NaiveDate = fields[0].trim().parse().map_err(|_| {
            AdaptError::BadConfig(format!("observation line {}: bad date '{}'", ln + 1, fields[0]))
        })?;
        let value: f64 = fields[2].trim().parse().map_err(|_| {
            AdaptError::BadConfig(format!(
                "observation line {}: bad value '{}'",
                ln + 1,
                fields[2]
            ))
        })?;
        let Some(&day) = index.get(&date) else {
            return Err(AdaptError::UnknownDate(date));
        };
        out.entry(fields[1].trim().to_string()).or_default().insert(day, value);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Options for fitting the EEN; the backbone stays frozen throughout.
#[derive(Clone, Debug)]
pub struct EenTrainConfig {
    /// Seasons per minibatch.
    pub batch_size: usize,
    /// Soft-stage temperature ramp (phenology only), start → end
    /// across the epoch budget.
    pub tau_start: f64,
    pub tau_end: f64,
    /// Hide observations from day `c` onward at a fixed cutoff instead
    /// of redrawing one uniformly per season each epoch: `Some(0)`
    /// silences every observation, a value past the season length
    /// hides none.
    pub fixed_cutoff: Option<usize>,
}

impl Default for EenTrainConfig {
    fn default() -> Self {
        Self { batch_size: 12, tau_start: 150.0, tau_end: 5.0, fixed_cutoff: None }
    }
}

struct EenRec {
    /// Frozen backbone raw outputs, days × out_dim.
    raws: Array2<f64>,
    tmean: Vec<f64>,
    cultivar: usize,
    obs: BTreeMap<usize, f64>,
    target: Vec<f64>,
    mask: Vec<bool>,
}

struct EenBatch {
    /// Indices into the objective's training-record list.
    slots: Vec<usize>,
    days: usize,
    /// Per-day frozen raw outputs, each rows × out_dim.
    raws: Vec<Array2<f64>>,
    tmean: Array2<f64>,
    day_mask: Array2<f64>,
    cultivars: Vec<usize>,
    target: Array2<f64>,
    mask: Array2<bool>,
}

struct EenValCase {
    inputs: Array2<f64>,
    tmean: Vec<f64>,
    cultivar: usize,
    obs: BTreeMap<usize, f64>,
    target: Vec<f64>,
    mask: Vec<bool>,
}

/// Minibatch objective for the EEN. Each day the tape replays the
/// adapted composition — frozen raw outputs plus scaled corrections,
/// clamped, rescaled, stepped through the biophysical model — with the
/// closed loop intact: a hardiness error re-enters the tape as
/// `observed − predicted`, so gradient flows back through the
/// feedback path, while a phenology error is the (locally constant)
/// hard stage difference and enters as a plain number. Observations
/// at or past a season's cutoff day are hidden from the EEN; the loss
/// still covers every ground-truth day.
pub struct EenObjective {
    base: DmcModel,
    kind: CropKind,
    table: ParamTable,
    recs: Vec<EenRec>,
    batches: Vec<EenBatch>,
    val: Vec<EenValCase>,
    cutoffs: Vec<usize>,
    fixed_cutoff: Option<usize>,
    seed: u64,
    epochs: usize,
    tau_start: f64,
    tau_end: f64,
    tau: f64,
}

impl EenObjective {
    pub fn new(
        base: &DmcModel,
        een: &EenWeights,
        dataset: &Dataset,
        train_idx: &[usize],
        val_idx: &[usize],
        train_cfg: &TrainConfig,
        cfg: &EenTrainConfig,
    ) -> Result<Self, TrainError> {
        check_pair(base, een)?;
        if train_idx.is_empty() {
            return Err(TrainError::EmptyData("no training seasons".into()));
        }
        if cfg.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be ≥ 1".into()));
        }
        if cfg.tau_start <= 0.0 || cfg.tau_end <= 0.0 {
            return Err(TrainError::BadConfig("soft-stage temperatures must be > 0".into()));
        }
        match dataset.kind() {
            None => return Err(TrainError::EmptyData("dataset has no records".into())),
            Some(k) if k != base.kind => {
                return Err(TrainError::BadConfig(format!(
                    "dataset holds {} records but the model predicts {}",
                    k.as_str(),
                    base.kind.as_str()
                )));
            }
            Some(_) => {}
        }

        let n_net = base.net.config.n_cultivars;
        let net_cultivar = |c: usize| -> Result<usize, TrainError> {
            if n_net == 1 {
                Ok(0)
            } else if c < n_net {
                Ok(c)
            } else {
                Err(TrainError::BadConfig(format!(
                    "record cultivar {c} out of range ({n_net} known to the network)"
                )))
            }
        };

        let build_rec = |&idx: &usize| -> Result<EenRec, TrainError> {
            let rec = dataset
                .records
                .get(idx)
                .ok_or_else(|| TrainError::BadConfig(format!("record index {idx} out of range")))?;
            let cultivar = net_cultivar(rec.cultivar)?;
            let inputs = normalize(&rec.weather, &base.stats);
            let tmean = rec.weather.tmean();
            let days = tmean.len();
            if rec.truth.len() != days {
                return Err(TrainError::BadConfig(format!(
                    "record {idx}: truth covers {} days but weather has {days}",
                    rec.truth.len()
                )));
            }
            let mut raws = Array2::zeros((days, base.table.len()));
            let mut state = base.begin();
            for t in 0..days {
                let row = inputs.row(t).insert_axis(Axis(0)).to_owned();
                let raw = base.raw_day(&mut state, &row, cultivar).map_err(TrainError::from)?;
                raws.row_mut(t).assign(&raw.row(0));
            }
            let obs: BTreeMap<usize, f64> = rec
                .truth
                .observed
                .iter()
                .enumerate()
                .filter(|(_, &o)| o)
                .map(|(d, _)| (d, rec.truth.values[d]))
                .collect();
            Ok(EenRec {
                raws,
                tmean,
                cultivar,
                obs,
                target: rec.truth.values.clone(),
                mask: rec.truth.observed.clone(),
            })
        };

        let recs: Vec<EenRec> = train_idx.iter().map(build_rec).collect::<Result<_, _>>()?;

        // Group by season window so a minibatch pads like with like,
        // then chunk.
        let sentinel = match base.kind {
            CropKind::Phenology => -100.0,
            CropKind::Hardiness => 5.0,
        };
        let mut groups: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        for (slot, &idx) in train_idx.iter().enumerate() {
            let g = match dataset.records[idx].weather.window {
                SeasonWindow::Phenology => 0,
                SeasonWindow::Dormancy => 1,
            };
            groups[g].push(slot);
        }
        let mut batches = Vec::new();
        for group in &groups {
            for chunk in group.chunks(cfg.batch_size) {
                let rows = chunk.len();
                let days = chunk.iter().map(|&s| recs[s].tmean.len()).max().unwrap();
                let mut tmean = Array2::from_elem((rows, days), sentinel);
                let mut day_mask = Array2::zeros((rows, days));
                let mut target = Array2::zeros((rows, days));
                let mut mask = Array2::from_elem((rows, days), false);
                let p = base.table.len();
                let mut raws = vec![Array2::zeros((rows, p)); days];
                for (r, &slot) in chunk.iter().enumerate() {
                    let rec = &recs[slot];
                    for t in 0..rec.tmean.len() {
                        tmean[[r, t]] = rec.tmean[t];
                        day_mask[[r, t]] = 1.0;
                        target[[r, t]] = rec.target[t];
                        mask[[r, t]] = rec.mask[t];
                        raws[t].row_mut(r).assign(&rec.raws.row(t));
                    }
                }
                batches.push(EenBatch {
                    slots: chunk.to_vec(),
                    days,
                    raws,
                    tmean,
                    day_mask,
                    cultivars: chunk.iter().map(|&s| recs[s].cultivar).collect(),
                    target,
                    mask,
                });
            }
        }

        let val: Vec<EenValCase> = val_idx
            .iter()
            .map(|&idx| {
                let rec = build_rec(&idx)?;
                let inputs = normalize(&dataset.records[idx].weather, &base.stats);
                Ok(EenValCase {
                    inputs,
                    tmean: rec.tmean,
                    cultivar: rec.cultivar,
                    obs: rec.obs,
                    target: rec.target,
                    mask: rec.mask,
                })
            })
            .collect::<Result<_, TrainError>>()?;

        let cutoffs = recs.iter().map(|r| r.tmean.len()).collect();
        Ok(Self {
            base: base.clone(),
            kind: base.kind,
            table: base.table.clone(),
            recs,
            batches,
            val,
            cutoffs,
            fixed_cutoff: cfg.fixed_cutoff,
            seed: train_cfg.seed,
            epochs: train_cfg.epochs,
            tau_start: cfg.tau_start,
            tau_end: cfg.tau_end,
            tau: cfg.tau_start,
        })
    }
}

impl Objective<EenWeights> for EenObjective {
    fn begin_epoch(&mut self, epoch: usize) {
        self.tau = geometric_ramp(self.tau_start, self.tau_end, epoch, self.epochs);
        let mut rng = ChaCha20Rng::seed_from_u64(
            self.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        for (slot, rec) in self.recs.iter().enumerate() {
            self.cutoffs[slot] = match self.fixed_cutoff {
                Some(c) => c,
                None => rng.random_range(0..=rec.tmean.len()),
            };
        }
    }

    fn n_batches(&self) -> usize {
        self.batches.len()
    }

    fn batch_loss_grad(
        &mut self,
        params: &EenWeights,
        batch: usize,
    ) -> Result<(f64, Vec<(String, Array2<f64>)>), TrainError> {
        let b = &self.batches[batch];
        let rows = b.cultivars.len();
        let p = self.table.len();

        let mut tape = Tape::new();
        let net = TapeNet::leaf(&mut tape, &params.net);

        let neg_one = tape.constant(Array2::from_elem((rows, p), -1.0));
        let pos_one = tape.constant(Array2::from_elem((rows, p), 1.0));
        let mut h = net.zero_state(&mut tape, rows);
        let mut prev_err = tape.constant(Array2::zeros((rows, 1)));

        let mut gdd = GddTapeStep::new(&mut tape, rows);
        let mut ferg: Option<FergusonTapeStep> = None;
        let mut phen = vec![PhenologyState::default(); rows];
        let mut cols = Vec::with_capacity(b.days);

        for t in 0..b.days {
            // EEN input: yesterday's error, and the cultivar scalar
            // gated by whether that error is nonzero (a value-level
            // gate; it scales nothing, so it carries no gradient).
            let gate = tape.value(prev_err).mapv(|e| if e == 0.0 { 0.0 } else { 1.0 });
            let gate_c = tape.constant(gate);
            let emb = net.embed_rows(&mut tape, &b.cultivars);
            let gated = tape.mul(emb, gate_c);
            let x = tape.concat_cols(&[prev_err, gated]);
            let (h_new, delta) = net.step(&mut tape, h, x, &b.cultivars);
            // Freeze the recurrence past each row's season end.
            let m = tape.constant(b.day_mask.column(t).to_owned().insert_axis(Axis(1)));
            let keep = tape.mul(h_new, m);
            let inv = tape.sub_from_scalar(m, 1.0);
            let old = tape.mul(h, inv);
            h = tape.add(keep, old);

            // ω_t = rescale(clamp(raw_base + s·delta, −1, 1))
            let raw_c = tape.constant(b.raws[t].clone());
            let d0 = tape.mul_scalar(delta, DELTA_SCALE);
            let sum = tape.add(raw_c, d0);
            let lo = tape.maximum(sum, neg_one);
            let clamped = tape.minimum(lo, pos_one);
            let omega = tape_rescale(&mut tape, clamped, &self.table);

            let tm =
                tape.constant(Array2::from_shape_fn((rows, 1), |(r, _)| b.tmean[[r, t]]));
            prev_err = match self.kind {
                CropKind::Phenology => {
                    let (soft, _) = gdd.day(&mut tape, omega, None, tm, self.tau);
                    cols.push(soft);
                    // Hard stages for the error signal — the same
                    // machine the adapted rollout runs at inference.
                    let om = tape.value(omega).clone();
                    let mut errs = Array2::zeros((rows, 1));
                    for r in 0..rows {
                        let gp = GddParams::from_slice(om.row(r).as_slice().unwrap());
                        gdd_step(&mut phen[r], &gp, b.tmean[[r, t]], t);
                        let rec = &self.recs[b.slots[r]];
                        if t < self.cutoffs[b.slots[r]] {
                            if let Some(&obs) = rec.obs.get(&t) {
                                errs[[r, 0]] = obs - phen[r].stage as f64;
                            }
                        }
                    }
                    tape.constant(errs)
                }
                CropKind::Hardiness => {
                    if ferg.is_none() {
                        ferg = Some(FergusonTapeStep::new(&mut tape, omega, rows));
                    }
                    let hc = ferg.as_mut().unwrap().day(&mut tape, omega, tm);
                    cols.push(hc);
                    // The error re-enters the tape as observed − hc so
                    // gradient flows back through the feedback loop.
                    let mut obs_col = Array2::zeros((rows, 1));
                    let mut vis_col = Array2::zeros((rows, 1));
                    for r in 0..rows {
                        let rec = &self.recs[b.slots[r]];
                        if t < self.cutoffs[b.slots[r]] {
                            if let Some(&obs) = rec.obs.get(&t) {
                                obs_col[[r, 0]] = obs;
                                vis_col[[r, 0]] = 1.0;
                            }
                        }
                    }
                    let obs_c = tape.constant(obs_col);
                    let vis_c = tape.constant(vis_col);
                    let d = tape.sub(obs_c, hc);
                    tape.mul(d, vis_c)
                }
            };
        }

        let pred = tape.concat_cols(&cols);
        let loss = masked_mse(&mut tape, pred, &b.target, &b.mask);
        let loss_value = tape.value(loss)[[0, 0]];
        let grads = tape.backward_checked(loss).map_err(|op| TrainError::NonFinite { op })?;
        Ok((loss_value, net.gradients(&tape, &grads)))
    }

    /// Pooled masked MSE of the adapted *hard* rollout over the
    /// validation seasons, with every observation visible — the
    /// working condition the EEN is deployed in.
    fn val_loss(&mut self, params: &EenWeights) -> Result<Option<f64>, TrainError> {
        if self.val.is_empty() {
            return Ok(None);
        }
        let mut sse = 0.0;
        let mut n = 0usize;
        for case in &self.val {
            let roll = adapt_rollout_inputs(
                &self.base,
                params,
                &case.inputs,
                &case.tmean,
                case.cultivar,
                &case.obs,
            )?;
            for (t, (&truth, &seen)) in case.target.iter().zip(&case.mask).enumerate() {
                if seen {
                    let d = roll.states.values[t] - truth;
                    sse += d * d;
                    n += 1;
                }
            }
        }
        if n == 0 {
            return Ok(None);
        }
        Ok(Some(sse / n as f64))
    }
}

/// Fit an EEN against a frozen backbone. Returns the optimizer outcome
/// and the best weights it found.
pub fn train_een(
    base: &DmcModel,
    een: &EenWeights,
    dataset: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
    train_cfg: &TrainConfig,
    een_cfg: &EenTrainConfig,
) -> Result<(TrainOutcome<EenWeights>, EenWeights), TrainError> {
    let mut objective =
        EenObjective::new(base, een, dataset, train_idx, val_idx, train_cfg, een_cfg)?;
    let outcome = train(&mut objective, een.clone(), train_cfg)?;
    let best = outcome.best_params.clone();
    Ok((outcome, best))
}
