//! Labeled synthetic datasets rolled from the biophysical oracles.
//!
//! A cultivar table holds one static parameter vector per cultivar;
//! the generator rolls the matching oracle over per-season weather to
//! produce daily ground truth, masks hardiness labels down to the
//! field-sampling density, and (optionally) modulates one parameter
//! with an exogenous weather signal so the data-generating process is
//! genuinely nonstationary while its Bayes-optimal error stays zero.
//! Everything is a pure function of the seed and the inputs, so a
//! dataset can always be regenerated bit-for-bit from its metadata.

use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::biophys::{
    ferguson_rollout_tmean, gdd_rollout_tmean, BiophysError, FergusonParams, GddParams, ParamTable,
};
use crate::dataset::{CropKind, CropStateSeries, Dataset, SeasonRecord};
use crate::weather::{SeasonWindow, WeatherSeries};

/// Highest stage index the observable transitions cover (budburst,
/// bloom, veraison). Oracle rollouts may run past it; labels are capped
/// here so truth stays inside the range the calibrated models express.
pub const MAX_LABEL_STAGE: f64 = 3.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("bad generator config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Biophys(#[from] BiophysError),
    #[error("weather series {location} {season} lacks feature \"{feature}\"")]
    MissingFeature { location: String, season: i32, feature: String },
    #[error("no parameter named {0} in this model's table")]
    UnknownParam(String),
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("dataset format: {0}")]
    Format(String),
}

// ---------------------------------------------------------------------------
// Cultivar tables
// ---------------------------------------------------------------------------

/// Where a cultivar table came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum TableProvenance {
    /// Drawn by [`sample_cultivars`].
    Sampled { seed: u64, shrink: f64 },
    /// Loaded from a user-supplied file.
    File { path: String },
}

/// Static per-cultivar parameter vectors for one model kind, in
/// [`ParamTable`] column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CultivarTable {
    pub kind: CropKind,
    pub names: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
    pub provenance: TableProvenance,
}

impl CultivarTable {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Every vector inside its spec range, shapes consistent.
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.names.len() != self.vectors.len() {
            return Err(SynthError::BadConfig(format!(
                "{} names for {} vectors",
                self.names.len(),
                self.vectors.len()
            )));
        }
        let table = ParamTable::for_kind(self.kind);
        for (name, vec) in self.names.iter().zip(&self.vectors) {
            if vec.len() != table.len() {
                return Err(SynthError::BadConfig(format!(
                    "cultivar {name} has {} parameters; the {} table has {}",
                    vec.len(),
                    self.kind.as_str(),
                    table.len()
                )));
            }
            table.validate(vec)?;
        }
        Ok(())
    }

    /// Typed phenology parameters for one cultivar.
    pub fn gdd_params(&self, cultivar: usize) -> GddParams {
        GddParams::from_slice(&self.vectors[cultivar])
    }

    /// Typed hardiness parameters for one cultivar.
    pub fn ferguson_params(&self, cultivar: usize) -> FergusonParams {
        FergusonParams::from_slice(&self.vectors[cultivar])
    }

    pub fn save(&self, path: &Path) -> Result<(), SynthError> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| SynthError::Format(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let text = fs::read_to_string(path)?;
        let table: CultivarTable =
            serde_json::from_str(&text).map_err(|e| SynthError::Format(e.to_string()))?;
        table.validate()?;
        Ok(table)
    }
}

/// Draw `n` cultivar parameter vectors uniformly from midpoint ±
/// `shrink` × half-width per parameter, so every sample sits strictly
/// inside its range and `shrink = 0` collapses to the midpoints.
pub fn sample_cultivars(
    kind: CropKind,
    n: usize,
    shrink: f64,
    seed: u64,
) -> Result<CultivarTable, SynthError> {
    if !(0.0..=1.0).contains(&shrink) {
        return Err(SynthError::BadConfig(format!("shrink {shrink} outside [0, 1]")));
    }
    if n == 0 {
        return Err(SynthError::BadConfig("cannot sample an empty table".into()));
    }
    let table = ParamTable::for_kind(kind);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut names = Vec::with_capacity(n);
    let mut vectors = Vec::with_capacity(n);
    for c in 0..n {
        names.push(format!("cv{c:02}"));
        let vector = table
            .specs
            .iter()
            .map(|spec| {
                let half = 0.5 * (spec.max - spec.min);
                let u: f64 = rng.random();
                spec.midpoint() + (2.0 * u - 1.0) * shrink * half
            })
            .collect();
        vectors.push(vector);
    }
    let out = CultivarTable {
        kind,
        names,
        vectors,
        provenance: TableProvenance::Sampled { seed, shrink },
    };
    out.validate()?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Observation masks
// ---------------------------------------------------------------------------

/// How hardiness labels are thinned to the field-sampling density.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum MaskMode {
    /// Each day retained independently with probability 1 − mask_frac.
    Iid,
    /// One visit every `cadence` days, phase drawn per season; the
    /// retained fraction is 1/cadence regardless of mask_frac.
    Weekly { cadence: usize },
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One RNG per (cultivar, season slot), independent of every other
/// record's draws, so the mask for a record never shifts when the
/// dataset grows.
fn record_rng(seed: u64, cultivar: usize, series_idx: usize) -> ChaCha20Rng {
    let mixed = splitmix64(
        splitmix64(seed ^ u64::from_le_bytes(*b"synthgen")).wrapping_add(cultivar as u64),
    )
    .wrapping_add(series_idx as u64);
    ChaCha20Rng::seed_from_u64(splitmix64(mixed))
}

fn draw_mask(rng: &mut ChaCha20Rng, days: usize, mask_frac: f64, mode: MaskMode) -> Vec<bool> {
    match mode {
        MaskMode::Iid => (0..days).map(|_| rng.random::<f64>() >= mask_frac).collect(),
        MaskMode::Weekly { cadence } => {
            let phase = rng.random_range(0..cadence.max(1));
            (0..days).map(|d| d % cadence.max(1) == phase).collect()
        }
    }
}

// ---------------------------------------------------------------------------
// Nonstationary modulation
// ---------------------------------------------------------------------------

/// Exogenous signal a modulated parameter follows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModulationDriver {
    /// Z-score of season-to-date cumulative rainfall.
    CumulativeRainZscore,
}

/// Bounded daily perturbation of one biophysical parameter:
/// `p_t = clamp(p + amplitude · tanh(z_t))` with `z_t` from the driver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Modulation {
    pub param: String,
    pub amplitude: f64,
    pub driver: ModulationDriver,
}

/// The daily additive perturbation the rule produces over one season.
/// Deterministic in the weather, so storing the rule is enough to
/// reconstruct the trace (and therefore the labels) exactly.
pub fn modulation_trace(
    modulation: &Modulation,
    weather: &WeatherSeries,
) -> Result<Vec<f64>, SynthError> {
    match modulation.driver {
        ModulationDriver::CumulativeRainZscore => {
            let rain = weather.feature("rain").ok_or_else(|| SynthError::MissingFeature {
                location: weather.location_id.clone(),
                season: weather.season,
                feature: "rain".into(),
            })?;
            let mut cum = Vec::with_capacity(rain.len());
            let mut acc = 0.0;
            for r in &rain {
                acc += r;
                cum.push(acc);
            }
            let n = cum.len() as f64;
            let mean = cum.iter().sum::<f64>() / n;
            let var = cum.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            Ok(cum
                .iter()
                .map(|&c| {
                    let z = if sd > 0.0 { (c - mean) / sd } else { 0.0 };
                    modulation.amplitude * z.tanh()
                })
                .collect())
        }
    }
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// A phenology season that never reached one of the observable
/// transitions under its weather; reported so the caller can resample
/// the cultivar or accept the partial season.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncompleteSeason {
    pub cultivar: String,
    pub season: i32,
    pub location: String,
    /// Stage index (1..=3) whose onset is missing.
    pub missing_stage: u8,
}

/// Generator inputs persisted alongside the data; regeneration from
/// this metadata (plus the same weather) is bitwise-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthMeta {
    pub kind: CropKind,
    pub seed: u64,
    pub mask_frac: f64,
    pub mask_mode: MaskMode,
    pub table: CultivarTable,
    pub modulation: Option<Modulation>,
}

/// A generated dataset plus its reproduction metadata and generation
/// diagnostics.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub dataset: Dataset,
    pub meta: SynthMeta,
    pub incomplete: Vec<IncompleteSeason>,
    /// Days on which a modulated parameter hit its range edge and was
    /// clamped (summed over all records).
    pub clamped_days: usize,
}

/// Roll the oracle for every (cultivar, season) pair. Phenology truth
/// is the daily stage capped at the observable transitions and fully
/// observed; hardiness truth is daily LTE50 thinned by the mask.
pub fn generate(
    kind: CropKind,
    table: &CultivarTable,
    weather: &[WeatherSeries],
    mask_frac: f64,
    mask_mode: MaskMode,
    seed: u64,
) -> Result<SynthDataset, SynthError> {
    generate_impl(kind, table, weather, mask_frac, mask_mode, seed, None)
}

/// [`generate`] with one parameter modulated daily by an exogenous
/// weather signal. The modulation rule is stored in the metadata, so
/// the nonstationary truth is exactly reconstructible; a static
/// calibration cannot fit it, while a weather-driven one can.
pub fn generate_nonstationary(
    kind: CropKind,
    table: &CultivarTable,
    weather: &[WeatherSeries],
    modulation: &Modulation,
    mask_frac: f64,
    mask_mode: MaskMode,
    seed: u64,
) -> Result<SynthDataset, SynthError> {
    generate_impl(kind, table, weather, mask_frac, mask_mode, seed, Some(modulation))
}

fn generate_impl(
    kind: CropKind,
    table: &CultivarTable,
    weather: &[WeatherSeries],
    mask_frac: f64,
    mask_mode: MaskMode,
    seed: u64,
    modulation: Option<&Modulation>,
) -> Result<SynthDataset, SynthError> {
    if table.kind != kind {
        return Err(SynthError::BadConfig(format!(
            "table is for {}, generator asked for {}",
            table.kind.as_str(),
            kind.as_str()
        )));
    }
    table.validate()?;
    if !(0.0..=1.0).contains(&mask_frac) {
        return Err(SynthError::BadConfig(format!("mask_frac {mask_frac} outside [0, 1]")));
    }
    if weather.is_empty() {
        return Err(SynthError::BadConfig("no weather seasons supplied".into()));
    }
    let param_table = ParamTable::for_kind(kind);
    let mod_index = match modulation {
        Some(m) => Some(
            param_table
                .index_of(&m.param)
                .ok_or_else(|| SynthError::UnknownParam(m.param.clone()))?,
        ),
        None => None,
    };

    let mut records = Vec::with_capacity(weather.len() * table.len());
    let mut incomplete = Vec::new();
    let mut clamped_days = 0usize;

    for (wi, series) in weather.iter().enumerate() {
        let tmean = series.tmean();
        let trace = match modulation {
            Some(m) => Some(modulation_trace(m, series)?),
            None => None,
        };
        for cultivar in 0..table.len() {
            let base = &table.vectors[cultivar];
            let mut truth = match (&trace, mod_index) {
                (Some(trace), Some(j)) => {
                    let spec = &param_table.specs[j];
                    let per_day: Vec<Vec<f64>> = trace
                        .iter()
                        .map(|&dv| {
                            let mut v = base.clone();
                            let raw = v[j] + dv;
                            let clamped = raw.clamp(spec.min, spec.max);
                            if clamped != raw {
                                clamped_days += 1;
                            }
                            v[j] = clamped;
                            v
                        })
                        .collect();
                    roll_oracle(kind, &tmean, &per_day)?
                }
                _ => roll_oracle_static(kind, &tmean, base)?,
            };

            match kind {
                CropKind::Phenology => {
                    for v in &mut truth.values {
                        *v = v.min(MAX_LABEL_STAGE);
                    }
                    truth.rebuild_onsets();
                    for stage in 1..=MAX_LABEL_STAGE as u8 {
                        if !truth.onsets.contains_key(&stage) {
                            incomplete.push(IncompleteSeason {
                                cultivar: table.names[cultivar].clone(),
                                season: series.season,
                                location: series.location_id.clone(),
                                missing_stage: stage,
                            });
                        }
                    }
                }
                CropKind::Hardiness => {
                    let mut rng = record_rng(seed, cultivar, wi);
                    truth.observed = draw_mask(&mut rng, truth.len(), mask_frac, mask_mode);
                }
            }

            records.push(SeasonRecord {
                cultivar,
                season: series.season,
                location: series.location_id.clone(),
                weather: series.clone(),
                truth,
            });
        }
    }

    Ok(SynthDataset {
        dataset: Dataset { cultivars: table.names.clone(), records },
        meta: SynthMeta {
            kind,
            seed,
            mask_frac,
            mask_mode,
            table: table.clone(),
            modulation: modulation.cloned(),
        },
        incomplete,
        clamped_days,
    })
}

fn roll_oracle_static(
    kind: CropKind,
    tmean: &[f64],
    vector: &[f64],
) -> Result<CropStateSeries, SynthError> {
    Ok(match kind {
        CropKind::Phenology => gdd_rollout_tmean(tmean, &[GddParams::from_slice(vector)])?,
        CropKind::Hardiness => {
            ferguson_rollout_tmean(tmean, &[FergusonParams::from_slice(vector)])?
        }
    })
}

fn roll_oracle(
    kind: CropKind,
    tmean: &[f64],
    per_day: &[Vec<f64>],
) -> Result<CropStateSeries, SynthError> {
    Ok(match kind {
        CropKind::Phenology => {
            let params: Vec<GddParams> =
                per_day.iter().map(|v| GddParams::from_slice(v)).collect();
            gdd_rollout_tmean(tmean, &params)?
        }
        CropKind::Hardiness => {
            let params: Vec<FergusonParams> =
                per_day.iter().map(|v| FergusonParams::from_slice(v)).collect();
            ferguson_rollout_tmean(tmean, &params)?
        }
    })
}

// ---------------------------------------------------------------------------
// Disk format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ManifestRow {
    cultivar: String,
    season: i32,
    location: String,
    file: String,
}

/// Write `meta.json`, `manifest.json`, and one CSV per record under
/// `dir/data/`. Floats are printed in shortest-round-trip form, so a
/// load reproduces every value bit for bit.
pub fn save_dataset(dir: &Path, synth: &SynthDataset) -> Result<(), SynthError> {
    let data_dir = dir.join("data");
    fs::create_dir_all(&data_dir)?;

    let meta = serde_json::to_string_pretty(&synth.meta)
        .map_err(|e| SynthError::Format(e.to_string()))?;
    fs::write(dir.join("meta.json"), meta)?;

    let mut manifest = Vec::with_capacity(synth.dataset.records.len());
    for (i, rec) in synth.dataset.records.iter().enumerate() {
        let name = &synth.dataset.cultivars[rec.cultivar];
        let file = format!("{i:04}_{}_{}_{}.csv", name, rec.location, rec.season);
        manifest.push(ManifestRow {
            cultivar: name.clone(),
            season: rec.season,
            location: rec.location.clone(),
            file: file.clone(),
        });

        let mut w = csv::Writer::from_path(data_dir.join(&file))?;
        let mut header = vec!["date".to_string()];
        header.extend(rec.weather.features.iter().cloned());
        header.push("value".into());
        header.push("observed".into());
        w.write_record(&header).map_err(|e| SynthError::Format(e.to_string()))?;
        for d in 0..rec.weather.len() {
            let mut row = vec![rec.weather.dates[d].to_string()];
            for j in 0..rec.weather.features.len() {
                row.push(format!("{}", rec.weather.data[[d, j]]));
            }
            row.push(format!("{}", rec.truth.values[d]));
            row.push(if rec.truth.observed[d] { "1".into() } else { "0".into() });
            w.write_record(&row).map_err(|e| SynthError::Format(e.to_string()))?;
        }
        w.flush()?;
    }

    let manifest_text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| SynthError::Format(e.to_string()))?;
    fs::write(dir.join("manifest.json"), manifest_text)?;
    Ok(())
}

/// Read a dataset written by [`save_dataset`]. Onsets are rebuilt from
/// the stored daily stages; diagnostics (incomplete seasons, clamp
/// counts) are not persisted and come back empty.
pub fn load_dataset(dir: &Path) -> Result<SynthDataset, SynthError> {
    let meta: SynthMeta =
        serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)
            .map_err(|e| SynthError::Format(e.to_string()))?;
    let manifest: Vec<ManifestRow> =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)
            .map_err(|e| SynthError::Format(e.to_string()))?;
    let window = match meta.kind {
        CropKind::Phenology => SeasonWindow::Phenology,
        CropKind::Hardiness => SeasonWindow::Dormancy,
    };

    let mut records = Vec::with_capacity(manifest.len());
    for row in &manifest {
        let cultivar = meta
            .table
            .names
            .iter()
            .position(|n| n == &row.cultivar)
            .ok_or_else(|| SynthError::Format(format!("unknown cultivar {}", row.cultivar)))?;
        let path = dir.join("data").join(&row.file);
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(&path)?;
        let header = reader
            .headers()
            .map_err(|e| SynthError::Format(e.to_string()))?
            .clone();
        let n_cols = header.len();
        if n_cols < 3 {
            return Err(SynthError::Format(format!("{}: too few columns", row.file)));
        }
        let features: Vec<String> =
            header.iter().skip(1).take(n_cols - 3).map(|s| s.to_string()).collect();

        let mut dates = Vec::new();
        let mut cells: Vec<f64> = Vec::new();
        let mut values = Vec::new();
        let mut observed = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| SynthError::Format(e.to_string()))?;
            let date: NaiveDate = record[0]
                .parse()
                .map_err(|_| SynthError::Format(format!("{}: bad date {}", row.file, &record[0])))?;
            dates.push(date);
            for j in 1..=features.len() {
                cells.push(parse_f64(&record[j], &row.file)?);
            }
            values.push(parse_f64(&record[features.len() + 1], &row.file)?);
            observed.push(&record[features.len() + 2] == "1");
        }
        let days = dates.len();
        let data = Array2::from_shape_vec((days, features.len()), cells)
            .map_err(|e| SynthError::Format(e.to_string()))?;
        let missing = Array2::from_elem((days, features.len()), false);
        let weather = WeatherSeries {
            location_id: row.location.clone(),
            window,
            season: row.season,
            dates,
            features,
            data,
            missing,
        };
        let mut truth = CropStateSeries { kind: meta.kind, values, observed, onsets: Default::default() };
        if meta.kind == CropKind::Phenology {
            truth.rebuild_onsets();
        }
        records.push(SeasonRecord {
            cultivar,
            season: row.season,
            location: row.location.clone(),
            weather,
            truth,
        });
    }

    Ok(SynthDataset {
        dataset: Dataset { cultivars: meta.table.names.clone(), records },
        meta,
        incomplete: Vec::new(),
        clamped_days: 0,
    })
}

fn parse_f64(text: &str, file: &str) -> Result<f64, SynthError> {
    text.parse::<f64>()
        .map_err(|_| SynthError::Format(format!("{file}: bad float {text}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weather::{simulate_weather, ClimateProfile};

    fn warm_seasons(n: usize) -> Vec<WeatherSeries> {
        // CA is hot enough that midpoint-sized degree-day sums complete
        // all three observable transitions inside the window.
        let p = ClimateProfile::named("CA");
        (0..n)
            .map(|i| simulate_weather(900 + i as u64, &p, 2015 + i as i32, SeasonWindow::Phenology))
            .collect()
    }

    fn dormancy_seasons(n: usize) -> Vec<WeatherSeries> {
        let p = ClimateProfile::default();
        (0..n)
            .map(|i| simulate_weather(300 + i as u64, &p, 2015 + i as i32, SeasonWindow::Dormancy))
            .collect()
    }

    #[test]
    fn same_seed_samples_the_same_table_and_respects_ranges() {
        let a = sample_cultivars(CropKind::Phenology, 31, 0.6, 9).unwrap();
        let b = sample_cultivars(CropKind::Phenology, 31, 0.6, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 31);
        a.validate().unwrap();
        // Distinct vectors (the frozen rate columns aside, every
        // parameter varies).
        for i in 0..a.len() {
            for j in i + 1..a.len() {
                assert_ne!(a.vectors[i], a.vectors[j], "cultivars {i} and {j} collided");
            }
        }
        let c = sample_cultivars(CropKind::Phenology, 31, 0.6, 10).unwrap();
        assert_ne!(a.vectors, c.vectors);
    }

    #[test]
    fn zero_shrink_collapses_every_cultivar_to_the_midpoints() {
        let t = sample_cultivars(CropKind::Hardiness, 5, 0.0, 4).unwrap();
        let table = ParamTable::for_kind(CropKind::Hardiness);
        let mids: Vec<f64> = table.specs.iter().map(|s| s.midpoint()).collect();
        for v in &t.vectors {
            assert_eq!(v, &mids);
        }
    }

    #[test]
    fn hardiness_masking_retains_the_target_fraction() {
        let table = sample_cultivars(CropKind::Hardiness, 4, 0.5, 2).unwrap();
        let weather = dormancy_seasons(3);
        let synth =
            generate(CropKind::Hardiness, &table, &weather, 0.88, MaskMode::Iid, 77).unwrap();
        let (mut kept, mut days) = (0usize, 0usize);
        for rec in &synth.dataset.records {
            kept += rec.truth.observed_count();
            days += rec.truth.len();
        }
        let frac = kept as f64 / days as f64;
        assert!(
            (frac - 0.12).abs() < 0.02,
            "retained {frac:.4}, wanted 0.12 ± 0.02 over {days} days"
        );

        // No masking leaves everything observed.
        let dense =
            generate(CropKind::Hardiness, &table, &weather, 0.0, MaskMode::Iid, 77).unwrap();
        for rec in &dense.dataset.records {
            assert_eq!(rec.truth.observed_count(), rec.truth.len());
        }
    }

    #[test]
    fn weekly_cadence_visits_every_seventh_day() {
        let table = sample_cultivars(CropKind::Hardiness, 2, 0.5, 2).unwrap();
        let weather = dormancy_seasons(1);
        let synth = generate(
            CropKind::Hardiness,
            &table,
            &weather,
            0.88,
            MaskMode::Weekly { cadence: 7 },
            5,
        )
        .unwrap();
        for rec in &synth.dataset.records {
            let seen: Vec<usize> = rec
                .truth
                .observed
                .iter()
                .enumerate()
                .filter(|(_, &o)| o)
                .map(|(d, _)| d)
                .collect();
            assert!(!seen.is_empty());
            for pair in seen.windows(2) {
                assert_eq!(pair[1] - pair[0], 7);
            }
        }
    }

    #[test]
    fn labels_re_roll_exactly_from_the_stored_weather() {
        let table = sample_cultivars(CropKind::Phenology, 3, 0.4, 11).unwrap();
        let weather = warm_seasons(2);
        let synth =
            generate(CropKind::Phenology, &table, &weather, 0.0, MaskMode::Iid, 1).unwrap();
        assert_eq!(synth.dataset.records.len(), 6);
        for rec in &synth.dataset.records {
            let p = table.gdd_params(rec.cultivar);
            let re = gdd_rollout_tmean(&rec.weather.tmean(), &[p]).unwrap();
            let capped: Vec<f64> =
                re.values.iter().map(|v| v.min(MAX_LABEL_STAGE)).collect();
            assert_eq!(rec.truth.values, capped);
            assert!(rec.truth.values.iter().all(|&v| v <= MAX_LABEL_STAGE));
        }
    }

    #[test]
    fn regeneration_is_bitwise_identical() {
        let table = sample_cultivars(CropKind::Hardiness, 3, 0.5, 21).unwrap();
        let weather = dormancy_seasons(2);
        let a = generate(CropKind::Hardiness, &table, &weather, 0.88, MaskMode::Iid, 13).unwrap();
        let b = generate(CropKind::Hardiness, &table, &weather, 0.88, MaskMode::Iid, 13).unwrap();
        assert_eq!(a.meta, b.meta);
        for (ra, rb) in a.dataset.records.iter().zip(&b.dataset.records) {
            assert_eq!(ra.truth.observed, rb.truth.observed);
            for (x, y) in ra.truth.values.iter().zip(&rb.truth.values) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        // A different seed moves the masks.
        let c = generate(CropKind::Hardiness, &table, &weather, 0.88, MaskMode::Iid, 14).unwrap();
        assert!(a
            .dataset
            .records
            .iter()
            .zip(&c.dataset.records)
            .any(|(x, y)| x.truth.observed != y.truth.observed));
    }

    #[test]
    fn zero_amplitude_modulation_matches_the_plain_generator() {
        let table = sample_cultivars(CropKind::Phenology, 2, 0.4, 3).unwrap();
        let weather = warm_seasons(2);
        let rule = Modulation {
            param: "tbasem".into(),
            amplitude: 0.0,
            driver: ModulationDriver::CumulativeRainZscore,
        };
        let plain =
            generate(CropKind::Phenology, &table, &weather, 0.0, MaskMode::Iid, 8).unwrap();
        let modded = generate_nonstationary(
            CropKind::Phenology,
            &table,
            &weather,
            &rule,
            0.0,
            MaskMode::Iid,
            8,
        )
        .unwrap();
        assert_eq!(modded.clamped_days, 0);
        for (ra, rb) in plain.dataset.records.iter().zip(&modded.dataset.records) {
            for (x, y) in ra.truth.values.iter().zip(&rb.truth.values) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn rainfall_modulation_moves_labels_and_reconstructs_from_the_rule() {
        let table = sample_cultivars(CropKind::Phenology, 2, 0.4, 3).unwrap();
        let weather = warm_seasons(2);
        let rule = Modulation {
            param: "tbasem".into(),
            amplitude: 2.0,
            driver: ModulationDriver::CumulativeRainZscore,
        };
        let plain =
            generate(CropKind::Phenology, &table, &weather, 0.0, MaskMode::Iid, 8).unwrap();
        let modded = generate_nonstationary(
            CropKind::Phenology,
            &table,
            &weather,
            &rule,
            0.0,
            MaskMode::Iid,
            8,
        )
        .unwrap();
        let moved = plain
            .dataset
            .records
            .iter()
            .zip(&modded.dataset.records)
            .any(|(a, b)| a.truth.onsets != b.truth.onsets);
        assert!(moved, "±2 °C on tbasem never moved an onset");

        // The stored rule reconstructs the modulated labels exactly.
        let jt = ParamTable::for_kind(CropKind::Phenology).index_of("tbasem").unwrap();
        for rec in &modded.dataset.records {
            let trace = modulation_trace(&rule, &rec.weather).unwrap();
            let spec = &ParamTable::for_kind(CropKind::Phenology).specs[jt];
            let base = &table.vectors[rec.cultivar];
            let per_day: Vec<GddParams> = trace
                .iter()
                .map(|&dv| {
                    let mut v = base.clone();
                    v[jt] = (v[jt] + dv).clamp(spec.min, spec.max);
                    GddParams::from_slice(&v)
                })
                .collect();
            let re = gdd_rollout_tmean(&rec.weather.tmean(), &per_day).unwrap();
            let capped: Vec<f64> =
                re.values.iter().map(|v| v.min(MAX_LABEL_STAGE)).collect();
            assert_eq!(rec.truth.values, capped);
        }
    }

    #[test]
    fn amplitudes_beyond_the_range_clamp_and_are_counted() {
        let table = sample_cultivars(CropKind::Phenology, 1, 0.0, 3).unwrap();
        let weather = warm_seasons(1);
        let rule = Modulation {
            param: "tbasem".into(),
            amplitude: 50.0,
            driver: ModulationDriver::CumulativeRainZscore,
        };
        let synth = generate_nonstationary(
            CropKind::Phenology,
            &table,
            &weather,
            &rule,
            0.0,
            MaskMode::Iid,
            8,
        )
        .unwrap();
        assert!(synth.clamped_days > 0);
        // Labels remain valid stages even so.
        for rec in &synth.dataset.records {
            assert!(rec.truth.values.iter().all(|&v| (0.0..=MAX_LABEL_STAGE).contains(&v)));
        }
    }

    #[test]
    fn unreachable_transitions_are_reported_not_dropped() {
        // The default profile is too cool for midpoint-sized sums to
        // finish veraison inside the window.
        let table = sample_cultivars(CropKind::Phenology, 2, 0.0, 6).unwrap();
        let p = ClimateProfile::default();
        let weather =
            vec![simulate_weather(41, &p, 2018, SeasonWindow::Phenology)];
        let synth =
            generate(CropKind::Phenology, &table, &weather, 0.0, MaskMode::Iid, 2).unwrap();
        assert!(!synth.incomplete.is_empty(), "expected missing-onset reports");
        assert_eq!(synth.dataset.records.len(), 2, "partial seasons stay in the dataset");
        for inc in &synth.incomplete {
            assert!((1..=3).contains(&inc.missing_stage));
        }
    }

    #[test]
    fn disk_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let table = sample_cultivars(CropKind::Hardiness, 2, 0.5, 2).unwrap();
        let weather = dormancy_seasons(2);
        let synth =
            generate(CropKind::Hardiness, &table, &weather, 0.88, MaskMode::Iid, 31).unwrap();
        save_dataset(dir.path(), &synth).unwrap();
        let back = load_dataset(dir.path()).unwrap();

        assert_eq!(back.meta, synth.meta);
        assert_eq!(back.dataset.cultivars, synth.dataset.cultivars);
        assert_eq!(back.dataset.records.len(), synth.dataset.records.len());
        for (a, b) in synth.dataset.records.iter().zip(&back.dataset.records) {
            assert_eq!(a.cultivar, b.cultivar);
            assert_eq!(a.season, b.season);
            assert_eq!(a.location, b.location);
            assert_eq!(a.weather.dates, b.weather.dates);
            assert_eq!(a.weather.features, b.weather.features);
            for (x, y) in a.weather.data.iter().zip(b.weather.data.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            assert_eq!(a.truth.observed, b.truth.observed);
            for (x, y) in a.truth.values.iter().zip(&b.truth.values) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn cultivar_table_files_round_trip_and_reject_bad_vectors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("table.json");
        let table = sample_cultivars(CropKind::Phenology, 4, 0.7, 15).unwrap();
        table.save(&path).unwrap();
        let back = CultivarTable::load(&path).unwrap();
        assert_eq!(back, table);

        let mut bad = table.clone();
        bad.vectors[1][0] = 99.0; // tbasem range is [0, 15]
        bad.save(&path).unwrap();
        assert!(CultivarTable::load(&path).is_err());
    }

    #[test]
    fn mismatched_kind_and_unknown_param_are_rejected() {
        let table = sample_cultivars(CropKind::Phenology, 2, 0.4, 3).unwrap();
        let weather = dormancy_seasons(1);
        let err = generate(CropKind::Hardiness, &table, &weather, 0.5, MaskMode::Iid, 1);
        assert!(matches!(err, Err(SynthError::BadConfig(_))));

        let rule = Modulation {
            param: "nonesuch".into(),
            amplitude: 1.0,
            driver: ModulationDriver::CumulativeRainZscore,
        };
        let err = generate_nonstationary(
            CropKind::Phenology,
            &table,
            &warm_seasons(1),
            &rule,
            0.0,
            MaskMode::Iid,
            1,
        );
        assert!(matches!(err, Err(SynthError::UnknownParam(_))));
    }
}
