//! Daily weather series: ingest, cleaning, normalization, synthesis,
//! and the NASA POWER fetch client.
//!
//! Feature layout is schema-driven rather than hard-coded: a JSON
//! schema maps feature names to CSV columns, so the real-data profile
//! (14 features) and the synthetic profile (9) share one loader. A
//! [`WeatherSeries`] stores one season as a days x features matrix with
//! a missing-value mask; the calendar date itself lives alongside the
//! matrix and enters model inputs as a periodic (sin, cos) embedding at
//! normalization time.

mod fetch;
mod sim;

pub use fetch::{fetch_weather, seasons_from_records, FetchConfig, Transport};
pub use sim::{simulate_weather, simulate_years, ClimateProfile};

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{Datelike, Days, NaiveDate};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WeatherError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("duplicate date {date} for location {location}")]
    DuplicateDate { date: NaiveDate, location: String },
    #[error("schema column '{column}' (feature '{feature}') not in header")]
    MissingColumn { feature: String, column: String },
    #[error("bad schema: {0}")]
    BadSchema(String),
    #[error("http fetch failed after retries: {0}")]
    Http(String),
    #[error("weather service response missing '{0}'")]
    SchemaDrift(String),
    #[error("no cached data for {0} and network unavailable")]
    EmptyCache(String),
}

/// One day of weather in the canonical field layout. Fields a profile
/// does not provide are NaN.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeatherRecord {
    pub date: NaiveDate,
    pub tmin: f64,
    pub tmax: f64,
    pub tmean: f64,
    pub hmin: f64,
    pub hmax: f64,
    pub hmean: f64,
    pub dmin: f64,
    pub dmax: f64,
    pub dmean: f64,
    pub solar: f64,
    pub rain: f64,
    pub wind: f64,
    /// Reference evapotranspiration, mm.
    pub et_ref: f64,
    /// Potential evapotranspiration, mm.
    pub et_pot: f64,
    /// Astronomical day length, hours.
    pub day_length: f64,
}

impl WeatherRecord {
    pub fn nan(date: NaiveDate) -> Self {
        Self {
            date,
            tmin: f64::NAN,
            tmax: f64::NAN,
            tmean: f64::NAN,
            hmin: f64::NAN,
            hmax: f64::NAN,
            hmean: f64::NAN,
            dmin: f64::NAN,
            dmax: f64::NAN,
            dmean: f64::NAN,
            solar: f64::NAN,
            rain: f64::NAN,
            wind: f64::NAN,
            et_ref: f64::NAN,
            et_pot: f64::NAN,
            day_length: f64::NAN,
        }
    }

    pub fn get(&self, feature: &str) -> Option<f64> {
        Some(match feature {
            "tmin" => self.tmin,
            "tmax" => self.tmax,
            "tmean" => self.tmean,
            "hmin" => self.hmin,
            "hmax" => self.hmax,
            "hmean" => self.hmean,
            "dmin" => self.dmin,
            "dmax" => self.dmax,
            "dmean" => self.dmean,
            "solar" => self.solar,
            "rain" => self.rain,
            "wind" => self.wind,
            "et_ref" => self.et_ref,
            "et_pot" => self.et_pot,
            "day_length" => self.day_length,
            _ => return None,
        })
    }

    /// Check the physical invariants on whichever fields are present.
    pub fn validate(&self) -> Result<(), String> {
        let ord = |a: f64, b: f64, msg: &str| -> Result<(), String> {
            if !a.is_nan() && !b.is_nan() && a > b {
                Err(format!("{msg} ({a} > {b}) on {}", self.date))
            } else {
                Ok(())
            }
        };
        ord(self.tmin, self.tmean, "tmin > tmean")?;
        ord(self.tmean, self.tmax, "tmean > tmax")?;
        for (name, v, lo, hi) in [
            ("rain", self.rain, 0.0, f64::INFINITY),
            ("solar", self.solar, 0.0, f64::INFINITY),
            ("hmin", self.hmin, 0.0, 100.0),
            ("hmax", self.hmax, 0.0, 100.0),
            ("hmean", self.hmean, 0.0, 100.0),
        ] {
            if !v.is_nan() && !(lo..=hi).contains(&v) {
                return Err(format!("{name} = {v} out of [{lo}, {hi}] on {}", self.date));
            }
        }
        Ok(())
    }
}

/// Feature set of the synthetic (fetched/simulated) profile, in series
/// column order. The periodic date embedding joins at normalization
/// time, bringing the model input to 9 weather-derived features.
pub const SYNTH_FEATURES: &[&str] = &[
    "day_length",
    "tmin",
    "tmax",
    "tmean",
    "et_ref",
    "et_pot",
    "rain",
    "solar",
];

/// The two season windows crop state is modeled over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeasonWindow {
    /// Growing season, [Jan 1, Sep 7] of one calendar year.
    Phenology,
    /// Dormancy season, [Sep 7, May 15] of the following year; labeled
    /// by its start year.
    Dormancy,
}

impl SeasonWindow {
    /// First day of the season labeled `year`.
    pub fn start(self, year: i32) -> NaiveDate {
        match self {
            SeasonWindow::Phenology => NaiveDate::from_ymd_opt(year, 1, 1).unwrap(),
            SeasonWindow::Dormancy => NaiveDate::from_ymd_opt(year, 9, 7).unwrap(),
        }
    }

    /// Last day (inclusive) of the season labeled `year`.
    pub fn end(self, year: i32) -> NaiveDate {
        match self {
            SeasonWindow::Phenology => NaiveDate::from_ymd_opt(year, 9, 7).unwrap(),
            SeasonWindow::Dormancy => NaiveDate::from_ymd_opt(year + 1, 5, 15).unwrap(),
        }
    }

    /// Season label containing `date`, or None when the date falls in
    /// neither window instance (phenology excludes Sep 8 – Dec 31).
    pub fn season_of(self, date: NaiveDate) -> Option<i32> {
        let y = date.year();
        match self {
            SeasonWindow::Phenology => {
                (date >= self.start(y) && date <= self.end(y)).then_some(y)
            }
            SeasonWindow::Dormancy => {
                if date >= self.start(y) {
                    Some(y)
                } else if date <= self.end(y - 1) {
                    Some(y - 1)
                } else {
                    None
                }
            }
        }
    }
}

/// One season of daily weather: a days x features matrix plus metadata.
/// Missing cells are NaN in `data` and true in `missing`; cleaning
/// fills the values but keeps the mask, so re-cleaning reproduces the
/// same fill.
#[derive(Clone, Debug, PartialEq)]
pub struct WeatherSeries {
    pub location_id: String,
    pub window: SeasonWindow,
    pub season: i32,
    /// Strictly consecutive calendar days.
    pub dates: Vec<NaiveDate>,
    /// Feature names, one per data column.
    pub features: Vec<String>,
    /// days x features.
    pub data: Array2<f64>,
    /// days x features; true where the source had no value.
    pub missing: Array2<bool>,
}

impl WeatherSeries {
    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f == name)
    }

    /// Column of one feature's daily values.
    pub fn feature(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.feature_index(name)?;
        Some(self.data.column(j).to_vec())
    }

    /// Daily mean temperature, the biophysical models' driver. Falls
    /// back to (tmin+tmax)/2 when no mean column exists.
    pub fn tmean(&self) -> Vec<f64> {
        if let Some(t) = self.feature("tmean") {
            return t;
        }
        let tmin = self.feature("tmin").expect("series has neither tmean nor tmin");
        let tmax = self.feature("tmax").expect("series has neither tmean nor tmax");
        tmin.iter().zip(&tmax).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    /// View one day in the canonical record layout.
    pub fn record(&self, day: usize) -> WeatherRecord {
        let mut r = WeatherRecord::nan(self.dates[day]);
        for (j, name) in self.features.iter().enumerate() {
            let v = self.data[[day, j]];
            match name.as_str() {
                "tmin" => r.tmin = v,
                "tmax" => r.tmax = v,
                "tmean" => r.tmean = v,
                "hmin" => r.hmin = v,
                "hmax" => r.hmax = v,
                "hmean" => r.hmean = v,
                "dmin" => r.dmin = v,
                "dmax" => r.dmax = v,
                "dmean" => r.dmean = v,
                "solar" => r.solar = v,
                "rain" => r.rain = v,
                "wind" => r.wind = v,
                "et_ref" => r.et_ref = v,
                "et_pot" => r.et_pot = v,
                "day_length" => r.day_length = v,
                _ => {}
            }
        }
        r
    }

    /// Fraction of missing cells for feature column `j`.
    pub fn missing_fraction(&self, j: usize) -> f64 {
        let n = self.missing.nrows();
        if n == 0 {
            return 0.0;
        }
        let miss = self.missing.column(j).iter().filter(|&&m| m).count();
        miss as f64 / n as f64
    }

    /// Build a series from daily records over `[start, end]`, taking
    /// the given features. Records must cover consecutive days.
    pub fn from_records(
        location_id: &str,
        window: SeasonWindow,
        season: i32,
        records: &[WeatherRecord],
        features: &[&str],
    ) -> Self {
        let dates: Vec<NaiveDate> = records.iter().map(|r| r.date).collect();
        for pair in dates.windows(2) {
            assert_eq!(
                pair[0].checked_add_days(Days::new(1)),
                Some(pair[1]),
                "records must cover consecutive days"
            );
        }
        let n = records.len();
        let f = features.len();
        let mut data = Array2::from_elem((n, f), f64::NAN);
        let mut missing = Array2::from_elem((n, f), false);
        for (i, rec) in records.iter().enumerate() {
            for (j, name) in features.iter().enumerate() {
                let v = rec.get(name).unwrap_or(f64::NAN);
                data[[i, j]] = v;
                missing[[i, j]] = v.is_nan();
            }
        }
        Self {
            location_id: location_id.to_string(),
            window,
            season,
            dates,
            features: features.iter().map(|s| s.to_string()).collect(),
            data,
            missing,
        }
    }
}

/// Maps feature names to CSV columns. Loaded from JSON:
///
/// ```json
/// {
///   "date_column": "DATE",
///   "location_column": "SITE",
///   "features": {
///     "tmean": { "column": "MEAN_AT", "unit": "degC" }
///   }
/// }
/// ```
///
/// `location_column` is optional; without it every row belongs to one
/// location named "default". Features are ordered by name so column
/// layout is deterministic.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Schema {
    pub date_column: String,
    #[serde(default)]
    pub location_column: Option<String>,
    pub features: BTreeMap<String, ColumnSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub column: String,
    pub unit: String,
}

impl Schema {
    pub fn from_path(path: &Path) -> Result<Self, WeatherError> {
        let text = std::fs::read_to_string(path).map_err(|source| WeatherError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let schema: Schema = serde_json::from_str(&text)
            .map_err(|e| WeatherError::BadSchema(e.to_string()))?;
        if schema.features.is_empty() {
            return Err(WeatherError::BadSchema("no features declared".into()));
        }
        Ok(schema)
    }

    /// Feature names in column order (sorted, per BTreeMap).
    pub fn feature_names(&self) -> Vec<&str> {
        self.features.keys().map(|s| s.as_str()).collect()
    }

    /// The standard schema for the synthetic/fetched profile, column
    /// names equal to feature names.
    pub fn synthetic() -> Self {
        let features = SYNTH_FEATURES
            .iter()
            .map(|&name| {
                let unit = match name {
                    "day_length" => "h",
                    "tmin" | "tmax" | "tmean" => "degC",
                    "et_ref" | "et_pot" | "rain" => "mm",
                    "solar" => "MJ/m2/day",
                    _ => unreachable!(),
                };
                (name.to_string(), ColumnSpec { column: name.to_string(), unit: unit.into() })
            })
            .collect();
        Schema {
            date_column: "date".into(),
            location_column: Some("location".into()),
            features,
        }
    }
}

/// Load a CSV of daily rows and group them into per-(location, season)
/// series under the given window. Cells that are empty or `nan` are
/// recorded as missing; whole days absent inside a season's observed
/// span become all-missing rows so dates stay consecutive.
pub fn load_csv(
    path: &Path,
    schema: &Schema,
    window: SeasonWindow,
) -> Result<Vec<WeatherSeries>, WeatherError> {
    let file = std::fs::File::open(path).map_err(|source| WeatherError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);

    let headers = reader
        .headers()
        .map_err(|e| WeatherError::Parse { line: 1, msg: e.to_string() })?
        .clone();
    let col_of = |name: &str| headers.iter().position(|h| h == name);

    let date_idx = col_of(&schema.date_column).ok_or_else(|| WeatherError::MissingColumn {
        feature: "date".into(),
        column: schema.date_column.clone(),
    })?;
    let loc_idx = match &schema.location_column {
        // A declared location column may be absent from a single-site file.
        Some(c) => col_of(c),
        None => None,
    };
    let names = schema.feature_names();
    let mut feat_idx = Vec::with_capacity(names.len());
    for name in &names {
        let spec = &schema.features[*name];
        let idx = col_of(&spec.column).ok_or_else(|| WeatherError::MissingColumn {
            feature: name.to_string(),
            column: spec.column.clone(),
        })?;
        feat_idx.push(idx);
    }

    // location -> date -> feature values
    let mut by_loc: BTreeMap<String, BTreeMap<NaiveDate, Vec<f64>>> = BTreeMap::new();
    for (row_i, row) in reader.records().enumerate() {
        let line = row_i + 2; // 1-based, after the header line
        let row = row.map_err(|e| WeatherError::Parse { line, msg: e.to_string() })?;
        let date_text = row.get(date_idx).unwrap_or("");
        let date = NaiveDate::parse_from_str(date_text, "%Y-%m-%d").map_err(|e| {
            WeatherError::Parse { line, msg: format!("bad date '{date_text}': {e}") }
        })?;
        let location = loc_idx
            .and_then(|i| row.get(i))
            .filter(|s| !s.is_empty())
            .unwrap_or("default")
            .to_string();

        let mut values = Vec::with_capacity(feat_idx.len());
        for (k, &idx) in feat_idx.iter().enumerate() {
            let cell = row.get(idx).unwrap_or("").trim();
            let v = if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
                f64::NAN
            } else {
                cell.parse::<f64>().map_err(|e| WeatherError::Parse {
                    line,
                    msg: format!("feature '{}' value '{cell}': {e}", names[k]),
                })?
            };
            values.push(v);
        }

        let days = by_loc.entry(location.clone()).or_default();
        if days.insert(date, values).is_some() {
            return Err(WeatherError::DuplicateDate { date, location });
        }
    }

    let nf = names.len();
    let mut out = Vec::new();
    for (location, days) in by_loc {
        // Partition this location's dates by season label.
        let mut by_season: BTreeMap<i32, Vec<(NaiveDate, Vec<f64>)>> = BTreeMap::new();
        for (date, values) in days {
            if let Some(season) = window.season_of(date) {
                by_season.entry(season).or_default().push((date, values));
            }
        }
        for (season, rows) in by_season {
            let first = rows.first().unwrap().0;
            let last = rows.last().unwrap().0;
            let span = (last - first).num_days() as usize + 1;
            let mut data = Array2::from_elem((span, nf), f64::NAN);
            let mut missing = Array2::from_elem((span, nf), true);
            let mut dates = Vec::with_capacity(span);
            for d in 0..span {
                dates.push(first.checked_add_days(Days::new(d as u64)).unwrap());
            }
            for (date, values) in rows {
                let d = (date - first).num_days() as usize;
                for (j, v) in values.into_iter().enumerate() {
                    data[[d, j]] = v;
                    missing[[d, j]] = v.is_nan();
                }
            }
            out.push(WeatherSeries {
                location_id: location.clone(),
                window,
                season,
                dates,
                features: names.iter().map(|s| s.to_string()).collect(),
                data,
                missing,
            });
        }
    }
    Ok(out)
}

/// Outcome of [`clean_season`].
#[derive(Clone, Debug)]
pub enum CleanOutcome {
    Clean(WeatherSeries),
    /// The season is unusable: a feature exceeded the missing budget.
    Discard { feature: String, missing_fraction: f64 },
}

/// Fill missing values by linear interpolation between the nearest
/// observed neighbors (nearest-value extension at the ends), or discard
/// the season when any feature is more than 10% missing. The missing
/// mask is preserved, so cleaning an already-clean series changes
/// nothing.
pub fn clean_season(series: &WeatherSeries) -> CleanOutcome {
    const MAX_MISSING: f64 = 0.10;
    for (j, name) in series.features.iter().enumerate() {
        let frac = series.missing_fraction(j);
        if frac > MAX_MISSING {
            return CleanOutcome::Discard { feature: name.clone(), missing_fraction: frac };
        }
    }
    CleanOutcome::Clean(interpolate_missing(series))
}

/// The fill step of [`clean_season`], without the missing-budget check:
/// linear interpolation between the nearest observed neighbors, with
/// nearest-value extension past the first/last observation.
pub fn interpolate_missing(series: &WeatherSeries) -> WeatherSeries {
    let mut out = series.clone();
    let n = out.len();
    for j in 0..out.features.len() {
        let observed: Vec<(usize, f64)> = (0..n)
            .filter(|&d| !series.missing[[d, j]])
            .map(|d| (d, series.data[[d, j]]))
            .collect();
        if observed.is_empty() {
            // Fully-missing features only reach here when the series is
            // empty; nothing to fill.
            continue;
        }
        for d in 0..n {
            if !series.missing[[d, j]] {
                out.data[[d, j]] = series.data[[d, j]];
                continue;
            }
            // Nearest observed neighbors on each side.
            let before = observed.iter().rev().find(|(od, _)| *od < d);
            let after = observed.iter().find(|(od, _)| *od > d);
            out.data[[d, j]] = match (before, after) {
                (Some(&(d0, v0)), Some(&(d1, v1))) => {
                    let t = (d - d0) as f64 / (d1 - d0) as f64;
                    v0 + t * (v1 - v0)
                }
                (Some(&(_, v0)), None) => v0,
                (None, Some(&(_, v1))) => v1,
                (None, None) => unreachable!("observed is non-empty"),
            };
        }
    }
    out
}

/// Per-feature normalization statistics, fitted on training data only.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NormStats {
    pub features: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Fit mean/std per feature over every day of the given series.
    /// Constant features get std 1 so they normalize to exactly 0.
    pub fn fit(seasons: &[&WeatherSeries]) -> Self {
        assert!(!seasons.is_empty(), "cannot fit stats on an empty split");
        let features = seasons[0].features.clone();
        let nf = features.len();
        for s in seasons {
            assert_eq!(s.features, features, "season feature sets differ");
        }
        let mut mean = vec![0.0; nf];
        let mut count = 0usize;
        for s in seasons {
            for row in s.data.rows() {
                for (j, v) in row.iter().enumerate() {
                    mean[j] += v;
                }
            }
            count += s.len();
        }
        for m in &mut mean {
            *m /= count as f64;
        }
        let mut var = vec![0.0; nf];
        for s in seasons {
            for row in s.data.rows() {
                for (j, v) in row.iter().enumerate() {
                    let d = v - mean[j];
                    var[j] += d * d;
                }
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / count as f64).sqrt();
                if s < 1e-12 {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        NormStats { features, mean, std }
    }
}

/// Build the model input matrix for one season: two periodic date
/// columns followed by the z-scored features. Day-of-year is 0-based so
/// Jan 1 embeds as (0, 1).
pub fn normalize(series: &WeatherSeries, stats: &NormStats) -> Array2<f64> {
    assert_eq!(series.features, stats.features, "stats fitted on different features");
    let n = series.len();
    let nf = stats.features.len();
    let mut out = Array2::zeros((n, nf + 2));
    for d in 0..n {
        let doy = (series.dates[d].ordinal() - 1) as f64;
        let angle = 2.0 * std::f64::consts::PI * doy / 365.0;
        out[[d, 0]] = angle.sin();
        out[[d, 1]] = angle.cos();
        for j in 0..nf {
            out[[d, j + 2]] = (series.data[[d, j]] - stats.mean[j]) / stats.std[j];
        }
    }
    out
}

/// Invert [`normalize`]: drop the two date columns and undo the
/// z-score.
pub fn denormalize(input: &Array2<f64>, stats: &NormStats) -> Array2<f64> {
    let n = input.nrows();
    let nf = stats.features.len();
    assert_eq!(input.ncols(), nf + 2);
    let mut out = Array2::zeros((n, nf));
    for d in 0..n {
        for j in 0..nf {
            out[[d, j]] = input[[d, j + 2]] * stats.std[j] + stats.mean[j];
        }
    }
    out
}

/// Normalize a whole dataset, fitting stats first when none are given.
pub fn normalize_dataset(
    seasons: &[WeatherSeries],
    stats: Option<NormStats>,
) -> (Vec<Array2<f64>>, NormStats) {
    let stats = stats.unwrap_or_else(|| NormStats::fit(&seasons.iter().collect::<Vec<_>>()));
    let inputs = seasons.iter().map(|s| normalize(s, &stats)).collect();
    (inputs, stats)
}

/// Astronomical day length in hours for a latitude (degrees) and
/// 0-based day of year.
pub fn day_length_hours(latitude_deg: f64, doy0: f64) -> f64 {
    let phi = latitude_deg.to_radians();
    // Solar declination (Cooper's formula).
    let decl = (23.45_f64).to_radians() * (2.0 * std::f64::consts::PI * (284.0 + doy0 + 1.0) / 365.0).sin();
    let cos_ws = (-phi.tan() * decl.tan()).clamp(-1.0, 1.0);
    let ws = cos_ws.acos();
    24.0 / std::f64::consts::PI * ws
}

/// Extraterrestrial radiation (MJ m⁻² day⁻¹) for Hargreaves ET.
pub(crate) fn extraterrestrial_radiation(latitude_deg: f64, doy0: f64) -> f64 {
    let phi = latitude_deg.to_radians();
    let two_pi = 2.0 * std::f64::consts::PI;
    let n = doy0 + 1.0;
    let dr = 1.0 + 0.033 * (two_pi * n / 365.0).cos();
    let decl = 0.409 * (two_pi * n / 365.0 - 1.39).sin();
    let cos_ws = (-phi.tan() * decl.tan()).clamp(-1.0, 1.0);
    let ws = cos_ws.acos();
    let gsc = 0.0820; // MJ m⁻² min⁻¹
    24.0 * 60.0 / std::f64::consts::PI
        * gsc
        * dr
        * (ws * phi.sin() * decl.sin() + phi.cos() * decl.cos() * ws.sin())
}

/// Hargreaves reference evapotranspiration, mm/day.
pub fn hargreaves_et(latitude_deg: f64, doy0: f64, tmin: f64, tmax: f64, tmean: f64) -> f64 {
    let ra = extraterrestrial_radiation(latitude_deg, doy0);
    let spread = (tmax - tmin).max(0.0);
    (0.0023 * 0.408 * ra * (tmean + 17.8) * spread.sqrt()).max(0.0)
}

/// Potential ET as a fixed multiple of the Hargreaves reference value
/// (Priestley–Taylor style 1.26 coefficient).
pub fn potential_et(et_ref: f64) -> f64 {
    1.26 * et_ref
}
