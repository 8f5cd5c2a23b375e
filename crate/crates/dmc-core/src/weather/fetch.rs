//! NASA POWER daily weather client with a per-(location, year) disk
//! cache.
//!
//! The network layer sits behind the [`Transport`] trait so tests can
//! inject canned responses. Fetched years are written to the cache as
//! CSV and always *read back from the cache file*, so the network path
//! and the warm-cache path produce identical bytes by construction.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use super::{
    day_length_hours, hargreaves_et, potential_et, SeasonWindow, WeatherError, WeatherRecord,
    WeatherSeries, SYNTH_FEATURES,
};

/// HTTP client settings (see the CLI config file).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FetchConfig {
    pub base_url: String,
    pub timeout_secs: u64,
    pub retries: u32,
}

impl Default for FetchConfig {
    fn default() -> Self {
        Self {
            base_url: "https://power.larc.nasa.gov".into(),
            timeout_secs: 30,
            retries: 3,
        }
    }
}

/// Minimal HTTP GET abstraction; the real implementation uses ureq.
pub trait Transport {
    fn get(&self, url: &str) -> Result<String, WeatherError>;
}

struct HttpTransport {
    agent: ureq::Agent,
}

impl HttpTransport {
    fn new(cfg: &FetchConfig) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(std::time::Duration::from_secs(cfg.timeout_secs)))
            .build();
        Self { agent: config.new_agent() }
    }
}

impl Transport for HttpTransport {
    fn get(&self, url: &str) -> Result<String, WeatherError> {
        let mut response = self
            .agent
            .get(url)
            .call()
            .map_err(|e| WeatherError::Http(e.to_string()))?;
        response
            .body_mut()
            .read_to_string()
            .map_err(|e| WeatherError::Http(e.to_string()))
    }
}

/// Raw daily variables requested from the service, mapped to record
/// fields. Solar is MJ·m⁻²·day⁻¹, precipitation mm/day.
const POWER_PARAMS: &[(&str, &str)] = &[
    ("T2M", "tmean"),
    ("T2M_MAX", "tmax"),
    ("T2M_MIN", "tmin"),
    ("PRECTOTCORR", "rain"),
    ("ALLSKY_SFC_SW_DWN", "solar"),
];

fn cache_file(cache_dir: &Path, lat: f64, lon: f64, year: i32) -> PathBuf {
    // Location rounded to 4 decimals keys the cache.
    cache_dir.join(format!("power_{lat:.4}_{lon:.4}_{year}.csv"))
}

/// Fetch (or read from cache) daily weather for whole calendar years,
/// returned as one continuous record list. Each year lives in its own
/// cache file; repeated calls with a warm cache touch no network.
pub fn fetch_weather(
    lat: f64,
    lon: f64,
    years: std::ops::RangeInclusive<i32>,
    cache_dir: &Path,
    cfg: &FetchConfig,
) -> Result<Vec<WeatherRecord>, WeatherError> {
    let transport = HttpTransport::new(cfg);
    fetch_weather_with(&transport, cfg, lat, lon, years, cache_dir)
}

/// As [`fetch_weather`] but with an injected transport (tests).
pub fn fetch_weather_with(
    transport: &dyn Transport,
    cfg: &FetchConfig,
    lat: f64,
    lon: f64,
    years: std::ops::RangeInclusive<i32>,
    cache_dir: &Path,
) -> Result<Vec<WeatherRecord>, WeatherError> {
    std::fs::create_dir_all(cache_dir).map_err(|source| WeatherError::Io {
        path: cache_dir.display().to_string(),
        source,
    })?;
    let mut all = Vec::new();
    for year in years {
        let path = cache_file(cache_dir, lat, lon, year);
        if !path.exists() {
            let body = fetch_year_with_retries(transport, cfg, lat, lon, year)?;
            let daily = parse_power_response(&body)?;
            write_cache(&path, &daily)?;
        }
        all.extend(read_cache(&path, lat)?);
    }
    Ok(all)
}

fn fetch_year_with_retries(
    transport: &dyn Transport,
    cfg: &FetchConfig,
    lat: f64,
    lon: f64,
    year: i32,
) -> Result<String, WeatherError> {
    let params: Vec<&str> = POWER_PARAMS.iter().map(|(p, _)| *p).collect();
    let url = format!(
        "{}/api/temporal/daily/point?parameters={}&community=AG&latitude={:.4}&longitude={:.4}&start={}0101&end={}1231&format=JSON",
        cfg.base_url.trim_end_matches('/'),
        params.join(","),
        lat,
        lon,
        year,
        year
    );
    let mut last_err = None;
    for attempt in 0..=cfg.retries {
        match transport.get(&url) {
            Ok(body) => return Ok(body),
            Err(e) => {
                last_err = Some(e);
                if attempt < cfg.retries {
                    std::thread::sleep(std::time::Duration::from_millis(
                        100 * (attempt as u64 + 1),
                    ));
                }
            }
        }
    }
    Err(last_err.unwrap_or_else(|| WeatherError::Http("no attempts made".into())))
}

/// Daily values per field name, keyed by date.
type DailyTable = BTreeMap<NaiveDate, BTreeMap<&'static str, f64>>;

fn parse_power_response(body: &str) -> Result<DailyTable, WeatherError> {
    let value: serde_json::Value = serde_json::from_str(body)
        .map_err(|e| WeatherError::SchemaDrift(format!("not JSON: {e}")))?;
    let params = value
        .get("properties")
        .and_then(|p| p.get("parameter"))
        .and_then(|p| p.as_object())
        .ok_or_else(|| WeatherError::SchemaDrift("properties.parameter".into()))?;

    let mut table: DailyTable = BTreeMap::new();
    for (power_name, field) in POWER_PARAMS {
        let series = params
            .get(*power_name)
            .and_then(|s| s.as_object())
            .ok_or_else(|| WeatherError::SchemaDrift(format!("parameter {power_name}")))?;
        for (date_text, v) in series {
            let date = NaiveDate::parse_from_str(date_text, "%Y%m%d").map_err(|e| {
                WeatherError::SchemaDrift(format!("bad date key '{date_text}': {e}"))
            })?;
            let raw = v.as_f64().ok_or_else(|| {
                WeatherError::SchemaDrift(format!("non-numeric {power_name} on {date_text}"))
            })?;
            // The service encodes missing data as -999.
            let val = if raw <= -998.0 { f64::NAN } else { raw };
            table.entry(date).or_default().insert(field, val);
        }
    }
    if table.is_empty() {
        return Err(WeatherError::SchemaDrift("empty parameter table".into()));
    }
    Ok(table)
}

fn write_cache(path: &Path, daily: &DailyTable) -> Result<(), WeatherError> {
    let io_err = |source| WeatherError::Io { path: path.display().to_string(), source };
    let mut out = String::from("date,tmin,tmax,tmean,rain,solar\n");
    for (date, fields) in daily {
        let cell = |name: &str| {
            let v = fields.get(name).copied().unwrap_or(f64::NAN);
            if v.is_nan() {
                String::new()
            } else {
                format!("{v}")
            }
        };
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            date,
            cell("tmin"),
            cell("tmax"),
            cell("tmean"),
            cell("rain"),
            cell("solar"),
        ));
    }
    // Write atomically so a crash can't leave a truncated cache file.
    let tmp = path.with_extension("csv.tmp");
    let mut f = std::fs::File::create(&tmp).map_err(io_err)?;
    f.write_all(out.as_bytes()).map_err(io_err)?;
    f.sync_all().map_err(io_err)?;
    std::fs::rename(&tmp, path).map_err(io_err)?;
    Ok(())
}

fn read_cache(path: &Path, lat: f64) -> Result<Vec<WeatherRecord>, WeatherError> {
    let text = std::fs::read_to_string(path).map_err(|source| WeatherError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 6 {
            return Err(WeatherError::Parse {
                line: line_no,
                msg: format!("cache row has {} cells, expected 6", cells.len()),
            });
        }
        let date = NaiveDate::parse_from_str(cells[0], "%Y-%m-%d")
            .map_err(|e| WeatherError::Parse { line: line_no, msg: e.to_string() })?;
        let num = |s: &str| -> Result<f64, WeatherError> {
            if s.is_empty() {
                Ok(f64::NAN)
            } else {
                s.parse::<f64>()
                    .map_err(|e| WeatherError::Parse { line: line_no, msg: e.to_string() })
            }
        };
        let (tmin, tmax, tmean) = (num(cells[1])?, num(cells[2])?, num(cells[3])?);
        let doy0 = (date.ordinal() - 1) as f64;
        let et_ref = if tmin.is_nan() || tmax.is_nan() || tmean.is_nan() {
            f64::NAN
        } else {
            hargreaves_et(lat, doy0, tmin, tmax, tmean)
        };
        let mut r = WeatherRecord::nan(date);
        r.tmin = tmin;
        r.tmax = tmax;
        r.tmean = tmean;
        r.rain = num(cells[4])?;
        r.solar = num(cells[5])?;
        r.day_length = day_length_hours(lat, doy0);
        r.et_ref = et_ref;
        r.et_pot = if et_ref.is_nan() { f64::NAN } else { potential_et(et_ref) };
        records.push(r);
    }
    Ok(records)
}

/// Cut continuous daily records into per-season series under a window,
/// using the synthetic feature profile. Seasons without full coverage
/// of the window keep whatever contiguous span the records provide.
pub fn seasons_from_records(
    records: &[WeatherRecord],
    window: SeasonWindow,
    location_id: &str,
) -> Vec<WeatherSeries> {
    let mut by_season: BTreeMap<i32, Vec<WeatherRecord>> = BTreeMap::new();
    for r in records {
        if let Some(season) = window.season_of(r.date) {
            by_season.entry(season).or_default().push(*r);
        }
    }
    by_season
        .into_iter()
        .map(|(season, recs)| {
            WeatherSeries::from_records(location_id, window, season, &recs, SYNTH_FEATURES)
        })
        .collect()
}
