//! Deterministic synthetic weather: a seasonal sinusoid plus AR(1)
//! anomalies, with the physical record invariants holding by
//! construction.

use chrono::{Datelike, Days, NaiveDate};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{
    day_length_hours, hargreaves_et, potential_et, SeasonWindow, WeatherRecord, WeatherSeries,
    SYNTH_FEATURES,
};

/// Annual climate description driving the simulator.
#[derive(Clone, Debug)]
pub struct ClimateProfile {
    pub name: String,
    pub latitude: f64,
    /// Annual mean of daily mean temperature, °C.
    pub tmean_annual: f64,
    /// Half peak-to-trough seasonal swing, °C.
    pub tmean_amplitude: f64,
    /// 0-based day of year of the warmest day.
    pub peak_doy: f64,
    /// Mean tmax − tmin spread, °C.
    pub diurnal_range: f64,
    /// Day-to-day anomaly persistence in [0, 1).
    pub ar1: f64,
    /// Std of the AR(1) innovations, °C; 0 gives a pure sinusoid.
    pub noise_scale: f64,
    /// Long-run mean rainfall, mm/day.
    pub rain_mean: f64,
    /// Probability a day is wet.
    pub wet_day_prob: f64,
}

impl Default for ClimateProfile {
    fn default() -> Self {
        // Mid-latitude continental: warm dry summers, cold winters.
        Self {
            name: "default".into(),
            latitude: 46.3,
            tmean_annual: 9.0,
            tmean_amplitude: 11.0,
            peak_doy: 200.0,
            diurnal_range: 10.0,
            ar1: 0.7,
            noise_scale: 2.2,
            rain_mean: 1.2,
            wet_day_prob: 0.25,
        }
    }
}

impl ClimateProfile {
    /// Named regional presets used by the robustness experiments. The
    /// numbers are coarse climatological caricatures — what matters is
    /// that the regions differ in mean, swing, and wetness.
    pub fn named(name: &str) -> Self {
        let base = Self::default();
        match name {
            "WA" => Self { name: "WA".into(), ..base },
            "VT" => Self {
                name: "VT".into(),
                latitude: 44.0,
                tmean_annual: 7.0,
                tmean_amplitude: 14.0,
                rain_mean: 2.8,
                wet_day_prob: 0.45,
                ..base
            },
            "CA" => Self {
                name: "CA".into(),
                latitude: 38.5,
                tmean_annual: 16.0,
                tmean_amplitude: 8.0,
                rain_mean: 1.4,
                wet_day_prob: 0.15,
                ..base
            },
            "OR" => Self {
                name: "OR".into(),
                latitude: 45.3,
                tmean_annual: 11.0,
                tmean_amplitude: 8.5,
                rain_mean: 2.6,
                wet_day_prob: 0.40,
                ..base
            },
            other => Self { name: other.into(), ..base },
        }
    }

    /// Seasonal baseline mean temperature for a 0-based day of year.
    pub fn tmean_baseline(&self, doy0: f64) -> f64 {
        let angle = 2.0 * std::f64::consts::PI * (doy0 - self.peak_doy) / 365.0;
        self.tmean_annual + self.tmean_amplitude * angle.cos()
    }
}

/// Generate daily records over an inclusive date span. The AR(1)
/// anomaly state carries across the whole span, so multi-year output
/// has no seams at year boundaries.
fn generate_records(
    rng: &mut ChaCha20Rng,
    profile: &ClimateProfile,
    start: NaiveDate,
    end: NaiveDate,
) -> Vec<WeatherRecord> {
    let mut records = Vec::new();
    let mut anomaly = 0.0_f64;
    let mut date = start;
    while date <= end {
        let doy0 = (date.ordinal() - 1) as f64;
        let innovation: f64 = StandardNormal.sample(rng);
        anomaly = profile.ar1 * anomaly + profile.noise_scale * innovation;
        let base = profile.tmean_baseline(doy0) + anomaly;

        // Three temperature draws around the baseline; sorting gives
        // tmin ≤ tmean ≤ tmax regardless of the jitter.
        let jitter = 0.3 * profile.noise_scale;
        let j1: f64 = StandardNormal.sample(rng);
        let j2: f64 = StandardNormal.sample(rng);
        let j3: f64 = StandardNormal.sample(rng);
        let mut temps = [
            base - 0.5 * profile.diurnal_range + jitter * j1,
            base + jitter * j2,
            base + 0.5 * profile.diurnal_range + jitter * j3,
        ];
        temps.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let [tmin, tmean, tmax] = temps;

        let wet = rng.random::<f64>() < profile.wet_day_prob;
        let rain = if wet {
            let u: f64 = rng.random::<f64>();
            // Exponential amounts with the configured long-run mean.
            -(profile.rain_mean / profile.wet_day_prob) * (1.0 - u).ln()
        } else {
            0.0
        };

        // Clear-sky shortwave scaled down on wet days.
        let clear = 0.75 * super::extraterrestrial_radiation(profile.latitude, doy0);
        let cloud_factor = if wet { 0.35 } else { 0.80 + 0.15 * rng.random::<f64>() };
        let solar = (clear * cloud_factor).max(0.0);

        let hmean = (55.0 + 30.0 * if wet { 1.0 } else { 0.0 }
            - 10.0 * (cloud_factor - 0.5))
            .clamp(0.0, 100.0);
        let hmin = (hmean - 15.0).clamp(0.0, 100.0);
        let hmax = (hmean + 12.0).clamp(0.0, 100.0);
        let dew_depression = (100.0 - hmean) / 5.0;

        let et_ref = hargreaves_et(profile.latitude, doy0, tmin, tmax, tmean);
        let record = WeatherRecord {
            date,
            tmin,
            tmax,
            tmean,
            hmin,
            hmax,
            hmean,
            dmin: tmin - dew_depression,
            dmax: tmax - dew_depression,
            dmean: tmean - dew_depression,
            solar,
            rain,
            wind: 1.5 + 2.0 * rng.random::<f64>(),
            et_ref,
            et_pot: potential_et(et_ref),
            day_length: day_length_hours(profile.latitude, doy0),
        };
        debug_assert!(record.validate().is_ok(), "{:?}", record.validate());
        records.push(record);
        date = date.checked_add_days(Days::new(1)).unwrap();
    }
    records
}

/// Simulate one season window. Deterministic: the same seed, profile,
/// year, and window produce a bitwise-identical series.
pub fn simulate_weather(
    seed: u64,
    profile: &ClimateProfile,
    year: i32,
    window: SeasonWindow,
) -> WeatherSeries {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let records = generate_records(&mut rng, profile, window.start(year), window.end(year));
    WeatherSeries::from_records(&profile.name, window, year, &records, SYNTH_FEATURES)
}

/// Simulate continuous daily records over whole calendar years
/// (inclusive range), for callers that cut their own windows.
pub fn simulate_years(
    seed: u64,
    profile: &ClimateProfile,
    first_year: i32,
    last_year: i32,
) -> Vec<WeatherRecord> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let start = NaiveDate::from_ymd_opt(first_year, 1, 1).unwrap();
    let end = NaiveDate::from_ymd_opt(last_year, 12, 31).unwrap();
    generate_records(&mut rng, profile, start, end)
}
