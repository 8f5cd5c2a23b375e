//! Shared dataset types: crop state series and (weather, truth) season
//! records grouped into datasets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::weather::WeatherSeries;

/// Which crop state a model predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropKind {
    /// Discrete phenological stage driven by degree-day accumulation.
    Phenology,
    /// Cold hardiness (LTE50, °C) driven by acclimation dynamics.
    Hardiness,
}

impl CropKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CropKind::Phenology => "phenology",
            CropKind::Hardiness => "hardiness",
        }
    }
}

/// Daily crop state over one season: ground truth or model output.
///
/// For phenology the value is the stage index (0 = dormant, 1 = bud
/// break, 2 = bloom, 3 = veraison, 4 = ripe); for hardiness it is the
/// LTE50 in °C. `observed` marks days that carry a usable value —
/// sparse field measurements for ground truth, every day for model
/// predictions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CropStateSeries {
    pub kind: CropKind,
    pub values: Vec<f64>,
    pub observed: Vec<bool>,
    /// Phenology only: stage index → first day (0-based) at that stage.
    /// Stages never reached are absent.
    pub onsets: BTreeMap<u8, usize>,
}

impl CropStateSeries {
    /// Fully-observed series (the shape model rollouts produce).
    pub fn dense(kind: CropKind, values: Vec<f64>) -> Self {
        let observed = vec![true; values.len()];
        Self { kind, values, observed, onsets: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of days carrying an observation.
    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|&&m| m).count()
    }

    /// Recompute `onsets` from the daily stage values (first day at or
    /// past each stage). Only meaningful for phenology series.
    pub fn rebuild_onsets(&mut self) {
        self.onsets.clear();
        for (day, &v) in self.values.iter().enumerate() {
            let stage = v as u8;
            for s in 1..=stage {
                self.onsets.entry(s).or_insert(day);
            }
        }
    }
}

/// One (cultivar, season) training or evaluation unit.
#[derive(Clone, Debug)]
pub struct SeasonRecord {
    /// Index into the owning dataset's cultivar list.
    pub cultivar: usize,
    /// Season label: calendar year, or start year for dormancy seasons.
    pub season: i32,
    pub location: String,
    pub weather: WeatherSeries,
    pub truth: CropStateSeries,
}

/// A collection of season records sharing one crop kind.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub cultivars: Vec<String>,
    pub records: Vec<SeasonRecord>,
}

impl Dataset {
    pub fn kind(&self) -> Option<CropKind> {
        self.records.first().map(|r| r.truth.kind)
    }

    /// Indices of records belonging to one cultivar.
    pub fn records_of(&self, cultivar: usize) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.cultivar == cultivar)
            .map(|(i, _)| i)
            .collect()
    }

    /// Distinct season labels for one cultivar, ascending.
    pub fn seasons_of(&self, cultivar: usize) -> Vec<i32> {
        let mut years: Vec<i32> = self
            .records
            .iter()
            .filter(|r| r.cultivar == cultivar)
            .map(|r| r.season)
            .collect();
        years.sort_unstable();
        years.dedup();
        years
    }
}
