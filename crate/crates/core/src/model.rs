//! Shared domain types: vehicle samples, feed snapshots, idling events,
//! agency rows and detector parameters.
//!
//! Coordinates are WGS84 degrees carried as `f64` exactly as delivered by the
//! feed. Nothing here rounds them; the detector's stationarity test is exact
//! attribute equality.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Unix epoch seconds.
pub type EpochSecs = i64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid IATA identifier {0:?}: expected three uppercase ASCII letters")]
    InvalidIata(String),
    #[error("invalid detector parameter {name} = {value}: must be a positive integer")]
    InvalidParam { name: &'static str, value: u32 },
    #[error("invalid coordinate epsilon {0}: must be finite and non-negative")]
    InvalidEpsilon(f64),
}

/// Three-letter fleet location code, the join key between agencies and events.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct IataId(String);

impl IataId {
    pub fn new(code: impl Into<String>) -> Result<Self, ModelError> {
        let code = code.into();
        if code.len() == 3 && code.bytes().all(|b| b.is_ascii_uppercase()) {
            Ok(Self(code))
        } else {
            Err(ModelError::InvalidIata(code))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for IataId {
    type Error = ModelError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<IataId> for String {
    fn from(value: IataId) -> Self {
        value.0
    }
}

impl fmt::Display for IataId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::str::FromStr for IataId {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::new(s)
    }
}

/// Identity of one vehicle across feeds: vehicle ids are only unique within a fleet.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VehicleKey {
    pub iata_id: IataId,
    pub vehicle_id: String,
}

/// One vehicle's position sample at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleRecord {
    pub iata_id: IataId,
    pub vehicle_id: String,
    pub route_id: Option<String>,
    pub trip_id: Option<String>,
    pub latitude: f64,
    pub longitude: f64,
    pub timestamp: EpochSecs,
}

impl VehicleRecord {
    pub fn key(&self) -> VehicleKey {
        VehicleKey {
            iata_id: self.iata_id.clone(),
            vehicle_id: self.vehicle_id.clone(),
        }
    }
}

/// Why a record was refused by [`validate_record`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Rejection {
    OutOfBoundsLat,
    OutOfBoundsLon,
    ZeroCoordinate,
    MissingIds,
    BadTimestamp,
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Rejection::OutOfBoundsLat => "latitude outside [-90, 90]",
            Rejection::OutOfBoundsLon => "longitude outside [-180, 180]",
            Rejection::ZeroCoordinate => "zero latitude or longitude",
            Rejection::MissingIds => "missing vehicle id or both route and trip ids",
            Rejection::BadTimestamp => "non-positive timestamp",
        };
        f.write_str(s)
    }
}

fn present(id: &Option<String>) -> bool {
    id.as_deref().is_some_and(|s| !s.is_empty())
}

/// Accepts a record iff every [`VehicleRecord`] invariant holds.
///
/// Checks run in a fixed order (bounds, zero, ids, timestamp) so the first
/// violated rule is the one reported.
pub fn validate_record(rec: VehicleRecord) -> Result<VehicleRecord, Rejection> {
    // NaN fails the range checks too.
    if !(-90.0..=90.0).contains(&rec.latitude) {
        return Err(Rejection::OutOfBoundsLat);
    }
    if !(-180.0..=180.0).contains(&rec.longitude) {
        return Err(Rejection::OutOfBoundsLon);
    }
    if rec.latitude == 0.0 || rec.longitude == 0.0 {
        return Err(Rejection::ZeroCoordinate);
    }
    if rec.vehicle_id.is_empty() || !(present(&rec.route_id) || present(&rec.trip_id)) {
        return Err(Rejection::MissingIds);
    }
    if rec.timestamp <= 0 {
        return Err(Rejection::BadTimestamp);
    }
    Ok(rec)
}

/// Metadata about a source that failed to contribute to a snapshot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceFailure {
    pub endpoint_url: String,
    pub message: String,
}

/// One merged poll of a region: the buffer element.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedSnapshot {
    pub region_id: String,
    pub poll_time: EpochSecs,
    pub records: BTreeMap<VehicleKey, VehicleRecord>,
    pub failures: Vec<SourceFailure>,
}

impl FeedSnapshot {
    pub fn new(region_id: impl Into<String>, poll_time: EpochSecs) -> Self {
        Self {
            region_id: region_id.into(),
            poll_time,
            records: BTreeMap::new(),
            failures: Vec::new(),
        }
    }

    /// Builds a snapshot from records, resolving key collisions with [`FeedSnapshot::insert`].
    pub fn from_records(
        region_id: impl Into<String>,
        poll_time: EpochSecs,
        records: impl IntoIterator<Item = VehicleRecord>,
    ) -> Self {
        let mut snap = Self::new(region_id, poll_time);
        for rec in records {
            snap.insert(rec);
        }
        snap
    }

    /// Inserts a record. On a `(iata_id, vehicle_id)` collision the record with
    /// the larger timestamp wins; ties go to the later insert.
    pub fn insert(&mut self, rec: VehicleRecord) {
        match self.records.get(&rec.key()) {
            Some(existing) if existing.timestamp > rec.timestamp => {}
            _ => {
                self.records.insert(rec.key(), rec);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// One detected idling event. Field order matches the wire and table layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdlingEvent {
    pub iata_id: IataId,
    pub vehicle_id: String,
    pub route_id: Option<String>,
    pub trip_id: Option<String>,
    pub latitude: f64,
    pub longitude: f64,
    /// Start of the idling episode.
    pub datetime: EpochSecs,
    /// Seconds elapsed since `datetime`.
    pub duration: i64,
}

/// Dimension-table row describing the fleet behind an IATA code.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgencyInfo {
    pub iata_id: IataId,
    pub agency: String,
    pub city: String,
    pub country: String,
    pub region: String,
    pub continent: String,
}

/// Poll interval `r` (seconds), idle horizon `h` (buffer steps) and eviction bound `m` (ticks).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams")]
pub struct DetectorParams {
    r: u32,
    h: u32,
    m: u32,
    /// Coordinate tolerance in degrees for the stationarity test. Zero means
    /// exact equality; anything else is an extension and off by default.
    #[serde(default)]
    coord_epsilon: f64,
}

#[derive(Deserialize)]
struct RawParams {
    #[serde(default = "default_r")]
    r: u32,
    #[serde(default = "default_h")]
    h: u32,
    #[serde(default = "default_m")]
    m: u32,
    #[serde(default)]
    coord_epsilon: f64,
}

fn default_r() -> u32 {
    DetectorParams::DEFAULT_R
}
fn default_h() -> u32 {
    DetectorParams::DEFAULT_H
}
fn default_m() -> u32 {
    DetectorParams::DEFAULT_M
}

impl TryFrom<RawParams> for DetectorParams {
    type Error = ModelError;

    fn try_from(raw: RawParams) -> Result<Self, Self::Error> {
        DetectorParams::new(raw.r, raw.h, raw.m)?.with_coord_epsilon(raw.coord_epsilon)
    }
}

impl DetectorParams {
    pub const DEFAULT_R: u32 = 30;
    pub const DEFAULT_H: u32 = 1;
    pub const DEFAULT_M: u32 = 10;

    pub fn new(r: u32, h: u32, m: u32) -> Result<Self, ModelError> {
        for (name, value) in [("r", r), ("h", h), ("m", m)] {
            if value == 0 {
                return Err(ModelError::InvalidParam { name, value });
            }
        }
        Ok(Self {
            r,
            h,
            m,
            coord_epsilon: 0.0,
        })
    }

    pub fn with_coord_epsilon(mut self, eps: f64) -> Result<Self, ModelError> {
        if !eps.is_finite() || eps < 0.0 {
            return Err(ModelError::InvalidEpsilon(eps));
        }
        self.coord_epsilon = eps;
        Ok(self)
    }

    pub fn r(&self) -> u32 {
        self.r
    }

    pub fn h(&self) -> u32 {
        self.h
    }

    pub fn m(&self) -> u32 {
        self.m
    }

    pub fn coord_epsilon(&self) -> f64 {
        self.coord_epsilon
    }

    /// Buffer length `h + 2`.
    pub fn buffer_len(&self) -> usize {
        self.h as usize + 2
    }

    /// Duration reported on the first emission of an episode, `(h + 1) * r`.
    pub fn min_duration(&self) -> i64 {
        (i64::from(self.h) + 1) * i64::from(self.r)
    }
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            r: Self::DEFAULT_R,
            h: Self::DEFAULT_H,
            m: Self::DEFAULT_M,
            coord_epsilon: 0.0,
        }
    }
}
