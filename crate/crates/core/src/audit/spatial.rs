//! Spatial point error: the share of idling events farther than a metric
//! threshold from every vertex of their route's shapes.

use serde::{Deserialize, Serialize};

use super::gtfs::ShapeIndex;
use super::AuditError;

/// Meters per degree of latitude used for the threshold conversion.
pub const METERS_PER_DEGREE: f64 = 111_320.0;

/// Converts a metric threshold into degrees at the given latitude.
pub fn meters_to_degrees(meters: f64, latitude: f64) -> Result<f64, AuditError> {
    let c = (latitude * std::f64::consts::PI / 180.0).cos();
    if latitude.abs() >= 90.0 || !latitude.is_finite() || c <= 0.0 {
        return Err(AuditError::DegenerateLatitude(latitude));
    }
    Ok(meters / (METERS_PER_DEGREE * c))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CityEvent {
    pub route_id: Option<String>,
    pub trip_id: Option<String>,
    pub latitude: f64,
    pub longitude: f64,
}

/// Per-event nearest-shape distances for one city, computed once and reused
/// for every threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct CityDistances {
    pub mean_latitude: f64,
    /// Degrees, one per matched event.
    pub distances: Vec<f64>,
    /// Events without any candidate shape; not part of the denominator.
    pub excluded: usize,
}

impl CityDistances {
    pub fn compute(events: &[CityEvent], index: &ShapeIndex) -> Result<Self, AuditError> {
        let mut distances = Vec::with_capacity(events.len());
        let mut lat_sum = 0.0;
        let mut excluded = 0;
        for e in events {
            let d = (e.latitude.is_finite() && e.longitude.is_finite())
                .then(|| index.min_distance(e.route_id.as_deref(), e.trip_id.as_deref(), e.latitude, e.longitude))
                .flatten();
            match d {
                Some(d) => {
                    distances.push(d);
                    lat_sum += e.latitude;
                }
                None => excluded += 1,
            }
        }
        if distances.is_empty() {
            return Err(AuditError::NoMapping);
        }
        let mean_latitude = lat_sum / distances.len() as f64;
        meters_to_degrees(0.0, mean_latitude)?;
        Ok(Self {
            mean_latitude,
            distances,
            excluded,
        })
    }

    pub fn n(&self) -> usize {
        self.distances.len()
    }

    /// Percent of matched events farther than `meters` from their shapes.
    pub fn error_pct(&self, meters: f64) -> f64 {
        let limit = meters_to_degrees(meters, self.mean_latitude).expect("latitude checked on construction");
        let uncovered = self.distances.iter().filter(|&&d| d > limit).count();
        100.0 * uncovered as f64 / self.n() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialError {
    pub error_pct: f64,
    pub n: usize,
    pub excluded: usize,
    pub mean_latitude: f64,
    pub threshold_degrees: f64,
}

pub fn spatial_point_error(events: &[CityEvent], index: &ShapeIndex, meters: f64) -> Result<SpatialError, AuditError> {
    let c = CityDistances::compute(events, index)?;
    Ok(SpatialError {
        error_pct: c.error_pct(meters),
        n: c.n(),
        excluded: c.excluded,
        mean_latitude: c.mean_latitude,
        threshold_degrees: meters_to_degrees(meters, c.mean_latitude)?,
    })
}

/// Error as a function of the threshold, averaged across cities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSweep {
    pub thresholds_m: Vec<f64>,
    /// Plain mean of the per-city errors.
    pub unweighted_pct: Vec<f64>,
    /// Per-city errors weighted by matched event count.
    pub weighted_pct: Vec<f64>,
}

/// 0, 1, ..., 100 meters.
pub fn default_thresholds() -> Vec<f64> {
    (0..=100).map(f64::from).collect()
}

pub fn threshold_sweep(cities: &[CityDistances], thresholds_m: &[f64]) -> Result<ThresholdSweep, AuditError> {
    if cities.is_empty() {
        return Err(AuditError::NoAuditableCity);
    }
    let total: usize = cities.iter().map(CityDistances::n).sum();
    let mut unweighted = Vec::with_capacity(thresholds_m.len());
    let mut weighted = Vec::with_capacity(thresholds_m.len());
    for &t in thresholds_m {
        let errs: Vec<f64> = cities.iter().map(|c| c.error_pct(t)).collect();
        unweighted.push(errs.iter().sum::<f64>() / cities.len() as f64);
        weighted.push(
            errs.iter().zip(cities).map(|(e, c)| e * c.n() as f64).sum::<f64>() / total as f64,
        );
    }
    Ok(ThresholdSweep {
        thresholds_m: thresholds_m.to_vec(),
        unweighted_pct: unweighted,
        weighted_pct: weighted,
    })
}

/// Mean of city errors, plain and weighted by event count.
pub fn aggregate(cities: &[&CityDistances], meters: f64) -> Option<(f64, f64)> {
    if cities.is_empty() {
        return None;
    }
    let total: usize = cities.iter().map(|c| c.n()).sum();
    let errs: Vec<(f64, usize)> = cities.iter().map(|c| (c.error_pct(meters), c.n())).collect();
    let unweighted = errs.iter().map(|e| e.0).sum::<f64>() / errs.len() as f64;
    let weighted = errs.iter().map(|(e, n)| e * *n as f64).sum::<f64>() / total as f64;
    Some((unweighted, weighted))
}
