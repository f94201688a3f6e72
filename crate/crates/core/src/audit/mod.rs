//! Validation battery over an exported event file.
//!
//! Tests are numbered: 1-14 types, 15-16 duplication, 17-30 missingness,
//! 31-36 coordinate bounds, 37 onward spatial error (global, then per region
//! and city), 105-109 temporal contiguity, 110-113 durations and idling share.
//! Spatial entries that would reach 105 continue after 113.

pub mod checks;
pub mod gtfs;
pub mod kdtree;
pub mod spatial;
pub mod table;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checks::{
    audit_duplication, audit_duration, audit_geobounds, audit_missingness, audit_temporal, audit_types,
    reconstruct_episodes, DurationOptions, Episode, FieldType, OperationalTime,
};
pub use gtfs::{ShapeIndex, StaticGtfs};
pub use spatial::{
    default_thresholds, meters_to_degrees, spatial_point_error, threshold_sweep, CityDistances, CityEvent,
    ThresholdSweep,
};
pub use table::ExportTable;

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("export header mismatch: expected {expected}, found {found}")]
    SchemaMismatch { expected: String, found: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("zip: {0}")]
    Zip(#[from] zip::result::ZipError),
    #[error("static GTFS: {0}")]
    Gtfs(String),
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("mean latitude {0} leaves no usable degree conversion")]
    DegenerateLatitude(f64),
    #[error("no event maps to a route shape")]
    NoMapping,
    #[error("no city could be audited spatially")]
    NoAuditableCity,
}

/// Default spatial threshold in meters.
pub const DEFAULT_THRESHOLD_M: f64 = 25.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Types,
    Duplication,
    Missingness,
    GeoBounds,
    Spatial,
    Temporal,
    Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Value {
    Type {
        expected: FieldType,
        observed: FieldType,
        pass: bool,
    },
    Percent {
        value: f64,
    },
    Seconds {
        value: i64,
    },
    Unavailable {
        reason: String,
    },
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Type { expected, observed, pass } => write!(
                f,
                "{} (expected {}) {}",
                observed.name(),
                expected.name(),
                if *pass { "PASS" } else { "FAIL" }
            ),
            Value::Percent { value } => write!(f, "{value:.4} %"),
            Value::Seconds { value } => write!(f, "{value} s"),
            Value::Unavailable { reason } => write!(f, "n/a ({reason})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub number: u32,
    pub category: Category,
    /// `all`, a region name, or `region / city`.
    pub scope: String,
    pub name: String,
    pub value: Value,
}

impl AuditEntry {
    pub fn percent(&self) -> Option<f64> {
        match self.value {
            Value::Percent { value } => Some(value),
            _ => None,
        }
    }

    pub fn seconds(&self) -> Option<i64> {
        match self.value {
            Value::Seconds { value } => Some(value),
            _ => None,
        }
    }

    pub fn passed_type_check(&self) -> Option<bool> {
        match self.value {
            Value::Type { pass, .. } => Some(pass),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedCity {
    pub iata_id: String,
    pub city: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub rows: usize,
    pub zero_rows: bool,
    pub entries: Vec<AuditEntry>,
    pub excluded_cities: Vec<ExcludedCity>,
    pub threshold_sweep: Option<ThresholdSweep>,
}

impl AuditReport {
    pub fn entry(&self, number: u32) -> Option<&AuditEntry> {
        self.entries.iter().find(|e| e.number == number)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "rows audited: {}{}", self.rows, if self.zero_rows { " (empty file)" } else { "" })?;
        writeln!(f, "{:>4}  {:<12} {:<40} {:<28} value", "no.", "category", "scope", "test")?;
        for e in &self.entries {
            writeln!(
                f,
                "{:>4}  {:<12} {:<40} {:<28} {}",
                e.number,
                format!("{:?}", e.category).to_lowercase(),
                e.scope,
                e.name,
                e.value
            )?;
        }
        for c in &self.excluded_cities {
            writeln!(f, "excluded {} ({}): {}", c.iata_id, c.city, c.reason)?;
        }
        if let Some(s) = &self.threshold_sweep {
            writeln!(f, "threshold_m,unweighted_pct,weighted_pct")?;
            for i in 0..s.thresholds_m.len() {
                writeln!(f, "{},{:.4},{:.4}", s.thresholds_m[i], s.unweighted_pct[i], s.weighted_pct[i])?;
            }
        }
        Ok(())
    }
}

/// Inputs beyond the export file itself.
#[derive(Debug, Clone)]
pub struct BatteryOptions {
    pub threshold_m: f64,
    /// Route shapes per IATA code; cities without one are excluded spatially.
    pub shapes: BTreeMap<String, ShapeIndex>,
    pub duration: DurationOptions,
    /// When set, the report also carries a threshold sweep over these values.
    pub sweep_thresholds: Option<Vec<f64>>,
}

impl Default for BatteryOptions {
    fn default() -> Self {
        Self {
            threshold_m: DEFAULT_THRESHOLD_M,
            shapes: BTreeMap::new(),
            duration: DurationOptions::default(),
            sweep_thresholds: None,
        }
    }
}

struct Numbering(u32);

impl Numbering {
    fn next(&mut self) -> u32 {
        let n = self.0;
        self.0 = if n + 1 == 105 { 114 } else { n + 1 };
        n
    }
}

struct City {
    iata_id: String,
    city: String,
    region: String,
    events: Vec<CityEvent>,
}

fn group_cities(table: &ExportTable) -> Result<Vec<City>, AuditError> {
    let col = |n| table.column(n);
    let (iata, city, region) = (col("iata_id")?, col("city")?, col("region")?);
    let (route, trip, lat, lon) = (col("route_id")?, col("trip_id")?, col("latitude")?, col("longitude")?);
    let mut by_iata: BTreeMap<String, City> = BTreeMap::new();
    let opt = |s: &String| (!s.is_empty()).then(|| s.clone());
    for r in &table.rows {
        let c = by_iata.entry(r[iata].clone()).or_insert_with(|| City {
            iata_id: r[iata].clone(),
            city: r[city].clone(),
            region: r[region].clone(),
            events: Vec::new(),
        });
        c.events.push(CityEvent {
            route_id: opt(&r[route]),
            trip_id: opt(&r[trip]),
            latitude: r[lat].parse().unwrap_or(f64::NAN),
            longitude: r[lon].parse().unwrap_or(f64::NAN),
        });
    }
    Ok(by_iata.into_values().collect())
}

/// Runs every test over `table` and numbers the results.
pub fn run_battery(table: &ExportTable, opts: &BatteryOptions) -> Result<AuditReport, AuditError> {
    let types = audit_types(table)?;
    let mut entries = Vec::new();
    let mut push = |number, category, scope: &str, name: &str, value| {
        entries.push(AuditEntry {
            number,
            category,
            scope: scope.to_string(),
            name: name.to_string(),
            value,
        })
    };
    let pctv = |value| Value::Percent { value };

    for v in &types.verdicts {
        push(
            v.number,
            Category::Types,
            "all",
            &v.field,
            Value::Type {
                expected: v.expected,
                observed: v.observed,
                pass: v.pass,
            },
        );
    }

    let dup = audit_duplication(table);
    push(15, Category::Duplication, "all", "duplicate fields", pctv(dup.fields_pct));
    push(16, Category::Duplication, "all", "duplicate observations", pctv(dup.observations_pct));

    for (n, label, p) in audit_missingness(table)?.fields {
        push(n, Category::Missingness, "all", &format!("missing {label}"), pctv(p));
    }

    let g = audit_geobounds(table)?;
    for (n, name, p) in [
        (31, "latitude zero", g.lat_zero_pct),
        (32, "latitude > 90", g.lat_over_pct),
        (33, "latitude < -90", g.lat_under_pct),
        (34, "longitude zero", g.lon_zero_pct),
        (35, "longitude > 180", g.lon_over_pct),
        (36, "longitude < -180", g.lon_under_pct),
    ] {
        push(n, Category::GeoBounds, "all", name, pctv(p));
    }

    // spatial
    let mut excluded_cities = Vec::new();
    let mut audited: Vec<(String, String, String, CityDistances)> = Vec::new();
    for c in group_cities(table)? {
        let Some(index) = opts.shapes.get(&c.iata_id) else {
            excluded_cities.push(ExcludedCity {
                iata_id: c.iata_id,
                city: c.city,
                reason: "no static GTFS bundle".into(),
            });
            continue;
        };
        match CityDistances::compute(&c.events, index) {
            Ok(d) => audited.push((c.region, c.iata_id, c.city, d)),
            Err(e) => excluded_cities.push(ExcludedCity {
                iata_id: c.iata_id,
                city: c.city,
                reason: e.to_string(),
            }),
        }
    }
    let t = opts.threshold_m;
    let all: Vec<&CityDistances> = audited.iter().map(|a| &a.3).collect();
    match spatial::aggregate(&all, t) {
        Some((u, w)) => {
            push(37, Category::Spatial, "all", "point error (unweighted)", pctv(u));
            push(38, Category::Spatial, "all", "point error (weighted)", pctv(w));
        }
        None => {
            let v = Value::Unavailable {
                reason: AuditError::NoAuditableCity.to_string(),
            };
            push(37, Category::Spatial, "all", "point error (unweighted)", v.clone());
            push(38, Category::Spatial, "all", "point error (weighted)", v);
        }
    }
    let mut regions: BTreeMap<&str, Vec<&(String, String, String, CityDistances)>> = BTreeMap::new();
    for a in &audited {
        regions.entry(a.0.as_str()).or_default().push(a);
    }
    let mut num = Numbering(39);
    for (region, cities) in &regions {
        for (_, iata, city, d) in cities {
            push(
                num.next(),
                Category::Spatial,
                &format!("{region} / {city} ({iata})"),
                "point error",
                pctv(d.error_pct(t)),
            );
        }
        let refs: Vec<&CityDistances> = cities.iter().map(|c| &c.3).collect();
        let (u, w) = spatial::aggregate(&refs, t).expect("region has cities");
        push(num.next(), Category::Spatial, region, "point error (unweighted)", pctv(u));
        push(num.next(), Category::Spatial, region, "point error (weighted)", pctv(w));
    }

    let tm = audit_temporal(table)?;
    push(105, Category::Temporal, "all", "datetime zero", pctv(tm.zero_pct));
    push(106, Category::Temporal, "all", "datetime negative", pctv(tm.negative_pct));
    push(107, Category::Temporal, "all", "downtime", pctv(tm.downtime_pct));
    push(108, Category::Temporal, "all", "max gap", Value::Seconds { value: tm.max_gap_secs });
    push(109, Category::Temporal, "all", "elapsed", Value::Seconds { value: tm.elapsed_secs });

    let du = audit_duration(table, &opts.duration)?;
    push(110, Category::Duration, "all", "duration zero", pctv(du.zero_pct));
    push(111, Category::Duration, "all", "duration negative", pctv(du.negative_pct));
    push(
        112,
        Category::Duration,
        "all",
        &format!("idle share > {} s", opts.duration.adjusted_min_secs),
        pctv(du.idle_share_adjusted_pct),
    );
    push(
        113,
        Category::Duration,
        "all",
        &format!("idle share >= {} s", opts.duration.unadjusted_min_secs),
        pctv(du.idle_share_unadjusted_pct),
    );

    entries.sort_by_key(|e| e.number);
    let threshold_sweep = match &opts.sweep_thresholds {
        Some(ts) if !audited.is_empty() => {
            let cities: Vec<CityDistances> = audited.into_iter().map(|a| a.3).collect();
            Some(threshold_sweep(&cities, ts)?)
        }
        _ => None,
    };
    Ok(AuditReport {
        rows: table.len(),
        zero_rows: table.is_empty(),
        entries,
        excluded_cities,
        threshold_sweep,
    })
}
