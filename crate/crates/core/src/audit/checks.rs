//! Row-level checks: types, duplication, missingness, coordinate bounds,
//! temporal contiguity and idling share.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::model::{EpochSecs, IataId, VehicleKey};
use crate::store::EXPORT_COLUMNS;

use super::table::ExportTable;
use super::AuditError;

pub(crate) fn pct(count: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * count as f64 / total as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldType {
    Table,
    String,
    Float,
    Integer,
}

impl FieldType {
    pub fn name(self) -> &'static str {
        match self {
            FieldType::Table => "table",
            FieldType::String => "string",
            FieldType::Float => "float",
            FieldType::Integer => "integer",
        }
    }
}

/// Expected storage type of each export column.
pub fn expected_type(column: &str) -> FieldType {
    match column {
        "latitude" | "longitude" => FieldType::Float,
        "datetime" | "duration" => FieldType::Integer,
        _ => FieldType::String,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeVerdict {
    pub number: u32,
    pub field: String,
    pub expected: FieldType,
    pub observed: FieldType,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeAudit {
    pub verdicts: Vec<TypeVerdict>,
    pub zero_rows: bool,
}

fn infer(values: &[&str], expected: FieldType) -> FieldType {
    let present: Vec<&str> = values.iter().copied().filter(|v| !v.is_empty()).collect();
    if present.is_empty() {
        return expected;
    }
    match expected {
        FieldType::String | FieldType::Table => FieldType::String,
        FieldType::Float | FieldType::Integer => {
            if present.iter().all(|v| v.parse::<i64>().is_ok()) && expected == FieldType::Integer {
                FieldType::Integer
            } else if present
                .iter()
                .all(|v| v.parse::<f64>().is_ok_and(f64::is_finite))
            {
                FieldType::Float
            } else {
                FieldType::String
            }
        }
    }
}

/// Tests 1-14: the file is a table, then one verdict per export column.
pub fn audit_types(table: &ExportTable) -> Result<TypeAudit, AuditError> {
    table.require_export_schema()?;
    let mut verdicts = vec![TypeVerdict {
        number: 1,
        field: "object".into(),
        expected: FieldType::Table,
        observed: FieldType::Table,
        pass: true,
    }];
    for (i, column) in EXPORT_COLUMNS.iter().enumerate() {
        let expected = expected_type(column);
        let values: Vec<&str> = table.rows.iter().map(|r| r[i].as_str()).collect();
        let observed = infer(&values, expected);
        verdicts.push(TypeVerdict {
            number: 2 + i as u32,
            field: column.to_string(),
            expected,
            observed,
            pass: observed == expected,
        });
    }
    Ok(TypeAudit {
        verdicts,
        zero_rows: table.is_empty(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DuplicationAudit {
    /// Test 15.
    pub fields_pct: f64,
    /// Test 16: rows identical to an earlier row, over all rows.
    pub observations_pct: f64,
}

pub fn audit_duplication(table: &ExportTable) -> DuplicationAudit {
    let unique_headers: HashSet<&String> = table.headers.iter().collect();
    let mut seen = HashSet::new();
    let dup_rows = table.rows.iter().filter(|r| !seen.insert(*r)).count();
    DuplicationAudit {
        fields_pct: pct(table.headers.len() - unique_headers.len(), table.headers.len()),
        observations_pct: pct(dup_rows, table.len()),
    }
}

/// Numbering of the missingness tests; `None` marks the joint route|trip test.
pub const MISSINGNESS_TESTS: [(u32, Option<&str>); 14] = [
    (17, Some("iata_id")),
    (18, Some("agency")),
    (19, Some("city")),
    (20, Some("country")),
    (21, Some("region")),
    (22, Some("continent")),
    (23, Some("vehicle_id")),
    (24, Some("route_id")),
    (25, Some("trip_id")),
    (26, None),
    (27, Some("latitude")),
    (28, Some("longitude")),
    (29, Some("datetime")),
    (30, Some("duration")),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingnessAudit {
    /// `(test number, label, percent of empty cells)`.
    pub fields: Vec<(u32, String, f64)>,
}

impl MissingnessAudit {
    pub fn get(&self, number: u32) -> Option<f64> {
        self.fields.iter().find(|f| f.0 == number).map(|f| f.2)
    }
}

/// Tests 17-30. Test 26 counts rows lacking both route_id and trip_id.
pub fn audit_missingness(table: &ExportTable) -> Result<MissingnessAudit, AuditError> {
    let route = table.column("route_id")?;
    let trip = table.column("trip_id")?;
    let mut fields = Vec::with_capacity(MISSINGNESS_TESTS.len());
    for (number, column) in MISSINGNESS_TESTS {
        let (label, missing) = match column {
            Some(c) => {
                let idx = table.column(c)?;
                (c.to_string(), table.rows.iter().filter(|r| r[idx].is_empty()).count())
            }
            None => (
                "route_id | trip_id".to_string(),
                table
                    .rows
                    .iter()
                    .filter(|r| r[route].is_empty() && r[trip].is_empty())
                    .count(),
            ),
        };
        fields.push((number, label, pct(missing, table.len())));
    }
    Ok(MissingnessAudit { fields })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoBoundsAudit {
    pub lat_zero_pct: f64,
    pub lat_over_pct: f64,
    pub lat_under_pct: f64,
    pub lon_zero_pct: f64,
    pub lon_over_pct: f64,
    pub lon_under_pct: f64,
}

/// Tests 31-36 over all rows; unparseable values count as neither.
pub fn audit_geobounds(table: &ExportTable) -> Result<GeoBoundsAudit, AuditError> {
    let count = |col: &str, pred: &dyn Fn(f64) -> bool| -> Result<usize, AuditError> {
        Ok(table
            .cells(col)?
            .filter_map(|v| v.parse::<f64>().ok())
            .filter(|&v| pred(v))
            .count())
    };
    let n = table.len();
    Ok(GeoBoundsAudit {
        lat_zero_pct: pct(count("latitude", &|v| v == 0.0)?, n),
        lat_over_pct: pct(count("latitude", &|v| v > 90.0)?, n),
        lat_under_pct: pct(count("latitude", &|v| v < -90.0)?, n),
        lon_zero_pct: pct(count("longitude", &|v| v == 0.0)?, n),
        lon_over_pct: pct(count("longitude", &|v| v > 180.0)?, n),
        lon_under_pct: pct(count("longitude", &|v| v < -180.0)?, n),
    })
}

/// Gaps longer than this count as downtime.
pub const DOWNTIME_GAP_SECS: i64 = 60;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalAudit {
    pub zero_pct: f64,
    pub negative_pct: f64,
    /// Summed length of gaps over [`DOWNTIME_GAP_SECS`], over elapsed time.
    pub downtime_pct: f64,
    pub max_gap_secs: i64,
    pub elapsed_secs: i64,
    /// Fewer than two positive datetimes: contiguity is reported as zero.
    pub degenerate: bool,
}

/// Tests 105-109 over the datetime column. Order of rows does not matter.
pub fn audit_temporal(table: &ExportTable) -> Result<TemporalAudit, AuditError> {
    let values: Vec<i64> = table
        .cells("datetime")?
        .filter_map(|v| v.parse::<i64>().ok())
        .collect();
    let n = table.len();
    let zero = values.iter().filter(|&&v| v == 0).count();
    let negative = values.iter().filter(|&&v| v < 0).count();

    let mut times: Vec<i64> = values.into_iter().filter(|&v| v > 0).collect();
    times.sort_unstable();
    let degenerate = times.len() < 2;
    let (mut downtime, mut max_gap) = (0i64, 0i64);
    for w in times.windows(2) {
        let gap = w[1] - w[0];
        max_gap = max_gap.max(gap);
        if gap > DOWNTIME_GAP_SECS {
            downtime += gap;
        }
    }
    let elapsed = match (times.first(), times.last()) {
        (Some(a), Some(b)) => b - a,
        _ => 0,
    };
    Ok(TemporalAudit {
        zero_pct: pct(zero, n),
        negative_pct: pct(negative, n),
        downtime_pct: if elapsed > 0 {
            100.0 * downtime as f64 / elapsed as f64
        } else {
            0.0
        },
        max_gap_secs: max_gap,
        elapsed_secs: elapsed,
        degenerate,
    })
}

/// Denominator of the idling share.
#[derive(Debug, Clone, Default, PartialEq)]
pub enum OperationalTime {
    /// Per vehicle, from its first episode start to its last episode end in the file.
    #[default]
    ObservedSpan,
    /// Known service time per vehicle, in seconds.
    PerVehicle(HashMap<VehicleKey, i64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DurationOptions {
    /// Adjusted minimum: episodes must last strictly longer than this.
    pub adjusted_min_secs: i64,
    /// Unadjusted minimum, normally `(h + 1) * r`: episodes at least this long count.
    pub unadjusted_min_secs: i64,
    pub operational: OperationalTime,
}

impl Default for DurationOptions {
    fn default() -> Self {
        Self {
            adjusted_min_secs: 300,
            unadjusted_min_secs: 60,
            operational: OperationalTime::ObservedSpan,
        }
    }
}

/// One reconstructed idling episode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub iata_id: String,
    pub vehicle_id: String,
    pub start: EpochSecs,
    pub length: i64,
}

/// Collapses re-emissions: one episode per `(iata_id, vehicle_id, datetime)`
/// with the largest reported duration.
pub fn reconstruct_episodes(table: &ExportTable) -> Result<Vec<Episode>, AuditError> {
    let iata = table.column("iata_id")?;
    let vehicle = table.column("vehicle_id")?;
    let dt = table.column("datetime")?;
    let dur = table.column("duration")?;
    let mut longest: BTreeMap<(String, String, EpochSecs), i64> = BTreeMap::new();
    for row in &table.rows {
        let (Ok(start), Ok(length)) = (row[dt].parse::<i64>(), row[dur].parse::<i64>()) else {
            continue;
        };
        if length <= 0 {
            continue;
        }
        let slot = longest
            .entry((row[iata].clone(), row[vehicle].clone(), start))
            .or_insert(length);
        *slot = (*slot).max(length);
    }
    Ok(longest
        .into_iter()
        .map(|((iata_id, vehicle_id, start), length)| Episode {
            iata_id,
            vehicle_id,
            start,
            length,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationAudit {
    pub zero_pct: f64,
    pub negative_pct: f64,
    /// Test 112.
    pub idle_share_adjusted_pct: f64,
    /// Test 113.
    pub idle_share_unadjusted_pct: f64,
    pub episodes: usize,
    pub operational_secs: i64,
    pub degenerate: bool,
}

/// Tests 110-113.
pub fn audit_duration(table: &ExportTable, opts: &DurationOptions) -> Result<DurationAudit, AuditError> {
    let values: Vec<i64> = table
        .cells("duration")?
        .filter_map(|v| v.parse::<i64>().ok())
        .collect();
    let n = table.len();
    let zero = values.iter().filter(|&&v| v == 0).count();
    let negative = values.iter().filter(|&&v| v < 0).count();

    let episodes = reconstruct_episodes(table)?;
    let operational: i64 = match &opts.operational {
        OperationalTime::PerVehicle(map) => map.values().sum(),
        OperationalTime::ObservedSpan => {
            let mut span: HashMap<(&str, &str), (i64, i64)> = HashMap::new();
            for e in &episodes {
                let s = span
                    .entry((&e.iata_id, &e.vehicle_id))
                    .or_insert((e.start, e.start + e.length));
                s.0 = s.0.min(e.start);
                s.1 = s.1.max(e.start + e.length);
            }
            span.values().map(|(a, b)| b - a).sum()
        }
    };
    let counted = |e: &&Episode| match &opts.operational {
        OperationalTime::PerVehicle(map) => IataId::new(e.iata_id.clone()).is_ok_and(|iata_id| {
            map.contains_key(&VehicleKey {
                iata_id,
                vehicle_id: e.vehicle_id.clone(),
            })
        }),
        OperationalTime::ObservedSpan => true,
    };
    let share = |pred: &dyn Fn(i64) -> bool| -> f64 {
        if operational <= 0 {
            return 0.0;
        }
        let idle: i64 = episodes
            .iter()
            .filter(counted)
            .filter(|e| pred(e.length))
            .map(|e| e.length)
            .sum();
        (100.0 * idle as f64 / operational as f64).min(100.0)
    };
    Ok(DurationAudit {
        zero_pct: pct(zero, n),
        negative_pct: pct(negative, n),
        idle_share_adjusted_pct: share(&|len| len > opts.adjusted_min_secs),
        idle_share_unadjusted_pct: share(&|len| len >= opts.unadjusted_min_secs),
        episodes: episodes.len(),
        operational_secs: operational,
        degenerate: operational <= 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: &[[&str; 13]]) -> ExportTable {
        ExportTable {
            headers: EXPORT_COLUMNS.iter().map(|s| s.to_string()).collect(),
            rows: rows.iter().map(|r| r.iter().map(|s| s.to_string()).collect()).collect(),
        }
    }

    fn row(vehicle: &'static str, route: &'static str, trip: &'static str, lat: &'static str, dt: &'static str, dur: &'static str) -> [&'static str; 13] {
        [
            "BOS", "MBTA", "Boston", "United States", "United States East", "North America", vehicle, trip, route,
            lat, "-71.05", dt, dur,
        ]
    }

    #[test]
    fn clean_types_pass() {
        let t = table(&[row("v1", "r", "t", "42.1", "100", "60")]);
        let a = audit_types(&t).unwrap();
        assert_eq!(a.verdicts.len(), 14);
        assert!(a.verdicts.iter().all(|v| v.pass));
        assert!(!a.zero_rows);
    }

    #[test]
    fn bad_duration_fails_its_verdict() {
        let t = table(&[row("v1", "r", "t", "42.1", "100", "abc")]);
        let a = audit_types(&t).unwrap();
        let failing: Vec<_> = a.verdicts.iter().filter(|v| !v.pass).map(|v| v.number).collect();
        assert_eq!(failing, vec![14]);
    }

    #[test]
    fn empty_table_passes_vacuously() {
        let a = audit_types(&table(&[])).unwrap();
        assert!(a.zero_rows);
        assert!(a.verdicts.iter().all(|v| v.pass));
    }

    #[test]
    fn wrong_header_is_schema_mismatch() {
        let mut t = table(&[]);
        t.headers[0] = "iata".into();
        assert!(matches!(audit_types(&t), Err(AuditError::SchemaMismatch { .. })));
    }

    #[test]
    fn duplication_counts_repeats_after_first() {
        let mut rows: Vec<[&str; 13]> = (0..8)
            .map(|i| row(["a", "b", "c", "d", "e", "f", "g", "h"][i], "r", "t", "42.1", "100", "60"))
            .collect();
        rows.push(row("z", "r", "t", "42.1", "100", "60"));
        rows.push(row("z", "r", "t", "42.1", "100", "60"));
        let d = audit_duplication(&table(&rows));
        assert_eq!(d.fields_pct, 0.0);
        assert!((d.observations_pct - 10.0).abs() < 1e-12);
    }

    #[test]
    fn missingness_joint_and_single() {
        let mut rows = vec![row("v", "", "t", "42.1", "1", "60")];
        rows.extend((0..18).map(|_| row("v", "r", "t", "42.1", "1", "60")));
        rows.push(row("v", "", "", "42.1", "1", "60"));
        let m = audit_missingness(&table(&rows)).unwrap();
        assert!((m.get(24).unwrap() - 10.0).abs() < 1e-12);
        assert!((m.get(25).unwrap() - 5.0).abs() < 1e-12);
        assert!((m.get(26).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(m.get(17), Some(0.0));
    }

    #[test]
    fn geobounds_one_percent() {
        let mut rows: Vec<_> = (0..99).map(|_| row("v", "r", "t", "42.1", "1", "60")).collect();
        rows.push(row("v", "r", "t", "95", "1", "60"));
        let g = audit_geobounds(&table(&rows)).unwrap();
        assert!((g.lat_over_pct - 1.0).abs() < 1e-12);
        assert_eq!(g.lat_zero_pct + g.lat_under_pct + g.lon_zero_pct + g.lon_over_pct + g.lon_under_pct, 0.0);
    }

    fn datetimes(ts: impl IntoIterator<Item = i64>) -> ExportTable {
        let cells: Vec<String> = ts.into_iter().map(|t| t.to_string()).collect();
        ExportTable {
            headers: EXPORT_COLUMNS.iter().map(|s| s.to_string()).collect(),
            rows: cells
                .iter()
                .map(|t| {
                    let mut r = row("v", "r", "t", "42.1", "1", "60").map(str::to_string).to_vec();
                    r[11] = t.clone();
                    r
                })
                .collect(),
        }
    }

    #[test]
    fn steady_cadence_has_no_downtime() {
        let t = audit_temporal(&datetimes((0..=120).map(|i| 1_000 + 30 * i))).unwrap();
        assert_eq!(t.downtime_pct, 0.0);
        assert_eq!(t.max_gap_secs, 30);
        assert_eq!(t.elapsed_secs, 3600);
    }

    #[test]
    fn five_minute_hole_in_a_day() {
        // 30 s cadence over 24 h, with the 270 s of observations after t=3600 missing
        let ts = (0..=2880)
            .map(|i| 30 * i)
            .filter(|&t| !(3630..=3870).contains(&t))
            .map(|t| t + 1_000);
        let t = audit_temporal(&datetimes(ts)).unwrap();
        assert_eq!(t.max_gap_secs, 300);
        assert_eq!(t.elapsed_secs, 86_400);
        assert!((t.downtime_pct - 300.0 / 86_400.0 * 100.0).abs() < 1e-12);
    }

    #[test]
    fn single_observation_is_degenerate() {
        let t = audit_temporal(&datetimes([5])).unwrap();
        assert!(t.degenerate);
        assert_eq!((t.elapsed_secs, t.downtime_pct), (0, 0.0));
    }

    #[test]
    fn episode_ladder_collapses_to_max() {
        let rows = [
            row("v", "r", "t", "42.1", "100", "60"),
            row("v", "r", "t", "42.1", "100", "90"),
            row("v", "r", "t", "42.1", "100", "120"),
        ];
        let eps = reconstruct_episodes(&table(&rows)).unwrap();
        assert_eq!(eps.len(), 1);
        assert_eq!(eps[0].length, 120);
    }

    #[test]
    fn idle_share_with_known_operational_time() {
        let rows = [row("v", "r", "t", "42.1", "100", "2400")];
        let key = VehicleKey {
            iata_id: IataId::new("BOS").unwrap(),
            vehicle_id: "v".into(),
        };
        let opts = DurationOptions {
            operational: OperationalTime::PerVehicle(HashMap::from([(key, 6000)])),
            ..Default::default()
        };
        let d = audit_duration(&table(&rows), &opts).unwrap();
        assert!((d.idle_share_adjusted_pct - 40.0).abs() < 1e-12);
        assert!((d.idle_share_unadjusted_pct - 40.0).abs() < 1e-12);
    }
}
