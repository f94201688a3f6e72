//! Relational persistence: an `agency` dimension table keyed by IATA code and
//! an `events` fact table, plus the joined CSV export.
//!
//! [`SqliteStore`] runs in-memory or on a file. Any other engine can sit
//! behind [`EventStore`].

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Mutex;

use rusqlite::{params, Connection, OptionalExtension};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AgencyInfo, EpochSecs, IataId, IdlingEvent};

/// Column order of the exported CSV: all agency fields, then the event fields
/// in the export query's select order (trip before route).
pub const EXPORT_COLUMNS: [&str; 13] = [
    "iata_id",
    "agency",
    "city",
    "country",
    "region",
    "continent",
    "vehicle_id",
    "trip_id",
    "route_id",
    "latitude",
    "longitude",
    "datetime",
    "duration",
];

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("conflicting agency rows for {0} in one batch")]
    DuplicateIata(IataId),
    #[error("unknown IATA id {0}: not in the agency table")]
    UnknownIata(IataId),
    #[error("invalid export range {start}..{end}: start must precede end")]
    InvalidRange { start: EpochSecs, end: EpochSecs },
    #[error("database error: {0}")]
    Database(#[from] rusqlite::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed export row: {0}")]
    MalformedRow(String),
    #[error("store lock poisoned")]
    Poisoned,
}

/// Inclusive datetime range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportRange {
    start: EpochSecs,
    end: EpochSecs,
}

impl ExportRange {
    pub fn new(start: EpochSecs, end: EpochSecs) -> Result<Self, StoreError> {
        if start >= end {
            return Err(StoreError::InvalidRange { start, end });
        }
        Ok(Self { start, end })
    }

    /// Covers every representable datetime.
    pub fn all() -> Self {
        Self {
            start: EpochSecs::MIN,
            end: EpochSecs::MAX,
        }
    }

    pub fn start(&self) -> EpochSecs {
        self.start
    }

    pub fn end(&self) -> EpochSecs {
        self.end
    }

    pub fn contains(&self, t: EpochSecs) -> bool {
        (self.start..=self.end).contains(&t)
    }
}

impl std::str::FromStr for ExportRange {
    type Err = String;

    /// Parses `start..end` in epoch seconds.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = s
            .split_once("..")
            .ok_or_else(|| format!("expected START..END, got {s:?}"))?;
        let start = a.trim().parse().map_err(|e| format!("bad start {a:?}: {e}"))?;
        let end = b.trim().parse().map_err(|e| format!("bad end {b:?}: {e}"))?;
        Self::new(start, end).map_err(|e| e.to_string())
    }
}

/// One row of the joined export.
#[derive(Debug, Clone, PartialEq)]
pub struct ExportRow {
    pub agency: AgencyInfo,
    pub event: IdlingEvent,
}

impl ExportRow {
    /// Cells in [`EXPORT_COLUMNS`] order. Coordinates keep a decimal point so
    /// they always read back as floats.
    pub fn cells(&self) -> [String; 13] {
        let a = &self.agency;
        let e = &self.event;
        [
            a.iata_id.to_string(),
            a.agency.clone(),
            a.city.clone(),
            a.country.clone(),
            a.region.clone(),
            a.continent.clone(),
            e.vehicle_id.clone(),
            e.trip_id.clone().unwrap_or_default(),
            e.route_id.clone().unwrap_or_default(),
            format!("{:?}", e.latitude),
            format!("{:?}", e.longitude),
            e.datetime.to_string(),
            e.duration.to_string(),
        ]
    }

    pub fn from_cells(cells: &[&str]) -> Result<Self, StoreError> {
        if cells.len() != EXPORT_COLUMNS.len() {
            return Err(StoreError::MalformedRow(format!(
                "expected {} fields, got {}",
                EXPORT_COLUMNS.len(),
                cells.len()
            )));
        }
        let bad = |what: &str, v: &str| StoreError::MalformedRow(format!("{what}: {v:?}"));
        let iata = IataId::new(cells[0]).map_err(|_| bad("iata_id", cells[0]))?;
        let opt = |s: &str| (!s.is_empty()).then(|| s.to_string());
        Ok(Self {
            agency: AgencyInfo {
                iata_id: iata.clone(),
                agency: cells[1].into(),
                city: cells[2].into(),
                country: cells[3].into(),
                region: cells[4].into(),
                continent: cells[5].into(),
            },
            event: IdlingEvent {
                iata_id: iata,
                vehicle_id: cells[6].into(),
                trip_id: opt(cells[7]),
                route_id: opt(cells[8]),
                latitude: cells[9].parse().map_err(|_| bad("latitude", cells[9]))?,
                longitude: cells[10].parse().map_err(|_| bad("longitude", cells[10]))?,
                datetime: cells[11].parse().map_err(|_| bad("datetime", cells[11]))?,
                duration: cells[12].parse().map_err(|_| bad("duration", cells[12]))?,
            },
        })
    }
}

pub trait EventStore: Send + Sync {
    /// Inserts or replaces agencies; the table keeps one row per IATA id.
    fn upsert_agencies(&self, rows: &[AgencyInfo]) -> Result<usize, StoreError>;

    /// Appends a batch atomically. Fails without writing if any IATA id is unknown.
    fn insert_events(&self, batch: &[IdlingEvent]) -> Result<usize, StoreError>;

    /// Joined rows with `datetime` in range, ordered by datetime, iata_id, vehicle_id.
    fn export_rows(&self, range: ExportRange) -> Result<Vec<ExportRow>, StoreError>;

    fn agencies(&self) -> Result<Vec<AgencyInfo>, StoreError>;

    fn event_count(&self) -> Result<u64, StoreError>;
}

/// Writes the header and one line per exported row. Returns the row count.
pub fn export_csv<W: Write>(
    store: &dyn EventStore,
    range: ExportRange,
    out: W,
) -> Result<usize, StoreError> {
    let rows = store.export_rows(range)?;
    write_csv(&rows, out)?;
    Ok(rows.len())
}

pub fn write_csv<W: Write>(rows: &[ExportRow], out: W) -> Result<(), StoreError> {
    let mut w = csv::WriterBuilder::new()
        .quote_style(csv::QuoteStyle::Necessary)
        .from_writer(out);
    w.write_record(EXPORT_COLUMNS)?;
    for row in rows {
        w.write_record(row.cells())?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Reads back a file produced by [`export_csv`].
pub fn read_export<R: Read>(input: R) -> Result<Vec<ExportRow>, StoreError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(EXPORT_COLUMNS.iter().copied()) {
        return Err(StoreError::MalformedRow(format!("unexpected header {headers:?}")));
    }
    rdr.records()
        .map(|rec| {
            let rec = rec?;
            let cells: Vec<&str> = rec.iter().collect();
            ExportRow::from_cells(&cells)
        })
        .collect()
}

const SCHEMA: &str = "
PRAGMA foreign_keys = ON;
CREATE TABLE IF NOT EXISTS agency (
    iata_id   TEXT PRIMARY KEY,
    agency    TEXT NOT NULL,
    city      TEXT NOT NULL,
    country   TEXT NOT NULL,
    region    TEXT NOT NULL,
    continent TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS events (
    iata_id    TEXT NOT NULL REFERENCES agency (iata_id),
    vehicle_id TEXT NOT NULL,
    route_id   TEXT,
    trip_id    TEXT,
    latitude   REAL NOT NULL,
    longitude  REAL NOT NULL,
    datetime   INTEGER NOT NULL,
    duration   INTEGER NOT NULL
);
CREATE INDEX IF NOT EXISTS events_datetime ON events (datetime);
";

const EXPORT_QUERY: &str = "
SELECT agency.*, events.vehicle_id,
       events.trip_id, events.route_id,
       events.latitude, events.longitude,
       events.datetime, events.duration
FROM agency
LEFT JOIN events ON agency.iata_id = events.iata_id
WHERE events.datetime BETWEEN ?1 AND ?2
ORDER BY events.datetime, agency.iata_id, events.vehicle_id, events.rowid
";

pub struct SqliteStore {
    conn: Mutex<Connection>,
}

impl SqliteStore {
    pub fn in_memory() -> Result<Self, StoreError> {
        Self::init(Connection::open_in_memory()?)
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let conn = Connection::open(path)?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        Self::init(conn)
    }

    fn init(conn: Connection) -> Result<Self, StoreError> {
        conn.execute_batch(SCHEMA)?;
        Ok(Self {
            conn: Mutex::new(conn),
        })
    }

    fn lock(&self) -> Result<std::sync::MutexGuard<'_, Connection>, StoreError> {
        self.conn.lock().map_err(|_| StoreError::Poisoned)
    }
}

fn agency_from_row(row: &rusqlite::Row<'_>) -> rusqlite::Result<(String, [String; 5])> {
    Ok((
        row.get(0)?,
        [row.get(1)?, row.get(2)?, row.get(3)?, row.get(4)?, row.get(5)?],
    ))
}

fn make_agency(iata: String, f: [String; 5]) -> Result<AgencyInfo, StoreError> {
    let iata_id = IataId::new(iata.clone()).map_err(|_| StoreError::MalformedRow(iata))?;
    let [agency, city, country, region, continent] = f;
    Ok(AgencyInfo {
        iata_id,
        agency,
        city,
        country,
        region,
        continent,
    })
}

impl EventStore for SqliteStore {
    fn upsert_agencies(&self, rows: &[AgencyInfo]) -> Result<usize, StoreError> {
        let mut unique: HashMap<&IataId, &AgencyInfo> = HashMap::new();
        for row in rows {
            if let Some(prev) = unique.insert(&row.iata_id, row) {
                if prev != row {
                    return Err(StoreError::DuplicateIata(row.iata_id.clone()));
                }
            }
        }
        let mut conn = self.lock()?;
        let tx = conn.transaction()?;
        {
            let mut stmt = tx.prepare(
                "INSERT INTO agency (iata_id, agency, city, country, region, continent)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6)
                 ON CONFLICT (iata_id) DO UPDATE SET
                    agency = excluded.agency, city = excluded.city, country = excluded.country,
                    region = excluded.region, continent = excluded.continent",
            )?;
            for a in unique.values() {
                stmt.execute(params![
                    a.iata_id.as_str(),
                    a.agency,
                    a.city,
                    a.country,
                    a.region,
                    a.continent
                ])?;
            }
        }
        tx.commit()?;
        Ok(unique.len())
    }

    fn insert_events(&self, batch: &[IdlingEvent]) -> Result<usize, StoreError> {
        if batch.is_empty() {
            return Ok(0);
        }
        let mut conn = self.lock()?;
        let tx = conn.transaction()?;
        {
            let mut known = HashSet::new();
            let mut lookup = tx.prepare_cached("SELECT 1 FROM agency WHERE iata_id = ?1")?;
            for e in batch {
                if !known.contains(&e.iata_id) {
                    let hit: Option<i64> = lookup
                        .query_row([e.iata_id.as_str()], |r| r.get(0))
                        .optional()?;
                    if hit.is_none() {
                        return Err(StoreError::UnknownIata(e.iata_id.clone()));
                    }
                    known.insert(e.iata_id.clone());
                }
            }
            let mut stmt = tx.prepare_cached(
                "INSERT INTO events (iata_id, vehicle_id, route_id, trip_id, latitude, longitude, datetime, duration)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8)",
            )?;
            for e in batch {
                stmt.execute(params![
                    e.iata_id.as_str(),
                    e.vehicle_id,
                    e.route_id,
                    e.trip_id,
                    e.latitude,
                    e.longitude,
                    e.datetime,
                    e.duration
                ])?;
            }
        }
        tx.commit()?;
        Ok(batch.len())
    }

    fn export_rows(&self, range: ExportRange) -> Result<Vec<ExportRow>, StoreError> {
        let conn = self.lock()?;
        let mut stmt = conn.prepare_cached(EXPORT_QUERY)?;
        let raw = stmt
            .query_map(params![range.start(), range.end()], |row| {
                let (iata, fields) = agency_from_row(row)?;
                Ok((
                    iata,
                    fields,
                    row.get::<_, String>(6)?,
                    row.get::<_, Option<String>>(7)?,
                    row.get::<_, Option<String>>(8)?,
                    row.get::<_, f64>(9)?,
                    row.get::<_, f64>(10)?,
                    row.get::<_, i64>(11)?,
                    row.get::<_, i64>(12)?,
                ))
            })?
            .collect::<Result<Vec<_>, _>>()?;
        drop(stmt);
        drop(conn);

        raw.into_iter()
            .map(|(iata, fields, vehicle_id, trip_id, route_id, latitude, longitude, datetime, duration)| {
                let agency = make_agency(iata, fields)?;
                Ok(ExportRow {
                    event: IdlingEvent {
                        iata_id: agency.iata_id.clone(),
                        vehicle_id,
                        route_id,
                        trip_id,
                        latitude,
                        longitude,
                        datetime,
                        duration,
                    },
                    agency,
                })
            })
            .collect()
    }

    fn agencies(&self) -> Result<Vec<AgencyInfo>, StoreError> {
        let conn = self.lock()?;
        let mut stmt = conn.prepare("SELECT * FROM agency ORDER BY iata_id")?;
        let raw = stmt
            .query_map([], agency_from_row)?
            .collect::<Result<Vec<_>, _>>()?;
        raw.into_iter().map(|(i, f)| make_agency(i, f)).collect()
    }

    fn event_count(&self) -> Result<u64, StoreError> {
        let conn = self.lock()?;
        let n: i64 = conn.query_row("SELECT COUNT(*) FROM events", [], |r| r.get(0))?;
        Ok(n as u64)
    }
}
