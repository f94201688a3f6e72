//! Stores agencies and events in SQLite and exports a time range as CSV.
//!
//!     cargo run --example event_store

use transit_idle::model::{AgencyInfo, IataId, IdlingEvent};
use transit_idle::store::{export_csv, EventStore, ExportRange, SqliteStore};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let store = SqliteStore::in_memory()?;
    let lax = IataId::new("LAX")?;
    store.upsert_agencies(&[AgencyInfo {
        iata_id: lax.clone(),
        agency: "(Metro)".into(),
        city: "Los Angeles".into(),
        country: "United States".into(),
        region: "United States West".into(),
        continent: "North America".into(),
    }])?;

    let batch: Vec<IdlingEvent> = (0..4)
        .map(|i| IdlingEvent {
            iata_id: lax.clone(),
            vehicle_id: format!("bus-{}", i % 2),
            route_id: Some("720".into()),
            trip_id: None,
            latitude: 34.0522,
            longitude: -118.2437 + 0.001 * f64::from(i),
            datetime: 1_700_000_000 + 60 * i64::from(i),
            duration: 60,
        })
        .collect();
    store.insert_events(&batch)?;
    println!("{} events stored", store.event_count()?);

    let range: ExportRange = "1700000000..1700000060".parse()?;
    let rows = export_csv(&store, range, std::io::stdout().lock())?;
    eprintln!("{rows} rows in {}..{}", range.start(), range.end());
    Ok(())
}
