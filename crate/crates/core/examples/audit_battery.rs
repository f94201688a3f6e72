//! Runs the validation battery over an export file and prints the report.
//!
//!     cargo run --example audit_battery [events.csv] [IATA=gtfs.zip ...]
//!
//! Without arguments it simulates an hour of the bundled fleet, exports it
//! and audits that, using route shapes traced from the script.

use std::collections::BTreeMap;

use transit_idle::audit::{run_battery, BatteryOptions, DurationOptions, ExportTable, ShapeIndex, StaticGtfs};
use transit_idle::model::{AgencyInfo, DetectorParams};
use transit_idle::run_detector;
use transit_idle::sim::FleetScript;
use transit_idle::store::{export_csv, EventStore, ExportRange, SqliteStore};

fn simulated() -> Result<(ExportTable, BatteryOptions), Box<dyn std::error::Error>> {
    let script = FleetScript::load(concat!(env!("CARGO_MANIFEST_DIR"), "/config/sim/fleet.toml"))?;
    let store = SqliteStore::in_memory()?;
    store.upsert_agencies(&[AgencyInfo {
        iata_id: script.iata_id().clone(),
        agency: "Simulated Transit".into(),
        city: "Simville".into(),
        country: "Nowhere".into(),
        region: "Simulation".into(),
        continent: "Nowhere".into(),
    }])?;
    let params = DetectorParams::default();
    let polls = script.poll_grid(params.r(), 121);
    for batch in run_detector(script.snapshots("sim", &polls), params) {
        store.insert_events(&batch)?;
    }
    let mut csv = Vec::new();
    export_csv(&store, ExportRange::all(), &mut csv)?;

    let shapes = BTreeMap::from([(script.iata_id().to_string(), ShapeIndex::new(&script.static_gtfs(1e-4))?)]);
    let opts = BatteryOptions {
        shapes,
        duration: DurationOptions {
            unadjusted_min_secs: params.min_duration(),
            operational: script.operational_time(),
            ..Default::default()
        },
        ..Default::default()
    };
    Ok((ExportTable::read(csv.as_slice())?, opts))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (table, opts) = match args.split_first() {
        None => simulated()?,
        Some((csv, gtfs)) => {
            let mut shapes = BTreeMap::new();
            for arg in gtfs {
                let (iata, path) = arg.split_once('=').ok_or("expected IATA=path")?;
                shapes.insert(iata.to_string(), ShapeIndex::new(&StaticGtfs::load(path)?)?);
            }
            (ExportTable::from_path(csv)?, BatteryOptions { shapes, ..Default::default() })
        }
    };
    print!("{}", run_battery(&table, &opts)?);
    Ok(())
}
