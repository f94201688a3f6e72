//! Feeds hand-built snapshots through the detector and prints each batch.
//!
//!     cargo run --example detect_idling
//!
//! One bus stops for four polls while another keeps moving.

use transit_idle::model::{DetectorParams, FeedSnapshot, IataId, VehicleRecord};
use transit_idle::run_detector;

fn record(vehicle: &str, lon: f64, t: i64) -> VehicleRecord {
    VehicleRecord {
        iata_id: IataId::new("BOS").unwrap(),
        vehicle_id: vehicle.into(),
        route_id: Some("39".into()),
        trip_id: Some("trip-1".into()),
        latitude: 42.3355,
        longitude: lon,
        timestamp: t,
    }
}

fn main() {
    let params = DetectorParams::new(30, 1, 10).unwrap();
    let lons = [-71.100, -71.099, -71.099, -71.099, -71.099, -71.098, -71.097];
    let snapshots = lons.iter().enumerate().map(|(i, &lon)| {
        let t = 1_706_573_400 + 30 * i as i64;
        let moving = record("y1740", -71.2 + 0.001 * i as f64, t);
        FeedSnapshot::from_records("us-east", t, [record("y0811", lon, t), moving])
    });

    for (tick, batch) in run_detector(snapshots, params).enumerate() {
        print!("tick {tick}:");
        if batch.is_empty() {
            print!(" -");
        }
        for e in &batch {
            print!(" {} idle since {} for {} s;", e.vehicle_id, e.datetime, e.duration);
        }
        println!();
    }
}
