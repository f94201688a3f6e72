//! Decodes a GTFS Realtime vehicle-positions payload into validated records.
//!
//!     cargo run --example decode_feed [path/to/feed.pb] [IATA]
//!
//! Without arguments it decodes the bundled single-vehicle sample.

use transit_idle::extract::decode_feed;
use transit_idle::model::IataId;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let path = args
        .next()
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/vehicle_position.pb").into());
    let iata = IataId::new(args.next().unwrap_or_else(|| "BOS".into()))?;

    let bytes = std::fs::read(&path)?;
    let feed = decode_feed(&bytes, &iata, 0)?;
    println!("header timestamp: {:?}", feed.header_timestamp);
    for r in &feed.records {
        println!(
            "{} {:<10} route={:<6} trip={:<12} ({:.7}, {:.7}) @ {}",
            r.iata_id,
            r.vehicle_id,
            r.route_id.as_deref().unwrap_or("-"),
            r.trip_id.as_deref().unwrap_or("-"),
            r.latitude,
            r.longitude,
            r.timestamp
        );
    }
    for (entity, why) in &feed.rejected {
        println!("dropped {entity}: {why}");
    }
    Ok(())
}
