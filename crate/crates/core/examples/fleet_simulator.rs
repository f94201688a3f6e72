//! Loads a fleet script, prints what the oracle expects the detector to
//! report, and serves the script as a live feed for a few seconds.
//!
//!     cargo run --example fleet_simulator [script.toml]

use std::sync::Arc;
use std::time::Duration;

use transit_idle::clock::{Clock, ScaledClock};
use transit_idle::extract::decode_feed;
use transit_idle::model::DetectorParams;
use transit_idle::sim::{oracle_events, serve_script, FleetScript};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/config/sim/fleet.toml").into());
    let script = Arc::new(FleetScript::load(&path)?);
    let params = DetectorParams::default();
    let polls = script.poll_grid(params.r(), 121);

    let batches = oracle_events(&script, &params, &polls);
    let events: Vec<_> = batches.iter().flatten().collect();
    println!("{} vehicles, {} expected events", script.vehicles().len(), events.len());
    let mut longest: Vec<_> = events.iter().filter(|e| e.duration >= 600).collect();
    longest.sort_by_key(|e| (&e.vehicle_id, std::cmp::Reverse(e.duration)));
    longest.dedup_by_key(|e| &e.vehicle_id);
    for e in longest.iter().take(3) {
        println!("  {} idles from {} for {} s", e.vehicle_id, e.datetime, e.duration);
    }

    // one simulated minute per real second
    let clock: Arc<dyn Clock> = Arc::new(ScaledClock::new(script.epoch() + 600, 60.0));
    let server = serve_script(script.clone(), clock, "127.0.0.1:0".parse()?).await?;
    println!("serving {}", server.url());
    let client = reqwest::Client::new();
    for _ in 0..3 {
        let body = client.get(server.url()).send().await?.bytes().await?;
        let feed = decode_feed(&body, script.iata_id(), 0)?;
        let r = &feed.records[0];
        println!("  {} at ({:.6}, {:.6}), feed time {:?}", r.vehicle_id, r.latitude, r.longitude, feed.header_timestamp);
        tokio::time::sleep(Duration::from_secs(1)).await;
    }
    server.shutdown().await;
    Ok(())
}
