//! Full pipeline against the simulator on a compressed clock: feed server,
//! polling, detection, websocket stream, SQLite store and CSV export.
//!
//!     cargo run --example end_to_end
//!
//! Twenty simulated minutes pass in about four seconds.

use std::sync::Arc;
use std::time::Duration;

use futures::StreamExt;

use transit_idle::clock::{Clock, ScaledClock};
use transit_idle::model::{AgencyInfo, DetectorParams};
use transit_idle::pipeline::{self, PipelineConfig, RegionConfig, SourceEntry};
use transit_idle::sim::{serve_script, FleetScript};
use transit_idle::store::{export_csv, EventStore, ExportRange, SqliteStore};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let script = FleetScript::load(concat!(env!("CARGO_MANIFEST_DIR"), "/config/sim/fleet.toml"))?;
    let origin = script.epoch() + 300;
    let speedup = 300.0;
    let iata = script.iata_id().clone();

    let feed_clock: Arc<dyn Clock> = Arc::new(ScaledClock::new(origin, speedup));
    let feed = serve_script(Arc::new(script), feed_clock, "127.0.0.1:0".parse()?).await?;

    let config = PipelineConfig {
        store: ":memory:".into(),
        bind: "127.0.0.1:0".parse()?,
        params: DetectorParams::default(),
        channel_capacity: 16,
        clock: None,
        agencies: vec![AgencyInfo {
            iata_id: iata.clone(),
            agency: "Simulated Transit".into(),
            city: "Simville".into(),
            country: "Nowhere".into(),
            region: "Simulation".into(),
            continent: "Nowhere".into(),
        }],
        regions: vec![RegionConfig {
            region_id: "sim".into(),
            params: None,
            sources: vec![SourceEntry {
                iata_id: iata,
                endpoint_url: feed.url(),
                auth: None,
            }],
        }],
    };
    let store = Arc::new(SqliteStore::in_memory()?);
    let clock = Arc::new(ScaledClock::new(origin, speedup));
    let running = pipeline::start(&config, clock.clone(), store.clone()).await?;

    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{}/events/sim", running.local_addr())).await?;
    let reader = tokio::spawn(async move {
        let mut streamed = 0;
        while let Some(Ok(msg)) = ws.next().await {
            if let Ok(text) = msg.to_text() {
                streamed += serde_json::from_str::<Vec<serde_json::Value>>(text).map_or(0, |v| v.len());
            }
        }
        streamed
    });

    while clock.now() < origin + 1_200 {
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    let counts = running.shutdown().await;
    feed.shutdown().await;
    let streamed = reader.await?;

    let mut csv = Vec::new();
    let exported = export_csv(store.as_ref(), ExportRange::all(), &mut csv)?;
    let c = counts["sim"];
    println!("snapshots {} batches {} events {}", c.snapshots, c.batches, c.events);
    println!("streamed {streamed}, stored {}, exported {exported}", store.event_count()?);
    for line in String::from_utf8(csv)?.lines().take(4) {
        println!("{line}");
    }
    Ok(())
}
