//! Shared end-to-end harness: a simulated feed, a full pipeline on a
//! compressed clock, and a websocket subscriber recording the stream.

#![allow(dead_code)]

use std::sync::Arc;
use std::time::Duration;

use futures::StreamExt;
use tokio_tungstenite::tungstenite::Message;

use transit_idle::clock::{Clock, ScaledClock};
use transit_idle::model::{AgencyInfo, DetectorParams, IataId, IdlingEvent};
use transit_idle::pipeline::{self, PipelineConfig, RegionConfig, RegionCounts, SourceEntry};
use transit_idle::sim::{serve_script, FleetScript};
use transit_idle::store::{export_csv, read_export, EventStore, ExportRange, ExportRow, SqliteStore};

pub const REGION: &str = "sim";

pub fn sim_agency(iata: &IataId) -> AgencyInfo {
    AgencyInfo {
        iata_id: iata.clone(),
        agency: "Simulated Transit".into(),
        city: "Simville".into(),
        country: "Nowhere".into(),
        region: "Simulation".into(),
        continent: "Nowhere".into(),
    }
}

pub fn config_for(iata: &IataId, endpoint_url: String, params: DetectorParams) -> PipelineConfig {
    PipelineConfig {
        store: ":memory:".into(),
        bind: "127.0.0.1:0".parse().unwrap(),
        params,
        channel_capacity: 16,
        clock: None,
        agencies: vec![sim_agency(iata)],
        regions: vec![RegionConfig {
            region_id: REGION.into(),
            params: None,
            sources: vec![SourceEntry {
                iata_id: iata.clone(),
                endpoint_url,
                auth: None,
            }],
        }],
    }
}

pub struct E2eRun {
    pub streamed: Vec<IdlingEvent>,
    pub frames: usize,
    pub counts: RegionCounts,
    pub store_count: u64,
    pub csv: Vec<u8>,
    pub export_rows: Vec<ExportRow>,
}

/// Serves `script`, runs the pipeline until `sim_seconds` of simulated time
/// have passed, then shuts down and exports everything.
pub async fn run_e2e(script: FleetScript, params: DetectorParams, sim_seconds: i64, speedup: f64) -> E2eRun {
    let origin = script.epoch();
    let iata = script.iata_id().clone();
    let feed_clock: Arc<dyn Clock> = Arc::new(ScaledClock::new(origin, speedup));
    let feed = serve_script(Arc::new(script), feed_clock, "127.0.0.1:0".parse().unwrap())
        .await
        .unwrap();

    let cfg = config_for(&iata, feed.url(), params);
    let store = Arc::new(SqliteStore::in_memory().unwrap());
    let clock = Arc::new(ScaledClock::new(origin, speedup));
    let running = pipeline::start(&cfg, clock.clone(), store.clone()).await.unwrap();

    let url = format!("ws://{}/events/{REGION}", running.local_addr());
    let (ws, _) = tokio_tungstenite::connect_async(url).await.unwrap();
    while running.broadcaster().subscriber_count(REGION) == 0 {
        tokio::time::sleep(Duration::from_millis(1)).await;
    }
    let reader = tokio::spawn(async move {
        let mut frames = Vec::new();
        let mut ws = ws;
        while let Some(Ok(msg)) = ws.next().await {
            match msg {
                Message::Text(t) => frames.push(t),
                Message::Close(_) => break,
                _ => {}
            }
        }
        frames
    });

    while clock.now() < origin + sim_seconds {
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    let counts = running.shutdown().await.remove(REGION).unwrap();
    feed.shutdown().await;
    let frames = tokio::time::timeout(Duration::from_secs(10), reader).await.unwrap().unwrap();

    let streamed: Vec<IdlingEvent> = frames
        .iter()
        .flat_map(|f| serde_json::from_str::<Vec<IdlingEvent>>(f).unwrap())
        .collect();
    let mut csv = Vec::new();
    export_csv(store.as_ref(), ExportRange::all(), &mut csv).unwrap();
    let export_rows = read_export(csv.as_slice()).unwrap();
    E2eRun {
        streamed,
        frames: frames.len(),
        counts,
        store_count: store.event_count().unwrap(),
        csv,
        export_rows,
    }
}

/// Sort key making event multisets comparable.
pub fn event_key(e: &IdlingEvent) -> (String, i64, i64, u64, u64) {
    (e.vehicle_id.clone(), e.datetime, e.duration, e.latitude.to_bits(), e.longitude.to_bits())
}
