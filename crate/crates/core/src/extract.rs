//! Extract: fetch GTFS Realtime vehicle-position feeds and merge them into
//! one [`FeedSnapshot`] per region per tick.

use std::sync::Arc;
use std::time::Duration;

use futures::future::join_all;
use prost::Message;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::mpsc;
use tokio::task::JoinHandle;
use tokio::time::MissedTickBehavior;
use tokio_util::sync::CancellationToken;

use crate::clock::Clock;
use crate::gtfs_rt::FeedMessage;
use crate::model::{
    validate_record, EpochSecs, FeedSnapshot, IataId, Rejection, SourceFailure, VehicleRecord,
};

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("malformed GTFS Realtime payload: {0}")]
    MalformedPayload(#[from] prost::DecodeError),
    #[error("invalid source configuration: {0}")]
    InvalidSource(String),
    #[error("request to {url} failed: {message}")]
    Fetch { url: String, message: String },
    #[error("request to {url} timed out after {timeout:?}")]
    Timeout { url: String, timeout: Duration },
}

/// Static auth header sent with every request to a source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceAuth {
    pub header: String,
    pub secret: String,
}

/// One GTFS Realtime endpoint feeding a region.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceConfig {
    pub region_id: String,
    pub endpoint_url: String,
    /// Stamped onto every decoded record; the feed itself has no such field.
    pub iata_id: IataId,
    #[serde(default)]
    pub auth: Option<SourceAuth>,
}

impl SourceConfig {
    pub fn new(
        region_id: impl Into<String>,
        endpoint_url: impl Into<String>,
        iata_id: IataId,
    ) -> Result<Self, ExtractError> {
        let cfg = Self {
            region_id: region_id.into(),
            endpoint_url: endpoint_url.into(),
            iata_id,
            auth: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_auth(mut self, header: impl Into<String>, secret: impl Into<String>) -> Self {
        self.auth = Some(SourceAuth {
            header: header.into(),
            secret: secret.into(),
        });
        self
    }

    pub fn validate(&self) -> Result<(), ExtractError> {
        if self.region_id.trim().is_empty() {
            return Err(ExtractError::InvalidSource("empty region_id".into()));
        }
        if self.endpoint_url.trim().is_empty() {
            return Err(ExtractError::InvalidSource(format!(
                "empty endpoint_url for {}",
                self.iata_id
            )));
        }
        Ok(())
    }
}

/// Records decoded from one payload, plus what was dropped on the way.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DecodedFeed {
    pub header_timestamp: Option<EpochSecs>,
    pub records: Vec<VehicleRecord>,
    pub rejected: Vec<(String, Rejection)>,
}

fn non_empty(s: Option<&String>) -> Option<String> {
    s.filter(|s| !s.is_empty()).cloned()
}

fn positive(ts: Option<u64>) -> Option<EpochSecs> {
    ts.filter(|&t| t > 0)
        .and_then(|t| EpochSecs::try_from(t).ok())
}

/// Decodes a binary `FeedMessage` into validated vehicle records.
///
/// Each entity carrying a position becomes one record. Its timestamp is the
/// entity timestamp if set, else the header timestamp, else `fallback_time`.
/// The vehicle id is `vehicle.vehicle.id`, falling back to the entity id.
/// Positions are `float` on the wire and widen losslessly to `f64`.
pub fn decode_feed(
    bytes: &[u8],
    iata: &IataId,
    fallback_time: EpochSecs,
) -> Result<DecodedFeed, ExtractError> {
    let msg = FeedMessage::decode(bytes)?;
    let header_ts = positive(msg.header.timestamp);
    let mut out = DecodedFeed {
        header_timestamp: header_ts,
        ..Default::default()
    };

    for entity in msg.entity {
        if entity.is_deleted == Some(true) {
            continue;
        }
        let Some(vp) = entity.vehicle else { continue };
        let Some(pos) = vp.position else { continue };

        let vehicle_id = non_empty(vp.vehicle.as_ref().and_then(|v| v.id.as_ref()))
            .unwrap_or_else(|| entity.id.clone());
        let trip = vp.trip.as_ref();
        let rec = VehicleRecord {
            iata_id: iata.clone(),
            vehicle_id,
            route_id: non_empty(trip.and_then(|t| t.route_id.as_ref())),
            trip_id: non_empty(trip.and_then(|t| t.trip_id.as_ref())),
            latitude: f64::from(pos.latitude),
            longitude: f64::from(pos.longitude),
            timestamp: positive(vp.timestamp)
                .or(header_ts)
                .unwrap_or(fallback_time),
        };
        match validate_record(rec) {
            Ok(rec) => out.records.push(rec),
            Err(why) => out.rejected.push((entity.id, why)),
        }
    }
    Ok(out)
}

/// Fetches and decodes one source, bounded by `timeout`.
pub async fn fetch_source(
    client: &reqwest::Client,
    source: &SourceConfig,
    timeout: Duration,
    fallback_time: EpochSecs,
) -> Result<DecodedFeed, ExtractError> {
    let url = source.endpoint_url.clone();
    let request = async {
        let mut req = client.get(&source.endpoint_url);
        if let Some(auth) = &source.auth {
            req = req.header(auth.header.as_str(), auth.secret.as_str());
        }
        let resp = req.send().await.and_then(|r| r.error_for_status())?;
        resp.bytes().await
    };
    let body = match tokio::time::timeout(timeout, request).await {
        Err(_) => return Err(ExtractError::Timeout { url, timeout }),
        Ok(Err(e)) => {
            return Err(ExtractError::Fetch {
                url,
                message: e.to_string(),
            })
        }
        Ok(Ok(body)) => body,
    };
    decode_feed(&body, &source.iata_id, fallback_time)
}

/// Polls every source of one region each `r` seconds, start to start.
pub struct RegionPoller {
    region_id: String,
    sources: Vec<SourceConfig>,
    r: u32,
    client: reqwest::Client,
    clock: Arc<dyn Clock>,
}

impl RegionPoller {
    pub fn new(
        region_id: impl Into<String>,
        sources: Vec<SourceConfig>,
        r: u32,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, ExtractError> {
        let region_id = region_id.into();
        if r == 0 {
            return Err(ExtractError::InvalidSource("poll interval r must be >= 1".into()));
        }
        for s in &sources {
            s.validate()?;
            if s.region_id != region_id {
                return Err(ExtractError::InvalidSource(format!(
                    "source {} belongs to region {}, not {region_id}",
                    s.endpoint_url, s.region_id
                )));
            }
        }
        Ok(Self {
            region_id,
            sources,
            r,
            client: reqwest::Client::new(),
            clock,
        })
    }

    pub fn region_id(&self) -> &str {
        &self.region_id
    }

    /// Per-request timeout: half the poll interval.
    pub fn request_timeout(&self) -> Duration {
        self.clock.real_duration(f64::from(self.r) / 2.0)
    }

    /// Fetches all sources concurrently and merges whatever succeeded.
    pub async fn poll_once(&self) -> FeedSnapshot {
        let poll_time = self.clock.now();
        let timeout = self.request_timeout();
        let results = join_all(
            self.sources
                .iter()
                .map(|s| fetch_source(&self.client, s, timeout, poll_time)),
        )
        .await;

        let mut snap = FeedSnapshot::new(self.region_id.clone(), poll_time);
        for (source, result) in self.sources.iter().zip(results) {
            match result {
                Ok(decoded) => {
                    if !decoded.rejected.is_empty() {
                        tracing::debug!(
                            region = %self.region_id,
                            source = %source.endpoint_url,
                            dropped = decoded.rejected.len(),
                            "dropped invalid entities"
                        );
                    }
                    for rec in decoded.records {
                        snap.insert(rec);
                    }
                }
                Err(e) => {
                    tracing::warn!(region = %self.region_id, error = %e, "source failed");
                    snap.failures.push(SourceFailure {
                        endpoint_url: source.endpoint_url.clone(),
                        message: e.to_string(),
                    });
                }
            }
        }
        snap
    }

    /// Emits snapshots into `tx` until cancelled or the receiver is dropped.
    /// A full channel blocks the poller rather than dropping snapshots.
    pub async fn run(self, tx: mpsc::Sender<FeedSnapshot>, cancel: CancellationToken) {
        let mut ticker = tokio::time::interval(self.clock.real_duration(f64::from(self.r)));
        ticker.set_missed_tick_behavior(MissedTickBehavior::Delay);
        loop {
            tokio::select! {
                _ = cancel.cancelled() => break,
                _ = ticker.tick() => {}
            }
            let snap = tokio::select! {
                _ = cancel.cancelled() => break,
                snap = self.poll_once() => snap,
            };
            if tx.send(snap).await.is_err() {
                break;
            }
        }
    }

    pub fn spawn(
        self,
        capacity: usize,
        cancel: CancellationToken,
    ) -> (mpsc::Receiver<FeedSnapshot>, JoinHandle<()>) {
        let (tx, rx) = mpsc::channel(capacity);
        let handle = tokio::spawn(self.run(tx, cancel));
        (rx, handle)
    }
}
