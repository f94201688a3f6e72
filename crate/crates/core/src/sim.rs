//! Deterministic fleet simulator.
//!
//! A [`FleetScript`] describes vehicles moving along waypoint timelines and
//! the segments during which they stand still. Time is quantized to the
//! script tick: a request at time `t` sees the fleet as of
//! `epoch + floor((t - epoch) / tick) * tick`. Coordinates are rounded
//! through `f32`, the precision of the feed, so the stationary values served
//! over HTTP are bit-identical to the ones the oracle reasons about.
//!
//! [`oracle_events`] derives the expected idling events straight from the
//! script, without going through the detector.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use prost::Message;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;
use tokio_util::sync::CancellationToken;

use crate::audit::gtfs::{ShapePointRow, StaticGtfs, TripRow};
use crate::audit::OperationalTime;
use crate::clock::Clock;
use crate::extract::decode_feed;
use crate::gtfs_rt;
use crate::model::{DetectorParams, EpochSecs, FeedSnapshot, IataId, IdlingEvent, VehicleKey};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid script: {0}")]
    InvalidScript(String),
    #[error("cannot read script: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse script: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("failed to bind {addr}: {source}")]
    BindFailure {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
}

/// A point on a vehicle's path, `t` seconds after the script epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub t: i64,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptVehicle {
    pub vehicle_id: String,
    pub route_id: Option<String>,
    pub trip_id: Option<String>,
    pub waypoints: Vec<Waypoint>,
}

/// The vehicle stands at `(latitude, longitude)` from `start` to
/// `start + length` seconds after the epoch, both ends included.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdleSegment {
    pub vehicle: usize,
    pub start: i64,
    pub length: i64,
    pub latitude: f64,
    pub longitude: f64,
}

/// On-disk form of an idle segment, naming its vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IdleSegmentFile {
    vehicle_id: String,
    start: i64,
    length: i64,
    latitude: f64,
    longitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScriptFile {
    seed: u64,
    epoch: EpochSecs,
    iata_id: IataId,
    tick: i64,
    vehicles: Vec<ScriptVehicle>,
    #[serde(default)]
    idle_segments: Vec<IdleSegmentFile>,
}

/// One simulated vehicle position.
#[derive(Debug, Clone, PartialEq)]
pub struct SimPosition {
    pub vehicle_id: String,
    pub route_id: Option<String>,
    pub trip_id: Option<String>,
    pub latitude: f64,
    pub longitude: f64,
    pub timestamp: EpochSecs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FleetScript {
    seed: u64,
    epoch: EpochSecs,
    iata_id: IataId,
    tick: i64,
    vehicles: Vec<ScriptVehicle>,
    /// Per vehicle, sorted by start.
    idle: Vec<Vec<IdleSegment>>,
}

fn in_bounds(lat: f64, lon: f64) -> bool {
    (-90.0..=90.0).contains(&lat) && (-180.0..=180.0).contains(&lon)
}

/// Rounds to the precision a feed position carries.
pub fn feed_precision(v: f64) -> f64 {
    v as f32 as f64
}

impl FleetScript {
    pub fn new(
        seed: u64,
        epoch: EpochSecs,
        iata_id: IataId,
        tick: i64,
        vehicles: Vec<ScriptVehicle>,
        segments: Vec<IdleSegment>,
    ) -> Result<Self, SimError> {
        let bad = |m: String| Err(SimError::InvalidScript(m));
        if tick < 1 {
            return bad(format!("tick must be positive, got {tick}"));
        }
        let mut ids = std::collections::HashSet::new();
        for v in &vehicles {
            if v.vehicle_id.is_empty() || !ids.insert(v.vehicle_id.as_str()) {
                return bad(format!("vehicle id {:?} empty or repeated", v.vehicle_id));
            }
            if v.waypoints.is_empty() {
                return bad(format!("vehicle {} has no waypoints", v.vehicle_id));
            }
            if v.waypoints.windows(2).any(|w| w[1].t <= w[0].t) {
                return bad(format!("waypoints of {} must have increasing t", v.vehicle_id));
            }
            if let Some(w) = v.waypoints.iter().find(|w| !in_bounds(w.lat, w.lon)) {
                return bad(format!("waypoint ({}, {}) of {} out of bounds", w.lat, w.lon, v.vehicle_id));
            }
        }
        let mut idle: Vec<Vec<IdleSegment>> = vec![Vec::new(); vehicles.len()];
        for s in segments {
            if s.vehicle >= vehicles.len() {
                return bad(format!("idle segment refers to vehicle #{}", s.vehicle));
            }
            if s.length < 0 || !in_bounds(s.latitude, s.longitude) {
                return bad(format!("idle segment {s:?} has negative length or bad coordinates"));
            }
            idle[s.vehicle].push(s);
        }
        for (i, segs) in idle.iter_mut().enumerate() {
            segs.sort_by_key(|s| s.start);
            if segs.windows(2).any(|w| w[1].start <= w[0].start + w[0].length) {
                return bad(format!("idle segments of {} overlap", vehicles[i].vehicle_id));
            }
        }
        Ok(Self {
            seed,
            epoch,
            iata_id,
            tick,
            vehicles,
            idle,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let f: ScriptFile = toml::from_str(text)?;
        let index: HashMap<&str, usize> = f
            .vehicles
            .iter()
            .enumerate()
            .map(|(i, v)| (v.vehicle_id.as_str(), i))
            .collect();
        let segments = f
            .idle_segments
            .iter()
            .map(|s| {
                let vehicle = *index
                    .get(s.vehicle_id.as_str())
                    .ok_or_else(|| SimError::InvalidScript(format!("unknown vehicle {}", s.vehicle_id)))?;
                Ok(IdleSegment {
                    vehicle,
                    start: s.start,
                    length: s.length,
                    latitude: s.latitude,
                    longitude: s.longitude,
                })
            })
            .collect::<Result<Vec<_>, SimError>>()?;
        Self::new(f.seed, f.epoch, f.iata_id, f.tick, f.vehicles, segments)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        let f = ScriptFile {
            seed: self.seed,
            epoch: self.epoch,
            iata_id: self.iata_id.clone(),
            tick: self.tick,
            vehicles: self.vehicles.clone(),
            idle_segments: self
                .idle
                .iter()
                .flatten()
                .map(|s| IdleSegmentFile {
                    vehicle_id: self.vehicles[s.vehicle].vehicle_id.clone(),
                    start: s.start,
                    length: s.length,
                    latitude: s.latitude,
                    longitude: s.longitude,
                })
                .collect(),
        };
        toml::to_string(&f).expect("script serializes")
    }

    /// A random fleet of `vehicles` buses over `ticks` ticks. Each bus moves
    /// steadily east, so it never returns to an earlier position, and stops a
    /// few times at the point it has reached.
    pub fn random(seed: u64, epoch: EpochSecs, iata_id: IataId, tick: i64, vehicles: usize, ticks: i64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let horizon = ticks * tick;
        let mut vs = Vec::with_capacity(vehicles);
        let mut segments = Vec::new();
        for i in 0..vehicles {
            let lat0 = rng.gen_range(42.20..42.40);
            let lon0 = rng.gen_range(-71.20..-71.00);
            // 1e-4 degree per tick or more, well above f32 resolution
            let dlon = rng.gen_range(1e-4..1e-3) * (horizon as f64 / tick as f64);
            let dlat = rng.gen_range(-5e-4..5e-4) * (horizon as f64 / tick as f64);
            let v = ScriptVehicle {
                vehicle_id: format!("bus-{i:03}"),
                route_id: Some(format!("R{}", i % 7)),
                trip_id: Some(format!("T{i:03}")),
                waypoints: vec![
                    Waypoint { t: 0, lat: lat0, lon: lon0 },
                    Waypoint {
                        t: horizon,
                        lat: lat0 + dlat,
                        lon: lon0 + dlon,
                    },
                ],
            };
            let mut cursor = rng.gen_range(0..=4 * tick);
            for _ in 0..rng.gen_range(0..=3) {
                let length = rng.gen_range(0..=20 * tick);
                if cursor + length > horizon {
                    break;
                }
                let (lat, lon) = interpolate(&v.waypoints, cursor);
                segments.push(IdleSegment {
                    vehicle: i,
                    start: cursor,
                    length,
                    latitude: lat,
                    longitude: lon,
                });
                cursor += length + rng.gen_range(1..=10 * tick);
            }
            vs.push(v);
        }
        Self::new(seed, epoch, iata_id, tick, vs, segments).expect("generated script is valid")
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn epoch(&self) -> EpochSecs {
        self.epoch
    }

    pub fn iata_id(&self) -> &IataId {
        &self.iata_id
    }

    pub fn tick(&self) -> i64 {
        self.tick
    }

    pub fn vehicles(&self) -> &[ScriptVehicle] {
        &self.vehicles
    }

    pub fn idle_segments(&self) -> impl Iterator<Item = &IdleSegment> {
        self.idle.iter().flatten()
    }

    /// Last waypoint time, in seconds after the epoch.
    pub fn horizon(&self) -> i64 {
        self.vehicles
            .iter()
            .filter_map(|v| v.waypoints.last().map(|w| w.t))
            .max()
            .unwrap_or(0)
    }

    pub fn quantize(&self, t: EpochSecs) -> EpochSecs {
        self.epoch + (t - self.epoch).div_euclid(self.tick) * self.tick
    }

    /// The fleet as seen at time `t`.
    pub fn positions_at(&self, t: EpochSecs) -> Vec<SimPosition> {
        let q = self.quantize(t);
        let rel = q - self.epoch;
        self.vehicles
            .iter()
            .zip(&self.idle)
            .map(|(v, segs)| {
                let (lat, lon) = segs
                    .iter()
                    .find(|s| s.start <= rel && rel <= s.start + s.length)
                    .map(|s| (s.latitude, s.longitude))
                    .unwrap_or_else(|| interpolate(&v.waypoints, rel));
                SimPosition {
                    vehicle_id: v.vehicle_id.clone(),
                    route_id: v.route_id.clone(),
                    trip_id: v.trip_id.clone(),
                    latitude: feed_precision(lat),
                    longitude: feed_precision(lon),
                    timestamp: q,
                }
            })
            .collect()
    }

    /// The feed served at wall time `now`.
    pub fn feed_at(&self, now: EpochSecs) -> gtfs_rt::FeedMessage {
        let entity = self
            .positions_at(now)
            .into_iter()
            .map(|p| gtfs_rt::FeedEntity {
                id: p.vehicle_id.clone(),
                vehicle: Some(gtfs_rt::VehiclePosition {
                    trip: Some(gtfs_rt::TripDescriptor {
                        trip_id: p.trip_id,
                        route_id: p.route_id,
                        ..Default::default()
                    }),
                    vehicle: Some(gtfs_rt::VehicleDescriptor {
                        id: Some(p.vehicle_id),
                        ..Default::default()
                    }),
                    position: Some(gtfs_rt::Position {
                        latitude: p.latitude as f32,
                        longitude: p.longitude as f32,
                        ..Default::default()
                    }),
                    timestamp: Some(p.timestamp as u64),
                    ..Default::default()
                }),
                ..Default::default()
            })
            .collect();
        gtfs_rt::FeedMessage {
            header: gtfs_rt::FeedHeader {
                gtfs_realtime_version: "2.0".into(),
                incrementality: Some(gtfs_rt::Incrementality::FullDataset as i32),
                timestamp: Some(now as u64),
            },
            entity,
        }
    }

    pub fn feed_bytes(&self, now: EpochSecs) -> Vec<u8> {
        self.feed_at(now).encode_to_vec()
    }

    /// Snapshots as the extractor would build them from the served feed.
    pub fn snapshots(&self, region_id: &str, poll_times: &[EpochSecs]) -> Vec<FeedSnapshot> {
        poll_times
            .iter()
            .map(|&t| {
                let decoded = decode_feed(&self.feed_bytes(t), &self.iata_id, t).expect("own feed decodes");
                FeedSnapshot::from_records(region_id, t, decoded.records)
            })
            .collect()
    }

    /// Poll times `epoch, epoch + r, ...` for `count` polls.
    pub fn poll_grid(&self, r: u32, count: usize) -> Vec<EpochSecs> {
        (0..count as i64).map(|i| self.epoch + i * r as i64).collect()
    }

    /// Service time of every vehicle: its waypoint timeline span.
    pub fn operational_time(&self) -> OperationalTime {
        OperationalTime::PerVehicle(
            self.vehicles
                .iter()
                .map(|v| {
                    let span = v.waypoints.last().unwrap().t - v.waypoints[0].t;
                    (
                        VehicleKey {
                            iata_id: self.iata_id.clone(),
                            vehicle_id: v.vehicle_id.clone(),
                        },
                        span,
                    )
                })
                .collect(),
        )
    }

    /// Route shapes traced along each vehicle's waypoints, with a vertex at
    /// least every `spacing_deg` degrees.
    pub fn static_gtfs(&self, spacing_deg: f64) -> StaticGtfs {
        let mut routes: Vec<String> = Vec::new();
        let mut trips = Vec::new();
        let mut points = Vec::new();
        for v in &self.vehicles {
            let shape_id = format!("shape-{}", v.vehicle_id);
            let route_id = v.route_id.clone().unwrap_or_else(|| format!("route-{}", v.vehicle_id));
            if !routes.contains(&route_id) {
                routes.push(route_id.clone());
            }
            trips.push(TripRow {
                route_id,
                trip_id: v.trip_id.clone().unwrap_or_else(|| format!("trip-{}", v.vehicle_id)),
                shape_id: Some(shape_id.clone()),
            });
            let mut seq = 0;
            let mut push = |lat: f64, lon: f64| {
                seq += 1;
                points.push(ShapePointRow {
                    shape_id: shape_id.clone(),
                    shape_pt_lat: lat,
                    shape_pt_lon: lon,
                    shape_pt_sequence: seq,
                });
            };
            push(v.waypoints[0].lat, v.waypoints[0].lon);
            for w in v.waypoints.windows(2) {
                let (a, b) = (w[0], w[1]);
                let len = ((b.lat - a.lat).powi(2) + (b.lon - a.lon).powi(2)).sqrt();
                let steps = (len / spacing_deg).ceil().max(1.0) as usize;
                for k in 1..=steps {
                    let f = k as f64 / steps as f64;
                    push(a.lat + f * (b.lat - a.lat), a.lon + f * (b.lon - a.lon));
                }
            }
        }
        StaticGtfs::from_rows(routes, trips, points)
    }
}

/// Linear interpolation along the timeline, clamped at both ends.
fn interpolate(wps: &[Waypoint], rel: i64) -> (f64, f64) {
    let first = wps[0];
    let last = wps[wps.len() - 1];
    if rel <= first.t {
        return (first.lat, first.lon);
    }
    if rel >= last.t {
        return (last.lat, last.lon);
    }
    let i = wps.partition_point(|w| w.t <= rel);
    let (a, b) = (wps[i - 1], wps[i]);
    let f = (rel - a.t) as f64 / (b.t - a.t) as f64;
    (a.lat + f * (b.lat - a.lat), a.lon + f * (b.lon - a.lon))
}

/// Expected detector output for polls at `poll_times`, one batch per poll
/// from the first with a full buffer on.
///
/// For each vehicle, every maximal run of `L >= h + 2` consecutive polls
/// with an unchanged `(route, trip, lat, lon)` starting at poll `s` yields,
/// at poll `s + h + 1 + k` for `k` in `0..L - h - 1`, an event dated
/// `poll_times[s]` lasting `(h + 1 + k) * r`.
pub fn oracle_events(script: &FleetScript, params: &DetectorParams, poll_times: &[EpochSecs]) -> Vec<Vec<IdlingEvent>> {
    let h = params.h() as usize;
    let r = params.r() as i64;
    let n = poll_times.len();
    if n < h + 2 {
        return Vec::new();
    }
    let mut batches: Vec<Vec<IdlingEvent>> = vec![Vec::new(); n - h - 1];
    let frames: Vec<Vec<SimPosition>> = poll_times.iter().map(|&t| script.positions_at(t)).collect();
    let tracks: Vec<Vec<&SimPosition>> = (0..script.vehicles.len())
        .map(|vi| frames.iter().map(|f| &f[vi]).collect())
        .collect();
    let same = |a: &SimPosition, b: &SimPosition| {
        a.route_id == b.route_id
            && a.trip_id == b.trip_id
            && a.latitude.to_bits() == b.latitude.to_bits()
            && a.longitude.to_bits() == b.longitude.to_bits()
    };
    for track in &tracks {
        let mut s = 0;
        while s < n {
            let mut e = s;
            while e + 1 < n && same(track[e + 1], track[s]) {
                e += 1;
            }
            let len = e - s + 1;
            let p = track[s];
            for k in 0..len.saturating_sub(h + 1) {
                batches[s + k].push(IdlingEvent {
                    iata_id: script.iata_id.clone(),
                    vehicle_id: p.vehicle_id.clone(),
                    route_id: p.route_id.clone(),
                    trip_id: p.trip_id.clone(),
                    latitude: p.latitude,
                    longitude: p.longitude,
                    datetime: poll_times[s],
                    duration: (h as i64 + 1 + k as i64) * r,
                });
            }
            s = e + 1;
        }
    }
    batches
}

/// Orders a batch by vehicle, start and duration so batches from different
/// producers can be compared.
pub fn canonical(mut batch: Vec<IdlingEvent>) -> Vec<IdlingEvent> {
    batch.sort_by(|a, b| {
        (a.iata_id.as_str(), &a.vehicle_id, a.datetime, a.duration)
            .cmp(&(b.iata_id.as_str(), &b.vehicle_id, b.datetime, b.duration))
    });
    batch
}

#[derive(Clone)]
struct FeedState {
    script: Arc<FleetScript>,
    clock: Arc<dyn Clock>,
    down: Arc<AtomicBool>,
}

async fn serve_feed(State(st): State<FeedState>) -> Response {
    if st.down.load(Ordering::Relaxed) {
        return StatusCode::SERVICE_UNAVAILABLE.into_response();
    }
    let body = st.script.feed_bytes(st.clock.now());
    ([(header::CONTENT_TYPE, "application/x-protobuf")], body).into_response()
}

/// Running HTTP feed for a script.
pub struct FeedServer {
    local_addr: SocketAddr,
    down: Arc<AtomicBool>,
    cancel: CancellationToken,
    task: JoinHandle<()>,
}

impl FeedServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn url(&self) -> String {
        format!("http://{}/vehicle_positions.pb", self.local_addr)
    }

    /// While down, every request gets 503.
    pub fn set_down(&self, down: bool) {
        self.down.store(down, Ordering::Relaxed);
    }

    pub async fn shutdown(self) {
        self.cancel.cancel();
        let _ = self.task.await;
    }
}

/// Serves `script` at `/` and `/vehicle_positions.pb`, evaluated at the
/// clock's current time on every request.
pub async fn serve_script(script: Arc<FleetScript>, clock: Arc<dyn Clock>, addr: SocketAddr) -> Result<FeedServer, SimError> {
    let listener = TcpListener::bind(addr)
        .await
        .map_err(|source| SimError::BindFailure { addr, source })?;
    let local_addr = listener
        .local_addr()
        .map_err(|source| SimError::BindFailure { addr, source })?;
    let down = Arc::new(AtomicBool::new(false));
    let app = Router::new()
        .route("/", get(serve_feed))
        .route("/vehicle_positions.pb", get(serve_feed))
        .with_state(FeedState {
            script,
            clock,
            down: down.clone(),
        });
    let cancel = CancellationToken::new();
    let token = cancel.clone();
    let task = tokio::spawn(async move {
        let _ = axum::serve(listener, app)
            .with_graceful_shutdown(async move { token.cancelled().await })
            .await;
    });
    Ok(FeedServer {
        local_addr,
        down,
        cancel,
        task,
    })
}
