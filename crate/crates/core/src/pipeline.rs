//! Wires the stages together: per region, a poller feeds a detector whose
//! batches are broadcast to subscribers and handed to a shared store writer.
//! All hand-offs go through bounded channels, so a slow stage applies back
//! pressure instead of dropping data.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::BufWriter;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::mpsc;
use tokio::task::JoinHandle;
use tokio_util::sync::CancellationToken;

use crate::audit::{self, AuditError, AuditReport, BatteryOptions, ExportTable, ShapeIndex, StaticGtfs};
use crate::clock::{Clock, ScaledClock, SystemClock};
use crate::detect::Detector;
use crate::extract::{ExtractError, RegionPoller, SourceConfig};
use crate::model::{AgencyInfo, DetectorParams, EpochSecs, IataId, IdlingEvent, ModelError};
use crate::store::{export_csv, EventStore, ExportRange, SqliteStore, StoreError};
use crate::stream::{serve, Broadcaster, StreamError, StreamServer};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("environment variable {0} holding a source secret is not set")]
    MissingSecret(String),
    #[error(transparent)]
    Params(#[from] ModelError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error(transparent)]
    Audit(#[from] AuditError),
}

/// Auth header for a source. The secret is given inline or, preferably, by
/// naming the environment variable that holds it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthEntry {
    pub header: String,
    #[serde(default)]
    pub secret: Option<String>,
    #[serde(default)]
    pub secret_env: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceEntry {
    pub iata_id: IataId,
    pub endpoint_url: String,
    #[serde(default)]
    pub auth: Option<AuthEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionConfig {
    pub region_id: String,
    /// Overrides the pipeline-wide parameters for this region.
    #[serde(default)]
    pub params: Option<DetectorParams>,
    pub sources: Vec<SourceEntry>,
}

/// Runs the pipeline on a compressed clock starting at `origin`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClockConfig {
    pub origin: EpochSecs,
    pub speedup: f64,
}

fn default_store() -> String {
    "events.sqlite".into()
}

fn default_bind() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 8080))
}

fn default_capacity() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// SQLite file, or `:memory:`.
    #[serde(default = "default_store")]
    pub store: String,
    #[serde(default = "default_bind")]
    pub bind: SocketAddr,
    #[serde(default)]
    pub params: DetectorParams,
    /// Depth of every inter-stage channel.
    #[serde(default = "default_capacity")]
    pub channel_capacity: usize,
    #[serde(default)]
    pub clock: Option<ClockConfig>,
    #[serde(default)]
    pub agencies: Vec<AgencyInfo>,
    pub regions: Vec<RegionConfig>,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.channel_capacity == 0 {
            return bad("channel_capacity must be at least 1".into());
        }
        if let Some(c) = self.clock {
            if !(c.speedup.is_finite() && c.speedup > 0.0) {
                return bad(format!("clock speedup must be positive, got {}", c.speedup));
            }
        }
        let mut agencies = HashSet::new();
        for a in &self.agencies {
            if !agencies.insert(a.iata_id.as_str()) {
                return bad(format!("agency {} listed twice", a.iata_id));
            }
        }
        let mut regions = HashSet::new();
        for r in &self.regions {
            if r.region_id.is_empty() || !regions.insert(r.region_id.as_str()) {
                return bad(format!("region id {:?} empty or repeated", r.region_id));
            }
            for s in &r.sources {
                if !agencies.contains(s.iata_id.as_str()) {
                    return bad(format!("source {} uses unknown agency {}", s.endpoint_url, s.iata_id));
                }
                if let Some(a) = &s.auth {
                    if a.secret.is_some() == a.secret_env.is_some() {
                        return bad(format!("auth for {} needs exactly one of secret, secret_env", s.endpoint_url));
                    }
                }
            }
        }
        Ok(())
    }

    /// Replaces `r`, `h` and `m` everywhere they are given.
    pub fn with_overrides(mut self, r: Option<u32>, h: Option<u32>, m: Option<u32>) -> Result<Self, PipelineError> {
        let apply = |p: &DetectorParams| -> Result<DetectorParams, ModelError> {
            DetectorParams::new(r.unwrap_or(p.r()), h.unwrap_or(p.h()), m.unwrap_or(p.m()))?
                .with_coord_epsilon(p.coord_epsilon())
        };
        self.params = apply(&self.params)?;
        for region in &mut self.regions {
            if let Some(p) = &region.params {
                region.params = Some(apply(p)?);
            }
        }
        Ok(self)
    }

    pub fn region_params(&self, region: &RegionConfig) -> DetectorParams {
        region.params.unwrap_or(self.params)
    }

    /// Source configs for a region with secrets read from the environment.
    pub fn resolve_sources(&self, region: &RegionConfig) -> Result<Vec<SourceConfig>, PipelineError> {
        region
            .sources
            .iter()
            .map(|s| {
                let mut cfg = SourceConfig::new(region.region_id.clone(), s.endpoint_url.clone(), s.iata_id.clone())?;
                if let Some(a) = &s.auth {
                    let secret = match (&a.secret, &a.secret_env) {
                        (Some(v), _) => v.clone(),
                        (None, Some(var)) => {
                            std::env::var(var).map_err(|_| PipelineError::MissingSecret(var.clone()))?
                        }
                        (None, None) => unreachable!("validated"),
                    };
                    cfg = cfg.with_auth(a.header.clone(), secret);
                }
                Ok(cfg)
            })
            .collect()
    }

    pub fn make_clock(&self) -> Arc<dyn Clock> {
        match self.clock {
            Some(c) => Arc::new(ScaledClock::new(c.origin, c.speedup)),
            None => Arc::new(SystemClock),
        }
    }

    pub fn open_store(&self) -> Result<Arc<SqliteStore>, PipelineError> {
        Ok(Arc::new(if self.store == ":memory:" {
            SqliteStore::in_memory()?
        } else {
            SqliteStore::open(&self.store)?
        }))
    }
}

/// Running totals for one region.
#[derive(Debug, Default)]
pub struct RegionStats {
    snapshots: AtomicU64,
    source_failures: AtomicU64,
    batches: AtomicU64,
    events: AtomicU64,
    stored: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RegionCounts {
    pub snapshots: u64,
    pub source_failures: u64,
    /// Detector batches, empty ones included.
    pub batches: u64,
    pub events: u64,
    pub stored: u64,
}

impl RegionStats {
    pub fn counts(&self) -> RegionCounts {
        RegionCounts {
            snapshots: self.snapshots.load(Ordering::Relaxed),
            source_failures: self.source_failures.load(Ordering::Relaxed),
            batches: self.batches.load(Ordering::Relaxed),
            events: self.events.load(Ordering::Relaxed),
            stored: self.stored.load(Ordering::Relaxed),
        }
    }
}

struct WriteJob {
    region_id: String,
    batch: Vec<IdlingEvent>,
}

/// A started pipeline. Dropping it without [`RunningPipeline::shutdown`]
/// leaves the tasks running until the runtime stops.
pub struct RunningPipeline {
    server: StreamServer,
    stats: BTreeMap<String, Arc<RegionStats>>,
    poll_cancel: CancellationToken,
    pollers: Vec<JoinHandle<()>>,
    detectors: Vec<JoinHandle<()>>,
    writer: JoinHandle<()>,
}

impl RunningPipeline {
    pub fn local_addr(&self) -> SocketAddr {
        self.server.local_addr()
    }

    pub fn broadcaster(&self) -> &Broadcaster {
        self.server.broadcaster()
    }

    pub fn counts(&self, region_id: &str) -> Option<RegionCounts> {
        self.stats.get(region_id).map(|s| s.counts())
    }

    pub fn all_counts(&self) -> BTreeMap<String, RegionCounts> {
        self.stats.iter().map(|(k, v)| (k.clone(), v.counts())).collect()
    }

    /// Stops polling, lets every snapshot already taken go through detection,
    /// broadcast and storage, then closes the stream server.
    pub async fn shutdown(self) -> BTreeMap<String, RegionCounts> {
        self.poll_cancel.cancel();
        for h in self.pollers {
            let _ = h.await;
        }
        for h in self.detectors {
            let _ = h.await;
        }
        let _ = self.writer.await;
        let counts = self.stats.iter().map(|(k, v)| (k.clone(), v.counts())).collect();
        self.server.shutdown().await;
        counts
    }
}

/// Starts every region of `config` against `store`.
pub async fn start(
    config: &PipelineConfig,
    clock: Arc<dyn Clock>,
    store: Arc<dyn EventStore>,
) -> Result<RunningPipeline, PipelineError> {
    config.validate()?;
    store.upsert_agencies(&config.agencies)?;

    let hub = Broadcaster::new(config.regions.iter().map(|r| r.region_id.clone()));
    let server = serve(hub.clone(), config.bind).await?;
    let poll_cancel = CancellationToken::new();
    let (write_tx, write_rx) = mpsc::channel::<WriteJob>(config.channel_capacity);

    let mut stats = BTreeMap::new();
    let mut pollers = Vec::new();
    let mut detectors = Vec::new();
    for region in &config.regions {
        let sources = config.resolve_sources(region)?;
        let params = config.region_params(region);
        let poller = RegionPoller::new(region.region_id.clone(), sources, params.r(), clock.clone())?;
        let (rx, handle) = poller.spawn(config.channel_capacity, poll_cancel.clone());
        pollers.push(handle);

        let st = Arc::new(RegionStats::default());
        stats.insert(region.region_id.clone(), st.clone());
        detectors.push(tokio::spawn(detect_loop(
            region.region_id.clone(),
            Detector::new(params),
            rx,
            hub.clone(),
            write_tx.clone(),
            st,
        )));
    }
    drop(write_tx);
    let writer = tokio::spawn(write_loop(store, write_rx, stats.clone()));

    tracing::info!(addr = %server.local_addr(), regions = config.regions.len(), "pipeline started");
    Ok(RunningPipeline {
        server,
        stats,
        poll_cancel,
        pollers,
        detectors,
        writer,
    })
}

async fn detect_loop(
    region_id: String,
    mut detector: Detector,
    mut rx: mpsc::Receiver<crate::model::FeedSnapshot>,
    hub: Broadcaster,
    write_tx: mpsc::Sender<WriteJob>,
    stats: Arc<RegionStats>,
) {
    while let Some(snap) = rx.recv().await {
        stats.snapshots.fetch_add(1, Ordering::Relaxed);
        stats
            .source_failures
            .fetch_add(snap.failures.len() as u64, Ordering::Relaxed);
        let batch = match detector.push(snap) {
            Ok(Some(batch)) => batch,
            Ok(None) => continue,
            Err(e) => {
                tracing::warn!(region = %region_id, error = %e, "snapshot skipped");
                continue;
            }
        };
        stats.batches.fetch_add(1, Ordering::Relaxed);
        stats.events.fetch_add(batch.len() as u64, Ordering::Relaxed);
        hub.broadcast(&region_id, &batch);
        if batch.is_empty() {
            continue;
        }
        let job = WriteJob {
            region_id: region_id.clone(),
            batch,
        };
        if write_tx.send(job).await.is_err() {
            tracing::error!(region = %region_id, "store writer gone");
            return;
        }
    }
}

async fn write_loop(
    store: Arc<dyn EventStore>,
    mut rx: mpsc::Receiver<WriteJob>,
    stats: BTreeMap<String, Arc<RegionStats>>,
) {
    while let Some(job) = rx.recv().await {
        let store = store.clone();
        let WriteJob { region_id, batch } = job;
        let n = batch.len() as u64;
        let res = tokio::task::spawn_blocking(move || store.insert_events(&batch)).await;
        match res {
            Ok(Ok(_)) => {
                if let Some(s) = stats.get(&region_id) {
                    s.stored.fetch_add(n, Ordering::Relaxed);
                }
            }
            Ok(Err(e)) => tracing::error!(region = %region_id, error = %e, "insert failed"),
            Err(e) => tracing::error!(region = %region_id, error = %e, "insert task panicked"),
        }
    }
}

/// Runs until `stop` resolves, then shuts down cleanly.
pub async fn run_until<F>(config: &PipelineConfig, stop: F) -> Result<BTreeMap<String, RegionCounts>, PipelineError>
where
    F: std::future::Future<Output = ()>,
{
    let store = config.open_store()?;
    let running = start(config, config.make_clock(), store).await?;
    stop.await;
    tracing::info!("shutting down");
    Ok(running.shutdown().await)
}

/// Exports the configured store to `out`. The file is written next to its
/// destination and renamed into place, so an interrupted export never leaves
/// a truncated CSV behind.
pub fn export(config: &PipelineConfig, range: ExportRange, out: &Path) -> Result<usize, PipelineError> {
    let store = config.open_store()?;
    let tmp = out.with_extension("csv.partial");
    let n = {
        let mut w = BufWriter::new(File::create(&tmp)?);
        let n = export_csv(store.as_ref(), range, &mut w)?;
        std::io::Write::flush(&mut w)?;
        n
    };
    std::fs::rename(&tmp, out)?;
    Ok(n)
}

/// Audits an export file. `gtfs` maps IATA codes to static bundles.
pub fn audit_file(
    export_path: &Path,
    gtfs: &[(String, PathBuf)],
    threshold_m: f64,
    duration: audit::DurationOptions,
    sweep: bool,
) -> Result<AuditReport, PipelineError> {
    let table = ExportTable::from_path(export_path)?;
    let mut shapes = BTreeMap::new();
    for (iata, path) in gtfs {
        shapes.insert(iata.clone(), ShapeIndex::new(&StaticGtfs::load(path)?)?);
    }
    let opts = BatteryOptions {
        threshold_m,
        shapes,
        duration,
        sweep_thresholds: sweep.then(audit::default_thresholds),
    };
    Ok(audit::run_battery(&table, &opts)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CONFIG: &str = r#"
store = ":memory:"
bind = "127.0.0.1:0"

[params]
r = 30
h = 1
m = 10

[[agencies]]
iata_id = "BOS"
agency = "Massachusetts Bay Transportation Authority"
city = "Boston"
country = "United States"
region = "United States East"
continent = "North America"

[[regions]]
region_id = "us-east"

[[regions.sources]]
iata_id = "BOS"
endpoint_url = "https://cdn.mbta.com/realtime/VehiclePositions.pb"
auth = { header = "x-api-key", secret_env = "TRANSIT_IDLE_TEST_KEY" }
"#;

    #[test]
    fn parses_and_validates() {
        let cfg = PipelineConfig::from_toml(CONFIG).unwrap();
        assert_eq!(cfg.regions.len(), 1);
        assert_eq!(cfg.params, DetectorParams::default());
    }

    #[test]
    fn duplicate_region_rejected() {
        let dup = format!(
            "{CONFIG}\n[[regions]]\nregion_id = \"us-east\"\nsources = []\n"
        );
        assert!(matches!(PipelineConfig::from_toml(&dup), Err(PipelineError::Config(_))));
    }

    #[test]
    fn unknown_agency_rejected() {
        let text = CONFIG.replace("iata_id = \"BOS\"\nendpoint", "iata_id = \"XXX\"\nendpoint");
        assert!(matches!(PipelineConfig::from_toml(&text), Err(PipelineError::Config(_))));
    }

    #[test]
    fn secret_comes_from_named_variable() {
        let cfg = PipelineConfig::from_toml(CONFIG).unwrap();
        let region = &cfg.regions[0];
        std::env::remove_var("TRANSIT_IDLE_TEST_KEY");
        assert!(matches!(cfg.resolve_sources(region), Err(PipelineError::MissingSecret(_))));
        std::env::set_var("TRANSIT_IDLE_TEST_KEY", "s3cret");
        let src = cfg.resolve_sources(region).unwrap();
        assert_eq!(src[0].auth.as_ref().unwrap().secret, "s3cret");
    }

    #[test]
    fn overrides_apply_to_region_params_too() {
        let mut cfg = PipelineConfig::from_toml(CONFIG).unwrap();
        cfg.regions[0].params = Some(DetectorParams::new(10, 2, 5).unwrap());
        let cfg = cfg.with_overrides(Some(15), None, Some(3)).unwrap();
        assert_eq!((cfg.params.r(), cfg.params.h(), cfg.params.m()), (15, 1, 3));
        let p = cfg.regions[0].params.as_ref().unwrap();
        assert_eq!((p.r(), p.h(), p.m()), (15, 2, 3));
        assert!(PipelineConfig::from_toml(CONFIG).unwrap().with_overrides(Some(0), None, None).is_err());
    }
}
