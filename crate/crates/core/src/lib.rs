//! Detects idling buses from GTFS Realtime vehicle position feeds.
//!
//! Feeds are polled every `r` seconds into per-region snapshots
//! ([`extract`]); a rolling buffer of snapshots feeds the set-intersection
//! detector ([`detect`]); events are streamed to websocket subscribers
//! ([`stream`]), stored and exported as CSV ([`store`]), and audited
//! ([`audit`]). [`sim`] provides a deterministic fleet with known idling
//! for end-to-end checks, and [`pipeline`] wires everything together.

pub mod audit;
pub mod clock;
pub mod detect;
pub mod extract;
pub mod gtfs_rt;
pub mod model;
pub mod pipeline;
pub mod sim;
pub mod store;
pub mod stream;

pub use detect::{run_detector, Detector};
pub use model::{AgencyInfo, DetectorParams, FeedSnapshot, IataId, IdlingEvent, VehicleKey, VehicleRecord};
