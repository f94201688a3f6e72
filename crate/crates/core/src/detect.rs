//! Rolling-buffer idling detector.
//!
//! The buffer holds the last `h + 2` snapshots `d_0 ..= d_{h+1}`. Each tick,
//! with `A = d_0`, `B = d_h` and `C = d_{h+1}`:
//!
//! 1. tuples present unchanged in both `A` and `B` join the candidate set `H`;
//! 2. every candidate seen again in `C` resets its miss counter, every other
//!    candidate increments it, and candidates reaching `m` misses are evicted;
//! 3. the tick's events are `Y = H ∩ C`.
//!
//! A tuple is `(vehicle_id, route_id, trip_id, latitude, longitude)` scoped
//! by fleet. Equality is exact on all five attributes unless a coordinate
//! epsilon is configured.
//!
//! Durations are step counted: the first emission of an episode reports
//! `(h + 1) * r`, each further consecutive emission adds `r`. The event
//! datetime is the poll time of the `A` snapshot in which the tuple first
//! matched, and is kept for as long as the candidate survives.

use std::cmp::Ordering;
use std::collections::{BTreeMap, VecDeque};

use thiserror::Error;

use crate::model::{DetectorParams, EpochSecs, FeedSnapshot, IataId, IdlingEvent, VehicleKey, VehicleRecord};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DetectError {
    #[error("snapshot at {got} is older than the newest buffered snapshot at {newest}")]
    OutOfOrderSnapshot { newest: EpochSecs, got: EpochSecs },
    #[error("buffer holds {len} of {needed} snapshots")]
    NotReady { len: usize, needed: usize },
}

/// The compared attribute tuple of one vehicle sample.
#[derive(Debug, Clone)]
pub struct PositionTuple {
    pub iata_id: IataId,
    pub vehicle_id: String,
    pub route_id: Option<String>,
    pub trip_id: Option<String>,
    pub latitude: f64,
    pub longitude: f64,
}

impl PositionTuple {
    pub fn of(rec: &VehicleRecord) -> Self {
        Self {
            iata_id: rec.iata_id.clone(),
            vehicle_id: rec.vehicle_id.clone(),
            route_id: rec.route_id.clone(),
            trip_id: rec.trip_id.clone(),
            latitude: rec.latitude,
            longitude: rec.longitude,
        }
    }

    pub fn key(&self) -> VehicleKey {
        VehicleKey {
            iata_id: self.iata_id.clone(),
            vehicle_id: self.vehicle_id.clone(),
        }
    }

    /// Whether `rec` reports this tuple. `eps == 0` is exact equality.
    pub fn matches(&self, rec: &VehicleRecord, eps: f64) -> bool {
        self.iata_id == rec.iata_id
            && self.vehicle_id == rec.vehicle_id
            && self.route_id == rec.route_id
            && self.trip_id == rec.trip_id
            && coord_eq(self.latitude, rec.latitude, eps)
            && coord_eq(self.longitude, rec.longitude, eps)
    }
}

fn coord_eq(a: f64, b: f64, eps: f64) -> bool {
    if eps == 0.0 {
        a == b
    } else {
        (a - b).abs() <= eps
    }
}

impl PartialEq for PositionTuple {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for PositionTuple {}

impl PartialOrd for PositionTuple {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for PositionTuple {
    fn cmp(&self, other: &Self) -> Ordering {
        self.iata_id
            .cmp(&other.iata_id)
            .then_with(|| self.vehicle_id.cmp(&other.vehicle_id))
            .then_with(|| self.route_id.cmp(&other.route_id))
            .then_with(|| self.trip_id.cmp(&other.trip_id))
            .then_with(|| self.latitude.total_cmp(&other.latitude))
            .then_with(|| self.longitude.total_cmp(&other.longitude))
    }
}

/// Tuples reported unchanged in both snapshots.
///
/// Records are joined on `(iata_id, vehicle_id)` and then required to agree
/// on route, trip, latitude and longitude.
pub fn intersect_stationary(a: &FeedSnapshot, b: &FeedSnapshot, eps: f64) -> Vec<PositionTuple> {
    a.records
        .iter()
        .filter_map(|(key, ra)| {
            let rb = b.records.get(key)?;
            let t = PositionTuple::of(ra);
            t.matches(rb, eps).then_some(t)
        })
        .collect()
}

/// Time-ordered window of the last `h + 2` snapshots.
#[derive(Debug, Clone)]
pub struct SnapshotBuffer {
    slots: VecDeque<FeedSnapshot>,
    params: DetectorParams,
}

impl SnapshotBuffer {
    pub fn new(params: DetectorParams) -> Self {
        Self {
            slots: VecDeque::with_capacity(params.buffer_len()),
            params,
        }
    }

    pub fn params(&self) -> &DetectorParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn is_ready(&self) -> bool {
        self.slots.len() == self.params.buffer_len()
    }

    /// Appends `snap`, dropping the oldest slot on overflow. Returns readiness.
    pub fn push(&mut self, snap: FeedSnapshot) -> Result<bool, DetectError> {
        if let Some(newest) = self.slots.back() {
            if snap.poll_time < newest.poll_time {
                return Err(DetectError::OutOfOrderSnapshot {
                    newest: newest.poll_time,
                    got: snap.poll_time,
                });
            }
        }
        self.slots.push_back(snap);
        while self.slots.len() > self.params.buffer_len() {
            self.slots.pop_front();
        }
        Ok(self.is_ready())
    }

    /// `(A, B, C) = (d_0, d_h, d_{h+1})` once the buffer is full.
    pub fn sets(&self) -> Result<(&FeedSnapshot, &FeedSnapshot, &FeedSnapshot), DetectError> {
        if !self.is_ready() {
            return Err(DetectError::NotReady {
                len: self.slots.len(),
                needed: self.params.buffer_len(),
            });
        }
        let h = self.params.h() as usize;
        Ok((&self.slots[0], &self.slots[h], &self.slots[h + 1]))
    }

    pub fn slots(&self) -> impl Iterator<Item = &FeedSnapshot> {
        self.slots.iter()
    }
}

/// A member of the persistent candidate set `H`.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateEntry {
    pub tuple: PositionTuple,
    pub first_stationary_at: EpochSecs,
    /// Consecutive ticks without a match in `C`; never reaches `m` while retained.
    pub miss_count: u32,
    /// Emissions so far in the current uninterrupted run.
    pub consecutive_hits: u32,
}

#[derive(Debug, Clone, Default)]
pub struct CandidateSet {
    entries: BTreeMap<PositionTuple, CandidateEntry>,
}

impl CandidateSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, tuple: &PositionTuple) -> Option<&CandidateEntry> {
        self.entries.get(tuple)
    }

    pub fn iter(&self) -> impl Iterator<Item = &CandidateEntry> {
        self.entries.values()
    }
}

/// One subsetting step over a ready buffer. Pure: no clock, no I/O.
pub fn step(buffer: &SnapshotBuffer, candidates: &mut CandidateSet) -> Result<Vec<IdlingEvent>, DetectError> {
    let (a, b, c) = buffer.sets()?;
    let params = buffer.params();
    let eps = params.coord_epsilon();

    // Existing entries keep their earliest start.
    for tuple in intersect_stationary(a, b, eps) {
        candidates
            .entries
            .entry(tuple.clone())
            .or_insert_with(|| CandidateEntry {
                tuple,
                first_stationary_at: a.poll_time,
                miss_count: 0,
                consecutive_hits: 0,
            });
    }

    let r = i64::from(params.r());
    let base = params.min_duration();
    let m = params.m();
    let mut events = Vec::new();
    candidates.entries.retain(|tuple, entry| {
        let in_c = c
            .records
            .get(&tuple.key())
            .is_some_and(|rec| tuple.matches(rec, eps));
        if in_c {
            entry.miss_count = 0;
            events.push(IdlingEvent {
                iata_id: tuple.iata_id.clone(),
                vehicle_id: tuple.vehicle_id.clone(),
                route_id: tuple.route_id.clone(),
                trip_id: tuple.trip_id.clone(),
                latitude: tuple.latitude,
                longitude: tuple.longitude,
                datetime: entry.first_stationary_at,
                duration: base + i64::from(entry.consecutive_hits) * r,
            });
            entry.consecutive_hits += 1;
            true
        } else {
            entry.miss_count += 1;
            entry.consecutive_hits = 0;
            entry.miss_count < m
        }
    });
    Ok(events)
}

/// Buffer plus candidate set for one region.
#[derive(Debug, Clone)]
pub struct Detector {
    buffer: SnapshotBuffer,
    candidates: CandidateSet,
}

impl Detector {
    pub fn new(params: DetectorParams) -> Self {
        Self {
            buffer: SnapshotBuffer::new(params),
            candidates: CandidateSet::new(),
        }
    }

    pub fn params(&self) -> &DetectorParams {
        self.buffer.params()
    }

    pub fn buffer(&self) -> &SnapshotBuffer {
        &self.buffer
    }

    pub fn candidates(&self) -> &CandidateSet {
        &self.candidates
    }

    /// Feeds one snapshot. `Ok(None)` during warm-up, otherwise the tick's
    /// batch, which may be empty.
    pub fn push(&mut self, snap: FeedSnapshot) -> Result<Option<Vec<IdlingEvent>>, DetectError> {
        if !self.buffer.push(snap)? {
            return Ok(None);
        }
        step(&self.buffer, &mut self.candidates).map(Some)
    }
}

/// Iterator adapter returned by [`run_detector`].
pub struct DetectorStream<I> {
    inner: I,
    detector: Detector,
}

impl<I> DetectorStream<I> {
    pub fn detector(&self) -> &Detector {
        &self.detector
    }
}

impl<I: Iterator<Item = FeedSnapshot>> Iterator for DetectorStream<I> {
    type Item = Vec<IdlingEvent>;

    fn next(&mut self) -> Option<Self::Item> {
        for snap in self.inner.by_ref() {
            match self.detector.push(snap) {
                Ok(Some(batch)) => return Some(batch),
                Ok(None) => {}
                Err(e) => tracing::warn!(error = %e, "skipping tick"),
            }
        }
        None
    }
}

/// One batch per tick after warm-up. Out-of-order snapshots are skipped with a warning.
pub fn run_detector<I>(snapshots: I, params: DetectorParams) -> DetectorStream<I::IntoIter>
where
    I: IntoIterator<Item = FeedSnapshot>,
{
    DetectorStream {
        inner: snapshots.into_iter(),
        detector: Detector::new(params),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(vehicle: &str, lat: f64, lon: f64) -> VehicleRecord {
        VehicleRecord {
            iata_id: IataId::new("BOS").unwrap(),
            vehicle_id: vehicle.into(),
            route_id: Some("216".into()),
            trip_id: Some("60487628".into()),
            latitude: lat,
            longitude: lon,
            timestamp: 1,
        }
    }

    fn snap(t: EpochSecs, recs: Vec<VehicleRecord>) -> FeedSnapshot {
        FeedSnapshot::from_records("us-east", t, recs)
    }

    /// `positions[i]` is the vehicle's longitude at poll `i * 30`.
    fn stream(positions: &[f64]) -> Vec<FeedSnapshot> {
        positions
            .iter()
            .enumerate()
            .map(|(i, &lon)| snap(1_000 + 30 * i as i64, vec![rec("y0811", 42.2721062, lon)]))
            .collect()
    }

    #[test]
    fn buffer_warms_up_then_rolls() {
        let p = DetectorParams::default();
        let mut buf = SnapshotBuffer::new(p);
        assert_eq!(buf.push(snap(0, vec![])), Ok(false));
        assert_eq!(buf.len(), 1);
        assert_eq!(buf.push(snap(30, vec![])), Ok(false));
        assert_eq!(buf.push(snap(60, vec![])), Ok(true));
        assert_eq!(buf.len(), 3);
        assert_eq!(buf.push(snap(90, vec![])), Ok(true));
        assert_eq!(buf.len(), 3);
        assert_eq!(buf.slots().next().unwrap().poll_time, 30);
        assert!(matches!(
            buf.push(snap(10, vec![])),
            Err(DetectError::OutOfOrderSnapshot { newest: 90, got: 10 })
        ));
    }

    #[test]
    fn sets_are_first_h_and_last_slot() {
        let p = DetectorParams::new(30, 2, 10).unwrap();
        let mut buf = SnapshotBuffer::new(p);
        for t in [0, 30, 60, 90] {
            buf.push(snap(t, vec![])).unwrap();
        }
        let (a, b, c) = buf.sets().unwrap();
        assert_eq!((a.poll_time, b.poll_time, c.poll_time), (0, 60, 90));
    }

    #[test]
    fn intersection_is_exact() {
        let a = snap(0, vec![rec("1", 42.0, -71.0), rec("2", 42.0, -71.0), rec("3", 42.0, -71.0)]);
        let mut moved = rec("2", 42.0, -71.0 + 1e-7);
        moved.timestamp = 2;
        let mut rerouted = rec("3", 42.0, -71.0);
        rerouted.route_id = Some("217".into());
        let b = snap(30, vec![rec("1", 42.0, -71.0), moved, rerouted]);
        let both = intersect_stationary(&a, &b, 0.0);
        assert_eq!(both.len(), 1);
        assert_eq!(both[0].vehicle_id, "1");
        // the epsilon extension tolerates the 1e-7 drift
        assert_eq!(intersect_stationary(&a, &b, 1e-6).len(), 2);
    }

    #[test]
    fn three_stationary_polls_emit_sixty_then_ninety() {
        let batches: Vec<_> = run_detector(stream(&[-70.0, -70.0, -70.0, -70.0]), DetectorParams::default()).collect();
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[0].len(), 1);
        assert_eq!(batches[0][0].duration, 60);
        assert_eq!(batches[0][0].datetime, 1_000);
        assert_eq!(batches[1][0].duration, 90);
        assert_eq!(batches[1][0].datetime, 1_000);
    }

    #[test]
    fn two_stationary_polls_never_emit() {
        let batches: Vec<_> =
            run_detector(stream(&[-70.0, -70.0, -70.1, -70.2, -70.3]), DetectorParams::default()).collect();
        assert_eq!(batches.len(), 3);
        assert!(batches.iter().all(|b| b.is_empty()));
    }

    #[test]
    fn warm_up_yields_nothing() {
        assert_eq!(run_detector(stream(&[-70.0, -70.0]), DetectorParams::default()).count(), 0);
    }

    #[test]
    fn eviction_after_m_misses_gives_fresh_datetime() {
        let p = DetectorParams::new(30, 1, 3).unwrap();
        let mut det = Detector::new(p);
        let mut lons = vec![-70.0; 3];
        lons.extend([-70.1, -70.2, -70.3]);
        lons.extend([-70.0; 3]);
        let mut out = Vec::new();
        for s in stream(&lons) {
            if let Some(b) = det.push(s).unwrap() {
                out.push(b);
            }
            assert!(det.candidates().iter().all(|e| e.miss_count < 3));
        }
        let first = &out[0][0];
        assert_eq!((first.datetime, first.duration), (1_000, 60));
        // after 3 misses the candidate is gone, so the return is a new episode
        let last = out.last().unwrap();
        assert_eq!(last.len(), 1);
        assert_eq!((last[0].datetime, last[0].duration), (1_000 + 6 * 30, 60));
    }

    #[test]
    fn within_m_the_earliest_datetime_is_kept() {
        // Returning to the same spot before eviction keeps the original start;
        // the duration ladder restarts because the run was interrupted.
        let p = DetectorParams::new(30, 1, 10).unwrap();
        let lons = [-70.0, -70.0, -70.0, -70.5, -70.0, -70.0, -70.0];
        let batches: Vec<_> = run_detector(stream(&lons), p).collect();
        let emitted: Vec<_> = batches.iter().flatten().map(|e| (e.datetime, e.duration)).collect();
        assert_eq!(emitted, vec![(1_000, 60), (1_000, 60), (1_000, 90), (1_000, 120)]);
    }

    #[test]
    fn out_of_order_is_skipped() {
        let mut snaps = stream(&[-70.0, -70.0, -70.0]);
        snaps.insert(2, snap(10, vec![]));
        let batches: Vec<_> = run_detector(snaps, DetectorParams::default()).collect();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0][0].duration, 60);
    }

    #[test]
    fn step_requires_ready_buffer() {
        let buf = SnapshotBuffer::new(DetectorParams::default());
        let mut h = CandidateSet::new();
        assert_eq!(step(&buf, &mut h), Err(DetectError::NotReady { len: 0, needed: 3 }));
    }
}
