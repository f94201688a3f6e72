//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any failed.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use prost::Message as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use transit_idle::audit::gtfs::{ShapePointRow, StaticGtfs, TripRow};
use transit_idle::audit::{
    audit_duration, run_battery, threshold_sweep, BatteryOptions, CityDistances, CityEvent, DurationOptions,
    ExportTable, ShapeIndex,
};
use transit_idle::detect::Detector;
use transit_idle::extract::decode_feed;
use transit_idle::gtfs_rt::{FeedMessage, Incrementality};
use transit_idle::model::{DetectorParams, FeedSnapshot, IataId, IdlingEvent, VehicleRecord};
use transit_idle::sim::{canonical, oracle_events, FleetScript, IdleSegment, ScriptVehicle, Waypoint};
use transit_idle::store::{export_csv, EventStore, ExportRange, SqliteStore};
use transit_idle::stream::encode_batch;

use common::{event_key, run_e2e, sim_agency, E2eRun};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn detector_batches(script: &FleetScript, params: &DetectorParams, polls: &[i64]) -> Vec<Vec<IdlingEvent>> {
    let mut det = Detector::new(*params);
    script
        .snapshots("r", polls)
        .into_iter()
        .filter_map(|s| det.push(s).unwrap())
        .map(canonical)
        .collect()
}

fn oracle_batches(script: &FleetScript, params: &DetectorParams, polls: &[i64]) -> Vec<Vec<IdlingEvent>> {
    oracle_events(script, params, polls).into_iter().map(canonical).collect()
}

fn c1_detector_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut events = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vehicles = rng.gen_range(1..=50);
        let ticks = rng.gen_range(10..=200);
        let r = 30;
        let params = DetectorParams::new(r, rng.gen_range(1..=3), rng.gen_range(1..=10)).unwrap();
        let script = FleetScript::random(seed, 1_700_000_000, IataId::new("SIM").unwrap(), r as i64, vehicles, ticks);
        let offset = rng.gen_range(0..r as i64);
        let polls: Vec<i64> = (0..=ticks).map(|k| script.epoch() + offset + k * r as i64).collect();
        let got = detector_batches(&script, &params, &polls);
        let want = oracle_batches(&script, &params, &polls);
        check(got == want, || {
            let first = got.iter().zip(&want).position(|(a, b)| a != b);
            format!("seed {seed}: batches differ (first mismatch at batch {first:?})")
        })?;
        events += want.iter().map(Vec::len).sum::<usize>();
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!("100 scripts, {events} events identical, {secs:.2} s"))
}

fn single_idler(length: i64) -> FleetScript {
    let v = ScriptVehicle {
        vehicle_id: "bus".into(),
        route_id: Some("R".into()),
        trip_id: Some("T".into()),
        waypoints: vec![Waypoint { t: 0, lat: 42.0, lon: -71.0 }, Waypoint { t: 600, lat: 42.0, lon: -70.9 }],
    };
    let seg = IdleSegment {
        vehicle: 0,
        start: 100,
        length,
        latitude: 42.0,
        longitude: -70.98,
    };
    FleetScript::new(1, 0, IataId::new("SIM").unwrap(), 1, vec![v], vec![seg]).unwrap()
}

fn c2_threshold_semantics() -> Outcome {
    let params = DetectorParams::new(30, 1, 10).unwrap();
    // polls not aligned with the stop
    let offset_polls = |length: i64| -> Vec<i64> {
        let script = single_idler(length);
        let polls: Vec<i64> = (0..8).map(|k| 40 + 30 * k).collect();
        detector_batches(&script, &params, &polls)
            .into_iter()
            .flatten()
            .map(|e| e.duration)
            .collect()
    };
    // polls at 100, 130, 160, 190 fall inside a 95 s stop starting at 100
    let grid = |length: i64| -> Vec<i64> {
        let script = single_idler(length);
        let polls: Vec<i64> = (0..4).map(|k| 100 + 30 * k).collect();
        detector_batches(&script, &params, &polls)
            .into_iter()
            .flatten()
            .map(|e| e.duration)
            .collect()
    };
    check(grid(95) == vec![60, 90], || format!("95 s idle gave {:?}", grid(95)))?;
    check(grid(45).is_empty(), || format!("45 s idle gave {:?}", grid(45)))?;
    check(offset_polls(45).is_empty(), || format!("45 s idle, offset polls, gave {:?}", offset_polls(45)))?;
    Ok("95 s -> [60, 90], 45 s -> []".into())
}

fn c3_buffer_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = DetectorParams::new(30, 2, 4).unwrap();
    let iata = IataId::new("FZZ").unwrap();
    let mut det = Detector::new(params);
    let mut violations = 0;
    let mut max_h = 0;
    for tick in 0..10_000i64 {
        // few vehicles on a coarse grid so tuples recur, vanish and return
        let records = (0..rng.gen_range(0..12)).map(|v| VehicleRecord {
            iata_id: iata.clone(),
            vehicle_id: format!("v{v}"),
            route_id: Some("R".into()),
            trip_id: None,
            latitude: 42.0 + f64::from(rng.gen_range(0..3)) * 1e-3,
            longitude: -71.0,
            timestamp: 1 + tick,
        });
        det.push(FeedSnapshot::from_records("fz", 1_000 + 30 * tick, records)).unwrap();
        if det.buffer().len() > params.buffer_len() {
            violations += 1;
        }
        violations += det.candidates().iter().filter(|c| c.miss_count >= params.m()).count();
        max_h = max_h.max(det.candidates().len());
    }
    check(violations == 0, || format!("{violations} violations"))?;
    Ok(format!("10000 ticks, 0 violations, max |H| = {max_h}"))
}

struct City {
    gtfs: StaticGtfs,
    events: Vec<CityEvent>,
}

fn synthetic_city(rng: &mut ChaCha8Rng, lat0: f64, lon0: f64) -> City {
    let mut trips = Vec::new();
    let mut points = Vec::new();
    let mut routes = Vec::new();
    for r in 0..3 {
        let route_id = format!("R{r}");
        routes.push(route_id.clone());
        for s in 0..rng.gen_range(1..=2) {
            let shape_id = format!("S{r}-{s}");
            trips.push(TripRow {
                route_id: route_id.clone(),
                trip_id: format!("T{r}-{s}"),
                shape_id: Some(shape_id.clone()),
            });
            let (mut lat, mut lon) = (lat0 + rng.gen_range(-0.01..0.01), lon0 + rng.gen_range(-0.01..0.01));
            for seq in 0..rng.gen_range(10..40) {
                lat += rng.gen_range(-3e-4..3e-4);
                lon += rng.gen_range(-3e-4..3e-4);
                points.push(ShapePointRow {
                    shape_id: shape_id.clone(),
                    shape_pt_lat: lat,
                    shape_pt_lon: lon,
                    shape_pt_sequence: seq,
                });
            }
        }
    }
    let gtfs = StaticGtfs::from_rows(routes, trips, points);
    let all: Vec<(String, (f64, f64))> = gtfs
        .shapes
        .iter()
        .flat_map(|(id, pts)| pts.iter().map(move |p| (id.clone(), *p)))
        .collect();
    let events = (0..rng.gen_range(20..60))
        .map(|_| {
            let (shape, (lat, lon)) = &all[rng.gen_range(0..all.len())];
            let trip = gtfs.trips.iter().find(|t| t.shape_id.as_deref() == Some(shape.as_str())).unwrap();
            let (route_id, trip_id) = match rng.gen_range(0..10) {
                0 => (None, Some(trip.trip_id.clone())),
                1 => (Some("unknown".into()), None),
                _ => (Some(trip.route_id.clone()), None),
            };
            CityEvent {
                route_id,
                trip_id,
                latitude: lat + rng.gen_range(-8e-4..8e-4),
                longitude: lon + rng.gen_range(-8e-4..8e-4),
            }
        })
        .collect();
    City { gtfs, events }
}

/// All-pairs error straight from the raw tables.
fn brute_force_error(city: &City, meters: f64) -> Option<(f64, usize)> {
    let mut distances = Vec::new();
    let mut lat_sum = 0.0;
    for e in &city.events {
        let shapes: BTreeSet<&str> = match e.route_id.as_deref() {
            Some(r) if city.gtfs.trips.iter().any(|t| t.route_id == r) => city
                .gtfs
                .trips
                .iter()
                .filter(|t| t.route_id == r)
                .filter_map(|t| t.shape_id.as_deref())
                .collect(),
            _ => city
                .gtfs
                .trips
                .iter()
                .filter(|t| Some(t.trip_id.as_str()) == e.trip_id.as_deref())
                .filter_map(|t| t.shape_id.as_deref())
                .collect(),
        };
        let d = shapes
            .iter()
            .flat_map(|s| city.gtfs.shapes[*s].iter())
            .map(|(lat, lon)| ((lat - e.latitude).powi(2) + (lon - e.longitude).powi(2)).sqrt())
            .fold(None, |acc: Option<f64>, d| Some(acc.map_or(d, |a| a.min(d))));
        if let Some(d) = d {
            distances.push(d);
            lat_sum += e.latitude;
        }
    }
    if distances.is_empty() {
        return None;
    }
    let phi = lat_sum / distances.len() as f64;
    let limit = meters / (111_320.0 * (phi * std::f64::consts::PI / 180.0).cos());
    let out = distances.iter().filter(|&&d| d > limit).count();
    Some((100.0 * out as f64 / distances.len() as f64, distances.len()))
}

fn c4_spatial_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cities: Vec<City> = [(42.36, -71.06), (40.71, -74.0), (59.33, 18.07), (-33.87, 151.21), (28.61, 77.21)]
        .iter()
        .map(|&(lat, lon)| synthetic_city(&mut rng, lat, lon))
        .collect();
    let thresholds: Vec<f64> = (0..=100).map(f64::from).collect();
    let mut computed = Vec::new();
    let mut worst: f64 = 0.0;
    for (i, city) in cities.iter().enumerate() {
        let index = ShapeIndex::new(&city.gtfs).map_err(|e| e.to_string())?;
        let d = CityDistances::compute(&city.events, &index).map_err(|e| e.to_string())?;
        for &t in &thresholds {
            let (want, n) = brute_force_error(city, t).ok_or("oracle found no mapped events")?;
            let got = transit_idle::audit::spatial_point_error(&city.events, &index, t).map_err(|e| e.to_string())?;
            check(got.n == n, || format!("city {i}: n {} vs {n}", got.n))?;
            worst = worst.max((got.error_pct - want).abs());
        }
        computed.push(d);
    }
    check(worst <= 1e-9, || format!("max deviation {worst:e}"))?;
    let sweep = threshold_sweep(&computed, &thresholds).map_err(|e| e.to_string())?;
    let total: usize = computed.iter().map(|c| c.n()).sum();
    for (k, &t) in thresholds.iter().enumerate() {
        let per: Vec<(f64, usize)> = cities.iter().map(|c| brute_force_error(c, t).unwrap()).collect();
        let u = per.iter().map(|p| p.0).sum::<f64>() / per.len() as f64;
        let w = per.iter().map(|p| p.0 * p.1 as f64).sum::<f64>() / total as f64;
        check((sweep.unweighted_pct[k] - u).abs() <= 1e-9 && (sweep.weighted_pct[k] - w).abs() <= 1e-9, || {
            format!("sweep differs at {t} m")
        })?;
    }
    let monotone = |v: &[f64]| v.windows(2).all(|w| w[1] <= w[0]);
    check(monotone(&sweep.unweighted_pct) && monotone(&sweep.weighted_pct), || "sweep not monotone".into())?;
    let secs = start.elapsed().as_secs_f64();
    check(secs < 30.0, || format!("took {secs:.1} s"))?;
    Ok(format!(
        "5 cities, max |e - oracle| = {worst:e}, sweep {:.1}% -> {:.1}% monotone, {secs:.2} s",
        sweep.unweighted_pct[0], sweep.unweighted_pct[100]
    ))
}

fn e2e() -> &'static E2eRun {
    static RUN: OnceLock<E2eRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let script = FleetScript::random(5, 1_706_572_800, IataId::new("SIM").unwrap(), 30, 30, 120);
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(run_e2e(script, DetectorParams::default(), 3_600, 150.0))
    })
}

fn c5_clean_battery() -> Outcome {
    let run = e2e();
    check(!run.export_rows.is_empty(), || "no events exported".into())?;
    let table = ExportTable::read(run.csv.as_slice()).map_err(|e| e.to_string())?;
    let report = run_battery(&table, &BatteryOptions::default()).map_err(|e| e.to_string())?;
    let entry = |n: u32| report.entry(n).ok_or(format!("test {n} missing"));
    for n in 1..=14 {
        check(entry(n)?.passed_type_check() == Some(true), || format!("type test {n} failed"))?;
    }
    for n in (15..=36).chain([105, 106, 110, 111]) {
        let v = entry(n)?.percent().ok_or(format!("test {n} not a percentage"))?;
        check(v == 0.0, || format!("test {n} = {v}"))?;
    }
    for n in 107..=109 {
        entry(n)?;
    }
    Ok(format!(
        "{} rows: types pass, duplication/missingness/bounds/zero/negative all 0.00%",
        run.export_rows.len()
    ))
}

fn c6_idle_share() -> Outcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("config/sim/fleet.toml");
    let script = FleetScript::load(&path).map_err(|e| e.to_string())?;
    let params = DetectorParams::default();
    let polls = script.poll_grid(params.r(), (script.horizon() / params.r() as i64 + 1) as usize);
    let store = SqliteStore::in_memory().unwrap();
    store.upsert_agencies(&[sim_agency(script.iata_id())]).unwrap();
    let mut det = Detector::new(params);
    for snap in script.snapshots("sim", &polls) {
        if let Some(batch) = det.push(snap).unwrap() {
            store.insert_events(&batch).unwrap();
        }
    }
    let mut csv = Vec::new();
    export_csv(&store, ExportRange::all(), &mut csv).unwrap();
    let table = ExportTable::read(csv.as_slice()).map_err(|e| e.to_string())?;
    let opts = DurationOptions {
        adjusted_min_secs: 300,
        unadjusted_min_secs: params.min_duration(),
        operational: script.operational_time(),
    };
    let d = audit_duration(&table, &opts).map_err(|e| e.to_string())?;
    check((d.idle_share_adjusted_pct - 40.0).abs() <= 1.0, || {
        format!("adjusted share {:.3}%", d.idle_share_adjusted_pct)
    })?;
    check(d.idle_share_unadjusted_pct > d.idle_share_adjusted_pct, || {
        format!("unadjusted {:.3}% not above adjusted", d.idle_share_unadjusted_pct)
    })?;
    Ok(format!(
        "adjusted {:.2}%, unadjusted {:.2}% over {} episodes",
        d.idle_share_adjusted_pct, d.idle_share_unadjusted_pct, d.episodes
    ))
}

fn golden(name: &str) -> Vec<u8> {
    std::fs::read(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)).unwrap()
}

#[allow(clippy::excessive_precision)]
fn c7_wire_fidelity() -> Outcome {
    let nyc = IataId::new("NYC").unwrap();
    let ev = |vehicle: &str, route: &str, trip: &str, lat: f64, lon: f64, datetime: i64, duration: i64| IdlingEvent {
        iata_id: nyc.clone(),
        vehicle_id: vehicle.into(),
        route_id: Some(route.into()),
        trip_id: Some(trip.into()),
        latitude: lat,
        longitude: lon,
        datetime,
        duration,
    };
    let batch = [
        ev("MTA NYCT_9750", "M42", "MQ_D3-Weekday-SDon-012900_M42_301", 40.7625617980957, -74.00098419189453, 1697178720, 90),
        ev("MTA NYCT_9890", "M104", "MV_D3-Weekday-SDon-011000_M104_101", 40.814937591552734, -73.95511627197266, 1697178722, 120),
        ev("MTA NYCT_5975", "BX9", "KB_D3-Weekday-SDon-011000_BX9_602", 40.84089279174805, -73.87944030761719, 1697178721, 60),
    ];
    let json = encode_batch(&batch);
    check(json.as_bytes() == golden("websocket_batch.json").as_slice(), || format!("json differs: {json}"))?;
    let keys = ["iata_id", "vehicle_id", "route_id", "trip_id", "latitude", "longitude", "datetime", "duration"];
    for obj in json.trim_matches(['[', ']']).split("},{") {
        let found: Vec<&str> = obj
            .split(',')
            .filter_map(|kv| kv.trim_start_matches('{').split(':').next())
            .map(|k| k.trim_matches('"'))
            .collect();
        check(found == keys, || format!("keys {found:?}"))?;
    }

    let pb = golden("vehicle_position.pb");
    let msg = FeedMessage::decode(pb.as_slice()).map_err(|e| e.to_string())?;
    check(
        msg.header.gtfs_realtime_version == "2.0"
            && msg.header.incrementality == Some(Incrementality::FullDataset as i32)
            && msg.header.timestamp == Some(1706573497),
        || format!("header {:?}", msg.header),
    )?;
    let decoded = decode_feed(&pb, &IataId::new("BOS").unwrap(), 0).map_err(|e| e.to_string())?;
    check(decoded.records.len() == 1 && decoded.rejected.is_empty(), || "expected one record".into())?;
    let rec = &decoded.records[0];
    let want = VehicleRecord {
        iata_id: IataId::new("BOS").unwrap(),
        vehicle_id: "y0811".into(),
        route_id: Some("216".into()),
        trip_id: Some("60487628".into()),
        latitude: f64::from(42.2721062f32),
        longitude: f64::from(-70.9509277f32),
        timestamp: 1706573492,
    };
    check(*rec == want, || format!("decoded {rec:?}"))?;
    check(decoded.header_timestamp == Some(1706573497), || "header timestamp".into())?;
    Ok("websocket JSON byte-identical, protobuf record exact".into())
}

fn c8_conservation() -> Outcome {
    let mut summaries = Vec::new();
    let short = FleetScript::load(Path::new(env!("CARGO_MANIFEST_DIR")).join("config/sim/fleet.toml"))
        .map_err(|e| e.to_string())?;
    let rt = tokio::runtime::Runtime::new().unwrap();
    let second = rt.block_on(run_e2e(short, DetectorParams::new(30, 2, 5).unwrap(), 1_200, 150.0));
    for run in [e2e(), &second] {
        let stream = run.streamed.len() as u64;
        let exported = run.export_rows.len() as u64;
        check(stream > 0, || "no events streamed".into())?;
        check(run.frames as u64 == run.counts.batches, || {
            format!("{} frames for {} batches", run.frames, run.counts.batches)
        })?;
        check(stream == run.store_count && run.store_count == exported && exported == run.counts.events, || {
            format!("stream {stream}, store {}, export {exported}", run.store_count)
        })?;
        let mut a: Vec<_> = run.streamed.iter().map(event_key).collect();
        let mut b: Vec<_> = run.export_rows.iter().map(|r| event_key(&r.event)).collect();
        a.sort();
        b.sort();
        check(a == b, || "exported events differ from streamed".into())?;
        let mut by_key: BTreeMap<_, Vec<&IdlingEvent>> = BTreeMap::new();
        for e in &run.streamed {
            by_key.entry(event_key(e)).or_default().push(e);
        }
        for r in &run.export_rows {
            let same = by_key[&event_key(&r.event)].iter().any(|e| **e == r.event);
            check(same, || format!("row {:?} not field-exact", r.event))?;
            check(r.agency == sim_agency(&r.event.iata_id), || "agency fields differ".into())?;
        }
        summaries.push(format!("{stream}"));
    }
    Ok(format!("stream == store == export ({} events)", summaries.join(" / ")))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("detector-oracle equivalence", c1_detector_oracle_equivalence),
        ("threshold semantics", c2_threshold_semantics),
        ("buffer bound", c3_buffer_bound),
        ("spatial point error oracle", c4_spatial_oracle),
        ("clean-data battery", c5_clean_battery),
        ("idle-share recovery", c6_idle_share),
        ("wire fidelity", c7_wire_fidelity),
        ("end-to-end conservation", c8_conservation),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = Duration::from_millis(t.elapsed().as_millis() as u64);
        match outcome {
            Ok(detail) => println!("acceptance {}: PASS {name}: {detail} [{elapsed:?}]", i + 1),
            Err(why) => {
                failed += 1;
                println!("acceptance {}: FAIL {name}: {why} [{elapsed:?}]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
