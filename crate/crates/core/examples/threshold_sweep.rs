//! Sweeps the spatial threshold from 0 to 100 m over two synthetic cities
//! and prints the error curve.
//!
//!     cargo run --example threshold_sweep

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use transit_idle::audit::gtfs::{ShapePointRow, TripRow};
use transit_idle::audit::{default_thresholds, threshold_sweep, CityDistances, CityEvent, ShapeIndex, StaticGtfs};

/// A straight route with events scattered up to `spread` degrees off it.
fn city(rng: &mut ChaCha8Rng, lat: f64, lon: f64, events: usize, spread: f64) -> CityDistances {
    let points = (0..200)
        .map(|i| ShapePointRow {
            shape_id: "S".into(),
            shape_pt_lat: lat,
            shape_pt_lon: lon + 5e-5 * f64::from(i),
            shape_pt_sequence: i,
        })
        .collect();
    let trips = vec![TripRow {
        route_id: "R".into(),
        trip_id: "T".into(),
        shape_id: Some("S".into()),
    }];
    let index = ShapeIndex::new(&StaticGtfs::from_rows(vec!["R".into()], trips, points)).unwrap();
    let events: Vec<CityEvent> = (0..events)
        .map(|_| CityEvent {
            route_id: Some("R".into()),
            trip_id: None,
            latitude: lat + rng.gen_range(-spread..spread),
            longitude: lon + rng.gen_range(0.0..0.01),
        })
        .collect();
    CityDistances::compute(&events, &index).unwrap()
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cities = [
        city(&mut rng, 42.36, -71.06, 400, 4e-4),
        city(&mut rng, 59.33, 18.07, 100, 8e-4),
    ];
    let sweep = threshold_sweep(&cities, &default_thresholds()).unwrap();
    println!("meters  unweighted%  weighted%");
    for i in (0..sweep.thresholds_m.len()).step_by(10) {
        println!(
            "{:>6}  {:>11.2}  {:>9.2}",
            sweep.thresholds_m[i], sweep.unweighted_pct[i], sweep.weighted_pct[i]
        );
    }
}
