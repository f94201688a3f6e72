//! Static GTFS bundles: the `routes.txt`, `trips.txt` and `shapes.txt`
//! tables needed to measure how far idling events fall from route shapes.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::kdtree::KdTree;
use super::AuditError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripRow {
    pub route_id: String,
    pub trip_id: String,
    #[serde(default)]
    pub shape_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapePointRow {
    pub shape_id: String,
    pub shape_pt_lat: f64,
    pub shape_pt_lon: f64,
    pub shape_pt_sequence: u32,
}

#[derive(Debug, Deserialize)]
struct RouteRow {
    route_id: String,
}

/// The subset of a static GTFS bundle used by the spatial audit.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StaticGtfs {
    pub route_ids: Vec<String>,
    pub trips: Vec<TripRow>,
    /// Shape id → vertices in sequence order.
    pub shapes: BTreeMap<String, Vec<(f64, f64)>>,
}

fn parse<T: for<'de> Deserialize<'de>, R: Read>(name: &str, input: R) -> Result<Vec<T>, AuditError> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input)
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| AuditError::Gtfs(format!("{name}: {e}")))
}

impl StaticGtfs {
    /// Loads a zipped bundle or a directory holding the three tables.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, AuditError> {
        let path = path.as_ref();
        let mut texts: HashMap<&str, Vec<u8>> = HashMap::new();
        const FILES: [&str; 3] = ["routes.txt", "trips.txt", "shapes.txt"];
        if path.is_dir() {
            for f in FILES {
                let p = path.join(f);
                let bytes = std::fs::read(&p).map_err(|e| AuditError::Gtfs(format!("{}: {e}", p.display())))?;
                texts.insert(f, bytes);
            }
        } else {
            let mut archive = zip::ZipArchive::new(File::open(path)?)?;
            for f in FILES {
                let mut entry = archive
                    .by_name(f)
                    .map_err(|e| AuditError::Gtfs(format!("{f}: {e}")))?;
                let mut buf = Vec::new();
                entry.read_to_end(&mut buf)?;
                texts.insert(f, buf);
            }
        }
        let routes: Vec<RouteRow> = parse("routes.txt", texts["routes.txt"].as_slice())?;
        let trips: Vec<TripRow> = parse("trips.txt", texts["trips.txt"].as_slice())?;
        let points: Vec<ShapePointRow> = parse("shapes.txt", texts["shapes.txt"].as_slice())?;
        Ok(Self::from_rows(
            routes.into_iter().map(|r| r.route_id).collect(),
            trips,
            points,
        ))
    }

    pub fn from_rows(route_ids: Vec<String>, trips: Vec<TripRow>, points: Vec<ShapePointRow>) -> Self {
        let mut grouped: BTreeMap<String, Vec<(u32, f64, f64)>> = BTreeMap::new();
        for p in points {
            grouped
                .entry(p.shape_id)
                .or_default()
                .push((p.shape_pt_sequence, p.shape_pt_lat, p.shape_pt_lon));
        }
        let shapes = grouped
            .into_iter()
            .map(|(id, mut pts)| {
                pts.sort_by_key(|p| p.0);
                (id, pts.into_iter().map(|(_, lat, lon)| (lat, lon)).collect())
            })
            .collect();
        Self {
            route_ids,
            trips: trips
                .into_iter()
                .map(|mut t| {
                    t.shape_id = t.shape_id.filter(|s| !s.is_empty());
                    t
                })
                .collect(),
            shapes,
        }
    }

    /// Writes the bundle as a zip with the three tables.
    pub fn write_zip(&self, path: impl AsRef<Path>) -> Result<(), AuditError> {
        let mut zw = zip::ZipWriter::new(File::create(path)?);
        let opts = zip::write::SimpleFileOptions::default();

        zw.start_file("routes.txt", opts)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["route_id"])?;
        for r in &self.route_ids {
            w.write_record([r])?;
        }
        zw.write_all(&w.into_inner().map_err(|e| AuditError::Gtfs(e.to_string()))?)?;

        zw.start_file("trips.txt", opts)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        for t in &self.trips {
            w.serialize(t)?;
        }
        zw.write_all(&w.into_inner().map_err(|e| AuditError::Gtfs(e.to_string()))?)?;

        zw.start_file("shapes.txt", opts)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        for (id, pts) in &self.shapes {
            for (i, &(lat, lon)) in pts.iter().enumerate() {
                w.serialize(ShapePointRow {
                    shape_id: id.clone(),
                    shape_pt_lat: lat,
                    shape_pt_lon: lon,
                    shape_pt_sequence: i as u32 + 1,
                })?;
            }
        }
        zw.write_all(&w.into_inner().map_err(|e| AuditError::Gtfs(e.to_string()))?)?;
        zw.finish()?;
        Ok(())
    }
}

/// One KD tree per shape plus the route → shapes and trip → shape mappings.
#[derive(Debug, Clone)]
pub struct ShapeIndex {
    trees: BTreeMap<String, KdTree>,
    route_shapes: HashMap<String, BTreeSet<String>>,
    trip_shape: HashMap<String, String>,
}

impl ShapeIndex {
    pub fn new(gtfs: &StaticGtfs) -> Result<Self, AuditError> {
        let mut trees = BTreeMap::new();
        for (id, pts) in &gtfs.shapes {
            if let Some(&(lat, lon)) = pts
                .iter()
                .find(|(lat, lon)| !(-90.0..=90.0).contains(lat) || !(-180.0..=180.0).contains(lon))
            {
                return Err(AuditError::InvalidShape(format!(
                    "shape {id} has vertex ({lat}, {lon}) out of bounds"
                )));
            }
            trees.insert(id.clone(), KdTree::build(pts.iter().copied()));
        }
        let mut route_shapes: HashMap<String, BTreeSet<String>> = HashMap::new();
        let mut trip_shape = HashMap::new();
        for t in &gtfs.trips {
            let Some(shape) = t.shape_id.as_ref().filter(|s| trees.contains_key(*s)) else {
                continue;
            };
            route_shapes.entry(t.route_id.clone()).or_default().insert(shape.clone());
            trip_shape.insert(t.trip_id.clone(), shape.clone());
        }
        Ok(Self {
            trees,
            route_shapes,
            trip_shape,
        })
    }

    pub fn shape_count(&self) -> usize {
        self.trees.len()
    }

    /// Shapes an event can be matched against: every shape of its route,
    /// else the shape of its trip. Empty when neither is known.
    pub fn candidate_shapes(&self, route_id: Option<&str>, trip_id: Option<&str>) -> Vec<&str> {
        if let Some(shapes) = route_id.and_then(|r| self.route_shapes.get(r)) {
            return shapes.iter().map(String::as_str).collect();
        }
        trip_id
            .and_then(|t| self.trip_shape.get(t))
            .map(|s| vec![s.as_str()])
            .unwrap_or_default()
    }

    /// Distance in degrees from the point to the closest vertex among the
    /// event's candidate shapes, or `None` when it has none.
    pub fn min_distance(&self, route_id: Option<&str>, trip_id: Option<&str>, lat: f64, lon: f64) -> Option<f64> {
        self.candidate_shapes(route_id, trip_id)
            .into_iter()
            .filter_map(|s| self.trees[s].nearest_distance(lat, lon))
            .reduce(f64::min)
    }
}
