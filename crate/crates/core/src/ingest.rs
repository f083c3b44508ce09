//! Input records, file loading, deduplication, and coverage reporting.
//!
//! Two tabular formats are supported for detections and labeled records:
//! CSV with a header row, and JSON Lines with one object per line, using the
//! same keys (`image_id`, `lat`, `lng`, `timestamp`, `score`, plus `label`
//! for labeled files). Census attributes arrive as a CSV keyed by `cbg_id`;
//! geometry arrives separately as a GeoJSON FeatureCollection whose features
//! carry a `cbg_id` property, and the two are joined strictly on load.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, RowError};
use crate::geom::{MultiPolygon, Point, Polygon, Ring};

/// Cap on collected row errors so a pathological file cannot balloon the
/// error value; the total count is still reported.
const MAX_ROW_ERRORS: usize = 1000;

/// One classifier detection: an image, where and when it was taken, and the
/// classifier's score for the positive class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    /// Latitude in WGS84 degrees, in [-90, 90].
    pub lat: f64,
    /// Longitude in WGS84 degrees, in [-180, 180].
    pub lng: f64,
    /// Unix timestamp, integer seconds.
    pub timestamp: i64,
    /// Classifier score in [0, 1].
    pub score: f64,
}

/// A detection with a human ground-truth label attached (validation data).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRecord {
    pub detection: DetectionRecord,
    pub label: bool,
}

/// Zoning category of a block group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZoneType {
    Commercial,
    Residential,
    Manufacturing,
    Other,
}

impl ZoneType {
    pub fn parse(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "commercial" => Ok(ZoneType::Commercial),
            "residential" => Ok(ZoneType::Residential),
            "manufacturing" => Ok(ZoneType::Manufacturing),
            "other" => Ok(ZoneType::Other),
            other => Err(format!(
                "unknown zone_type {:?} (expected commercial, residential, manufacturing, or other)",
                other
            )),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ZoneType::Commercial => "commercial",
            ZoneType::Residential => "residential",
            ZoneType::Manufacturing => "manufacturing",
            ZoneType::Other => "other",
        }
    }
}

/// A census block group: geometry plus the demographic and zoning
/// attributes the estimator reweights on.
#[derive(Debug, Clone)]
pub struct CensusBlockGroup {
    pub cbg_id: String,
    pub geometry: MultiPolygon,
    /// Population counts keyed by group name (the `pop_<group>` columns).
    /// Groups may overlap in real census data, so an explicit `total` entry
    /// wins over the sum when present.
    pub populations: BTreeMap<String, f64>,
    pub median_income: Option<f64>,
    pub pop_density: f64,
    pub zone_type: ZoneType,
    pub borough: String,
    pub neighborhood: String,
}

impl CensusBlockGroup {
    /// Total population: the `pop_total` column when present, otherwise the
    /// sum of all group columns.
    pub fn total_population(&self) -> f64 {
        match self.populations.get("total") {
            Some(t) => *t,
            None => self.populations.values().sum(),
        }
    }

    /// Fraction of the CBG's population in `group`; `None` when the total
    /// is zero.
    pub fn percent_of(&self, group: &str) -> Option<f64> {
        let total = self.total_population();
        if total <= 0.0 {
            return None;
        }
        Some(self.populations.get(group).copied().unwrap_or(0.0) / total)
    }
}

/// Tabular input format, inferred from the file extension when not given.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Jsonl,
}

impl Format {
    pub fn from_path(path: &Path) -> Result<Format> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Ok(Format::Csv),
            Some("jsonl") | Some("ndjson") => Ok(Format::Jsonl),
            _ => Err(Error::schema(
                path,
                "cannot infer format from extension (expected .csv or .jsonl)",
            )),
        }
    }
}

fn validate_detection(rec: &DetectionRecord) -> std::result::Result<(), String> {
    if rec.image_id.is_empty() {
        return Err("empty image_id".into());
    }
    if !rec.lat.is_finite() || !(-90.0..=90.0).contains(&rec.lat) {
        return Err(format!("lat {} outside [-90, 90]", rec.lat));
    }
    if !rec.lng.is_finite() || !(-180.0..=180.0).contains(&rec.lng) {
        return Err(format!("lng {} outside [-180, 180]", rec.lng));
    }
    if !rec.score.is_finite() || !(0.0..=1.0).contains(&rec.score) {
        return Err(format!("score {} outside [0, 1]", rec.score));
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct DetectionRow {
    image_id: String,
    lat: f64,
    lng: f64,
    timestamp: i64,
    score: f64,
}

#[derive(Debug, Deserialize)]
struct LabeledRow {
    image_id: String,
    lat: f64,
    lng: f64,
    timestamp: i64,
    score: f64,
    label: LabelValue,
}

/// Labels are serialized as 0/1; booleans are also accepted in JSONL.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum LabelValue {
    Int(i64),
    Bool(bool),
}

impl LabelValue {
    fn as_bool(&self) -> std::result::Result<bool, String> {
        match self {
            LabelValue::Int(0) => Ok(false),
            LabelValue::Int(1) => Ok(true),
            LabelValue::Int(other) => Err(format!("label {} not in {{0, 1}}", other)),
            LabelValue::Bool(b) => Ok(*b),
        }
    }
}

impl From<DetectionRow> for DetectionRecord {
    fn from(r: DetectionRow) -> Self {
        DetectionRecord {
            image_id: r.image_id,
            lat: r.lat,
            lng: r.lng,
            timestamp: r.timestamp,
            score: r.score,
        }
    }
}

fn check_headers(path: &Path, headers: &csv::StringRecord, required: &[&str]) -> Result<()> {
    let present: BTreeSet<&str> = headers.iter().collect();
    let missing: Vec<&str> = required
        .iter()
        .copied()
        .filter(|c| !present.contains(c))
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::schema(
            path,
            format!("missing required column(s): {}", missing.join(", ")),
        ))
    }
}

fn finish_rows<T>(path: &Path, records: Vec<T>, errors: Vec<RowError>) -> Result<Vec<T>> {
    if errors.is_empty() {
        Ok(records)
    } else {
        Err(Error::InvalidRows {
            path: path.display().to_string(),
            rows: errors,
        })
    }
}

/// Load detections, streaming row by row. Every malformed row is collected
/// and reported with its 1-based line number; any malformed row fails the
/// load.
pub fn load_detections(path: &Path, format: Format) -> Result<Vec<DetectionRecord>> {
    match format {
        Format::Csv => load_detections_csv(path),
        Format::Jsonl => load_detections_jsonl(path),
    }
}

fn push_row_error(errors: &mut Vec<RowError>, line: u64, message: String) {
    if errors.len() < MAX_ROW_ERRORS {
        errors.push(RowError { line, message });
    }
}

fn load_detections_csv(path: &Path) -> Result<Vec<DetectionRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_open_error(path, e))?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::schema(path, e.to_string()))?
        .clone();
    check_headers(path, &headers, &["image_id", "lat", "lng", "timestamp", "score"])?;

    let mut out = Vec::new();
    let mut errors = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {
                let line = record.position().map(|p| p.line()).unwrap_or(0);
                match record.deserialize::<DetectionRow>(Some(&headers)) {
                    Ok(row) => {
                        let rec: DetectionRecord = row.into();
                        match validate_detection(&rec) {
                            Ok(()) => out.push(rec),
                            Err(msg) => push_row_error(&mut errors, line, msg),
                        }
                    }
                    Err(e) => push_row_error(&mut errors, line, e.to_string()),
                }
            }
            Err(e) => {
                let line = e
                    .position()
                    .map(|p| p.line())
                    .unwrap_or_else(|| record.position().map(|p| p.line()).unwrap_or(0));
                push_row_error(&mut errors, line, e.to_string());
            }
        }
    }
    finish_rows(path, out, errors)
}

fn csv_open_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::schema(path, e.to_string())
    }
}

fn load_detections_jsonl(path: &Path) -> Result<Vec<DetectionRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut errors = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx as u64 + 1;
        let text = line.map_err(|e| Error::io(path, e))?;
        if text.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<DetectionRow>(&text) {
            Ok(row) => {
                let rec: DetectionRecord = row.into();
                match validate_detection(&rec) {
                    Ok(()) => out.push(rec),
                    Err(msg) => push_row_error(&mut errors, line_no, msg),
                }
            }
            Err(e) => push_row_error(&mut errors, line_no, e.to_string()),
        }
    }
    finish_rows(path, out, errors)
}

/// Load labeled validation records; same schema as detections plus a
/// `label` column in {0, 1}.
pub fn load_labeled(path: &Path, format: Format) -> Result<Vec<LabeledRecord>> {
    match format {
        Format::Csv => load_labeled_csv(path),
        Format::Jsonl => load_labeled_jsonl(path),
    }
}

fn labeled_from_row(row: LabeledRow) -> std::result::Result<LabeledRecord, String> {
    let label = row.label.as_bool()?;
    let detection = DetectionRecord {
        image_id: row.image_id,
        lat: row.lat,
        lng: row.lng,
        timestamp: row.timestamp,
        score: row.score,
    };
    validate_detection(&detection)?;
    Ok(LabeledRecord { detection, label })
}

fn load_labeled_csv(path: &Path) -> Result<Vec<LabeledRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_open_error(path, e))?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::schema(path, e.to_string()))?
        .clone();
    check_headers(
        path,
        &headers,
        &["image_id", "lat", "lng", "timestamp", "score", "label"],
    )?;

    let mut out = Vec::new();
    let mut errors = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {
                let line = record.position().map(|p| p.line()).unwrap_or(0);
                match record.deserialize::<LabeledRow>(Some(&headers)) {
                    Ok(row) => match labeled_from_row(row) {
                        Ok(rec) => out.push(rec),
                        Err(msg) => push_row_error(&mut errors, line, msg),
                    },
                    Err(e) => push_row_error(&mut errors, line, e.to_string()),
                }
            }
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                push_row_error(&mut errors, line, e.to_string());
            }
        }
    }
    finish_rows(path, out, errors)
}

fn load_labeled_jsonl(path: &Path) -> Result<Vec<LabeledRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut errors = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx as u64 + 1;
        let text = line.map_err(|e| Error::io(path, e))?;
        if text.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<LabeledRow>(&text) {
            Ok(row) => match labeled_from_row(row) {
                Ok(rec) => out.push(rec),
                Err(msg) => push_row_error(&mut errors, line_no, msg),
            },
            Err(e) => push_row_error(&mut errors, line_no, e.to_string()),
        }
    }
    finish_rows(path, out, errors)
}

/// Remove duplicate captures: records sharing identical latitude, longitude,
/// and timestamp are one physical capture uploaded more than once. The
/// record with the lexicographically smallest image_id survives. Output is
/// sorted by (timestamp, lat, lng, image_id), so the result is independent
/// of input order.
pub fn deduplicate(records: Vec<DetectionRecord>) -> (Vec<DetectionRecord>, u64) {
    let input_len = records.len();
    let mut by_key: BTreeMap<(i64, u64, u64), DetectionRecord> = BTreeMap::new();
    for rec in records {
        // total_cmp-compatible bit keys; the sign flip makes negative floats
        // order below positives.
        let key = (rec.timestamp, ord_bits(rec.lat), ord_bits(rec.lng));
        match by_key.entry(key) {
            Entry::Vacant(v) => {
                v.insert(rec);
            }
            Entry::Occupied(mut o) => {
                if rec.image_id < o.get().image_id {
                    o.insert(rec);
                }
            }
        }
    }
    let mut out: Vec<DetectionRecord> = by_key.into_values().collect();
    out.sort_by(|a, b| {
        a.timestamp
            .cmp(&b.timestamp)
            .then(a.lat.total_cmp(&b.lat))
            .then(a.lng.total_cmp(&b.lng))
            .then(a.image_id.cmp(&b.image_id))
    });
    let removed = (input_len - out.len()) as u64;
    (out, removed)
}

/// Map an f64 to bits whose unsigned order matches total_cmp order.
fn ord_bits(v: f64) -> u64 {
    let b = v.to_bits();
    if b & (1 << 63) == 0 {
        b | (1 << 63)
    } else {
        !b
    }
}

// ---------------------------------------------------------------------------
// Census table + geometry

pub fn load_cbgs(census_path: &Path, geometry_path: &Path) -> Result<Vec<CensusBlockGroup>> {
    let rows = load_census(census_path)?;
    let geoms = load_geometry(geometry_path)?;
    join_census_geometry(census_path, rows, geoms)
}

/// Census attributes without geometry, straight from the CSV.
#[derive(Debug, Clone)]
pub struct CensusRow {
    pub cbg_id: String,
    pub borough: String,
    pub neighborhood: String,
    pub zone_type: ZoneType,
    pub median_income: Option<f64>,
    pub pop_density: f64,
    pub populations: BTreeMap<String, f64>,
}

pub fn load_census(path: &Path) -> Result<Vec<CensusRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_open_error(path, e))?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::schema(path, e.to_string()))?
        .clone();
    check_headers(
        path,
        &headers,
        &[
            "cbg_id",
            "borough",
            "neighborhood",
            "zone_type",
            "median_income",
            "pop_density",
        ],
    )?;
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (i_id, i_boro, i_nbhd, i_zone, i_income, i_density) = (
        col("cbg_id"),
        col("borough"),
        col("neighborhood"),
        col("zone_type"),
        col("median_income"),
        col("pop_density"),
    );
    // pop_density is a fixed schema column, not a population group, so the
    // prefix scan must skip that exact column.
    let pop_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != i_density)
        .filter_map(|(i, h)| h.strip_prefix("pop_").map(|g| (i, g.to_string())))
        .filter(|(_, g)| !g.is_empty())
        .collect();
    if pop_cols.is_empty() {
        return Err(Error::schema(path, "no pop_<group> columns found"));
    }

    let mut out = Vec::new();
    let mut errors = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut record = csv::StringRecord::new();
    loop {
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                push_row_error(&mut errors, line, e.to_string());
                continue;
            }
        }
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| record.get(i).unwrap_or("").trim();
        let parse = |i: usize, what: &str| -> std::result::Result<f64, String> {
            field(i)
                .parse::<f64>()
                .map_err(|_| format!("{}: cannot parse {:?} as a number", what, field(i)))
        };

        let row = (|| -> std::result::Result<CensusRow, String> {
            let cbg_id = field(i_id).to_string();
            if cbg_id.is_empty() {
                return Err("empty cbg_id".into());
            }
            let zone_type = ZoneType::parse(field(i_zone))?;
            let median_income = match field(i_income) {
                "" => None,
                s => Some(s.parse::<f64>().map_err(|_| {
                    format!("median_income: cannot parse {:?} as a number", s)
                })?),
            };
            let pop_density = parse(i_density, "pop_density")?;
            if !pop_density.is_finite() || pop_density < 0.0 {
                return Err(format!("pop_density {} must be nonnegative", pop_density));
            }
            let mut populations = BTreeMap::new();
            for (i, group) in &pop_cols {
                let v = parse(*i, &format!("pop_{}", group))?;
                if !v.is_finite() || v < 0.0 {
                    return Err(format!("pop_{} {} must be nonnegative", group, v));
                }
                populations.insert(group.clone(), v);
            }
            if let Some(income) = median_income {
                if !income.is_finite() || income < 0.0 {
                    return Err(format!("median_income {} must be nonnegative", income));
                }
            }
            Ok(CensusRow {
                cbg_id,
                borough: field(i_boro).to_string(),
                neighborhood: field(i_nbhd).to_string(),
                zone_type,
                median_income,
                pop_density,
                populations,
            })
        })();

        match row {
            Ok(r) => {
                if !seen.insert(r.cbg_id.clone()) {
                    push_row_error(&mut errors, line, format!("duplicate cbg_id {:?}", r.cbg_id));
                } else {
                    out.push(r);
                }
            }
            Err(msg) => push_row_error(&mut errors, line, msg),
        }
    }
    finish_rows(path, out, errors)
}

/// Parse a GeoJSON FeatureCollection of Polygon/MultiPolygon features with a
/// `cbg_id` property. Geometry is validated here (closed, non-self-
/// intersecting rings) so downstream code can trust it.
pub fn load_geometry(path: &Path) -> Result<BTreeMap<String, MultiPolygon>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::schema(path, format!("invalid JSON: {}", e)))?;

    let obj_type = value.get("type").and_then(|t| t.as_str());
    if obj_type != Some("FeatureCollection") {
        return Err(Error::schema(
            path,
            format!("expected a FeatureCollection, got {:?}", obj_type),
        ));
    }
    let features = value
        .get("features")
        .and_then(|f| f.as_array())
        .ok_or_else(|| Error::schema(path, "FeatureCollection has no features array"))?;

    let mut out: BTreeMap<String, MultiPolygon> = BTreeMap::new();
    for (idx, feature) in features.iter().enumerate() {
        let cbg_id = feature
            .get("properties")
            .and_then(|p| p.get("cbg_id"))
            .and_then(|v| v.as_str())
            .ok_or_else(|| {
                Error::schema(path, format!("feature {} has no string cbg_id property", idx))
            })?
            .to_string();
        let geometry = feature
            .get("geometry")
            .ok_or_else(|| Error::schema(path, format!("feature {} has no geometry", idx)))?;
        let mp = parse_geometry(geometry)
            .map_err(|msg| Error::schema(path, format!("feature {} ({}): {}", idx, cbg_id, msg)))?;
        mp.validate().map_err(|msg| Error::Geometry {
            cbg_id: cbg_id.clone(),
            message: msg,
        })?;
        if out.insert(cbg_id.clone(), mp).is_some() {
            return Err(Error::schema(
                path,
                format!("duplicate geometry for cbg_id {:?}", cbg_id),
            ));
        }
    }
    Ok(out)
}

fn parse_geometry(geometry: &serde_json::Value) -> std::result::Result<MultiPolygon, String> {
    let gtype = geometry
        .get("type")
        .and_then(|t| t.as_str())
        .ok_or("geometry has no type")?;
    let coords = geometry.get("coordinates").ok_or("geometry has no coordinates")?;
    match gtype {
        "Polygon" => Ok(MultiPolygon(vec![parse_polygon(coords)?])),
        "MultiPolygon" => {
            let polys = coords.as_array().ok_or("MultiPolygon coordinates not an array")?;
            let parsed = polys
                .iter()
                .map(parse_polygon)
                .collect::<std::result::Result<Vec<_>, _>>()?;
            Ok(MultiPolygon(parsed))
        }
        other => Err(format!("unsupported geometry type {:?}", other)),
    }
}

fn parse_polygon(coords: &serde_json::Value) -> std::result::Result<Polygon, String> {
    let rings = coords.as_array().ok_or("Polygon coordinates not an array")?;
    if rings.is_empty() {
        return Err("polygon has no rings".into());
    }
    let mut parsed = rings.iter().map(parse_ring);
    let exterior = parsed.next().unwrap()?;
    let holes = parsed.collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Polygon { exterior, holes })
}

fn parse_ring(value: &serde_json::Value) -> std::result::Result<Ring, String> {
    let positions = value.as_array().ok_or("ring is not an array")?;
    let mut points = Vec::with_capacity(positions.len());
    for pos in positions {
        let pair = pos.as_array().ok_or("position is not an array")?;
        if pair.len() < 2 {
            return Err("position has fewer than 2 coordinates".into());
        }
        let x = pair[0].as_f64().ok_or("longitude is not a number")?;
        let y = pair[1].as_f64().ok_or("latitude is not a number")?;
        points.push(Point::new(x, y));
    }
    Ok(Ring(points))
}

fn join_census_geometry(
    census_path: &Path,
    rows: Vec<CensusRow>,
    mut geoms: BTreeMap<String, MultiPolygon>,
) -> Result<Vec<CensusBlockGroup>> {
    let mut missing = Vec::new();
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        match geoms.remove(&row.cbg_id) {
            Some(geometry) => out.push(CensusBlockGroup {
                cbg_id: row.cbg_id,
                geometry,
                populations: row.populations,
                median_income: row.median_income,
                pop_density: row.pop_density,
                zone_type: row.zone_type,
                borough: row.borough,
                neighborhood: row.neighborhood,
            }),
            None => missing.push(row.cbg_id),
        }
    }
    if !missing.is_empty() {
        return Err(Error::schema(
            census_path,
            format!(
                "{} census row(s) have no geometry feature: {}",
                missing.len(),
                preview_ids(&missing)
            ),
        ));
    }
    if !geoms.is_empty() {
        let extra: Vec<String> = geoms.into_keys().collect();
        return Err(Error::schema(
            census_path,
            format!(
                "{} geometry feature(s) have no census row: {}",
                extra.len(),
                preview_ids(&extra)
            ),
        ));
    }
    out.sort_by(|a, b| a.cbg_id.cmp(&b.cbg_id));
    Ok(out)
}

fn preview_ids(ids: &[String]) -> String {
    const SHOWN: usize = 5;
    let mut s = ids.iter().take(SHOWN).cloned().collect::<Vec<_>>().join(", ");
    if ids.len() > SHOWN {
        s.push_str(", ...");
    }
    s
}

// ---------------------------------------------------------------------------
// Local time helpers

/// Default local-time offset (UTC-5). Fixed offset, no DST: the downstream
/// day/night and weekday/weekend splits tolerate an hour of skew, and
/// synthetic data carries no real timezone anyway.
pub const DEFAULT_UTC_OFFSET_SECS: i64 = -5 * 3600;

pub fn local_hour(timestamp: i64, utc_offset_secs: i64) -> u8 {
    (timestamp + utc_offset_secs).div_euclid(3600).rem_euclid(24) as u8
}

/// Day of week with 0 = Monday .. 6 = Sunday (the Unix epoch fell on a
/// Thursday).
pub fn local_day_of_week(timestamp: i64, utc_offset_secs: i64) -> u8 {
    ((timestamp + utc_offset_secs).div_euclid(86_400) + 3).rem_euclid(7) as u8
}

/// Daytime is local hour in [6, 18).
pub fn is_daytime(timestamp: i64, utc_offset_secs: i64) -> bool {
    (6..18).contains(&local_hour(timestamp, utc_offset_secs))
}

pub fn is_weekend(timestamp: i64, utc_offset_secs: i64) -> bool {
    local_day_of_week(timestamp, utc_offset_secs) >= 5
}

// ---------------------------------------------------------------------------
// Coverage

/// Half-open analysis window [start, end) in Unix seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: i64,
    pub end: i64,
}

impl TimeWindow {
    pub fn contains(&self, t: i64) -> bool {
        t >= self.start && t < self.end
    }
}

/// How `hours_covered` counts hour slots: distinct calendar hours within
/// the window, or distinct hour-of-week cells (168 slots, local time).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HoursMode {
    #[default]
    Calendar,
    HourOfWeek,
}

#[derive(Debug, Clone, Serialize)]
pub struct CoverageReport {
    pub total_records: u64,
    pub duplicates_removed: u64,
    pub cbgs_with_images: u64,
    pub cbgs_with_images_fraction: f64,
    pub mean_images_per_cbg: f64,
    /// Fraction of hour slots in the window with at least one record.
    pub hours_covered: f64,
    pub unassigned_records: u64,
    pub per_cbg_counts: BTreeMap<String, u64>,
    pub cbgs_without_images: Vec<String>,
}

/// Summarize spatial and temporal coverage of a (deduplicated) record set.
///
/// `assignments` maps image_id to the assigned cbg_id (None = unassigned);
/// records missing from the map count as unassigned. Records outside the
/// window still count toward totals and CBG counts but not toward
/// `hours_covered`, whose denominator is the window's slot count.
pub fn coverage_report(
    records: &[DetectionRecord],
    assignments: &BTreeMap<String, Option<String>>,
    cbgs: &[CensusBlockGroup],
    window: TimeWindow,
    duplicates_removed: u64,
    hours_mode: HoursMode,
    utc_offset_secs: i64,
) -> Result<CoverageReport> {
    if window.end <= window.start {
        return Err(Error::Precondition(format!(
            "empty time window: start {} >= end {}",
            window.start, window.end
        )));
    }

    let mut per_cbg_counts: BTreeMap<String, u64> =
        cbgs.iter().map(|c| (c.cbg_id.clone(), 0)).collect();
    let mut unassigned = 0u64;
    let mut hour_slots: BTreeSet<i64> = BTreeSet::new();

    for rec in records {
        match assignments.get(&rec.image_id) {
            Some(Some(cbg_id)) => match per_cbg_counts.get_mut(cbg_id) {
                Some(n) => *n += 1,
                None => {
                    return Err(Error::Precondition(format!(
                        "assignment references unknown cbg_id {:?}",
                        cbg_id
                    )))
                }
            },
            _ => unassigned += 1,
        }
        if window.contains(rec.timestamp) {
            let slot = match hours_mode {
                HoursMode::Calendar => rec.timestamp.div_euclid(3600),
                HoursMode::HourOfWeek => {
                    let h = local_hour(rec.timestamp, utc_offset_secs) as i64;
                    let d = local_day_of_week(rec.timestamp, utc_offset_secs) as i64;
                    d * 24 + h
                }
            };
            hour_slots.insert(slot);
        }
    }

    let first_hour = window.start.div_euclid(3600);
    let last_hour = (window.end - 1).div_euclid(3600);
    let window_hours = (last_hour - first_hour + 1) as u64;
    let denom_slots = match hours_mode {
        HoursMode::Calendar => window_hours,
        HoursMode::HourOfWeek => window_hours.min(168),
    };

    let n_cbgs = cbgs.len() as u64;
    let with_images = per_cbg_counts.values().filter(|&&n| n > 0).count() as u64;
    let assigned_total: u64 = per_cbg_counts.values().sum();
    let cbgs_without_images: Vec<String> = per_cbg_counts
        .iter()
        .filter(|(_, &n)| n == 0)
        .map(|(id, _)| id.clone())
        .collect();

    Ok(CoverageReport {
        total_records: records.len() as u64,
        duplicates_removed,
        cbgs_with_images: with_images,
        cbgs_with_images_fraction: if n_cbgs == 0 {
            0.0
        } else {
            with_images as f64 / n_cbgs as f64
        },
        mean_images_per_cbg: if n_cbgs == 0 {
            0.0
        } else {
            assigned_total as f64 / n_cbgs as f64
        },
        hours_covered: if denom_slots == 0 {
            0.0
        } else {
            hour_slots.len() as f64 / denom_slots as f64
        },
        unassigned_records: unassigned,
        per_cbg_counts,
        cbgs_without_images,
    })
}

// ---------------------------------------------------------------------------
// Writers (used by synth and by round-trip tests)

pub fn write_detections_csv(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(["image_id", "lat", "lng", "timestamp", "score"])
        .map_err(|e| Error::schema(path, e.to_string()))?;
    for r in records {
        w.write_record([
            r.image_id.as_str(),
            &r.lat.to_string(),
            &r.lng.to_string(),
            &r.timestamp.to_string(),
            &r.score.to_string(),
        ])
        .map_err(|e| Error::schema(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_detections_jsonl(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::json!({
            "image_id": r.image_id,
            "lat": r.lat,
            "lng": r.lng,
            "timestamp": r.timestamp,
            "score": r.score,
        });
        writeln!(w, "{}", line).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_labeled_csv(path: &Path, records: &[LabeledRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(["image_id", "lat", "lng", "timestamp", "score", "label"])
        .map_err(|e| Error::schema(path, e.to_string()))?;
    for r in records {
        let d = &r.detection;
        w.write_record([
            d.image_id.as_str(),
            &d.lat.to_string(),
            &d.lng.to_string(),
            &d.timestamp.to_string(),
            &d.score.to_string(),
            if r.label { "1" } else { "0" },
        ])
        .map_err(|e| Error::schema(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Write the census table. Population columns are the sorted union of group
/// names across rows; rows missing a group get 0.
pub fn write_census_csv(path: &Path, cbgs: &[CensusBlockGroup]) -> Result<()> {
    let groups: BTreeSet<&str> = cbgs
        .iter()
        .flat_map(|c| c.populations.keys().map(|s| s.as_str()))
        .collect();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let mut header = vec![
        "cbg_id".to_string(),
        "borough".to_string(),
        "neighborhood".to_string(),
        "zone_type".to_string(),
        "median_income".to_string(),
        "pop_density".to_string(),
    ];
    header.extend(groups.iter().map(|g| format!("pop_{}", g)));
    w.write_record(&header)
        .map_err(|e| Error::schema(path, e.to_string()))?;
    for c in cbgs {
        let mut row = vec![
            c.cbg_id.clone(),
            c.borough.clone(),
            c.neighborhood.clone(),
            c.zone_type.as_str().to_string(),
            c.median_income.map(|v| v.to_string()).unwrap_or_default(),
            c.pop_density.to_string(),
        ];
        for g in &groups {
            row.push(c.populations.get(*g).copied().unwrap_or(0.0).to_string());
        }
        w.write_record(&row)
            .map_err(|e| Error::schema(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Write geometries as a GeoJSON FeatureCollection with cbg_id properties.
pub fn write_geojson(path: &Path, cbgs: &[CensusBlockGroup]) -> Result<()> {
    let features: Vec<serde_json::Value> = cbgs
        .iter()
        .map(|c| {
            let polys: Vec<serde_json::Value> = c
                .geometry
                .0
                .iter()
                .map(|poly| {
                    let rings: Vec<serde_json::Value> = poly
                        .rings()
                        .map(|ring| {
                            serde_json::Value::Array(
                                ring.0
                                    .iter()
                                    .map(|p| serde_json::json!([p.x, p.y]))
                                    .collect(),
                            )
                        })
                        .collect();
                    serde_json::Value::Array(rings)
                })
                .collect();
            serde_json::json!({
                "type": "Feature",
                "properties": { "cbg_id": c.cbg_id },
                "geometry": { "type": "MultiPolygon", "coordinates": polys },
            })
        })
        .collect();
    let doc = serde_json::json!({ "type": "FeatureCollection", "features": features });
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer(BufWriter::new(file), &doc)
        .map_err(|e| Error::schema(path, e.to_string()))
}
