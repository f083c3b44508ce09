//! Assignment of detections to census block groups.
//!
//! A uniform grid over the city bounding box holds, per cell, the indices of
//! every CBG whose bounding box overlaps that cell. A point lookup touches
//! one cell, filters candidates by bounding box, and runs the exact even-odd
//! containment test on the survivors. Cell size is auto-tuned to the median
//! CBG bounding-box extent, which keeps candidate lists near-constant for
//! census-like tilings.
//!
//! Points on shared boundaries are contained in several CBGs at once; the
//! lexicographically smallest cbg_id wins so assignment is deterministic.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{BoundingBox, MultiPolygon, Point};
use crate::ingest::{CensusBlockGroup, DetectionRecord};

#[derive(Debug)]
struct IndexEntry {
    cbg_id: String,
    bbox: BoundingBox,
    geometry: MultiPolygon,
}

#[derive(Debug)]
struct Grid {
    min_x: f64,
    min_y: f64,
    cell_w: f64,
    cell_h: f64,
    cols: usize,
    rows: usize,
    /// CBG indices per cell, row-major.
    cells: Vec<Vec<u32>>,
    extent: BoundingBox,
}

#[derive(Debug)]
pub struct SpatialIndex {
    entries: Vec<IndexEntry>,
    grid: Option<Grid>,
}

/// Cap on grid dimensions; beyond this, finer cells cost memory without
/// shrinking candidate lists.
const MAX_GRID_DIM: usize = 2048;

/// Build a spatial index over the CBG polygons. Geometry is validated; an
/// invalid polygon fails the build naming its cbg_id.
pub fn build_index(cbgs: &[CensusBlockGroup]) -> Result<SpatialIndex> {
    let mut entries = Vec::with_capacity(cbgs.len());
    for cbg in cbgs {
        cbg.geometry.validate().map_err(|message| Error::Geometry {
            cbg_id: cbg.cbg_id.clone(),
            message,
        })?;
        entries.push(IndexEntry {
            cbg_id: cbg.cbg_id.clone(),
            bbox: cbg.geometry.bounding_box(),
            geometry: cbg.geometry.clone(),
        });
    }
    if entries.len() > u32::MAX as usize {
        return Err(Error::Precondition("too many polygons for the index".into()));
    }

    let grid = if entries.is_empty() {
        None
    } else {
        let extent = entries
            .iter()
            .skip(1)
            .fold(entries[0].bbox, |acc, e| acc.union(&e.bbox));
        let mut widths: Vec<f64> = entries.iter().map(|e| e.bbox.width()).collect();
        let mut heights: Vec<f64> = entries.iter().map(|e| e.bbox.height()).collect();
        widths.sort_by(f64::total_cmp);
        heights.sort_by(f64::total_cmp);
        let med_w = widths[widths.len() / 2];
        let med_h = heights[heights.len() / 2];

        // Cell size: the median polygon extent, floored so the grid never
        // exceeds MAX_GRID_DIM cells per axis and never degenerates to zero.
        let cell_w = med_w
            .max(extent.width() / MAX_GRID_DIM as f64)
            .max(1e-12);
        let cell_h = med_h
            .max(extent.height() / MAX_GRID_DIM as f64)
            .max(1e-12);
        let cols = ((extent.width() / cell_w).ceil() as usize).max(1);
        let rows = ((extent.height() / cell_h).ceil() as usize).max(1);

        let mut cells: Vec<Vec<u32>> = vec![Vec::new(); cols * rows];
        let clamp = |v: f64, hi: usize| -> usize {
            if v < 0.0 {
                0
            } else {
                (v as usize).min(hi - 1)
            }
        };
        for (i, e) in entries.iter().enumerate() {
            let cx0 = clamp((e.bbox.min_x - extent.min_x) / cell_w, cols);
            let cx1 = clamp((e.bbox.max_x - extent.min_x) / cell_w, cols);
            let cy0 = clamp((e.bbox.min_y - extent.min_y) / cell_h, rows);
            let cy1 = clamp((e.bbox.max_y - extent.min_y) / cell_h, rows);
            for cy in cy0..=cy1 {
                for cx in cx0..=cx1 {
                    cells[cy * cols + cx].push(i as u32);
                }
            }
        }
        Some(Grid {
            min_x: extent.min_x,
            min_y: extent.min_y,
            cell_w,
            cell_h,
            cols,
            rows,
            cells,
            extent,
        })
    };

    Ok(SpatialIndex { entries, grid })
}

impl SpatialIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Assign a point to the CBG containing it. Boundary points count as
    /// contained; when several CBGs contain the point, the smallest cbg_id
    /// wins. Points outside every polygon return None.
    pub fn assign(&self, lat: f64, lng: f64) -> Option<&str> {
        let grid = self.grid.as_ref()?;
        if !lat.is_finite() || !lng.is_finite() {
            return None;
        }
        let p = Point::new(lng, lat);
        if !grid.extent.contains(p) {
            return None;
        }
        let cx = (((p.x - grid.min_x) / grid.cell_w) as usize).min(grid.cols - 1);
        let cy = (((p.y - grid.min_y) / grid.cell_h) as usize).min(grid.rows - 1);
        let mut best: Option<&str> = None;
        for &idx in &grid.cells[cy * grid.cols + cx] {
            let e = &self.entries[idx as usize];
            if !e.bbox.contains(p) {
                continue;
            }
            if e.geometry.contains(p) {
                best = match best {
                    Some(cur) if cur <= e.cbg_id.as_str() => Some(cur),
                    _ => Some(e.cbg_id.as_str()),
                };
            }
        }
        best
    }

    /// Assign a batch of records in parallel, preserving input order.
    pub fn assign_records(&self, records: &[DetectionRecord]) -> Vec<Option<&str>> {
        records
            .par_iter()
            .map(|r| self.assign(r.lat, r.lng))
            .collect()
    }

    /// image_id -> assigned cbg_id (None for unassigned), for coverage
    /// reporting and joins.
    pub fn assignment_map(&self, records: &[DetectionRecord]) -> BTreeMap<String, Option<String>> {
        records
            .par_iter()
            .map(|r| {
                (
                    r.image_id.clone(),
                    self.assign(r.lat, r.lng).map(str::to_string),
                )
            })
            .collect::<Vec<_>>()
            .into_iter()
            .collect()
    }

    /// Per-CBG (n_images, n_predicted_positive) at the given score
    /// threshold; a score >= threshold is a positive prediction. Unassigned
    /// records are skipped and counted in the second return value.
    pub fn assigned_counts(
        &self,
        records: &[DetectionRecord],
        threshold: f64,
    ) -> (BTreeMap<String, (u64, u64)>, u64) {
        let merged = records
            .par_chunks(16_384)
            .map(|chunk| {
                let mut counts: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
                let mut unassigned = 0u64;
                for r in chunk {
                    match self.assign(r.lat, r.lng) {
                        Some(cbg_id) => {
                            let e = counts.entry(cbg_id).or_insert((0, 0));
                            e.0 += 1;
                            if r.score >= threshold {
                                e.1 += 1;
                            }
                        }
                        None => unassigned += 1,
                    }
                }
                (counts, unassigned)
            })
            .reduce(
                || (BTreeMap::new(), 0),
                |(mut acc, ua), (counts, ub)| {
                    for (k, (n, p)) in counts {
                        let e = acc.entry(k).or_insert((0, 0));
                        e.0 += n;
                        e.1 += p;
                    }
                    (acc, ua + ub)
                },
            );
        (
            merged
                .0
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            merged.1,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::MultiPolygon;
    use std::collections::BTreeMap;

    fn grid_cbgs(rows: usize, cols: usize) -> Vec<CensusBlockGroup> {
        let mut out = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                out.push(CensusBlockGroup {
                    cbg_id: format!("cbg-{:03}-{:03}", r, c),
                    geometry: MultiPolygon::rect(
                        c as f64,
                        r as f64,
                        (c + 1) as f64,
                        (r + 1) as f64,
                    ),
                    populations: BTreeMap::from([("total".to_string(), 100.0)]),
                    median_income: None,
                    pop_density: 1.0,
                    zone_type: crate::ingest::ZoneType::Residential,
                    borough: "b".into(),
                    neighborhood: "n".into(),
                });
            }
        }
        out
    }

    #[test]
    fn interior_points_assign_to_their_cell() {
        let cbgs = grid_cbgs(3, 3);
        let idx = build_index(&cbgs).unwrap();
        assert_eq!(idx.assign(0.5, 0.5), Some("cbg-000-000"));
        assert_eq!(idx.assign(2.5, 1.5), Some("cbg-002-001"));
        assert_eq!(idx.assign(2.99, 2.99), Some("cbg-002-002"));
    }

    #[test]
    fn outside_points_are_unassigned() {
        let cbgs = grid_cbgs(2, 2);
        let idx = build_index(&cbgs).unwrap();
        assert_eq!(idx.assign(-0.5, 0.5), None);
        assert_eq!(idx.assign(0.5, 2.5), None);
        assert_eq!(idx.assign(5.0, 5.0), None);
        assert_eq!(idx.assign(f64::NAN, 0.5), None);
    }

    #[test]
    fn shared_edges_go_to_smallest_id() {
        let cbgs = grid_cbgs(2, 2);
        let idx = build_index(&cbgs).unwrap();
        // Vertical edge between (0,0) and (0,1) cells.
        assert_eq!(idx.assign(0.5, 1.0), Some("cbg-000-000"));
        // Corner shared by all four.
        assert_eq!(idx.assign(1.0, 1.0), Some("cbg-000-000"));
        // Horizontal edge between rows 0 and 1.
        assert_eq!(idx.assign(1.0, 0.5), Some("cbg-000-000"));
    }

    #[test]
    fn empty_index_assigns_nothing() {
        let idx = build_index(&[]).unwrap();
        assert_eq!(idx.assign(0.5, 0.5), None);
        assert!(idx.is_empty());
    }

    #[test]
    fn invalid_geometry_is_rejected_with_id() {
        let mut cbgs = grid_cbgs(1, 1);
        // Break the ring: drop the closing point.
        if let Some(poly) = cbgs[0].geometry.0.first_mut() {
            poly.exterior.0.pop();
        }
        let err = build_index(&cbgs).unwrap_err();
        match err {
            Error::Geometry { cbg_id, .. } => assert_eq!(cbg_id, "cbg-000-000"),
            other => panic!("expected geometry error, got {other:?}"),
        }
    }

    #[test]
    fn assigned_counts_tallies_positives() {
        let cbgs = grid_cbgs(1, 2);
        let idx = build_index(&cbgs).unwrap();
        let recs = vec![
            DetectionRecord {
                image_id: "a".into(),
                lat: 0.5,
                lng: 0.5,
                timestamp: 0,
                score: 0.9,
            },
            DetectionRecord {
                image_id: "b".into(),
                lat: 0.5,
                lng: 0.4,
                timestamp: 0,
                score: 0.2,
            },
            DetectionRecord {
                image_id: "c".into(),
                lat: 0.5,
                lng: 1.5,
                timestamp: 0,
                score: 0.7,
            },
            DetectionRecord {
                image_id: "d".into(),
                lat: 9.0,
                lng: 9.0,
                timestamp: 0,
                score: 0.7,
            },
        ];
        let (counts, unassigned) = idx.assigned_counts(&recs, 0.5);
        assert_eq!(unassigned, 1);
        assert_eq!(counts["cbg-000-000"], (2, 1));
        assert_eq!(counts["cbg-000-001"], (1, 1));
    }
}
