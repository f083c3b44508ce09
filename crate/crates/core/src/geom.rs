//! Planar geometry for census polygons.
//!
//! Containment runs directly on longitude/latitude degrees. At city scale
//! the planar approximation is fine; this is not meant for polygons spanning
//! large latitude ranges or crossing the antimeridian.
//!
//! Containment uses the even-odd rule with one deliberate refinement: a
//! point exactly on a ring edge or vertex counts as contained. Boundary
//! points are otherwise ambiguous under ray casting, and assignment needs a
//! deterministic answer for detections sitting on shared CBG edges (the
//! caller breaks those ties by smallest id).

/// A position in WGS84 degrees: `x` is longitude, `y` is latitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }
}

/// Axis-aligned bounding box; `contains` is inclusive on all edges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl BoundingBox {
    pub fn of(points: impl IntoIterator<Item = Point>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let mut bb = BoundingBox {
            min_x: first.x,
            min_y: first.y,
            max_x: first.x,
            max_y: first.y,
        };
        for p in it {
            bb.min_x = bb.min_x.min(p.x);
            bb.min_y = bb.min_y.min(p.y);
            bb.max_x = bb.max_x.max(p.x);
            bb.max_y = bb.max_y.max(p.y);
        }
        Some(bb)
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.min_x && p.x <= self.max_x && p.y >= self.min_y && p.y <= self.max_y
    }

    pub fn union(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox {
            min_x: self.min_x.min(other.min_x),
            min_y: self.min_y.min(other.min_y),
            max_x: self.max_x.max(other.max_x),
            max_y: self.max_y.max(other.max_y),
        }
    }

    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    pub fn center(&self) -> Point {
        Point::new(
            (self.min_x + self.max_x) / 2.0,
            (self.min_y + self.max_y) / 2.0,
        )
    }
}

/// A closed linear ring in GeoJSON style: at least four positions with the
/// last repeating the first.
#[derive(Debug, Clone, PartialEq)]
pub struct Ring(pub Vec<Point>);

impl Ring {
    /// Edges as (start, end) pairs; the closing duplicate contributes no
    /// extra edge.
    fn edges(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        self.0.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let pts = &self.0;
        if pts.len() < 4 {
            return Err(format!(
                "ring has {} positions; a closed ring needs at least 4",
                pts.len()
            ));
        }
        for p in pts {
            if !p.x.is_finite() || !p.y.is_finite() {
                return Err("ring contains a non-finite coordinate".into());
            }
        }
        if pts[0] != pts[pts.len() - 1] {
            return Err("ring is not closed (first position != last)".into());
        }
        let n = pts.len() - 1; // number of edges
        for i in 0..n {
            if pts[i] == pts[i + 1] {
                return Err("ring has a zero-length edge (repeated position)".into());
            }
        }
        // Pairwise check of non-adjacent edges. Quadratic, but census rings
        // are small and validation happens once per load.
        for i in 0..n {
            for j in (i + 1)..n {
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                if adjacent {
                    continue;
                }
                let (a, b) = (pts[i], pts[i + 1]);
                let (c, d) = (pts[j], pts[j + 1]);
                if segments_intersect(a, b, c, d) {
                    return Err(format!(
                        "ring is self-intersecting (edges {} and {} cross)",
                        i, j
                    ));
                }
            }
        }
        Ok(())
    }
}

/// One exterior ring plus optional interior rings (holes). Even-odd
/// containment means holes need no special casing: a point inside a hole
/// crosses both rings an odd number of times each, netting even.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    pub exterior: Ring,
    pub holes: Vec<Ring>,
}

impl Polygon {
    pub fn rings(&self) -> impl Iterator<Item = &Ring> {
        std::iter::once(&self.exterior).chain(self.holes.iter())
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        for (i, ring) in self.rings().enumerate() {
            ring.validate()
                .map_err(|e| if i == 0 { e } else { format!("hole {}: {}", i - 1, e) })?;
        }
        Ok(())
    }

    pub fn bounding_box(&self) -> BoundingBox {
        // A validated ring always has points, so unwrap is safe after
        // validation; fall back to a degenerate box otherwise.
        BoundingBox::of(self.exterior.0.iter().copied()).unwrap_or(BoundingBox {
            min_x: 0.0,
            min_y: 0.0,
            max_x: 0.0,
            max_y: 0.0,
        })
    }

    pub fn contains(&self, p: Point) -> bool {
        for ring in self.rings() {
            for (a, b) in ring.edges() {
                if point_on_segment(p, a, b) {
                    return true;
                }
            }
        }
        let mut inside = false;
        for ring in self.rings() {
            for (a, b) in ring.edges() {
                // Half-open rule on y so shared vertices are counted once.
                if (a.y > p.y) != (b.y > p.y) {
                    let t = (p.y - a.y) / (b.y - a.y);
                    let x_at = a.x + t * (b.x - a.x);
                    if x_at > p.x {
                        inside = !inside;
                    }
                }
            }
        }
        inside
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiPolygon(pub Vec<Polygon>);

impl MultiPolygon {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.0.is_empty() {
            return Err("multipolygon has no polygons".into());
        }
        for (i, poly) in self.0.iter().enumerate() {
            poly.validate().map_err(|e| format!("polygon {}: {}", i, e))?;
        }
        Ok(())
    }

    pub fn bounding_box(&self) -> BoundingBox {
        let mut it = self.0.iter().map(|p| p.bounding_box());
        let first = it.next().unwrap_or(BoundingBox {
            min_x: 0.0,
            min_y: 0.0,
            max_x: 0.0,
            max_y: 0.0,
        });
        it.fold(first, |acc, bb| acc.union(&bb))
    }

    pub fn contains(&self, p: Point) -> bool {
        self.0.iter().any(|poly| poly.contains(p))
    }

    /// Convenience constructor for an axis-aligned rectangle.
    pub fn rect(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Self {
        MultiPolygon(vec![Polygon {
            exterior: Ring(vec![
                Point::new(min_x, min_y),
                Point::new(max_x, min_y),
                Point::new(max_x, max_y),
                Point::new(min_x, max_y),
                Point::new(min_x, min_y),
            ]),
            holes: Vec::new(),
        }])
    }
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

/// True when `p` lies exactly on segment ab (collinear and within bounds).
pub fn point_on_segment(p: Point, a: Point, b: Point) -> bool {
    if orient(a, b, p) != 0.0 {
        return false;
    }
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

/// Segment intersection including improper touches and collinear overlap;
/// used only by ring validation, where any contact between non-adjacent
/// edges is illegal.
fn segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool {
    let o1 = orient(a, b, c);
    let o2 = orient(a, b, d);
    let o3 = orient(c, d, a);
    let o4 = orient(c, d, b);

    if ((o1 > 0.0 && o2 < 0.0) || (o1 < 0.0 && o2 > 0.0))
        && ((o3 > 0.0 && o4 < 0.0) || (o3 < 0.0 && o4 > 0.0))
    {
        return true;
    }
    (o1 == 0.0 && point_on_segment(c, a, b))
        || (o2 == 0.0 && point_on_segment(d, a, b))
        || (o3 == 0.0 && point_on_segment(a, c, d))
        || (o4 == 0.0 && point_on_segment(b, c, d))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_square() -> MultiPolygon {
        MultiPolygon::rect(0.0, 0.0, 1.0, 1.0)
    }

    #[test]
    fn interior_and_exterior_points() {
        let sq = unit_square();
        assert!(sq.contains(Point::new(0.5, 0.5)));
        assert!(!sq.contains(Point::new(1.5, 0.5)));
        assert!(!sq.contains(Point::new(-0.1, 0.5)));
        assert!(!sq.contains(Point::new(0.5, 2.0)));
    }

    #[test]
    fn boundary_points_count_as_contained() {
        let sq = unit_square();
        assert!(sq.contains(Point::new(0.0, 0.5))); // edge
        assert!(sq.contains(Point::new(0.0, 0.0))); // vertex
        assert!(sq.contains(Point::new(0.5, 1.0))); // top edge
        assert!(sq.contains(Point::new(1.0, 1.0))); // far corner
    }

    #[test]
    fn hole_is_excluded_but_its_boundary_is_not() {
        let poly = Polygon {
            exterior: Ring(vec![
                Point::new(0.0, 0.0),
                Point::new(4.0, 0.0),
                Point::new(4.0, 4.0),
                Point::new(0.0, 4.0),
                Point::new(0.0, 0.0),
            ]),
            holes: vec![Ring(vec![
                Point::new(1.0, 1.0),
                Point::new(3.0, 1.0),
                Point::new(3.0, 3.0),
                Point::new(1.0, 3.0),
                Point::new(1.0, 1.0),
            ])],
        };
        let mp = MultiPolygon(vec![poly]);
        assert!(mp.contains(Point::new(0.5, 0.5)));
        assert!(!mp.contains(Point::new(2.0, 2.0))); // inside the hole
        assert!(mp.contains(Point::new(1.0, 2.0))); // on the hole boundary
        assert!(mp.contains(Point::new(3.5, 2.0)));
    }

    #[test]
    fn concave_polygon() {
        // L-shape: the notch is outside.
        let poly = Polygon {
            exterior: Ring(vec![
                Point::new(0.0, 0.0),
                Point::new(3.0, 0.0),
                Point::new(3.0, 1.0),
                Point::new(1.0, 1.0),
                Point::new(1.0, 3.0),
                Point::new(0.0, 3.0),
                Point::new(0.0, 0.0),
            ]),
            holes: Vec::new(),
        };
        assert!(poly.contains(Point::new(0.5, 2.5)));
        assert!(poly.contains(Point::new(2.5, 0.5)));
        assert!(!poly.contains(Point::new(2.0, 2.0))); // in the notch
    }

    #[test]
    fn ray_through_vertex_is_counted_once() {
        // Diamond whose left/right vertices are at the query's y.
        let poly = Polygon {
            exterior: Ring(vec![
                Point::new(0.0, 0.0),
                Point::new(1.0, -1.0),
                Point::new(2.0, 0.0),
                Point::new(1.0, 1.0),
                Point::new(0.0, 0.0),
            ]),
            holes: Vec::new(),
        };
        assert!(poly.contains(Point::new(1.0, 0.0)));
        assert!(!poly.contains(Point::new(-0.5, 0.0)));
        assert!(!poly.contains(Point::new(2.5, 0.0)));
    }

    #[test]
    fn validation_rejects_open_and_tiny_rings() {
        let open = Ring(vec![
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            Point::new(1.0, 1.0),
            Point::new(0.0, 1.0),
        ]);
        assert!(open.validate().unwrap_err().contains("not closed"));

        let tiny = Ring(vec![
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            Point::new(0.0, 0.0),
        ]);
        assert!(tiny.validate().unwrap_err().contains("at least 4"));
    }

    #[test]
    fn validation_rejects_self_intersection() {
        // Bowtie.
        let bow = Ring(vec![
            Point::new(0.0, 0.0),
            Point::new(2.0, 2.0),
            Point::new(2.0, 0.0),
            Point::new(0.0, 2.0),
            Point::new(0.0, 0.0),
        ]);
        assert!(bow.validate().unwrap_err().contains("self-intersecting"));
    }

    #[test]
    fn validation_rejects_nonfinite() {
        let bad = Ring(vec![
            Point::new(0.0, 0.0),
            Point::new(f64::NAN, 0.0),
            Point::new(1.0, 1.0),
            Point::new(0.0, 0.0),
        ]);
        assert!(bad.validate().unwrap_err().contains("non-finite"));
    }

    #[test]
    fn validation_accepts_square_and_lshape() {
        assert!(unit_square().validate().is_ok());
        let l = Ring(vec![
            Point::new(0.0, 0.0),
            Point::new(3.0, 0.0),
            Point::new(3.0, 1.0),
            Point::new(1.0, 1.0),
            Point::new(1.0, 3.0),
            Point::new(0.0, 3.0),
            Point::new(0.0, 0.0),
        ]);
        assert!(l.validate().is_ok());
    }
}
