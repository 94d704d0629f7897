//! Convex polygon clipping on a fixed-capacity vertex buffer.

pub(crate) type Point = [f64; 2];

/// Intersecting two quadrilaterals yields at most eight vertices; the extra
/// room absorbs duplicated vertices from near-parallel edges.
const CAPACITY: usize = 16;

#[derive(Clone, Copy)]
pub(crate) struct ConvexPolygon {
    pts: [Point; CAPACITY],
    len: usize,
}

impl ConvexPolygon {
    pub fn from_slice(points: &[Point]) -> Self {
        let mut poly = ConvexPolygon {
            pts: [[0.0; 2]; CAPACITY],
            len: 0,
        };
        for p in points {
            poly.push(*p);
        }
        poly
    }

    fn push(&mut self, p: Point) {
        if self.len < CAPACITY {
            self.pts[self.len] = p;
            self.len += 1;
        }
    }

    pub fn points(&self) -> &[Point] {
        &self.pts[..self.len]
    }

    /// Signed shoelace area, positive for counterclockwise order.
    pub fn signed_area(&self) -> f64 {
        shoelace(self.points())
    }

    /// Sutherland–Hodgman: clips `self` against every edge of the
    /// counterclockwise convex polygon `clip`.
    pub fn clip(&self, clip: &ConvexPolygon) -> ConvexPolygon {
        let mut output = *self;
        let c = clip.points();
        for i in 0..c.len() {
            if output.len == 0 {
                break;
            }
            let a = c[i];
            let b = c[(i + 1) % c.len()];
            let input = output;
            output.len = 0;
            let pts = input.points();
            let mut prev = pts[pts.len() - 1];
            let mut prev_side = side(a, b, prev);
            for &cur in pts {
                let cur_side = side(a, b, cur);
                if cur_side >= 0.0 {
                    if prev_side < 0.0 {
                        output.push(intersect(prev, cur, prev_side, cur_side));
                    }
                    output.push(cur);
                } else if prev_side >= 0.0 {
                    output.push(intersect(prev, cur, prev_side, cur_side));
                }
                prev = cur;
                prev_side = cur_side;
            }
        }
        output
    }
}

/// Positive when `p` lies left of the directed line `a → b`.
fn side(a: Point, b: Point, p: Point) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

fn intersect(p: Point, q: Point, sp: f64, sq: f64) -> Point {
    let t = sp / (sp - sq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

pub(crate) fn shoelace(points: &[Point]) -> f64 {
    let n = points.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let p = points[i];
        let q = points[(i + 1) % n];
        acc += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * acc
}
