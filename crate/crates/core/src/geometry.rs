//! Planar helpers for PQ-plane regions.

pub type Point = (f64, f64);

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Convex hull by monotone chain, counter-clockwise, no collinear points.
/// Degenerate inputs return one or two points.
pub fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts: Vec<Point> = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Point> = Vec::with_capacity(2 * pts.len());
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Signed shoelace area (positive for counter-clockwise).
pub fn signed_area(poly: &[Point]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        acc += a.0 * b.1 - b.0 * a.1;
    }
    0.5 * acc
}

pub fn area(poly: &[Point]) -> f64 {
    signed_area(poly).abs()
}

pub fn centroid(poly: &[Point]) -> Point {
    let a = signed_area(poly);
    if a == 0.0 {
        let n = poly.len() as f64;
        let (sx, sy) = poly.iter().fold((0.0, 0.0), |(x, y), p| (x + p.0, y + p.1));
        return (sx / n, sy / n);
    }
    let (mut cx, mut cy) = (0.0, 0.0);
    for i in 0..poly.len() {
        let (p, q) = (poly[i], poly[(i + 1) % poly.len()]);
        let w = p.0 * q.1 - q.0 * p.1;
        cx += (p.0 + q.0) * w;
        cy += (p.1 + q.1) * w;
    }
    (cx / (6.0 * a), cy / (6.0 * a))
}

/// Sutherland–Hodgman clip of `subject` against the convex CCW polygon `clip`.
pub fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        if a == b {
            continue;
        }
        let input = std::mem::take(&mut out);
        let inside = |p: Point| cross(a, b, p) >= 0.0;
        let intersect = |p: Point, q: Point| {
            let (cp, cq) = (cross(a, b, p), cross(a, b, q));
            let t = cp / (cp - cq);
            (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
        };
        for j in 0..input.len() {
            let (cur, prev) = (input[j], input[(j + input.len() - 1) % input.len()]);
            match (inside(cur), inside(prev)) {
                (true, true) => out.push(cur),
                (true, false) => {
                    out.push(intersect(prev, cur));
                    out.push(cur);
                }
                (false, true) => out.push(intersect(prev, cur)),
                (false, false) => {}
            }
        }
    }
    out
}

pub fn distance_to_segment(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    (p.0 - (a.0 + t * dx)).hypot(p.1 - (a.1 + t * dy))
}

pub fn distance_to_boundary(poly: &[Point], p: Point) -> f64 {
    (0..poly.len())
        .map(|i| distance_to_segment(p, poly[i], poly[(i + 1) % poly.len()]))
        .fold(f64::INFINITY, f64::min)
}

/// Even–odd ray crossing test; boundary points may land either way.
pub fn point_in_polygon(poly: &[Point], p: Point) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + n - 1) % n]);
        if (a.1 > p.1) != (b.1 > p.1) {
            let x = a.0 + (p.1 - a.1) / (b.1 - a.1) * (b.0 - a.0);
            if p.0 < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Distance from `p` to the filled polygon (zero inside).
pub fn distance_to_region(poly: &[Point], p: Point) -> f64 {
    if poly.len() >= 3 && point_in_polygon(poly, p) {
        0.0
    } else {
        distance_to_boundary(poly, p)
    }
}

/// Hausdorff distance between two filled convex polygons. For convex
/// regions the supremum is attained at a vertex of one of them.
pub fn hausdorff(a: &[Point], b: &[Point]) -> f64 {
    let one_way = |from: &[Point], to: &[Point]| {
        from.iter().map(|&p| distance_to_region(to, p)).fold(0.0, f64::max)
    };
    one_way(a, b).max(one_way(b, a))
}

pub fn diameter(points: &[Point]) -> f64 {
    let mut d: f64 = 0.0;
    for (i, p) in points.iter().enumerate() {
        for q in &points[i + 1..] {
            d = d.max((p.0 - q.0).hypot(p.1 - q.1));
        }
    }
    d
}
