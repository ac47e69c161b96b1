use super::Point2;

const SEGMENTS_PER_SPAN: usize = 8;
const CENTRIPETAL_ALPHA: f64 = 0.5;

/// Closed outline of a stroke of the given width following a centripetal
/// Catmull-Rom spline through the brow points.
///
/// The outline runs along the `+normal` side first and returns along the
/// `−normal` side. When consecutive points coincide the spline is undefined
/// and the stroke follows the straight polyline through the distinct points.
pub fn eyebrow_stroke(brow_points: &[Point2], width: f64) -> Vec<Point2> {
    let centre = if has_coincident(brow_points) {
        let mut pts: Vec<Point2> = Vec::with_capacity(brow_points.len());
        for &p in brow_points {
            if pts.last().is_none_or(|q| q.distance(p) > 1e-9) {
                pts.push(p);
            }
        }
        pts
    } else {
        catmull_rom(brow_points, SEGMENTS_PER_SPAN)
    };
    offset_outline(&centre, width / 2.0)
}

fn has_coincident(points: &[Point2]) -> bool {
    points.windows(2).any(|w| w[0].distance(w[1]) <= 1e-9)
}

fn lerp(a: Point2, b: Point2, ta: f64, tb: f64, t: f64) -> Point2 {
    let u = (t - ta) / (tb - ta);
    Point2::new(a.x + (b.x - a.x) * u, a.y + (b.y - a.y) * u)
}

/// Samples the interpolating spline with `segments` pieces per span. End
/// tangents come from reflected phantom points.
pub(crate) fn catmull_rom(points: &[Point2], segments: usize) -> Vec<Point2> {
    let n = points.len();
    if n < 2 {
        return points.to_vec();
    }
    let reflect = |a: Point2, b: Point2| Point2::new(2.0 * a.x - b.x, 2.0 * a.y - b.y);
    let mut ext = Vec::with_capacity(n + 2);
    ext.push(reflect(points[0], points[1]));
    ext.extend_from_slice(points);
    ext.push(reflect(points[n - 1], points[n - 2]));

    let mut out = Vec::with_capacity((n - 1) * segments + 1);
    for span in 0..n - 1 {
        let [p0, p1, p2, p3] = [ext[span], ext[span + 1], ext[span + 2], ext[span + 3]];
        let t0 = 0.0;
        let t1 = t0 + p0.distance(p1).powf(CENTRIPETAL_ALPHA);
        let t2 = t1 + p1.distance(p2).powf(CENTRIPETAL_ALPHA);
        let t3 = t2 + p2.distance(p3).powf(CENTRIPETAL_ALPHA);
        for s in 0..segments {
            let t = t1 + (t2 - t1) * s as f64 / segments as f64;
            let a1 = lerp(p0, p1, t0, t1, t);
            let a2 = lerp(p1, p2, t1, t2, t);
            let a3 = lerp(p2, p3, t2, t3, t);
            let b1 = lerp(a1, a2, t0, t2, t);
            let b2 = lerp(a2, a3, t1, t3, t);
            out.push(lerp(b1, b2, t1, t2, t));
        }
    }
    out.push(points[n - 1]);
    out
}

fn offset_outline(centre: &[Point2], half: f64) -> Vec<Point2> {
    let n = centre.len();
    if n < 2 {
        return centre.to_vec();
    }
    let normals: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let a = centre[i.saturating_sub(1)];
            let b = centre[(i + 1).min(n - 1)];
            let (tx, ty) = (b.x - a.x, b.y - a.y);
            let len = tx.hypot(ty);
            if len > 0.0 {
                (-ty / len, tx / len)
            } else {
                (0.0, 0.0)
            }
        })
        .collect();
    let side = |sign: f64, i: usize| {
        Point2::new(
            centre[i].x + sign * half * normals[i].0,
            centre[i].y + sign * half * normals[i].1,
        )
    };
    (0..n)
        .map(|i| side(1.0, i))
        .chain((0..n).rev().map(|i| side(-1.0, i)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shoelace(poly: &[Point2]) -> f64 {
        let n = poly.len();
        (0..n)
            .map(|i| {
                let (a, b) = (poly[i], poly[(i + 1) % n]);
                a.x * b.y - b.x * a.y
            })
            .sum::<f64>()
            .abs()
            / 2.0
    }

    fn arch() -> Vec<Point2> {
        vec![
            Point2::new(10.0, 30.0),
            Point2::new(20.0, 22.0),
            Point2::new(30.0, 20.0),
            Point2::new(40.0, 22.0),
            Point2::new(50.0, 30.0),
        ]
    }

    #[test]
    fn spline_interpolates_control_points() {
        let pts = arch();
        let curve = catmull_rom(&pts, SEGMENTS_PER_SPAN);
        assert_eq!(curve.len(), 4 * SEGMENTS_PER_SPAN + 1);
        for (k, p) in pts.iter().enumerate() {
            assert!(curve[k * SEGMENTS_PER_SPAN].distance(*p) < 1e-9);
        }
    }

    #[test]
    fn straight_brow_is_a_rectangle() {
        let pts: Vec<Point2> = (0..5).map(|i| Point2::new(5.0 + 10.0 * i as f64, 12.0)).collect();
        let w = 4.0;
        let area = shoelace(&eyebrow_stroke(&pts, w));
        let expected = 40.0 * w;
        assert!((area - expected).abs() / expected < 0.05, "area {area}");
    }

    #[test]
    fn zero_width_has_zero_area() {
        assert!(shoelace(&eyebrow_stroke(&arch(), 0.0)) < 1e-9);
        assert!(shoelace(&eyebrow_stroke(&arch(), 1e-6)) < 1e-3);
    }

    #[test]
    fn symmetric_arch_gives_symmetric_outline() {
        let outline = eyebrow_stroke(&arch(), 5.0);
        // every vertex has a mirror image about x = 30 within 1 px
        for p in &outline {
            let m = Point2::new(60.0 - p.x, p.y);
            let nearest = outline.iter().map(|q| q.distance(m)).fold(f64::INFINITY, f64::min);
            assert!(nearest < 1.0, "{p:?} has no mirror ({nearest})");
        }
    }

    #[test]
    fn coincident_points_fall_back_to_polyline() {
        let mut pts = arch();
        pts[2] = pts[1];
        let outline = eyebrow_stroke(&pts, 2.0);
        assert!(outline.iter().all(|p| p.is_finite()));
        // four distinct centre points, offset on both sides
        assert_eq!(outline.len(), 8);
    }
}
