//! Footprint geometry in a local equirectangular projection.

use crate::domain::LonLat;

/// Mean Earth radius, metres.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;
pub const SQ_FT_PER_SQ_M: f64 = 10.763_910_416_709_722;

/// Vertex mean of the ring.
pub fn centroid(ring: &[LonLat]) -> LonLat {
    let n = ring.len() as f64;
    let (sx, sy) = ring.iter().fold((0.0, 0.0), |(sx, sy), &(x, y)| (sx + x, sy + y));
    (sx / n, sy / n)
}

/// Project lon/lat vertices to metres east/north of the ring centroid.
pub fn project_local(ring: &[LonLat]) -> Vec<(f64, f64)> {
    if ring.is_empty() {
        return Vec::new();
    }
    let (lon0, lat0) = centroid(ring);
    let kx = EARTH_RADIUS_M * lat0.to_radians().cos();
    ring.iter()
        .map(|&(lon, lat)| {
            (
                kx * (lon - lon0).to_radians(),
                EARTH_RADIUS_M * (lat - lat0).to_radians(),
            )
        })
        .collect()
}

/// Inverse of [`project_local`] about a given origin.
pub fn unproject(origin: LonLat, points: &[(f64, f64)]) -> Vec<LonLat> {
    let (lon0, lat0) = origin;
    let kx = EARTH_RADIUS_M * lat0.to_radians().cos();
    points
        .iter()
        .map(|&(x, y)| (lon0 + (x / kx).to_degrees(), lat0 + (y / EARTH_RADIUS_M).to_degrees()))
        .collect()
}

/// Shoelace area of an open planar ring, m².
pub fn planar_area(points: &[(f64, f64)]) -> f64 {
    let n = points.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let (x0, y0) = points[i];
            let (x1, y1) = points[(i + 1) % n];
            x0 * y1 - x1 * y0
        })
        .sum();
    twice.abs() / 2.0
}

pub fn planar_perimeter(points: &[(f64, f64)]) -> f64 {
    let n = points.len();
    if n < 2 {
        return 0.0;
    }
    (0..n)
        .map(|i| {
            let (x0, y0) = points[i];
            let (x1, y1) = points[(i + 1) % n];
            (x1 - x0).hypot(y1 - y0)
        })
        .sum()
}

/// Footprint area in m².
pub fn footprint_area_m2(ring: &[LonLat]) -> f64 {
    planar_area(&project_local(ring))
}

/// Footprint perimeter in m.
pub fn footprint_perimeter_m(ring: &[LonLat]) -> f64 {
    planar_perimeter(&project_local(ring))
}

/// Axis-aligned rectangle of the given size centred on `origin`.
pub fn rectangle(origin: LonLat, width_m: f64, depth_m: f64) -> Vec<LonLat> {
    let (hw, hd) = (width_m / 2.0, depth_m / 2.0);
    unproject(origin, &[(-hw, -hd), (hw, -hd), (hw, hd), (-hw, hd)])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_square_area_and_perimeter() {
        let sq = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        assert_eq!(planar_area(&sq), 1.0);
        assert_eq!(planar_perimeter(&sq), 4.0);
    }

    #[test]
    fn orientation_does_not_matter() {
        let cw = [(0.0, 0.0), (0.0, 2.0), (3.0, 2.0), (3.0, 0.0)];
        assert_eq!(planar_area(&cw), 6.0);
    }

    #[test]
    fn rectangle_round_trips_through_projection() {
        let r = rectangle((-75.22, 40.69), 10.0, 12.0);
        let a = footprint_area_m2(&r);
        let p = footprint_perimeter_m(&r);
        assert!((a - 120.0).abs() / 120.0 < 1e-9, "{a}");
        assert!((p - 44.0).abs() / 44.0 < 1e-9, "{p}");
    }

    #[test]
    fn degenerate_rings() {
        assert_eq!(planar_area(&[(0.0, 0.0), (1.0, 1.0)]), 0.0);
        assert_eq!(planar_area(&[(0.0, 0.0), (1.0, 1.0), (2.0, 2.0)]), 0.0);
    }
}
