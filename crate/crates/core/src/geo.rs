//! Spherical geodesy primitives.
//!
//! Distances use the haversine formula on a sphere of radius
//! [`EARTH_RADIUS_M`]. Inside a single polyline segment the engine switches to
//! a local equirectangular frame scaled at the segment's mid latitude, which
//! keeps projection error well below a meter at walking scale.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius used by every distance computation in the crate.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Douglas–Peucker tolerance used when reconstructing a walked path.
pub const DEFAULT_SIMPLIFY_TOLERANCE_M: f64 = 5.0;

/// Exact header of a GPS trace CSV file.
pub const TRACE_CSV_HEADER: [&str; 4] = ["ts_ms", "lat_deg", "lon_deg", "accuracy_m"];

const METERS_PER_DEGREE: f64 = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("coordinate out of range: lat {lat}, lon {lon}")]
    InvalidCoordinate { lat: f64, lon: f64 },
    #[error("projection window [{start}, {end}] does not intersect the line")]
    EmptyWindow { start: f64, end: f64 },
    #[error("geofence radius must be positive, got {0}")]
    NonPositiveRadius(f64),
    #[error("simplification tolerance must be non-negative, got {0}")]
    InvalidTolerance(f64),
    #[error("insufficient data: need at least {needed} distinct points, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("fix timestamps must strictly increase (offending index {index})")]
    NonMonotonicTimestamps { index: usize },
    #[error("trace csv: {0}")]
    Csv(String),
}

/// A WGS84 coordinate in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        let p = Self { lat, lon };
        if p.is_valid() {
            Ok(p)
        } else {
            Err(GeoError::InvalidCoordinate { lat, lon })
        }
    }

    pub fn is_valid(&self) -> bool {
        self.lat.is_finite()
            && self.lon.is_finite()
            && (-90.0..=90.0).contains(&self.lat)
            && (-180.0..=180.0).contains(&self.lon)
    }
}

/// A single timestamped position sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpsFix {
    #[serde(flatten)]
    pub point: GeoPoint,
    pub ts_ms: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy_m: Option<f64>,
}

impl GpsFix {
    pub fn new(point: GeoPoint, ts_ms: i64) -> Self {
        Self {
            point,
            ts_ms,
            accuracy_m: None,
        }
    }
}

/// Great-circle distance in meters.
pub fn haversine_distance(a: GeoPoint, b: GeoPoint) -> f64 {
    let lat1 = a.lat.to_radians();
    let lat2 = b.lat.to_radians();
    let dlat = (b.lat - a.lat).to_radians();
    let dlon = wrap_lon(b.lon - a.lon).to_radians();

    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.min(1.0).sqrt().asin()
}

/// Initial bearing from `a` to `b`, degrees clockwise from north in `[0, 360)`.
pub fn initial_bearing_deg(a: GeoPoint, b: GeoPoint) -> f64 {
    let lat1 = a.lat.to_radians();
    let lat2 = b.lat.to_radians();
    let dlon = wrap_lon(b.lon - a.lon).to_radians();
    let y = dlon.sin() * lat2.cos();
    let x = lat1.cos() * lat2.sin() - lat1.sin() * lat2.cos() * dlon.cos();
    y.atan2(x).to_degrees().rem_euclid(360.0)
}

/// Point reached by travelling `distance_m` from `origin` on the given bearing.
pub fn destination_point(origin: GeoPoint, bearing_deg: f64, distance_m: f64) -> GeoPoint {
    let delta = distance_m / EARTH_RADIUS_M;
    let theta = bearing_deg.to_radians();
    let lat1 = origin.lat.to_radians();
    let lon1 = origin.lon.to_radians();

    let lat2 = (lat1.sin() * delta.cos() + lat1.cos() * delta.sin() * theta.cos()).asin();
    let lon2 = lon1
        + (theta.sin() * delta.sin() * lat1.cos()).atan2(delta.cos() - lat1.sin() * lat2.sin());
    GeoPoint {
        lat: lat2.to_degrees(),
        lon: wrap_lon(lon2.to_degrees()),
    }
}

/// True iff `p` lies within `radius_m` of `center` (boundary inclusive).
pub fn within_geofence(p: GeoPoint, center: GeoPoint, radius_m: f64) -> Result<bool, GeoError> {
    if !(radius_m > 0.0) {
        return Err(GeoError::NonPositiveRadius(radius_m));
    }
    Ok(haversine_distance(p, center) <= radius_m)
}

fn wrap_lon(d: f64) -> f64 {
    if (-180.0..=180.0).contains(&d) {
        d
    } else {
        (d + 180.0).rem_euclid(360.0) - 180.0
    }
}

/// Equirectangular tangent frame: meters east/north of an origin.
#[derive(Debug, Clone, Copy)]
pub struct LocalFrame {
    origin: GeoPoint,
    cos_lat: f64,
}

impl LocalFrame {
    pub fn new(origin: GeoPoint, scale_lat: f64) -> Self {
        Self {
            origin,
            cos_lat: scale_lat.to_radians().cos(),
        }
    }

    pub fn at(origin: GeoPoint) -> Self {
        Self::new(origin, origin.lat)
    }

    pub fn to_xy(&self, p: GeoPoint) -> (f64, f64) {
        (
            wrap_lon(p.lon - self.origin.lon) * self.cos_lat * METERS_PER_DEGREE,
            (p.lat - self.origin.lat) * METERS_PER_DEGREE,
        )
    }

    pub fn from_xy(&self, x: f64, y: f64) -> GeoPoint {
        GeoPoint {
            lat: self.origin.lat + y / METERS_PER_DEGREE,
            lon: wrap_lon(self.origin.lon + x / (self.cos_lat * METERS_PER_DEGREE)),
        }
    }
}

/// Closest point of segment `a`-`b` to `p` as `(t, distance_m)`, with `t`
/// restricted to `[t_lo, t_hi]`.
fn project_on_segment(p: GeoPoint, a: GeoPoint, b: GeoPoint, t_lo: f64, t_hi: f64) -> (f64, f64) {
    let frame = LocalFrame::new(a, (a.lat + b.lat) / 2.0);
    let (bx, by) = frame.to_xy(b);
    let (px, py) = frame.to_xy(p);
    let len_sq = bx * bx + by * by;
    let t = if len_sq > 0.0 {
        ((px * bx + py * by) / len_sq).clamp(t_lo, t_hi)
    } else {
        t_lo
    };
    let (dx, dy) = (px - t * bx, py - t * by);
    (t, (dx * dx + dy * dy).sqrt())
}

/// An ordered path with cached cumulative distances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<GeoPoint>", into = "Vec<GeoPoint>")]
pub struct Polyline {
    vertices: Vec<GeoPoint>,
    cumulative: Vec<f64>,
}

impl Polyline {
    /// Builds a polyline, dropping consecutive duplicate vertices.
    pub fn new(vertices: Vec<GeoPoint>) -> Result<Self, GeoError> {
        let mut deduped: Vec<GeoPoint> = Vec::with_capacity(vertices.len());
        for v in vertices {
            if !v.is_valid() {
                return Err(GeoError::InvalidCoordinate { lat: v.lat, lon: v.lon });
            }
            if deduped.last() != Some(&v) {
                deduped.push(v);
            }
        }
        if deduped.len() < 2 {
            return Err(GeoError::InsufficientData {
                needed: 2,
                got: deduped.len(),
            });
        }
        let mut cumulative = Vec::with_capacity(deduped.len());
        let mut acc = 0.0;
        cumulative.push(acc);
        for w in deduped.windows(2) {
            acc += haversine_distance(w[0], w[1]);
            cumulative.push(acc);
        }
        Ok(Self {
            vertices: deduped,
            cumulative,
        })
    }

    pub fn vertices(&self) -> &[GeoPoint] {
        &self.vertices
    }

    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().expect("polyline has >= 2 vertices")
    }

    pub fn segment_count(&self) -> usize {
        self.vertices.len() - 1
    }

    pub fn full_window(&self) -> AlongWindow {
        AlongWindow::new(0.0, self.length())
    }

    /// Index of the segment containing `along_m` (clamped to the line).
    pub fn segment_at(&self, along_m: f64) -> usize {
        let along = along_m.clamp(0.0, self.length());
        let idx = self.cumulative.partition_point(|&c| c <= along);
        idx.saturating_sub(1).min(self.segment_count() - 1)
    }

    /// Point at `along_m` meters from the start (clamped to the line).
    pub fn point_at(&self, along_m: f64) -> GeoPoint {
        let along = along_m.clamp(0.0, self.length());
        let i = self.segment_at(along);
        let (a, b) = (self.vertices[i], self.vertices[i + 1]);
        let seg = self.cumulative[i + 1] - self.cumulative[i];
        let t = if seg > 0.0 {
            ((along - self.cumulative[i]) / seg).clamp(0.0, 1.0)
        } else {
            0.0
        };
        GeoPoint {
            lat: a.lat + t * (b.lat - a.lat),
            lon: a.lon + t * wrap_lon(b.lon - a.lon),
        }
    }

    /// Bearing of the segment containing `along_m`.
    pub fn bearing_at(&self, along_m: f64) -> f64 {
        let i = self.segment_at(along_m);
        initial_bearing_deg(self.vertices[i], self.vertices[i + 1])
    }

    /// Replaces one vertex and rebuilds the cached distances.
    pub fn with_vertex(&self, index: usize, to: GeoPoint) -> Result<Self, GeoError> {
        let mut vertices = self.vertices.clone();
        if let Some(v) = vertices.get_mut(index) {
            *v = to;
        }
        Self::new(vertices)
    }
}

impl TryFrom<Vec<GeoPoint>> for Polyline {
    type Error = GeoError;

    fn try_from(v: Vec<GeoPoint>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<Polyline> for Vec<GeoPoint> {
    fn from(p: Polyline) -> Self {
        p.vertices
    }
}

/// Closed along-track interval `[start, end]` in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlongWindow {
    pub start: f64,
    pub end: f64,
}

impl AlongWindow {
    pub fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    pub fn around(center: f64, half_width: f64) -> Self {
        Self::new(center - half_width, center + half_width)
    }
}

/// Position of a point relative to a polyline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPosition {
    pub segment_index: usize,
    pub along_track: f64,
    pub cross_track: f64,
}

/// Projects `p` onto the part of `line` covered by `window`.
///
/// Among all segments overlapping the window, the one with the smallest
/// cross-track distance wins (earliest on ties). The result never leaves the
/// window, so a nearer lobe of a self-crossing path outside it is ignored.
pub fn project_onto_polyline(
    p: GeoPoint,
    line: &Polyline,
    window: AlongWindow,
) -> Result<ProjectedPosition, GeoError> {
    let ws = window.start.max(0.0);
    let we = window.end.min(line.length());
    if !(ws <= we) {
        return Err(GeoError::EmptyWindow {
            start: window.start,
            end: window.end,
        });
    }

    let mut best: Option<ProjectedPosition> = None;
    for i in 0..line.segment_count() {
        let (c0, c1) = (line.cumulative[i], line.cumulative[i + 1]);
        if c1 < ws || c0 > we {
            continue;
        }
        let seg = c1 - c0;
        let (t_lo, t_hi) = if seg > 0.0 {
            (((ws - c0) / seg).clamp(0.0, 1.0), ((we - c0) / seg).clamp(0.0, 1.0))
        } else {
            (0.0, 0.0)
        };
        let (t, cross) = project_on_segment(p, line.vertices[i], line.vertices[i + 1], t_lo, t_hi);
        if best.is_none_or(|b| cross < b.cross_track) {
            best = Some(ProjectedPosition {
                segment_index: i,
                along_track: (c0 + t * seg).clamp(ws, we),
                cross_track: cross,
            });
        }
    }
    best.ok_or(GeoError::EmptyWindow {
        start: window.start,
        end: window.end,
    })
}

/// Douglas–Peucker simplification of a raw GPS trace.
///
/// Endpoints are always kept and every input fix ends up within `tolerance_m`
/// of the output line.
pub fn simplify_trace(fixes: &[GpsFix], tolerance_m: f64) -> Result<Polyline, GeoError> {
    if !(tolerance_m >= 0.0) {
        return Err(GeoError::InvalidTolerance(tolerance_m));
    }
    if fixes.len() < 2 {
        return Err(GeoError::InsufficientData {
            needed: 2,
            got: fixes.len(),
        });
    }
    check_monotonic(fixes)?;

    let pts: Vec<GeoPoint> = fixes.iter().map(|f| f.point).collect();
    let last = pts.len() - 1;
    let mut keep = vec![false; pts.len()];
    keep[0] = true;
    keep[last] = true;

    let mut stack = vec![(0usize, last)];
    while let Some((first, end)) = stack.pop() {
        if end <= first + 1 {
            continue;
        }
        let (mut max_d, mut max_i) = (-1.0, first);
        for (i, &p) in pts.iter().enumerate().take(end).skip(first + 1) {
            let (_, d) = project_on_segment(p, pts[first], pts[end], 0.0, 1.0);
            if d > max_d {
                max_d = d;
                max_i = i;
            }
        }
        if max_d > tolerance_m {
            keep[max_i] = true;
            stack.push((first, max_i));
            stack.push((max_i, end));
        }
    }

    Polyline::new(
        pts.into_iter()
            .zip(keep)
            .filter_map(|(p, k)| k.then_some(p))
            .collect(),
    )
}

fn check_monotonic(fixes: &[GpsFix]) -> Result<(), GeoError> {
    for (i, w) in fixes.windows(2).enumerate() {
        if w[1].ts_ms <= w[0].ts_ms {
            return Err(GeoError::NonMonotonicTimestamps { index: i + 1 });
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct TraceRow {
    ts_ms: i64,
    lat_deg: f64,
    lon_deg: f64,
    accuracy_m: Option<f64>,
}

/// Reads a trace CSV (`ts_ms,lat_deg,lon_deg,accuracy_m`).
pub fn read_trace_csv<R: Read>(reader: R) -> Result<Vec<GpsFix>, GeoError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| GeoError::Csv(e.to_string()))?;
    if headers.iter().ne(TRACE_CSV_HEADER.iter().copied()) {
        return Err(GeoError::Csv(format!(
            "expected header `{}`, found `{}`",
            TRACE_CSV_HEADER.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut fixes = Vec::new();
    for row in rdr.deserialize::<TraceRow>() {
        let row = row.map_err(|e| GeoError::Csv(e.to_string()))?;
        fixes.push(GpsFix {
            point: GeoPoint::new(row.lat_deg, row.lon_deg)?,
            ts_ms: row.ts_ms,
            accuracy_m: row.accuracy_m,
        });
    }
    check_monotonic(&fixes)?;
    Ok(fixes)
}

pub fn write_trace_csv<W: Write>(writer: W, fixes: &[GpsFix]) -> Result<(), GeoError> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    let err = |e: csv::Error| GeoError::Csv(e.to_string());
    wtr.write_record(TRACE_CSV_HEADER).map_err(err)?;
    for f in fixes {
        wtr.serialize(TraceRow {
            ts_ms: f.ts_ms,
            lat_deg: f.point.lat,
            lon_deg: f.point.lon,
            accuracy_m: f.accuracy_m,
        })
        .map_err(err)?;
    }
    wtr.flush().map_err(|e| GeoError::Csv(e.to_string()))
}

pub fn trace_to_csv_string(fixes: &[GpsFix]) -> String {
    let mut buf = Vec::new();
    write_trace_csv(&mut buf, fixes).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("csv output is utf-8")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint { lat, lon }
    }

    fn fix(ts: i64, p: GeoPoint) -> GpsFix {
        GpsFix::new(p, ts)
    }

    /// Independent spherical-law-of-cosines distance.
    fn cosine_law(a: GeoPoint, b: GeoPoint) -> f64 {
        let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
        let dl = (b.lon - a.lon).to_radians();
        let c = (p1.sin() * p2.sin() + p1.cos() * p2.cos() * dl.cos()).clamp(-1.0, 1.0);
        EARTH_RADIUS_M * c.acos()
    }

    #[test]
    fn identical_points_are_zero_apart() {
        let p = pt(52.02, 8.5325);
        assert_eq!(haversine_distance(p, p), 0.0);
    }

    #[test]
    fn hundredth_degree_of_latitude() {
        let expected = EARTH_RADIUS_M * 0.01 * std::f64::consts::PI / 180.0;
        let d = haversine_distance(pt(52.02, 8.5325), pt(52.03, 8.5325));
        assert!((d - expected).abs() < 1e-6, "{d} vs {expected}");
        assert!((d - 1111.95).abs() < 0.01);
        assert!((d - cosine_law(pt(52.02, 8.5325), pt(52.03, 8.5325))).abs() < 1e-3);
        assert_eq!(d, haversine_distance(pt(52.03, 8.5325), pt(52.02, 8.5325)));
    }

    #[test]
    fn coordinate_validation() {
        assert!(GeoPoint::new(90.0, 180.0).is_ok());
        assert!(GeoPoint::new(90.1, 0.0).is_err());
        assert!(GeoPoint::new(0.0, -180.5).is_err());
        assert!(GeoPoint::new(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn geofence_boundaries() {
        let c = pt(52.02, 8.5325);
        assert!(within_geofence(c, c, 25.0).unwrap());
        assert!(!within_geofence(pt(52.03, 8.5325), c, 25.0).unwrap());
        let edge = pt(52.03, 8.5325);
        let r = haversine_distance(edge, c);
        assert!(within_geofence(edge, c, r).unwrap());
        assert_eq!(within_geofence(c, c, 0.0), Err(GeoError::NonPositiveRadius(0.0)));
        assert!(within_geofence(c, c, -3.0).is_err());
    }

    #[test]
    fn projection_on_vertex() {
        let line = Polyline::new(vec![pt(52.0, 8.0), pt(52.001, 8.0), pt(52.001, 8.002)]).unwrap();
        let p = project_onto_polyline(line.vertices()[1], &line, line.full_window()).unwrap();
        assert!(p.cross_track < 1e-9);
        assert!((p.along_track - line.cumulative()[1]).abs() < 1e-9);
    }

    #[test]
    fn projection_perpendicular_offset() {
        // east-west segment; offset 30 m north of its midpoint using meters-per-degree
        let line = Polyline::new(vec![pt(52.0, 8.0), pt(52.0, 8.004)]).unwrap();
        let mid = pt(52.0, 8.002);
        let off = pt(mid.lat + 30.0 / METERS_PER_DEGREE, mid.lon);
        let p = project_onto_polyline(off, &line, line.full_window()).unwrap();
        assert!((p.cross_track - 30.0).abs() < 0.3, "{}", p.cross_track);
        assert!((p.along_track - line.length() / 2.0).abs() < 0.5);
    }

    #[test]
    fn projection_respects_window() {
        let line = Polyline::new(vec![pt(52.0, 8.0), pt(52.0, 8.01)]).unwrap();
        let w = AlongWindow::new(100.0, 200.0);
        let p = project_onto_polyline(line.vertices()[0], &line, w).unwrap();
        assert!((p.along_track - 100.0).abs() < 1e-6);
        assert!((p.cross_track - 100.0).abs() < 0.1);
        let err = project_onto_polyline(line.vertices()[0], &line, AlongWindow::new(5.0, 1.0));
        assert!(matches!(err, Err(GeoError::EmptyWindow { .. })));
        let outside = AlongWindow::new(line.length() + 10.0, line.length() + 20.0);
        assert!(project_onto_polyline(line.vertices()[0], &line, outside).is_err());
    }

    #[test]
    fn point_at_and_segment_at() {
        let line = Polyline::new(vec![pt(52.0, 8.0), pt(52.001, 8.0), pt(52.001, 8.002)]).unwrap();
        assert_eq!(line.segment_at(0.0), 0);
        assert_eq!(line.segment_at(line.length()), 1);
        assert_eq!(line.point_at(line.length()), line.vertices()[2]);
        assert_eq!(line.point_at(-5.0), line.vertices()[0]);
        let mid = line.point_at(line.cumulative()[1] / 2.0);
        assert!((mid.lat - 52.0005).abs() < 1e-9);
    }

    #[test]
    fn polyline_drops_duplicates_and_rejects_degenerate() {
        let line = Polyline::new(vec![pt(1.0, 1.0), pt(1.0, 1.0), pt(1.0, 1.001)]).unwrap();
        assert_eq!(line.vertices().len(), 2);
        assert!(Polyline::new(vec![pt(1.0, 1.0), pt(1.0, 1.0)]).is_err());
        assert!(Polyline::new(vec![pt(1.0, 1.0)]).is_err());
    }

    #[test]
    fn simplify_collinear_collapses() {
        let fixes = vec![
            fix(0, pt(52.0, 8.0)),
            fix(1000, pt(52.0005, 8.0)),
            fix(2000, pt(52.001, 8.0)),
        ];
        let line = simplify_trace(&fixes, 5.0).unwrap();
        assert_eq!(line.vertices().len(), 2);
    }

    #[test]
    fn simplify_keeps_corner() {
        let fixes = vec![
            fix(0, pt(52.0, 8.0)),
            fix(1000, pt(52.001, 8.0)),
            fix(2000, pt(52.001, 8.0015)),
        ];
        let line = simplify_trace(&fixes, 5.0).unwrap();
        assert_eq!(line.vertices().len(), 3);
        assert_eq!(line.vertices()[1], pt(52.001, 8.0));
    }

    #[test]
    fn simplify_identical_interior() {
        let a = pt(52.0, 8.0);
        let b = pt(52.0 + 1.0 / METERS_PER_DEGREE, 8.0);
        let fixes = vec![fix(0, a), fix(1, a), fix(2, a), fix(3, a), fix(4, b)];
        let line = simplify_trace(&fixes, 5.0).unwrap();
        assert_eq!(line.vertices(), &[a, b]);
    }

    #[test]
    fn simplify_errors() {
        assert!(matches!(
            simplify_trace(&[fix(0, pt(1.0, 1.0))], 5.0),
            Err(GeoError::InsufficientData { .. })
        ));
        let fixes = vec![fix(5, pt(1.0, 1.0)), fix(5, pt(1.0, 1.001))];
        assert_eq!(
            simplify_trace(&fixes, 5.0),
            Err(GeoError::NonMonotonicTimestamps { index: 1 })
        );
        let fixes = vec![fix(0, pt(1.0, 1.0)), fix(5, pt(1.0, 1.001))];
        assert!(simplify_trace(&fixes, -1.0).is_err());
    }

    #[test]
    fn destination_and_bearing_agree() {
        let o = pt(52.0, 8.0);
        let d = destination_point(o, 90.0, 500.0);
        assert!((haversine_distance(o, d) - 500.0).abs() < 1e-6);
        assert!((initial_bearing_deg(o, d) - 90.0).abs() < 1e-6);
    }

    #[test]
    fn local_frame_round_trip() {
        let f = LocalFrame::at(pt(52.0, 8.0));
        let p = f.from_xy(120.0, -40.0);
        let (x, y) = f.to_xy(p);
        assert!((x - 120.0).abs() < 1e-9 && (y + 40.0).abs() < 1e-9);
    }

    #[test]
    fn trace_csv_round_trip_and_header() {
        let fixes = vec![
            GpsFix {
                point: pt(52.02, 8.5325),
                ts_ms: 1000,
                accuracy_m: Some(4.5),
            },
            fix(2000, pt(52.0201, 8.5326)),
        ];
        let text = trace_to_csv_string(&fixes);
        assert!(text.starts_with("ts_ms,lat_deg,lon_deg,accuracy_m\n"));
        assert!(text.contains("2000,52.0201,8.5326,\n"));
        assert_eq!(read_trace_csv(text.as_bytes()).unwrap(), fixes);

        let bad = "ts,lat,lon,acc\n1,2,3,\n";
        assert!(matches!(read_trace_csv(bad.as_bytes()), Err(GeoError::Csv(_))));
        let unordered = "ts_ms,lat_deg,lon_deg,accuracy_m\n2,1,1,\n1,1,1,\n";
        assert!(read_trace_csv(unordered.as_bytes()).is_err());
    }

    #[test]
    fn polyline_serde_is_vertex_list() {
        let line = Polyline::new(vec![pt(1.0, 2.0), pt(1.5, 2.5)]).unwrap();
        let json = serde_json::to_string(&line).unwrap();
        assert_eq!(json, r#"[{"lat":1.0,"lon":2.0},{"lat":1.5,"lon":2.5}]"#);
        let back: Polyline = serde_json::from_str(&json).unwrap();
        assert_eq!(back, line);
        assert!(serde_json::from_str::<Polyline>(r#"[{"lat":1.0,"lon":2.0}]"#).is_err());
    }
}
