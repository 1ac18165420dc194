//! Traffic topology scene graph: lanes, categories, connectivity, and the
//! spatial proximity matrix.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::numeric::Matrix;

pub type Point3 = [f64; 3];

/// Signal semantics attached to a lane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneCategory {
    Lane,
    GoStraight,
    TurnLeft,
    TurnRight,
    NoLeftTurn,
    NoRightTurn,
    UTurn,
    NoUTurn,
    SlightLeft,
    SlightRight,
}

impl LaneCategory {
    pub const COUNT: usize = 10;

    pub const ALL: [LaneCategory; Self::COUNT] = [
        LaneCategory::Lane,
        LaneCategory::GoStraight,
        LaneCategory::TurnLeft,
        LaneCategory::TurnRight,
        LaneCategory::NoLeftTurn,
        LaneCategory::NoRightTurn,
        LaneCategory::UTurn,
        LaneCategory::NoUTurn,
        LaneCategory::SlightLeft,
        LaneCategory::SlightRight,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).expect("listed")
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            LaneCategory::Lane => "lane",
            LaneCategory::GoStraight => "go_straight",
            LaneCategory::TurnLeft => "turn_left",
            LaneCategory::TurnRight => "turn_right",
            LaneCategory::NoLeftTurn => "no_left_turn",
            LaneCategory::NoRightTurn => "no_right_turn",
            LaneCategory::UTurn => "u_turn",
            LaneCategory::NoUTurn => "no_u_turn",
            LaneCategory::SlightLeft => "slight_left",
            LaneCategory::SlightRight => "slight_right",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|c| c.name() == s)
    }
}

impl fmt::Display for LaneCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Category of a traffic element: any lane signal, or a traffic light.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ElementCategory {
    Signal(LaneCategory),
    Red,
    Green,
    Yellow,
}

impl ElementCategory {
    pub fn is_light(self) -> bool {
        !matches!(self, ElementCategory::Signal(_))
    }

    pub fn name(self) -> &'static str {
        match self {
            ElementCategory::Signal(c) => c.name(),
            ElementCategory::Red => "red",
            ElementCategory::Green => "green",
            ElementCategory::Yellow => "yellow",
        }
    }
}

impl From<ElementCategory> for String {
    fn from(c: ElementCategory) -> String {
        c.name().to_string()
    }
}

impl TryFrom<String> for ElementCategory {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        match s.as_str() {
            "red" => Ok(ElementCategory::Red),
            "green" => Ok(ElementCategory::Green),
            "yellow" => Ok(ElementCategory::Yellow),
            other => LaneCategory::from_name(other)
                .map(ElementCategory::Signal)
                .ok_or_else(|| format!("unknown traffic element category `{other}`")),
        }
    }
}

/// Directed polyline along the middle of a lane, start to end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Centerline {
    points: Vec<Point3>,
}

impl Centerline {
    /// Fails when fewer than two points are given or all points coincide.
    pub fn new(points: Vec<Point3>) -> Result<Self, SceneError> {
        if points.len() < 2 {
            return Err(SceneError::TooFewPoints(points.len()));
        }
        if points.iter().all(|p| p == &points[0]) {
            return Err(SceneError::DegenerateCenterline);
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(SceneError::NonFinite);
        }
        Ok(Self { points })
    }

    /// Skips validation; used where degenerate inputs are tolerated
    /// (raw detector output, tests).
    pub fn from_points_unchecked(points: Vec<Point3>) -> Self {
        Self { points }
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn start(&self) -> Point3 {
        self.points[0]
    }

    pub fn end(&self) -> Point3 {
        self.points[self.points.len() - 1]
    }

    pub fn arc_length(&self) -> f64 {
        self.points.windows(2).map(|w| euclidean(w[0], w[1])).sum()
    }

    pub fn is_degenerate(&self) -> bool {
        self.points.len() < 2 || self.points.iter().all(|p| p == &self.points[0])
    }

    /// Resamples to `count` points equally spaced by arc length, keeping
    /// both endpoints.
    pub fn resample(&self, count: usize) -> Centerline {
        assert!(count >= 2, "resample needs at least two points");
        let mut cumulative = Vec::with_capacity(self.points.len());
        let mut acc = 0.0;
        cumulative.push(0.0);
        for w in self.points.windows(2) {
            acc += euclidean(w[0], w[1]);
            cumulative.push(acc);
        }
        let total = acc;
        let mut out = Vec::with_capacity(count);
        let mut seg = 0;
        for k in 0..count {
            if k == count - 1 {
                out.push(self.end());
                break;
            }
            let target = total * k as f64 / (count - 1) as f64;
            while seg + 1 < cumulative.len() - 1 && cumulative[seg + 1] < target {
                seg += 1;
            }
            let (a, b) = (self.points[seg], self.points[seg + 1]);
            let span = cumulative[seg + 1] - cumulative[seg];
            let t = if span > 0.0 { (target - cumulative[seg]) / span } else { 0.0 };
            out.push([
                a[0] + (b[0] - a[0]) * t,
                a[1] + (b[1] - a[1]) * t,
                a[2] + (b[2] - a[2]) * t,
            ]);
        }
        Centerline { points: out }
    }

    pub fn translated(&self, by: Point3) -> Centerline {
        Centerline {
            points: self
                .points
                .iter()
                .map(|p| [p[0] + by[0], p[1] + by[1], p[2] + by[2]])
                .collect(),
        }
    }

    /// Heading (radians, counter-clockwise from +x) of the first and last
    /// segments in the ground plane.
    pub fn end_headings(&self) -> (f64, f64) {
        let n = self.points.len();
        let h = |a: Point3, b: Point3| (b[1] - a[1]).atan2(b[0] - a[0]);
        (h(self.points[0], self.points[1]), h(self.points[n - 2], self.points[n - 1]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub category: LaneCategory,
    #[serde(rename = "points")]
    pub centerline: Centerline,
}

/// Lanes plus directed lane-to-lane connectivity.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SceneGraph {
    pub lanes: Vec<Lane>,
    pub edges: BTreeSet<(usize, usize)>,
}

impl SceneGraph {
    pub fn new(lanes: Vec<Lane>, edges: BTreeSet<(usize, usize)>) -> Self {
        Self { lanes, edges }
    }

    pub fn centerlines(&self) -> Vec<Centerline> {
        self.lanes.iter().map(|l| l.centerline.clone()).collect()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.contains(&(i, j))
    }

    /// Dense 0/1 adjacency matrix.
    pub fn adjacency(&self) -> Matrix {
        let n = self.lanes.len();
        let mut m = Matrix::zeros(n, n);
        for &(i, j) in &self.edges {
            if i < n && j < n {
                m.set(i, j, 1.0);
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficElement {
    /// Image-plane box `[x1, y1, x2, y2]`.
    pub bbox: [f64; 4],
    pub category: ElementCategory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    #[default]
    L1,
    L2,
}

impl DistanceMetric {
    pub fn eval(self, a: Point3, b: Point3) -> f64 {
        match self {
            DistanceMetric::L1 => (a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs(),
            DistanceMetric::L2 => euclidean(a, b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpmConfig {
    pub epsilon: f64,
    pub distance: DistanceMetric,
}

impl Default for SpmConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            distance: DistanceMetric::L1,
        }
    }
}

pub fn euclidean(a: Point3, b: Point3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Spatial proximity matrix: entry `(i, j)` is `1 / (d(end_i, start_j) + ε)`
/// divided by the mean of all N² such entries. The diagonal is kept.
pub fn spm(centerlines: &[Centerline], cfg: &SpmConfig) -> Matrix {
    let n = centerlines.len();
    let mut m = Matrix::from_fn(n, n, |i, j| {
        1.0 / (cfg.distance.eval(centerlines[i].end(), centerlines[j].start()) + cfg.epsilon)
    });
    let mean = m.mean();
    if mean > 0.0 {
        m.data_mut().iter_mut().for_each(|v| *v /= mean);
    }
    m
}

/// Edge `(i, j)` for every `i ≠ j` whose end-to-start Euclidean distance is
/// at most `tau`.
pub fn gt_connectivity(lanes: &[Lane], tau: f64) -> BTreeSet<(usize, usize)> {
    let mut edges = BTreeSet::new();
    for (i, a) in lanes.iter().enumerate() {
        for (j, b) in lanes.iter().enumerate() {
            if i != j && euclidean(a.centerline.end(), b.centerline.start()) <= tau {
                edges.insert((i, j));
            }
        }
    }
    edges
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    SelfLoop(usize),
    IndexOutOfRange { edge: (usize, usize), lanes: usize },
    DegenerateCenterline(usize),
    NonFiniteCoordinate(usize),
    PointCountMismatch { lane: usize, expected: usize, found: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::SelfLoop(i) => write!(f, "self-loop at {i}"),
            Violation::IndexOutOfRange { edge, lanes } => {
                write!(f, "edge ({}, {}) out of range for {lanes} lanes", edge.0, edge.1)
            }
            Violation::DegenerateCenterline(i) => write!(f, "lane {i} has a degenerate centerline"),
            Violation::NonFiniteCoordinate(i) => write!(f, "lane {i} has a non-finite coordinate"),
            Violation::PointCountMismatch {
                lane,
                expected,
                found,
            } => write!(f, "lane {lane} has {found} points, expected {expected}"),
        }
    }
}

/// Checks every structural invariant and reports all violations.
pub fn validate(graph: &SceneGraph) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    let n = graph.lanes.len();
    let expected = graph.lanes.first().map(|l| l.centerline.len());
    for (i, lane) in graph.lanes.iter().enumerate() {
        let c = &lane.centerline;
        if c.is_degenerate() {
            out.push(Violation::DegenerateCenterline(i));
        }
        if c.points().iter().flatten().any(|v| !v.is_finite()) {
            out.push(Violation::NonFiniteCoordinate(i));
        }
        if let Some(e) = expected {
            if c.len() != e {
                out.push(Violation::PointCountMismatch {
                    lane: i,
                    expected: e,
                    found: c.len(),
                });
            }
        }
    }
    for &(i, j) in &graph.edges {
        if i >= n || j >= n {
            out.push(Violation::IndexOutOfRange { edge: (i, j), lanes: n });
        } else if i == j {
            out.push(Violation::SelfLoop(i));
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SceneError {
    #[error("a centerline needs at least two points, got {0}")]
    TooFewPoints(usize),
    #[error("centerline points all coincide")]
    DegenerateCenterline,
    #[error("non-finite coordinate")]
    NonFinite,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(a: Point3, b: Point3) -> Centerline {
        Centerline::new(vec![a, b]).unwrap()
    }

    fn lane(a: Point3, b: Point3) -> Lane {
        Lane {
            category: LaneCategory::Lane,
            centerline: line(a, b),
        }
    }

    #[test]
    fn ten_categories_round_trip_by_index_and_name() {
        for (i, c) in LaneCategory::ALL.iter().enumerate() {
            assert_eq!(c.index(), i);
            assert_eq!(LaneCategory::from_name(c.name()), Some(*c));
        }
        assert_eq!(LaneCategory::from_index(10), None);
    }

    #[test]
    fn element_category_serializes_as_name() {
        let s = serde_json::to_string(&ElementCategory::Signal(LaneCategory::TurnLeft)).unwrap();
        assert_eq!(s, "\"turn_left\"");
        let c: ElementCategory = serde_json::from_str("\"yellow\"").unwrap();
        assert_eq!(c, ElementCategory::Yellow);
        assert!(serde_json::from_str::<ElementCategory>("\"purple\"").is_err());
    }

    #[test]
    fn centerline_rejects_degenerate_input() {
        assert_eq!(
            Centerline::new(vec![[1.0, 2.0, 0.0]; 3]),
            Err(SceneError::DegenerateCenterline)
        );
        assert_eq!(Centerline::new(vec![[0.0; 3]]), Err(SceneError::TooFewPoints(1)));
    }

    #[test]
    fn resample_spacing_is_uniform() {
        let c = Centerline::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 3.0, 0.0]]).unwrap();
        let r = c.resample(5);
        assert_eq!(r.len(), 5);
        assert_eq!(r.start(), [0.0, 0.0, 0.0]);
        assert_eq!(r.end(), [1.0, 3.0, 0.0]);
        assert!((r.points()[1][0] - 1.0).abs() < 1e-12 && r.points()[1][1].abs() < 1e-12);
        assert!((r.points()[2][1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spm_two_lane_hand_case() {
        let lines = [line([0.0; 3], [1.0, 0.0, 0.0]), line([2.0, 0.0, 0.0], [3.0, 0.0, 0.0])];
        let m = spm(&lines, &SpmConfig::default());
        // inverse distances (ε = 1e-6): 1/(1+ε), 1/(1+ε), 1/(3+ε), 1/(1+ε)
        let eps = 1e-6;
        let inv = [1.0 / (1.0 + eps), 1.0 / (1.0 + eps), 1.0 / (3.0 + eps), 1.0 / (1.0 + eps)];
        let mean = inv.iter().sum::<f64>() / 4.0;
        for (k, v) in m.data().iter().enumerate() {
            assert!((v - inv[k] / mean).abs() < 1e-15);
        }
        let expected = [1.2, 1.2, 0.4, 1.2];
        for (v, e) in m.data().iter().zip(expected) {
            assert!((v - e).abs() < 1e-6);
        }
    }

    #[test]
    fn spm_single_lane_is_one() {
        let m = spm(&[line([0.0; 3], [4.0, 1.0, 0.0])], &SpmConfig::default());
        assert_eq!(m.data(), &[1.0]);
    }

    #[test]
    fn spm_coincident_end_start_dominates_row() {
        let lines = [
            line([0.0; 3], [1.0, 0.0, 0.0]),
            line([1.0, 0.0, 0.0], [2.0, 0.0, 0.0]),
            line([9.0, 0.0, 0.0], [10.0, 0.0, 0.0]),
        ];
        let cfg = SpmConfig::default();
        let m = spm(&lines, &cfg);
        let row = m.row(0);
        assert!(row[1] > 1e4 * row[0] && row[1] > 1e4 * row[2]);
        let raw = 1.0 / cfg.epsilon;
        let mean = Matrix::from_fn(3, 3, |i, j| {
            1.0 / (cfg.distance.eval(lines[i].end(), lines[j].start()) + cfg.epsilon)
        })
        .mean();
        assert!((row[1] - raw / mean).abs() / row[1] < 1e-12);
    }

    #[test]
    fn connectivity_thresholds() {
        let lanes = vec![
            lane([0.0; 3], [5.0, 0.0, 0.0]),
            lane([5.0, 0.0, 0.0], [9.0, 0.0, 0.0]),
            lane([10.0, 0.0, 0.0], [12.0, 0.0, 0.0]),
        ];
        let e = gt_connectivity(&lanes, 0.5);
        assert_eq!(e, BTreeSet::from([(0, 1)]));
        assert!(gt_connectivity(&lanes, 0.25).contains(&(0, 1)));
        // lane 1 ends 1.0 (= 2τ) before lane 2 starts
        assert!(!e.contains(&(1, 2)));
    }

    #[test]
    fn validate_reports_every_violation() {
        let lanes = vec![lane([0.0; 3], [1.0, 0.0, 0.0]), lane([1.0, 0.0, 0.0], [2.0, 0.0, 0.0])];
        let ok = SceneGraph::new(lanes.clone(), BTreeSet::from([(0, 1)]));
        assert_eq!(validate(&ok), Ok(()));

        let bad = SceneGraph::new(lanes, BTreeSet::from([(1, 1), (0, 7)]));
        let v = validate(&bad).unwrap_err();
        assert_eq!(v.len(), 2);
        assert!(v.iter().any(|x| x.to_string() == "self-loop at 1"));
        assert!(v.iter().any(|x| matches!(x, Violation::IndexOutOfRange { .. })));
    }

    #[test]
    fn scene_graph_json_shape() {
        let g = SceneGraph::new(
            vec![lane([0.0; 3], [1.0, 0.0, 0.0])],
            BTreeSet::new(),
        );
        let v: serde_json::Value = serde_json::to_value(&g).unwrap();
        assert_eq!(v["lanes"][0]["category"], "lane");
        assert_eq!(v["lanes"][0]["points"][1][0], 1.0);
    }
}
