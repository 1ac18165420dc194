//! Top-down SVG drawings of scene graphs.

use std::fmt::Write;

use t2sg::eval::{match_instances, PredLane};
use t2sg::scene::{Lane, Point3};

use crate::commands::T2sgFile;

const PX_PER_M: f64 = 8.0;
const MARGIN: f64 = 24.0;

pub const NEUTRAL: &str = "#444444";
pub const CORRECT: &str = "#1a9641";
pub const WRONG: &str = "#d7191c";
pub const MISSED: &str = "#2b83ba";

struct Canvas {
    half_x: f64,
    half_y: f64,
    body: String,
}

impl Canvas {
    fn new(file: &T2sgFile) -> Self {
        Self {
            half_x: file.extent.x_range / 2.0,
            half_y: file.extent.y_range / 2.0,
            body: String::new(),
        }
    }

    /// BEV meters to pixels, y up.
    fn px(&self, p: Point3) -> (f64, f64) {
        (
            MARGIN + (p[0] + self.half_x) * PX_PER_M,
            MARGIN + (self.half_y - p[1]) * PX_PER_M,
        )
    }

    fn lane(&mut self, lane: &Lane, color: &str, label: &str) {
        let pts: Vec<String> = lane
            .centerline
            .points()
            .iter()
            .map(|&p| {
                let (x, y) = self.px(p);
                format!("{x:.1},{y:.1}")
            })
            .collect();
        let _ = writeln!(
            self.body,
            r#"<polyline class="lane" points="{}" fill="none" stroke="{color}" stroke-width="2" marker-end="url(#arrow-{})"/>"#,
            pts.join(" "),
            color.trim_start_matches('#')
        );
        let pts = lane.centerline.points();
        let (x, y) = self.px(pts[pts.len() / 2]);
        let _ = writeln!(
            self.body,
            r#"<text x="{:.1}" y="{:.1}" font-size="9" font-family="sans-serif" fill="{color}">{label}</text>"#,
            x + 3.0,
            y - 3.0
        );
    }

    /// Connector from the end of `from` to the start of `to`, bowed
    /// sideways so that touching endpoints stay visible.
    fn connector(&mut self, from: &Lane, to: &Lane, color: &str) {
        let (x1, y1) = self.px(from.centerline.end());
        let (x2, y2) = self.px(to.centerline.start());
        let (mx, my) = ((x1 + x2) / 2.0, (y1 + y2) / 2.0);
        let (dx, dy) = (x2 - x1, y2 - y1);
        let len = dx.hypot(dy);
        let (cx, cy) = if len > 1e-9 {
            (mx - dy / len * 10.0, my + dx / len * 10.0)
        } else {
            (mx + 10.0, my - 10.0)
        };
        let _ = writeln!(
            self.body,
            r#"<path class="edge" d="M{x1:.1},{y1:.1} Q{cx:.1},{cy:.1} {x2:.1},{y2:.1}" fill="none" stroke="{color}" stroke-width="1.2" stroke-dasharray="4 3"/>"#
        );
    }

    fn finish(self, title: &str, legend: &[(&str, &str)]) -> String {
        let w = 2.0 * MARGIN + 2.0 * self.half_x * PX_PER_M;
        let h = 2.0 * MARGIN + 2.0 * self.half_y * PX_PER_M;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}">"#
        );
        s.push_str("<defs>\n");
        for color in [NEUTRAL, CORRECT, WRONG, MISSED] {
            let _ = writeln!(
                s,
                r#"<marker id="arrow-{}" viewBox="0 0 10 10" refX="9" refY="5" markerWidth="6" markerHeight="6" orient="auto-start-reverse"><path d="M0,0 L10,5 L0,10 z" fill="{color}"/></marker>"#,
                color.trim_start_matches('#')
            );
        }
        s.push_str("</defs>\n");
        let _ = writeln!(
            s,
            r##"<rect x="{MARGIN}" y="{MARGIN}" width="{:.0}" height="{:.0}" fill="#fafafa" stroke="#cccccc"/>"##,
            w - 2.0 * MARGIN,
            h - 2.0 * MARGIN
        );
        let _ = writeln!(
            s,
            r#"<text x="{MARGIN}" y="16" font-size="12" font-family="sans-serif">{}</text>"#,
            escape(title)
        );
        for (k, (color, text)) in legend.iter().enumerate() {
            let x = w - MARGIN - 110.0;
            let y = 16.0 + 12.0 * k as f64;
            let _ = writeln!(
                s,
                r#"<text x="{x:.0}" y="{y:.0}" font-size="10" font-family="sans-serif" fill="{color}">{text}</text>"#
            );
        }
        s.push_str(&self.body);
        s.push_str("</svg>\n");
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn label(i: usize, lane: &Lane) -> String {
    format!("{i}:{}", lane.category.name())
}

/// Lanes as arrows from start to end, labeled with their category; edges as
/// dashed connectors.
pub fn scene_svg(file: &T2sgFile) -> String {
    let mut c = Canvas::new(file);
    let lanes = &file.graph.lanes;
    for &(a, b) in &file.graph.edges {
        c.connector(&lanes[a], &lanes[b], NEUTRAL);
    }
    for (i, lane) in lanes.iter().enumerate() {
        c.lane(lane, NEUTRAL, &label(i, lane));
    }
    c.finish(&file.scene_id, &[])
}

/// Color of every element of a prediction drawn over its ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Comparison {
    /// Per predicted lane: matched with the right category.
    pub lane_correct: Vec<bool>,
    /// Ground-truth lanes no prediction matched.
    pub missed_lanes: Vec<usize>,
    /// Predicted edges and whether the ground truth has them.
    pub edges: Vec<((usize, usize), bool)>,
    /// Ground-truth edges absent from the prediction.
    pub missed_edges: Vec<(usize, usize)>,
}

pub fn compare(pred: &T2sgFile, truth: &T2sgFile, threshold: f64) -> Comparison {
    let pl: Vec<PredLane> = pred
        .graph
        .lanes
        .iter()
        .zip(&pred.confidences)
        .map(|(l, &confidence)| PredLane {
            centerline: l.centerline.clone(),
            category: l.category,
            confidence,
        })
        .collect();
    let gt = &truth.graph;
    let m = match_instances(&pl, &gt.lanes, threshold);
    let mut gt_of = vec![None; pl.len()];
    for &(p, g) in &m.pairs {
        gt_of[p] = Some(g);
    }
    let pred_of = m.pred_of_gt(gt.lanes.len());
    let lane_correct = (0..pl.len())
        .map(|p| gt_of[p].is_some_and(|g| gt.lanes[g].category == pl[p].category))
        .collect();
    let edges = pred
        .graph
        .edges
        .iter()
        .map(|&(a, b)| {
            let ok = matches!((gt_of[a], gt_of[b]), (Some(g), Some(h)) if gt.has_edge(g, h));
            ((a, b), ok)
        })
        .collect();
    let missed_edges = gt
        .edges
        .iter()
        .copied()
        .filter(|&(g, h)| !matches!((pred_of[g], pred_of[h]), (Some(a), Some(b)) if pred.graph.has_edge(a, b)))
        .collect();
    Comparison {
        lane_correct,
        missed_lanes: m.unmatched_gt.clone(),
        edges,
        missed_edges,
    }
}

/// Prediction over ground truth: green correct, red erroneous, blue missed.
pub fn compare_svg(pred: &T2sgFile, truth: &T2sgFile, threshold: f64) -> String {
    let cmp = compare(pred, truth, threshold);
    let mut c = Canvas::new(truth);
    let (pl, gl) = (&pred.graph.lanes, &truth.graph.lanes);
    for &(g, h) in &cmp.missed_edges {
        c.connector(&gl[g], &gl[h], MISSED);
    }
    for &((a, b), ok) in &cmp.edges {
        c.connector(&pl[a], &pl[b], if ok { CORRECT } else { WRONG });
    }
    for &g in &cmp.missed_lanes {
        c.lane(&gl[g], MISSED, &label(g, &gl[g]));
    }
    for (i, lane) in pl.iter().enumerate() {
        c.lane(lane, if cmp.lane_correct[i] { CORRECT } else { WRONG }, &label(i, lane));
    }
    c.finish(
        &format!("{} (prediction vs. ground truth)", truth.scene_id),
        &[(CORRECT, "correct"), (WRONG, "erroneous"), (MISSED, "missed")],
    )
}
