use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{split_seed, ScenarioKind, ScenarioSpec, SpecError};
use crate::scene::{Centerline, Lane, LaneCategory, Point3, SceneGraph};

const LANE_WIDTH: f64 = 3.5;
const CURVE_SAMPLES: usize = 64;

/// Category implied by the heading change of a connector, in degrees
/// (positive is counter-clockwise, i.e. a left turn).
pub fn heading_category(delta_deg: f64) -> LaneCategory {
    let a = delta_deg.abs();
    let left = delta_deg > 0.0;
    if a <= 10.0 {
        LaneCategory::GoStraight
    } else if a <= 45.0 {
        if left {
            LaneCategory::SlightLeft
        } else {
            LaneCategory::SlightRight
        }
    } else if a <= 150.0 {
        if left {
            LaneCategory::TurnLeft
        } else {
            LaneCategory::TurnRight
        }
    } else {
        LaneCategory::UTurn
    }
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    } else if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

fn dir(h: f64) -> [f64; 2] {
    [h.cos(), h.sin()]
}

fn add2(a: [f64; 2], b: [f64; 2], s: f64) -> [f64; 2] {
    [a[0] + b[0] * s, a[1] + b[1] * s]
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn cubic(p: [[f64; 2]; 4], t: f64) -> [f64; 2] {
    let u = 1.0 - t;
    let w = [u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t];
    let mut out = [0.0; 2];
    for k in 0..4 {
        out[0] += w[k] * p[k][0];
        out[1] += w[k] * p[k][1];
    }
    out
}

/// Cubic curve leaving `p0` along heading `h0` and arriving at `p3` along
/// heading `h3`.
fn connector(p0: [f64; 2], h0: f64, p3: [f64; 2], h3: f64) -> Vec<[f64; 2]> {
    let reach = (0.4 * dist2(p0, p3)).max(4.0);
    let ctrl = [p0, add2(p0, dir(h0), reach), add2(p3, dir(h3), -reach), p3];
    (0..CURVE_SAMPLES)
        .map(|k| cubic(ctrl, k as f64 / (CURVE_SAMPLES - 1) as f64))
        .collect()
}

struct Builder<'a> {
    spec: &'a ScenarioSpec,
    lanes: Vec<Lane>,
}

impl Builder<'_> {
    fn push(&mut self, category: LaneCategory, pts: &[[f64; 2]]) -> usize {
        let raw: Vec<Point3> = pts.iter().map(|p| [p[0], p[1], 0.0]).collect();
        let c = Centerline::from_points_unchecked(raw).resample(self.spec.points_per_lane);
        let pts = c
            .points()
            .iter()
            .map(|p| [p[0], p[1], self.spec.z_slope * p[0]])
            .collect();
        self.lanes.push(Lane {
            category,
            centerline: Centerline::from_points_unchecked(pts),
        });
        self.lanes.len() - 1
    }
}

fn base_angles(kind: ScenarioKind) -> Vec<f64> {
    let k = match kind {
        ScenarioKind::Straight => return Vec::new(),
        ScenarioKind::TJunction => return vec![0.0, PI / 2.0, PI],
        ScenarioKind::Crossroad => 4,
        ScenarioKind::Multiway(k) => k as usize,
    };
    (0..k).map(|i| 2.0 * PI * i as f64 / k as f64).collect()
}

/// Ground-truth scene for `spec`. The declared edges are exactly the
/// end-to-start contacts the layout creates.
pub fn generate_scene(spec: &ScenarioSpec) -> Result<SceneGraph, SpecError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(spec.seed, 1));
    let mut b = Builder {
        spec,
        lanes: Vec::new(),
    };
    let mut edges = BTreeSet::new();
    let half = spec.bev_extent.x_range.min(spec.bev_extent.y_range) / 2.0;
    let rotation = rng.random_range(0.0..2.0 * PI);
    let m = spec.lanes_per_arm;

    if spec.kind == ScenarioKind::Straight {
        let lengths: Vec<f64> = (0..spec.segments).map(|_| rng.random_range(12.0..22.0)).collect();
        let total: f64 = lengths.iter().sum();
        let reach = half - 2.0 - LANE_WIDTH * m as f64;
        if reach <= 0.0 {
            return Err(SpecError::ExtentTooSmall);
        }
        let shrink = (2.0 * reach / total).min(1.0);
        let along = dir(rotation);
        let normal = [along[1], -along[0]];
        for j in 0..m {
            let offset = LANE_WIDTH * (j as f64 - (m as f64 - 1.0) / 2.0);
            let mut s = -total * shrink / 2.0;
            let mut prev: Option<usize> = None;
            for (k, len) in lengths.iter().enumerate() {
                let a = add2(add2([0.0, 0.0], along, s), normal, offset);
                s += len * shrink;
                let e = add2(add2([0.0, 0.0], along, s), normal, offset);
                // The last segment carries the chain's go-straight sign.
                let category = if k + 1 == lengths.len() {
                    LaneCategory::GoStraight
                } else {
                    LaneCategory::Lane
                };
                let id = b.push(category, &[a, e]);
                if let Some(p) = prev {
                    edges.insert((p, id));
                }
                prev = Some(id);
            }
        }
        return Ok(SceneGraph::new(b.lanes, edges));
    }

    let angles: Vec<f64> = base_angles(spec.kind)
        .into_iter()
        .map(|a| a + rotation + rng.random_range(-4f64..4.0).to_radians())
        .collect();
    let k = angles.len();
    let road_half = LANE_WIDTH * m as f64;
    let radius = (road_half * 1.5 / (PI / k as f64).tan()).max(9.0) + rng.random_range(0.0..2.0);
    let center: [f64; 2] = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
    let max_len = half - radius - 4.0 - center[0].abs().max(center[1].abs());
    if max_len < 5.0 {
        return Err(SpecError::ExtentTooSmall);
    }
    let arm_len: Vec<f64> = (0..k)
        .map(|_| rng.random_range(18.0..26.0f64).min(max_len))
        .collect();

    // incoming[a][j], outgoing[a][j]: (lane id, endpoint at the junction)
    let mut incoming = vec![Vec::new(); k];
    let mut outgoing = vec![Vec::new(); k];
    for (a, &phi) in angles.iter().enumerate() {
        let u = dir(phi);
        let n_in = [-u[1], u[0]];
        for j in 0..m {
            let o = LANE_WIDTH * (j as f64 + 0.5);
            let inner = add2(add2(center, u, radius), n_in, o);
            let outer = add2(add2(center, u, radius + arm_len[a]), n_in, o);
            let id = b.push(LaneCategory::Lane, &[outer, inner]);
            incoming[a].push((id, inner));
        }
    }
    for (a, &phi) in angles.iter().enumerate() {
        let u = dir(phi);
        let n_out = [u[1], -u[0]];
        for j in 0..m {
            let o = LANE_WIDTH * (j as f64 + 0.5);
            let inner = add2(add2(center, u, radius), n_out, o);
            let outer = add2(add2(center, u, radius + arm_len[a]), n_out, o);
            let id = b.push(LaneCategory::Lane, &[inner, outer]);
            outgoing[a].push((id, inner));
        }
    }
    for a in 0..k {
        for t in 0..k {
            if t == a && !spec.allow_u_turns {
                continue;
            }
            let h0 = angles[a] + PI;
            let h3 = angles[t];
            let delta = wrap_angle(h3 - h0).to_degrees();
            // a u-turn back onto the same arm has a heading change of ±180°
            let delta = if t == a { 180.0 } else { delta };
            for j in 0..m {
                let (in_id, p0) = incoming[a][j];
                let (out_id, p3) = outgoing[t][j];
                let pts = connector(p0, h0, p3, h3);
                let id = b.push(heading_category(delta), &pts);
                edges.insert((in_id, id));
                edges.insert((id, out_id));
            }
        }
    }
    Ok(SceneGraph::new(b.lanes, edges))
}
