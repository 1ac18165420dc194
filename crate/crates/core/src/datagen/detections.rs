use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{split_seed, BevExtent, ScenarioSpec, SpecError};
use crate::numeric::Matrix;
use crate::scene::{Centerline, ElementCategory, LaneCategory, Point3, SceneGraph, TrafficElement};

/// Default seed of the fixed projection that turns centerlines into query
/// features. Every sample of a dataset shares it.
pub const FEATURE_SEED: u64 = 0x7A5E_ED00;

/// What the relation model sees for one scene, plus the ground truth it is
/// scored against.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSample {
    pub scene_id: String,
    /// Ground truth.
    pub scene: SceneGraph,
    /// Ground-truth traffic elements.
    pub traffic_elements: Vec<TrafficElement>,
    pub extent: BevExtent,
    /// One row per query (N × feature_dim).
    pub queries: Matrix,
    /// Detected centerline per query.
    pub pred_centerlines: Vec<Centerline>,
    /// Ground-truth lane index per query; `None` for background.
    pub assignment: Vec<Option<usize>>,
    /// Detected traffic elements with their confidences.
    pub detected_elements: Vec<(TrafficElement, f64)>,
    pub feature_seed: u64,
}

impl DetectionSample {
    pub fn num_queries(&self) -> usize {
        self.pred_centerlines.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.queries.cols()
    }

    pub fn points_per_lane(&self) -> usize {
        self.pred_centerlines.first().map_or(0, Centerline::len)
    }

    /// Query index assigned to each ground-truth lane.
    pub fn query_of_lane(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.scene.lanes.len()];
        for (q, a) in self.assignment.iter().enumerate() {
            if let Some(g) = a {
                out[*g] = Some(q);
            }
        }
        out
    }
}

/// Fixed random linear projection of normalized, flattened centerline
/// coordinates to `dim` features per query.
pub fn query_features(
    centerlines: &[Centerline],
    extent: &BevExtent,
    feature_seed: u64,
    dim: usize,
) -> Matrix {
    let width = centerlines.first().map_or(0, |c| 3 * c.len());
    let mut rng = ChaCha8Rng::seed_from_u64(feature_seed);
    let scale = 2.0 / (width.max(1) as f64).sqrt();
    let proj = Matrix::from_fn(width, dim, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * scale
    });
    let flat = Matrix::from_fn(centerlines.len(), width, |r, c| {
        let p = extent.normalize(centerlines[r].points()[c / 3]);
        p[c % 3] - 0.5
    });
    flat.matmul(&proj).expect("projection shape")
}

fn random_distractor(rng: &mut impl Rng, extent: &BevExtent, points: usize) -> Centerline {
    let hx = extent.x_range / 2.0 * 0.85;
    let hy = extent.y_range / 2.0 * 0.85;
    loop {
        let start = [rng.random_range(-hx..hx), rng.random_range(-hy..hy)];
        let heading = rng.random_range(0.0..2.0 * PI);
        let length = rng.random_range(8.0..20.0);
        let bow = rng.random_range(-3.0..3.0);
        let d = [heading.cos(), heading.sin()];
        let n = [-d[1], d[0]];
        let end = [start[0] + d[0] * length, start[1] + d[1] * length];
        let ctrl = [
            (start[0] + end[0]) / 2.0 + n[0] * bow,
            (start[1] + end[1]) / 2.0 + n[1] * bow,
        ];
        let raw: Vec<Point3> = (0..32)
            .map(|k| {
                let t = k as f64 / 31.0;
                let u = 1.0 - t;
                [
                    u * u * start[0] + 2.0 * u * t * ctrl[0] + t * t * end[0],
                    u * u * start[1] + 2.0 * u * t * ctrl[1] + t * t * end[1],
                    0.0,
                ]
            })
            .collect();
        let c = Centerline::from_points_unchecked(raw).resample(points);
        if c.points().iter().all(|&p| extent.contains(p)) {
            return c;
        }
    }
}

fn random_bbox(rng: &mut impl Rng) -> [f64; 4] {
    let x = rng.random_range(0.0..1800.0);
    let y = rng.random_range(0.0..1300.0);
    let w = rng.random_range(30.0..120.0);
    let h = rng.random_range(30.0..120.0);
    [x, y, x + w, y + h]
}

/// Ground-truth traffic elements: one sign per distinct signal category
/// present in the scene, plus at most one traffic light.
fn scene_elements(scene: &SceneGraph, rng: &mut impl Rng) -> Vec<TrafficElement> {
    let mut seen: Vec<LaneCategory> = Vec::new();
    for lane in &scene.lanes {
        if lane.category != LaneCategory::Lane && !seen.contains(&lane.category) {
            seen.push(lane.category);
        }
    }
    let mut out: Vec<TrafficElement> = seen
        .into_iter()
        .map(|c| TrafficElement {
            bbox: random_bbox(rng),
            category: ElementCategory::Signal(c),
        })
        .collect();
    if !scene.lanes.is_empty() && rng.random_bool(0.5) {
        let light = [ElementCategory::Red, ElementCategory::Green, ElementCategory::Yellow]
            [rng.random_range(0..3)];
        out.push(TrafficElement {
            bbox: random_bbox(rng),
            category: light,
        });
    }
    out
}

/// Simulated detector output for `scene`: a noisy copy of every lane
/// (i.i.d. Gaussian per coordinate), `distractor_count` background
/// centerlines, and projected query features. Queries `0..lanes` map to the
/// ground-truth lanes in order; the distractors follow.
pub fn perturb_detections(scene: &SceneGraph, spec: &ScenarioSpec) -> Result<DetectionSample, SpecError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(spec.seed, 2));
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|_| SpecError::Invalid("noise_sigma"))?;
    let mut pred = Vec::with_capacity(scene.lanes.len() + spec.distractor_count);
    let mut assignment = Vec::with_capacity(pred.capacity());
    for (g, lane) in scene.lanes.iter().enumerate() {
        let pts = lane
            .centerline
            .points()
            .iter()
            .map(|p| {
                if spec.noise_sigma > 0.0 {
                    [
                        p[0] + noise.sample(&mut rng),
                        p[1] + noise.sample(&mut rng),
                        p[2] + noise.sample(&mut rng),
                    ]
                } else {
                    *p
                }
            })
            .collect();
        pred.push(Centerline::from_points_unchecked(pts));
        assignment.push(Some(g));
    }
    let points = scene
        .lanes
        .first()
        .map_or(spec.points_per_lane, |l| l.centerline.len());
    for _ in 0..spec.distractor_count {
        pred.push(random_distractor(&mut rng, &spec.bev_extent, points));
        assignment.push(None);
    }

    let mut te_rng = ChaCha8Rng::seed_from_u64(split_seed(spec.seed, 3));
    let elements = scene_elements(scene, &mut te_rng);
    let box_noise = Normal::new(0.0, spec.element_bbox_sigma)
        .map_err(|_| SpecError::Invalid("element_bbox_sigma"))?;
    let detected = elements
        .iter()
        .map(|e| {
            let mut bbox = e.bbox;
            if spec.element_bbox_sigma > 0.0 {
                bbox.iter_mut().for_each(|v| *v += box_noise.sample(&mut te_rng));
            }
            (
                TrafficElement {
                    bbox,
                    category: e.category,
                },
                1.0,
            )
        })
        .collect();

    let queries = query_features(&pred, &spec.bev_extent, spec.feature_seed, spec.feature_dim);
    Ok(DetectionSample {
        scene_id: format!("{}-{:016x}", spec.kind.name(), spec.seed),
        scene: scene.clone(),
        traffic_elements: elements,
        extent: spec.bev_extent,
        queries,
        pred_centerlines: pred,
        assignment,
        detected_elements: detected,
        feature_seed: spec.feature_seed,
    })
}
