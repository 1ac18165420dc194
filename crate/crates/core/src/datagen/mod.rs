//! Procedural traffic scenes and simulated detector output.
//!
//! [`generate_scene`] lays out ground-truth lanes for a [`ScenarioSpec`];
//! [`perturb_detections`] turns a scene into the query features, noisy
//! centerlines, and query-to-lane provenance a lane detector would hand to
//! the relation model. [`write_dataset`] / [`read_dataset`] store samples as
//! JSON lines.

mod detections;
mod generate;
mod io;

use serde::{Deserialize, Serialize};

pub use detections::{perturb_detections, query_features, DetectionSample, FEATURE_SEED};
pub use generate::{generate_scene, heading_category};
pub use io::{
    read_dataset, read_dataset_header, write_dataset, DatasetError, DatasetHeader, FORMAT_VERSION,
};

/// Road layout family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Straight,
    TJunction,
    Crossroad,
    /// Intersection with `k` arms, `3 ≤ k ≤ 6`.
    Multiway(u8),
}

impl ScenarioKind {
    pub fn name(self) -> String {
        match self {
            ScenarioKind::Straight => "straight".into(),
            ScenarioKind::TJunction => "t_junction".into(),
            ScenarioKind::Crossroad => "crossroad".into(),
            ScenarioKind::Multiway(k) => format!("multiway{k}"),
        }
    }
}

/// Bird's-eye-view extent centered on the origin, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevExtent {
    pub x_range: f64,
    pub y_range: f64,
}

/// Vertical range used when normalizing z.
pub const Z_RANGE: f64 = 10.0;

impl BevExtent {
    /// Maps a metric point into `[0, 1]³` (z centered on 0).
    pub fn normalize(&self, p: [f64; 3]) -> [f64; 3] {
        [
            p[0] / self.x_range + 0.5,
            p[1] / self.y_range + 0.5,
            p[2] / Z_RANGE + 0.5,
        ]
    }

    pub fn denormalize(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - 0.5) * self.x_range,
            (p[1] - 0.5) * self.y_range,
            (p[2] - 0.5) * Z_RANGE,
        ]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        p[0].abs() <= self.x_range / 2.0 && p[1].abs() <= self.y_range / 2.0
    }
}

impl Default for BevExtent {
    fn default() -> Self {
        Self {
            x_range: 100.0,
            y_range: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub lanes_per_arm: usize,
    /// Chained segments per lane of a straight road.
    pub segments: usize,
    pub noise_sigma: f64,
    pub distractor_count: usize,
    pub seed: u64,
    pub bev_extent: BevExtent,
    pub points_per_lane: usize,
    /// Road grade: `z = z_slope · x`.
    pub z_slope: f64,
    pub allow_u_turns: bool,
    pub feature_dim: usize,
    pub feature_seed: u64,
    /// Pixel noise on detected traffic-element boxes.
    pub element_bbox_sigma: f64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            kind: ScenarioKind::Crossroad,
            lanes_per_arm: 1,
            segments: 3,
            noise_sigma: 0.15,
            distractor_count: 4,
            seed: 0,
            bev_extent: BevExtent::default(),
            points_per_lane: 11,
            z_slope: 0.0,
            allow_u_turns: false,
            feature_dim: 64,
            feature_seed: FEATURE_SEED,
            element_bbox_sigma: 2.0,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        if let ScenarioKind::Multiway(k) = self.kind {
            if !(3..=6).contains(&k) {
                return Err(SpecError::ArmCount(k));
            }
        }
        if self.lanes_per_arm == 0 {
            return Err(SpecError::Invalid("lanes_per_arm must be positive"));
        }
        if self.kind == ScenarioKind::Straight && self.segments == 0 {
            return Err(SpecError::Invalid("segments must be positive"));
        }
        if !(self.noise_sigma >= 0.0) || !(self.element_bbox_sigma >= 0.0) {
            return Err(SpecError::Invalid("noise must be non-negative"));
        }
        if !(self.bev_extent.x_range > 0.0 && self.bev_extent.y_range > 0.0) {
            return Err(SpecError::Invalid("bev_extent ranges must be positive"));
        }
        if self.points_per_lane < 2 {
            return Err(SpecError::Invalid("points_per_lane must be at least 2"));
        }
        if self.feature_dim == 0 {
            return Err(SpecError::Invalid("feature_dim must be positive"));
        }
        if !self.z_slope.is_finite() {
            return Err(SpecError::Invalid("z_slope must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SpecError {
    #[error("multiway intersections need 3 to 6 arms, got {0}")]
    ArmCount(u8),
    #[error("{0}")]
    Invalid(&'static str),
    #[error("scene does not fit the BEV extent; enlarge bev_extent or shorten the road")]
    ExtentTooSmall,
}

/// SplitMix64 step; derives independent stream seeds from one base seed.
pub fn split_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates `count` samples. Record `i` uses seed `split_seed(seed, i)`
/// and kind `kinds[i % kinds.len()]`; every other field comes from `base`.
/// Records are independent, so `jobs > 1` changes speed, never content.
pub fn generate_dataset(
    base: &ScenarioSpec,
    kinds: &[ScenarioKind],
    count: usize,
    seed: u64,
    jobs: usize,
) -> Result<Vec<DetectionSample>, SpecError> {
    if kinds.is_empty() {
        return Err(SpecError::Invalid("at least one scenario kind is required"));
    }
    let make = |i: usize| -> Result<DetectionSample, SpecError> {
        let spec = ScenarioSpec {
            kind: kinds[i % kinds.len()],
            seed: split_seed(seed, i as u64),
            ..base.clone()
        };
        perturb_detections(&generate_scene(&spec)?, &spec)
    };
    let jobs = jobs.clamp(1, count.max(1));
    if jobs == 1 {
        return (0..count).map(make).collect();
    }
    let chunk = count.div_ceil(jobs);
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..count)
            .step_by(chunk)
            .map(|start| {
                let make = &make;
                scope.spawn(move || (start..(start + chunk).min(count)).map(make).collect::<Result<Vec<_>, _>>())
            })
            .collect();
        let mut out = Vec::with_capacity(count);
        for h in handles {
            out.extend(h.join().expect("generation worker panicked")?);
        }
        Ok(out)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_independent_of_jobs() {
        let kinds = [ScenarioKind::Straight, ScenarioKind::TJunction, ScenarioKind::Crossroad];
        let base = ScenarioSpec::default();
        let a = generate_dataset(&base, &kinds, 7, 3, 1).unwrap();
        let b = generate_dataset(&base, &kinds, 7, 3, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 7);
        assert!(a[2].scene_id.starts_with("crossroad-"));
        assert!(generate_dataset(&base, &[], 1, 0, 1).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(ScenarioSpec::default().validate().is_ok());
        let bad = ScenarioSpec {
            kind: ScenarioKind::Multiway(7),
            ..Default::default()
        };
        assert_eq!(bad.validate(), Err(SpecError::ArmCount(7)));
        let bad = ScenarioSpec {
            noise_sigma: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn normalization_round_trips() {
        let e = BevExtent::default();
        let p = [12.5, -33.0, 0.75];
        let q = e.denormalize(e.normalize(p));
        for k in 0..3 {
            assert!((p[k] - q[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn split_seed_streams_differ() {
        assert_ne!(split_seed(7, 0), split_seed(7, 1));
        assert_ne!(split_seed(7, 0), split_seed(8, 0));
        assert_eq!(split_seed(7, 3), split_seed(7, 3));
    }
}
