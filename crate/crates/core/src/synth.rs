//! Seeded synthetic scenes and view-subset ablations.
//!
//! The body stands upright at the world origin (y up) with a random yaw.
//! Cameras sit on a horizontal ring around the keypoint centroid, raised by
//! `rig_height`, and look at the centroid with image y pointing down.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::body::{BodyModel, BodyParams};
use crate::geometry::{AxisAngle, CameraIntrinsics};
use crate::io::hash_json;
use crate::observations::Detection2D;
use crate::scene::{Extrinsics, GroundTruth, Scene, SceneError, SceneView};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub n_views: usize,
    /// Ring radius, meters.
    pub rig_radius: f64,
    /// Camera height above the keypoint centroid, meters.
    pub rig_height: f64,
    /// Std of each body-pose axis-angle component, radians.
    pub pose_std: f64,
    pub shape_std: f64,
    /// Pixel noise std for visible keypoints.
    pub pixel_noise_std: f64,
    /// Per-keypoint occlusion probability.
    pub occlusion_rate: f64,
    /// Per-view occlusion probabilities; when non-empty, overrides
    /// `occlusion_rate` and must have `n_views` entries.
    pub view_occlusion_rates: Vec<f64>,
    pub visible_confidence: [f64; 2],
    /// Half-open range; keep the upper end at or below the fitting threshold.
    pub occluded_confidence: [f64; 2],
    /// Noise multiplier for occluded keypoints.
    pub occluded_noise_factor: f64,
    pub focal: f64,
    pub image_size: [f64; 2],
    /// Smallest accepted keypoint depth, meters.
    pub min_depth: f64,
    pub rig_attempts: usize,
    /// Radius multiplier between placement attempts.
    pub radius_growth: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_views: 4,
            rig_radius: 4.5,
            rig_height: 1.0,
            pose_std: 0.3,
            shape_std: 1.0,
            pixel_noise_std: 0.0,
            occlusion_rate: 0.0,
            view_occlusion_rates: Vec::new(),
            visible_confidence: [0.7, 1.0],
            occluded_confidence: [0.0, 0.25],
            occluded_noise_factor: 10.0,
            focal: 1000.0,
            image_size: [1000.0, 1000.0],
            min_depth: 0.5,
            rig_attempts: 5,
            radius_growth: 1.25,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::Config(m.to_string()));
        let unit = |r: [f64; 2]| 0.0 <= r[0] && r[0] <= r[1] && r[1] <= 1.0;
        if self.n_views == 0 {
            return bad("n_views must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate)
            || !self
                .view_occlusion_rates
                .iter()
                .all(|r| (0.0..=1.0).contains(r))
        {
            return bad("occlusion rates must lie in [0, 1]");
        }
        if !self.view_occlusion_rates.is_empty() && self.view_occlusion_rates.len() != self.n_views
        {
            return bad("view_occlusion_rates needs one entry per view");
        }
        if !(self.pose_std >= 0.0
            && self.shape_std >= 0.0
            && self.pixel_noise_std >= 0.0
            && self.occluded_noise_factor >= 0.0)
        {
            return bad("standard deviations must be non-negative");
        }
        if !unit(self.visible_confidence) || !unit(self.occluded_confidence) {
            return bad("confidence ranges must be ordered within [0, 1]");
        }
        if self.occluded_confidence[0] >= self.occluded_confidence[1]
            && (0..self.n_views).any(|v| self.occlusion(v) > 0.0)
        {
            return bad("occluded confidence range is empty");
        }
        if !(self.rig_radius > 0.0
            && self.focal > 0.0
            && self.min_depth > 0.0
            && self.radius_growth >= 1.0)
        {
            return bad(
                "rig radius, focal, min depth must be positive and radius growth at least 1",
            );
        }
        if self.rig_attempts == 0 {
            return bad("rig_attempts must be at least 1");
        }
        Ok(())
    }

    pub fn occlusion(&self, view: usize) -> f64 {
        self.view_occlusion_rates
            .get(view)
            .copied()
            .unwrap_or(self.occlusion_rate)
    }

    pub fn hash(&self) -> String {
        hash_json(self)
    }
}

/// Camera looking from `eye` at `target`, image y down.
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>) -> Extrinsics {
    let up = Vector3::y();
    let z = (target - eye).normalize();
    let x = z.cross(&up).normalize();
    let y = z.cross(&x);
    let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    Extrinsics {
        rotation,
        translation: -(rotation * eye),
    }
}

fn sample_range(rng: &mut ChaCha8Rng, r: [f64; 2], inclusive: bool) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else if inclusive {
        rng.random_range(r[0]..=r[1])
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Deterministic scene for `cfg.seed`.
pub fn generate_scene(model: &BodyModel<f64>, cfg: &SceneConfig) -> Result<Scene, SceneError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pose = Normal::new(0.0, cfg.pose_std).expect("validated std");
    let shape = Normal::new(0.0, cfg.shape_std).expect("validated std");
    let yaw = rng.random_range(0.0..std::f64::consts::TAU);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mut params = BodyParams::zeros(model);
    params.global_orient = AxisAngle::new(0.0, yaw, 0.0);
    for b in params.betas.iter_mut() {
        *b = shape.sample(&mut rng);
    }
    for a in params.body_pose.iter_mut() {
        *a = AxisAngle::new(
            pose.sample(&mut rng),
            pose.sample(&mut rng),
            pose.sample(&mut rng),
        );
    }
    let keypoints = model.keypoints_of(&params)?;
    let centroid = keypoints.iter().fold(Vector3::zeros(), |a, p| a + p) / keypoints.len() as f64;

    let mut radius = cfg.rig_radius;
    let mut rig = None;
    for _ in 0..cfg.rig_attempts {
        let cams: Vec<Extrinsics> = (0..cfg.n_views)
            .map(|i| {
                let a = phase + std::f64::consts::TAU * i as f64 / cfg.n_views as f64;
                let eye =
                    centroid + Vector3::new(radius * a.sin(), cfg.rig_height, radius * a.cos());
                look_at(&eye, &centroid)
            })
            .collect();
        if cams
            .iter()
            .all(|c| keypoints.iter().all(|p| c.apply(p).z >= cfg.min_depth))
        {
            rig = Some(cams);
            break;
        }
        radius *= cfg.radius_growth;
    }
    let rig = rig.ok_or(SceneError::ImpossibleRig {
        attempts: cfg.rig_attempts,
    })?;

    let intrinsics =
        CameraIntrinsics::new(cfg.focal, cfg.image_size[0] / 2.0, cfg.image_size[1] / 2.0)
            .map_err(|e| SceneError::Config(e.to_string()))?;
    let noise = Normal::new(0.0, cfg.pixel_noise_std).expect("validated std");
    let occluded_noise =
        Normal::new(0.0, cfg.pixel_noise_std * cfg.occluded_noise_factor).expect("validated std");
    let mut views = Vec::with_capacity(cfg.n_views);
    for (view_id, cam) in rig.into_iter().enumerate() {
        let mut px = Vec::with_capacity(keypoints.len());
        let mut conf = Vec::with_capacity(keypoints.len());
        for p in &keypoints {
            let c = cam.apply(p);
            let exact = Vector2::new(cfg.focal * c.x / c.z, cfg.focal * c.y / c.z)
                + intrinsics.principal_point;
            let occluded = rng.random_bool(cfg.occlusion(view_id));
            let dist = if occluded { &occluded_noise } else { &noise };
            let offset = Vector2::new(dist.sample(&mut rng), dist.sample(&mut rng));
            px.push(exact + offset);
            conf.push(if occluded {
                sample_range(&mut rng, cfg.occluded_confidence, false)
            } else {
                sample_range(&mut rng, cfg.visible_confidence, true)
            });
        }
        let detection =
            Detection2D::new(view_id, px, conf).map_err(|e| SceneError::InvalidView {
                view: view_id,
                message: e.to_string(),
            })?;
        views.push(SceneView {
            intrinsics,
            extrinsics: Some(cam),
            detection,
        });
    }
    Ok(Scene {
        scene_id: format!("scene_{:06}", cfg.seed),
        seed: Some(cfg.seed),
        config_hash: Some(cfg.hash()),
        manifest: None,
        views,
        ground_truth: Some(GroundTruth {
            params,
            keypoints_3d: keypoints,
        }),
    })
}

/// Scenes for seeds `cfg.seed .. cfg.seed + count`.
pub fn generate_batch(
    model: &BodyModel<f64>,
    cfg: &SceneConfig,
    count: usize,
) -> Result<Vec<Scene>, SceneError> {
    (0..count as u64)
        .map(|i| {
            generate_scene(
                model,
                &SceneConfig {
                    seed: cfg.seed + i,
                    ..cfg.clone()
                },
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    AllViews,
    /// The view with the most and the view with the fewest surviving keypoints.
    MinMax,
    /// The two views with the fewest surviving keypoints.
    #[serde(rename = "min_2")]
    Min2,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 3] = [
        AblationVariant::AllViews,
        AblationVariant::MinMax,
        AblationVariant::Min2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::AllViews => "all_views",
            Self::MinMax => "min_max",
            Self::Min2 => "min_2",
        }
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationVariant {
    type Err = SceneError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| SceneError::UnknownVariant(s.to_string()))
    }
}

/// View indices kept by `variant` given per-view surviving keypoint counts.
/// Ties go to the lower view index.
pub fn select_views(counts: &[usize], variant: AblationVariant) -> Result<Vec<usize>, SceneError> {
    if counts.len() < 2 {
        return Err(SceneError::TooFewViews(counts.len()));
    }
    let mut ascending: Vec<usize> = (0..counts.len()).collect();
    ascending.sort_by_key(|&i| (counts[i], i));
    Ok(match variant {
        AblationVariant::AllViews => (0..counts.len()).collect(),
        AblationVariant::Min2 => ascending[..2].to_vec(),
        AblationVariant::MinMax => {
            let max = *counts.iter().max().expect("non-empty");
            let most = counts.iter().position(|&c| c == max).expect("max exists");
            let fewest = *ascending.iter().find(|&&i| i != most).expect("two views");
            vec![most, fewest]
        }
    })
}

pub fn apply_variant(
    scene: &Scene,
    variant: AblationVariant,
    threshold: f64,
) -> Result<Scene, SceneError> {
    let keep = select_views(&scene.survivor_counts(threshold), variant)?;
    Ok(scene.select_views(&keep))
}

#[derive(Debug, Clone)]
pub struct AblationBatch {
    pub variant: AblationVariant,
    pub scenes: Vec<Scene>,
}

/// One batch per variant, all derived from the same base scenes.
pub fn ablation_suite(
    model: &BodyModel<f64>,
    base: &SceneConfig,
    variants: &[AblationVariant],
    count: usize,
    threshold: f64,
) -> Result<Vec<AblationBatch>, SceneError> {
    let scenes = generate_batch(model, base, count)?;
    variants
        .iter()
        .map(|&variant| {
            let scenes = scenes
                .iter()
                .map(|s| apply_variant(s, variant, threshold))
                .collect::<Result<_, _>>()?;
            Ok(AblationBatch { variant, scenes })
        })
        .collect()
}
