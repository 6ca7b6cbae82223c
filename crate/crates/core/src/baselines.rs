//! Non-neural comparison methods: static positions, nearest neighbours in
//! semantic space, and copies of existing arrangements.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{dist, Dataset, Scene, SceneTemplate};
use crate::semantics::{euclidean, EmbeddingTable, Semantics, SemanticsError};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("no training arrangement places {0:?}")]
    UnknownObject(String),
    #[error("training set has no users")]
    EmptyTraining,
    #[error("no training user arranged {0:?}")]
    NoTrainingUser(String),
    #[error("the test user supplied no {0:?} arrangement")]
    NoPositiveExample(String),
    #[error("scene {0:?} has no placed objects to anchor on")]
    NoAnchors(String),
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("{0:?} is not in template {1:?}")]
    NotInTemplate(String, String),
    #[error(transparent)]
    Semantics(#[from] SemanticsError),
}

/// Constants the comparison methods leave open.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    /// Offset radius of Mean-With-Offset as a fraction of the scene extent.
    pub offset_fraction: f64,
    /// Redraws of the offset while it lands within `object_radius` of a
    /// placed object.
    pub offset_retries: usize,
    /// Metres; collision threshold and the Nearest-Neighbour step.
    pub object_radius: f64,
    pub k: usize,
    pub epsilon: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            offset_fraction: 0.05,
            offset_retries: 20,
            object_radius: 0.04,
            k: 3,
            epsilon: 1e-6,
        }
    }
}

/// Everything a baseline may look at for one test user.
#[derive(Clone, Copy, Debug)]
pub struct BaselineContext<'a> {
    pub train: &'a Dataset,
    /// The test user's example scenes.
    pub examples: &'a [Scene],
    pub seed: u64,
    pub table: Option<&'a EmbeddingTable>,
    pub config: &'a BaselineConfig,
}

impl BaselineContext<'_> {
    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StaticKind {
    Mean,
    Random,
    MeanWithOffset,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnnKind {
    Nearest,
    WeightedKnn,
    SceneProjection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CopyKind {
    PositiveExample,
    RandomUser,
}

fn mean_point(points: &[&[f64]]) -> Vec<f64> {
    let dim = points[0].len();
    let n = points.len() as f64;
    (0..dim).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n).collect()
}

/// Largest distance between two placed objects.
pub fn scene_extent(scene: &Scene) -> f64 {
    let pts: Vec<&[f64]> = scene.placed_positions().collect();
    let mut best = 0.0f64;
    for (i, a) in pts.iter().enumerate() {
        for b in &pts[i + 1..] {
            best = best.max(dist(a, b));
        }
    }
    best
}

/// Axis-aligned box around every training position of `template`.
fn training_bounds(train: &Dataset, template: &str) -> Option<(Vec<f64>, Vec<f64>)> {
    let mut bounds: Option<(Vec<f64>, Vec<f64>)> = None;
    for p in train.scenes_of(template).flat_map(Scene::placed_positions) {
        match &mut bounds {
            None => bounds = Some((p.to_vec(), p.to_vec())),
            Some((lo, hi)) => {
                for j in 0..p.len() {
                    lo[j] = lo[j].min(p[j]);
                    hi[j] = hi[j].max(p[j]);
                }
            }
        }
    }
    bounds
}

/// Predicted position of `target` in `scene` from a static rule.
pub fn static_position(kind: StaticKind, ctx: &BaselineContext<'_>, scene: &Scene, target: &str) -> Result<Vec<f64>, BaselineError> {
    match kind {
        StaticKind::Mean => {
            if ctx.train.users.is_empty() {
                return Err(BaselineError::EmptyTraining);
            }
            let pts: Vec<&[f64]> = ctx
                .train
                .scenes_of(&scene.template)
                .filter_map(|s| s.position_of(target))
                .collect();
            if pts.is_empty() {
                return Err(BaselineError::UnknownObject(target.to_string()));
            }
            Ok(mean_point(&pts))
        }
        StaticKind::Random => {
            let (lo, hi) = training_bounds(ctx.train, &scene.template)
                .or_else(|| {
                    let pts: Vec<&[f64]> = scene.placed_positions().collect();
                    (!pts.is_empty()).then(|| {
                        let d = pts[0].len();
                        let lo = (0..d).map(|j| pts.iter().map(|p| p[j]).fold(f64::INFINITY, f64::min)).collect();
                        let hi = (0..d).map(|j| pts.iter().map(|p| p[j]).fold(f64::NEG_INFINITY, f64::max)).collect();
                        (lo, hi)
                    })
                })
                .ok_or_else(|| BaselineError::NoAnchors(scene.template.clone()))?;
            let mut rng = ctx.rng();
            Ok(lo
                .iter()
                .zip(&hi)
                .map(|(&a, &b)| if b > a { rng.random_range(a..=b) } else { a })
                .collect())
        }
        StaticKind::MeanWithOffset => {
            let others: Vec<&[f64]> = scene
                .objects
                .iter()
                .filter(|o| o.placed && o.name != target)
                .map(|o| o.position.as_slice())
                .collect();
            if others.is_empty() {
                return Err(BaselineError::NoAnchors(scene.template.clone()));
            }
            let centre = mean_point(&others);
            let radius = ctx.config.offset_fraction * scene_extent(scene);
            if radius <= 0.0 {
                return Ok(centre);
            }
            let mut rng = ctx.rng();
            let mut candidate = centre.clone();
            for _ in 0..ctx.config.offset_retries.max(1) {
                candidate = offset_in_ball(&centre, radius, &mut rng);
                if others.iter().all(|p| dist(p, &candidate) >= ctx.config.object_radius) {
                    break;
                }
            }
            Ok(candidate)
        }
    }
}

/// Uniform draw from the ball of `radius` around `centre`.
fn offset_in_ball(centre: &[f64], radius: f64, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = centre.iter().map(|_| rng.random_range(-1.0..=1.0)).collect();
        let n2: f64 = v.iter().map(|x| x * x).sum();
        if n2 <= 1.0 {
            return centre.iter().zip(v).map(|(c, x)| c + radius * x).collect();
        }
    }
}

/// A neighbour-based prediction and how it was reached.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnPrediction {
    pub position: Vec<f64>,
    /// Names of the anchors used, closest first.
    pub anchors: Vec<String>,
    /// Fewer than `k` anchors were available.
    pub fallback: bool,
}

struct Anchor<'s> {
    name: &'s str,
    position: &'s [f64],
    distance: f64,
}

fn ranked_anchors<'s>(
    ctx: &BaselineContext<'_>,
    scene: &'s Scene,
    query: &[f64],
    exclude: &str,
) -> Result<Vec<Anchor<'s>>, BaselineError> {
    let mut anchors = Vec::new();
    for o in scene.objects.iter().filter(|o| o.placed && o.name != exclude) {
        let v = o.semantics.raw_vector(ctx.table)?;
        if v.len() != query.len() {
            continue;
        }
        anchors.push(Anchor {
            name: &o.name,
            position: &o.position,
            distance: euclidean(&v, query),
        });
    }
    if anchors.is_empty() {
        return Err(BaselineError::NoAnchors(scene.template.clone()));
    }
    anchors.sort_by(|a, b| a.distance.total_cmp(&b.distance).then_with(|| a.name.cmp(b.name)));
    Ok(anchors)
}

/// `Σ w_i p_i / Σ w_i` with `w_i = 1 / (d_i + ε)`.
pub fn weighted_mean(positions: &[&[f64]], distances: &[f64], epsilon: f64) -> Vec<f64> {
    let weights: Vec<f64> = distances.iter().map(|d| 1.0 / (d + epsilon)).collect();
    let total: f64 = weights.iter().sum();
    let dim = positions[0].len();
    (0..dim)
        .map(|j| positions.iter().zip(&weights).map(|(p, w)| w * p[j]).sum::<f64>() / total)
        .collect()
}

/// Places an object named `name` with `semantics` among the placed objects
/// of `scene`, by proximity in semantic space.
pub fn knn_place(
    kind: KnnKind,
    ctx: &BaselineContext<'_>,
    scene: &Scene,
    name: &str,
    semantics: &Semantics,
) -> Result<KnnPrediction, BaselineError> {
    let query = semantics.raw_vector(ctx.table)?;
    let anchors = ranked_anchors(ctx, scene, &query, name)?;
    match kind {
        KnnKind::Nearest => {
            let a = &anchors[0];
            let others: Vec<&[f64]> = scene.placed_positions().collect();
            let centroid = mean_point(&others);
            let away: Vec<f64> = a.position.iter().zip(&centroid).map(|(p, c)| p - c).collect();
            let norm = away.iter().map(|v| v * v).sum::<f64>().sqrt();
            let step = ctx.config.object_radius;
            let position = if norm > 0.0 {
                a.position.iter().zip(&away).map(|(p, v)| p + step * v / norm).collect()
            } else {
                let mut p = a.position.to_vec();
                p[0] += step;
                p
            };
            Ok(KnnPrediction {
                position,
                anchors: vec![a.name.to_string()],
                fallback: false,
            })
        }
        KnnKind::WeightedKnn | KnnKind::SceneProjection => {
            let k = ctx.config.k.max(1);
            let used = &anchors[..k.min(anchors.len())];
            let positions: Vec<&[f64]> = used.iter().map(|a| a.position).collect();
            let distances: Vec<f64> = used.iter().map(|a| a.distance).collect();
            Ok(KnnPrediction {
                position: weighted_mean(&positions, &distances, ctx.config.epsilon),
                anchors: used.iter().map(|a| a.name.to_string()).collect(),
                fallback: anchors.len() < k,
            })
        }
    }
}

/// Arranges every object of `template` by weighted kNN over the placed
/// objects of `example`.
pub fn scene_projection(ctx: &BaselineContext<'_>, example: &Scene, template: &SceneTemplate) -> Result<(Scene, bool), BaselineError> {
    let dim = example.placed_positions().next().map_or(ctx.train.dim, <[f64]>::len);
    let mut out = template.empty_scene(dim);
    let mut fallback = false;
    for o in &mut out.objects {
        let p = knn_place(KnnKind::SceneProjection, ctx, example, "", &o.semantics)?;
        fallback |= p.fallback;
        o.position = p.position;
        o.placed = true;
    }
    Ok((out, fallback))
}

/// An existing arrangement of `template`, copied verbatim.
pub fn user_copy(kind: CopyKind, ctx: &BaselineContext<'_>, template: &str) -> Result<Scene, BaselineError> {
    match kind {
        CopyKind::PositiveExample => ctx
            .examples
            .iter()
            .find(|s| s.template == template)
            .cloned()
            .ok_or_else(|| BaselineError::NoPositiveExample(template.to_string())),
        CopyKind::RandomUser => {
            let pool: Vec<&Scene> = ctx.train.scenes_of(template).collect();
            let mut rng = ctx.rng();
            pool.choose(&mut rng)
                .map(|s| (*s).clone())
                .ok_or_else(|| BaselineError::NoTrainingUser(template.to_string()))
        }
    }
}

/// The semantics of `name` in `template` of the training set.
pub fn template_semantics<'d>(train: &'d Dataset, template: &str, name: &str) -> Result<&'d Semantics, BaselineError> {
    let t = train
        .templates
        .iter()
        .find(|t| t.id == template)
        .ok_or_else(|| BaselineError::UnknownTemplate(template.to_string()))?;
    t.objects
        .iter()
        .find(|o| o.name == name)
        .map(|o| &o.semantics)
        .ok_or_else(|| BaselineError::NotInTemplate(name.to_string(), template.to_string()))
}
