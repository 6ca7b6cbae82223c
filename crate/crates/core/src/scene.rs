//! Objects, scenes, users and datasets, plus the preprocessing applied before
//! training: per-template normalisation, position noise, node/scene masking
//! and supergraph batching.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::gnn::EdgeList;
use crate::semantics::Semantics;
use crate::synth::SyntheticUserParams;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("unsupported schema_version {0} (expected {SCHEMA_VERSION})")]
    SchemaVersion(u32),
    #[error("scene references unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("duplicate template id {0:?}")]
    DuplicateTemplate(String),
    #[error("template {template:?} has {expected} objects but a scene lists {found}")]
    Roster {
        template: String,
        expected: usize,
        found: usize,
    },
    #[error("position has {found} coordinates, expected {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("placed object {0:?} has a non-finite position")]
    NonFinite(String),
    #[error("user {0:?} has no scenes")]
    NoScenes(String),
    #[error("template {0:?} has no placed objects in the training data")]
    EmptyTemplate(String),
    #[error("no statistics for template {0:?}")]
    MissingStats(String),
    #[error("noise sigma must be non-negative, got {0}")]
    NegativeSigma(f64),
    #[error("mask rate {0} outside [0, 1]")]
    MaskRate(f64),
    #[error("masking would hide every scene of the user")]
    AllScenesMasked,
    #[error("cannot batch an empty list of scenes")]
    EmptyBatch,
    #[error("dataset has no users")]
    EmptyDataset,
    #[error("malformed dataset JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// One object in a scene: identity plus a position encoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub name: String,
    pub semantics: Semantics,
    pub position: Vec<f64>,
    /// False when the object sits in the inventory or is hidden by a mask.
    pub placed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub template: String,
    pub objects: Vec<ObjectInstance>,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn placed_count(&self) -> usize {
        self.objects.iter().filter(|o| o.placed).count()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.objects.iter().position(|o| o.name == name)
    }

    pub fn position_of(&self, name: &str) -> Option<&[f64]> {
        self.objects
            .iter()
            .find(|o| o.name == name && o.placed)
            .map(|o| o.position.as_slice())
    }

    pub fn placed_positions(&self) -> impl Iterator<Item = &[f64]> {
        self.objects.iter().filter(|o| o.placed).map(|o| o.position.as_slice())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub id: String,
    pub scenes: Vec<Scene>,
    /// Generative parameters for synthetic users; absent for real data.
    pub ground_truth: Option<SyntheticUserParams>,
}

impl UserRecord {
    pub fn scene(&self, template: &str) -> Option<&Scene> {
        self.scenes.iter().find(|s| s.template == template)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateObject {
    pub name: String,
    pub semantics: Semantics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneTemplate {
    pub id: String,
    pub objects: Vec<TemplateObject>,
}

impl SceneTemplate {
    /// A scene with every object unplaced at the origin.
    pub fn empty_scene(&self, dim: usize) -> Scene {
        Scene {
            template: self.id.clone(),
            objects: self
                .objects
                .iter()
                .map(|o| ObjectInstance {
                    name: o.name.clone(),
                    semantics: o.semantics.clone(),
                    position: vec![0.0; dim],
                    placed: false,
                })
                .collect(),
        }
    }

    pub fn scene_from_positions(&self, positions: &[Vec<f64>]) -> Scene {
        let mut scene = self.empty_scene(positions.first().map_or(2, Vec::len));
        for (o, p) in scene.objects.iter_mut().zip(positions) {
            o.position = p.clone();
            o.placed = true;
        }
        scene
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub dim: usize,
    pub templates: Vec<SceneTemplate>,
    pub users: Vec<UserRecord>,
}

// ---- wire format ----------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    schema_version: u32,
    #[serde(default = "default_dim")]
    dim: usize,
    templates: Vec<TemplateFile>,
    users: Vec<UserFile>,
}

fn default_dim() -> usize {
    2
}

#[derive(Serialize, Deserialize)]
struct TemplateFile {
    id: String,
    objects: Vec<TemplateObjectFile>,
}

#[derive(Serialize, Deserialize)]
struct TemplateObjectFile {
    name: String,
    semantics: SemanticsFile,
}

/// `{"word": "fork"}`, `{"features": [..]}` or `{"one_hot": {"index", "size"}}`.
#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum SemanticsFile {
    Word(String),
    Features(Vec<f64>),
    OneHot { index: usize, size: usize },
}

#[derive(Serialize, Deserialize)]
struct UserFile {
    id: String,
    scenes: Vec<SceneFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ground_truth: Option<SyntheticUserParams>,
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    template: String,
    positions: Vec<Vec<f64>>,
    placed: Vec<bool>,
}

impl From<&Semantics> for SemanticsFile {
    fn from(s: &Semantics) -> Self {
        match s {
            Semantics::Word(w) => SemanticsFile::Word(w.clone()),
            Semantics::Features(v) => SemanticsFile::Features(v.clone()),
            Semantics::OneHot { index, size } => SemanticsFile::OneHot {
                index: *index,
                size: *size,
            },
        }
    }
}

impl From<SemanticsFile> for Semantics {
    fn from(s: SemanticsFile) -> Self {
        match s {
            SemanticsFile::Word(w) => Semantics::word(&w),
            SemanticsFile::Features(v) => Semantics::Features(v),
            SemanticsFile::OneHot { index, size } => Semantics::OneHot { index, size },
        }
    }
}

impl Dataset {
    pub fn from_json(text: &str) -> Result<Self, SceneError> {
        let file: DatasetFile = serde_json::from_str(text)?;
        if file.schema_version != SCHEMA_VERSION {
            return Err(SceneError::SchemaVersion(file.schema_version));
        }
        let templates: Vec<SceneTemplate> = file
            .templates
            .into_iter()
            .map(|t| SceneTemplate {
                id: t.id,
                objects: t
                    .objects
                    .into_iter()
                    .map(|o| TemplateObject {
                        name: o.name,
                        semantics: o.semantics.into(),
                    })
                    .collect(),
            })
            .collect();
        let mut ds = Dataset {
            dim: file.dim,
            templates,
            users: Vec::new(),
        };
        for u in file.users {
            let mut scenes = Vec::with_capacity(u.scenes.len());
            for s in u.scenes {
                let template = ds.template(&s.template)?;
                let n = template.objects.len();
                if s.positions.len() != n || s.placed.len() != n {
                    return Err(SceneError::Roster {
                        template: s.template,
                        expected: n,
                        found: s.positions.len().min(s.placed.len()),
                    });
                }
                let objects = template
                    .objects
                    .iter()
                    .zip(s.positions)
                    .zip(s.placed)
                    .map(|((o, position), placed)| ObjectInstance {
                        name: o.name.clone(),
                        semantics: o.semantics.clone(),
                        position,
                        placed,
                    })
                    .collect();
                scenes.push(Scene {
                    template: s.template,
                    objects,
                });
            }
            ds.users.push(UserRecord {
                id: u.id,
                scenes,
                ground_truth: u.ground_truth,
            });
        }
        ds.validate()?;
        Ok(ds)
    }

    pub fn to_json(&self) -> String {
        let file = DatasetFile {
            schema_version: SCHEMA_VERSION,
            dim: self.dim,
            templates: self
                .templates
                .iter()
                .map(|t| TemplateFile {
                    id: t.id.clone(),
                    objects: t
                        .objects
                        .iter()
                        .map(|o| TemplateObjectFile {
                            name: o.name.clone(),
                            semantics: (&o.semantics).into(),
                        })
                        .collect(),
                })
                .collect(),
            users: self
                .users
                .iter()
                .map(|u| UserFile {
                    id: u.id.clone(),
                    ground_truth: u.ground_truth.clone(),
                    scenes: u
                        .scenes
                        .iter()
                        .map(|s| SceneFile {
                            template: s.template.clone(),
                            positions: s.objects.iter().map(|o| o.position.clone()).collect(),
                            placed: s.objects.iter().map(|o| o.placed).collect(),
                        })
                        .collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("dataset serialises")
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.templates {
            if !seen.insert(t.id.as_str()) {
                return Err(SceneError::DuplicateTemplate(t.id.clone()));
            }
        }
        for u in &self.users {
            if u.scenes.is_empty() {
                return Err(SceneError::NoScenes(u.id.clone()));
            }
            for s in &u.scenes {
                let t = self.template(&s.template)?;
                if t.objects.len() != s.objects.len() {
                    return Err(SceneError::Roster {
                        template: s.template.clone(),
                        expected: t.objects.len(),
                        found: s.objects.len(),
                    });
                }
                for o in &s.objects {
                    if o.position.len() != self.dim {
                        return Err(SceneError::Dimension {
                            expected: self.dim,
                            found: o.position.len(),
                        });
                    }
                    if o.placed && o.position.iter().any(|v| !v.is_finite()) {
                        return Err(SceneError::NonFinite(o.name.clone()));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn template(&self, id: &str) -> Result<&SceneTemplate, SceneError> {
        self.templates
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| SceneError::UnknownTemplate(id.to_string()))
    }

    /// Splits off the last `test` users: `(train, test)`.
    pub fn split_last(&self, test: usize) -> (Dataset, Dataset) {
        let cut = self.users.len().saturating_sub(test);
        let mut train = self.clone();
        let test_users = train.users.split_off(cut);
        let test = Dataset {
            users: test_users,
            ..self.clone_without_users()
        };
        (train, test)
    }

    pub fn clone_without_users(&self) -> Dataset {
        Dataset {
            dim: self.dim,
            templates: self.templates.clone(),
            users: Vec::new(),
        }
    }

    /// Keeps only scenes of the listed templates (users left with no scenes
    /// are dropped).
    pub fn restrict_templates(&self, templates: &[&str]) -> Dataset {
        let users = self
            .users
            .iter()
            .filter_map(|u| {
                let scenes: Vec<Scene> = u
                    .scenes
                    .iter()
                    .filter(|s| templates.contains(&s.template.as_str()))
                    .cloned()
                    .collect();
                (!scenes.is_empty()).then(|| UserRecord {
                    id: u.id.clone(),
                    scenes,
                    ground_truth: u.ground_truth.clone(),
                })
            })
            .collect();
        Dataset {
            dim: self.dim,
            templates: self
                .templates
                .iter()
                .filter(|t| templates.contains(&t.id.as_str()))
                .cloned()
                .collect(),
            users,
        }
    }

    pub fn scenes_of(&self, template: &str) -> impl Iterator<Item = &Scene> {
        let template = template.to_string();
        self.users
            .iter()
            .flat_map(|u| u.scenes.iter())
            .filter(move |s| s.template == template)
    }
}

// ---- normalisation --------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateStats {
    pub mean: Vec<f64>,
    pub scale: f64,
}

/// Per-template centring and scaling of positions.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub templates: BTreeMap<String, TemplateStats>,
}

impl NormalizationStats {
    /// Mean over every placed position of each template, and the largest
    /// distance from that mean (1 when all points coincide).
    pub fn fit(train: &Dataset) -> Result<Self, SceneError> {
        let mut sums: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
        let mut present: BTreeMap<&str, bool> = BTreeMap::new();
        for s in train.users.iter().flat_map(|u| &u.scenes) {
            present.insert(&s.template, true);
            for p in s.placed_positions() {
                let e = sums.entry(&s.template).or_insert_with(|| (vec![0.0; p.len()], 0));
                for (a, b) in e.0.iter_mut().zip(p) {
                    *a += b;
                }
                e.1 += 1;
            }
        }
        let mut templates = BTreeMap::new();
        for (&t, _) in &present {
            let Some((sum, n)) = sums.get(t) else {
                return Err(SceneError::EmptyTemplate(t.to_string()));
            };
            let mean: Vec<f64> = sum.iter().map(|v| v / *n as f64).collect();
            let mut scale: f64 = 0.0;
            for s in train.scenes_of(t) {
                for p in s.placed_positions() {
                    scale = scale.max(dist(p, &mean));
                }
            }
            if scale <= 0.0 {
                scale = 1.0;
            }
            templates.insert(t.to_string(), TemplateStats { mean, scale });
        }
        Ok(Self { templates })
    }

    pub fn get(&self, template: &str) -> Result<&TemplateStats, SceneError> {
        self.templates
            .get(template)
            .ok_or_else(|| SceneError::MissingStats(template.to_string()))
    }

    pub fn apply_point(&self, template: &str, p: &[f64]) -> Result<Vec<f64>, SceneError> {
        let s = self.get(template)?;
        Ok(p.iter().zip(&s.mean).map(|(v, m)| (v - m) / s.scale).collect())
    }

    pub fn invert_point(&self, template: &str, p: &[f64]) -> Result<Vec<f64>, SceneError> {
        let s = self.get(template)?;
        Ok(p.iter().zip(&s.mean).map(|(v, m)| v * s.scale + m).collect())
    }

    pub fn apply(&self, scene: &Scene) -> Result<Scene, SceneError> {
        self.map_scene(scene, |t, p| self.apply_point(t, p))
    }

    pub fn invert(&self, scene: &Scene) -> Result<Scene, SceneError> {
        self.map_scene(scene, |t, p| self.invert_point(t, p))
    }

    pub fn apply_dataset(&self, ds: &Dataset) -> Result<Dataset, SceneError> {
        let mut out = ds.clone();
        for u in &mut out.users {
            for s in &mut u.scenes {
                *s = self.apply(s)?;
            }
        }
        Ok(out)
    }

    fn map_scene(
        &self,
        scene: &Scene,
        f: impl Fn(&str, &[f64]) -> Result<Vec<f64>, SceneError>,
    ) -> Result<Scene, SceneError> {
        let mut out = scene.clone();
        for o in &mut out.objects {
            if o.placed {
                o.position = f(&scene.template, &o.position)?;
            }
        }
        Ok(out)
    }
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

// ---- augmentation and masking ---------------------------------------------

/// Adds independent `N(0, sigma^2)` noise to every coordinate of every placed
/// object.
pub fn augment_noise(scene: &Scene, sigma: f64, rng: &mut impl Rng) -> Result<Scene, SceneError> {
    if sigma.is_nan() || sigma < 0.0 {
        return Err(SceneError::NegativeSigma(sigma));
    }
    let mut out = scene.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    for o in out.objects.iter_mut().filter(|o| o.placed) {
        for v in &mut o.position {
            *v += normal.sample(rng);
        }
    }
    Ok(out)
}

/// What a mask hid from the encoder.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    /// Scene indices withheld entirely.
    pub hidden_scenes: Vec<usize>,
    /// `(scene, object)` pairs whose position was withheld.
    pub hidden_nodes: Vec<(usize, usize)>,
}

impl MaskRecord {
    pub fn is_hidden(&self, scene: usize, object: usize) -> bool {
        self.hidden_scenes.contains(&scene) || self.hidden_nodes.contains(&(scene, object))
    }
}

/// Encoder view of a user's scenes after node and scene masking.
///
/// Hidden nodes become unplaced; hidden scenes are dropped from the returned
/// list. Originals stay available to the caller as reconstruction targets.
pub fn mask(
    scenes: &[Scene],
    node_rate: f64,
    scene_rate: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<Scene>, Vec<usize>, MaskRecord), SceneError> {
    for r in [node_rate, scene_rate] {
        if !(0.0..=1.0).contains(&r) {
            return Err(SceneError::MaskRate(r));
        }
    }
    let mut record = MaskRecord::default();
    let mut visible = Vec::new();
    let mut kept = Vec::new();
    for (si, scene) in scenes.iter().enumerate() {
        if scene_rate > 0.0 && rng.random::<f64>() < scene_rate {
            record.hidden_scenes.push(si);
            continue;
        }
        let mut view = scene.clone();
        for (oi, o) in view.objects.iter_mut().enumerate() {
            if o.placed && node_rate > 0.0 && rng.random::<f64>() < node_rate {
                o.placed = false;
                record.hidden_nodes.push((si, oi));
            }
        }
        if view.placed_count() == 0 {
            record.hidden_scenes.push(si);
            record.hidden_nodes.retain(|&(s, _)| s != si);
            continue;
        }
        kept.push(si);
        visible.push(view);
    }
    if visible.is_empty() {
        return Err(SceneError::AllScenesMasked);
    }
    Ok((visible, kept, record))
}

// ---- supergraph -----------------------------------------------------------

/// Which objects of a scene become graph nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeSelection {
    Placed,
    All,
}

/// Several scene graphs stacked into one disconnected graph.
#[derive(Clone, Debug)]
pub struct Supergraph {
    /// Node positions, `nodes x D` (zeros for unplaced objects).
    pub positions: Tensor,
    /// `(scene, object)` that each node row came from.
    pub node_objects: Vec<(usize, usize)>,
    pub node_scene: Rc<[usize]>,
    pub scene_user: Rc<[usize]>,
    pub node_user: Rc<[usize]>,
    pub edges: EdgeList,
    pub scene_sizes: Vec<usize>,
    pub users: usize,
}

impl Supergraph {
    pub fn nodes(&self) -> usize {
        self.node_objects.len()
    }

    pub fn scenes(&self) -> usize {
        self.scene_sizes.len()
    }

    /// Number of scenes attached to each user.
    pub fn scenes_per_user(&self) -> Vec<usize> {
        let mut c = vec![0; self.users];
        for &u in self.scene_user.iter() {
            c[u] += 1;
        }
        c
    }
}

/// Stacks scenes (all belonging to one user) into a supergraph of their
/// placed objects.
pub fn build_supergraph(scenes: &[Scene]) -> Result<Supergraph, SceneError> {
    let refs: Vec<&Scene> = scenes.iter().collect();
    build_batch_supergraph(&[refs], NodeSelection::Placed)
}

/// Stacks the scenes of several users. Node rows follow user order, then
/// scene order, then object order.
pub fn build_batch_supergraph(users: &[Vec<&Scene>], select: NodeSelection) -> Result<Supergraph, SceneError> {
    let mut positions = Vec::new();
    let mut node_objects = Vec::new();
    let mut node_scene = Vec::new();
    let mut scene_user = Vec::new();
    let mut node_user = Vec::new();
    let mut scene_sizes = Vec::new();
    let mut dim = 0;
    let mut scene_index = 0;
    for (ui, scenes) in users.iter().enumerate() {
        for scene in scenes {
            let mut size = 0;
            for (oi, o) in scene.objects.iter().enumerate() {
                if select == NodeSelection::Placed && !o.placed {
                    continue;
                }
                dim = o.position.len();
                positions.push(o.position.clone());
                node_objects.push((scene_index, oi));
                node_scene.push(scene_index);
                node_user.push(ui);
                size += 1;
            }
            if size > 0 {
                scene_sizes.push(size);
                scene_user.push(ui);
                scene_index += 1;
            } else {
                // keep scene numbering dense: drop empty scenes
                continue;
            }
        }
    }
    if node_objects.is_empty() {
        return Err(SceneError::EmptyBatch);
    }
    let flat: Vec<f64> = positions.into_iter().flatten().collect();
    let rows = node_objects.len();
    Ok(Supergraph {
        positions: Tensor::matrix(rows, dim, flat).expect("position rows"),
        edges: EdgeList::fully_connected_blocks(&scene_sizes),
        node_objects,
        node_scene: node_scene.into(),
        scene_user: scene_user.into(),
        node_user: node_user.into(),
        scene_sizes,
        users: users.len(),
    })
}
