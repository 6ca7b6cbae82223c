use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    decode_positions, encode_user, infer_mean, ModelConfig, ModelParams, SemanticLayout, TrainConfig, UserPosterior,
    VaeError,
};
use crate::scene::{NormalizationStats, Scene, SceneTemplate};
use crate::semantics::EmbeddingTable;

pub const MODEL_FORMAT: &str = "neatnet-model";
pub const MODEL_VERSION: u32 = 1;

/// A trained network with everything needed to run it on raw (metre)
/// coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub layout: SemanticLayout,
    pub params: ModelParams,
    pub stats: NormalizationStats,
    pub templates: Vec<SceneTemplate>,
    /// Full word-vector table, present when any object is named by a word.
    pub embeddings: Option<EmbeddingTable>,
    pub training: Option<TrainConfig>,
}

impl Model {
    pub fn new(
        config: ModelConfig,
        layout: SemanticLayout,
        params: ModelParams,
        stats: NormalizationStats,
        templates: Vec<SceneTemplate>,
        embeddings: Option<EmbeddingTable>,
        training: Option<TrainConfig>,
    ) -> Self {
        Self {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            config,
            layout,
            params,
            stats,
            templates,
            embeddings,
            training,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn table(&self) -> Option<&EmbeddingTable> {
        self.embeddings.as_ref()
    }

    pub fn template(&self, id: &str) -> Result<&SceneTemplate, VaeError> {
        self.templates
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| VaeError::UnknownTemplate(id.to_string()))
    }

    /// Builds a scene of `template` from positions (metres) and placed flags.
    pub fn scene(&self, template: &str, positions: &[Vec<f64>], placed: &[bool]) -> Result<Scene, VaeError> {
        let t = self.template(template)?;
        if positions.len() != t.objects.len() || placed.len() != t.objects.len() {
            return Err(VaeError::Mismatch(format!(
                "template {template:?} has {} objects, got {} positions and {} flags",
                t.objects.len(),
                positions.len(),
                placed.len()
            )));
        }
        let mut s = t.empty_scene(self.config.position_dim);
        for ((o, p), &f) in s.objects.iter_mut().zip(positions).zip(placed) {
            if p.len() != self.config.position_dim {
                return Err(VaeError::Mismatch(format!(
                    "position of {:?} has {} coordinates, model expects {}",
                    o.name,
                    p.len(),
                    self.config.position_dim
                )));
            }
            if f && p.iter().any(|v| !v.is_finite()) {
                return Err(VaeError::NotFinite("scene position"));
            }
            o.position = p.clone();
            o.placed = f;
        }
        Ok(s)
    }

    /// Posterior over the preference vector from example scenes in metres.
    pub fn posterior(&self, scenes: &[Scene]) -> Result<UserPosterior, VaeError> {
        let mut normed = Vec::with_capacity(scenes.len());
        for s in scenes {
            self.template(&s.template)?;
            if s.objects.iter().any(|o| o.placed && o.position.len() != self.config.position_dim) {
                return Err(VaeError::Mismatch("scene dimension differs from the model".into()));
            }
            normed.push(self.stats.apply(s)?);
        }
        encode_user(&self.config, &self.layout, &self.params, self.table(), &normed)
    }

    /// Every object of `template` placed where the decoder puts it for `u`.
    pub fn decode(&self, u: &[f64], template: &str) -> Result<Scene, VaeError> {
        let t = self.template(template)?;
        let semantics: Vec<_> = t.objects.iter().map(|o| o.semantics.clone()).collect();
        let normed = decode_positions(&self.config, &self.layout, &self.params, self.table(), u, &semantics)?;
        let mut scene = t.empty_scene(self.config.position_dim);
        for (o, p) in scene.objects.iter_mut().zip(normed) {
            o.position = self.stats.invert_point(template, &p)?;
            o.placed = true;
        }
        Ok(scene)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, VaeError> {
        let model: Model = serde_json::from_str(text).map_err(|e| VaeError::Bundle(e.to_string()))?;
        model.check()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), VaeError> {
        fs::write(path.as_ref(), self.to_json())
            .map_err(|e| VaeError::Bundle(format!("writing {}: {e}", path.as_ref().display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, VaeError> {
        let text = fs::read_to_string(path.as_ref())
            .map_err(|e| VaeError::Bundle(format!("reading {}: {e}", path.as_ref().display())))?;
        Self::from_json(&text)
    }

    /// Rejects bundles whose tensors do not fit the declared configuration.
    pub fn check(&self) -> Result<(), VaeError> {
        if self.format != MODEL_FORMAT {
            return Err(VaeError::Bundle(format!("unexpected format {:?}", self.format)));
        }
        if self.version != MODEL_VERSION {
            return Err(VaeError::Bundle(format!("unsupported version {}", self.version)));
        }
        self.config.validate()?;
        let reference = ModelParams::init(&self.config, &self.layout, &mut ChaCha8Rng::seed_from_u64(0));
        let ours = self.params.tensors();
        let theirs = reference.tensors();
        if ours.len() != theirs.len() || ours.iter().zip(&theirs).any(|(a, b)| a.shape() != b.shape()) {
            return Err(VaeError::Mismatch("parameter shapes do not match the configuration".into()));
        }
        if ours.iter().any(|t| !t.all_finite()) {
            return Err(VaeError::NotFinite("model parameters"));
        }
        if self.layout.word_dim > 0 && self.embeddings.as_ref().map(EmbeddingTable::dim) != Some(self.layout.word_dim) {
            return Err(VaeError::Mismatch("embedding table missing or of the wrong width".into()));
        }
        Ok(())
    }
}

/// Encodes the user from their scenes and decodes `target_template`.
pub fn reconstruct_scene(model: &Model, user_scenes: &[Scene], target_template: &str) -> Result<Scene, VaeError> {
    model.template(target_template)?;
    let post = model.posterior(user_scenes)?;
    model.decode(&infer_mean(&post), target_template)
}

/// Withholds one object's position and predicts it from the rest.
pub fn place_missing_object(
    model: &Model,
    user_scenes: &[Scene],
    scene_index: usize,
    object_index: usize,
) -> Result<Vec<f64>, VaeError> {
    let Some(target) = user_scenes.get(scene_index) else {
        return Err(VaeError::MaskIndex {
            scene: scene_index,
            object: object_index,
        });
    };
    if object_index >= target.objects.len() {
        return Err(VaeError::MaskIndex {
            scene: scene_index,
            object: object_index,
        });
    }
    let mut scenes = user_scenes.to_vec();
    scenes[scene_index].objects[object_index].placed = false;
    let post = model.posterior(&scenes)?;
    let decoded = model.decode(&infer_mean(&post), &target.template)?;
    let name = &target.objects[object_index].name;
    let index = if decoded.objects.get(object_index).is_some_and(|o| &o.name == name) {
        object_index
    } else {
        decoded.index_of(name).ok_or_else(|| VaeError::Mismatch(format!("{name:?} is not in the template")))?
    };
    Ok(decoded.objects[index].position.clone())
}

/// Predicts a template the user has not arranged from their other scenes.
pub fn arrange_new_scene(model: &Model, example_scenes: &[Scene], new_template: &str) -> Result<Scene, VaeError> {
    reconstruct_scene(model, example_scenes, new_template)
}

/// Decodes with the preference vector set to zero.
pub fn no_prefs_variant(model: &Model, template: &str) -> Result<Scene, VaeError> {
    model.decode(&vec![0.0; model.latent_dim()], template)
}
