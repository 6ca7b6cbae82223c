//! The comparison tasks run against synthetic users: reconstructing a known
//! scene, placing a missing or unseen object, and arranging a new scene.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{
    knn_place, scene_projection, static_position, template_semantics, user_copy, BaselineConfig, BaselineContext,
    BaselineError, CopyKind, KnnKind, StaticKind,
};
use crate::eval::{LinearSeparator, Summary};
use crate::posegraph::{self, PoseGraphError};
use crate::scene::{dist, Dataset, Scene, UserRecord};
use crate::semantics::EmbeddingTable;
use crate::synth::{self, classify_grouping, classify_handedness, Grouping, Handedness, SynthError};
use crate::vae::{self, Model, VaeError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{method} cannot {task}")]
    Unsupported { method: Method, task: &'static str },
    #[error("method {0} needs a trained model")]
    NoModel(Method),
    #[error("unknown method {0:?}")]
    UnknownMethod(String),
    #[error("user {0:?} has no {1:?} scene")]
    MissingScene(String, String),
    #[error("user {0:?} has no ground-truth parameters")]
    NoGroundTruth(String),
    #[error("{0}")]
    Empty(&'static str),
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    PoseGraph(#[from] PoseGraphError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Neatnet,
    NoPrefs,
    PositiveExample,
    RandomPosition,
    MeanPosition,
    MeanWithOffset,
    NearestNeighbour,
    WeightedKnn,
    KnnSceneProjection,
    RandomUser,
    PoseGraph,
}

impl Method {
    pub const ALL: [Method; 11] = [
        Method::Neatnet,
        Method::NoPrefs,
        Method::PositiveExample,
        Method::RandomPosition,
        Method::MeanPosition,
        Method::MeanWithOffset,
        Method::NearestNeighbour,
        Method::WeightedKnn,
        Method::KnnSceneProjection,
        Method::RandomUser,
        Method::PoseGraph,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Neatnet => "neatnet",
            Method::NoPrefs => "no_prefs",
            Method::PositiveExample => "positive_example",
            Method::RandomPosition => "random_position",
            Method::MeanPosition => "mean_position",
            Method::MeanWithOffset => "mean_with_offset",
            Method::NearestNeighbour => "nearest_neighbour",
            Method::WeightedKnn => "weighted_knn",
            Method::KnnSceneProjection => "knn_scene_projection",
            Method::RandomUser => "random_user",
            Method::PoseGraph => "pose_graph",
        }
    }

    pub fn needs_model(self) -> bool {
        matches!(self, Method::Neatnet | Method::NoPrefs)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == key)
            .ok_or_else(|| ExperimentError::UnknownMethod(s.to_string()))
    }
}

/// What every method may draw on.
#[derive(Clone, Copy, Debug)]
pub struct Resources<'a> {
    pub model: Option<&'a Model>,
    pub train: &'a Dataset,
    pub table: Option<&'a EmbeddingTable>,
    pub baseline: &'a BaselineConfig,
    pub seed: u64,
    pub pop_size: usize,
}

impl<'a> Resources<'a> {
    fn model(&self, method: Method) -> Result<&'a Model, ExperimentError> {
        self.model.ok_or(ExperimentError::NoModel(method))
    }

    fn ctx(&self, examples: &'a [Scene]) -> BaselineContext<'a> {
        BaselineContext {
            train: self.train,
            examples,
            seed: self.seed,
            table: self.table,
            config: self.baseline,
        }
    }
}

/// A full arrangement of `template` for a user who supplied `examples`.
pub fn arrange<'a>(
    method: Method,
    res: &Resources<'a>,
    examples: &'a [Scene],
    template: &str,
) -> Result<Scene, ExperimentError> {
    let ctx = res.ctx(examples);
    let tmpl = res.train.template(template).map_err(|_| BaselineError::UnknownTemplate(template.to_string()))?;
    match method {
        Method::Neatnet => Ok(vae::reconstruct_scene(res.model(method)?, examples, template)?),
        Method::NoPrefs => Ok(vae::no_prefs_variant(res.model(method)?, template)?),
        Method::PositiveExample => Ok(user_copy(CopyKind::PositiveExample, &ctx, template)?),
        Method::RandomUser => Ok(user_copy(CopyKind::RandomUser, &ctx, template)?),
        Method::KnnSceneProjection => {
            let source = examples
                .iter()
                .find(|s| s.template != template && s.placed_count() > 0)
                .or_else(|| examples.iter().find(|s| s.placed_count() > 0))
                .ok_or(ExperimentError::Empty("no example scene to project from"))?;
            Ok(scene_projection(&ctx, source, tmpl)?.0)
        }
        Method::PoseGraph => {
            let scenes: Vec<Scene> = res.train.scenes_of(template).cloned().collect();
            let model = posegraph::fit_pose_graph(&scenes, res.seed)?;
            let tree = posegraph::select_tree(&model);
            let mut rng = ChaCha8Rng::seed_from_u64(res.seed);
            let positions = posegraph::tidy(&model, &tree, res.pop_size, &mut rng)?;
            let mut out = tmpl.empty_scene(res.train.dim);
            for (name, p) in model.roster.iter().zip(positions) {
                if let Some(o) = out.objects.iter_mut().find(|o| &o.name == name) {
                    o.position = p;
                    o.placed = true;
                }
            }
            Ok(out)
        }
        Method::MeanPosition | Method::RandomPosition => {
            let kind = if method == Method::MeanPosition { StaticKind::Mean } else { StaticKind::Random };
            let mut out = tmpl.empty_scene(res.train.dim);
            let probe = out.clone();
            for o in &mut out.objects {
                match static_position(kind, &ctx, &probe, &o.name) {
                    Ok(p) => {
                        o.position = p;
                        o.placed = true;
                    }
                    Err(BaselineError::UnknownObject(_)) => {}
                    Err(e) => return Err(e.into()),
                }
            }
            Ok(out)
        }
        Method::MeanWithOffset | Method::NearestNeighbour | Method::WeightedKnn => Err(ExperimentError::Unsupported {
            method,
            task: "arrange a whole scene",
        }),
    }
}

/// Where object `object_index` of `examples[scene_index]` goes when its own
/// position is withheld.
pub fn place(
    method: Method,
    res: &Resources<'_>,
    examples: &[Scene],
    scene_index: usize,
    object_index: usize,
) -> Result<Vec<f64>, ExperimentError> {
    let target = examples
        .get(scene_index)
        .ok_or(ExperimentError::Empty("scene index out of range"))?;
    let object = target
        .objects
        .get(object_index)
        .ok_or(ExperimentError::Empty("object index out of range"))?;
    let mut masked = examples.to_vec();
    masked[scene_index].objects[object_index].placed = false;
    let scene = &masked[scene_index];
    let ctx = res.ctx(&masked);
    let name = object.name.as_str();
    match method {
        Method::Neatnet => Ok(vae::place_missing_object(res.model(method)?, examples, scene_index, object_index)?),
        Method::NoPrefs => {
            let s = vae::no_prefs_variant(res.model(method)?, &target.template)?;
            Ok(s.objects[object_index].position.clone())
        }
        Method::MeanPosition => Ok(static_position(StaticKind::Mean, &ctx, scene, name)?),
        Method::RandomPosition => Ok(static_position(StaticKind::Random, &ctx, scene, name)?),
        Method::MeanWithOffset => Ok(static_position(StaticKind::MeanWithOffset, &ctx, scene, name)?),
        Method::NearestNeighbour | Method::WeightedKnn => {
            let kind = if method == Method::NearestNeighbour { KnnKind::Nearest } else { KnnKind::WeightedKnn };
            let semantics = template_semantics(res.train, &target.template, name)
                .cloned()
                .unwrap_or_else(|_| object.semantics.clone());
            Ok(knn_place(kind, &ctx, scene, name, &semantics)?.position)
        }
        Method::RandomUser => {
            let copy = user_copy(CopyKind::RandomUser, &ctx, &target.template)?;
            copy.position_of(name)
                .map(<[f64]>::to_vec)
                .ok_or_else(|| BaselineError::UnknownObject(name.to_string()).into())
        }
        Method::PoseGraph => {
            let scenes: Vec<Scene> = res.train.scenes_of(&target.template).cloned().collect();
            let model = posegraph::fit_pose_graph(&scenes, res.seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(res.seed);
            Ok(posegraph::place_object(&model, scene, name, res.pop_size, &mut rng)?)
        }
        Method::PositiveExample | Method::KnnSceneProjection => Err(ExperimentError::Unsupported {
            method,
            task: "place a single withheld object",
        }),
    }
}

/// Mean distance between same-named placed objects of two scenes.
pub fn scene_error(predicted: &Scene, truth: &Scene) -> Option<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for t in truth.objects.iter().filter(|o| o.placed) {
        if let Some(p) = predicted.objects.iter().find(|o| o.name == t.name && o.placed) {
            total += dist(&p.position, &t.position);
            n += 1;
        }
    }
    (n > 0).then(|| total / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodErrors {
    pub method: Method,
    /// `None` when the method ran on no case.
    pub summary: Option<Summary>,
    pub errors: Vec<f64>,
    /// Cases the method could not handle, with the reason.
    pub skipped: Vec<String>,
}

impl MethodErrors {
    fn new(method: Method) -> Self {
        Self {
            method,
            summary: None,
            errors: Vec::new(),
            skipped: Vec::new(),
        }
    }

    fn finish(mut self) -> Self {
        self.summary = Summary::of(&self.errors);
        self
    }

    pub fn mean(&self) -> Option<f64> {
        self.summary.map(|s| s.mean)
    }
}

/// Per-method error summaries in metres.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorTable {
    pub rows: Vec<MethodErrors>,
}

impl ErrorTable {
    pub fn get(&self, method: Method) -> Option<&MethodErrors> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn mean(&self, method: Method) -> Option<f64> {
        self.get(method).and_then(MethodErrors::mean)
    }
}

impl fmt::Display for ErrorTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.rows {
            match &r.summary {
                Some(s) => writeln!(f, "{:<22} {s}", r.method.name())?,
                None => writeln!(f, "{:<22} n/a", r.method.name())?,
            }
        }
        Ok(())
    }
}

fn scene_of<'u>(user: &'u UserRecord, template: &str) -> Result<&'u Scene, ExperimentError> {
    user.scene(template)
        .ok_or_else(|| ExperimentError::MissingScene(user.id.clone(), template.to_string()))
}

/// Scenes of `user` restricted to `templates`.
pub fn examples_of(user: &UserRecord, templates: &[&str]) -> Vec<Scene> {
    user.scenes
        .iter()
        .filter(|s| templates.contains(&s.template.as_str()) && s.placed_count() > 0)
        .cloned()
        .collect()
}

fn model_templates(res: &Resources<'_>) -> Vec<String> {
    match res.model {
        Some(m) => m.templates.iter().map(|t| t.id.clone()).collect(),
        None => res.train.templates.iter().map(|t| t.id.clone()).collect(),
    }
}

/// Fraction of predicted scenes whose read-back preference matches the
/// user's ground truth.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PreferenceAccuracy {
    pub handedness: Option<f64>,
    pub grouping: Option<f64>,
}

#[derive(Default)]
struct Tally {
    hand: (usize, usize),
    group: (usize, usize),
}

impl Tally {
    fn add(&mut self, scene: &Scene, user: &UserRecord) {
        let Some(gt) = &user.ground_truth else { return };
        if let Some(h) = classify_handedness(scene) {
            self.hand.1 += 1;
            self.hand.0 += usize::from(h == gt.handedness);
        } else if matches!(scene.template.as_str(), "dining" | "office") {
            self.hand.1 += 1;
        }
        if let Some(g) = classify_grouping(scene) {
            self.group.1 += 1;
            self.group.0 += usize::from(g == gt.grouping);
        } else if scene.template.starts_with("abstract") {
            self.group.1 += 1;
        }
    }

    fn finish(self) -> PreferenceAccuracy {
        let frac = |(a, b): (usize, usize)| (b > 0).then(|| a as f64 / b as f64);
        PreferenceAccuracy {
            handedness: frac(self.hand),
            grouping: frac(self.group),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrangementReport {
    pub errors: ErrorTable,
    pub preferences: Vec<(Method, PreferenceAccuracy)>,
}

/// Reconstructs each of the user's own scenes from all of their examples
/// and scores against what they arranged.
pub fn reconstruction(
    res: &Resources<'_>,
    users: &[UserRecord],
    templates: &[&str],
    methods: &[Method],
) -> Result<ArrangementReport, ExperimentError> {
    let mut errors = ErrorTable::default();
    let mut preferences = Vec::new();
    let allowed = model_templates(res);
    let allowed: Vec<&str> = allowed.iter().map(String::as_str).collect();
    for &method in methods {
        let mut row = MethodErrors::new(method);
        let mut tally = Tally::default();
        for user in users {
            let examples = examples_of(user, &allowed);
            for &template in templates {
                let truth = scene_of(user, template)?;
                match arrange(method, res, &examples, template) {
                    Ok(pred) => {
                        if let Some(e) = scene_error(&pred, truth) {
                            row.errors.push(e);
                        }
                        tally.add(&pred, user);
                    }
                    Err(e @ (ExperimentError::Unsupported { .. } | ExperimentError::Baseline(_))) => {
                        row.skipped.push(format!("{}/{template}: {e}", user.id));
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        errors.rows.push(row.finish());
        preferences.push((method, tally.finish()));
    }
    Ok(ArrangementReport { errors, preferences })
}

/// Withholds every placed object of `template` in turn and scores the
/// predicted position against where the user put it.
pub fn missing_object(
    res: &Resources<'_>,
    users: &[UserRecord],
    template: &str,
    methods: &[Method],
) -> Result<ErrorTable, ExperimentError> {
    let allowed = model_templates(res);
    let allowed: Vec<&str> = allowed.iter().map(String::as_str).collect();
    let mut table = ErrorTable::default();
    for &method in methods {
        let mut row = MethodErrors::new(method);
        for user in users {
            let examples = examples_of(user, &allowed);
            let si = examples
                .iter()
                .position(|s| s.template == template)
                .ok_or_else(|| ExperimentError::MissingScene(user.id.clone(), template.to_string()))?;
            for (oi, o) in examples[si].objects.iter().enumerate().filter(|(_, o)| o.placed) {
                match place(method, res, &examples, si, oi) {
                    Ok(p) => row.errors.push(dist(&p, &o.position)),
                    Err(e @ (ExperimentError::Unsupported { .. } | ExperimentError::Baseline(_))) => {
                        row.skipped.push(format!("{}/{}: {e}", user.id, o.name));
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        table.rows.push(row.finish());
    }
    Ok(table)
}

/// Places an object no training arrangement contains and scores it against
/// the generator's noise-free position for the user.
pub fn unseen_object(
    res: &Resources<'_>,
    users: &[UserRecord],
    template: &str,
    object: &str,
    methods: &[Method],
) -> Result<ErrorTable, ExperimentError> {
    let allowed = model_templates(res);
    let allowed: Vec<&str> = allowed.iter().map(String::as_str).collect();
    let mut table = ErrorTable::default();
    for &method in methods {
        let mut row = MethodErrors::new(method);
        for user in users {
            let gt = user
                .ground_truth
                .as_ref()
                .ok_or_else(|| ExperimentError::NoGroundTruth(user.id.clone()))?;
            let truth = synth::ground_truth_arrangement(gt, template)?;
            let want = truth
                .position_of(object)
                .ok_or_else(|| BaselineError::NotInTemplate(object.to_string(), template.to_string()))?
                .to_vec();
            let examples = examples_of(user, &allowed);
            let si = examples
                .iter()
                .position(|s| s.template == template)
                .ok_or_else(|| ExperimentError::MissingScene(user.id.clone(), template.to_string()))?;
            let oi = examples[si]
                .index_of(object)
                .ok_or_else(|| BaselineError::NotInTemplate(object.to_string(), template.to_string()))?;
            match place(method, res, &examples, si, oi) {
                Ok(p) => row.errors.push(dist(&p, &want)),
                Err(e @ (ExperimentError::Unsupported { .. } | ExperimentError::Baseline(_))) => {
                    row.skipped.push(format!("{}: {e}", user.id));
                }
                Err(e) => return Err(e),
            }
        }
        table.rows.push(row.finish());
    }
    Ok(table)
}

/// Shows each user's `source` scene only and predicts `target`.
pub fn new_scene(
    res: &Resources<'_>,
    users: &[UserRecord],
    source: &str,
    target: &str,
    methods: &[Method],
) -> Result<ArrangementReport, ExperimentError> {
    let mut errors = ErrorTable::default();
    let mut preferences = Vec::new();
    for &method in methods {
        let mut row = MethodErrors::new(method);
        let mut tally = Tally::default();
        for user in users {
            let examples = vec![scene_of(user, source)?.clone()];
            let truth = scene_of(user, target)?;
            match arrange(method, res, &examples, target) {
                Ok(pred) => {
                    if let Some(e) = scene_error(&pred, truth) {
                        row.errors.push(e);
                    }
                    tally.add(&pred, user);
                }
                Err(e @ (ExperimentError::Unsupported { .. } | ExperimentError::Baseline(_))) => {
                    row.skipped.push(format!("{}: {e}", user.id));
                }
                Err(e) => return Err(e),
            }
        }
        errors.rows.push(row.finish());
        preferences.push((method, tally.finish()));
    }
    Ok(ArrangementReport { errors, preferences })
}

/// Per-user distances to the noise-free arrangement, before and after
/// reconstruction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoisingReport {
    pub input_error: Vec<f64>,
    pub reconstruction_error: Vec<f64>,
    /// Users whose reconstruction is strictly closer than their input.
    pub improved_fraction: f64,
}

pub fn denoising(model: &Model, users: &[UserRecord]) -> Result<DenoisingReport, ExperimentError> {
    if users.is_empty() {
        return Err(ExperimentError::Empty("no users to denoise"));
    }
    let ids: Vec<String> = model.templates.iter().map(|t| t.id.clone()).collect();
    let ids: Vec<&str> = ids.iter().map(String::as_str).collect();
    let mut input_error = Vec::new();
    let mut reconstruction_error = Vec::new();
    for user in users {
        let gt = user
            .ground_truth
            .as_ref()
            .ok_or_else(|| ExperimentError::NoGroundTruth(user.id.clone()))?;
        let examples = examples_of(user, &ids);
        let post = model.posterior(&examples)?;
        let u = vae::infer_mean(&post);
        let (mut before, mut after, mut n) = (0.0, 0.0, 0usize);
        for s in &examples {
            let clean = synth::ground_truth_arrangement(gt, &s.template)?;
            let recon = model.decode(&u, &s.template)?;
            for o in s.objects.iter().filter(|o| o.placed) {
                let Some(c) = clean.position_of(&o.name) else { continue };
                let Some(r) = recon.position_of(&o.name) else { continue };
                before += dist(&o.position, c);
                after += dist(r, c);
                n += 1;
            }
        }
        if n == 0 {
            return Err(ExperimentError::Empty("user has no placed objects"));
        }
        input_error.push(before / n as f64);
        reconstruction_error.push(after / n as f64);
    }
    let improved = input_error.iter().zip(&reconstruction_error).filter(|(i, r)| r < i).count();
    Ok(DenoisingReport {
        improved_fraction: improved as f64 / users.len() as f64,
        input_error,
        reconstruction_error,
    })
}

/// Held-out accuracy of linear separators fit on training posterior means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityReport {
    pub handedness_train: f64,
    pub handedness_test: f64,
    pub grouping_train: f64,
    pub grouping_test: f64,
}

/// Posterior mean per user, encoded from the scenes the model knows.
pub fn latent_means(model: &Model, users: &[UserRecord]) -> Result<Vec<Vec<f64>>, ExperimentError> {
    let ids: Vec<String> = model.templates.iter().map(|t| t.id.clone()).collect();
    let ids: Vec<&str> = ids.iter().map(String::as_str).collect();
    users
        .iter()
        .map(|u| Ok(vae::infer_mean(&model.posterior(&examples_of(u, &ids))?)))
        .collect()
}

pub fn separability(model: &Model, train: &[UserRecord], test: &[UserRecord]) -> Result<SeparabilityReport, ExperimentError> {
    let labels = |users: &[UserRecord]| -> Result<(Vec<bool>, Vec<bool>), ExperimentError> {
        users
            .iter()
            .map(|u| {
                let gt = u.ground_truth.as_ref().ok_or_else(|| ExperimentError::NoGroundTruth(u.id.clone()))?;
                Ok((gt.handedness == Handedness::Left, gt.grouping == Grouping::ByColour))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(|v| v.into_iter().unzip())
    };
    let (tr_mu, te_mu) = (latent_means(model, train)?, latent_means(model, test)?);
    let (tr_h, tr_g) = labels(train)?;
    let (te_h, te_g) = labels(test)?;
    let sep_h = LinearSeparator::fit(&tr_mu, &tr_h).ok_or(ExperimentError::Empty("handedness labels are one class"))?;
    let sep_g = LinearSeparator::fit(&tr_mu, &tr_g).ok_or(ExperimentError::Empty("grouping labels are one class"))?;
    Ok(SeparabilityReport {
        handedness_train: sep_h.accuracy(&tr_mu, &tr_h),
        handedness_test: sep_h.accuracy(&te_mu, &te_h),
        grouping_train: sep_g.accuracy(&tr_mu, &tr_g),
        grouping_test: sep_g.accuracy(&te_mu, &te_g),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, UserMix};

    fn noiseless(n: usize) -> Dataset {
        let mix = UserMix {
            sigma: 0.0,
            ..UserMix::default()
        };
        generate_dataset(n, &mix, 3).unwrap()
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert_eq!("Mean-Position".parse::<Method>().unwrap(), Method::MeanPosition);
        assert!("nope".parse::<Method>().is_err());
    }

    #[test]
    fn positive_example_reconstructs_exactly() {
        let ds = noiseless(6);
        let (train, test) = ds.split_last(2);
        let cfg = BaselineConfig::default();
        let res = Resources {
            model: None,
            train: &train,
            table: None,
            baseline: &cfg,
            seed: 0,
            pop_size: 10,
        };
        let report = reconstruction(&res, &test.users, &["dining", "abstract1"], &[Method::PositiveExample]).unwrap();
        assert_eq!(report.errors.mean(Method::PositiveExample), Some(0.0));
        let prefs = &report.preferences[0].1;
        assert_eq!(prefs.handedness, Some(1.0));
        assert_eq!(prefs.grouping, Some(1.0));
    }

    #[test]
    fn neural_methods_need_a_model() {
        let ds = noiseless(4);
        let cfg = BaselineConfig::default();
        let res = Resources {
            model: None,
            train: &ds,
            table: None,
            baseline: &cfg,
            seed: 0,
            pop_size: 10,
        };
        let err = arrange(Method::Neatnet, &res, &ds.users[0].scenes, "dining").unwrap_err();
        assert!(matches!(err, ExperimentError::NoModel(Method::Neatnet)));
    }

    #[test]
    fn whole_scene_unsupported_for_object_methods() {
        let ds = noiseless(4);
        let cfg = BaselineConfig::default();
        let res = Resources {
            model: None,
            train: &ds,
            table: None,
            baseline: &cfg,
            seed: 0,
            pop_size: 10,
        };
        let err = arrange(Method::NearestNeighbour, &res, &ds.users[0].scenes, "dining").unwrap_err();
        assert!(matches!(err, ExperimentError::Unsupported { .. }));
    }

    #[test]
    fn mean_position_beats_random_on_missing_objects() {
        let ds = generate_dataset(24, &UserMix::default(), 4).unwrap();
        let (train, test) = ds.split_last(4);
        let cfg = BaselineConfig::default();
        let table = EmbeddingTable::bundled();
        let res = Resources {
            model: None,
            train: &train,
            table: Some(&table),
            baseline: &cfg,
            seed: 1,
            pop_size: 50,
        };
        let t = missing_object(
            &res,
            &test.users,
            "dining",
            &[Method::MeanPosition, Method::RandomPosition, Method::PoseGraph, Method::WeightedKnn],
        )
        .unwrap();
        assert_eq!(t.get(Method::MeanPosition).unwrap().errors.len(), 4 * 7);
        assert!(t.mean(Method::MeanPosition).unwrap() < t.mean(Method::RandomPosition).unwrap());
        assert!(t.mean(Method::PoseGraph).is_some());
    }

    #[test]
    fn scene_error_ignores_unplaced() {
        let ds = noiseless(1);
        let s = ds.users[0].scene("office").unwrap();
        let mut moved = s.clone();
        let li = moved.index_of("laptop").unwrap();
        moved.objects[li].position = vec![9.0, 9.0];
        assert_eq!(scene_error(&moved, s), Some(0.0));
    }
}
