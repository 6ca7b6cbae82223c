//! Seeded synthetic users with known spatial preferences over four scene
//! templates, and the rule-based classifiers that read those preferences
//! back out of an arrangement.

pub mod layout;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{Dataset, ObjectInstance, Scene, SceneTemplate, TemplateObject, UserRecord};
use crate::semantics::{feature_vector, ObjectFeatures, Semantics};
use layout::Block;

pub const TEMPLATE_IDS: [&str; 4] = ["abstract1", "abstract2", "dining", "office"];

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("invalid user parameters: {0}")]
    Params(String),
    #[error("invalid user mix: {0}")]
    Mix(String),
    #[error("need at least one user")]
    NoUsers,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Handedness {
    Left,
    Right,
}

impl Handedness {
    /// `+1` for right-handed users.
    pub fn sign(self) -> f64 {
        match self {
            Handedness::Left => -1.0,
            Handedness::Right => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    ByColour,
    ByShape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticUserParams {
    pub handedness: Handedness,
    pub grouping: Grouping,
    pub compactness: f64,
    /// Placement noise standard deviation in metres (scaled per template by
    /// [`layout::NOISE_RATIO`]).
    pub sigma: f64,
    pub seed: u64,
}

impl SyntheticUserParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        let (lo, hi) = layout::COMPACTNESS_RANGE;
        if !(lo..=hi).contains(&self.compactness) {
            return Err(SynthError::Params(format!(
                "compactness {} outside [{lo}, {hi}]",
                self.compactness
            )));
        }
        if self.sigma.is_nan() || self.sigma < 0.0 {
            return Err(SynthError::Params(format!("sigma {} is negative", self.sigma)));
        }
        Ok(())
    }

    pub fn canonical(handedness: Handedness, grouping: Grouping) -> Self {
        Self {
            handedness,
            grouping,
            compactness: 1.0,
            sigma: 0.0,
            seed: 0,
        }
    }
}

/// Distribution users are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserMix {
    pub left_fraction: f64,
    pub colour_fraction: f64,
    pub compactness: (f64, f64),
    pub sigma: f64,
    /// Cycle through the four handedness/grouping combinations instead of
    /// drawing them, so every block of four users is balanced.
    pub stratified: bool,
}

impl Default for UserMix {
    fn default() -> Self {
        Self {
            left_fraction: 0.5,
            colour_fraction: 0.5,
            compactness: layout::DEFAULT_COMPACTNESS_DRAW,
            sigma: layout::DEFAULT_SIGMA,
            stratified: true,
        }
    }
}

impl UserMix {
    pub fn validate(&self) -> Result<(), SynthError> {
        for (name, f) in [("left_fraction", self.left_fraction), ("colour_fraction", self.colour_fraction)] {
            if !(0.0..=1.0).contains(&f) {
                return Err(SynthError::Mix(format!("{name} {f} outside [0, 1]")));
            }
        }
        let (lo, hi) = self.compactness;
        let (min, max) = layout::COMPACTNESS_RANGE;
        if !(lo <= hi && lo >= min && hi <= max) {
            return Err(SynthError::Mix(format!("compactness range ({lo}, {hi}) is empty or outside [{min}, {max}]")));
        }
        if self.sigma.is_nan() || self.sigma < 0.0 {
            return Err(SynthError::Mix(format!("sigma {} is negative", self.sigma)));
        }
        Ok(())
    }

    pub fn draw(&self, index: usize, rng: &mut impl Rng) -> SyntheticUserParams {
        let (handedness, grouping) = if self.stratified {
            (
                if index % 2 == 0 { Handedness::Right } else { Handedness::Left },
                if (index / 2) % 2 == 0 { Grouping::ByColour } else { Grouping::ByShape },
            )
        } else {
            (
                if rng.random::<f64>() < self.left_fraction { Handedness::Left } else { Handedness::Right },
                if rng.random::<f64>() < self.colour_fraction { Grouping::ByColour } else { Grouping::ByShape },
            )
        };
        let (lo, hi) = self.compactness;
        let compactness = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        SyntheticUserParams {
            handedness,
            grouping,
            compactness,
            sigma: self.sigma,
            seed: rng.random(),
        }
    }
}

fn blocks(template: &str) -> Option<&'static [Block]> {
    match template {
        "abstract1" => Some(&layout::ABSTRACT1),
        "abstract2" => Some(&layout::ABSTRACT2),
        _ => None,
    }
}

fn block_semantics(b: &Block) -> Semantics {
    Semantics::Features(
        feature_vector(&ObjectFeatures {
            size: b.size,
            rgb: b.rgb,
            shape: b.shape,
        })
        .vector,
    )
}

pub fn template(id: &str) -> Result<SceneTemplate, SynthError> {
    let objects = if let Some(bs) = blocks(id) {
        bs.iter()
            .map(|b| TemplateObject {
                name: b.name.to_string(),
                semantics: block_semantics(b),
            })
            .collect()
    } else {
        let roster: &[(&str, [f64; 2])] = match id {
            "dining" => &layout::DINING,
            "office" => &layout::OFFICE,
            _ => return Err(SynthError::UnknownTemplate(id.to_string())),
        };
        roster
            .iter()
            .map(|(name, _)| TemplateObject {
                name: name.to_string(),
                semantics: Semantics::word(name),
            })
            .collect()
    };
    Ok(SceneTemplate {
        id: id.to_string(),
        objects,
    })
}

pub fn templates() -> Vec<SceneTemplate> {
    TEMPLATE_IDS.iter().map(|id| template(id).expect("built-in template")).collect()
}

/// Noise-free arrangement of `template` for a user. Every object is placed,
/// including ones the generator withholds from datasets.
pub fn ground_truth_arrangement(params: &SyntheticUserParams, template_id: &str) -> Result<Scene, SynthError> {
    params.validate()?;
    let t = template(template_id)?;
    let side = params.handedness.sign();
    let c = params.compactness;
    let positions: Vec<[f64; 2]> = if let Some(bs) = blocks(template_id) {
        abstract_layout(bs, params.grouping, c)
    } else {
        let roster: &[(&str, [f64; 2])] = if template_id == "dining" {
            &layout::DINING
        } else {
            &layout::OFFICE
        };
        roster.iter().map(|(_, [x, y])| [side * c * x, c * y]).collect()
    };
    Ok(Scene {
        template: t.id,
        objects: t
            .objects
            .into_iter()
            .zip(positions)
            .map(|(o, p)| ObjectInstance {
                name: o.name,
                semantics: o.semantics,
                position: p.to_vec(),
                placed: true,
            })
            .collect(),
    })
}

fn far_line(b: &Block, grouping: Grouping) -> bool {
    match grouping {
        Grouping::ByColour => b.rgb == layout::RED,
        Grouping::ByShape => b.shape == crate::semantics::ShapeKind::Box,
    }
}

fn abstract_layout(bs: &[Block], grouping: Grouping, compactness: f64) -> Vec<[f64; 2]> {
    let mut out = vec![[0.0; 2]; bs.len()];
    for (line, y) in layout::LINE_Y.iter().enumerate() {
        let mut members: Vec<usize> = (0..bs.len()).filter(|&i| far_line(&bs[i], grouping) == (line == 0)).collect();
        members.sort_by(|&a, &b| bs[a].size.total_cmp(&bs[b].size));
        let centre = (members.len() as f64 - 1.0) / 2.0;
        for (k, &i) in members.iter().enumerate() {
            out[i] = [(k as f64 - centre) * layout::LINE_SPACING * compactness, *y];
        }
    }
    out
}

fn noise_ratio(template: &str) -> f64 {
    layout::NOISE_RATIO
        .iter()
        .find(|(t, _)| *t == template)
        .map_or(1.0, |(_, r)| *r)
}

/// Ground truth of every template, perturbed by the user's noise, with
/// withheld objects moved to the inventory.
pub fn user_scenes(params: &SyntheticUserParams) -> Result<Vec<Scene>, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut scenes = Vec::with_capacity(TEMPLATE_IDS.len());
    for id in TEMPLATE_IDS {
        let mut scene = ground_truth_arrangement(params, id)?;
        let sigma = params.sigma * noise_ratio(id);
        let normal = (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("sigma validated"));
        for o in &mut scene.objects {
            if id == "office" && layout::OFFICE_UNPLACED.contains(&o.name.as_str()) {
                o.placed = false;
                o.position = vec![0.0; 2];
                continue;
            }
            if let Some(n) = &normal {
                for v in &mut o.position {
                    *v += n.sample(&mut rng);
                }
            }
        }
        scenes.push(scene);
    }
    Ok(scenes)
}

pub fn generate_dataset(n_users: usize, mix: &UserMix, seed: u64) -> Result<Dataset, SynthError> {
    if n_users == 0 {
        return Err(SynthError::NoUsers);
    }
    mix.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut users = Vec::with_capacity(n_users);
    for i in 0..n_users {
        let params = mix.draw(i, &mut rng);
        users.push(UserRecord {
            id: format!("user_{i:03}"),
            scenes: user_scenes(&params)?,
            ground_truth: Some(params),
        });
    }
    Ok(Dataset {
        dim: 2,
        templates: templates(),
        users,
    })
}

// ---- rule-based readers -----------------------------------------------------

fn features(o: &ObjectInstance) -> Option<&[f64]> {
    match &o.semantics {
        Semantics::Features(v) if v.len() >= 5 => Some(v),
        _ => None,
    }
}

fn x_of(scene: &Scene, name: &str) -> Option<f64> {
    scene.position_of(name).map(|p| p[0])
}

/// Reads handedness from an arrangement: fork/knife sides for dining, mouse
/// side for office. Abstract scenes carry no handedness.
pub fn classify_handedness(scene: &Scene) -> Option<Handedness> {
    let score = match scene.template.as_str() {
        "dining" => x_of(scene, "knife")? - x_of(scene, "fork")?,
        "office" => x_of(scene, "mouse")? - x_of(scene, "keyboard")?,
        _ => return None,
    };
    if score > 0.0 {
        Some(Handedness::Right)
    } else if score < 0.0 {
        Some(Handedness::Left)
    } else {
        None
    }
}

/// Reads grouping mode from an abstract arrangement: whichever attribute
/// separates the two lines more.
pub fn classify_grouping(scene: &Scene) -> Option<Grouping> {
    let mut colour = [(0.0, 0usize); 2];
    let mut shape = [(0.0, 0usize); 2];
    for o in scene.objects.iter().filter(|o| o.placed) {
        let f = features(o)?;
        let y = o.position[1];
        let ci = usize::from(f[1] < f[3]);
        let si = usize::from(f[4] > 0.5);
        colour[ci].0 += y;
        colour[ci].1 += 1;
        shape[si].0 += y;
        shape[si].1 += 1;
    }
    let gap = |g: [(f64, usize); 2]| -> Option<f64> {
        if g[0].1 == 0 || g[1].1 == 0 {
            return None;
        }
        Some((g[0].0 / g[0].1 as f64 - g[1].0 / g[1].1 as f64).abs())
    };
    let (c, s) = (gap(colour)?, gap(shape)?);
    if c > s {
        Some(Grouping::ByColour)
    } else if s > c {
        Some(Grouping::ByShape)
    } else {
        None
    }
}

/// Largest distance between two points of the noise-free canonical
/// arrangement.
pub fn extent(template_id: &str) -> Result<f64, SynthError> {
    let s = ground_truth_arrangement(&SyntheticUserParams::canonical(Handedness::Right, Grouping::ByColour), template_id)?;
    let pts: Vec<&[f64]> = s.placed_positions().collect();
    let mut best: f64 = 0.0;
    for a in &pts {
        for b in &pts {
            best = best.max(crate::scene::dist(a, b));
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(h: Handedness, g: Grouping) -> SyntheticUserParams {
        SyntheticUserParams::canonical(h, g)
    }

    #[test]
    fn dining_mirror_images() {
        let r = ground_truth_arrangement(&params(Handedness::Right, Grouping::ByColour), "dining").unwrap();
        let l = ground_truth_arrangement(&params(Handedness::Left, Grouping::ByColour), "dining").unwrap();
        for (a, b) in r.objects.iter().zip(&l.objects) {
            assert_eq!(a.position[0], -b.position[0]);
            assert_eq!(a.position[1], b.position[1]);
        }
    }

    #[test]
    fn unit_compactness_uses_layout_constants() {
        let r = ground_truth_arrangement(&params(Handedness::Right, Grouping::ByColour), "dining").unwrap();
        for (o, (name, p)) in r.objects.iter().zip(layout::DINING) {
            assert_eq!(o.name, name);
            assert_eq!(o.position, p.to_vec());
        }
    }

    #[test]
    fn colour_and_shape_groupers_disagree() {
        let c = ground_truth_arrangement(&params(Handedness::Right, Grouping::ByColour), "abstract1").unwrap();
        let s = ground_truth_arrangement(&params(Handedness::Right, Grouping::ByShape), "abstract1").unwrap();
        let differ = c
            .objects
            .iter()
            .zip(&s.objects)
            .filter(|(a, b)| a.position[1] != b.position[1])
            .count();
        assert_eq!(differ, 5);
    }

    #[test]
    fn classifiers_recover_labels_without_noise() {
        for h in [Handedness::Left, Handedness::Right] {
            for g in [Grouping::ByColour, Grouping::ByShape] {
                let p = params(h, g);
                for id in TEMPLATE_IDS {
                    let s = ground_truth_arrangement(&p, id).unwrap();
                    if id.starts_with("abstract") {
                        assert_eq!(classify_handedness(&s), None, "{id}");
                        assert_eq!(classify_grouping(&s), Some(g), "{id}");
                    } else {
                        assert_eq!(classify_handedness(&s), Some(h), "{id}");
                    }
                }
            }
        }
    }

    #[test]
    fn zero_sigma_reproduces_ground_truth() {
        let p = SyntheticUserParams {
            seed: 99,
            ..params(Handedness::Left, Grouping::ByShape)
        };
        let scenes = user_scenes(&p).unwrap();
        for s in &scenes {
            let gt = ground_truth_arrangement(&p, &s.template).unwrap();
            for (a, b) in s.objects.iter().zip(&gt.objects) {
                if a.placed {
                    assert_eq!(a.position, b.position);
                }
            }
        }
        assert!(!scenes[3].objects.iter().find(|o| o.name == "laptop").unwrap().placed);
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let a = generate_dataset(6, &UserMix::default(), 7).unwrap().to_json();
        let b = generate_dataset(6, &UserMix::default(), 7).unwrap().to_json();
        let c = generate_dataset(6, &UserMix::default(), 8).unwrap().to_json();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(Dataset::from_json(&a).is_ok());
    }

    #[test]
    fn default_split_is_67_plus_8() {
        let ds = generate_dataset(75, &UserMix::default(), 1).unwrap();
        let (train, test) = ds.split_last(8);
        assert_eq!((train.users.len(), test.users.len()), (67, 8));
    }

    #[test]
    fn bad_inputs_rejected() {
        assert_eq!(generate_dataset(0, &UserMix::default(), 1).unwrap_err(), SynthError::NoUsers);
        let empty = UserMix {
            compactness: (1.2, 0.8),
            ..UserMix::default()
        };
        assert!(matches!(generate_dataset(3, &empty, 1), Err(SynthError::Mix(_))));
        let p = params(Handedness::Left, Grouping::ByShape);
        assert!(matches!(ground_truth_arrangement(&p, "kitchen"), Err(SynthError::UnknownTemplate(_))));
    }

    #[test]
    fn office_roster_is_in_the_bundled_vocabulary() {
        let table = crate::semantics::EmbeddingTable::bundled();
        for t in ["dining", "office"] {
            for o in template(t).unwrap().objects {
                assert!(o.semantics.raw_vector(Some(&table)).is_ok(), "{}", o.name);
            }
        }
    }
}
