//! Probabilistic pose graph: pairwise displacement mixtures learned from
//! example arrangements, a tidiness cost built from them, and a sampling
//! optimiser that grows arrangements along a spanning tree.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::Scene;

pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const DENSITY_FLOOR: f64 = 1e-12;
pub const EM_TOLERANCE: f64 = 1e-7;
pub const EM_MAX_ITERS: usize = 200;
pub const MAX_COMPONENTS: usize = 3;
pub const DEFAULT_POPULATION: usize = 1000;

#[derive(Debug, Error, PartialEq)]
pub enum PoseGraphError {
    #[error("{k} components need at least {k} points, got {n}")]
    TooFewPoints { k: usize, n: usize },
    #[error("no points")]
    NoPoints,
    #[error("points have mixed dimensions")]
    Ragged,
    #[error("need at least two scenes, got {0}")]
    TooFewScenes(usize),
    #[error("scene {0} does not share the roster of the first scene")]
    Roster(usize),
    #[error("objects {0:?} and {1:?} appear together in fewer than two scenes")]
    SparsePair(String, String),
    #[error("population must be at least 1")]
    Population,
    #[error("component count must be at least 1")]
    Components,
    #[error("tree does not span the roster")]
    Tree,
    #[error("non-finite value in {0}")]
    NotFinite(&'static str),
    #[error("{0:?} is not in the roster")]
    UnknownObject(String),
}

/// Gaussian mixture over `D`-dimensional points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gmm {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Row-major `D x D` covariance per component.
    pub covariances: Vec<Vec<Vec<f64>>>,
}

/// Per-component quantities reused across density evaluations.
#[derive(Clone, Debug)]
struct Component {
    log_weight: f64,
    mean: DVector<f64>,
    precision: DMatrix<f64>,
    chol: DMatrix<f64>,
    log_norm: f64,
}

/// A mixture ready for repeated density evaluation and sampling.
#[derive(Clone, Debug)]
pub struct PreparedGmm {
    dim: usize,
    components: Vec<Component>,
    cumulative: Vec<f64>,
}

fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let d = rows.len();
    DMatrix::from_fn(d, d, |i, j| rows[i][j])
}

fn from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

/// Symmetrises `m` and lifts every eigenvalue to at least `floor`.
pub fn floor_covariance(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| if v.is_finite() { v.max(floor) } else { floor });
    let q = eig.eigenvectors;
    let out = &q * DMatrix::from_diagonal(&vals) * q.transpose();
    (&out + out.transpose()) * 0.5
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

impl Gmm {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    /// A single Gaussian.
    pub fn gaussian(mean: Vec<f64>, covariance: Vec<Vec<f64>>) -> Self {
        Self {
            weights: vec![1.0],
            means: vec![mean],
            covariances: vec![covariance],
        }
    }

    /// The same mixture over negated points.
    pub fn negated(&self) -> Self {
        Self {
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| m.iter().map(|v| -v).collect()).collect(),
            covariances: self.covariances.clone(),
        }
    }

    /// Free parameters: `K-1` weights, `K·D` means, `K·D(D+1)/2` covariances.
    pub fn free_parameters(&self) -> usize {
        let (k, d) = (self.components(), self.dim());
        k - 1 + k * d + k * d * (d + 1) / 2
    }

    pub fn prepare(&self) -> PreparedGmm {
        let dim = self.dim();
        let components: Vec<Component> = self
            .weights
            .iter()
            .zip(&self.means)
            .zip(&self.covariances)
            .map(|((&w, m), c)| {
                let cov = floor_covariance(&to_matrix(c), VARIANCE_FLOOR);
                let chol = cov.clone().cholesky().expect("floored covariance is positive definite");
                let l = chol.l();
                let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
                Component {
                    log_weight: w.ln(),
                    mean: DVector::from_column_slice(m),
                    precision: chol.inverse(),
                    chol: l,
                    log_norm: -0.5 * (dim as f64 * (2.0 * std::f64::consts::PI).ln() + log_det),
                }
            })
            .collect();
        let mut acc = 0.0;
        let cumulative = self
            .weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        PreparedGmm {
            dim,
            components,
            cumulative,
        }
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        self.prepare().log_density(z)
    }
}

impl PreparedGmm {
    pub fn log_density(&self, z: &[f64]) -> f64 {
        let x = DVector::from_column_slice(z);
        let terms: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                let d = &x - &c.mean;
                c.log_weight + c.log_norm - 0.5 * (d.transpose() * &c.precision * &d)[(0, 0)]
            })
            .collect();
        log_sum_exp(&terms)
    }

    /// `-ln p(z)` with the density floored at [`DENSITY_FLOOR`].
    pub fn cost(&self, z: &[f64]) -> f64 {
        -self.log_density(z).max(DENSITY_FLOOR.ln())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let u: f64 = rng.random::<f64>() * self.cumulative.last().copied().unwrap_or(1.0);
        let k = self.cumulative.iter().position(|&c| u < c).unwrap_or(self.components.len() - 1);
        let c = &self.components[k];
        let eps = DVector::from_fn(self.dim, |_, _| StandardNormal.sample(rng));
        let x = &c.mean + &c.chol * eps;
        x.iter().copied().collect()
    }
}

/// Negative log-likelihood of displacement `z` under `gmm`.
pub fn edge_cost(gmm: &Gmm, z: &[f64]) -> f64 {
    gmm.prepare().cost(z)
}

/// A fitted mixture with its log-likelihood trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmFit {
    pub gmm: Gmm,
    pub log_likelihood: f64,
    /// Log-likelihood after each EM iteration.
    pub history: Vec<f64>,
}

fn check_points(points: &[Vec<f64>]) -> Result<usize, PoseGraphError> {
    let d = points.first().ok_or(PoseGraphError::NoPoints)?.len();
    if points.iter().any(|p| p.len() != d) {
        return Err(PoseGraphError::Ragged);
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(PoseGraphError::NotFinite("points"));
    }
    Ok(d)
}

fn total_log_likelihood(gmm: &PreparedGmm, points: &[Vec<f64>]) -> f64 {
    points.iter().map(|p| gmm.log_density(p)).sum()
}

/// k-means++ seeding: the first centre uniformly, then proportional to the
/// squared distance to the nearest chosen centre.
fn seed_centres(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut centres = vec![points[rng.random_range(0..points.len())].clone()];
    while centres.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                centres
                    .iter()
                    .map(|c| p.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = d2.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if u < *w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        centres.push(points[idx].clone());
    }
    centres
}

fn sample_covariance(points: &[Vec<f64>], resp: Option<(&[f64], f64)>, mean: &[f64]) -> DMatrix<f64> {
    let d = mean.len();
    let mut cov = DMatrix::zeros(d, d);
    for (n, p) in points.iter().enumerate() {
        let w = resp.map_or(1.0, |(r, _)| r[n]);
        let diff = DVector::from_iterator(d, p.iter().zip(mean).map(|(a, b)| a - b));
        cov += &diff * diff.transpose() * w;
    }
    let total = resp.map_or(points.len() as f64, |(_, t)| t);
    cov / total
}

/// Expectation-maximisation for a `k`-component mixture.
pub fn em_fit(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Result<EmFit, PoseGraphError> {
    if k == 0 {
        return Err(PoseGraphError::Components);
    }
    let d = check_points(points)?;
    let n = points.len();
    if k > n {
        return Err(PoseGraphError::TooFewPoints { k, n });
    }
    let overall_mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
    let overall_cov = floor_covariance(&sample_covariance(points, None, &overall_mean), VARIANCE_FLOOR);
    if k == 1 {
        let gmm = Gmm::gaussian(overall_mean, from_matrix(&overall_cov));
        let ll = total_log_likelihood(&gmm.prepare(), points);
        return Ok(EmFit {
            gmm,
            log_likelihood: ll,
            history: vec![ll],
        });
    }
    let mut gmm = Gmm {
        weights: vec![1.0 / k as f64; k],
        means: seed_centres(points, k, rng),
        covariances: vec![from_matrix(&overall_cov); k],
    };
    let mut history = Vec::new();
    let mut prev = f64::NEG_INFINITY;
    for _ in 0..EM_MAX_ITERS {
        // E-step
        let prepared = gmm.prepare();
        let mut resp = vec![vec![0.0; n]; k];
        let mut ll = 0.0;
        for (i, p) in points.iter().enumerate() {
            let x = DVector::from_column_slice(p);
            let terms: Vec<f64> = prepared
                .components
                .iter()
                .map(|c| {
                    let diff = &x - &c.mean;
                    c.log_weight + c.log_norm - 0.5 * (diff.transpose() * &c.precision * &diff)[(0, 0)]
                })
                .collect();
            let lse = log_sum_exp(&terms);
            ll += lse;
            for (c, t) in terms.iter().enumerate() {
                resp[c][i] = (t - lse).exp();
            }
        }
        history.push(ll);
        let converged = prev.is_finite() && (ll - prev).abs() <= EM_TOLERANCE * ll.abs().max(1.0);
        prev = ll;
        if converged {
            break;
        }
        // M-step
        for c in 0..k {
            let nk: f64 = resp[c].iter().sum();
            if nk < 1e-10 {
                gmm.weights[c] = 0.0;
                continue;
            }
            let mean: Vec<f64> = (0..d)
                .map(|j| points.iter().zip(&resp[c]).map(|(p, r)| r * p[j]).sum::<f64>() / nk)
                .collect();
            let cov = floor_covariance(&sample_covariance(points, Some((&resp[c], nk)), &mean), VARIANCE_FLOOR);
            gmm.weights[c] = nk / n as f64;
            gmm.means[c] = mean;
            gmm.covariances[c] = from_matrix(&cov);
        }
        let total: f64 = gmm.weights.iter().sum();
        for w in &mut gmm.weights {
            *w /= total;
        }
    }
    // drop components that lost all their mass
    let keep: Vec<usize> = (0..k).filter(|&c| gmm.weights[c] > 0.0).collect();
    if keep.len() < k {
        gmm = Gmm {
            weights: keep.iter().map(|&c| gmm.weights[c]).collect(),
            means: keep.iter().map(|&c| gmm.means[c].clone()).collect(),
            covariances: keep.iter().map(|&c| gmm.covariances[c].clone()).collect(),
        };
    }
    let ll = total_log_likelihood(&gmm.prepare(), points);
    Ok(EmFit {
        gmm,
        log_likelihood: ll,
        history,
    })
}

/// `m ln N - 2 ln L`.
pub fn bic(gmm: &Gmm, points: &[Vec<f64>]) -> Result<f64, PoseGraphError> {
    check_points(points)?;
    let ll = total_log_likelihood(&gmm.prepare(), points);
    Ok(gmm.free_parameters() as f64 * (points.len() as f64).ln() - 2.0 * ll)
}

/// Fits `1..=MAX_COMPONENTS` components and keeps the lowest BIC.
pub fn fit_by_bic(points: &[Vec<f64>], rng: &mut impl Rng) -> Result<(Gmm, f64), PoseGraphError> {
    check_points(points)?;
    let mut best: Option<(Gmm, f64)> = None;
    for k in 1..=MAX_COMPONENTS.min(points.len()) {
        let fit = em_fit(points, k, rng)?;
        let score = bic(&fit.gmm, points)?;
        if best.as_ref().is_none_or(|(_, b)| score < *b) {
            best = Some((fit.gmm, score));
        }
    }
    best.ok_or(PoseGraphError::NoPoints)
}

/// Mixture over displacements from object `i` to object `j` (`i < j`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub gmm: Gmm,
    pub bic: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseGraphModel {
    pub template: String,
    pub roster: Vec<String>,
    /// Divides metre displacements before fitting.
    pub scale: f64,
    /// Mean training position per roster object, in metres.
    pub mean_positions: Vec<Vec<f64>>,
    /// Upper triangle in row order: (0,1), (0,2), ..., (n-2,n-1).
    pub edges: Vec<Edge>,
}

fn pair_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < n);
    i * n - i * (i + 1) / 2 + (j - i - 1)
}

impl PoseGraphModel {
    pub fn len(&self) -> usize {
        self.roster.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roster.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.roster.iter().position(|r| r == name)
    }

    /// Mixture over displacements from `i` to `j`, for either order.
    pub fn edge(&self, i: usize, j: usize) -> Gmm {
        if i < j {
            self.edges[pair_index(self.len(), i, j)].gmm.clone()
        } else {
            self.edges[pair_index(self.len(), j, i)].gmm.negated()
        }
    }

    pub fn bic(&self, i: usize, j: usize) -> f64 {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        self.edges[pair_index(self.len(), a, b)].bic
    }

    fn prepared(&self) -> Vec<PreparedGmm> {
        self.edges.iter().map(|e| e.gmm.prepare()).collect()
    }

    /// Tidiness cost of an arrangement in metres, one position per roster
    /// object: the summed negative log-likelihood over unordered pairs.
    pub fn global_cost(&self, positions: &[Vec<f64>]) -> Result<f64, PoseGraphError> {
        if positions.len() != self.len() {
            return Err(PoseGraphError::Tree);
        }
        let prepared = self.prepared();
        let scaled: Vec<Vec<f64>> = positions.iter().map(|p| p.iter().map(|v| v / self.scale).collect()).collect();
        let mut total = 0.0;
        for e in &self.edges {
            let z: Vec<f64> = scaled[e.j].iter().zip(&scaled[e.i]).map(|(a, b)| a - b).collect();
            total += prepared[pair_index(self.len(), e.i, e.j)].cost(&z);
        }
        Ok(total)
    }
}

/// Learns every pairwise displacement distribution from `scenes`, which
/// must share one roster.
pub fn fit_pose_graph(scenes: &[Scene], seed: u64) -> Result<PoseGraphModel, PoseGraphError> {
    if scenes.len() < 2 {
        return Err(PoseGraphError::TooFewScenes(scenes.len()));
    }
    let first = &scenes[0];
    for (k, s) in scenes.iter().enumerate() {
        if s.template != first.template
            || s.objects.len() != first.objects.len()
            || s.objects.iter().zip(&first.objects).any(|(a, b)| a.name != b.name)
        {
            return Err(PoseGraphError::Roster(k));
        }
    }
    let placed_in = |i: usize| scenes.iter().filter(|s| s.objects[i].placed).count();
    let members: Vec<usize> = (0..first.objects.len()).filter(|&i| placed_in(i) >= 2).collect();
    let roster: Vec<String> = members.iter().map(|&i| first.objects[i].name.clone()).collect();
    let dim = scenes
        .iter()
        .flat_map(Scene::placed_positions)
        .next()
        .map_or(2, <[f64]>::len);

    let mean_positions: Vec<Vec<f64>> = members
        .iter()
        .map(|&i| {
            let pts: Vec<&[f64]> = scenes
                .iter()
                .filter(|s| s.objects[i].placed)
                .map(|s| s.objects[i].position.as_slice())
                .collect();
            (0..dim).map(|j| pts.iter().map(|p| p[j]).sum::<f64>() / pts.len() as f64).collect()
        })
        .collect();
    let centre: Vec<f64> = (0..dim)
        .map(|j| mean_positions.iter().map(|p| p[j]).sum::<f64>() / mean_positions.len().max(1) as f64)
        .collect();
    let scale = scenes
        .iter()
        .flat_map(Scene::placed_positions)
        .map(|p| crate::scene::dist(p, &centre))
        .fold(0.0, f64::max);
    let scale = if scale > 0.0 { scale } else { 1.0 };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for (a, &i) in members.iter().enumerate() {
        for (b, &j) in members.iter().enumerate().skip(a + 1) {
            let samples: Vec<Vec<f64>> = scenes
                .iter()
                .filter(|s| s.objects[i].placed && s.objects[j].placed)
                .map(|s| {
                    s.objects[j]
                        .position
                        .iter()
                        .zip(&s.objects[i].position)
                        .map(|(q, p)| (q - p) / scale)
                        .collect()
                })
                .collect();
            if samples.len() < 2 {
                return Err(PoseGraphError::SparsePair(roster[a].clone(), roster[b].clone()));
            }
            let (gmm, score) = fit_by_bic(&samples, &mut rng)?;
            edges.push(Edge { i: a, j: b, gmm, bic: score });
        }
    }
    Ok(PoseGraphModel {
        template: first.template.clone(),
        roster,
        scale,
        mean_positions,
        edges,
    })
}

/// Tree edges in placement order, each `(parent, child)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanningTree {
    pub root: usize,
    pub edges: Vec<(usize, usize)>,
}

impl SpanningTree {
    /// Every object reached exactly once from the root.
    pub fn is_spanning(&self, n: usize) -> bool {
        if self.root >= n || self.edges.len() + 1 != n {
            return false;
        }
        let mut seen = vec![false; n];
        seen[self.root] = true;
        for &(p, c) in &self.edges {
            if p >= n || c >= n || !seen[p] || seen[c] {
                return false;
            }
            seen[c] = true;
        }
        seen.into_iter().all(|s| s)
    }
}

/// Minimum spanning tree under BIC edge weights, grown by Prim from the
/// object with the smallest summed incident BIC.
pub fn select_tree(model: &PoseGraphModel) -> SpanningTree {
    let n = model.len();
    if n == 0 {
        return SpanningTree { root: 0, edges: Vec::new() };
    }
    let incident = |i: usize| (0..n).filter(|&j| j != i).map(|j| model.bic(i, j)).sum::<f64>();
    let root = (0..n)
        .min_by(|&a, &b| incident(a).total_cmp(&incident(b)).then(a.cmp(&b)))
        .unwrap_or(0);
    let mut in_tree = vec![false; n];
    in_tree[root] = true;
    let mut best: Vec<(f64, usize)> = (0..n).map(|j| if j == root { (f64::INFINITY, root) } else { (model.bic(root, j), root) }).collect();
    let mut edges = Vec::with_capacity(n.saturating_sub(1));
    for _ in 1..n {
        let next = (0..n)
            .filter(|&j| !in_tree[j])
            .min_by(|&a, &b| best[a].0.total_cmp(&best[b].0).then(a.cmp(&b)))
            .expect("an object remains outside the tree");
        in_tree[next] = true;
        edges.push((best[next].1, next));
        for j in 0..n {
            if !in_tree[j] {
                let w = model.bic(next, j);
                if w < best[j].0 {
                    best[j] = (w, next);
                }
            }
        }
    }
    SpanningTree { root, edges }
}

/// Candidate arrangements in normalised units, best first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub arrangements: Vec<Vec<Vec<f64>>>,
    /// Normalised; sums to 1.
    pub scores: Vec<f64>,
    pub log_likelihoods: Vec<f64>,
    pub resamples: usize,
}

/// Systematic resampling indices for normalised `weights`.
fn systematic(weights: &[f64], rng: &mut impl Rng) -> Vec<usize> {
    let n = weights.len();
    let start: f64 = rng.random::<f64>() / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut acc = weights[0];
    let mut i = 0;
    for m in 0..n {
        let u = start + m as f64 / n as f64;
        while u > acc && i + 1 < n {
            i += 1;
            acc += weights[i];
        }
        out.push(i);
    }
    out
}

/// Grows `pop_size` arrangements along `tree` by sampling each child's
/// displacement from its parent, rescoring after every placement with the
/// likelihood over all placed pairs.
pub fn sample_and_score(
    model: &PoseGraphModel,
    tree: &SpanningTree,
    pop_size: usize,
    rng: &mut impl Rng,
) -> Result<CandidateSet, PoseGraphError> {
    if pop_size == 0 {
        return Err(PoseGraphError::Population);
    }
    let n = model.len();
    if !tree.is_spanning(n) {
        return Err(PoseGraphError::Tree);
    }
    let dim = model.mean_positions.first().map_or(2, Vec::len);
    let prepared = model.prepared();
    let directed: Vec<PreparedGmm> = tree.edges.iter().map(|&(p, c)| model.edge(p, c).prepare()).collect();

    let mut cands: Vec<Vec<Option<Vec<f64>>>> = vec![vec![None; n]; pop_size];
    for c in &mut cands {
        c[tree.root] = Some(vec![0.0; dim]);
    }
    let mut loglik = vec![0.0; pop_size];
    let mut log_scores = vec![-(pop_size as f64).ln(); pop_size];
    let mut resamples = 0;
    let smoothing = -(pop_size as f64).ln();

    for (step, (&(parent, child), gmm)) in tree.edges.iter().zip(&directed).enumerate() {
        for (cand, ll) in cands.iter_mut().zip(loglik.iter_mut()) {
            let z = gmm.sample(rng);
            let base = cand[parent].as_ref().expect("parent placed before child");
            let pos: Vec<f64> = base.iter().zip(&z).map(|(b, d)| b + d).collect();
            for (other, placed) in cand.iter().enumerate() {
                if let Some(q) = placed {
                    let (i, j, from, to) = if other < child {
                        (other, child, q.as_slice(), pos.as_slice())
                    } else {
                        (child, other, pos.as_slice(), q.as_slice())
                    };
                    let disp: Vec<f64> = to.iter().zip(from).map(|(a, b)| a - b).collect();
                    *ll -= prepared[pair_index(n, i, j)].cost(&disp);
                }
            }
            cand[child] = Some(pos);
        }
        // score = 1/pop + likelihood, kept in log space
        for (s, ll) in log_scores.iter_mut().zip(&loglik) {
            *s = log_sum_exp(&[smoothing, *ll]);
        }
        let lse = log_sum_exp(&log_scores);
        for s in &mut log_scores {
            *s -= lse;
        }
        let last = step + 1 == tree.edges.len();
        if !last {
            let weights: Vec<f64> = log_scores.iter().map(|s| s.exp()).collect();
            let ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
            if ess < pop_size as f64 / 2.0 {
                let idx = systematic(&weights, rng);
                cands = idx.iter().map(|&i| cands[i].clone()).collect();
                loglik = idx.iter().map(|&i| loglik[i]).collect();
                log_scores = vec![smoothing; pop_size];
                resamples += 1;
            }
        }
    }
    if tree.edges.is_empty() {
        let lse = log_sum_exp(&log_scores);
        for s in &mut log_scores {
            *s -= lse;
        }
    }

    let mut order: Vec<usize> = (0..pop_size).collect();
    order.sort_by(|&a, &b| log_scores[b].total_cmp(&log_scores[a]).then(a.cmp(&b)));
    Ok(CandidateSet {
        arrangements: order
            .iter()
            .map(|&i| cands[i].iter().map(|p| p.clone().expect("tree spans the roster")).collect())
            .collect(),
        scores: order.iter().map(|&i| log_scores[i].exp()).collect(),
        log_likelihoods: order.iter().map(|&i| loglik[i]).collect(),
        resamples,
    })
}

impl PoseGraphModel {
    /// Metres, with the root at its training mean position.
    pub fn denormalise(&self, tree: &SpanningTree, arrangement: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let anchor = &self.mean_positions[tree.root];
        arrangement
            .iter()
            .map(|p| p.iter().zip(anchor).map(|(v, a)| v * self.scale + a).collect())
            .collect()
    }
}

/// The highest-scoring candidate, in metres.
pub fn tidy(
    model: &PoseGraphModel,
    tree: &SpanningTree,
    pop_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<f64>>, PoseGraphError> {
    let set = sample_and_score(model, tree, pop_size, rng)?;
    Ok(model.denormalise(tree, &set.arrangements[0]))
}

/// Predicts where `target` goes given the placed objects of `scene`:
/// candidates are drawn from every placed neighbour's edge distribution and
/// the one with the lowest summed cost to all placed objects wins.
pub fn place_object(
    model: &PoseGraphModel,
    scene: &Scene,
    target: &str,
    pop_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>, PoseGraphError> {
    if pop_size == 0 {
        return Err(PoseGraphError::Population);
    }
    let t = model.index_of(target).ok_or_else(|| PoseGraphError::UnknownObject(target.to_string()))?;
    let anchors: Vec<(usize, Vec<f64>)> = scene
        .objects
        .iter()
        .filter(|o| o.placed && o.name != target)
        .filter_map(|o| model.index_of(&o.name).map(|i| (i, o.position.iter().map(|v| v / model.scale).collect())))
        .collect();
    if anchors.is_empty() {
        let mean = &model.mean_positions[t];
        return Ok(mean.clone());
    }
    let from_anchor: Vec<PreparedGmm> = anchors.iter().map(|(i, _)| model.edge(*i, t).prepare()).collect();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for k in 0..pop_size {
        let a = k % anchors.len();
        let z = from_anchor[a].sample(rng);
        let cand: Vec<f64> = anchors[a].1.iter().zip(&z).map(|(p, d)| p + d).collect();
        let cost: f64 = anchors
            .iter()
            .zip(&from_anchor)
            .map(|((_, p), g)| {
                let disp: Vec<f64> = cand.iter().zip(p).map(|(c, q)| c - q).collect();
                g.cost(&disp)
            })
            .sum();
        if best.as_ref().is_none_or(|(b, _)| cost < *b) {
            best = Some((cost, cand));
        }
    }
    let (_, p) = best.expect("population is non-empty");
    Ok(p.iter().map(|v| v * model.scale).collect())
}

/// JSON view of a fitted graph for inspection tools.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseGraphExport {
    pub model: PoseGraphModel,
    pub tree: SpanningTree,
    /// `roster x roster` BIC table; the diagonal is zero.
    pub bic_table: Vec<Vec<f64>>,
}

pub fn export(model: &PoseGraphModel) -> PoseGraphExport {
    let n = model.len();
    PoseGraphExport {
        model: model.clone(),
        tree: select_tree(model),
        bic_table: (0..n)
            .map(|i| (0..n).map(|j| if i == j { 0.0 } else { model.bic(i, j) }).collect())
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::ObjectInstance;
    use crate::semantics::Semantics;

    fn scene(points: &[[f64; 2]]) -> Scene {
        Scene {
            template: "t".into(),
            objects: points
                .iter()
                .enumerate()
                .map(|(i, p)| ObjectInstance {
                    name: format!("o{i}"),
                    semantics: Semantics::OneHot { index: i, size: points.len() },
                    position: p.to_vec(),
                    placed: true,
                })
                .collect(),
        }
    }

    fn bimodal(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                let cx = if i % 2 == 0 { 1.0 } else { -1.0 };
                vec![
                    cx + 0.1 * Distribution::<f64>::sample(&StandardNormal, rng),
                    0.1 * Distribution::<f64>::sample(&StandardNormal, rng),
                ]
            })
            .collect()
    }

    #[test]
    fn isotropic_unit_gaussian_cost_at_mean() {
        let g = Gmm::gaussian(vec![0.0, 0.0], vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!((edge_cost(&g, &[0.0, 0.0]) - (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn single_component_is_closed_form() {
        let pts = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![1.0, 3.0]];
        let fit = em_fit(&pts, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(fit.gmm.means[0], vec![1.0, 1.0]);
        let c = &fit.gmm.covariances[0];
        assert!((c[0][0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((c[1][1] - 2.0).abs() < 1e-12);
        assert!((c[0][1] - 0.0).abs() < 1e-12);
    }

    #[test]
    fn identical_points_hit_the_floor() {
        let pts = vec![vec![0.5, 0.5]; 4];
        let fit = em_fit(&pts, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let c = &fit.gmm.covariances[0];
        assert!((c[0][0] - VARIANCE_FLOOR).abs() < 1e-15 && (c[1][1] - VARIANCE_FLOOR).abs() < 1e-15);
    }

    #[test]
    fn too_many_components_rejected() {
        let pts = vec![vec![0.0], vec![1.0]];
        assert_eq!(
            em_fit(&pts, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err(),
            PoseGraphError::TooFewPoints { k: 3, n: 2 }
        );
    }

    #[test]
    fn em_is_monotone_and_recovers_planted_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = bimodal(200, &mut rng);
        let fit = em_fit(&pts, 2, &mut rng).unwrap();
        for w in fit.history.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "{} then {}", w[0], w[1]);
        }
        let mut xs: Vec<f64> = fit.gmm.means.iter().map(|m| m[0]).collect();
        xs.sort_by(f64::total_cmp);
        assert!((xs[0] + 1.0).abs() < 0.05 && (xs[1] - 1.0).abs() < 0.05);
        assert!((fit.gmm.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bic_prefers_the_planted_component_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let two = bimodal(100, &mut rng);
        let one: Vec<Vec<f64>> = (0..100)
            .map(|_| vec![0.1 * Distribution::<f64>::sample(&StandardNormal, &mut rng), 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut rng)])
            .collect();
        let b = |pts: &[Vec<f64>], k, rng: &mut ChaCha8Rng| bic(&em_fit(pts, k, rng).unwrap().gmm, pts).unwrap();
        assert!(b(&two, 2, &mut rng) < b(&two, 1, &mut rng));
        assert!(b(&one, 1, &mut rng) < b(&one, 2, &mut rng));
        let (g, _) = fit_by_bic(&two, &mut rng).unwrap();
        assert_eq!(g.components(), 2);
    }

    #[test]
    fn bic_of_one_point_is_minus_twice_loglik() {
        let g = Gmm::gaussian(vec![0.0], vec![vec![1.0]]);
        let pts = vec![vec![0.3]];
        let ll = g.log_density(&[0.3]);
        assert!((bic(&g, &pts).unwrap() + 2.0 * ll).abs() < 1e-12);
    }

    #[test]
    fn reversed_edges_negate_means() {
        let scenes = vec![
            scene(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
            scene(&[[0.1, 0.0], [1.0, 0.2], [0.0, 1.1]]),
            scene(&[[0.0, 0.1], [0.9, 0.0], [0.1, 1.0]]),
        ];
        let m = fit_pose_graph(&scenes, 0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    continue;
                }
                let (a, b) = (m.edge(i, j), m.edge(j, i));
                for (ma, mb) in a.means.iter().zip(&b.means) {
                    for (x, y) in ma.iter().zip(mb) {
                        assert!((x + y).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn fit_rejects_single_scene_and_mismatched_rosters() {
        let a = scene(&[[0.0, 0.0], [1.0, 0.0]]);
        assert_eq!(fit_pose_graph(&[a.clone()], 0).unwrap_err(), PoseGraphError::TooFewScenes(1));
        let b = scene(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]);
        assert_eq!(fit_pose_graph(&[a, b], 0).unwrap_err(), PoseGraphError::Roster(1));
    }

    #[test]
    fn tree_spans_and_includes_the_tightest_edge() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scenes: Vec<Scene> = (0..30)
            .map(|_| {
                let n = |rng: &mut ChaCha8Rng, s: f64| s * Distribution::<f64>::sample(&StandardNormal, rng);
                scene(&[
                    [0.0, 0.0],
                    [0.3 + n(&mut rng, 0.001), n(&mut rng, 0.001)],
                    [n(&mut rng, 0.2), 0.5 + n(&mut rng, 0.2)],
                ])
            })
            .collect();
        let m = fit_pose_graph(&scenes, 1).unwrap();
        let t = select_tree(&m);
        assert!(t.is_spanning(3));
        assert!(t.edges.iter().any(|&(p, c)| (p, c) == (0, 1) || (p, c) == (1, 0)));
    }

    #[test]
    fn deterministic_edges_reproduce_the_plant() {
        let plant = [[0.0, 0.0], [0.2, 0.0], [0.0, 0.3]];
        let scenes = vec![scene(&plant); 3];
        let m = fit_pose_graph(&scenes, 0).unwrap();
        let t = select_tree(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let set = sample_and_score(&m, &t, 50, &mut rng).unwrap();
        assert!((set.scores.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let out = m.denormalise(&t, &set.arrangements[0]);
        for (o, p) in out.iter().zip(&plant) {
            assert!((o[0] - p[0]).abs() < 1e-2 && (o[1] - p[1]).abs() < 1e-2, "{o:?} vs {p:?}");
        }
    }

    #[test]
    fn zero_population_rejected() {
        let scenes = vec![scene(&[[0.0, 0.0], [1.0, 0.0]]); 2];
        let m = fit_pose_graph(&scenes, 0).unwrap();
        let t = select_tree(&m);
        assert_eq!(
            sample_and_score(&m, &t, 0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err(),
            PoseGraphError::Population
        );
        assert_eq!(t.edges.len(), 1);
    }
}
