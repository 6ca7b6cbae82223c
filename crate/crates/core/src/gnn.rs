//! Graph attention layer, node-wise dense stacks and global add-pooling.
//!
//! Each block has a tape-level form (`*_on_tape`) used during training and a
//! plain form that evaluates the same code on a throwaway tape.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, TensorError, Var};

/// Uniform in `±1/sqrt(fan_in)`.
pub fn init_uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::matrix(rows, cols, data).expect("init shape")
}

/// Directed edge list over the nodes of a (super)graph. Edge `k` lets node
/// `dst[k]` attend to node `src[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeList {
    pub dst: Rc<[usize]>,
    pub src: Rc<[usize]>,
    pub nodes: usize,
}

impl EdgeList {
    /// Fully connected blocks with self-loops, one block per entry of `sizes`,
    /// and no edges between blocks.
    pub fn fully_connected_blocks(sizes: &[usize]) -> Self {
        let mut dst = Vec::new();
        let mut src = Vec::new();
        let mut offset = 0;
        for &n in sizes {
            for i in 0..n {
                for j in 0..n {
                    dst.push(offset + i);
                    src.push(offset + j);
                }
            }
            offset += n;
        }
        Self {
            dst: dst.into(),
            src: src.into(),
            nodes: offset,
        }
    }

    pub fn len(&self) -> usize {
        self.dst.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dst.is_empty()
    }

    pub fn non_self_edges(&self) -> usize {
        self.dst.iter().zip(self.src.iter()).filter(|(d, s)| d != s).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatParams {
    /// `out x in`.
    pub weight: Tensor,
    /// `1 x 2*out`; the first half scores the receiving node.
    pub attention: Tensor,
    pub slope: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct GatVars {
    pub weight: Var,
    pub attention: Var,
    pub slope: f64,
}

impl GatParams {
    pub fn init(input: usize, output: usize, slope: f64, rng: &mut impl Rng) -> Self {
        Self {
            weight: init_uniform(output, input, input, rng),
            attention: init_uniform(1, 2 * output, 2 * output, rng),
            slope,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let (out, _) = self.weight.rank2()?;
        let (ar, ac) = self.attention.rank2()?;
        if ar != 1 || ac != 2 * out {
            return Err(TensorError::ShapeMismatch {
                op: "gat attention",
                left: self.weight.shape().to_vec(),
                right: self.attention.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn bind(&self, binder: &mut Binder<'_>) -> GatVars {
        GatVars {
            weight: binder.bind(&self.weight),
            attention: binder.bind(&self.attention),
            slope: self.slope,
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.attention]
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.attention]
    }
}

/// Output of one graph attention layer.
pub struct GatOutput {
    pub hidden: Var,
    /// Attention coefficient of each edge, `edges x 1`.
    pub alpha: Var,
}

/// `h_i = sum_j alpha_ij W x_j`, with `alpha_ij` the softmax over the
/// neighbours of `i` of `LeakyReLU(a^T [W x_i || W x_j])`.
pub fn gat_on_tape(tape: &mut Tape, x: Var, edges: &EdgeList, p: &GatVars) -> Result<GatOutput, TensorError> {
    let (rows, _) = tape.value(x).rank2()?;
    if rows != edges.nodes {
        return Err(TensorError::ShapeMismatch {
            op: "gat nodes",
            left: tape.value(x).shape().to_vec(),
            right: vec![edges.nodes],
        });
    }
    let wx = tape.matmul_nt(x, p.weight)?;
    let out = tape.value(wx).cols();
    if tape.value(p.attention).shape() != [1, 2 * out] {
        return Err(TensorError::ShapeMismatch {
            op: "gat attention",
            left: vec![out],
            right: tape.value(p.attention).shape().to_vec(),
        });
    }
    let a_dst = tape.slice_cols(p.attention, 0, out)?;
    let a_src = tape.slice_cols(p.attention, out, 2 * out)?;
    let score_dst = tape.matmul_nt(wx, a_dst)?;
    let score_src = tape.matmul_nt(wx, a_src)?;
    let e_dst = tape.gather_rows(score_dst, edges.dst.clone())?;
    let e_src = tape.gather_rows(score_src, edges.src.clone())?;
    let e = tape.add(e_dst, e_src)?;
    let e = tape.leaky_relu(e, p.slope);
    let alpha = tape.segment_softmax(e, edges.dst.clone())?;
    let messages = tape.gather_rows(wx, edges.src.clone())?;
    let weighted = tape.mul_col(messages, alpha)?;
    let hidden = tape.scatter_add_rows(weighted, edges.dst.clone(), edges.nodes)?;
    Ok(GatOutput { hidden, alpha })
}

/// Evaluates one GAT layer; returns the hidden features and the dense
/// `nodes x nodes` attention matrix (zero where there is no edge).
pub fn gat_forward(features: &Tensor, edges: &EdgeList, params: &GatParams) -> Result<(Tensor, Tensor), TensorError> {
    params.validate()?;
    let (_, cols) = features.rank2()?;
    if cols != params.input_dim() {
        return Err(TensorError::ShapeMismatch {
            op: "gat input",
            left: features.shape().to_vec(),
            right: params.weight.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let vars = GatVars {
        weight: tape.constant(params.weight.clone()),
        attention: tape.constant(params.attention.clone()),
        slope: params.slope,
    };
    let out = gat_on_tape(&mut tape, x, edges, &vars)?;
    let mut alpha = Tensor::zeros(edges.nodes, edges.nodes);
    for (k, (&d, &s)) in edges.dst.iter().zip(edges.src.iter()).enumerate() {
        alpha.set(d, s, tape.value(out.alpha).data()[k]);
    }
    Ok((tape.value(out.hidden).clone(), alpha))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    LeakyRelu(f64),
    Elu(f64),
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Linear => x,
            Activation::LeakyRelu(s) => tape.leaky_relu(x, s),
            Activation::Elu(a) => tape.elu(x, a),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `out x in`.
    pub weight: Tensor,
    /// `1 x out`.
    pub bias: Tensor,
}

/// Affine layers with `activation` applied between consecutive layers (not
/// after the last one).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    pub layers: Vec<DenseLayer>,
    pub activation: Activation,
}

#[derive(Clone, Debug)]
pub struct DenseVars {
    layers: Vec<(Var, Var)>,
    activation: Activation,
}

impl DenseParams {
    pub fn new(layers: Vec<DenseLayer>, activation: Activation) -> Result<Self, TensorError> {
        if layers.is_empty() {
            return Err(TensorError::Empty("dense layers"));
        }
        for l in &layers {
            let (out, _) = l.weight.rank2()?;
            if l.bias.shape() != [1, out] {
                return Err(TensorError::ShapeMismatch {
                    op: "dense bias",
                    left: l.weight.shape().to_vec(),
                    right: l.bias.shape().to_vec(),
                });
            }
        }
        for pair in layers.windows(2) {
            if pair[0].weight.rows() != pair[1].weight.cols() {
                return Err(TensorError::ShapeMismatch {
                    op: "dense chain",
                    left: pair[0].weight.shape().to_vec(),
                    right: pair[1].weight.shape().to_vec(),
                });
            }
        }
        Ok(Self { layers, activation })
    }

    /// Layer widths `[in, h1, ..., out]`.
    pub fn init(widths: &[usize], activation: Activation, rng: &mut impl Rng) -> Self {
        assert!(widths.len() >= 2, "dense stack needs input and output widths");
        let layers = widths
            .windows(2)
            .map(|w| DenseLayer {
                weight: init_uniform(w[1], w[0], w[0], rng),
                bias: init_uniform(1, w[1], w[0], rng),
            })
            .collect();
        Self { layers, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.rows())
    }

    pub fn bind(&self, binder: &mut Binder<'_>) -> DenseVars {
        DenseVars {
            layers: self
                .layers
                .iter()
                .map(|l| (binder.bind(&l.weight), binder.bind(&l.bias)))
                .collect(),
            activation: self.activation,
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }
}

pub fn dense_on_tape(tape: &mut Tape, x: Var, p: &DenseVars) -> Result<Var, TensorError> {
    let mut h = x;
    for (k, &(w, b)) in p.layers.iter().enumerate() {
        if k > 0 {
            h = p.activation.apply(tape, h);
        }
        let z = tape.matmul_nt(h, w)?;
        h = tape.add_row(z, b)?;
    }
    Ok(h)
}

pub fn dense_forward(x: &Tensor, params: &DenseParams) -> Result<Tensor, TensorError> {
    let (_, cols) = x.rank2()?;
    if cols != params.input_dim() {
        return Err(TensorError::ShapeMismatch {
            op: "dense input",
            left: x.shape().to_vec(),
            right: params.layers[0].weight.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars = params.bind(&mut Binder::constants(&mut tape));
    let y = dense_on_tape(&mut tape, xv, &vars)?;
    Ok(tape.value(y).clone())
}

/// Sums node rows per graph; `membership[k]` is the graph of node `k`.
pub fn global_add_pool_on_tape(
    tape: &mut Tape,
    x: Var,
    membership: Rc<[usize]>,
    graphs: usize,
) -> Result<Var, TensorError> {
    let mut counts = vec![0usize; graphs];
    for &g in membership.iter() {
        if g >= graphs {
            return Err(TensorError::Index { index: g, len: graphs });
        }
        counts[g] += 1;
    }
    if counts.contains(&0) {
        return Err(TensorError::Empty("global_add_pool graph"));
    }
    tape.scatter_add_rows(x, membership, graphs)
}

pub fn global_add_pool(features: &Tensor, membership: &[usize]) -> Result<Tensor, TensorError> {
    let graphs = membership.iter().copied().max().map_or(0, |m| m + 1);
    if graphs == 0 {
        return Err(TensorError::Empty("global_add_pool graph"));
    }
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let y = global_add_pool_on_tape(&mut tape, x, membership.into(), graphs)?;
    Ok(tape.value(y).clone())
}

/// Places parameter tensors on a tape, remembering the order so gradients can
/// be paired back with the tensors they belong to.
pub struct Binder<'t> {
    tape: &'t mut Tape,
    trainable: bool,
    vars: Vec<Var>,
}

impl<'t> Binder<'t> {
    pub fn trainable(tape: &'t mut Tape) -> Self {
        Self {
            tape,
            trainable: true,
            vars: Vec::new(),
        }
    }

    pub fn constants(tape: &'t mut Tape) -> Self {
        Self {
            tape,
            trainable: false,
            vars: Vec::new(),
        }
    }

    pub fn bind(&mut self, t: &Tensor) -> Var {
        let v = if self.trainable {
            self.tape.param(t.clone())
        } else {
            self.tape.constant(t.clone())
        };
        self.vars.push(v);
        v
    }

    pub fn into_vars(self) -> Vec<Var> {
        self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_edge_list(n: usize) -> EdgeList {
        EdgeList::fully_connected_blocks(&[n])
    }

    #[test]
    fn block_edges_have_no_cross_links() {
        let e = EdgeList::fully_connected_blocks(&[2, 3]);
        assert_eq!(e.nodes, 5);
        assert_eq!(e.non_self_edges(), 8);
        assert_eq!(e.len(), 4 + 9);
        for (&d, &s) in e.dst.iter().zip(e.src.iter()) {
            assert_eq!(d < 2, s < 2);
        }
    }

    #[test]
    fn singleton_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = GatParams::init(3, 4, 0.2, &mut rng);
        let x = Tensor::row(&[0.3, -1.0, 2.0]);
        let (h, alpha) = gat_forward(&x, &single_edge_list(1), &p).unwrap();
        assert!((alpha.item() - 1.0).abs() < 1e-15);
        let wx = dense_forward(
            &x,
            &DenseParams::new(
                vec![DenseLayer {
                    weight: p.weight.clone(),
                    bias: Tensor::zeros(1, 4),
                }],
                Activation::Linear,
            )
            .unwrap(),
        )
        .unwrap();
        for (a, b) in h.data().iter().zip(wx.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_neighbours_get_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = GatParams::init(2, 3, 0.2, &mut rng);
        let x = Tensor::from_rows(&[vec![0.5, 0.1], vec![0.5, 0.1], vec![0.5, 0.1], vec![0.5, 0.1]]).unwrap();
        let (_, alpha) = gat_forward(&x, &single_edge_list(4), &p).unwrap();
        for v in alpha.data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn two_node_hand_evaluation() {
        // W = I, a = ones, slope 0.2, x1 = (1, 0), x2 = (0, 2).
        // e_ij = LeakyReLU(sum(x_i) + sum(x_j)): e11 = 2, e12 = 3, e21 = 3, e22 = 4.
        let p = GatParams {
            weight: Tensor::identity(2),
            attention: Tensor::row(&[1.0; 4]),
            slope: 0.2,
        };
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let (h, alpha) = gat_forward(&x, &single_edge_list(2), &p).unwrap();
        let a11 = 2f64.exp() / (2f64.exp() + 3f64.exp());
        let a21 = 3f64.exp() / (3f64.exp() + 4f64.exp());
        let expect_alpha = [a11, 1.0 - a11, a21, 1.0 - a21];
        for (a, b) in alpha.data().iter().zip(expect_alpha) {
            assert!((a - b).abs() < 1e-9);
        }
        let expect_h = [a11, 2.0 * (1.0 - a11), a21, 2.0 * (1.0 - a21)];
        for (a, b) in h.data().iter().zip(expect_h) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn negative_scores_use_the_slope() {
        // All scores -1: uniform attention regardless of slope.
        let p = GatParams {
            weight: Tensor::identity(1),
            attention: Tensor::row(&[1.0, 1.0]),
            slope: 0.2,
        };
        let x = Tensor::column(&[-0.5, -0.5]);
        let (_, alpha) = gat_forward(&x, &single_edge_list(2), &p).unwrap();
        assert!((alpha.get(0, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gat_rejects_bad_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = GatParams::init(3, 2, 0.2, &mut rng);
        let x = Tensor::row(&[1.0, 2.0]);
        assert!(gat_forward(&x, &single_edge_list(1), &p).is_err());
        let bad = GatParams {
            attention: Tensor::row(&[1.0; 3]),
            ..p
        };
        assert!(gat_forward(&Tensor::row(&[1.0, 2.0, 3.0]), &single_edge_list(1), &bad).is_err());
    }

    #[test]
    fn pooling_sums_rows() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(global_add_pool(&x, &[0, 0]).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(global_add_pool(&Tensor::row(&[7.0, 8.0]), &[0]).unwrap().data(), &[7.0, 8.0]);
        assert_eq!(global_add_pool(&Tensor::zeros(3, 2), &[0, 0, 0]).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn pooling_rejects_empty_graph() {
        let x = Tensor::zeros(2, 1);
        assert!(global_add_pool(&x, &[0, 2]).is_err());
        assert!(global_add_pool(&Tensor::zeros(0, 1), &[]).is_err());
    }

    #[test]
    fn dense_identity_and_zero_weights() {
        let id = DenseParams::new(
            vec![DenseLayer {
                weight: Tensor::identity(3),
                bias: Tensor::zeros(1, 3),
            }],
            Activation::Linear,
        )
        .unwrap();
        let x = Tensor::row(&[1.0, -2.0, 3.0]);
        assert_eq!(dense_forward(&x, &id).unwrap(), x);
        let zero = DenseParams::new(
            vec![DenseLayer {
                weight: Tensor::zeros(2, 3),
                bias: Tensor::row(&[0.5, -0.5]),
            }],
            Activation::Linear,
        )
        .unwrap();
        assert_eq!(dense_forward(&x, &zero).unwrap().data(), &[0.5, -0.5]);
    }

    #[test]
    fn dense_two_layer_hand_evaluation() {
        // layer 1: [[1, -1], [2, 0.5]] x + [0, -3]; leaky 0.1; layer 2: [1, 1] h + 0.25
        let p = DenseParams::new(
            vec![
                DenseLayer {
                    weight: Tensor::matrix(2, 2, vec![1.0, -1.0, 2.0, 0.5]).unwrap(),
                    bias: Tensor::row(&[0.0, -3.0]),
                },
                DenseLayer {
                    weight: Tensor::row(&[1.0, 1.0]),
                    bias: Tensor::row(&[0.25]),
                },
            ],
            Activation::LeakyRelu(0.1),
        )
        .unwrap();
        // x = (2, 1): z = (1, 1.5) -> 2.5 + 0.25
        // x = (0, 1): z = (-1, -2.5) -> leaky (-0.1, -0.25) -> -0.35 + 0.25
        let x = Tensor::from_rows(&[vec![2.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let y = dense_forward(&x, &p).unwrap();
        assert!((y.data()[0] - 2.75).abs() < 1e-12);
        assert!((y.data()[1] + 0.1).abs() < 1e-12);
    }

    #[test]
    fn dense_rejects_broken_chain() {
        let layers = vec![
            DenseLayer {
                weight: Tensor::zeros(2, 3),
                bias: Tensor::zeros(1, 2),
            },
            DenseLayer {
                weight: Tensor::zeros(1, 4),
                bias: Tensor::zeros(1, 1),
            },
        ];
        assert!(DenseParams::new(layers, Activation::Linear).is_err());
        let p = DenseParams::init(&[3, 2], Activation::Linear, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(dense_forward(&Tensor::row(&[1.0]), &p).is_err());
    }
}
