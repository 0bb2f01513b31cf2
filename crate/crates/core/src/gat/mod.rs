//! Two-layer graph attention network with bilinear attention scores.
//!
//! Hidden layer: `h_i = ||_l ReLU(sum_j a^l_ij G^l v_j)` with
//! `a^l_ij = softmax_j((Q^l v_i) . (K^l v_j))` over the node's adjacency
//! (self-loop included). Output layer: one head of the same form producing
//! class logits, followed by a row softmax. Gradients are derived by hand.

mod matrix;
mod model;
mod train;

pub use matrix::{dot, Matrix};
pub use model::{read_model, write_model, AttentionHead, GatModel, GatShape, MODEL_MAGIC};
pub use train::{train, TrainConfig, TrainOutcome};

use crate::error::{Error, Result};
use crate::graphbuild::ImageGraph;

/// `e_ij` for every `j` in the adjacency list of `i`, aligned with it.
pub fn attention_scores(input: &Matrix, head: &AttentionHead, adjacency: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
    let (q, k) = project_qk(input, head, adjacency)?;
    Ok(scores_from(&q, &k, adjacency))
}

fn project_qk(input: &Matrix, head: &AttentionHead, adjacency: &[Vec<usize>]) -> Result<(Matrix, Matrix)> {
    if input.cols() != head.d_in() {
        return Err(Error::shape(format!(
            "input width {} != head input width {}",
            input.cols(),
            head.d_in()
        )));
    }
    if input.rows() != adjacency.len() {
        return Err(Error::shape(format!(
            "{} input rows for {} nodes",
            input.rows(),
            adjacency.len()
        )));
    }
    Ok((input.mul_transposed(&head.query), input.mul_transposed(&head.key)))
}

fn scores_from(q: &Matrix, k: &Matrix, adjacency: &[Vec<usize>]) -> Vec<Vec<f64>> {
    adjacency
        .iter()
        .enumerate()
        .map(|(i, nbrs)| nbrs.iter().map(|&j| dot(q.row(i), k.row(j))).collect())
        .collect()
}

/// Max-shifted softmax of each node's scores over its neighbourhood.
pub fn attention_softmax(scores: &[Vec<f64>]) -> Vec<Vec<f64>> {
    scores
        .iter()
        .map(|row| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&e| (e - m).exp()).collect();
            let sum: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / sum).collect()
        })
        .collect()
}

/// `out_i = sum_j a_ij G v_j`, before any activation.
pub fn head_forward(
    input: &Matrix,
    head: &AttentionHead,
    alpha: &[Vec<f64>],
    adjacency: &[Vec<usize>],
) -> Result<Matrix> {
    if input.cols() != head.d_in() || input.rows() != adjacency.len() || alpha.len() != adjacency.len() {
        return Err(Error::shape("head input, attention and adjacency disagree"));
    }
    let g = input.mul_transposed(&head.value);
    Ok(aggregate(&g, alpha, adjacency))
}

fn aggregate(g: &Matrix, alpha: &[Vec<f64>], adjacency: &[Vec<usize>]) -> Matrix {
    let mut out = Matrix::zeros(g.rows(), g.cols());
    for (i, nbrs) in adjacency.iter().enumerate() {
        let row = out.row_mut(i);
        for (&j, &a) in nbrs.iter().zip(&alpha[i]) {
            for (o, &v) in row.iter_mut().zip(g.row(j)) {
                *o += a * v;
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
struct HeadCache {
    q: Matrix,
    k: Matrix,
    g: Matrix,
    alpha: Vec<Vec<f64>>,
}

fn head_pass(input: &Matrix, head: &AttentionHead, adjacency: &[Vec<usize>]) -> Result<(Matrix, HeadCache)> {
    let (q, k) = project_qk(input, head, adjacency)?;
    let alpha = attention_softmax(&scores_from(&q, &k, adjacency));
    let g = input.mul_transposed(&head.value);
    let out = aggregate(&g, &alpha, adjacency);
    Ok((out, HeadCache { q, k, g, alpha }))
}

/// Intermediate values of a forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Concatenated hidden pre-activations `[n, heads * hidden]`.
    pub hidden_pre: Matrix,
    /// `ReLU(hidden_pre)`.
    pub hidden: Matrix,
    pub logits: Matrix,
    /// Row-softmax of the logits.
    pub probs: Matrix,
    hidden_caches: Vec<HeadCache>,
    output_cache: HeadCache,
}

impl Forward {
    /// Attention coefficients of hidden head `l`, aligned with the adjacency.
    pub fn hidden_attention(&self, l: usize) -> &[Vec<f64>] {
        &self.hidden_caches[l].alpha
    }

    pub fn output_attention(&self) -> &[Vec<f64>] {
        &self.output_cache.alpha
    }

    /// Class with the highest probability per node (lowest index on ties).
    pub fn predictions(&self) -> Vec<usize> {
        (0..self.probs.rows())
            .map(|i| {
                let row = self.probs.row(i);
                let mut best = 0;
                for (c, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

pub fn row_softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Node class probabilities `Z = f(V, A)`.
pub fn forward(model: &GatModel, features: &Matrix, adjacency: &[Vec<usize>]) -> Result<Forward> {
    model.validate()?;
    let n = features.rows();
    let width = model.hidden[0].d_out();
    let mut hidden_pre = Matrix::zeros(n, model.hidden.len() * width);
    let mut hidden_caches = Vec::with_capacity(model.hidden.len());
    for (l, head) in model.hidden.iter().enumerate() {
        let (out, cache) = head_pass(features, head, adjacency)?;
        for i in 0..n {
            hidden_pre.row_mut(i)[l * width..(l + 1) * width].copy_from_slice(out.row(i));
        }
        hidden_caches.push(cache);
    }
    let mut hidden = hidden_pre.clone();
    for v in hidden.data_mut() {
        *v = v.max(0.0);
    }
    let (logits, output_cache) = head_pass(&hidden, &model.output, adjacency)?;
    let probs = row_softmax(&logits);
    Ok(Forward {
        hidden_pre,
        hidden,
        logits,
        probs,
        hidden_caches,
        output_cache,
    })
}

/// Graph features as a matrix.
pub fn feature_matrix(graph: &ImageGraph) -> Matrix {
    let f = graph.features();
    Matrix::from_vec(f.rows(), f.dim(), f.data().to_vec()).expect("consistent features")
}

pub fn forward_graph(model: &GatModel, graph: &ImageGraph) -> Result<Forward> {
    forward(model, &feature_matrix(graph), graph.adjacency())
}

/// Summed cross-entropy over seeded nodes and its gradient with respect to
/// the logits (`z_i - onehot(p_i)` on seeded rows, zero elsewhere).
pub fn loss(fwd: &Forward, seeds: &[Option<usize>]) -> Result<(f64, Matrix)> {
    let (n, classes) = (fwd.logits.rows(), fwd.logits.cols());
    if seeds.len() != n {
        return Err(Error::shape(format!("{} seeds for {n} nodes", seeds.len())));
    }
    if seeds.iter().all(Option::is_none) {
        return Err(Error::EmptySeedSet);
    }
    let mut total = 0.0;
    let mut grad = Matrix::zeros(n, classes);
    for (i, seed) in seeds.iter().enumerate() {
        let Some(label) = *seed else { continue };
        if label >= classes {
            return Err(Error::InvalidParameter(format!(
                "seed label {label} out of range for {classes} classes"
            )));
        }
        let row = fwd.logits.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[label];
        let g = grad.row_mut(i);
        g.copy_from_slice(fwd.probs.row(i));
        g[label] -= 1.0;
    }
    Ok((total, grad))
}

/// Backpropagates through one head. Returns gradients for `(Q, K, G)` and,
/// when requested, the gradient with respect to the head input.
fn head_backward(
    input: &Matrix,
    head: &AttentionHead,
    cache: &HeadCache,
    d_out: &Matrix,
    adjacency: &[Vec<usize>],
    grads: &mut AttentionHead,
    d_input: Option<&mut Matrix>,
) {
    let n = input.rows();
    let mut d_g = Matrix::zeros(n, cache.g.cols());
    let mut d_q = Matrix::zeros(n, cache.q.cols());
    let mut d_k = Matrix::zeros(n, cache.k.cols());
    for (i, nbrs) in adjacency.iter().enumerate() {
        let alpha = &cache.alpha[i];
        let up = d_out.row(i);
        let d_alpha: Vec<f64> = nbrs.iter().map(|&j| dot(up, cache.g.row(j))).collect();
        let mean: f64 = alpha.iter().zip(&d_alpha).map(|(a, d)| a * d).sum();
        for (t, &j) in nbrs.iter().enumerate() {
            for (dg, &u) in d_g.row_mut(j).iter_mut().zip(up) {
                *dg += alpha[t] * u;
            }
            let d_e = alpha[t] * (d_alpha[t] - mean);
            if d_e != 0.0 {
                for (dq, &kv) in d_q.row_mut(i).iter_mut().zip(cache.k.row(j)) {
                    *dq += d_e * kv;
                }
                for (dk, &qv) in d_k.row_mut(j).iter_mut().zip(cache.q.row(i)) {
                    *dk += d_e * qv;
                }
            }
        }
    }
    d_q.add_transposed_mul(input, &mut grads.query);
    d_k.add_transposed_mul(input, &mut grads.key);
    d_g.add_transposed_mul(input, &mut grads.value);
    if let Some(d_input) = d_input {
        d_q.add_mul(&head.query, d_input);
        d_k.add_mul(&head.key, d_input);
        d_g.add_mul(&head.value, d_input);
    }
}

/// Exact parameter gradients given the gradient of the loss with respect to
/// the logits. The result has the model's shape.
pub fn backward(
    model: &GatModel,
    features: &Matrix,
    adjacency: &[Vec<usize>],
    fwd: &Forward,
    d_logits: &Matrix,
) -> GatModel {
    let shape = model.shape();
    let mut grads = GatModel::zeros(model.input_dim(), model.num_classes(), shape);
    let mut d_hidden = Matrix::zeros(fwd.hidden.rows(), fwd.hidden.cols());
    head_backward(
        &fwd.hidden,
        &model.output,
        &fwd.output_cache,
        d_logits,
        adjacency,
        &mut grads.output,
        Some(&mut d_hidden),
    );
    let width = shape.hidden;
    for (l, head) in model.hidden.iter().enumerate() {
        let d_pre = Matrix::from_fn(fwd.hidden.rows(), width, |i, c| {
            let col = l * width + c;
            if fwd.hidden_pre.get(i, col) > 0.0 {
                d_hidden.get(i, col)
            } else {
                0.0
            }
        });
        head_backward(
            features,
            head,
            &fwd.hidden_caches[l],
            &d_pre,
            adjacency,
            &mut grads.hidden[l],
            None,
        );
    }
    grads
}

/// Forward pass, seeded-node loss and parameter gradients in one call.
pub fn loss_and_gradients(
    model: &GatModel,
    features: &Matrix,
    adjacency: &[Vec<usize>],
    seeds: &[Option<usize>],
) -> Result<(f64, GatModel)> {
    let fwd = forward(model, features, adjacency)?;
    let (value, d_logits) = loss(&fwd, seeds)?;
    Ok((value, backward(model, features, adjacency, &fwd, &d_logits)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity(n: usize) -> Matrix {
        Matrix::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    fn identity_head(d: usize) -> AttentionHead {
        AttentionHead {
            query: identity(d),
            key: identity(d),
            value: identity(d),
        }
    }

    #[test]
    fn bilinear_scores() {
        let head = identity_head(2);
        let adj = vec![vec![0, 1], vec![0, 1]];
        let same = Matrix::from_vec(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(attention_scores(&same, &head, &adj).unwrap()[0], vec![1.0, 1.0]);
        let orth = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(attention_scores(&orth, &head, &adj).unwrap()[0], vec![1.0, 0.0]);
    }

    #[test]
    fn hand_multiplied_scores() {
        // Q = [[1,2],[0,1]], K = [[1,0],[1,1]], v0 = (1,0), v1 = (0,1)
        // Qv0 = (1,0), Qv1 = (2,1), Kv0 = (1,1), Kv1 = (0,1)
        let head = AttentionHead {
            query: Matrix::from_vec(2, 2, vec![1.0, 2.0, 0.0, 1.0]).unwrap(),
            key: Matrix::from_vec(2, 2, vec![1.0, 0.0, 1.0, 1.0]).unwrap(),
            value: identity(2),
        };
        let v = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let adj = vec![vec![0, 1], vec![0, 1]];
        let e = attention_scores(&v, &head, &adj).unwrap();
        assert_eq!(e, vec![vec![1.0, 0.0], vec![3.0, 1.0]]);
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(attention_softmax(&[vec![2.0, 2.0]]), vec![vec![0.5, 0.5]]);
        let a = attention_softmax(&[vec![0.0, 3f64.ln()]]);
        assert!((a[0][0] - 0.25).abs() < 1e-15 && (a[0][1] - 0.75).abs() < 1e-15);
        assert_eq!(attention_softmax(&[vec![-7.0]]), vec![vec![1.0]]);
        let big = attention_softmax(&[vec![1000.0, 1000.0]]);
        assert_eq!(big[0], vec![0.5, 0.5]);
    }

    #[test]
    fn self_loop_identity_propagation() {
        let v = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap();
        let adj = vec![vec![0], vec![1]];
        let alpha = vec![vec![1.0], vec![1.0]];
        assert_eq!(head_forward(&v, &identity_head(3), &alpha, &adj).unwrap(), v);
        let alpha = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        let adj = vec![vec![0, 1], vec![0, 1]];
        let out = head_forward(&v, &identity_head(3), &alpha, &adj).unwrap();
        assert_eq!(out.row(0), out.row(1));
    }

    #[test]
    fn zero_model_is_uniform() {
        let model = GatModel::zeros(3, 4, GatShape::default());
        let v = Matrix::from_fn(5, 3, |r, c| (r * 3 + c) as f64 * 0.1);
        let adj: Vec<Vec<usize>> = (0..5).map(|i| vec![i]).collect();
        let fwd = forward(&model, &v, &adj).unwrap();
        assert!(fwd.probs.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn loss_cases() {
        let model = GatModel::zeros(
            2,
            2,
            GatShape {
                heads: 1,
                hidden: 2,
                att_dim: 2,
            },
        );
        let v = Matrix::zeros(2, 2);
        let adj = vec![vec![0], vec![1]];
        let fwd = forward(&model, &v, &adj).unwrap();
        let (l, g) = loss(&fwd, &[Some(1), None]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-6);
        assert_eq!(g.row(1), &[0.0, 0.0]);
        assert_eq!(g.row(0), &[0.5, -0.5]);
        assert!(matches!(loss(&fwd, &[None, None]), Err(Error::EmptySeedSet)));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = GatModel::new(
            5,
            3,
            GatShape {
                heads: 2,
                hidden: 3,
                att_dim: 4,
            },
            1.0,
            9,
        )
        .unwrap();
        let bytes = m.to_bytes();
        assert_eq!(bytes.len(), 24 + 4 * m.param_count());
        let back = GatModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.shape(), m.shape());
        assert_eq!(back.to_bytes(), bytes);
        assert!(GatModel::from_bytes(&bytes[..30]).is_err());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let shape = GatShape::default();
        let a = GatModel::new(16, 4, shape, 1.0, 1).unwrap();
        let b = GatModel::new(16, 4, shape, 1.0, 1).unwrap();
        let c = GatModel::new(16, 4, shape, 1.0, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bound = (6.0f64 / (8 + 16) as f64).sqrt();
        assert!(a.hidden[0].query.data().iter().all(|v| v.abs() <= bound));
    }
}
