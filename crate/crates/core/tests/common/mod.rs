//! Independent dense evaluators and random instance generators.
#![allow(dead_code, clippy::needless_range_loop)]

use labelmend::gat::{AttentionHead, GatModel, GatShape, Matrix};
use labelmend::superpixel::{slic, SlicParams, SuperpixelPartition};
use labelmend::tensorio::ImageRgb;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub type Dense = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

fn to_dense(m: &Matrix) -> Dense {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn matmul(a: &Dense, b: &Dense) -> Dense {
    let (n, k, m) = (a.len(), b.len(), b.first().map_or(0, Vec::len));
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn transpose(a: &Dense) -> Dense {
    let m = a.first().map_or(0, Vec::len);
    (0..m).map(|j| a.iter().map(|row| row[j]).collect()).collect()
}

/// Dense 0/1 mask of an adjacency list.
pub fn mask(adjacency: &[Vec<usize>]) -> Vec<Vec<bool>> {
    let n = adjacency.len();
    let mut m = vec![vec![false; n]; n];
    for (i, nbrs) in adjacency.iter().enumerate() {
        for &j in nbrs {
            m[i][j] = true;
        }
    }
    m
}

/// softmax over masked entries of each row of `x v_q^T (x v_k^T)^T`.
pub fn dense_attention(x: &Dense, head: &AttentionHead, mask: &[Vec<bool>]) -> Dense {
    let q = matmul(x, &transpose(&to_dense(&head.query)));
    let k = matmul(x, &transpose(&to_dense(&head.key)));
    let e = matmul(&q, &transpose(&k));
    e.iter()
        .zip(mask)
        .map(|(row, m)| {
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &b)| b)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = row
                .iter()
                .zip(m)
                .map(|(v, &b)| if b { (v - max).exp() } else { 0.0 })
                .collect();
            let s: f64 = ex.iter().sum();
            ex.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

pub fn dense_head(x: &Dense, head: &AttentionHead, mask: &[Vec<bool>]) -> Dense {
    let alpha = dense_attention(x, head, mask);
    let g = matmul(x, &transpose(&to_dense(&head.value)));
    matmul(&alpha, &g)
}

/// Two-layer forward pass written with dense matrices: `(logits, probs)`.
pub fn dense_forward(model: &GatModel, x: &Dense, adjacency: &[Vec<usize>]) -> (Dense, Dense) {
    let m = mask(adjacency);
    let n = x.len();
    let mut hidden = vec![Vec::new(); n];
    for head in &model.hidden {
        let out = dense_head(x, head, &m);
        for i in 0..n {
            hidden[i].extend(out[i].iter().map(|v| v.max(0.0)));
        }
    }
    let logits = dense_head(&hidden, &model.output, &m);
    let probs = logits
        .iter()
        .map(|row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let s: f64 = ex.iter().sum();
            ex.into_iter().map(|v| v / s).collect()
        })
        .collect();
    (logits, probs)
}

/// `-sum ln z[i][label]` by direct evaluation.
pub fn dense_loss(model: &GatModel, x: &Dense, adjacency: &[Vec<usize>], seeds: &[Option<usize>]) -> f64 {
    let (_, probs) = dense_forward(model, x, adjacency);
    seeds
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.map(|c| -probs[i][c].ln()))
        .sum()
}

pub fn matrix(x: &Dense) -> Matrix {
    Matrix::from_vec(x.len(), x[0].len(), x.iter().flatten().copied().collect()).unwrap()
}

pub fn random_dense(rng: &mut StdRng, rows: usize, cols: usize, scale: f64) -> Dense {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-scale..scale)).collect())
        .collect()
}

/// Random connected undirected graph with self-loops, as sorted lists.
pub fn random_graph(rng: &mut StdRng, n: usize, extra_edge_p: f64) -> Vec<Vec<usize>> {
    let mut m = vec![vec![false; n]; n];
    for i in 0..n {
        m[i][i] = true;
        if i > 0 {
            let j = rng.random_range(0..i);
            m[i][j] = true;
            m[j][i] = true;
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.random_bool(extra_edge_p) {
                m[i][j] = true;
                m[j][i] = true;
            }
        }
    }
    m.iter().map(|row| (0..n).filter(|&j| row[j]).collect()).collect()
}

pub fn random_model(rng: &mut StdRng, input_dim: usize, classes: usize, shape: GatShape) -> GatModel {
    GatModel::new(input_dim, classes, shape, 1.5, rng.random()).unwrap()
}

/// Image made of a few soft colour blobs plus uniform noise.
pub fn random_image(rng: &mut StdRng, height: usize, width: usize) -> ImageRgb {
    let blobs: Vec<([f64; 2], f64, [f32; 3])> = (0..rng.random_range(2..6))
        .map(|_| {
            (
                [
                    rng.random_range(0.0..width as f64),
                    rng.random_range(0.0..height as f64),
                ],
                rng.random_range(0.1..0.4) * width.min(height) as f64,
                [rng.random(), rng.random(), rng.random()],
            )
        })
        .collect();
    let noise: Vec<[f32; 3]> = (0..height * width)
        .map(|_| {
            [
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
            ]
        })
        .collect();
    ImageRgb::from_fn(height, width, |x, y| {
        let mut c = [0.3f32; 3];
        for (center, r, color) in &blobs {
            let d2 = (x as f64 - center[0]).powi(2) + (y as f64 - center[1]).powi(2);
            let w = (-d2 / (2.0 * r * r)).exp() as f32;
            for k in 0..3 {
                c[k] = c[k] * (1.0 - w) + color[k] * w;
            }
        }
        let nz = noise[y * width + x];
        [c[0] + nz[0], c[1] + nz[1], c[2] + nz[2]]
    })
}

/// Small random partition with at most `max_nodes` superpixels.
pub fn random_partition(rng: &mut StdRng, max_nodes: usize) -> (ImageRgb, SuperpixelPartition) {
    let (h, w) = (rng.random_range(6..14), rng.random_range(6..14));
    let image = random_image(rng, h, w);
    let target = rng.random_range(2..=max_nodes);
    let params = SlicParams {
        target_count: target,
        compactness: rng.random_range(1.0..20.0),
        iterations: 10,
    };
    let part = slic(&image, params).unwrap();
    assert!(
        part.count() <= max_nodes.max(target) + max_nodes,
        "partition grew unexpectedly"
    );
    (image, part)
}

/// Spatial adjacency by scanning every pair of 4-neighbouring pixels.
pub fn dense_spatial(part: &SuperpixelPartition) -> Vec<Vec<bool>> {
    let n = part.count();
    let (h, w) = (part.height(), part.width());
    let mut m = vec![vec![false; n]; n];
    for y in 0..h {
        for x in 0..w {
            let a = part.id(y * w + x);
            for (xx, yy) in [(x + 1, y), (x, y + 1)] {
                if xx < w && yy < h {
                    let b = part.id(yy * w + xx);
                    if a != b {
                        m[a][b] = true;
                        m[b][a] = true;
                    }
                }
            }
        }
    }
    m
}

/// `w_l * exp(-||v_i - v_j|| / (2h))` over all ordered pairs.
pub fn dense_semantic(features: &Dense, spatial: &[Vec<bool>]) -> Dense {
    let n = features.len();
    let h = features[0].len() as f64;
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if !spatial[i][j] {
                        return 0.0;
                    }
                    let d: f64 = features[i]
                        .iter()
                        .zip(&features[j])
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    (-d / (2.0 * h)).exp()
                })
                .collect()
        })
        .collect()
}

/// Mean minus population standard deviation over adjacent unordered pairs,
/// then the directed keep rule over every ordered pair, OR/AND-symmetrized
/// with self-loops.
pub fn dense_adjacency(semantic: &Dense, spatial: &[Vec<bool>], or: bool) -> (Vec<Vec<bool>>, f64) {
    let n = semantic.len();
    let mut values = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if spatial[i][j] {
                values.push(semantic[i][j]);
            }
        }
    }
    let gamma = if values.is_empty() {
        0.0
    } else {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
        mean - var.sqrt()
    };
    let keep = |i: usize, j: usize| {
        if !spatial[i][j] {
            return false;
        }
        let max = (0..n)
            .filter(|&k| spatial[i][k])
            .map(|k| semantic[i][k])
            .fold(f64::NEG_INFINITY, f64::max);
        !(semantic[i][j] < gamma && semantic[i][j] < max)
    };
    let a = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    i == j
                        || if or {
                            keep(i, j) || keep(j, i)
                        } else {
                            keep(i, j) && keep(j, i)
                        }
                })
                .collect()
        })
        .collect();
    (a, gamma)
}
