//! Superpixel graph construction: node features, spatial adjacency, semantic
//! edge weights and the similarity-filtered adjacency used for attention.
//!
//! Edge sets are stored as sorted neighbour lists. `semantic[i][k]` is the
//! weight of the edge `(i, spatial[i][k])`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::superpixel::{lab_pixels, SuperpixelPartition};
use crate::tensorio::{ImageRgb, Tensor};

pub const GRAPH_MAGIC: &[u8; 4] = b"LMG1";
pub const HANDCRAFTED_DIM: usize = 16;

/// One feature row per superpixel.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatures {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl NodeFeatures {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::shape(format!(
                "{rows}x{dim} features given {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("node features must be finite".into()));
        }
        Ok(NodeFeatures { rows, dim, data })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.dims() {
            [rows, dim] => NodeFeatures::new(rows, dim, t.data().iter().map(|&v| v as f64).collect()),
            _ => Err(Error::shape(format!("node features are [N,h], got {:?}", t.dims()))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&v| v as f32).collect();
        Tensor::new(vec![self.rows, self.dim], data).expect("finite features")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Bilinear resize of a `[C, h, w]` stack to `[C, height, width]`, sampling
/// source coordinates at `(y + 0.5) * h / height - 0.5` (clamped at 0).
pub fn upsample_bilinear(dense: &Tensor, height: usize, width: usize) -> Result<Vec<f64>> {
    let (channels, h, w) = dense.as_stack()?;
    if h == 0 || w == 0 || h > height || w > width {
        return Err(Error::shape(format!(
            "cannot upsample {h}x{w} features to {height}x{width}"
        )));
    }
    let axis = |dst: usize, src_len: usize, dst_len: usize| {
        let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(src_len - 1);
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, s - i0 as f64)
    };
    let xs: Vec<_> = (0..width).map(|x| axis(x, w, width)).collect();
    let mut out = vec![0.0f64; channels * height * width];
    for c in 0..channels {
        let plane = dense.plane(c);
        let at = |y: usize, x: usize| plane[y * w + x] as f64;
        for y in 0..height {
            let (y0, y1, ly) = axis(y, h, height);
            for (x, &(x0, x1, lx)) in xs.iter().enumerate() {
                let top = at(y0, x0) * (1.0 - lx) + at(y0, x1) * lx;
                let bottom = at(y1, x0) * (1.0 - lx) + at(y1, x1) * lx;
                out[(c * height + y) * width + x] = top * (1.0 - ly) + bottom * ly;
            }
        }
    }
    Ok(out)
}

/// Upsamples a dense feature stack to image size and averages it over each
/// superpixel.
pub fn pool_features(
    dense: &Tensor,
    partition: &SuperpixelPartition,
    image_size: (usize, usize),
) -> Result<NodeFeatures> {
    let (height, width) = image_size;
    if partition.height() != height || partition.width() != width {
        return Err(Error::shape("partition does not match image size"));
    }
    let (channels, _, _) = dense.as_stack()?;
    if channels == 0 {
        return Err(Error::shape("feature stack has no channels"));
    }
    let full = upsample_bilinear(dense, height, width)?;
    let n = height * width;
    let count = partition.count();
    let mut sums = vec![0.0f64; count * channels];
    let sizes = partition.sizes();
    assert!(sizes.iter().all(|&s| s > 0), "partition has an empty superpixel");
    for p in 0..n {
        let id = partition.id(p);
        for c in 0..channels {
            sums[id * channels + c] += full[c * n + p];
        }
    }
    for (i, size) in sizes.iter().enumerate() {
        for v in &mut sums[i * channels..(i + 1) * channels] {
            *v /= *size as f64;
        }
    }
    NodeFeatures::new(count, channels, sums)
}

fn hue_and_saturation([r, g, b]: [f32; 3]) -> (f64, f64) {
    let (r, g, b) = (r as f64, g as f64, b as f64);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let chroma = max - min;
    let sat = if max > 0.0 { chroma / max } else { 0.0 };
    if chroma == 0.0 {
        return (0.0, sat);
    }
    let h = if max == r {
        ((g - b) / chroma).rem_euclid(6.0)
    } else if max == g {
        (b - r) / chroma + 2.0
    } else {
        (r - g) / chroma + 4.0
    };
    (h * 60.0, sat)
}

/// Colour and position descriptor per superpixel, 16 values in `[0, 1]`:
/// mean Lab (3), Lab standard deviation (3), saturation-weighted 8-bin hue
/// histogram (8) and normalized centroid (2).
pub fn handcrafted_features(image: &ImageRgb, partition: &SuperpixelPartition) -> Result<NodeFeatures> {
    let (height, width) = (image.height(), image.width());
    if partition.height() != height || partition.width() != width {
        return Err(Error::shape("partition does not match image size"));
    }
    let lab = lab_pixels(image);
    let count = partition.count();
    let mut sum = vec![[0.0f64; 3]; count];
    let mut sq = vec![[0.0f64; 3]; count];
    let mut hist = vec![[0.0f64; 8]; count];
    let mut pos = vec![[0.0f64; 2]; count];
    let sizes = partition.sizes();
    for (p, px) in lab.iter().enumerate() {
        let id = partition.id(p);
        for c in 0..3 {
            sum[id][c] += px[c];
            sq[id][c] += px[c] * px[c];
        }
        let (x, y) = (p % width, p / width);
        let (hue, sat) = hue_and_saturation(image.pixel(x, y));
        hist[id][((hue / 45.0) as usize).min(7)] += sat;
        pos[id][0] += x as f64;
        pos[id][1] += y as f64;
    }
    const MEAN_SCALE: [(f64, f64); 3] = [(0.0, 100.0), (128.0, 256.0), (128.0, 256.0)];
    const STD_SCALE: [f64; 3] = [50.0, 128.0, 128.0];
    let mut data = Vec::with_capacity(count * HANDCRAFTED_DIM);
    for i in 0..count {
        let n = sizes[i] as f64;
        let mean: [f64; 3] = std::array::from_fn(|c| sum[i][c] / n);
        for c in 0..3 {
            let (offset, scale) = MEAN_SCALE[c];
            data.push(((mean[c] + offset) / scale).clamp(0.0, 1.0));
        }
        for c in 0..3 {
            let var = (sq[i][c] / n - mean[c] * mean[c]).max(0.0);
            data.push((var.sqrt() / STD_SCALE[c]).clamp(0.0, 1.0));
        }
        data.extend(hist[i].iter().map(|h| h / n));
        data.push((pos[i][0] / n + 0.5) / width as f64);
        data.push((pos[i][1] / n + 0.5) / height as f64);
    }
    NodeFeatures::new(count, HANDCRAFTED_DIM, data)
}

/// Sorted neighbour lists of superpixels that share a 4-connected pixel
/// boundary.
pub fn spatial_weights(partition: &SuperpixelPartition) -> Vec<Vec<usize>> {
    let (h, w) = (partition.height(), partition.width());
    let mut sets = vec![std::collections::BTreeSet::new(); partition.count()];
    for y in 0..h {
        for x in 0..w {
            let a = partition.id(y * w + x);
            if x + 1 < w {
                let b = partition.id(y * w + x + 1);
                if a != b {
                    sets[a].insert(b);
                    sets[b].insert(a);
                }
            }
            if y + 1 < h {
                let b = partition.id((y + 1) * w + x);
                if a != b {
                    sets[a].insert(b);
                    sets[b].insert(a);
                }
            }
        }
    }
    sets.into_iter().map(|s| s.into_iter().collect()).collect()
}

/// `exp(-||v_i - v_j|| / (2h))` on spatially adjacent pairs.
pub fn semantic_weights(features: &NodeFeatures, spatial: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
    if features.rows() != spatial.len() {
        return Err(Error::shape(format!(
            "{} feature rows for {} nodes",
            features.rows(),
            spatial.len()
        )));
    }
    let scale = 2.0 * features.dim() as f64;
    Ok(spatial
        .iter()
        .enumerate()
        .map(|(i, nbrs)| {
            nbrs.iter()
                .map(|&j| {
                    let dist = features
                        .row(i)
                        .iter()
                        .zip(features.row(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    (-dist / scale).exp()
                })
                .collect()
        })
        .collect())
}

/// How the directed keep rule is turned into an undirected edge set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Symmetrize {
    /// Keep an edge if either endpoint keeps it.
    #[default]
    Or,
    /// Keep an edge only if both endpoints keep it.
    And,
}

impl std::str::FromStr for Symmetrize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "or" => Ok(Symmetrize::Or),
            "and" => Ok(Symmetrize::And),
            _ => Err(Error::InvalidParameter(format!(
                "edge symmetrization must be 'or' or 'and', got {s:?}"
            ))),
        }
    }
}

/// Mean minus population standard deviation of the semantic weights, taking
/// each adjacent unordered pair once.
pub fn similarity_gamma(semantic: &[Vec<f64>], spatial: &[Vec<usize>]) -> Option<f64> {
    let mut values = Vec::new();
    for (i, nbrs) in spatial.iter().enumerate() {
        for (k, &j) in nbrs.iter().enumerate() {
            if i < j {
                values.push(semantic[i][k]);
            }
        }
    }
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some(mean - var.sqrt())
}

/// Filters weak edges and adds self-loops.
///
/// Node `i` drops its edge to `j` when `w_ij` is below both `gamma` and
/// `i`'s strongest edge. Returns sorted neighbour lists (self included) and
/// the `gamma` used.
pub fn build_adjacency(
    semantic: &[Vec<f64>],
    spatial: &[Vec<usize>],
    mode: Symmetrize,
) -> Result<(Vec<Vec<usize>>, f64)> {
    let n = spatial.len();
    if semantic.len() != n || semantic.iter().zip(spatial).any(|(s, l)| s.len() != l.len()) {
        return Err(Error::shape("semantic weights do not follow spatial adjacency"));
    }
    let gamma = match similarity_gamma(semantic, spatial) {
        Some(g) => g,
        None if n > 1 => return Err(Error::InvalidParameter("superpixel graph has no spatial edges".into())),
        None => 0.0,
    };
    let keeps = |i: usize, k: usize| {
        let w = semantic[i][k];
        let strongest = semantic[i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        !(w < gamma && w < strongest)
    };
    let mut adjacency = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = vec![i];
        for (k, &j) in spatial[i].iter().enumerate() {
            let forward = keeps(i, k);
            let back_k = spatial[j]
                .binary_search(&i)
                .map_err(|_| Error::InvalidParameter("spatial adjacency is not symmetric".into()))?;
            let backward = keeps(j, back_k);
            let keep = match mode {
                Symmetrize::Or => forward || backward,
                Symmetrize::And => forward && backward,
            };
            if keep {
                row.push(j);
            }
        }
        row.sort_unstable();
        adjacency.push(row);
    }
    Ok((adjacency, gamma))
}

/// Per-image graph handed to the attention network.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGraph {
    features: NodeFeatures,
    spatial: Vec<Vec<usize>>,
    semantic: Vec<Vec<f64>>,
    adjacency: Vec<Vec<usize>>,
    gamma: f64,
}

impl ImageGraph {
    pub fn build(features: NodeFeatures, partition: &SuperpixelPartition, mode: Symmetrize) -> Result<Self> {
        if features.rows() != partition.count() {
            return Err(Error::shape(format!(
                "{} feature rows for {} superpixels",
                features.rows(),
                partition.count()
            )));
        }
        let spatial = spatial_weights(partition);
        let semantic = semantic_weights(&features, &spatial)?;
        let (adjacency, gamma) = build_adjacency(&semantic, &spatial, mode)?;
        ImageGraph::from_parts(features, spatial, semantic, adjacency, gamma)
    }

    /// Assembles a graph from explicit edge sets, checking structural
    /// invariants: symmetric sorted lists, self-loops, adjacency inside the
    /// spatial relation.
    pub fn from_parts(
        features: NodeFeatures,
        spatial: Vec<Vec<usize>>,
        semantic: Vec<Vec<f64>>,
        adjacency: Vec<Vec<usize>>,
        gamma: f64,
    ) -> Result<Self> {
        let n = features.rows();
        if spatial.len() != n || semantic.len() != n || adjacency.len() != n {
            return Err(Error::shape("graph parts disagree on node count"));
        }
        let invalid = |msg: &str| Err(Error::InvalidParameter(format!("graph: {msg}")));
        for i in 0..n {
            if semantic[i].len() != spatial[i].len() {
                return invalid("semantic weights do not follow spatial edges");
            }
            if !spatial[i].windows(2).all(|w| w[0] < w[1]) || !adjacency[i].windows(2).all(|w| w[0] < w[1]) {
                return invalid("neighbour lists must be sorted and unique");
            }
            if spatial[i]
                .iter()
                .any(|&j| j == i || j >= n || spatial[j].binary_search(&i).is_err())
            {
                return invalid("spatial relation must be symmetric without self edges");
            }
            if semantic[i].iter().any(|w| !(0.0..=1.0).contains(w)) {
                return invalid("semantic weights must lie in [0,1]");
            }
            if adjacency[i].binary_search(&i).is_err() {
                return invalid("adjacency needs a self-loop on every node");
            }
            for &j in &adjacency[i] {
                if j >= n || adjacency[j].binary_search(&i).is_err() {
                    return invalid("adjacency must be symmetric");
                }
                if j != i && spatial[i].binary_search(&j).is_err() {
                    return invalid("adjacency edge outside the spatial relation");
                }
            }
        }
        Ok(ImageGraph {
            features,
            spatial,
            semantic,
            adjacency,
            gamma,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self) -> &NodeFeatures {
        &self.features
    }

    pub fn spatial(&self) -> &[Vec<usize>] {
        &self.spatial
    }

    pub fn semantic(&self) -> &[Vec<f64>] {
        &self.semantic
    }

    /// Neighbour lists including self-loops.
    pub fn adjacency(&self) -> &[Vec<usize>] {
        &self.adjacency
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() - self.len()
    }

    /// LMG1 encoding: magic, `u32` n, `u32` h, `n*h` f32 features, `u32`
    /// record count, then one `(u32 i, u32 j, u8 w_l, f32 w_s, u8 a)` record
    /// per ordered pair with `w_l = 1` or `a = 1` in `(i, j)` order, then f32
    /// gamma. Little-endian throughout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = GRAPH_MAGIC.to_vec();
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.features.dim() as u32).to_le_bytes());
        for &v in self.features.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let mut records = Vec::new();
        for i in 0..self.len() {
            let (sp, adj) = (&self.spatial[i], &self.adjacency[i]);
            let (mut a, mut b) = (0, 0);
            while a < sp.len() || b < adj.len() {
                let j = match (sp.get(a), adj.get(b)) {
                    (Some(&x), Some(&y)) => x.min(y),
                    (Some(&x), None) => x,
                    (None, Some(&y)) => y,
                    (None, None) => unreachable!(),
                };
                let in_spatial = sp.get(a) == Some(&j);
                let ws = if in_spatial { self.semantic[i][a] } else { 0.0 };
                let in_adj = adj.get(b) == Some(&j);
                records.push((i as u32, j as u32, in_spatial as u8, ws as f32, in_adj as u8));
                a += in_spatial as usize;
                b += in_adj as usize;
            }
        }
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (i, j, wl, ws, a) in records {
            out.extend_from_slice(&i.to_le_bytes());
            out.extend_from_slice(&j.to_le_bytes());
            out.push(wl);
            out.extend_from_slice(&ws.to_le_bytes());
            out.push(a);
        }
        out.extend_from_slice(&(self.gamma as f32).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != GRAPH_MAGIC {
            return Err(Error::BadMagic {
                offset: 0,
                expected: "LMG1",
            });
        }
        let n = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let mut data = Vec::with_capacity(n * dim);
        for _ in 0..n * dim {
            data.push(r.f32()? as f64);
        }
        let features = NodeFeatures::new(n, dim, data)?;
        let records = r.u32()? as usize;
        let mut spatial = vec![Vec::new(); n];
        let mut semantic = vec![Vec::new(); n];
        let mut adjacency = vec![Vec::new(); n];
        for _ in 0..records {
            let i = r.u32()? as usize;
            let j = r.u32()? as usize;
            let wl = r.take(1)?[0];
            let ws = r.f32()? as f64;
            let a = r.take(1)?[0];
            if i >= n || j >= n || wl > 1 || a > 1 {
                return Err(Error::BadHeader(format!(
                    "bad edge record ({i},{j}) before byte {}",
                    r.pos
                )));
            }
            if wl == 1 {
                spatial[i].push(j);
                semantic[i].push(ws);
            }
            if a == 1 {
                adjacency[i].push(j);
            }
        }
        let gamma = r.f32()? as f64;
        if r.pos != bytes.len() {
            return Err(Error::BadHeader(format!("trailing bytes after byte {}", r.pos)));
        }
        ImageGraph::from_parts(features, spatial, semantic, adjacency, gamma)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos + len;
        let slice = self.bytes.get(self.pos..end).ok_or(Error::TruncatedPayload {
            offset: self.bytes.len(),
            needed: end.saturating_sub(self.bytes.len()),
        })?;
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f32> {
        let offset = self.pos;
        let b = self.take(4)?;
        let v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFiniteValue { offset })
        }
    }
}

pub fn read_graph(path: impl AsRef<Path>) -> Result<ImageGraph> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ImageGraph::from_bytes(&bytes)
}

pub fn write_graph(graph: &ImageGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, graph.to_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::superpixel::{slic, SlicParams};

    fn grid9() -> (ImageRgb, SuperpixelPartition) {
        let img = ImageRgb::from_fn(60, 60, |_, _| [0.4, 0.4, 0.4]);
        let p = slic(
            &img,
            SlicParams {
                target_count: 9,
                ..Default::default()
            },
        )
        .unwrap();
        (img, p)
    }

    #[test]
    fn grid_corners_have_two_neighbours() {
        let (_, p) = grid9();
        let w = spatial_weights(&p);
        for corner in [0, 2, 6, 8] {
            assert_eq!(w[corner].len(), 2);
        }
        assert_eq!(w[4].len(), 4);
    }

    #[test]
    fn single_and_double_superpixel_adjacency() {
        let img = ImageRgb::from_fn(4, 4, |_, _| [0.0; 3]);
        let one = SuperpixelPartition::from_assignment(&img, vec![0; 16]).unwrap();
        assert_eq!(spatial_weights(&one), vec![Vec::<usize>::new()]);
        let halves: Vec<u32> = (0..16).map(|p| u32::from(p % 4 >= 2)).collect();
        let two = SuperpixelPartition::from_assignment(&img, halves).unwrap();
        assert_eq!(spatial_weights(&two), vec![vec![1], vec![0]]);
        let feats = NodeFeatures::new(1, 1, vec![0.0]).unwrap();
        let g = ImageGraph::build(feats, &one, Symmetrize::Or).unwrap();
        assert_eq!(g.adjacency(), &[vec![0]]);
    }

    #[test]
    fn semantic_weight_values() {
        let spatial = vec![vec![1, 2], vec![0], vec![0]];
        // h = 2, so distance 4 gives exp(-1)
        let f = NodeFeatures::new(3, 2, vec![0.0, 0.0, 0.0, 0.0, 4.0, 0.0]).unwrap();
        let ws = semantic_weights(&f, &spatial).unwrap();
        assert_eq!(ws[0][0], 1.0);
        assert!((ws[0][1] - 0.367879).abs() < 1e-6);
        assert_eq!(ws[1], vec![1.0]);
    }

    #[test]
    fn equal_weights_keep_everything() {
        let spatial = vec![vec![1], vec![0, 2], vec![1]];
        let semantic = vec![vec![0.7], vec![0.7, 0.7], vec![0.7]];
        let (a, gamma) = build_adjacency(&semantic, &spatial, Symmetrize::Or).unwrap();
        assert!((gamma - 0.7).abs() < 1e-12);
        assert_eq!(a, vec![vec![0, 1], vec![0, 1, 2], vec![1, 2]]);
    }

    #[test]
    fn gamma_on_path() {
        // path 0-1-2-3 with weights 1.0, 0.5, 0.3
        let spatial = vec![vec![1], vec![0, 2], vec![1, 3], vec![2]];
        let semantic = vec![vec![1.0], vec![1.0, 0.5], vec![0.5, 0.3], vec![0.3]];
        let (a, gamma) = build_adjacency(&semantic, &spatial, Symmetrize::Or).unwrap();
        assert!((gamma - 0.305608).abs() < 1e-6);
        // 0.3 < gamma and below node 2's max, but it is node 3's only edge
        assert!(a[3].contains(&2) && a[2].contains(&3));
        let (a_and, _) = build_adjacency(&semantic, &spatial, Symmetrize::And).unwrap();
        assert!(!a_and[3].contains(&2));
    }

    #[test]
    fn upsample_constant_and_pool() {
        let img = ImageRgb::from_fn(4, 4, |_, _| [0.0; 3]);
        let p = SuperpixelPartition::from_assignment(&img, (0..16).map(|i| (i / 8) as u32).collect()).unwrap();
        let dense = Tensor::new(vec![1, 1, 1], vec![5.0]).unwrap();
        let f = pool_features(&dense, &p, (4, 4)).unwrap();
        assert_eq!(f.data(), &[5.0, 5.0]);
        let dense = Tensor::new(vec![2, 4, 4], [vec![3.0; 16], vec![-1.0; 16]].concat()).unwrap();
        let f = pool_features(&dense, &p, (4, 4)).unwrap();
        assert_eq!(f.data(), &[3.0, -1.0, 3.0, -1.0]);
        assert!(pool_features(&Tensor::new(vec![1, 5, 5], vec![0.0; 25]).unwrap(), &p, (4, 4)).is_err());
    }

    #[test]
    fn upsample_hand_values() {
        // [1,2;3,4] to 4x4: row 0 samples y=-0.25 -> clamped to 0,
        // column 1 samples x=0.25
        let dense = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = upsample_bilinear(&dense, 4, 4).unwrap();
        assert_eq!(up[0], 1.0);
        assert!((up[1] - 1.25).abs() < 1e-12);
        // (x=1, y=1): sample (0.25, 0.25) -> 1 + 0.25 + 0.5
        assert!((up[5] - 1.75).abs() < 1e-12);
        assert_eq!(up[15], 4.0);
    }

    #[test]
    fn handcrafted_blocks() {
        let img = ImageRgb::from_fn(6, 8, |x, _| if x < 4 { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0] });
        let whole = SuperpixelPartition::from_assignment(&img, vec![0; 48]).unwrap();
        let f = handcrafted_features(&img, &whole).unwrap();
        assert_eq!(f.dim(), HANDCRAFTED_DIM);
        assert!((f.row(0)[14] - 0.5).abs() < 1e-12);
        assert!((f.row(0)[15] - 0.5).abs() < 1e-12);
        assert!(f.data().iter().all(|v| (0.0..=1.0).contains(v)));

        let halves =
            SuperpixelPartition::from_assignment(&img, (0..48).map(|p| u32::from(p % 8 >= 4)).collect()).unwrap();
        let f = handcrafted_features(&img, &halves).unwrap();
        let red = &f.row(0)[..3];
        let blue = &f.row(1)[..3];
        let gap: f64 = red.iter().zip(blue).map(|(a, b)| (a - b).abs()).sum();
        assert!(gap > 0.5, "{red:?} vs {blue:?}");
        // red hue bin 0, blue hue 240 deg in bin 5, full saturation
        assert_eq!(f.row(0)[6], 1.0);
        assert_eq!(f.row(1)[6 + 5], 1.0);
        // uniform pixels: zero spread
        assert!(f.row(0)[3..6].iter().all(|&s| s < 1e-6));
    }

    #[test]
    fn lmg_round_trip_and_corruption() {
        let (img, p) = grid9();
        let feats = handcrafted_features(&img, &p).unwrap();
        let g = ImageGraph::build(feats, &p, Symmetrize::Or).unwrap();
        let bytes = g.to_bytes();
        let back = ImageGraph::from_bytes(&bytes).unwrap();
        assert_eq!(back.adjacency(), g.adjacency());
        assert_eq!(back.spatial(), g.spatial());
        assert_eq!(back.to_bytes(), bytes);
        assert!(ImageGraph::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ImageGraph::from_bytes(&bad), Err(Error::BadMagic { .. })));
    }
}
