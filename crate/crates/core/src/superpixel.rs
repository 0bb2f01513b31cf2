//! SLIC over-segmentation in CIELAB + image-plane space.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::tensorio::{ImageRgb, Tensor};

pub const DEFAULT_SUPERPIXELS: usize = 1000;
pub const DEFAULT_COMPACTNESS: f64 = 10.0;
pub const DEFAULT_ITERATIONS: usize = 10;

// D65 reference white
const WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];

fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// sRGB (components in `[0, 1]`) to CIELAB under D65.
pub fn srgb_to_lab(rgb: [f32; 3]) -> [f64; 3] {
    let [r, g, b] = rgb.map(|v| srgb_to_linear(v as f64));
    let x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
    let fx = lab_f(x / WHITE[0]);
    let fy = lab_f(y / WHITE[1]);
    let fz = lab_f(z / WHITE[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

pub(crate) fn lab_pixels(image: &ImageRgb) -> Vec<[f64; 3]> {
    let (h, w) = (image.height(), image.width());
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push(srgb_to_lab(image.pixel(x, y)));
        }
    }
    out
}

/// CIELAB planes `[3, H, W]` (L, a, b).
pub fn rgb_to_lab(image: &ImageRgb) -> Tensor {
    let lab = lab_pixels(image);
    let n = lab.len();
    let mut data = vec![0.0f32; 3 * n];
    for (i, px) in lab.iter().enumerate() {
        for c in 0..3 {
            data[c * n + i] = px[c] as f32;
        }
    }
    Tensor::new(vec![3, image.height(), image.width()], data).expect("finite Lab values")
}

/// Pixel-to-superpixel assignment with dense ids and 4-connected regions.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpixelPartition {
    height: usize,
    width: usize,
    assignment: Vec<u32>,
    count: usize,
    /// `(L, a, b, x, y)` centroid of each superpixel.
    centers: Vec<[f64; 5]>,
}

impl SuperpixelPartition {
    /// Validates an externally supplied assignment and computes centroids
    /// from `image`.
    pub fn from_assignment(image: &ImageRgb, assignment: Vec<u32>) -> Result<Self> {
        let (height, width) = (image.height(), image.width());
        if assignment.len() != height * width {
            return Err(Error::shape(format!(
                "{height}x{width} image given {} superpixel ids",
                assignment.len()
            )));
        }
        if assignment.is_empty() {
            return Err(Error::EmptyImage);
        }
        let count = *assignment.iter().max().expect("non-empty") as usize + 1;
        let mut used = vec![false; count];
        for &id in &assignment {
            used[id as usize] = true;
        }
        if let Some(missing) = used.iter().position(|u| !u) {
            return Err(Error::InvalidParameter(format!(
                "superpixel ids are not dense: {missing} unused"
            )));
        }
        let components = label_components(height, width, &assignment).1;
        if components != count {
            return Err(Error::InvalidParameter("superpixels are not 4-connected".into()));
        }
        let centers = centroids(&lab_pixels(image), width, &assignment, count);
        Ok(SuperpixelPartition {
            height,
            width,
            assignment,
            count,
            centers,
        })
    }

    /// Reads ids stored as f32 values in an `[H, W]` tensor.
    pub fn from_tensor(image: &ImageRgb, t: &Tensor) -> Result<Self> {
        if t.dims() != [image.height(), image.width()] {
            return Err(Error::shape(format!(
                "superpixel tensor {:?} does not match {}x{} image",
                t.dims(),
                image.height(),
                image.width()
            )));
        }
        let ids = t
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v < 16_777_216.0 {
                    Ok(v as u32)
                } else {
                    Err(Error::InvalidParameter(format!("bad superpixel id {v}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        SuperpixelPartition::from_assignment(image, ids)
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.assignment.iter().map(|&id| id as f32).collect();
        Tensor::new(vec![self.height, self.width], data).expect("ids are finite")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn assignment(&self) -> &[u32] {
        &self.assignment
    }

    pub fn id(&self, pixel: usize) -> usize {
        self.assignment[pixel] as usize
    }

    pub fn centers(&self) -> &[[f64; 5]] {
        &self.centers
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.count];
        for &id in &self.assignment {
            sizes[id as usize] += 1;
        }
        sizes
    }
}

fn centroids(lab: &[[f64; 3]], width: usize, assignment: &[u32], count: usize) -> Vec<[f64; 5]> {
    let mut sums = vec![[0.0f64; 6]; count];
    for (p, &id) in assignment.iter().enumerate() {
        let s = &mut sums[id as usize];
        s[0] += lab[p][0];
        s[1] += lab[p][1];
        s[2] += lab[p][2];
        s[3] += (p % width) as f64;
        s[4] += (p / width) as f64;
        s[5] += 1.0;
    }
    sums.iter()
        .map(|s| {
            let n = s[5].max(1.0);
            [s[0] / n, s[1] / n, s[2] / n, s[3] / n, s[4] / n]
        })
        .collect()
}

fn neighbors4(p: usize, width: usize, height: usize) -> impl Iterator<Item = usize> {
    let (x, y) = (p % width, p / width);
    let left = (x > 0).then(|| p - 1);
    let right = (x + 1 < width).then(|| p + 1);
    let up = (y > 0).then(|| p - width);
    let down = (y + 1 < height).then(|| p + width);
    [left, right, up, down].into_iter().flatten()
}

/// 4-connected components of equal-label regions: (component id per pixel,
/// component count). Components are numbered in raster order of their
/// first pixel.
fn label_components<T: PartialEq + Copy>(height: usize, width: usize, labels: &[T]) -> (Vec<usize>, usize) {
    let n = labels.len();
    let mut comp = vec![usize::MAX; n];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        comp[start] = next;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            for q in neighbors4(p, width, height) {
                if comp[q] == usize::MAX && labels[q] == labels[start] {
                    comp[q] = next;
                    queue.push_back(q);
                }
            }
        }
        next += 1;
    }
    (comp, next)
}

fn gradient(lab: &[[f64; 3]], width: usize, height: usize, x: usize, y: usize) -> f64 {
    let at = |x: usize, y: usize| lab[y * width + x];
    let sq = |a: [f64; 3], b: [f64; 3]| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>();
    let (xl, xr) = (x.saturating_sub(1), (x + 1).min(width - 1));
    let (yu, yd) = (y.saturating_sub(1), (y + 1).min(height - 1));
    sq(at(xr, y), at(xl, y)) + sq(at(x, yd), at(x, yu))
}

/// Parameters of [`slic`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlicParams {
    pub target_count: usize,
    pub compactness: f64,
    pub iterations: usize,
}

impl Default for SlicParams {
    fn default() -> Self {
        SlicParams {
            target_count: DEFAULT_SUPERPIXELS,
            compactness: DEFAULT_COMPACTNESS,
            iterations: DEFAULT_ITERATIONS,
        }
    }
}

/// Simple linear iterative clustering.
///
/// Centers start on a regular grid with step `S = sqrt(HW / target)`, move to
/// the lowest-gradient pixel of their 3x3 neighbourhood, then alternate
/// assignment inside a `2S x 2S` window with centroid updates. Afterwards
/// every label keeps only its largest 4-connected piece; the other pieces
/// (and pixels no window reached) are merged into the largest adjacent
/// superpixel. Fully deterministic.
pub fn slic(image: &ImageRgb, params: SlicParams) -> Result<SuperpixelPartition> {
    let (height, width) = (image.height(), image.width());
    let n = height * width;
    if n == 0 {
        return Err(Error::EmptyImage);
    }
    if params.target_count == 0 {
        return Err(Error::InvalidParameter("target superpixel count must be >= 1".into()));
    }
    if params.target_count > n {
        return Err(Error::TargetTooLarge {
            target: params.target_count,
            pixels: n,
        });
    }
    if !(params.compactness > 0.0) {
        return Err(Error::InvalidParameter("compactness must be positive".into()));
    }
    let lab = lab_pixels(image);
    let step = (n as f64 / params.target_count as f64).sqrt();
    let nx = ((width as f64 / step).round() as usize).clamp(1, width);
    let ny = ((height as f64 / step).round() as usize).clamp(1, height);

    let mut centers: Vec<[f64; 5]> = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let cx = (i as f64 + 0.5) * width as f64 / nx as f64 - 0.5;
            let cy = (j as f64 + 0.5) * height as f64 / ny as f64 - 0.5;
            let px = (cx.round() as usize).min(width - 1);
            let py = (cy.round() as usize).min(height - 1);
            let mut best = (gradient(&lab, width, height, px, py), px, py);
            let mut moved = false;
            // stay inside the grid cell when cells are narrower than 3 px
            let reach = ((step - 1.0) / 2.0).floor().clamp(0.0, 1.0) as i64;
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    let (qx, qy) = (px as i64 + dx, py as i64 + dy);
                    if qx < 0 || qy < 0 || qx >= width as i64 || qy >= height as i64 {
                        continue;
                    }
                    let g = gradient(&lab, width, height, qx as usize, qy as usize);
                    if g < best.0 {
                        best = (g, qx as usize, qy as usize);
                        moved = true;
                    }
                }
            }
            let (x, y) = if moved {
                (best.1 as f64, best.2 as f64)
            } else {
                (cx, cy)
            };
            let c = lab[best.2 * width + best.1];
            centers.push([c[0], c[1], c[2], x, y]);
        }
    }

    let spatial = (params.compactness / step).powi(2);
    let mut labels = vec![u32::MAX; n];
    let mut dist = vec![f64::INFINITY; n];
    for _ in 0..params.iterations.max(1) {
        labels.fill(u32::MAX);
        dist.fill(f64::INFINITY);
        for (k, c) in centers.iter().enumerate() {
            let x0 = (c[3] - step).ceil().max(0.0) as usize;
            let x1 = ((c[3] + step).floor().max(0.0) as usize).min(width - 1);
            let y0 = (c[4] - step).ceil().max(0.0) as usize;
            let y1 = ((c[4] + step).floor().max(0.0) as usize).min(height - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let p = y * width + x;
                    let l = lab[p];
                    let dc = (l[0] - c[0]).powi(2) + (l[1] - c[1]).powi(2) + (l[2] - c[2]).powi(2);
                    let ds = (x as f64 - c[3]).powi(2) + (y as f64 - c[4]).powi(2);
                    let d = dc + spatial * ds;
                    if d < dist[p] {
                        dist[p] = d;
                        labels[p] = k as u32;
                    }
                }
            }
        }
        let mut sums = vec![[0.0f64; 6]; centers.len()];
        for (p, &k) in labels.iter().enumerate() {
            if k == u32::MAX {
                continue;
            }
            let s = &mut sums[k as usize];
            s[0] += lab[p][0];
            s[1] += lab[p][1];
            s[2] += lab[p][2];
            s[3] += (p % width) as f64;
            s[4] += (p / width) as f64;
            s[5] += 1.0;
        }
        for (c, s) in centers.iter_mut().zip(&sums) {
            if s[5] > 0.0 {
                for d in 0..5 {
                    c[d] = s[d] / s[5];
                }
            }
        }
    }

    let assignment = enforce_connectivity(height, width, &labels);
    let count = *assignment.iter().max().expect("non-empty") as usize + 1;
    let centers = centroids(&lab, width, &assignment, count);
    Ok(SuperpixelPartition {
        height,
        width,
        assignment,
        count,
        centers,
    })
}

/// Keeps the largest piece of every label and merges the remaining pieces
/// into the largest adjacent kept superpixel. Returns dense ids numbered in
/// raster order.
fn enforce_connectivity(height: usize, width: usize, labels: &[u32]) -> Vec<u32> {
    let (comp, ncomp) = label_components(height, width, labels);
    let mut comp_size = vec![0usize; ncomp];
    let mut comp_label = vec![u32::MAX; ncomp];
    for (p, &c) in comp.iter().enumerate() {
        comp_size[c] += 1;
        comp_label[c] = labels[p];
    }
    // largest component per label; ties go to the earlier component
    let mut keeper: std::collections::HashMap<u32, usize> = std::collections::HashMap::new();
    for c in 0..ncomp {
        let l = comp_label[c];
        if l == u32::MAX {
            continue;
        }
        match keeper.get(&l) {
            Some(&k) if comp_size[k] >= comp_size[c] => {}
            _ => {
                keeper.insert(l, c);
            }
        }
    }
    // owner[c] = kept component that c belongs to (itself when kept)
    let mut owner: Vec<Option<usize>> = (0..ncomp)
        .map(|c| (comp_label[c] != u32::MAX && keeper[&comp_label[c]] == c).then_some(c))
        .collect();
    let mut size: Vec<usize> = comp_size.clone();

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); ncomp];
    for (p, &c) in comp.iter().enumerate() {
        members[c].push(p);
    }
    loop {
        let mut progressed = false;
        let mut pending = false;
        for c in 0..ncomp {
            if owner[c].is_some() {
                continue;
            }
            let mut best: Option<usize> = None;
            for &p in &members[c] {
                for q in neighbors4(p, width, height) {
                    if let Some(o) = owner[comp[q]] {
                        if o == c {
                            continue;
                        }
                        best = match best {
                            Some(b) if size[b] > size[o] || (size[b] == size[o] && b <= o) => Some(b),
                            _ => Some(o),
                        };
                    }
                }
            }
            match best {
                Some(o) => {
                    owner[c] = Some(o);
                    size[o] += comp_size[c];
                    progressed = true;
                }
                None => pending = true,
            }
        }
        if !pending {
            break;
        }
        if !progressed {
            // a lone unreached region covering the whole image
            for o in owner.iter_mut().filter(|o| o.is_none()) {
                *o = Some(0);
            }
            break;
        }
    }
    let mut dense = vec![u32::MAX; ncomp];
    let mut next = 0u32;
    comp.iter()
        .map(|&c| {
            let o = owner[c].expect("every component owned");
            if dense[o] == u32::MAX {
                dense[o] = next;
                next += 1;
            }
            dense[o]
        })
        .collect()
}
