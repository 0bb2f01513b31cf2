//! Deterministic synthetic scenes with ground truth, CAM-like score maps with
//! structured noise, and clean-model probabilities.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::camlab::{assign_labels, ScoreMapSet, DEFAULT_BACKGROUND_THRESHOLD};
use crate::corrector::MANIFEST_HEADER;
use crate::detector::ProbabilityMap;
use crate::error::{Error, Result};
use crate::tensorio::{write_image, write_label_map, write_tensor, ImageRgb, LabelMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    /// Three-lobed star shape: radius `radii[0] + radii[1] * sin(3 phi + rotation)`.
    Blob,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shape {
    pub kind: ShapeKind,
    pub class: u8,
    pub color: [f32; 3],
    /// `[x, y]` in pixels.
    pub center: [f64; 2],
    /// Semi-axes for ellipses and rectangles.
    pub radii: [f64; 2],
    /// Radians.
    #[serde(default)]
    pub rotation: f64,
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let (s, c) = self.rotation.sin_cos();
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        let [a, b] = self.radii;
        match self.kind {
            ShapeKind::Ellipse => (u / a).powi(2) + (v / b).powi(2) <= 1.0,
            ShapeKind::Rectangle => u.abs() <= a && v.abs() <= b,
            ShapeKind::Blob => {
                let r = dx.hypot(dy);
                r <= a + b * (3.0 * dy.atan2(dx) + self.rotation).sin()
            }
        }
    }

    /// Half extents of the axis-aligned bounding box.
    fn extent(&self) -> [f64; 2] {
        let [a, b] = self.radii;
        let (s, c) = self.rotation.sin_cos();
        match self.kind {
            ShapeKind::Ellipse => [(a * c).hypot(b * s), (a * s).hypot(b * c)],
            ShapeKind::Rectangle => [(a * c).abs() + (b * s).abs(), (a * s).abs() + (b * c).abs()],
            ShapeKind::Blob => [a + b.abs(); 2],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct NoiseSpec {
    /// Disc dilation radius applied to every class mask.
    pub dilate: usize,
    /// Disc erosion radius, applied after dilation.
    pub erode: usize,
    /// `[dx, dy]` translation applied last.
    pub shift: [i64; 2],
    /// Fraction of pixels whose mask value is replaced by a random class.
    pub flip_fraction: f64,
}

/// Clean-model probability mass on the true class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fidelity {
    /// Where the initial label is right.
    pub correct: f64,
    /// Where the initial label is wrong.
    pub incorrect: f64,
    /// Standard deviation of a per-pixel Gaussian perturbation of the
    /// fidelity, clamped to `[0, 1]`.
    pub jitter: f64,
}

impl Default for Fidelity {
    fn default() -> Self {
        Fidelity {
            correct: 0.9,
            incorrect: 0.4,
            jitter: 0.05,
        }
    }
}

fn default_classes() -> usize {
    4
}

fn default_background() -> [f32; 3] {
    [0.5, 0.5, 0.5]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    #[serde(default)]
    pub seed: u64,
    /// Including background.
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_background")]
    pub background: [f32; 3],
    /// Standard deviation of additive Gaussian pixel noise.
    #[serde(default)]
    pub image_noise: f64,
    #[serde(default)]
    pub shapes: Vec<Shape>,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub fidelity: Fidelity,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.height == 0 || self.width == 0 {
            return Err(Error::EmptyImage);
        }
        if !(2..=255).contains(&self.num_classes) {
            return bad(format!("num-classes must be in 2..=255, got {}", self.num_classes));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.noise.flip_fraction) || !unit(self.fidelity.correct) || !unit(self.fidelity.incorrect) {
            return bad("fractions and fidelities must lie in [0,1]".into());
        }
        if !(self.fidelity.jitter >= 0.0) || !(self.image_noise >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        for (index, s) in self.shapes.iter().enumerate() {
            if s.class == 0 || s.class as usize >= self.num_classes {
                return bad(format!("shape {index}: class {} is not a foreground class", s.class));
            }
            if !(s.radii[0] > 0.0) || !(s.radii[1] > 0.0 || (s.kind == ShapeKind::Blob && s.radii[1] >= 0.0)) {
                return bad(format!("shape {index}: radii must be positive"));
            }
            let [ex, ey] = s.extent();
            let [cx, cy] = s.center;
            let (w, h) = ((self.width - 1) as f64, (self.height - 1) as f64);
            if !(cx - ex >= 0.0 && cx + ex <= w && cy - ey >= 0.0 && cy + ey <= h) {
                return Err(Error::ShapeOutOfCanvas { index });
            }
        }
        Ok(())
    }
}

/// One generated scene.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub image: ImageRgb,
    pub gt: LabelMap,
    pub scores: ScoreMapSet,
    pub probs: ProbabilityMap,
    /// `assign_labels(scores)` at the default background threshold.
    pub init: LabelMap,
}

fn unit_f64(rng: &mut Xoshiro256PlusPlus) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn disc(radius: usize) -> Vec<(i64, i64)> {
    let r = radius as i64;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Binary dilation (`grow`) or erosion by a disc. Outside the canvas counts
/// as background.
fn morph(mask: &[bool], height: usize, width: usize, radius: usize, grow: bool) -> Vec<bool> {
    if radius == 0 {
        return mask.to_vec();
    }
    let offsets = disc(radius);
    let at = |x: i64, y: i64| {
        x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height && mask[y as usize * width + x as usize]
    };
    (0..height * width)
        .map(|p| {
            let (x, y) = ((p % width) as i64, (p / width) as i64);
            if grow {
                offsets.iter().any(|&(dx, dy)| at(x + dx, y + dy))
            } else {
                offsets.iter().all(|&(dx, dy)| at(x + dx, y + dy))
            }
        })
        .collect()
}

fn shift(mask: &[bool], height: usize, width: usize, [dx, dy]: [i64; 2]) -> Vec<bool> {
    (0..height * width)
        .map(|p| {
            let (x, y) = ((p % width) as i64 - dx, (p / width) as i64 - dy);
            x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height && mask[y as usize * width + x as usize]
        })
        .collect()
}

/// Applies the dilate, erode and shift steps of `noise` to a binary mask.
pub fn corrupt_mask(mask: &[bool], height: usize, width: usize, noise: &NoiseSpec) -> Vec<bool> {
    let m = morph(mask, height, width, noise.dilate, true);
    let m = morph(&m, height, width, noise.erode, false);
    shift(&m, height, width, noise.shift)
}

/// 5x5 box average with zero padding.
pub fn box_blur5(plane: &[f32], height: usize, width: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let mut sum = 0.0f64;
            for yy in y.saturating_sub(2)..(y + 3).min(height) {
                for xx in x.saturating_sub(2)..(x + 3).min(width) {
                    sum += plane[yy * width + xx] as f64;
                }
            }
            out[y * width + x] = (sum / 25.0) as f32;
        }
    }
    out
}

fn min_max(plane: &mut [f32]) {
    let lo = plane.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if hi > lo {
        for v in plane.iter_mut() {
            *v = (*v - lo) / (hi - lo);
        }
    } else {
        plane.fill(0.0);
    }
}

/// Ground truth by painting shapes in order (later shapes on top).
pub fn rasterize(spec: &SceneSpec) -> Result<(LabelMap, Vec<Option<usize>>)> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut owner = vec![None; h * w];
    for (i, s) in spec.shapes.iter().enumerate() {
        for (p, o) in owner.iter_mut().enumerate() {
            if s.contains((p % w) as f64, (p / w) as f64) {
                *o = Some(i);
            }
        }
    }
    let labels = owner
        .iter()
        .map(|o| Some(o.map_or(0, |i| spec.shapes[i].class)))
        .collect();
    Ok((LabelMap::new(h, w, spec.num_classes, labels)?, owner))
}

/// Renders the scene, corrupts its class masks into CAM-like scores and
/// synthesizes clean-model probabilities around the resulting labels.
pub fn generate(spec: &SceneSpec) -> Result<SynthScene> {
    let (gt, owner) = rasterize(spec)?;
    let (h, w, c) = (spec.height, spec.width, spec.num_classes);
    let n = h * w;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(spec.seed);

    let mut image = vec![0.0f32; 3 * n];
    for p in 0..n {
        let color = owner[p].map_or(spec.background, |i| spec.shapes[i].color);
        for ch in 0..3 {
            let noise: f64 = StandardNormal.sample(&mut rng);
            image[ch * n + p] = (color[ch] as f64 + spec.image_noise * noise).clamp(0.0, 1.0) as f32;
        }
    }
    let image = ImageRgb::from_planar(h, w, image)?;

    let relevant: BTreeSet<u8> = gt.labels().iter().flatten().copied().filter(|&l| l != 0).collect();
    let mut masks: Vec<Vec<bool>> = (1..c as u8)
        .map(|class| {
            if !relevant.contains(&class) {
                return vec![false; n];
            }
            let mask: Vec<bool> = gt.labels().iter().map(|&l| l == Some(class)).collect();
            corrupt_mask(&mask, h, w, &spec.noise)
        })
        .collect();
    if spec.noise.flip_fraction > 0.0 {
        let choices: Vec<u8> = std::iter::once(0).chain(relevant.iter().copied()).collect();
        for p in 0..n {
            if unit_f64(&mut rng) < spec.noise.flip_fraction {
                let pick = choices[(rng.next_u64() % choices.len() as u64) as usize];
                for (i, m) in masks.iter_mut().enumerate() {
                    m[p] = pick as usize == i + 1;
                }
            }
        }
    }
    let planes = masks
        .iter()
        .map(|m| {
            let indicator: Vec<f32> = m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            let mut plane = box_blur5(&indicator, h, w);
            min_max(&mut plane);
            plane
        })
        .collect();
    let scores = ScoreMapSet::new(h, w, planes, relevant)?;
    let init = assign_labels(&scores, DEFAULT_BACKGROUND_THRESHOLD)?;

    let mut probs = vec![0.0f32; c * n];
    for p in 0..n {
        let truth = gt.labels()[p].expect("ground truth is dense") as usize;
        let base = if init.labels()[p] == gt.labels()[p] {
            spec.fidelity.correct
        } else {
            spec.fidelity.incorrect
        };
        let jitter: f64 = StandardNormal.sample(&mut rng);
        let f = (base + spec.fidelity.jitter * jitter).clamp(0.0, 1.0);
        let mut row: Vec<f64> = (0..c)
            .map(|k| (1.0 - f) / c as f64 + if k == truth { f } else { 0.0 })
            .collect();
        let sum: f64 = row.iter().sum();
        for v in &mut row {
            *v /= sum;
        }
        for (k, v) in row.into_iter().enumerate() {
            probs[k * n + p] = v as f32;
        }
    }
    let probs = ProbabilityMap::new(c, h, w, probs)?;
    Ok(SynthScene {
        image,
        gt,
        scores,
        probs,
        init,
    })
}

/// Fraction of pixels whose labels differ.
pub fn corruption_rate(init: &LabelMap, gt: &LabelMap) -> Result<f64> {
    if !init.same_shape(gt) {
        return Err(Error::shape("label maps differ in size"));
    }
    if init.is_empty() {
        return Ok(0.0);
    }
    let wrong = init.labels().iter().zip(gt.labels()).filter(|(a, b)| a != b).count();
    Ok(wrong as f64 / init.len() as f64)
}

/// Random scenes with three foreground classes and a bounded corruption
/// rate, produced by dilation and shifting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct SuiteSpec {
    pub count: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub min_corruption: f64,
    pub max_corruption: f64,
    pub image_noise: f64,
    pub fidelity: Fidelity,
    pub id_prefix: String,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        SuiteSpec {
            count: 10,
            seed: 0,
            height: 128,
            width: 128,
            min_corruption: 0.15,
            max_corruption: 0.35,
            image_noise: 0.03,
            fidelity: Fidelity::default(),
            id_prefix: "scene".into(),
        }
    }
}

const CLASS_COLORS: [[f32; 3]; 3] = [[0.85, 0.2, 0.15], [0.2, 0.7, 0.25], [0.2, 0.3, 0.85]];
const MAX_ATTEMPTS: usize = 200;

fn uniform(rng: &mut Xoshiro256PlusPlus, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * unit_f64(rng)
}

fn random_scene(suite: &SuiteSpec, rng: &mut Xoshiro256PlusPlus, seed: u64) -> SceneSpec {
    let (h, w) = (suite.height as f64, suite.width as f64);
    let scale = h.min(w);
    let count = 2 + (rng.next_u64() % 3) as usize;
    let mut shapes = Vec::with_capacity(count);
    for i in 0..count {
        // the first three shapes cover all three classes
        let class = if i < 3 {
            i as u8 + 1
        } else {
            1 + (rng.next_u64() % 3) as u8
        };
        let kind = [ShapeKind::Ellipse, ShapeKind::Rectangle, ShapeKind::Blob][(rng.next_u64() % 3) as usize];
        let a = uniform(rng, 0.10, 0.20) * scale;
        let b = match kind {
            ShapeKind::Blob => uniform(rng, 0.1, 0.25) * a,
            _ => uniform(rng, 0.6, 1.0) * a,
        };
        let rotation = uniform(rng, 0.0, std::f64::consts::PI);
        let reach = a + b + 1.0;
        let center = [
            uniform(rng, reach, w - 1.0 - reach),
            uniform(rng, reach, h - 1.0 - reach),
        ];
        let base = CLASS_COLORS[class as usize - 1];
        let color = base.map(|v| (v as f64 + uniform(rng, -0.05, 0.05)).clamp(0.0, 1.0) as f32);
        shapes.push(Shape {
            kind,
            class,
            color,
            center,
            radii: [a, b],
            rotation,
        });
    }
    let magnitude = uniform(rng, 3.0, 6.0);
    let angle = uniform(rng, 0.0, 2.0 * std::f64::consts::PI);
    SceneSpec {
        height: suite.height,
        width: suite.width,
        seed,
        num_classes: 4,
        background: [0.5, 0.5, 0.5],
        image_noise: suite.image_noise,
        shapes,
        noise: NoiseSpec {
            dilate: 2 + (rng.next_u64() % 4) as usize,
            erode: 0,
            shift: [
                (magnitude * angle.cos()).round() as i64,
                (magnitude * angle.sin()).round() as i64,
            ],
            flip_fraction: 0.0,
        },
        fidelity: suite.fidelity,
    }
}

/// Draws `count` scenes whose initial labels have a corruption rate inside
/// `[min_corruption, max_corruption]`, rejecting draws that fall outside.
pub fn generate_suite(suite: &SuiteSpec) -> Result<Vec<(String, SceneSpec, SynthScene)>> {
    if suite.height < 32 || suite.width < 32 {
        return Err(Error::InvalidParameter("suite scenes must be at least 32x32".into()));
    }
    if !(suite.min_corruption <= suite.max_corruption) {
        return Err(Error::InvalidParameter("min-corruption exceeds max-corruption".into()));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(suite.seed);
    let mut out = Vec::with_capacity(suite.count);
    for index in 0..suite.count {
        let id = format!("{}{index:03}", suite.id_prefix);
        let mut found = None;
        for _ in 0..MAX_ATTEMPTS {
            let seed = rng.next_u64();
            let spec = random_scene(suite, &mut rng, seed);
            let scene = generate(&spec)?;
            let rate = corruption_rate(&scene.init, &scene.gt)?;
            if (suite.min_corruption..=suite.max_corruption).contains(&rate) {
                found = Some((spec, scene));
                break;
            }
        }
        let (spec, scene) = found.ok_or_else(|| {
            Error::InvalidParameter(format!(
                "no scene within the corruption range after {MAX_ATTEMPTS} draws"
            ))
        })?;
        out.push((id, spec, scene));
    }
    Ok(out)
}

/// Contents of a synth spec file: one scene, or a `[suite]` table.
#[derive(Debug, Clone, PartialEq)]
pub enum SynthFile {
    Scene(SceneSpec),
    Suite(SuiteSpec),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SuiteWrapper {
    suite: SuiteSpec,
}

impl SynthFile {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if table.contains_key("suite") {
            let w: SuiteWrapper = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
            Ok(SynthFile::Suite(w.suite))
        } else {
            let spec: SceneSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
            spec.validate()?;
            Ok(SynthFile::Scene(spec))
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SynthFile::from_toml_str(&text)
    }
}

/// Writes `<id>.ppm`, `<id>_gt.pgm`, `<id>_init.pgm`, `<id>_probs.lmt` and
/// `<id>_cam.lmt` for each scene, plus `manifest.tsv` (correction input) and
/// `theta_manifest.tsv` (threshold selection input).
pub fn write_scenes<'a>(outdir: &Path, scenes: impl IntoIterator<Item = (&'a str, &'a SynthScene)>) -> Result<usize> {
    fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    let mut theta = String::from("#id\tprobs\tinit\tgt\n");
    let mut written = 0;
    for (id, scene) in scenes {
        write_image(&scene.image, outdir.join(format!("{id}.ppm")))?;
        write_label_map(&scene.gt, outdir.join(format!("{id}_gt.pgm")))?;
        write_label_map(&scene.init, outdir.join(format!("{id}_init.pgm")))?;
        write_tensor(&scene.probs.to_tensor(), outdir.join(format!("{id}_probs.lmt")))?;
        write_tensor(&scene.scores.to_tensor(), outdir.join(format!("{id}_cam.lmt")))?;
        let relevant: Vec<String> = scene.scores.relevant().iter().map(u8::to_string).collect();
        writeln!(
            manifest,
            "{id}\t{id}.ppm\t{id}_probs.lmt\tHANDCRAFTED\t{}\t{id}_gt.pgm\t{id}_cam.lmt",
            relevant.join(",")
        )
        .expect("string write");
        writeln!(theta, "{id}\t{id}_probs.lmt\t{id}_init.pgm\t{id}_gt.pgm").expect("string write");
        written += 1;
    }
    for (name, text) in [("manifest.tsv", manifest), ("theta_manifest.tsv", theta)] {
        let path = outdir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(written)
}
