//! Per-image label correction and the manifest-driven pipeline.
//!
//! Clean pixel labels are voted into superpixels, an attention network is
//! trained on the voted superpixels and predicts the rest, and every pixel
//! takes its superpixel's label.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;

use crate::camlab::{assign_labels, compute_cam, ClassifierWeights};
use crate::config::PipelineConfig;
use crate::detector::{detect_clean, pixel_loss, CleanMask, ProbabilityMap};
use crate::error::{Error, Result};
use crate::evalkit::{iou, seed_quality};
use crate::gat::{self, GatModel, GatShape, TrainConfig};
use crate::graphbuild::{handcrafted_features, pool_features, ImageGraph, NodeFeatures};
use crate::superpixel::{slic, SuperpixelPartition};
use crate::tensorio::{
    default_palette, read_image, read_label_map, read_tensor, write_color_overlay, write_label_map, LabelMap,
};

/// Superpixel labels voted from clean pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeLabelAssignment {
    labels: Vec<Option<u8>>,
    vote_margin: Vec<f64>,
    num_classes: usize,
}

impl NodeLabelAssignment {
    pub fn new(labels: Vec<Option<u8>>, vote_margin: Vec<f64>, num_classes: usize) -> Result<Self> {
        if labels.len() != vote_margin.len() {
            return Err(Error::shape("labels and vote margins differ in length"));
        }
        if let Some(l) = labels.iter().flatten().find(|&&l| l as usize >= num_classes) {
            return Err(Error::InvalidParameter(format!(
                "seed label {l} out of range for {num_classes} classes"
            )));
        }
        Ok(NodeLabelAssignment {
            labels,
            vote_margin,
            num_classes,
        })
    }

    pub fn labels(&self) -> &[Option<u8>] {
        &self.labels
    }

    /// Winning share of the clean votes; 0 for unseeded nodes.
    pub fn vote_margin(&self) -> &[f64] {
        &self.vote_margin
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn seeded_count(&self) -> usize {
        self.labels.iter().flatten().count()
    }

    pub fn seeded_classes(&self) -> BTreeSet<u8> {
        self.labels.iter().flatten().copied().collect()
    }
}

fn vote(counts: &[u64]) -> Option<(u8, f64)> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return None;
    }
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    Some((best as u8, counts[best] as f64 / total as f64))
}

fn check_partition(partition: &SuperpixelPartition, labels: &LabelMap) -> Result<()> {
    if partition.height() != labels.height() || partition.width() != labels.width() {
        return Err(Error::shape("superpixel partition and label map differ in size"));
    }
    Ok(())
}

fn tally(partition: &SuperpixelPartition, labels: &LabelMap, keep: impl Fn(usize) -> bool) -> Vec<Vec<u64>> {
    let mut counts = vec![vec![0u64; labels.num_classes()]; partition.count()];
    for (p, l) in labels.labels().iter().enumerate() {
        if let Some(l) = *l {
            if keep(p) {
                counts[partition.id(p)][l as usize] += 1;
            }
        }
    }
    counts
}

/// Mode of the clean labels inside each superpixel (ties to the lowest
/// class). Superpixels without clean pixels stay unseeded.
pub fn embed_clean(clean: &CleanMask, init: &LabelMap, partition: &SuperpixelPartition) -> Result<NodeLabelAssignment> {
    check_partition(partition, init)?;
    if clean.height() != init.height() || clean.width() != init.width() {
        return Err(Error::shape("clean mask and label map differ in size"));
    }
    let counts = tally(partition, init, |p| clean.is_clean(p));
    let (labels, margins) = counts
        .iter()
        .map(|c| match vote(c) {
            Some((l, m)) => (Some(l), m),
            None => (None, 0.0),
        })
        .unzip();
    NodeLabelAssignment::new(labels, margins, init.num_classes())
}

/// Every pixel relabeled with the majority label of its superpixel.
/// Superpixels with no labeled pixel become unlabeled.
pub fn majority_projection(labels: &LabelMap, partition: &SuperpixelPartition) -> Result<LabelMap> {
    check_partition(partition, labels)?;
    let winners: Vec<Option<u8>> = tally(partition, labels, |_| true)
        .iter()
        .map(|c| vote(c).map(|(l, _)| l))
        .collect();
    let out = (0..labels.len()).map(|p| winners[partition.id(p)]).collect();
    LabelMap::new(labels.height(), labels.width(), labels.num_classes(), out)
}

/// Where a superpixel's final label came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeSource {
    Seeded,
    Predicted,
    /// Training diverged; the node keeps its initial pixel labels.
    Fallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CorrectionConfig {
    pub train: TrainConfig,
    pub shape: GatShape,
    /// Let predictions overwrite seeded superpixels too.
    pub trust_gat_everywhere: bool,
}

#[derive(Debug, Clone)]
pub struct CorrectionResult {
    pub corrected: LabelMap,
    pub node_labels: Vec<u8>,
    pub sources: Vec<NodeSource>,
    /// Class distribution per node; `None` when training was skipped.
    pub distributions: Option<gat::Matrix>,
    pub final_loss: Option<f64>,
    pub trace: Vec<f64>,
    pub trained: bool,
    pub diverged: bool,
}

impl CorrectionResult {
    pub fn predicted_count(&self) -> usize {
        self.sources.iter().filter(|&&s| s == NodeSource::Predicted).count()
    }
}

/// Trains the attention network on the seeded superpixels of one image and
/// labels the rest. `init` supplies the fallback labels when training
/// diverges.
pub fn correct_image(
    graph: &ImageGraph,
    seeds: &NodeLabelAssignment,
    partition: &SuperpixelPartition,
    init: &LabelMap,
    cfg: &CorrectionConfig,
) -> Result<CorrectionResult> {
    let n = graph.len();
    if seeds.len() != n || partition.count() != n {
        return Err(Error::shape(format!(
            "graph has {n} nodes, seeds {}, partition {}",
            seeds.len(),
            partition.count()
        )));
    }
    check_partition(partition, init)?;
    if seeds.num_classes() != init.num_classes() {
        return Err(Error::shape("seeds and initial labels disagree on class count"));
    }
    if seeds.seeded_count() == 0 {
        return Err(Error::EmptySeedSet);
    }
    let classes = seeds.seeded_classes();
    let seeded_all = seeds.seeded_count() == n;
    let mut result = CorrectionResult {
        corrected: init.clone(),
        node_labels: vec![0; n],
        sources: vec![NodeSource::Seeded; n],
        distributions: None,
        final_loss: None,
        trace: Vec::new(),
        trained: false,
        diverged: false,
    };

    if seeded_all || classes.len() == 1 {
        let only = *classes.first().expect("non-empty");
        for (i, l) in seeds.labels().iter().enumerate() {
            match l {
                Some(l) => result.node_labels[i] = *l,
                None => {
                    result.node_labels[i] = only;
                    result.sources[i] = NodeSource::Predicted;
                }
            }
        }
        result.corrected = paint(&result.node_labels, partition, init.num_classes())?;
        return Ok(result);
    }

    let features = gat::feature_matrix(graph);
    let targets: Vec<Option<usize>> = seeds.labels().iter().map(|l| l.map(usize::from)).collect();
    let model = GatModel::new(
        graph.features().dim(),
        init.num_classes(),
        cfg.shape,
        cfg.train.init_scale,
        cfg.train.seed,
    )?;
    result.trained = true;
    match gat::train(model, &features, graph.adjacency(), &targets, &cfg.train) {
        Ok(outcome) => {
            let fwd = gat::forward(&outcome.model, &features, graph.adjacency())?;
            let predicted = fwd.predictions();
            for (i, &guess) in predicted.iter().enumerate() {
                match seeds.labels()[i] {
                    Some(l) if !cfg.trust_gat_everywhere => result.node_labels[i] = l,
                    _ => {
                        result.node_labels[i] = guess as u8;
                        result.sources[i] = NodeSource::Predicted;
                    }
                }
            }
            result.final_loss = Some(outcome.best_loss);
            result.trace = outcome.trace;
            result.distributions = Some(fwd.probs);
            result.corrected = paint(&result.node_labels, partition, init.num_classes())?;
        }
        Err(Error::DivergedLoss { epoch, trace }) => {
            warn!("training diverged at epoch {epoch}; unseeded superpixels keep their initial labels");
            result.diverged = true;
            result.trace = trace;
            let fallback = majority_projection(init, partition)?;
            let mut labels = Vec::with_capacity(init.len());
            for (i, l) in seeds.labels().iter().enumerate() {
                result.node_labels[i] = l.unwrap_or(0);
                if l.is_none() {
                    result.sources[i] = NodeSource::Fallback;
                }
            }
            for p in 0..init.len() {
                let i = partition.id(p);
                labels.push(match result.sources[i] {
                    NodeSource::Fallback => init.labels()[p].or(fallback.labels()[p]).or(Some(0)),
                    _ => Some(result.node_labels[i]),
                });
            }
            result.corrected = LabelMap::new(init.height(), init.width(), init.num_classes(), labels)?;
        }
        Err(e) => return Err(e),
    }
    Ok(result)
}

fn paint(node_labels: &[u8], partition: &SuperpixelPartition, num_classes: usize) -> Result<LabelMap> {
    let labels = partition
        .assignment()
        .iter()
        .map(|&id| Some(node_labels[id as usize]))
        .collect();
    LabelMap::new(partition.height(), partition.width(), num_classes, labels)
}

/// FNV-1a 64-bit hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Per-image seed: the global seed XOR the FNV-1a hash of the image id.
pub fn image_seed(global: u64, id: &str) -> u64 {
    global ^ fnv1a64(id.as_bytes())
}

/// Node features used for the graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FeatureSource {
    Handcrafted,
    Dense(PathBuf),
}

/// One manifest line. Columns: image id, image, probabilities, dense
/// features or `HANDCRAFTED`, comma-separated relevant classes, optional
/// ground truth (`-` for none), optional CAM input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub id: String,
    pub image: PathBuf,
    pub probs: PathBuf,
    pub features: FeatureSource,
    pub relevant: BTreeSet<u8>,
    pub gt: Option<PathBuf>,
    pub cam: Option<PathBuf>,
}

pub const MANIFEST_HEADER: &str = "#id\timage\tprobs\tfeatures\trelevant\tgt\tcam";

fn optional(field: Option<&str>) -> Option<&str> {
    field.filter(|f| !f.is_empty() && *f != "-")
}

/// Parses a manifest. Blank lines and `#` comments are skipped; relative
/// paths resolve against `base`.
pub fn parse_manifest(text: &str, base: &Path, source: &Path) -> Result<Vec<ManifestRow>> {
    let mut rows = Vec::new();
    let mut ids = HashSet::new();
    for (index, line) in text.lines().enumerate() {
        let err = |message: String| Error::Manifest {
            path: source.to_path_buf(),
            line: index + 1,
            message,
        };
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if !(5..=7).contains(&cols.len()) {
            return Err(err(format!(
                "expected 5 to 7 tab-separated columns, found {}",
                cols.len()
            )));
        }
        let id = cols[0].trim().to_string();
        if id.is_empty() || id.contains(['/', '\\']) {
            return Err(err(format!("invalid image id {id:?}")));
        }
        if !ids.insert(id.clone()) {
            return Err(err(format!("duplicate image id {id:?}")));
        }
        let relevant = cols[4]
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty() && *s != "-")
            .map(|s| s.parse::<u8>().map_err(|_| err(format!("bad relevant class {s:?}"))))
            .collect::<Result<BTreeSet<u8>>>()?;
        let features = if cols[3] == "HANDCRAFTED" {
            FeatureSource::Handcrafted
        } else {
            FeatureSource::Dense(base.join(cols[3]))
        };
        rows.push(ManifestRow {
            id,
            image: base.join(cols[1]),
            probs: base.join(cols[2]),
            features,
            relevant,
            gt: optional(cols.get(5).copied()).map(|p| base.join(p)),
            cam: optional(cols.get(6).copied()).map(|p| base.join(p)),
        });
    }
    Ok(rows)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    parse_manifest(&text, base, path)
}

/// Metrics for one successfully processed image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageStats {
    pub superpixels: usize,
    pub seeded: usize,
    pub predicted: usize,
    pub clean_pixels: usize,
    pub edges: usize,
    pub gamma: f64,
    pub epochs: usize,
    pub final_loss: Option<f64>,
    pub trained: bool,
    pub diverged: bool,
    pub gt: Option<GtStats>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtStats {
    pub init_accuracy: f64,
    pub corrected_accuracy: f64,
    pub init_miou: f64,
    pub corrected_miou: f64,
    pub seed_precision: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub id: String,
    pub outcome: std::result::Result<ImageStats, String>,
}

/// Per-image results sorted by image id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PipelineSummary {
    pub rows: Vec<SummaryRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"))
}

impl PipelineSummary {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.outcome.is_err()).count()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "id\tstatus\tsuperpixels\tseeded\tpredicted\tclean_pixels\tedges\tgamma\tepochs\tfinal_loss\t\
             init_acc\tcorrected_acc\tinit_miou\tcorrected_miou\tseed_precision\tmessage\n",
        );
        for row in &self.rows {
            match &row.outcome {
                Ok(s) => {
                    let status = if s.diverged { "diverged" } else { "ok" };
                    let g = s.gt.as_ref();
                    writeln!(
                        out,
                        "{}\t{status}\t{}\t{}\t{}\t{}\t{}\t{:.6}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t-",
                        row.id,
                        s.superpixels,
                        s.seeded,
                        s.predicted,
                        s.clean_pixels,
                        s.edges,
                        s.gamma,
                        s.epochs,
                        opt(s.final_loss),
                        opt(g.map(|g| g.init_accuracy)),
                        opt(g.map(|g| g.corrected_accuracy)),
                        opt(g.map(|g| g.init_miou)),
                        opt(g.map(|g| g.corrected_miou)),
                        opt(g.map(|g| g.seed_precision)),
                    )
                    .expect("string write");
                }
                Err(msg) => {
                    let msg = msg.replace(['\t', '\n'], " ");
                    writeln!(out, "{}\tfailed{}\t{msg}", row.id, "\t-".repeat(13)).expect("string write");
                }
            }
        }
        out
    }
}

/// Everything computed for one image, before anything is written.
#[derive(Debug, Clone)]
pub struct ImageOutput {
    pub init: LabelMap,
    pub clean: CleanMask,
    pub partition: SuperpixelPartition,
    pub graph: ImageGraph,
    pub seeds: NodeLabelAssignment,
    pub correction: CorrectionResult,
    pub stats: ImageStats,
}

/// Runs detection and correction for one manifest row.
pub fn process_image(
    row: &ManifestRow,
    cfg: &PipelineConfig,
    weights: Option<&ClassifierWeights>,
) -> Result<ImageOutput> {
    let probs = ProbabilityMap::from_tensor(&read_tensor(&row.probs)?)?;
    let num_classes = probs.num_classes();
    let cam_path = row
        .cam
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter(format!("image {}: no CAM input in manifest", row.id)))?;
    let cam = read_tensor(cam_path)?;
    let identity;
    let weights = match weights {
        Some(w) => w,
        None => {
            identity = ClassifierWeights::identity(num_classes - 1);
            &identity
        }
    };
    if weights.num_foreground() + 1 != num_classes {
        return Err(Error::shape(format!(
            "classifier has {} foreground classes, probabilities have {num_classes} classes",
            weights.num_foreground()
        )));
    }
    let scores = compute_cam(&cam, weights, &row.relevant)?;
    let init = assign_labels(&scores, cfg.bg_thresh)?;
    let losses = pixel_loss(&probs, &init)?;
    let clean = detect_clean(&losses, cfg.theta)?;

    let image = read_image(&row.image)?;
    if image.height() != init.height() || image.width() != init.width() {
        return Err(Error::shape(format!(
            "image is {}x{}, labels are {}x{}",
            image.height(),
            image.width(),
            init.height(),
            init.width()
        )));
    }
    let partition = slic(&image, cfg.slic_params())?;
    let features: NodeFeatures = match &row.features {
        FeatureSource::Handcrafted => handcrafted_features(&image, &partition)?,
        FeatureSource::Dense(path) => pool_features(&read_tensor(path)?, &partition, (image.height(), image.width()))?,
    };
    let graph = ImageGraph::build(features, &partition, cfg.edge_symmetrize)?;
    let seeds = embed_clean(&clean, &init, &partition)?;
    let ccfg = CorrectionConfig {
        train: cfg.train_config(image_seed(cfg.seed, &row.id)),
        shape: cfg.gat_shape(),
        trust_gat_everywhere: cfg.trust_gat_everywhere,
    };
    let correction = correct_image(&graph, &seeds, &partition, &init, &ccfg)?;

    let gt = match &row.gt {
        Some(path) => {
            let gt = read_label_map(path, num_classes)?;
            let before = iou(&init, &gt)?;
            let after = iou(&correction.corrected, &gt)?;
            Some(GtStats {
                init_accuracy: before.pixel_accuracy,
                corrected_accuracy: after.pixel_accuracy,
                init_miou: before.mean_iou,
                corrected_miou: after.mean_iou,
                seed_precision: seed_quality(&clean, &init, &gt)?.precision,
            })
        }
        None => None,
    };
    let stats = ImageStats {
        superpixels: partition.count(),
        seeded: seeds.seeded_count(),
        predicted: correction.predicted_count(),
        clean_pixels: clean.count(),
        edges: graph.edge_count() / 2,
        gamma: graph.gamma(),
        epochs: correction.trace.len(),
        final_loss: correction.final_loss,
        trained: correction.trained,
        diverged: correction.diverged,
        gt,
    };
    Ok(ImageOutput {
        init,
        clean,
        partition,
        graph,
        seeds,
        correction,
        stats,
    })
}

/// Paths of the corrected map and overlay for an image id.
pub fn output_paths(outdir: &Path, id: &str) -> (PathBuf, PathBuf) {
    (
        outdir.join(format!("{id}.pgm")),
        outdir.join(format!("{id}_overlay.ppm")),
    )
}

fn run_one(
    row: &ManifestRow,
    cfg: &PipelineConfig,
    weights: Option<&ClassifierWeights>,
    outdir: &Path,
) -> Result<ImageStats> {
    let out = process_image(row, cfg, weights)?;
    let (pgm, ppm) = output_paths(outdir, &row.id);
    write_label_map(&out.correction.corrected, &pgm)?;
    let overlay = write_color_overlay(&out.correction.corrected, &default_palette(out.init.num_classes()))?;
    fs::write(&ppm, overlay).map_err(|e| Error::io(&ppm, e))?;
    Ok(out.stats)
}

/// Processes every manifest row on a pool of `cfg.workers` threads and
/// writes `<id>.pgm`, `<id>_overlay.ppm` and `summary.tsv` into `outdir`.
/// Per-image failures are recorded in the summary.
pub fn run_pipeline(rows: &[ManifestRow], cfg: &PipelineConfig, outdir: &Path) -> Result<PipelineSummary> {
    cfg.validate()?;
    fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
    let weights = match &cfg.classifier_weights {
        Some(path) => Some(ClassifierWeights::from_tensor(&read_tensor(path)?)?),
        None => None,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let mut summary_rows: Vec<SummaryRow> = pool.install(|| {
        rows.par_iter()
            .map(|row| {
                let outcome = run_one(row, cfg, weights.as_ref(), outdir).map_err(|e| {
                    warn!("image {}: {e}", row.id);
                    e.to_string()
                });
                if outcome.is_ok() {
                    info!("image {}: corrected", row.id);
                }
                SummaryRow {
                    id: row.id.clone(),
                    outcome,
                }
            })
            .collect()
    });
    summary_rows.sort_by(|a, b| a.id.cmp(&b.id));
    let summary = PipelineSummary { rows: summary_rows };
    let path = outdir.join("summary.tsv");
    fs::write(&path, summary.to_tsv()).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}
