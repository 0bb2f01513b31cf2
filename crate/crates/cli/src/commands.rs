use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use labelmend::camlab::{assign_labels, assign_labels_with_foreground, compute_cam, ClassifierWeights};
use labelmend::corrector::{read_manifest, run_pipeline};
use labelmend::detector::{default_theta_grid, detect_clean, pixel_loss, select_theta, ProbabilityMap, ThetaSample};
use labelmend::evalkit::{ClassAveraging, Confusion};
use labelmend::graphbuild::{handcrafted_features, pool_features, write_graph, ImageGraph};
use labelmend::superpixel::{slic, SlicParams, SuperpixelPartition};
use labelmend::synth::{generate, generate_suite, write_scenes, SuiteSpec, SynthFile};
use labelmend::tensorio::{
    default_palette, read_image, read_label_map, read_tensor, write_color_overlay, write_label_map, write_tensor,
    LabelMap, Tensor,
};
use labelmend::PipelineConfig;
use log::{info, warn};

use crate::{
    Command, CorrectArgs, DetectArgs, EvalArgs, GraphArgs, LabelArgs, Overrides, SelectThetaArgs, SuperpixelArgs,
    SynthArgs,
};

/// Bad invocation detected after argument parsing.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// 2 for usage and configuration problems, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<labelmend::Error>() {
            return match e {
                labelmend::Error::Config(_) | labelmend::Error::Manifest { .. } => 2,
                _ => 1,
            };
        }
    }
    1
}

pub fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Label(a) => label(a),
        Command::Detect(a) => detect(a),
        Command::SelectTheta(a) => choose_theta(a),
        Command::Superpixels(a) => superpixels(a),
        Command::Graph(a) => graph(a),
        Command::Correct(a) => correct(a),
        Command::Eval(a) => eval(a),
        Command::Synth(a) => synth(a),
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn label(a: LabelArgs) -> Result<ExitCode> {
    let features = read_tensor(&a.features)?;
    let weights = ClassifierWeights::from_tensor(&read_tensor(&a.weights)?)?;
    let relevant: BTreeSet<u8> = a.relevant.iter().copied().collect();
    let scores = compute_cam(&features, &weights, &relevant)?;
    let labels = match a.fg_thresh {
        Some(fg) => assign_labels_with_foreground(&scores, a.bg_thresh, fg)?,
        None => assign_labels(&scores, a.bg_thresh)?,
    };
    write_label_map(&labels, &a.out)?;
    if let Some(path) = &a.scores_out {
        write_tensor(&scores.to_tensor(), path)?;
    }
    if let Some(path) = &a.overlay {
        write_bytes(
            path,
            &write_color_overlay(&labels, &default_palette(labels.num_classes()))?,
        )?;
    }
    info!("labeled {} of {} pixels", labels.labeled_count(), labels.len());
    Ok(ExitCode::SUCCESS)
}

fn detect(a: DetectArgs) -> Result<ExitCode> {
    let probs = ProbabilityMap::from_tensor(&read_tensor(&a.probs)?)?;
    let init = read_label_map(&a.init, probs.num_classes())?;
    let losses = pixel_loss(&probs, &init)?;
    let clean = detect_clean(&losses, a.theta)?;
    write_label_map(&clean.apply(&init)?, &a.out)?;
    if let Some(path) = &a.losses_out {
        write_tensor(&losses, path)?;
    }
    info!("{} of {} pixels clean at theta {}", clean.count(), init.len(), a.theta);
    Ok(ExitCode::SUCCESS)
}

struct ThetaInput {
    id: String,
    losses: Tensor,
    init: LabelMap,
    gt: LabelMap,
}

fn read_theta_manifest(path: &Path) -> Result<Vec<ThetaInput>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let [id, probs, init, gt] = cols[..] else {
            return Err(labelmend::Error::Manifest {
                path: path.to_path_buf(),
                line: n + 1,
                message: format!("expected 4 columns (id, probs, init, gt), found {}", cols.len()),
            }
            .into());
        };
        let probs =
            ProbabilityMap::from_tensor(&read_tensor(base.join(probs))?).with_context(|| format!("image {id}"))?;
        let init = read_label_map(base.join(init), probs.num_classes())?;
        let gt = read_label_map(base.join(gt), probs.num_classes())?;
        let losses = pixel_loss(&probs, &init).with_context(|| format!("image {id}"))?;
        out.push(ThetaInput {
            id: id.to_string(),
            losses,
            init,
            gt,
        });
    }
    Ok(out)
}

fn choose_theta(a: SelectThetaArgs) -> Result<ExitCode> {
    let inputs = read_theta_manifest(&a.manifest)?;
    if inputs.is_empty() {
        return Err(usage(format!("{} lists no images", a.manifest.display())));
    }
    let samples: Vec<ThetaSample<'_>> = inputs
        .iter()
        .map(|i| ThetaSample {
            id: &i.id,
            losses: &i.losses,
            init: &i.init,
            gt: Some(&i.gt),
        })
        .collect();
    let grid = a.grid.unwrap_or_else(default_theta_grid);
    let report = select_theta(&samples, a.target_precision, &grid)?;
    write_bytes(&a.report, report.to_tsv().as_bytes())?;
    let row = report.chosen_row();
    println!(
        "theta={:e} precision={:.6} selected_fraction={:.6}",
        report.chosen, row.precision, row.selected_fraction
    );
    if report.unmet_precision {
        warn!(
            "no candidate reaches precision {}; using the smallest",
            a.target_precision
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn superpixels(a: SuperpixelArgs) -> Result<ExitCode> {
    let image = read_image(&a.image)?;
    let params = SlicParams {
        target_count: a.count,
        compactness: a.compactness,
        iterations: a.iterations,
    };
    let part = slic(&image, params)?;
    write_tensor(&part.to_tensor(), &a.out)?;
    info!("{} superpixels", part.count());
    Ok(ExitCode::SUCCESS)
}

fn graph(a: GraphArgs) -> Result<ExitCode> {
    let image = read_image(&a.image)?;
    let part = SuperpixelPartition::from_tensor(&image, &read_tensor(&a.superpixels)?)?;
    let features = match &a.features {
        Some(path) => pool_features(&read_tensor(path)?, &part, (image.height(), image.width()))?,
        None => handcrafted_features(&image, &part)?,
    };
    let g = ImageGraph::build(features, &part, a.edge_symmetrize)?;
    write_graph(&g, &a.out)?;
    info!(
        "{} nodes, {} edges, gamma {:.6}",
        g.len(),
        g.edge_count() / 2,
        g.gamma()
    );
    Ok(ExitCode::SUCCESS)
}

fn apply_overrides(cfg: &mut PipelineConfig, o: Overrides) {
    macro_rules! set {
        ($($field:ident),*) => {
            $(if let Some(v) = o.$field { cfg.$field = v; })*
        };
    }
    set!(
        bg_thresh,
        theta,
        target_precision,
        superpixels,
        compactness,
        slic_iterations,
        edge_symmetrize,
        heads,
        hidden,
        att_dim,
        learning_rate,
        epochs,
        weight_decay,
        patience,
        init_scale,
        seed,
        workers,
        trust_gat_everywhere
    );
    if o.classifier_weights.is_some() {
        cfg.classifier_weights = o.classifier_weights;
    }
}

fn correct(a: CorrectArgs) -> Result<ExitCode> {
    let mut cfg = match &a.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    apply_overrides(&mut cfg, a.overrides);
    cfg.validate()?;
    let rows = read_manifest(&a.manifest)?;
    if rows.is_empty() {
        return Err(usage(format!("{} lists no images", a.manifest.display())));
    }
    let summary = run_pipeline(&rows, &cfg, &a.outdir)?;
    let failed = summary.failures();
    println!(
        "{} images, {} corrected, {} failed; summary in {}",
        rows.len(),
        rows.len() - failed,
        failed,
        a.outdir.join("summary.tsv").display()
    );
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn pgm_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "pgm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                if !stem.ends_with("_gt") && !stem.ends_with("_init") {
                    ids.push(stem.to_string());
                }
            }
        }
    }
    ids.sort();
    Ok(ids)
}

fn gt_path(dir: &Path, id: &str) -> Option<PathBuf> {
    [format!("{id}_gt.pgm"), format!("{id}.pgm")]
        .into_iter()
        .map(|name| dir.join(name))
        .find(|p| p.is_file())
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    if !(2..=255).contains(&a.num_classes) {
        return Err(usage("--num-classes must be in 2..=255"));
    }
    let averaging = match a.classes {
        Some(list) => {
            if let Some(&bad) = list.iter().find(|&&c| c as usize >= a.num_classes) {
                return Err(usage(format!("class {bad} is outside 0..{}", a.num_classes)));
            }
            ClassAveraging::Fixed(list)
        }
        None => ClassAveraging::Present,
    };
    let ids = pgm_ids(&a.pred)?;
    if ids.is_empty() {
        return Err(usage(format!("no .pgm predictions in {}", a.pred.display())));
    }
    let mut out = String::from("id\tpixel_accuracy\tmean_iou\tevaluated\n");
    let mut total = Confusion::new(a.num_classes);
    let (mut acc_sum, mut miou_sum, mut scored, mut failed) = (0.0, 0.0, 0usize, 0usize);
    for id in &ids {
        let outcome = (|| -> Result<Confusion> {
            let gt = gt_path(&a.gt, id).with_context(|| format!("no ground truth for {id}"))?;
            let pred = read_label_map(a.pred.join(format!("{id}.pgm")), a.num_classes)?;
            let gt = read_label_map(gt, a.num_classes)?;
            Ok(Confusion::from_maps(&pred, &gt)?)
        })();
        match outcome {
            Ok(c) => {
                let r = c.report(&averaging);
                writeln!(out, "{id}\t{:.6}\t{:.6}\t{}", r.pixel_accuracy, r.mean_iou, r.evaluated)?;
                acc_sum += r.pixel_accuracy;
                miou_sum += r.mean_iou;
                scored += 1;
                total.merge(&c);
            }
            Err(e) => {
                warn!("{id}: {e:#}");
                writeln!(out, "{id}\t-\t-\t-")?;
                failed += 1;
            }
        }
    }
    if scored > 0 {
        let r = total.report(&averaging);
        let n = scored as f64;
        writeln!(out, "mean\t{:.6}\t{:.6}\t{}", acc_sum / n, miou_sum / n, scored)?;
        writeln!(
            out,
            "dataset\t{:.6}\t{:.6}\t{}",
            r.pixel_accuracy, r.mean_iou, r.evaluated
        )?;
        writeln!(out, "#class\tiou\tintersection\tunion")?;
        for c in &r.per_class {
            writeln!(out, "#{}\t{:.6}\t{}\t{}", c.class, c.iou(), c.intersection, c.union)?;
        }
        println!(
            "dataset pixel_accuracy={:.6} mean_iou={:.6} images={scored}",
            r.pixel_accuracy, r.mean_iou
        );
    }
    write_bytes(&a.report, out.as_bytes())?;
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let file = match &a.spec {
        Some(path) => SynthFile::load(path)?,
        None => SynthFile::Suite(SuiteSpec::default()),
    };
    let written = match file {
        SynthFile::Scene(spec) => {
            let id = a
                .spec
                .as_deref()
                .and_then(|p| p.file_stem())
                .and_then(|s| s.to_str())
                .unwrap_or("scene")
                .to_string();
            let scene = generate(&spec)?;
            write_scenes(&a.outdir, [(id.as_str(), &scene)])?
        }
        SynthFile::Suite(suite) => {
            let scenes = generate_suite(&suite)?;
            write_scenes(&a.outdir, scenes.iter().map(|(id, _, s)| (id.as_str(), s)))?
        }
    };
    println!("{written} scenes written to {}", a.outdir.display());
    Ok(ExitCode::SUCCESS)
}
