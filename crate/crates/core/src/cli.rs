//! The `depthped` command line tool.
//!
//! Exit status is 0 on success, 1 on a usage error and 2 on a data error.
//! Errors go to standard error as `error[CODE]: message`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cluster::select_k;
use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::evaluation::{best_curve, curves_to_svg, evaluate, EvalCurve};
use crate::geometry::backproject_strided;
use crate::io::{self, DepthFormat, FrameDir};
use crate::labeling::label_structure;
use crate::pipeline::{
    estimate_plane, parallel_map, run_depth, sweep_soft_threshold, time_pipeline, train_templates, PipelineConfig,
    TrainMode,
};
use crate::synth::{generate_annotations, generate_frame, AnnotationParams, RandomSceneParams};
use crate::template::TemplateSet;
use crate::verifier::{apply_verifier, crop_training_features, AppearanceScorer, LogisticScorer};

#[derive(Parser, Debug)]
#[command(name = "depthped", version, about = "Depth template pedestrian detector")]
struct Cli {
    /// Pipeline configuration file (TOML).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration value, e.g. `match.th_soft=0.7`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a random synthetic benchmark.
    Synth(SynthArgs),
    /// Train a template set from an annotation directory.
    Train(TrainArgs),
    /// Run the depth detector over a frame directory.
    Detect(DetectArgs),
    /// Verify unreliable detections with an appearance scorer.
    Verify(VerifyArgs),
    /// Recall against false positives per image.
    Evaluate(EvaluateArgs),
    /// One evaluation curve per soft threshold.
    Sweep(SweepArgs),
    /// Single-threaded per-stage timing.
    Bench(BenchArgs),
    /// Silhouette score for each candidate number of clusters.
    ClusterAnalyze(ClusterArgs),
    /// Train the reference appearance scorer.
    TrainScorer(TrainScorerArgs),
    /// Convert ETH idl annotations to ground-truth JSON lines.
    ImportEth(ImportEthArgs),
    /// Export structure-labeled point clouds as CSV.
    Label(LabelArgs),
    /// Print the effective configuration.
    PrintConfig,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Scene parameters (TOML); defaults when omitted.
    #[arg(long, value_name = "FILE")]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    n_frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Training annotations written to `OUT/annotations`.
    #[arg(long, default_value_t = 200)]
    annotations: usize,
    /// Comma-separated yaw modes of the annotations, degrees.
    #[arg(long)]
    yaw_modes: Option<String>,
    /// Uniform yaw jitter around each mode, degrees.
    #[arg(long)]
    yaw_jitter: Option<f64>,
    #[arg(long, value_enum, default_value_t = DepthFormat::Pgm)]
    depth_format: DepthFormat,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<TrainMode>,
    #[arg(long)]
    k: Option<usize>,
    /// Distance range boundaries, e.g. `0,4,7`.
    #[arg(long)]
    ranges: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sigma_floor: Option<f64>,
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[arg(long)]
    templates: PathBuf,
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the ROIs as JSON lines.
    #[arg(long)]
    rois_out: Option<PathBuf>,
    #[arg(long)]
    th_hard: Option<f64>,
    #[arg(long)]
    th_soft: Option<f64>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    scorer: PathBuf,
    #[arg(long)]
    accept_threshold: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    overlap: Option<f64>,
    #[arg(long)]
    max_fppi: Option<f64>,
    #[arg(long)]
    out_csv: Option<PathBuf>,
    #[arg(long)]
    out_svg: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    templates: PathBuf,
    #[arg(long)]
    scorer: PathBuf,
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Comma-separated soft thresholds.
    #[arg(long, default_value = "0.5,0.6,0.7,0.8,0.9")]
    th: String,
    #[arg(long)]
    out_csv: Option<PathBuf>,
    #[arg(long)]
    out_svg: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    templates: PathBuf,
    /// Also time the verifier with this scorer.
    #[arg(long)]
    scorer: Option<PathBuf>,
    /// Untimed frames at the start.
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    /// Use at most this many frames.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args, Debug)]
struct ClusterArgs {
    #[arg(long)]
    annotations: PathBuf,
    /// `LO..HI` (inclusive) or a comma-separated list.
    #[arg(long, default_value = "2..6")]
    k_range: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_csv: Option<PathBuf>,
    #[arg(long)]
    out_svg: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainScorerArgs {
    #[arg(long)]
    frames: PathBuf,
    /// Boxes whose crops are positives (ground-truth JSON lines).
    #[arg(long)]
    positives: PathBuf,
    /// Boxes whose crops are negatives.
    #[arg(long)]
    negatives: Option<PathBuf>,
    /// Boxes random background crops must avoid, in addition to positives.
    #[arg(long)]
    avoid: Option<PathBuf>,
    #[arg(long, default_value_t = 6)]
    background_per_frame: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ImportEthArgs {
    #[arg(long)]
    idl: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// CSV of assigned frame ids and image names.
    #[arg(long)]
    names_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct LabelArgs {
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Only this frame.
    #[arg(long)]
    frame: Option<u64>,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.render().to_string();
            eprint!("error[E_USAGE]: {}", text.strip_prefix("error: ").unwrap_or(&text));
            return 1;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            2
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref(), &cli.set)?;
    let workers = cli
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    match cli.command {
        Command::Synth(a) => synth(a, &cfg),
        Command::Train(a) => {
            if let Some(m) = a.mode {
                cfg.training.mode = m;
            }
            if let Some(k) = a.k {
                cfg.training.k = k;
            }
            if let Some(r) = &a.ranges {
                cfg.training.ranges = parse_list(r, "ranges")?;
            }
            if let Some(s) = a.seed {
                cfg.training.seed = s;
            }
            if let Some(f) = a.sigma_floor {
                cfg.training.sigma_floor = f;
            }
            cfg.validate()?;
            let samples = io::read_annotations(&a.annotations, &cfg.training.normalize)?;
            let set = train_templates(&samples, &cfg.training)?;
            set.save(&a.out)?;
            println!("trained {} template(s) from {} annotations", set.members.len(), samples.len());
            Ok(())
        }
        Command::Detect(a) => {
            if let Some(t) = a.th_hard {
                cfg.matching.th_hard = t;
            }
            if let Some(t) = a.th_soft {
                cfg.matching.th_soft = t;
            }
            cfg.validate()?;
            detect(a, &cfg, workers)
        }
        Command::Verify(a) => {
            if let Some(t) = a.accept_threshold {
                cfg.verifier.accept_threshold = t;
            }
            cfg.validate()?;
            let dets = io::read_detections(&a.detections)?;
            let frames = FrameDir::open(&a.frames)?;
            let scorer = LogisticScorer::load(&a.scorer)?;
            let verify_cfg = cfg.verifier.verify();
            let ids: Vec<u64> = dets.keys().copied().collect();
            let mut out = BTreeMap::new();
            for chunk in ids.chunks(chunk_size(workers)) {
                let verified = parallel_map(chunk, workers, |&id| -> Result<(u64, Vec<Detection>)> {
                    let frame = frames.load(id)?;
                    Ok((id, apply_verifier(dets[&id].clone(), &frame, &scorer, &verify_cfg)?))
                });
                for r in verified {
                    let (id, d) = r?;
                    out.insert(id, d);
                }
            }
            io::write_detections(&a.out, &out)?;
            let before: usize = dets.values().map(Vec::len).sum();
            let after: usize = out.values().map(Vec::len).sum();
            println!("kept {after} of {before} detections");
            Ok(())
        }
        Command::Evaluate(a) => {
            if let Some(o) = a.overlap {
                cfg.evaluation.overlap = o;
            }
            if let Some(m) = a.max_fppi {
                cfg.evaluation.max_fppi = m;
            }
            cfg.validate()?;
            let dets = io::read_detections(&a.detections)?;
            let gt = io::read_ground_truth(&a.gt)?;
            let curve = evaluate(&dets, &gt, cfg.evaluation.overlap)?;
            if let Some(p) = &a.out_csv {
                io::write_text(p, &curve.to_csv())?;
            }
            if let Some(p) = &a.out_svg {
                io::write_text(p, &curves_to_svg(&[(label_of(&a.detections), &curve)], cfg.evaluation.max_fppi))?;
            }
            print_summary(&curve, cfg.evaluation.max_fppi);
            Ok(())
        }
        Command::Sweep(a) => {
            cfg.validate()?;
            let th: Vec<f64> = parse_list(&a.th, "th")?;
            let set = TemplateSet::load(&a.templates)?;
            let scorer = LogisticScorer::load(&a.scorer)?;
            let gt = io::read_ground_truth(&a.gt)?;
            let frames = FrameDir::open(&a.frames)?.load_all()?;
            let curves = sweep_soft_threshold(&frames, &gt, &set, &scorer, &cfg, &th, workers)?;
            let mut csv = String::from("th_soft,threshold,fppi,recall\n");
            for (t, c) in &curves {
                for line in c.to_csv().lines().skip(1) {
                    let _ = writeln!(csv, "{t},{line}");
                }
            }
            if let Some(p) = &a.out_csv {
                io::write_text(p, &csv)?;
            }
            let span = curves.iter().map(|(_, c)| c.final_fppi()).fold(0.0, f64::max);
            if let Some(p) = &a.out_svg {
                let named: Vec<(String, &EvalCurve)> = curves.iter().map(|(t, c)| (format!("th_soft {t}"), c)).collect();
                io::write_text(p, &curves_to_svg(&named, if span > 0.0 { span } else { cfg.evaluation.max_fppi }))?;
            }
            for (t, c) in &curves {
                println!("th_soft={t} max_recall={:.4} final_fppi={:.4}", c.max_recall(), c.final_fppi());
            }
            let refs: Vec<&EvalCurve> = curves.iter().map(|(_, c)| c).collect();
            if let Some(i) = best_curve(&refs) {
                println!("best th_soft={}", curves[i].0);
            }
            Ok(())
        }
        Command::Bench(a) => {
            cfg.validate()?;
            let set = TemplateSet::load(&a.templates)?;
            let scorer = a.scorer.as_deref().map(LogisticScorer::load).transpose()?;
            let dir = FrameDir::open(&a.frames)?;
            let n = a.limit.map_or(dir.len(), |l| l.min(dir.len()));
            let frames = (0..n).map(|i| dir.load_index(i)).collect::<Result<Vec<_>>>()?;
            let t = time_pipeline(&frames, &set, scorer.as_ref().map(|s| s as &dyn AppearanceScorer), &cfg, a.warmup)?;
            println!("stage,ms");
            println!("plane,{:.3}", t.plane_ms);
            println!("roi,{:.3}", t.roi_ms);
            println!("detector,{:.3}", t.detector_ms);
            println!("verifier,{:.3}", t.verifier_ms);
            println!("depth_only,{:.3}", t.depth_only_ms());
            println!("total,{:.3}", t.total_ms());
            Ok(())
        }
        Command::ClusterAnalyze(a) => {
            cfg.validate()?;
            let ks = parse_k_range(&a.k_range)?;
            let samples = io::read_annotations(&a.annotations, &cfg.training.normalize)?;
            let sel = select_k(&samples, &ks, a.seed)?;
            let mut csv = String::from("k,silhouette\n");
            for (k, s) in &sel.scores {
                let _ = writeln!(csv, "{k},{s}");
            }
            if let Some(p) = &a.out_csv {
                io::write_text(p, &csv)?;
            }
            if let Some(p) = &a.out_svg {
                io::write_text(p, &silhouette_svg(&sel.scores))?;
            }
            print!("{csv}");
            println!("best k={}", sel.k);
            Ok(())
        }
        Command::TrainScorer(a) => {
            cfg.validate()?;
            let frames = FrameDir::open(&a.frames)?;
            let pos_boxes = io::read_ground_truth(&a.positives)?;
            let neg_boxes = a.negatives.as_deref().map(io::read_ground_truth).transpose()?;
            let avoid_boxes = a.avoid.as_deref().map(io::read_ground_truth).transpose()?;
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let (mut pos, mut neg) = (Vec::new(), Vec::new());
            for id in frames.ids() {
                let rects = |set: Option<&crate::evaluation::GroundTruthSet>| -> Vec<crate::grid::Rect> {
                    set.and_then(|s| s.frames.get(&id))
                        .map(|b| b.iter().filter(|b| !b.ignore).map(|b| b.rect).collect())
                        .unwrap_or_default()
                };
                let p = rects(Some(&pos_boxes));
                let n = rects(neg_boxes.as_ref());
                let mut avoid = rects(avoid_boxes.as_ref());
                avoid.extend(&p);
                let frame = frames.load(id)?;
                let (fp, fneg) = crop_training_features(&frame, &p, &n, &avoid, a.background_per_frame, &mut rng)?;
                pos.extend(fp);
                neg.extend(fneg);
            }
            let scorer = LogisticScorer::train(&pos, &neg, &cfg.verifier.training)?;
            scorer.save(&a.out)?;
            println!("trained scorer on {} positive and {} negative crops", pos.len(), neg.len());
            Ok(())
        }
        Command::ImportEth(a) => {
            let text = std::fs::read_to_string(&a.idl).map_err(|e| Error::io(&a.idl, e))?;
            let (gt, names) = io::parse_eth_idl(&text, &a.idl)?;
            io::write_ground_truth(&a.out, &gt)?;
            if let Some(p) = &a.names_out {
                let mut csv = String::from("frame_id,image\n");
                for (i, n) in names.iter().enumerate() {
                    let _ = writeln!(csv, "{i},{n}");
                }
                io::write_text(p, &csv)?;
            }
            println!("imported {} frames, {} boxes", gt.n_frames(), gt.frames.values().map(Vec::len).sum::<usize>());
            Ok(())
        }
        Command::Label(a) => {
            cfg.validate()?;
            let frames = FrameDir::open(&a.frames)?;
            io::create_dir(&a.out)?;
            let ids = match a.frame {
                Some(id) => vec![id],
                None => frames.ids(),
            };
            for id in ids {
                let frame = frames.load(id)?;
                let plane = estimate_plane(&frame, &cfg.plane)?;
                let cloud = backproject_strided(&frame, cfg.labeling.stride);
                let labeled = label_structure(cloud, &plane, cfg.labeling.cell_size, &cfg.labeling.bands);
                io::write_text(&a.out.join(format!("{id:06}.labels.csv")), &io::labeled_cloud_csv(&labeled))?;
            }
            Ok(())
        }
        Command::PrintConfig => {
            cfg.validate()?;
            print!("{}", cfg.to_toml_string());
            Ok(())
        }
    }
}

fn chunk_size(workers: usize) -> usize {
    (workers * 4).max(8)
}

fn synth(a: SynthArgs, cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let params = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<RandomSceneParams>(&text).map_err(|e| Error::format(p, e.to_string()))?
        }
        None => RandomSceneParams::default(),
    };
    params.validate()?;
    let frames_dir = a.out.join("frames");
    io::create_dir(&frames_dir)?;
    io::write_intrinsics(&frames_dir.join(io::INTRINSICS_FILE), &params.rig.intrinsics()?)?;
    let mut gt = crate::evaluation::GroundTruthSet::default();
    let mut lit = gt.clone();
    let mut props = gt.clone();
    for i in 0..a.n_frames as u64 {
        let r = generate_frame(&params, a.seed, i)?;
        io::write_frame(&frames_dir, &r.frame, a.depth_format)?;
        let boxed = |rects: Vec<crate::grid::Rect>| -> Vec<crate::evaluation::GtBox> {
            rects.into_iter().map(|rect| crate::evaluation::GtBox { rect, ignore: false }).collect()
        };
        let lit_boxes = r
            .person_boxes
            .iter()
            .zip(&r.person_backlit)
            .filter_map(|(b, &backlit)| b.filter(|_| !backlit))
            .collect();
        gt.insert(i, r.gt.clone())?;
        lit.insert(i, boxed(lit_boxes))?;
        props.insert(i, boxed(r.prop_boxes.iter().flatten().copied().collect()))?;
    }
    io::write_ground_truth(&a.out.join("gt.jsonl"), &gt)?;
    io::write_ground_truth(&a.out.join("positives.jsonl"), &lit)?;
    io::write_ground_truth(&a.out.join("negatives.jsonl"), &props)?;
    if a.annotations > 0 {
        let mut ap = AnnotationParams {
            rig: params.rig,
            distance_m: params.distance_m,
            noise_a: params.noise_a,
            noise_b: params.noise_b,
            ..AnnotationParams::default()
        };
        if let Some(m) = &a.yaw_modes {
            ap.yaw_modes_deg = parse_list(m, "yaw-modes")?;
        }
        if let Some(j) = a.yaw_jitter {
            ap.yaw_jitter_deg = j;
        }
        let samples = generate_annotations(a.annotations, a.seed, &ap, cfg)?;
        let dir = a.out.join("annotations");
        io::create_dir(&dir)?;
        for (i, s) in samples.iter().enumerate() {
            io::write_annotation(&dir, &format!("{i:06}"), s)?;
        }
    }
    println!(
        "wrote {} frames with {} persons to {}",
        a.n_frames,
        gt.n_positive(),
        a.out.display()
    );
    Ok(())
}

fn detect(a: DetectArgs, cfg: &PipelineConfig, workers: usize) -> Result<()> {
    let set = TemplateSet::load(&a.templates)?;
    let frames = FrameDir::open(&a.frames)?;
    let (mut dets, mut rois) = (BTreeMap::new(), BTreeMap::new());
    let indices: Vec<usize> = (0..frames.len()).collect();
    for chunk in indices.chunks(chunk_size(workers)) {
        let results = parallel_map(chunk, workers, |&i| -> Result<_> {
            let frame = frames.load_index(i)?;
            Ok((frame.frame_id, run_depth(&frame, &set, cfg)?))
        });
        for r in results {
            let (id, r) = r?;
            dets.insert(id, r.detections);
            rois.insert(id, r.rois);
        }
    }
    io::write_detections(&a.out, &dets)?;
    if let Some(p) = &a.rois_out {
        io::write_rois(p, &rois)?;
    }
    println!(
        "{} detections in {} frames",
        dets.values().map(Vec::len).sum::<usize>(),
        dets.len()
    );
    Ok(())
}

fn print_summary(curve: &EvalCurve, max_fppi: f64) {
    println!(
        "frames={} recall_at_max_fppi={:.4} max_recall={:.4} final_fppi={:.4} area={:.4}",
        curve.frames,
        curve.recall_at_fppi(max_fppi),
        curve.max_recall(),
        curve.final_fppi(),
        curve.normalized_area(max_fppi)
    );
}

fn label_of(path: &Path) -> String {
    path.file_stem().map_or_else(|| "detections".into(), |s| s.to_string_lossy().into_owned())
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|t| t.trim().parse().map_err(|_| Error::Config(format!("bad {what} entry {t:?}"))))
        .collect()
}

fn parse_k_range(text: &str) -> Result<Vec<usize>> {
    let ks = match text.split_once("..") {
        Some((lo, hi)) => {
            let lo: usize = lo.trim().parse().map_err(|_| Error::Config(format!("bad k range {text:?}")))?;
            let hi: usize = hi.trim().parse().map_err(|_| Error::Config(format!("bad k range {text:?}")))?;
            (lo..=hi).collect()
        }
        None => parse_list(text, "k-range")?,
    };
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config(format!("k range {text:?} must be nonempty and positive")));
    }
    Ok(ks)
}

/// Defaults, then the config file, then `--set` overrides. Unknown keys
/// are rejected.
fn load_config(path: Option<&Path>, sets: &[String]) -> Result<PipelineConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for s in sets {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let parts: Vec<&str> = key.trim().split('.').collect();
        let mut node = &mut table;
        for part in &parts[..parts.len() - 1] {
            node = node
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("--set {key}: {part} is not a table")))?;
        }
        node.insert(parts[parts.len() - 1].to_string(), value);
    }
    let cfg: PipelineConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn silhouette_svg(scores: &[(usize, f64)]) -> String {
    const W: f64 = 420.0;
    const H: f64 = 300.0;
    const M: f64 = 48.0;
    let (k0, k1) = (
        scores.iter().map(|s| s.0).min().unwrap_or(1) as f64,
        scores.iter().map(|s| s.0).max().unwrap_or(1) as f64,
    );
    let span = (k1 - k0).max(1.0);
    let sx = |k: f64| M + (k - k0) / span * (W - 2.0 * M);
    let sy = |s: f64| H - M - (s + 1.0) / 2.0 * (H - 2.0 * M);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<path d="M{M},{M} L{M},{} L{},{}" stroke="black" fill="none"/>"#, H - M, W - M, H - M);
    for v in [-1.0, -0.5, 0.0, 0.5, 1.0] {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"#, M - 6.0, sy(v) + 4.0);
    }
    let mut d = String::new();
    for (i, &(k, v)) in scores.iter().enumerate() {
        let _ = write!(d, "{}{:.2},{:.2} ", if i == 0 { "M" } else { "L" }, sx(k as f64), sy(v));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{k}</text>"#, sx(k as f64), H - M + 16.0);
        let _ = writeln!(s, r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="#1f77b4"/>"##, sx(k as f64), sy(v));
    }
    let _ = writeln!(s, r##"<path d="{}" stroke="#1f77b4" stroke-width="1.5" fill="none"/>"##, d.trim_end());
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">number of clusters</text>"#, W / 2.0, H - 8.0);
    let _ = writeln!(s, r#"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">silhouette score</text>"#, H / 2.0, H / 2.0);
    s.push_str("</svg>\n");
    s
}
