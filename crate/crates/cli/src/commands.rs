//! The subcommands. Each returns a summary and prints its report to stdout.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use pillardet::augment::{augment_scene, build_gt_database, GtDatabase, Scene};
use pillardet::container;
use pillardet::eval::{evaluate, EvalFrame, EvalReport};
use pillardet::fixtures::{label_records, synth_frame};
use pillardet::kitti::{
    calib_to_string, camera_to_lidar_box, detection_record, fov_filter, list_ids, parse_labels, read_velodyne_bin,
    write_labels, write_velodyne_bin, CalibMatrices, KittiLayout, LabelRecord,
};
use pillardet::loss::{gradient_check, loss_gradients, LossReport, Predictions};
use pillardet::net::{init_params, load_params, save_params, ParamSet};
use pillardet::pillars::{assign_pillars, decorate, densify};
use pillardet::pipeline::{Detector, StageTimes};
use pillardet::rng::Rng;
use pillardet::targets::build_targets;
use pillardet::types::{class_id, grid_dims, Box3D, Point, CLASS_NAMES};

use crate::config::RunConfig;
use crate::error::CliError;

/// Runs `f` over `items` on up to `jobs` threads; results keep input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..jobs)
            .map(|j| {
                let f = &f;
                s.spawn(move || {
                    (j..items.len())
                        .step_by(jobs)
                        .map(|i| (i, f(i, &items[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every slot filled")).collect()
}

/// One frame's scan, calibration and (optionally) labels.
pub struct Frame {
    pub id: String,
    pub points: Vec<Point>,
    pub calib: CalibMatrices,
    pub labels: Option<Vec<LabelRecord>>,
}

pub fn load_frame(cfg: &RunConfig, layout: &KittiLayout, id: &str, with_labels: bool) -> Result<Frame, CliError> {
    let calib = layout.calib_or_default(id)?;
    let mut points = read_velodyne_bin(&layout.velodyne(id))?;
    if cfg.frame.fov_filter {
        points = fov_filter(&points, &calib, cfg.frame.image_width, cfg.frame.image_height);
    }
    let labels = if with_labels { Some(parse_labels(&layout.label(id))?) } else { None };
    Ok(Frame { id: id.to_string(), points, calib, labels })
}

/// Frame ids to process: the given one, or every scan under the data root.
fn frame_ids(cfg: &RunConfig, frame: Option<&str>) -> Result<Vec<String>, CliError> {
    let layout = KittiLayout::new(cfg.data_root()?);
    match frame {
        Some(id) => Ok(vec![id.to_string()]),
        None => {
            let ids = layout.frame_ids()?;
            if ids.is_empty() {
                return Err(CliError::Data(format!("no scans under {}", layout.root.join("velodyne").display())));
            }
            Ok(ids)
        }
    }
}

/// Labels of the configured classes as `(lidar box, class index)`.
fn class_boxes(cfg: &RunConfig, labels: &[LabelRecord], calib: &CalibMatrices) -> Result<Vec<(Box3D, usize)>, CliError> {
    let names: Vec<String> = cfg.class_specs().into_iter().map(|c| c.name).collect();
    let mut out = Vec::new();
    for r in labels {
        if let Some(k) = names.iter().position(|n| *n == r.class) {
            out.push((camera_to_lidar_box(r, calib)?, k));
        }
    }
    Ok(out)
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Data(format!("cannot create {}: {e}", path.display())))
}

fn parent_dir(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

/// Weights from the configured file, or a fresh seeded initialization.
fn weights_or_init(cfg: &RunConfig) -> Result<ParamSet, CliError> {
    let arch = cfg.architecture();
    match &cfg.paths.weights {
        Some(path) => Ok(load_params(path, &arch)?),
        None => Ok(init_params(&mut Rng::new(cfg.seed), &arch)?),
    }
}

fn detector(cfg: &RunConfig, params: &ParamSet) -> Result<Detector, CliError> {
    Ok(Detector::new(cfg.grid_spec(), cfg.architecture(), cfg.class_specs(), params, cfg.postproc.clone())?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSummary {
    pub frames: usize,
    pub points: usize,
    pub labels: usize,
}

/// Writes synthetic frames in the KITTI layout under `--out`.
pub fn cmd_synth(cfg: &RunConfig, frames: usize) -> Result<SynthSummary, CliError> {
    let out = cfg.out()?;
    let layout = KittiLayout::new(out);
    for d in ["velodyne", "label_2", "calib"] {
        ensure_dir(&out.join(d))?;
    }
    let calib = CalibMatrices::permutation();
    let root = Rng::new(cfg.seed);
    let mut summary = SynthSummary { frames, points: 0, labels: 0 };
    for i in 0..frames {
        let id = format!("{i:06}");
        let scene = synth_frame(&cfg.synth, &mut root.derive(i as u64));
        let labels = label_records(&scene, &calib, cfg.frame.image_width, cfg.frame.image_height);
        write_velodyne_bin(&layout.velodyne(&id), &scene.points)?;
        write_labels(&layout.label(&id), &labels)?;
        fs::write(layout.calib(&id), calib_to_string(&calib))?;
        summary.points += scene.points.len();
        summary.labels += labels.len();
    }
    println!("wrote {} frames ({} points, {} labels) to {}", frames, summary.points, summary.labels, out.display());
    Ok(summary)
}

/// Writes seeded initial weights to `--out` (or `--weights` when no out).
pub fn cmd_init_weights(cfg: &RunConfig, zero: bool) -> Result<ParamSet, CliError> {
    let path = cfg.paths.out.as_deref().map_or_else(|| cfg.weights(), Ok)?;
    let mut params = init_params(&mut Rng::new(cfg.seed), &cfg.architecture())?;
    if zero {
        params = params.with_zero_weights();
    }
    parent_dir(path)?;
    save_params(&params, path)?;
    println!("wrote {} tensors to {} (checksum {:016x})", params.tensors.len(), path.display(), params.checksum());
    Ok(params)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PillarStats {
    pub points: usize,
    pub in_range: usize,
    pub pillars: usize,
    pub height: usize,
    pub width: usize,
    pub sparsity: f64,
}

impl PillarStats {
    pub fn line(&self) -> String {
        format!(
            "points={} in_range={} pillars={} grid={}x{} sparsity={:.4}",
            self.points, self.in_range, self.pillars, self.height, self.width, self.sparsity
        )
    }
}

/// Pillar statistics of a point cloud and the dense tensor for dumping.
pub fn pillar_stats(cfg: &RunConfig, points: &[Point]) -> Result<(PillarStats, pillardet::pillars::PillarTensor), CliError> {
    let spec = cfg.grid_spec();
    let (height, width) = grid_dims(&spec)?;
    let a = assign_pillars(points, &spec)?;
    let tensor = densify(&decorate(&a, points, &spec), &spec, &mut Rng::new(cfg.seed));
    tensor.check_invariants()?;
    let stats = PillarStats {
        points: points.len(),
        in_range: a.in_range,
        pillars: a.len(),
        height,
        width,
        sparsity: a.sparsity(),
    };
    Ok((stats, tensor))
}

/// Pillarizes one frame (`--frame`, or a scan path) and dumps the tensors.
pub fn cmd_pillarize(cfg: &RunConfig, frame: Option<&str>, input: Option<&Path>) -> Result<PillarStats, CliError> {
    let points = match input {
        Some(path) => {
            let pts = read_velodyne_bin(path)?;
            let calib_path = path.with_extension("txt");
            if cfg.frame.fov_filter && calib_path.exists() {
                let calib = pillardet::kitti::parse_calib(&calib_path)?;
                fov_filter(&pts, &calib, cfg.frame.image_width, cfg.frame.image_height)
            } else {
                pts
            }
        }
        None => {
            let id = frame_ids(cfg, frame)?.remove(0);
            load_frame(cfg, &KittiLayout::new(cfg.data_root()?), &id, false)?.points
        }
    };
    let (stats, tensor) = pillar_stats(cfg, &points)?;
    if !(6000..=9000).contains(&stats.pillars) {
        log::warn!("{} non-empty pillars; full recorded sweeps usually give 6000-9000", stats.pillars);
    }
    if let Some(out) = &cfg.paths.out {
        parent_dir(out)?;
        container::write(out, &tensor.to_tensors())?;
    }
    println!("{}", stats.line());
    Ok(stats)
}

#[derive(Debug, Clone)]
pub struct InferSummary {
    pub frames: usize,
    pub detections: usize,
    pub times: StageTimes,
}

pub fn print_times(times: &StageTimes, frames: usize) {
    let n = frames.max(1) as f64;
    for (name, d) in StageTimes::NAMES.iter().zip(times.values()) {
        println!("  {:<20} {:>10.2} ms/frame", name, d.as_secs_f64() * 1e3 / n);
    }
    println!("  {:<20} {:>10.2} ms/frame", "total", times.total().as_secs_f64() * 1e3 / n);
}

/// Detects objects in every frame and writes one result file per frame.
pub fn cmd_infer(cfg: &RunConfig, frame: Option<&str>) -> Result<InferSummary, CliError> {
    let params = load_params(cfg.weights()?, &cfg.architecture())?;
    let det = detector(cfg, &params)?;
    let out = cfg.out()?;
    ensure_dir(out)?;
    let ids = frame_ids(cfg, frame)?;
    let layout = KittiLayout::new(cfg.data_root()?);
    let root = Rng::new(cfg.seed);
    let names: Vec<String> = cfg.class_specs().into_iter().map(|c| c.name).collect();

    let results = par_map(&ids, cfg.jobs, |i, id| -> Result<(usize, StageTimes), CliError> {
        let mut times = StageTimes::default();
        let t = Instant::now();
        let f = load_frame(cfg, &layout, id, false)?;
        times.load_filter += t.elapsed();
        let dets = det.detect(&f.points, &mut root.derive(i as u64), &mut times)?;
        let records: Vec<LabelRecord> = dets
            .iter()
            .map(|d| detection_record(&names[d.class], &d.boxed, d.score, &f.calib))
            .collect();
        write_labels(&out.join(format!("{id}.txt")), &records)?;
        Ok((dets.len(), times))
    });
    let mut summary = InferSummary { frames: ids.len(), detections: 0, times: StageTimes::default() };
    for r in results {
        let (n, t) = r?;
        summary.detections += n;
        summary.times.add(&t);
    }
    println!("{} frames, {} detections written to {}", summary.frames, summary.detections, out.display());
    print_times(&summary.times, summary.frames);
    Ok(summary)
}

#[derive(Debug, Clone)]
pub struct LossSummary {
    pub report: LossReport,
    pub max_grad_dev: f64,
    pub checked: usize,
}

/// Loss of the network (or of perfect predictions) on one labeled frame,
/// with a finite-difference check of the analytic gradient.
pub fn cmd_loss(cfg: &RunConfig, frame: Option<&str>, perfect: bool, coords: usize) -> Result<LossSummary, CliError> {
    let id = frame_ids(cfg, frame)?.remove(0);
    let f = load_frame(cfg, &KittiLayout::new(cfg.data_root()?), &id, true)?;
    let params = weights_or_init(cfg)?;
    let det = detector(cfg, &params)?;
    let gts = class_boxes(cfg, f.labels.as_deref().unwrap_or_default(), &f.calib)?;
    let targets = build_targets(&det.anchors, &gts, &det.classes)?;
    let pred = if perfect {
        // Confident enough for a near-zero loss while staying inside the
        // probability clamp, so the gradient check still has cls coordinates.
        Predictions::from_targets(&targets, 12.0)
    } else {
        let out = det.forward(&f.points, &mut Rng::new(cfg.seed), &mut StageTimes::default())?;
        det.predictions(&out.maps)?
    };
    let (report, _) = loss_gradients(&pred, &targets, &cfg.loss)?;
    let check = gradient_check(&pred, &targets, &cfg.loss, coords, 1e-3, &mut Rng::new(cfg.seed).derive(1))?;
    println!("frame {id}: {} ground truths", gts.len());
    println!("L_loc   {:.6}", report.loc);
    println!("L_cls   {:.6}", report.cls);
    println!("L_dir   {:.6}", report.dir);
    println!("total   {:.6}", report.total);
    println!("N_pos   {}{}", report.n_pos, if report.no_positives { " (no positives: normalized by 1)" } else { "" });
    println!("grad    max relative deviation {:.3e} over {} coordinates", check.max_rel_err, check.checked);
    Ok(LossSummary { report, max_grad_dev: check.max_rel_err, checked: check.checked })
}

/// AP table of the result files in `results` against the labels.
pub fn cmd_eval(cfg: &RunConfig, results: &Path) -> Result<EvalReport, CliError> {
    let layout = KittiLayout::new(cfg.data_root()?);
    let label_ids = list_ids(&layout.root.join("label_2"), "txt")?;
    let result_ids = list_ids(results, "txt")?;
    if label_ids != result_ids {
        let missing: Vec<_> = label_ids.iter().filter(|i| !result_ids.contains(i)).take(5).collect();
        let extra: Vec<_> = result_ids.iter().filter(|i| !label_ids.contains(i)).take(5).collect();
        return Err(CliError::Data(format!(
            "result and label frame sets differ (missing results {missing:?}, unknown results {extra:?})"
        )));
    }
    let frames = par_map(&label_ids, cfg.jobs, |_, id| -> Result<EvalFrame, CliError> {
        let calib = layout.calib_or_default(id)?;
        let gts = parse_labels(&layout.label(id))?;
        let dets = parse_labels(&results.join(format!("{id}.txt")))?;
        Ok(EvalFrame::new(gts, dets, &calib)?)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let names: Vec<String> = cfg.class_specs().into_iter().map(|c| c.name).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let report = evaluate(&frames, &refs, cfg.eval.interpolation);
    print!("{report}");
    if let Some(out) = &cfg.paths.out {
        parent_dir(out)?;
        fs::write(out, report.to_string())?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSummary {
    pub points_before: usize,
    pub points_after: usize,
    pub boxes_before: usize,
    pub boxes_after: usize,
    pub placed: [usize; 3],
}

fn scene_of(frame: &Frame) -> Result<Scene, CliError> {
    let mut boxes = Vec::new();
    for r in frame.labels.as_deref().unwrap_or_default() {
        if let Some(c) = class_id(&r.class) {
            boxes.push((camera_to_lidar_box(r, &frame.calib)?, c));
        }
    }
    Ok(Scene { points: frame.points.clone(), boxes })
}

/// Database sampling, box perturbation and global transform on one frame;
/// dumps the result to `--out`.
pub fn cmd_augment(cfg: &RunConfig, frame: Option<&str>, db_path: Option<&Path>) -> Result<AugmentSummary, CliError> {
    let layout = KittiLayout::new(cfg.data_root()?);
    let ids = frame_ids(cfg, None)?;
    let id = frame.map_or_else(|| ids[0].clone(), str::to_string);
    let db = match db_path {
        Some(p) if p.exists() => GtDatabase::load(p)?,
        _ => {
            let scenes = par_map(&ids, cfg.jobs, |_, id| scene_of(&load_frame(cfg, &layout, id, true)?))
                .into_iter()
                .collect::<Result<Vec<_>, _>>()?;
            // the stored form, so a rebuilt and a reloaded database agree
            let db = GtDatabase::from_tensors(&build_gt_database(&scenes).to_tensors())?;
            if let Some(p) = db_path {
                parent_dir(p)?;
                db.save(p)?;
            }
            db
        }
    };
    let scene = scene_of(&load_frame(cfg, &layout, &id, true)?)?;
    scene.validate()?;
    let (out_scene, report) = augment_scene(&db, &scene, &cfg.augment, &mut Rng::new(cfg.seed));
    let summary = AugmentSummary {
        points_before: scene.points.len(),
        points_after: out_scene.points.len(),
        boxes_before: scene.boxes.len(),
        boxes_after: out_scene.boxes.len(),
        placed: report.placed,
    };
    let out = cfg.out()?;
    parent_dir(out)?;
    container::write(out, &out_scene.to_tensors())?;
    println!("frame {id}: database of {} objects", db.len());
    println!("points {} -> {}", summary.points_before, summary.points_after);
    println!("boxes  {} -> {}", summary.boxes_before, summary.boxes_after);
    for (k, n) in report.placed.iter().enumerate() {
        println!("placed {:<10} {}", CLASS_NAMES[k], n);
    }
    if report.short {
        println!("note: the database held fewer objects than requested");
    }
    Ok(summary)
}

/// Median of a non-empty slice of durations.
pub fn median(values: &[Duration]) -> Duration {
    let mut v = values.to_vec();
    v.sort();
    v[v.len() / 2]
}
