//! Quick end-to-end invariant suite on synthetic fixtures.

use std::path::PathBuf;
use std::time::Instant;

use pillardet::container::{self, NdTensor};
use pillardet::fixtures::{synth_frame, SynthConfig};
use pillardet::loss::{focal_loss, gradient_check, smooth_l1, total_loss, LossWeights, Predictions};
use pillardet::net::{init_params, load_params, save_params, Architecture, ParamSet};
use pillardet::pipeline::{Detector, StageTimes};
use pillardet::postproc::{iou_bev_axis_aligned, iou_bev_rotated, PostprocConfig};
use pillardet::rng::{Draws, Rng};
use pillardet::targets::{build_targets, decode_box, encode_box, ClassSpec};
use pillardet::types::{Box3D, GridSpec};
use pillardet::Error;

use crate::error::CliError;

/// Outcome of one check.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<String, String>) -> Check {
    let t = Instant::now();
    let (passed, detail) = match f() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    Check { name, passed, detail: format!("{detail} ({:.2}s)", t.elapsed().as_secs_f64()) }
}

fn expect(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Tensor shapes along the car network, checked against the grid constants.
pub fn shape_chain(seed: u64) -> Result<String, String> {
    let spec = GridSpec::car();
    let arch = Architecture::car();
    let params = init_params(&mut Rng::new(seed), &arch).map_err(|e| e.to_string())?;
    let det = Detector::new(spec, arch, vec![ClassSpec::car()], &params, PostprocConfig::default())
        .map_err(|e| e.to_string())?;
    let scene = synth_frame(&SynthConfig::default(), &mut Rng::new(seed));
    let out = det
        .forward(&scene.points, &mut Rng::new(seed), &mut StageTimes::default())
        .map_err(|e| e.to_string())?;
    let got = [
        vec![out.pillars.shape().0, out.pillars.shape().1, out.pillars.shape().2],
        vec![64, out.encoded.len() / 64],
        vec![out.pseudo_image.channels, out.pseudo_image.height, out.pseudo_image.width],
        vec![out.features.channels, out.features.height, out.features.width],
        vec![out.maps.cls.channels, out.maps.cls.height, out.maps.cls.width],
        vec![out.maps.boxes.channels, out.maps.boxes.height, out.maps.boxes.width],
        vec![out.maps.dir.channels, out.maps.dir.height, out.maps.dir.width],
    ];
    let want = [
        vec![9, 12000, 100],
        vec![64, 12000],
        vec![64, 500, 440],
        vec![384, 250, 220],
        vec![2, 250, 220],
        vec![14, 250, 220],
        vec![4, 250, 220],
    ];
    expect(got == want, || format!("shapes {got:?}, expected {want:?}"))?;
    expect(out.encoded.len() == 64 * 12000, || "encoder output is not 64 x 12000".into())?;
    Ok(format!("{got:?}"))
}

fn loss_formulas() -> Result<String, String> {
    let f = focal_loss(0.5, true, 0.25, 2.0);
    expect((f - 0.043322).abs() < 1e-6, || format!("focal(0.5) = {f}"))?;
    let s = [smooth_l1(0.0), smooth_l1(1.0), smooth_l1(2.0)];
    expect(s == [0.0, 0.5, 1.5], || format!("smooth_l1 = {s:?}"))?;
    let t = total_loss(1.0, 1.0, 1.0, 2, &LossWeights::default());
    expect(t == 1.6, || format!("total = {t}"))?;
    let dt = smooth_l1(std::f64::consts::PI.sin());
    expect(dt.abs() < 1e-15, || format!("angle loss at pi = {dt}"))?;
    Ok(format!("focal {f:.6}"))
}

fn small_gradient_check(seed: u64) -> Result<String, String> {
    let spec = GridSpec { x_max: 20.0, y_min: -10.0, y_max: 10.0, ..GridSpec::car() };
    let cls = ClassSpec::car();
    let anchors = vec![pillardet::targets::generate_anchors(&spec, &cls, 2).map_err(|e| e.to_string())?];
    let gts = vec![(Box3D::new(8.0, 1.0, -1.0, 1.6, 3.9, 1.56, 0.3), 0), (Box3D::new(14.0, -4.0, -1.0, 1.6, 3.9, 1.56, 1.8), 0)];
    let targets = build_targets(&anchors, &gts, &[cls]).map_err(|e| e.to_string())?;
    let mut rng = Rng::new(seed);
    let mut pred = Predictions::zeros(targets.n_anchors, 1);
    pred.cls.iter_mut().for_each(|v| *v = rng.normal(-2.0, 2.0));
    pred.boxes.iter_mut().for_each(|v| *v = rng.normal(0.0, 1.0));
    pred.dir.iter_mut().for_each(|v| *v = rng.normal(0.0, 1.0));
    let g = gradient_check(&pred, &targets, &LossWeights::default(), 200, 1e-3, &mut rng).map_err(|e| e.to_string())?;
    expect(g.max_rel_err < 1e-4, || format!("max relative error {:.3e}", g.max_rel_err))?;
    Ok(format!("max relative error {:.3e} over {}", g.max_rel_err, g.checked))
}

fn geometry(seed: u64) -> Result<String, String> {
    let mut rng = Rng::new(seed);
    for _ in 0..200 {
        let a = Box3D::new(rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0), 0.0, rng.uniform(0.5, 3.0), rng.uniform(0.5, 5.0), 1.5, rng.uniform(-3.1, 3.1));
        let b = Box3D::new(rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0), 0.0, rng.uniform(0.5, 3.0), rng.uniform(0.5, 5.0), 1.5, rng.uniform(-3.1, 3.1));
        let (ab, ba) = (iou_bev_rotated(&a, &b), iou_bev_rotated(&b, &a));
        expect((ab - ba).abs() < 1e-12 && (0.0..=1.0 + 1e-12).contains(&ab), || format!("iou {ab} vs {ba}"))?;
        let (mut ax, mut bx) = (a, b);
        ax.theta = 0.0;
        bx.theta = 0.0;
        let (r, s) = (iou_bev_rotated(&ax, &bx), iou_bev_axis_aligned(&ax, &bx));
        expect((r - s).abs() < 1e-12, || format!("axis-aligned iou {r} vs {s}"))?;
        let anchor = Box3D::new(a.x + rng.uniform(-0.5, 0.5), a.y, a.z, 1.6, 3.9, 1.56, if rng.bernoulli(0.5) { 0.0 } else { 1.5707963267948966 });
        let mut gt = a;
        gt.theta = anchor.theta + rng.uniform(-1.5, 1.5);
        let (res, bit) = encode_box(&gt, &anchor).map_err(|e| e.to_string())?;
        let d = decode_box(&res, &anchor, bit).boxed;
        let err = [d.x - gt.x, d.y - gt.y, d.z - gt.z, d.w - gt.w, d.l - gt.l, d.h - gt.h, (d.theta - gt.theta).sin()]
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        expect(err < 1e-9, || format!("round trip error {err:e}"))?;
    }
    Ok("iou symmetry, axis agreement and box round trip on 200 samples".into())
}

fn pfn_invariance(seed: u64) -> Result<String, String> {
    let spec = GridSpec::car();
    let arch = Architecture::with_layers(16, 2, [1, 1, 1], 1);
    let params = init_params(&mut Rng::new(seed), &arch).map_err(|e| e.to_string())?;
    let net = pillardet::net::Network::new(arch, &params).map_err(|e| e.to_string())?;
    let scene = synth_frame(&SynthConfig { azimuth_steps: 400, ..SynthConfig::default() }, &mut Rng::new(seed));
    let a = pillardet::pillars::assign_pillars(&scene.points, &spec).map_err(|e| e.to_string())?;
    let dec = pillardet::pillars::decorate(&a, &scene.points, &spec);
    let tensor = pillardet::pillars::densify(&dec, &spec, &mut Rng::new(seed));
    let base = net.pfn_forward(&tensor);
    let mut shuffled = tensor.clone();
    let mut rng = Rng::new(seed).derive(7);
    for p in 0..shuffled.used_slots() {
        for n in (1..shuffled.max_points).rev() {
            let m = rng.below(n + 1);
            shuffled.swap_points(p, n, m);
        }
    }
    expect(net.pfn_forward(&shuffled) == base, || "shuffled slots changed the encoder output".into())?;
    let mut padded = tensor.clone();
    for (v, &real) in padded.data.iter_mut().zip(tensor.mask.iter().cycle()) {
        if !real {
            *v = 1e3;
        }
    }
    expect(net.pfn_forward(&padded) == base, || "padding values leaked into the encoder output".into())?;
    Ok(format!("{} pillars", tensor.used_slots()))
}

fn scratch_dir() -> PathBuf {
    let dir = std::env::temp_dir().join(format!("pillardet-selfcheck-{}", std::process::id()));
    let _ = std::fs::create_dir_all(&dir);
    dir
}

fn weights_errors(seed: u64) -> Result<String, String> {
    let arch = Architecture::with_layers(8, 2, [1, 1, 1], 1);
    let params = init_params(&mut Rng::new(seed), &arch).map_err(|e| e.to_string())?;
    let dir = scratch_dir();
    let good = dir.join("good.bin");
    save_params(&params, &good).map_err(|e| e.to_string())?;
    let back = load_params(&good, &arch).map_err(|e| e.to_string())?;
    expect(back.checksum() == params.checksum(), || "weights round trip changed the values".into())?;

    let bytes = std::fs::read(&good).map_err(|e| e.to_string())?;
    let corrupt = dir.join("corrupt.bin");
    std::fs::write(&corrupt, &bytes[..bytes.len() - 3]).map_err(|e| e.to_string())?;
    let e = load_params(&corrupt, &arch);
    expect(matches!(e, Err(Error::Format { .. })), || format!("truncated weights gave {e:?}"))?;

    let mut bad = ParamSet { tensors: params.tensors.clone() };
    let name = "pfn.linear.weight".to_string();
    let shape = bad.tensors[&name].shape.clone();
    bad.tensors.insert(name.clone(), NdTensor::zeros(vec![shape[0] + 1, shape[1]]));
    let misshaped = dir.join("misshaped.bin");
    container::write(&misshaped, &bad.tensors).map_err(|e| e.to_string())?;
    let e = load_params(&misshaped, &arch);
    let named = matches!(&e, Err(Error::Shape { name: n, .. }) if *n == name);
    let _ = std::fs::remove_dir_all(&dir);
    expect(named, || format!("mis-shaped tensor gave {e:?}"))?;
    Ok("round trip exact, truncation and mis-shape rejected".into())
}

/// Runs every check; fails with an invariant error listing the failures.
pub fn run(seed: u64) -> Result<Vec<Check>, CliError> {
    let checks = vec![
        check("shape chain", || shape_chain(seed)),
        check("loss formulas", loss_formulas),
        check("gradient check", || small_gradient_check(seed)),
        check("geometry", || geometry(seed)),
        check("encoder invariance", || pfn_invariance(seed)),
        check("weights file", || weights_errors(seed)),
    ];
    for c in &checks {
        println!("{} {:<20} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
    if failed.is_empty() {
        Ok(checks)
    } else {
        Err(CliError::Invariant(format!("selfcheck failed: {}", failed.join(", "))))
    }
}
