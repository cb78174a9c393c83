use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use surfsplat::distance::{
    build_bvh, closest_point_brute_force, closest_point_on_surface, point_to_surface_distance, splat_to_surface_distance,
    DistanceKind,
};
use surfsplat::eval::{evaluate_mesh, icp_align, image_metrics_report, percentile_sorted, DistanceStats, IcpOptions};
use surfsplat::gaussian::{GaussianSplat, SplatCloud};
use surfsplat::img::{Mask, RgbImage};
use surfsplat::io::synth::{build_synthetic_scene, head_model, SyntheticScene, SyntheticSceneSpec};
use surfsplat::loss::{psnr, psnr_from_mse, ssim, LossWeights};
use surfsplat::math::{quat_from_axis_angle, quat_to_rotation, Vec3};
use surfsplat::morphable::{evaluate_surface, MorphableModel, RegularizationWeights, SurfaceParams, TriangleMesh};
use surfsplat::parallel::ExecPolicy;
use surfsplat::render::{render, Camera};
use surfsplat::train::{loss_and_gradients, train, DensifyConfig, SurfaceMode, SurfaceTerm, TrainConfig, TrainingView};

fn report(id: usize, name: &str, pass: bool, detail: &str) {
    let line = format!("acceptance {id} {name}: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gauss3(rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::new(gauss(rng), gauss(rng), gauss(rng))
}

// ---------------------------------------------------------------- gradients

struct GradScene {
    model: MorphableModel,
    params: SurfaceParams,
    cloud: SplatCloud,
    view: TrainingView,
    background: Vec3,
    draws: Vec<Vec<Vec3>>,
}

fn grad_scene(seed: u64) -> GradScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let template = vec![
        Vec3::new(-1.0, -1.0, 0.05 * gauss(&mut rng)),
        Vec3::new(1.0, -1.0, 0.05 * gauss(&mut rng)),
        Vec3::new(1.0, 1.0, 0.05 * gauss(&mut rng)),
        Vec3::new(-1.0, 1.0, 0.05 * gauss(&mut rng)),
    ];
    let basis = |rng: &mut ChaCha8Rng| (0..4).map(|_| gauss3(rng) * 0.05).collect::<Vec<_>>();
    let shape = vec![basis(&mut rng), basis(&mut rng)];
    let expression = vec![basis(&mut rng)];
    let model = MorphableModel::new(template, shape, expression, vec![[0, 1, 2], [0, 2, 3]], vec![true; 4]).unwrap();
    let mut params = SurfaceParams::zeros(&model);
    params.shape_coeffs = vec![gauss(&mut rng) * 0.5, gauss(&mut rng) * 0.5];
    params.expression_coeffs = vec![gauss(&mut rng) * 0.5];
    params.pose_rotation = quat_from_axis_angle(gauss3(&mut rng), 0.1) * 1.1;
    params.pose_translation = gauss3(&mut rng) * 0.05;
    params.pose_scale = 1.0 + 0.05 * gauss(&mut rng);

    let n = rng.gen_range(4..=10);
    let splats = (0..n)
        .map(|_| {
            let p = Vec3::new(rng.gen_range(-0.7..0.7), rng.gen_range(-0.7..0.7), 0.1 * gauss(&mut rng));
            let log_scale = Vec3::from_fn(|_, _| rng.gen_range(-2.0..-1.3));
            let rot = Vec3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let q = surfsplat::math::Quat::new(1.0, rot.x, rot.y, rot.z) * rng.gen_range(0.8..1.2);
            let sh = (0..4).map(|k| gauss3(&mut rng) * if k == 0 { 0.5 } else { 0.1 }).collect();
            GaussianSplat::new(p, log_scale, q, rng.gen_range(-1.5..1.5), sh)
        })
        .collect();
    let cloud = SplatCloud::new(splats);
    let camera = Camera::look_at(&Vec3::new(0.4, -0.3, 3.0), &Vec3::zeros(), &Vec3::y(), 14.0, 16, 16);
    let mut image = RgbImage::new(16, 16);
    image.data.iter_mut().for_each(|v| *v = rng.gen());
    let mask = Mask { width: 16, height: 16, data: (0..256).map(|_| rng.gen_bool(0.85)).collect() };
    let background = Vec3::from_fn(|_, _| rng.gen());
    let draws = (0..n).map(|_| (0..4).map(|_| gauss3(&mut rng)).collect()).collect();
    GradScene { model, params, cloud, view: TrainingView { name: "fd".into(), camera, image, mask }, background, draws }
}

fn weights() -> LossWeights {
    LossWeights { lambda_rgb: 1.0, lambda_ssim: 0.2, lambda_s2s: 0.3, lambda_reg_initial: 0.05, ..Default::default() }
}

fn scene_loss(s: &GradScene, cloud: &SplatCloud, params: &SurfaceParams) -> (f64, surfsplat::train::StepOutput) {
    let mesh = evaluate_surface(&s.model, params).unwrap();
    let index = build_bvh(&mesh).unwrap();
    let term = SurfaceTerm { mesh: &mesh, index: &index, draws: &s.draws, joint: true };
    let out = loss_and_gradients(
        cloud,
        params,
        &s.model,
        &s.view,
        &s.background,
        Some(term),
        &weights(),
        Some(&RegularizationWeights::default()),
        0,
        ExecPolicy::Sequential,
    )
    .unwrap();
    (out.breakdown.total, out)
}

fn splat_params(s: &mut GaussianSplat) -> Vec<&mut f64> {
    let mut v: Vec<&mut f64> = Vec::new();
    let GaussianSplat { position, log_scale, rotation, opacity_logit, sh_coeffs } = s;
    v.extend(position.iter_mut());
    v.extend(log_scale.iter_mut());
    v.extend(rotation.iter_mut());
    v.push(opacity_logit);
    for c in sh_coeffs.iter_mut() {
        v.extend(c.iter_mut());
    }
    v
}

fn surface_params(p: &mut SurfaceParams) -> Vec<&mut f64> {
    let mut v: Vec<&mut f64> = Vec::new();
    let SurfaceParams { shape_coeffs, expression_coeffs, pose_rotation, pose_translation, pose_scale } = p;
    v.extend(shape_coeffs.iter_mut());
    v.extend(expression_coeffs.iter_mut());
    v.extend(pose_rotation.iter_mut());
    v.extend(pose_translation.iter_mut());
    v.push(pose_scale);
    v
}

const FD_STEP: f64 = 1e-6;
const FD_REL_TOL: f64 = 1e-4;
/// Components below this magnitude are compared absolutely.
const FD_FLOOR: f64 = 1e-6;

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

#[test]
fn gradient_integrity() {
    let start = Instant::now();
    let mut worst = 0.0_f64;
    let mut checked = 0;
    for seed in 0..6 {
        let s = grad_scene(seed);
        let (_, out) = scene_loss(&s, &s.cloud, &s.params);
        for i in 0..s.cloud.len() {
            let g = &out.splat_grads[i];
            let mut analytic = Vec::new();
            analytic.extend(g.position.iter());
            analytic.extend(g.log_scale.iter());
            analytic.extend(g.rotation.iter());
            analytic.push(g.opacity_logit);
            for c in &g.sh_coeffs {
                analytic.extend(c.iter());
            }
            for (k, a) in analytic.iter().enumerate() {
                let eval = |h: f64| {
                    let mut c = s.cloud.clone();
                    *splat_params(&mut c.splats[i])[k] += h;
                    scene_loss(&s, &c, &s.params).0
                };
                let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
                let e = relative_error(*a, numeric);
                assert!(e < FD_REL_TOL, "seed {seed} splat {i} param {k}: analytic {a} numeric {numeric}");
                worst = worst.max(e);
                checked += 1;
            }
        }
        let sg = &out.surface_grad;
        let mut analytic = Vec::new();
        analytic.extend(&sg.shape_coeffs);
        analytic.extend(&sg.expression_coeffs);
        analytic.extend(sg.pose_rotation.iter());
        analytic.extend(sg.pose_translation.iter());
        analytic.push(sg.pose_scale);
        for (k, a) in analytic.iter().enumerate() {
            let eval = |h: f64| {
                let mut p = s.params.clone();
                *surface_params(&mut p)[k] += h;
                scene_loss(&s, &s.cloud, &p).0
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            let e = relative_error(*a, numeric);
            assert!(e < FD_REL_TOL, "seed {seed} surface param {k}: analytic {a} numeric {numeric}");
            worst = worst.max(e);
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(1, "gradient integrity", secs < 60.0, &format!("{checked} parameters, max relative error {worst:.2e}, {secs:.1}s"));
    assert!(secs < 60.0);
}

// ------------------------------------------------------- Monte-Carlo distance

#[test]
fn monte_carlo_distance_converges() {
    let mesh = TriangleMesh::new(
        vec![Vec3::new(-50.0, -50.0, 0.0), Vec3::new(50.0, -50.0, 0.0), Vec3::new(50.0, 50.0, 0.0), Vec3::new(-50.0, 50.0, 0.0)],
        vec![[0, 1, 2], [0, 2, 3]],
    )
    .unwrap();
    let index = build_bvh(&mesh).unwrap();
    let n = 10_000;
    let mut all_pass = true;
    let mut detail = String::new();
    for (seed, sigma) in [(1u64, 0.05), (2, 0.3), (3, 1.0)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draws: Vec<Vec3> = (0..n).map(|_| gauss3(&mut rng)).collect();
        let splat = GaussianSplat::isotropic(Vec3::new(0.2, -0.1, 0.0), sigma, 0.5);
        let (estimate, samples) = splat_to_surface_distance(&index, &mesh, &splat, &draws).unwrap();
        let oracle = samples.iter().sum::<f64>() / n as f64;
        let analytic = sigma * (2.0 / std::f64::consts::PI).sqrt();
        let se = sigma * (1.0 - 2.0 / std::f64::consts::PI).sqrt() / (n as f64).sqrt();
        let z = (estimate - analytic) / se;
        let pass = z.abs() < 3.0 && (estimate - oracle).abs() <= 1e-12 * oracle;
        all_pass &= pass;
        detail += &format!("sigma {sigma}: z {z:+.2} ");
        assert!(pass, "sigma {sigma}: estimate {estimate}, analytic {analytic}, se {se}");
    }
    report(2, "monte-carlo splat-to-surface convergence", all_pass, detail.trim_end());
}

// ------------------------------------------------------------ closest point

fn random_meshes() -> Vec<TriangleMesh> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let head = head_model(3, 3, 0, 4).unwrap();
    let mut jittered = head.template_mesh().unwrap();
    jittered.vertices.iter_mut().for_each(|v| *v += gauss3(&mut rng) * 0.02);
    let jittered = TriangleMesh::new(jittered.vertices, jittered.triangles).unwrap();

    let soup_vertices: Vec<Vec3> = (0..600).map(|_| gauss3(&mut rng)).collect();
    let soup_triangles = (0..200).map(|t| [3 * t, 3 * t + 1, 3 * t + 2]).collect();
    let soup = TriangleMesh::new(soup_vertices, soup_triangles).unwrap();

    let n = 20;
    let mut grid = Vec::new();
    for j in 0..=n {
        for i in 0..=n {
            let (x, y) = (i as f64 / n as f64 * 2.0 - 1.0, j as f64 / n as f64 * 2.0 - 1.0);
            grid.push(Vec3::new(x, y, 0.3 * (3.0 * x).sin() * (2.0 * y).cos() + 0.01 * gauss(&mut rng)));
        }
    }
    let mut tris = Vec::new();
    for j in 0..n {
        for i in 0..n {
            let a = j * (n + 1) + i;
            tris.push([a, a + 1, a + n + 2]);
            tris.push([a, a + n + 2, a + n + 1]);
        }
    }
    vec![jittered, soup, TriangleMesh::new(grid, tris).unwrap()]
}

#[test]
fn bvh_matches_brute_force() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut mismatches = 0;
    let mut queries = 0;
    for mesh in random_meshes() {
        let index = build_bvh(&mesh).unwrap();
        for _ in 0..10_000 {
            let q = gauss3(&mut rng) * 1.5;
            let fast = closest_point_on_surface(&index, &mesh, &q);
            let slow = closest_point_brute_force(&mesh, &q);
            if fast.distance != slow.distance {
                mismatches += 1;
            }
            queries += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = mismatches == 0 && secs < 60.0;
    report(3, "bvh closest point equals brute force", pass, &format!("{queries} queries, {mismatches} mismatches, {secs:.1}s"));
    assert!(pass);
}

// ---------------------------------------------------------------- ablations

const ABLATION_ITERATIONS: usize = 2000;
const ABLATION_SEEDS: [u64; 3] = [11, 12, 13];
const SPIKE_DRAWS: usize = 16;
const MESH_SAMPLES: usize = 20_000;

#[derive(Debug, Clone)]
struct RunOutcome {
    heldout_l1: f64,
    spike_p95: f64,
    mesh_mean: f64,
    splat_count: usize,
}

struct Ablation {
    scene: SyntheticScene,
    template_mean: f64,
    runs: BTreeMap<&'static str, Vec<RunOutcome>>,
}

fn ablation_scene() -> SyntheticScene {
    build_synthetic_scene(&SyntheticSceneSpec { seed: 3, texture_seed: 5, ..Default::default() }).unwrap()
}

fn ablation_config(name: &str, seed: u64) -> TrainConfig {
    let (surface_mode, distance_kind, world_space_densify) = match name {
        "none" => (SurfaceMode::None, DistanceKind::SplatToSurface, false),
        "fixed_s2s_wsd" => (SurfaceMode::Fixed, DistanceKind::SplatToSurface, true),
        "joint_s2s_wsd" => (SurfaceMode::Joint, DistanceKind::SplatToSurface, true),
        "joint_s2s" => (SurfaceMode::Joint, DistanceKind::SplatToSurface, false),
        "joint_p2s_wsd" => (SurfaceMode::Joint, DistanceKind::PointToSurface, true),
        "joint_p2s" => (SurfaceMode::Joint, DistanceKind::PointToSurface, false),
        _ => unreachable!(),
    };
    TrainConfig {
        iterations: ABLATION_ITERATIONS,
        seed,
        sh_degree: 1,
        surface_mode,
        distance_kind,
        world_space_densify,
        densify: DensifyConfig { start_iteration: 300, end_iteration: 1500, ..Default::default() },
        log_interval: 500,
        ..Default::default()
    }
}

fn heldout_l1(scene: &SyntheticScene, cloud: &SplatCloud) -> f64 {
    let black = Vec3::zeros();
    let names: Vec<String> = scene.heldout.iter().map(|v| v.name.clone()).collect();
    let rendered: Vec<RgbImage> = scene.heldout.iter().map(|v| render(cloud, &v.camera, &black).rgb).collect();
    let targets: Vec<RgbImage> = scene.heldout.iter().map(|v| v.image.clone()).collect();
    let masks: Vec<Mask> = scene.heldout.iter().map(|v| v.mask.clone()).collect();
    image_metrics_report(&names, &rendered, &targets, &masks).unwrap().mean.l1
}

/// 95th percentile over splats of the largest perpendicular distance of a
/// splat's draws to the ground-truth surface.
fn spike_metric(gt: &TriangleMesh, cloud: &SplatCloud) -> f64 {
    let index = build_bvh(gt).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut worst: Vec<f64> = cloud
        .splats
        .iter()
        .map(|s| {
            let (r, sc) = (s.rotation_matrix(), s.scales());
            (0..SPIKE_DRAWS)
                .map(|_| point_to_surface_distance(&index, gt, &(s.position + r * gauss3(&mut rng).component_mul(&sc))))
                .fold(0.0, f64::max)
        })
        .collect();
    worst.sort_by(f64::total_cmp);
    percentile_sorted(&worst, 0.95)
}

fn mesh_mean(scene: &SyntheticScene, mesh: &TriangleMesh) -> f64 {
    evaluate_mesh(mesh, &scene.gt_mesh, MESH_SAMPLES, 0, &IcpOptions::default()).unwrap().stats.mean
}

fn ablation() -> &'static Ablation {
    static CELL: OnceLock<Ablation> = OnceLock::new();
    CELL.get_or_init(|| {
        let scene = ablation_scene();
        let template_mean = mesh_mean(&scene, &scene.model.template_mesh().unwrap());
        let mut runs = BTreeMap::new();
        for name in ["none", "fixed_s2s_wsd", "joint_s2s_wsd", "joint_s2s", "joint_p2s_wsd", "joint_p2s"] {
            let outcomes = ABLATION_SEEDS
                .iter()
                .map(|&seed| {
                    let t = Instant::now();
                    let result = train(&scene.views, &scene.model, &ablation_config(name, seed)).unwrap();
                    let mesh = evaluate_surface(&scene.model, &result.params).unwrap();
                    let o = RunOutcome {
                        heldout_l1: heldout_l1(&scene, &result.cloud),
                        spike_p95: spike_metric(&scene.gt_mesh, &result.cloud),
                        mesh_mean: mesh_mean(&scene, &mesh),
                        splat_count: result.cloud.len(),
                    };
                    let _ = std::io::stderr().write_all(
                        format!("  run {name} seed {seed}: {o:?} in {:.0}s\n", t.elapsed().as_secs_f64()).as_bytes(),
                    );
                    o
                })
                .collect();
            runs.insert(name, outcomes);
        }
        Ablation { scene, template_mean, runs }
    })
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn l1s(a: &Ablation, name: &str) -> Vec<f64> {
    a.runs[name].iter().map(|o| o.heldout_l1).collect()
}

/// Whether `better` has a lower mean than `worse` by more than one pooled
/// standard deviation, with a printable summary.
fn separated(better: &[f64], worse: &[f64]) -> (bool, String) {
    let (mb, sb) = mean_sd(better);
    let (mw, sw) = mean_sd(worse);
    let pooled = ((sb * sb + sw * sw) / 2.0).sqrt();
    (mw - mb > pooled, format!("{mb:.5} vs {mw:.5}, pooled sd {pooled:.5}"))
}

#[test]
fn ablation_surface_modes() {
    let a = ablation();
    let (j, f, n) = (l1s(a, "joint_s2s_wsd"), l1s(a, "fixed_s2s_wsd"), l1s(a, "none"));
    let (p1, d1) = separated(&j, &f);
    let (p2, d2) = separated(&f, &n);
    report(4, "held-out L1 joint < fixed < none", p1 && p2, &format!("joint/fixed {d1}; fixed/none {d2}"));
    assert!(p1 && p2);
}

#[test]
fn ablation_distance_and_densification() {
    let a = ablation();
    let mean = |name: &str| mean_sd(&l1s(a, name)).0;
    let s2s_beats_p2s = mean("joint_s2s_wsd") < mean("joint_p2s_wsd");
    let wsd_helps_s2s = mean("joint_s2s_wsd") < mean("joint_s2s");
    let wsd_helps_p2s = mean("joint_p2s_wsd") < mean("joint_p2s");
    let spikes = |name: &str| mean_sd(&a.runs[name].iter().map(|o| o.spike_p95).collect::<Vec<_>>()).0;
    let fewer_spikes = spikes("joint_s2s_wsd") < spikes("joint_p2s_wsd");
    let pass = s2s_beats_p2s && wsd_helps_s2s && wsd_helps_p2s && fewer_spikes;
    let detail = format!(
        "L1 s2s+wsd {:.5}, s2s {:.5}, p2s+wsd {:.5}, p2s {:.5}; spike p95 s2s {:.4} vs p2s {:.4}",
        mean("joint_s2s_wsd"),
        mean("joint_s2s"),
        mean("joint_p2s_wsd"),
        mean("joint_p2s"),
        spikes("joint_s2s_wsd"),
        spikes("joint_p2s_wsd")
    );
    report(5, "splat-to-surface and world-space densification", pass, &detail);
    assert!(pass);
}

#[test]
fn surface_recovery() {
    let a = ablation();
    let joint = mean_sd(&a.runs["joint_s2s_wsd"].iter().map(|o| o.mesh_mean).collect::<Vec<_>>()).0;
    let fixed = mean_sd(&a.runs["fixed_s2s_wsd"].iter().map(|o| o.mesh_mean).collect::<Vec<_>>()).0;
    let worst_joint = a.runs["joint_s2s_wsd"].iter().map(|o| o.mesh_mean).fold(0.0, f64::max);
    let pass = worst_joint < a.template_mean && joint < fixed;
    let detail = format!(
        "mean distance joint {joint:.5} (worst seed {worst_joint:.5}), fixed {fixed:.5}, template {:.5}, head height {:.2}",
        a.template_mean,
        a.scene.gt_mesh.bounding_box().1.y - a.scene.gt_mesh.bounding_box().0.y
    );
    report(6, "surface recovery", pass, &detail);
    assert!(pass);
}

// ------------------------------------------------------------------ metrics

fn reference_ssim_channel(x: &[f64], y: &[f64], w: usize, h: usize) -> f64 {
    let sigma: f64 = 1.5;
    let mut kernel = [[0.0; 11]; 11];
    let mut sum = 0.0;
    for (i, row) in kernel.iter_mut().enumerate() {
        for (j, k) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *k = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            sum += *k;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for py in 0..h {
        for px in 0..w {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (i, row) in kernel.iter().enumerate() {
                for (j, k) in row.iter().enumerate() {
                    let (qy, qx) = (py as isize + i as isize - 5, px as isize + j as isize - 5);
                    if qy < 0 || qx < 0 || qy >= h as isize || qx >= w as isize {
                        continue;
                    }
                    let wgt = k / sum;
                    let (a, b) = (x[qy as usize * w + qx as usize], y[qy as usize * w + qx as usize]);
                    mx += wgt * a;
                    my += wgt * b;
                    xx += wgt * a * a;
                    yy += wgt * b * b;
                    xy += wgt * a * b;
                }
            }
            let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    total / (w * h) as f64
}

#[test]
fn metric_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (w, h) = (23, 17);
    let mut a = RgbImage::new(w, h);
    a.data.iter_mut().for_each(|v| *v = rng.gen());
    let mut b = a.clone();
    b.data.iter_mut().for_each(|v| *v = (*v + 0.2 * gauss(&mut rng)).clamp(0.0, 1.0));
    let reference = (0..3).map(|c| reference_ssim_channel(&a.channel(c), &b.channel(c), w, h)).sum::<f64>() / 3.0;
    let ssim_err = (ssim(&a, &b).unwrap() - reference).abs();
    let ssim_ok = ssim_err < 1e-6 && (ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12;

    let gray = |v: f64| RgbImage::filled(4, 4, &Vec3::repeat(v));
    let psnr_ok = (psnr(&gray(0.0), &gray(0.1)).unwrap() - 20.0).abs() < 1e-9
        && (psnr_from_mse(1e-4) - 40.0).abs() < 1e-9
        && psnr(&gray(0.3), &gray(0.3)).unwrap().is_infinite();

    let mut m90_ok = true;
    for n in [1usize, 7, 10, 101, 1000] {
        let d: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let mut sorted = d.clone();
        sorted.sort_by(f64::total_cmp);
        let drop = n / 10;
        let trimmed_max = sorted[..n - drop].iter().copied().fold(f64::MIN, f64::max);
        let stats = DistanceStats::from_distances(d).unwrap();
        let expected = if n % 10 == 0 { trimmed_max } else { sorted[((0.9 * n as f64).ceil() as usize).max(1) - 1] };
        m90_ok &= stats.m90 == expected;
    }

    let (dirs, triangles) = surfsplat::io::synth::icosphere(3);
    let squashed = dirs
        .iter()
        .map(|p| Vec3::new(1.0 * p.x, 0.7 * p.y, 0.5 * p.z) * (1.0 + 0.15 * (3.0 * p.x).sin() * (2.0 * p.y).cos() + 0.1 * p.z * p.x))
        .collect();
    let target = TriangleMesh::new(squashed, triangles).unwrap();
    let index = build_bvh(&target).unwrap();
    let mut icp_err: f64 = 0.0;
    for (axis, angle, t) in [
        (Vec3::new(0.3, 1.0, 0.2), 0.17, Vec3::new(0.05, -0.08, 0.1)),
        (Vec3::new(1.0, 0.0, 0.5), -0.15, Vec3::new(-0.1, 0.02, 0.0)),
    ] {
        let r = quat_to_rotation(&quat_from_axis_angle(axis, angle));
        let moved: Vec<Vec3> = target.vertices.iter().map(|v| r * v + t).collect();
        let result = icp_align(&moved, &target, &index, &IcpOptions { max_iterations: 100, ..Default::default() }).unwrap();
        for (m, v) in moved.iter().zip(&target.vertices) {
            icp_err = icp_err.max((result.apply(m) - v).norm());
        }
    }
    let icp_ok = icp_err < 1e-6;
    let pass = ssim_ok && psnr_ok && m90_ok && icp_ok;
    report(
        7,
        "metric correctness",
        pass,
        &format!("ssim {:.6} error {ssim_err:.1e}, psnr {psnr_ok}, m90 {m90_ok}, icp max residual {icp_err:.1e}", ssim(&a, &b).unwrap()),
    );
    assert!(pass);
}

// -------------------------------------------------------------- determinism

fn run_cli(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_surfsplat")).args(args).env("RUST_LOG", "warn").status().unwrap();
    assert!(status.success(), "surfsplat {args:?} failed");
}

fn files_equal(a: &Path, b: &Path) -> (usize, Vec<String>) {
    let mut count = 0;
    let mut differing = Vec::new();
    let mut stack = vec![std::path::PathBuf::new()];
    while let Some(rel) = stack.pop() {
        for entry in std::fs::read_dir(a.join(&rel)).unwrap() {
            let entry = entry.unwrap();
            let rel = rel.join(entry.file_name());
            if entry.file_type().unwrap().is_dir() {
                stack.push(rel);
            } else {
                count += 1;
                if std::fs::read(a.join(&rel)).unwrap() != std::fs::read(b.join(&rel)).unwrap_or_default() {
                    differing.push(rel.display().to_string());
                }
            }
        }
    }
    (count, differing)
}

#[test]
fn cli_runs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    let config = p("train.toml");
    std::fs::write(&config, "sh_degree = 1\n\n[densify]\nstart_iteration = 40\nend_iteration = 120\ninterval = 40\n").unwrap();
    for run in ["a", "b"] {
        run_cli(&["synth", "--out", &p(&format!("scene_{run}")), "--seed", "7", "--resolution", "48", "--splat-count", "1500"]);
        run_cli(&[
            "train",
            "--scene",
            &p(&format!("scene_{run}/scene.toml")),
            "--out",
            &p(&format!("ckpt_{run}")),
            "--config",
            &config,
            "--iterations",
            "150",
            "--seed",
            "3",
        ]);
    }
    let (n_scene, d_scene) = files_equal(&dir.path().join("scene_a"), &dir.path().join("scene_b"));
    let (n_ckpt, d_ckpt) = files_equal(&dir.path().join("ckpt_a"), &dir.path().join("ckpt_b"));
    let pass = d_scene.is_empty() && d_ckpt.is_empty() && n_scene > 0 && n_ckpt >= 4;
    report(
        8,
        "determinism of synth and train",
        pass,
        &format!("{n_scene} scene files, {n_ckpt} checkpoint files, differing {:?}", [d_scene, d_ckpt].concat()),
    );
    assert!(pass);
}
