//! Acceptance criteria 1 to 8, one report line each.
//!
//! Runs without the libtest harness so that the report is always printed.
//! The process exits non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use advstereo::agcp::{build_system, cg_solve, energy, refine, AgcpConfig};
use advstereo::discriminator::DiscriminatorConfig;
use advstereo::generator::{normalize_probability, soft_argmax, topk_pool, GeneratorConfig};
use advstereo::gradsuite::run_suite;
use advstereo::metrics::{auc, bmp, mse_confidence, optimal_auc, sparsification, sparsification_from_flags};
use advstereo::pipeline::{infer_and_evaluate, report_csv, EvalConfig, ImageMetrics};
use advstereo::rng::substream;
use advstereo::stereo::{
    compute_raw_cost, ground_truth_confidence, sgm_aggregate, synth_scene, wta_disparity,
    ConfidenceKind, ConfidenceMap, CostKind, CostVolume, DisparityMap, Image, ValidityMask,
};
use advstereo::training::{
    epoch_means, generator_gradients, prepare_items, train_loop, train_step, GeneratorTerm,
    Models, TrainConfig, TrainItem,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Relative margin required on the smoke inequalities (b) to (d).
const SMOKE_MARGIN: f64 = 0.02;

/// Criteria that cannot hold as stated, with the reason. They are still
/// evaluated and reported as failing but do not fail the target.
const KNOWN_FAILURES: &[(usize, &str)] = &[(
    2,
    "with max P > 0.99 the soft-argmax can sit up to 0.01·(D−1) from the argmax, \
     which exceeds 0.05 for D = 8 when the leftover mass lies far from the peak",
)];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let reports = run_suite(0).expect("suite runs");
    let elapsed = t.elapsed();
    let required = [
        "bilinear_warp", "normalize_probability", "topk", "soft_argmax",
        "generator_params", "discriminator_dynamic_params", "discriminator_concat_params",
    ];
    let missing: Vec<_> = required
        .iter()
        .filter(|n| !reports.iter().any(|r| r.name == **n))
        .collect();
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.clone()).collect();
    let worst = reports.iter().map(|r| r.rel_err).fold(0.0, f64::max);
    outcome(
        failed.is_empty() && missing.is_empty() && elapsed < Duration::from_secs(120),
        format!(
            "{} checks, failed {failed:?}, missing {missing:?}, max rel err {worst:.2e}, {:.2?}",
            reports.len(),
            elapsed
        ),
    )
}

fn criterion_2() -> Outcome {
    let (h, w, nd, k) = (100, 100, 8, 5);
    let mut rng = substream(2, "probability");
    let mut data = Vec::with_capacity(h * w * nd);
    for _ in 0..h * w {
        // per-pixel scale mixes flat and sharply peaked distributions
        let scale = 10f64.powf(rng.random_range(-3.0..0.5));
        for _ in 0..nd {
            data.push(rng.random_range(0.0..1.0) * scale);
        }
    }
    let r = CostVolume::new(h, w, nd, data, CostKind::Refined).unwrap();
    let p = normalize_probability(&r, 0.01).unwrap();
    let top = topk_pool(&p, k).unwrap();
    let d = soft_argmax(&p);
    let (mut simplex_err, mut order_ok, mut range_ok) = (0.0f64, true, true);
    let (mut peaked, mut peak_dev, mut over) = (0usize, 0.0f64, 0usize);
    for i in 0..h * w {
        let row = &p.data[i * nd..(i + 1) * nd];
        let sum: f64 = row.iter().sum();
        simplex_err = simplex_err.max((sum - 1.0).abs());
        if row.iter().any(|&v| v < 0.0) {
            simplex_err = f64::INFINITY;
        }
        let t = &top.data[i * k..(i + 1) * k];
        let max = row.iter().copied().fold(f64::MIN, f64::max);
        order_ok &= t.windows(2).all(|w| w[0] >= w[1]) && t[0] == max;
        range_ok &= (0.0..=(nd - 1) as f64).contains(&d.data[i]);
        if max > 0.99 {
            let arg = row.iter().position(|&v| v == max).unwrap();
            peaked += 1;
            let dev = (d.data[i] - arg as f64).abs();
            peak_dev = peak_dev.max(dev);
            over += (dev > 0.05) as usize;
        }
    }
    outcome(
        simplex_err <= 1e-6 && order_ok && range_ok && peaked > 0 && peak_dev <= 0.05,
        format!(
            "10^4 pixels: simplex err {simplex_err:.1e}, top-K descending {order_ok}, \
             soft-argmax in range {range_ok}, {peaked} pixels with max P > 0.99 at D={nd}: \
             max deviation {peak_dev:.4}, {over} above 0.05"
        ),
    )
}

/// Single left-to-right path by exhaustive search over disparity sequences.
///
/// The recurrence subtracts the previous minimum at each step, so the path
/// cost equals the best sequence cost ending in `d` minus the running sum of
/// those minima.
fn brute_force_path(costs: &[Vec<f64>], p1: f64, p2: f64) -> Vec<Vec<f64>> {
    let (w, nd) = (costs.len(), costs[0].len());
    let pen = |a: usize, b: usize| match a.abs_diff(b) {
        0 => 0.0,
        1 => p1,
        _ => p2,
    };
    let mut out = vec![vec![0.0; nd]; w];
    let mut offset = 0.0;
    for x in 0..w {
        let mut best = vec![f64::INFINITY; nd];
        let mut seq = vec![0usize; x + 1];
        loop {
            let mut total = costs[0][seq[0]];
            for t in 1..=x {
                total += costs[t][seq[t]] + pen(seq[t - 1], seq[t]);
            }
            best[seq[x]] = best[seq[x]].min(total);
            // odometer increment
            let mut t = 0;
            while t <= x && seq[t] == nd - 1 {
                seq[t] = 0;
                t += 1;
            }
            if t > x {
                break;
            }
            seq[t] += 1;
        }
        for d in 0..nd {
            out[x][d] = best[d] - offset;
        }
        offset += out[x].iter().copied().fold(f64::INFINITY, f64::min);
    }
    out
}

fn criterion_3() -> Outcome {
    let hand = CostVolume::new(1, 3, 2, vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0], CostKind::Raw).unwrap();
    let got = sgm_aggregate(&hand, 0.5, 1.0, 1).unwrap();
    let hand_ok = got.data == [0.0, 1.0, 1.0, 0.5, 0.5, 1.0];
    let mut rng = substream(3, "sgm");
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (w, nd) = (8, 4);
        let costs: Vec<Vec<f64>> = (0..w).map(|_| (0..nd).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let p1 = rng.random_range(0.01..0.3);
        let p2 = p1 + rng.random_range(0.0..0.5);
        let cv = CostVolume::new(1, w, nd, costs.iter().flatten().copied().collect(), CostKind::Raw).unwrap();
        let got = sgm_aggregate(&cv, p1, p2, 1).unwrap();
        let want = brute_force_path(&costs, p1, p2);
        for x in 0..w {
            for d in 0..nd {
                worst = worst.max((got.at(0, x, d) - want[x][d]).abs());
            }
        }
    }
    outcome(
        hand_ok && worst <= 1e-12,
        format!("3x2 hand instance exact {hand_ok}, 20 random 8x1x4 instances max err {worst:.1e}"),
    )
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    Image::new(h, w, 3, (0..h * w * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn criterion_4() -> Outcome {
    let mut rng = substream(4, "agcp");
    // (a) CG against a dense direct solve
    let mut cg_err = 0.0f64;
    for _ in 0..50 {
        let h = rng.random_range(1..=10);
        let w = rng.random_range(1..=100 / h).min(10);
        let img = random_image(&mut rng, h, w);
        let d = DisparityMap::new(h, w, (0..h * w).map(|_| rng.random_range(0.0..8.0)).collect()).unwrap();
        let q = ConfidenceMap::new(h, w, (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect(), ConfidenceKind::Estimated).unwrap();
        let cfg = AgcpConfig {
            gamma: rng.random_range(0.1..2.0),
            radius_m: rng.random_range(0..=2),
            ..AgcpConfig::default()
        };
        let (a, b) = build_system(&d, &q, &img, &cfg).unwrap();
        let n = b.len();
        let dense = a.to_dense();
        let m = DMatrix::from_fn(n, n, |i, j| dense[i][j]);
        let direct = m.cholesky().expect("system is positive definite").solve(&DVector::from_vec(b.clone()));
        let sol = cg_solve(&a, &b, 1e-14, 10 * n + 100).unwrap();
        for i in 0..n {
            cg_err = cg_err.max((sol.x[i] - direct[i]).abs());
        }
    }
    // (b) two pixels: one GCP at 5 and a neighbor without one
    let img = Image::new(1, 2, 3, vec![0.5; 6]).unwrap();
    let d = DisparityMap::new(1, 2, vec![5.0, 0.0]).unwrap();
    let q = ConfidenceMap::new(1, 2, vec![0.9, 0.1], ConfidenceKind::Estimated).unwrap();
    let unit = AgcpConfig {
        radius_m: 0,
        sigma_color: 1e9,
        sigma_space: 1e9,
        cg_tol: 1e-12,
        ..AgcpConfig::default()
    };
    let two = refine(&d, &q, &img, &unit).unwrap();
    let two_ok = (two.data[0] - 5.0).abs() < 1e-6 && (two.data[1] - 5.0).abs() < 1e-6;
    // (c) energy decrease
    let mut energy_ok = 0;
    for s in 0..50 {
        let scene = synth_scene(300 + s, 24, 24, 6, 2).unwrap();
        let d = wta_disparity(&compute_raw_cost(&scene, 5).unwrap());
        let q = ConfidenceMap::new(24, 24, (0..576).map(|_| rng.random_range(0.0..1.0)).collect(), ConfidenceKind::Estimated).unwrap();
        let cfg = AgcpConfig::default();
        let r = refine(&d, &q, &scene.left, &cfg).unwrap();
        let before = energy(&d.data, &d, &q, &scene.left, &cfg).unwrap();
        let after = energy(&r.data, &d, &q, &scene.left, &cfg).unwrap();
        energy_ok += (after <= before) as usize;
    }
    // (d) ground-truth confidence
    let mut improved = 0;
    let mut pairs = Vec::new();
    for seed in 0..10 {
        let s = synth_scene(100 + seed, 64, 64, 8, 3).unwrap();
        let d = wta_disparity(&compute_raw_cost(&s, 5).unwrap());
        let q = ground_truth_confidence(&d, &s.gt_disparity, &s.gt_valid, 0.9).unwrap();
        let r = refine(&d, &q, &s.left, &AgcpConfig::default()).unwrap();
        let (b0, b1) = (
            bmp(&d, &s.gt_disparity, &s.gt_valid, 1.0).unwrap(),
            bmp(&r, &s.gt_disparity, &s.gt_valid, 1.0).unwrap(),
        );
        improved += (b1 < b0) as usize;
        pairs.push(format!("{b0:.1}->{b1:.1}"));
    }
    outcome(
        cg_err <= 1e-6 && two_ok && energy_ok == 50 && improved >= 9,
        format!(
            "CG vs dense max err {cg_err:.1e}; 2-pixel [{:.6}, {:.6}]; energy decreased on {energy_ok}/50; \
             BMP@1px reduced on {improved}/10 ({})",
            two.data[0],
            two.data[1],
            pairs.join(" ")
        ),
    )
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                go(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

/// Bad rate of the `ceil(density·n)` first pixels of `order`.
fn brute_curve(order: &[usize], bad: &[bool], n_points: usize) -> Vec<f64> {
    let n = order.len();
    (0..n_points)
        .map(|j| {
            let density = 1.0 - j as f64 / n_points as f64;
            let keep = ((density * n as f64).ceil() as usize).clamp(1, n);
            order[..keep].iter().filter(|&&i| bad[i]).count() as f64 / keep as f64
        })
        .collect()
}

fn criterion_5() -> Outcome {
    let mut rng = substream(5, "metrics");
    let n_points = 10;
    // distinct confidences: every ordering of up to 8 pixels
    let mut distinct_ok = true;
    let mut orderings = 0usize;
    for n in 1..=8 {
        let bad: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        for perm in permutations(n) {
            // pixel perm[r] has rank r, most confident first
            let mut conf = vec![0.0; n];
            for (r, &i) in perm.iter().enumerate() {
                conf[i] = (n - r) as f64;
            }
            let c = sparsification_from_flags(&conf, &bad, 1.0, n_points).unwrap();
            let want = brute_curve(&perm, &bad, n_points);
            distinct_ok &= c.errors == want;
            let mut area = 0.0;
            for j in 1..n_points {
                area += 0.5 * (want[j - 1] + want[j]) * (c.densities[j - 1] - c.densities[j]);
            }
            distinct_ok &= auc(&c) == area / (c.densities[0] - c.densities[n_points - 1]);
            orderings += 1;
        }
    }
    // tied confidences against the mean over every tie-breaking order
    let mut tie_err = 0.0f64;
    for n in 2..=8 {
        let bad: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let conf: Vec<f64> = (0..n).map(|_| rng.random_range(0..3) as f64).collect();
        let perms = permutations(n);
        let mut mean = vec![0.0; n_points];
        for tiebreak in &perms {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]).then(tiebreak[a].cmp(&tiebreak[b])));
            for (m, e) in mean.iter_mut().zip(brute_curve(&order, &bad, n_points)) {
                *m += e / perms.len() as f64;
            }
        }
        let c = sparsification_from_flags(&conf, &bad, 1.0, n_points).unwrap();
        for (a, b) in c.errors.iter().zip(&mean) {
            tie_err = tie_err.max((a - b).abs());
        }
    }
    // oracle bound
    let mut bound_ok = 0;
    for t in 0..100 {
        let (h, w) = (6, 7);
        let gt = DisparityMap::new(h, w, (0..h * w).map(|_| rng.random_range(0.0..8.0)).collect()).unwrap();
        let d = DisparityMap::new(h, w, gt.data.iter().map(|g| g + rng.random_range(-3.0..3.0)).collect()).unwrap();
        let valid = ValidityMask { height: h, width: w, data: (0..h * w).map(|i| i % 9 != t % 9).collect() };
        let q = ConfidenceMap::new(h, w, (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect(), ConfidenceKind::Estimated).unwrap();
        let c = sparsification(&q, &d, &gt, &valid, 1.0, 20).unwrap();
        bound_ok += (optimal_auc(&d, &gt, &valid, 1.0, 20).unwrap() <= auc(&c)) as usize;
    }
    // hand values
    let valid = ValidityMask::all(1, 4, true);
    let zero = DisparityMap::new(1, 4, vec![0.0; 4]).unwrap();
    let d = DisparityMap::new(1, 4, vec![0.0, 2.0, 0.5, 4.0]).unwrap();
    let qs = ConfidenceMap::new(1, 4, vec![1.0, 0.0, 1.0, 0.0], ConfidenceKind::GroundTruth).unwrap();
    let half = ConfidenceMap::constant(1, 4, 0.5);
    let hand_ok = mse_confidence(&half, &qs, &valid).unwrap() == 0.25
        && mse_confidence(&qs, &qs, &valid).unwrap() == 0.0
        && bmp(&d, &zero, &valid, 3.0).unwrap() == 25.0
        && bmp(&d, &zero, &valid, 1.0).unwrap() == 50.0
        && bmp(&zero, &zero, &valid, 1.0).unwrap() == 0.0;
    let four = sparsification_from_flags(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true], 1.0, 4).unwrap();
    let four_ok = four.errors == [0.5, 1.0 / 3.0, 0.0, 0.0];
    outcome(
        distinct_ok && tie_err <= 1e-12 && bound_ok == 100 && hand_ok && four_ok,
        format!(
            "{orderings} orderings exact {distinct_ok}; tie averaging max err {tie_err:.1e}; \
             optimal <= auc on {bound_ok}/100; hand values exact {}",
            hand_ok && four_ok
        ),
    )
}

fn stop_gradient_fixture() -> (Vec<TrainItem>, Models<f64>, TrainConfig) {
    let samples: Vec<_> = (0..2).map(|s| synth_scene(100 + s, 16, 16, 4, 2).unwrap()).collect();
    let items = prepare_items(&samples).unwrap();
    let gcfg = GeneratorConfig { base_channels: 2, ..GeneratorConfig::tiny(4) };
    let fcfg = DiscriminatorConfig { feat_channels: 3, ..Default::default() };
    let mut models = Models::<f64>::init(gcfg, fcfg, 5).unwrap();
    let mut rng = substream(6, "residual");
    // a nonzero last layer lets gradients reach every generator weight
    for v in models.g.get_mut("g.conv5.w").unwrap().data_mut() {
        *v = rng.random_range(-0.05..0.05);
    }
    let cfg = TrainConfig {
        lr: 1e-2,
        batch: 2,
        momentum: 0.0,
        lambda: 1.0,
        warmup_epochs: 0,
        epochs: 1,
        crop: 0,
        ..Default::default()
    };
    (items, models, cfg)
}

fn criterion_6() -> Outcome {
    let (items, models, cfg) = stop_gradient_fixture();
    let all_pos = TrainConfig { rho: 1e9, ..cfg.clone() };
    let g = generator_gradients(&items, &models, &all_pos, GeneratorTerm::Adv, true).unwrap();
    let nonzero = g.values().flat_map(|t| t.data().iter()).filter(|&&v| v != 0.0).count();
    let live = generator_gradients(&items, &models, &cfg, GeneratorTerm::Adv, true)
        .unwrap()
        .values()
        .any(|t| t.data().iter().any(|&v| v != 0.0));

    let zero = TrainConfig { lambda: 0.0, ..cfg };
    let disp: BTreeMap<_, _> = generator_gradients(&items, &models, &zero, GeneratorTerm::Disp, true).unwrap();
    let mut stepped = models.clone();
    train_step(&items, &mut stepped, &zero, 1, 1).unwrap();
    let mut worst = 0.0f64;
    for (name, grad) in &disp {
        let before = models.g.get(name).unwrap().data();
        let after = stepped.g.get(name).unwrap().data();
        for i in 0..before.len() {
            worst = worst.max((after[i] - (before[i] - zero.lr * grad.data()[i])).abs());
        }
    }
    outcome(
        nonzero == 0 && live && worst <= 1e-10,
        format!(
            "all-positive Q*: {nonzero} nonzero adversarial gradient entries (live with negatives: {live}); \
             lambda=0 update deviation {worst:.1e}"
        ),
    )
}

struct Smoke {
    first_disp: f64,
    last_disp: f64,
    wta: f64,
    metrics: ImageMetrics,
    constant_auc: f64,
    csv: String,
    elapsed: Duration,
}

fn smoke_models() -> Models<f32> {
    let gcfg = GeneratorConfig { base_channels: 8, sigma: 0.01, ..GeneratorConfig::tiny(8) };
    let fcfg = DiscriminatorConfig { feat_channels: 8, ..Default::default() };
    Models::init(gcfg, fcfg, 7).unwrap()
}

fn smoke_config() -> TrainConfig {
    TrainConfig {
        lr: 3e-4,
        f_lr_scale: 10.0,
        batch: 2,
        momentum: 0.9,
        lambda: 0.003,
        rho: 0.9,
        recon_weight: 1.0,
        warmup_epochs: 5,
        epochs: 20,
        crop: 32,
        seed: 7,
        recon_gate: false,
    }
}

fn smoke(checkpoints: &Path) -> Smoke {
    let t = Instant::now();
    let scenes: Vec<_> = (0..20).map(|i| synth_scene(1000 + i, 64, 64, 8, 3).unwrap()).collect();
    let items = prepare_items(&scenes).unwrap();
    let mut models = smoke_models();
    let log = train_loop(&items, &mut models, &smoke_config(), Some(checkpoints)).unwrap();
    let epochs = epoch_means(&log);
    let (agcp, eval) = (AgcpConfig::default(), EvalConfig::default());
    let (mut rows, mut wta, mut constant) = (Vec::new(), 0.0, 0.0);
    for (i, s) in scenes.iter().enumerate() {
        let (inf, _, m) = infer_and_evaluate(s, &models, &agcp, &eval).unwrap();
        wta += bmp(&wta_disparity(&inf.raw), &s.gt_disparity, &s.gt_valid, 1.0).unwrap();
        // a constant confidence has a flat curve at the overall bad rate
        constant += m.bmp1 / 100.0;
        rows.push((format!("{i:04}"), m));
    }
    let n = scenes.len() as f64;
    let metrics = ImageMetrics::mean(&rows.iter().map(|(_, m)| m.clone()).collect::<Vec<_>>()).unwrap();
    Smoke {
        first_disp: epochs[0].loss_disp,
        last_disp: epochs.last().unwrap().loss_disp,
        wta: wta / n,
        metrics,
        constant_auc: constant / n,
        csv: report_csv(&rows).unwrap(),
        elapsed: t.elapsed(),
    }
}

fn criterion_7(s: &Smoke) -> Outcome {
    let m = &s.metrics;
    let keep = 1.0 - SMOKE_MARGIN;
    let a = s.last_disp < s.first_disp;
    let b = m.bmp1 < keep * s.wta;
    let c = m.auc < keep * s.constant_auc && m.auc > (1.0 + SMOKE_MARGIN) * m.optimal_auc;
    let d = m.bmp1_refined <= keep * m.bmp1;
    outcome(
        a && b && c && d && s.elapsed < Duration::from_secs(15 * 60),
        format!(
            "(a) loss_disp {:.4} -> {:.4} {a}; (b) BMP@1px WTA {:.3} vs intermediate {:.3} {b}; \
             (c) AUC {:.5} in (optimal {:.5}, constant {:.5}) {c}; (d) refined {:.3} {d}; {:.1?}",
            s.first_disp, s.last_disp, s.wta, m.bmp1, m.auc, m.optimal_auc, s.constant_auc,
            m.bmp1_refined, s.elapsed
        ),
    )
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_8(first: &Smoke, dir_a: &Path, dir_b: &Path) -> Outcome {
    let second = smoke(dir_b);
    let (a, b) = (tree(dir_a), tree(dir_b));
    let files_equal = a == b;
    let csv_equal = first.csv == second.csv;
    outcome(
        files_equal && csv_equal && !a.is_empty(),
        format!("{} checkpoint files identical {files_equal}; metric CSV identical {csv_equal}", a.len()),
    )
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let (dir_a, dir_b) = (tmp.path().join("a"), tmp.path().join("b"));
    let mut results = vec![
        ("gradient suite", criterion_1()),
        ("probability invariants", criterion_2()),
        ("SGM oracle", criterion_3()),
        ("AGCP oracle", criterion_4()),
        ("metric oracles", criterion_5()),
        ("stop-gradient contract", criterion_6()),
    ];
    let first = smoke(&dir_a);
    results.push(("smoke training", criterion_7(&first)));
    results.push(("determinism", criterion_8(&first, &dir_a, &dir_b)));
    let (mut failed, mut unexpected) = (0, 0);
    for (i, (name, o)) in results.iter().enumerate() {
        let known = KNOWN_FAILURES.iter().find(|(c, _)| *c == i + 1);
        println!("criterion {} {}: {} | {}", i + 1, name, if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed += 1;
            match known {
                Some((_, why)) => println!("    known failure: {why}"),
                None => unexpected += 1,
            }
        }
    }
    println!(
        "{} of {} criteria passed, {} known failures, {unexpected} unexpected",
        results.len() - failed,
        results.len(),
        failed - unexpected
    );
    if unexpected > 0 {
        std::process::exit(1);
    }
}
