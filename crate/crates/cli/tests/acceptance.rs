//! Acceptance suite. Every criterion prints a single PASS/FAIL line; the
//! process exits non-zero if any criterion fails.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sgnet_cli::commands::{
    cmd_compare, cmd_evaluate, cmd_paradox, cmd_params, cmd_phantom, cmd_train, load_subject, ParadoxSource, PhantomArgs,
};
use sgnet_cli::config::RunConfig;
use sgnet_core::data::phantom::{generate_phantom, PhantomSpec};
use sgnet_core::data::preprocess::preprocess;
use sgnet_core::data::window::plan_windows;
use sgnet_core::data::{blend, Geometry, Manifest, MaskVolume, Orientation, Split, Volume};
use sgnet_core::gradcheck::{grad_check, model_grad_check, relative_error, Primitive};
use sgnet_core::metrics::{confusion, edt, hausdorff, hd95, overlap_metrics, surface_voxels};
use sgnet_core::models::{ArchKind, ArchitectureSpec, Model, SgmVariant};
use sgnet_core::objective::{bce_loss_with_grad, dice_loss_with_grad, hybrid_loss_with_grad};
use sgnet_core::stats::{paired_t_test, summarize, t_two_sided_p};
use sgnet_core::trainer::{mean_dice, sliding_window_logits};
use sgnet_core::{Result, Tensor};

struct Outcome {
    ok: bool,
    detail: String,
}

fn outcome(ok: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome { ok, detail: detail.into() })
}

// ---------------------------------------------------------------- 1

fn shape(n: usize, c: usize, d: usize) -> Vec<usize> {
    vec![n, c, d, d, d]
}

fn loss_fd_error(f: fn(&Tensor, &Tensor) -> Result<(f64, Tensor)>, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = Tensor::randn(&[2, 1, 3, 3, 3], 1.5, &mut rng);
    let bits: Vec<f64> = (0..logits.len()).map(|_| rng.gen_bool(0.3) as u8 as f64).collect();
    let target = Tensor::from_vec(logits.shape(), bits)?;
    let (_, grad) = f(&logits, &target)?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for j in 0..logits.len() {
        let mut up = logits.clone();
        up.data_mut()[j] += h;
        let mut down = logits.clone();
        down.data_mut()[j] -= h;
        let numeric = (f(&up, &target)?.0 - f(&down, &target)?.0) / (2.0 * h);
        worst = worst.max(relative_error(grad.data()[j], numeric));
    }
    Ok(worst)
}

fn hybrid_total(l: &Tensor, t: &Tensor) -> Result<(f64, Tensor)> {
    hybrid_loss_with_grad(l, t).map(|(v, g)| (v.total, g))
}

fn criterion_gradients() -> Result<Outcome> {
    const TOL: f64 = 1e-4;
    let cases: Vec<(Primitive, Vec<Vec<usize>>)> = vec![
        (Primitive::Conv3d { stride: 1, padding: 1 }, vec![shape(2, 2, 4), shape(3, 2, 3)]),
        (Primitive::Conv3d { stride: 2, padding: 1 }, vec![shape(1, 2, 5), shape(2, 2, 3)]),
        (Primitive::Conv3d { stride: 1, padding: 0 }, vec![shape(2, 3, 3), shape(2, 3, 1)]),
        (Primitive::ConvTranspose3d, vec![shape(2, 3, 2), vec![3, 2, 2, 2, 2]]),
        (Primitive::MaxPool3d, vec![shape(2, 2, 4)]),
        (Primitive::BatchNormTrain, vec![shape(3, 2, 3)]),
        (Primitive::BatchNormEval, vec![shape(2, 3, 3)]),
        (Primitive::Relu, vec![shape(2, 2, 3)]),
        (Primitive::Sigmoid, vec![shape(2, 2, 3)]),
        (Primitive::GlobalAvgPool, vec![shape(2, 3, 3)]),
        (Primitive::ConcatChannels, vec![shape(2, 2, 3), shape(2, 3, 3)]),
        (Primitive::SplitGroups(3), vec![shape(2, 6, 2)]),
        (Primitive::Mul, vec![shape(2, 3, 3), shape(2, 3, 3)]),
        (Primitive::Mul, vec![shape(2, 3, 3), vec![2, 3]]),
        (Primitive::Mul, vec![shape(2, 3, 3), shape(2, 1, 3)]),
        (Primitive::Add, vec![shape(2, 3, 3), shape(2, 3, 3)]),
        (Primitive::Add, vec![shape(2, 3, 3), vec![2, 3]]),
        (Primitive::Dense, vec![vec![3, 4], vec![5, 4]]),
        (Primitive::StandardizeSpatial, vec![shape(2, 2, 3)]),
        (Primitive::ChannelAffine, vec![shape(2, 3, 3)]),
        (Primitive::SumChannels, vec![shape(2, 3, 3)]),
    ];
    let mut worst = (0.0f64, String::new());
    let mut track = |err: f64, what: String| {
        if err > worst.0 {
            worst = (err, what);
        }
    };
    for (i, (p, shapes)) in cases.into_iter().enumerate() {
        track(grad_check(p, &shapes, 100 + i as u64)?, format!("{p:?}"));
    }
    track(loss_fd_error(dice_loss_with_grad, 1)?, "dice loss".into());
    track(loss_fd_error(bce_loss_with_grad, 2)?, "bce loss".into());
    track(loss_fd_error(hybrid_total, 3)?, "hybrid loss".into());

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::randn(&[2, 2, 4, 4, 4], 1.0, &mut rng);
    let bits: Vec<f64> = (0..128).map(|_| rng.gen_bool(0.25) as u8 as f64).collect();
    let t = Tensor::from_vec(&[2, 1, 4, 4, 4], bits)?;
    for variant in [SgmVariant::Literal, SgmVariant::Spatial] {
        let mut spec = ArchitectureSpec::with_widths(ArchKind::SgNet, &[4, 8]);
        spec.sgm_groups = 2;
        spec.sgm_variant = variant;
        let model = Model::build(&spec, 11)?;
        track(model_grad_check(&model, &x, &t)?, format!("tiny sgnet ({})", variant.as_str()));
    }
    outcome(worst.0 < TOL, format!("max rel err {:.2e} ({}) < {TOL:e}", worst.0, worst.1))
}

// ---------------------------------------------------------------- 2

fn random_mask(rng: &mut ChaCha8Rng, dims: [usize; 3], spacing: [f64; 3], density: f64) -> MaskVolume {
    let g = Geometry::new(dims, spacing, Orientation::RAS).expect("geometry");
    let data = (0..g.voxels()).map(|_| rng.gen_bool(density) as u8).collect();
    MaskVolume::new(g, data).expect("mask")
}

fn mm(a: [usize; 3], b: [usize; 3], s: [f64; 3]) -> f64 {
    (0..3).map(|k| ((a[k] as f64 - b[k] as f64) * s[k]).powi(2)).sum::<f64>().sqrt()
}

fn brute_directed(from: &[[usize; 3]], to: &[[usize; 3]], s: [f64; 3]) -> Vec<f64> {
    from.iter()
        .map(|&p| to.iter().map(|&q| mm(p, q, s)).fold(f64::INFINITY, f64::min))
        .collect()
}

fn linear_percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn criterion_metric_oracles() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut max_dist_err: f64 = 0.0;
    let mut count_mismatch = 0;
    let mut empty_pairs = 0;
    for i in 0..200 {
        let dims = [rng.gen_range(1..=16), rng.gen_range(1..=16), rng.gen_range(1..=16)];
        let spacing = [rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0)];
        // Some masks are empty, and every 40th pair is empty on both sides,
        // to cover the zero-denominator conventions.
        let mut density = || if i % 40 == 0 || rng.gen_bool(0.1) { 0.0 } else { rng.gen_range(0.01..0.4) };
        let (da, db) = (density(), density());
        let a = random_mask(&mut rng, dims, spacing, da);
        let mut b = random_mask(&mut rng, dims, spacing, db);
        b.geometry = a.geometry;

        let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for (&p, &g) in a.data.iter().zip(&b.data) {
            match (p != 0, g != 0) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        let c = confusion(&a, &b)?;
        let o = overlap_metrics(&c);
        let both_empty = tp + fp + fn_ == 0;
        let ratio = |n: u64, d: u64| match (both_empty, d) {
            (true, _) => 1.0,
            (false, 0) => 0.0,
            _ => n as f64 / d as f64,
        };
        if (c.tp, c.fp, c.fn_, c.tn) != (tp, fp, fn_, tn)
            || o.dice != ratio(2 * tp, 2 * tp + fp + fn_)
            || o.precision != ratio(tp, tp + fp)
            || o.recall != ratio(tp, tp + fn_)
        {
            count_mismatch += 1;
        }

        if a.count() == 0 || b.count() == 0 {
            empty_pairs += 1;
            continue;
        }
        // Full distance transform against pairwise search.
        let on: Vec<[usize; 3]> = (0..a.geometry.voxels())
            .filter(|&i| a.data[i] != 0)
            .map(|i| a.geometry.coords(i))
            .collect();
        let field = edt(&a, spacing)?;
        for i in 0..a.geometry.voxels() {
            let p = a.geometry.coords(i);
            let want = on.iter().map(|&q| mm(p, q, spacing)).fold(f64::INFINITY, f64::min);
            max_dist_err = max_dist_err.max((field[i] - want).abs());
        }
        // Surface distances and their percentiles.
        let sa = surface_voxels(&a);
        let sb = surface_voxels(&b);
        let mut all = brute_directed(&sa, &sb, spacing);
        all.extend(brute_directed(&sb, &sa, spacing));
        all.sort_by(f64::total_cmp);
        max_dist_err = max_dist_err
            .max((hd95(&a, &b, spacing)?.value - linear_percentile(&all, 95.0)).abs())
            .max((hausdorff(&a, &b, spacing)?.value - all[all.len() - 1]).abs());
    }
    outcome(
        count_mismatch == 0 && max_dist_err <= 1e-9,
        format!(
            "200 pairs ({empty_pairs} with an empty mask): {count_mismatch} count mismatches, \
             max distance error {max_dist_err:.1e} mm (tol 1e-9)"
        ),
    )
}

// ---------------------------------------------------------------- 3

fn criterion_hd95_points() -> Result<Outcome> {
    let g = Geometry::new([8, 8, 8], [1.0; 3], Orientation::RAS)?;
    let mut a = MaskVolume::empty(g);
    for z in 2..6 {
        for y in 1..5 {
            a.set(z, y, 3, true);
        }
    }
    let same = hd95(&a, &a.clone(), [1.0; 3])?.value;
    let mut p = MaskVolume::empty(g);
    p.set(4, 4, 1, true);
    let mut q = MaskVolume::empty(g);
    q.set(4, 4, 4, true);
    let apart = hd95(&p, &q, [1.0; 3])?.value;
    outcome(
        same == 0.0 && apart == 3.0,
        format!("identical masks {same}, single voxels 3 mm apart {apart}"),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_stats_anchor() -> Result<Outcome> {
    let (mean, sd, n) = (0.5578, 0.2413, 19);
    let raw: Vec<f64> = (0..n).map(|i| ((i * 7 % 19) as f64).sqrt()).collect();
    let rm = raw.iter().sum::<f64>() / n as f64;
    let rsd = (raw.iter().map(|v| (v - rm).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let col: Vec<f64> = raw.iter().map(|v| mean + sd * (v - rm) / rsd).collect();
    let s = summarize(&col)?;
    let p = t_two_sided_p(2.1009, 18.0);
    // The same p through the paired test: differences with t = 2.1009 exactly.
    let d: Vec<f64> = raw.iter().map(|v| 2.1009 / (n as f64).sqrt() + (v - rm) / rsd).collect();
    let zeros = vec![0.0; n];
    let tt = paired_t_test(&d, &zeros)?;
    let ci_ok = (s.ci_low - 0.45).abs() <= 0.01 && (s.ci_high - 0.67).abs() <= 0.01;
    let p_ok = (p - 0.050).abs() <= 0.0005 && (tt.p - 0.050).abs() <= 0.0005 && tt.df == 18;
    outcome(
        ci_ok && p_ok,
        format!(
            "CI [{:.4}, {:.4}] vs [0.45, 0.67] (tol 0.01); p(|t|=2.1009, df=18) = {p:.5}, paired t = {:.4} p = {:.5} (0.050 ± 0.0005)",
            s.ci_low, s.ci_high, tt.t, tt.p
        ),
    )
}

// ---------------------------------------------------------------- 5

fn criterion_param_ordering() -> Result<Outcome> {
    let rows = cmd_params(&ArchKind::ALL, None)?;
    let count = |k: ArchKind| rows.iter().find(|r| r.arch == k).map(|r| r.count.total).unwrap_or(0);
    let (s, u, r, a) = (
        count(ArchKind::SgNet),
        count(ArchKind::UNet),
        count(ArchKind::ResUNet),
        count(ArchKind::AttUNet),
    );
    outcome(
        0 < s && s < u && u < r && r < a,
        format!("sgnet {s} < unet {u} < resunet {r} < attunet {a}"),
    )
}

// ---------------------------------------------------------------- 6

fn criterion_pipeline_identity() -> Result<Outcome> {
    let g = Geometry::new([60, 51, 22], [1.0, 1.0, 2.0], Orientation::new("LPS")?)?;
    let data = (0..g.voxels()).map(|i| (i as f64 * 0.37).sin() * 100.0 + (i % 13) as f64).collect();
    let raw = Volume::new(g, 1, data)?;
    let v = preprocess(&raw)?;
    // Full-size windows at 25% overlap, both through the predictor helper and
    // through the bare plan / extract / blend path.
    let patch = [32, 32, 16];
    let via_predictor = sliding_window_logits(&v, patch, 0.25, |x| Ok(x.clone()))?;
    let plan = plan_windows(v.dims(), patch, 0.25)?;
    let blocks: Vec<Vec<f64>> = plan.origins.iter().map(|&o| plan.extract(&v.data, 1, o)).collect();
    let via_plan = blend(&blocks, &plan)?;
    let err = v
        .data
        .iter()
        .zip(via_predictor.iter().zip(&via_plan))
        .map(|(a, (b, c))| (a - b).abs().max((a - c).abs()))
        .fold(0.0, f64::max);
    outcome(
        err <= 1e-12 && plan.len() > 1,
        format!("{} windows over {:?}, max abs error {err:.1e} (tol 1e-12)", plan.len(), v.dims()),
    )
}

// ---------------------------------------------------------------- 7

fn criterion_phantom_contract() -> Result<Outcome> {
    let mut fractions = Vec::new();
    let mut deterministic = true;
    for seed in 0..8 {
        let spec = PhantomSpec::with_dims([64; 3], seed);
        let (v1, m1) = generate_phantom(&spec)?;
        let (v2, m2) = generate_phantom(&spec)?;
        let bytes = |v: &Volume| v.data.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>();
        deterministic &= bytes(&v1) == bytes(&v2) && m1.data == m2.data;
        fractions.push(m1.fraction());
    }
    let lo = fractions.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = fractions.iter().cloned().fold(0.0, f64::max);
    outcome(
        deterministic && lo >= 0.005 && hi <= 0.02,
        format!("8 seeds: fraction in [{lo:.4}, {hi:.4}] ⊂ [0.005, 0.02], byte-deterministic: {deterministic}"),
    )
}

// ---------------------------------------------------------------- 8 and 9

fn smoke_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    for kv in [
        "arch=sgnet",
        "encoder_widths=8,16,32",
        "width_multiplier=1",
        "sgm_groups=4",
        "lr=0.001",
        "batch_size=2",
        "max_epochs=30",
        "patience=4",
        "seed=1",
        "patch=48",
        "steps_per_epoch=4",
        "inference_patch=48",
    ] {
        cfg.apply_override(kv).expect("smoke config");
    }
    cfg
}

fn criterion_training_smoke(dir: &Path) -> Result<Outcome> {
    let start = Instant::now();
    let manifest = cmd_phantom(&PhantomArgs {
        out: dir.join("data"),
        n_train: 16,
        n_val: 4,
        n_test: 4,
        dim: 48,
        seed: 8,
    })?;
    let cfg = smoke_config();
    let m = Manifest::load(&manifest)?;
    let val = m.split(Split::Val).map(|s| load_subject(s, &cfg)).collect::<Result<Vec<_>>>()?;
    let mut spec = cfg.arch_spec();
    spec.in_channels = 2;
    let untrained = mean_dice(&Model::build(&spec, cfg.train.seed)?, &val, cfg.train.inference_patch, cfg.train.overlap)?;
    let run = cmd_train(&cfg, &manifest, &dir.join("run"), false)?;
    let best = run.log.best_val_dice;
    outcome(
        best >= 0.5 && best - untrained >= 0.3,
        format!(
            "val Dice {best:.4} at epoch {} of {} (untrained {untrained:.4}); {:.0} s",
            run.log.best_epoch,
            run.log.epochs.len(),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn criterion_paradox(dir: &Path) -> Result<Outcome> {
    let cfg = smoke_config();
    let manifest = dir.join("data").join("manifest.txt");
    let ckpt = dir.join("run").join("model.ckpt");
    let mut lines = Vec::new();
    let mut ok = true;
    let mut sources = vec![("gt", ParadoxSource::OracleGroundTruth)];
    if ckpt.exists() {
        sources.push(("model", ParadoxSource::Checkpoint(ckpt)));
    } else {
        ok = false;
        lines.push("no trained checkpoint".to_string());
    }
    for (name, source) in sources {
        let r = cmd_paradox(&source, &manifest, Split::Test, 3, &dir.join(format!("paradox_{name}.json")), &cfg)?;
        let good = r
            .subjects
            .iter()
            .filter(|s| s.delta_recall >= 0.0 && s.delta_precision < 0.0 && s.delta_hd95 > 0.0)
            .count();
        ok &= good == r.subjects.len() && !r.subjects.is_empty();
        lines.push(format!(
            "{name}: {good}/{} subjects (mean Δrecall {:+.3}, Δprecision {:+.3}, Δhd95 {:+.2} mm)",
            r.subjects.len(),
            r.mean_delta_recall,
            r.mean_delta_precision,
            r.mean_delta_hd95
        ));
    }
    outcome(ok, lines.join("; "))
}

// ---------------------------------------------------------------- 10

fn tiny_pipeline(dir: &Path) -> Result<()> {
    let manifest = cmd_phantom(&PhantomArgs {
        out: dir.join("data"),
        n_train: 2,
        n_val: 1,
        n_test: 3,
        dim: 16,
        seed: 10,
    })?;
    let mut reports = Vec::new();
    for arch in ["sgnet", "unet"] {
        let mut cfg = RunConfig::default();
        for kv in [
            &format!("arch={arch}") as &str,
            "encoder_widths=4,8",
            "width_multiplier=1",
            "sgm_groups=2",
            "batch_size=1",
            "max_epochs=2",
            "patience=1",
            "steps_per_epoch=2",
            "patch=16",
            "inference_patch=16",
        ] {
            cfg.apply_override(kv)?;
        }
        let run = cmd_train(&cfg, &manifest, &dir.join(arch), false)?;
        let report = dir.join(format!("{arch}_eval.json"));
        cmd_evaluate(&run.checkpoint, &manifest, Split::Test, &report, &cfg)?;
        reports.push(report);
    }
    cmd_compare(&reports, "sgnet", &dir.join("comparison.json"))?;
    Ok(())
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).expect("read dir") {
            let p = e.expect("entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).expect("prefix").display().to_string();
                out.push((rel, fs::read(&p).expect("read file")));
            }
        }
    }
    out.sort();
    out
}

fn criterion_reproducibility(dir: &Path) -> Result<Outcome> {
    let (a, b) = (dir.join("a"), dir.join("b"));
    tiny_pipeline(&a)?;
    tiny_pipeline(&b)?;
    let (ta, tb) = (tree(&a), tree(&b));
    let differing: Vec<&str> = ta
        .iter()
        .zip(&tb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let reports = ta.iter().filter(|(n, _)| n.ends_with(".json") || n.ends_with(".txt")).count();
    outcome(
        ta.len() == tb.len() && differing.is_empty() && reports > 0,
        format!("{} files ({reports} reports/logs) compared, differing: {differing:?}", ta.len()),
    )
}

// ----------------------------------------------------------------

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let smoke = work.path().join("smoke");
    let repro = work.path().join("repro");
    let criteria: Vec<(&str, Box<dyn Fn() -> Result<Outcome>>)> = vec![
        ("gradient suite", Box::new(criterion_gradients)),
        ("metric oracles", Box::new(criterion_metric_oracles)),
        ("hd95 point cases", Box::new(criterion_hd95_points)),
        ("statistics anchor", Box::new(criterion_stats_anchor)),
        ("parameter ordering", Box::new(criterion_param_ordering)),
        ("pipeline identity", Box::new(criterion_pipeline_identity)),
        ("phantom contract", Box::new(criterion_phantom_contract)),
        ("training smoke", Box::new(|| criterion_training_smoke(&smoke))),
        ("over-segmentation paradox", Box::new(|| criterion_paradox(&smoke))),
        ("end-to-end reproducibility", Box::new(|| criterion_reproducibility(&repro))),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let (ok, detail) = match run() {
            Ok(o) => (o.ok, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += !ok as usize;
        println!(
            "criterion {:>2} {:<28} {}  {detail} [{:.1} s]",
            i + 1,
            name,
            if ok { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
