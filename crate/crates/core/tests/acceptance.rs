//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. The benchmark configuration is read from
//! `configs/base.json` at the workspace root.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use duoseg::data::Dataset;
use duoseg::losses::{cross_entropy, cross_entropy_grad, mse_grad, mse_loss, one_hot, soft_dice_grad, soft_dice_loss};
use duoseg::metrics::evaluate_mask;
use duoseg::mixing::{apply_cutmix_labels, apply_cutmix_pair, sample_mask};
use duoseg::pseudolabel::{LabelKind, PseudoLabel, SubnetId};
use duoseg::trainer::{
    checkpoint_path, resume, run_ablation, train, AblationGrid, FinalReport, TrainConfig, TrainState,
};
use duoseg::volgeom::{compose_dynamic_label, overlap_in_fixed_frame, shifted_crop_set, CropBox, ShiftDirection};
use ndarray::{Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn bench_config() -> TrainConfig {
    TrainConfig::load(&workspace_root().join("configs/base.json")).expect("configs/base.json")
}

fn geometry_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7001);
    for case in 0..200 {
        let size = [0; 3].map(|_| rng.random_range(4..=16usize));
        let dir = ShiftDirection::ALL[rng.random_range(0..4)];
        let axis = if matches!(dir, ShiftDirection::LeftX | ShiftDirection::RightX) {
            0
        } else {
            1
        };
        let sigma = rng.random_range(1..=(size[axis] / 2) as i64);
        let origin = [0; 3].map(|_| rng.random_range(0..40i64));
        let fixed_box = CropBox::new(origin, size).map_err(|e| e.to_string())?;
        let shifted = shifted_crop_set(&fixed_box, sigma).map_err(|e| e.to_string())?[&dir];
        let fixed = Array3::from_shape_simple_fn(size, || rng.random::<f64>());
        let temp = Array3::from_shape_simple_fn(size, || rng.random::<f64>());
        let map = overlap_in_fixed_frame(&fixed_box, &shifted).map_err(|e| e.to_string())?;
        let got = compose_dynamic_label(&fixed.view(), &temp.view(), &map).map_err(|e| e.to_string())?;
        let want = common::brute_force_compose(&fixed, &temp, &fixed_box, &shifted);
        ensure(got == want, || {
            format!("case {case}: size {size:?} sigma {sigma} {dir} differs")
        })?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 10.0, || format!("took {secs:.2} s"))?;
    Ok(format!("200 configurations voxel-exact in {secs:.2} s"))
}

fn sigma_zero_identity() -> Outcome {
    let cfg = TrainConfig {
        identity_shift: true,
        max_iterations: 20,
        ..bench_config()
    };
    let (data, _) = Dataset::generate(&cfg.data).map_err(|e| e.to_string())?;
    let mut state = TrainState::new(&cfg).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let out = state.step(&data.split).map_err(|e| e.to_string())?;
        worst = worst.max((out.sn1.fix - out.sn1.dyn_).abs());
    }
    ensure(worst < 1e-6, || format!("max |fix - dyn| = {worst:e}"))?;
    Ok(format!("20 iterations, max |fix - dyn| = {worst:e}"))
}

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7003);
    let probs = |rng: &mut ChaCha8Rng| {
        let mut p = Array4::from_shape_simple_fn((2, 3, 3, 3), || rng.random_range(0.05..1.0));
        let s = p.sum_axis(Axis(0));
        p /= &s.insert_axis(Axis(0));
        p
    };
    type LossFn = fn(&Array4<f64>, &Array4<f64>) -> f64;
    type GradFn = fn(&Array4<f64>, &Array4<f64>) -> Array4<f64>;
    let cases: [(&str, LossFn, GradFn); 3] = [
        (
            "ce",
            |p, t| cross_entropy(&p.view(), &t.view()).unwrap(),
            |p, t| cross_entropy_grad(&p.view(), &t.view()).unwrap(),
        ),
        (
            "dice",
            |p, t| soft_dice_loss(&p.view(), &t.view()).unwrap(),
            |p, t| soft_dice_grad(&p.view(), &t.view()).unwrap(),
        ),
        (
            "mse",
            |p, t| mse_loss(&p.view(), &t.view()).unwrap(),
            |p, t| mse_grad(&p.view(), &t.view()).unwrap(),
        ),
    ];
    let mut worst = Vec::new();
    for (name, loss, grad) in cases {
        let mut w: f64 = 0.0;
        for i in 0..50 {
            let p = probs(&mut rng);
            let t = if i % 2 == 0 {
                one_hot(&Array3::from_shape_simple_fn((3, 3, 3), || rng.random_range(0..2u8)), 2)
            } else {
                probs(&mut rng)
            };
            let num = common::numeric_grad(&p, 1e-5, |x| loss(x, &t));
            w = w.max(common::relative_error(&grad(&p, &t), &num));
        }
        ensure(w < 1e-4, || format!("{name}: worst relative error {w:e}"))?;
        worst.push(format!("{name} {w:.1e}"));
    }
    Ok(format!("50 inputs each, worst relative error: {}", worst.join(", ")))
}

fn cutmix_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7004);
    for case in 0..100 {
        let size = [0; 3].map(|_| rng.random_range(2..=16usize));
        let m = sample_mask(size, 0.5, &mut rng).map_err(|e| e.to_string())?;
        let p = Array3::from_shape_simple_fn(size, || rng.random_range(-500..500) as f32);
        let q = Array3::from_shape_simple_fn(size, || rng.random_range(-500..500) as f32);
        let (op, oq) = apply_cutmix_pair(&p.view(), &q.view(), &m).map_err(|e| e.to_string())?;
        ensure(&op + &oq == &p + &q, || format!("case {case}: image sum not conserved"))?;
        let label = |rng: &mut ChaCha8Rng| PseudoLabel {
            values: {
                let f = Array3::from_shape_simple_fn(size, || rng.random::<f64>());
                Array4::from_shape_fn((2, size[0], size[1], size[2]), |(c, i, j, k)| {
                    if c == 1 {
                        f[[i, j, k]]
                    } else {
                        1.0 - f[[i, j, k]]
                    }
                })
            },
            kind: LabelKind::Fixed,
            source: SubnetId::Sn1,
            cutmixed: false,
        };
        let (lp, lq) = (label(&mut rng), label(&mut rng));
        let (mp, mq) = apply_cutmix_labels(&lp, &lq, &m).map_err(|e| e.to_string())?;
        for ((i, j, k), &bit) in m.mask.indexed_iter() {
            let in_patch = (0..3).all(|a| {
                let v = [i, j, k][a] as i64;
                v >= m.patch.origin[a] && v < m.patch.origin[a] + m.patch.size[a] as i64
            });
            ensure(bit == u8::from(!in_patch), || {
                format!("case {case}: mask bit disagrees with patch")
            })?;
            let (src_p, src_q) = if in_patch { (&q, &p) } else { (&p, &q) };
            ensure(
                op[[i, j, k]] == src_p[[i, j, k]] && oq[[i, j, k]] == src_q[[i, j, k]],
                || format!("case {case}: image voxel ({i},{j},{k}) from the wrong source"),
            )?;
            for c in 0..2 {
                let (lp_src, lq_src) = if in_patch { (&lq, &lp) } else { (&lp, &lq) };
                ensure(
                    mp.values[[c, i, j, k]] == lp_src.values[[c, i, j, k]]
                        && mq.values[[c, i, j, k]] == lq_src.values[[c, i, j, k]],
                    || format!("case {case}: label voxel ({i},{j},{k}) from the wrong source"),
                )?;
                ensure(
                    mp.values[[c, i, j, k]] + mq.values[[c, i, j, k]]
                        == lp.values[[c, i, j, k]] + lq.values[[c, i, j, k]],
                    || format!("case {case}: label sum not conserved"),
                )?;
            }
        }
    }
    Ok("100 random pairs: conservation and locality exact for images and labels".into())
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7005);
    for case in 0..100 {
        let dims = (
            rng.random_range(1..=8),
            rng.random_range(1..=8),
            rng.random_range(1..=8),
        );
        let p = rng.random_range(0.05..0.7);
        let a = Array3::from_shape_simple_fn(dims, || rng.random_bool(p) as u8);
        let b = Array3::from_shape_simple_fn(dims, || rng.random_bool(p) as u8);
        let m = evaluate_mask("c", &a.view(), &b.view()).map_err(|e| e.to_string())?;
        let want = common::brute_metrics(&a, &b);
        ensure((m.dice, m.jaccard, m.hd95, m.asd) == want, || {
            format!(
                "case {case}: got {:?}, oracle {want:?}",
                (m.dice, m.jaccard, m.hd95, m.asd)
            )
        })?;
    }
    let mut a = Array3::<u8>::zeros((4, 4, 4));
    let mut b = a.clone();
    a[[0, 0, 0]] = 1;
    b[[0, 0, 3]] = 1;
    let m = evaluate_mask("hand", &a.view(), &b.view()).map_err(|e| e.to_string())?;
    ensure(m.hd95 == Some(3.0) && m.asd == Some(3.0), || {
        format!("hand case gave {:?}/{:?}", m.hd95, m.asd)
    })?;
    Ok("100 random pairs exact; (0,0,0) vs (0,0,3) gives hd95 = asd = 3".into())
}

fn weighted_sum_assembly(run_dir: &Path, cfg: &TrainConfig) -> Outcome {
    ensure((cfg.alpha, cfg.beta) == (0.5, 4.0), || {
        format!("weights are ({}, {})", cfg.alpha, cfg.beta)
    })?;
    let text = fs::read_to_string(run_dir.join("losses.csv")).map_err(|e| e.to_string())?;
    let mut rows = 0;
    let mut worst: f64 = 0.0;
    for line in text.lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap_or(f64::NAN)).collect();
        for base in [2, 6] {
            worst = worst.max((0.5 * v[base] + v[base + 1] + 4.0 * v[base + 2] - v[base + 3]).abs());
        }
        rows += 1;
    }
    ensure(rows == cfg.max_iterations, || format!("{rows} logged rows"))?;
    ensure(worst < 1e-9, || format!("max deviation {worst:e}"))?;
    Ok(format!("{rows} logged iterations, max deviation {worst:e}"))
}

fn checkpoint_resume(scratch: &Path) -> Outcome {
    let cfg = TrainConfig {
        max_iterations: 20,
        checkpoint_every: 10,
        eval_every: 0,
        ..bench_config()
    };
    let (data, _) = Dataset::generate(&cfg.data).map_err(|e| e.to_string())?;
    let a = scratch.join("resume_full");
    let full = train(&cfg, &data, &a).map_err(|e| e.to_string())?;
    let resumed = resume(&checkpoint_path(&a, 10), &data, &scratch.join("resume_tail")).map_err(|e| e.to_string())?;
    ensure(resumed.steps.len() == 10, || {
        format!("{} resumed steps", resumed.steps.len())
    })?;
    for (x, y) in full.steps[10..].iter().zip(&resumed.steps) {
        let bits = |r: &duoseg::losses::LossReport| [r.sup, r.fix, r.dyn_, r.total].map(f64::to_bits);
        ensure(
            x.iteration == y.iteration && bits(&x.sn1) == bits(&y.sn1) && bits(&x.sn2) == bits(&y.sn2),
            || format!("iteration {} differs after resume", y.iteration),
        )?;
    }
    Ok("iterations 11..20 bitwise identical after resuming at 10".into())
}

struct TrendResult {
    outcome: Outcome,
    full_run: PathBuf,
    base: TrainConfig,
    data: Dataset,
}

fn trend(scratch: &Path) -> TrendResult {
    let base = bench_config();
    let (data, _) = Dataset::generate(&base.data).expect("benchmark data");
    let full_run = scratch.join("trend/fix+dyn+cutmix/seed_0");
    let start = Instant::now();
    let outcome = (|| {
        ensure(
            base.data.n_volumes == 60
                && base.data.volume_size == [32, 32, 32]
                && base.data.labeled_ratio == 0.1
                && base.max_iterations == 2000
                && base.ablation_seeds.len() == 3,
            || "configs/base.json does not describe the 60 x 32^3, 10%, 2k-iteration, 3-seed benchmark".into(),
        )?;
        let all = AblationGrid::components();
        let grid = AblationGrid {
            variants: all
                .variants
                .into_iter()
                .filter(|v| ["sup-only", "fix+cutmix", "fix+dyn+cutmix"].contains(&v.name.as_str()))
                .collect(),
        };
        let table = run_ablation(&base, &grid, &scratch.join("trend"), Some(&data)).map_err(|e| e.to_string())?;
        let secs = start.elapsed().as_secs_f64();
        let dice = |n: &str| table.row(n).and_then(|r| r.dice).unwrap_or(f64::NAN);
        let (sup, fix, full) = (dice("sup-only"), dice("fix+cutmix"), dice("fix+dyn+cutmix"));
        let summary = format!(
            "median Dice sup-only {sup:.4}, fix+cutmix {fix:.4}, fix+dyn+cutmix {full:.4}; {:.1} min",
            secs / 60.0
        );
        ensure(!table.failed(), || format!("some runs failed; {summary}"))?;
        ensure(sup < fix && fix < full, || format!("ordering violated: {summary}"))?;
        ensure(full >= sup + 0.03, || format!("margin below 3 points: {summary}"))?;
        ensure(secs < 30.0 * 60.0, || format!("over 30 minutes: {summary}"))?;
        Ok(summary)
    })();
    TrendResult {
        outcome,
        full_run,
        base,
        data,
    }
}

fn determinism(t: &TrendResult, scratch: &Path) -> Outcome {
    let first_text = fs::read_to_string(t.full_run.join("report.json")).map_err(|e| e.to_string())?;
    let first: FinalReport = serde_json::from_str(&first_text).map_err(|e| e.to_string())?;
    let cfg: TrainConfig = TrainConfig::load(&t.full_run.join("config.json")).map_err(|e| e.to_string())?;
    ensure(cfg.max_iterations == t.base.max_iterations, || {
        "unexpected rerun config".into()
    })?;
    let again = train(&cfg, &t.data, &scratch.join("determinism")).map_err(|e| e.to_string())?;
    let second_text = fs::read_to_string(scratch.join("determinism/report.json")).map_err(|e| e.to_string())?;
    ensure(again.report == first && second_text == first_text, || {
        format!(
            "reports differ: Dice {} vs {}",
            first.metrics.mean.dice, again.report.metrics.mean.dice
        )
    })?;
    Ok(format!(
        "two {}-iteration runs, identical reports (Dice {:.4})",
        cfg.max_iterations, first.metrics.mean.dice
    ))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    })
}

fn main() {
    // Accept and ignore libtest-style arguments such as `--nocapture`.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let filter = args.first().cloned();
    let scratch = tempfile::tempdir().expect("scratch dir");
    let s = scratch.path();
    let wanted = |name: &str| filter.as_deref().is_none_or(|f| name.contains(f));

    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, outcome: Outcome| {
        match &outcome {
            Ok(d) => println!("PASS {name}: {d}"),
            Err(d) => println!("FAIL {name}: {d}"),
        }
        results.push((name, outcome));
    };

    if wanted("geometry_oracle") {
        report("geometry_oracle", guarded(geometry_oracle));
    }
    if wanted("sigma_zero_identity") {
        report("sigma_zero_identity", guarded(sigma_zero_identity));
    }
    if wanted("gradient_checks") {
        report("gradient_checks", guarded(gradient_checks));
    }
    if wanted("cutmix_invariants") {
        report("cutmix_invariants", guarded(cutmix_invariants));
    }
    if wanted("metrics_oracle") {
        report("metrics_oracle", guarded(metrics_oracle));
    }
    if wanted("checkpoint_resume") {
        report("checkpoint_resume", guarded(|| checkpoint_resume(s)));
    }
    let heavy = ["trend_reproduction", "determinism", "loss_assembly"];
    if heavy.iter().any(|n| wanted(n)) {
        let t = catch_unwind(AssertUnwindSafe(|| trend(s)));
        match t {
            Ok(t) => {
                if wanted("trend_reproduction") {
                    report("trend_reproduction", t.outcome.clone());
                }
                if wanted("loss_assembly") {
                    report("loss_assembly", guarded(|| weighted_sum_assembly(&t.full_run, &t.base)));
                }
                if wanted("determinism") {
                    report("determinism", guarded(|| determinism(&t, s)));
                }
            }
            Err(_) => {
                for n in heavy {
                    if wanted(n) {
                        report(n, Err("benchmark setup panicked".into()));
                    }
                }
            }
        }
    }

    let failed = results.iter().filter(|(_, o)| o.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
