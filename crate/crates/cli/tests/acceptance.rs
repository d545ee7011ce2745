//! Acceptance gate: runs each criterion in turn and prints one PASS/FAIL line
//! per criterion. Exits non-zero if any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::{enumerated_p, naive_posterior, random_instance, u_auc};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use normative_gp::gp::{lml_with_gradient, log_marginal_likelihood, TrainedModel};
use normative_gp::io::{load_model, load_scores, save_model, Cohort};
use normative_gp::kernels::{gram_matrix, kernel_value, Covariance};
use normative_gp::stats::{evaluate, fit_fixed_effects, ly_sweep, rank_sum_test, roc_auc, FixedEffectsOptions, RankSumMethod, METRICS};
use normative_gp::synth::{generate_cohort, DeviationMode, SynthConfig};
use normative_gp::{AgeKernelParams, FitConfig, JitterLadder, KernelForm, KernelParams, Model, ModelConfig, TargetTransform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    check(elapsed.as_secs_f64() < limit_s, format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64()))
}

fn form(product: bool) -> KernelForm {
    if product {
        KernelForm::Product
    } else {
        KernelForm::Sum
    }
}

fn gp_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let inst = random_instance(&mut rng, 12, 6, 4, case % 2 == 1);
        let model = TrainedModel::from_params(
            inst.x.clone(),
            inst.ages.clone(),
            KernelParams::new(inst.ls.clone(), inst.noise).unwrap(),
            form(inst.product),
            TargetTransform::identity(),
            JitterLadder::default(),
        )
        .map_err(|e| format!("case {case}: {e}"))?;
        let pred = model.predict(&inst.xs, true).unwrap();
        let ap = AgeKernelParams::new(inst.ly, inst.sy2).unwrap();
        let w = model.weighted_posterior_cov(&inst.xs, &inst.test_ages, &ap, true).unwrap();
        let o = naive_posterior(&inst);
        let err = (&pred.y_hat - &o.mean)
            .amax()
            .max((pred.full_cov.unwrap() - &o.cov).amax())
            .max((w.full_cov.unwrap() - &o.cov_w).amax());
        worst = worst.max(err);
    }
    check(worst <= 1e-8, format!("max abs error {worst:.2e}"))?;
    within(start.elapsed(), 10.0)?;
    Ok(format!("200 instances, max abs error {worst:.2e}, {:.2}s", start.elapsed().as_secs_f64()))
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1002);
    let ladder = JitterLadder::default();
    let h = 1e-5;
    for case in 0..100 {
        let product = case % 2 == 0;
        let inst = random_instance(&mut rng, 12, 1, 4, product);
        let y = DVector::from_vec(inst.ages.iter().map(|a| (a - 55.0) / 20.0).collect());
        let theta: Vec<f64> = inst.ls.iter().map(|l| l.ln()).chain([inst.noise.ln()]).collect();
        let lml_at = |t: &[f64]| {
            let k = t.len() - 1;
            let p = KernelParams::new(t[..k].iter().map(|v| v.exp()).collect(), t[k].exp()).unwrap();
            log_marginal_likelihood(&p, form(product), &inst.x, &y, &ladder).unwrap()
        };
        let p = KernelParams::new(inst.ls.clone(), inst.noise).unwrap();
        let (_, grad) = lml_with_gradient(&p, form(product), &inst.x, &y, &ladder).unwrap();
        for i in 0..theta.len() {
            let mut up = theta.clone();
            let mut down = theta.clone();
            up[i] += h;
            down[i] -= h;
            let fd = (lml_at(&up) - lml_at(&down)) / (2.0 * h);
            let err = (grad[i] - fd).abs();
            check(err <= 1e-7 || err <= 1e-4 * fd.abs(), format!("case {case} component {i}: analytic {} vs fd {fd}", grad[i]))?;
        }
    }
    within(start.elapsed(), 30.0)?;
    Ok(format!("100 instances, {:.2}s", start.elapsed().as_secs_f64()))
}

fn normgp(args: &[&str], dir: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_normgp"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    check(
        out.status.success(),
        format!("normgp {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)),
    )
}

fn unweighted_equivalence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    normgp(&["synth", "--n-healthy", "150", "--seed", "31", "--out", "train.csv"], d)?;
    let mut worst = 0.0f64;
    let mut n = 0;
    for mode in ["orthogonal", "age_conditional"] {
        normgp(&["synth", "--mode", mode, "--n-healthy", "60", "--n-diseased", "60", "--seed", "32", "--out", "test.csv"], d)?;
        if n == 0 {
            normgp(&["fit", "--train", "train.csv", "--out", "m.model", "--restarts", "2", "--folds", "0"], d)?;
        }
        normgp(&["score", "--model", "m.model", "--test", "test.csv", "--age-length-scale", "inf", "--age-noise", "0", "--out", "s.csv"], d)?;
        let t = load_scores(d.join("s.csv")).map_err(|e| e.to_string())?;
        for (a, b) in t.cov.iter().zip(&t.cov_w) {
            worst = worst.max((a - b).abs());
        }
        n += t.cov.len();
    }
    check(worst <= 1e-12, format!("max |cov_w - cov| = {worst:.2e}"))?;
    Ok(format!("{n} subjects via CLI, max |cov_w - cov| = {worst:.2e}"))
}

fn kernel_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1004);
    let mut worst_ratio = f64::INFINITY;
    let mut worst_shift = 0.0f64;
    for case in 0..100 {
        let n = rng.random_range(1..=30);
        let k = rng.random_range(1..=4);
        let f = form(case % 2 == 1);
        // points on a 1/8 grid and shifts on a 1/4 grid keep differences exact
        let x = DMatrix::from_fn(n, k, |_, _| f64::from(rng.random_range(-24i32..24)) / 8.0);
        let ages: Vec<f64> = (0..n).map(|_| rng.random_range(20.0..90.0)).collect();
        let ls: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..4.0)).collect();
        let p = KernelParams::new(ls, rng.random_range(0.0..0.5)).unwrap();
        let ap = AgeKernelParams::new(rng.random_range(0.5..100.0), rng.random_range(0.0..0.5)).unwrap();
        let plain = gram_matrix(&Covariance::new(p.clone(), f), &x, None).unwrap();
        let w = gram_matrix(&Covariance::weighted(p.clone(), f, ap), &x, Some(&ages)).unwrap();
        for g in [plain, w] {
            check(g == g.transpose(), format!("case {case}: not exactly symmetric"))?;
            let eig = SymmetricEigen::new(g).eigenvalues;
            let (lo, hi) = (eig.min(), eig.max());
            check(lo >= -1e-8 * hi, format!("case {case}: min eigenvalue {lo:.3e}, max {hi:.3e}"))?;
            worst_ratio = worst_ratio.min(lo / hi);
        }
        let shift = f64::from(rng.random_range(-40i32..40)) / 4.0;
        for i in 0..n.min(5) {
            for j in 0..n.min(5) {
                let a: Vec<f64> = x.row(i).iter().copied().collect();
                let b: Vec<f64> = x.row(j).iter().copied().collect();
                let a2: Vec<f64> = a.iter().map(|v| v + shift).collect();
                let b2: Vec<f64> = b.iter().map(|v| v + shift).collect();
                let d = (kernel_value(&a, &b, &p, false, f).unwrap() - kernel_value(&a2, &b2, &p, false, f).unwrap()).abs();
                worst_shift = worst_shift.max(d);
            }
        }
    }
    check(worst_shift <= 1e-15, format!("shift changed kernel by {worst_shift:.2e}"))?;
    Ok(format!("100 Gram pairs, min eig/max eig {worst_ratio:.2e}, max shift error {worst_shift:.2e}"))
}

fn synth_test(mode: DeviationMode) -> Cohort {
    generate_cohort(&SynthConfig {
        n_healthy: 200,
        n_diseased: 200,
        deviation_mode: mode,
        deviation_magnitude: 4.0,
        seed: 2,
        ..SynthConfig::default()
    })
    .unwrap()
    .cohort
}

fn trained_model() -> Model {
    let train = generate_cohort(&SynthConfig {
        n_healthy: 500,
        seed: 1,
        ..SynthConfig::default()
    })
    .unwrap()
    .cohort;
    let cfg = ModelConfig {
        fit: FitConfig {
            restarts: 3,
            ..FitConfig::default()
        },
        ..ModelConfig::default()
    };
    Model::train(&train, &cfg).unwrap()
}

fn qualitative(model: &Model, fit_time: Duration) -> Outcome {
    let start = Instant::now();
    let aucs = |mode| {
        let test = synth_test(mode);
        let s = model.score(&test, &AgeKernelParams::unweighted()).unwrap();
        let rep = evaluate(&s.to_table(&test).unwrap(), "HC", "DX", &METRICS, false).unwrap();
        let eps = rep.metric("epsilon").unwrap();
        (test, eps.auc, rep.metric("cov").unwrap().auc, eps.mean_positive)
    };
    let (_, eps_o, cov_o, _) = aucs(DeviationMode::Orthogonal);
    let (_, eps_a, _, mean_eps_dx) = aucs(DeviationMode::AcceleratedAging);
    let (cohort, _, cov_c, _) = aucs(DeviationMode::AgeConditional);
    let sweep = ly_sweep(model, &cohort, &[1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0], 0.0, "HC", "DX").unwrap();
    let best = sweep.best();
    let detail = format!(
        "orthogonal AUC(cov) {cov_o:.3} AUC(eps) {eps_o:.3}; accelerated AUC(eps) {eps_a:.3} mean eps(DX) {mean_eps_dx:.2}; \
         age_conditional AUC(cov_w, l_y={}) {:.3} vs AUC(cov) {cov_c:.3}",
        best.age_length_scale, best.auc
    );
    check(cov_o >= 0.80, format!("orthogonal AUC(cov) below 0.80: {detail}"))?;
    check(cov_o - eps_o >= 0.10, format!("orthogonal cov margin below 0.10: {detail}"))?;
    check(eps_a >= 0.85 && mean_eps_dx > 0.0, format!("accelerated aging not detected: {detail}"))?;
    check(best.auc - cov_c >= 0.05, format!("finite l_y gain below 0.05: {detail}"))?;
    let total = fit_time + start.elapsed();
    within(total, 120.0)?;
    Ok(format!("{detail}; {:.1}s", total.as_secs_f64()))
}

fn statistics_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1006);
    let mut worst_p = 0.0f64;
    for _ in 0..50 {
        let n1 = rng.random_range(1..=8);
        let n2 = rng.random_range(1..=12);
        let shift = rng.random_range(0.0..1.5);
        let a: Vec<f64> = (0..n1).map(|_| rng.random::<f64>() + shift).collect();
        let b: Vec<f64> = (0..n2).map(|_| rng.random::<f64>()).collect();
        for (g1, g2) in [(&a, &b), (&b, &a)] {
            let r = rank_sum_test(g1, g2).unwrap();
            check(r.method == RankSumMethod::Exact, format!("({}, {}) did not use the exact method", g1.len(), g2.len()))?;
            worst_p = worst_p.max((r.p_value - enumerated_p(g1, g2)).abs());
        }
    }
    check(worst_p <= 1e-12, format!("exact vs enumeration {worst_p:.2e}"))?;

    let mut worst_auc = 0.0f64;
    for case in 0..100 {
        let n = rng.random_range(2..60);
        let levels = if case % 3 == 0 { 4 } else { 1000 };
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = labels
            .iter()
            .map(|&l| rng.random_range(0..levels) as f64 + if l { 0.3 * levels as f64 } else { 0.0 })
            .collect();
        worst_auc = worst_auc.max((roc_auc(&scores, &labels, true).unwrap().auc - u_auc(&scores, &labels)).abs());
    }
    check(worst_auc <= 1e-12, format!("AUC vs U {worst_auc:.2e}"))?;

    let mut worst_ols = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(20..200);
        let age: Vec<f64> = (0..n).map(|_| rng.random_range(55.0..90.0)).collect();
        let sex: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..2u8))).collect();
        let dx: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..2u8))).collect();
        let vol: Vec<f64> = (0..n).map(|i| 4.0 - 0.01 * age[i] + 0.2 * sex[i] + rng.random_range(-0.3..0.3)).collect();
        let fit = fit_fixed_effects(&vol, &age, &sex, &dx, &FixedEffectsOptions::default()).unwrap();
        let x = fit.design.clone().unwrap();
        let y = fit.response.clone().unwrap();
        let beta = (x.transpose() * &x).try_inverse().unwrap() * x.transpose() * &y;
        for (c, b) in fit.coefficients().iter().zip(beta.iter()) {
            worst_ols = worst_ols.max((c.estimate - b).abs());
        }
    }
    check(worst_ols <= 1e-8, format!("OLS vs normal equations {worst_ols:.2e}"))?;

    let mut rejections = 0;
    for _ in 0..200 {
        let n = 100;
        let age: Vec<f64> = (0..n).map(|_| rng.random_range(55.0..90.0)).collect();
        let sex: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..2u8))).collect();
        let dx: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..2u8))).collect();
        let noise = rand_distr::Normal::new(0.0, 0.1).unwrap();
        let vol: Vec<f64> = (0..n).map(|i| 3.0 - 0.02 * age[i] + 0.1 * sex[i] + rng.sample(noise)).collect();
        let fit = fit_fixed_effects(&vol, &age, &sex, &dx, &FixedEffectsOptions::default()).unwrap();
        if fit.dx.p_value < 0.05 {
            rejections += 1;
        }
    }
    let rate = f64::from(rejections) / 200.0;
    check((0.01..=0.10).contains(&rate), format!("null dx rejection rate {rate}"))?;
    Ok(format!(
        "rank-sum {worst_p:.1e}, AUC-U {worst_auc:.1e}, OLS {worst_ols:.1e}, null dx rejection rate {rate:.3}"
    ))
}

fn fixed_effects_recovery() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1007);
    let n = 500;
    let noise = rand_distr::Normal::new(0.0, 0.05).unwrap();
    let age: Vec<f64> = (0..n).map(|_| rng.random_range(55.0..90.0)).collect();
    let sex: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..2u8))).collect();
    let dx: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..2u8))).collect();
    // coefficients are planted on the z-scored age the model uses
    let mean = age.iter().sum::<f64>() / n as f64;
    let sd = (age.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let vol: Vec<f64> = (0..n)
        .map(|i| 1.0 - 0.30 * (age[i] - mean) / sd + 0.05 * sex[i] - 0.53 * dx[i] + rng.sample(noise))
        .collect();
    let opts = FixedEffectsOptions {
        normalize_age: true,
        normalize_volume: false,
    };
    let fit = fit_fixed_effects(&vol, &age, &sex, &dx, &opts).map_err(|e| e.to_string())?;
    let detail = format!("age {:.4} (planted -0.30), dx {:.4} (planted -0.53)", fit.age.estimate, fit.dx.estimate);
    check((fit.age.estimate + 0.30).abs() <= 0.05 && (fit.dx.estimate + 0.53).abs() <= 0.05, detail.clone())?;
    Ok(detail)
}

fn determinism(model: &Model) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    normgp(&["synth", "--n-healthy", "120", "--seed", "41", "--out", "train.csv"], d)?;
    normgp(&["synth", "--mode", "orthogonal", "--n-healthy", "40", "--n-diseased", "40", "--seed", "42", "--out", "test.csv"], d)?;
    for run in ["a", "b"] {
        let m = format!("{run}.model");
        normgp(&["fit", "--train", "train.csv", "--out", &m, "--restarts", "3", "--seed", "7", "--folds", "0"], d)?;
        normgp(&["score", "--model", &m, "--test", "test.csv", "--age-length-scale", "10", "--out", &format!("{run}.csv")], d)?;
    }
    let read = |f: &str| std::fs::read(d.join(f)).unwrap();
    check(read("a.model") == read("b.model"), "model files differ between identical runs")?;
    check(read("a.csv") == read("b.csv"), "score files differ between identical runs")?;

    let test = synth_test(DeviationMode::AgeConditional);
    let path = d.join("rt.model");
    save_model(&model.to_artifact(), &path).map_err(|e| e.to_string())?;
    let loaded = Model::from_artifact(&load_model(&path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let ap = AgeKernelParams::new(10.0, 0.1).unwrap();
    let (s1, s2) = (model.score(&test, &ap).unwrap(), loaded.score(&test, &ap).unwrap());
    let mut worst = 0.0f64;
    for (a, b) in [(&s1.y_hat, &s2.y_hat), (&s1.epsilon, &s2.epsilon), (&s1.cov_score, &s2.cov_score), (&s1.cov_w_score, &s2.cov_w_score)] {
        for (x, y) in a.iter().zip(b) {
            worst = worst.max((x - y).abs() / x.abs().max(f64::MIN_POSITIVE));
        }
    }
    check(worst <= 1e-12, format!("round-trip relative error {worst:.2e}"))?;
    Ok(format!("byte-identical model and scores; round-trip relative error {worst:.2e}"))
}

fn run(results: &mut Vec<bool>, n: usize, name: &str, f: impl FnOnce() -> Outcome) {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    match &outcome {
        Ok(detail) => println!("criterion {n} PASS {name}: {detail}"),
        Err(detail) => println!("criterion {n} FAIL {name}: {detail}"),
    }
    results.push(outcome.is_ok());
}

fn main() {
    let mut results = Vec::new();
    run(&mut results, 1, "gp oracle equivalence", gp_oracle);
    run(&mut results, 2, "gradient check", gradient_check);
    run(&mut results, 3, "unweighted limit via CLI", unweighted_equivalence);
    run(&mut results, 4, "kernel properties", kernel_properties);
    let fit_start = Instant::now();
    let model = catch_unwind(trained_model).ok();
    let fit_time = fit_start.elapsed();
    run(&mut results, 5, "qualitative reproduction", || match &model {
        Some(m) => qualitative(m, fit_time),
        None => Err("training the normative model failed".into()),
    });
    run(&mut results, 6, "statistics oracles", statistics_oracles);
    run(&mut results, 7, "fixed-effects recovery", fixed_effects_recovery);
    run(&mut results, 8, "determinism and round-trip", || match &model {
        Some(m) => determinism(m),
        None => Err("training the normative model failed".into()),
    });
    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
