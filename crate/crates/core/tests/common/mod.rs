//! Dense reference implementations shared by the integration tests. They
//! build every matrix entry from the closed-form kernel and invert with LU,
//! so they share no code path with the library.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn feat(a: &[f64], b: &[f64], ls: &[f64], product: bool) -> f64 {
    if product {
        let s: f64 = a.iter().zip(b).zip(ls).map(|((x, y), l)| (x - y).powi(2) / (2.0 * l * l)).sum();
        (-s).exp()
    } else {
        a.iter().zip(b).zip(ls).map(|((x, y), l)| (-(x - y).powi(2) / (2.0 * l * l)).exp()).sum()
    }
}

pub fn age_sim(ya: f64, yb: f64, ly: f64, sy2: f64, same: bool) -> f64 {
    let base = if ly.is_infinite() { 1.0 } else { (-(ya - yb).powi(2) / (2.0 * ly * ly)).exp() };
    base + if same { sy2 } else { 0.0 }
}

#[derive(Clone, Debug)]
pub struct Instance {
    pub x: DMatrix<f64>,
    pub ages: Vec<f64>,
    pub xs: DMatrix<f64>,
    pub test_ages: Vec<f64>,
    pub ls: Vec<f64>,
    pub noise: f64,
    pub ly: f64,
    pub sy2: f64,
    pub product: bool,
}

fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

pub fn random_instance(rng: &mut ChaCha8Rng, max_m: usize, max_n: usize, max_k: usize, product: bool) -> Instance {
    let m = rng.random_range(1..=max_m);
    let n = rng.random_range(1..=max_n);
    let k = rng.random_range(1..=max_k);
    let x = DMatrix::from_fn(m, k, |_, _| rng.random_range(-2.0..2.0));
    let xs = DMatrix::from_fn(n, k, |_, _| rng.random_range(-2.0..2.0));
    let ages = (0..m).map(|_| rng.random_range(20.0..90.0)).collect();
    let test_ages = (0..n).map(|_| rng.random_range(20.0..90.0)).collect();
    let ls = (0..k).map(|_| 10f64.powf(rng.random_range(-0.5..0.7))).collect();
    Instance {
        x,
        ages,
        xs,
        test_ages,
        ls,
        noise: 10f64.powf(rng.random_range(-2.0..0.0)),
        ly: if rng.random_bool(0.2) { f64::INFINITY } else { 10f64.powf(rng.random_range(0.0..2.5)) },
        sy2: if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..0.5) },
        product,
    }
}

pub struct NaivePosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub cov_w: DMatrix<f64>,
}

/// `k(a_i, b_j)` with optional age weighting; `self_block` marks a Gram matrix of a set with itself.
fn block(inst: &Instance, a: &DMatrix<f64>, ya: &[f64], b: &DMatrix<f64>, yb: &[f64], self_block: bool, weighted: bool) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        let same = self_block && i == j;
        let k = feat(&row(a, i), &row(b, j), &inst.ls, inst.product) + if same { inst.noise } else { 0.0 };
        if weighted {
            age_sim(ya[i], yb[j], inst.ly, inst.sy2, same) * k
        } else {
            k
        }
    })
}

fn with_jitter(mut k: DMatrix<f64>) -> DMatrix<f64> {
    // the library's first jitter rung: 1e-10 times the mean diagonal
    let j = 1e-10 * k.diagonal().mean();
    for i in 0..k.nrows() {
        k[(i, i)] += j;
    }
    k
}

pub fn naive_posterior(inst: &Instance) -> NaivePosterior {
    let y = DVector::from_vec(inst.ages.clone());
    let solve = |weighted: bool| {
        let k = with_jitter(block(inst, &inst.x, &inst.ages, &inst.x, &inst.ages, true, weighted));
        let kinv = k.try_inverse().expect("invertible");
        let ks = block(inst, &inst.x, &inst.ages, &inst.xs, &inst.test_ages, false, weighted);
        let kss = block(inst, &inst.xs, &inst.test_ages, &inst.xs, &inst.test_ages, true, weighted);
        let mean = ks.transpose() * &kinv * &y;
        let cov = kss - ks.transpose() * &kinv * &ks;
        (mean, cov)
    };
    let (mean, cov) = solve(false);
    let (_, cov_w) = solve(true);
    NaivePosterior { mean, cov, cov_w }
}

/// Standard log marginal likelihood with a dense inverse and determinant.
pub fn naive_lml(x: &DMatrix<f64>, y: &DVector<f64>, ls: &[f64], noise: f64, product: bool) -> f64 {
    let inst = Instance {
        x: x.clone(),
        ages: y.iter().copied().collect(),
        xs: x.clone(),
        test_ages: vec![],
        ls: ls.to_vec(),
        noise,
        ly: f64::INFINITY,
        sy2: 0.0,
        product,
    };
    let k = with_jitter(block(&inst, x, &inst.ages, x, &inst.ages, true, false));
    let m = y.len() as f64;
    let det = k.clone().determinant();
    let kinv = k.try_inverse().unwrap();
    -0.5 * (y.transpose() * kinv * y)[(0, 0)] - 0.5 * det.ln() - 0.5 * m * (2.0 * std::f64::consts::PI).ln()
}

/// Two-sided p-value by listing every way to pick group A's ranks.
pub fn enumerated_p(a: &[f64], b: &[f64]) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let n = pooled.len();
    let n1 = a.len();
    let rank = |v: f64| pooled.iter().filter(|&&w| w < v).count() as f64 + 1.0;
    let ranks: Vec<f64> = pooled.iter().map(|&v| rank(v)).collect();
    let offset = (n1 * (n1 + 1)) as f64 / 2.0;
    let observed = ranks[..n1].iter().sum::<f64>() - offset;

    let mut us = Vec::new();
    fn walk(start: usize, left: usize, acc: f64, n: usize, us: &mut Vec<f64>) {
        if left == 0 {
            us.push(acc);
            return;
        }
        for i in start..=n - left {
            walk(i + 1, left - 1, acc + (i + 1) as f64, n, us);
        }
    }
    walk(0, n1, 0.0, n, &mut us);
    let total = us.len() as f64;
    let le = us.iter().filter(|&&s| s - offset <= observed).count() as f64;
    let ge = us.iter().filter(|&&s| s - offset >= observed).count() as f64;
    (2.0 * le.min(ge) / total).min(1.0)
}

/// Fraction of positive/negative pairs ranked correctly, ties counting half.
pub fn u_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}
