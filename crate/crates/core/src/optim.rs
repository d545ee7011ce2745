//! Box-projected L-BFGS with a backtracking Armijo line search.
//!
//! Used for marginal-likelihood training. Objective evaluations may fail
//! (a Gram matrix that no jitter rescues) or return non-finite values; the
//! line search treats both as "step too long" and halves.

use std::collections::VecDeque;

use nalgebra::DVector;

use crate::error::Result;
use crate::scalar::Real;

#[derive(Clone, Debug)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_iterations: usize,
    /// Stop when the infinity norm of the projected gradient falls below this.
    pub gradient_tolerance: f64,
    /// Stop after three consecutive accepted steps with relative decrease below this.
    pub relative_tolerance: f64,
    /// Largest per-coordinate move of a single step.
    pub max_step: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            memory: 10,
            max_iterations: 200,
            gradient_tolerance: 1e-6,
            relative_tolerance: 1e-14,
            max_step: 3.0,
            max_backtracks: 50,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    Gradient,
    RelativeDecrease,
    MaxIterations,
    LineSearch,
}

#[derive(Clone, Debug)]
pub struct Minimum<T: Real> {
    pub x: DVector<T>,
    pub value: T,
    pub gradient: DVector<T>,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
}

fn project<T: Real>(x: &mut DVector<T>, lower: &DVector<T>, upper: &DVector<T>) {
    for ((v, &lo), &hi) in x.iter_mut().zip(lower.iter()).zip(upper.iter()) {
        *v = v.clamp(lo, hi);
    }
}

fn projected_gradient<T: Real>(
    x: &DVector<T>,
    g: &DVector<T>,
    lower: &DVector<T>,
    upper: &DVector<T>,
) -> DVector<T> {
    DVector::from_fn(x.len(), |i, _| {
        let at_lo = x[i] <= lower[i] && g[i] > T::zero();
        let at_hi = x[i] >= upper[i] && g[i] < T::zero();
        if at_lo || at_hi {
            T::zero()
        } else {
            g[i]
        }
    })
}

fn inf_norm<T: Real>(v: &DVector<T>) -> T {
    v.iter().fold(T::zero(), |m, x| m.max(x.abs()))
}

/// Minimizes `objective` (value and gradient) within `[lower, upper]`.
pub fn minimize<T, F>(
    mut objective: F,
    x0: DVector<T>,
    lower: &DVector<T>,
    upper: &DVector<T>,
    config: &LbfgsConfig,
) -> Result<Minimum<T>>
where
    T: Real,
    F: FnMut(&DVector<T>) -> Result<(T, DVector<T>)>,
{
    let mut x = x0;
    project(&mut x, lower, upper);
    let (mut fx, mut g) = objective(&x)?;
    let mut evaluations = 1;
    let mut history: VecDeque<(DVector<T>, DVector<T>, T)> = VecDeque::with_capacity(config.memory);
    let c1 = T::lit(1e-4);
    let gtol = T::lit(config.gradient_tolerance);
    let rtol = T::lit(config.relative_tolerance);
    let max_step = T::lit(config.max_step);
    let mut small_steps = 0;

    for iteration in 0..config.max_iterations {
        let pg = projected_gradient(&x, &g, lower, upper);
        let pg_norm = inf_norm(&pg);
        if pg_norm <= gtol {
            return Ok(Minimum {
                x,
                value: fx,
                gradient: g,
                iterations: iteration,
                evaluations,
                termination: Termination::Gradient,
            });
        }

        // two-loop recursion
        let mut q = pg.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = *rho * s.dot(&q);
            q.axpy(-a, y, T::one());
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.back() {
            let gamma = s.dot(y) / y.dot(y);
            q *= gamma;
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
            let b = *rho * y.dot(&q);
            q.axpy(a - b, s, T::one());
        }
        let mut d = -q;
        for i in 0..d.len() {
            if pg[i] == T::zero() {
                d[i] = T::zero();
            }
        }
        if d.dot(&pg) >= T::zero() {
            d = -pg.clone();
            history.clear();
        }

        let d_norm = inf_norm(&d);
        let mut step = if history.is_empty() {
            T::one().min(T::one() / pg_norm)
        } else {
            T::one()
        };
        if step * d_norm > max_step {
            step = max_step / d_norm;
        }

        let mut accepted = None;
        for _ in 0..config.max_backtracks {
            let mut trial = &x + &d * step;
            project(&mut trial, lower, upper);
            let moved = &trial - &x;
            if inf_norm(&moved) == T::zero() {
                break;
            }
            evaluations += 1;
            match objective(&trial) {
                Ok((ft, gt)) if ft.is_finite_val() && gt.iter().all(|v| v.is_finite_val()) => {
                    if ft <= fx + c1 * g.dot(&moved) {
                        accepted = Some((trial, ft, gt, moved));
                        break;
                    }
                }
                _ => {}
            }
            step *= T::lit(0.5);
        }

        let Some((x_new, f_new, g_new, s)) = accepted else {
            return Ok(Minimum {
                x,
                value: fx,
                gradient: g,
                iterations: iteration,
                evaluations,
                termination: Termination::LineSearch,
            });
        };

        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > T::lit(1e-10) * s.norm() * y.norm() {
            if history.len() == config.memory {
                history.pop_front();
            }
            history.push_back((s, y, T::one() / sy));
        }

        let scale = fx.abs().max(f_new.abs()).max(T::one());
        if (fx - f_new).abs() <= rtol * scale {
            small_steps += 1;
        } else {
            small_steps = 0;
        }
        x = x_new;
        fx = f_new;
        g = g_new;
        if small_steps >= 3 {
            return Ok(Minimum {
                x,
                value: fx,
                gradient: g,
                iterations: iteration + 1,
                evaluations,
                termination: Termination::RelativeDecrease,
            });
        }
    }

    Ok(Minimum {
        x,
        value: fx,
        gradient: g,
        iterations: config.max_iterations,
        evaluations,
        termination: Termination::MaxIterations,
    })
}
