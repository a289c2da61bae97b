//! Independent reference implementations shared by the oracle tests and the
//! acceptance target. Written directly from the definitions, without
//! reusing any library code path.

#![allow(dead_code)]

use v1t_core::tensorcore::{Rng, Tensor};

/// `Σ_i (o_i + ε) − (r_i + ε)·ln(o_i + ε)`, accumulated element by element.
pub fn poisson_oracle(r: &[f64], o: &[f64], eps: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..r.len() {
        let oe = o[i] + eps;
        total += oe - (r[i] + eps) * oe.ln();
    }
    total
}

/// Pearson correlation in the textbook covariance / product-of-deviations form.
fn pearson_oracle(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx).powi(2);
        syy += (y[i] - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Mean over neurons of the across-trial correlation; zero-variance
/// neurons are left out of the mean.
pub fn correlation_oracle(r: &Tensor, o: &Tensor) -> f64 {
    let (trials, neurons) = (r.dim(0), r.dim(1));
    let mut sum = 0.0;
    let mut kept = 0;
    for j in 0..neurons {
        let rc: Vec<f64> = (0..trials).map(|t| r.get(&[t, j])).collect();
        let oc: Vec<f64> = (0..trials).map(|t| o.get(&[t, j])).collect();
        if let Some(c) = pearson_oracle(&rc, &oc) {
            sum += c;
            kept += 1;
        }
    }
    if kept == 0 {
        0.0
    } else {
        sum / kept as f64
    }
}

/// Golden-section minimiser of a unimodal function on `[lo, hi]`.
pub fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - g * (hi - lo);
    let mut b = lo + g * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    while hi - lo > tol {
        if fa < fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - g * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + g * (hi - lo);
            fb = f(b);
        }
    }
    (lo + hi) / 2.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefEvent {
    Continue,
    Reduce,
    Stop,
}

/// Plateau schedule written as a replay over the whole loss history: the
/// epoch's event and learning rate follow from counting the run of
/// non-improving epochs since the last improvement or reduction.
pub struct ReferenceSchedule {
    pub patience: usize,
    pub factor: f64,
    pub max_reductions: usize,
    pub max_epochs: usize,
    pub tol: f64,
}

impl ReferenceSchedule {
    /// Events, learning rates and best epochs (1-based) for every epoch
    /// until training stops.
    pub fn replay(&self, initial_lr: f64, losses: &[f64]) -> Vec<(RefEvent, f64, usize)> {
        let mut out = Vec::new();
        let mut best = f64::INFINITY;
        let mut best_epoch = 0;
        let mut window_start = 0; // first epoch of the current count
        let mut lr = initial_lr;
        let mut reductions = 0;
        for (i, &loss) in losses.iter().enumerate() {
            let epoch = i + 1;
            let improved = !best.is_finite() || loss < best - self.tol * best.abs();
            if improved {
                best = loss;
                best_epoch = epoch;
                window_start = epoch;
            }
            let stale = epoch - window_start;
            let mut event = RefEvent::Continue;
            if stale == self.patience {
                if reductions == self.max_reductions {
                    event = RefEvent::Stop;
                } else {
                    reductions += 1;
                    lr *= self.factor;
                    event = RefEvent::Reduce;
                }
                window_start = epoch;
            }
            if epoch == self.max_epochs {
                event = RefEvent::Stop;
            }
            out.push((event, lr, best_epoch));
            if event == RefEvent::Stop {
                break;
            }
        }
        out
    }
}

/// Loss sequence with plateaus, noise and occasional improvements.
pub fn scripted_losses(rng: &mut Rng, len: usize) -> Vec<f64> {
    let mut v = 100.0 + 10.0 * rng.uniform();
    (0..len)
        .map(|_| {
            match rng.below(4) {
                0 => v -= rng.uniform() * 2.0,
                1 => v += rng.uniform(),
                // exact repeats and sub-tolerance wiggles
                2 => v -= v * 1e-9,
                _ => {}
            }
            v
        })
        .collect()
}

pub fn random_counts(rng: &mut Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| { let lam = 1.0 + 2.0 * rng.uniform(); rng.poisson(lam) }).collect())
}

pub fn random_rates(rng: &mut Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| 0.05 + 4.0 * rng.uniform()).collect())
}
