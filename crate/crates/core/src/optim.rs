//! Bounded derivative-free minimization: Nelder-Mead simplex descent with
//! box projection, deterministic jittered restarts, and the Δχ² = 1 crossing
//! search used for profile intervals.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Relative jitter (fraction of box width) applied to restart points.
pub const RESTART_JITTER: f64 = 0.2;

/// Outcome of a single simplex descent.
#[derive(Debug, Clone)]
pub struct MinimizeResult {
    pub x: Vec<f64>,
    pub fval: f64,
    pub n_evals: u64,
}

fn clip(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, &lo), &hi) in x.iter_mut().zip(lower).zip(upper) {
        *v = v.clamp(lo, hi);
    }
}

/// Nelder-Mead with reflection/expansion/contraction/shrink; trial points are
/// projected into the bounds box before evaluation.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut objective: F,
    lower: &[f64],
    upper: &[f64],
    x0: &[f64],
    max_iter: usize,
    ftol: f64,
) -> MinimizeResult {
    let n = x0.len();
    assert!(n > 0, "objective must have at least one parameter");
    let mut n_evals: u64 = 0;
    let mut eval = |x: &[f64]| -> f64 {
        n_evals += 1;
        let f = objective(x);
        if f.is_nan() {
            f64::INFINITY
        } else {
            f
        }
    };

    // initial simplex: x0 plus one vertex per axis at 5% of the box width
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    let mut start = x0.to_vec();
    clip(&mut start, lower, upper);
    simplex.push(start.clone());
    for i in 0..n {
        let mut v = start.clone();
        let h = 0.05 * (upper[i] - lower[i]);
        v[i] = if v[i] + h <= upper[i] { v[i] + h } else { v[i] - h };
        clip(&mut v, lower, upper);
        simplex.push(v);
    }
    let mut fvals: Vec<f64> = simplex.iter().map(|v| eval(v)).collect();

    const ALPHA: f64 = 1.0; // reflection
    const GAMMA: f64 = 2.0; // expansion
    const RHO: f64 = 0.5; // contraction
    const SIGMA: f64 = 0.5; // shrink

    for _ in 0..max_iter {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| fvals[a].total_cmp(&fvals[b]));
        let best = order[0];
        let worst = order[n];
        let second_worst = order[n - 1];

        if (fvals[worst] - fvals[best]).abs() <= ftol * (1.0 + fvals[best].abs()) {
            break;
        }

        // centroid of all vertices except the worst
        let mut centroid = vec![0.0; n];
        for (k, vertex) in simplex.iter().enumerate() {
            if k == worst {
                continue;
            }
            for (c, &v) in centroid.iter_mut().zip(vertex) {
                *c += v;
            }
        }
        for c in centroid.iter_mut() {
            *c /= n as f64;
        }

        let blend = |t: f64| -> Vec<f64> {
            let mut out = vec![0.0; n];
            for i in 0..n {
                out[i] = centroid[i] + t * (centroid[i] - simplex[worst][i]);
            }
            clip(&mut out, lower, upper);
            out
        };

        let reflected = blend(ALPHA);
        let f_reflected = eval(&reflected);
        if f_reflected < fvals[best] {
            let expanded = blend(GAMMA);
            let f_expanded = eval(&expanded);
            if f_expanded < f_reflected {
                simplex[worst] = expanded;
                fvals[worst] = f_expanded;
            } else {
                simplex[worst] = reflected;
                fvals[worst] = f_reflected;
            }
        } else if f_reflected < fvals[second_worst] {
            simplex[worst] = reflected;
            fvals[worst] = f_reflected;
        } else {
            let contracted = if f_reflected < fvals[worst] {
                blend(RHO)
            } else {
                blend(-RHO)
            };
            let f_contracted = eval(&contracted);
            if f_contracted < fvals[worst].min(f_reflected) {
                simplex[worst] = contracted;
                fvals[worst] = f_contracted;
            } else {
                for k in 0..=n {
                    if k == best {
                        continue;
                    }
                    let (source, update) = {
                        let best_v = simplex[best].clone();
                        let mut v = simplex[k].clone();
                        for i in 0..n {
                            v[i] = best_v[i] + SIGMA * (v[i] - best_v[i]);
                        }
                        clip(&mut v, lower, upper);
                        let f = eval(&v);
                        (v, f)
                    };
                    simplex[k] = source;
                    fvals[k] = update;
                }
            }
        }
    }

    let best = (0..=n).min_by(|&a, &b| fvals[a].total_cmp(&fvals[b])).unwrap();
    MinimizeResult {
        x: simplex[best].clone(),
        fval: fvals[best],
        n_evals,
    }
}

/// Best result over several descents plus the spread of their final values.
#[derive(Debug, Clone)]
pub struct RestartResult {
    pub best: MinimizeResult,
    /// Final objective of every restart, in run order.
    pub restart_fvals: Vec<f64>,
    pub n_evals: u64,
}

/// Runs `n_restarts` descents: the first from `x0` exactly, the rest from
/// points jittered by ±`RESTART_JITTER` of the box width (clipped), drawn from
/// the seeded generator. Each descent is polished by a second descent that
/// rebuilds the simplex at the found minimum.
pub fn minimize_with_restarts<F: FnMut(&[f64]) -> f64>(
    mut objective: F,
    lower: &[f64],
    upper: &[f64],
    x0: &[f64],
    n_restarts: usize,
    rng: &mut ChaCha8Rng,
    max_iter: usize,
    ftol: f64,
) -> RestartResult {
    let n = x0.len();
    let mut best: Option<MinimizeResult> = None;
    let mut restart_fvals = Vec::with_capacity(n_restarts);
    let mut n_evals = 0;
    for restart in 0..n_restarts {
        let mut start = x0.to_vec();
        if restart > 0 {
            for i in 0..n {
                start[i] += rng.random_range(-RESTART_JITTER..RESTART_JITTER) * (upper[i] - lower[i]);
            }
            clip(&mut start, lower, upper);
        }
        let first = nelder_mead(&mut objective, lower, upper, &start, max_iter, ftol);
        let polished = nelder_mead(&mut objective, lower, upper, &first.x, max_iter, ftol);
        n_evals += first.n_evals + polished.n_evals;
        let run = if polished.fval <= first.fval { polished } else { first };
        restart_fvals.push(run.fval);
        if best.as_ref().is_none_or(|b| run.fval < b.fval) {
            best = Some(run);
        }
    }
    RestartResult {
        best: best.expect("at least one restart"),
        restart_fvals,
        n_evals,
    }
}

/// Finds how far a parameter can move from `best_t` toward `bound` before the
/// profiled objective exceeds `target`. Returns the offset, truncated at the
/// bound if the target is never exceeded.
pub fn profile_crossing<F: FnMut(f64) -> f64>(
    mut profiled: F,
    best_t: f64,
    bound: f64,
    target: f64,
) -> f64 {
    let span = bound - best_t;
    if span == 0.0 {
        return 0.0;
    }
    const FRACTIONS: [f64; 10] = [0.01, 0.02, 0.05, 0.1, 0.2, 0.35, 0.5, 0.7, 0.85, 1.0];
    let mut below = best_t;
    let mut above: Option<f64> = None;
    for frac in FRACTIONS {
        let t = best_t + span * frac;
        if profiled(t) > target {
            above = Some(t);
            break;
        }
        below = t;
    }
    let Some(mut hi) = above else {
        return span.abs();
    };
    let mut lo = below;
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        if profiled(mid) > target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    (0.5 * (lo + hi) - best_t).abs()
}
