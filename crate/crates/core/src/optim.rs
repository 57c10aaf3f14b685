//! Small box-projected L-BFGS minimizer with Armijo backtracking.

use std::collections::VecDeque;

#[derive(Debug, Clone)]
pub(crate) struct LbfgsOptions {
    pub max_iters: usize,
    pub memory: usize,
    pub grad_tol: f64,
    pub f_tol: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub iters: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, l), h) in x.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(*l, *h);
    }
}

/// Minimizes `f`, which returns `None` where the objective is undefined
/// (e.g. a failed factorization). Returns `None` if `x0` itself is undefined.
pub(crate) fn minimize<F>(mut f: F, x0: &[f64], opts: &LbfgsOptions) -> Option<Minimum>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let mut x = x0.to_vec();
    project(&mut x, &opts.lower, &opts.upper);
    let (mut fx, mut g) = f(&x)?;
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut iters = 0;

    while iters < opts.max_iters {
        iters += 1;
        // Projected gradient norm: ignore components pushing against an active bound.
        let pg = x
            .iter()
            .zip(&g)
            .zip(opts.lower.iter().zip(&opts.upper))
            .map(|((&xi, &gi), (&l, &h))| {
                if (xi <= l && gi > 0.0) || (xi >= h && gi < 0.0) {
                    0.0
                } else {
                    gi.abs()
                }
            })
            .fold(0.0, f64::max);
        if pg < opts.grad_tol {
            break;
        }

        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        if dot(&dir, &g) >= 0.0 {
            history.clear();
            dir = g.iter().map(|v| -v).collect();
        }
        if history.is_empty() {
            // first step or reset: cap the step length at 1 in parameter space
            let norm = dot(&dir, &dir).sqrt();
            if norm > 1.0 {
                dir.iter_mut().for_each(|v| *v /= norm);
            }
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut trial: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            project(&mut trial, &opts.lower, &opts.upper);
            let delta: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
            if let Some((ft, gt)) = f(&trial) {
                if ft.is_finite() && ft <= fx + 1e-4 * dot(&g, &delta) {
                    accepted = Some((trial, ft, gt, delta));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gn, s)) = accepted else {
            break;
        };
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        let df = fx - fnew;
        x = xn;
        fx = fnew;
        g = gn;
        if df.abs() <= opts.f_tol * (1.0 + fx.abs()) {
            break;
        }
    }
    Some(Minimum { x, f: fx, iters })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_rosenbrock() {
        let rosen = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
            Some((f, g))
        };
        let opts = LbfgsOptions {
            max_iters: 500,
            memory: 7,
            grad_tol: 1e-10,
            f_tol: 0.0,
            lower: vec![-10.0; 2],
            upper: vec![10.0; 2],
        };
        let m = minimize(rosen, &[-1.2, 1.0], &opts).unwrap();
        assert!((m.x[0] - 1.0).abs() < 1e-6 && (m.x[1] - 1.0).abs() < 1e-6, "{:?}", m);
    }

    #[test]
    fn respects_bounds() {
        let f = |x: &[f64]| Some((x[0] * x[0], vec![2.0 * x[0]]));
        let opts = LbfgsOptions {
            max_iters: 50,
            memory: 5,
            grad_tol: 1e-12,
            f_tol: 0.0,
            lower: vec![1.5],
            upper: vec![3.0],
        };
        let m = minimize(f, &[2.5], &opts).unwrap();
        assert_eq!(m.x[0], 1.5);
    }
}
