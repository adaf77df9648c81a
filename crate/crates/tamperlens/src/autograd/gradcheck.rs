//! Finite-difference verification of analytic gradients.
//!
//! The checker evaluates a user-supplied scalar function twice per probed
//! element with the element nudged by ±h (central differences), using
//! [`Graph::override_param`] so the parameters themselves never change.
//! All arithmetic is `f64`, which keeps the comparison sharp enough for
//! tolerances around `1e-6`.

use ndarray::IxDyn;
use rand::Rng;

use super::{Arr, Graph, Param, V};

/// Random tensor with elements drawn uniformly from `[-0.5, 0.5)`.
pub fn rand_arr<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Arr {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
    Arr::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Result of one gradient comparison sweep.
#[derive(Debug, Clone, Copy, Default)]
pub struct CheckReport {
    pub elements_checked: usize,
    pub max_rel_err: f64,
}

fn eval_with_override<F>(f: &F, param_id: u64, value: Arr) -> f64
where
    F: Fn(&mut Graph) -> V,
{
    let mut g = Graph::inference();
    g.override_param(param_id, value);
    let root = f(&mut g);
    g.scalar(root)
}

fn perturbed(base: &Arr, flat_index: usize, delta: f64) -> Arr {
    let mut flat: Vec<f64> = base.iter().copied().collect();
    flat[flat_index] += delta;
    Arr::from_shape_vec(IxDyn(base.shape()), flat).unwrap()
}

/// Relative error with a floor so near-zero pairs compare absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1.0, analytic.abs().max(numeric.abs()))
}

/// Checks analytic gradients of `f` for every element of every parameter,
/// panicking with a description of the worst offender if any relative error
/// exceeds `tol`. Returns the sweep report on success.
pub fn check_param_grads<F>(params: &[&Param], h: f64, tol: f64, f: F) -> CheckReport
where
    F: Fn(&mut Graph) -> V,
{
    check_param_grads_sampled(params, h, tol, usize::MAX, &mut no_sampling(), f)
}

/// As [`check_param_grads`], but probes at most `max_per_param` randomly
/// chosen elements of each parameter. Analytic gradients are still computed
/// exactly; only the finite-difference probes are subsampled.
pub fn check_param_grads_sampled<F, R>(
    params: &[&Param],
    h: f64,
    tol: f64,
    max_per_param: usize,
    rng: &mut R,
    f: F,
) -> CheckReport
where
    F: Fn(&mut Graph) -> V,
    R: Rng,
{
    let mut g = Graph::recording();
    let root = f(&mut g);
    assert_eq!(g.value(root).len(), 1, "gradient check requires a scalar output");
    let grads = g.backprop(root);
    drop(g);

    let mut report = CheckReport::default();
    let mut worst: Option<(String, usize, f64, f64, f64)> = None;
    for p in params {
        let analytic = grads
            .get(p)
            .unwrap_or_else(|| panic!("no gradient reached parameter `{}`", p.name));
        let analytic_flat: Vec<f64> = analytic.iter().copied().collect();
        let n = analytic_flat.len();
        let indices: Vec<usize> = if n <= max_per_param {
            (0..n).collect()
        } else {
            let mut picked: Vec<usize> = (0..max_per_param)
                .map(|_| rng.gen_range(0..n))
                .collect();
            picked.sort_unstable();
            picked.dedup();
            picked
        };
        for idx in indices {
            let lp = eval_with_override(&f, p.id(), perturbed(&p.value, idx, h));
            let lm = eval_with_override(&f, p.id(), perturbed(&p.value, idx, -h));
            let numeric = (lp - lm) / (2.0 * h);
            let err = rel_err(analytic_flat[idx], numeric);
            report.elements_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                worst = Some((p.name.clone(), idx, analytic_flat[idx], numeric, err));
            }
        }
    }
    if report.max_rel_err > tol {
        let (name, idx, a, nmr, err) = worst.unwrap();
        panic!(
            "gradient mismatch in `{name}`[{idx}]: analytic {a:.9e} vs numeric {nmr:.9e} \
             (rel err {err:.3e} > tol {tol:.1e})"
        );
    }
    report
}

/// RNG stand-in for the exhaustive path, never actually sampled from.
fn no_sampling() -> impl Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn detects_a_wrong_gradient() {
        // A deliberately broken "loss": forward computes sum(x^2) but we
        // compare against the gradient of sum(x) by constructing the graph
        // so the analytic gradient is wrong for the probed function.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let p = Param::new("p", rand_arr(&mut rng, &[3]));
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            check_param_grads(&[&p], 1e-6, 1e-4, |g| {
                let v = g.param(&p);
                // Forward value depends on whether the graph records: a
                // recording graph sees x, an inference graph sees 2x. The
                // mismatch must trip the checker.
                let scaled = if g.is_recording() { v } else { g.scale(v, 2.0) };
                g.sum_all(scaled)
            });
        }));
        assert!(result.is_err(), "checker failed to flag a wrong gradient");
    }

    #[test]
    fn sampled_mode_bounds_probe_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = Param::new("p", rand_arr(&mut rng, &[50]));
        let mut sample_rng = ChaCha8Rng::seed_from_u64(8);
        let report = check_param_grads_sampled(&[&p], 1e-6, 1e-6, 10, &mut sample_rng, |g| {
            let v = g.param(&p);
            let s = g.sigmoid(v);
            g.sum_all(s)
        });
        assert!(report.elements_checked <= 10);
        assert!(report.elements_checked > 0);
    }
}
