//! Central finite-difference verification of the recorded gradients.
//!
//! Runs in f64 only: at f32 precision the difference quotient drowns in
//! rounding noise and the comparison is meaningless.

use crate::error::{Error, Result};

use super::{no_grad, sum_all, Tensor};

/// Central-difference gradient of sum(op(x)) with step `h`, one coordinate
/// at a time.
pub fn numeric_gradient<F>(op: &F, x: &Tensor<f64>, h: f64) -> Result<Vec<f64>>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let mut grads = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = x.detached();
        plus.data_mut()[i] += h;
        let mut minus = x.detached();
        minus.data_mut()[i] -= h;
        let (sp, sm) = no_grad(|| -> Result<(f64, f64)> {
            let yp = op(&plus)?;
            let ym = op(&minus)?;
            Ok((yp.data().iter().sum(), ym.data().iter().sum()))
        })?;
        grads.push((sp - sm) / (2.0 * h));
    }
    Ok(grads)
}

/// Compares the reverse-mode gradient of sum(op(x)) against central finite
/// differences. Returns the maximum over coordinates of
/// |analytic - numeric| / max(1, |numeric|).
pub fn grad_check<F>(op: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    // The harness silently produces garbage on stochastic closures; reject
    // them by evaluating twice and insisting on bit-identical output.
    let a = no_grad(|| op(x))?;
    let b = no_grad(|| op(x))?;
    if a.shape() != b.shape() || a.data() != b.data() {
        return Err(Error::Harness(
            "closure is not deterministic: two evaluations differ".to_string(),
        ));
    }

    let leaf = x.detached().traced();
    let y = op(&leaf)?;
    sum_all(&y).backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; x.numel()]);

    let numeric = numeric_gradient(&op, x, h)?;
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        let err = (a - n).abs() / n.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Verifies recorded gradients of a scalar loss with respect to named
/// parameter tensors, by central differences.
///
/// `eval` recomputes the loss from the current parameter values; `visit`
/// exposes the parameters (typically a `for_each_param` call). When `sample`
/// is given as (count, seed), only that many randomly chosen coordinates are
/// probed; otherwise every coordinate is. Returns the worst relative error.
pub fn check_param_gradients<F, V>(
    mut eval: F,
    mut visit: V,
    sample: Option<(usize, u64)>,
    h: f64,
) -> Result<f64>
where
    F: FnMut() -> Result<Tensor<f64>>,
    V: FnMut(&mut dyn FnMut(String, &mut Tensor<f64>)),
{
    visit(&mut |_, t| t.clear_grad());
    let loss = eval()?;
    loss.backward()?;

    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    visit(&mut |name, t| {
        let g = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
        analytic.push((name, g));
    });

    let mut coords: Vec<(usize, usize)> = analytic
        .iter()
        .enumerate()
        .flat_map(|(pi, (_, g))| (0..g.len()).map(move |ci| (pi, ci)))
        .collect();
    if let Some((count, seed)) = sample {
        let mut rng = crate::rng::Rng::new(seed);
        rng.shuffle(&mut coords);
        coords.truncate(count);
    }

    let mut worst = 0.0f64;
    for (pi, ci) in coords {
        let name = analytic[pi].0.clone();
        let mut probe = |delta: f64| -> Result<f64> {
            visit(&mut |n, t| {
                if n == name {
                    t.data_mut()[ci] += delta;
                }
            });
            let v = no_grad(&mut eval)?;
            visit(&mut |n, t| {
                if n == name {
                    t.data_mut()[ci] -= delta;
                }
            });
            Ok(v.item())
        };
        let plus = probe(h)?;
        let minus = probe(-h)?;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[pi].1[ci];
        let err = (a - numeric).abs() / numeric.abs().max(1.0);
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}
