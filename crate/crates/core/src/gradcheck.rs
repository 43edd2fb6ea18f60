//! Central finite-difference oracle for gradient verification.
//!
//! Independent of the tape: the numeric side re-evaluates the forward closure
//! on perturbed plain tensors, so it exercises none of the backward code it
//! checks. Runs in f64; f32 finite differences are too noisy to be meaningful.

use crate::tensor::{GradientTape, Tensor};

#[derive(Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, element index, analytic, numeric) at the worst element.
    pub worst: (usize, usize, f64, f64),
}

/// Compare tape gradients of `f` (a scalar-valued function of the inputs)
/// against central finite differences with step `h`.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, h: f64) -> GradCheckReport
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    let tape = GradientTape::new();
    let watched: Vec<Tensor<f64>> = inputs.iter().map(|t| tape.watch(t)).collect();
    let loss = f(&watched);
    assert_eq!(loss.numel(), 1, "gradient check needs a scalar loss");
    let grads = tape.backward(&loss).expect("backward pass");
    let analytic: Vec<Vec<f64>> = watched
        .iter()
        .map(|w| {
            grads
                .get(w)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; w.numel()])
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0, 0.0, 0.0),
    };
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let up = eval_perturbed(inputs, &f, i, j, h);
            let down = eval_perturbed(inputs, &f, i, j, -h);
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (i, j, a, numeric);
            }
        }
    }
    report
}

fn eval_perturbed<F>(inputs: &[Tensor<f64>], f: &F, which: usize, elem: usize, delta: f64) -> f64
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    let perturbed: Vec<Tensor<f64>> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if i == which {
                let mut data = t.data().to_vec();
                data[elem] += delta;
                Tensor::new(t.shape().to_vec(), data).expect("same shape")
            } else {
                t.clone()
            }
        })
        .collect();
    f(&perturbed).item()
}

/// Panics if the gradients of `f` disagree with finite differences.
pub fn assert_gradients_close<F>(inputs: &[Tensor<f64>], f: F, tol: f64)
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    let report = check_gradients(inputs, f, 1e-5);
    assert!(
        report.max_rel_err < tol,
        "gradient mismatch: rel err {:.3e} at input {} elem {} (analytic {:.6e}, numeric {:.6e})",
        report.max_rel_err,
        report.worst.0,
        report.worst.1,
        report.worst.2,
        report.worst.3
    );
}

/// Deterministic pseudo-random tensor for test inputs.
pub fn test_tensor(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    let mut rng = crate::rng::derive_rng_indexed(seed, "gradcheck", &[]);
    use rand::Rng;
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).expect("shape matches")
}
