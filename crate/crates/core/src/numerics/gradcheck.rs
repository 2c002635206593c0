//! Central finite-difference probes used to validate analytic gradients.
//!
//! The probes only ever evaluate the loss; they never touch the tape.

/// One directional derivative measured two ways.
#[derive(Debug, Clone, Copy)]
pub struct Probe {
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    pub fn rel_err(&self) -> f64 {
        let denom = self.analytic.abs().max(self.numeric.abs());
        if denom == 0.0 {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / denom
        }
    }
}

/// Compares `grad . dir` with a central difference of `loss` along `dir`.
///
/// `loss` receives the full perturbed parameter vector. The perturbation that
/// actually lands in `f32` storage is used on the analytic side, so rounding
/// of `theta + h * dir` does not leak into the comparison.
pub fn directional_probe<F>(theta: &[f32], grad: &[f32], dir: &[f32], h: f32, mut loss: F) -> Probe
where
    F: FnMut(&[f32]) -> f64,
{
    let plus: Vec<f32> = theta.iter().zip(dir).map(|(t, d)| t + h * d).collect();
    let minus: Vec<f32> = theta.iter().zip(dir).map(|(t, d)| t - h * d).collect();
    let analytic = grad
        .iter()
        .zip(plus.iter().zip(&minus))
        .map(|(&g, (&p, &m))| f64::from(g) * (f64::from(p) - f64::from(m)))
        .sum::<f64>();
    let numeric = loss(&plus) - loss(&minus);
    Probe { analytic, numeric }
}

/// Central difference along a single coordinate.
pub fn coordinate_probe<F>(theta: &[f32], grad: &[f32], index: usize, h: f32, loss: F) -> Probe
where
    F: FnMut(&[f32]) -> f64,
{
    let mut dir = vec![0.0; theta.len()];
    dir[index] = 1.0;
    directional_probe(theta, grad, &dir, h, loss)
}

/// A random probe direction tilted toward the analytic gradient.
///
/// Purely random directions can land almost orthogonal to the gradient, where
/// the directional derivative drops below f32 forward rounding divided by `h`.
/// Adding the unit gradient keeps the derivative near `|grad|`, so the relative
/// error measures gradient error against the gradient norm, while the random
/// half still exposes error components orthogonal to `grad`.
pub fn tilted_direction(grad: &[f32], random: &[f32]) -> Vec<f32> {
    let norm = |v: &[f32]| v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    let (gn, rn) = (norm(grad), norm(random));
    grad.iter()
        .zip(random)
        .map(|(&g, &r)| {
            let gu = if gn > 0.0 { f64::from(g) / gn } else { 0.0 };
            let ru = if rn > 0.0 { f64::from(r) / rn } else { 0.0 };
            (gu + ru) as f32
        })
        .collect()
}
