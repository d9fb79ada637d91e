use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

/// KL divergence from `N(mu, diag(exp(log_var)))` to the standard normal,
/// summed over all entries.
pub fn kl_diag_gaussian(mu: &Tensor, log_var: &Tensor) -> f64 {
    assert!(mu.same_shape(log_var), "mu and log_var shapes differ");
    0.5 * mu
        .data()
        .iter()
        .zip(log_var.data())
        .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
        .sum::<f64>()
}

/// Tape version of [`kl_diag_gaussian`].
pub fn kl_diag_gaussian_var(tape: &mut Tape, mu: Var, log_var: Var) -> Var {
    let mu_sq = tape.square(mu);
    let var = tape.exp(log_var);
    let t = tape.add(mu_sq, var);
    let t = tape.sub(t, log_var);
    let t = tape.add_scalar(t, -1.0);
    let total = tape.sum(t);
    tape.scale(total, 0.5)
}
