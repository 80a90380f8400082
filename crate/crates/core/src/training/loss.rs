use crate::diffcore::{Graph, Var};
use crate::error::{Error, Result};

fn check_same(g: &Graph, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

/// Reconstruction losses of the first phase: (‖O1 − W‖, ‖O2 − W‖), Frobenius.
pub fn loss_phase1(g: &Graph, o1: Var, o2: Var, w: Var) -> Result<(Var, Var)> {
    check_same(g, o1, w)?;
    check_same(g, o2, w)?;
    Ok((g.norm(g.sub(o1, w)?), g.norm(g.sub(o2, w)?)))
}

/// Adversarial terms: decoder 1 minimizes ‖Ô2 − W‖, decoder 2 maximizes it.
pub fn loss_adversarial(g: &Graph, o2_hat: Var, w: Var) -> Result<(Var, Var)> {
    check_same(g, o2_hat, w)?;
    let dev = g.norm(g.sub(o2_hat, w)?);
    Ok((dev, g.scale(dev, -1.0)))
}

/// (ε⁻ⁿ, 1 − ε⁻ⁿ): weight on reconstruction and on the adversarial term.
pub fn evolution_weights(n: u64, eps: f64) -> (f64, f64) {
    let w = eps.powf(-(n as f64));
    (w, 1.0 - w)
}

/// Evolving combination of the two phases. Without the adversarial term the
/// losses are the pure reconstruction errors.
pub fn loss_combined(
    g: &Graph,
    phase1: (Var, Var),
    adversarial: (Var, Var),
    n: u64,
    eps: f64,
    use_adversarial: bool,
) -> Result<(Var, Var)> {
    if !use_adversarial {
        return Ok(phase1);
    }
    let (rec, adv) = evolution_weights(n, eps);
    let l1 = g.add(g.scale(phase1.0, rec), g.scale(adversarial.0, adv))?;
    let l2 = g.add(g.scale(phase1.1, rec), g.scale(adversarial.1, adv))?;
    Ok((l1, l2))
}
