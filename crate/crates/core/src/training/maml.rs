use serde::{Deserialize, Serialize};

use crate::diffcore::ParamStore;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MamlOrder {
    /// ∇θ L(θ′) ≈ ∇θ′ L(θ′)
    First,
    /// (I − α H(θ)) ∇θ′ L(θ′), with the Hessian-vector product taken by a
    /// central difference of gradients.
    Second,
}

fn axpy(params: &mut ParamStore, scale: f64, dir: &[Vec<f64>]) {
    for (i, d) in dir.iter().enumerate() {
        let t = params.tensor_mut(i);
        for (w, g) in t.data_mut().iter_mut().zip(d) {
            *w += scale * g;
        }
    }
}

/// One meta step: θ′ = θ − α∇L(θ), then θ ← θ − β∇θ L(θ′).
///
/// `grad` returns the per-parameter gradient of the meta loss at the given
/// parameters, in store order.
pub fn maml_update<F>(
    params: &mut ParamStore,
    alpha: f64,
    beta: f64,
    order: MamlOrder,
    mut grad: F,
) -> Result<()>
where
    F: FnMut(&ParamStore) -> Result<Vec<Vec<f64>>>,
{
    let inner = grad(params)?;
    let mut adapted = params.clone();
    axpy(&mut adapted, -alpha, &inner);
    let mut outer = grad(&adapted)?;
    if order == MamlOrder::Second {
        let norm = outer.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            let h = 1e-5 / norm;
            let mut plus = params.clone();
            axpy(&mut plus, h, &outer);
            let mut minus = params.clone();
            axpy(&mut minus, -h, &outer);
            let (gp, gm) = (grad(&plus)?, grad(&minus)?);
            for ((o, p), m) in outer.iter_mut().zip(&gp).zip(&gm) {
                for ((ov, pv), mv) in o.iter_mut().zip(p).zip(m) {
                    *ov -= alpha * (pv - mv) / (2.0 * h);
                }
            }
        }
    }
    axpy(params, -beta, &outer);
    Ok(())
}
