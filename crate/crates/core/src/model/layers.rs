//! Attention and position-encoding primitives on top of the gradient tape.

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Sinusoidal position encoding table: sin on even columns, cos on odd ones.
pub fn positional_encoding(rows: usize, width: usize) -> Result<Tensor> {
    if !width.is_multiple_of(2) {
        return Err(Error::OddWidth(width));
    }
    let mut data = vec![0.0; rows * width];
    for pos in 0..rows {
        for i in 0..width / 2 {
            let freq = 10000f64.powf(2.0 * i as f64 / width as f64);
            let angle = pos as f64 / freq;
            data[pos * width + 2 * i] = angle.sin();
            data[pos * width + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::matrix(rows, width, data)
}

pub fn position_encode(g: &Graph, x: Var) -> Result<Var> {
    let (rows, width) = g.shape(x);
    let pe = positional_encoding(rows, width)?;
    g.add(x, g.constant(&pe))
}

/// softmax(Q·Kᵀ / scale)·V. Returns the output and the attention weights.
pub fn attention(
    g: &Graph,
    q: Var,
    k: Var,
    v: Var,
    scale: f64,
    causal: bool,
) -> Result<(Var, Var)> {
    let (qr, qc) = g.shape(q);
    let (kr, kc) = g.shape(k);
    let (vr, _) = g.shape(v);
    if qc != kc || kr != vr {
        return Err(Error::ShapeMismatch(format!(
            "attention Q {qr}x{qc}, K {kr}x{kc}, V rows {vr}"
        )));
    }
    if causal && qr != kr {
        return Err(Error::ShapeMismatch(
            "causal attention needs square logits".into(),
        ));
    }
    let logits = g.matmul(q, g.transpose(k))?;
    let weights = g.softmax_rows(g.scale(logits, 1.0 / scale), causal);
    Ok((g.matmul(weights, v)?, weights))
}

/// Indices of a dense layer's parameters within a bound parameter list.
#[derive(Clone, Copy, Debug)]
pub struct LinearIx {
    pub w: usize,
    pub b: usize,
}

impl LinearIx {
    pub fn apply(&self, g: &Graph, params: &[Var], x: Var) -> Result<Var> {
        let y = g.matmul(x, params[self.w])?;
        g.add_row(y, params[self.b])
    }
}

/// Projections of one attention head. Keys carry no bias: a key bias shifts
/// every logit of a row equally and cancels in the softmax.
#[derive(Clone, Copy, Debug)]
pub struct HeadIx {
    pub query: LinearIx,
    pub key: usize,
    pub value: LinearIx,
}

#[derive(Clone, Debug)]
pub struct AttentionIx {
    pub heads: Vec<HeadIx>,
    pub out: LinearIx,
}

#[derive(Clone, Copy, Debug)]
pub struct NormIx {
    pub gain: usize,
    pub bias: usize,
}

impl NormIx {
    pub fn apply(&self, g: &Graph, params: &[Var], x: Var, eps: f64) -> Result<Var> {
        g.layer_norm(x, params[self.gain], params[self.bias], eps)
    }
}

/// Multi-head attention: per-head projections, scaled dot-product attention
/// per head, concatenation, and an output projection. `keys_values` supplies
/// both keys and values. Returns the output and each head's weights.
pub fn multi_head_att(
    g: &Graph,
    params: &[Var],
    ix: &AttentionIx,
    query: Var,
    keys_values: Var,
    scale: f64,
    masked: bool,
) -> Result<(Var, Vec<Var>)> {
    let mut concat: Option<Var> = None;
    let mut weights = Vec::with_capacity(ix.heads.len());
    for head in &ix.heads {
        let q = head.query.apply(g, params, query)?;
        let k = g.matmul(keys_values, params[head.key])?;
        let v = head.value.apply(g, params, keys_values)?;
        let (h, w) = attention(g, q, k, v, scale, masked)?;
        weights.push(w);
        concat = Some(match concat {
            None => h,
            Some(c) => g.concat_cols(c, h)?,
        });
    }
    let concat = concat.ok_or_else(|| Error::InvalidConfig("attention without heads".into()))?;
    Ok((ix.out.apply(g, params, concat)?, weights))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn encoding_at_origin() {
        let pe = positional_encoding(3, 8).unwrap();
        for c in 0..8 {
            assert_eq!(pe.get(0, c), if c % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!((pe.get(1, 0) - 1f64.sin()).abs() < 1e-15);
        assert!(matches!(positional_encoding(2, 3), Err(Error::OddWidth(3))));
    }

    #[test]
    fn single_key_returns_its_value() {
        let g = Graph::new();
        let q = g.constant(&m(&[&[0.3, -1.0], &[2.0, 0.5]]));
        let k = g.constant(&m(&[&[1.0, 1.0]]));
        let v = g.constant(&m(&[&[4.0, 5.0, 6.0]]));
        let (out, w) = attention(&g, q, k, v, 2f64.sqrt(), false).unwrap();
        assert_eq!(g.data(w), vec![1.0, 1.0]);
        assert_eq!(g.value(out).to_rows(), vec![vec![4.0, 5.0, 6.0]; 2]);
    }

    #[test]
    fn orthogonal_query_averages_values() {
        let g = Graph::new();
        let q = g.constant(&m(&[&[0.0, 0.0, 1.0]]));
        let k = g.constant(&m(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[2.0, 3.0, 0.0]]));
        let v = g.constant(&m(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 9.0]]));
        let (out, _) = attention(&g, q, k, v, 3f64.sqrt(), false).unwrap();
        let o = g.data(out);
        assert!((o[0] - 3.0).abs() < 1e-12 && (o[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn identity_two_by_two() {
        // weights per row: softmax([1/√2, 0]) (and mirrored)
        let g = Graph::new();
        let eye = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let (q, k, v) = (g.constant(&eye), g.constant(&eye), g.constant(&eye));
        let (out, w) = attention(&g, q, k, v, 2f64.sqrt(), false).unwrap();
        let a = (1.0 / 2f64.sqrt()).exp();
        let hi = a / (a + 1.0);
        let lo = 1.0 / (a + 1.0);
        let expect = [hi, lo, lo, hi];
        for (x, e) in g.data(w).iter().zip(expect) {
            assert!((x - e).abs() < 1e-15);
        }
        for (x, e) in g.data(out).iter().zip(expect) {
            assert!((x - e).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_shape_errors() {
        let g = Graph::new();
        let q = g.constant(&Tensor::zeros(vec![2, 3]));
        let k = g.constant(&Tensor::zeros(vec![2, 2]));
        let v = g.constant(&Tensor::zeros(vec![2, 2]));
        assert!(matches!(
            attention(&g, q, k, v, 1.0, false),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
