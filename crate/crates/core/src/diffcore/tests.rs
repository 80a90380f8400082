use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Compares backward() against central differences for every input entry.
/// `f` maps the input leaves to a node of any shape; the scalar loss is its
/// dot product with fixed random weights, so every output entry matters.
fn check(inputs: &[Tensor], f: impl Fn(&Graph, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe = {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t)).collect();
        let (r, c) = g.shape(f(&g, &vars));
        random(r, c, &mut rng)
    };
    let eval = |ts: &[Tensor], grad: bool| {
        let g = Graph::new();
        let vars: Vec<Var> = ts
            .iter()
            .map(|t| if grad { g.param(t) } else { g.constant(t) })
            .collect();
        let out = f(&g, &vars);
        let w = g.constant(&probe);
        let loss = g.sum(g.mul(out, w).unwrap());
        let grads = grad.then(|| {
            let gr = g.backward(loss).unwrap();
            vars.iter()
                .zip(ts)
                .map(|(v, t)| gr.get(*v).map_or(vec![0.0; t.numel()], <[f64]>::to_vec))
                .collect::<Vec<_>>()
        });
        (g.scalar(loss), grads)
    };
    let (_, analytic) = eval(inputs, true);
    let analytic = analytic.unwrap();
    let h = 1e-6;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * h);
            let a = analytic[i][j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                err < 1e-6,
                "input {i} entry {j}: analytic {a}, numeric {numeric}"
            );
        }
    }
}

#[test]
fn matmul_and_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ins = [random(3, 4, &mut rng), random(4, 2, &mut rng)];
    check(&ins, |g, v| g.matmul(v[0], v[1]).unwrap());
    check(&ins[..1], |g, v| g.transpose(v[0]));
}

#[test]
fn elementwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ins = [random(3, 3, &mut rng), random(3, 3, &mut rng)];
    check(&ins, |g, v| g.add(v[0], v[1]).unwrap());
    check(&ins, |g, v| g.sub(v[0], v[1]).unwrap());
    check(&ins, |g, v| g.mul(v[0], v[1]).unwrap());
    check(&ins[..1], |g, v| g.scale(v[0], -2.5));
    check(&ins[..1], |g, v| g.sigmoid(v[0]));
    check(&ins[..1], |g, v| g.relu(v[0]));
}

#[test]
fn row_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ins = [
        random(4, 3, &mut rng),
        random(1, 3, &mut rng),
        random(4, 2, &mut rng),
    ];
    check(&ins[..2], |g, v| g.add_row(v[0], v[1]).unwrap());
    check(&[ins[0].clone(), ins[2].clone()], |g, v| {
        g.concat_cols(v[0], v[1]).unwrap()
    });
    check(&ins[..1], |g, v| g.slice_rows(v[0], 1, 2).unwrap());
    check(&ins[..1], |g, v| g.pad_rows_top(v[0], 3));
}

#[test]
fn softmax_both_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ins = [random(4, 4, &mut rng)];
    check(&ins, |g, v| g.softmax_rows(v[0], false));
    check(&ins, |g, v| g.softmax_rows(v[0], true));
}

#[test]
fn layer_norm_all_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ins = [
        random(3, 5, &mut rng),
        random(1, 5, &mut rng),
        random(1, 5, &mut rng),
    ];
    check(&ins, |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap());
}

#[test]
fn reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ins = [random(2, 3, &mut rng)];
    check(&ins, |g, v| g.sum(v[0]));
    check(&ins, |g, v| g.norm(v[0]));
}

#[test]
fn dropout_gradient_follows_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(6, 6, &mut rng);
    let g = Graph::new();
    let v = g.param(&x);
    let d = g.dropout(v, 0.5, true, &mut rng);
    let out = g.data(d);
    let grads = g.backward(g.sum(d)).unwrap();
    for ((o, xv), gv) in out.iter().zip(x.data()).zip(grads.get(v).unwrap()) {
        if *o == 0.0 {
            assert_eq!(*gv, 0.0);
        } else {
            assert!((o / xv - 2.0).abs() < 1e-12);
            assert_eq!(*gv, 2.0);
        }
    }
    // off in evaluation mode
    assert_eq!(g.dropout(v, 0.5, false, &mut rng), v);
}

#[test]
fn softmax_values() {
    let g = Graph::new();
    let a = g.constant_matrix(2, 2, vec![0.0, 0.0, 1000.0, 0.0]);
    let s = g.data(g.softmax_rows(a, false));
    assert_eq!(&s[..2], &[0.5, 0.5]);
    assert!((s[2] - 1.0).abs() < 1e-12 && s[3] < 1e-300);
    let c = g.data(g.softmax_rows(a, true));
    assert_eq!(c, vec![1.0, 0.0, 1.0, 0.0]);
}

#[test]
fn layer_norm_values() {
    let g = Graph::new();
    let x = g.constant_matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]);
    let gain = g.constant_matrix(1, 4, vec![1.0; 4]);
    let bias = g.constant_matrix(1, 4, vec![0.0; 4]);
    let y = g.data(g.layer_norm(x, gain, bias, 0.0).unwrap());
    let mean: f64 = y.iter().sum::<f64>() / 4.0;
    let var: f64 = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
}

#[test]
fn constant_row_normalizes_to_bias() {
    let g = Graph::new();
    let x = g.constant_matrix(1, 3, vec![2.0; 3]);
    let gain = g.constant_matrix(1, 3, vec![3.0; 3]);
    let bias = g.constant_matrix(1, 3, vec![0.5, -0.5, 1.0]);
    assert_eq!(
        g.data(g.layer_norm(x, gain, bias, 1e-5).unwrap()),
        vec![0.5, -0.5, 1.0]
    );
}

#[test]
fn reused_node_accumulates() {
    let g = Graph::new();
    let x = g.param(&Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
    let y = g.add(x, x).unwrap();
    let grads = g.backward(g.sum(y)).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[2.0, 2.0]);

    let g = Graph::new();
    let x = g.param(&Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
    let grads = g.backward(g.sum(g.mul(x, x).unwrap())).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn norm_at_origin_has_zero_gradient() {
    let g = Graph::new();
    let x = g.param(&Tensor::zeros(vec![2, 2]));
    let grads = g.backward(g.norm(x)).unwrap();
    assert!(grads.get(x).is_none_or(|d| d.iter().all(|v| *v == 0.0)));
}

#[test]
fn backward_needs_a_scalar() {
    let g = Graph::new();
    let x = g.param(&Tensor::zeros(vec![2, 2]));
    assert!(matches!(g.backward(x), Err(crate::Error::ShapeMismatch(_))));
}

#[test]
fn constants_get_no_gradient() {
    let g = Graph::new();
    let x = g.param(&Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
    let c = g.constant_matrix(1, 2, vec![3.0, 4.0]);
    let grads = g.backward(g.sum(g.mul(x, c).unwrap())).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[3.0, 4.0]);
    assert!(grads.get(c).is_none());
}
