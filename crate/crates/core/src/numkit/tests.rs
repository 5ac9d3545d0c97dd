use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check_leaves, check_params};
use super::layers::{LayerNorm, Linear, MultiHeadAttention};
use super::*;
use crate::error::Error;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, 1.0)
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(11)
}

#[test]
fn sigmoid_of_zero_is_half() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::scalar(0.0));
    let y = tape.sigmoid(x).unwrap();
    assert_eq!(tape.item(y), 0.5);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![2.5, 2.5, 2.5]));
    let y = tape.softmax(x).unwrap();
    for v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn squared_norm_of_three_four() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![3.0, 4.0]));
    let y = tape.sq_norm(x).unwrap();
    assert_eq!(tape.item(y), 25.0);
}

#[test]
fn gradient_of_sum_is_ones() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![0.3, -1.0, 4.0]).with_grad());
    let s = tape.sum(x, 0).unwrap();
    let g = tape.grad_wrt(s, &[x]).unwrap();
    assert_eq!(g[0].data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn gradient_of_self_dot_is_twice_input() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![2.0, -1.0]).with_grad());
    let d = tape.dot(x, x).unwrap();
    let g = tape.grad_wrt(d, &[x]).unwrap();
    assert_eq!(g[0].data(), &[4.0, -2.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
    assert!(matches!(tape.grad_wrt(x, &[x]), Err(Error::Contract(_))));
}

#[test]
fn shape_mismatch_is_descriptive() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    assert!(err.to_string().contains("matmul"), "{err}");
}

#[test]
fn checked_mode_flags_non_finite() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::vector(vec![-1.0]));
    assert!(matches!(tape.log(a), Err(Error::Numeric(_))));
    tape.set_checked(false);
    assert!(tape.log(a).is_ok());
}

#[test]
fn parameter_gradients_accumulate_across_calls() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::vector(vec![1.0, 2.0]));
    for _ in 0..2 {
        let grads = {
            let mut tape = Tape::with_params(&store);
            let p = tape.param(w).unwrap();
            let s = tape.sum(p, 0).unwrap();
            tape.backward(s).unwrap()
        };
        store.accumulate(&grads);
    }
    assert_eq!(store.get(w).grad.as_deref(), Some(&[2.0, 2.0][..]));
}

#[test]
fn gather_scatters_into_table() {
    let mut store = ParamStore::new();
    let e = store.add("e", Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0]]).unwrap());
    let mut tape = Tape::with_params(&store);
    let rows = tape.gather(e, &[2, 0, 2]).unwrap();
    let s = tape.sum_all(rows).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(e).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
}

/// Every differentiable op kind against central differences.
#[test]
fn every_op_matches_finite_differences() {
    let mut r = rng();
    let a = rand_tensor(&mut r, &[3, 4]);
    let b = rand_tensor(&mut r, &[3, 4]);
    let m = rand_tensor(&mut r, &[4, 2]);
    let row = rand_tensor(&mut r, &[4]);
    let col = rand_tensor(&mut r, &[3]);
    let s = Tensor::scalar(0.7);
    let narrow = rand_tensor(&mut r, &[3, 2]);
    let pos = Tensor::new(vec![3, 4], a.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
    // Readout weights turn every output into a well-conditioned scalar.
    let readout = |tape: &mut Tape, v: Var| -> Result<Var, Error> {
        let w = Tensor::new(
            tape.shape(v).to_vec(),
            (0..tape.value(v).len()).map(|i| 0.3 + (i as f64 * 0.37).sin()).collect(),
        )?;
        let w = tape.constant(w);
        let p = tape.mul(v, w)?;
        tape.sum_all(p)
    };
    type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, Error>>;
    let cases: Vec<(&str, Vec<Tensor>, OpFn)> = vec![
        ("matmul", vec![a.clone(), m.clone()], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("transpose", vec![a.clone()], Box::new(|t, v| t.transpose(v[0]))),
        ("reshape", vec![a.clone()], Box::new(|t, v| t.reshape(v[0], &[2, 6]))),
        ("add", vec![a.clone(), b.clone()], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![a.clone(), b.clone()], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![a.clone(), b.clone()], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("add_row", vec![a.clone(), row.clone()], Box::new(|t, v| t.add_row(v[0], v[1]))),
        ("mul_col", vec![a.clone(), col.clone()], Box::new(|t, v| t.mul_col(v[0], v[1]))),
        ("scale", vec![a.clone()], Box::new(|t, v| t.scale(v[0], -1.7))),
        ("scale_by", vec![a.clone(), s.clone()], Box::new(|t, v| t.scale_by(v[0], v[1]))),
        ("concat", vec![a.clone(), narrow.clone(), b.clone()], Box::new(|t, v| t.concat(&[v[0], v[1], v[2]]))),
        ("concat_rows", vec![a.clone(), b.clone()], Box::new(|t, v| t.concat_rows(&[v[0], v[1]]))),
        ("slice_cols", vec![a.clone()], Box::new(|t, v| t.slice_cols(v[0], 1, 3))),
        ("slice_rows", vec![a.clone()], Box::new(|t, v| t.slice_rows(v[0], 1, 3))),
        ("select_rows", vec![a.clone()], Box::new(|t, v| t.select_rows(v[0], &[2, 0, 2]))),
        ("sum0", vec![a.clone()], Box::new(|t, v| t.sum(v[0], 0))),
        ("sum1", vec![a.clone()], Box::new(|t, v| t.sum(v[0], 1))),
        ("mean0", vec![a.clone()], Box::new(|t, v| t.mean(v[0], 0))),
        ("mean1", vec![a.clone()], Box::new(|t, v| t.mean(v[0], 1))),
        ("sigmoid", vec![a.clone()], Box::new(|t, v| t.sigmoid(v[0]))),
        ("tanh", vec![a.clone()], Box::new(|t, v| t.tanh(v[0]))),
        ("relu", vec![a.clone()], Box::new(|t, v| t.relu(v[0]))),
        ("exp", vec![a.clone()], Box::new(|t, v| t.exp(v[0]))),
        ("log", vec![pos.clone()], Box::new(|t, v| t.log(v[0]))),
        ("softmax", vec![a.clone()], Box::new(|t, v| t.softmax(v[0]))),
        ("log_softmax", vec![a.clone()], Box::new(|t, v| t.log_softmax(v[0]))),
        ("sq_norm", vec![a.clone()], Box::new(|t, v| t.sq_norm(v[0]))),
        ("dot", vec![a.clone(), b.clone()], Box::new(|t, v| t.dot(v[0], v[1]))),
        ("cosine", vec![a.clone(), b.clone()], Box::new(|t, v| t.cosine(v[0], v[1]))),
        ("layer_norm", vec![a.clone(), row.clone(), rand_tensor(&mut r, &[4])], Box::new(|t, v| t.layer_norm(v[0], v[1], v[2]))),
        ("neighbor_sum", vec![a.clone()], Box::new(|t, v| t.neighbor_sum(v[0], vec![vec![1, 2], vec![], vec![0, 0, 1]]))),
    ];
    for (name, inputs, op) in cases {
        let err = check_leaves(&inputs, |t, v| {
            let y = op(t, v)?;
            readout(t, y)
        })
        .unwrap();
        assert!(err < 1e-4, "{name}: relative error {err}");
    }
}

#[test]
fn three_layer_mlp_parameters_match_finite_differences() {
    let mut r = rng();
    let mut store = ParamStore::new();
    let l1 = Linear::new(&mut store, "l1", 5, 7, &mut r);
    let l2 = Linear::new(&mut store, "l2", 7, 6, &mut r);
    let l3 = Linear::new(&mut store, "l3", 6, 1, &mut r);
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v += r.gen_range(-0.1..0.1);
        }
    }
    let x = rand_tensor(&mut r, &[4, 5]);
    let err = check_params(&store, |t| {
        let x = t.constant(x.clone());
        let h = l1.forward(t, x)?;
        let h = t.tanh(h)?;
        let h = l2.forward(t, h)?;
        let h = t.sigmoid(h)?;
        let y = l3.forward(t, h)?;
        let y = t.sq_norm(y)?;
        t.sum_all(y)
    })
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn attention_and_layer_norm_parameters_match_finite_differences() {
    let mut r = rng();
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "mha", 6, 2, &mut r).unwrap();
    let ln = LayerNorm::new(&mut store, "ln", 6);
    let x = rand_tensor(&mut r, &[3, 6]);
    let err = check_params(&store, |t| {
        let x = t.constant(x.clone());
        let y = mha.forward(t, x)?;
        let y = ln.forward(t, y)?;
        let w = t.constant(Tensor::new(vec![3, 6], (0..18).map(|i| (i as f64).cos()).collect())?);
        let y = t.mul(y, w)?;
        t.sum_all(y)
    })
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn grad_wrt_intermediate_node() {
    // d/du of sum(u * u) with u = 3x is 2u.
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, -2.0]).with_grad());
    let u = tape.scale(x, 3.0).unwrap();
    let sq = tape.mul(u, u).unwrap();
    let s = tape.sum_all(sq).unwrap();
    let g = tape.grad_wrt(s, &[u, x]).unwrap();
    assert_eq!(g[0].data(), &[6.0, -12.0]);
    assert_eq!(g[1].data(), &[18.0, -36.0]);
}

#[test]
fn identical_seed_gives_bit_identical_results() {
    let run = || {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let l = Linear::new(&mut store, "l", 4, 4, &mut r);
        let x = rand_tensor(&mut r, &[2, 4]);
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(x);
        let y = l.forward(&mut tape, x).unwrap();
        let y = tape.softmax(y).unwrap();
        let s = tape.sq_norm(y).unwrap();
        let s = tape.sum_all(s).unwrap();
        let g = tape.backward(s).unwrap();
        (tape.item(s).to_bits(), g.get(l.weight).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-30.0f64..30.0, 1..12)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vals));
        let y = tape.softmax(x).unwrap();
        let total: f64 = tape.value(y).data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_stays_in_open_interval(v in -30.0f64..30.0) {
        let s = sigmoid(v);
        prop_assert!(s > 0.0 && s < 1.0);
    }
}
