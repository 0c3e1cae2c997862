use cgtp_core::cgpnet::softmax_probs;
use cgtp_core::numerics::{NdArray, NumericsError, ParameterStore, Tape};

#[test]
fn gradient_of_summed_product_is_the_input() {
    let mut store = ParameterStore::new();
    store.insert("w", NdArray::matrix(3, 2, vec![0.5, -1.0, 2.0, 0.0, 1.5, -0.5]).unwrap());
    let mut tape = Tape::new();
    let w = tape.param(&store, "w").unwrap();
    let x = tape.constant(NdArray::matrix(2, 1, vec![1.0, 1.0]).unwrap()).unwrap();
    let y = tape.matmul(w, x).unwrap();
    let loss = tape.sum(y).unwrap();
    let g = tape.backward(loss).unwrap();
    let gw = &tape.param_grads(&g)["w"];
    assert_eq!(gw.shape(), &[3, 2]);
    assert!(gw.data().iter().all(|&v| v == 1.0));
}

#[test]
fn unreachable_parameter_gets_no_gradient() {
    let mut store = ParameterStore::new();
    store.insert("used", NdArray::row(vec![2.0, 3.0]));
    store.insert("idle", NdArray::row(vec![1.0]));
    let mut tape = Tape::new();
    let u = tape.param(&store, "used").unwrap();
    let idle = tape.param(&store, "idle").unwrap();
    let loss = tape.sum(u).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.get(idle).is_none());
    let grads = tape.param_grads(&g);
    assert!(!grads.contains_key("idle"));

    // accumulating leaves the idle entry at zero
    store.accumulate_grads(&grads).unwrap();
    assert!(store.grad("idle").unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn square_norm_gradient() {
    let mut store = ParameterStore::new();
    store.insert("y", NdArray::row(vec![3.0]));
    let mut tape = Tape::new();
    let y = tape.param(&store, "y").unwrap();
    let sq = tape.mul(y, y).unwrap();
    let loss = tape.sum(sq).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(tape.param_grads(&g)["y"].data(), &[6.0]);
}

#[test]
fn non_scalar_loss_is_a_contract_error() {
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(NdArray::row(vec![1.0, 2.0])).unwrap();
    assert!(matches!(tape.backward(v), Err(NumericsError::Contract(_))));
}

fn probs(logits: Vec<f64>) -> Vec<f64> {
    let mut tape = Tape::new();
    let n = logits.len();
    let l = tape.constant(NdArray::matrix(n, 1, logits).unwrap()).unwrap();
    let p = softmax_probs(&mut tape, l).unwrap();
    tape.value(p).data().to_vec()
}

#[test]
fn softmax_examples() {
    assert_eq!(probs(vec![0.7; 4]), vec![0.25; 4]);
    assert_eq!(probs(vec![-3.0]), vec![1.0]);
    let p = probs(vec![0.0, 3f64.ln()]);
    assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
}

#[test]
fn masked_columns_get_exact_zeros() {
    let mut tape = Tape::<f64>::new();
    let a = tape
        .constant(NdArray::matrix(2, 3, vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap())
        .unwrap();
    let s = tape
        .masked_softmax_rows(a, Some(&[true, false, true]), Some(&[true, true]))
        .unwrap();
    let v = tape.value(s);
    assert_eq!(v.at(0, 1), 0.0);
    assert_eq!(v.at(1, 1), 0.0);
    assert!((v.at(1, 0) - 0.5).abs() < 1e-15);
    assert!((v.at(0, 0) + v.at(0, 2) - 1.0).abs() < 1e-15);
}

#[test]
fn single_precision_tape_runs() {
    let mut store = ParameterStore::<f32>::new();
    store.insert("w", NdArray::row(vec![1.5f32, -2.0]));
    let mut tape = Tape::new();
    let w = tape.param(&store, "w").unwrap();
    let sq = tape.mul(w, w).unwrap();
    let loss = tape.sum(sq).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(tape.param_grads(&g)["w"].data(), &[3.0f32, -4.0]);
}
