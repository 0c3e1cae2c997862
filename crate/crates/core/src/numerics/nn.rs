//! Neural building blocks recorded on a [`Tape`].

use rand::Rng;

use super::params::ParameterStore;
use super::tape::{Tape, Var};
use super::NumericsError;
use crate::scalar::Scalar;

/// Layer-norm epsilon; small enough that normalized rows keep unit variance.
pub const LAYER_NORM_EPS: f64 = 1e-10;

/// Affine layer `y = x·Wᵀ + b` backed by `{name}.weight` / `{name}.bias`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dense {
    pub weight: String,
    pub bias: Option<String>,
}

impl Dense {
    pub fn register<T: Scalar>(
        store: &mut ParameterStore<T>,
        name: &str,
        out: usize,
        inp: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = format!("{name}.weight");
        store.add_weight(&weight, out, inp, rng);
        let bias = bias.then(|| {
            let b = format!("{name}.bias");
            store.add_zeros(&b, out);
            b
        });
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        x: Var,
    ) -> Result<Var, NumericsError> {
        let w = tape.param(store, &self.weight)?;
        let b = match &self.bias {
            Some(b) => Some(tape.param(store, b)?),
            None => None,
        };
        tape.linear(x, w, b)
    }
}

/// Plain affine map using `{name}.weight` and `{name}.bias`.
pub fn linear_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    x: Var,
    name: &str,
) -> Result<Var, NumericsError> {
    Dense {
        weight: format!("{name}.weight"),
        bias: Some(format!("{name}.bias")),
    }
    .forward(tape, store, x)
}

/// Affine map, layer normalization over each output row, then ReLU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormedDense {
    pub dense: Dense,
    pub gain: String,
    pub shift: String,
}

impl NormedDense {
    pub fn register<T: Scalar>(
        store: &mut ParameterStore<T>,
        name: &str,
        out: usize,
        inp: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let dense = Dense::register(store, name, out, inp, true, rng);
        let gain = format!("{name}.ln_gain");
        let shift = format!("{name}.ln_shift");
        store.add_ones(&gain, out);
        store.add_zeros(&shift, out);
        Self { dense, gain, shift }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        x: Var,
    ) -> Result<Var, NumericsError> {
        let y = self.dense.forward(tape, store, x)?;
        let g = tape.param(store, &self.gain)?;
        let b = tape.param(store, &self.shift)?;
        let n = tape.layer_norm(y, g, b, T::lit(LAYER_NORM_EPS))?;
        tape.relu(n)
    }
}

/// Stack of dense layers with ReLU between them (none after the last).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn register<T: Scalar>(
        store: &mut ParameterStore<T>,
        name: &str,
        dims: &[usize],
        rng: &mut impl Rng,
    ) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::register(store, &format!("{name}.l{i}"), w[1], w[0], true, rng))
            .collect();
        Self { layers }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        mut x: Var,
    ) -> Result<Var, NumericsError> {
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, store, x)?;
            if i < last {
                x = tape.relu(x)?;
            }
        }
        Ok(x)
    }
}

/// Gated recurrent unit with reset, update and candidate gates packed as
/// `[r | z | n]` along the output dimension of both weight matrices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GruCell {
    pub w_ih: String,
    pub w_hh: String,
    pub b_ih: String,
    pub b_hh: String,
    pub hidden: usize,
}

impl GruCell {
    pub fn register<T: Scalar>(
        store: &mut ParameterStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let cell = Self::named(name, hidden);
        store.add_weight(&cell.w_ih, 3 * hidden, input, rng);
        store.add_weight(&cell.w_hh, 3 * hidden, hidden, rng);
        store.add_zeros(&cell.b_ih, 3 * hidden);
        store.add_zeros(&cell.b_hh, 3 * hidden);
        cell
    }

    /// Refers to parameters registered elsewhere under `name`.
    pub fn named(name: &str, hidden: usize) -> Self {
        Self {
            w_ih: format!("{name}.w_ih"),
            w_hh: format!("{name}.w_hh"),
            b_ih: format!("{name}.b_ih"),
            b_hh: format!("{name}.b_hh"),
            hidden,
        }
    }

    /// Input-side gate pre-activations `x·W_ihᵀ + b_ih`.
    pub fn input_gates<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        x: Var,
    ) -> Result<Var, NumericsError> {
        let w = tape.param(store, &self.w_ih)?;
        let b = tape.param(store, &self.b_ih)?;
        tape.linear(x, w, Some(b))
    }

    pub fn step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        x: Var,
        h_prev: Var,
    ) -> Result<Var, NumericsError> {
        let gx = self.input_gates(tape, store, x)?;
        self.step_from_gates(tape, store, gx, h_prev)
    }

    /// Recurrence given precomputed input gates.
    pub fn step_from_gates<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        gx: Var,
        h_prev: Var,
    ) -> Result<Var, NumericsError> {
        let h = self.hidden;
        if tape.shape(gx).1 != 3 * h || tape.shape(h_prev).1 != h {
            return Err(NumericsError::Dimension(format!(
                "gru step: gates {:?} and state {:?} for hidden size {h}",
                tape.value(gx).shape(),
                tape.value(h_prev).shape()
            )));
        }
        let w = tape.param(store, &self.w_hh)?;
        let b = tape.param(store, &self.b_hh)?;
        let gh = tape.linear(h_prev, w, Some(b))?;
        let gx_rz = tape.slice_cols(gx, 0..2 * h)?;
        let gh_rz = tape.slice_cols(gh, 0..2 * h)?;
        let rz_pre = tape.add(gx_rz, gh_rz)?;
        let rz = tape.sigmoid(rz_pre)?;
        let r = tape.slice_cols(rz, 0..h)?;
        let z = tape.slice_cols(rz, h..2 * h)?;
        let gx_n = tape.slice_cols(gx, 2 * h..3 * h)?;
        let gh_n = tape.slice_cols(gh, 2 * h..3 * h)?;
        let gated = tape.mul(r, gh_n)?;
        let n_pre = tape.add(gx_n, gated)?;
        let n = tape.tanh(n_pre)?;
        let diff = tape.sub(h_prev, n)?;
        let keep = tape.mul(z, diff)?;
        tape.add(n, keep)
    }
}

/// Standalone GRU step using parameters registered under `name`.
pub fn gru_cell_step<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    x: Var,
    h_prev: Var,
    name: &str,
) -> Result<Var, NumericsError> {
    let hidden = tape.shape(h_prev).1;
    GruCell::named(name, hidden).step(tape, store, x, h_prev)
}

/// `softmax(Q·Kᵀ/√d_k)·V` with optional key masking and invalid query rows.
pub fn scaled_dot_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    key_mask: Option<&[bool]>,
    row_valid: Option<&[bool]>,
) -> Result<Var, NumericsError> {
    let (_, dq) = tape.shape(q);
    let (nk, dk) = tape.shape(k);
    let (nv, _) = tape.shape(v);
    if dq != dk || nk != nv || dk == 0 {
        return Err(NumericsError::Dimension(format!(
            "attention: Q {:?}, K {:?}, V {:?}",
            tape.value(q).shape(),
            tape.value(k).shape(),
            tape.value(v).shape()
        )));
    }
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let scaled = tape.scale(logits, T::one() / T::from_usize(dk).unwrap().sqrt())?;
    let weights = tape.masked_softmax_rows(scaled, key_mask, row_valid)?;
    tape.matmul(weights, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::NdArray;

    fn scalar_gru(x: f64, h: f64, w_ih: [f64; 3], w_hh: [f64; 3], b_ih: [f64; 3], b_hh: [f64; 3]) -> f64 {
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let r = sig(w_ih[0] * x + b_ih[0] + w_hh[0] * h + b_hh[0]);
        let z = sig(w_ih[1] * x + b_ih[1] + w_hh[1] * h + b_hh[1]);
        let n = (w_ih[2] * x + b_ih[2] + r * (w_hh[2] * h + b_hh[2])).tanh();
        (1.0 - z) * n + z * h
    }

    fn one_unit_store(w_ih: [f64; 3], w_hh: [f64; 3], b_ih: [f64; 3], b_hh: [f64; 3]) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        s.insert("g.w_ih", NdArray::from_vec(vec![3, 1], w_ih.to_vec()).unwrap());
        s.insert("g.w_hh", NdArray::from_vec(vec![3, 1], w_hh.to_vec()).unwrap());
        s.insert("g.b_ih", NdArray::from_vec(vec![3], b_ih.to_vec()).unwrap());
        s.insert("g.b_hh", NdArray::from_vec(vec![3], b_hh.to_vec()).unwrap());
        s
    }

    fn run_gru(s: &ParameterStore<f64>, x: f64, h: f64) -> f64 {
        let mut t = Tape::new();
        let xv = t.constant(NdArray::row(vec![x])).unwrap();
        let hv = t.constant(NdArray::row(vec![h])).unwrap();
        let y = gru_cell_step(&mut t, s, xv, hv, "g").unwrap();
        t.value(y).item()
    }

    #[test]
    fn gru_zero_weights_zero_state_stays_zero() {
        let s = one_unit_store([0.0; 3], [0.0; 3], [0.0; 3], [0.0; 3]);
        assert_eq!(run_gru(&s, 0.7, 0.0), 0.0);
    }

    #[test]
    fn gru_saturated_update_gate_keeps_state() {
        let s = one_unit_store([0.0; 3], [0.0; 3], [0.0, 50.0, 0.0], [0.0; 3]);
        assert!((run_gru(&s, 0.3, 1.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gru_matches_scalar_oracle() {
        let (w_ih, w_hh, b_ih, b_hh) = ([0.5, -1.2, 0.8], [0.3, 0.7, -0.4], [0.1, 0.2, -0.3], [-0.2, 0.05, 0.15]);
        let s = one_unit_store(w_ih, w_hh, b_ih, b_hh);
        let expected = scalar_gru(1.0, 0.0, w_ih, w_hh, b_ih, b_hh);
        assert!((run_gru(&s, 1.0, 0.0) - expected).abs() < 1e-14);
        let expected = scalar_gru(-0.4, 0.6, w_ih, w_hh, b_ih, b_hh);
        assert!((run_gru(&s, -0.4, 0.6) - expected).abs() < 1e-14);
    }

    #[test]
    fn linear_forward_examples() {
        let mut s = ParameterStore::<f64>::new();
        s.insert("id.weight", NdArray::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        s.insert("id.bias", NdArray::zeros(&[2]));
        s.insert("z.weight", NdArray::zeros(&[2, 2]));
        s.insert("z.bias", NdArray::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        s.insert("sum.weight", NdArray::from_rows(&[vec![1.0, 1.0]]).unwrap());
        s.insert("sum.bias", NdArray::zeros(&[1]));
        let mut t = Tape::new();
        let x = t.constant(NdArray::row(vec![3.0, -1.0])).unwrap();
        let y = linear_forward(&mut t, &s, x, "id").unwrap();
        assert_eq!(t.value(y).data(), &[3.0, -1.0]);
        let y = linear_forward(&mut t, &s, x, "z").unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0]);
        let x = t.constant(NdArray::row(vec![2.0, 3.0])).unwrap();
        let y = linear_forward(&mut t, &s, x, "sum").unwrap();
        assert_eq!(t.value(y).data(), &[5.0]);
        let bad = t.constant(NdArray::row(vec![1.0, 2.0, 3.0])).unwrap();
        let err = linear_forward(&mut t, &s, bad, "sum").unwrap_err();
        assert!(err.to_string().contains("[1, 3]") && err.to_string().contains("[1, 2]"));
    }

    #[test]
    fn attention_examples() {
        let mut t = Tape::<f64>::new();
        // single row: output is the value row
        let q = t.constant(NdArray::row(vec![0.3, -0.2])).unwrap();
        let v = t.constant(NdArray::row(vec![4.0, 5.0, 6.0])).unwrap();
        let out = scaled_dot_attention(&mut t, q, q, v, None, None).unwrap();
        assert_eq!(t.value(out).data(), &[4.0, 5.0, 6.0]);
        // zero queries: uniform weights, mean of values
        let q = t.constant(NdArray::zeros(&[2, 1])).unwrap();
        let k = t.constant(NdArray::from_rows(&[vec![1.0], vec![-2.0]]).unwrap()).unwrap();
        let v = t.constant(NdArray::from_rows(&[vec![2.0], vec![6.0]]).unwrap()).unwrap();
        let out = scaled_dot_attention(&mut t, q, k, v, None, None).unwrap();
        assert_eq!(t.value(out).data(), &[4.0, 4.0]);
        // logits (0, ln 3) → weights (0.25, 0.75)
        let q = t.constant(NdArray::row(vec![1.0])).unwrap();
        let k = t.constant(NdArray::from_rows(&[vec![0.0], vec![3f64.ln()]]).unwrap()).unwrap();
        let v = t.constant(NdArray::from_rows(&[vec![8.0], vec![4.0]]).unwrap()).unwrap();
        let out = scaled_dot_attention(&mut t, q, k, v, None, None).unwrap();
        assert!((t.value(out).item() - (0.25 * 8.0 + 0.75 * 4.0)).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_rows_have_zero_mean_unit_variance() {
        let mut t = Tape::<f64>::new();
        let x = t
            .constant(NdArray::from_rows(&[vec![1.0, 5.0, -2.0, 0.5], vec![10.0, 10.5, 9.0, 8.0]]).unwrap())
            .unwrap();
        let g = t.constant(NdArray::filled(&[4], 1.0)).unwrap();
        let b = t.constant(NdArray::zeros(&[4])).unwrap();
        let y = t.layer_norm(x, g, b, LAYER_NORM_EPS).unwrap();
        for r in 0..2 {
            let row = t.value(y).row_slice(r);
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6);
        }
    }
}
