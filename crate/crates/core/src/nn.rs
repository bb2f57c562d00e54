//! Layers shared by the language model and the translator, composed from tape primitives.

use rand::Rng;

use crate::numcore::{NumError, ParamId, ParamStore, Tape, Tensor, Var};

/// Inverted dropout: zeroes each element with probability `p` and rescales survivors.
pub fn dropout<R: Rng>(tape: &mut Tape, x: Var, p: f64, rng: &mut R) -> Result<Var, NumError> {
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - p;
    let shape = tape.value(x).shape().to_vec();
    let n = tape.value(x).len();
    let mask = (0..n).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
    let m = tape.leaf(Tensor::new(shape, mask)?)?;
    tape.mul(x, m)
}

/// Affine map `y = W x + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self, NumError> {
        let w = store.add_uniform(format!("{name}.w"), &[output, input], rng)?;
        let b = store.add_uniform(format!("{name}.b"), &[output], rng)?;
        Ok(Linear { w, b })
    }

    pub fn from_store(store: &ParamStore, name: &str) -> Result<Self, NumError> {
        Ok(Linear { w: lookup(store, &format!("{name}.w"))?, b: lookup(store, &format!("{name}.b"))? })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, NumError> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.affine(x, w, Some(b))
    }

    pub fn output_dim(&self, store: &ParamStore) -> usize {
        store.get(self.w).value.shape()[0]
    }

    pub fn input_dim(&self, store: &ParamStore) -> usize {
        store.get(self.w).value.shape()[1]
    }
}

pub(crate) fn lookup(store: &ParamStore, name: &str) -> Result<ParamId, NumError> {
    store
        .id(name)
        .ok_or_else(|| NumError::Checkpoint(format!("missing parameter {name:?}")))
}

/// Hidden and cell vectors of every layer, each `[B, H]`.
#[derive(Clone, Debug)]
pub struct LstmState {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
}

impl LstmState {
    pub fn top(&self) -> Var {
        *self.h.last().expect("at least one layer")
    }

    /// Per-row choice between `self` (mask true) and `other`.
    pub fn select(&self, tape: &mut Tape, mask: &[bool], other: &LstmState) -> Result<LstmState, NumError> {
        let mut h = Vec::with_capacity(self.h.len());
        let mut c = Vec::with_capacity(self.c.len());
        for k in 0..self.h.len() {
            h.push(tape.select_rows(mask, self.h[k], other.h[k])?);
            c.push(tape.select_rows(mask, self.c[k], other.c[k])?);
        }
        Ok(LstmState { h, c })
    }
}

/// Stacked LSTM; each layer's gates come from one affine map of `[x; h]`
/// laid out as input, forget, candidate, output.
#[derive(Clone, Debug)]
pub struct Lstm {
    layers: Vec<Linear>,
    hidden: usize,
}

impl Lstm {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        depth: usize,
        rng: &mut R,
    ) -> Result<Self, NumError> {
        if depth == 0 || hidden == 0 {
            return Err(NumError::Domain("lstm needs at least one layer and unit".into()));
        }
        let mut layers = Vec::with_capacity(depth);
        for k in 0..depth {
            let inp = if k == 0 { input } else { hidden };
            layers.push(Linear::new(store, &format!("{name}.l{k}"), inp + hidden, 4 * hidden, rng)?);
        }
        Ok(Lstm { layers, hidden })
    }

    pub fn from_store(store: &ParamStore, name: &str) -> Result<Self, NumError> {
        let mut layers = Vec::new();
        while store.id(&format!("{name}.l{}.w", layers.len())).is_some() {
            layers.push(Linear::from_store(store, &format!("{name}.l{}", layers.len()))?);
        }
        let first = layers
            .first()
            .ok_or_else(|| NumError::Checkpoint(format!("no layers for {name:?}")))?;
        let hidden = first.output_dim(store) / 4;
        Ok(Lstm { layers, hidden })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self, store: &ParamStore) -> usize {
        self.layers[0].input_dim(store) - self.hidden
    }

    pub fn zero_state(&self, tape: &mut Tape, batch: usize) -> Result<LstmState, NumError> {
        let z = tape.leaf(Tensor::zeros(&[batch, self.hidden]))?;
        Ok(LstmState { h: vec![z; self.layers.len()], c: vec![z; self.layers.len()] })
    }

    /// One time step for every layer. Dropout, when given, is applied to each
    /// layer's input.
    pub fn step<R: Rng>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        state: &LstmState,
        mut dropout_rng: Option<(f64, &mut R)>,
    ) -> Result<LstmState, NumError> {
        let mut input = x;
        let mut h_out = Vec::with_capacity(self.layers.len());
        let mut c_out = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate() {
            if let Some((p, rng)) = dropout_rng.as_mut() {
                input = dropout(tape, input, *p, *rng)?;
            }
            let (h, c) = lstm_cell(tape, store, layer, self.hidden, input, state.h[k], state.c[k])?;
            h_out.push(h);
            c_out.push(c);
            input = h;
        }
        Ok(LstmState { h: h_out, c: c_out })
    }
}

/// A single LSTM cell update, returning `(h', c')`.
pub fn lstm_cell(
    tape: &mut Tape,
    store: &ParamStore,
    gates_map: &Linear,
    hidden: usize,
    x: Var,
    h: Var,
    c: Var,
) -> Result<(Var, Var), NumError> {
    let xh = tape.concat(&[x, h])?;
    let gates = gates_map.forward(tape, store, xh)?;
    let i = tape.slice_cols(gates, 0, hidden)?;
    let i = tape.sigmoid(i)?;
    let f = tape.slice_cols(gates, hidden, hidden)?;
    let f = tape.sigmoid(f)?;
    let g = tape.slice_cols(gates, 2 * hidden, hidden)?;
    let g = tape.tanh(g)?;
    let o = tape.slice_cols(gates, 3 * hidden, hidden)?;
    let o = tape.sigmoid(o)?;
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_new = tape.add(fc, ig)?;
    let tc = tape.tanh(c_new)?;
    let h_new = tape.mul(o, tc)?;
    Ok((h_new, c_new))
}
