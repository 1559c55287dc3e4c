//! Layer primitives built on the tape. Each layer is a small description
//! (name prefix plus extents) that knows how to create its parameters in a
//! [`ParamStore`] and how to apply them inside a [`Graph`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Graph, NodeId, ParamStore, Real, SeqLayout, Tensor};

fn uniform<F: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<F> {
    let a = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| F::from_f64_lossy(rng.random_range(-a..a)))
}

fn check_cols<F: Real>(g: &Graph<F>, x: NodeId, want: usize, what: &str) -> Result<()> {
    let (_, c) = g.dims(x);
    if c != want {
        return Err(Error::DimensionMismatch(format!(
            "{what} expects {want} input features, got {c}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Self {
            name: name.into(),
            in_dim,
            out_dim,
            bias: true,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<F: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<F>, rng: &mut R) {
        store.insert(
            self.weight_name(),
            uniform(&[self.in_dim, self.out_dim], self.in_dim, rng),
        );
        if self.bias {
            store.insert(self.bias_name(), Tensor::zeros(&[self.out_dim]));
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: NodeId) -> Result<NodeId> {
        check_cols(g, x, self.in_dim, &self.name)?;
        let w = g.param(store, &self.weight_name())?;
        let y = g.matmul(x, w)?;
        if self.bias {
            let b = g.param(store, &self.bias_name())?;
            g.add_bias(y, b)
        } else {
            Ok(y)
        }
    }
}

/// Same-padded 1-D convolution with bias; weight is `[c_out, c_in, kernel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub bias: bool,
}

impl Conv1d {
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::EvenKernel(kernel));
        }
        Ok(Self {
            name: name.into(),
            c_in,
            c_out,
            kernel,
            bias: true,
        })
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn init<F: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<F>, rng: &mut R) {
        store.insert(
            format!("{}.weight", self.name),
            uniform(&[self.c_out, self.c_in, self.kernel], self.c_in * self.kernel, rng),
        );
        if self.bias {
            store.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.c_out]));
        }
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: NodeId,
        layout: SeqLayout,
    ) -> Result<NodeId> {
        check_cols(g, x, self.c_in, &self.name)?;
        let w = g.param(store, &format!("{}.weight", self.name))?;
        let y = g.conv1d(x, w, self.kernel, layout)?;
        if self.bias {
            let b = g.param(store, &format!("{}.bias", self.name))?;
            g.add_bias(y, b)
        } else {
            Ok(y)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub name: String,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(name: impl Into<String>, vocab: usize, dim: usize) -> Self {
        Self {
            name: name.into(),
            vocab,
            dim,
        }
    }

    pub fn init<F: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<F>, rng: &mut R) {
        // One-hot input view: fan-in is the vocabulary size.
        store.insert(
            format!("{}.weight", self.name),
            uniform(&[self.vocab, self.dim], self.vocab, rng),
        );
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, ids: &[usize]) -> Result<NodeId> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab) {
            return Err(Error::DimensionMismatch(format!(
                "id {bad} outside vocabulary of {}",
                self.vocab
            )));
        }
        let w = g.param(store, &format!("{}.weight", self.name))?;
        g.gather_rows(w, ids.iter().map(|&i| Some(i)).collect())
    }
}

/// Single LSTM layer, gates ordered (input, forget, cell, output).
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    pub name: String,
    pub input: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(name: impl Into<String>, input: usize, hidden: usize) -> Self {
        Self {
            name: name.into(),
            input,
            hidden,
        }
    }

    pub fn w_ih(&self) -> String {
        format!("{}.w_ih", self.name)
    }

    pub fn w_hh(&self) -> String {
        format!("{}.w_hh", self.name)
    }

    pub fn bias(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<F: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<F>, rng: &mut R) {
        let h = self.hidden;
        store.insert(self.w_ih(), uniform(&[self.input, 4 * h], self.input, rng));
        store.insert(self.w_hh(), uniform(&[h, 4 * h], h, rng));
        let mut b = Tensor::zeros(&[4 * h]);
        for v in &mut b.data_mut()[h..2 * h] {
            *v = F::one();
        }
        store.insert(self.bias(), b);
    }

    /// One step from precomputed gate pre-activations (`B x 4H`, input part
    /// and bias already included).
    pub fn step_from_gates<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        pre: NodeId,
        h: NodeId,
        c: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let w_hh = g.param(store, &self.w_hh())?;
        let rec = g.matmul(h, w_hh)?;
        let gates = g.add(pre, rec)?;
        let c2 = g.lstm_cell_c(gates, c)?;
        let h2 = g.lstm_cell_h(gates, c2)?;
        Ok((h2, c2))
    }

    /// One full step: `x` is `B x input`, `h`/`c` are `B x hidden`.
    pub fn step<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: NodeId,
        h: NodeId,
        c: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        check_cols(g, x, self.input, &self.name)?;
        check_cols(g, h, self.hidden, &self.name)?;
        check_cols(g, c, self.hidden, &self.name)?;
        if g.dims(x).0 != g.dims(h).0 || g.dims(h).0 != g.dims(c).0 {
            return Err(Error::DimensionMismatch(format!("{}: batch sizes differ", self.name)));
        }
        let w_ih = g.param(store, &self.w_ih())?;
        let b = g.param(store, &self.bias())?;
        let xi = g.matmul(x, w_ih)?;
        let pre = g.add_bias(xi, b)?;
        self.step_from_gates(g, store, pre, h, c)
    }

    /// Runs the layer over a time-major `steps*batch x input` sequence from
    /// a zero state. Output rows past an item's length are unspecified.
    pub fn sequence<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: NodeId,
        steps: usize,
        batch: usize,
    ) -> Result<NodeId> {
        check_cols(g, x, self.input, &self.name)?;
        let w_ih = g.param(store, &self.w_ih())?;
        let b = g.param(store, &self.bias())?;
        let xi = g.matmul(x, w_ih)?;
        let pre_all = g.add_bias(xi, b)?;
        let mut h = g.zeros(batch, self.hidden);
        let mut c = g.zeros(batch, self.hidden);
        let mut outs = Vec::with_capacity(steps);
        for t in 0..steps {
            let pre = g.slice_rows(pre_all, t * batch, batch)?;
            let (h2, c2) = self.step_from_gates(g, store, pre, h, c)?;
            outs.push(h2);
            h = h2;
            c = c2;
        }
        g.concat_rows(&outs)
    }
}

/// Single GRU layer with separate input and hidden biases, gates ordered
/// (reset, update, new).
#[derive(Debug, Clone, PartialEq)]
pub struct Gru {
    pub name: String,
    pub input: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new(name: impl Into<String>, input: usize, hidden: usize) -> Self {
        Self {
            name: name.into(),
            input,
            hidden,
        }
    }

    fn p(&self, what: &str) -> String {
        format!("{}.{what}", self.name)
    }

    pub fn init<F: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<F>, rng: &mut R) {
        let h = self.hidden;
        store.insert(self.p("w_ih"), uniform(&[self.input, 3 * h], self.input, rng));
        store.insert(self.p("w_hh"), uniform(&[h, 3 * h], h, rng));
        store.insert(self.p("b_ih"), Tensor::zeros(&[3 * h]));
        store.insert(self.p("b_hh"), Tensor::zeros(&[3 * h]));
    }

    pub fn step<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: NodeId,
        h: NodeId,
    ) -> Result<NodeId> {
        check_cols(g, x, self.input, &self.name)?;
        check_cols(g, h, self.hidden, &self.name)?;
        let w_ih = g.param(store, &self.p("w_ih"))?;
        let b_ih = g.param(store, &self.p("b_ih"))?;
        let xi = g.matmul(x, w_ih)?;
        let gx = g.add_bias(xi, b_ih)?;
        self.step_from_input(g, store, gx, h)
    }

    fn step_from_input<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        gx: NodeId,
        h: NodeId,
    ) -> Result<NodeId> {
        let w_hh = g.param(store, &self.p("w_hh"))?;
        let b_hh = g.param(store, &self.p("b_hh"))?;
        let hh = g.matmul(h, w_hh)?;
        let gh = g.add_bias(hh, b_hh)?;
        g.gru_cell(gx, gh, h)
    }

    /// Time-major sequence from a zero state; see [`Lstm::sequence`].
    pub fn sequence<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: NodeId,
        steps: usize,
        batch: usize,
    ) -> Result<NodeId> {
        check_cols(g, x, self.input, &self.name)?;
        let w_ih = g.param(store, &self.p("w_ih"))?;
        let b_ih = g.param(store, &self.p("b_ih"))?;
        let xi = g.matmul(x, w_ih)?;
        let gx_all = g.add_bias(xi, b_ih)?;
        let mut h = g.zeros(batch, self.hidden);
        let mut outs = Vec::with_capacity(steps);
        for t in 0..steps {
            let gx = g.slice_rows(gx_all, t * batch, batch)?;
            h = self.step_from_input(g, store, gx, h)?;
            outs.push(h);
        }
        g.concat_rows(&outs)
    }
}

/// Row permutation reversing each item's valid prefix in a time-major
/// layout; padded rows map to zeros. The permutation is its own inverse on
/// valid rows.
pub fn reverse_index(steps: usize, lengths: &[usize]) -> Vec<Option<usize>> {
    let batch = lengths.len();
    let mut idx = vec![None; steps * batch];
    for (b, &len) in lengths.iter().enumerate() {
        for t in 0..len {
            idx[t * batch + b] = Some((len - 1 - t) * batch + b);
        }
    }
    idx
}

/// Zeroes rows past each item's length in a time-major layout.
fn valid_index(steps: usize, lengths: &[usize]) -> Vec<Option<usize>> {
    let batch = lengths.len();
    let mut idx = vec![None; steps * batch];
    for (b, &len) in lengths.iter().enumerate() {
        for t in 0..len {
            idx[t * batch + b] = Some(t * batch + b);
        }
    }
    idx
}

/// A recurrent layer usable inside [`bidirectional`].
pub trait Recurrent {
    fn hidden(&self) -> usize;
    fn run<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: NodeId,
        steps: usize,
        batch: usize,
    ) -> Result<NodeId>;
}

impl Recurrent for Lstm {
    fn hidden(&self) -> usize {
        self.hidden
    }
    fn run<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, x: NodeId, t: usize, b: usize) -> Result<NodeId> {
        self.sequence(g, s, x, t, b)
    }
}

impl Recurrent for Gru {
    fn hidden(&self) -> usize {
        self.hidden
    }
    fn run<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, x: NodeId, t: usize, b: usize) -> Result<NodeId> {
        self.sequence(g, s, x, t, b)
    }
}

/// Bidirectional wrapper over a time-major, length-aware batch. Output is
/// `steps*batch x 2H`: forward half first, backward half second, padded rows
/// zero.
pub fn bidirectional<F: Real, L: Recurrent>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    fwd: &L,
    bwd: &L,
    x: NodeId,
    steps: usize,
    lengths: &[usize],
) -> Result<NodeId> {
    let batch = lengths.len();
    if g.dims(x).0 != steps * batch {
        return Err(Error::DimensionMismatch(format!(
            "bidirectional input has {} rows, expected {}",
            g.dims(x).0,
            steps * batch
        )));
    }
    let f_raw = fwd.run(g, store, x, steps, batch)?;
    let f_out = if lengths.iter().all(|&l| l == steps) {
        f_raw
    } else {
        g.gather_rows(f_raw, valid_index(steps, lengths))?
    };
    let rev = reverse_index(steps, lengths);
    let x_rev = g.gather_rows(x, rev.clone())?;
    let b_raw = bwd.run(g, store, x_rev, steps, batch)?;
    let b_out = g.gather_rows(b_raw, rev)?;
    g.concat_cols(&[f_out, b_out])
}

/// Inverted dropout: keeps each element with probability `1 - p`, scaling by
/// `1 / (1 - p)`. A no-op when `p == 0`.
pub fn dropout<F: Real, R: Rng + ?Sized>(g: &mut Graph<F>, x: NodeId, p: f64, rng: &mut R) -> Result<NodeId> {
    if p <= 0.0 {
        return Ok(x);
    }
    let (r, c) = g.dims(x);
    let keep = F::from_f64_lossy(1.0 / (1.0 - p));
    let mask: Vec<F> = (0..r * c)
        .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
        .collect();
    let m = g.constant(r, c, mask)?;
    g.mul(x, m)
}

/// One LSTM step as a free function: `(h', c') = lstm(x, h, c)`.
pub fn lstm_step<F: Real>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    layer: &Lstm,
    x: NodeId,
    h: NodeId,
    c: NodeId,
) -> Result<(NodeId, NodeId)> {
    layer.step(g, store, x, h, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lstm_zero_everything_gives_zero_state() {
        let layer = Lstm::new("l", 3, 4);
        let mut store = ParamStore::<f64>::new();
        store.insert(layer.w_ih(), Tensor::zeros(&[3, 16]));
        store.insert(layer.w_hh(), Tensor::zeros(&[4, 16]));
        store.insert(layer.bias(), Tensor::zeros(&[16]));
        let mut g = Graph::new();
        let x = g.zeros(1, 3);
        let h = g.zeros(1, 4);
        let c = g.zeros(1, 4);
        let (h2, c2) = lstm_step(&mut g, &store, &layer, x, h, c).unwrap();
        assert!(g.value(h2).data.iter().all(|&v| v == 0.0));
        assert!(g.value(c2).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        let layer = Lstm::new("l", 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        layer.init(&mut store, &mut rng);
        store.insert(layer.w_ih(), Tensor::zeros(&[2, 12]));
        store.insert(layer.w_hh(), Tensor::zeros(&[3, 12]));
        let mut b = Tensor::zeros(&[12]);
        // forget bias 20, input gate strongly closed
        for j in 0..3 {
            b.data_mut()[j] = -20.0;
            b.data_mut()[3 + j] = 20.0;
        }
        store.insert(layer.bias(), b);
        let mut g = Graph::new();
        let x = g.constant(1, 2, vec![0.3, -0.7]).unwrap();
        let h = g.constant(1, 3, vec![0.1, 0.2, 0.3]).unwrap();
        let c = g.constant(1, 3, vec![0.5, -1.5, 2.0]).unwrap();
        let (_, c2) = lstm_step(&mut g, &store, &layer, x, h, c).unwrap();
        for (a, b) in g.value(c2).data.iter().zip(&[0.5, -1.5, 2.0]) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn lstm_step_rejects_bad_dims() {
        let layer = Lstm::new("l", 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        layer.init(&mut store, &mut rng);
        let mut g = Graph::new();
        let x = g.zeros(1, 5);
        let h = g.zeros(1, 3);
        let c = g.zeros(1, 3);
        assert!(matches!(
            lstm_step(&mut g, &store, &layer, x, h, c),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn lstm_init_sets_forget_bias() {
        let layer = Lstm::new("l", 2, 3);
        let mut store = ParamStore::<f32>::new();
        layer.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let b = store.get(&layer.bias()).unwrap().data();
        assert_eq!(&b[0..3], &[0.0; 3]);
        assert_eq!(&b[3..6], &[1.0; 3]);
        assert_eq!(&b[6..12], &[0.0; 6]);
    }

    #[test]
    fn reverse_index_is_an_involution_on_valid_rows() {
        let idx = reverse_index(4, &[4, 2]);
        for (i, src) in idx.iter().enumerate() {
            if let Some(s) = src {
                assert_eq!(idx[*s], Some(i));
            }
        }
        assert_eq!(idx[2 * 2 + 1], None);
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let y = dropout(&mut g, x, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(x, y);
    }
}
