//! Dense multilayer perceptrons with hand-written backward passes.
//!
//! Every learned function in the crate is an [`Mlp`]. Losses are assembled
//! by running [`Mlp::forward`] to obtain a [`Tape`], then feeding an output
//! gradient to [`Mlp::backward_into`]. There is no autodiff graph.
//!
//! Weights are stored row-major with shape `(out, in)`.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Mish,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Mish => x * mish_parts(x).0,
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative with respect to the pre-activation `x`.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Mish => {
                let (t, one_minus_t2, sig) = mish_parts(x);
                t + x * one_minus_t2 * sig
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// `(tanh(softplus(x)), 1 - tanh(softplus(x))^2, sigmoid(x))` from one `exp`,
/// using `tanh(ln(1 + e)) = n / (n + 2)` with `n = e (e + 2)`.
#[inline]
fn mish_parts(x: f64) -> (f64, f64, f64) {
    if x > 20.0 {
        return (1.0, 0.0, 1.0);
    }
    let e = x.exp();
    let n = e * (e + 2.0);
    let d = n + 2.0;
    (n / d, 4.0 * (n + 1.0) / (d * d), e / (1.0 + e))
}

/// Feature-major layout of `concat(zs[r], actions[r])` for [`Mlp::infer_cols`].
pub(crate) fn pair_cols(zs: &[Vec<f64>], actions: &[Vec<f64>]) -> Vec<f64> {
    let n = zs.len();
    let (l, a) = (zs.first().map_or(0, Vec::len), actions.first().map_or(0, Vec::len));
    let mut x = vec![0.0; (l + a) * n];
    for (r, (z, act)) in zs.iter().zip(actions).enumerate() {
        for (k, v) in z.iter().chain(act).enumerate() {
            x[k * n + r] = *v;
        }
    }
    x
}

/// Feature-major layout of `rows`.
pub(crate) fn row_cols(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    let mut x = vec![0.0; d * n];
    for (r, row) in rows.iter().enumerate() {
        for (k, v) in row.iter().enumerate() {
            x[k * n + r] = *v;
        }
    }
    x
}

/// Column `r` of a feature-major matrix with `n` columns.
pub(crate) fn column(x: &[f64], n: usize, r: usize) -> Vec<f64> {
    x.iter().skip(r).step_by(n).copied().collect()
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
    /// Inverted-dropout rate applied after the activation in train mode.
    pub dropout: f64,
}

impl Layer {
    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Activation cache recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    masks: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn input(&self) -> &[f64] {
        &self.inputs[0]
    }
}

impl Mlp {
    /// Builds a net with layer widths `dims`; hidden layers use `hidden`, the
    /// last layer `output`. Weights are uniform in `±sqrt(1/fan_in)`, biases zero.
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2, "an mlp needs at least input and output widths");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (dims[i], dims[i + 1]);
                let bound = (1.0 / fan_in as f64).sqrt();
                let weight = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect();
                Layer {
                    in_dim: fan_in,
                    out_dim: fan_out,
                    weight,
                    bias: vec![0.0; fan_out],
                    activation: if i + 1 == n { output } else { hidden },
                    dropout: 0.0,
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Format("mlp without layers".into()));
        }
        for w in layers.windows(2) {
            check_len("mlp layer chaining", w[0].out_dim, w[1].in_dim)?;
        }
        for l in &layers {
            check_len("layer weight", l.in_dim * l.out_dim, l.weight.len())?;
            check_len("layer bias", l.out_dim, l.bias.len())?;
        }
        Ok(Mlp { layers })
    }

    /// Sets the dropout rate of layer `index`.
    pub fn with_dropout(mut self, index: usize, rate: f64) -> Self {
        assert!((0.0..1.0).contains(&rate));
        self.layers[index].dropout = rate;
        self
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn zero_params(&mut self) {
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|w| *w = 0.0);
            l.bias.iter_mut().for_each(|b| *b = 0.0);
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Flat parameter access in (layer, weight-then-bias) order, matching
    /// [`MlpGrads::param`].
    pub fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for l in &mut self.layers {
            if index < l.weight.len() {
                return &mut l.weight[index];
            }
            index -= l.weight.len();
            if index < l.bias.len() {
                return &mut l.bias[index];
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
    }

    /// Evaluation-mode forward pass without recording a tape.
    pub fn infer(&self, input: &[f64]) -> Vec<f64> {
        debug_assert_eq!(input.len(), self.in_dim());
        let mut x = input.to_vec();
        for l in &self.layers {
            let mut y = Vec::with_capacity(l.out_dim);
            for (row, b) in l.weight.chunks_exact(l.in_dim).zip(&l.bias) {
                y.push(l.activation.apply(dot(row, &x) + b));
            }
            x = y;
        }
        x
    }

    /// Evaluation-mode forward pass over `n` inputs at once, stored
    /// feature-major: `x[k * n + r]` is feature `k` of input `r`. The output
    /// uses the same layout. Agrees with [`Mlp::infer`] up to rounding.
    pub fn infer_cols(&self, x: &[f64], n: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim() * n);
        let mut cur = x.to_vec();
        for l in &self.layers {
            let mut y = vec![0.0; l.out_dim * n];
            for (o, yrow) in y.chunks_exact_mut(n).enumerate() {
                let wrow = &l.weight[o * l.in_dim..(o + 1) * l.in_dim];
                yrow.fill(l.bias[o]);
                let wq = wrow.chunks_exact(4);
                let rem = wq.remainder();
                for (q, w) in wq.enumerate() {
                    let base = 4 * q * n;
                    let x0 = &cur[base..base + n];
                    let x1 = &cur[base + n..base + 2 * n];
                    let x2 = &cur[base + 2 * n..base + 3 * n];
                    let x3 = &cur[base + 3 * n..base + 4 * n];
                    let (w0, w1, w2, w3) = (w[0], w[1], w[2], w[3]);
                    for ((((y, a), b), c), d) in yrow.iter_mut().zip(x0).zip(x1).zip(x2).zip(x3) {
                        *y += (w0 * a + w1 * b) + (w2 * c + w3 * d);
                    }
                }
                let k0 = wrow.len() - rem.len();
                for (k, &w) in rem.iter().enumerate() {
                    axpy(w, &cur[(k0 + k) * n..(k0 + k + 1) * n], yrow);
                }
                for v in yrow.iter_mut() {
                    *v = l.activation.apply(*v);
                }
            }
            cur = y;
        }
        cur
    }

    /// Deterministic forward pass (dropout disabled).
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        self.run(input, None)
    }

    /// Train-mode forward pass: dropout masks are drawn from `rng`.
    pub fn forward_train(&self, input: &[f64], rng: &mut dyn RngCore) -> Result<(Vec<f64>, Tape)> {
        self.run(input, Some(rng))
    }

    fn run(&self, input: &[f64], mut rng: Option<&mut dyn RngCore>) -> Result<(Vec<f64>, Tape)> {
        check_len("mlp input", self.in_dim(), input.len())?;
        check_finite("mlp input", input)?;
        let n = self.layers.len();
        let mut tape = Tape {
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            masks: Vec::with_capacity(n),
        };
        let mut x = input.to_vec();
        for l in &self.layers {
            let pre: Vec<f64> = l
                .weight
                .chunks_exact(l.in_dim)
                .zip(&l.bias)
                .map(|(row, b)| dot(row, &x) + b)
                .collect();
            let mut y: Vec<f64> = pre.iter().map(|&p| l.activation.apply(p)).collect();
            let mask = match rng.as_deref_mut() {
                Some(r) if l.dropout > 0.0 => {
                    let keep = 1.0 / (1.0 - l.dropout);
                    let m: Vec<f64> = (0..l.out_dim)
                        .map(|_| if r.random::<f64>() < l.dropout { 0.0 } else { keep })
                        .collect();
                    y.iter_mut().zip(&m).for_each(|(v, k)| *v *= k);
                    Some(m)
                }
                _ => None,
            };
            tape.inputs.push(x);
            tape.pre.push(pre);
            tape.masks.push(mask);
            x = y;
        }
        Ok((x, tape))
    }

    pub fn backward(&self, tape: &Tape, output_grad: &[f64]) -> Result<(MlpGrads, Vec<f64>)> {
        let mut grads = MlpGrads::zeros_like(self);
        let input_grad = self.backward_into(tape, output_grad, &mut grads)?;
        Ok((grads, input_grad))
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the network input.
    pub fn backward_into(&self, tape: &Tape, output_grad: &[f64], grads: &mut MlpGrads) -> Result<Vec<f64>> {
        self.backprop(tape, output_grad, Some(grads))
    }

    /// Gradient with respect to the input only; parameter gradients are skipped.
    pub fn input_grad(&self, tape: &Tape, output_grad: &[f64]) -> Result<Vec<f64>> {
        self.backprop(tape, output_grad, None)
    }

    fn backprop(&self, tape: &Tape, output_grad: &[f64], mut grads: Option<&mut MlpGrads>) -> Result<Vec<f64>> {
        check_len("mlp output grad", self.out_dim(), output_grad.len())?;
        check_len("mlp tape depth", self.layers.len(), tape.pre.len())?;
        let mut g = output_grad.to_vec();
        for (i, l) in self.layers.iter().enumerate().rev() {
            if let Some(mask) = &tape.masks[i] {
                g.iter_mut().zip(mask).for_each(|(gi, m)| *gi *= m);
            }
            for (gi, &p) in g.iter_mut().zip(&tape.pre[i]) {
                *gi *= l.activation.derivative(p);
            }
            let input = &tape.inputs[i];
            let mut gin = vec![0.0; l.in_dim];
            for (o, &go) in g.iter().enumerate() {
                if go == 0.0 {
                    continue;
                }
                let row = o * l.in_dim..(o + 1) * l.in_dim;
                if let Some(gr) = grads.as_deref_mut() {
                    let lg = &mut gr.layers[i];
                    axpy(go, input, &mut lg.weight[row.clone()]);
                    lg.bias[o] += go;
                }
                axpy(go, &l.weight[row], &mut gin);
            }
            g = gin;
        }
        Ok(g)
    }

    /// `self <- tau * online + (1 - tau) * self`, elementwise.
    /// Written as `self + tau * (online - self)` so that equal parameters and
    /// `tau = 1` are exact.
    pub fn soft_update_from(&mut self, online: &Mlp, tau: f64) {
        for (t, o) in self.layers.iter_mut().zip(&online.layers) {
            let pairs = t.weight.iter_mut().zip(&o.weight).chain(t.bias.iter_mut().zip(&o.bias));
            for (tv, ov) in pairs {
                *tv = if tau == 1.0 { *ov } else { *tv + tau * (ov - *tv) };
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients shaped like one [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrads>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        MlpGrads {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weight: vec![0.0; l.weight.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn param(&self, index: usize) -> f64 {
        *self.values().nth(index).expect("gradient index out of range")
    }

    pub fn scale(&mut self, k: f64) {
        self.values_mut().for_each(|v| *v *= k);
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += b;
        }
    }

    fn sum_sq(&self) -> f64 {
        self.values().map(|v| v * v).sum()
    }
}

/// Gradients for a group of nets updated by one optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    nets: Vec<MlpGrads>,
    norm: f64,
}

impl GradBundle {
    pub fn new(nets: Vec<MlpGrads>) -> Self {
        let norm = nets.iter().map(MlpGrads::sum_sq).sum::<f64>().sqrt();
        GradBundle { nets, norm }
    }

    pub fn zeros_like(nets: &[&Mlp]) -> Self {
        GradBundle::new(nets.iter().map(|n| MlpGrads::zeros_like(n)).collect())
    }

    /// Global Euclidean norm over every entry.
    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn nets(&self) -> &[MlpGrads] {
        &self.nets
    }

    pub fn into_nets(self) -> Vec<MlpGrads> {
        self.nets
    }

    pub fn is_finite(&self) -> bool {
        self.norm.is_finite()
    }

    /// Rescales uniformly so the global norm is at most `max_norm`.
    pub fn clip_global_norm(mut self, max_norm: f64) -> Self {
        debug_assert!(max_norm > 0.0);
        if self.norm > max_norm {
            let k = max_norm / self.norm;
            for n in &mut self.nets {
                n.scale(k);
            }
            self.norm = self.nets.iter().map(MlpGrads::sum_sq).sum::<f64>().sqrt();
        }
        self
    }
}

/// A set of nets trained together under one optimizer.
pub trait ParamGroup {
    fn nets(&self) -> Vec<&Mlp>;
    fn nets_mut(&mut self) -> Vec<&mut Mlp>;
}

impl ParamGroup for Mlp {
    fn nets(&self) -> Vec<&Mlp> {
        vec![self]
    }
    fn nets_mut(&mut self) -> Vec<&mut Mlp> {
        vec![self]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<MlpGrads>,
    pub v: Vec<MlpGrads>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(nets: &[&Mlp], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<MlpGrads> = nets.iter().map(|n| MlpGrads::zeros_like(n)).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// Bias-corrected Adam update. Refuses non-finite gradients without touching
/// parameters or state.
pub fn adam_step(nets: &mut [&mut Mlp], state: &mut AdamState, grads: &GradBundle, lr: f64) -> Result<()> {
    check_len("adam net count", state.m.len(), nets.len())?;
    check_len("adam grad count", nets.len(), grads.nets.len())?;
    for (n, g) in nets.iter().zip(&grads.nets) {
        check_len("adam grad size", n.param_count(), g.values().count())?;
    }
    if !grads.is_finite() {
        return Err(Error::Numeric("adam gradients".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (k, net) in nets.iter_mut().enumerate() {
        let (m, v, g) = (&mut state.m[k], &mut state.v[k], &grads.nets[k]);
        let layers = net.layers.iter_mut().zip(m.layers.iter_mut()).zip(v.layers.iter_mut()).zip(&g.layers);
        for (((layer, ml), vl), gl) in layers {
            let pairs = [
                (&mut layer.weight, &mut ml.weight, &mut vl.weight, &gl.weight),
                (&mut layer.bias, &mut ml.bias, &mut vl.bias, &gl.bias),
            ];
            for (p, m, v, g) in pairs {
                for i in 0..p.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    let mh = m[i] / c1;
                    let vh = v[i] / c2;
                    p[i] -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

/// Adam with global-norm clipping, bound to one [`ParamGroup`].
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub state: AdamState,
    pub lr: f64,
    pub max_grad_norm: f64,
}

impl Optimizer {
    pub fn new<G: ParamGroup + ?Sized>(group: &G, lr: f64, max_grad_norm: f64, beta1: f64, beta2: f64) -> Self {
        Optimizer {
            state: AdamState::new(&group.nets(), beta1, beta2, 1e-8),
            lr,
            max_grad_norm,
        }
    }

    /// Clips, applies one Adam step and returns the pre-clip gradient norm.
    pub fn step<G: ParamGroup + ?Sized>(&mut self, group: &mut G, grads: GradBundle) -> Result<f64> {
        let norm = grads.norm();
        let grads = grads.clip_global_norm(self.max_grad_norm);
        adam_step(&mut group.nets_mut(), &mut self.state, &grads, self.lr)?;
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(seed: u64, dims: &[usize], act: Activation) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mlp::new(dims, act, Activation::Identity, &mut rng)
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let l = Layer {
            in_dim: 2,
            out_dim: 2,
            weight: vec![1.0, 0.0, 0.0, 1.0],
            bias: vec![0.0, 0.0],
            activation: Activation::Identity,
            dropout: 0.0,
        };
        let m = Mlp::from_layers(vec![l]).unwrap();
        let (y, _) = m.forward(&[1.0, 2.0]).unwrap();
        assert_eq!(y, vec![1.0, 2.0]);
    }

    #[test]
    fn zero_net_outputs_zero() {
        let mut m = net(3, &[3, 5, 2], Activation::Tanh);
        m.zero_params();
        let (y, _) = m.forward(&[0.3, -4.0, 9.0]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        let m = net(0, &[2, 4, 3], Activation::Tanh);
        let x = [0.5, -0.5];
        let (y, _) = m.forward(&x).unwrap();
        let (l0, l1) = (&m.layers()[0], &m.layers()[1]);
        let mut h = [0.0; 4];
        for o in 0..4 {
            let mut s = l0.bias[o];
            for i in 0..2 {
                s += l0.weight[o * 2 + i] * x[i];
            }
            h[o] = s.tanh();
        }
        for o in 0..3 {
            let mut s = l1.bias[o];
            for i in 0..4 {
                s += l1.weight[o * 4 + i] * h[i];
            }
            assert!((y[o] - s).abs() <= 1e-12);
        }
        assert_eq!(m.infer(&x), y);
    }

    #[test]
    fn shape_and_numeric_errors() {
        let m = net(0, &[2, 3], Activation::Tanh);
        assert!(matches!(m.forward(&[1.0]), Err(Error::Shape { .. })));
        assert!(matches!(m.forward(&[1.0, f64::NAN]), Err(Error::Numeric(_))));
        let (_, tape) = m.forward(&[1.0, 2.0]).unwrap();
        assert!(matches!(m.backward(&tape, &[1.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn linear_backward_is_analytic() {
        let m = net(7, &[3, 2], Activation::Identity);
        let x = [0.1, -0.7, 2.0];
        let g = [0.5, -1.5];
        let (_, tape) = m.forward(&x).unwrap();
        let (grads, gin) = m.backward(&tape, &g).unwrap();
        let l = &m.layers()[0];
        for o in 0..2 {
            for i in 0..3 {
                assert_eq!(grads.layers[0].weight[o * 3 + i], g[o] * x[i]);
            }
            assert_eq!(grads.layers[0].bias[o], g[o]);
        }
        for i in 0..3 {
            let expect = l.weight[i] * g[0] + l.weight[3 + i] * g[1];
            assert!((gin[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_output_grad_gives_zero_grads() {
        let m = net(1, &[3, 4, 2], Activation::Mish);
        let (_, tape) = m.forward(&[1.0, 2.0, 3.0]).unwrap();
        let (grads, gin) = m.backward(&tape, &[0.0, 0.0]).unwrap();
        assert!(grads.values().all(|&v| v == 0.0));
        assert!(gin.iter().all(|&v| v == 0.0));
    }

    fn fd_check(act: Activation) {
        let mut m = net(0, &[2, 6, 6, 3], act);
        let x = [0.3, -1.1];
        let w = [0.7, -0.2, 1.3];
        let loss = |m: &Mlp| dot(&m.infer(&x), &w);
        let (_, tape) = m.forward(&x).unwrap();
        let (grads, gin) = m.backward(&tape, &w).unwrap();
        let h = 1e-5;
        for k in 0..m.param_count() {
            let orig = *m.param_mut(k);
            *m.param_mut(k) = orig + h;
            let lp = loss(&m);
            *m.param_mut(k) = orig - h;
            let lm = loss(&m);
            *m.param_mut(k) = orig;
            let num = (lp - lm) / (2.0 * h);
            let ana = grads.param(k);
            let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
            assert!(rel < 1e-4, "param {k}: analytic {ana} numeric {num}");
        }
        for i in 0..2 {
            let mut xp = x;
            xp[i] += h;
            let mut xm = x;
            xm[i] -= h;
            let num = (dot(&m.infer(&xp), &w) - dot(&m.infer(&xm), &w)) / (2.0 * h);
            assert!((num - gin[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        fd_check(Activation::Tanh);
        fd_check(Activation::Mish);
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let m = net(2, &[4, 64, 2], Activation::Mish).with_dropout(0, 0.5);
        let x = [0.1, 0.2, 0.3, 0.4];
        let a = m.forward(&x).unwrap().0;
        assert_eq!(a, m.forward(&x).unwrap().0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = m.forward_train(&x, &mut rng).unwrap().0;
        assert_ne!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(b, m.forward_train(&x, &mut rng).unwrap().0);
    }

    #[test]
    fn dropout_backward_matches_finite_differences() {
        let mut m = net(4, &[3, 16, 2], Activation::Tanh).with_dropout(0, 0.3);
        let x = [0.2, -0.4, 0.9];
        let w = [1.0, -2.0];
        let eval = |m: &Mlp| {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            dot(&m.forward_train(&x, &mut rng).unwrap().0, &w)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (_, tape) = m.forward_train(&x, &mut rng).unwrap();
        let (grads, _) = m.backward(&tape, &w).unwrap();
        for k in 0..m.param_count() {
            let orig = *m.param_mut(k);
            *m.param_mut(k) = orig + 1e-5;
            let lp = eval(&m);
            *m.param_mut(k) = orig - 1e-5;
            let lm = eval(&m);
            *m.param_mut(k) = orig;
            let num = (lp - lm) / 2e-5;
            let ana = grads.param(k);
            assert!((num - ana).abs() / num.abs().max(ana.abs()).max(1e-6) < 1e-4);
        }
    }

    fn scalar_net(p: f64) -> Mlp {
        Mlp::from_layers(vec![Layer {
            in_dim: 1,
            out_dim: 1,
            weight: vec![p],
            bias: vec![0.0],
            activation: Activation::Identity,
            dropout: 0.0,
        }])
        .unwrap()
    }

    fn scalar_grad(net: &Mlp, g: f64) -> GradBundle {
        let mut gr = MlpGrads::zeros_like(net);
        gr.layers[0].weight[0] = g;
        GradBundle::new(vec![gr])
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op_on_params() {
        let mut n = net(0, &[2, 3], Activation::Tanh);
        let before = n.clone();
        let mut st = AdamState::new(&[&n], 0.9, 0.999, 1e-8);
        let g = GradBundle::zeros_like(&[&n]);
        adam_step(&mut [&mut n], &mut st, &g, 0.1).unwrap();
        assert_eq!(n, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut n = scalar_net(0.0);
        let mut st = AdamState::new(&[&n], 0.9, 0.999, 1e-8);
        let g = scalar_grad(&n, 1.0);
        adam_step(&mut [&mut n], &mut st, &g, 0.1).unwrap();
        assert!((n.layers()[0].weight[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn adam_matches_scalar_recurrence() {
        let mut n = scalar_net(0.0);
        let mut st = AdamState::new(&[&n], 0.9, 0.999, 1e-8);
        let g = scalar_grad(&n, 1.0);
        // straight-line scalar Adam
        let (mut p, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            adam_step(&mut [&mut n], &mut st, &g, 0.1).unwrap();
            m = 0.9 * m + 0.1 * 1.0;
            v = 0.999 * v + 0.001 * 1.0;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            p -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((n.layers()[0].weight[0] - p).abs() <= 1e-12);
        }
        assert_eq!(st.step, 2);
    }

    #[test]
    fn adam_refuses_non_finite() {
        let mut n = scalar_net(0.5);
        let mut st = AdamState::new(&[&n], 0.9, 0.999, 1e-8);
        let g = scalar_grad(&n, f64::NAN);
        assert!(adam_step(&mut [&mut n], &mut st, &g, 0.1).is_err());
        assert_eq!(st.step, 0);
        assert_eq!(n.layers()[0].weight[0], 0.5);
    }

    #[test]
    fn clipping() {
        let n = Mlp::from_layers(vec![Layer {
            in_dim: 2,
            out_dim: 1,
            weight: vec![0.0, 0.0],
            bias: vec![0.0],
            activation: Activation::Identity,
            dropout: 0.0,
        }])
        .unwrap();
        let mut g = MlpGrads::zeros_like(&n);
        g.layers[0].weight = vec![30.0, 40.0];
        let b = GradBundle::new(vec![g.clone()]);
        assert_eq!(b.norm(), 50.0);
        let c = b.clip_global_norm(20.0);
        assert!((c.nets()[0].layers[0].weight[0] - 12.0).abs() < 1e-12);
        assert!((c.nets()[0].layers[0].weight[1] - 16.0).abs() < 1e-12);

        g.layers[0].weight = vec![6.0, 8.0];
        let b = GradBundle::new(vec![g]);
        assert_eq!(b.clone().clip_global_norm(20.0), b);

        let z = GradBundle::zeros_like(&[&n]).clip_global_norm(20.0);
        assert_eq!(z.norm(), 0.0);
    }

    proptest::proptest! {
        #[test]
        fn clip_is_idempotent_and_non_expanding(
            vals in proptest::collection::vec(-100.0f64..100.0, 6),
            max in 0.1f64..50.0,
        ) {
            let n = net(0, &[2, 2], Activation::Identity);
            let mut g = MlpGrads::zeros_like(&n);
            g.layers[0].weight.copy_from_slice(&vals[..4]);
            g.layers[0].bias.copy_from_slice(&vals[4..]);
            let b = GradBundle::new(vec![g]);
            let once = b.clone().clip_global_norm(max);
            proptest::prop_assert!(once.norm() <= b.norm() + 1e-12);
            proptest::prop_assert!(once.norm() <= max * (1.0 + 1e-12));
            let twice = once.clone().clip_global_norm(max);
            for (a, c) in once.nets()[0].values().zip(twice.nets()[0].values()) {
                proptest::prop_assert!((a - c).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }

        #[test]
        fn cached_norm_is_euclidean(vals in proptest::collection::vec(-1e3f64..1e3, 6)) {
            let n = net(0, &[2, 2], Activation::Identity);
            let mut g = MlpGrads::zeros_like(&n);
            g.layers[0].weight.copy_from_slice(&vals[..4]);
            g.layers[0].bias.copy_from_slice(&vals[4..]);
            let direct = vals.iter().map(|v| v * v).sum::<f64>().sqrt();
            let b = GradBundle::new(vec![g]);
            proptest::prop_assert!((b.norm() - direct).abs() <= 1e-12 * direct.max(1e-300));
        }
    }

    #[test]
    fn mish_matches_reference_formula() {
        for i in 0..=8000 {
            let x = -40.0 + i as f64 * 0.01;
            let sp = if x > 30.0 { x } else { x.exp().ln_1p() };
            let t = sp.tanh();
            let sig = 1.0 / (1.0 + (-x).exp());
            let f = x * t;
            let d = t + x * (1.0 - t * t) * sig;
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-13 * (1.0 + b.abs());
            assert!(close(Activation::Mish.apply(x), f), "mish({x})");
            assert!(close(Activation::Mish.derivative(x), d), "mish'({x})");
        }
    }

    #[test]
    fn column_batch_matches_rowwise_inference() {
        let m = net(5, &[7, 9, 5, 3], Activation::Mish);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 6;
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..7).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let cols: Vec<f64> = (0..7).flat_map(|k| rows.iter().map(move |r| r[k])).collect();
        let out = m.infer_cols(&cols, n);
        for (r, row) in rows.iter().enumerate() {
            let y = m.infer(row);
            for (o, v) in y.iter().enumerate() {
                assert!((out[o * n + r] - v).abs() < 1e-12);
            }
        }
    }
}
