//! Multilayer perceptron denoiser with hand-written backpropagation.
//!
//! The network input is the data vector concatenated with a sinusoidal
//! embedding of the time value. When the network is conditional, a learned
//! per-condition vector of the same width is added to the time embedding.
//! Hidden layers share one activation; the final linear map (`out.weight`,
//! `out.bias`) is the block treated as "the last layer" by the posterior code.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::matrix::{linear_backward_input, linear_backward_params, linear_forward, Matrix};
use super::param::ParamVector;
use crate::error::{Error, Result};
use crate::rng::RngState;

pub const COND_EMBED: &str = "cond_embed";
pub const OUT_WEIGHT: &str = "out.weight";
pub const OUT_BIAS: &str = "out.bias";
/// Name recorded for the last-layer block (`out.weight` followed by `out.bias`).
pub const LAST_LAYER: &str = "out";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Silu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Tanh => z.tanh(),
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Silu => "silu",
            Activation::Tanh => "tanh",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "silu" => Ok(Activation::Silu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub time_embed_dim: usize,
    /// Number of conditioning classes; 0 means unconditional.
    pub condition_count: usize,
}

impl MlpConfig {
    /// Three hidden layers of 128 units with SiLU, 32-wide time embedding.
    pub fn denoiser(data_dim: usize) -> Self {
        Self {
            input_dim: data_dim,
            hidden_dims: vec![128, 128, 128],
            output_dim: data_dim,
            activation: Activation::Silu,
            time_embed_dim: 32,
            condition_count: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("input and output dims must be positive".into()));
        }
        if self.hidden_dims.is_empty() {
            return Err(Error::Config("at least one hidden layer is required".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden dims must be positive".into()));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "time_embed_dim must be positive and even, got {}",
                self.time_embed_dim
            )));
        }
        Ok(())
    }
}

/// Sinusoidal embedding `[sin(t·f_i), cos(t·f_i)]` with `f_i = 10000^(-i/half)`.
pub fn time_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let (s, c) = (t * freq).sin_cos();
        out[i] = s;
        out[half + i] = c;
    }
    out
}

/// Activations saved by [`Mlp::forward_batch`] for one batch.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    fingerprint: u64,
    /// Input to each linear layer: `layer_inputs[0]` is the network input.
    layer_inputs: Vec<Matrix>,
    /// Pre-activations of the hidden layers.
    pre_activations: Vec<Matrix>,
    cond: Option<Vec<usize>>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.layer_inputs[0].rows()
    }

    /// Input to the last linear layer (activations of the final hidden layer).
    pub fn last_hidden(&self) -> &Matrix {
        self.layer_inputs.last().expect("at least one layer")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    cfg: MlpConfig,
}

impl Mlp {
    pub fn new(cfg: MlpConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.cfg
    }

    fn first_in(&self) -> usize {
        self.cfg.input_dim + self.cfg.time_embed_dim
    }

    /// `(in, out)` width of every linear layer, hidden layers first.
    fn widths(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.first_in()];
        dims.extend(&self.cfg.hidden_dims);
        dims.push(self.cfg.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    fn layer_names(&self, i: usize) -> (String, String) {
        if i == self.cfg.hidden_dims.len() {
            (OUT_WEIGHT.to_string(), OUT_BIAS.to_string())
        } else {
            (format!("hidden.{i}.weight"), format!("hidden.{i}.bias"))
        }
    }

    pub fn blocks(&self) -> Vec<(String, Vec<usize>)> {
        let mut blocks = Vec::new();
        if self.cfg.condition_count > 0 {
            blocks.push((
                COND_EMBED.to_string(),
                vec![self.cfg.condition_count, self.cfg.time_embed_dim],
            ));
        }
        for (i, (fan_in, fan_out)) in self.widths().into_iter().enumerate() {
            let (w, b) = self.layer_names(i);
            blocks.push((w, vec![fan_out, fan_in]));
            blocks.push((b, vec![fan_out]));
        }
        blocks
    }

    pub fn zeros(&self) -> ParamVector {
        ParamVector::zeros(&self.blocks())
    }

    /// Kaiming-uniform weights (gain √2 for hidden layers, 1 for the output
    /// layer), zero biases, standard normal condition embeddings.
    pub fn init(&self, rng: &mut RngState) -> ParamVector {
        let mut p = self.zeros();
        if self.cfg.condition_count > 0 {
            for v in p.block_mut(COND_EMBED).expect("present") {
                *v = rng.standard_normal();
            }
        }
        let n_layers = self.cfg.hidden_dims.len() + 1;
        for (i, (fan_in, _)) in self.widths().into_iter().enumerate() {
            let gain2 = if i + 1 == n_layers { 1.0 } else { 2.0 };
            let bound = (3.0 * gain2 / fan_in as f64).sqrt();
            let (w, _) = self.layer_names(i);
            for v in p.block_mut(&w).expect("present") {
                *v = (2.0 * rng.uniform() - 1.0) * bound;
            }
        }
        p
    }

    pub fn check_layout(&self, params: &ParamVector) -> Result<()> {
        let expected = self.zeros();
        if !params.same_layout(&expected) {
            return Err(Error::Dimension {
                layer: "parameter layout".into(),
                expected: expected.len(),
                got: params.len(),
            });
        }
        Ok(())
    }

    /// Index range of the last layer (`out.weight` then `out.bias`).
    pub fn last_layer_range(&self) -> Range<usize> {
        let p = self.zeros();
        let w = p.layer(OUT_WEIGHT).expect("present");
        let b = p.layer(OUT_BIAS).expect("present");
        w.offset..b.range().end
    }

    fn network_input(&self, params: &ParamVector, x: &Matrix, t: &[f64], cond: Option<&[usize]>) -> Result<Matrix> {
        let d = self.cfg.input_dim;
        let e = self.cfg.time_embed_dim;
        if x.cols() != d {
            return Err(Error::Dimension {
                layer: "input".into(),
                expected: d,
                got: x.cols(),
            });
        }
        if t.len() != x.rows() {
            return Err(Error::Dimension {
                layer: "time".into(),
                expected: x.rows(),
                got: t.len(),
            });
        }
        if let Some(c) = cond {
            if c.len() != x.rows() {
                return Err(Error::Dimension {
                    layer: COND_EMBED.into(),
                    expected: x.rows(),
                    got: c.len(),
                });
            }
            if let Some(bad) = c.iter().find(|&&c| c >= self.cfg.condition_count) {
                return Err(Error::InvalidArgument(format!(
                    "condition {bad} out of range for {} classes",
                    self.cfg.condition_count
                )));
            }
        }
        let table = cond.and_then(|_| params.block(COND_EMBED));
        let mut h0 = Matrix::zeros(x.rows(), d + e);
        for r in 0..x.rows() {
            let row = h0.row_mut(r);
            row[..d].copy_from_slice(x.row(r));
            row[d..].copy_from_slice(&time_embedding(t[r], e));
            if let (Some(table), Some(c)) = (table, cond) {
                let emb = &table[c[r] * e..(c[r] + 1) * e];
                for (v, add) in row[d..].iter_mut().zip(emb) {
                    *v += add;
                }
            }
        }
        Ok(h0)
    }

    fn run(
        &self,
        params: &ParamVector,
        x: &Matrix,
        t: &[f64],
        cond: Option<&[usize]>,
        keep: bool,
    ) -> Result<(Matrix, Vec<Matrix>, Vec<Matrix>)> {
        self.check_layout(params)?;
        let mut h = self.network_input(params, x, t, cond)?;
        let n_hidden = self.cfg.hidden_dims.len();
        let act = self.cfg.activation;
        let mut inputs = Vec::new();
        let mut pre = Vec::new();
        for i in 0..=n_hidden {
            let (wn, bn) = self.layer_names(i);
            let z = linear_forward(&h, params.block(&wn).unwrap(), params.block(&bn).unwrap());
            let next = if i < n_hidden {
                let mut a = z.clone();
                a.as_mut_slice().iter_mut().for_each(|v| *v = act.apply(*v));
                if keep {
                    pre.push(z);
                }
                a
            } else {
                z
            };
            if keep {
                inputs.push(std::mem::replace(&mut h, next));
            } else {
                h = next;
            }
        }
        Ok((h, inputs, pre))
    }

    /// Single-example forward pass.
    pub fn forward(&self, params: &ParamVector, x: &[f64], t: f64, cond: Option<usize>) -> Result<Vec<f64>> {
        let xm = Matrix::from_vec(1, x.len(), x.to_vec())?;
        let c = cond.map(|c| [c]);
        Ok(self.predict(params, &xm, &[t], c.as_ref().map(|c| &c[..]))?.into_vec())
    }

    /// Batched forward pass without keeping activations.
    pub fn predict(&self, params: &ParamVector, x: &Matrix, t: &[f64], cond: Option<&[usize]>) -> Result<Matrix> {
        Ok(self.run(params, x, t, cond, false)?.0)
    }

    /// Batched forward pass that keeps what [`Mlp::backward`] needs.
    pub fn forward_batch(
        &self,
        params: &ParamVector,
        x: &Matrix,
        t: &[f64],
        cond: Option<&[usize]>,
    ) -> Result<(Matrix, ForwardCache)> {
        let (out, layer_inputs, pre_activations) = self.run(params, x, t, cond, true)?;
        let cache = ForwardCache {
            fingerprint: params.fingerprint(),
            layer_inputs,
            pre_activations,
            cond: cond.map(<[usize]>::to_vec),
        };
        Ok((out, cache))
    }

    /// Gradient of `Σ_rows <dout_row, f(x_row)>` with respect to every parameter.
    ///
    /// Fails with [`Error::StaleCache`] if `params` changed since the forward pass.
    pub fn backward(&self, params: &ParamVector, cache: &ForwardCache, dout: &Matrix) -> Result<ParamVector> {
        self.check_layout(params)?;
        if cache.fingerprint != params.fingerprint() {
            return Err(Error::StaleCache("parameters changed since the forward pass".into()));
        }
        if dout.rows() != cache.batch_size() || dout.cols() != self.cfg.output_dim {
            return Err(Error::Dimension {
                layer: OUT_WEIGHT.into(),
                expected: cache.batch_size() * self.cfg.output_dim,
                got: dout.rows() * dout.cols(),
            });
        }
        let mut grad = params.zeros_like();
        let n_hidden = self.cfg.hidden_dims.len();
        let act = self.cfg.activation;
        let mut delta = dout.clone();
        for i in (0..=n_hidden).rev() {
            let (wn, bn) = self.layer_names(i);
            let input = &cache.layer_inputs[i];
            let w = params.block(&wn).unwrap();
            let (wr, br) = (grad.layer(&wn).unwrap().range(), grad.layer(&bn).unwrap().range());
            {
                let g = grad.values_mut();
                let (lo, hi) = g.split_at_mut(br.start);
                linear_backward_params(input, &delta, &mut lo[wr], &mut hi[..br.len()]);
            }
            if i == 0 && cache.cond.is_none() {
                break;
            }
            let mut din = linear_backward_input(&delta, w, input.cols());
            if i > 0 {
                let z = &cache.pre_activations[i - 1];
                for (d, zv) in din.as_mut_slice().iter_mut().zip(z.as_slice()) {
                    *d *= act.derivative(*zv);
                }
                delta = din;
            } else if let Some(cond) = &cache.cond {
                let d = self.cfg.input_dim;
                let e = self.cfg.time_embed_dim;
                let table = grad.block_mut(COND_EMBED).expect("conditional network");
                for (r, &c) in cond.iter().enumerate() {
                    for (g, v) in table[c * e..(c + 1) * e].iter_mut().zip(&din.row(r)[d..]) {
                        *g += v;
                    }
                }
            }
        }
        Ok(grad)
    }
}
