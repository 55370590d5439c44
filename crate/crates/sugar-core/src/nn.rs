//! Shared trainable building blocks on top of the autodiff tape.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sugar_autodiff::{Binding, ParamId, ParamStore, Tape, Var};

use crate::error::Result;

/// Forward-pass context: one tape, one parameter binding.
pub struct Fwd<'a> {
    pub tape: &'a mut Tape,
    pub binding: &'a mut Binding,
    pub store: &'a ParamStore,
}

impl<'a> Fwd<'a> {
    pub fn new(tape: &'a mut Tape, binding: &'a mut Binding, store: &'a ParamStore) -> Self {
        Self {
            tape,
            binding,
            store,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.binding.var(self.tape, self.store, id)
    }
}

pub fn kaiming_uniform(rng: &mut ChaCha8Rng, fan_in: usize, shape: &[usize]) -> ArrayD<f64> {
    let limit = (6.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| (rng.random::<f64>() * 2.0 - 1.0) * limit)
}

pub fn normal_init(rng: &mut ChaCha8Rng, std: f64, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random();
        std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    })
}

/// Affine map [m, in] -> [m, out], weights stored [in, out].
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add(
            &format!("{name}.w"),
            kaiming_uniform(rng, in_dim, &[in_dim, out_dim]),
        );
        let b = store.add(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[out_dim])));
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, fwd: &mut Fwd, x: Var) -> Result<Var> {
        let w = fwd.param(self.w);
        let b = fwd.param(self.b);
        let y = fwd.tape.matmul(x, w)?;
        Ok(fwd.tape.add_bias(y, b)?)
    }
}

/// One low-rank adapter: delta(x) = (alpha/r) * (x A^T) B^T with A [r, in]
/// and B [out, r]; B starts at zero so the adapted layer initially matches
/// its base.
#[derive(Debug, Clone)]
pub struct LoraPair {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraPair {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rank: usize,
        alpha: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if rank == 0 || rank > in_dim.min(out_dim) {
            return Err(crate::error::SugarError::InvalidConfig(format!(
                "lora rank {rank} invalid for {in_dim}x{out_dim}"
            )));
        }
        let a = store.add(
            &format!("{name}.a"),
            normal_init(rng, 0.02, &[rank, in_dim]),
        );
        let b = store.add(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[out_dim, rank])));
        Ok(Self {
            a,
            b,
            rank,
            alpha,
        })
    }

    pub fn delta(&self, fwd: &mut Fwd, x: Var) -> Result<Var> {
        let a = fwd.param(self.a);
        let b = fwd.param(self.b);
        let at = fwd.tape.permute(a, &[1, 0])?;
        let bt = fwd.tape.permute(b, &[1, 0])?;
        let xa = fwd.tape.matmul(x, at)?;
        let xab = fwd.tape.matmul(xa, bt)?;
        Ok(fwd.tape.scalar_mul(xab, self.alpha / self.rank as f64))
    }
}

/// Adapters for the four attention projections.
#[derive(Debug, Clone)]
pub struct MhaLora {
    pub q: LoraPair,
    pub k: LoraPair,
    pub v: LoraPair,
    pub o: LoraPair,
}

/// Multi-head attention over a single (unbatched) sequence.
#[derive(Debug, Clone)]
pub struct Mha {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Mha {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if dim % heads != 0 {
            return Err(crate::error::SugarError::InvalidConfig(format!(
                "model dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            wq: Linear::new(store, &format!("{name}.wq"), dim, dim, rng),
            wk: Linear::new(store, &format!("{name}.wk"), dim, dim, rng),
            wv: Linear::new(store, &format!("{name}.wv"), dim, dim, rng),
            wo: Linear::new(store, &format!("{name}.wo"), dim, dim, rng),
            heads,
            dim,
        })
    }

    fn project(
        &self,
        fwd: &mut Fwd,
        layer: &Linear,
        lora: Option<&LoraPair>,
        x: Var,
    ) -> Result<Var> {
        let base = layer.forward(fwd, x)?;
        match lora {
            Some(pair) => {
                let delta = pair.delta(fwd, x)?;
                Ok(fwd.tape.add(base, delta)?)
            }
            None => Ok(base),
        }
    }

    fn split_heads(&self, fwd: &mut Fwd, x: Var, len: usize) -> Result<Var> {
        let dh = self.dim / self.heads;
        let x = fwd.tape.reshape(x, &[len, self.heads, dh])?;
        Ok(fwd.tape.permute(x, &[1, 0, 2])?)
    }

    /// queries [Lq, d] attend to memory [Lk, d]. A causal mask constrains
    /// position i to memory positions <= i (only meaningful when Lq == Lk).
    pub fn forward(
        &self,
        fwd: &mut Fwd,
        queries: Var,
        memory: Var,
        causal: bool,
        lora: Option<&MhaLora>,
    ) -> Result<Var> {
        let lq = fwd.tape.value(queries).shape()[0];
        let lk = fwd.tape.value(memory).shape()[0];
        let dh = self.dim / self.heads;

        let q = self.project(fwd, &self.wq, lora.map(|l| &l.q), queries)?;
        let k = self.project(fwd, &self.wk, lora.map(|l| &l.k), memory)?;
        let v = self.project(fwd, &self.wv, lora.map(|l| &l.v), memory)?;

        let qh = self.split_heads(fwd, q, lq)?;
        let kh = self.split_heads(fwd, k, lk)?;
        let vh = self.split_heads(fwd, v, lk)?;

        let kt = fwd.tape.permute(kh, &[0, 2, 1])?;
        let scores = fwd.tape.batch_matmul(qh, kt)?;
        let scores = fwd.tape.scalar_mul(scores, 1.0 / (dh as f64).sqrt());
        let scores = if causal {
            let mut mask = ArrayD::zeros(IxDyn(&[self.heads, lq, lk]));
            for h in 0..self.heads {
                for i in 0..lq {
                    for j in 0..lk {
                        if j > i {
                            mask[[h, i, j]] = -1e9;
                        }
                    }
                }
            }
            let mask = fwd.tape.constant(mask);
            fwd.tape.add(scores, mask)?
        } else {
            scores
        };
        let attn = fwd.tape.softmax(scores)?;
        let ctx = fwd.tape.batch_matmul(attn, vh)?;
        let merged = fwd.tape.permute(ctx, &[1, 0, 2])?;
        let merged = fwd.tape.reshape(merged, &[lq, self.dim])?;
        self.project(fwd, &self.wo, lora.map(|l| &l.o), merged)
    }
}

/// Two-layer position-wise feed-forward with ReLU.
#[derive(Debug, Clone)]
pub struct Ffn {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl Ffn {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            lin1: Linear::new(store, &format!("{name}.lin1"), dim, hidden, rng),
            lin2: Linear::new(store, &format!("{name}.lin2"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, fwd: &mut Fwd, x: Var) -> Result<Var> {
        let h = self.lin1.forward(fwd, x)?;
        let h = fwd.tape.relu(h);
        self.lin2.forward(fwd, h)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(&format!("{name}.gamma"), ArrayD::ones(IxDyn(&[dim]))),
            beta: store.add(&format!("{name}.beta"), ArrayD::zeros(IxDyn(&[dim]))),
        }
    }

    pub fn forward(&self, fwd: &mut Fwd, x: Var) -> Result<Var> {
        let gamma = fwd.param(self.gamma);
        let beta = fwd.param(self.beta);
        Ok(fwd.tape.layer_norm(x, gamma, beta, 1e-5)?)
    }
}

/// y = norm(x + sublayer_output), the post-norm residual arrangement.
pub fn residual_norm(
    fwd: &mut Fwd,
    norm: &LayerNormParams,
    x: Var,
    sublayer_output: Var,
) -> Result<Var> {
    let sum = fwd.tape.add(x, sublayer_output)?;
    norm.forward(fwd, sum)
}
