use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Float;

/// Low-rank additive update `scale · (x · down) · up` attached to a [`Linear`].
#[derive(Clone, Debug)]
pub struct LoraDelta {
    pub down: ParamId,
    pub up: ParamId,
    pub rank: usize,
    pub scale: f64,
}

/// `y = x · W + b`, with `W` stored `[d_in × d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
    pub lora: Option<LoraDelta>,
}

impl Linear {
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_init(store, name, d_in, d_out, Init::FanIn, Init::Zeros)
    }

    pub fn with_init<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        w_init: Init,
        b_init: Init,
    ) -> Result<Self> {
        Ok(Linear {
            name: name.to_string(),
            w: store.register(&format!("{name}.weight"), &[d_in, d_out], w_init)?,
            b: store.register(&format!("{name}.bias"), &[d_out], b_init)?,
            d_in,
            d_out,
            lora: None,
        })
    }

    pub fn forward<F: Float>(&self, tp: &mut Tape<F>, x: Var) -> Result<Var> {
        let w = tp.param(self.w);
        let b = tp.param(self.b);
        let y = tp.matmul(x, w)?;
        let mut y = tp.add_row(y, b)?;
        if let Some(l) = &self.lora {
            let down = tp.param(l.down);
            let up = tp.param(l.up);
            let h = tp.matmul(x, down)?;
            let d = tp.matmul(h, up)?;
            let d = tp.scale(d, F::of(l.scale));
            y = tp.add(y, d)?;
        }
        Ok(y)
    }

    pub fn param_count(&self) -> usize {
        self.d_in * self.d_out + self.d_out
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.register(&format!("{name}.gain"), &[dim], Init::Ones)?,
            bias: store.register(&format!("{name}.bias"), &[dim], Init::Zeros)?,
        })
    }

    pub fn forward<F: Float>(&self, tp: &mut Tape<F>, x: Var) -> Result<Var> {
        let g = tp.param(self.gain);
        let b = tp.param(self.bias);
        tp.layer_norm(x, g, b, F::of(LN_EPS))
    }
}

/// Multi-head scaled dot-product attention with separate q/k/v/o projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Attention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim)?,
            heads,
            dim,
        })
    }

    pub fn forward<F: Float>(&self, tp: &mut Tape<F>, q: Var, k: Var, v: Var) -> Result<Var> {
        let q = self.q.forward(tp, q)?;
        let k = self.k.forward(tp, k)?;
        let v = self.v.forward(tp, v)?;
        let hd = self.dim / self.heads;
        let scale = F::of(1.0 / (hd as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tp.slice_cols(q, h * hd, hd)?,
                    tp.slice_cols(k, h * hd, hd)?,
                    tp.slice_cols(v, h * hd, hd)?,
                )
            };
            let s = tp.matmul_nt(qh, kh)?;
            let s = tp.scale(s, scale);
            let a = tp.softmax(s, 1)?;
            outs.push(tp.matmul(a, vh)?);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            tp.concat_cols(&outs)?
        };
        self.o.forward(tp, merged)
    }

    pub fn linears(&self) -> [&Linear; 4] {
        [&self.q, &self.k, &self.v, &self.o]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub act: Activation,
}

impl Mlp {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        act: Activation,
    ) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_in, hidden)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d_out)?,
            act,
        })
    }

    pub fn forward<F: Float>(&self, tp: &mut Tape<F>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tp, x)?;
        let h = match self.act {
            Activation::Gelu => tp.gelu(h),
            Activation::Relu => tp.relu(h),
        };
        self.fc2.forward(tp, h)
    }
}
