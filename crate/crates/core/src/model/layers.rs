//! Transformer building blocks recorded on a [`Tape`].

use rand::Rng;

use crate::numerics::{NumericsError, ParamId, ParamStore, Scalar, Tape, Var};

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub(crate) w: ParamId,
    pub(crate) b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w: store.add_weight(format!("{name}.w"), d_in, d_out, rng),
            b: store.add_zeros(format!("{name}.b"), 1, d_out),
        }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var, NumericsError> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNorm {
    pub(crate) gamma: ParamId,
    pub(crate) beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add_ones(format!("{name}.gamma"), 1, d),
            beta: store.add_zeros(format!("{name}.beta"), 1, d),
        }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var, NumericsError> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Multi-head scaled dot-product attention, `[head_1..head_h] W_o`.
#[derive(Debug, Clone)]
pub(crate) struct Attention {
    pub(crate) wq: ParamId,
    pub(crate) wk: ParamId,
    pub(crate) wv: ParamId,
    pub(crate) wo: ParamId,
    pub(crate) heads: usize,
    pub(crate) d: usize,
}

impl Attention {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            wq: store.add_weight(format!("{name}.wq"), d, d, rng),
            wk: store.add_weight(format!("{name}.wk"), d, d, rng),
            wv: store.add_weight(format!("{name}.wv"), d, d, rng),
            wo: store.add_weight(format!("{name}.wo"), d, d, rng),
            heads,
            d,
        }
    }

    /// Queries from `q_in`, keys and values from `kv_in`. `mask` has one
    /// entry per (query, key) pair; false entries receive zero weight.
    pub fn apply<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        q_in: Var,
        kv_in: Var,
        mask: Option<&[bool]>,
    ) -> Result<Var, NumericsError> {
        let (wq, wk, wv, wo) = (
            tape.param(self.wq),
            tape.param(self.wk),
            tape.param(self.wv),
            tape.param(self.wo),
        );
        let q = tape.matmul(q_in, wq)?;
        let k = tape.matmul(kv_in, wk)?;
        let v = tape.matmul(kv_in, wv)?;
        let dk = self.d / self.heads;
        let scale = T::one() / T::lit(dk as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * dk, dk)?,
                    tape.slice_cols(k, h * dk, dk)?,
                    tape.slice_cols(v, h * dk, dk)?,
                )
            };
            let scores = tape.matmul_bt(qh, kh)?;
            let scores = tape.scale(scores, scale)?;
            let weights = tape.softmax_rows(scores, mask)?;
            outs.push(tape.matmul(weights, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)?
        };
        tape.matmul(cat, wo)
    }
}

/// `gelu(X W_in) W_out`
#[derive(Debug, Clone)]
pub(crate) struct FeedForward {
    pub(crate) w_in: ParamId,
    pub(crate) w_out: ParamId,
}

impl FeedForward {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        d_ff: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w_in: store.add_weight(format!("{name}.w_in"), d, d_ff, rng),
            w_out: store.add_weight(format!("{name}.w_out"), d_ff, d, rng),
        }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var, NumericsError> {
        let w_in = tape.param(self.w_in);
        let w_out = tape.param(self.w_out);
        let h = tape.matmul(x, w_in)?;
        let h = tape.gelu(h)?;
        tape.matmul(h, w_out)
    }
}

/// Pre-norm self-attention + feed-forward block.
#[derive(Debug, Clone)]
pub(crate) struct EncoderLayer {
    pub(crate) ln_attn: LayerNorm,
    pub(crate) attn: Attention,
    pub(crate) ln_ffn: LayerNorm,
    pub(crate) ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d),
            attn: Attention::new(store, &format!("{name}.attn"), d, heads, rng),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, d_ff, rng),
        }
    }

    pub fn apply<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        mask: Option<&[bool]>,
    ) -> Result<Var, NumericsError> {
        let h = self.ln_attn.apply(tape, x)?;
        let a = self.attn.apply(tape, h, h, mask)?;
        let x = tape.add(x, a)?;
        let h = self.ln_ffn.apply(tape, x)?;
        let f = self.ffn.apply(tape, h)?;
        tape.add(x, f)
    }
}

/// Pre-norm self-attention, cross-attention into a memory, then feed-forward.
#[derive(Debug, Clone)]
pub(crate) struct CrossLayer {
    pub(crate) ln_self: LayerNorm,
    pub(crate) self_attn: Attention,
    pub(crate) ln_cross: LayerNorm,
    pub(crate) cross_attn: Attention,
    pub(crate) ln_ffn: LayerNorm,
    pub(crate) ffn: FeedForward,
}

impl CrossLayer {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), d),
            self_attn: Attention::new(store, &format!("{name}.self_attn"), d, heads, rng),
            ln_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), d),
            cross_attn: Attention::new(store, &format!("{name}.cross_attn"), d, heads, rng),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, d_ff, rng),
        }
    }

    pub fn apply<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        t: Var,
        memory: Var,
        memory_mask: Option<&[bool]>,
    ) -> Result<Var, NumericsError> {
        let h = self.ln_self.apply(tape, t)?;
        let a = self.self_attn.apply(tape, h, h, None)?;
        let t = tape.add(t, a)?;
        let h = self.ln_cross.apply(tape, t)?;
        let c = self.cross_attn.apply(tape, h, memory, memory_mask)?;
        let t = tape.add(t, c)?;
        let h = self.ln_ffn.apply(tape, t)?;
        let f = self.ffn.apply(tape, h)?;
        tape.add(t, f)
    }
}
