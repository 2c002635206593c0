use rand::Rng;

use crate::error::Result;
use crate::numerics::{Tape, Tensor, Var};

use super::{params, params_mut, xavier};

pub(crate) const LN_EPS: f32 = 1e-6;
const MLP_RATIO: usize = 4;

/// One adaLN-conditioned transformer block.
///
/// The modulation linear emits six `d`-wide chunks in the order
/// `[shift_attn, scale_attn, gate_attn, shift_mlp, scale_mlp, gate_mlp]`.
#[derive(Debug, Clone)]
pub struct DiTBlock {
    pub heads: usize,
    pub mod_w: Tensor,
    pub mod_b: Tensor,
    pub qkv_w: Tensor,
    pub qkv_b: Tensor,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
}

/// Tape handles for a block evaluation. `out == (input + attn) + mlp`, where
/// `attn` and `mlp` are the gated residual contributions.
#[derive(Debug, Clone, Copy)]
pub struct BlockOutput {
    pub out: Var,
    pub attn: Var,
    pub mlp: Var,
}

impl DiTBlock {
    /// Backbone initialization: Xavier weights, zero biases and an all-zero
    /// modulation layer, so the block starts as the identity.
    pub fn new<R: Rng + ?Sized>(d: usize, heads: usize, rng: &mut R) -> Self {
        let hidden = d * MLP_RATIO;
        Self {
            heads,
            mod_w: Tensor::zeros(&[d, 6 * d]).into_param(),
            mod_b: Tensor::zeros(&[6 * d]).into_param(),
            qkv_w: xavier(d, 3 * d, rng),
            qkv_b: Tensor::zeros(&[3 * d]).into_param(),
            proj_w: xavier(d, d, rng),
            proj_b: Tensor::zeros(&[d]).into_param(),
            fc1_w: xavier(d, hidden, rng),
            fc1_b: Tensor::zeros(&[hidden]).into_param(),
            fc2_w: xavier(hidden, d, rng),
            fc2_b: Tensor::zeros(&[d]).into_param(),
        }
    }

    /// Like [`DiTBlock::new`] but with random shift/scale modulation; only the
    /// two gate chunks start at zero, which still makes the block an identity map.
    pub fn new_random_modulation<R: Rng + ?Sized>(d: usize, heads: usize, rng: &mut R) -> Self {
        let mut block = Self::new(d, heads, rng);
        let mut w = xavier(d, 6 * d, rng);
        for row in w.data_mut().chunks_mut(6 * d) {
            row[2 * d..3 * d].fill(0.0);
            row[5 * d..6 * d].fill(0.0);
        }
        block.mod_w = w;
        block
    }

    pub fn dim(&self) -> usize {
        self.proj_b.numel()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        params!(
            self,
            [mod_w, mod_b, qkv_w, qkv_b, proj_w, proj_b, fc1_w, fc1_b, fc2_w, fc2_b]
        )
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        params_mut!(
            self,
            [mod_w, mod_b, qkv_w, qkv_b, proj_w, proj_b, fc1_w, fc1_b, fc2_w, fc2_b]
        )
    }

    /// Records the block on `tape`. `h` is `[batch * len, d]`, `cond` is `[batch, d]`.
    pub fn forward_on<'p>(&'p self, tape: &mut Tape<'p>, h: Var, cond: Var, batch: usize) -> Result<BlockOutput> {
        let d = self.dim();
        let rows = tape.value(h).shape()[0];
        let len = rows / batch.max(1);
        let c = tape.silu(cond);
        let (mw, mb) = (tape.param(&self.mod_w), tape.param(&self.mod_b));
        let modv = tape.linear(c, mw, Some(mb))?;
        let chunk = |tape: &mut Tape<'p>, i: usize| tape.slice_cols(modv, i * d, d);
        let shift_a = chunk(tape, 0)?;
        let scale_a = chunk(tape, 1)?;
        let gate_a = chunk(tape, 2)?;
        let shift_m = chunk(tape, 3)?;
        let scale_m = chunk(tape, 4)?;
        let gate_m = chunk(tape, 5)?;

        let x = tape.layer_norm(h, LN_EPS)?;
        let x = tape.modulate(x, shift_a, scale_a, len)?;
        let (w, b) = (tape.param(&self.qkv_w), tape.param(&self.qkv_b));
        let qkv = tape.linear(x, w, Some(b))?;
        let a = tape.attention(qkv, batch, self.heads)?;
        let (w, b) = (tape.param(&self.proj_w), tape.param(&self.proj_b));
        let a = tape.linear(a, w, Some(b))?;
        let attn = tape.mul_rows(a, gate_a, len)?;
        let h1 = tape.add(h, attn)?;

        let x = tape.layer_norm(h1, LN_EPS)?;
        let x = tape.modulate(x, shift_m, scale_m, len)?;
        let (w, b) = (tape.param(&self.fc1_w), tape.param(&self.fc1_b));
        let m = tape.linear(x, w, Some(b))?;
        let m = tape.gelu(m);
        let (w, b) = (tape.param(&self.fc2_w), tape.param(&self.fc2_b));
        let m = tape.linear(m, w, Some(b))?;
        let mlp = tape.mul_rows(m, gate_m, len)?;
        let out = tape.add(h1, mlp)?;
        Ok(BlockOutput { out, attn, mlp })
    }
}
