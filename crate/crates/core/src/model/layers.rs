//! Model building blocks recorded on a [`Tape`]. Every function works on
//! whole sequences (one row per frame) so a forward pass stays a few hundred
//! nodes long.

use crate::error::{Error, Result};
use crate::model::params::{BoundParams, GruLayer, ModelDims, Param};
use crate::numerics::{Tape, Tensor, Var};

/// Object-focus attention for every frame at once.
///
/// `obj` is `[T·n, d]` (frame-major), `ctx` is `[T, d]`. Returns the pooled
/// object summary `[T, d]` and the attention weights `[T, n]`.
pub fn ofa_attention(tape: &mut Tape, bp: &BoundParams, obj: Var, ctx: Var, objects: usize) -> Result<(Var, Var)> {
    let frames = tape.value(ctx).rows();
    let d = tape.value(ctx).cols();
    let q = tape.matmul(ctx, bp.get(Param::OfaWq))?;
    let k = tape.matmul(obj, bp.get(Param::OfaWk))?;
    let v = tape.matmul(obj, bp.get(Param::OfaWv))?;
    let q_rep = tape.repeat_rows(q, objects)?;
    let qk = tape.mul(q_rep, k)?;
    let scores = tape.row_sums(qk)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let scores = tape.reshape(scores, &[frames, objects])?;
    let weights = tape.softmax(scores)?;
    let w_col = tape.reshape(weights, &[frames * objects, 1])?;
    let weighted = tape.mul_col(v, w_col)?;
    let pooled = tape.sum_groups(weighted, objects)?;
    let out = tape.matmul(pooled, bp.get(Param::OfaWo))?;
    Ok((out, weights))
}

/// Two affine maps with `tanh` between, applied to each row of `ctx`.
pub fn context_refine(tape: &mut Tape, bp: &BoundParams, ctx: Var) -> Result<Var> {
    let a = tape.matmul(ctx, bp.get(Param::RefineW1))?;
    let a = tape.add_row(a, bp.get(Param::RefineB1))?;
    let a = tape.tanh(a);
    let b = tape.matmul(a, bp.get(Param::RefineW2))?;
    tape.add_row(b, bp.get(Param::RefineB2))
}

/// Recurrent weights of one GRU layer, concatenated once per tape.
#[derive(Clone, Copy, Debug)]
pub struct GruWeights {
    /// `[in, 3H]`: input weights for the update, reset and candidate gates.
    w: Var,
    /// `[1, 3H]`
    b: Var,
    /// `[H, 2H]`: recurrent weights of the update and reset gates.
    u_zr: Var,
    /// `[H, H]`
    u_h: Var,
    hidden: usize,
}

impl GruWeights {
    pub fn bind(tape: &mut Tape, bp: &BoundParams, layer: GruLayer) -> Result<Self> {
        let [wz, wr, wh, uz, ur, uh, bz, br, bh] = layer.params().map(|p| bp.get(p));
        let hidden = tape.value(uh).rows();
        Ok(GruWeights {
            w: tape.concat(&[wz, wr, wh], 1)?,
            b: tape.concat(&[bz, br, bh], 1)?,
            u_zr: tape.concat(&[uz, ur], 1)?,
            u_h: uh,
            hidden,
        })
    }

    /// Input projections `x·W + b` for every row of `x`: `[T, 3H]`.
    pub fn project(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let xp = tape.matmul(x, self.w)?;
        tape.add_row(xp, self.b)
    }

    /// One recurrence from a projected input row `xp: [1, 3H]`.
    ///
    /// `h_next = (1 − z)⊙h + z⊙h̃`, written as `h + z⊙(h̃ − h)`.
    pub fn step(&self, tape: &mut Tape, xp: Var, h: Var) -> Result<Var> {
        let hd = self.hidden;
        let x_zr = tape.slice_cols(xp, 0, 2 * hd)?;
        let x_h = tape.slice_cols(xp, 2 * hd, 3 * hd)?;
        let hu = tape.matmul(h, self.u_zr)?;
        let pre = tape.add(x_zr, hu)?;
        let zr = tape.sigmoid(pre);
        let z = tape.slice_cols(zr, 0, hd)?;
        let r = tape.slice_cols(zr, hd, 2 * hd)?;
        let rh = tape.mul(r, h)?;
        let rhu = tape.matmul(rh, self.u_h)?;
        let cand = tape.add(x_h, rhu)?;
        let cand = tape.tanh(cand);
        let diff = tape.sub(cand, h)?;
        let upd = tape.mul(z, diff)?;
        tape.add(h, upd)
    }
}

/// A single GRU update for one `[1, in]` input row.
pub fn gru_cell(tape: &mut Tape, bp: &BoundParams, layer: GruLayer, x: Var, h_prev: Var) -> Result<Var> {
    let g = GruWeights::bind(tape, bp, layer)?;
    let xp = g.project(tape, x)?;
    g.step(tape, xp, h_prev)
}

/// Runs a GRU layer over the rows of `x: [T, in]` from a zero state and
/// returns the stacked hidden states `[T, H]`.
pub fn gru_sequence(tape: &mut Tape, bp: &BoundParams, layer: GruLayer, x: Var) -> Result<Var> {
    let g = GruWeights::bind(tape, bp, layer)?;
    let frames = tape.value(x).rows();
    let xp = g.project(tape, x)?;
    let mut h = tape.constant(Tensor::zeros(&[1, g.hidden]));
    let mut states = Vec::with_capacity(frames);
    for t in 0..frames {
        let row = tape.slice_rows(xp, t, t + 1)?;
        h = g.step(tape, row, h)?;
        states.push(h);
    }
    tape.concat(&states, 0)
}

/// Fixed sinusoidal encoding with 0-based positions:
/// `PE[t, 2i] = sin(t / 10000^(2i/H))`, `PE[t, 2i+1] = cos(…)`.
pub fn positional_encoding(frames: usize, hidden: usize) -> Result<Tensor> {
    if hidden == 0 || !hidden.is_multiple_of(2) {
        return Err(Error::config(
            "H",
            format!("positional encoding needs an even width, got {hidden}"),
        ));
    }
    let mut data = vec![0.0; frames * hidden];
    for t in 0..frames {
        for i in 0..hidden / 2 {
            let angle = t as f64 / 10000f64.powf((2 * i) as f64 / hidden as f64);
            data[t * hidden + 2 * i] = angle.sin();
            data[t * hidden + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::matrix(frames, hidden, data)
}

/// Frame-wise probability head: `σ(tanh(h·W1 + b1)·w2 + b2)`, `[T, 1]`.
pub fn frame_head(tape: &mut Tape, bp: &BoundParams, h2: Var) -> Result<Var> {
    let a = tape.matmul(h2, bp.get(Param::HeadW1))?;
    let a = tape.add_row(a, bp.get(Param::HeadB1))?;
    let a = tape.tanh(a);
    let logit = tape.matmul(a, bp.get(Param::HeadW2))?;
    let logit = tape.add_row(logit, bp.get(Param::HeadB2))?;
    Ok(tape.sigmoid(logit))
}

/// Multi-head self-attention over frames; returns `[T, H]` and each head's
/// `[T, T]` weights.
pub fn aux_mha(tape: &mut Tape, bp: &BoundParams, dims: &ModelDims, a: Var) -> Result<(Var, Vec<Var>)> {
    let dh = dims.hidden / dims.heads;
    let q = tape.matmul(a, bp.get(Param::AuxWq))?;
    let k = tape.matmul(a, bp.get(Param::AuxWk))?;
    let v = tape.matmul(a, bp.get(Param::AuxWv))?;
    let mut heads = Vec::with_capacity(dims.heads);
    let mut weights = Vec::with_capacity(dims.heads);
    for i in 0..dims.heads {
        let (lo, hi) = (i * dh, (i + 1) * dh);
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let vh = tape.slice_cols(v, lo, hi)?;
        let kt = tape.transpose(kh)?;
        let s = tape.matmul(qh, kt)?;
        let s = tape.scale(s, 1.0 / (dh as f64).sqrt());
        let w = tape.softmax(s)?;
        heads.push(tape.matmul(w, vh)?);
        weights.push(w);
    }
    let joined = tape.concat(&heads, 1)?;
    Ok((tape.matmul(joined, bp.get(Param::AuxWo))?, weights))
}

/// Auxiliary prediction `p_e = σ(MLP(mean_t MHA(PE + h²)))`, `[1, 1]`.
pub fn aux_head(tape: &mut Tape, bp: &BoundParams, dims: &ModelDims, h2: Var, use_pe: bool) -> Result<Var> {
    let a = if use_pe {
        let frames = tape.value(h2).rows();
        let pe = tape.constant(positional_encoding(frames, dims.hidden)?);
        tape.add(h2, pe)?
    } else {
        h2
    };
    let (m, _) = aux_mha(tape, bp, dims, a)?;
    let pooled = tape.mean_rows(m)?;
    let z = tape.matmul(pooled, bp.get(Param::AuxW1))?;
    let z = tape.add_row(z, bp.get(Param::AuxB1))?;
    let z = tape.tanh(z);
    let logit = tape.matmul(z, bp.get(Param::AuxW2))?;
    let logit = tape.add_row(logit, bp.get(Param::AuxB2))?;
    Ok(tape.sigmoid(logit))
}
