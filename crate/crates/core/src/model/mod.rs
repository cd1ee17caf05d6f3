//! The frame-wise anticipation model: object-focus attention, context
//! refinement, a two-layer GRU, a per-frame probability head and an auxiliary
//! self-attention head over the second-layer states.

mod checkpoint;
pub mod layers;
mod params;

pub use checkpoint::{checkpoint_bytes, load_checkpoint, save_checkpoint, Checkpoint, Role};
pub use params::{bind, init_params, BoundParams, GruLayer, ModelDims, ModelParams, Param};

use serde::{Deserialize, Serialize};

use crate::data::FeatureSequence;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Build the auxiliary head (`p_e`).
    pub aux: bool,
    /// Add the positional encoding before the auxiliary attention.
    pub positional_encoding: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            aux: true,
            positional_encoding: true,
        }
    }
}

impl ForwardOptions {
    pub fn frames_only() -> Self {
        ForwardOptions {
            aux: false,
            ..Self::default()
        }
    }
}

/// Input features recorded on a tape: `obj` is `[T·n, d]`, `ctx` is `[T, d]`.
#[derive(Clone, Copy, Debug)]
pub struct InputVars {
    pub obj: Var,
    pub ctx: Var,
    pub objects: usize,
}

impl InputVars {
    pub fn constant(tape: &mut Tape, x: &FeatureSequence) -> Result<Self> {
        let (t, n, d) = (x.frames(), x.objects(), x.dim());
        Ok(InputVars {
            obj: tape.constant(Tensor::matrix(t * n, d, x.obj().to_vec())?),
            ctx: tape.constant(Tensor::matrix(t, d, x.ctx().to_vec())?),
            objects: n,
        })
    }
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `[T, 1]` frame probabilities.
    pub p: Var,
    /// `[1, 1]`, present when the auxiliary head was built.
    pub p_e: Option<Var>,
    pub h1: Var,
    pub h2: Var,
    pub refined_obj: Var,
    pub refined_ctx: Var,
    /// `[T, n]` object attention weights.
    pub attention: Var,
}

pub fn forward_on_tape(
    tape: &mut Tape,
    bp: &BoundParams,
    dims: &ModelDims,
    x: &InputVars,
    opts: ForwardOptions,
) -> Result<ForwardVars> {
    let ctx_shape = tape.value(x.ctx).shape().to_vec();
    if ctx_shape.len() != 2 || ctx_shape[1] != dims.d || tape.value(x.obj).cols() != dims.d {
        return Err(Error::Shape {
            op: "forward",
            lhs: vec![dims.d],
            rhs: ctx_shape,
        });
    }
    let (refined_obj, attention) = layers::ofa_attention(tape, bp, x.obj, x.ctx, x.objects)?;
    let refined_ctx = layers::context_refine(tape, bp, x.ctx)?;
    let joined = tape.concat(&[refined_obj, refined_ctx], 1)?;
    let h1 = layers::gru_sequence(tape, bp, GruLayer::First, joined)?;
    let h2 = layers::gru_sequence(tape, bp, GruLayer::Second, h1)?;
    let p = layers::frame_head(tape, bp, h2)?;
    let p_e = if opts.aux {
        Some(layers::aux_head(tape, bp, dims, h2, opts.positional_encoding)?)
    } else {
        None
    };
    Ok(ForwardVars {
        p,
        p_e,
        h1,
        h2,
        refined_obj,
        refined_ctx,
        attention,
    })
}

/// Everything one forward pass produces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionTrace {
    pub p: Vec<f64>,
    pub p_e: f64,
    /// `[T, H]`
    pub h1: Tensor,
    /// `[T, H]`
    pub h2: Tensor,
    /// `[T, d]`: attention-pooled object summary per frame.
    pub refined_obj: Tensor,
    /// `[T, d]`
    pub refined_ctx: Tensor,
    /// `[T, n]`
    pub attention: Tensor,
}

impl PredictionTrace {
    pub fn from_tape(tape: &Tape, vars: &ForwardVars) -> Self {
        PredictionTrace {
            p: tape.value(vars.p).data().to_vec(),
            p_e: vars.p_e.map_or(f64::NAN, |v| tape.value(v).item()),
            h1: tape.value(vars.h1).clone(),
            h2: tape.value(vars.h2).clone(),
            refined_obj: tape.value(vars.refined_obj).clone(),
            refined_ctx: tape.value(vars.refined_ctx).clone(),
            attention: tape.value(vars.attention).clone(),
        }
    }
}

pub fn forward(x: &FeatureSequence, params: &ModelParams) -> Result<PredictionTrace> {
    forward_with(x, params, ForwardOptions::default())
}

pub fn forward_with(x: &FeatureSequence, params: &ModelParams, opts: ForwardOptions) -> Result<PredictionTrace> {
    let mut tape = Tape::new();
    let bp = bind(&mut tape, params, |_| false);
    let input = InputVars::constant(&mut tape, x)?;
    let vars = forward_on_tape(&mut tape, &bp, &params.dims, &input, opts)?;
    Ok(PredictionTrace::from_tape(&tape, &vars))
}

/// Frame probabilities only.
pub fn predict(x: &FeatureSequence, params: &ModelParams) -> Result<Vec<f64>> {
    Ok(forward_with(x, params, ForwardOptions::frames_only())?.p)
}

/// The latent representation `h(x; θ)`: second-layer states, flattened
/// row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentView {
    pub values: Vec<f64>,
    pub frames: usize,
    pub hidden: usize,
}

impl LatentView {
    pub fn from_trace(trace: &PredictionTrace) -> Self {
        LatentView {
            values: trace.h2.data().to_vec(),
            frames: trace.h2.rows(),
            hidden: trace.h2.cols(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// The `[T, H]` matrix of states.
    pub fn unflatten(&self) -> Tensor {
        Tensor::matrix(self.frames, self.hidden, self.values.clone()).expect("consistent view")
    }

    pub fn from_matrix(h2: &Tensor) -> Self {
        LatentView {
            values: h2.data().to_vec(),
            frames: h2.rows(),
            hidden: h2.cols(),
        }
    }
}

pub fn latent_view(trace: &PredictionTrace) -> LatentView {
    LatentView::from_trace(trace)
}

fn value_tape(params: &ModelParams) -> (Tape, BoundParams) {
    let mut tape = Tape::new();
    let bp = bind(&mut tape, params, |_| false);
    (tape, bp)
}

/// Object-focus attention for a single frame: `obj_t` holds `n·d` values.
/// Returns the `d`-vector summary and the `n` attention weights.
pub fn ofa_attention(obj_t: &[f64], ctx_t: &[f64], params: &ModelParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = params.dims.d;
    if ctx_t.len() != d || obj_t.is_empty() || !obj_t.len().is_multiple_of(d) {
        return Err(Error::Shape {
            op: "ofa_attention",
            lhs: vec![obj_t.len(), ctx_t.len()],
            rhs: vec![d],
        });
    }
    let (mut tape, bp) = value_tape(params);
    let n = obj_t.len() / d;
    let obj = tape.constant(Tensor::matrix(n, d, obj_t.to_vec())?);
    let ctx = tape.constant(Tensor::row(ctx_t.to_vec()));
    let (out, w) = layers::ofa_attention(&mut tape, &bp, obj, ctx, n)?;
    Ok((tape.value(out).data().to_vec(), tape.value(w).data().to_vec()))
}

pub fn context_refine(ctx_t: &[f64], params: &ModelParams) -> Result<Vec<f64>> {
    let (mut tape, bp) = value_tape(params);
    let ctx = tape.constant(Tensor::row(ctx_t.to_vec()));
    let out = layers::context_refine(&mut tape, &bp, ctx)?;
    Ok(tape.value(out).data().to_vec())
}

pub fn gru_cell(x_t: &[f64], h_prev: &[f64], params: &ModelParams, layer: GruLayer) -> Result<Vec<f64>> {
    let (mut tape, bp) = value_tape(params);
    let x = tape.constant(Tensor::row(x_t.to_vec()));
    let h = tape.constant(Tensor::row(h_prev.to_vec()));
    let out = layers::gru_cell(&mut tape, &bp, layer, x, h)?;
    Ok(tape.value(out).data().to_vec())
}

pub use layers::positional_encoding;
