//! Convolutional gated recurrent unit.
//!
//! ```text
//! [z, r] = σ(conv([x, h]))
//! h̃      = tanh(conv([x, r ⊙ h]))
//! h'     = (1 − z) ⊙ h + z ⊙ h̃
//! ```

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Conv2dSpec, Tape, Var};
use crate::tensor::Tensor;

/// Parameter handles of one gated recurrent convolution cell.
#[derive(Clone, Debug)]
pub struct GruConvParams {
    pub gates_w: ParamId,
    pub gates_b: ParamId,
    pub cand_w: ParamId,
    pub cand_b: ParamId,
    pub input_channels: usize,
    pub hidden_channels: usize,
    pub kernel: usize,
}

/// The same cell bound onto a tape; bind once per forward pass and reuse across steps.
#[derive(Clone, Copy, Debug)]
pub struct GruConvVars {
    gates_w: Var,
    gates_b: Var,
    cand_w: Var,
    cand_b: Var,
    hidden_channels: usize,
    kernel: usize,
}

impl GruConvVars {
    /// Assembles gate and candidate weights already placed on a tape.
    pub fn from_vars(gates_w: Var, gates_b: Var, cand_w: Var, cand_b: Var, hidden_channels: usize, kernel: usize) -> Self {
        GruConvVars { gates_w, gates_b, cand_w, cand_b, hidden_channels, kernel }
    }
}

impl GruConvParams {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        prefix: &str,
        input_channels: usize,
        hidden_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let cin = input_channels + hidden_channels;
        let kk = kernel * kernel;
        let gates_w = store.add_glorot(
            format!("{prefix}.gates.w"),
            &[2 * hidden_channels, cin, kernel, kernel],
            cin * kk,
            2 * hidden_channels * kk,
            rng,
        );
        let gates_b = store.add(format!("{prefix}.gates.b"), Tensor::zeros(&[2 * hidden_channels]));
        let cand_w = store.add_glorot(
            format!("{prefix}.cand.w"),
            &[hidden_channels, cin, kernel, kernel],
            cin * kk,
            hidden_channels * kk,
            rng,
        );
        let cand_b = store.add(format!("{prefix}.cand.b"), Tensor::zeros(&[hidden_channels]));
        GruConvParams {
            gates_w,
            gates_b,
            cand_w,
            cand_b,
            input_channels,
            hidden_channels,
            kernel,
        }
    }

    pub fn bind<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>) -> GruConvVars {
        GruConvVars {
            gates_w: tape.param(store, self.gates_w),
            gates_b: tape.param(store, self.gates_b),
            cand_w: tape.param(store, self.cand_w),
            cand_b: tape.param(store, self.cand_b),
            hidden_channels: self.hidden_channels,
            kernel: self.kernel,
        }
    }
}

/// One recurrence step; `hidden` and `x` must share batch and spatial size.
pub fn gated_recurrent_conv<S: Scalar>(
    tape: &mut Tape<S>,
    hidden: Var,
    x: Var,
    p: &GruConvVars,
) -> Result<Var> {
    let (hn, hc, hh, hw) = tape.value(hidden).dims4("gated_recurrent_conv")?;
    let (xn, _, xh, xw) = tape.value(x).dims4("gated_recurrent_conv")?;
    if hn != xn || hh != xh || hw != xw || hc != p.hidden_channels {
        return Err(shape_err(
            "gated_recurrent_conv",
            format!("hidden {:?} input {:?}", tape.shape(hidden), tape.shape(x)),
        ));
    }
    let spec = Conv2dSpec::new(1, p.kernel / 2);
    let xh_cat = tape.concat_channels(&[x, hidden])?;
    let gates = tape.conv2d(xh_cat, p.gates_w, Some(p.gates_b), spec)?;
    let gates = tape.sigmoid(gates);
    let z = tape.slice_channels(gates, 0, hc)?;
    let r = tape.slice_channels(gates, hc, hc)?;
    let rh = tape.mul(r, hidden)?;
    let xrh = tape.concat_channels(&[x, rh])?;
    let cand = tape.conv2d(xrh, p.cand_w, Some(p.cand_b), spec)?;
    let cand = tape.tanh(cand);
    let keep = tape.one_minus(z);
    let kept = tape.mul(keep, hidden)?;
    let fresh = tape.mul(z, cand)?;
    tape.add(kept, fresh)
}
