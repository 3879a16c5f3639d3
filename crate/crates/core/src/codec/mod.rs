//! Boundary codecs and the wire frame.
//!
//! The lossless codec sends `k` subspace coefficients per position instead of
//! `d` activations; the lossy baselines approximate the full tensor at a
//! matched byte budget.

mod frame;
mod lossless;
mod lossy;

pub use frame::{
    read_frame, write_frame, CompressedFrame, MsgType, HEADER_BYTES, MAGIC, MAX_FRAME_BYTES,
    WIRE_VERSION,
};
pub use lossless::{
    decode_backward, decode_dense, decode_forward, decode_subspace, encode_backward, encode_dense,
    encode_forward, encode_subspace, forward_coefficients, reconstruct_forward,
};
pub use lossy::{lossy_quantize, lossy_svd, lossy_topk, relative_mse, LossyCodec};

use crate::error::{Error, Result};

/// Worst-case accumulated gradient error at layer `l` of `L` when every
/// boundary adds error `e` and each layer's Jacobian has norm at most `nu`:
/// `e (nu^(L-l+1) - 1) / (nu - 1)`, or `e (L - l + 1)` at `nu = 1`.
pub fn error_bound(e: f64, nu: f64, total_layers: usize, l: usize) -> Result<f64> {
    if !(e >= 0.0) || !(nu > 0.0) {
        return Err(Error::Range(format!(
            "need e >= 0 and nu > 0, got e={e} nu={nu}"
        )));
    }
    if l == 0 || l > total_layers {
        return Err(Error::Range(format!(
            "layer {l} outside 1..={total_layers}"
        )));
    }
    let terms = (total_layers - l + 1) as i32;
    if (nu - 1.0).abs() < 1e-12 {
        return Ok(e * terms as f64);
    }
    Ok(e * (nu.powi(terms) - 1.0) / (nu - 1.0))
}
