use crate::error::{Error, Result};
use crate::linalg::{Real, Tensor3};
use crate::model::EmbeddingTables;
use crate::subspace::Subspace;

use super::frame::{CompressedFrame, MsgType};

/// `(x - PE - T_fixed[t]) U_k`: the `k` coefficients that describe a layer
/// output of the constrained model.
pub fn forward_coefficients<T: Real>(
    x: &Tensor3<T>,
    tokens: &[u32],
    emb: &EmbeddingTables<T>,
    s: &Subspace<T>,
) -> Result<Tensor3<T>> {
    let (b, n, _) = x.shape();
    let mut residual = x.clone();
    residual.sub_assign(&emb.base(tokens, b, n)?)?;
    s.compress(&residual)
}

/// `c U_k^T + PE + T_fixed[t]`, the inverse of [`forward_coefficients`].
pub fn reconstruct_forward<T: Real>(
    c: &Tensor3<T>,
    version: u32,
    tokens: &[u32],
    emb: &EmbeddingTables<T>,
    s: &Subspace<T>,
) -> Result<Tensor3<T>> {
    let mut x = s.decompress(c, version)?;
    x.add_assign(&emb.base(tokens, c.batch(), c.seq())?)?;
    Ok(x)
}

fn payload_of<T: Real>(t: &Tensor3<T>) -> Vec<f32> {
    t.data().iter().map(|v| v.as_f64() as f32).collect()
}

fn tensor_of<T: Real>(f: &CompressedFrame) -> Result<Tensor3<T>> {
    let (b, n, k) = f.dims();
    Tensor3::from_vec(
        b,
        n,
        k,
        f.payload.iter().map(|&v| T::of(v as f64)).collect(),
    )
    .map_err(|_| {
        Error::Protocol(format!(
            "payload of {} values for a {b}x{n}x{k} frame",
            f.payload.len()
        ))
    })
}

fn expect_type(f: &CompressedFrame, want: MsgType) -> Result<()> {
    if f.msg_type != want {
        return Err(Error::Protocol(format!(
            "expected {want:?} frame, got {:?}",
            f.msg_type
        )));
    }
    Ok(())
}

/// Forward frame carrying the subspace coefficients of `x` and the token ids
/// the receiver needs to restore `PE + T_fixed[t]`.
pub fn encode_forward<T: Real>(
    x: &Tensor3<T>,
    tokens: &[u32],
    layer_id: usize,
    microbatch_id: usize,
    emb: &EmbeddingTables<T>,
    s: &Subspace<T>,
) -> Result<CompressedFrame> {
    let c = forward_coefficients(x, tokens, emb, s)?;
    CompressedFrame::new(
        MsgType::Forward,
        layer_id,
        microbatch_id,
        s.version(),
        c.shape(),
        tokens.to_vec(),
        payload_of(&c),
    )
}

pub fn decode_forward<T: Real>(
    f: &CompressedFrame,
    emb: &EmbeddingTables<T>,
    s: &Subspace<T>,
) -> Result<Tensor3<T>> {
    expect_type(f, MsgType::Forward)?;
    let c = tensor_of(f)?;
    reconstruct_forward(&c, f.subspace_version, &f.token_ids, emb, s)
}

/// Backward frame carrying `g U_k`.
pub fn encode_backward<T: Real>(
    g: &Tensor3<T>,
    layer_id: usize,
    microbatch_id: usize,
    s: &Subspace<T>,
) -> Result<CompressedFrame> {
    let c = s.compress(g)?;
    CompressedFrame::new(
        MsgType::Backward,
        layer_id,
        microbatch_id,
        s.version(),
        c.shape(),
        Vec::new(),
        payload_of(&c),
    )
}

/// `payload U_k^T`, the incoming gradient projected onto the subspace.
pub fn decode_backward<T: Real>(f: &CompressedFrame, s: &Subspace<T>) -> Result<Tensor3<T>> {
    expect_type(f, MsgType::Backward)?;
    s.decompress(&tensor_of(f)?, f.subspace_version)
}

/// Uncompressed frame: the full `b x n x d` tensor, no token ids.
pub fn encode_dense<T: Real>(
    msg_type: MsgType,
    x: &Tensor3<T>,
    layer_id: usize,
    microbatch_id: usize,
) -> Result<CompressedFrame> {
    CompressedFrame::new(
        msg_type,
        layer_id,
        microbatch_id,
        0,
        x.shape(),
        Vec::new(),
        payload_of(x),
    )
}

pub fn decode_dense<T: Real>(f: &CompressedFrame, msg_type: MsgType) -> Result<Tensor3<T>> {
    expect_type(f, msg_type)?;
    tensor_of(f)
}

/// Subspace broadcast: `U_k` row-major as a `1 x d x k` payload.
pub fn encode_subspace<T: Real>(s: &Subspace<T>) -> Result<CompressedFrame> {
    CompressedFrame::new(
        MsgType::Subspace,
        0,
        0,
        s.version(),
        (1, s.d(), s.k()),
        Vec::new(),
        s.basis().data().iter().map(|v| v.as_f64() as f32).collect(),
    )
}

pub fn decode_subspace<T: Real>(f: &CompressedFrame) -> Result<Subspace<T>> {
    expect_type(f, MsgType::Subspace)?;
    let (_, d, k) = f.dims();
    let basis =
        crate::linalg::Matrix::from_vec(d, k, f.payload.iter().map(|&v| T::of(v as f64)).collect())
            .map_err(|_| Error::Protocol("subspace payload does not match d x k".into()))?;
    Subspace::from_basis(basis, f.subspace_version)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;

    fn tables() -> (EmbeddingTables<f32>, Subspace<f32>) {
        let emb = EmbeddingTables {
            positional: Matrix::from_vec(1, 4, vec![1.0; 4]).unwrap(),
            token_fixed: Matrix::from_vec(2, 4, vec![9.0, 9.0, 9.0, 9.0, 0.0, 2.0, 0.0, 0.0])
                .unwrap(),
            token_low: Matrix::zeros(2, 4),
        };
        (emb, Subspace::coordinate(4, &[0, 1]).unwrap())
    }

    #[test]
    fn forward_example() {
        let (emb, s) = tables();
        let x = Tensor3::from_vec(1, 1, 4, vec![4.0, 2.0, 1.0, 1.0]).unwrap();
        let f = encode_forward(&x, &[1], 0, 0, &emb, &s).unwrap();
        assert_eq!(f.payload, vec![3.0, -1.0]);
        assert_eq!(f.token_ids, vec![1]);
        assert_eq!(decode_forward(&f, &emb, &s).unwrap(), x);
    }

    #[test]
    fn zero_residual_gives_zero_payload() {
        let (emb, s) = tables();
        let x = emb.base(&[1], 1, 1).unwrap();
        let f = encode_forward(&x, &[1], 0, 0, &emb, &s).unwrap();
        assert!(f.payload.iter().all(|&v| v == 0.0));
        let mut zero = f.clone();
        zero.payload = vec![0.0; 2];
        assert_eq!(decode_forward(&zero, &emb, &s).unwrap(), x);
    }

    #[test]
    fn backward_annihilates_the_complement() {
        let (_, s) = tables();
        let g = Tensor3::from_vec(1, 1, 4, vec![0.0, 0.0, 5.0, 0.0]).unwrap();
        let f = encode_backward(&g, 0, 0, &s).unwrap();
        assert_eq!(f.payload, vec![0.0, 0.0]);
        assert_eq!(decode_backward::<f32>(&f, &s).unwrap().data(), &[0.0; 4]);
        let inside = Tensor3::from_vec(1, 1, 4, vec![1.5, -2.0, 0.0, 0.0]).unwrap();
        let f = encode_backward(&inside, 0, 0, &s).unwrap();
        assert_eq!(decode_backward(&f, &s).unwrap(), inside);
    }

    #[test]
    fn stale_frames_are_rejected() {
        let (emb, s) = tables();
        let x = Tensor3::from_vec(1, 1, 4, vec![4.0, 2.0, 1.0, 1.0]).unwrap();
        let mut f = encode_forward(&x, &[1], 0, 0, &emb, &s).unwrap();
        f.subspace_version = 5;
        assert!(matches!(
            decode_forward(&f, &emb, &s),
            Err(Error::StaleSubspace { .. })
        ));
    }

    #[test]
    fn wrong_message_type_is_a_protocol_error() {
        let (_, s) = tables();
        let g = Tensor3::from_vec(1, 1, 4, vec![1.0; 4]).unwrap();
        let f = encode_backward(&g, 0, 0, &s).unwrap();
        assert!(matches!(
            decode_dense::<f32>(&f, MsgType::Forward),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn out_of_range_position_is_rejected() {
        let (emb, s) = tables();
        let x = Tensor3::zeros(1, 2, 4);
        assert!(matches!(
            encode_forward(&x, &[0, 1], 0, 0, &emb, &s),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn subspace_frame_round_trip() {
        let s = Subspace::<f32>::coordinate(5, &[4, 1]).unwrap();
        let f = encode_subspace(&s).unwrap();
        assert_eq!(f.wire_len(), 34 + 5 * 2 * 4);
        assert_eq!(decode_subspace::<f32>(&f).unwrap(), s);
    }
}
