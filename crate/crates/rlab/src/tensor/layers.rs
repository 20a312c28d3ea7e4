//! Layer builders over the raw op tape: dense, 2-D convolution, and a
//! statically unrolled LSTM cell. These are the only layer kinds any
//! network in the repo uses.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::graph::{GraphBuilder, NodeId};
use super::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, gb: &mut GraphBuilder, x: NodeId) -> NodeId {
        match self {
            Activation::Linear => x,
            Activation::Relu => gb.relu(x),
            Activation::Tanh => gb.tanh(x),
            Activation::Sigmoid => gb.sigmoid(x),
        }
    }
}

/// Glorot uniform init: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    scaled_uniform(rng, shape, fan_in, fan_out, 1.0)
}

/// Glorot uniform with a gain multiplier on the half-width.
pub fn scaled_uniform(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    gain: f64,
) -> Tensor {
    let a = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(shape.to_vec(), data).expect("static shape")
}

/// Fully connected layer: `act(x W + b)`.
pub fn dense(
    gb: &mut GraphBuilder,
    prefix: &str,
    x: NodeId,
    in_dim: usize,
    out_dim: usize,
    act: Activation,
) -> Result<NodeId, TensorError> {
    let w = gb.param_xavier(&format!("{prefix}.w"), &[in_dim, out_dim], in_dim, out_dim)?;
    let b = gb.param_zeros(&format!("{prefix}.b"), &[out_dim])?;
    let h = gb.matmul(x, w)?;
    let h = gb.add_bias(h, b)?;
    Ok(act.apply(gb, h))
}

/// 2-D convolution layer: `act(conv(x, k) + b)` with zero padding.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_layer(
    gb: &mut GraphBuilder,
    prefix: &str,
    x: NodeId,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    act: Activation,
) -> Result<NodeId, TensorError> {
    let fan_in = in_ch * kernel * kernel;
    let fan_out = out_ch * kernel * kernel;
    let k = gb.param_xavier(
        &format!("{prefix}.k"),
        &[out_ch, in_ch, kernel, kernel],
        fan_in,
        fan_out,
    )?;
    let b = gb.param_zeros(&format!("{prefix}.b"), &[out_ch])?;
    let h = gb.conv2d(x, k, stride, padding)?;
    let h = gb.add_channel_bias(h, b)?;
    Ok(act.apply(gb, h))
}

/// LSTM cell unrolled statically over `xs` (one node per time step, each
/// `[B, in_dim]`). Parameters are shared across steps; the initial hidden
/// and cell states are zero, handled by omitting their terms at step 0.
/// Returns the hidden state node of every step.
pub fn lstm(
    gb: &mut GraphBuilder,
    prefix: &str,
    xs: &[NodeId],
    in_dim: usize,
    hidden: usize,
) -> Result<Vec<NodeId>, TensorError> {
    assert!(!xs.is_empty(), "lstm needs at least one step");
    let gates = ["i", "f", "g", "o"];
    let mut wx = Vec::new();
    let mut wh = Vec::new();
    let mut bias = Vec::new();
    for gate in gates {
        wx.push(gb.param_xavier(&format!("{prefix}.wx_{gate}"), &[in_dim, hidden], in_dim, hidden)?);
        wh.push(gb.param_xavier(&format!("{prefix}.wh_{gate}"), &[hidden, hidden], hidden, hidden)?);
        // Forget-gate bias starts at 1 so early training does not erase state.
        let init = if gate == "f" { Tensor::filled(&[hidden], 1.0) } else { Tensor::zeros(&[hidden]) };
        bias.push(gb.param_tensor(&format!("{prefix}.b_{gate}"), init)?);
    }

    let mut hs = Vec::with_capacity(xs.len());
    let mut prev: Option<(NodeId, NodeId)> = None; // (h, c)
    for &x in xs {
        let mut pre = [0usize; 4];
        for gi in 0..4 {
            let mut z = gb.matmul(x, wx[gi])?;
            if let Some((h_prev, _)) = prev {
                let hz = gb.matmul(h_prev, wh[gi])?;
                z = gb.add(z, hz)?;
            }
            pre[gi] = gb.add_bias(z, bias[gi])?;
        }
        let i = gb.sigmoid(pre[0]);
        let f = gb.sigmoid(pre[1]);
        let g = gb.tanh(pre[2]);
        let o = gb.sigmoid(pre[3]);
        let ig = gb.mul(i, g)?;
        let c = match prev {
            Some((_, c_prev)) => {
                let fc = gb.mul(f, c_prev)?;
                gb.add(ig, fc)?
            }
            None => ig,
        };
        let ct = gb.tanh(c);
        let h = gb.mul(o, ct)?;
        hs.push(h);
        prev = Some((h, c));
    }
    Ok(hs)
}
