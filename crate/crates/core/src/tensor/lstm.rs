use super::{add_assign, conv2d, sigmoid, ConvParams, Tensor};
use crate::error::{EmfError, Result};

/// Recurrent state of a per-pixel LSTM over a `(C, H, W)` map.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        LstmState {
            h: Tensor::zeros(&[c, h, w]),
            c: Tensor::zeros(&[c, h, w]),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.h.shape()
    }

    pub fn reset(&mut self) {
        self.h.data_mut().fill(0.0);
        self.c.data_mut().fill(0.0);
    }

    pub fn is_zero(&self) -> bool {
        self.h.data().iter().chain(self.c.data()).all(|&v| v == 0.0)
    }
}

/// 1x1 gate convolutions mapping `C` input and `C` hidden channels to the
/// `4C` stacked gate pre-activations, ordered `[input, forget, cell, output]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmGates {
    pub wx: ConvParams,
    pub wh: ConvParams,
}

impl LstmGates {
    pub fn hidden(&self) -> usize {
        self.wx.out_channels() / 4
    }
}

/// One LSTM step applied independently at every pixel with shared weights.
/// Returns the new hidden map (the layer output) and the updated state.
pub fn pixel_lstm_step(
    x: &Tensor,
    state: &LstmState,
    gates: &LstmGates,
) -> Result<(Tensor, LstmState)> {
    let (_, h, w) = x.dims3()?;
    let hid = gates.hidden();
    for g in [&gates.wx, &gates.wh] {
        if g.kernel() != (1, 1) || g.out_channels() != 4 * hid {
            return Err(EmfError::shape(format!(
                "LSTM gates must be 1x1 convolutions to 4C channels, got {:?}",
                g.weight.shape()
            )));
        }
    }
    if state.h.shape() != [hid, h, w] || state.c.shape() != [hid, h, w] {
        return Err(EmfError::shape(format!(
            "LSTM state {:?}/{:?} does not match expected ({hid}, {h}, {w})",
            state.h.shape(),
            state.c.shape()
        )));
    }
    let mut pre = conv2d(x, &gates.wx)?;
    add_assign(&mut pre, &conv2d(&state.h, &gates.wh)?)?;

    let plane = h * w;
    let n = hid * plane;
    let p = pre.data();
    let (gi, rest) = p.split_at(n);
    let (gf, rest) = rest.split_at(n);
    let (gg, go) = rest.split_at(n);
    let mut h_new = vec![0.0f32; n];
    let mut c_new = vec![0.0f32; n];
    for idx in 0..n {
        let i = sigmoid(gi[idx]);
        let f = sigmoid(gf[idx]);
        let g = gg[idx].tanh();
        let o = sigmoid(go[idx]);
        let c = f * state.c.data()[idx] + i * g;
        c_new[idx] = c;
        h_new[idx] = o * c.tanh();
    }
    let h_t = Tensor::from_vec(&[hid, h, w], h_new)?;
    let c_t = Tensor::from_vec(&[hid, h, w], c_new)?;
    Ok((h_t.clone(), LstmState { h: h_t, c: c_t }))
}
