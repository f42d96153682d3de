//! Fused single-direction LSTM kernel with hand-written backpropagation
//! through time.
//!
//! Gate layout inside the `4h` pre-activation vector is `[i | f | g | o]`:
//!
//! ```text
//! a_t = x_t Wx + h_{t-1} Wh + b
//! i = σ(a_i)  f = σ(a_f)  g = tanh(a_g)  o = σ(a_o)
//! c_t = f ⊙ c_{t-1} + i ⊙ g
//! h_t = o ⊙ tanh(c_t)
//! ```

#[derive(Debug, Clone)]
pub(crate) struct LstmCache {
    /// Post-activation gates per processed step, `[steps, 4h]`.
    gates: Vec<f64>,
    /// Cell state per processed step, `[steps, h]`.
    cells: Vec<f64>,
    /// `tanh(c_t)` per processed step, `[steps, h]`.
    cell_tanh: Vec<f64>,
}

pub(crate) struct LstmDims {
    pub len: usize,
    pub input: usize,
    pub hidden: usize,
    pub reverse: bool,
}

impl LstmDims {
    /// Sequence position visited at processing step `s`.
    fn position(&self, s: usize) -> usize {
        if self.reverse {
            self.len - 1 - s
        } else {
            s
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Returns the hidden states `[len, h]` in original sequence order.
pub(crate) fn forward(
    dims: &LstmDims,
    x: &[f64],
    wx: &[f64],
    wh: &[f64],
    b: &[f64],
) -> (Vec<f64>, LstmCache) {
    let (h, din) = (dims.hidden, dims.input);
    let g4 = 4 * h;
    let mut out = vec![0.0; dims.len * h];
    let mut cache = LstmCache {
        gates: vec![0.0; dims.len * g4],
        cells: vec![0.0; dims.len * h],
        cell_tanh: vec![0.0; dims.len * h],
    };
    let mut h_prev = vec![0.0; h];
    let mut c_prev = vec![0.0; h];
    let mut pre = vec![0.0; g4];

    for s in 0..dims.len {
        let t = dims.position(s);
        pre.copy_from_slice(b);
        let xt = &x[t * din..(t + 1) * din];
        for (k, &xv) in xt.iter().enumerate() {
            if xv != 0.0 {
                let row = &wx[k * g4..(k + 1) * g4];
                pre.iter_mut().zip(row).for_each(|(p, w)| *p += xv * w);
            }
        }
        for (k, &hv) in h_prev.iter().enumerate() {
            if hv != 0.0 {
                let row = &wh[k * g4..(k + 1) * g4];
                pre.iter_mut().zip(row).for_each(|(p, w)| *p += hv * w);
            }
        }
        let gates = &mut cache.gates[s * g4..(s + 1) * g4];
        for j in 0..h {
            gates[j] = sigmoid(pre[j]);
            gates[h + j] = sigmoid(pre[h + j]);
            gates[2 * h + j] = pre[2 * h + j].tanh();
            gates[3 * h + j] = sigmoid(pre[3 * h + j]);
        }
        for j in 0..h {
            let c = gates[h + j] * c_prev[j] + gates[j] * gates[2 * h + j];
            let tc = c.tanh();
            cache.cells[s * h + j] = c;
            cache.cell_tanh[s * h + j] = tc;
            let hv = gates[3 * h + j] * tc;
            out[t * h + j] = hv;
            c_prev[j] = c;
            h_prev[j] = hv;
        }
    }
    (out, cache)
}

pub(crate) struct LstmGrads {
    pub dx: Vec<f64>,
    pub dwx: Vec<f64>,
    pub dwh: Vec<f64>,
    pub db: Vec<f64>,
}

/// Backpropagation through time given `dout` (`[len, h]`, original order).
pub(crate) fn backward(
    dims: &LstmDims,
    x: &[f64],
    wx: &[f64],
    wh: &[f64],
    out: &[f64],
    cache: &LstmCache,
    dout: &[f64],
) -> LstmGrads {
    let (h, din) = (dims.hidden, dims.input);
    let g4 = 4 * h;
    let mut grads = LstmGrads {
        dx: vec![0.0; dims.len * din],
        dwx: vec![0.0; din * g4],
        dwh: vec![0.0; h * g4],
        db: vec![0.0; g4],
    };
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let mut da = vec![0.0; g4];

    for s in (0..dims.len).rev() {
        let t = dims.position(s);
        let gates = &cache.gates[s * g4..(s + 1) * g4];
        for j in 0..h {
            let (i, f, g, o) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
            let tc = cache.cell_tanh[s * h + j];
            let c_prev = if s == 0 { 0.0 } else { cache.cells[(s - 1) * h + j] };
            let dh = dout[t * h + j] + dh_next[j];
            let d_o = dh * tc;
            let dc = dc_next[j] + dh * o * (1.0 - tc * tc);
            da[j] = dc * g * i * (1.0 - i);
            da[h + j] = dc * c_prev * f * (1.0 - f);
            da[2 * h + j] = dc * i * (1.0 - g * g);
            da[3 * h + j] = d_o * o * (1.0 - o);
            dc_next[j] = dc * f;
        }
        grads.db.iter_mut().zip(&da).for_each(|(d, a)| *d += a);

        let xt = &x[t * din..(t + 1) * din];
        let dxt = &mut grads.dx[t * din..(t + 1) * din];
        for k in 0..din {
            let wrow = &wx[k * g4..(k + 1) * g4];
            dxt[k] = wrow.iter().zip(&da).map(|(w, a)| w * a).sum();
            let xv = xt[k];
            if xv != 0.0 {
                let grow = &mut grads.dwx[k * g4..(k + 1) * g4];
                grow.iter_mut().zip(&da).for_each(|(gw, a)| *gw += xv * a);
            }
        }

        // h_{t-1} is the output at the previously processed position.
        let h_prev: Option<&[f64]> = (s > 0).then(|| {
            let tp = dims.position(s - 1);
            &out[tp * h..(tp + 1) * h]
        });
        for k in 0..h {
            let wrow = &wh[k * g4..(k + 1) * g4];
            dh_next[k] = wrow.iter().zip(&da).map(|(w, a)| w * a).sum();
            if let Some(hp) = h_prev {
                let hv = hp[k];
                if hv != 0.0 {
                    let grow = &mut grads.dwh[k * g4..(k + 1) * g4];
                    grow.iter_mut().zip(&da).for_each(|(gw, a)| *gw += hv * a);
                }
            }
        }
    }
    grads
}
