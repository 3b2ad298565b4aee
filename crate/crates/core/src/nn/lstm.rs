use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{glorot, sigmoid, Parameters};
use crate::error::{Error, Result};

/// Gate blocks are laid out in this order along the `4 × hidden` axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Input,
    Forget,
    Output,
    Cell,
}

impl Gate {
    fn block(self) -> usize {
        match self {
            Gate::Input => 0,
            Gate::Forget => 1,
            Gate::Output => 2,
            Gate::Cell => 3,
        }
    }
}

/// One vanilla LSTM layer.
///
/// `i = σ(xWᵢ + hUᵢ + bᵢ)`, `f = σ(…)`, `o = σ(…)`, `g = tanh(…)`,
/// `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmLayer {
    /// `in_dim × 4·hidden`
    #[serde(with = "crate::persist::mat")]
    pub w: Array2<f64>,
    /// `hidden × 4·hidden`
    #[serde(with = "crate::persist::mat")]
    pub u: Array2<f64>,
    #[serde(with = "crate::persist::vec")]
    pub b: Array1<f64>,
}

/// Activations kept from a forward pass over one sequence batch.
#[derive(Debug, Clone)]
pub struct LstmCache {
    xs: Vec<Array2<f64>>,
    /// Post-activation gates per step, `B × 4H`.
    gates: Vec<Array2<f64>>,
    hs: Vec<Array2<f64>>,
    cs: Vec<Array2<f64>>,
    tanh_c: Vec<Array2<f64>>,
    active: Option<Vec<Vec<bool>>>,
}

impl LstmCache {
    pub fn final_state(&self) -> (&Array2<f64>, &Array2<f64>) {
        (self.hs.last().expect("non-empty sequence"), self.cs.last().expect("non-empty sequence"))
    }
}

impl LstmLayer {
    pub fn zeros(in_dim: usize, hidden: usize) -> Self {
        LstmLayer {
            w: Array2::zeros((in_dim, 4 * hidden)),
            u: Array2::zeros((hidden, 4 * hidden)),
            b: Array1::zeros(4 * hidden),
        }
    }

    /// Glorot-uniform weights, zero biases except the forget gate at 1.
    pub fn random<R: Rng>(in_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let w = {
            let mut f = glorot(rng, in_dim, 4 * hidden);
            Array2::from_shape_simple_fn((in_dim, 4 * hidden), &mut f)
        };
        let u = {
            let mut f = glorot(rng, hidden, 4 * hidden);
            Array2::from_shape_simple_fn((hidden, 4 * hidden), &mut f)
        };
        let mut b = Array1::zeros(4 * hidden);
        b.slice_mut(s![hidden..2 * hidden]).fill(1.0);
        LstmLayer { w, u, b }
    }

    pub fn in_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.u.nrows()
    }

    pub fn input_weights(&self, g: Gate) -> ArrayView2<'_, f64> {
        let h = self.hidden();
        self.w.slice(s![.., g.block() * h..(g.block() + 1) * h])
    }

    pub fn recurrent_weights(&self, g: Gate) -> ArrayView2<'_, f64> {
        let h = self.hidden();
        self.u.slice(s![.., g.block() * h..(g.block() + 1) * h])
    }

    pub fn bias(&self, g: Gate) -> ArrayView1<'_, f64> {
        let h = self.hidden();
        self.b.slice(s![g.block() * h..(g.block() + 1) * h])
    }

    fn check(&self) -> Result<()> {
        let h = self.hidden();
        if self.w.ncols() != 4 * h || self.u.ncols() != 4 * h || self.b.len() != 4 * h {
            return Err(Error::Shape(format!(
                "lstm layer: w {:?}, u {:?}, b {}",
                self.w.dim(),
                self.u.dim(),
                self.b.len()
            )));
        }
        Ok(())
    }

    /// Runs the layer over `xs` from zero state. `active[t][b] == false` carries the
    /// state of sample `b` through step `t` unchanged.
    pub fn forward_seq(
        &self,
        xs: &[Array2<f64>],
        active: Option<&[Vec<bool>]>,
    ) -> Result<(Vec<Array2<f64>>, LstmCache)> {
        self.check()?;
        let steps = xs.len();
        if steps == 0 {
            return Err(Error::Shape("empty sequence".into()));
        }
        let batch = xs[0].nrows();
        let h = self.hidden();
        let mut cache = LstmCache {
            xs: Vec::with_capacity(steps),
            gates: Vec::with_capacity(steps),
            hs: Vec::with_capacity(steps),
            cs: Vec::with_capacity(steps),
            tanh_c: Vec::with_capacity(steps),
            active: active.map(|a| a.to_vec()),
        };
        let zero = Array2::<f64>::zeros((batch, h));
        for (t, x) in xs.iter().enumerate() {
            if x.dim() != (batch, self.in_dim()) {
                return Err(Error::Shape(format!("step {t}: input {:?}, expected ({batch}, {})", x.dim(), self.in_dim())));
            }
            let h_prev = if t == 0 { &zero } else { &cache.hs[t - 1] };
            let c_prev = if t == 0 { &zero } else { &cache.cs[t - 1] };
            let mut z = x.dot(&self.w);
            general_mat_mul(1.0, h_prev, &self.u, 1.0, &mut z);
            z += &self.b;
            for mut row in z.rows_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = if j < 3 * h { sigmoid(*v) } else { v.tanh() };
                }
            }
            let mut c = Array2::zeros((batch, h));
            let mut hn = Array2::zeros((batch, h));
            let mut tc = Array2::zeros((batch, h));
            for b in 0..batch {
                let on = active.map_or(true, |a| a[t][b]);
                for j in 0..h {
                    if on {
                        let (ig, fg, og, gg) = (z[[b, j]], z[[b, h + j]], z[[b, 2 * h + j]], z[[b, 3 * h + j]]);
                        let cv = fg * c_prev[[b, j]] + ig * gg;
                        let t_c = cv.tanh();
                        c[[b, j]] = cv;
                        tc[[b, j]] = t_c;
                        hn[[b, j]] = og * t_c;
                    } else {
                        c[[b, j]] = c_prev[[b, j]];
                        hn[[b, j]] = h_prev[[b, j]];
                    }
                }
            }
            cache.xs.push(x.clone());
            cache.gates.push(z);
            cache.cs.push(c);
            cache.tanh_c.push(tc);
            cache.hs.push(hn);
        }
        Ok((cache.hs.clone(), cache))
    }

    /// Backpropagation through time. `dhs[t]` is the loss gradient on the step-`t`
    /// output (including any use of the final state). Accumulates into `grad` and
    /// returns the gradients on the inputs.
    pub fn backward_seq(&self, cache: &LstmCache, dhs: &[Array2<f64>], grad: &mut LstmLayer) -> Vec<Array2<f64>> {
        let steps = cache.hs.len();
        let (batch, h) = cache.hs[0].dim();
        let zero = Array2::<f64>::zeros((batch, h));
        let mut dh_next = Array2::<f64>::zeros((batch, h));
        let mut dc_next = Array2::<f64>::zeros((batch, h));
        let mut dxs = vec![Array2::zeros((0, 0)); steps];
        for t in (0..steps).rev() {
            let gates = &cache.gates[t];
            let tc = &cache.tanh_c[t];
            let h_prev = if t == 0 { &zero } else { &cache.hs[t - 1] };
            let c_prev = if t == 0 { &zero } else { &cache.cs[t - 1] };
            let mut dz = Array2::<f64>::zeros((batch, 4 * h));
            let mut dh_prev = Array2::<f64>::zeros((batch, h));
            let mut dc_prev = Array2::<f64>::zeros((batch, h));
            for b in 0..batch {
                let on = cache.active.as_ref().map_or(true, |a| a[t][b]);
                for j in 0..h {
                    let dh = dhs[t][[b, j]] + dh_next[[b, j]];
                    let dc = dc_next[[b, j]];
                    if !on {
                        dh_prev[[b, j]] = dh;
                        dc_prev[[b, j]] = dc;
                        continue;
                    }
                    let (ig, fg, og, gg) =
                        (gates[[b, j]], gates[[b, h + j]], gates[[b, 2 * h + j]], gates[[b, 3 * h + j]]);
                    let t_c = tc[[b, j]];
                    let dcell = dc + dh * og * (1.0 - t_c * t_c);
                    dz[[b, j]] = dcell * gg * ig * (1.0 - ig);
                    dz[[b, h + j]] = dcell * c_prev[[b, j]] * fg * (1.0 - fg);
                    dz[[b, 2 * h + j]] = dh * t_c * og * (1.0 - og);
                    dz[[b, 3 * h + j]] = dcell * ig * (1.0 - gg * gg);
                    dc_prev[[b, j]] = dcell * fg;
                }
            }
            general_mat_mul(1.0, &dz, &self.u.t(), 1.0, &mut dh_prev);
            general_mat_mul(1.0, &cache.xs[t].t(), &dz, 1.0, &mut grad.w);
            general_mat_mul(1.0, &h_prev.t(), &dz, 1.0, &mut grad.u);
            grad.b += &dz.sum_axis(Axis(0));
            dxs[t] = dz.dot(&self.w.t());
            dh_next = dh_prev;
            dc_next = dc_prev;
        }
        dxs
    }
}

impl Parameters for LstmLayer {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![
            self.w.as_slice().expect("standard layout"),
            self.u.as_slice().expect("standard layout"),
            self.b.as_slice().expect("standard layout"),
        ]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w.as_slice_mut().expect("standard layout"),
            self.u.as_slice_mut().expect("standard layout"),
            self.b.as_slice_mut().expect("standard layout"),
        ]
    }
}

/// Single-sample, single-step evaluation of a layer.
pub fn lstm_cell_forward(
    p: &LstmLayer,
    x: &Array1<f64>,
    h_prev: &Array1<f64>,
    c_prev: &Array1<f64>,
) -> Result<(Array1<f64>, Array1<f64>)> {
    p.check()?;
    let h = p.hidden();
    if x.len() != p.in_dim() || h_prev.len() != h || c_prev.len() != h {
        return Err(Error::Shape(format!(
            "cell: x {}, h {}, c {} for layer ({}, {h})",
            x.len(),
            h_prev.len(),
            c_prev.len(),
            p.in_dim()
        )));
    }
    let z = x.dot(&p.w) + h_prev.dot(&p.u) + &p.b;
    let gate = |g: Gate, k: usize| z[g.block() * h + k];
    let mut c = Array1::zeros(h);
    let mut hn = Array1::zeros(h);
    for k in 0..h {
        let (i, f, o, g) = (
            sigmoid(gate(Gate::Input, k)),
            sigmoid(gate(Gate::Forget, k)),
            sigmoid(gate(Gate::Output, k)),
            gate(Gate::Cell, k).tanh(),
        );
        c[k] = f * c_prev[k] + i * g;
        hn[k] = o * c[k].tanh();
    }
    Ok((hn, c))
}

/// Stacked LSTM layers; layer `ℓ` consumes the hidden states of layer `ℓ − 1`,
/// optionally passed through ReLU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmStack {
    pub layers: Vec<LstmLayer>,
}

#[derive(Debug, Clone)]
pub struct StackCache {
    layers: Vec<LstmCache>,
    /// Raw outputs of every layer but the top, kept for the ReLU mask.
    lower_outputs: Vec<Vec<Array2<f64>>>,
    relu: bool,
}

impl StackCache {
    /// Final `(h, c)` of every layer, bottom first.
    pub fn final_states(&self) -> Vec<(&Array2<f64>, &Array2<f64>)> {
        self.layers.iter().map(|c| c.final_state()).collect()
    }

    /// Which rectified lower-layer outputs were positive; empty without interlayer ReLU.
    pub fn relu_mask(&self) -> Vec<bool> {
        if !self.relu {
            return Vec::new();
        }
        self.lower_outputs.iter().flatten().flat_map(|m| m.iter().map(|&v| v > 0.0)).collect()
    }
}

fn relu_steps(xs: &[Array2<f64>]) -> Vec<Array2<f64>> {
    xs.iter().map(|x| x.mapv(|v| v.max(0.0))).collect()
}

impl LstmStack {
    pub fn random<R: Rng>(in_dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(hidden.len());
        let mut d = in_dim;
        for &h in hidden {
            layers.push(LstmLayer::random(d, h, rng));
            d = h;
        }
        LstmStack { layers }
    }

    pub fn zeros_like(&self) -> Self {
        LstmStack { layers: self.layers.iter().map(|l| LstmLayer::zeros(l.in_dim(), l.hidden())).collect() }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").hidden()
    }

    pub fn check_chain(&self, in_dim: usize) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Shape("empty lstm stack".into()));
        }
        let mut d = in_dim;
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_dim() != d {
                return Err(Error::Shape(format!("layer {i} expects input {}, got {d}", l.in_dim())));
            }
            d = l.hidden();
        }
        Ok(())
    }

    /// Returns the top layer's hidden states per step.
    pub fn forward(
        &self,
        xs: &[Array2<f64>],
        active: Option<&[Vec<bool>]>,
        relu: bool,
    ) -> Result<(Vec<Array2<f64>>, StackCache)> {
        let in_dim = xs.first().map_or(0, |x| x.ncols());
        self.check_chain(in_dim)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut lower = Vec::new();
        let mut input: Vec<Array2<f64>> = xs.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let (hs, cache) = layer.forward_seq(&input, active)?;
            caches.push(cache);
            if i + 1 < self.layers.len() {
                input = if relu { relu_steps(&hs) } else { hs.clone() };
                lower.push(hs);
            } else {
                input = hs;
            }
        }
        Ok((input, StackCache { layers: caches, lower_outputs: lower, relu }))
    }

    pub fn backward(&self, cache: &StackCache, d_top: &[Array2<f64>], grad: &mut LstmStack) -> Vec<Array2<f64>> {
        let mut d = d_top.to_vec();
        for i in (0..self.layers.len()).rev() {
            let dx = self.layers[i].backward_seq(&cache.layers[i], &d, &mut grad.layers[i]);
            d = if i > 0 && cache.relu {
                dx.into_iter()
                    .zip(&cache.lower_outputs[i - 1])
                    .map(|(mut g, out)| {
                        g.zip_mut_with(out, |gv, &o| {
                            if o <= 0.0 {
                                *gv = 0.0
                            }
                        });
                        g
                    })
                    .collect()
            } else {
                dx
            };
        }
        d
    }
}

impl Parameters for LstmStack {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }
}
