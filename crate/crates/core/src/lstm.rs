//! Gated recurrent cell (input/forget/output gates) with a hand-derived
//! backward pass, shared by the neural LM, the transducer encoder and the
//! prediction network.
//!
//! Gate blocks are packed `[i, f, g, o]` along the first axis of `wx`/`wh`.

use rand::Rng;

use crate::numerics::{add_assign, sigmoid, Matrix, Vector};
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub input_dim: usize,
    pub hidden: usize,
    /// 4h × input_dim
    pub wx: Matrix,
    /// 4h × h
    pub wh: Matrix,
    /// 4h
    pub b: Vector,
}

/// Hidden and cell activations carried between steps.
#[derive(Debug, Clone)]
pub struct LstmState {
    pub h: Vector,
    pub c: Vector,
}

/// Everything the backward pass needs about one forward step.
#[derive(Debug, Clone)]
pub struct LstmStepCache {
    x: Vector,
    h_prev: Vector,
    c_prev: Vector,
    i: Vector,
    f: Vector,
    g: Vector,
    o: Vector,
    tc: Vector,
}

impl LstmCell {
    pub fn new(input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let sx = (1.0 / input_dim.max(1) as f64).sqrt();
        let sh = (1.0 / hidden as f64).sqrt();
        let mut wx = Matrix::zeros(4 * hidden, input_dim);
        for v in wx.data_mut() {
            *v = rng.random_range(-sx..sx);
        }
        let mut wh = Matrix::zeros(4 * hidden, hidden);
        for v in wh.data_mut() {
            *v = rng.random_range(-sh..sh);
        }
        let mut b = vec![0.0; 4 * hidden];
        // forget-gate bias starts open
        for v in &mut b[hidden..2 * hidden] {
            *v = 1.0;
        }
        LstmCell {
            input_dim,
            hidden,
            wx,
            wh,
            b,
        }
    }

    /// Zero-valued cell of the same shape; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        LstmCell {
            input_dim: self.input_dim,
            hidden: self.hidden,
            wx: Matrix::zeros(4 * self.hidden, self.input_dim),
            wh: Matrix::zeros(4 * self.hidden, self.hidden),
            b: vec![0.0; 4 * self.hidden],
        }
    }

    pub fn initial_state(&self) -> LstmState {
        LstmState {
            h: vec![0.0; self.hidden],
            c: vec![0.0; self.hidden],
        }
    }

    fn gates(&self, x: &[f64], state: &LstmState) -> Result<(Vector, Vector, Vector, Vector)> {
        let h = self.hidden;
        let mut z = self.wx.matvec(x)?;
        add_assign(&mut z, &self.wh.matvec(&state.h)?);
        add_assign(&mut z, &self.b);
        let i: Vector = z[0..h].iter().map(|&v| sigmoid(v)).collect();
        let f: Vector = z[h..2 * h].iter().map(|&v| sigmoid(v)).collect();
        let g: Vector = z[2 * h..3 * h].iter().map(|&v| v.tanh()).collect();
        let o: Vector = z[3 * h..4 * h].iter().map(|&v| sigmoid(v)).collect();
        Ok((i, f, g, o))
    }

    pub fn step(&self, x: &[f64], state: &LstmState) -> Result<(LstmState, LstmStepCache)> {
        let (i, f, g, o) = self.gates(x, state)?;
        let h = self.hidden;
        let mut c = vec![0.0; h];
        for k in 0..h {
            c[k] = f[k] * state.c[k] + i[k] * g[k];
        }
        let tc: Vector = c.iter().map(|v| v.tanh()).collect();
        let hout: Vector = (0..h).map(|k| o[k] * tc[k]).collect();
        let cache = LstmStepCache {
            x: x.to_vec(),
            h_prev: state.h.clone(),
            c_prev: state.c.clone(),
            i,
            f,
            g,
            o,
            tc,
        };
        Ok((LstmState { h: hout, c }, cache))
    }

    /// Forward step without building a backward cache (decoding hot path).
    pub fn step_infer(&self, x: &[f64], state: &LstmState) -> Result<LstmState> {
        let (i, f, g, o) = self.gates(x, state)?;
        let h = self.hidden;
        let mut c = vec![0.0; h];
        let mut hout = vec![0.0; h];
        for k in 0..h {
            c[k] = f[k] * state.c[k] + i[k] * g[k];
            hout[k] = o[k] * c[k].tanh();
        }
        Ok(LstmState { h: hout, c })
    }

    /// Backward through one step. `dh`/`dc` are gradients w.r.t. this step's
    /// outputs; returns (dx, dh_prev, dc_prev) and accumulates parameter
    /// gradients into `grad`.
    pub fn backward_step(
        &self,
        cache: &LstmStepCache,
        dh: &[f64],
        dc_in: &[f64],
        grad: &mut LstmCell,
    ) -> Result<(Vector, Vector, Vector)> {
        let h = self.hidden;
        let mut dz = vec![0.0; 4 * h];
        let mut dc_prev = vec![0.0; h];
        for k in 0..h {
            let (i, f, g, o, tc) = (cache.i[k], cache.f[k], cache.g[k], cache.o[k], cache.tc[k]);
            let dho = dh[k];
            let do_ = dho * tc;
            let dc = dc_in[k] + dho * o * (1.0 - tc * tc);
            let di = dc * g;
            let dg = dc * i;
            let df = dc * cache.c_prev[k];
            dz[k] = di * i * (1.0 - i);
            dz[h + k] = df * f * (1.0 - f);
            dz[2 * h + k] = dg * (1.0 - g * g);
            dz[3 * h + k] = do_ * o * (1.0 - o);
            dc_prev[k] = dc * f;
        }
        grad.wx.add_outer(&dz, &cache.x);
        grad.wh.add_outer(&dz, &cache.h_prev);
        add_assign(&mut grad.b, &dz);
        let dx = self.wx.matvec_t(&dz)?;
        let dh_prev = self.wh.matvec_t(&dz)?;
        Ok((dx, dh_prev, dc_prev))
    }
}

/// A stack of cells; layer `l` consumes the hidden outputs of layer `l−1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmStack {
    pub cells: Vec<LstmCell>,
}

/// Per-layer states for incremental stepping.
#[derive(Debug, Clone)]
pub struct StackState(pub Vec<LstmState>);

#[derive(Debug)]
pub struct StackCache {
    /// caches[layer][t]
    layers: Vec<Vec<LstmStepCache>>,
    steps: usize,
}

impl LstmStack {
    pub fn new(input_dim: usize, hidden: usize, layers: usize, rng: &mut impl Rng) -> Self {
        assert!(layers >= 1, "stack needs at least one layer");
        let mut cells = Vec::with_capacity(layers);
        cells.push(LstmCell::new(input_dim, hidden, rng));
        for _ in 1..layers {
            cells.push(LstmCell::new(hidden, hidden, rng));
        }
        LstmStack { cells }
    }

    pub fn zeros_like(&self) -> Self {
        LstmStack {
            cells: self.cells.iter().map(|c| c.zeros_like()).collect(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.cells[0].hidden
    }

    pub fn initial_state(&self) -> StackState {
        StackState(self.cells.iter().map(|c| c.initial_state()).collect())
    }

    pub fn step_infer(&self, x: &[f64], state: &StackState) -> Result<(Vector, StackState)> {
        let mut states = Vec::with_capacity(self.cells.len());
        let mut input = x.to_vec();
        for (cell, st) in self.cells.iter().zip(&state.0) {
            let next = cell.step_infer(&input, st)?;
            input = next.h.clone();
            states.push(next);
        }
        Ok((input, StackState(states)))
    }

    /// Run the whole sequence, returning top-layer hidden vectors per step.
    pub fn forward(&self, inputs: &[Vector]) -> Result<(Vec<Vector>, StackCache)> {
        let mut layers = Vec::with_capacity(self.cells.len());
        let mut current: Vec<Vector> = inputs.to_vec();
        for cell in &self.cells {
            let mut state = cell.initial_state();
            let mut caches = Vec::with_capacity(current.len());
            let mut outputs = Vec::with_capacity(current.len());
            for x in &current {
                let (next, cache) = cell.step(x, &state)?;
                outputs.push(next.h.clone());
                caches.push(cache);
                state = next;
            }
            layers.push(caches);
            current = outputs;
        }
        Ok((
            current,
            StackCache {
                layers,
                steps: inputs.len(),
            },
        ))
    }

    /// Backward through the whole sequence. `d_top[t]` is the gradient
    /// w.r.t. the top-layer output at step `t`. Returns gradients w.r.t. the
    /// inputs and accumulates parameter gradients into `grad`.
    pub fn backward(
        &self,
        cache: &StackCache,
        d_top: &[Vector],
        grad: &mut LstmStack,
    ) -> Result<Vec<Vector>> {
        assert_eq!(d_top.len(), cache.steps);
        let mut d_out: Vec<Vector> = d_top.to_vec();
        for (l, cell) in self.cells.iter().enumerate().rev() {
            let caches = &cache.layers[l];
            let mut d_in: Vec<Vector> = vec![Vec::new(); cache.steps];
            let mut dh_carry = vec![0.0; cell.hidden];
            let mut dc_carry = vec![0.0; cell.hidden];
            for t in (0..cache.steps).rev() {
                let mut dh = d_out[t].clone();
                add_assign(&mut dh, &dh_carry);
                let (dx, dh_prev, dc_prev) =
                    cell.backward_step(&caches[t], &dh, &dc_carry, &mut grad.cells[l])?;
                d_in[t] = dx;
                dh_carry = dh_prev;
                dc_carry = dc_prev;
            }
            d_out = d_in;
        }
        Ok(d_out)
    }

    /// Named parameter views, prefixed by `name`.
    pub fn params(&self, name: &str) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (l, c) in self.cells.iter().enumerate() {
            out.push((format!("{name}.l{l}.wx"), c.wx.data()));
            out.push((format!("{name}.l{l}.wh"), c.wh.data()));
            out.push((format!("{name}.l{l}.b"), c.b.as_slice()));
        }
        out
    }

    pub fn params_mut(&mut self, name: &str) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (l, c) in self.cells.iter_mut().enumerate() {
            out.push((format!("{name}.l{l}.wx"), c.wx.data_mut()));
            out.push((format!("{name}.l{l}.wh"), c.wh.data_mut()));
            out.push((format!("{name}.l{l}.b"), c.b.as_mut_slice()));
        }
        out
    }
}
