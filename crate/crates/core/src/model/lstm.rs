//! Single-layer LSTM cell: forward trace and backpropagation through time.
//!
//! Gate layout inside every `4h` vector is `[input | forget | candidate | output]`.

use super::{Matrix, Real};

#[inline]
pub(crate) fn axpy<F: Real>(a: F, x: &[F], y: &mut [F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with eight fixed partial sums; the summation order is part of
/// the numerical contract, so results are identical on every run.
#[inline]
pub(crate) fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = F::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

pub(crate) struct LstmWeights<'a, F> {
    pub wx: &'a Matrix<F>,
    pub wh: &'a Matrix<F>,
    pub b: &'a Matrix<F>,
}

pub(crate) struct LstmGrads<'a, F> {
    pub wx: &'a mut Matrix<F>,
    pub wh: &'a mut Matrix<F>,
    pub b: &'a mut Matrix<F>,
}

/// Activations of one LSTM over a sequence, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct LstmTrace<F> {
    hidden: usize,
    steps: usize,
    h0: Vec<F>,
    c0: Vec<F>,
    /// Post-activation gates, `steps x 4h`.
    gates: Vec<F>,
    c: Vec<F>,
    tanh_c: Vec<F>,
    h: Vec<F>,
}

impl<F: Real> LstmTrace<F> {
    pub fn new(hidden: usize, h0: Vec<F>, c0: Vec<F>, capacity: usize) -> Self {
        Self {
            hidden,
            steps: 0,
            h0,
            c0,
            gates: Vec::with_capacity(capacity * 4 * hidden),
            c: Vec::with_capacity(capacity * hidden),
            tanh_c: Vec::with_capacity(capacity * hidden),
            h: Vec::with_capacity(capacity * hidden),
        }
    }

    /// Hidden state after step `t`.
    pub fn h(&self, t: usize) -> &[F] {
        &self.h[t * self.hidden..(t + 1) * self.hidden]
    }

    pub fn c(&self, t: usize) -> &[F] {
        &self.c[t * self.hidden..(t + 1) * self.hidden]
    }

    fn h_prev(&self, t: usize) -> &[F] {
        if t == 0 {
            &self.h0
        } else {
            self.h(t - 1)
        }
    }

    fn c_prev(&self, t: usize) -> &[F] {
        if t == 0 {
            &self.c0
        } else {
            self.c(t - 1)
        }
    }

    /// Final `(h, c)`; the initial state for an empty sequence.
    pub fn last_state(&self) -> (Vec<F>, Vec<F>) {
        match self.steps {
            0 => (self.h0.clone(), self.c0.clone()),
            n => (self.h(n - 1).to_vec(), self.c(n - 1).to_vec()),
        }
    }

    pub fn step(&mut self, w: &LstmWeights<'_, F>, x: &[F]) {
        let hd = self.hidden;
        let t = self.steps;
        let mut z = w.b.data.clone();
        for (k, &xk) in x.iter().enumerate() {
            axpy(xk, w.wx.row(k), &mut z);
        }
        {
            let h_prev = self.h_prev(t);
            for (k, &hk) in h_prev.iter().enumerate() {
                if hk != F::zero() {
                    axpy(hk, w.wh.row(k), &mut z);
                }
            }
        }
        for v in &mut z[..2 * hd] {
            *v = sigmoid(*v);
        }
        for v in &mut z[2 * hd..3 * hd] {
            *v = v.tanh();
        }
        for v in &mut z[3 * hd..] {
            *v = sigmoid(*v);
        }
        let c_new: Vec<F> = self
            .c_prev(t)
            .iter()
            .enumerate()
            .map(|(j, &cp)| z[hd + j] * cp + z[j] * z[2 * hd + j])
            .collect();
        for (j, &c) in c_new.iter().enumerate() {
            let tc = c.tanh();
            self.tanh_c.push(tc);
            self.h.push(z[3 * hd + j] * tc);
        }
        self.c.extend_from_slice(&c_new);
        self.gates.extend_from_slice(&z);
        self.steps += 1;
    }

    /// Backpropagates through all steps in reverse.
    ///
    /// `dh_out`, when given, is `steps x h` of loss gradient arriving at each
    /// hidden output. `dh`/`dc` carry the gradient at the final state in and
    /// the gradient at the initial state out. Input gradients are added to
    /// the embedding rows of `ids`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        w: &LstmWeights<'_, F>,
        g: LstmGrads<'_, F>,
        embed: &Matrix<F>,
        d_embed: &mut Matrix<F>,
        ids: &[u32],
        dh_out: Option<&[F]>,
        dh: &mut Vec<F>,
        dc: &mut [F],
    ) {
        let hd = self.hidden;
        let one = F::one();
        let mut dz = vec![F::zero(); 4 * hd];
        let mut dh_prev = vec![F::zero(); hd];
        for t in (0..self.steps).rev() {
            if let Some(extra) = dh_out {
                for (a, &b) in dh.iter_mut().zip(&extra[t * hd..(t + 1) * hd]) {
                    *a += b;
                }
            }
            let gates = &self.gates[t * 4 * hd..(t + 1) * 4 * hd];
            let tanh_c = &self.tanh_c[t * hd..(t + 1) * hd];
            let c_prev = self.c_prev(t);
            for j in 0..hd {
                let (i, f, gg, o) = (gates[j], gates[hd + j], gates[2 * hd + j], gates[3 * hd + j]);
                let tc = tanh_c[j];
                let d_o = dh[j] * tc;
                let dcj = dc[j] + dh[j] * o * (one - tc * tc);
                let di = dcj * gg;
                let dg = dcj * i;
                let df = dcj * c_prev[j];
                dc[j] = dcj * f;
                dz[j] = di * i * (one - i);
                dz[hd + j] = df * f * (one - f);
                dz[2 * hd + j] = dg * (one - gg * gg);
                dz[3 * hd + j] = d_o * o * (one - o);
            }
            axpy(one, &dz, &mut g.b.data);
            let id = ids[t] as usize;
            let x = embed.row(id);
            for (k, &xk) in x.iter().enumerate() {
                axpy(xk, &dz, g.wx.row_mut(k));
            }
            let dx_row = d_embed.row_mut(id);
            for (k, v) in dx_row.iter_mut().enumerate() {
                *v += dot(w.wx.row(k), &dz);
            }
            let h_prev = self.h_prev(t);
            for (k, &hk) in h_prev.iter().enumerate() {
                if hk != F::zero() {
                    axpy(hk, &dz, g.wh.row_mut(k));
                }
                dh_prev[k] = dot(w.wh.row(k), &dz);
            }
            std::mem::swap(dh, &mut dh_prev);
        }
    }
}
