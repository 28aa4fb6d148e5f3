//! Batched selective-scan kernels over raw row-major buffers.
//!
//! Layouts: `u`, `delta`: `[batch, len, inner]`; `a`: `[inner, state]` holding
//! the (negative) continuous state values; `b`, `c`: `[batch, len, state]`;
//! `d`: `[inner]`. Lanes are independent per (batch, inner, state).

use crate::exec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub batch: usize,
    pub len: usize,
    pub inner: usize,
    pub state: usize,
}

impl ScanDims {
    pub fn tokens(&self) -> usize {
        self.batch * self.len * self.inner
    }

    pub fn hidden(&self) -> usize {
        self.tokens() * self.state
    }
}

pub struct ScanInputs<'a> {
    pub dims: ScanDims,
    pub u: &'a [f64],
    pub delta: &'a [f64],
    pub a: &'a [f64],
    pub b: &'a [f64],
    pub c: &'a [f64],
    pub d: &'a [f64],
}

/// Output `y` plus every hidden state `h[batch, t, inner, state]` and the
/// matching discrete decay `exp(Δ A)`, both kept for the adjoint pass.
pub struct ScanOutput {
    pub y: Vec<f64>,
    pub h: Vec<f64>,
    pub decay: Vec<f64>,
}

/// Runs the recurrence `h_t = exp(Δ_t A) h_{t-1} + Δ_t B_t u_t`, `y_t = <C_t, h_t> + D u_t`
/// step by step, one batch element per task.
pub fn scan_sequential(x: &ScanInputs<'_>) -> ScanOutput {
    let ScanDims {
        len, inner, state, ..
    } = x.dims;
    let row = inner * state;
    let mut out = ScanOutput::zeros(x.dims);
    let per_y = len * inner;
    exec::for_each_chunk3_mut(
        (&mut out.y, per_y),
        (&mut out.h, per_y * state),
        (&mut out.decay, per_y * state),
        |bi, y, h, decay| {
            for t in 0..len {
                let tok = (bi * len + t) * inner;
                let bt = &x.b[(bi * len + t) * state..(bi * len + t + 1) * state];
                let ct = &x.c[(bi * len + t) * state..(bi * len + t + 1) * state];
                let (done, rest) = h.split_at_mut(t * row);
                let prev = if t > 0 {
                    &done[(t - 1) * row..]
                } else {
                    &[][..]
                };
                let cur = &mut rest[..row];
                for e in 0..inner {
                    let dt = x.delta[tok + e];
                    let ue = x.u[tok + e];
                    let ae = &x.a[e * state..(e + 1) * state];
                    let de = &mut decay[(t * inner + e) * state..(t * inner + e + 1) * state];
                    let mut acc = 0.0;
                    for n in 0..state {
                        let k = e * state + n;
                        de[n] = (dt * ae[n]).exp();
                        let hp = if t > 0 { prev[k] } else { 0.0 };
                        cur[k] = de[n] * hp + dt * bt[n] * ue;
                        acc += ct[n] * cur[k];
                    }
                    y[t * inner + e] = acc + x.d[e] * ue;
                }
            }
        },
    );
    out
}

impl ScanOutput {
    fn zeros(dims: ScanDims) -> Self {
        Self {
            y: vec![0.0; dims.tokens()],
            h: vec![0.0; dims.hidden()],
            decay: vec![0.0; dims.hidden()],
        }
    }
}

/// First-order recurrence element `h -> a h + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub a: f64,
    pub b: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine { a: 1.0, b: 0.0 };

    /// Composition applying `earlier` first, then `self`.
    #[inline]
    pub fn after(self, earlier: Affine) -> Affine {
        Affine {
            a: self.a * earlier.a,
            b: self.a * earlier.b + self.b,
        }
    }
}

/// In-place inclusive prefix composition over a balanced binary tree
/// (up-sweep then down-sweep). The tree shape depends only on the length,
/// so evaluation order is fixed.
pub fn prefix_scan_tree(items: &mut Vec<Affine>) {
    let len = items.len();
    if len <= 1 {
        return;
    }
    let n = len.next_power_of_two();
    items.resize(n, Affine::IDENTITY);
    let mut d = 1;
    while d < n {
        let mut i = 2 * d - 1;
        while i < n {
            items[i] = items[i].after(items[i - d]);
            i += 2 * d;
        }
        d *= 2;
    }
    let mut d = n / 4;
    while d >= 1 {
        let mut i = 3 * d - 1;
        while i < n {
            items[i] = items[i].after(items[i - d]);
            i += 2 * d;
        }
        d /= 2;
    }
    items.truncate(len);
}

/// Same outputs as [`scan_sequential`], with every hidden-state lane computed
/// by [`prefix_scan_tree`] over the per-step pairs `(exp(Δ_t A), Δ_t B_t u_t)`.
pub fn scan_associative(x: &ScanInputs<'_>) -> ScanOutput {
    let ScanDims {
        len, inner, state, ..
    } = x.dims;
    let per_y = len * inner;
    let mut out = ScanOutput::zeros(x.dims);
    exec::for_each_chunk3_mut(
        (&mut out.y, per_y),
        (&mut out.h, per_y * state),
        (&mut out.decay, per_y * state),
        |bi, y, h, decay| {
            let mut lane = Vec::with_capacity(len.next_power_of_two());
            for e in 0..inner {
                for n in 0..state {
                    lane.clear();
                    let a = x.a[e * state + n];
                    for t in 0..len {
                        let tok = (bi * len + t) * inner + e;
                        let dt = x.delta[tok];
                        let k = (t * inner + e) * state + n;
                        decay[k] = (dt * a).exp();
                        lane.push(Affine {
                            a: decay[k],
                            b: dt * x.b[(bi * len + t) * state + n] * x.u[tok],
                        });
                    }
                    prefix_scan_tree(&mut lane);
                    for (t, el) in lane.iter().enumerate() {
                        // starting state is zero, so h_t is the accumulated offset
                        h[(t * inner + e) * state + n] = el.b;
                    }
                }
            }
            for t in 0..len {
                let ct = &x.c[(bi * len + t) * state..(bi * len + t + 1) * state];
                for e in 0..inner {
                    let he = &h[(t * inner + e) * state..(t * inner + e + 1) * state];
                    let acc: f64 = ct.iter().zip(he).map(|(c, h)| c * h).sum();
                    y[t * inner + e] = acc + x.d[e] * x.u[(bi * len + t) * inner + e];
                }
            }
        },
    );
    out
}

/// Gradients of a scan with respect to its direct inputs.
pub struct ScanInputGrads {
    pub u: Vec<f64>,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
}

/// Adjoint pass: walks time in reverse carrying `dL/dh`. `h` and `decay`
/// must be the ones saved by the forward pass.
pub fn scan_backward(x: &ScanInputs<'_>, h: &[f64], decay: &[f64], dy: &[f64]) -> ScanInputGrads {
    let ScanDims {
        batch,
        len,
        inner,
        state,
    } = x.dims;
    struct Part {
        u: Vec<f64>,
        delta: Vec<f64>,
        a: Vec<f64>,
        b: Vec<f64>,
        c: Vec<f64>,
        d: Vec<f64>,
    }
    let parts = exec::map_indexed(batch, |bi| {
        let mut p = Part {
            u: vec![0.0; len * inner],
            delta: vec![0.0; len * inner],
            a: vec![0.0; inner * state],
            b: vec![0.0; len * state],
            c: vec![0.0; len * state],
            d: vec![0.0; inner],
        };
        let mut carry = vec![0.0; inner * state];
        for t in (0..len).rev() {
            let tok = (bi * len + t) * inner;
            let row = (bi * len + t) * state;
            let bt = &x.b[row..row + state];
            let ct = &x.c[row..row + state];
            let h_t = &h[tok * state..(tok + inner) * state];
            let h_prev = if t > 0 {
                Some(&h[(tok - inner) * state..tok * state])
            } else {
                None
            };
            for e in 0..inner {
                let g = dy[tok + e];
                let ue = x.u[tok + e];
                let dt = x.delta[tok + e];
                p.d[e] += g * ue;
                let mut du = g * x.d[e];
                let mut ddt = 0.0;
                for n in 0..state {
                    let k = e * state + n;
                    let an = x.a[k];
                    p.c[t * state + n] += g * h_t[k];
                    let dh = g * ct[n] + carry[k];
                    let a_bar = decay[tok * state + k];
                    let hp = h_prev.map_or(0.0, |hp| hp[k]);
                    let da_bar = dh * hp;
                    ddt += da_bar * a_bar * an + dh * bt[n] * ue;
                    p.a[k] += da_bar * a_bar * dt;
                    p.b[t * state + n] += dh * dt * ue;
                    du += dh * dt * bt[n];
                    carry[k] = dh * a_bar;
                }
                p.u[t * inner + e] = du;
                p.delta[t * inner + e] = ddt;
            }
        }
        p
    });
    let mut out = ScanInputGrads {
        u: Vec::with_capacity(x.dims.tokens()),
        delta: Vec::with_capacity(x.dims.tokens()),
        a: vec![0.0; inner * state],
        b: Vec::with_capacity(batch * len * state),
        c: Vec::with_capacity(batch * len * state),
        d: vec![0.0; inner],
    };
    for p in parts {
        out.u.extend(p.u);
        out.delta.extend(p.delta);
        out.b.extend(p.b);
        out.c.extend(p.c);
        for (o, v) in out.a.iter_mut().zip(&p.a) {
            *o += v;
        }
        for (o, v) in out.d.iter_mut().zip(&p.d) {
            *o += v;
        }
    }
    out
}
