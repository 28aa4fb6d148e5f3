//! Selective state-space scans.
//!
//! The state matrix is diagonal per inner channel and stored as `A_log`
//! (`A = -exp(A_log)`), discretized per step with `Ā = exp(ΔA)` and
//! `B̄ = ΔB`. Δ, B and C are linear functions of the current token, with
//! softplus keeping Δ positive.

pub mod cross;
pub mod kernel;

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernel::{ScanDims, ScanInputs};

/// Learnable parameters of one selective scan over `inner` channels with
/// `state` hidden dimensions per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams {
    /// `[inner, state]`, log of `-A`.
    pub a_log: Tensor,
    /// `[inner]`
    pub d_skip: Tensor,
    /// `[inner, inner]`
    pub w_delta: Tensor,
    /// `[inner]`
    pub b_delta: Tensor,
    /// `[inner, state]`
    pub w_b: Tensor,
    /// `[inner, state]`
    pub w_c: Tensor,
}

const FIELDS: [&str; 6] = ["a_log", "d_skip", "w_delta", "b_delta", "w_b", "w_c"];

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl SsmParams {
    /// Standard initialization: `A_log[e, n] = ln(n + 1)`, `D = 1`, Δ bias
    /// such that the initial step lies log-uniformly in `[1e-3, 1e-1]`,
    /// projections uniform in `±1/sqrt(inner)`.
    pub fn init(inner: usize, state: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inner as f64).sqrt();
        let mut uniform =
            |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
        let w_delta = uniform(&[inner, inner]).scale(0.1);
        let w_b = uniform(&[inner, state]);
        let w_c = uniform(&[inner, state]);
        let b_delta = Tensor::from_fn(&[inner], |_| {
            let log_dt = rng.random_range((1e-3f64).ln()..(1e-1f64).ln());
            inverse_softplus(log_dt.exp())
        });
        Self {
            a_log: Tensor::from_fn(&[inner, state], |i| ((i % state) as f64 + 1.0).ln()),
            d_skip: Tensor::ones(&[inner]),
            w_delta,
            b_delta,
            w_b,
            w_c,
        }
    }

    pub fn inner(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn state(&self) -> usize {
        self.a_log.shape()[1]
    }

    /// Recovered continuous state values `A = -exp(A_log)`.
    pub fn a(&self) -> Vec<f64> {
        self.a_log.data().iter().map(|v| -v.exp()).collect()
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 6] {
        [
            (FIELDS[0], &self.a_log),
            (FIELDS[1], &self.d_skip),
            (FIELDS[2], &self.w_delta),
            (FIELDS[3], &self.b_delta),
            (FIELDS[4], &self.w_b),
            (FIELDS[5], &self.w_c),
        ]
    }

    pub fn insert_into(&self, map: &mut BTreeMap<String, Tensor>, prefix: &str) {
        for (name, t) in self.tensors() {
            map.insert(format!("{prefix}.{name}"), t.clone());
        }
    }

    pub fn from_map(map: &BTreeMap<String, Tensor>, prefix: &str) -> Result<Self> {
        let get = |name: &str| {
            map.get(&format!("{prefix}.{name}"))
                .cloned()
                .ok_or_else(|| Error::InvalidData(format!("missing parameter {prefix}.{name}")))
        };
        Ok(Self {
            a_log: get("a_log")?,
            d_skip: get("d_skip")?,
            w_delta: get("w_delta")?,
            b_delta: get("b_delta")?,
            w_b: get("w_b")?,
            w_c: get("w_c")?,
        })
    }

    /// Zeroes the read-out (`C` projection and `D`), making the scan output zero.
    pub fn silence(&mut self) {
        self.w_c = Tensor::zeros(self.w_c.shape());
        self.d_skip = Tensor::zeros(self.d_skip.shape());
    }
}

/// Zero-order hold for `Ā`, Euler for `B̄`: returns `(exp(ΔA), ΔB)`.
pub fn discretize_zoh(a: &[f64], b: &[f64], delta: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(delta > 0.0) {
        return Err(Error::Domain {
            op: "discretize_zoh",
            msg: format!("step must be positive, got {delta}"),
        });
    }
    if let Some(bad) = a.iter().find(|&&v| v >= 0.0) {
        return Err(Error::Domain {
            op: "discretize_zoh",
            msg: format!("state value {bad} is not negative"),
        });
    }
    Ok((
        a.iter().map(|&v| (delta * v).exp()).collect(),
        b.iter().map(|&v| delta * v).collect(),
    ))
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-step quantities derived from a `[T, inner]` sequence.
#[derive(Clone, Debug)]
pub struct Projections {
    pub delta_pre: Tensor,
    pub delta: Tensor,
    pub b: Tensor,
    pub c: Tensor,
}

impl SsmParams {
    pub fn project(&self, u: &Tensor) -> Result<Projections> {
        self.check_input(u)?;
        let delta_pre =
            u.matmul(&self.w_delta)?
                .broadcast_binary(&self.b_delta, "project", |x, y| x + y)?;
        Ok(Projections {
            delta: delta_pre.map(softplus),
            delta_pre,
            b: u.matmul(&self.w_b)?,
            c: u.matmul(&self.w_c)?,
        })
    }

    fn check_input(&self, u: &Tensor) -> Result<()> {
        if u.rank() != 2 || u.shape()[1] != self.inner() {
            return Err(Error::shape(
                "selective_scan",
                u.shape(),
                &[0, self.inner()],
            ));
        }
        Ok(())
    }

    fn dims_for(&self, u: &Tensor) -> ScanDims {
        ScanDims {
            batch: 1,
            len: u.shape()[0],
            inner: self.inner(),
            state: self.state(),
        }
    }
}

/// Everything the adjoint pass needs from a forward scan.
#[derive(Clone, Debug)]
pub struct ScanTrace {
    pub u: Tensor,
    pub proj: Projections,
    /// `[T, inner, state]`
    pub h: Vec<f64>,
    /// `exp(Δ A)`, same layout as `h`.
    pub decay: Vec<f64>,
}

fn run_scan(u: &Tensor, params: &SsmParams, assoc: bool) -> Result<(Tensor, ScanTrace)> {
    let proj = params.project(u)?;
    let a = params.a();
    let inputs = ScanInputs {
        dims: params.dims_for(u),
        u: u.data(),
        delta: proj.delta.data(),
        a: &a,
        b: proj.b.data(),
        c: proj.c.data(),
        d: params.d_skip.data(),
    };
    let out = if assoc {
        kernel::scan_associative(&inputs)
    } else {
        kernel::scan_sequential(&inputs)
    };
    let y = Tensor::new(u.shape().to_vec(), out.y)?;
    Ok((
        y,
        ScanTrace {
            u: u.clone(),
            proj,
            h: out.h,
            decay: out.decay,
        },
    ))
}

/// Step-by-step selective scan of `u: [T, inner]` from `h_0 = 0`.
pub fn selective_scan_seq(u: &Tensor, params: &SsmParams) -> Result<Tensor> {
    Ok(run_scan(u, params, false)?.0)
}

/// Selective scan evaluated with a balanced prefix-composition tree.
pub fn selective_scan_assoc(u: &Tensor, params: &SsmParams) -> Result<Tensor> {
    Ok(run_scan(u, params, true)?.0)
}

/// Forward scan that also returns the trace for [`scan_backward`].
pub fn selective_scan_traced(u: &Tensor, params: &SsmParams) -> Result<(Tensor, ScanTrace)> {
    run_scan(u, params, false)
}

#[derive(Clone, Debug)]
pub struct ScanGrads {
    pub u: Tensor,
    pub params: SsmParams,
}

/// Gradients of `sum(upstream * y)` with respect to the input sequence and
/// every parameter, chaining through the Δ/B/C projections.
pub fn scan_backward(
    upstream: &Tensor,
    trace: &ScanTrace,
    params: &SsmParams,
) -> Result<ScanGrads> {
    if upstream.shape() != trace.u.shape() {
        return Err(Error::shape(
            "scan_backward",
            upstream.shape(),
            trace.u.shape(),
        ));
    }
    let a = params.a();
    let dims = params.dims_for(&trace.u);
    let gr = kernel::scan_backward(
        &ScanInputs {
            dims,
            u: trace.u.data(),
            delta: trace.proj.delta.data(),
            a: &a,
            b: trace.proj.b.data(),
            c: trace.proj.c.data(),
            d: params.d_skip.data(),
        },
        &trace.h,
        &trace.decay,
        upstream.data(),
    );
    let (t, e, n) = (dims.len, dims.inner, dims.state);
    let d_pre = Tensor::new(
        vec![t, e],
        gr.delta
            .iter()
            .zip(trace.proj.delta_pre.data())
            .map(|(g, x)| g * sigmoid(*x))
            .collect(),
    )?;
    let db = Tensor::new(vec![t, n], gr.b)?;
    let dc = Tensor::new(vec![t, n], gr.c)?;
    let ut = trace.u.transpose()?;
    let mut du = Tensor::new(vec![t, e], gr.u)?;
    du.add_assign(&d_pre.matmul(&params.w_delta.transpose()?)?)?;
    du.add_assign(&db.matmul(&params.w_b.transpose()?)?)?;
    du.add_assign(&dc.matmul(&params.w_c.transpose()?)?)?;
    Ok(ScanGrads {
        u: du,
        params: SsmParams {
            a_log: Tensor::new(
                vec![e, n],
                gr.a.iter().zip(&a).map(|(g, a)| g * a).collect(),
            )?,
            d_skip: Tensor::new(vec![e], gr.d)?,
            w_delta: ut.matmul(&d_pre)?,
            b_delta: d_pre.sum_axis(0)?,
            w_b: ut.matmul(&db)?,
            w_c: ut.matmul(&dc)?,
        },
    })
}

/// `scan_fwd(u) + reverse(scan_bwd(reverse(u)))` along time.
pub fn bidirectional_scan(u: &Tensor, fwd: &SsmParams, bwd: &SsmParams) -> Result<Tensor> {
    let y_f = selective_scan_seq(u, fwd)?;
    let y_b = selective_scan_seq(&u.reverse_axis(0)?, bwd)?.reverse_axis(0)?;
    y_f.broadcast_binary(&y_b, "bidirectional_scan", |a, b| a + b)
}

/// [`SsmParams`] bound onto a [`Graph`].
#[derive(Clone, Copy, Debug)]
pub struct SsmVars {
    pub a_log: Var,
    pub d_skip: Var,
    pub w_delta: Var,
    pub b_delta: Var,
    pub w_b: Var,
    pub w_c: Var,
}

impl SsmVars {
    pub fn lookup(vars: &BTreeMap<String, Var>, prefix: &str) -> Result<Self> {
        let get = |name: &str| {
            vars.get(&format!("{prefix}.{name}"))
                .copied()
                .ok_or_else(|| Error::InvalidData(format!("missing parameter {prefix}.{name}")))
        };
        Ok(Self {
            a_log: get("a_log")?,
            d_skip: get("d_skip")?,
            w_delta: get("w_delta")?,
            b_delta: get("b_delta")?,
            w_b: get("w_b")?,
            w_c: get("w_c")?,
        })
    }

    pub fn bind(g: &mut Graph, p: &SsmParams) -> Self {
        Self {
            a_log: g.param(p.a_log.clone()),
            d_skip: g.param(p.d_skip.clone()),
            w_delta: g.param(p.w_delta.clone()),
            b_delta: g.param(p.b_delta.clone()),
            w_b: g.param(p.w_b.clone()),
            w_c: g.param(p.w_c.clone()),
        }
    }

    /// Gradients for each field, in [`SsmParams`] form.
    pub fn grads(&self, grads: &crate::autodiff::Gradients) -> SsmParams {
        SsmParams {
            a_log: grads.get(self.a_log),
            d_skip: grads.get(self.d_skip),
            w_delta: grads.get(self.w_delta),
            b_delta: grads.get(self.b_delta),
            w_b: grads.get(self.w_b),
            w_c: grads.get(self.w_c),
        }
    }

    /// Selective scan of `u: [B, T, inner]` on the tape.
    pub fn apply(&self, g: &mut Graph, u: Var) -> Result<Var> {
        let pre = g.matmul(u, self.w_delta)?;
        let pre = g.add(pre, self.b_delta)?;
        let delta = g.softplus(pre);
        let b = g.matmul(u, self.w_b)?;
        let c = g.matmul(u, self.w_c)?;
        g.selective_scan(u, delta, self.a_log, b, c, self.d_skip)
    }

    /// Bidirectional scan along axis 1 of `u: [B, T, inner]`.
    pub fn apply_bidirectional(g: &mut Graph, u: Var, fwd: &SsmVars, bwd: &SsmVars) -> Result<Var> {
        let y_f = fwd.apply(g, u)?;
        let u_r = g.reverse(u, 1)?;
        let y_b = bwd.apply(g, u_r)?;
        let y_b = g.reverse(y_b, 1)?;
        g.add(y_f, y_b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_params(a: f64, b: f64, c: f64, d: f64, delta: f64) -> SsmParams {
        // Δ is constant (zero weight); B_t = b * u_t and C_t = c * u_t
        SsmParams {
            a_log: Tensor::new(vec![1, 1], vec![(-a).ln()]).unwrap(),
            d_skip: Tensor::vector(vec![d]),
            w_delta: Tensor::zeros(&[1, 1]),
            b_delta: Tensor::vector(vec![inverse_softplus(delta)]),
            w_b: Tensor::new(vec![1, 1], vec![b]).unwrap(),
            w_c: Tensor::new(vec![1, 1], vec![c]).unwrap(),
        }
    }

    #[test]
    fn discretize_limits_and_half_life() {
        let (ab, bb) = discretize_zoh(&[-1.0], &[1.0], 1e-12).unwrap();
        assert!((ab[0] - 1.0).abs() < 1e-11 && bb[0].abs() < 1e-11);
        let (ab, _) = discretize_zoh(&[-1.0], &[1.0], std::f64::consts::LN_2).unwrap();
        assert!((ab[0] - 0.5).abs() < 1e-15);
        assert!(discretize_zoh(&[-1.0], &[1.0], 0.0).is_err());
        assert!(discretize_zoh(&[-1.0], &[1.0], -0.1).is_err());
    }

    #[test]
    fn discretize_pinned_values() {
        // exp(-0.15) and 0.5 * 2.0, computed independently with Python's math module
        let (ab, bb) = discretize_zoh(&[-0.3], &[2.0], 0.5).unwrap();
        assert!((ab[0] - 0.860_707_976_425_057_8).abs() < 1e-15);
        assert_eq!(bb[0], 1.0);
    }

    #[test]
    fn single_step_output() {
        // B_t = C_t = u_t here, so y_1 = (Δ u)(u) u + D u
        let p = scalar_params(-1.0, 1.0, 1.0, 0.5, 0.2);
        let u = Tensor::new(vec![1, 1], vec![1.5]).unwrap();
        let y = selective_scan_seq(&u, &p).unwrap();
        let expect = (0.2 * 1.5) * 1.5 * 1.5 + 0.5 * 1.5;
        assert!((y.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn rejects_wrong_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = SsmParams::init(3, 2, &mut rng);
        assert!(selective_scan_seq(&Tensor::zeros(&[4, 2]), &p).is_err());
    }

    #[test]
    fn init_gives_stable_positive_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = SsmParams::init(6, 4, &mut rng);
        assert!(p.a().iter().all(|&a| a < 0.0));
        assert_eq!(p.a_log.data()[..4], [0.0, 2f64.ln(), 3f64.ln(), 4f64.ln()]);
        for &bias in p.b_delta.data() {
            let dt = softplus(bias);
            assert!((1e-3..=1e-1).contains(&dt), "{dt}");
        }
    }

    #[test]
    fn silenced_bidirectional_reduces_to_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fwd = SsmParams::init(3, 4, &mut rng);
        let mut bwd = SsmParams::init(3, 4, &mut rng);
        bwd.silence();
        let u = Tensor::from_fn(&[5, 3], |i| (i as f64 * 0.7).sin());
        let bi = bidirectional_scan(&u, &fwd, &bwd).unwrap();
        assert_eq!(bi, selective_scan_seq(&u, &fwd).unwrap());
    }
}
