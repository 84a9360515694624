//! The denoiser `D = ∇ψ`, `ψ(x) = Σ_i t_i(x)` with `t_i` the outputs of the
//! network.
//!
//! With `z_n = W_n x_{n−1} + b_n` and `T̃_n = σ'_n(z_n)` the gradient unrolls
//! into the weight-tied recursion
//!
//! ```text
//! R_N = W_Nᵀ T̃_N
//! R_n = W_nᵀ (T̃_n ⊙ R_{n+1})        n = N−1, …, 1
//! D(x_0) = R_1
//! ```
//!
//! i.e. an encoder (the forward pass) followed by a decoder that re-uses the
//! transposed encoder weights without adding biases back. The decoder never
//! evaluates `σ` itself, only `σ'`.
//!
//! With a skip connection from the output of layer `a` to the input of layer
//! `b`, the gradient is the sum of two such recursions: one through every
//! layer and one that jumps from layer `b` straight to layer `a`.

use crate::error::{check_dim, Error, Result};
use crate::network::{ForwardTrace, Network, Skip};
use crate::{Matrix, Vector};

/// Largest input dimension for which dense `d_0 × d_0` Jacobians are formed.
pub const DEFAULT_JACOBIAN_CAP: usize = 4096;

/// Central-difference step used for Jacobian columns.
pub const JACOBIAN_FD_STEP: f64 = 1e-5;

/// Anything that maps `ℝ^d → ℝ^d` and can stand in for the denoiser inside
/// the restoration solver.
pub trait Denoiser {
    fn dim(&self) -> usize;
    fn apply(&self, x: &Vector) -> Result<Vector>;

    /// Dense Jacobian at `x`. Only finite differences are available by
    /// default.
    fn jacobian(&self, x: &Vector, mode: JacobianMode) -> Result<Matrix> {
        match mode {
            JacobianMode::Analytic => Err(Error::Unsupported("analytic Jacobian for this denoiser")),
            JacobianMode::FiniteDifference => {
                check_dim("denoiser input", self.dim(), x.len())?;
                fd_jacobian(self, x, JACOBIAN_FD_STEP)
            }
        }
    }

    /// `J(x)ᵀ u`.
    fn vjp(&self, x: &Vector, u: &Vector) -> Result<Vector> {
        check_dim("cotangent", self.dim(), u.len())?;
        Ok(self.jacobian(x, JacobianMode::FiniteDifference)?.tr_mul(u))
    }
}

impl Denoiser for Network {
    fn dim(&self) -> usize {
        self.input_dim()
    }

    fn apply(&self, x: &Vector) -> Result<Vector> {
        match self.skip() {
            None => denoiser_apply(self, x),
            Some(_) => denoiser_apply_skip(self, x),
        }
    }

    fn jacobian(&self, x: &Vector, mode: JacobianMode) -> Result<Matrix> {
        denoiser_jacobian(self, x, mode)
    }

    fn vjp(&self, x: &Vector, u: &Vector) -> Result<Vector> {
        check_dim("denoiser input", self.input_dim(), x.len())?;
        check_dim("cotangent", self.input_dim(), u.len())?;
        Ok(crate::autodiff::denoiser_vjp(self, x, u))
    }
}

/// `D(x) = Q x + c`.
#[derive(Clone, Debug)]
pub struct AffineDenoiser {
    pub q: Matrix,
    pub c: Vector,
}

impl Denoiser for AffineDenoiser {
    fn dim(&self) -> usize {
        self.c.len()
    }

    fn apply(&self, x: &Vector) -> Result<Vector> {
        check_dim("affine denoiser input", self.c.len(), x.len())?;
        Ok(&self.q * x + &self.c)
    }

    fn jacobian(&self, x: &Vector, _mode: JacobianMode) -> Result<Matrix> {
        check_dim("affine denoiser input", self.c.len(), x.len())?;
        Ok(self.q.clone())
    }
}

/// Wraps a closure as a [`Denoiser`]; used for the solver's test mode.
pub struct FnDenoiser<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&Vector) -> Vector> FnDenoiser<F> {
    pub fn new(dim: usize, f: F) -> Self {
        FnDenoiser { dim, f }
    }
}

impl<F: Fn(&Vector) -> Vector> Denoiser for FnDenoiser<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, x: &Vector) -> Result<Vector> {
        check_dim("denoiser input", self.dim, x.len())?;
        Ok((self.f)(x))
    }
}

/// Everything computed while denoising one input.
#[derive(Clone, Debug)]
pub struct DenoiserEval {
    pub output: Vector,
    pub potential: f64,
    /// Layer outputs `x_1, …, x_N`.
    pub intermediates: Vec<Vector>,
    /// `T̃_N(x_0) = σ'_N(W_N x_{N−1} + b_N)`.
    pub encoder_top: Vector,
}

/// `ψ(x_0)`: the sum of the final-layer outputs.
pub fn potential_eval(net: &Network, x0: &Vector) -> Result<f64> {
    Ok(net.trace(x0)?.outputs.last().expect("non-empty").sum())
}

/// `D(x_0)` for a network without skip connection.
pub fn denoiser_apply(net: &Network, x0: &Vector) -> Result<Vector> {
    if net.skip().is_some() {
        return Err(Error::Unsupported(
            "network has a skip connection; use denoiser_apply_skip",
        ));
    }
    let trace = net.trace(x0)?;
    Ok(gradient_from_trace(net, &trace))
}

/// Potential, output and intermediates in one pass.
pub fn evaluate(net: &Network, x0: &Vector) -> Result<DenoiserEval> {
    let trace = net.trace(x0)?;
    let output = match net.skip() {
        None => gradient_from_trace(net, &trace),
        Some(skip) => skip_gradient_from_trace(net, skip, &trace),
    };
    let depth = net.depth();
    let encoder_top = net.layer(depth).slope(&trace.preactivations[depth - 1]);
    let potential = trace.outputs[depth - 1].sum();
    Ok(DenoiserEval {
        output,
        potential,
        intermediates: trace.outputs,
        encoder_top,
    })
}

fn gradient_from_trace(net: &Network, trace: &ForwardTrace) -> Vector {
    let depth = net.depth();
    let top = net.layer(depth);
    let mut r = top.weight().tr_mul(&top.slope(&trace.preactivations[depth - 1]));
    for n in (1..depth).rev() {
        let layer = net.layer(n);
        let gated = layer.slope(&trace.preactivations[n - 1]).component_mul(&r);
        r = layer.weight().tr_mul(&gated);
    }
    r
}

/// `D^{b←a}(x_0)` for a network with a skip connection.
pub fn denoiser_apply_skip(net: &Network, x0: &Vector) -> Result<Vector> {
    let skip = net
        .skip()
        .ok_or(Error::Unsupported("network has no skip connection"))?;
    let trace = net.trace(x0)?;
    Ok(skip_gradient_from_trace(net, skip, &trace))
}

fn skip_gradient_from_trace(net: &Network, skip: Skip, trace: &ForwardTrace) -> Vector {
    let depth = net.depth();
    let gates: Vec<Vector> = (1..=depth)
        .map(|n| net.layer(n).slope(&trace.preactivations[n - 1]))
        .collect();
    let top = net.layer(depth).weight().tr_mul(&gates[depth - 1]);

    // Through every layer.
    let mut through = top.clone();
    for n in (1..depth).rev() {
        let gated = gates[n - 1].component_mul(&through);
        through = net.layer(n).weight().tr_mul(&gated);
    }

    // Jumping over layers a+1 … b−1.
    let mut jumped = top;
    for n in (1..depth).rev() {
        if skip.a < n && n < skip.b {
            continue;
        }
        let gated = gates[n - 1].component_mul(&jumped);
        jumped = net.layer(n).weight().tr_mul(&gated);
    }
    through + jumped
}

/// How [`denoiser_jacobian`] differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JacobianMode {
    /// Differentiates the recursion, bringing in `σ''`.
    Analytic,
    /// Central differences of `D` with step [`JACOBIAN_FD_STEP`].
    FiniteDifference,
}

/// Dense `J_D(x_0)`, capped at [`DEFAULT_JACOBIAN_CAP`] inputs.
pub fn denoiser_jacobian(net: &Network, x0: &Vector, mode: JacobianMode) -> Result<Matrix> {
    denoiser_jacobian_capped(net, x0, mode, DEFAULT_JACOBIAN_CAP)
}

pub fn denoiser_jacobian_capped(
    net: &Network,
    x0: &Vector,
    mode: JacobianMode,
    cap: usize,
) -> Result<Matrix> {
    let d0 = net.input_dim();
    if d0 > cap {
        return Err(Error::CapExceeded { size: d0, cap });
    }
    check_dim("denoiser input", d0, x0.len())?;
    match mode {
        JacobianMode::Analytic => analytic_jacobian(net, x0),
        JacobianMode::FiniteDifference => fd_jacobian(net, x0, JACOBIAN_FD_STEP),
    }
}

fn fd_jacobian<D: Denoiser + ?Sized>(net: &D, x0: &Vector, h: f64) -> Result<Matrix> {
    let d0 = x0.len();
    let mut jac = Matrix::zeros(d0, d0);
    let mut probe = x0.clone();
    for j in 0..d0 {
        probe[j] = x0[j] + h;
        let plus = net.apply(&probe)?;
        probe[j] = x0[j] - h;
        let minus = net.apply(&probe)?;
        probe[j] = x0[j];
        jac.set_column(j, &((plus - minus) / (2.0 * h)));
    }
    Ok(jac)
}

/// Forward-over-reverse: every forward quantity carries its `d_n × d_0`
/// tangent, and the backward recursion is differentiated alongside it.
fn analytic_jacobian(net: &Network, x0: &Vector) -> Result<Matrix> {
    let d0 = x0.len();
    let trace = net.trace(x0)?;
    let depth = net.depth();
    let skip = net.skip();

    // Tangents of each layer's preactivation.
    let mut z_tangents: Vec<Matrix> = Vec::with_capacity(depth);
    let mut out_tangents: Vec<Matrix> = Vec::with_capacity(depth);
    let mut input_tangent = Matrix::identity(d0, d0);
    for n in 1..=depth {
        let layer = net.layer(n);
        if let Some(s) = skip {
            if n == s.b {
                input_tangent += &out_tangents[s.a - 1];
            }
        }
        let dz = layer.weight() * &input_tangent;
        let slope = layer.slope(&trace.preactivations[n - 1]);
        let mut dx = dz.clone();
        scale_rows(&mut dx, &slope);
        z_tangents.push(dz);
        out_tangents.push(dx.clone());
        input_tangent = dx;
    }
    drop(out_tangents);

    let mut grad = Vector::from_element(net.output_dim(), 1.0);
    let mut grad_tangent = Matrix::zeros(net.output_dim(), d0);
    let mut pending: Option<(Vector, Matrix)> = None;
    for n in (1..=depth).rev() {
        let layer = net.layer(n);
        let z = &trace.preactivations[n - 1];
        let slope = layer.slope(z);
        let curvature = layer.curvature(z).component_mul(&grad);
        let gated = slope.component_mul(&grad);
        let mut gated_tangent = z_tangents[n - 1].clone();
        scale_rows(&mut gated_tangent, &curvature);
        let mut carried = grad_tangent;
        scale_rows(&mut carried, &slope);
        gated_tangent += carried;

        grad = layer.weight().tr_mul(&gated);
        grad_tangent = layer.weight().tr_mul(&gated_tangent);
        if let Some(s) = skip {
            if n == s.b {
                pending = Some((grad.clone(), grad_tangent.clone()));
            }
            if n == s.a + 1 {
                let (g, gt) = pending.take().expect("b > a + 1");
                grad += g;
                grad_tangent += gt;
            }
        }
    }
    Ok(grad_tangent)
}

fn scale_rows(m: &mut Matrix, s: &Vector) {
    for (i, mut row) in m.row_iter_mut().enumerate() {
        row *= s[i];
    }
}
