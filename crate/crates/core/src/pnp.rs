//! Primal-dual plug-and-play restoration.
//!
//! For `Φ(v) = ½‖Av − y‖²` and a denoiser `D` that is the proximity operator
//! of an implicit regularizer `φ`, the iteration
//!
//! ```text
//! ũ_{k+1} = u_k + σ v_k
//! u_{k+1} = ũ_{k+1} − σ D(ũ_{k+1} / (σ + 1))
//! ṽ_{k+1} = τ ∇(μΦ + ½‖P_{M⊥}·‖²)(v_k)
//! v_{k+1} = (1 + τ) v_k − ṽ_{k+1} − τ (2u_{k+1} − u_k)
//! ```
//!
//! converges to a minimiser of `μΦ(v) + (σ+1)φ(v) + ½‖P_{M⊥} v‖²` provided
//! `σ ≤ β/(1−β)` (with `β = 1/L_D`) and `τ(σ + κ/2) < 1`, where `M` is the
//! dominant eigenspace of `AᵀA` with eigenvalues `≥ 1/μ` and `κ` is the
//! smoothness constant of `μΦ − ½‖P_M·‖²`.
//!
//! The fourth line uses the freshly computed `ṽ_{k+1}`. Using the previous
//! `ṽ_k` instead is available as [`LineSix::Lagged`]; it is not the
//! primal-dual method the convergence result covers and it can diverge.

use nalgebra::SymmetricEigen;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::activation::ActivationSpec;
use crate::denoiser::Denoiser;
use crate::error::{check_dim, Error, Result};
use crate::network::{Layer, Network};
use crate::{Matrix, Vector};

/// Largest dimension for which dense eigendecompositions are attempted.
pub const DEFAULT_DENSE_CAP: usize = 4096;

/// Default stopping threshold on `‖v_k − v_{k−1}‖² / ‖v_0‖²`.
pub const DEFAULT_REL_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 500;
/// Default `γ` in `τ = γ (σ + κ/2)⁻¹`.
pub const DEFAULT_GAMMA_STEP: f64 = 0.8;

/// Dense degradation operator `A: ℝ^{d₀} → ℝ^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearOperator {
    matrix: Matrix,
}

impl LinearOperator {
    pub fn new(matrix: Matrix) -> Self {
        LinearOperator { matrix }
    }

    pub fn identity(d: usize) -> Self {
        LinearOperator::new(Matrix::identity(d, d))
    }

    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn apply(&self, x: &Vector) -> Result<Vector> {
        check_dim("operator input", self.cols(), x.len())?;
        Ok(&self.matrix * x)
    }

    pub fn adjoint(&self, y: &Vector) -> Result<Vector> {
        check_dim("operator adjoint input", self.rows(), y.len())?;
        Ok(self.matrix.tr_mul(y))
    }

    /// `AᵀA`.
    pub fn gram(&self) -> Matrix {
        self.matrix.tr_mul(&self.matrix)
    }

    /// `Φ(v) = ½‖Av − y‖²`.
    pub fn fidelity(&self, v: &Vector, y: &Vector) -> Result<f64> {
        check_dim("observation", self.rows(), y.len())?;
        Ok(0.5 * (self.apply(v)? - y).norm_squared())
    }
}

/// Orthogonal projector onto `M = span(U)`, `UᵀU = I`.
#[derive(Clone, Debug)]
pub struct SubspaceProjector {
    basis: Matrix,
}

impl SubspaceProjector {
    /// Fails unless the columns of `basis` are orthonormal to `1e−10`.
    pub fn from_basis(basis: Matrix) -> Result<Self> {
        let gram = basis.tr_mul(&basis);
        let r = basis.ncols();
        if r > 0 && (gram - Matrix::identity(r, r)).amax() > 1e-10 {
            return Err(Error::Invalid("subspace basis is not orthonormal".into()));
        }
        Ok(SubspaceProjector { basis })
    }

    pub fn full(d: usize) -> Self {
        SubspaceProjector {
            basis: Matrix::identity(d, d),
        }
    }

    pub fn empty(d: usize) -> Self {
        SubspaceProjector {
            basis: Matrix::zeros(d, 0),
        }
    }

    pub fn basis(&self) -> &Matrix {
        &self.basis
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    /// `P_M v`.
    pub fn project(&self, v: &Vector) -> Vector {
        if self.rank() == 0 {
            return Vector::zeros(v.len());
        }
        &self.basis * self.basis.tr_mul(v)
    }

    /// `P_{M⊥} v = v − P_M v`.
    pub fn project_complement(&self, v: &Vector) -> Vector {
        v - self.project(v)
    }

    /// Dense `P_M`.
    pub fn matrix(&self) -> Matrix {
        &self.basis * self.basis.transpose()
    }
}

/// Result of [`build_subspace`].
#[derive(Clone, Debug)]
pub struct Subspace {
    pub projector: SubspaceProjector,
    /// `‖μAᵀA − P_M‖₂`.
    pub kappa: f64,
    /// Eigenvalues of `AᵀA`, descending.
    pub eigenvalues: Vec<f64>,
}

/// Dominant eigenspace of `AᵀA` for eigenvalues `≥ 1/μ` (ties kept) and the
/// smoothness constant of `μΦ − ½‖P_M·‖²`.
pub fn build_subspace(a: &LinearOperator, mu: f64) -> Result<Subspace> {
    build_subspace_capped(a, mu, DEFAULT_DENSE_CAP)
}

pub fn build_subspace_capped(a: &LinearOperator, mu: f64, cap: usize) -> Result<Subspace> {
    if !(mu.is_finite() && mu > 0.0) {
        return Err(Error::Invalid(format!("mu must be positive, got {mu}")));
    }
    let d0 = a.cols();
    if d0 > cap {
        return Err(Error::CapExceeded { size: d0, cap });
    }
    let eig = SymmetricEigen::new(a.gram());
    let mut order: Vec<usize> = (0..d0).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let threshold = 1.0 / mu;
    let kept: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&i| eig.eigenvalues[i] >= threshold)
        .collect();
    let mut basis = Matrix::zeros(d0, kept.len());
    for (col, &i) in kept.iter().enumerate() {
        basis.set_column(col, &eig.eigenvectors.column(i));
    }
    let kappa = order
        .iter()
        .map(|&i| {
            let lam = eig.eigenvalues[i];
            let inside = if lam >= threshold { 1.0 } else { 0.0 };
            (mu * lam - inside).abs()
        })
        .fold(0.0, f64::max);
    Ok(Subspace {
        projector: SubspaceProjector { basis },
        kappa,
        eigenvalues: order.iter().map(|&i| eig.eigenvalues[i]).collect(),
    })
}

/// Which `ṽ` the primal update subtracts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LineSix {
    /// `ṽ_{k+1}`, computed in the same iteration.
    #[default]
    Current,
    /// `ṽ_k`, from the previous iteration (`ṽ_0 = τ∇f(v_0)`).
    Lagged,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PnPParams {
    pub sigma: f64,
    pub tau: f64,
    pub mu: f64,
    pub gamma_step: f64,
    pub kappa: f64,
    pub max_iter: usize,
    pub rel_tol: f64,
    pub line_six: LineSix,
}

impl PnPParams {
    /// `σ = β/(1−β)` and `τ = γ_step (σ + κ/2)⁻¹` with `γ_step = 0.8`.
    pub fn recommended(beta: f64, kappa: f64, mu: f64) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::Invalid(format!("beta must lie in (0, 1), got {beta}")));
        }
        Self::with_sigma(beta / (1.0 - beta), kappa, mu, DEFAULT_GAMMA_STEP)
    }

    /// Given `σ`, sets `τ = γ_step (σ + κ/2)⁻¹`.
    pub fn with_sigma(sigma: f64, kappa: f64, mu: f64, gamma_step: f64) -> Result<Self> {
        if !(gamma_step > 0.0 && gamma_step < 1.0) {
            return Err(Error::Invalid(format!(
                "gamma_step must lie in (0, 1), got {gamma_step}"
            )));
        }
        let denom = sigma + 0.5 * kappa;
        if !(denom > 0.0 && denom.is_finite()) {
            return Err(Error::Invalid("sigma + kappa/2 must be positive".into()));
        }
        let params = PnPParams {
            sigma,
            tau: gamma_step / denom,
            mu,
            gamma_step,
            kappa,
            max_iter: DEFAULT_MAX_ITER,
            rel_tol: DEFAULT_REL_TOL,
            line_six: LineSix::Current,
        };
        params.validate_basic()?;
        Ok(params)
    }

    fn validate_basic(&self) -> Result<()> {
        let ok = self.sigma.is_finite()
            && self.sigma >= 0.0
            && self.tau.is_finite()
            && self.tau > 0.0
            && self.mu.is_finite()
            && self.mu > 0.0
            && self.kappa.is_finite()
            && self.kappa >= 0.0
            && self.rel_tol >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("invalid solver parameters {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepMode {
    /// Both step conditions are enforced.
    Strict,
    /// Only `τ(σ + κ/2) < 1` is enforced; a violated `σ ≤ β/(1−β)` is
    /// reported as a warning.
    Relaxed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepSizeCheck {
    pub mode: StepMode,
    pub sigma_bound: f64,
    /// `β/(1−β) − σ`; nonnegative iff the first condition holds.
    pub sigma_margin: f64,
    pub sigma_ok: bool,
    /// `1 − τ(σ + κ/2)`; positive iff the second condition holds.
    pub tau_margin: f64,
    pub tau_ok: bool,
    pub passed: bool,
    pub warning: Option<String>,
}

pub fn check_step_sizes(params: &PnPParams, beta: f64, mode: StepMode) -> StepSizeCheck {
    let sigma_bound = beta / (1.0 - beta);
    let sigma_margin = sigma_bound - params.sigma;
    let sigma_ok = params.sigma <= sigma_bound;
    let tau_margin = 1.0 - params.tau * (params.sigma + 0.5 * params.kappa);
    let tau_ok = tau_margin > 0.0;
    let passed = match mode {
        StepMode::Strict => sigma_ok && tau_ok,
        StepMode::Relaxed => tau_ok,
    };
    let warning = (mode == StepMode::Relaxed && !sigma_ok).then(|| {
        format!(
            "relaxed step sizes: sigma = {} exceeds beta/(1-beta) = {sigma_bound}; convergence is not guaranteed",
            params.sigma
        )
    });
    StepSizeCheck {
        mode,
        sigma_bound,
        sigma_margin,
        sigma_ok,
        tau_margin,
        tau_ok,
        passed,
        warning,
    }
}

/// `∇(μΦ + ½‖P_{M⊥}·‖²)(v) = μAᵀ(Av − y) + P_{M⊥} v`.
pub fn grad_f(
    a: &LinearOperator,
    y: &Vector,
    proj: &SubspaceProjector,
    mu: f64,
    v: &Vector,
) -> Result<Vector> {
    check_dim("observation", a.rows(), y.len())?;
    check_dim("projector", a.cols(), proj.dim())?;
    let residual = a.apply(v)? - y;
    Ok(a.adjoint(&residual)? * mu + proj.project_complement(v))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIterations,
    NonFinite,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::Converged => "converged",
            Termination::MaxIterations => "max_iterations",
            Termination::NonFinite => "non_finite",
        }
    }
}

#[derive(Clone, Debug)]
pub struct SolveTrace {
    pub iterations: usize,
    /// `‖v_k − v_{k−1}‖² / ‖v_0‖²` per iteration. When `v_0 = 0` the
    /// denominator is `max(‖v_k‖², ‖v_{k−1}‖²)` instead, and `0/0` is `0`.
    pub rel_changes: Vec<f64>,
    /// `Φ(v_k)` per iteration.
    pub fidelity: Vec<f64>,
    pub termination: Termination,
}

impl SolveTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,rel_change,fidelity\n");
        for (k, (r, f)) in self.rel_changes.iter().zip(&self.fidelity).enumerate() {
            out.push_str(&format!("{},{r:e},{f:e}\n", k + 1));
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct SolveResult {
    pub v: Vector,
    pub u: Vector,
    pub trace: SolveTrace,
}

/// Validates dimensions and the second step condition, then iterates.
/// The first condition is the caller's responsibility via
/// [`check_step_sizes`], since relaxed mode deliberately violates it.
#[allow(clippy::too_many_arguments)]
pub fn pnp_solve(
    denoiser: &dyn Denoiser,
    a: &LinearOperator,
    y: &Vector,
    proj: &SubspaceProjector,
    params: &PnPParams,
    v0: &Vector,
    u0: &Vector,
) -> Result<SolveResult> {
    params.validate_basic()?;
    let tau_margin = 1.0 - params.tau * (params.sigma + 0.5 * params.kappa);
    if tau_margin <= 0.0 {
        return Err(Error::Invalid(format!(
            "tau (sigma + kappa/2) = {} must be < 1",
            1.0 - tau_margin
        )));
    }
    pnp_iterate(denoiser, a, y, proj, params, v0, u0)
}

/// The bare iteration with no step-size validation; used to probe what
/// happens when the conditions are violated.
#[allow(clippy::too_many_arguments)]
pub fn pnp_iterate(
    denoiser: &dyn Denoiser,
    a: &LinearOperator,
    y: &Vector,
    proj: &SubspaceProjector,
    params: &PnPParams,
    v0: &Vector,
    u0: &Vector,
) -> Result<SolveResult> {
    let d0 = a.cols();
    check_dim("denoiser", d0, denoiser.dim())?;
    check_dim("observation", a.rows(), y.len())?;
    check_dim("projector", d0, proj.dim())?;
    check_dim("v0", d0, v0.len())?;
    check_dim("u0", d0, u0.len())?;

    let PnPParams {
        sigma,
        tau,
        mu,
        max_iter,
        rel_tol,
        line_six,
        ..
    } = *params;
    let v0_norm2 = v0.norm_squared();
    let mut v = v0.clone();
    let mut u = u0.clone();
    let mut v_tilde_prev = grad_f(a, y, proj, mu, &v)? * tau;
    let mut trace = SolveTrace {
        iterations: 0,
        rel_changes: Vec::new(),
        fidelity: Vec::new(),
        termination: Termination::MaxIterations,
    };

    for k in 0..max_iter {
        let u_tilde = &u + &v * sigma;
        let denoised = denoiser.apply(&(&u_tilde / (sigma + 1.0)))?;
        let u_next = &u_tilde - denoised * sigma;
        let v_tilde = grad_f(a, y, proj, mu, &v)? * tau;
        let subtracted = match line_six {
            LineSix::Current => &v_tilde,
            LineSix::Lagged => &v_tilde_prev,
        };
        let v_next = &v * (1.0 + tau) - subtracted - (&u_next * 2.0 - &u) * tau;

        let change = (&v_next - &v).norm_squared();
        let denom = if v0_norm2 > 0.0 {
            v0_norm2
        } else {
            v_next.norm_squared().max(v.norm_squared())
        };
        let rel = if change == 0.0 { 0.0 } else { change / denom };
        trace.iterations = k + 1;

        if !(rel.is_finite() && v_next.iter().chain(u_next.iter()).all(|x| x.is_finite())) {
            trace.termination = Termination::NonFinite;
            return Err(Error::Diverged {
                iteration: k + 1,
                trace: Box::new(trace),
            });
        }
        trace.rel_changes.push(rel);
        trace.fidelity.push(a.fidelity(&v_next, y)?);
        v_tilde_prev = v_tilde;
        u = u_next;
        v = v_next;
        if rel < rel_tol {
            trace.termination = Termination::Converged;
            break;
        }
    }
    Ok(SolveResult { v, u, trace })
}

/// Exact minimiser of `μΦ(v) + (σ+1)φ(v) + ½‖P_{M⊥} v‖²` when the denoiser
/// is affine, `D(x) = Qx + c` with `Q` symmetric positive definite. Then
/// `D = (I + ∇φ)⁻¹` gives `∇φ(v) = Q⁻¹(v − c) − v`, and the optimality
/// condition is the linear system
///
/// ```text
/// [μAᵀA + P_{M⊥} + (σ+1)(Q⁻¹ − I)] v = μAᵀy + (σ+1) Q⁻¹c.
/// ```
#[allow(clippy::too_many_arguments)]
pub fn closed_form_quadratic_solve(
    q: &Matrix,
    c: &Vector,
    a: &LinearOperator,
    y: &Vector,
    mu: f64,
    sigma: f64,
    proj: &SubspaceProjector,
) -> Result<Vector> {
    let d0 = a.cols();
    check_dim("Q rows", d0, q.nrows())?;
    check_dim("Q cols", d0, q.ncols())?;
    check_dim("c", d0, c.len())?;
    check_dim("observation", a.rows(), y.len())?;
    check_dim("projector", d0, proj.dim())?;
    if (q - q.transpose()).amax() > 1e-10 * q.amax().max(1.0) {
        return Err(Error::Invalid("Q must be symmetric".into()));
    }
    let chol = q
        .clone()
        .cholesky()
        .ok_or(Error::Singular("Q is not positive definite"))?;
    let q_inv = chol.inverse();
    let identity = Matrix::identity(d0, d0);
    let system = a.gram() * mu + (&identity - proj.matrix()) + (&q_inv - &identity) * (sigma + 1.0);
    let rhs = a.adjoint(y)? * mu + &q_inv * c * (sigma + 1.0);
    system
        .lu()
        .solve(&rhs)
        .ok_or(Error::Singular("optimality system"))
}

/// A solver instance where the denoiser is a single sReLU layer that stays
/// inside its quadratic region, so `D` is exactly affine and
/// [`closed_form_quadratic_solve`] gives the answer the iteration must reach.
#[derive(Clone, Debug)]
pub struct AffineRegionInstance {
    pub network: Network,
    /// `D(x) = Qx + c` inside the region.
    pub q: Matrix,
    pub c: Vector,
    pub operator: LinearOperator,
    pub observation: Vector,
    pub truth: Vector,
    pub subspace: Subspace,
    pub lipschitz: f64,
    pub beta: f64,
    pub params: PnPParams,
}

impl AffineRegionInstance {
    /// `d0`-dimensional instance. The layer has paired rows `[V; −V]` so the
    /// constant `½Wᵀ1` cancels and `D(x) = Q(x − ½·1)` with
    /// `Q = VᵀV/γ` having spectrum evenly spread over `[0.5, 2]`. `A` has
    /// singular values spread over `[0.3, 1.2]` and `μ = 2`.
    pub fn generate(d0: usize, seed: u64) -> Result<Self> {
        const GAMMA: f64 = 10.0;
        const MU: f64 = 2.0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spread = |lo: f64, hi: f64, i: usize| {
            if d0 == 1 {
                hi
            } else {
                lo + (hi - lo) * i as f64 / (d0 - 1) as f64
            }
        };
        let mut orthogonal = || {
            let g = Matrix::from_fn(d0, d0, |_, _| StandardNormal.sample(&mut rng));
            g.qr().q()
        };
        let (u, w) = (orthogonal(), orthogonal());
        let q_spectrum = Vector::from_fn(d0, |i, _| (GAMMA * spread(0.5, 2.0, i)).sqrt());
        let v = &u * Matrix::from_diagonal(&q_spectrum) * w.transpose();
        let (ua, va) = (orthogonal(), orthogonal());
        let a_spectrum = Vector::from_fn(d0, |i, _| spread(0.3, 1.2, i));
        let a = &ua * Matrix::from_diagonal(&a_spectrum) * va.transpose();

        let mut weight = Matrix::zeros(2 * d0, d0);
        weight.rows_mut(0, d0).copy_from(&v);
        weight.rows_mut(d0, d0).copy_from(&(-&v));
        let center = Vector::from_element(d0, 0.5);
        let bias = -(&weight * &center);
        let q = weight.tr_mul(&weight) / (2.0 * GAMMA);
        let c = weight.tr_mul(&(&bias / (2.0 * GAMMA) + Vector::from_element(2 * d0, 0.5)));
        let layer = Layer::new(weight, bias, ActivationSpec::srelu(GAMMA)?)?;
        let network = Network::new(vec![layer], None)?;

        let uniform = Uniform::new(0.0, 1.0).expect("valid range");
        let truth = Vector::from_fn(d0, |_, _| uniform.sample(&mut rng));
        let noise = Vector::from_fn(d0, |_, _| 0.01 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
        let operator = LinearOperator::new(a);
        let observation = operator.apply(&truth)? + noise;
        let subspace = build_subspace(&operator, MU)?;
        let lipschitz = SymmetricEigen::new(q.clone()).eigenvalues.max();
        let beta = 1.0 / lipschitz;
        let params = PnPParams::recommended(beta, subspace.kappa, MU)?;
        Ok(AffineRegionInstance {
            network,
            q,
            c,
            operator,
            observation,
            truth,
            subspace,
            lipschitz,
            beta,
            params,
        })
    }

    pub fn closed_form(&self) -> Result<Vector> {
        closed_form_quadratic_solve(
            &self.q,
            &self.c,
            &self.operator,
            &self.observation,
            self.params.mu,
            self.params.sigma,
            &self.subspace.projector,
        )
    }

    /// Largest `|W x + b| / γ` at `x`; below one means `x` is inside the
    /// quadratic region.
    pub fn region_usage(&self, x: &Vector) -> f64 {
        let layer = self.network.layer(1);
        layer.affine(x).amax() / layer.activation().gamma()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{AffineDenoiser, FnDenoiser};
    use rand::Rng;

    fn rand_vec(d: usize, rng: &mut ChaCha8Rng) -> Vector {
        Vector::from_fn(d, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Cyclic Jacobi eigenvalue iteration; independent of nalgebra's solver.
    fn jacobi_eigenvalues(mut m: Matrix) -> Vec<f64> {
        let n = m.nrows();
        for _sweep in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .filter(|(i, j)| i != j)
                .map(|(i, j)| m[(i, j)].powi(2))
                .sum();
            if off < 1e-24 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if m[(p, q)].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * m[(p, q)]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (mkp, mkq) = (m[(k, p)], m[(k, q)]);
                        m[(k, p)] = c * mkp - s * mkq;
                        m[(k, q)] = s * mkp + c * mkq;
                    }
                    for k in 0..n {
                        let (mpk, mqk) = (m[(p, k)], m[(q, k)]);
                        m[(p, k)] = c * mpk - s * mqk;
                        m[(q, k)] = s * mpk + c * mqk;
                    }
                }
            }
        }
        (0..n).map(|i| m[(i, i)]).collect()
    }

    #[test]
    fn subspace_identity_and_zero() {
        let s = build_subspace(&LinearOperator::identity(5), 2.0).unwrap();
        assert_eq!(s.projector.rank(), 5);
        assert!((s.kappa - 1.0).abs() < 1e-12);
        let v = Vector::from_element(5, 1.0);
        assert!(s.projector.project_complement(&v).amax() < 1e-12);

        let zero = LinearOperator::new(Matrix::zeros(3, 4));
        let s = build_subspace(&zero, 1.0).unwrap();
        assert_eq!(s.projector.rank(), 0);
        assert_eq!(s.kappa, 0.0);
        assert!(build_subspace(&zero, 0.0).is_err());
        assert!(matches!(
            build_subspace_capped(&zero, 1.0, 3),
            Err(Error::CapExceeded { .. })
        ));
    }

    #[test]
    fn subspace_rank_matches_jacobi_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = LinearOperator::new(Matrix::from_fn(8, 12, |_, _| rng.random_range(-1.0..1.0)));
        let mu = 4.0;
        let s = build_subspace(&a, mu).unwrap();
        let eig = jacobi_eigenvalues(a.gram());
        let expected = eig.iter().filter(|&&l| l >= 1.0 / mu).count();
        assert_eq!(s.projector.rank(), expected);
        for (i, &lam) in s.eigenvalues.iter().enumerate() {
            if i < s.projector.rank() {
                assert!(lam >= 0.25);
            } else {
                assert!(lam <= 0.25);
            }
        }
        let mut sorted = eig.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let want_kappa = sorted
            .iter()
            .enumerate()
            .map(|(i, l)| (mu * l - if i < expected { 1.0 } else { 0.0 }).abs())
            .fold(0.0, f64::max);
        assert!((s.kappa - want_kappa).abs() < 1e-9);
    }

    #[test]
    fn projector_algebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = LinearOperator::new(Matrix::from_fn(10, 10, |_, _| rng.random_range(-1.0..1.0)));
        let p = build_subspace(&a, 1.5).unwrap().projector;
        let pm = p.matrix();
        let basis = p.basis();
        let r = p.rank();
        assert!((basis.tr_mul(basis) - Matrix::identity(r, r)).amax() < 1e-10);
        assert!((&pm * &pm - &pm).amax() < 1e-12);
        for _ in 0..20 {
            let v = rand_vec(10, &mut rng);
            let sum = p.project(&v) + p.project_complement(&v);
            assert!((sum - &v).amax() < 1e-12);
        }
        assert!(SubspaceProjector::from_basis(Matrix::from_element(3, 1, 1.0)).is_err());
    }

    #[test]
    fn operator_adjointness() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = LinearOperator::new(Matrix::from_fn(6, 9, |_, _| rng.random_range(-1.0..1.0)));
        for _ in 0..100 {
            let x = rand_vec(9, &mut rng);
            let y = rand_vec(6, &mut rng);
            let lhs = a.apply(&x).unwrap().dot(&y);
            let rhs = x.dot(&a.adjoint(&y).unwrap());
            assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn step_size_checks() {
        let mk = |sigma: f64| PnPParams::with_sigma(sigma, 0.5, 1.0, 0.8).unwrap();
        let c = check_step_sizes(&mk(1.0), 0.5, StepMode::Strict);
        assert!(c.sigma_ok && c.passed);
        assert_eq!(c.sigma_margin, 0.0);

        let beta = 1.0 / 2.28;
        assert!(check_step_sizes(&mk(0.78), beta, StepMode::Strict).passed);
        let over = mk(1.75);
        assert!(!check_step_sizes(&over, beta, StepMode::Strict).passed);
        let relaxed = check_step_sizes(&over, beta, StepMode::Relaxed);
        assert!(relaxed.passed && relaxed.warning.is_some());

        for (sigma, kappa) in [(0.3, 0.1), (2.0, 5.0), (0.01, 40.0)] {
            let p = PnPParams::with_sigma(sigma, kappa, 1.0, 0.8).unwrap();
            let c = check_step_sizes(&p, 0.5, StepMode::Relaxed);
            assert!((c.tau_margin - 0.2).abs() < 1e-12);
        }
        let bound = 0.5 / (1.0 - 0.5);
        let p = mk(bound + 1e-9);
        assert!(!check_step_sizes(&p, 0.5, StepMode::Strict).passed);
    }

    #[test]
    fn grad_f_cases() {
        let id = LinearOperator::identity(4);
        let full = SubspaceProjector::full(4);
        let zero = Vector::zeros(4);
        assert_eq!(grad_f(&id, &zero, &full, 1.0, &zero).unwrap(), zero);
        let v = Vector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        assert!((grad_f(&id, &zero, &full, 1.0, &v).unwrap() - &v).amax() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = LinearOperator::new(Matrix::from_fn(5, 6, |_, _| rng.random_range(-1.0..1.0)));
        let y = rand_vec(5, &mut rng);
        let mu = 1.7;
        let proj = build_subspace(&a, mu).unwrap().projector;
        let f = |v: &Vector| {
            mu * a.fidelity(v, &y).unwrap() + 0.5 * proj.project_complement(v).norm_squared()
        };
        let v = rand_vec(6, &mut rng);
        let g = grad_f(&a, &y, &proj, mu, &v).unwrap();
        let h = 1e-5;
        for j in 0..6 {
            let mut p = v.clone();
            p[j] += h;
            let mut m = v.clone();
            m[j] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_denoiser_fixed_point() {
        // D ≡ 0 is the proximity operator of the indicator of {0}: the primal
        // limit is v = 0 and the dual limit satisfies u = v − ∇f(v), i.e.
        // u = μAᵀy.
        let d = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = LinearOperator::new(Matrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0)));
        let y = rand_vec(d, &mut rng);
        let mu = 1.5;
        let sub = build_subspace(&a, mu).unwrap();
        let zero = FnDenoiser::new(d, |x: &Vector| Vector::zeros(x.len()));
        let mut params = PnPParams::with_sigma(0.1, sub.kappa, mu, 0.8).unwrap();
        params.rel_tol = 1e-30;
        params.max_iter = 20_000;
        let res = pnp_solve(&zero, &a, &y, &sub.projector, &params, &Vector::zeros(d), &Vector::zeros(d))
            .unwrap();
        assert!(res.v.amax() < 1e-8, "v = {}", res.v);
        let want_u = a.adjoint(&y).unwrap() * mu;
        assert!((&res.u - want_u).amax() < 1e-8);
    }

    #[test]
    fn zero_start_is_a_fixed_point() {
        let d = 4;
        let zero = FnDenoiser::new(d, |x: &Vector| Vector::zeros(x.len()));
        let a = LinearOperator::identity(d);
        let proj = SubspaceProjector::full(d);
        let params = PnPParams::with_sigma(0.5, 1.0, 1.0, 0.8).unwrap();
        let z = Vector::zeros(d);
        let res = pnp_solve(&zero, &a, &z, &proj, &params, &z, &z).unwrap();
        assert_eq!(res.v, z);
        assert_eq!(res.trace.termination, Termination::Converged);
        assert_eq!(res.trace.iterations, 1);
    }

    #[test]
    fn closed_form_identity_prox_is_least_squares() {
        let d = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let y = rand_vec(d, &mut rng);
        let v = closed_form_quadratic_solve(
            &Matrix::identity(d, d),
            &Vector::zeros(d),
            &LinearOperator::identity(d),
            &y,
            1.0,
            0.7,
            &SubspaceProjector::full(d),
        )
        .unwrap();
        assert!((v - &y).amax() < 1e-12);
    }

    #[test]
    fn closed_form_half_identity_matches_lattice_search() {
        let y = Vector::from_vec(vec![0.8, -0.4]);
        let q = Matrix::identity(2, 2) * 0.5;
        let v = closed_form_quadratic_solve(
            &q,
            &Vector::zeros(2),
            &LinearOperator::identity(2),
            &y,
            1.0,
            0.0,
            &SubspaceProjector::full(2),
        )
        .unwrap();
        // Objective ½‖v − y‖² + φ(v) with φ(v) = ½vᵀ(Q⁻¹ − I)v = ½‖v‖².
        let obj = |a: f64, b: f64| {
            0.5 * ((a - y[0]).powi(2) + (b - y[1]).powi(2)) + 0.5 * (a * a + b * b)
        };
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in -200..=200 {
            for j in -200..=200 {
                let (a, b) = (i as f64 * 0.005, j as f64 * 0.005);
                let o = obj(a, b);
                if o < best.0 {
                    best = (o, a, b);
                }
            }
        }
        assert!((v[0] - best.1).abs() <= 0.005 && (v[1] - best.2).abs() <= 0.005);
        assert!((v - &y * 0.5).amax() < 1e-12);
    }

    #[test]
    fn closed_form_beats_random_perturbations() {
        let d = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = Matrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let q = &b * b.transpose() + Matrix::identity(d, d) * 0.5;
        let c = rand_vec(d, &mut rng);
        let a = LinearOperator::new(Matrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0)));
        let y = rand_vec(d, &mut rng);
        let mu = 3.0;
        let sub = build_subspace(&a, mu).unwrap();
        let lip = SymmetricEigen::new(q.clone()).eigenvalues.max();
        let beta = 1.0 / lip;
        let sigma = beta / (1.0 - beta);
        let proj = &sub.projector;
        let v = closed_form_quadratic_solve(&q, &c, &a, &y, mu, sigma, proj).unwrap();
        let q_inv = q.clone().try_inverse().unwrap();
        let objective = |v: &Vector| {
            let phi = 0.5 * v.dot(&((&q_inv - Matrix::identity(d, d)) * v)) - c.dot(&(&q_inv * v));
            mu * a.fidelity(v, &y).unwrap()
                + (sigma + 1.0) * phi
                + 0.5 * proj.project_complement(v).norm_squared()
        };
        let best = objective(&v);
        for _ in 0..10_000 {
            let delta = rand_vec(d, &mut rng) * rng.random_range(1e-4..1.0);
            assert!(objective(&(&v + delta)) >= best - 1e-12);
        }
    }

    #[test]
    fn closed_form_rejects_singular_q() {
        let d = 3;
        let err = closed_form_quadratic_solve(
            &Matrix::zeros(d, d),
            &Vector::zeros(d),
            &LinearOperator::identity(d),
            &Vector::zeros(d),
            1.0,
            0.5,
            &SubspaceProjector::full(d),
        );
        assert!(matches!(err, Err(Error::Singular(_))));
    }

    #[test]
    fn affine_instance_converges_to_closed_form() {
        let inst = AffineRegionInstance::generate(16, 1).unwrap();
        let dense = AffineDenoiser {
            q: inst.q.clone(),
            c: inst.c.clone(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let x = Vector::from_fn(16, |_, _| rng.random_range(0.0..1.0));
            assert!(inst.region_usage(&x) < 1.0);
            let net_out = inst.network.apply(&x).unwrap();
            assert!((net_out - dense.apply(&x).unwrap()).amax() < 1e-12);
        }
        let want = inst.closed_form().unwrap();
        let mut params = inst.params;
        params.rel_tol = 1e-20;
        let z = Vector::zeros(16);
        let res = pnp_solve(&inst.network, &inst.operator, &inst.observation, &inst.subspace.projector, &params, &z, &z)
            .unwrap();
        assert!((&res.v - &want).norm() / want.norm() < 1e-6);
    }

    #[test]
    fn invalid_tau_is_rejected_before_iterating() {
        let inst = AffineRegionInstance::generate(4, 2).unwrap();
        let mut params = inst.params;
        params.tau *= 2.0;
        let z = Vector::zeros(4);
        let err = pnp_solve(&inst.network, &inst.operator, &inst.observation, &inst.subspace.projector, &params, &z, &z);
        assert!(matches!(err, Err(Error::Invalid(_))));
    }
}
