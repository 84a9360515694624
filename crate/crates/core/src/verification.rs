//! Executable certificates for a trained denoiser.
//!
//! Each check returns a [`VerificationReport`] carrying the measured value,
//! the bound it was held to and the input that came closest to failing.
//! Sampled checks draw their inputs from a seeded box, see [`SampleSpec`].

use std::fmt::{self, Write as _};

use nalgebra::SymmetricEigen;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::denoiser::{potential_eval, Denoiser, JacobianMode};
use crate::error::{Error, Result};
use crate::{Network, Vector};

pub const SYMMETRY_TOL_ANALYTIC: f64 = 1e-8;
pub const SYMMETRY_TOL_FD: f64 = 1e-5;
pub const MONOTONICITY_TOL: f64 = 1e-10;
pub const CONVEXITY_TOL: f64 = 1e-8;
/// Smallest `L̂` margin above one used when mapping to `β`.
pub const BETA_EPSILON: f64 = 1e-6;
pub const MIN_ORACLE_POINTS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bound {
    AtMost(f64),
    AtLeast(f64),
}

impl Bound {
    pub fn admits(self, value: f64) -> bool {
        match self {
            Bound::AtMost(t) => value <= t,
            Bound::AtLeast(t) => value >= t,
        }
    }

    fn parts(self) -> (&'static str, f64) {
        match self {
            Bound::AtMost(t) => ("<=", t),
            Bound::AtLeast(t) => (">=", t),
        }
    }
}

impl fmt::Display for Bound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (op, t) = self.parts();
        write!(f, "{op} {t:e}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerificationReport {
    pub property: &'static str,
    pub passed: bool,
    pub measured: f64,
    pub bound: Bound,
    pub samples: usize,
    /// Index of the sample that produced `measured`.
    pub worst_input: Option<usize>,
    pub notes: Vec<String>,
}

pub const REPORT_CSV_HEADER: &str = "property,status,measured,comparison,tolerance,samples,worst_input";

impl VerificationReport {
    fn new(property: &'static str, measured: f64, bound: Bound, samples: usize, worst: Option<usize>) -> Self {
        VerificationReport {
            property,
            passed: bound.admits(measured),
            measured,
            bound,
            samples,
            worst_input: worst,
            notes: Vec::new(),
        }
    }

    fn status(&self) -> &'static str {
        if self.passed {
            "pass"
        } else {
            "FAIL"
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("[{}]\n", self.property);
        let _ = writeln!(out, "status      = {}", self.status());
        let _ = writeln!(out, "measured    = {:e}", self.measured);
        let _ = writeln!(out, "required    = {}", self.bound);
        let _ = writeln!(out, "samples     = {}", self.samples);
        if let Some(w) = self.worst_input {
            let _ = writeln!(out, "worst_input = sample {w}");
        }
        for note in &self.notes {
            let _ = writeln!(out, "note        = {note}");
        }
        out
    }

    pub fn to_csv_row(&self) -> String {
        let (op, t) = self.bound.parts();
        let worst = self.worst_input.map(|w| w.to_string()).unwrap_or_default();
        format!(
            "{},{},{:e},{op},{t:e},{},{worst}",
            self.property,
            self.status(),
            self.measured,
            self.samples
        )
    }
}

/// `count` inputs drawn uniformly from `[low, high]^d`, reproducible in
/// `seed`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleSpec {
    pub count: usize,
    pub seed: u64,
    pub low: f64,
    pub high: f64,
}

impl SampleSpec {
    pub fn new(count: usize, seed: u64) -> Self {
        SampleSpec {
            count,
            seed,
            low: -1.0,
            high: 1.0,
        }
    }

    pub fn within(self, low: f64, high: f64) -> Self {
        SampleSpec { low, high, ..self }
    }

    pub fn draw(&self, dim: usize) -> Vec<Vector> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.count)
            .map(|_| Vector::from_fn(dim, |_, _| rng.random_range(self.low..=self.high)))
            .collect()
    }
}

/// Worst value and its index; `pick` chooses the worse of two values.
fn worst_of(values: impl Iterator<Item = f64>, worse: fn(f64, f64) -> bool) -> (f64, Option<usize>) {
    values.enumerate().fold((f64::NAN, None), |(best, idx), (i, v)| {
        if idx.is_none() || worse(v, best) || v.is_nan() {
            (v, Some(i))
        } else {
            (best, idx)
        }
    })
}

fn largest(values: impl Iterator<Item = f64>) -> (f64, Option<usize>) {
    worst_of(values, |a, b| a > b)
}

fn smallest(values: impl Iterator<Item = f64>) -> (f64, Option<usize>) {
    worst_of(values, |a, b| a < b)
}

/// Maximum entrywise asymmetry `‖J − Jᵀ‖_max` over the samples. The
/// tolerance is [`SYMMETRY_TOL_ANALYTIC`] or [`SYMMETRY_TOL_FD`] by mode.
pub fn check_jacobian_symmetry(
    d: &(dyn Denoiser + Sync),
    spec: &SampleSpec,
    mode: JacobianMode,
) -> Result<VerificationReport> {
    let tol = match mode {
        JacobianMode::Analytic => SYMMETRY_TOL_ANALYTIC,
        JacobianMode::FiniteDifference => SYMMETRY_TOL_FD,
    };
    check_jacobian_symmetry_tol(d, spec, mode, tol)
}

pub fn check_jacobian_symmetry_tol(
    d: &(dyn Denoiser + Sync),
    spec: &SampleSpec,
    mode: JacobianMode,
    tol: f64,
) -> Result<VerificationReport> {
    let defects = spec
        .draw(d.dim())
        .par_iter()
        .map(|x| {
            let j = d.jacobian(x, mode)?;
            Ok((&j - j.transpose()).amax())
        })
        .collect::<Result<Vec<f64>>>()?;
    let (m, w) = largest(defects.into_iter());
    Ok(VerificationReport::new("jacobian_symmetry", m.max(0.0), Bound::AtMost(tol), spec.count, w))
}

/// Minimum of `⟨D(x) − D(y), x − y⟩` over random pairs.
pub fn check_monotonicity(d: &(dyn Denoiser + Sync), spec: &SampleSpec) -> Result<VerificationReport> {
    let xs = spec.draw(d.dim());
    let ys = SampleSpec { seed: spec.seed ^ 0x5eed_5eed, ..*spec }.draw(d.dim());
    let values = xs
        .par_iter()
        .zip(ys.par_iter())
        .map(|(x, y)| pair_inner(d, x, y))
        .collect::<Result<Vec<f64>>>()?;
    let (m, w) = smallest(values.into_iter());
    Ok(VerificationReport::new(
        "monotonicity",
        if spec.count == 0 { 0.0 } else { m },
        Bound::AtLeast(-MONOTONICITY_TOL),
        spec.count,
        w,
    ))
}

pub fn pair_inner(d: &dyn Denoiser, x: &Vector, y: &Vector) -> Result<f64> {
    Ok((d.apply(x)? - d.apply(y)?).dot(&(x - y)))
}

/// Counterexample search for monotonicity: around each sample, probes the
/// direction of the most negative eigenvalue of the symmetrised Jacobian at
/// several step lengths, on top of plain random pairs.
pub fn search_monotonicity_counterexample(
    d: &(dyn Denoiser + Sync),
    spec: &SampleSpec,
    mode: JacobianMode,
) -> Result<VerificationReport> {
    let random = check_monotonicity(d, spec)?;
    let directed = spec
        .draw(d.dim())
        .par_iter()
        .map(|x| {
            let j = d.jacobian(x, mode)?;
            let eig = SymmetricEigen::new((&j + j.transpose()) * 0.5);
            let k = eig.eigenvalues.imin();
            let e = eig.eigenvectors.column(k).into_owned();
            let mut best = f64::INFINITY;
            for t in [1.0, 0.3, 0.1, 0.03, 0.01] {
                for s in [t, -t] {
                    best = best.min(pair_inner(d, &(x + &e * s), x)?);
                }
            }
            Ok(best)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (m, w) = smallest(directed.into_iter());
    let (measured, worst) = if random.measured <= m || w.is_none() {
        (random.measured, random.worst_input)
    } else {
        (m, w)
    };
    let mut report = VerificationReport::new(
        "monotonicity_search",
        measured,
        Bound::AtLeast(-MONOTONICITY_TOL),
        2 * spec.count,
        worst,
    );
    report.notes.push(format!("random-pair minimum {:e}", random.measured));
    Ok(report)
}

/// Minimum eigenvalue of `(J + Jᵀ)/2` over the samples.
pub fn check_convexity(
    d: &(dyn Denoiser + Sync),
    spec: &SampleSpec,
    mode: JacobianMode,
) -> Result<VerificationReport> {
    let mins = spec
        .draw(d.dim())
        .par_iter()
        .map(|x| {
            let j = d.jacobian(x, mode)?;
            Ok(SymmetricEigen::new((&j + j.transpose()) * 0.5).eigenvalues.min())
        })
        .collect::<Result<Vec<f64>>>()?;
    let (m, w) = smallest(mins.into_iter());
    Ok(VerificationReport::new(
        "convexity",
        if spec.count == 0 { 0.0 } else { m },
        Bound::AtLeast(-CONVEXITY_TOL),
        spec.count,
        w,
    ))
}

/// Smallest weight entry over layers `n ≥ 2`, required to be `≥ 0` exactly.
/// A single-layer network has no constrained weights and passes with
/// `measured = +∞`.
pub fn check_nonnegativity(net: &Network) -> VerificationReport {
    let entries: Vec<f64> = net
        .layers()
        .iter()
        .filter(|l| l.nonneg_required())
        .flat_map(|l| l.weight().iter().copied())
        .collect();
    let (m, w) = smallest(entries.iter().copied());
    let measured = if entries.is_empty() { f64::INFINITY } else { m };
    let mut report = VerificationReport::new("nonnegativity", measured, Bound::AtLeast(0.0), entries.len(), w);
    if let Some(i) = w.filter(|_| !report.passed) {
        report.notes.push(format!("most negative entry is constrained weight #{i}"));
    }
    report
}

/// How [`estimate_lipschitz`] obtains Jacobian products.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JacobianAccess {
    /// Form `J` densely once per input.
    Dense(JacobianMode),
    /// `Jv` by central differences of `D`, `Jᵀw` by [`Denoiser::vjp`].
    MatrixFree,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerIteration {
    pub iters: usize,
    /// Relative change of the norm estimate that counts as converged.
    pub tol: f64,
    /// Seeds the shared start vector.
    pub seed: u64,
    pub access: JacobianAccess,
}

impl Default for PowerIteration {
    fn default() -> Self {
        PowerIteration {
            iters: 200,
            tol: 1e-9,
            seed: 0,
            access: JacobianAccess::Dense(JacobianMode::Analytic),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LipschitzEstimate {
    /// `L̂_D = max_x ‖J_D(x)‖₂` over the input set.
    pub value: f64,
    /// Every per-input power iteration met the tolerance.
    pub converged: bool,
    pub worst_input: usize,
    pub per_input: Vec<f64>,
}

impl LipschitzEstimate {
    pub fn report(&self) -> VerificationReport {
        let mut r = VerificationReport::new(
            "lipschitz_estimate",
            self.value,
            Bound::AtLeast(0.0),
            self.per_input.len(),
            Some(self.worst_input),
        );
        if !self.converged {
            r.notes.push("power iteration hit its iteration limit; value is the best estimate".into());
        }
        r
    }
}

const MATRIX_FREE_STEP: f64 = 1e-5;

fn spectral_norm(
    d: &dyn Denoiser,
    x: &Vector,
    start: &Vector,
    opts: &PowerIteration,
) -> Result<(f64, bool)> {
    let dense = match opts.access {
        JacobianAccess::Dense(mode) => Some(d.jacobian(x, mode)?),
        JacobianAccess::MatrixFree => None,
    };
    let jv = |v: &Vector| -> Result<Vector> {
        match &dense {
            Some(j) => Ok(j * v),
            None => {
                let h = MATRIX_FREE_STEP * x.norm().max(1.0);
                Ok((d.apply(&(x + v * h))? - d.apply(&(x - v * h))?) / (2.0 * h))
            }
        }
    };
    let jtw = |w: &Vector| -> Result<Vector> {
        match &dense {
            Some(j) => Ok(j.tr_mul(w)),
            None => d.vjp(x, w),
        }
    };
    let mut v = start.clone();
    let mut estimate = 0.0;
    for _ in 0..opts.iters {
        let w = jv(&v)?;
        let next = w.norm();
        let u = jtw(&w)?;
        let un = u.norm();
        if next == 0.0 || un == 0.0 {
            return Ok((next, true));
        }
        let change = (next - estimate).abs();
        estimate = next;
        if change <= opts.tol * next {
            return Ok((estimate, true));
        }
        v = u / un;
    }
    Ok((estimate, false))
}

/// Power iteration on `J_D(x)ᵀ J_D(x)` at every input; returns the largest
/// spectral norm found. A run that exhausts `iters` keeps its best estimate
/// and clears `converged`.
pub fn estimate_lipschitz(
    d: &(dyn Denoiser + Sync),
    inputs: &[Vector],
    opts: &PowerIteration,
) -> Result<LipschitzEstimate> {
    if inputs.is_empty() {
        return Err(Error::Invalid("Lipschitz estimate needs at least one input".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let start = Vector::from_fn(d.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let start = start.normalize();
    let runs = inputs
        .par_iter()
        .map(|x| spectral_norm(d, x, &start, opts))
        .collect::<Result<Vec<_>>>()?;
    let (value, worst) = largest(runs.iter().map(|r| r.0));
    Ok(LipschitzEstimate {
        value,
        converged: runs.iter().all(|r| r.1),
        worst_input: worst.expect("non-empty"),
        per_input: runs.into_iter().map(|r| r.0).collect(),
    })
}

/// Largest violation of `‖D(x) − D(y)‖ ≤ (L̂ + 1e−6)‖x − y‖` over random
/// pairs; passes when no pair violates it.
pub fn check_lipschitz_bound(
    d: &(dyn Denoiser + Sync),
    l_hat: f64,
    spec: &SampleSpec,
) -> Result<VerificationReport> {
    let xs = spec.draw(d.dim());
    let ys = SampleSpec { seed: spec.seed ^ 0x1ab5, ..*spec }.draw(d.dim());
    let excess = xs
        .par_iter()
        .zip(ys.par_iter())
        .map(|(x, y)| {
            let gap = (x - y).norm();
            Ok((d.apply(x)? - d.apply(y)?).norm() - (l_hat + 1e-6) * gap)
        })
        .collect::<Result<Vec<f64>>>()?;
    let violations = excess.iter().filter(|e| **e > 0.0).count();
    let (m, w) = largest(excess.into_iter());
    let mut r = VerificationReport::new(
        "lipschitz_lower_bound",
        if spec.count == 0 { f64::NEG_INFINITY } else { m },
        Bound::AtMost(0.0),
        spec.count,
        w,
    );
    r.notes.push(format!("{violations} violating pairs"));
    Ok(r)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BetaMargin {
    /// `β = 1/max(L̂, 1 + 1e−6)`.
    Conservative,
    /// `β = 1/max(L̂ − ε̃, 1 + 1e−6)` with `ε̃` in millionths; allows larger σ
    /// at the price of the convergence guarantee.
    Relaxed { shave_micros: u64 },
}

pub fn beta_from_lipschitz(l_hat: f64, margin: BetaMargin) -> Result<f64> {
    if !(l_hat.is_finite() && l_hat >= 0.0) {
        return Err(Error::Invalid(format!("Lipschitz estimate must be finite and ≥ 0, got {l_hat}")));
    }
    let l = match margin {
        BetaMargin::Conservative => l_hat,
        BetaMargin::Relaxed { shave_micros } => l_hat - shave_micros as f64 * 1e-6,
    };
    Ok(1.0 / l.max(1.0 + BETA_EPSILON))
}

/// Tabulated `ψ`, its discrete conjugate `ψ*` and `φ = ψ* − z²/2` for a
/// scalar network, on one grid used for both primal and dual variables.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxOracle1D {
    pub grid_min: f64,
    pub grid_max: f64,
    pub grid: Vec<f64>,
    pub psi: Vec<f64>,
    pub psi_star: Vec<f64>,
    pub phi: Vec<f64>,
}

impl ProxOracle1D {
    pub fn spacing(&self) -> f64 {
        (self.grid_max - self.grid_min) / (self.grid.len() - 1) as f64
    }

    /// `argmin_j φ(z_j) + (x − z_j)²/2` and whether it sits on the grid
    /// boundary.
    pub fn prox(&self, x: f64) -> (f64, bool) {
        let (j, _) = self
            .phi
            .iter()
            .zip(&self.grid)
            .map(|(p, z)| p + 0.5 * (x - z) * (x - z))
            .enumerate()
            .fold((0, f64::INFINITY), |(bj, bv), (j, v)| if v < bv { (j, v) } else { (bj, bv) });
        (self.grid[j], j == 0 || j + 1 == self.grid.len())
    }
}

/// Tabulates `ψ` at `points` equally spaced nodes of `[grid_min, grid_max]`
/// and computes `ψ*(z) = max_x (xz − ψ(x))` by brute force over the same
/// nodes.
pub fn sprox_oracle_build(net: &Network, grid_min: f64, grid_max: f64, points: usize) -> Result<ProxOracle1D> {
    if net.input_dim() != 1 {
        return Err(Error::Invalid(format!(
            "s-Prox oracle needs a scalar network, input width is {}",
            net.input_dim()
        )));
    }
    if points < MIN_ORACLE_POINTS {
        return Err(Error::Invalid(format!(
            "grid too coarse: {points} points, need at least {MIN_ORACLE_POINTS}"
        )));
    }
    if !(grid_min < grid_max) || !grid_min.is_finite() || !grid_max.is_finite() {
        return Err(Error::Invalid("grid bounds must be finite with min < max".into()));
    }
    let h = (grid_max - grid_min) / (points - 1) as f64;
    let grid: Vec<f64> = (0..points).map(|i| grid_min + i as f64 * h).collect();
    let psi = grid
        .iter()
        .map(|&x| potential_eval(net, &Vector::from_element(1, x)))
        .collect::<Result<Vec<f64>>>()?;
    let psi_star: Vec<f64> = grid
        .par_iter()
        .map(|&z| {
            grid.iter()
                .zip(&psi)
                .map(|(x, p)| x * z - p)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let phi = grid.iter().zip(&psi_star).map(|(z, s)| s - 0.5 * z * z).collect();
    Ok(ProxOracle1D {
        grid_min,
        grid_max,
        grid,
        psi,
        psi_star,
        phi,
    })
}

/// Largest `|D(x) − argmin_y φ(y) + (x − y)²/2|` over `test_points`, bounded by
/// twice the grid spacing. A minimiser on the grid boundary makes the report
/// inconclusive: it fails with `measured = +∞`.
pub fn sprox_oracle_check(oracle: &ProxOracle1D, net: &Network, test_points: &[f64]) -> Result<VerificationReport> {
    let tol = 2.0 * oracle.spacing();
    let mut deviations = Vec::with_capacity(test_points.len());
    let mut boundary = Vec::new();
    for (i, &x) in test_points.iter().enumerate() {
        let d = net.apply(&Vector::from_element(1, x))?[0];
        let (y, on_edge) = oracle.prox(x);
        if on_edge {
            boundary.push(i);
        }
        deviations.push((d - y).abs());
    }
    let (m, w) = largest(deviations.into_iter());
    let measured = if boundary.is_empty() {
        if test_points.is_empty() { 0.0 } else { m }
    } else {
        f64::INFINITY
    };
    let mut r = VerificationReport::new("sprox_witness", measured, Bound::AtMost(tol), test_points.len(), w);
    if !boundary.is_empty() {
        r.worst_input = boundary.first().copied();
        r.notes.push(format!(
            "inconclusive: minimiser on the grid boundary for test points {boundary:?}; widen the grid"
        ));
    }
    Ok(r)
}

/// Settings for [`run_suite`].
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteOptions {
    pub jacobian_samples: SampleSpec,
    pub monotonicity_pairs: SampleSpec,
    pub mode: JacobianMode,
    pub power: PowerIteration,
    /// Grid `(min, max, points)` and test points for scalar networks.
    pub sprox: Option<((f64, f64, usize), Vec<f64>)>,
}

impl SuiteOptions {
    pub fn new(seed: u64) -> Self {
        SuiteOptions {
            jacobian_samples: SampleSpec::new(20, seed),
            monotonicity_pairs: SampleSpec::new(1000, seed.wrapping_add(1)),
            mode: JacobianMode::Analytic,
            power: PowerIteration {
                seed,
                ..PowerIteration::default()
            },
            sprox: None,
        }
    }

    pub fn within(mut self, low: f64, high: f64) -> Self {
        self.jacobian_samples = self.jacobian_samples.within(low, high);
        self.monotonicity_pairs = self.monotonicity_pairs.within(low, high);
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub reports: Vec<VerificationReport>,
    pub lipschitz: LipschitzEstimate,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.reports.iter().all(|r| r.passed)
    }

    pub fn to_text(&self) -> String {
        self.reports.iter().map(VerificationReport::to_text).collect::<Vec<_>>().join("\n")
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{REPORT_CSV_HEADER}\n");
        for r in &self.reports {
            out.push_str(&r.to_csv_row());
            out.push('\n');
        }
        out
    }
}

/// Nonnegativity, symmetry, convexity, monotonicity and `L̂_D`, plus the
/// s-Prox witness for scalar networks when a grid is given.
pub fn run_suite(net: &Network, opts: &SuiteOptions) -> Result<SuiteResult> {
    let mut reports = vec![
        check_nonnegativity(net),
        check_jacobian_symmetry(net, &opts.jacobian_samples, opts.mode)?,
        check_convexity(net, &opts.jacobian_samples, opts.mode)?,
        check_monotonicity(net, &opts.monotonicity_pairs)?,
    ];
    let inputs = opts.jacobian_samples.draw(net.input_dim());
    let lipschitz = estimate_lipschitz(net, &inputs, &opts.power)?;
    reports.push(lipschitz.report());
    if net.input_dim() == 1 {
        if let Some(((lo, hi, n), tests)) = &opts.sprox {
            let oracle = sprox_oracle_build(net, *lo, *hi, *n)?;
            reports.push(sprox_oracle_check(&oracle, net, tests)?);
        }
    }
    Ok(SuiteResult { reports, lipschitz })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::ActivationSpec;
    use crate::denoiser::{AffineDenoiser, FnDenoiser};
    use crate::network::{Init, Layer, Skip};
    use crate::training::clamp_negative_weights;
    use crate::Matrix;

    fn srelu(g: f64) -> ActivationSpec {
        ActivationSpec::srelu(g).unwrap()
    }

    fn certified(dims: &[usize], seed: u64) -> Network {
        clamp_negative_weights(Network::random(dims, srelu(0.3), Init::Signed, seed).unwrap())
    }

    fn zero_net(d0: usize) -> Network {
        Network::new(
            vec![
                Layer::new(Matrix::zeros(3, d0), Vector::zeros(3), srelu(0.5)).unwrap(),
                Layer::new(Matrix::zeros(2, 3), Vector::zeros(2), srelu(0.5)).unwrap(),
            ],
            None,
        )
        .unwrap()
    }

    /// One-layer denoiser `Vᵀ σ'(W x + b)` whose decoder `V` differs from `W`.
    fn untied(seed: u64) -> impl Denoiser + Sync {
        let net = Network::random(&[4, 6], srelu(0.5), Init::Signed, seed).unwrap();
        let w = net.layer(1).weight().clone();
        let b = net.layer(1).bias().clone();
        let v = &w + Matrix::from_fn(6, 4, |i, j| 0.05 * ((i * 4 + j) as f64).sin());
        let act = srelu(0.5);
        FnDenoiser::new(4, move |x: &Vector| {
            let gate = (&w * x + &b).map(|z| act.derivative(z).unwrap());
            v.tr_mul(&gate)
        })
    }

    #[test]
    fn certified_nets_pass_every_check() {
        for seed in 0..3 {
            let net = certified(&[5, 8, 6, 3], seed);
            let spec = SampleSpec::new(10, seed);
            assert!(check_nonnegativity(&net).passed);
            assert!(check_jacobian_symmetry(&net, &spec, JacobianMode::Analytic).unwrap().passed);
            assert!(check_jacobian_symmetry(&net, &spec, JacobianMode::FiniteDifference).unwrap().passed);
            assert!(check_convexity(&net, &spec, JacobianMode::Analytic).unwrap().passed);
            assert!(check_monotonicity(&net, &SampleSpec::new(1000, seed)).unwrap().passed);
        }
    }

    #[test]
    fn skip_nets_pass() {
        let net = clamp_negative_weights(
            Network::random(&[4, 6, 6, 5, 3], srelu(0.3), Init::Signed, 7)
                .unwrap()
                .with_skip(Skip { a: 1, b: 3 })
                .unwrap(),
        );
        let spec = SampleSpec::new(10, 1);
        assert!(check_jacobian_symmetry(&net, &spec, JacobianMode::Analytic).unwrap().passed);
        assert!(check_convexity(&net, &spec, JacobianMode::Analytic).unwrap().passed);
        assert!(check_monotonicity(&net, &SampleSpec::new(500, 2)).unwrap().passed);
    }

    #[test]
    fn zero_net_reports() {
        let net = zero_net(3);
        let spec = SampleSpec::new(5, 0);
        let sym = check_jacobian_symmetry(&net, &spec, JacobianMode::Analytic).unwrap();
        assert_eq!(sym.measured, 0.0);
        assert!(sym.passed);
        let conv = check_convexity(&net, &spec, JacobianMode::Analytic).unwrap();
        assert_eq!(conv.measured, 0.0);
        let lip = estimate_lipschitz(&net, &spec.draw(3), &PowerIteration::default()).unwrap();
        assert_eq!(lip.value, 0.0);
        let x = Vector::from_element(3, 0.2);
        assert_eq!(pair_inner(&net, &x, &x).unwrap(), 0.0);
    }

    #[test]
    fn untied_net_fails_symmetry() {
        let d = untied(3);
        let spec = SampleSpec::new(5, 0);
        let r = check_jacobian_symmetry(&d, &spec, JacobianMode::FiniteDifference).unwrap();
        assert!(!r.passed, "{}", r.to_text());
        assert!(check_jacobian_symmetry(&d, &spec, JacobianMode::Analytic).is_err());
    }

    #[test]
    fn negative_weight_is_found() {
        let mut net = certified(&[3, 6, 6, 4], 5);
        net.layer_mut(3).weight_mut()[(0, 0)] = -3.0;
        net.layer_mut(3).bias_mut().fill(1.0);
        let nonneg = check_nonnegativity(&net);
        assert!(!nonneg.passed && nonneg.measured < 0.0);
        let search = search_monotonicity_counterexample(&net, &SampleSpec::new(50, 1), JacobianMode::Analytic).unwrap();
        assert!(!search.passed, "{}", search.to_text());
        let conv = check_convexity(&net, &SampleSpec::new(50, 1), JacobianMode::Analytic).unwrap();
        assert!(!conv.passed);
    }

    #[test]
    fn nonnegativity_threshold_is_exact() {
        let mut net = certified(&[3, 4, 2], 1);
        assert!(check_nonnegativity(&net).measured >= 0.0);
        net.layer_mut(2).weight_mut()[(0, 0)] = -1e-12;
        assert!(!check_nonnegativity(&net).passed);
        let single = Network::random(&[3, 4], srelu(0.5), Init::Signed, 0).unwrap();
        assert!(check_nonnegativity(&single).passed);
        let fresh = Network::random(&[6, 8, 8], srelu(0.5), Init::Signed, 9).unwrap();
        assert!(!check_nonnegativity(&fresh).passed);
    }

    #[test]
    fn lipschitz_of_quadratic_region_net() {
        let gamma = 0.25;
        let net = Network::new(
            vec![Layer::new(Matrix::identity(3, 3), Vector::zeros(3), srelu(gamma)).unwrap()],
            None,
        )
        .unwrap();
        let inputs = SampleSpec::new(5, 1).within(-0.2, 0.2).draw(3);
        let est = estimate_lipschitz(&net, &inputs, &PowerIteration::default()).unwrap();
        assert!((est.value - 1.0 / (2.0 * gamma)).abs() < 1e-6);
        assert!(est.converged);
    }

    #[test]
    fn lipschitz_matches_svd() {
        let net = certified(&[6, 9, 5], 12);
        let inputs = SampleSpec::new(6, 3).draw(6);
        let svd_max = inputs
            .iter()
            .map(|x| {
                let j = crate::denoiser::denoiser_jacobian(&net, x, JacobianMode::Analytic).unwrap();
                j.singular_values().max()
            })
            .fold(0.0, f64::max);
        let opts = PowerIteration {
            iters: 2000,
            tol: 1e-13,
            ..PowerIteration::default()
        };
        let dense = estimate_lipschitz(&net, &inputs, &opts).unwrap();
        assert!((dense.value - svd_max).abs() < 1e-6, "{} vs {svd_max}", dense.value);
        let free = estimate_lipschitz(
            &net,
            &inputs,
            &PowerIteration {
                access: JacobianAccess::MatrixFree,
                ..opts
            },
        )
        .unwrap();
        assert!((free.value - svd_max).abs() < 1e-6, "{} vs {svd_max}", free.value);
    }

    #[test]
    fn lipschitz_flags_non_convergence() {
        let net = certified(&[6, 9, 5], 12);
        let inputs = SampleSpec::new(2, 3).draw(6);
        let est = estimate_lipschitz(
            &net,
            &inputs,
            &PowerIteration {
                iters: 1,
                tol: 0.0,
                ..PowerIteration::default()
            },
        )
        .unwrap();
        assert!(!est.converged);
        assert!(est.value > 0.0);
        assert!(!est.report().notes.is_empty());
        assert!(estimate_lipschitz(&net, &[], &PowerIteration::default()).is_err());
    }

    #[test]
    fn affine_lipschitz_and_bound() {
        let m = Matrix::from_fn(5, 5, |i, j| ((i + 2 * j) as f64).cos());
        let q = &m * m.transpose();
        let d = AffineDenoiser {
            q: q.clone(),
            c: Vector::from_element(5, 0.1),
        };
        let est = estimate_lipschitz(&d, &[Vector::zeros(5)], &PowerIteration::default()).unwrap();
        let svd = q.singular_values().max();
        assert!((est.value - svd).abs() <= 1e-6 * svd);
        assert!(check_lipschitz_bound(&d, est.value, &SampleSpec::new(2000, 4)).unwrap().passed);
        assert!(!check_lipschitz_bound(&d, 0.5 * est.value, &SampleSpec::new(2000, 4)).unwrap().passed);
    }

    #[test]
    fn beta_mapping() {
        assert!((beta_from_lipschitz(2.28, BetaMargin::Conservative).unwrap() - 1.0 / 2.28).abs() < 1e-15);
        assert!((beta_from_lipschitz(0.5, BetaMargin::Conservative).unwrap() - 1.0 / (1.0 + 1e-6)).abs() < 1e-15);
        let relaxed = beta_from_lipschitz(2.28, BetaMargin::Relaxed { shave_micros: 500_000 }).unwrap();
        assert!((relaxed - 1.0 / 1.78).abs() < 1e-12);
        assert!(beta_from_lipschitz(f64::NAN, BetaMargin::Conservative).is_err());
    }

    /// `D(x) = x` on `[0, 10]`: `σ'` stays in its quadratic piece there and
    /// `ψ(x) = x²/2` exactly.
    fn identity_prox_net() -> Network {
        let layer = Layer::new(
            Matrix::from_element(1, 1, 10.0),
            Vector::from_element(1, -50.0),
            srelu(50.0),
        )
        .unwrap();
        Network::new(vec![layer], None).unwrap()
    }

    #[test]
    fn identity_prox_surrogate() {
        let net = identity_prox_net();
        let x = Vector::from_element(1, 3.7);
        assert!((net.apply(&x).unwrap()[0] - 3.7).abs() < 1e-12);
        let oracle = sprox_oracle_build(&net, 0.0, 10.0, 1001).unwrap();
        let h = oracle.spacing();
        assert!(oracle.phi.iter().all(|p| p.abs() <= 2.0 * h));
        let tests: Vec<f64> = (1..20).map(|i| i as f64 * 0.5).collect();
        let r = sprox_oracle_check(&oracle, &net, &tests).unwrap();
        assert!(r.passed, "{}", r.to_text());
    }

    #[test]
    fn zero_net_conjugate() {
        let mut net = zero_net(1);
        net.layer_mut(1).bias_mut().fill(0.2);
        let oracle = sprox_oracle_build(&net, -1.0, 1.0, 201).unwrap();
        let psi0 = potential_eval(&net, &Vector::zeros(1)).unwrap();
        let mid = 100;
        assert_eq!(oracle.grid[mid], 0.0);
        assert!((oracle.phi[mid] + psi0).abs() < 1e-12);
        // ψ is constant, so ψ*(z) = |z| − ψ(0) on [−1, 1].
        for (z, s) in oracle.grid.iter().zip(&oracle.psi_star) {
            assert!((s - (z.abs() - psi0)).abs() < 1e-12);
        }
        assert!(sprox_oracle_build(&net, -1.0, 1.0, 99).is_err());
        assert!(sprox_oracle_build(&zero_net(2), -1.0, 1.0, 200).is_err());
    }

    fn scalar_net() -> Network {
        let l1 = Layer::new(
            Matrix::from_column_slice(4, 1, &[0.9, -0.7, 0.5, 1.1]),
            Vector::from_column_slice(&[0.1, -0.2, 0.3, 0.0]),
            srelu(0.4),
        )
        .unwrap();
        let l2 = Layer::new(
            Matrix::from_row_slice(2, 4, &[0.4, 0.3, 0.2, 0.1, 0.1, 0.5, 0.0, 0.3]),
            Vector::from_column_slice(&[0.0, 0.1]),
            srelu(0.4),
        )
        .unwrap();
        clamp_negative_weights(Network::new(vec![l1, l2], None).unwrap())
    }

    #[test]
    fn sprox_witness_for_scalar_net() {
        let net = scalar_net();
        let oracle = sprox_oracle_build(&net, -6.0, 6.0, 4001).unwrap();
        let tests: Vec<f64> = (0..20).map(|i| -2.0 + 4.0 * i as f64 / 19.0).collect();
        let coarse = sprox_oracle_check(&oracle, &net, &tests).unwrap();
        assert!(coarse.passed, "{}", coarse.to_text());
        let fine = sprox_oracle_check(&sprox_oracle_build(&net, -6.0, 6.0, 8001).unwrap(), &net, &tests).unwrap();
        assert!(fine.passed);
        assert!(fine.measured <= coarse.measured);

        let refined = sprox_oracle_build(&net, -6.0, 6.0, 8001).unwrap();
        for (i, p) in oracle.phi.iter().enumerate() {
            if oracle.grid[i].abs() < 1.0 {
                assert!((p - refined.phi[2 * i]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn sprox_inconclusive_on_narrow_grid() {
        let net = identity_prox_net();
        let oracle = sprox_oracle_build(&net, 0.0, 2.0, 201).unwrap();
        let r = sprox_oracle_check(&oracle, &net, &[5.0]).unwrap();
        assert!(!r.passed);
        assert_eq!(r.measured, f64::INFINITY);
        assert!(r.notes[0].starts_with("inconclusive"));
    }

    #[test]
    fn suite_and_report_formats() {
        let net = certified(&[4, 6, 3], 2);
        let suite = run_suite(&net, &SuiteOptions::new(1)).unwrap();
        assert!(suite.passed(), "{}", suite.to_text());
        assert!(suite.to_text().contains("[jacobian_symmetry]\nstatus      = pass"));
        let csv = suite.to_csv();
        assert!(csv.starts_with(REPORT_CSV_HEADER));
        assert_eq!(csv.lines().count(), 6);

        let mut opts = SuiteOptions::new(1);
        opts.sprox = Some(((-6.0, 6.0, 2001), vec![0.0, 0.5]));
        let scalar = run_suite(&scalar_net(), &opts).unwrap();
        assert!(scalar.reports.iter().any(|r| r.property == "sprox_witness"));
    }
}
