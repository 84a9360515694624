//! Layers and multi-layer evaluation `T_{n:m} = T_n ∘ ⋯ ∘ T_m`.
//!
//! Layer indices in the public API are 1-based, matching the usual
//! `T_1, …, T_N` numbering; `x_0` is the network input.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::activation::ActivationSpec;
use crate::error::{check_dim, Error, Result};
use crate::{Matrix, Vector};

/// One layer `x ↦ σ(W x + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    weight: Matrix,
    bias: Vector,
    activation: ActivationSpec,
    nonneg_required: bool,
    certified: bool,
}

impl Layer {
    pub fn new(weight: Matrix, bias: Vector, activation: ActivationSpec) -> Result<Self> {
        check_dim("layer bias", weight.nrows(), bias.len())?;
        if weight.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Domain {
                context: "non-finite layer parameters",
            });
        }
        Ok(Layer {
            weight,
            bias,
            activation,
            nonneg_required: false,
            certified: false,
        })
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &Vector {
        &self.bias
    }

    pub fn activation(&self) -> ActivationSpec {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    /// True for every layer after the first: its weights must be
    /// nonnegative for the potential to be convex.
    pub fn nonneg_required(&self) -> bool {
        self.nonneg_required
    }

    pub fn is_certified(&self) -> bool {
        self.certified
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// `W x + b`.
    pub fn preactivation(&self, x: &Vector) -> Result<Vector> {
        check_dim("layer input", self.input_dim(), x.len())?;
        Ok(self.affine(x))
    }

    /// `σ(W x + b)`.
    pub fn forward(&self, x: &Vector) -> Result<Vector> {
        let z = self.preactivation(x)?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain {
                context: "non-finite layer preactivation",
            });
        }
        Ok(self.activate(&z))
    }

    pub(crate) fn affine(&self, x: &Vector) -> Vector {
        let mut z = self.bias.clone();
        z.gemv(1.0, &self.weight, x, 1.0);
        z
    }

    pub(crate) fn activate(&self, z: &Vector) -> Vector {
        z.map(|v| self.activation.value(v))
    }

    pub(crate) fn slope(&self, z: &Vector) -> Vector {
        z.map(|v| self.activation.slope(v))
    }

    pub(crate) fn curvature(&self, z: &Vector) -> Vector {
        z.map(|v| self.activation.curvature(v))
    }

    pub fn weight_mut(&mut self) -> &mut Matrix {
        self.certified = false;
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut Vector {
        &mut self.bias
    }

    pub(crate) fn set_certified(&mut self, certified: bool) {
        self.certified = certified;
    }
}

/// Skip connection feeding the output of layer `a` into the input of layer
/// `b`, added to the output of layer `b − 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Skip {
    pub a: usize,
    pub b: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    skip: Option<Skip>,
}

/// Weight initialisation for layers `n ≥ 2`. The first layer is always
/// signed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Init {
    /// Uniform on `[−s, s]`, `s = 1/√fan_in`.
    #[default]
    Signed,
    /// Uniform on `[0, s]`.
    Nonnegative,
}

/// Outputs of a full forward pass, kept for the Jacobian-transpose passes.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Input fed to each layer; with a skip, entry `b − 1` is `x_a + x_{b−1}`.
    pub inputs: Vec<Vector>,
    /// `W_n input_n + b_n` per layer.
    pub preactivations: Vec<Vector>,
    /// `σ_n(preactivation_n)` per layer.
    pub outputs: Vec<Vector>,
}

impl Network {
    pub fn new(mut layers: Vec<Layer>, skip: Option<Skip>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Invalid("network needs at least one layer".into()));
        }
        for (n, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Invalid(format!(
                    "layer {} outputs {} values but layer {} expects {}",
                    n + 1,
                    pair[0].output_dim(),
                    n + 2,
                    pair[1].input_dim()
                )));
            }
        }
        if let Some(Skip { a, b }) = skip {
            let depth = layers.len();
            if a < 1 || b > depth || b < a + 2 {
                return Err(Error::Invalid(format!(
                    "skip ({a}, {b}) needs 1 ≤ a, b ≤ {depth} and b − a ≥ 2"
                )));
            }
            if layers[a - 1].output_dim() != layers[b - 2].output_dim() {
                return Err(Error::Invalid(format!(
                    "skip ({a}, {b}) joins widths {} and {}",
                    layers[a - 1].output_dim(),
                    layers[b - 2].output_dim()
                )));
            }
        }
        for (n, layer) in layers.iter_mut().enumerate() {
            layer.nonneg_required = n >= 1;
        }
        Ok(Network { layers, skip })
    }

    /// Dense network with widths `dims[0] → dims[1] → ⋯`, every layer sharing
    /// `activation`. Biases are uniform on `[−s, s]`.
    pub fn random(
        dims: &[usize],
        activation: ActivationSpec,
        init: Init,
        seed: u64,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Invalid("need at least input and output widths".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (n, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let s = 1.0 / (fan_in as f64).sqrt();
            let low = if n >= 1 && init == Init::Nonnegative { 0.0 } else { -s };
            let weight = Matrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(low..=s));
            let bias = Vector::from_fn(fan_out, |_, _| rng.random_range(-s..=s));
            layers.push(Layer::new(weight, bias, activation)?);
        }
        Network::new(layers, None)
    }

    pub fn with_skip(self, skip: Skip) -> Result<Self> {
        Network::new(self.layers, Some(skip))
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Layer `n`, 1-based.
    pub fn layer(&self, n: usize) -> &Layer {
        &self.layers[n - 1]
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn skip(&self) -> Option<Skip> {
        self.skip
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// Every nonneg-required layer carries the certified mark.
    pub fn is_certified(&self) -> bool {
        self.layers
            .iter()
            .filter(|l| l.nonneg_required)
            .all(|l| l.certified)
    }

    /// Widths `d_0, d_1, …, d_N`.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::output_dim))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    /// All parameters, per layer: weight entries row-major, then the bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            let w = &layer.weight;
            for i in 0..w.nrows() {
                for j in 0..w.ncols() {
                    out.push(w[(i, j)]);
                }
            }
            out.extend(layer.bias.iter());
        }
        out
    }

    /// Inverse of [`Network::params`]. Clears certification marks.
    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_dim("parameter vector", self.num_params(), params.len())?;
        let mut it = params.iter().copied();
        for layer in &mut self.layers {
            let (rows, cols) = layer.weight.shape();
            for i in 0..rows {
                for j in 0..cols {
                    layer.weight[(i, j)] = it.next().unwrap();
                }
            }
            for v in layer.bias.iter_mut() {
                *v = it.next().unwrap();
            }
            layer.certified = false;
        }
        Ok(())
    }

    /// Mutable access to layer `n` (1-based). Touching the weights drops the
    /// certification mark of that layer.
    pub fn layer_mut(&mut self, n: usize) -> &mut Layer {
        &mut self.layers[n - 1]
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// `T_{n:m}(x)`, 1-based and inclusive. Over the full range a skip
    /// connection is honoured; a partial range that contains the whole skip
    /// is rejected.
    pub fn forward_range(&self, m: usize, n: usize, x: &Vector) -> Result<Vector> {
        self.forward_range_impl(m, n, x, false).map(|(v, _)| v)
    }

    /// As [`Network::forward_range`], also returning `x_m, …, x_n`.
    pub fn forward_range_recorded(
        &self,
        m: usize,
        n: usize,
        x: &Vector,
    ) -> Result<(Vector, Vec<Vector>)> {
        self.forward_range_impl(m, n, x, true)
            .map(|(v, rec)| (v, rec.unwrap_or_default()))
    }

    /// `T(x)` over all layers (with the skip, if any).
    pub fn forward(&self, x: &Vector) -> Result<Vector> {
        self.forward_range(1, self.depth(), x)
    }

    fn forward_range_impl(
        &self,
        m: usize,
        n: usize,
        x: &Vector,
        record: bool,
    ) -> Result<(Vector, Option<Vec<Vector>>)> {
        let depth = self.depth();
        if m < 1 || m > n || n > depth {
            return Err(Error::Invalid(format!(
                "layer range {m}..={n} outside 1..={depth}"
            )));
        }
        check_dim("network input", self.layer(m).input_dim(), x.len())?;
        let skip = match self.skip {
            Some(s) if m <= s.a && n >= s.b => {
                if m != 1 || n != depth {
                    return Err(Error::Unsupported(
                        "partial evaluation across a skip connection",
                    ));
                }
                Some(s)
            }
            _ => None,
        };
        let mut recorded = record.then(Vec::new);
        let mut current = x.clone();
        let mut skip_source = None;
        for k in m..=n {
            let mut out = self.layer(k).forward(&current)?;
            if let Some(s) = skip {
                if k == s.a {
                    skip_source = Some(out.clone());
                }
                if k == s.b - 1 {
                    out += skip_source.as_ref().expect("a < b − 1");
                }
            }
            if let Some(rec) = recorded.as_mut() {
                rec.push(out.clone());
            }
            current = out;
        }
        Ok((current, recorded))
    }

    /// Full pass keeping every layer input and preactivation.
    pub fn trace(&self, x0: &Vector) -> Result<ForwardTrace> {
        check_dim("network input", self.input_dim(), x0.len())?;
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain {
                context: "non-finite network input",
            });
        }
        let depth = self.depth();
        let mut inputs = Vec::with_capacity(depth);
        let mut preactivations = Vec::with_capacity(depth);
        let mut outputs: Vec<Vector> = Vec::with_capacity(depth);
        let mut current = x0.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let n = k + 1;
            if let Some(s) = self.skip {
                if n == s.b {
                    current += &outputs[s.a - 1];
                }
            }
            let z = layer.affine(&current);
            let out = layer.activate(&z);
            inputs.push(current);
            preactivations.push(z);
            current = out.clone();
            outputs.push(out);
        }
        Ok(ForwardTrace {
            inputs,
            preactivations,
            outputs,
        })
    }
}

/// Free-function form of `T_{n:m}(x)` returning, when `record` is set, the
/// intermediates `x_m, …, x_n`.
pub fn network_forward(
    net: &Network,
    m: usize,
    n: usize,
    x: &Vector,
    record: bool,
) -> Result<(Vector, Option<Vec<Vector>>)> {
    net.forward_range_impl(m, n, x, record)
}
