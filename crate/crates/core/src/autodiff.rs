//! Vector-level reverse-mode tape.
//!
//! Training differentiates a loss through `D`, and `D` already contains the
//! transposed weights and `σ'`. Rather than hand-deriving that second-order
//! backward pass, the denoiser's computation is recorded here node by node
//! and adjoints are replayed in reverse. Weights and biases are referenced
//! by layer, so `W_n` used in the encoder and `W_nᵀ` used in the decoder
//! both accumulate into the same gradient.

use crate::network::Network;
use crate::{Matrix, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    /// `W_n x + b_n`
    Affine { layer: usize, x: NodeId },
    /// `W_nᵀ x`
    TransposeApply { layer: usize, x: NodeId },
    /// `σ_n(x)`
    Activate { layer: usize, x: NodeId },
    /// `σ'_n(x)`
    Slope { layer: usize, x: NodeId },
    Add(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
}

struct Node {
    op: Op,
    value: Vector,
}

/// Gradients with respect to every weight and bias of a network, laid out
/// per layer (index 0 is layer 1).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vector>,
}

impl ParamGrads {
    pub fn zeros(net: &Network) -> Self {
        ParamGrads {
            weights: net
                .layers()
                .iter()
                .map(|l| Matrix::zeros(l.output_dim(), l.input_dim()))
                .collect(),
            biases: net.layers().iter().map(|l| Vector::zeros(l.output_dim())).collect(),
        }
    }

    /// Same order as [`Network::params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for i in 0..w.nrows() {
                for j in 0..w.ncols() {
                    out.push(w[(i, j)]);
                }
            }
            out.extend(b.iter());
        }
        out
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }
}

pub struct Tape<'n> {
    net: &'n Network,
    nodes: Vec<Node>,
}

/// Result of a backward sweep.
pub struct Adjoints {
    nodes: Vec<Option<Vector>>,
    pub params: Option<ParamGrads>,
}

impl Adjoints {
    /// Adjoint of `node`, zero-length if nothing flowed into it.
    pub fn of(&self, node: NodeId) -> Option<&Vector> {
        self.nodes[node.0].as_ref()
    }
}

impl<'n> Tape<'n> {
    pub fn new(net: &'n Network) -> Self {
        Tape {
            net,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Vector {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Vector) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Vector) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Layer numbers are 1-based, as on [`Network::layer`].
    pub fn affine(&mut self, layer: usize, x: NodeId) -> NodeId {
        let v = self.net.layer(layer).affine(self.value(x));
        self.push(Op::Affine { layer, x }, v)
    }

    pub fn transpose_apply(&mut self, layer: usize, x: NodeId) -> NodeId {
        let v = self.net.layer(layer).weight().tr_mul(self.value(x));
        self.push(Op::TransposeApply { layer, x }, v)
    }

    pub fn activate(&mut self, layer: usize, x: NodeId) -> NodeId {
        let v = self.net.layer(layer).activate(self.value(x));
        self.push(Op::Activate { layer, x }, v)
    }

    pub fn slope(&mut self, layer: usize, x: NodeId) -> NodeId {
        let v = self.net.layer(layer).slope(self.value(x));
        self.push(Op::Slope { layer, x }, v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), v)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).component_mul(self.value(b));
        self.push(Op::Hadamard(a, b), v)
    }

    /// Records `D(x_0)` for `net` (skip-aware) and returns the output node
    /// and the input leaf.
    pub fn record_denoiser(&mut self, x0: Vector) -> (NodeId, NodeId) {
        let net = self.net;
        let depth = net.depth();
        let skip = net.skip();
        let input = self.leaf(x0);
        let mut current = input;
        let mut outputs = Vec::with_capacity(depth);
        let mut gates = Vec::with_capacity(depth);
        for n in 1..=depth {
            if let Some(s) = skip {
                if n == s.b {
                    current = self.add(outputs[s.a - 1], current);
                }
            }
            let z = self.affine(n, current);
            gates.push(self.slope(n, z));
            // The top layer's activation does not feed D.
            if n < depth {
                current = self.activate(n, z);
                outputs.push(current);
            }
        }
        // After handling layer k, `r` is the gradient with respect to the
        // input of layer k.
        let mut r = self.transpose_apply(depth, gates[depth - 1]);
        let mut pending = None;
        for k in (1..=depth).rev() {
            if k < depth {
                let gated = self.hadamard(gates[k - 1], r);
                r = self.transpose_apply(k, gated);
            }
            if let Some(s) = skip {
                if k == s.b {
                    pending = Some(r);
                }
                if k == s.a + 1 {
                    r = self.add(r, pending.take().expect("b > a + 1"));
                }
            }
        }
        (r, input)
    }

    /// Replays adjoints from `seed` at `output`. Parameter gradients are only
    /// accumulated when `want_params` is set.
    pub fn backward(&self, output: NodeId, seed: Vector, want_params: bool) -> Adjoints {
        let mut adj: Vec<Option<Vector>> = vec![None; self.nodes.len()];
        adj[output.0] = Some(seed);
        let mut params = want_params.then(|| ParamGrads::zeros(self.net));

        fn acc(adj: &mut [Option<Vector>], id: NodeId, v: Vector) {
            match &mut adj[id.0] {
                Some(a) => *a += v,
                slot @ None => *slot = Some(v),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match node.op {
                Op::Leaf => {
                    adj[idx] = Some(g);
                    continue;
                }
                Op::Affine { layer, x } => {
                    let l = self.net.layer(layer);
                    if let Some(p) = params.as_mut() {
                        p.weights[layer - 1].ger(1.0, &g, self.value(x), 1.0);
                        p.biases[layer - 1] += &g;
                    }
                    acc(&mut adj, x, l.weight().tr_mul(&g));
                }
                Op::TransposeApply { layer, x } => {
                    let l = self.net.layer(layer);
                    if let Some(p) = params.as_mut() {
                        p.weights[layer - 1].ger(1.0, self.value(x), &g, 1.0);
                    }
                    acc(&mut adj, x, l.weight() * &g);
                }
                Op::Activate { layer, x } => {
                    let s = self.net.layer(layer).slope(self.value(x));
                    acc(&mut adj, x, s.component_mul(&g));
                }
                Op::Slope { layer, x } => {
                    let c = self.net.layer(layer).curvature(self.value(x));
                    acc(&mut adj, x, c.component_mul(&g));
                }
                Op::Add(a, b) => {
                    acc(&mut adj, a, g.clone());
                    acc(&mut adj, b, g);
                }
                Op::Hadamard(a, b) => {
                    let ga = g.component_mul(self.value(b));
                    let gb = g.component_mul(self.value(a));
                    acc(&mut adj, a, ga);
                    acc(&mut adj, b, gb);
                }
            }
        }
        Adjoints { nodes: adj, params }
    }
}

/// `J_D(x_0)ᵀ u` by one reverse sweep.
pub fn denoiser_vjp(net: &Network, x0: &Vector, u: &Vector) -> Vector {
    let mut tape = Tape::new(net);
    let (out, input) = tape.record_denoiser(x0.clone());
    let adj = tape.backward(out, u.clone(), false);
    adj.of(input)
        .cloned()
        .unwrap_or_else(|| Vector::zeros(x0.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::ActivationSpec;
    use crate::denoiser::{denoiser_jacobian, Denoiser, JacobianMode};
    use crate::network::{Init, Skip};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn x(d: usize, seed: u64) -> Vector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Vector::from_fn(d, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn recorded_output_matches_denoiser() {
        let srelu = ActivationSpec::srelu(0.1).unwrap();
        let plain = Network::random(&[4, 6, 5, 3], srelu, Init::Signed, 1).unwrap();
        let skip = Network::random(&[4, 5, 5, 5, 2], srelu, Init::Signed, 2)
            .unwrap()
            .with_skip(Skip { a: 1, b: 3 })
            .unwrap();
        let skip_late = Network::random(&[4, 5, 5, 5, 5], srelu, Init::Signed, 3)
            .unwrap()
            .with_skip(Skip { a: 2, b: 4 })
            .unwrap();
        for net in [plain, skip, skip_late] {
            let x0 = x(4, 7);
            let mut tape = Tape::new(&net);
            let (out, _) = tape.record_denoiser(x0.clone());
            let want = net.apply(&x0).unwrap();
            assert!((tape.value(out) - want).amax() < 1e-14);
        }
    }

    #[test]
    fn vjp_is_jacobian_transpose() {
        let srelu = ActivationSpec::srelu(0.2).unwrap();
        let net = Network::random(&[5, 7, 4], srelu, Init::Signed, 4).unwrap();
        let x0 = x(5, 1);
        let u = x(5, 2);
        let jac = denoiser_jacobian(&net, &x0, JacobianMode::Analytic).unwrap();
        let want = jac.transpose() * &u;
        assert!((denoiser_vjp(&net, &x0, &u) - want).amax() < 1e-12);
    }
}
