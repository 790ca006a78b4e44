use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Fully connected layer `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Dense {
    fn zeros_like(&self) -> Self {
        Self {
            weight: DMatrix::zeros(self.weight.nrows(), self.weight.ncols()),
            bias: DVector::zeros(self.bias.len()),
        }
    }
}

/// Multilayer perceptron with tanh hidden layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftingNetwork {
    pub layers: Vec<Dense>,
}

/// Activations kept from a batched forward pass for the backward pass.
pub(crate) struct ForwardCache {
    /// `acts[0]` is the network input, `acts[l]` the output of hidden layer `l`.
    acts: Vec<DMatrix<f64>>,
}

impl LiftingNetwork {
    /// Weights and biases uniform in `±1/√fan_in`.
    pub fn new<R: Rng>(input: usize, hidden: &[usize], output: usize, rng: &mut R) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        let layers = widths
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                Dense {
                    weight: DMatrix::from_fn(w[1], w[0], |_, _| rng.gen_range(-bound..bound)),
                    bias: DVector::from_fn(w[1], |_, _| rng.gen_range(-bound..bound)),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.nrows())
    }

    /// Layer widths including input and output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(|l| l.weight.nrows()));
        w
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn forward(&self, input: &DVector<f64>) -> DVector<f64> {
        let last = self.layers.len() - 1;
        let mut h = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = &layer.weight * h + &layer.bias;
            if i < last {
                h.apply(|v| *v = v.tanh());
            }
        }
        h
    }

    /// Jacobian of the output with respect to the input.
    pub fn input_jacobian(&self, input: &DVector<f64>) -> DMatrix<f64> {
        let last = self.layers.len() - 1;
        let mut h = input.clone();
        let mut jac = DMatrix::identity(input.len(), input.len());
        for (i, layer) in self.layers.iter().enumerate() {
            h = &layer.weight * h + &layer.bias;
            jac = &layer.weight * jac;
            if i < last {
                h.apply(|v| *v = v.tanh());
                for (r, hv) in h.iter().enumerate() {
                    let slope = 1.0 - hv * hv;
                    jac.row_mut(r).scale_mut(slope);
                }
            }
        }
        jac
    }

    /// Forward pass over the columns of `inputs`.
    pub(crate) fn forward_batch(&self, inputs: DMatrix<f64>) -> (DMatrix<f64>, ForwardCache) {
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut h = inputs;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut next = &layer.weight * &h;
            for mut col in next.column_iter_mut() {
                col += &layer.bias;
            }
            if i < last {
                next.apply(|v| *v = v.tanh());
            }
            acts.push(h);
            h = next;
        }
        (h, ForwardCache { acts })
    }

    /// Reverse pass: parameter gradients given `dL/d(output)` for each column.
    pub(crate) fn backward_batch(
        &self,
        cache: &ForwardCache,
        grad_out: DMatrix<f64>,
    ) -> Vec<Dense> {
        let mut grads: Vec<Dense> = self.layers.iter().map(Dense::zeros_like).collect();
        let mut delta = grad_out;
        for l in (0..self.layers.len()).rev() {
            let input = &cache.acts[l];
            grads[l].weight = &delta * input.transpose();
            grads[l].bias = delta.column_sum();
            if l > 0 {
                let mut back = self.layers[l].weight.transpose() * &delta;
                back.zip_apply(input, |d, h| *d *= 1.0 - h * h);
                delta = back;
            }
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn batch_forward_matches_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = LiftingNetwork::new(3, &[8, 8], 4, &mut rng);
        let x = DMatrix::from_fn(3, 5, |_, _| rng.gen_range(-1.0..1.0));
        let (out, _) = net.forward_batch(x.clone());
        for c in 0..5 {
            let single = net.forward(&x.column(c).into_owned());
            assert!((out.column(c) - single).amax() < 1e-14);
        }
    }

    #[test]
    fn input_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = LiftingNetwork::new(3, &[6], 2, &mut rng);
        let x = DVector::from_vec(vec![0.2, -0.4, 0.9]);
        let jac = net.input_jacobian(&x);
        let h = 1e-6;
        for j in 0..3 {
            let mut xp = x.clone();
            xp[j] += h;
            let mut xm = x.clone();
            xm[j] -= h;
            let fd = (net.forward(&xp) - net.forward(&xm)) / (2.0 * h);
            for r in 0..2 {
                assert!((jac[(r, j)] - fd[r]).abs() < 1e-8);
            }
        }
    }
}
