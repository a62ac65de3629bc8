use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Real, Result, Tape, Tensor, Var};

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

impl Param {
    /// Uniform in `±sqrt(1/fan_in)`.
    pub fn uniform(name: &str, shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (1.0 / fan_in.max(1) as Real).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Self::new(name, Tensor::param(shape, data).expect("shape and data agree"))
    }

    pub fn zeros(name: &str, shape: Vec<usize>) -> Self {
        let mut t = Tensor::zeros(shape);
        t.set_requires_grad(true);
        Self::new(name, t)
    }

    pub fn new(name: &str, value: Tensor) -> Self {
        Self { name: name.to_string(), value }
    }
}

/// Place parameters on a tape, as variables when `trainable`, else constants.
pub fn bind(tape: &mut Tape, params: &[Param], trainable: bool) -> Result<Vec<Var>> {
    params
        .iter()
        .map(|p| {
            let shape = p.value.shape().to_vec();
            let data = p.value.data().to_vec();
            if trainable {
                tape.variable(shape, data)
            } else {
                tape.constant(shape, data)
            }
        })
        .collect()
}
