use rand::Rng;

use crate::error::{Error, Result};

/// Dense row-major f64 array. When `requires_grad` is set the tensor carries
/// a same-shape gradient buffer that optimizer steps consume.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// Glorot-uniform init: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
    pub fn glorot<R: Rng>(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-a..a)).collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when interpreted as a matrix; vectors are one row.
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1]
        } else {
            self.shape.first().copied().unwrap_or(0)
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// One learnable parameter. `decay` marks whether it participates in the
/// L2 penalty (weight matrices and kernels do, biases do not).
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub decay: bool,
}

/// Ordered, named parameter set for one model. Order is the manifest order
/// used by checkpoints and the optimizer.
#[derive(Debug, Clone, Default)]
pub struct NamedTensors {
    pub entries: Vec<ParamEntry>,
}

impl NamedTensors {
    pub fn push(&mut self, name: &str, tensor: Tensor, decay: bool) {
        self.entries.push(ParamEntry {
            name: name.to_string(),
            tensor: tensor.with_grad(),
            decay,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|e| e.name == name)
            .map(|e| &mut e.tensor)
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_shape_data_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn with_grad_allocates_matching_buffer() {
        let t = Tensor::zeros(vec![3, 4]).with_grad();
        assert_eq!(t.grad.as_ref().unwrap().len(), t.data.len());
        assert!(t.requires_grad);
    }

    #[test]
    fn glorot_respects_bound() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let t = Tensor::glorot(vec![10, 20], 20, 10, &mut rng);
        let a = (6.0 / 30.0f64).sqrt();
        assert!(t.data.iter().all(|v| v.abs() <= a));
    }
}
