//! Plain dense f64 tensors used for persistent state (network weights,
//! datasets). Graph-carried values live in [`crate::autodiff`] nodes.

/// Row-major dense array with an explicit shape. `shape = []` is a scalar
/// holding exactly one value.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Self {
        assert_eq!(
            numel(&shape),
            values.len(),
            "tensor shape {:?} does not match value count {}",
            shape,
            values.len()
        );
        Tensor { shape, values }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            values: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            values: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// Element count of a shape; the empty shape is a scalar (one element).
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn format_shape(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", dims.join("x"))
}
