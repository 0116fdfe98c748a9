use super::{NdError, NdResult};

/// A dense row-major f64 tensor. Immutable once constructed; every shape has
/// strictly positive dimensions and every entry is finite.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, validating shape/data agreement and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> NdResult<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(NdError::Dimension {
                op: "Tensor::new",
                detail: format!("shape {shape:?} must be non-empty with positive dims"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NdError::Dimension {
                op: "Tensor::new",
                detail: format!("shape {shape:?} implies {numel} entries, got {}", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(NdError::NonFinite("Tensor::new"));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: f64) -> NdResult<Self> {
        Self::new(vec![1], vec![v])
    }

    pub fn vector(data: Vec<f64>) -> NdResult<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> NdResult<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> NdResult<Self> {
        let numel: usize = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; numel])
    }

    pub fn ones(shape: &[usize]) -> NdResult<Self> {
        let numel: usize = shape.iter().product();
        Self::new(shape.to_vec(), vec![1.0; numel])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// True for shape `[1]`.
    pub fn is_scalar(&self) -> bool {
        self.shape == [1]
    }

    /// The single entry of a `[1]` tensor.
    pub fn scalar_value(&self) -> NdResult<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(NdError::Dimension {
                op: "scalar_value",
                detail: format!("shape {:?} is not [1]", self.shape),
            })
        }
    }

    /// Row count of a rank-2 tensor.
    pub fn rows(&self) -> NdResult<usize> {
        self.require_rank2("rows").map(|(r, _)| r)
    }

    /// Column count of a rank-2 tensor.
    pub fn cols(&self) -> NdResult<usize> {
        self.require_rank2("cols").map(|(_, c)| c)
    }

    pub(crate) fn require_rank2(&self, op: &'static str) -> NdResult<(usize, usize)> {
        if self.shape.len() == 2 {
            Ok((self.shape[0], self.shape[1]))
        } else {
            Err(NdError::Dimension {
                op,
                detail: format!("expected rank-2 tensor, got shape {:?}", self.shape),
            })
        }
    }

    /// Row `i` of a rank-2 tensor as a slice.
    pub fn row(&self, i: usize) -> NdResult<&[f64]> {
        let (r, c) = self.require_rank2("row")?;
        if i >= r {
            return Err(NdError::Dimension {
                op: "row",
                detail: format!("row {i} out of {r}"),
            });
        }
        Ok(&self.data[i * c..(i + 1) * c])
    }

    /// Elementwise map into a new tensor. The result must stay finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> NdResult<Self> {
        Self::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combination of two equal-shape tensors.
    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> NdResult<Self> {
        if self.shape != other.shape {
            return Err(NdError::Dimension {
                op: "zip_map",
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::new(self.shape.clone(), data)
    }

    /// Euclidean norm of all entries.
    pub fn norm2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest absolute difference against an equal-shape tensor.
    pub fn max_abs_diff(&self, other: &Self) -> NdResult<f64> {
        if self.shape != other.shape {
            return Err(NdError::Dimension {
                op: "max_abs_diff",
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}
