use crate::tensor::{Float, Tensor};

use super::{ModelError, Result};

/// Encoder output as plain tensors: background part and object part.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode<T> {
    pub background: Tensor<T>,
    pub object: Tensor<T>,
}

impl<T: Float> LatentCode<T> {
    pub fn batch(&self) -> usize {
        self.background.shape()[0]
    }

    /// Same background, object part replaced by zeros.
    pub fn without_object(&self) -> Self {
        Self {
            background: self.background.clone(),
            object: Tensor::zeros(self.object.shape()),
        }
    }

    pub fn select(&self, index: usize) -> Result<Self> {
        let one = |t: &Tensor<T>| -> Result<Tensor<T>> {
            let mut shape = t.shape().to_vec();
            shape[0] = 1;
            Ok(t.select(index)?.reshape(&shape)?)
        };
        Ok(Self {
            background: one(&self.background)?,
            object: one(&self.object)?,
        })
    }

    /// Object part of sample `index`, flattened.
    pub fn object_vector(&self, index: usize, source_id: impl Into<String>) -> Result<ObjectVector> {
        let o = self.object.select(index)?;
        Ok(ObjectVector::new(o.to_f64_vec(), source_id))
    }

    /// Overwrites the object part of sample `index`.
    pub fn set_object(&mut self, index: usize, v: &ObjectVector) -> Result<()> {
        let per: usize = self.object.shape()[1..].iter().product();
        if v.len() != per {
            return Err(ModelError::LengthMismatch(per, v.len()));
        }
        if index >= self.batch() {
            return Err(ModelError::InputShape {
                expected: format!("sample index below {}", self.batch()),
                got: vec![index],
            });
        }
        let dst = &mut self.object.data_mut()[index * per..(index + 1) * per];
        for (d, s) in dst.iter_mut().zip(&v.values) {
            *d = T::of(*s);
        }
        Ok(())
    }
}

/// A flattened object code, the unit of object arithmetic.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectVector {
    pub values: Vec<f64>,
    pub source_id: String,
}

impl ObjectVector {
    pub fn new(values: Vec<f64>, source_id: impl Into<String>) -> Self {
        Self {
            values,
            source_id: source_id.into(),
        }
    }

    /// The "no object" code.
    pub fn zeros(len: usize) -> Self {
        Self::new(vec![0.0; len], "zero")
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&self, t: f64) -> Self {
        // Zero scaling gives +0.0 everywhere so it matches an all-zero code bit for bit.
        Self::new(
            self.values.iter().map(|v| if t == 0.0 { 0.0 } else { t * v }).collect(),
            format!("{}*{t}", self.source_id),
        )
    }

    pub fn invert(&self) -> Self {
        Self::new(
            self.values.iter().map(|v| -v).collect(),
            format!("-{}", self.source_id),
        )
    }

    /// `(1-t)*a + t*b`. Exact at both endpoints.
    pub fn interpolate(a: &Self, b: &Self, t: f64) -> Result<Self> {
        if a.len() != b.len() {
            return Err(ModelError::LengthMismatch(a.len(), b.len()));
        }
        let values = a
            .values
            .iter()
            .zip(&b.values)
            .map(|(&x, &y)| {
                if t == 0.0 {
                    x
                } else if t == 1.0 {
                    y
                } else {
                    (1.0 - t) * x + t * y
                }
            })
            .collect();
        Ok(Self::new(values, format!("lerp({},{},{t})", a.source_id, b.source_id)))
    }

    /// Weighted sum; weights need not sum to one.
    pub fn combine(items: &[(&Self, f64)]) -> Result<Self> {
        let len = items.first().map_or(0, |(v, _)| v.len());
        let mut out = vec![0.0; len];
        for (v, w) in items {
            if v.len() != len {
                return Err(ModelError::LengthMismatch(len, v.len()));
            }
            for (o, x) in out.iter_mut().zip(&v.values) {
                *o += w * x;
            }
        }
        Ok(Self::new(out, "combination"))
    }
}
