//! Flat parameter storage with named, shaped views.

use serde::{Deserialize, Serialize};

/// Location of one tensor inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRef {
    pub offset: usize,
    pub len: usize,
}

impl ParamRef {
    pub fn slice<'a>(&self, v: &'a [f64]) -> &'a [f64] {
        &v[self.offset..self.offset + self.len]
    }

    pub fn slice_mut<'a>(&self, v: &'a mut [f64]) -> &'a mut [f64] {
        &mut v[self.offset..self.offset + self.len]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Builder that hands out consecutive ranges of one flat vector.
#[derive(Debug, Default, Clone)]
pub struct Layout {
    pub specs: Vec<TensorSpec>,
    pub total: usize,
}

impl Layout {
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamRef {
        let spec = TensorSpec {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.total,
        };
        let r = ParamRef {
            offset: self.total,
            len: spec.len(),
        };
        self.total += r.len;
        self.specs.push(spec);
        r
    }

    pub fn get(&self, name: &str) -> Option<&TensorSpec> {
        self.specs.iter().find(|s| s.name == name)
    }
}

/// Global L2 norm of a gradient vector.
pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
