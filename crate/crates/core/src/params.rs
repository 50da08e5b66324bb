//! Named parameter tensors.
//!
//! Parameters are stored as `f64` but every value produced by initialization
//! or by an optimizer step is kept on the `f32` grid, so a 32-bit weight file
//! reproduces them bit for bit.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::ConvShape;
use crate::math::{sqrt, to_f32_grid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamTensor {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Ordered collection of named tensors. Order and names are a pure function
/// of the owning model's configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamSet {
    tensors: Vec<ParamTensor>,
}

impl ParamSet {
    pub fn new(tensors: Vec<ParamTensor>) -> Result<Self> {
        for t in &tensors {
            let expected: usize = t.shape.iter().product();
            if expected != t.data.len() {
                return Err(Error::shape(
                    format!("{} values for {} {:?}", expected, t.name, t.shape),
                    format!("{} values", t.data.len()),
                ));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::arg(format!("tensor {} has non-finite values", t.name)));
            }
        }
        Ok(ParamSet { tensors })
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(ParamTensor::numel).sum()
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: alloc::vec![0.0; t.data.len()],
                })
                .collect(),
        }
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &ParamSet) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// True when names and shapes agree with `other`.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub(crate) fn conv(&self, index: usize) -> (&[f64], &[f64]) {
        (&self.tensors[2 * index].data, &self.tensors[2 * index + 1].data)
    }

    pub(crate) fn conv_mut(&mut self, index: usize) -> (&mut [f64], &mut [f64]) {
        let (w, b) = self.tensors.split_at_mut(2 * index + 1);
        (&mut w[2 * index].data, &mut b[0].data)
    }
}

/// One weight/bias pair in a model layout.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerSpec {
    pub name: String,
    pub weight_shape: Vec<usize>,
    pub fan_in: usize,
    pub out: usize,
}

impl LayerSpec {
    pub fn conv(name: impl Into<String>, s: ConvShape) -> Self {
        LayerSpec {
            name: name.into(),
            weight_shape: alloc::vec![s.kernel, s.kernel, s.in_ch, s.out_ch],
            fan_in: s.fan_in(),
            out: s.out_ch,
        }
    }

    pub fn dense(name: impl Into<String>, input: usize, output: usize) -> Self {
        LayerSpec {
            name: name.into(),
            weight_shape: alloc::vec![input, output],
            fan_in: input,
            out: output,
        }
    }
}

/// Shapes-only parameter set, all zeros.
pub(crate) fn zeros_for(layout: &[LayerSpec]) -> ParamSet {
    let mut tensors = Vec::with_capacity(layout.len() * 2);
    for l in layout {
        let n: usize = l.weight_shape.iter().product();
        tensors.push(ParamTensor {
            name: format!("{}.weight", l.name),
            shape: l.weight_shape.clone(),
            data: alloc::vec![0.0; n],
        });
        tensors.push(ParamTensor {
            name: format!("{}.bias", l.name),
            shape: alloc::vec![l.out],
            data: alloc::vec![0.0; l.out],
        });
    }
    ParamSet { tensors }
}

/// Fan-in scaled uniform initialization: weights ~ U(-b, b) with
/// `b = sqrt(6 / fan_in)`, biases zero.
pub(crate) fn init_for(layout: &[LayerSpec], seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = zeros_for(layout);
    for (i, l) in layout.iter().enumerate() {
        let bound = sqrt(6.0 / l.fan_in as f64);
        for v in set.tensors[2 * i].data.iter_mut() {
            *v = to_f32_grid(rng.random_range(-bound..bound));
        }
    }
    set
}

/// Check that `params` matches `layout` exactly.
pub(crate) fn check_layout(params: &ParamSet, layout: &[LayerSpec]) -> Result<()> {
    let expected = zeros_for(layout);
    if !params.same_layout(&expected) {
        let want: Vec<String> = expected
            .tensors
            .iter()
            .map(|t| format!("{}{:?}", t.name, t.shape))
            .collect();
        let got: Vec<String> = params
            .tensors
            .iter()
            .map(|t| format!("{}{:?}", t.name, t.shape))
            .collect();
        return Err(Error::shape(want.join(","), got.join(",")));
    }
    Ok(())
}
