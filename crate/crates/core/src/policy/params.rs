//! Flat parameter storage with named tensor slots.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::Arc;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar type the network runs in: f32 for training, f64 for gradient checks.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
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

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    tensors: Vec<TensorSpec>,
    len: usize,
}

impl Layout {
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize]) -> TensorId {
        let spec = TensorSpec {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.len,
        };
        self.len += spec.len();
        self.tensors.push(spec);
        TensorId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn spec(&self, id: TensorId) -> &TensorSpec {
        &self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn find(&self, name: &str) -> Option<TensorId> {
        self.tensors.iter().position(|t| t.name == name).map(TensorId)
    }

    pub fn ids(&self) -> impl Iterator<Item = TensorId> {
        (0..self.tensors.len()).map(TensorId)
    }

    fn range(&self, id: TensorId) -> std::ops::Range<usize> {
        let s = &self.tensors[id.0];
        s.offset..s.offset + s.len()
    }

    fn dims2(&self, id: TensorId) -> (usize, usize) {
        match self.tensors[id.0].shape.as_slice() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            other => panic!("tensor {} has shape {other:?}", self.tensors[id.0].name),
        }
    }
}

/// A flat buffer laid out by a shared [`Layout`]. Used both for parameters
/// and for their gradients.
#[derive(Clone, Debug)]
pub struct FlatTensors<F> {
    layout: Arc<Layout>,
    data: Vec<F>,
}

impl<F: Real> FlatTensors<F> {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let data = vec![F::zero(); layout.len()];
        Self { layout, data }
    }

    pub fn from_vec(layout: Arc<Layout>, data: Vec<F>) -> Result<Self> {
        if data.len() != layout.len() {
            return Err(Error::Dimension(format!(
                "expected {} values for layout, got {}",
                layout.len(),
                data.len()
            )));
        }
        Ok(Self { layout, data })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn slice(&self, id: TensorId) -> &[F] {
        &self.data[self.layout.range(id)]
    }

    pub fn slice_mut(&mut self, id: TensorId) -> &mut [F] {
        let r = self.layout.range(id);
        &mut self.data[r]
    }

    pub fn view1(&self, id: TensorId) -> ArrayView1<'_, F> {
        ArrayView1::from(self.slice(id))
    }

    pub fn view1_mut(&mut self, id: TensorId) -> ArrayViewMut1<'_, F> {
        ArrayViewMut1::from(self.slice_mut(id))
    }

    pub fn view2(&self, id: TensorId) -> ArrayView2<'_, F> {
        let dims = self.layout.dims2(id);
        ArrayView2::from_shape(dims, self.slice(id)).expect("layout shape")
    }

    pub fn view2_mut(&mut self, id: TensorId) -> ArrayViewMut2<'_, F> {
        let dims = self.layout.dims2(id);
        ArrayViewMut2::from_shape(dims, self.slice_mut(id)).expect("layout shape")
    }

    pub fn norm(&self) -> F {
        let mut lanes = [F::zero(); 8];
        let mut chunks = self.data.chunks_exact(8);
        for c in &mut chunks {
            for (l, &x) in lanes.iter_mut().zip(c) {
                *l += x * x;
            }
        }
        let tail = chunks.remainder().iter().map(|&x| x * x).sum::<F>();
        (lanes.iter().copied().sum::<F>() + tail).sqrt()
    }

    pub fn scale(&mut self, s: F) {
        for x in &mut self.data {
            *x *= s;
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<G: Real>(&self) -> FlatTensors<G> {
        FlatTensors {
            layout: self.layout.clone(),
            data: self.data.iter().map(|&x| G::of(x.f64())).collect(),
        }
    }
}

/// Network parameters with a version counter; every mutation bumps the
/// version so that recorded tapes can detect staleness.
#[derive(Clone, Debug)]
pub struct ParamSet<F> {
    values: FlatTensors<F>,
    version: u64,
}

impl<F: Real> ParamSet<F> {
    pub fn new(values: FlatTensors<F>) -> Self {
        Self { values, version: 0 }
    }

    pub fn values(&self) -> &FlatTensors<F> {
        &self.values
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn layout(&self) -> &Arc<Layout> {
        self.values.layout()
    }

    pub fn update<T>(&mut self, f: impl FnOnce(&mut FlatTensors<F>) -> T) -> T {
        self.version += 1;
        f(&mut self.values)
    }

    pub fn view1(&self, id: TensorId) -> ArrayView1<'_, F> {
        self.values.view1(id)
    }

    pub fn view2(&self, id: TensorId) -> ArrayView2<'_, F> {
        self.values.view2(id)
    }
}
