//! Flat, ordered storage for every learnable tensor of a model.
//!
//! Layers hold [`ParamId`] handles into a [`ParamStore`]. Gradients live in a
//! second store with the same layout (see [`ParamStore::zeros_like`]), which
//! lets the optimizer, clipping and checkpointing treat the model generically.

use std::collections::HashMap;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Ix1, Ix2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Names must be unique; panics otherwise since
    /// duplicate names indicate a bug in model construction.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> ParamId {
        let name = name.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "parameter {name}: data length does not match shape"
        );
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            shape: shape.to_vec(),
            data,
        });
        ParamId(id)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, vec![0.0; n])
    }

    pub fn get(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].data
    }

    pub fn view1(&self, id: ParamId) -> ArrayView1<'_, f64> {
        let p = &self.params[id.0];
        ArrayView1::from_shape(p.data.len(), &p.data).expect("contiguous")
    }

    pub fn view2(&self, id: ParamId) -> ArrayView2<'_, f64> {
        let p = &self.params[id.0];
        let dims = p.shape.as_slice();
        debug_assert_eq!(dims.len(), 2, "{} is not a matrix", p.name);
        ArrayView2::from_shape((dims[0], dims[1]), &p.data).expect("contiguous")
    }

    pub fn view1_mut(&mut self, id: ParamId) -> ArrayViewMut1<'_, f64> {
        let p = &mut self.params[id.0];
        let n = p.data.len();
        ArrayViewMut1::from_shape(n, &mut p.data)
            .expect("contiguous")
            .into_dimensionality::<Ix1>()
            .expect("1-d")
    }

    pub fn view2_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, f64> {
        let p = &mut self.params[id.0];
        let (r, c) = (p.shape[0], p.shape[1]);
        ArrayViewMut2::from_shape((r, c), &mut p.data)
            .expect("contiguous")
            .into_dimensionality::<Ix2>()
            .expect("2-d")
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let params = self
            .params
            .iter()
            .map(|p| Param {
                name: p.name.clone(),
                shape: p.shape.clone(),
                data: vec![0.0; p.data.len()],
            })
            .collect();
        Self {
            params,
            index: self.index.clone(),
        }
    }

    pub fn fill_zero(&mut self) {
        for p in &mut self.params {
            p.data.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.data.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for p in &mut self.params {
            p.data.iter_mut().for_each(|x| *x *= c);
        }
    }

    /// `self += c * other`; layouts must match.
    pub fn axpy(&mut self, c: f64, other: &ParamStore) {
        assert!(self.same_layout(other), "parameter layouts differ");
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += c * y;
            }
        }
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    /// Copies values from `other` (same layout) into `self`.
    pub fn copy_from(&mut self, other: &ParamStore) -> crate::Result<()> {
        if !self.same_layout(other) {
            return Err(crate::Error::shape(
                "parameter layout does not match the model configuration",
            ));
        }
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            a.data.copy_from_slice(&b.data);
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.data.iter().all(|x| x.is_finite()))
    }
}
