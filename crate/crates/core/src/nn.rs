//! Named parameter storage and the two parametric primitives (conv, dense).

use std::collections::HashMap;

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::ConvGeom;
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter tensors. Insertion order is the canonical order
/// for optimizers, EMA and checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, t: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter name {name}");
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    /// Total scalar parameter count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces a tensor by name, keeping its shape.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        if self.tensors[i].shape() != t.shape() {
            return Err(Error::Shape(format!(
                "parameter {name}: shape {:?} vs stored {:?}",
                t.shape(),
                self.tensors[i].shape()
            )));
        }
        self.tensors[i] = t;
        Ok(())
    }

    /// Inserts every parameter into `g`, as differentiable leaves when
    /// `trainable` and as constants otherwise.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Params {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.leaf(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Params { vars }
    }
}

/// Graph handles of a [`ParamStore`] bound into one graph.
pub struct Params {
    vars: Vec<Var>,
}

impl Params {
    /// Handles in store order, e.g. leaves created by a caller.
    pub fn from_vars(vars: Vec<Var>) -> Params {
        Params { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Per-parameter gradients in store order; missing gradients are zeros.
    pub fn collect_grads(&self, g: &Graph, grads: &mut Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(g.shape(v))))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `N(0, 1/fan_in)`.
    FanIn,
    /// `N(0, s²/fan_in)`.
    Scaled(f64),
    Zero,
    Const(f64),
}

impl Init {
    pub fn tensor(self, shape: &[usize], fan_in: usize, rng: &mut RngStream) -> Tensor {
        match self {
            Init::FanIn => rng.normal_tensor(shape).scale(1.0 / (fan_in as f64).sqrt()),
            Init::Scaled(s) => rng.normal_tensor(shape).scale(s / (fan_in as f64).sqrt()),
            Init::Zero => Tensor::zeros(shape),
            Init::Const(v) => Tensor::full(shape, v),
        }
    }
}

pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeom,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        geom: ConvGeom,
        init: Init,
        rng: &mut RngStream,
    ) -> Self {
        let w = init.tensor(&[cout, cin, k, k], cin * k * k, rng);
        Conv2d {
            weight: store.add(&format!("{name}.weight"), w),
            bias: store.add(&format!("{name}.bias"), Tensor::zeros(&[cout])),
            geom,
            in_channels: cin,
            out_channels: cout,
            kernel: k,
        }
    }

    /// 3×3, stride 1, zero padding 1.
    pub fn same3(store: &mut ParamStore, name: &str, cin: usize, cout: usize, init: Init, rng: &mut RngStream) -> Self {
        Self::new(store, name, cin, cout, 3, ConvGeom::new(1, 1), init, rng)
    }

    pub fn pointwise(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        init: Init,
        rng: &mut RngStream,
    ) -> Self {
        Self::new(store, name, cin, cout, 1, ConvGeom::new(1, 0), init, rng)
    }

    pub fn forward(&self, g: &mut Graph, p: &Params, x: Var) -> Result<Var> {
        let y = g.conv2d(x, p.var(self.weight), self.geom)?;
        g.add_bc(y, p.var(self.bias))
    }
}

pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, n_in: usize, n_out: usize, init: Init, rng: &mut RngStream) -> Self {
        let w = init.tensor(&[n_out, n_in], n_in, rng);
        Dense {
            weight: store.add(&format!("{name}.weight"), w),
            bias: store.add(&format!("{name}.bias"), Tensor::zeros(&[n_out])),
            in_features: n_in,
            out_features: n_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Params, x: Var) -> Result<Var> {
        g.dense(x, p.var(self.weight), Some(p.var(self.bias)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_identity_and_bias() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(0, "init");
        let d = Dense::new(&mut store, "d", 3, 3, Init::Zero, &mut rng);
        let x = Tensor::from_fn(&[2, 3], |i| i as f64 - 2.0);
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        store.set("d.weight", eye).unwrap();
        let mut g = Graph::inference();
        let p = store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = d.forward(&mut g, &p, xv).unwrap();
        assert_eq!(g.value(y), &x);

        let bias = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        store.set("d.weight", Tensor::zeros(&[3, 3])).unwrap();
        store.set("d.bias", bias.clone()).unwrap();
        let mut g = Graph::inference();
        let p = store.bind(&mut g, false);
        let xv = g.constant(x);
        let y = d.forward(&mut g, &p, xv).unwrap();
        for row in g.value(y).data().chunks(3) {
            assert_eq!(row, bias.data());
        }
    }

    #[test]
    fn dense_rejects_dim_mismatch() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(0, "init");
        let d = Dense::new(&mut store, "d", 3, 2, Init::FanIn, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g, true);
        let x = g.constant(Tensor::zeros(&[2, 4]));
        assert!(d.forward(&mut g, &p, x).is_err());
    }

    #[test]
    fn set_checks_shape() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::zeros(&[2]));
        assert!(store.set("a", Tensor::zeros(&[3])).is_err());
        assert!(store.set("b", Tensor::zeros(&[2])).is_err());
        assert_eq!(store.count(), 2);
    }
}
