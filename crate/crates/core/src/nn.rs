//! Named parameter storage and layer helpers shared by all networks.

use std::collections::BTreeMap;

use edgesynth_tensor::{ConvGeom, Graph, Real, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

/// Parameters keyed by canonical dotted names such as `enc.0.w`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Real> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamStore<T>) {
        self.tensors.extend(other.tensors);
    }

    /// Register a `k x k` convolution: weight `[k*k*cin, cout]` drawn from
    /// `N(0, std^2)` and a zero bias.
    pub fn init_conv<R: Rng>(
        &mut self,
        rng: &mut R,
        name: &str,
        kernel: usize,
        cin: usize,
        cout: usize,
        std: f64,
    ) {
        let normal = Normal::new(0.0, std).expect("finite std");
        let w = (0..kernel * kernel * cin * cout).map(|_| T::of(normal.sample(rng))).collect();
        self.insert(
            format!("{name}.w"),
            Tensor::new(&[kernel * kernel * cin, cout], w).expect("conv weight shape"),
        );
        self.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
    }
}

/// Graph handles of a parameter set.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Add every tensor of `store` to `g`, as trainable leaves or constants.
    pub fn bind<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, trainable: bool) -> Self {
        let mut b = Self::default();
        b.add(g, store, trainable);
        b
    }

    pub fn add<T: Real>(&mut self, g: &mut Graph<T>, store: &ParamStore<T>, trainable: bool) {
        for (k, t) in store.iter() {
            let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
            self.vars.insert(k.clone(), v);
        }
    }

    pub fn set(&mut self, name: impl Into<String>, v: Var) {
        self.vars.insert(name.into(), v);
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }
}

/// Convolution with the weight `{name}.w` and bias `{name}.b`.
pub fn conv<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var, geom: ConvGeom) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    Ok(g.conv2d(x, w, Some(b), geom)?)
}

/// Size-preserving 3x3 convolution followed by a leaky ReLU.
pub fn conv_act<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var, slope: f64) -> Result<Var> {
    let y = conv(g, p, name, x, ConvGeom::same3())?;
    Ok(g.leaky_relu(y, slope))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_statistics_and_shapes() {
        let mut s = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        s.init_conv(&mut rng, "c", 3, 16, 32, 0.02);
        let w = s.get("c.w").unwrap();
        assert_eq!(w.shape(), &[144, 32]);
        let n = w.numel() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let std = (w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.002 && (std - 0.02).abs() < 0.002);
        assert!(s.get("c.b").unwrap().data().iter().all(|&b| b == 0.0));
        assert!(s.get("missing").is_err());
    }

    #[test]
    fn binding_respects_trainability() {
        let mut s = ParamStore::<f64>::new();
        s.init_conv(&mut ChaCha8Rng::seed_from_u64(1), "c", 1, 2, 2, 0.1);
        let mut g = Graph::new();
        let p = Bound::bind(&mut g, &s, false);
        assert!(!g.requires_grad(p.get("c.w").unwrap()));
        let q = Bound::bind(&mut g, &s, true);
        assert!(g.requires_grad(q.get("c.w").unwrap()));
        assert_eq!(s.subset("c.").len(), 2);
        assert_eq!(s.cast::<f32>().num_elements(), 6);
    }
}
