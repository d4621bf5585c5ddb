//! Named parameter storage and graph binding.

use std::collections::HashMap;

use vitp_autodiff::{Element, Graph, Tensor, Var};

use crate::error::{Result, VitpError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    TruncNormal(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(VitpError::Format(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, t: Tensor<T>) -> Result<()> {
        if t.shape() != self.tensors[id.0].shape() {
            return Err(VitpError::Format(format!(
                "shape {:?} does not fit parameter {}",
                t.shape(),
                self.names[id.0]
            )));
        }
        self.tensors[id.0] = t;
        Ok(())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Copy of the parameters whose names start with `prefix`, in order.
    pub fn subset(&self, prefix: &str) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (_, n, t) in self.iter().filter(|(_, n, _)| n.starts_with(prefix)) {
            out.insert(n, t.clone()).expect("names are unique");
        }
        out
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (_, n, t) in self.iter() {
            out.insert(n, t.cast()).expect("names are unique");
        }
        out
    }

    pub fn bitwise_eq(&self, other: &ParamStore<T>) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.bitwise_eq(b))
    }

    /// Places every parameter on `g`; those accepted by `trainable` get gradients.
    pub fn bind(&self, g: &mut Graph<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| {
                if trainable(n) {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Graph handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Declares model parameters: creates them when an rng is supplied,
/// otherwise looks them up (and shape-checks them) in an existing store.
pub struct Declarer<'a, T: Element> {
    store: &'a mut ParamStore<T>,
    rng: Option<&'a mut dyn rand::RngCore>,
}

impl<'a, T: Element> Declarer<'a, T> {
    pub fn create(store: &'a mut ParamStore<T>, rng: &'a mut dyn rand::RngCore) -> Self {
        Declarer {
            store,
            rng: Some(rng),
        }
    }

    pub fn attach(store: &'a mut ParamStore<T>) -> Self {
        Declarer { store, rng: None }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        match self.rng.as_mut() {
            Some(rng) => {
                let t = match init {
                    Init::TruncNormal(std) => Tensor::trunc_normal(shape, std, &mut **rng),
                    Init::Zeros => Tensor::zeros(shape),
                    Init::Ones => Tensor::full(shape, T::one()),
                };
                self.store.insert(name, t)
            }
            None => {
                let id = self
                    .store
                    .id(name)
                    .ok_or_else(|| VitpError::Format(format!("missing parameter {name}")))?;
                if self.store.get(id).shape() != shape {
                    return Err(VitpError::Format(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        self.store.get(id).shape()
                    )));
                }
                Ok(id)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn attach_finds_created_params() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let a = Declarer::create(&mut store, &mut rng)
            .param("w", &[2, 3], Init::TruncNormal(0.02))
            .unwrap();
        let b = Declarer::attach(&mut store)
            .param("w", &[2, 3], Init::Zeros)
            .unwrap();
        assert_eq!(a, b);
        assert!(Declarer::attach(&mut store).param("w", &[3, 2], Init::Zeros).is_err());
        assert!(Declarer::attach(&mut store).param("x", &[1], Init::Zeros).is_err());
    }
}
