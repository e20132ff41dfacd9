//! Named trainable parameters.
//!
//! A [`ParamStore`] owns every parameter of a model in registration order.
//! Layers obtain parameters through a [`ParamBuilder`], which prefixes names
//! with the module path (`body.stage0.block1.attn.qkv.weight`) and draws
//! initial values from one seeded generator, so the same seed and the same
//! construction order give bit-identical models.

use std::sync::{Arc, Mutex, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Result, TensorError};
use crate::float::Float;
use crate::shape::Shape;
use crate::tensor::{fresh_id, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Normal(0, std) resampled outside +-2 std.
    TruncNormal { std: f64 },
    Uniform { lo: f64, hi: f64 },
    /// Uniform(+-sqrt(6 / fan_in)), suited to ReLU stacks.
    KaimingUniform { fan_in: usize },
}

impl Init {
    fn sample<F: Float>(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<F> {
        match *self {
            Init::Zeros => vec![F::zero(); n],
            Init::Const(v) => vec![F::lit(v); n],
            Init::TruncNormal { std } => (0..n)
                .map(|_| loop {
                    let z: f64 = StandardNormal.sample(rng);
                    if z.abs() <= 2.0 {
                        break F::lit(z * std);
                    }
                })
                .collect(),
            Init::Uniform { lo, hi } => (0..n).map(|_| F::lit(rng.gen_range(lo..hi))).collect(),
            Init::KaimingUniform { fan_in } => {
                let b = (6.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| F::lit(rng.gen_range(-b..b))).collect()
            }
        }
    }
}

struct ParamSlot<F: Float> {
    name: String,
    id: usize,
    value: RwLock<Tensor<F>>,
}

/// Shared handle to one trainable tensor. Cloning shares the slot.
pub struct Param<F: Float>(Arc<ParamSlot<F>>);

impl<F: Float> Clone for Param<F> {
    fn clone(&self) -> Self {
        Param(self.0.clone())
    }
}

impl<F: Float> std::fmt::Debug for Param<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Param({}, {:?})", self.0.name, self.tensor().dims())
    }
}

impl<F: Float> Param<F> {
    pub fn name(&self) -> &str {
        &self.0.name
    }

    /// Stable id shared by every value this parameter takes; gradients are
    /// looked up by it.
    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn tensor(&self) -> Tensor<F> {
        self.0.value.read().expect("param lock poisoned").clone()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.tensor().dims().to_vec()
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.tensor().to_vec()
    }

    /// Replaces the value, keeping the shape and id.
    pub fn set(&self, data: Vec<F>) -> Result<()> {
        let mut slot = self.0.value.write().expect("param lock poisoned");
        if data.len() != slot.elem_count() {
            return Err(TensorError::DataLength { shape: slot.dims().to_vec(), got: data.len() });
        }
        let shape = slot.shape().clone();
        *slot = Tensor::var_with_id(self.0.id, data, shape);
        Ok(())
    }
}

struct StoreInner<F: Float> {
    params: Vec<Param<F>>,
    rng: ChaCha8Rng,
}

/// Ordered collection of every parameter of a model.
pub struct ParamStore<F: Float>(Arc<Mutex<StoreInner<F>>>);

impl<F: Float> Clone for ParamStore<F> {
    fn clone(&self) -> Self {
        ParamStore(self.0.clone())
    }
}

impl<F: Float> std::fmt::Debug for ParamStore<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ParamStore({} params)", self.params().len())
    }
}

impl<F: Float> ParamStore<F> {
    pub fn new(seed: u64) -> Self {
        ParamStore(Arc::new(Mutex::new(StoreInner { params: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed) })))
    }

    pub fn builder(&self) -> ParamBuilder<F> {
        ParamBuilder { store: self.clone(), prefix: String::new() }
    }

    pub fn params(&self) -> Vec<Param<F>> {
        self.0.lock().expect("store lock poisoned").params.clone()
    }

    pub fn get(&self, name: &str) -> Option<Param<F>> {
        self.params().into_iter().find(|p| p.name() == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.params().iter().map(|p| p.tensor().elem_count()).sum()
    }

    fn register(&self, name: String, shape: Shape, init: Init) -> Result<Param<F>> {
        let mut inner = self.0.lock().expect("store lock poisoned");
        if inner.params.iter().any(|p| p.name() == name) {
            return Err(TensorError::DuplicateParam(name));
        }
        let data = init.sample::<F>(shape.elem_count(), &mut inner.rng);
        let id = fresh_id();
        let p = Param(Arc::new(ParamSlot { name, id, value: RwLock::new(Tensor::var_with_id(id, data, shape)) }));
        inner.params.push(p.clone());
        Ok(p)
    }
}

/// Path-scoped view of a [`ParamStore`] used while constructing layers.
#[derive(Clone)]
pub struct ParamBuilder<F: Float> {
    store: ParamStore<F>,
    prefix: String,
}

impl<F: Float> ParamBuilder<F> {
    /// Pushes one path segment.
    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{}", self.prefix, name) };
        Self { store: self.store.clone(), prefix }
    }

    pub fn get(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Param<F>> {
        if name.is_empty() || name.contains('.') {
            return Err(invalid("param", format!("bad parameter name `{name}`")));
        }
        self.store.register(self.pp(name).prefix, shape.into(), init)
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_named() {
        let make = || {
            let s = ParamStore::<f32>::new(7);
            let b = s.builder().pp("enc");
            b.get("w", (3, 4), Init::TruncNormal { std: 0.02 }).unwrap();
            b.pp("sub").get("b", 4, Init::Zeros).unwrap();
            s
        };
        let (a, b) = (make(), make());
        assert_eq!(a.params()[0].to_vec(), b.params()[0].to_vec());
        assert_eq!(a.params()[1].name(), "enc.sub.b");
        assert!(a.params()[0].to_vec().iter().all(|v| v.abs() <= 0.04));
        assert!(a.builder().pp("enc").get("w", 1, Init::Zeros).is_err());
    }

    #[test]
    fn set_keeps_id_and_gradients_follow() {
        let s = ParamStore::<f64>::new(0);
        let p = s.builder().get("w", 2, Init::Const(1.0)).unwrap();
        let before = p.id();
        p.set(vec![2.0, 3.0]).unwrap();
        assert_eq!(p.id(), before);
        let loss = p.tensor().sqr().sum_all();
        let g = loss.backward().unwrap();
        assert_eq!(g.get_id(p.id()).unwrap(), &[4.0, 6.0]);
        assert!(p.set(vec![1.0]).is_err());
    }
}
