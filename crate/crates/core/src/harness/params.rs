//! Named parameter storage with seeded initialisation.
//!
//! candle's stock initialisers draw from an unseeded generator, so fresh
//! parameters here are filled from a ChaCha stream keyed by the run seed
//! and the parameter's path instead. Insertion order does not matter.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Result, Shape, Tensor, Var};
use candle_nn::init::NormalOrUniform;
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, VarBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::hashing::seed_bytes;

#[derive(Debug)]
pub(crate) struct ParamStore {
    seed: u64,
    vars: Mutex<BTreeMap<String, Var>>,
    /// Refuse to create parameters that were not loaded.
    sealed: bool,
}

struct Handle(Arc<ParamStore>);

impl ParamStore {
    pub fn seeded(seed: u64) -> Arc<Self> {
        Arc::new(Self {
            seed,
            vars: Mutex::new(BTreeMap::new()),
            sealed: false,
        })
    }

    pub fn from_tensors(tensors: BTreeMap<String, Tensor>) -> Result<Arc<Self>> {
        let vars = tensors
            .into_iter()
            .map(|(k, t)| Ok((k, Var::from_tensor(&t)?)))
            .collect::<Result<_>>()?;
        Ok(Arc::new(Self {
            seed: 0,
            vars: Mutex::new(vars),
            sealed: true,
        }))
    }

    pub fn var_builder(self: &Arc<Self>, device: &Device) -> VarBuilder<'static> {
        VarBuilder::from_backend(Box::new(Handle(self.clone())), DType::F32, device.clone())
    }

    /// Parameters the optimiser should update; batch-norm running
    /// statistics are excluded.
    pub fn trainable(&self) -> Vec<Var> {
        self.vars
            .lock()
            .unwrap()
            .iter()
            .filter(|(k, _)| !is_buffer(k))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.vars.lock().unwrap().len()
    }

    fn init(&self, shape: &Shape, name: &str, init: Init, device: &Device) -> Result<Var> {
        let n = shape.elem_count();
        let mut rng = ChaCha8Rng::from_seed(seed_bytes(["divgen.init", self.seed.to_string().as_str(), name]));
        let values: Vec<f32> = match init {
            Init::Const(c) => vec![c as f32; n],
            Init::Randn { mean, stdev } => (0..n).map(|_| normal(&mut rng, mean, stdev)).collect(),
            Init::Uniform { lo, up } => (0..n).map(|_| rng.random_range(lo..up) as f32).collect(),
            Init::Kaiming { dist, fan, non_linearity } => {
                let std = non_linearity.gain() / (fan.for_shape(shape) as f64).sqrt();
                match dist {
                    NormalOrUniform::Normal => (0..n).map(|_| normal(&mut rng, 0.0, std)).collect(),
                    NormalOrUniform::Uniform => {
                        let bound = 3f64.sqrt() * std;
                        (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect()
                    }
                }
            }
        };
        Var::from_tensor(&Tensor::from_vec(values, shape.clone(), device)?)
    }
}

fn normal(rng: &mut ChaCha8Rng, mean: f64, std: f64) -> f32 {
    let z: f64 = rng.sample(StandardNormal);
    (mean + std * z) as f32
}

pub(crate) fn is_buffer(name: &str) -> bool {
    name.ends_with("running_mean") || name.ends_with("running_var")
}

impl SimpleBackend for Handle {
    fn get(&self, s: Shape, name: &str, h: Init, dtype: DType, dev: &Device) -> Result<Tensor> {
        let store = &self.0;
        let mut vars = store.vars.lock().unwrap();
        if let Some(v) = vars.get(name) {
            if v.shape() != &s {
                candle_core::bail!("parameter {name} has shape {:?}, expected {s:?}", v.shape());
            }
            return Ok(v.as_tensor().to_dtype(dtype)?);
        }
        if store.sealed {
            candle_core::bail!("parameter {name} missing from artifact");
        }
        let var = store.init(&s, name, h, dev)?;
        let t = var.as_tensor().clone();
        vars.insert(name.to_string(), var);
        Ok(t)
    }

    fn get_unchecked(&self, name: &str, dtype: DType, _dev: &Device) -> Result<Tensor> {
        match self.0.vars.lock().unwrap().get(name) {
            Some(v) => v.as_tensor().to_dtype(dtype),
            None => candle_core::bail!("parameter {name} not found"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.0.vars.lock().unwrap().contains_key(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn values(store: &Arc<ParamStore>) -> Vec<Vec<f32>> {
        store.snapshot().values().map(|t| t.flatten_all().unwrap().to_vec1().unwrap()).collect()
    }

    #[test]
    fn seeded_init_is_reproducible_and_order_free() {
        let dev = Device::Cpu;
        let a = ParamStore::seeded(7);
        let vb = a.var_builder(&dev);
        candle_nn::linear(4, 3, vb.pp("x")).unwrap();
        candle_nn::conv2d(3, 2, 3, Default::default(), vb.pp("y")).unwrap();
        let b = ParamStore::seeded(7);
        let vb = b.var_builder(&dev);
        candle_nn::conv2d(3, 2, 3, Default::default(), vb.pp("y")).unwrap();
        candle_nn::linear(4, 3, vb.pp("x")).unwrap();
        assert_eq!(values(&a), values(&b));
        let c = ParamStore::seeded(8);
        candle_nn::linear(4, 3, c.var_builder(&dev).pp("x")).unwrap();
        assert_ne!(values(&a)[0], values(&c)[0]);
    }

    #[test]
    fn sealed_store_refuses_new_names() {
        let store = ParamStore::from_tensors(BTreeMap::new()).unwrap();
        assert!(candle_nn::linear(2, 2, store.var_builder(&Device::Cpu)).is_err());
    }

    #[test]
    fn buffers_are_not_trainable() {
        let store = ParamStore::seeded(0);
        candle_nn::batch_norm(4, 1e-5, store.var_builder(&Device::Cpu).pp("bn")).unwrap();
        assert_eq!(store.len(), 4);
        assert_eq!(store.trainable().len(), 2);
    }
}
