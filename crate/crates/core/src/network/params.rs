//! Named parameter storage with seeded, order-independent initialization.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::init::{Init, NormalOrUniform};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::VarBuilder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Every variable is initialized from a stream keyed by `(seed, name)`, so
/// the initial weights do not depend on construction order.
#[derive(Clone)]
pub struct ParamStore {
    vars: Arc<Mutex<BTreeMap<String, Var>>>,
    seed: u64,
}

/// Batch-norm running statistics are stored alongside weights but are not
/// learnable.
pub fn is_learnable(name: &str) -> bool {
    !(name.ends_with("running_mean") || name.ends_with("running_var"))
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a, stable across platforms and releases
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            vars: Arc::new(Mutex::new(BTreeMap::new())),
            seed,
        }
    }

    pub fn var_builder(&self, device: &Device) -> VarBuilder<'static> {
        VarBuilder::from_backend(Box::new(self.clone()), DType::F32, device.clone())
    }

    /// All variables sorted by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        let map = self.vars.lock().expect("param store poisoned");
        map.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn learnable(&self) -> Vec<(String, Var)> {
        self.vars()
            .into_iter()
            .filter(|(n, _)| is_learnable(n))
            .collect()
    }

    pub fn learnable_count(&self) -> usize {
        self.learnable().iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.lock().expect("param store poisoned").get(name).cloned()
    }

    pub fn len(&self) -> usize {
        self.vars.lock().expect("param store poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.lock().expect("param store poisoned").keys().cloned().collect()
    }

    /// Adds or replaces a variable with the given value.
    pub fn insert(&self, name: &str, value: &Tensor) -> candle_core::Result<()> {
        let var = Var::from_tensor(&value.to_dtype(DType::F32)?)?;
        self.vars
            .lock()
            .expect("param store poisoned")
            .insert(name.to_string(), var);
        Ok(())
    }

    fn init_values(&self, shape: &Shape, name: &str, init: Init) -> Vec<f32> {
        let n = shape.elem_count();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
        let uniform = |rng: &mut ChaCha8Rng, lo: f64, up: f64| -> Vec<f32> {
            (0..n).map(|_| rng.random_range(lo..up) as f32).collect()
        };
        let normal = |rng: &mut ChaCha8Rng, mean: f64, std: f64| -> Vec<f32> {
            let d = Normal::new(mean, std).expect("finite std");
            (0..n).map(|_| d.sample(rng) as f32).collect()
        };
        match init {
            Init::Const(c) => vec![c as f32; n],
            Init::Uniform { lo, up } => uniform(&mut rng, lo, up),
            Init::Randn { mean, stdev } => normal(&mut rng, mean, stdev),
            Init::Kaiming {
                dist,
                fan,
                non_linearity,
            } => {
                let std = non_linearity.gain() / (fan.for_shape(shape) as f64).sqrt();
                match dist {
                    NormalOrUniform::Uniform => {
                        let bound = 3f64.sqrt() * std;
                        uniform(&mut rng, -bound, bound)
                    }
                    NormalOrUniform::Normal => normal(&mut rng, 0.0, std),
                }
            }
        }
    }
}

impl SimpleBackend for ParamStore {
    fn get(
        &self,
        s: Shape,
        name: &str,
        h: Init,
        dtype: DType,
        dev: &Device,
    ) -> candle_core::Result<Tensor> {
        let mut map = self.vars.lock().expect("param store poisoned");
        if let Some(v) = map.get(name) {
            if v.shape() != &s {
                candle_core::bail!(
                    "parameter {name} has shape {:?}, requested {:?}",
                    v.shape(),
                    s
                );
            }
            return Ok(v.as_tensor().clone());
        }
        let values = self.init_values(&s, name, h);
        let tensor = Tensor::from_vec(values, s, dev)?.to_dtype(dtype)?;
        let var = Var::from_tensor(&tensor)?;
        let out = var.as_tensor().clone();
        map.insert(name.to_string(), var);
        Ok(out)
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.vars.lock().expect("param store poisoned").contains_key(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_keyed_by_name_not_order() {
        let dev = Device::Cpu;
        let a = ParamStore::new(5);
        let b = ParamStore::new(5);
        let va = a.var_builder(&dev);
        let vb = b.var_builder(&dev);
        let a1 = candle_nn::linear(4, 3, va.pp("x")).unwrap();
        let _ = candle_nn::linear(2, 2, va.pp("y")).unwrap();
        let _ = candle_nn::linear(2, 2, vb.pp("y")).unwrap();
        let b1 = candle_nn::linear(4, 3, vb.pp("x")).unwrap();
        let wa: Vec<f32> = a1.weight().flatten_all().unwrap().to_vec1().unwrap();
        let wb: Vec<f32> = b1.weight().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(wa, wb);
        let c = ParamStore::new(6);
        let c1 = candle_nn::linear(4, 3, c.var_builder(&dev).pp("x")).unwrap();
        let wc: Vec<f32> = c1.weight().flatten_all().unwrap().to_vec1().unwrap();
        assert_ne!(wa, wc);
        assert_eq!(a.len(), 4);
    }

    #[test]
    fn running_stats_are_not_learnable() {
        let store = ParamStore::new(0);
        let _ = candle_nn::batch_norm(8, 1e-5, store.var_builder(&Device::Cpu).pp("bn")).unwrap();
        assert_eq!(store.len(), 4);
        assert_eq!(store.learnable_count(), 16);
    }
}
