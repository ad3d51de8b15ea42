//! Named parameter storage and the forward-pass session that binds stored
//! parameters onto a tape.

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::BatchStats;
use crate::tape::{BnMode, RunningStats, Tape, Var};
use crate::tensor::{Real, Tensor};

/// Normalization constants.
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Ordered map from hierarchical parameter name (`enc3/part2/conv/weight`) to tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    map: IndexMap<String, Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { map: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.map.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name `{name}`")));
        }
        self.map.insert(name, Param { value, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.map.get(name)
    }

    /// Replace a value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self
            .map
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "ParamStore::set",
                format!("`{name}` is {:?}, got {:?}", p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn trainable_count(&self) -> usize {
        self.map.values().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn non_trainable_count(&self) -> usize {
        self.map.values().filter(|p| !p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn running_stats(&self, bn_prefix: &str) -> Result<RunningStats<T>> {
        Ok(RunningStats {
            mean: self.get(&format!("{bn_prefix}/running_mean"))?.data().to_vec(),
            var: self.get(&format!("{bn_prefix}/running_var"))?.data().to_vec(),
        })
    }

    /// Fold batch statistics (keyed by normalization prefix) into running statistics.
    pub fn apply_batch_stats(&mut self, stats: &[(String, BatchStats<T>)], momentum: T) -> Result<()> {
        for (prefix, batch) in stats {
            let mut rs = self.running_stats(prefix)?;
            rs.update(batch, momentum);
            let c = rs.mean.len();
            self.set(&format!("{prefix}/running_mean"), Tensor::new(vec![c], rs.mean)?)?;
            self.set(&format!("{prefix}/running_var"), Tensor::new(vec![c], rs.var)?)?;
        }
        Ok(())
    }

    /// He-uniform convolution weight `[f, c, k, k]` plus zero bias.
    pub fn register_conv<R: Rng + ?Sized>(
        &mut self,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<()> {
        let bound = (6.0 / (in_ch * k * k) as f64).sqrt();
        let w = Tensor::random_uniform(&[out_ch, in_ch, k, k], -bound, bound, rng);
        self.insert(format!("{prefix}/weight"), w, true)?;
        self.insert(format!("{prefix}/bias"), Tensor::zeros(&[out_ch]), true)
    }

    /// Batch normalization over `c` channels: gamma 1, beta 0, running mean 0, running var 1.
    pub fn register_bn(&mut self, prefix: &str, c: usize) -> Result<()> {
        self.insert(format!("{prefix}/gamma"), Tensor::ones(&[c]), true)?;
        self.insert(format!("{prefix}/beta"), Tensor::zeros(&[c]), true)?;
        self.insert(format!("{prefix}/running_mean"), Tensor::zeros(&[c]), false)?;
        self.insert(format!("{prefix}/running_var"), Tensor::ones(&[c]), false)
    }

    /// Convolution followed by normalization (`{prefix}/conv`, `{prefix}/bn`).
    pub fn register_conv_bn<R: Rng + ?Sized>(
        &mut self,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<()> {
        self.register_conv(&format!("{prefix}/conv"), in_ch, out_ch, k, rng)?;
        self.register_bn(&format!("{prefix}/bn"), out_ch)
    }
}

/// One forward pass: parameters are bound lazily onto the tape as leaves.
pub struct Session<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    store: &'a ParamStore<T>,
    mode: Mode,
    bound: IndexMap<String, Var>,
    stats: Vec<(String, BatchStats<T>)>,
    taps: Option<IndexMap<String, Var>>,
}

impl<'a, T: Real> Session<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, mode: Mode) -> Self {
        Session { tape, store, mode, bound: IndexMap::new(), stats: Vec::new(), taps: None }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Record intermediate values passed to [`Session::tap`].
    pub fn enable_taps(&mut self) {
        self.taps = Some(IndexMap::new());
    }

    pub fn tap(&mut self, name: impl Into<String>, v: Var) {
        if let Some(t) = &mut self.taps {
            t.insert(name.into(), v);
        }
    }

    pub fn taps(&self) -> Option<&IndexMap<String, Var>> {
        self.taps.as_ref()
    }

    /// Use an existing tape variable for a named parameter instead of the stored value.
    pub fn bind(&mut self, name: impl Into<String>, v: Var) {
        self.bound.insert(name.into(), v);
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = self
            .store
            .param(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
        let v = if p.trainable { self.tape.leaf(p.value.clone()) } else { self.tape.constant(p.value.clone()) };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters bound so far, in binding order.
    pub fn bound(&self) -> &IndexMap<String, Var> {
        &self.bound
    }

    /// Batch statistics collected by train-mode normalization layers.
    pub fn take_batch_stats(&mut self) -> Vec<(String, BatchStats<T>)> {
        std::mem::take(&mut self.stats)
    }

    pub fn conv(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{prefix}/weight"))?;
        let bias_name = format!("{prefix}/bias");
        let b = if self.store.contains(&bias_name) { Some(self.param(&bias_name)?) } else { None };
        self.tape.conv2d(x, w, b)
    }

    pub fn batchnorm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}/gamma"))?;
        let beta = self.param(&format!("{prefix}/beta"))?;
        let eps = T::from_f64(BN_EPS);
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batchnorm(x, gamma, beta, BnMode::Train, eps)?;
                if let Some(s) = stats {
                    self.stats.push((prefix.to_string(), s));
                }
                Ok(y)
            }
            Mode::Infer => {
                let rs = self.store.running_stats(prefix)?;
                Ok(self.tape.batchnorm(x, gamma, beta, BnMode::Infer(Some(&rs)), eps)?.0)
            }
        }
    }

    /// `BN(ReLU(conv(x)))`, the layer order used throughout the network.
    pub fn conv_relu_bn(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let y = self.conv(&format!("{prefix}/conv"), x)?;
        let y = self.tape.relu(y)?;
        self.batchnorm(&format!("{prefix}/bn"), y)
    }

    /// Gradients of `root` with respect to every bound trainable parameter, by name.
    pub fn param_grads(&self, root: Var) -> Result<IndexMap<String, Tensor<T>>> {
        let grads = self.tape.backward(root)?;
        Ok(self
            .bound
            .iter()
            .filter(|(name, _)| self.store.param(name).is_some_and(|p| p.trainable))
            .map(|(name, &v)| (name.clone(), grads.get_or_zeros(self.tape, v)))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn counts_and_duplicates() {
        let mut s = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        s.register_conv("c", 4, 8, 3, &mut rng).unwrap();
        assert_eq!(s.trainable_count(), 296);
        s.register_bn("bn", 8).unwrap();
        assert_eq!(s.trainable_count(), 296 + 16);
        assert_eq!(s.non_trainable_count(), 16);
        assert!(s.register_bn("bn", 8).is_err());
    }

    #[test]
    fn he_uniform_bound() {
        let mut s = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        s.register_conv("c", 2, 3, 5, &mut rng).unwrap();
        let bound = (6.0f64 / 50.0).sqrt();
        assert!(s.get("c/weight").unwrap().data().iter().all(|v| v.abs() <= bound));
        assert!(s.get("c/bias").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn set_checks_shape() {
        let mut s = ParamStore::<f32>::new();
        s.register_bn("bn", 2).unwrap();
        assert!(s.set("bn/gamma", Tensor::ones(&[3])).is_err());
        assert!(s.set("bn/gamma", Tensor::zeros(&[2])).is_ok());
    }
}
