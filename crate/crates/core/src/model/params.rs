//! Named, ordered parameter storage and its binding onto a tape.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{BatchNormStats, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Learnable,
    /// State carried alongside the weights, such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub tensor: Tensor<f32>,
    pub kind: ParamKind,
}

/// Insertion-ordered map from parameter name to tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    entries: IndexMap<String, Entry>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor<f32>, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("parameter `{name}` registered twice")));
        }
        let (id, _) = self.entries.insert_full(name, Entry { tensor, kind });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).expect("valid id").0
    }

    pub fn get(&self, id: ParamId) -> &Tensor<f32> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.entries[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Entry)> {
        self.entries.iter().enumerate().map(|(i, (n, e))| (ParamId(i), n.as_str(), e))
    }

    pub fn learnable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, _, e)| e.kind == ParamKind::Learnable).map(|(id, _, _)| id).collect()
    }

    /// Total number of learnable scalars.
    pub fn num_learnable(&self) -> usize {
        self.entries.values().filter(|e| e.kind == ParamKind::Learnable).map(|e| e.tensor.numel()).sum()
    }

    /// Learnable tensors in store order, converted to `S`.
    pub fn learnable_tensors<S: Real>(&self) -> Vec<Tensor<S>> {
        self.entries.values().filter(|e| e.kind == ParamKind::Learnable).map(|e| e.tensor.cast()).collect()
    }

    /// Binds every entry onto `tape`: learnable entries become leaves when
    /// `trainable`, everything else becomes a constant.
    pub fn bind<S: Real>(&self, tape: &mut Tape<S>, trainable: bool) -> Bound<S> {
        let vars = self
            .entries
            .values()
            .map(|e| {
                let t = e.tensor.cast();
                if trainable && e.kind == ParamKind::Learnable {
                    tape.leaf(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        Bound { vars }
    }

    /// Binds with caller-supplied vars for the learnable entries, in store order.
    pub fn bind_with<S: Real>(&self, tape: &mut Tape<S>, learnable: &[Var<S>]) -> Result<Bound<S>> {
        let mut supplied = learnable.iter();
        let mut vars = Vec::with_capacity(self.len());
        for (name, e) in &self.entries {
            let v = match e.kind {
                ParamKind::Learnable => {
                    let v = supplied
                        .next()
                        .ok_or_else(|| Error::Config(format!("no var supplied for `{name}`")))?;
                    if v.shape() != e.tensor.shape() {
                        return Err(Error::shape("bind_with", format!("`{name}`: {:?} vs {:?}", v.shape(), e.tensor.shape())));
                    }
                    v.clone()
                }
                ParamKind::Buffer => tape.constant(e.tensor.cast()),
            };
            vars.push(v);
        }
        if supplied.next().is_some() {
            return Err(Error::Config("more vars supplied than learnable parameters".into()));
        }
        Ok(Bound { vars })
    }

    /// Checks that `other` has the same names, order, kinds and shapes.
    /// The error names the first tensor that differs.
    pub fn check_layout(&self, other: &ParameterStore) -> Result<()> {
        for (i, (name, e)) in self.entries.iter().enumerate() {
            match other.entries.get_index(i) {
                Some((n, o)) if n == name && o.tensor.shape() == e.tensor.shape() => {}
                Some((n, o)) if n == name => {
                    return Err(Error::CheckpointMismatch {
                        name: name.clone(),
                        detail: format!("shape {:?}, model expects {:?}", o.tensor.shape(), e.tensor.shape()),
                    })
                }
                Some((n, _)) => {
                    return Err(Error::CheckpointMismatch {
                        name: name.clone(),
                        detail: format!("found `{n}` in its place"),
                    })
                }
                None => {
                    return Err(Error::CheckpointMismatch { name: name.clone(), detail: "missing".into() });
                }
            }
        }
        if let Some((n, _)) = other.entries.get_index(self.len()) {
            return Err(Error::CheckpointMismatch { name: n.clone(), detail: "not part of the model".into() });
        }
        Ok(())
    }

    /// Folds one batch's statistics into the running buffers:
    /// `running = momentum · running + (1 - momentum) · batch`.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate], momentum: f64) {
        for u in updates {
            let mix = |run: &mut Tensor<f32>, batch: &[f64]| {
                for (r, &b) in run.data_mut().iter_mut().zip(batch) {
                    *r = (momentum * *r as f64 + (1.0 - momentum) * b) as f32;
                }
            };
            mix(self.get_mut(u.running_mean), &u.mean);
            mix(self.get_mut(u.running_var), &u.var_unbiased);
            self.get_mut(u.tracked).data_mut()[0] += 1.0;
        }
    }

    pub fn into_entries(self) -> IndexMap<String, Entry> {
        self.entries
    }
}

/// Batch statistics from one training-mode batch-norm call, waiting to be
/// folded into the running buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub tracked: ParamId,
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

impl BnUpdate {
    pub(crate) fn new<S: Real>(bn: &BatchNorm, stats: &BatchNormStats<S>) -> Self {
        BnUpdate {
            running_mean: bn.running_mean,
            running_var: bn.running_var,
            tracked: bn.tracked,
            mean: stats.mean.iter().map(|v| v.f64()).collect(),
            var_unbiased: stats.var_unbiased.iter().map(|v| v.f64()).collect(),
        }
    }
}

/// Parameter vars of one tape, indexed by [`ParamId`].
pub struct Bound<S: Real> {
    vars: Vec<Var<S>>,
}

impl<S: Real> Bound<S> {
    pub fn var(&self, id: ParamId) -> &Var<S> {
        &self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<S>] {
        &self.vars
    }
}

/// Weight initialization rules.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Gaussian with the given standard deviation.
    Normal(f64),
    /// Kaiming-uniform for a fan-in: `U(-√(6/fan_in), √(6/fan_in))`.
    KaimingUniform(usize),
}

/// Registers parameters under a dotted name prefix with seeded initialization.
pub struct ParamBuilder<'a> {
    store: &'a mut ParameterStore,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

pub const INIT_STD: f64 = 0.02;

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParameterStore, seed: u64) -> Self {
        ParamBuilder { store, rng: ChaCha8Rng::seed_from_u64(seed), prefix: Vec::new() }
    }

    /// Runs `f` with `name` pushed onto the prefix.
    pub fn scope<T>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        self.prefix.push(name.into());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn full_name(&self, name: &str) -> String {
        let mut s = self.prefix.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(name);
        s
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], init: Init, kind: ParamKind) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| d.sample(&mut self.rng) as f32).collect()
            }
            Init::KaimingUniform(fan_in) => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-bound..bound) as f32).collect()
            }
        };
        let full = self.full_name(name);
        self.store.register(full, Tensor::new(shape.to_vec(), data)?, kind)
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        self.tensor(name, shape, init, ParamKind::Learnable)
    }

    pub fn linear(&mut self, name: &str, n_in: usize, n_out: usize) -> Result<Linear> {
        self.scope(name, |b| {
            Ok(Linear {
                w: b.param("w", &[n_in, n_out], Init::Normal(INIT_STD))?,
                b: b.param("b", &[n_out], Init::Zeros)?,
            })
        })
    }

    pub fn layer_norm(&mut self, name: &str, c: usize) -> Result<LayerNorm> {
        self.scope(name, |b| Ok(LayerNorm { gamma: b.param("gamma", &[c], Init::Ones)?, beta: b.param("beta", &[c], Init::Zeros)? }))
    }

    pub fn batch_norm(&mut self, name: &str, c: usize) -> Result<BatchNorm> {
        self.scope(name, |b| {
            Ok(BatchNorm {
                gamma: b.param("gamma", &[c], Init::Ones)?,
                beta: b.param("beta", &[c], Init::Zeros)?,
                running_mean: b.tensor("running_mean", &[c], Init::Zeros, ParamKind::Buffer)?,
                running_var: b.tensor("running_var", &[c], Init::Ones, ParamKind::Buffer)?,
                tracked: b.tensor("batches_tracked", &[1], Init::Zeros, ParamKind::Buffer)?,
            })
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub tracked: ParamId,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_scoped_and_unique() {
        let mut store = ParameterStore::new();
        let mut b = ParamBuilder::new(&mut store, 1);
        let l = b.scope("enc", |b| b.linear("proj", 3, 2)).unwrap();
        assert!(b.scope("enc", |b| b.linear("proj", 3, 2)).is_err());
        assert_eq!(store.name(l.w), "enc.proj.w");
        assert_eq!(store.get(l.b).data(), &[0.0, 0.0]);
        assert_eq!(store.num_learnable(), 8);
    }

    #[test]
    fn same_seed_same_weights() {
        let build = |seed| {
            let mut s = ParameterStore::new();
            ParamBuilder::new(&mut s, seed).linear("l", 4, 4).unwrap();
            s
        };
        assert_eq!(build(3), build(3));
        assert_ne!(build(3), build(4));
    }

    #[test]
    fn running_stats_follow_momentum_from_initial_values() {
        let mut store = ParameterStore::new();
        let bn = ParamBuilder::new(&mut store, 0).batch_norm("bn", 2).unwrap();
        let x = [1.0f64, 10.0, 3.0, 14.0, 5.0, 18.0];
        // hand-rolled statistics of the three rows, per channel
        let mean = [3.0, 14.0];
        let var_unbiased = [4.0, 16.0];
        let stats = BatchNormStats {
            mean: mean.to_vec(),
            var: vec![8.0 / 3.0, 32.0 / 3.0],
            var_unbiased: var_unbiased.to_vec(),
        };
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(Tensor::new([3, 2], x.to_vec()).unwrap());
        let g = tape.constant(Tensor::full([2], 1.0));
        let b0 = tape.constant(Tensor::zeros([2]));
        let (_, got) = tape.batch_norm_train(&xv, &g, &b0, 1e-5).unwrap();
        assert_eq!(got, stats);
        store.apply_bn_updates(&[BnUpdate::new(&bn, &got)], 0.9);
        let rm = store.get(bn.running_mean).data();
        let rv = store.get(bn.running_var).data();
        for j in 0..2 {
            assert!((rm[j] as f64 - 0.1 * mean[j]).abs() < 1e-6);
            assert!((rv[j] as f64 - (0.9 + 0.1 * var_unbiased[j])).abs() < 1e-5);
        }
        assert_eq!(store.get(bn.tracked).data(), &[1.0]);
    }

    #[test]
    fn layout_mismatch_names_first_offender() {
        let mut a = ParameterStore::new();
        ParamBuilder::new(&mut a, 0).linear("l", 2, 3).unwrap();
        let mut b = ParameterStore::new();
        ParamBuilder::new(&mut b, 0).linear("l", 2, 4).unwrap();
        match a.check_layout(&b) {
            Err(Error::CheckpointMismatch { name, .. }) => assert_eq!(name, "l.w"),
            other => panic!("{other:?}"),
        }
        assert!(a.check_layout(&a.clone()).is_ok());
    }
}
