//! Named parameters, convolution layers and the Adam optimizer.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.1;

/// All trainable arrays of a model bundle, keyed by dotted names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::arg(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Names under `prefix.`.
    pub fn names_with_prefix(&self, prefix: &str) -> Vec<String> {
        let p = format!("{prefix}.");
        self.params.keys().filter(|k| k.starts_with(&p)).cloned().collect()
    }

    /// Copies every `from.*` parameter to `to.*`, overwriting.
    pub fn copy_prefix(&mut self, from: &str, to: &str) {
        let names = self.names_with_prefix(from);
        for n in names {
            let t = self.params[&n].clone();
            let suffix = &n[from.len()..];
            self.params.insert(format!("{to}{suffix}"), t);
        }
    }

    /// FNV-1a over names and bit patterns of the `prefix.*` parameters.
    pub fn fingerprint(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        let p = format!("{prefix}.");
        for (name, t) in self.params.iter().filter(|(k, _)| prefix.is_empty() || k.starts_with(&p)) {
            eat(name.as_bytes());
            for v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite)
    }
}

/// Binds stored parameters onto a graph, either as trainable leaves or constants.
#[derive(Clone, Copy)]
pub struct Binder<'a> {
    pub store: &'a ParamStore,
    pub trainable: bool,
}

impl<'a> Binder<'a> {
    pub fn trainable(store: &'a ParamStore) -> Self {
        Binder { store, trainable: true }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Binder { store, trainable: false }
    }

    pub fn with_trainable(self, trainable: bool) -> Self {
        Binder { trainable, ..self }
    }

    pub fn var(&self, g: &mut Graph, name: &str) -> Result<Var> {
        let t = self.store.get(name)?;
        Ok(if self.trainable {
            g.param(name, t)
        } else {
            g.constant(t.clone())
        })
    }

    /// `conv(x)` with weights `{name}.w` and bias `{name}.b`.
    pub fn conv(&self, g: &mut Graph, name: &str, x: Var, stride: usize) -> Result<Var> {
        let w = self.var(g, &format!("{name}.w"))?;
        let b = self.var(g, &format!("{name}.b"))?;
        g.conv2d(x, w, Some(b), stride)
    }

    pub fn conv_lrelu(&self, g: &mut Graph, name: &str, x: Var, stride: usize) -> Result<Var> {
        let y = self.conv(g, name, x, stride)?;
        Ok(g.leaky_relu(y, LEAKY_SLOPE))
    }
}

/// He-normal convolution weights and zero bias.
pub fn init_conv(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, k: usize) {
    init_conv_scaled(store, rng, name, cin, cout, k, 1.0);
}

pub fn init_conv_scaled(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    gain: f64,
) {
    let std = gain * (2.0 / (cin * k * k) as f64).sqrt();
    let n = cout * cin * k * k;
    let data = (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    store.insert(
        format!("{name}.w"),
        Tensor::new(vec![cout, cin, k, k], data).expect("conv shape"),
    );
    store.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
}

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 10.0,
        }
    }
}

/// Adam over a subset of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update for every parameter in `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        if grads.is_empty() {
            return Ok(());
        }
        let total: f64 = grads.values().map(Tensor::norm_sq).sum::<f64>().sqrt();
        if !total.is_finite() {
            return Err(Error::Numeric {
                term: "parameter gradient".into(),
            });
        }
        let clip = if self.cfg.clip_norm > 0.0 && total > self.cfg.clip_norm {
            self.cfg.clip_norm / total
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (name, g) in grads {
            let p = store
                .get_mut(name)
                .ok_or_else(|| Error::arg(format!("gradient for unknown parameter {name}")))?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((pi, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi * clip;
                *mi = self.cfg.beta1 * *mi + (1.0 - self.cfg.beta1) * gi;
                *vi = self.cfg.beta2 * *vi + (1.0 - self.cfg.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}

/// Sums per-sample gradient maps in order, then divides by the count.
pub fn average_grads(per_sample: Vec<BTreeMap<String, Tensor>>) -> BTreeMap<String, Tensor> {
    let n = per_sample.len();
    let mut it = per_sample.into_iter();
    let Some(mut acc) = it.next() else {
        return BTreeMap::new();
    };
    for g in it {
        for (k, t) in g {
            match acc.get_mut(&k) {
                Some(a) => a.add_assign(&t),
                None => {
                    acc.insert(k, t);
                }
            }
        }
    }
    for t in acc.values_mut() {
        t.scale(1.0 / n as f64);
    }
    acc
}

/// Per-item losses and gradients of one step, computed in parallel and
/// reduced in item order so results do not depend on thread scheduling.
pub fn parallel_grads<T, F>(items: &[T], f: F) -> Result<(Vec<f64>, BTreeMap<String, Tensor>)>
where
    T: Sync,
    F: Fn(&T) -> Result<(Vec<f64>, BTreeMap<String, Tensor>)> + Sync,
{
    use rayon::prelude::*;
    if items.is_empty() {
        return Err(Error::arg("empty batch"));
    }
    let results: Vec<(Vec<f64>, BTreeMap<String, Tensor>)> = items.par_iter().map(&f).collect::<Result<_>>()?;
    let n = results.len() as f64;
    let mut losses = vec![0.0; results[0].0.len()];
    let mut grads = Vec::with_capacity(results.len());
    for (l, g) in results {
        for (acc, v) in losses.iter_mut().zip(&l) {
            *acc += v / n;
        }
        grads.push(g);
    }
    Ok((losses, average_grads(grads)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::new(vec![2], vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(AdamConfig {
            lr: 0.05,
            ..Default::default()
        });
        for _ in 0..500 {
            let mut g = Graph::new();
            let x = Binder::trainable(&store).var(&mut g, "x").unwrap();
            let sq = g.square(x);
            let loss = g.sum(sq);
            let grads = g.backward(loss);
            let pg = g.param_grads(&grads);
            opt.step(&mut store, &pg).unwrap();
        }
        assert!(store.get("x").unwrap().max_abs() < 1e-2);
    }

    #[test]
    fn fingerprint_tracks_values_and_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        init_conv(&mut s, &mut rng, "a.c1", 1, 2, 3);
        init_conv(&mut s, &mut rng, "b.c1", 1, 2, 3);
        let fa = s.fingerprint("a");
        let fb = s.fingerprint("b");
        s.get_mut("b.c1.b").unwrap().data_mut()[0] = 1.0;
        assert_eq!(s.fingerprint("a"), fa);
        assert_ne!(s.fingerprint("b"), fb);
    }

    #[test]
    fn copy_prefix_duplicates_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = ParamStore::new();
        init_conv(&mut s, &mut rng, "day.enc", 1, 4, 3);
        s.copy_prefix("day", "night");
        assert_eq!(s.get("day.enc.w").unwrap(), s.get("night.enc.w").unwrap());
        assert_eq!(s.len(), 4);
    }
}
