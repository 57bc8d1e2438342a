//! Named parameter storage, per-tape binding, and the AdamW optimizer.

use super::{Tape, Var};
use ndarray::Array2;
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

/// Flat map of hierarchical parameter names to f64 matrices.
///
/// `BTreeMap` keeps iteration order stable, which makes checkpoints and
/// optimizer sweeps deterministic.
#[derive(Clone, Default)]
pub struct Params {
    entries: BTreeMap<String, Arc<Array2<f64>>>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.entries.insert(name.into(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> &Arc<Array2<f64>> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Arc<Array2<f64>>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        Arc::make_mut(
            self.entries
                .get_mut(name)
                .unwrap_or_else(|| panic!("unknown parameter `{name}`")),
        )
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Arc<Array2<f64>>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|a| a.len()).sum()
    }
}

/// Memoizes one leaf [`Var`] per parameter name on a tape, so every use of a
/// parameter inside one graph shares a node and its adjoints accumulate.
#[derive(Default)]
pub struct Binder {
    vars: HashMap<String, Var>,
}

impl Binder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn var(&mut self, tape: &mut Tape, params: &Params, name: &str) -> Var {
        if let Some(v) = self.vars.get(name) {
            return *v;
        }
        let v = tape.leaf(Arc::clone(params.get(name)));
        self.vars.insert(name.to_string(), v);
        v
    }

    /// All (name, leaf) pairs bound so far, sorted by name.
    pub fn bound(&self) -> Vec<(String, Var)> {
        let mut out: Vec<_> = self.vars.iter().map(|(n, v)| (n.clone(), *v)).collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}

/// Adam with decoupled weight decay and bias correction.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    /// One update over every parameter that has a gradient. `lr_scale`
    /// carries the warm-up multiplier.
    pub fn step(&mut self, params: &mut Params, grads: &BTreeMap<String, Array2<f64>>, lr_scale: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let lr = self.lr * lr_scale;
        for (name, g) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            let theta = params.get_mut(name);
            for ((mi, vi), (gi, ti)) in
                m.iter_mut().zip(v.iter_mut()).zip(g.iter().zip(theta.iter_mut()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *ti -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *ti);
            }
        }
    }
}

/// Global-norm gradient clipping; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Array2<f64>>, max_norm: f64) -> f64 {
    let sq: f64 = grads.values().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}
