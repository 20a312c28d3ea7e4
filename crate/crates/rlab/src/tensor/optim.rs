//! Named parameter storage and first-order optimizers.
//!
//! The store keeps parameters in insertion order, so iteration (and with it
//! every optimizer update and serialization pass) is deterministic.

use std::collections::BTreeMap;

use super::{Tensor, TensorError};

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Adam first/second-moment slots, allocated on first adam_step.
    m1: Option<Tensor>,
    m2: Option<Tensor>,
    step: u64,
}

/// Named parameter tensors with per-parameter optimizer state.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<(), TensorError> {
        if self.index.contains_key(name) {
            return Err(TensorError::DuplicateName(name.into()));
        }
        self.index.insert(name.into(), self.entries.len());
        self.entries.push(ParamEntry { name: name.into(), value, m1: None, m2: None, step: 0 });
        Ok(())
    }

    pub fn value(&self, name: &str) -> Result<&Tensor, TensorError> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].value)
            .ok_or_else(|| TensorError::UnknownName(name.into()))
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<(), TensorError> {
        let i = *self.index.get(name).ok_or_else(|| TensorError::UnknownName(name.into()))?;
        if value.shape() != self.entries[i].value.shape() {
            return Err(TensorError::Shape {
                context: format!("set_value '{name}'"),
                detail: format!("{:?} vs {:?}", value.shape(), self.entries[i].value.shape()),
            });
        }
        self.entries[i].value = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// Copies parameter values (not optimizer state) from another store with
    /// an identical layout. Used for target-network syncing.
    pub fn copy_values_from(&mut self, other: &ParameterStore) -> Result<(), TensorError> {
        if self.entries.len() != other.entries.len() {
            return Err(TensorError::Shape {
                context: "copy_values_from".into(),
                detail: "stores have different entry counts".into(),
            });
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(TensorError::Shape {
                    context: "copy_values_from".into(),
                    detail: format!("entry mismatch: {} vs {}", dst.name, src.name),
                });
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

/// Gradients keyed by parameter name, aligned with a store's layout.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    entries: Vec<(String, Tensor)>,
}

impl Gradients {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        Gradients { entries }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn global_l2_norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|(_, t)| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Collects per-parameter gradients from a finished backward pass, in store
/// order. Parameters outside the differentiated subgraph get zeros.
pub fn collect_gradients(
    graph: &super::Graph,
    run: &super::Run,
    store: &ParameterStore,
) -> Gradients {
    let by_name: BTreeMap<String, super::NodeId> = graph.param_nodes().into_iter().collect();
    let entries = store
        .entries
        .iter()
        .map(|e| {
            let grad = by_name
                .get(&e.name)
                .and_then(|&id| run.grad(id).cloned())
                .unwrap_or_else(|| Tensor::zeros(e.value.shape()));
            (e.name.clone(), grad)
        })
        .collect();
    Gradients { entries }
}

/// Rescales gradients in place so their global L2 norm is at most `max`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut Gradients, max: f64) -> f64 {
    let norm = grads.global_l2_norm();
    if norm > max && norm > 0.0 {
        let s = max / norm;
        for (_, t) in grads.entries.iter_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

fn check_grads(store: &ParameterStore, grads: &Gradients, ctx: &str) -> Result<(), TensorError> {
    for entry in &store.entries {
        let g = grads.get(&entry.name).ok_or_else(|| TensorError::UnknownName(entry.name.clone()))?;
        if g.shape() != entry.value.shape() {
            return Err(TensorError::Shape {
                context: format!("{ctx} '{}'", entry.name),
                detail: format!("grad {:?} vs param {:?}", g.shape(), entry.value.shape()),
            });
        }
        if !g.all_finite() {
            return Err(TensorError::NonFinite { context: format!("{ctx} gradient '{}'", entry.name) });
        }
    }
    Ok(())
}

/// Plain SGD: `p <- p - lr * g`. Aborts without touching any parameter if a
/// gradient is non-finite or missing.
pub fn sgd_step(store: &mut ParameterStore, grads: &Gradients, lr: f64) -> Result<(), TensorError> {
    assert!(lr >= 0.0, "learning rate must be non-negative");
    check_grads(store, grads, "sgd_step")?;
    for entry in store.entries.iter_mut() {
        let g = grads.get(&entry.name).expect("checked");
        for (p, gv) in entry.value.data_mut().iter_mut().zip(g.data()) {
            *p -= lr * gv;
        }
    }
    Ok(())
}

/// Adam with bias correction; moment slots live in the store.
pub fn adam_step(
    store: &mut ParameterStore,
    grads: &Gradients,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<(), TensorError> {
    check_grads(store, grads, "adam_step")?;
    for entry in store.entries.iter_mut() {
        let g = grads.get(&entry.name).expect("checked");
        let shape = entry.value.shape().to_vec();
        let m1 = entry.m1.get_or_insert_with(|| Tensor::zeros(&shape));
        let m2 = entry.m2.get_or_insert_with(|| Tensor::zeros(&shape));
        entry.step += 1;
        let t = entry.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for i in 0..g.numel() {
            let gv = g.data()[i];
            let m = beta1 * m1.data()[i] + (1.0 - beta1) * gv;
            let v = beta2 * m2.data()[i] + (1.0 - beta2) * gv * gv;
            m1.data_mut()[i] = m;
            m2.data_mut()[i] = v;
            entry.value.data_mut()[i] -= lr * (m / c1) / ((v / c2).sqrt() + eps);
        }
    }
    Ok(())
}
