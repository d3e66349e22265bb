//! Named parameter tensors with paired gradient buffers.

use indexmap::IndexMap;
use ndarray::ArrayD;

use crate::error::{Error, Result};

/// One parameter: a value tensor, its gradient buffer of identical shape,
/// and whether the optimizer may touch it. Batch-norm running statistics
/// live in the store as non-trainable entries so that EMA and checkpointing
/// treat them uniformly with the weights.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    pub trainable: bool,
}

impl Param {
    pub fn new(value: ArrayD<f64>, trainable: bool) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self {
            value,
            grad,
            trainable,
        }
    }
}

/// Ordered map of uniquely named parameters. Insertion order is stable and
/// survives save/load, which keeps optimizer and EMA traversals
/// deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    entries: IndexMap<String, Param>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::StoreMismatch {
                name,
                detail: "duplicate parameter name".into(),
            });
        }
        self.entries.insert(name, param);
        Ok(())
    }

    pub fn get(&self, name: &str) -> &Param {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn value(&self, name: &str) -> &ArrayD<f64> {
        &self.get(name).value
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.entries.iter_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Name of the first parameter holding a non-finite gradient, if any.
    pub fn first_nonfinite_grad(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, p)| p.grad.iter().any(|g| !g.is_finite()))
            .map(|(n, _)| n.as_str())
    }

    /// Clones the entries selected by `keep` into a new store, preserving
    /// order. Used to spawn the target encoder as a copy of the online one.
    pub fn subset_by(&self, mut keep: impl FnMut(&str) -> bool) -> ParameterStore {
        let entries = self
            .entries
            .iter()
            .filter(|(n, _)| keep(n))
            .map(|(n, p)| (n.clone(), p.clone()))
            .collect();
        ParameterStore { entries }
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }
}

/// Blends every target tensor toward its online counterpart:
/// `target <- m * target + (1 - m) * online`, running statistics included.
///
/// Every entry of `target` must exist in `online` with the same shape;
/// online-only entries (the predictor head) are left alone.
pub fn ema_update(target: &mut ParameterStore, online: &ParameterStore, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Config(format!("EMA momentum must be in [0,1], got {m}")));
    }
    for (name, tp) in target.entries.iter_mut() {
        let op = online.try_get(name).ok_or_else(|| Error::StoreMismatch {
            name: name.clone(),
            detail: "present in target store but missing from online store".into(),
        })?;
        if op.value.shape() != tp.value.shape() {
            return Err(Error::StoreMismatch {
                name: name.clone(),
                detail: format!(
                    "shape {:?} in target vs {:?} in online",
                    tp.value.shape(),
                    op.value.shape()
                ),
            });
        }
        tp.value.zip_mut_with(&op.value, |t, &o| *t = m * *t + (1.0 - m) * o);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    fn scalar_store(v: f64) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("w", Param::new(ArrayD::from_elem(vec![1], v), true))
            .unwrap();
        s
    }

    #[test]
    fn ema_identity_and_copy_limits() {
        let online = scalar_store(0.0);

        let mut target = scalar_store(1.0);
        ema_update(&mut target, &online, 1.0).unwrap();
        assert_eq!(target.value("w")[0], 1.0, "m=1 leaves the target unchanged");

        let mut target = scalar_store(1.0);
        ema_update(&mut target, &online, 0.0).unwrap();
        assert_eq!(target.value("w")[0], 0.0, "m=0 copies the online value");
    }

    #[test]
    fn ema_momentum_blend() {
        let online = scalar_store(0.0);
        let mut target = scalar_store(1.0);
        ema_update(&mut target, &online, 0.99).unwrap();
        assert!((target.value("w")[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn ema_rejects_missing_and_misshapen_entries() {
        let online = scalar_store(0.0);
        let mut target = scalar_store(1.0);
        target
            .insert("extra", Param::new(ArrayD::zeros(vec![2]), true))
            .unwrap();
        assert!(matches!(
            ema_update(&mut target, &online, 0.5),
            Err(Error::StoreMismatch { .. })
        ));

        let mut bad = ParameterStore::new();
        bad.insert("w", Param::new(ArrayD::zeros(vec![3]), true))
            .unwrap();
        assert!(matches!(
            ema_update(&mut bad, &online, 0.5),
            Err(Error::StoreMismatch { .. })
        ));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = scalar_store(0.0);
        let err = s
            .insert("w", Param::new(ArrayD::zeros(vec![1]), true))
            .unwrap_err();
        assert!(matches!(err, Error::StoreMismatch { .. }));
    }
}
