use super::{AdamState, Tape, TapeError, Tensor, Var};
use ndarray::IxDyn;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Named parameter arrays in a fixed insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.position(&name) {
            Some(i) => self.values[i] = value,
            None => {
                self.names.push(name);
                self.values.push(value);
            }
        }
    }

    fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(move |i| &mut self.values[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Record every parameter as a trainable leaf, in store order.
    pub fn register(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            names: self.names.clone(),
            vars: self.values.iter().map(|v| tape.var(v.clone())).collect(),
        }
    }
}

/// Parameters recorded on a particular tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn from_parts(names: Vec<String>, vars: Vec<Var>) -> Self {
        Self { names, vars }
    }

    pub fn var(&self, name: &str) -> Result<Var, TapeError> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| TapeError::Checkpoint(format!("unknown parameter '{name}'")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Shape plus row-major values of one array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamRecord {
    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            values: t.as_standard_layout().iter().copied().collect(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor, TapeError> {
        Tensor::from_shape_vec(IxDyn(&self.shape), self.values.clone())
            .map_err(|e| TapeError::Checkpoint(format!("shape {:?}: {e}", self.shape)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRecord {
    pub step: u64,
    pub m: BTreeMap<String, ParamRecord>,
    pub v: BTreeMap<String, ParamRecord>,
}

/// JSON checkpoint: parameter name -> shape + row-major values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: String,
    /// Completed training epochs.
    pub epoch: usize,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub params: BTreeMap<String, ParamRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerRecord>,
}

impl Checkpoint {
    pub fn new(kind: &str, epoch: usize, store: &ParamStore, meta: serde_json::Value) -> Self {
        let params = store
            .names()
            .iter()
            .zip(store.values())
            .map(|(n, v)| (n.clone(), ParamRecord::from_tensor(v)))
            .collect();
        Self {
            version: CHECKPOINT_VERSION,
            kind: kind.to_string(),
            epoch,
            meta,
            params,
            optimizer: None,
        }
    }

    pub fn with_optimizer(mut self, store: &ParamStore, state: &AdamState) -> Self {
        let rec = |ts: &[Tensor]| {
            store
                .names()
                .iter()
                .zip(ts)
                .map(|(n, t)| (n.clone(), ParamRecord::from_tensor(t)))
                .collect()
        };
        self.optimizer = Some(OptimizerRecord {
            step: state.step,
            m: rec(&state.m),
            v: rec(&state.v),
        });
        self
    }

    /// Fill `template` (which fixes names, order and shapes) from this checkpoint.
    pub fn restore_into(&self, template: &ParamStore) -> Result<ParamStore, TapeError> {
        if self.version != CHECKPOINT_VERSION {
            return Err(TapeError::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let mut out = ParamStore::new();
        for (name, value) in template.names().iter().zip(template.values()) {
            let rec = self
                .params
                .get(name)
                .ok_or_else(|| TapeError::Checkpoint(format!("missing parameter '{name}'")))?;
            let t = rec.to_tensor()?;
            if t.shape() != value.shape() {
                return Err(TapeError::Checkpoint(format!(
                    "parameter '{name}' has shape {:?}, expected {:?}",
                    t.shape(),
                    value.shape()
                )));
            }
            out.insert(name.clone(), t);
        }
        Ok(out)
    }

    pub fn restore_optimizer(&self, store: &ParamStore) -> Result<Option<AdamState>, TapeError> {
        let Some(opt) = &self.optimizer else {
            return Ok(None);
        };
        let pick = |map: &BTreeMap<String, ParamRecord>| -> Result<Vec<Tensor>, TapeError> {
            store
                .names()
                .iter()
                .map(|n| {
                    map.get(n)
                        .ok_or_else(|| TapeError::Checkpoint(format!("optimizer state missing '{n}'")))?
                        .to_tensor()
                })
                .collect()
        };
        Ok(Some(AdamState {
            step: opt.step,
            m: pick(&opt.m)?,
            v: pick(&opt.v)?,
        }))
    }

    pub fn save(&self, path: &Path) -> Result<(), TapeError> {
        let text = serde_json::to_string(self).map_err(|e| TapeError::Checkpoint(e.to_string()))?;
        std::fs::write(path, text)
            .map_err(|e| TapeError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, TapeError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TapeError::Checkpoint(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| TapeError::Checkpoint(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut store = ParamStore::new();
        store.insert("w", arr2(&[[0.1, 1.0 / 3.0], [-2.5e-17, 7.0]]).into_dyn());
        store.insert("b", Tensor::zeros(IxDyn(&[3])));
        let state = AdamState::new(store.values());
        let ck = Checkpoint::new("test", 4, &store, serde_json::json!({"k": 1}))
            .with_optimizer(&store, &state);
        let text = serde_json::to_string(&ck).unwrap();
        let back: Checkpoint = serde_json::from_str(&text).unwrap();
        let restored = back.restore_into(&store).unwrap();
        assert_eq!(restored, store);
        assert_eq!(back.restore_optimizer(&store).unwrap().unwrap(), state);
        assert_eq!(back.epoch, 4);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(IxDyn(&[2, 2])));
        let ck = Checkpoint::new("t", 0, &store, serde_json::Value::Null);
        let mut other = ParamStore::new();
        other.insert("w", Tensor::zeros(IxDyn(&[3])));
        assert!(ck.restore_into(&other).is_err());
    }

    #[test]
    fn version_required() {
        let bad = r#"{"kind":"x","epoch":0,"params":{}}"#;
        assert!(serde_json::from_str::<Checkpoint>(bad).is_err());
    }
}
