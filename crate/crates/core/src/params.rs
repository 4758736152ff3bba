//! Named parameter storage and the on-disk checkpoint format.
//!
//! Checkpoint files are JSON documents:
//!
//! ```json
//! {
//!   "format": "mivio-checkpoint",
//!   "version": 1,
//!   "params": [
//!     { "name": "fusion.mha.w_q0", "shape": [24, 12], "trainable": true, "values": [ ... ] }
//!   ]
//! }
//! ```
//!
//! `values` holds the row-major entries. Field names are stable across
//! versions; readers reject unknown `format` strings and newer versions.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

pub const CHECKPOINT_FORMAT: &str = "mivio-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Buffers (e.g. batch-norm running statistics) are stored and
    /// checkpointed but never optimised or sampled.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

/// Tape handles for every entry of a [`ParamStore`] in one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps externally created vars, one per store entry in entry order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    params: Vec<CheckpointParam>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointParam {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    values: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, value, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id_of(name).map(|id| self.get(id))
    }

    /// Copy of the entries whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            entries: self.entries.iter().filter(|e| e.name.starts_with(prefix)).cloned().collect(),
        }
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }

    /// Places every entry on the tape: trainable entries as variables,
    /// buffers as constants.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if e.trainable {
                    tape.variable(e.value.clone())
                } else {
                    tape.constant(e.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Gradients aligned with the entries; `None` for buffers and for
    /// parameters that did not take part in the pass.
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.entries
            .iter()
            .zip(&bound.vars)
            .map(|(e, v)| if e.trainable { grads.take(*v) } else { None })
            .collect()
    }

    /// Trainable values concatenated in entry order.
    pub fn flat_trainable(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_trainable());
        for e in self.entries.iter().filter(|e| e.trainable) {
            out.extend_from_slice(e.value.data());
        }
        out
    }

    pub fn set_flat_trainable(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_trainable() {
            return Err(Error::dim("set_flat_trainable", &[self.num_trainable()], &[flat.len()]));
        }
        let mut offset = 0;
        for e in self.entries.iter_mut().filter(|e| e.trainable) {
            let n = e.value.numel();
            e.value.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Flattens per-entry gradients in the same layout as
    /// [`ParamStore::flat_trainable`]; missing gradients count as zero.
    pub fn flatten_grads(&self, grads: &[Option<Tensor>]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_trainable());
        for (e, g) in self.entries.iter().zip(grads) {
            if !e.trainable {
                continue;
            }
            match g {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat_n(0.0, e.value.numel())),
            }
        }
        out
    }

    /// Names of trainable entries, each repeated once per scalar, in flat
    /// order. Used to attribute flat indices back to layers.
    pub fn flat_owner_names(&self) -> Vec<&str> {
        let mut out = Vec::with_capacity(self.num_trainable());
        for e in self.entries.iter().filter(|e| e.trainable) {
            out.extend(std::iter::repeat_n(e.name.as_str(), e.value.numel()));
        }
        out
    }

    pub fn to_checkpoint_json(&self) -> String {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            params: self
                .entries
                .iter()
                .map(|e| CheckpointParam {
                    name: e.name.clone(),
                    shape: e.value.shape().to_vec(),
                    trainable: e.trainable,
                    values: e.value.data().to_vec(),
                })
                .collect(),
        };
        serde_json::to_string(&file).expect("checkpoint serialises")
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_json()).map_err(|e| Error::io(path, e))
    }

    /// Replaces every value from a checkpoint. Nothing is modified unless the
    /// whole file parses and every name and shape matches.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.load_checkpoint_str(&text)
            .map_err(|e| match e {
                Error::Format { path: None, msg } => Error::format(path.to_path_buf(), msg),
                other => other,
            })
    }

    pub fn load_checkpoint_str(&mut self, text: &str) -> Result<()> {
        self.load_filtered(text, |_| true)
    }

    /// Like [`ParamStore::load_checkpoint`] but only for entries whose name
    /// starts with `prefix`; the file must hold exactly those entries.
    pub fn load_checkpoint_prefix(&mut self, path: &Path, prefix: &str) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.load_filtered(&text, |n| n.starts_with(prefix)).map_err(|e| match e {
            Error::Format { path: None, msg } => Error::format(path.to_path_buf(), msg),
            other => other,
        })
    }

    fn load_filtered(&mut self, text: &str, keep: impl Fn(&str) -> bool) -> Result<()> {
        let file: CheckpointFile =
            serde_json::from_str(text).map_err(|e| Error::format(None, format!("checkpoint: {e}")))?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::format(None, format!("unknown checkpoint format {:?}", file.format)));
        }
        if file.version > CHECKPOINT_VERSION {
            return Err(Error::format(None, format!("unsupported checkpoint version {}", file.version)));
        }
        let by_name: HashMap<&str, &CheckpointParam> = file.params.iter().map(|p| (p.name.as_str(), p)).collect();
        let mut missing = Vec::new();
        let mut mismatched = Vec::new();
        for e in self.entries.iter().filter(|e| keep(&e.name)) {
            match by_name.get(e.name.as_str()) {
                None => missing.push(e.name.clone()),
                Some(p) => {
                    let numel: usize = p.shape.iter().product();
                    if p.shape != e.value.shape() || p.values.len() != numel {
                        mismatched.push(format!(
                            "{}: expected {:?}, found {:?} with {} values",
                            e.name,
                            e.value.shape(),
                            p.shape,
                            p.values.len()
                        ));
                    }
                }
            }
        }
        let known: BTreeSet<&str> = self.entries.iter().map(|e| e.name.as_str()).filter(|n| keep(n)).collect();
        let unknown: Vec<&str> = file.params.iter().map(|p| p.name.as_str()).filter(|n| !known.contains(n)).collect();
        if !missing.is_empty() {
            return Err(Error::format(None, format!("checkpoint is missing parameters: {}", missing.join(", "))));
        }
        if !mismatched.is_empty() {
            return Err(Error::format(None, format!("shape mismatch: {}", mismatched.join("; "))));
        }
        if !unknown.is_empty() {
            return Err(Error::format(None, format!("checkpoint has unknown parameters: {}", unknown.join(", "))));
        }
        for e in self.entries.iter_mut().filter(|e| keep(&e.name)) {
            let p = by_name[e.name.as_str()];
            e.value.data_mut().copy_from_slice(&p.values);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a", Tensor::new(vec![2], vec![0.1, -1.0 / 3.0]).unwrap(), true);
        s.add("b", Tensor::new(vec![1, 2], vec![std::f64::consts::PI, 1e-300]).unwrap(), true);
        s.add("stats", Tensor::zeros(&[2]), false);
        s
    }

    #[test]
    fn checkpoint_round_trips_bit_identically() {
        let s = store();
        let mut t = store();
        t.set_flat_trainable(&[0.0; 4]).unwrap();
        t.load_checkpoint_str(&s.to_checkpoint_json()).unwrap();
        for (x, y) in s.entries().iter().zip(t.entries()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&x.value), bits(&y.value));
        }
    }

    #[test]
    fn truncated_checkpoint_leaves_store_untouched() {
        let s = store();
        let mut t = store();
        t.set_flat_trainable(&[9.0; 4]).unwrap();
        let json = s.to_checkpoint_json();
        let err = t.load_checkpoint_str(&json[..json.len() / 2]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert_eq!(t.flat_trainable(), vec![9.0; 4]);
    }

    #[test]
    fn wrong_shape_is_named() {
        let mut other = ParamStore::new();
        other.add("a", Tensor::zeros(&[3]), true);
        other.add("b", Tensor::zeros(&[1, 2]), true);
        other.add("stats", Tensor::zeros(&[2]), false);
        let mut t = store();
        let err = t.load_checkpoint_str(&other.to_checkpoint_json()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("a: expected [2]"), "{msg}");
        assert!(!msg.contains("b:"), "{msg}");
    }

    #[test]
    fn missing_names_are_listed() {
        let mut other = ParamStore::new();
        other.add("a", Tensor::zeros(&[2]), true);
        let mut t = store();
        let msg = t.load_checkpoint_str(&other.to_checkpoint_json()).unwrap_err().to_string();
        assert!(msg.contains("b") && msg.contains("stats"), "{msg}");
    }

    #[test]
    fn flat_layout_skips_buffers() {
        let mut s = store();
        assert_eq!(s.num_trainable(), 4);
        s.set_flat_trainable(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.by_name("b").unwrap().data(), &[3.0, 4.0]);
        assert_eq!(s.flat_owner_names(), vec!["a", "a", "b", "b"]);
    }
}
