use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use sha2::{Digest, Sha256};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    group: String,
    tensor: Tensor,
}

/// Named parameters organised into groups that can be frozen as a unit.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: BTreeMap<String, ParamId>,
    frozen: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter; names must be unique.
    pub fn add(&mut self, group: &str, name: &str, tensor: Tensor) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            group: group.to_string(),
            tensor,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> &str {
        &self.entries[id.0].group
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn groups(&self) -> BTreeSet<String> {
        self.entries.iter().map(|e| e.group.clone()).collect()
    }

    pub fn freeze(&mut self, group: &str) {
        self.frozen.insert(group.to_string());
    }

    pub fn unfreeze(&mut self, group: &str) {
        self.frozen.remove(group);
    }

    pub fn is_frozen(&self, group: &str) -> bool {
        self.frozen.contains(group)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        !self.is_frozen(&self.entries[id.0].group)
    }

    pub fn ids_in_group<'a>(&'a self, group: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids()
            .filter(move |&id| self.entries[id.0].group == group)
    }

    /// Total element count of a group.
    pub fn numel(&self, group: &str) -> usize {
        self.ids_in_group(group)
            .map(|id| self.tensor(id).len())
            .sum()
    }

    /// Copy leaf gradients of every parameter bound on `tape` into the store.
    pub fn accumulate_grads(&mut self, tape: &Tape) {
        let bound: Vec<(ParamId, Var)> = tape.bindings().collect();
        for (id, var) in bound {
            if let Some(g) = tape.grad(var) {
                let g = g.to_vec();
                self.entries[id.0].tensor.accumulate_grad(&g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.zero_grad());
    }

    /// SHA-256 over names, shapes, and little-endian values of one group.
    pub fn checksum(&self, group: &str) -> String {
        let mut h = Sha256::new();
        for id in self.ids_in_group(group) {
            let t = self.tensor(id);
            h.update(self.name(id).as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Overwrite values from `(name, tensor)` pairs. Names absent from the
    /// store are rejected; shapes must match.
    pub fn load_named<'a>(
        &mut self,
        tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    ) -> Result<usize> {
        let mut staged = Vec::new();
        for (name, t) in tensors {
            let id = self
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{name}`")))?;
            if self.tensor(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    self.tensor(id).shape()
                )));
            }
            staged.push((id, t.data().to_vec()));
        }
        let n = staged.len();
        for (id, data) in staged {
            let t = self.tensor_mut(id);
            t.data_mut().copy_from_slice(&data);
            t.zero_grad();
        }
        Ok(n)
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor))
    }
}

/// Fully connected layer `y = x·W + b` over the last axis.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Kaiming-uniform style init scaled by `1/sqrt(d_in)`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        group: &str,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (d_in as f32).sqrt();
        let w = Tensor::uniform(&[d_in, d_out], -bound, bound, rng);
        let weight = store.add(group, &format!("{name}.weight"), w);
        let bias = bias.then(|| store.add(group, &format!("{name}.bias"), Tensor::zeros(&[d_out])));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn zeros(
        store: &mut ParamStore,
        group: &str,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let weight = store.add(
            group,
            &format!("{name}.weight"),
            Tensor::zeros(&[d_in, d_out]),
        );
        let bias = Some(store.add(group, &format!("{name}.bias"), Tensor::zeros(&[d_out])));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    /// Applies to `[n, d_in]` or `[d_in]` input.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let vector = shape.len() == 1;
        let x2 = if vector {
            tape.reshape(x, &[1, shape[0]])?
        } else {
            x
        };
        if tape.shape(x2).len() != 2 || tape.shape(x2)[1] != self.d_in {
            return Err(invalid(format!(
                "linear expects width {}, got {shape:?}",
                self.d_in
            )));
        }
        let w = tape.param(store, self.weight);
        let mut y = tape.matmul(x2, w)?;
        if let Some(b) = self.bias {
            let b = tape.param(store, b);
            y = tape.add_row(y, b)?;
        }
        if vector {
            y = tape.reshape(y, &[self.d_out])?;
        }
        Ok(y)
    }
}

/// 2-D convolution layer over `c×h×w` images.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        group: &str,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (c_in * kernel * kernel) as f32;
        let bound = (3.0 / fan_in).sqrt();
        let w = Tensor::uniform(&[c_out, c_in, kernel, kernel], -bound, bound, rng);
        Self {
            weight: store.add(group, &format!("{name}.weight"), w),
            bias: store.add(group, &format!("{name}.bias"), Tensor::zeros(&[c_out])),
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Per-feature affine layer norm.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, group: &str, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(group, &format!("{name}.gain"), Tensor::ones(&[d])),
            bias: store.add(group, &format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, Some(g), Some(b), super::EPS)
    }
}
