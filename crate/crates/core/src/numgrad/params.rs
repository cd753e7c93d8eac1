use crate::error::{Error, Result};

use super::real::{Mat, Real};

/// Index of a parameter group inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GroupId(pub usize);

/// One named block of trainable parameters with its Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup<T> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
    pub m: Vec<T>,
    pub v: Vec<T>,
    /// Frozen groups are skipped by the optimizer.
    pub frozen: bool,
}

impl<T: Real> ParamGroup<T> {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_mat(&self) -> Mat<T> {
        Mat::from_vec(self.rows, self.cols, self.data.clone())
    }
}

/// All trainable state plus the optimizer step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    groups: Vec<ParamGroup<T>>,
    step: u64,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            groups: Vec::new(),
            step: 0,
        }
    }

    /// Registers a group; names must be unique.
    pub fn add(&mut self, name: &str, rows: usize, cols: usize, data: Vec<T>) -> Result<GroupId> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "group {name}: {} values for shape {rows}x{cols}",
                data.len()
            )));
        }
        if self.find(name).is_some() {
            return Err(Error::InvalidParam(format!("duplicate group name {name}")));
        }
        let n = data.len();
        self.groups.push(ParamGroup {
            name: name.to_string(),
            rows,
            cols,
            data,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            frozen: false,
        });
        Ok(GroupId(self.groups.len() - 1))
    }

    pub fn find(&self, name: &str) -> Option<GroupId> {
        self.groups.iter().position(|g| g.name == name).map(GroupId)
    }

    pub fn group(&self, id: GroupId) -> &ParamGroup<T> {
        &self.groups[id.0]
    }

    pub fn group_mut(&mut self, id: GroupId) -> &mut ParamGroup<T> {
        &mut self.groups[id.0]
    }

    pub fn groups(&self) -> &[ParamGroup<T>] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [ParamGroup<T>] {
        &mut self.groups
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn num_params(&self) -> usize {
        self.groups.iter().map(|g| g.len()).sum()
    }

    /// Flattened copy of every parameter, in group order.
    pub fn flatten(&self) -> Vec<T> {
        self.groups.iter().flat_map(|g| g.data.iter().copied()).collect()
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn unflatten(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "unflatten: {} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        for g in &mut self.groups {
            let n = g.data.len();
            g.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Same layout with values converted to another precision; moments are reset.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for g in &self.groups {
            let data = g.data.iter().map(|&x| U::of(x.f64())).collect();
            let id = out.add(&g.name, g.rows, g.cols, data).expect("copy of a valid store");
            out.group_mut(id).frozen = g.frozen;
        }
        out.step = self.step;
        out
    }
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper {
            lr,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParam(format!("adam hyperparameters {self:?}")))
        }
    }
}

/// Per-group gradients aligned with a [`ParamStore`]. `None` means all-zero.
#[derive(Clone, Debug)]
pub struct GroupGrads<T> {
    pub groups: Vec<Option<Vec<T>>>,
}

impl<T: Real> GroupGrads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        GroupGrads {
            groups: vec![None; store.groups().len()],
        }
    }

    pub fn get(&self, id: GroupId) -> Option<&[T]> {
        self.groups.get(id.0).and_then(|g| g.as_deref())
    }

    /// Replaces the gradient of one group.
    pub fn set(&mut self, id: GroupId, grad: Vec<T>) -> Result<()> {
        let slot = self.groups.get_mut(id.0).ok_or(Error::OutOfRange {
            what: "gradient group",
            index: id.0,
            len: 0,
        })?;
        *slot = Some(grad);
        Ok(())
    }

    pub(crate) fn slot(&mut self, id: GroupId, len: usize) -> &mut Vec<T> {
        self.groups[id.0].get_or_insert_with(|| vec![T::zero(); len])
    }

    /// Euclidean norm over every group, accumulated in f64.
    pub fn global_norm(&self) -> f64 {
        self.groups
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|&x| {
                let x = x.f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: T) {
        for g in self.groups.iter_mut().flatten() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.groups
            .iter()
            .flatten()
            .all(|g| g.iter().all(|x| x.is_finite()))
    }

    /// Gradient flattened in the store's group order.
    pub fn flatten(&self, store: &ParamStore<T>) -> Vec<T> {
        let mut out = Vec::with_capacity(store.num_params());
        for (g, p) in self.groups.iter().zip(store.groups()) {
            match g {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(T::zero(), p.len())),
            }
        }
        out
    }
}

/// One bias-corrected Adam update over every non-frozen group.
pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &GroupGrads<T>,
    hyper: &AdamHyper,
) -> Result<()> {
    hyper.validate()?;
    if grads.groups.len() != store.groups.len() {
        return Err(Error::Shape(format!(
            "gradient has {} groups, store has {}",
            grads.groups.len(),
            store.groups.len()
        )));
    }
    for (g, p) in grads.groups.iter().zip(&store.groups) {
        if let Some(g) = g {
            if g.len() != p.len() {
                return Err(Error::Shape(format!(
                    "gradient for {} has {} entries, expected {}",
                    p.name,
                    g.len(),
                    p.len()
                )));
            }
        }
    }
    let k = store.step + 1;
    let b1 = T::of(hyper.beta1);
    let b2 = T::of(hyper.beta2);
    let one = T::one();
    let bc1 = T::of(1.0 - hyper.beta1.powi(k as i32));
    let bc2 = T::of(1.0 - hyper.beta2.powi(k as i32));
    let lr = T::of(hyper.lr);
    let eps = T::of(hyper.eps);
    for (g, p) in grads.groups.iter().zip(store.groups.iter_mut()) {
        if p.frozen {
            continue;
        }
        match g {
            Some(g) => {
                for i in 0..p.data.len() {
                    let gi = g[i];
                    p.m[i] = b1 * p.m[i] + (one - b1) * gi;
                    p.v[i] = b2 * p.v[i] + (one - b2) * gi * gi;
                    let mh = p.m[i] / bc1;
                    let vh = p.v[i] / bc2;
                    p.data[i] -= lr * mh / (vh.sqrt() + eps);
                }
            }
            None => {
                for i in 0..p.data.len() {
                    if p.m[i] == T::zero() && p.v[i] == T::zero() {
                        continue;
                    }
                    p.m[i] = b1 * p.m[i];
                    p.v[i] = b2 * p.v[i];
                    let mh = p.m[i] / bc1;
                    let vh = p.v[i] / bc2;
                    p.data[i] -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
    }
    store.step = k;
    Ok(())
}
