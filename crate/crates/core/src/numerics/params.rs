//! Named parameter storage, gradient buffers and the AdamW optimizer.

use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Vae,
    PatchEmbed,
    Base,
    Lora,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [ParamGroup::Vae, ParamGroup::PatchEmbed, ParamGroup::Base, ParamGroup::Lora];

    pub fn tag(self) -> u8 {
        match self {
            ParamGroup::Vae => 0,
            ParamGroup::PatchEmbed => 1,
            ParamGroup::Base => 2,
            ParamGroup::Lora => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => ParamGroup::Vae,
            1 => ParamGroup::PatchEmbed,
            2 => ParamGroup::Base,
            3 => ParamGroup::Lora,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<T>) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn count(&self, group: Option<ParamGroup>) -> usize {
        self.entries
            .iter()
            .filter(|e| group.is_none_or(|g| g == e.group))
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    group: e.group,
                    value: e.value.cast(),
                })
                .collect(),
        }
    }

    /// Copies values from `other` (matched by name and shape) for the
    /// entries whose group is selected.
    pub fn load_from(&mut self, other: &ParamStore<T>, groups: &[ParamGroup]) -> Result<()> {
        for e in self.entries.iter_mut().filter(|e| groups.contains(&e.group)) {
            let src = other
                .entries
                .iter()
                .find(|o| o.name == e.name)
                .ok_or_else(|| Error::Invalid(format!("missing parameter block `{}`", e.name)))?;
            if src.value.shape() != e.value.shape() {
                return Err(Error::shape("load parameters", e.value.shape(), src.value.shape()));
            }
            e.value = src.value.clone();
        }
        Ok(())
    }

    /// Flattens every parameter into one f64 vector (name order).
    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|e| e.value.data().iter().map(|v| v.as_f64()))
            .collect()
    }

    pub fn unflatten(&mut self, flat: &[f64]) {
        let mut it = flat.iter();
        for e in &mut self.entries {
            for v in e.value.data_mut() {
                *v = T::lit(*it.next().expect("flat length"));
            }
        }
    }
}

/// Which parameter groups receive gradients and updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradMask {
    pub vae: bool,
    pub patch_embed: bool,
    pub base: bool,
    pub lora: bool,
}

impl GradMask {
    pub const ALL: GradMask = GradMask {
        vae: true,
        patch_embed: true,
        base: true,
        lora: true,
    };

    /// Adapter fine-tuning: LoRA pairs and the patch embedding only.
    pub const ADAPTER: GradMask = GradMask {
        vae: false,
        patch_embed: true,
        base: false,
        lora: true,
    };

    pub fn allows(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Vae => self.vae,
            ParamGroup::PatchEmbed => self.patch_embed,
            ParamGroup::Base => self.base,
            ParamGroup::Lora => self.lora,
        }
    }
}

/// Gradient buffers parallel to a [`ParamStore`]; frozen entries are `None`
/// and stay exactly zero when read back.
#[derive(Clone, Debug)]
pub struct Grads<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn new(store: &ParamStore<T>, mask: GradMask) -> Self {
        Self {
            slots: store
                .entries
                .iter()
                .map(|e| mask.allows(e.group).then(|| Tensor::zeros(e.value.shape())))
                .collect(),
        }
    }

    pub fn slot(&mut self, id: ParamId) -> Option<&mut Tensor<T>> {
        self.slots[id.0].as_mut()
    }

    pub fn pair(&mut self, a: ParamId, b: ParamId) -> (Option<&mut Tensor<T>>, Option<&mut Tensor<T>>) {
        assert_ne!(a.0, b.0);
        if a.0 < b.0 {
            let (lo, hi) = self.slots.split_at_mut(b.0);
            (lo[a.0].as_mut(), hi[0].as_mut())
        } else {
            let (lo, hi) = self.slots.split_at_mut(a.0);
            (hi[0].as_mut(), lo[b.0].as_mut())
        }
    }

    pub fn is_tracked(&self, id: ParamId) -> bool {
        self.slots[id.0].is_some()
    }

    pub fn get(&self, index: usize) -> Option<&Tensor<T>> {
        self.slots[index].as_ref()
    }

    pub fn zero(&mut self) {
        for t in self.slots.iter_mut().flatten() {
            t.fill(T::zero());
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in self.slots.iter_mut().flatten() {
            t.scale(s);
        }
    }

    /// Flattened gradient in store order, zeros for frozen entries.
    pub fn flatten(&self, store: &ParamStore<T>) -> Vec<f64> {
        let mut out = Vec::with_capacity(store.count(None));
        for (slot, e) in self.slots.iter().zip(&store.entries) {
            match slot {
                Some(t) => out.extend(t.data().iter().map(|v| v.as_f64())),
                None => out.extend(std::iter::repeat_n(0.0, e.value.numel())),
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().flatten().all(|t| t.all_finite())
    }

    /// Euclidean norm over every tracked entry.
    pub fn norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .flat_map(|t| t.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Decoupled-weight-decay Adam. Moments are kept in f64.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Real>(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<f64>> = store.entries.iter().map(|e| vec![0.0; e.value.numel()]).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Applies one update to every parameter with a gradient slot.
    pub fn update<T: Real>(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>, lr: f64) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, e) in store.entries.iter_mut().enumerate() {
            let Some(g) = grads.slots[i].as_ref() else {
                continue;
            };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, p) in e.value.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j].as_f64();
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let mut pv = p.as_f64();
                pv -= lr * c.weight_decay * pv;
                pv -= lr * mhat / (vhat.sqrt() + c.eps);
                *p = T::lit(pv);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_groups_are_untouched() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("a", ParamGroup::Base, Tensor::full(&[3], 1.0));
        let b = store.add("b", ParamGroup::Lora, Tensor::full(&[2], 1.0));
        let mut grads = Grads::new(&store, GradMask::ADAPTER);
        assert!(grads.slot(a).is_none());
        grads.slot(b).unwrap().fill(0.5);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        opt.update(&mut store, &grads, 1e-2);
        assert_eq!(store.get(a).data(), &[1.0, 1.0, 1.0]);
        assert!(store.get(b).data().iter().all(|&v| v < 1.0));
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", ParamGroup::Base, Tensor::full(&[4], 0.25));
        let mut grads = Grads::new(&store, GradMask::ALL);
        grads.slot(a).unwrap().fill(3.0);
        let before = store.clone();
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        opt.update(&mut store, &grads, 0.0);
        assert_eq!(store, before);
    }
}
