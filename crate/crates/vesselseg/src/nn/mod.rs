//! Neural network stack: parameter storage, tensor operations with
//! hand-written backward passes, and the segmentation/translation models.
//!
//! Everything is generic over the float type so training runs in f32 while
//! gradient verification runs in f64. All computation is sequential with a
//! fixed accumulation order; identical inputs give bit-identical outputs.

pub mod checkpoint;
pub mod model;
pub mod ops;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

/// Element type for network computation.
pub trait Scalar: ndarray::NdFloat + num_traits::NumCast + std::iter::Sum + Default {
    fn from_f64(v: f64) -> Self {
        num_traits::NumCast::from(v).expect("finite f64 converts to scalar")
    }
    fn as_f64(self) -> f64 {
        num_traits::NumCast::from(self).expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Which part of the network a parameter belongs to. Drives parameter-count
/// decomposition, the pair-step freeze rule, and transfer-learning warm
/// starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    DecoderSeg,
    DecoderTrans,
    NddrSeg,
    NddrTrans,
    HeadSeg,
    HeadTrans,
    Sigma,
}

impl ParamGroup {
    /// Groups updated on a pair (unannotated) training step: the shared
    /// encoder and the translation branch only.
    pub fn trained_on_pair_step(self) -> bool {
        matches!(
            self,
            ParamGroup::Encoder
                | ParamGroup::DecoderTrans
                | ParamGroup::NddrTrans
                | ParamGroup::HeadTrans
        )
    }
}

/// A named parameter tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<F> {
    pub name: String,
    pub group: ParamGroup,
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
}

/// Stable handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of all parameters of one model.
///
/// Registration order is construction order and is stable across runs, so
/// checkpoints can match parameters by name and index.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: ArrayD<F>) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        let grad = ArrayD::zeros(value.raw_dim());
        self.params.push(Param {
            name,
            group,
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<F> {
        &self.params[id.0].value
    }

    /// Weight view plus gradient accumulator of the same parameter.
    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&ArrayD<F>, &mut ArrayD<F>) {
        let p = &mut self.params[id.0];
        (&p.value, &mut p.grad)
    }

    /// Disjoint borrows for a layer backward pass: the value and gradient of
    /// parameter `a` plus the gradient of parameter `b`.
    pub fn split_value_grads(
        &mut self,
        a: ParamId,
        b: ParamId,
    ) -> (&ArrayD<F>, &mut ArrayD<F>, &mut ArrayD<F>) {
        assert_ne!(a.0, b.0, "split_value_grads needs distinct parameters");
        if a.0 < b.0 {
            let (left, right) = self.params.split_at_mut(b.0);
            let pa = &mut left[a.0];
            (&pa.value, &mut pa.grad, &mut right[0].grad)
        } else {
            let (left, right) = self.params.split_at_mut(a.0);
            let pb = &mut left[b.0];
            let pa = &mut right[0];
            (&pa.value, &mut pa.grad, &mut pb.grad)
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<F>)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(F::zero());
        }
    }

    /// Number of scalar values across all parameters.
    pub fn count_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Number of scalar values in one group.
    pub fn count_scalars_in(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.len())
            .sum()
    }

    /// Raw little-endian f32 bytes of every parameter in name order;
    /// the checkpoint digest and freeze tests build on this.
    pub fn digest_bytes(&self, filter: impl Fn(ParamGroup) -> bool) -> Vec<u8> {
        let mut names: Vec<&Param<F>> =
            self.params.iter().filter(|p| filter(p.group)).collect();
        names.sort_by(|a, b| a.name.cmp(&b.name));
        let mut bytes = Vec::new();
        for p in names {
            bytes.extend_from_slice(p.name.as_bytes());
            for v in p.value.iter() {
                bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        bytes
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn store_counts_and_lookup() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("enc/w", ParamGroup::Encoder, ArrayD::zeros(vec![4, 3]));
        let b = store.add("sigma/s", ParamGroup::Sigma, ArrayD::zeros(vec![1]));
        assert_eq!(store.count_scalars(), 13);
        assert_eq!(store.count_scalars_in(ParamGroup::Encoder), 12);
        assert_eq!(store.count_scalars_in(ParamGroup::Sigma), 1);
        assert_eq!(store.find("enc/w"), Some(a));
        assert_eq!(store.find("sigma/s"), Some(b));
        assert_eq!(store.find("nope"), None);
    }

    #[test]
    fn pair_step_group_filter() {
        assert!(ParamGroup::Encoder.trained_on_pair_step());
        assert!(ParamGroup::DecoderTrans.trained_on_pair_step());
        assert!(ParamGroup::NddrTrans.trained_on_pair_step());
        assert!(ParamGroup::HeadTrans.trained_on_pair_step());
        assert!(!ParamGroup::DecoderSeg.trained_on_pair_step());
        assert!(!ParamGroup::NddrSeg.trained_on_pair_step());
        assert!(!ParamGroup::HeadSeg.trained_on_pair_step());
        assert!(!ParamGroup::Sigma.trained_on_pair_step());
    }
}
