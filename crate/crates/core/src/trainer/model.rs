use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::disentangle::Architecture;
use crate::numerics::{LinearLayer, Matrix, Mlp, Parameterized, SeededRng, SgdSlots};
use crate::{DfaError, Result};

/// Parameter groups, each with its own objective and optimiser slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    /// Domain-specific encoders and the domain classifier.
    Specific,
    /// Invariant encoder, both label classifiers and both projections.
    Invariant,
    /// Mask network.
    Mask,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Specific, Group::Invariant, Group::Mask];

    fn index(self) -> usize {
        match self {
            Group::Specific => 0,
            Group::Invariant => 1,
            Group::Mask => 2,
        }
    }
}

/// Problem dimensions a model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub input_dim: usize,
    pub num_sources: usize,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub dims: Dims,
    pub specific: Vec<Mlp>,
    pub domain_classifier: Mlp,
    pub invariant: Mlp,
    pub classifier_sup: Mlp,
    pub classifier_inf: Mlp,
    pub fc_dr: LinearLayer,
    pub fc_cr: LinearLayer,
    pub mask_net: Mlp,
    pub slots: [SgdSlots; 3],
    /// Completed epochs.
    pub epoch: usize,
}

impl ModelState {
    pub fn init(arch: &Architecture, dims: Dims, rng: &mut SeededRng) -> Result<Self> {
        arch.validate()?;
        if dims.input_dim == 0 || dims.num_sources < 2 || dims.num_classes < 2 {
            return Err(DfaError::InvalidConfig(format!("unusable model dimensions {dims:?}")));
        }
        let d = arch.feature_dim;
        let invariant = arch.encoder(dims.input_dim, rng);
        let specific = (0..dims.num_sources)
            .map(|_| arch.encoder(dims.input_dim, rng))
            .collect();
        let domain_classifier = arch.domain_classifier(dims.num_sources, rng);
        let classifier_sup = Mlp::init(&[d, dims.num_classes], rng);
        let classifier_inf = Mlp::init(&[d, dims.num_classes], rng);
        let fc_dr = LinearLayer::init(2 * d, d, rng);
        let fc_cr = LinearLayer::init(2 * d, d, rng);
        let mask_net = arch.mask_net(rng);
        Ok(ModelState {
            dims,
            specific,
            domain_classifier,
            invariant,
            classifier_sup,
            classifier_inf,
            fc_dr,
            fc_cr,
            mask_net,
            slots: Default::default(),
            epoch: 0,
        })
    }

    /// Total parameter count for an architecture, `None` on overflow.
    pub fn expected_param_count(arch: &Architecture, dims: Dims) -> Option<usize> {
        fn mlp(widths: &[usize]) -> Option<usize> {
            widths.windows(2).try_fold(0usize, |acc, w| {
                acc.checked_add(w[0].checked_mul(w[1])?.checked_add(w[1])?)
            })
        }
        let d = arch.feature_dim;
        let chain = |first: usize, hidden: &[usize], last: usize| {
            let mut w = vec![first];
            w.extend_from_slice(hidden);
            w.push(last);
            mlp(&w)
        };
        let encoder = chain(dims.input_dim, &arch.encoder_hidden, d)?;
        let encoders = encoder.checked_mul(dims.num_sources.checked_add(1)?)?;
        let parts = [
            encoders,
            chain(d, &arch.domain_classifier_hidden, dims.num_sources)?,
            mlp(&[d, dims.num_classes])?.checked_mul(2)?,
            mlp(&[d.checked_mul(2)?, d])?.checked_mul(2)?,
            chain(d, &arch.mask_hidden, d.checked_mul(2)?)?,
        ];
        parts.into_iter().try_fold(0usize, |a, b| a.checked_add(b))
    }

    pub fn feature_dim(&self) -> usize {
        self.invariant.output_dim()
    }

    /// Named parameters of one group in visiting order.
    pub fn group(&self, group: Group) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        match group {
            Group::Specific => {
                for (d, enc) in self.specific.iter().enumerate() {
                    push_named(&mut out, &format!("specific.{d}"), enc.params());
                }
                push_named(&mut out, "domain_classifier", self.domain_classifier.params());
            }
            Group::Invariant => {
                push_named(&mut out, "invariant", self.invariant.params());
                push_named(&mut out, "classifier_sup", self.classifier_sup.params());
                push_named(&mut out, "classifier_inf", self.classifier_inf.params());
                push_named(&mut out, "fc_dr", self.fc_dr.params());
                push_named(&mut out, "fc_cr", self.fc_cr.params());
            }
            Group::Mask => push_named(&mut out, "mask_net", self.mask_net.params()),
        }
        out
    }

    pub fn group_mut(&mut self, group: Group) -> Vec<&mut Matrix> {
        match group {
            Group::Specific => {
                let mut out: Vec<&mut Matrix> =
                    self.specific.iter_mut().flat_map(|e| e.params_mut()).collect();
                out.extend(self.domain_classifier.params_mut());
                out
            }
            Group::Invariant => {
                let mut out = self.invariant.params_mut();
                out.extend(self.classifier_sup.params_mut());
                out.extend(self.classifier_inf.params_mut());
                out.extend(self.fc_dr.params_mut());
                out.extend(self.fc_cr.params_mut());
                out
            }
            Group::Mask => self.mask_net.params_mut(),
        }
    }

    /// Owned copy of one group's parameters.
    pub fn snapshot(&self, group: Group) -> Vec<Matrix> {
        self.group(group).into_iter().map(|(_, m)| m.clone()).collect()
    }

    /// Overwrites one group's parameters; shapes must match.
    pub fn set_group(&mut self, group: Group, values: &[Matrix]) -> Result<()> {
        let params = self.group_mut(group);
        if params.len() != values.len() {
            return Err(DfaError::shape(
                "ModelState::set_group",
                format!("{} matrices for {} parameters", values.len(), params.len()),
            ));
        }
        for (p, v) in params.into_iter().zip(values) {
            if p.shape() != v.shape() {
                return Err(DfaError::shape(
                    "ModelState::set_group",
                    format!("{:?} into {:?}", v.shape(), p.shape()),
                ));
            }
            *p = v.clone();
        }
        Ok(())
    }

    pub fn slots_mut(&mut self, group: Group) -> &mut SgdSlots {
        &mut self.slots[group.index()]
    }

    pub fn slots(&self, group: Group) -> &SgdSlots {
        &self.slots[group.index()]
    }

    /// Every parameter keyed by its path, e.g. `invariant.layers.0.weight`.
    pub fn named_params(&self) -> BTreeMap<String, Matrix> {
        Group::ALL
            .into_iter()
            .flat_map(|g| self.group(g))
            .map(|(name, m)| (name, m.clone()))
            .collect()
    }

    /// Loads parameters written by [`named_params`](Self::named_params). The
    /// key set and every shape must match exactly.
    pub fn load_named(&mut self, mut named: BTreeMap<String, Matrix>) -> Result<()> {
        for g in Group::ALL {
            let names: Vec<String> = self.group(g).into_iter().map(|(n, _)| n).collect();
            let mut values = Vec::with_capacity(names.len());
            for name in names {
                let v = named
                    .remove(&name)
                    .ok_or_else(|| DfaError::InvalidArgument(format!("missing parameter {name}")))?;
                values.push(v);
            }
            self.set_group(g, &values)?;
        }
        if let Some(extra) = named.keys().next() {
            return Err(DfaError::InvalidArgument(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        Group::ALL
            .into_iter()
            .all(|g| self.group(g).iter().all(|(_, m)| m.is_finite()))
    }
}

fn push_named<'a>(out: &mut Vec<(String, &'a Matrix)>, prefix: &str, params: Vec<&'a Matrix>) {
    for (i, m) in params.into_iter().enumerate() {
        let kind = if i % 2 == 0 { "weight" } else { "bias" };
        out.push((format!("{prefix}.layers.{}.{kind}", i / 2), m));
    }
}
