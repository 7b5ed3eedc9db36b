//! Domain discriminator over bridge-path backbone features.

use std::collections::BTreeSet;

use edgebridge_tensor::{log_sum_exp, Bound, Float, Graph, ParamSet, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Cursor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorArch {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub n_domains: usize,
    pub slope: f64,
}

impl DiscriminatorArch {
    pub fn new(input: usize, n_domains: usize) -> Self {
        Self {
            input,
            hidden: vec![1024, 512, 256],
            n_domains,
            slope: 0.2,
        }
    }

    pub fn init<T: Float>(&self, rng: &mut impl Rng) -> ParamSet<T> {
        let mut ps = ParamSet::new();
        let mut inp = self.input;
        for (i, &h) in self.hidden.iter().enumerate() {
            nn::push_linear(&mut ps, &format!("fc{i}"), h, inp, true, rng);
            inp = h;
        }
        nn::push_linear(&mut ps, "head", self.n_domains, inp, true, rng);
        ps
    }

    /// Logits `[n, N]`.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, features: &BridgeFeatures) -> Var {
        let mut cur = Cursor::new(p);
        let mut h = features.var;
        for _ in &self.hidden {
            let y = nn::linear(g, &mut cur, h, true);
            h = g.leaky_relu(y, T::of(self.slope));
        }
        let out = nn::linear(g, &mut cur, h, true);
        cur.finish();
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    /// `B(I)` on a raw augmented view.
    Raw,
    /// `B(Ψ_n(I))` on a bridge-mapped view.
    Bridge,
}

/// Backbone features tagged with the path that produced them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BridgeFeatures {
    var: Var,
    provenance: Provenance,
}

impl BridgeFeatures {
    pub fn tag(var: Var, provenance: Provenance) -> Self {
        Self { var, provenance }
    }

    pub fn var(&self) -> Var {
        self.var
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// Same features with gradients stopped, keeping the tag.
    pub fn detached<T: Float>(&self, g: &mut Graph<T>) -> Self {
        Self {
            var: g.detach(self.var),
            provenance: self.provenance,
        }
    }
}

/// Mean cross-entropy of discriminator logits against the true domains.
pub fn adv_loss_graph<T: Float>(
    g: &mut Graph<T>,
    arch: &DiscriminatorArch,
    params: &Bound,
    features: &BridgeFeatures,
    domains: &[usize],
) -> Result<Var> {
    if features.provenance != Provenance::Bridge {
        return Err(Error::Provenance("discriminator received raw-view features".into()));
    }
    if let Some(&d) = domains.iter().find(|&&d| d >= arch.n_domains) {
        return Err(Error::DomainOutOfRange {
            domain: d,
            n_domains: arch.n_domains,
        });
    }
    let logits = arch.forward(g, params, features);
    let ce = g.cross_entropy(logits, domains);
    Ok(g.mean(ce))
}

/// Cross-entropy of a single logit row in f64.
pub fn adv_loss(logits: &[f64], domain_id: usize) -> Result<f64> {
    if domain_id >= logits.len() {
        return Err(Error::DomainOutOfRange {
            domain: domain_id,
            n_domains: logits.len(),
        });
    }
    Ok(log_sum_exp(logits.iter().copied()) - logits[domain_id])
}

/// Named parameter groups owned by one optimizer.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OptimizerGroups {
    groups: BTreeSet<String>,
}

impl OptimizerGroups {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Self {
        Self {
            groups: names.into_iter().map(Into::into).collect(),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.groups.contains(name)
    }

    /// Errors when a group is registered with both optimizers.
    pub fn check_disjoint(&self, other: &Self) -> Result<()> {
        match self.groups.intersection(&other.groups).next() {
            Some(shared) => Err(Error::OptimizerOverlap(shared.clone())),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use edgebridge_tensor::Tensor;

    #[test]
    fn uniform_and_saturated_logits() {
        assert!((adv_loss(&[0.3; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(adv_loss(&[0.0, 20.0, 0.0], 1).unwrap() < 1e-8);
        assert!(adv_loss(&[0.0, 1.0], 2).is_err());
    }

    #[test]
    fn random_logits_match_softmax_recomputation() {
        let mut r = rng::stream(&[11]);
        for _ in 0..50 {
            let l: Vec<f64> = (0..3).map(|_| r.random_range(-5.0..5.0)).collect();
            let d = r.random_range(0..3);
            let z: f64 = l.iter().map(|v| v.exp()).sum();
            let want = -(l[d].exp() / z).ln();
            assert!((adv_loss(&l, d).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn raw_features_are_refused() {
        let arch = DiscriminatorArch {
            hidden: vec![4],
            ..DiscriminatorArch::new(3, 2)
        };
        let ps: ParamSet<f64> = arch.init(&mut rng::stream(&[1]));
        let mut g = Graph::new();
        let p = ps.bind(&mut g, true);
        let f = g.constant(Tensor::zeros(&[2, 3]));
        let raw = BridgeFeatures::tag(f, Provenance::Raw);
        assert!(matches!(adv_loss_graph(&mut g, &arch, &p, &raw, &[0, 1]), Err(Error::Provenance(_))));
        let br = BridgeFeatures::tag(f, Provenance::Bridge);
        assert!(matches!(
            adv_loss_graph(&mut g, &arch, &p, &br, &[0, 2]),
            Err(Error::DomainOutOfRange { domain: 2, .. })
        ));
        assert!(adv_loss_graph(&mut g, &arch, &p, &br, &[0, 1]).is_ok());
    }

    #[test]
    fn overlapping_groups_are_detected() {
        let a = OptimizerGroups::new(["adversary"]);
        let b = OptimizerGroups::new(["backbone", "projector", "mapper.0"]);
        assert!(a.check_disjoint(&b).is_ok());
        let c = OptimizerGroups::new(["backbone", "adversary"]);
        assert!(matches!(a.check_disjoint(&c), Err(Error::OptimizerOverlap(s)) if s == "adversary"));
    }

    #[test]
    fn default_widths() {
        let a = DiscriminatorArch::new(128, 3);
        assert_eq!(a.hidden, vec![1024, 512, 256]);
        let ps: ParamSet<f32> = a.init(&mut rng::stream(&[0]));
        assert_eq!(ps.tensors().last().unwrap().shape(), &[3]);
    }
}
