//! Token-level multi-objective decoding.
//!
//! The next-token distribution of an ensemble is the locally renormalized
//! weighted geometric mean of its members' distributions,
//! `p(t) ∝ prod_i pi_i(t | prefix)^{w_i}`, i.e. the softmax of
//! `sum_i w_i log pi_i(t | prefix)`.

use crate::error::{Error, Result};
use crate::policy::{log_softmax, sample_from, Decoder, EnvSpec, PromptId, Response, TabularPolicy, TokenId};
use crate::rng::SeededRng;
use crate::weight::WeightVector;

#[derive(Debug, Clone)]
pub struct DecoderEnsemble {
    policies: Vec<TabularPolicy>,
    weight: WeightVector,
    /// When set, each member contributes `log pi_i - log pi_ref` instead of
    /// `log pi_i`.
    reference: Option<TabularPolicy>,
}

impl DecoderEnsemble {
    pub fn new(policies: Vec<TabularPolicy>, weight: WeightVector) -> Result<Self> {
        let first = policies
            .first()
            .ok_or_else(|| Error::ShapeMismatch("empty ensemble".into()))?;
        if policies.len() != weight.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} policies but {} weights",
                policies.len(),
                weight.len()
            )));
        }
        if policies.iter().any(|p| !p.same_shape(first)) {
            return Err(Error::ShapeMismatch("ensemble members differ in shape".into()));
        }
        Ok(Self {
            policies,
            weight,
            reference: None,
        })
    }

    pub fn with_reference(mut self, reference: TabularPolicy) -> Result<Self> {
        if !reference.same_shape(&self.policies[0]) {
            return Err(Error::ShapeMismatch("reference differs from ensemble members".into()));
        }
        self.reference = Some(reference);
        Ok(self)
    }

    pub fn weight(&self) -> &WeightVector {
        &self.weight
    }

    pub fn policies(&self) -> &[TabularPolicy] {
        &self.policies
    }
}

impl Decoder for DecoderEnsemble {
    fn env(&self) -> &EnvSpec {
        self.policies[0].env()
    }

    fn next_log_weights(&self, prompt: PromptId, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let v = self.env().vocab_size;
        let reference = match &self.reference {
            Some(r) => Some(log_softmax(r.next_logits(prompt, prefix)?)),
            None => None,
        };
        let mut combined = vec![0.0; v];
        for (policy, &wi) in self.policies.iter().zip(self.weight.as_slice()) {
            if wi == 0.0 {
                continue;
            }
            let lp = log_softmax(policy.next_logits(prompt, prefix)?);
            for t in 0..v {
                let term = match &reference {
                    Some(r) => lp[t] - r[t],
                    None => lp[t],
                };
                combined[t] += wi * term;
            }
        }
        Ok(combined)
    }
}

pub fn mod_next_distribution(ens: &DecoderEnsemble, prompt: PromptId, prefix: &[TokenId]) -> Result<Vec<f64>> {
    ens.next_distribution(prompt, prefix)
}

pub fn mod_generate(ens: &DecoderEnsemble, prompt: PromptId, temperature: f64, rng: &mut SeededRng) -> Result<Response> {
    sample_from(ens, prompt, temperature, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{enumerate_responses, softmax};
    use crate::rng::seeded;
    use std::collections::HashMap;

    #[test]
    fn identical_members_reproduce_the_policy() {
        let e = EnvSpec::new(5, 3, 1, 0).unwrap();
        let p = TabularPolicy::random_normal(&e, 1.0, &mut seeded(1));
        let ens = DecoderEnsemble::new(vec![p.clone(), p.clone()], WeightVector::pair(0.3).unwrap()).unwrap();
        let a = mod_next_distribution(&ens, PromptId(0), &[2, 4]).unwrap();
        let b = softmax(p.next_logits(PromptId(0), &[2, 4]).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(
            mod_generate(&ens, PromptId(0), 0.0, &mut seeded(0)).unwrap(),
            p.greedy(PromptId(0)).unwrap()
        );
    }

    #[test]
    fn vertex_selects_member() {
        let e = EnvSpec::new(5, 3, 1, 0).unwrap();
        let p = TabularPolicy::random_normal(&e, 1.0, &mut seeded(2));
        let q = TabularPolicy::random_normal(&e, 1.0, &mut seeded(3));
        let ens = DecoderEnsemble::new(vec![p.clone(), q], WeightVector::pair(1.0).unwrap()).unwrap();
        let a = mod_next_distribution(&ens, PromptId(0), &[1]).unwrap();
        let b = softmax(p.next_logits(PromptId(0), &[1]).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn two_token_policy(e: &EnvSpec, p0: f64) -> TabularPolicy {
        let mut pol = TabularPolicy::uniform(e);
        let logit = (p0 / (1.0 - p0)).ln();
        for pre in [vec![], vec![0], vec![1]] {
            pol.bump_logits(PromptId(0), &pre, &[logit, 0.0]).unwrap();
        }
        pol
    }

    #[test]
    fn symmetric_geometric_mean() {
        let e = EnvSpec::new(2, 2, 1, 0).unwrap();
        let ens = DecoderEnsemble::new(
            vec![two_token_policy(&e, 0.8), two_token_policy(&e, 0.2)],
            WeightVector::pair(0.5).unwrap(),
        )
        .unwrap();
        let d = mod_next_distribution(&ens, PromptId(0), &[]).unwrap();
        assert!((d[0] - 0.5).abs() < 1e-12 && (d[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn reference_subtraction_is_shift_free_for_uniform_reference() {
        let e = EnvSpec::new(4, 2, 1, 0).unwrap();
        let p = TabularPolicy::random_normal(&e, 1.0, &mut seeded(4));
        let q = TabularPolicy::random_normal(&e, 1.0, &mut seeded(5));
        let w = WeightVector::pair(0.6).unwrap();
        let plain = DecoderEnsemble::new(vec![p.clone(), q.clone()], w.clone()).unwrap();
        let sub = DecoderEnsemble::new(vec![p, q], w).unwrap().with_reference(TabularPolicy::uniform(&e)).unwrap();
        let a = mod_next_distribution(&plain, PromptId(0), &[3]).unwrap();
        let b = mod_next_distribution(&sub, PromptId(0), &[3]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn sequence_distribution_matches_enumeration() {
        let e = EnvSpec::new(2, 2, 1, 0).unwrap();
        let p = TabularPolicy::random_normal(&e, 1.0, &mut seeded(6));
        let q = TabularPolicy::random_normal(&e, 1.0, &mut seeded(7));
        let ens = DecoderEnsemble::new(vec![p.clone(), q.clone()], WeightVector::pair(0.5).unwrap()).unwrap();
        // Oracle: per-step renormalized product of member conditionals.
        let mut exact = HashMap::new();
        for y in enumerate_responses(&e).unwrap() {
            let mut prob = 1.0;
            for t in 0..2 {
                let pre = &y.tokens()[..t];
                let a = softmax(p.next_logits(PromptId(0), pre).unwrap());
                let b = softmax(q.next_logits(PromptId(0), pre).unwrap());
                let un: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x * y).sqrt()).collect();
                let z: f64 = un.iter().sum();
                prob *= un[y.tokens()[t] as usize] / z;
            }
            exact.insert(y, prob);
        }
        let n = 100_000;
        let mut rng = seeded(8);
        let mut counts: HashMap<Response, usize> = HashMap::new();
        for _ in 0..n {
            *counts.entry(mod_generate(&ens, PromptId(0), 1.0, &mut rng).unwrap()).or_default() += 1;
        }
        let tv: f64 = exact
            .iter()
            .map(|(y, &p)| (p - *counts.get(y).unwrap_or(&0) as f64 / n as f64).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.01, "total variation {tv}");
        let a = mod_generate(&ens, PromptId(0), 1.0, &mut seeded(9)).unwrap();
        let b = mod_generate(&ens, PromptId(0), 1.0, &mut seeded(9)).unwrap();
        assert_eq!(a, b);
    }
}
