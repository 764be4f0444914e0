//! Exact Shannon quantities over small discrete joints, in nats.

use alloc::format;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Result};
use crate::math::{self, xlogx};
use crate::policy::{conditional_distribution, PolicyParams};

/// `P(x) π(z|x)` stored as a prompt marginal and a row-stochastic matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteJoint {
    pub prompt_marginal: Vec<f64>,
    /// Row-major `|X| × |Z|`.
    pub conditional: Vec<f64>,
    pub num_z: usize,
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(domain(format!("{what} is empty")));
    }
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(domain(format!("{what} has a negative or non-finite entry")));
    }
    let tol = 1e-12f64.max(p.len() as f64 * 1e-15);
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > tol {
        return Err(domain(format!("{what} sums to {sum}, not 1")));
    }
    Ok(())
}

impl DiscreteJoint {
    pub fn new(prompt_marginal: Vec<f64>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.len() != prompt_marginal.len() {
            return Err(domain("one conditional row per prompt is required"));
        }
        let num_z = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != num_z) {
            return Err(domain("conditional rows differ in length"));
        }
        let joint = Self {
            prompt_marginal,
            conditional: rows.concat(),
            num_z,
        };
        joint.validate()?;
        Ok(joint)
    }

    /// Uniform prompt marginal over `prompts`, rows from the policy's exact
    /// reasoning distributions.
    pub fn from_policy(params: &PolicyParams, prompts: &[usize]) -> Result<Self> {
        let rows = prompts
            .iter()
            .map(|&x| conditional_distribution(params, x))
            .collect::<Result<Vec<_>>>()?;
        let w = 1.0 / prompts.len() as f64;
        Self::new(alloc::vec![w; prompts.len()], rows)
    }

    pub fn validate(&self) -> Result<()> {
        check_distribution(&self.prompt_marginal, "prompt marginal")?;
        for x in 0..self.num_x() {
            check_distribution(self.row(x), "conditional row")?;
        }
        Ok(())
    }

    pub fn num_x(&self) -> usize {
        self.prompt_marginal.len()
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.conditional[x * self.num_z..(x + 1) * self.num_z]
    }

    /// `p(z) = Σ_x P(x) π(z|x)`.
    pub fn marginal_z(&self) -> Vec<f64> {
        let mut pz = alloc::vec![0.0; self.num_z];
        for (x, &px) in self.prompt_marginal.iter().enumerate() {
            math::axpy(px, self.row(x), &mut pz);
        }
        pz
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Entropies {
    pub h_x: f64,
    pub h_z: f64,
    pub h_z_given_x: f64,
    pub h_joint: f64,
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&v| xlogx(v)).sum::<f64>()
}

pub fn exact_entropies(j: &DiscreteJoint) -> Entropies {
    let h_x = entropy(&j.prompt_marginal);
    let h_z = entropy(&j.marginal_z());
    let h_z_given_x: f64 = j
        .prompt_marginal
        .iter()
        .enumerate()
        .map(|(x, &px)| px * entropy(j.row(x)))
        .sum();
    let h_joint = -j
        .prompt_marginal
        .iter()
        .enumerate()
        .flat_map(|(x, &px)| j.row(x).iter().map(move |&pz| xlogx(px * pz)))
        .sum::<f64>();
    Entropies {
        h_x,
        h_z,
        h_z_given_x,
        h_joint,
    }
}

/// `I(X;Z) = E[log π(z|x) / p(z)]`.
pub fn exact_mi(j: &DiscreteJoint) -> f64 {
    let pz = j.marginal_z();
    let mut total = 0.0;
    for (x, &px) in j.prompt_marginal.iter().enumerate() {
        if px == 0.0 {
            continue;
        }
        for (&pzx, &m) in j.row(x).iter().zip(&pz) {
            if pzx > 0.0 {
                total += px * pzx * math::ln(pzx / m);
            }
        }
    }
    total.max(0.0)
}

/// Mixes every conditional row with a prompt-independent template `q`.
pub fn template_mix(j: &DiscreteJoint, q: &[f64], alpha: f64) -> Result<DiscreteJoint> {
    if q.len() != j.num_z {
        return Err(domain("template length differs from |Z|"));
    }
    check_distribution(q, "template")?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(domain("mixing weight must lie in [0, 1]"));
    }
    let conditional = (0..j.num_x())
        .flat_map(|x| j.row(x).iter().zip(q).map(|(&p, &t)| (1.0 - alpha) * p + alpha * t))
        .collect();
    Ok(DiscreteJoint {
        prompt_marginal: j.prompt_marginal.clone(),
        conditional,
        num_z: j.num_z,
    })
}

/// Binary entropy in nats.
pub fn binary_entropy(p: f64) -> f64 {
    -(xlogx(p) + xlogx(1.0 - p))
}

/// Continuity bound `f(ε) = 2(δ ln(|X||Z| − 1) + h₂(δ))` with `δ = √(ε/2)`.
pub fn fannes_mi_bound(epsilon: f64, alphabet_x: usize, alphabet_z: usize) -> Result<f64> {
    if alphabet_x < 2 || alphabet_z < 2 {
        return Err(domain("alphabets must have at least 2 symbols"));
    }
    if !(epsilon >= 0.0) {
        return Err(domain("epsilon must be nonnegative"));
    }
    let delta = math::sqrt(epsilon / 2.0);
    if delta > 1.0 {
        return Err(domain(format!("delta = {delta} exceeds 1; the bound is vacuous")));
    }
    let n = (alphabet_x * alphabet_z) as f64;
    Ok(2.0 * (delta * math::ln(n - 1.0) + binary_entropy(delta)))
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            if a == 0.0 {
                0.0
            } else if b == 0.0 {
                f64::INFINITY
            } else {
                a * math::ln(a / b)
            }
        })
        .sum::<f64>()
        .max(0.0)
}

/// `max_x KL(π_θ(·|x) ‖ π_0(·|x))`.
pub fn sup_kl(j_theta: &DiscreteJoint, j_0: &DiscreteJoint) -> f64 {
    (0..j_theta.num_x())
        .map(|x| kl(j_theta.row(x), j_0.row(x)))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiChange {
    pub delta_in: f64,
    pub delta_marg: f64,
    pub delta_i: f64,
}

/// Splits `I_θ − I_0` into marginal-entropy and conditional-entropy changes.
/// `delta_i` is computed directly from the two mutual informations.
pub fn mi_change_decomposition(j_theta: &DiscreteJoint, j_0: &DiscreteJoint) -> Result<MiChange> {
    if j_theta.num_z != j_0.num_z || j_theta.num_x() != j_0.num_x() {
        return Err(config("joints have different alphabets"));
    }
    let same_marginal = j_theta
        .prompt_marginal
        .iter()
        .zip(&j_0.prompt_marginal)
        .all(|(a, b)| (a - b).abs() <= 1e-12);
    if !same_marginal {
        return Err(config("joints must share the prompt marginal"));
    }
    let a = exact_entropies(j_theta);
    let b = exact_entropies(j_0);
    Ok(MiChange {
        delta_in: a.h_z_given_x - b.h_z_given_x,
        delta_marg: a.h_z - b.h_z,
        delta_i: exact_mi(j_theta) - exact_mi(j_0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn sample_joint() -> DiscreteJoint {
        // joint [[0.4, 0.1], [0.1, 0.4]]
        DiscreteJoint::new(vec![0.5, 0.5], vec![vec![0.8, 0.2], vec![0.2, 0.8]]).unwrap()
    }

    #[test]
    fn hand_evaluated_mi() {
        let j = sample_joint();
        let by_hand = 2.0 * 0.4 * (0.4f64 / 0.25).ln() + 2.0 * 0.1 * (0.1f64 / 0.25).ln();
        assert!((exact_mi(&j) - by_hand).abs() < 1e-15);
        assert!((exact_mi(&j) - 0.1927).abs() < 1e-4);
        let e = exact_entropies(&j);
        assert!((e.h_z - 2f64.ln()).abs() < 1e-15);
        assert!((e.h_z_given_x - 0.5004).abs() < 1e-4);
    }

    #[test]
    fn independent_and_diagonal_extremes() {
        let j = DiscreteJoint::new(vec![0.5, 0.5], vec![vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        assert_eq!(exact_mi(&j), 0.0);
        let e = exact_entropies(&j);
        assert!((e.h_z - 2f64.ln()).abs() < 1e-15);
        assert!((e.h_z_given_x - 2f64.ln()).abs() < 1e-15);

        let rows = (0..4).map(|x| (0..4).map(|z| if x == z { 1.0 } else { 0.0 }).collect()).collect();
        let j = DiscreteJoint::new(vec![0.25; 4], rows).unwrap();
        assert!((exact_mi(&j) - 4f64.ln()).abs() < 1e-15);
        assert_eq!(exact_entropies(&j).h_z_given_x, 0.0);
    }

    #[test]
    fn invalid_joints_rejected() {
        assert!(DiscreteJoint::new(vec![0.5, 0.5], vec![vec![0.9, 0.2], vec![0.5, 0.5]]).is_err());
        assert!(DiscreteJoint::new(vec![0.7, 0.5], vec![vec![0.5, 0.5], vec![0.5, 0.5]]).is_err());
        assert!(DiscreteJoint::new(vec![1.0], vec![vec![-0.1, 1.1]]).is_err());
    }

    #[test]
    fn template_mixing_examples() {
        let j = sample_joint();
        let q = [0.5, 0.5];
        assert_eq!(template_mix(&j, &q, 0.0).unwrap(), j);
        assert!(exact_mi(&template_mix(&j, &q, 1.0).unwrap()).abs() < 1e-15);
        let half = exact_mi(&template_mix(&j, &q, 0.5).unwrap());
        // rows become (0.65, 0.35) and (0.35, 0.65)
        let by_hand = 0.65 * (0.65f64 / 0.5).ln() + 0.35 * (0.35f64 / 0.5).ln();
        assert!((half - by_hand).abs() < 1e-15);
        assert!((half - 0.0457).abs() < 1e-4);
        assert!(half <= 0.5 * exact_mi(&j));
        assert!(template_mix(&j, &[0.5, 0.6], 0.5).is_err());
        assert!(template_mix(&j, &q, 1.5).is_err());
    }

    #[test]
    fn fannes_plug_in() {
        assert_eq!(fannes_mi_bound(0.0, 4, 4).unwrap(), 0.0);
        let h = binary_entropy(0.1);
        assert!((h - 0.3251).abs() < 1e-4);
        let f = fannes_mi_bound(0.02, 4, 4).unwrap();
        assert!((f - 2.0 * (0.1 * 15f64.ln() + h)).abs() < 1e-14);
        assert!((f - 1.1918).abs() < 1e-4);
        assert!(fannes_mi_bound(2.5, 2, 2).is_err());
        assert!(fannes_mi_bound(0.1, 1, 4).is_err());
    }

    #[test]
    fn decomposition_closed_forms() {
        let n = 3;
        let diag = (0..n).map(|x| (0..n).map(|z| if x == z { 1.0 } else { 0.0 }).collect()).collect();
        let j0 = DiscreteJoint::new(vec![1.0 / 3.0; n], diag).unwrap();
        let flat = DiscreteJoint::new(vec![1.0 / 3.0; n], vec![vec![1.0 / 3.0; n]; n]).unwrap();
        let d = mi_change_decomposition(&flat, &j0).unwrap();
        assert!((d.delta_in - 3f64.ln()).abs() < 1e-12);
        assert!(d.delta_marg.abs() < 1e-12);
        assert!((d.delta_i + 3f64.ln()).abs() < 1e-12);

        let same = mi_change_decomposition(&j0, &j0).unwrap();
        assert_eq!((same.delta_in, same.delta_marg, same.delta_i), (0.0, 0.0, 0.0));

        let other = DiscreteJoint::new(vec![0.5, 0.25, 0.25], vec![vec![1.0 / 3.0; n]; n]).unwrap();
        assert!(mi_change_decomposition(&other, &j0).is_err());
    }
}
