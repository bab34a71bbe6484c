//! Group-decoupled advantage estimation.
//!
//! Each reward component is normalized within the N samples of one prompt
//! (population statistics), the normalized components are summed per
//! rollout, and the resulting scores are whitened over the update
//! minibatch before being broadcast to every response token.

use crate::error::{Error, Result};
use crate::rewards::{RewardBreakdown, N_REWARD_COMPONENTS};

/// Epsilon added to standard deviations in Eq-style normalizations.
pub const ADV_EPS: f64 = 1e-6;

/// Rewards of the N rollouts of one prompt.
#[derive(Debug, Clone)]
pub struct GroupRewards {
    pub prompt_id: u64,
    pub rewards: Vec<RewardBreakdown>,
}

/// Per-rollout scalar advantages, grouped like the input.
#[derive(Debug, Clone)]
pub struct AdvantageMap {
    pub scalars: Vec<Vec<f64>>,
}

impl AdvantageMap {
    /// Broadcast one rollout's advantage to all of its response tokens.
    pub fn broadcast(&self, group: usize, rollout: usize, n_tokens: usize) -> Vec<f64> {
        vec![self.scalars[group][rollout]; n_tokens]
    }

    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.scalars.iter().flatten().copied()
    }
}

fn population_stats(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-component group normalization, per-rollout summation, then
/// minibatch whitening.
pub fn group_decoupled_advantages(groups: &[GroupRewards], eps: f64) -> Result<AdvantageMap> {
    let mut scores: Vec<Vec<f64>> = Vec::with_capacity(groups.len());
    for g in groups {
        if g.rewards.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "group for prompt {} has {} rollouts; need at least 2",
                g.prompt_id,
                g.rewards.len()
            )));
        }
        let mut s = vec![0.0; g.rewards.len()];
        for k in 0..N_REWARD_COMPONENTS {
            let comp: Vec<f64> = g.rewards.iter().map(|r| r.component(k)).collect();
            let (mu, sigma) = population_stats(&comp);
            for (j, r) in comp.iter().enumerate() {
                s[j] += (r - mu) / (sigma + eps);
            }
        }
        scores.push(s);
    }
    whiten(&mut scores, eps);
    Ok(AdvantageMap { scalars: scores })
}

/// Baseline estimator: group-normalize the total reward only, without
/// per-component decoupling or minibatch whitening.
pub fn grpo_advantages(groups: &[GroupRewards], eps: f64) -> Result<AdvantageMap> {
    let mut scores = Vec::with_capacity(groups.len());
    for g in groups {
        if g.rewards.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "group for prompt {} has {} rollouts; need at least 2",
                g.prompt_id,
                g.rewards.len()
            )));
        }
        let totals: Vec<f64> = g.rewards.iter().map(|r| r.total).collect();
        let (mu, sigma) = population_stats(&totals);
        scores.push(totals.iter().map(|t| (t - mu) / (sigma + eps)).collect());
    }
    Ok(AdvantageMap { scalars: scores })
}

fn whiten(scores: &mut [Vec<f64>], eps: f64) {
    let flat: Vec<f64> = scores.iter().flatten().copied().collect();
    let (mean, std) = population_stats(&flat);
    for group in scores.iter_mut() {
        for s in group.iter_mut() {
            *s = (*s - mean) / (std + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn breakdown(acc: f64, fmt: f64, lat: f64, len: f64, rep: f64) -> RewardBreakdown {
        RewardBreakdown {
            acc,
            fmt,
            lat,
            len,
            rep,
            total: acc + fmt + lat + len + rep,
        }
    }

    fn acc_only(values: &[f64]) -> GroupRewards {
        GroupRewards {
            prompt_id: 0,
            rewards: values.iter().map(|&a| breakdown(a, 0.0, 0.0, 0.0, 0.0)).collect(),
        }
    }

    #[test]
    fn binary_component_normalizes_to_unit_values() {
        // rewards [1,1,0,0]: mu 0.5, sigma 0.5 -> normalized [1,1,-1,-1]
        let groups = [acc_only(&[1.0, 1.0, 0.0, 0.0])];
        let mut scores = vec![vec![0.0; 4]];
        for k in 0..1 {
            let comp: Vec<f64> = groups[0].rewards.iter().map(|r| r.component(k)).collect();
            let (mu, sigma) = population_stats(&comp);
            for (j, r) in comp.iter().enumerate() {
                scores[0][j] = (r - mu) / (sigma + ADV_EPS);
            }
        }
        for (s, expect) in scores[0].iter().zip([1.0, 1.0, -1.0, -1.0]) {
            assert!((s - expect).abs() < 1e-5, "{s} vs {expect}");
        }
    }

    #[test]
    fn constant_component_contributes_zero() {
        // fmt identical across the group: sigma = 0, numerator = 0 exactly
        let g = GroupRewards {
            prompt_id: 1,
            rewards: vec![
                breakdown(1.0, 0.2, 0.0, 0.0, 0.0),
                breakdown(0.0, 0.2, 0.0, 0.0, 0.0),
                breakdown(1.0, 0.2, 0.0, 0.0, 0.0),
                breakdown(0.0, 0.2, 0.0, 0.0, 0.0),
            ],
        };
        let with_fmt = group_decoupled_advantages(&[g.clone()], ADV_EPS).unwrap();
        let mut no_fmt = g;
        for r in &mut no_fmt.rewards {
            r.fmt = 0.0;
        }
        let without = group_decoupled_advantages(&[no_fmt], ADV_EPS).unwrap();
        for (a, b) in with_fmt.scalars[0].iter().zip(&without.scalars[0]) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn shift_invariance_is_exact_on_integer_rewards() {
        let base = GroupRewards {
            prompt_id: 2,
            rewards: vec![
                breakdown(1.0, 0.0, 2.0, 0.0, 0.0),
                breakdown(0.0, 0.0, 4.0, 0.0, 0.0),
                breakdown(1.0, 0.0, 6.0, 0.0, 0.0),
            ],
        };
        let mut shifted = base.clone();
        for r in &mut shifted.rewards {
            r.lat += 3.0;
        }
        let a = group_decoupled_advantages(&[base], ADV_EPS).unwrap();
        let b = group_decoupled_advantages(&[shifted], ADV_EPS).unwrap();
        for (x, y) in a.scalars[0].iter().zip(&b.scalars[0]) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn whitened_minibatch_mean_is_tiny() {
        let groups = [
            acc_only(&[1.0, 0.0, 0.0, 1.0]),
            acc_only(&[1.0, 1.0, 0.0, 0.0]),
            acc_only(&[0.0, 0.0, 0.0, 1.0]),
        ];
        let adv = group_decoupled_advantages(&groups, ADV_EPS).unwrap();
        let flat: Vec<f64> = adv.flat().collect();
        let mean = flat.iter().sum::<f64>() / flat.len() as f64;
        assert!(mean.abs() < 1e-9, "whitened mean {mean}");
    }

    #[test]
    fn rejects_groups_of_one() {
        let g = acc_only(&[1.0]);
        assert!(group_decoupled_advantages(&[g.clone()], ADV_EPS).is_err());
        assert!(grpo_advantages(&[g], ADV_EPS).is_err());
    }

    #[test]
    fn grpo_mode_uses_total_only() {
        let g = GroupRewards {
            prompt_id: 3,
            rewards: vec![
                breakdown(1.0, 0.2, 0.5, 0.0, 0.0),
                breakdown(0.0, 0.0, -0.2, 0.0, 0.0),
            ],
        };
        let adv = grpo_advantages(&[g], ADV_EPS).unwrap();
        // totals 1.7 and -0.2: mu 0.75, sigma 0.95
        assert!((adv.scalars[0][0] - 1.0).abs() < 1e-5);
        assert!((adv.scalars[0][1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn broadcast_replicates_scalar() {
        let adv = AdvantageMap {
            scalars: vec![vec![0.5, -0.5]],
        };
        assert_eq!(adv.broadcast(0, 1, 3), vec![-0.5, -0.5, -0.5]);
    }
}
