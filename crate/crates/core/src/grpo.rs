//! Group-relative policy optimisation without a KL term.
//!
//! For each prompt, `G` outputs are sampled from a frozen snapshot and
//! scored. Rewards are standardised within the group and every output's
//! tokens are pushed up or down through a clipped importance ratio:
//!
//! ```text
//! loss = −(1/G) Σ_i 1/(|r_i|+|d_i|) Σ_t min(ρ_t A_i, clip(ρ_t, 1−ε, 1+ε) A_i)
//! ρ_t  = exp(log p(o_t) − log p_old(o_t))
//! ```

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{acc_jud, DecodeMode, DescriptionSource};
use crate::oracles::{JudgeOracle, RewardFn, RewardSource};
use crate::optim::{OptimConfig, Optimizer};
use crate::policy::{backward, sample, DecodeConfig, PolicyParams, Sampled, SeqRef};
use crate::prefworld::{episode_at, Episode, WorldConfig};
use crate::rng::{self, domain, Stream};
use crate::symlang::{encode_episode, parse_output, Parsed, Token};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpisodeMode {
    /// A fresh batch of episodes every step.
    Fresh,
    /// Cycle through a fixed set of `dataset_size` episodes.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlConfig {
    /// Rollouts per prompt `G`.
    pub group: usize,
    /// Prompts per step.
    pub batch_size: usize,
    pub clip_eps: f64,
    pub steps: usize,
    pub reward_source: RewardSource,
    pub episode_mode: EpisodeMode,
    pub dataset_size: usize,
    pub optim: OptimConfig,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            group: 4,
            batch_size: 32,
            clip_eps: 0.2,
            steps: 500,
            reward_source: RewardSource::Jud,
            episode_mode: EpisodeMode::Fresh,
            dataset_size: 7000,
            optim: OptimConfig::default(),
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group < 2 {
            return Err(Error::invalid("rl.group must be at least 2"));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::invalid("rl.clip_eps must be in (0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("rl.batch_size must be positive"));
        }
        if self.episode_mode == EpisodeMode::Fixed && self.dataset_size == 0 {
            return Err(Error::invalid("rl.dataset_size must be positive in fixed mode"));
        }
        self.optim.validate("rl")
    }
}

/// `G` outputs for one prompt, all drawn from the same frozen snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub prompt: Vec<Token>,
    pub outputs: Vec<Sampled>,
    pub rewards: Vec<u8>,
    pub advantages: Vec<f64>,
    /// Per-output normaliser: `|r| + |d|` for well-formed outputs, the
    /// generated length otherwise.
    pub content_lens: Vec<usize>,
}

impl RolloutGroup {
    pub fn is_degenerate(&self) -> bool {
        self.rewards.windows(2).all(|w| w[0] == w[1])
    }
}

pub fn content_len(parsed: &Parsed, generated: usize) -> usize {
    match parsed {
        Parsed::Valid { output, .. } => output.content_len(),
        Parsed::FormatFailure => generated,
    }
}

pub fn rollout_group(
    old_params: &PolicyParams,
    episode: &Episode,
    g: usize,
    decode: &DecodeConfig,
    reward: &RewardFn,
    rng: &mut Stream,
) -> Result<RolloutGroup> {
    if g < 2 {
        return Err(Error::invalid("a rollout group needs at least two outputs"));
    }
    let prompt = encode_episode(reward.vocab, episode)?;
    let mut outputs = Vec::with_capacity(g);
    let mut rewards = Vec::with_capacity(g);
    let mut content_lens = Vec::with_capacity(g);
    for i in 0..g {
        let mut sample_rng = rng::fork(rng, 2 * i as u64);
        let mut reward_rng = rng::fork(rng, 2 * i as u64 + 1);
        let out = sample(old_params, &prompt, decode, &mut sample_rng)?;
        rewards.push(reward.score(&out.tokens, episode, &mut reward_rng));
        content_lens.push(content_len(&parse_output(reward.vocab, &out.tokens), out.tokens.len()));
        outputs.push(out);
    }
    let advantages = compute_advantages(&rewards.iter().map(|&r| r as f64).collect::<Vec<_>>());
    Ok(RolloutGroup {
        prompt,
        outputs,
        rewards,
        advantages,
        content_lens,
    })
}

/// `(R_i − mean) / std` with the population standard deviation. Uniform
/// rewards carry no signal and map to all-zero advantages.
pub fn compute_advantages(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 || rewards.windows(2).all(|w| w[0] == w[1]) {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// Batched clipped-surrogate loss: the mean over groups of each group's
/// loss. The gradient flows only through the current log-probs.
pub fn grpo_loss_and_grad(params: &PolicyParams, groups: &[RolloutGroup], clip_eps: f64) -> Result<(f64, PolicyParams)> {
    if groups.is_empty() {
        return Err(Error::invalid("no rollout groups"));
    }
    let mut seqs = Vec::new();
    let mut meta = Vec::new();
    for grp in groups {
        let g = grp.outputs.len() as f64;
        for (i, out) in grp.outputs.iter().enumerate() {
            seqs.push(SeqRef {
                prompt: &grp.prompt,
                output: &out.tokens,
            });
            meta.push((&out.model_logprobs, grp.advantages[i], grp.content_lens[i].max(1) as f64, g));
        }
    }
    let nb = groups.len() as f64;
    let mut bad_ratio = false;
    let result = backward(params, &seqs, |logps| {
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(logps.len());
        for (lp, &(old, adv, len, g)) in logps.iter().zip(&meta) {
            let mut rho = 0.0;
            let mut dl = Vec::with_capacity(lp.len());
            for (cur, old) in lp.iter().zip(old.iter()) {
                let ratio = (cur - old).exp();
                if !ratio.is_finite() {
                    bad_ratio = true;
                }
                let unclipped = ratio * adv;
                let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * adv;
                let scale = -1.0 / (g * len * nb);
                if unclipped <= clipped {
                    rho += unclipped;
                    dl.push(scale * unclipped);
                } else {
                    rho += clipped;
                    dl.push(0.0);
                }
            }
            loss += -rho / (g * len * nb);
            grads.push(dl);
        }
        (loss, grads)
    });
    if bad_ratio {
        return Err(Error::NonFinite("importance ratio".into()));
    }
    result
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlRow {
    pub step: usize,
    pub reward_mean: f64,
    pub format_rate: f64,
    pub acc_jud_probe: f64,
    pub len_mean: f64,
    pub degenerate_groups: usize,
    pub loss: f64,
}

pub const METRICS_HEADER: &str = "step,reward_mean,format_rate,acc_jud_probe,len_mean,degenerate_groups,loss";

pub fn metrics_csv(rows: &[RlRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{},{:.9}\n",
            r.step, r.reward_mean, r.format_rate, r.acc_jud_probe, r.len_mean, r.degenerate_groups, r.loss
        ));
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<RlRow>> {
    let mut lines = text.lines();
    let err = |msg: String| Error::Parse {
        what: "metrics.csv".into(),
        msg,
    };
    if lines.next() != Some(METRICS_HEADER) {
        return Err(err("unexpected header".into()));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(err(format!("line {} has {} fields", i + 2, f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("line {}: {e}", i + 2)));
        let int = |s: &str| s.parse::<usize>().map_err(|e| err(format!("line {}: {e}", i + 2)));
        rows.push(RlRow {
            step: int(f[0])?,
            reward_mean: num(f[1])?,
            format_rate: num(f[2])?,
            acc_jud_probe: num(f[3])?,
            len_mean: num(f[4])?,
            degenerate_groups: int(f[5])?,
            loss: num(f[6])?,
        });
    }
    if rows.is_empty() {
        return Err(err("no metric rows".into()));
    }
    Ok(rows)
}

/// Everything `train_rl` needs besides the starting parameters.
pub struct RlSetup<'a> {
    pub config: &'a RlConfig,
    pub world: &'a WorldConfig,
    pub decode: &'a DecodeConfig,
    pub reward: &'a RewardFn,
    /// Fixed held-out episodes scored greedily with the default judge.
    pub probe: &'a [Episode],
    pub probe_judge: &'a JudgeOracle,
    pub seed: u64,
}

fn rl_episode(setup: &RlSetup<'_>, step: usize, slot: usize) -> Result<Episode> {
    let flat = step * setup.config.batch_size + slot;
    let index = match setup.config.episode_mode {
        EpisodeMode::Fresh => flat,
        EpisodeMode::Fixed => flat % setup.config.dataset_size,
    };
    episode_at(setup.world, setup.seed, domain::RL_EPISODES, index)
}

/// Runs `config.steps` updates, one per frozen snapshot. Each metrics row
/// describes the snapshot the step's rollouts came from.
pub fn train_rl(mut params: PolicyParams, setup: &RlSetup<'_>) -> Result<(PolicyParams, Vec<RlRow>)> {
    setup.config.validate()?;
    let mut opt = Optimizer::new(setup.config.optim.clone());
    let mut rows = Vec::with_capacity(setup.config.steps);
    let probe_source = DescriptionSource::Policy {
        params: &params,
        mode: DecodeMode::Greedy,
    };
    let mut probe_acc = if setup.config.steps > 0 {
        acc_jud(&probe_source, setup.probe, setup.probe_judge, setup.decode)?
    } else {
        0.0
    };
    for step in 0..setup.config.steps {
        let old = params.clone();
        let groups: Vec<RolloutGroup> = (0..setup.config.batch_size)
            .into_par_iter()
            .map(|slot| {
                let episode = rl_episode(setup, step, slot)?;
                let mut s = rng::stream(setup.seed, &[domain::ROLLOUT, step as u64, slot as u64]);
                rollout_group(&old, &episode, setup.config.group, setup.decode, setup.reward, &mut s)
            })
            .collect::<Result<_>>()?;
        let (loss, grad) = grpo_loss_and_grad(&params, &groups, setup.config.clip_eps)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("RL loss at step {step}")));
        }
        let total = (groups.len() * setup.config.group) as f64;
        let vocab = setup.reward.vocab;
        let mut reward_sum = 0.0;
        let mut valid = 0.0;
        let mut len_sum = 0.0;
        for grp in &groups {
            for (out, &r) in grp.outputs.iter().zip(&grp.rewards) {
                reward_sum += r as f64;
                len_sum += out.tokens.len() as f64;
                if parse_output(vocab, &out.tokens).is_valid() {
                    valid += 1.0;
                }
            }
        }
        rows.push(RlRow {
            step,
            reward_mean: reward_sum / total,
            format_rate: valid / total,
            acc_jud_probe: probe_acc,
            len_mean: len_sum / total,
            degenerate_groups: groups.iter().filter(|g| g.is_degenerate()).count(),
            loss,
        });
        opt.step(&mut params, &grad)?;
        if step + 1 < setup.config.steps {
            let src = DescriptionSource::Policy {
                params: &params,
                mode: DecodeMode::Greedy,
            };
            probe_acc = acc_jud(&src, setup.probe, setup.probe_judge, setup.decode)?;
        }
    }
    Ok((params, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advantage_examples() {
        assert_eq!(compute_advantages(&[1.0, 0.0, 1.0, 0.0]), vec![1.0, -1.0, 1.0, -1.0]);
        assert_eq!(compute_advantages(&[1.0, 1.0, 1.0, 1.0]), vec![0.0; 4]);
        assert_eq!(compute_advantages(&[1.0, 0.0]), vec![1.0, -1.0]);
        let a = compute_advantages(&[1.0, 0.0, 0.0, 0.0]);
        let expected = [1.7321, -0.5774, -0.5774, -0.5774];
        for (x, e) in a.iter().zip(expected) {
            assert!((x - e).abs() < 5e-5, "{x} vs {e}");
        }
    }

    #[test]
    fn metrics_csv_round_trip() {
        let rows = vec![RlRow {
            step: 0,
            reward_mean: 0.25,
            format_rate: 0.5,
            acc_jud_probe: 0.125,
            len_mean: 12.0,
            degenerate_groups: 3,
            loss: -0.0,
        }];
        let text = metrics_csv(&rows);
        assert!(text.starts_with(METRICS_HEADER));
        assert_eq!(parse_metrics_csv(&text).unwrap()[0].degenerate_groups, 3);
        assert!(parse_metrics_csv(METRICS_HEADER).is_err());
    }
}
