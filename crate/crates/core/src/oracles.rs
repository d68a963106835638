//! Offline reward oracles.
//!
//! Two deterministic stand-ins for downstream models score a description `q`
//! on a held-out pair:
//!
//! * the judge prefers `y_w` with probability `σ(β · q·(a_w − a_l))`;
//! * the generator reports a log-probability margin `α · q·a(y) + ε` with
//!   Gaussian estimation noise `ε`.
//!
//! Both rewards are zero for format-invalid outputs.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prefworld::{dot, Attrs, Episode, PreferencePair};
use crate::rng::Stream;
use crate::symlang::{parse_output, ParsedDescription, Token, Vocab};

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JudgeOracle {
    /// Sharpness of the pairwise judge.
    pub beta: f64,
    /// Probability `y_w` must exceed to count as preferred. At 0.5 the
    /// decision is the sign of the score margin and independent of `beta`.
    pub threshold: f64,
}

impl Default for JudgeOracle {
    fn default() -> Self {
        JudgeOracle {
            beta: 2.0,
            threshold: 0.5,
        }
    }
}

impl JudgeOracle {
    pub fn new(beta: f64) -> Self {
        JudgeOracle {
            beta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::invalid("judge beta must be positive"));
        }
        if !(self.threshold >= 0.5 && self.threshold < 1.0) {
            return Err(Error::invalid("judge threshold must be in [0.5, 1)"));
        }
        Ok(())
    }

    /// Probability that the chosen response is preferred under `q`.
    pub fn judge_prob(&self, q: &ParsedDescription, pair: &PreferencePair) -> f64 {
        logistic(self.beta * margin(q, pair) as f64)
    }

    /// Whether the judge prefers `y_w`. Compared in logit space so that the
    /// default threshold reduces exactly to `q·(a_w − a_l) > 0`.
    pub fn prefers_chosen(&self, q: &ParsedDescription, pair: &PreferencePair) -> bool {
        let cut = (self.threshold / (1.0 - self.threshold)).ln();
        self.beta * (margin(q, pair) as f64) > cut
    }
}

/// `q·(a_w − a_l)`.
pub fn margin(q: &ParsedDescription, pair: &PreferencePair) -> i32 {
    dot(&q.q, &pair.chosen) - dot(&q.q, &pair.rejected)
}

/// Judge-based reward: format gate times the judge decision on the test pair.
pub fn reward_jud(judge: &JudgeOracle, vocab: Vocab, output: &[Token], episode: &Episode) -> u8 {
    match parse_output(vocab, output).description() {
        Some(q) => judge.prefers_chosen(q, &episode.test) as u8,
        None => 0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenOracle {
    /// Gain on the description-aligned part of the response log-prob.
    pub alpha: f64,
    /// Per-attribute length penalty in the unconditioned log-prob.
    pub lambda_len: f64,
    /// Standard deviation of the per-evaluation estimation noise.
    pub sigma_noise: f64,
}

impl Default for GenOracle {
    fn default() -> Self {
        GenOracle {
            alpha: 1.0,
            lambda_len: 0.1,
            sigma_noise: 0.5,
        }
    }
}

impl GenOracle {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha.is_finite()
            && self.alpha > 0.0
            && self.lambda_len.is_finite()
            && self.lambda_len >= 0.0
            && self.sigma_noise.is_finite()
            && self.sigma_noise >= 0.0;
        if !ok {
            return Err(Error::invalid(
                "gen oracle needs alpha > 0, lambda_len >= 0 and sigma_noise >= 0, all finite",
            ));
        }
        Ok(())
    }

    /// `log R(y | x, d) − log R(y | x)`.
    ///
    /// Both terms share the fluency base `−lambda_len·|y|`, which cancels
    /// exactly; what remains is the description gain plus one noise draw.
    /// The cancellation is done symbolically so that a noiseless oracle
    /// reproduces the judge decision bit for bit.
    pub fn gen_margin(&self, q: &ParsedDescription, response: &Attrs, _response_len: usize, rng: &mut Stream) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        self.alpha * q.dot(response) as f64 + self.sigma_noise * z
    }
}

fn response_len(a: &Attrs) -> usize {
    a.iter().filter(|&&v| v != 0).count()
}

/// Generation-based reward: format gate times `margin(y_w) > margin(y_l)`.
pub fn reward_gen(gen: &GenOracle, vocab: Vocab, output: &[Token], episode: &Episode, rng: &mut Stream) -> u8 {
    match parse_output(vocab, output).description() {
        Some(q) => gen_prefers_chosen(gen, q, &episode.test, rng) as u8,
        None => 0,
    }
}

pub fn gen_prefers_chosen(gen: &GenOracle, q: &ParsedDescription, pair: &PreferencePair, rng: &mut Stream) -> bool {
    let w = gen.gen_margin(q, &pair.chosen, response_len(&pair.chosen), rng);
    let l = gen.gen_margin(q, &pair.rejected, response_len(&pair.rejected), rng);
    w > l
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardSource {
    Jud,
    Gen,
}

impl RewardSource {
    pub fn as_str(self) -> &'static str {
        match self {
            RewardSource::Jud => "jud",
            RewardSource::Gen => "gen",
        }
    }
}

/// Parameters of both offline oracles.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub judge: JudgeOracle,
    pub gen: GenOracle,
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        self.judge.validate()?;
        self.gen.validate()
    }

    pub fn reward(&self, source: RewardSource, vocab: Vocab) -> RewardFn {
        RewardFn {
            source,
            judge: self.judge.clone(),
            gen: self.gen.clone(),
            vocab,
        }
    }
}

/// A reward function over policy outputs, bundling the oracle it uses.
#[derive(Debug, Clone)]
pub struct RewardFn {
    pub source: RewardSource,
    pub judge: JudgeOracle,
    pub gen: GenOracle,
    pub vocab: Vocab,
}

impl RewardFn {
    /// `rng` is only consumed by the generation oracle.
    pub fn score(&self, output: &[Token], episode: &Episode, rng: &mut Stream) -> u8 {
        match self.source {
            RewardSource::Jud => reward_jud(&self.judge, self.vocab, output, episode),
            RewardSource::Gen => reward_gen(&self.gen, self.vocab, output, episode, rng),
        }
    }
}

// ---------------------------------------------------------------------------
// Remote judge
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RemoteJudgeConfig {
    pub url: Option<String>,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
}

impl Default for RemoteJudgeConfig {
    fn default() -> Self {
        RemoteJudgeConfig {
            url: None,
            timeout_ms: 5000,
            max_in_flight: 4,
        }
    }
}

/// Body POSTed to the remote judge.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JudgeRequest {
    pub post: u64,
    pub description: String,
    pub response_a: Attrs,
    pub response_b: Attrs,
}

impl JudgeRequest {
    pub fn new(q: &ParsedDescription, pair: &PreferencePair) -> Self {
        JudgeRequest {
            post: pair.post_id,
            description: q.render(),
            response_a: pair.chosen.clone(),
            response_b: pair.rejected.clone(),
        }
    }
}

/// HTTP client for an external judging model. Safe to share across threads;
/// at most `max_in_flight` requests are outstanding at once.
pub struct RemoteJudge {
    url: String,
    agent: ureq::Agent,
    slots: Mutex<usize>,
    freed: Condvar,
}

impl RemoteJudge {
    pub fn new(config: &RemoteJudgeConfig) -> Result<Self> {
        let url = config
            .url
            .clone()
            .ok_or_else(|| Error::invalid("judge.url is not set"))?;
        if config.max_in_flight == 0 || config.timeout_ms == 0 {
            return Err(Error::invalid("judge.max_in_flight and judge.timeout_ms must be positive"));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(true)
            .build()
            .into();
        Ok(RemoteJudge {
            url,
            agent,
            slots: Mutex::new(config.max_in_flight),
            freed: Condvar::new(),
        })
    }

    /// Probability that `response_a` is preferred. Any transport or reply
    /// failure is an error.
    pub fn remote_judge(&self, request: &JudgeRequest) -> Result<f64> {
        {
            let mut free = self.slots.lock().expect("slot lock");
            while *free == 0 {
                free = self.freed.wait(free).expect("slot lock");
            }
            *free -= 1;
        }
        let result = self.call(request);
        *self.slots.lock().expect("slot lock") += 1;
        self.freed.notify_one();
        result
    }

    fn call(&self, request: &JudgeRequest) -> Result<f64> {
        let mut response = self
            .agent
            .post(&self.url)
            .send_json(request)
            .map_err(|e| Error::Remote(e.to_string()))?;
        let body: serde_json::Value = response
            .body_mut()
            .read_json()
            .map_err(|e| Error::Remote(format!("reply is not JSON: {e}")))?;
        let prob = body
            .get("prob_a")
            .and_then(|v| v.as_f64())
            .ok_or_else(|| Error::Remote("reply lacks a numeric prob_a".into()))?;
        if !(0.0..=1.0).contains(&prob) {
            return Err(Error::Remote(format!("prob_a {prob} outside [0, 1]")));
        }
        Ok(prob)
    }
}
