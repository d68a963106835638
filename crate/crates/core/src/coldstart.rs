//! Cold-start data synthesis and supervised fine-tuning.
//!
//! An oracle teacher writes an evidence walk over each episode's signals and
//! a majority-vote description restricted to hinted dimensions. Candidates
//! are kept only when the offline reward is 1, and the policy is then fitted
//! to the survivors with a length-normalised negative log-likelihood.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracles::{RewardFn, RewardSource};
use crate::optim::{OptimConfig, Optimizer};
use crate::policy::{backward, PolicyParams, SeqRef};
use crate::prefworld::{Episode, UserProfile};
use crate::rng::{self, domain, Stream};
use crate::symlang::{encode_episode, parse_output, ParsedDescription, Parsed, Token, Vocab};

/// Analysis guidance handed to the teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherHints {
    pub phi: BTreeSet<usize>,
    pub noise_drop: f64,
    pub noise_add: f64,
}

impl TeacherHints {
    pub fn exact(user: &UserProfile) -> Self {
        TeacherHints {
            phi: user.active_dims().into_iter().collect(),
            noise_drop: 0.0,
            noise_add: 0.0,
        }
    }

    /// Hints for `user`: each active dimension is omitted with probability
    /// `noise_drop`, each inactive one added with probability `noise_add`.
    pub fn noisy(user: &UserProfile, noise_drop: f64, noise_add: f64, rng: &mut Stream) -> Self {
        let phi = user
            .p
            .iter()
            .enumerate()
            .filter(|(_, &v)| {
                let u: f64 = rng.random();
                if v != 0 {
                    u >= noise_drop
                } else {
                    u < noise_add
                }
            })
            .map(|(j, _)| j)
            .collect();
        TeacherHints {
            phi,
            noise_drop,
            noise_add,
        }
    }
}

/// Summed per-dimension evidence `Σ sign(a_w − a_l)` (UGC: `Σ a`).
pub fn evidence_votes(episode: &Episode) -> Vec<i32> {
    let mut votes = vec![0i32; episode.dims()];
    for s in &episode.signals {
        for (v, e) in votes.iter_mut().zip(s.evidence()) {
            *v += e.signum() as i32;
        }
    }
    votes
}

/// Reasoning tokens: for each signal in order, `(DIM_j, sign)` for every
/// dimension on which the signal carries evidence.
pub fn evidence_walk(episode: &Episode) -> Vec<Token> {
    let mut out = Vec::new();
    for s in &episode.signals {
        for (j, e) in s.evidence().into_iter().enumerate() {
            if e != 0 {
                out.push(Token::dim(j));
                out.push(Token::from_sign(e));
            }
        }
    }
    out
}

/// The teacher's uncorrupted description: majority sign on each hinted
/// dimension, omitting tied votes. When nothing survives, the single
/// strongest dimension overall is used so the output stays well-formed.
pub fn teacher_description(episode: &Episode, hints: &TeacherHints) -> ParsedDescription {
    let votes = evidence_votes(episode);
    let mut q = vec![0i8; votes.len()];
    for &j in &hints.phi {
        if j < q.len() {
            q[j] = votes[j].signum() as i8;
        }
    }
    if q.iter().all(|&v| v == 0) {
        let best = (0..votes.len()).fold(0, |b, j| if votes[j].abs() > votes[b].abs() { j } else { b });
        q[best] = if votes[best] < 0 { -1 } else { 1 };
    }
    ParsedDescription { q }
}

/// `g` candidate outputs. Every emitted description sign is independently
/// flipped with probability `corruption`; one uniform is drawn per emitted
/// sign whatever the corruption level.
pub fn teacher_generate(
    episode: &Episode,
    hints: &TeacherHints,
    g: usize,
    corruption: f64,
    rng: &mut Stream,
) -> Result<Vec<Vec<Token>>> {
    if g == 0 {
        return Err(Error::invalid("teacher needs at least one candidate"));
    }
    let reasoning = evidence_walk(episode);
    let base = teacher_description(episode, hints);
    Ok((0..g)
        .map(|_| {
            let q = base
                .q
                .iter()
                .map(|&v| {
                    if v == 0 {
                        return 0;
                    }
                    let u: f64 = rng.random();
                    if u < corruption {
                        -v
                    } else {
                        v
                    }
                })
                .collect();
            ParsedDescription { q }.wrap(&reasoning)
        })
        .collect())
}

/// One filtered demonstration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColdRecord {
    pub episode_idx: usize,
    pub reasoning: Vec<Token>,
    pub description: Vec<Token>,
    pub reward_fn: RewardSource,
}

impl ColdRecord {
    /// The full target sequence `r THINK_CLOSE ANS_OPEN d ANS_CLOSE EOS`.
    pub fn output(&self) -> Vec<Token> {
        let mut out = self.reasoning.clone();
        out.push(Token::THINK_CLOSE);
        out.push(Token::ANS_OPEN);
        out.extend_from_slice(&self.description);
        out.push(Token::ANS_CLOSE);
        out.push(Token::EOS);
        out
    }

    pub fn content_len(&self) -> usize {
        self.reasoning.len() + self.description.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColdDataset {
    pub records: Vec<ColdRecord>,
    pub candidates: usize,
}

impl ColdDataset {
    pub fn retention(&self) -> f64 {
        if self.candidates == 0 {
            0.0
        } else {
            self.records.len() as f64 / self.candidates as f64
        }
    }
}

/// Stream used to score candidate `cand` of episode `ep`; re-scoring with it
/// reproduces the filtering decision.
pub fn filter_stream(seed: u64, ep: usize, cand: usize) -> Stream {
    rng::stream(seed, &[domain::REWARD, ep as u64, cand as u64])
}

/// Keep exactly the candidates with reward 1.
pub fn filter_cold(
    candidates: &[(usize, Vec<Vec<Token>>)],
    episodes: &[Episode],
    reward: &RewardFn,
    seed: u64,
) -> Result<ColdDataset> {
    let mut records = Vec::new();
    let mut total = 0;
    for (ep, outs) in candidates {
        let episode = episodes
            .get(*ep)
            .ok_or_else(|| Error::invalid(format!("candidate refers to missing episode {ep}")))?;
        for (c, out) in outs.iter().enumerate() {
            total += 1;
            if reward.score(out, episode, &mut filter_stream(seed, *ep, c)) != 1 {
                continue;
            }
            let Parsed::Valid { output, .. } = parse_output(reward.vocab, out) else {
                unreachable!("reward 1 implies a valid format");
            };
            records.push(ColdRecord {
                episode_idx: *ep,
                reasoning: output.reasoning_tokens().to_vec(),
                description: output.description_tokens().to_vec(),
                reward_fn: reward.source,
            });
        }
    }
    let data = ColdDataset {
        records,
        candidates: total,
    };
    if data.records.is_empty() {
        eprintln!(
            "warning: cold-start filtering kept none of {} candidates; the SFT stage has no data",
            total
        );
    }
    Ok(data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColdStartConfig {
    /// Teacher candidates per episode.
    pub group: usize,
    /// Probability of flipping each emitted description sign.
    pub corruption: f64,
    pub hint_drop: f64,
    pub hint_add: f64,
    pub reward_source: RewardSource,
    pub batch_size: usize,
    pub epochs: usize,
    /// Upper bound on optimiser steps across all epochs.
    pub max_steps: Option<usize>,
    pub optim: OptimConfig,
}

impl Default for ColdStartConfig {
    fn default() -> Self {
        ColdStartConfig {
            group: 4,
            corruption: 0.1,
            hint_drop: 0.0,
            hint_add: 0.0,
            reward_source: RewardSource::Jud,
            batch_size: 32,
            epochs: 4,
            max_steps: Some(200),
            optim: OptimConfig::default(),
        }
    }
}

impl ColdStartConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [self.corruption, self.hint_drop, self.hint_add];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("coldstart probabilities must be in [0, 1]"));
        }
        if self.group == 0 || self.batch_size == 0 {
            return Err(Error::invalid("coldstart.group and batch_size must be positive"));
        }
        self.optim.validate("coldstart")
    }
}

/// Teacher candidates for every episode, hints drawn per episode.
pub fn synthesize(episodes: &[Episode], config: &ColdStartConfig, seed: u64) -> Result<Vec<(usize, Vec<Vec<Token>>)>> {
    episodes
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let mut s = rng::stream(seed, &[domain::TEACHER, i as u64]);
            let hints = TeacherHints::noisy(&e.user, config.hint_drop, config.hint_add, &mut s);
            Ok((i, teacher_generate(e, &hints, config.group, config.corruption, &mut s)?))
        })
        .collect()
}

/// One SFT example with its `|r| + |d|` normaliser.
#[derive(Debug, Clone)]
pub struct SftExample {
    pub prompt: Vec<Token>,
    pub output: Vec<Token>,
    pub content_len: usize,
}

impl SftExample {
    pub fn new(vocab: Vocab, record: &ColdRecord, episode: &Episode) -> Result<Self> {
        Ok(SftExample {
            prompt: encode_episode(vocab, episode)?,
            output: record.output(),
            content_len: record.content_len(),
        })
    }
}

/// Mean over the batch of `−(1/(|r|+|d|)) Σ_t log p(token_t | 𝓔, prefix)`,
/// the sum running over every target token through EOS.
pub fn sft_loss_and_grad(params: &PolicyParams, batch: &[SftExample]) -> Result<(f64, PolicyParams)> {
    if batch.is_empty() {
        return Err(Error::invalid("SFT batch is empty"));
    }
    if batch.iter().any(|b| b.content_len == 0) {
        return Err(Error::invalid("SFT record has an empty description"));
    }
    let seqs: Vec<SeqRef<'_>> = batch
        .iter()
        .map(|b| SeqRef {
            prompt: &b.prompt,
            output: &b.output,
        })
        .collect();
    let n = batch.len() as f64;
    backward(params, &seqs, |logps| {
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(logps.len());
        for (lp, ex) in logps.iter().zip(batch) {
            let norm = ex.content_len as f64;
            total += -lp.iter().sum::<f64>() / norm;
            grads.push(vec![-1.0 / (norm * n); lp.len()]);
        }
        (total / n, grads)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

pub fn sft_metrics_csv(rows: &[SftRow]) -> String {
    let mut out = String::from("step,epoch,lr,loss\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.6e},{:.9}\n", r.step, r.epoch, r.lr, r.loss));
    }
    out
}

/// Minibatch SFT. Each epoch visits the examples in a permutation drawn from
/// its own stream; training stops after `epochs` passes or `max_steps`
/// updates, whichever comes first.
pub fn train_sft(
    mut params: PolicyParams,
    examples: &[SftExample],
    config: &ColdStartConfig,
    seed: u64,
) -> Result<(PolicyParams, Vec<SftRow>)> {
    if examples.is_empty() && config.epochs > 0 && config.max_steps != Some(0) {
        return Err(Error::invalid("cold-start dataset is empty"));
    }
    let mut opt = Optimizer::new(config.optim.clone());
    let mut rows = Vec::new();
    let budget = config.max_steps.unwrap_or(usize::MAX);
    'epochs: for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng::stream(seed, &[domain::SFT, epoch as u64]));
        for chunk in order.chunks(config.batch_size) {
            if rows.len() >= budget {
                break 'epochs;
            }
            let batch: Vec<SftExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let (loss, grad) = sft_loss_and_grad(&params, &batch)?;
            let lr = opt.step(&mut params, &grad)?;
            rows.push(SftRow {
                step: rows.len(),
                epoch,
                lr,
                loss,
            });
        }
    }
    Ok((params, rows))
}

// ---------------------------------------------------------------------------
// cold.jsonl
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ColdLine {
    episode_idx: usize,
    r: Vec<u16>,
    d: Vec<u16>,
    reward_fn: RewardSource,
}

pub fn write_cold(w: &mut impl Write, data: &ColdDataset) -> std::io::Result<()> {
    for rec in &data.records {
        let line = ColdLine {
            episode_idx: rec.episode_idx,
            r: rec.reasoning.iter().map(|t| t.0).collect(),
            d: rec.description.iter().map(|t| t.0).collect(),
            reward_fn: rec.reward_fn,
        };
        writeln!(w, "{}", serde_json::to_string(&line).expect("record serialises"))?;
    }
    Ok(())
}

pub fn read_cold(path: &Path, vocab: Vocab) -> Result<Vec<ColdRecord>> {
    let text = crate::artifact::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let what = || format!("{} line {}", path.display(), i + 1);
        let rec: ColdLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            what: what(),
            msg: e.to_string(),
        })?;
        let ids = |v: &[u16]| vocab.from_ids(&v.iter().map(|&x| x as i64).collect::<Vec<_>>());
        let record = ColdRecord {
            episode_idx: rec.episode_idx,
            reasoning: ids(&rec.r)?,
            description: ids(&rec.d)?,
            reward_fn: rec.reward_fn,
        };
        if !parse_output(vocab, &record.output()).is_valid() {
            return Err(Error::Parse {
                what: what(),
                msg: "record is not format-valid".into(),
            });
        }
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::{GenOracle, JudgeOracle};
    use crate::prefworld::{PreferencePair, Signal, WorldConfig};
    use crate::symlang::check_format;

    fn pair(w: &[i8], l: &[i8]) -> PreferencePair {
        PreferencePair {
            post_id: 0,
            chosen: w.to_vec(),
            rejected: l.to_vec(),
        }
    }

    fn toy_episode() -> Episode {
        Episode {
            user: UserProfile::new(vec![1, 0, 0, -1]),
            signals: vec![
                Signal::Pair(pair(&[1, 0, 0, 0], &[0, 1, 0, 0])),
                Signal::Pair(pair(&[0, 0, 1, -1], &[0, 0, 1, 1])),
                Signal::Ugc(vec![1, 0, 0, 0]),
            ],
            test: pair(&[1, 0, 0, 0], &[0, 0, 0, 0]),
        }
    }

    fn jud(vocab: Vocab) -> RewardFn {
        RewardFn {
            source: RewardSource::Jud,
            judge: JudgeOracle::default(),
            gen: GenOracle::default(),
            vocab,
        }
    }

    #[test]
    fn walk_and_vote() {
        let e = toy_episode();
        assert_eq!(
            evidence_walk(&e),
            vec![
                Token::dim(0),
                Token::POS,
                Token::dim(1),
                Token::NEG,
                Token::dim(3),
                Token::NEG,
                Token::dim(0),
                Token::POS
            ]
        );
        assert_eq!(evidence_votes(&e), vec![2, -1, 0, -1]);
        let d = teacher_description(&e, &TeacherHints::exact(&e.user));
        assert_eq!(d.q, vec![1, 0, 0, -1]);
    }

    #[test]
    fn candidate_count_and_format() {
        let e = toy_episode();
        let c = teacher_generate(&e, &TeacherHints::exact(&e.user), 3, 0.3, &mut rng::stream(0, &[0])).unwrap();
        assert_eq!(c.len(), 3);
        assert!(c.iter().all(|o| check_format(Vocab::new(4), o)));
        assert!(teacher_generate(&e, &TeacherHints::exact(&e.user), 0, 0.0, &mut rng::stream(0, &[0])).is_err());
    }

    #[test]
    fn full_corruption_flips_every_sign() {
        let e = toy_episode();
        let h = TeacherHints::exact(&e.user);
        let v = Vocab::new(4);
        let clean = teacher_generate(&e, &h, 4, 0.0, &mut rng::stream(5, &[0])).unwrap();
        let dirty = teacher_generate(&e, &h, 4, 1.0, &mut rng::stream(5, &[0])).unwrap();
        for (a, b) in clean.iter().zip(&dirty) {
            let qa = parse_output(v, a).description().unwrap().clone();
            let qb = parse_output(v, b).description().unwrap().clone();
            assert_eq!(qa.negated(), qb);
        }
    }

    #[test]
    fn empty_hints_still_yield_valid_output() {
        let e = toy_episode();
        let h = TeacherHints {
            phi: BTreeSet::new(),
            noise_drop: 1.0,
            noise_add: 0.0,
        };
        assert_eq!(teacher_description(&e, &h).q, vec![1, 0, 0, 0]);
    }

    #[test]
    fn filter_counts() {
        let e = toy_episode();
        let v = Vocab::new(4);
        let good = ParsedDescription { q: vec![1, 0, 0, 0] }.wrap(&[]);
        let bad = ParsedDescription { q: vec![-1, 0, 0, 0] }.wrap(&[]);
        let eps = vec![e];
        let all = filter_cold(&[(0, vec![good.clone(), good.clone()])], &eps, &jud(v), 0).unwrap();
        assert_eq!((all.records.len(), all.retention()), (2, 1.0));
        let none = filter_cold(&[(0, vec![bad.clone()])], &eps, &jud(v), 0).unwrap();
        assert_eq!((none.records.len(), none.retention()), (0, 0.0));
        let mixed = filter_cold(&[(0, vec![good.clone(), bad, good])], &eps, &jud(v), 0).unwrap();
        assert_eq!(mixed.records.len(), 2);
    }

    #[test]
    fn uniform_params_give_log_v_per_token() {
        let vocab = Vocab::new(4);
        let shape = crate::policy::PolicyConfig::default().shape(vocab.size());
        let p = PolicyParams::zeros(shape);
        let e = toy_episode();
        let d = filter_cold(&[(0, vec![ParsedDescription { q: vec![1, 0, 0, 0] }.wrap(&[Token::POS])])], &[e.clone()], &jud(vocab), 0).unwrap();
        let ex = SftExample::new(vocab, &d.records[0], &e).unwrap();
        let (loss, _) = sft_loss_and_grad(&p, &[ex.clone()]).unwrap();
        // Every token costs ln V; the sum covers |r|+|d|+4 tokens.
        let expected = (vocab.size() as f64).ln() * ex.output.len() as f64 / ex.content_len as f64;
        assert!((loss - expected).abs() < 1e-12);
        let (doubled, _) = sft_loss_and_grad(&p, &[ex.clone(), ex]).unwrap();
        assert!((doubled - loss).abs() < 1e-12);
        assert!(sft_loss_and_grad(&p, &[]).is_err());
    }

    #[test]
    fn zero_epochs_returns_initialisation() {
        let shape = crate::policy::PolicyConfig::default().shape(16);
        let p = PolicyParams::init(shape, 0.08, &mut rng::stream(0, &[0]));
        let cfg = ColdStartConfig {
            epochs: 0,
            ..ColdStartConfig::default()
        };
        let (out, rows) = train_sft(p.clone(), &[], &cfg, 0).unwrap();
        assert_eq!(out, p);
        assert!(rows.is_empty());
        assert!(train_sft(p, &[], &ColdStartConfig::default(), 0).is_err());
    }

    #[test]
    fn cold_jsonl_round_trip() {
        let vocab = Vocab::new(8);
        let world = WorldConfig::default();
        let eps = crate::prefworld::generate_dataset(&world, 1, domain::COLD_EPISODES, 8).unwrap();
        let cands = synthesize(&eps, &ColdStartConfig::default(), 1).unwrap();
        let data = filter_cold(&cands, &eps, &jud(vocab), 1).unwrap();
        let mut buf = Vec::new();
        write_cold(&mut buf, &data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cold.jsonl");
        std::fs::write(&path, &buf).unwrap();
        assert_eq!(read_cold(&path, vocab).unwrap(), data.records);
        let first = String::from_utf8(buf).unwrap();
        assert!(first.starts_with("{\"episode_idx\":"));
        assert!(first.lines().next().unwrap().ends_with("\"reward_fn\":\"jud\"}"));
    }
}
