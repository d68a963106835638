//! Offline evaluation of description sources, plus the summary and curve
//! report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coldstart::evidence_votes;
use crate::error::{Error, Result};
use crate::grpo::RlRow;
use crate::oracles::{gen_prefers_chosen, GenOracle, JudgeOracle, OracleConfig};
use crate::policy::{greedy, sample, DecodeConfig, PolicyParams};
use crate::prefworld::{dot, generate_dataset, golden_description, reverse_episode, Episode, SignalKind, WorldConfig};
use crate::rng::{self, domain};
use crate::symlang::{encode_episode, parse_output, ParsedDescription, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    /// Sampling with the configured decoder, one stream per episode.
    Sampled { seed: u64 },
}

impl DecodeMode {
    pub fn label(&self) -> String {
        match self {
            DecodeMode::Greedy => "greedy".into(),
            DecodeMode::Sampled { seed } => format!("sampled(seed={seed})"),
        }
    }
}

/// Where a description comes from.
#[derive(Debug, Clone)]
pub enum DescriptionSource<'a> {
    Policy { params: &'a PolicyParams, mode: DecodeMode },
    /// The user's latent vector.
    Golden,
    /// The all-zero description.
    Null,
    /// Description-free pass-through: the sign of the summed per-dimension
    /// evidence in the episode's signals.
    RawSignals,
    Fixed(ParsedDescription),
}

impl DescriptionSource<'_> {
    pub fn kind(&self) -> &'static str {
        match self {
            DescriptionSource::Policy { .. } => "policy",
            DescriptionSource::Golden => "golden",
            DescriptionSource::Null => "null",
            DescriptionSource::RawSignals => "raw_signals",
            DescriptionSource::Fixed(_) => "fixed",
        }
    }

    /// The source to use on reversed episodes. Fixed descriptions are
    /// mirrored; every other source reads the (reversed) episode itself.
    pub fn reversed(&self) -> Self {
        match self {
            DescriptionSource::Fixed(q) => DescriptionSource::Fixed(q.negated()),
            other => other.clone(),
        }
    }

    /// Description for `episode`, or `None` when a policy output fails the
    /// format gate.
    pub fn describe(&self, episode: &Episode, index: usize, decode: &DecodeConfig) -> Result<Option<ParsedDescription>> {
        let dims = episode.dims();
        Ok(match self {
            DescriptionSource::Golden => Some(golden_description(&episode.user)),
            DescriptionSource::Null => Some(ParsedDescription::zeros(dims)),
            DescriptionSource::Fixed(q) => Some(q.clone()),
            DescriptionSource::RawSignals => Some(ParsedDescription {
                q: evidence_votes(episode).iter().map(|v| v.signum() as i8).collect(),
            }),
            DescriptionSource::Policy { params, mode } => {
                let vocab = Vocab::new(dims);
                let prompt = encode_episode(vocab, episode)?;
                let out = match mode {
                    DecodeMode::Greedy => greedy(params, &prompt, decode.max_len)?,
                    DecodeMode::Sampled { seed } => {
                        let mut s = rng::stream(*seed, &[domain::EVAL, index as u64]);
                        sample(params, &prompt, decode, &mut s)?
                    }
                };
                parse_output(vocab, &out.tokens).description().cloned()
            }
        })
    }
}

fn nonempty(episodes: &[Episode]) -> Result<()> {
    if episodes.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    Ok(())
}

/// Per-episode judging rewards in `{0, 1}`.
pub fn jud_rewards(source: &DescriptionSource<'_>, episodes: &[Episode], judge: &JudgeOracle, decode: &DecodeConfig) -> Result<Vec<u8>> {
    episodes
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            Ok(match source.describe(e, i, decode)? {
                Some(q) => judge.prefers_chosen(&q, &e.test) as u8,
                None => 0,
            })
        })
        .collect()
}

fn mean(rewards: &[u8]) -> f64 {
    rewards.iter().map(|&r| r as u64).sum::<u64>() as f64 / rewards.len() as f64
}

pub fn acc_jud(source: &DescriptionSource<'_>, episodes: &[Episode], judge: &JudgeOracle, decode: &DecodeConfig) -> Result<f64> {
    nonempty(episodes)?;
    Ok(mean(&jud_rewards(source, episodes, judge, decode)?))
}

/// Generation-oracle accuracy; the noise for episode `i` comes from stream
/// `(seed, [REWARD, i])`, so one seed fixes a whole report.
pub fn acc_gen(
    source: &DescriptionSource<'_>,
    episodes: &[Episode],
    gen: &GenOracle,
    decode: &DecodeConfig,
    seed: u64,
) -> Result<f64> {
    nonempty(episodes)?;
    let rewards: Vec<u8> = episodes
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let mut s = rng::stream(seed, &[domain::REWARD, i as u64]);
            Ok(match source.describe(e, i, decode)? {
                Some(q) => gen_prefers_chosen(gen, &q, &e.test, &mut s) as u8,
                None => 0,
            })
        })
        .collect::<Result<_>>()?;
    Ok(mean(&rewards))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReversalResult {
    pub normal: f64,
    pub reversed: f64,
}

impl ReversalResult {
    pub fn drop(&self) -> f64 {
        self.normal - self.reversed
    }
}

pub fn reversal_eval(
    source: &DescriptionSource<'_>,
    episodes: &[Episode],
    judge: &JudgeOracle,
    decode: &DecodeConfig,
) -> Result<ReversalResult> {
    let reversed: Vec<Episode> = episodes.iter().map(reverse_episode).collect();
    Ok(ReversalResult {
        normal: acc_jud(source, episodes, judge, decode)?,
        reversed: acc_jud(&source.reversed(), &reversed, judge, decode)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Held-out probe episodes scored during RL.
    pub probe_size: usize,
    /// Test episodes generated when no test file is supplied.
    pub test_size: usize,
    /// Judge sharpness values for the cross-judge sweep.
    pub judge_betas: Vec<f64>,
    /// Non-default decision threshold used to make the beta sweep informative.
    pub strict_threshold: f64,
    /// Probability that the noisy-judge condition flips a decision.
    pub judge_flip_noise: f64,
    /// Episodes per generalisation world.
    pub generalization_size: usize,
    /// Evaluate policies by sampling instead of greedy decoding.
    pub sampled: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            probe_size: 200,
            test_size: 1000,
            judge_betas: vec![1.0, 2.0, 4.0],
            strict_threshold: 0.8,
            judge_flip_noise: 0.1,
            generalization_size: 500,
            sampled: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.probe_size == 0 || self.test_size == 0 || self.generalization_size == 0 {
            return Err(Error::invalid("eval sizes must be positive"));
        }
        for &beta in &self.judge_betas {
            JudgeOracle::new(beta).validate()?;
        }
        JudgeOracle {
            beta: 1.0,
            threshold: self.strict_threshold,
        }
        .validate()?;
        if !(0.0..=1.0).contains(&self.judge_flip_noise) {
            return Err(Error::invalid("eval.judge_flip_noise must be in [0, 1]"));
        }
        Ok(())
    }
}

/// Accuracy per condition. Pair-trained sources are tested on UGC and mixed
/// signal worlds. The judge axis varies `beta` at the default threshold,
/// where the decision is provably beta-invariant, and at a strict threshold;
/// one more condition flips judge decisions at random.
pub fn generalization_eval(
    source: &DescriptionSource<'_>,
    world: &WorldConfig,
    judge: &JudgeOracle,
    config: &EvalConfig,
    decode: &DecodeConfig,
    seed: u64,
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    let mut worlds = Vec::new();
    for (label, kind, tag) in [("pairs", SignalKind::Pairs, 0u64), ("ugc", SignalKind::Ugc, 1), ("mixed", SignalKind::Mixed, 2)] {
        let w = WorldConfig {
            signal_kind: kind,
            ..world.clone()
        };
        let eps = generate_dataset(&w, rng::derive_seed(seed, &[domain::TEST, tag]), domain::TEST, config.generalization_size)?;
        worlds.push((label, eps));
    }
    for (label, eps) in &worlds {
        out.insert(format!("signals_{label}"), acc_jud(source, eps, judge, decode)?);
    }
    let pairs = &worlds[0].1;
    let descriptions: Vec<Option<ParsedDescription>> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, e)| source.describe(e, i, decode))
        .collect::<Result<_>>()?;
    let score = |judge: &JudgeOracle| -> f64 {
        let hits = descriptions
            .iter()
            .zip(pairs)
            .filter(|(q, e)| q.as_ref().is_some_and(|q| judge.prefers_chosen(q, &e.test)))
            .count();
        hits as f64 / pairs.len() as f64
    };
    for &beta in &config.judge_betas {
        out.insert(format!("judge_beta_{beta}"), score(&JudgeOracle::new(beta)));
        out.insert(
            format!("judge_beta_{beta}_threshold_{}", config.strict_threshold),
            score(&JudgeOracle {
                beta,
                threshold: config.strict_threshold,
            }),
        );
    }
    let mut flips = rng::stream(seed, &[domain::EVAL, u64::MAX]);
    let noisy = descriptions
        .iter()
        .zip(pairs)
        .filter(|(q, e)| {
            let flip = flips.random::<f64>() < config.judge_flip_noise;
            q.as_ref().is_some_and(|q| {
                let m = crate::oracles::margin(q, &e.test);
                // A flipped judge reverses a strict preference; ties stay ties.
                if flip {
                    m < 0
                } else {
                    m > 0
                }
            })
        })
        .count();
    out.insert(format!("judge_flip_{}", config.judge_flip_noise), noisy as f64 / pairs.len() as f64);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub source: String,
    pub acc_jud: f64,
    pub acc_gen: f64,
    pub reversal: ReversalResult,
    pub generalization: BTreeMap<String, f64>,
    pub sample_count: usize,
    pub decode_mode: String,
}

/// Full evaluation of one source on one test set.
pub fn evaluate(
    source: &DescriptionSource<'_>,
    episodes: &[Episode],
    world: &WorldConfig,
    oracles: &OracleConfig,
    config: &EvalConfig,
    decode: &DecodeConfig,
    seed: u64,
) -> Result<EvalReport> {
    let mode = match source {
        DescriptionSource::Policy { mode, .. } => mode.label(),
        _ => "n/a".into(),
    };
    Ok(EvalReport {
        source: source.kind().into(),
        acc_jud: acc_jud(source, episodes, &oracles.judge, decode)?,
        acc_gen: acc_gen(source, episodes, &oracles.gen, decode, seed)?,
        reversal: reversal_eval(source, episodes, &oracles.judge, decode)?,
        generalization: generalization_eval(source, world, &oracles.judge, config, decode, seed)?,
        sample_count: episodes.len(),
        decode_mode: mode,
    })
}

// ---------------------------------------------------------------------------
// Enumeration baselines
// ---------------------------------------------------------------------------

/// Expected judging accuracy of a description naming one uniformly chosen
/// dimension with a uniformly chosen sign, computed exactly by enumerating
/// every candidate pair `(a, b)` for a canonical user.
///
/// The attribute distribution is invariant under permuting dimensions and
/// flipping signs, so every user with `K` active dimensions yields the same
/// value; the tests check this against all users at small `D`.
pub fn single_dimension_baseline(world: &WorldConfig) -> Result<f64> {
    let mut p = vec![0i8; world.dims];
    p[..world.active].iter_mut().for_each(|v| *v = 1);
    single_dimension_baseline_for(world, &p)
}

pub fn single_dimension_baseline_for(world: &WorldConfig, p: &[i8]) -> Result<f64> {
    let d = world.dims;
    if d > 9 {
        return Err(Error::invalid("exhaustive enumeration is limited to D <= 9"));
    }
    let n = 3usize.pow(d as u32);
    let rho = world.attr_density;
    let mut vectors = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for code in 0..n {
        let mut c = code;
        let mut a = vec![0i8; d];
        let mut w = 1.0;
        for slot in a.iter_mut() {
            *slot = (c % 3) as i8 - 1;
            c /= 3;
            w *= if *slot == 0 { 1.0 - rho } else { rho / 2.0 };
        }
        vectors.push(a);
        weights.push(w);
    }
    let scores: Vec<i32> = vectors.iter().map(|a| dot(p, a)).collect();
    // Σ over non-tied (a, b) of weight × #{j : a_j ≠ b_j}; label noise only
    // swaps a and b, which leaves a_j ≠ b_j unchanged.
    let (mass, hits) = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut mass = 0.0;
            let mut hits = 0.0;
            for k in 0..n {
                if scores[i] == scores[k] {
                    continue;
                }
                let w = weights[i] * weights[k];
                let differ = vectors[i].iter().zip(&vectors[k]).filter(|(x, y)| x != y).count();
                mass += w;
                hits += w * differ as f64;
            }
            (mass, hits)
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    // P(s·Δ_j > 0) = P(Δ_j ≠ 0) / 2 for a uniformly random sign s.
    Ok(hits / mass / d as f64 / 2.0)
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub acc_jud: f64,
    pub acc_gen: f64,
    pub reversal: ReversalResult,
    pub generalization: BTreeMap<String, f64>,
    pub config_hash: String,
    pub seed: u64,
    pub source: String,
    pub sample_count: usize,
    pub decode_mode: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub steps: usize,
    pub initial_acc_jud_probe: f64,
    pub final_acc_jud_probe: f64,
    pub final_reward_mean: f64,
    pub final_len_mean: f64,
}

pub fn summarize(report: &EvalReport, metrics: Option<&[RlRow]>, config_hash: &str, seed: u64) -> Summary {
    Summary {
        acc_jud: report.acc_jud,
        acc_gen: report.acc_gen,
        reversal: report.reversal,
        generalization: report.generalization.clone(),
        config_hash: config_hash.into(),
        seed,
        source: report.source.clone(),
        sample_count: report.sample_count,
        decode_mode: report.decode_mode.clone(),
        training: metrics.and_then(|rows| {
            let (first, last) = (rows.first()?, rows.last()?);
            Some(TrainingSummary {
                steps: rows.len(),
                initial_acc_jud_probe: first.acc_jud_probe,
                final_acc_jud_probe: last.acc_jud_probe,
                final_reward_mean: last.reward_mean,
                final_len_mean: last.len_mean,
            })
        }),
    }
}

/// Stacked panels of the metric curves against step, as a plain SVG
/// document.
pub fn curves_svg(rows: &[RlRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::invalid("no metric rows to plot"));
    }
    const W: f64 = 640.0;
    const PANEL: f64 = 180.0;
    const PAD: f64 = 40.0;
    let series: [(&str, &str, Vec<f64>); 3] = [
        ("reward_mean", "#1f77b4", rows.iter().map(|r| r.reward_mean).collect()),
        ("acc_jud_probe", "#2ca02c", rows.iter().map(|r| r.acc_jud_probe).collect()),
        ("len_mean", "#d62728", rows.iter().map(|r| r.len_mean).collect()),
    ];
    let height = 3.0 * (PANEL + PAD) + PAD;
    let mut svg = String::new();
    writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{height}\" viewBox=\"0 0 {W} {height}\">"
    )
    .unwrap();
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    let last_step = rows.last().unwrap().step.max(1) as f64;
    for (k, (name, color, ys)) in series.iter().enumerate() {
        let top = PAD + k as f64 * (PANEL + PAD);
        let (lo, hi) = if *name == "len_mean" {
            (0.0, ys.iter().cloned().fold(1.0, f64::max))
        } else {
            (0.0, 1.0)
        };
        writeln!(svg, "<g id=\"{name}\">").unwrap();
        writeln!(
            svg,
            "<rect x=\"{PAD}\" y=\"{top}\" width=\"{:.1}\" height=\"{PANEL}\" fill=\"none\" stroke=\"#999\"/>",
            W - 2.0 * PAD
        )
        .unwrap();
        writeln!(
            svg,
            "<text x=\"{PAD}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\">{name} (0 to {hi:.3}) vs step 0 to {}</text>",
            top - 6.0,
            last_step
        )
        .unwrap();
        let points: Vec<String> = rows
            .iter()
            .zip(ys)
            .map(|(r, y)| {
                let x = PAD + (W - 2.0 * PAD) * r.step as f64 / last_step;
                let yy = top + PANEL * (1.0 - (y - lo) / (hi - lo));
                format!("{x:.2},{yy:.2}")
            })
            .collect();
        writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            points.join(" ")
        )
        .unwrap();
        svg.push_str("</g>\n");
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
