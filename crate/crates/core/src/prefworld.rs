//! Synthetic preference world and the reversal transform.
//!
//! A user is a sparse signed vector `p` over `D` dimensions. A response is
//! summarised by an attribute vector `a` in `{-1,0,1}^D` and the user prefers
//! whichever response has the larger `p·a`.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::symlang::ParsedDescription;

pub type Attrs = Vec<i8>;

pub fn dot(p: &[i8], a: &[i8]) -> i32 {
    p.iter().zip(a).map(|(&x, &y)| x as i32 * y as i32).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalKind {
    Pairs,
    Ugc,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    /// Number of preference dimensions `D`.
    pub dims: usize,
    /// Active dimensions per user `K`.
    pub active: usize,
    /// Probability that an attribute coordinate is nonzero.
    pub attr_density: f64,
    /// Probability that a pair's labels are swapped.
    pub label_noise: f64,
    /// Signals per episode `T`.
    pub signals: usize,
    pub signal_kind: SignalKind,
    pub num_episodes: usize,
    pub retry_cap: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            dims: 8,
            active: 2,
            attr_density: 0.5,
            label_noise: 0.0,
            signals: 4,
            signal_kind: SignalKind::Pairs,
            num_episodes: 2000,
            retry_cap: 10_000,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims == 0 {
            return Err(Error::invalid("world.dims must be at least 1"));
        }
        if self.active == 0 || self.active > self.dims {
            return Err(Error::invalid(format!(
                "world.active must be in 1..={} (got {})",
                self.dims, self.active
            )));
        }
        if !(0.0..=1.0).contains(&self.attr_density) || self.attr_density == 0.0 {
            return Err(Error::invalid("world.attr_density must be in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::invalid("world.label_noise must be in [0, 1]"));
        }
        if self.signals == 0 {
            return Err(Error::invalid("world.signals must be at least 1"));
        }
        if self.retry_cap == 0 {
            return Err(Error::invalid("world.retry_cap must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserProfile {
    pub p: Attrs,
}

impl UserProfile {
    pub fn new(p: Attrs) -> Self {
        UserProfile { p }
    }

    pub fn active_dims(&self) -> Vec<usize> {
        self.p
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(j, _)| j)
            .collect()
    }

    pub fn negated(&self) -> Self {
        UserProfile {
            p: self.p.iter().map(|v| -v).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreferencePair {
    /// Context tag; the position of the pair inside its episode.
    pub post_id: u64,
    pub chosen: Attrs,
    pub rejected: Attrs,
}

impl PreferencePair {
    pub fn swapped(&self) -> Self {
        PreferencePair {
            post_id: self.post_id,
            chosen: self.rejected.clone(),
            rejected: self.chosen.clone(),
        }
    }

    /// `a_w - a_l`.
    pub fn diff(&self) -> Vec<i8> {
        self.chosen.iter().zip(&self.rejected).map(|(w, l)| w - l).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Signal {
    Pair(PreferencePair),
    Ugc(Attrs),
}

impl Signal {
    /// Per-dimension evidence: `a_w - a_l` for pairs, `a` for UGC.
    pub fn evidence(&self) -> Vec<i8> {
        match self {
            Signal::Pair(pair) => pair.diff(),
            Signal::Ugc(a) => a.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub user: UserProfile,
    pub signals: Vec<Signal>,
    pub test: PreferencePair,
}

impl Episode {
    pub fn dims(&self) -> usize {
        self.user.p.len()
    }
}

fn check_k(config: &WorldConfig) -> Result<()> {
    if config.active == 0 || config.active > config.dims {
        return Err(Error::invalid(format!(
            "need 1 <= K <= D, got K={} D={}",
            config.active, config.dims
        )));
    }
    Ok(())
}

/// Uniform K-subset of dimensions, each active entry an independent fair sign.
pub fn sample_user(config: &WorldConfig, rng: &mut Stream) -> Result<UserProfile> {
    check_k(config)?;
    let mut chosen = sample_indices(rng, config.dims, config.active).into_vec();
    chosen.sort_unstable();
    let mut p = vec![0i8; config.dims];
    for j in chosen {
        p[j] = if rng.random::<bool>() { 1 } else { -1 };
    }
    Ok(UserProfile { p })
}

pub fn sample_attrs(dims: usize, density: f64, rng: &mut Stream) -> Attrs {
    (0..dims)
        .map(|_| {
            let u: f64 = rng.random();
            if u < density / 2.0 {
                -1
            } else if u < density {
                1
            } else {
                0
            }
        })
        .collect()
}

/// Label two candidates for `user`: the higher `p·a` becomes the chosen
/// response; `flip` swaps the labels. Ties return `None`.
pub fn label_pair(user: &UserProfile, a: Attrs, b: Attrs, flip: bool) -> Option<PreferencePair> {
    let (sa, sb) = (dot(&user.p, &a), dot(&user.p, &b));
    if sa == sb {
        return None;
    }
    let (chosen, rejected) = if (sa > sb) != flip { (a, b) } else { (b, a) };
    Some(PreferencePair {
        post_id: 0,
        chosen,
        rejected,
    })
}

pub fn generate_pair(user: &UserProfile, config: &WorldConfig, rng: &mut Stream) -> Result<PreferencePair> {
    let dims = user.p.len();
    for _ in 0..config.retry_cap {
        let a = sample_attrs(dims, config.attr_density, rng);
        let b = sample_attrs(dims, config.attr_density, rng);
        if dot(&user.p, &a) == dot(&user.p, &b) {
            continue;
        }
        let flip = rng.random::<f64>() < config.label_noise;
        return Ok(label_pair(user, a, b, flip).expect("non-tied"));
    }
    Err(Error::RetryCap {
        what: "sampling a non-tied preference pair",
        cap: config.retry_cap,
    })
}

/// A UGC vector with `p·a > 0`. Candidates with `p·a = 0` are resampled and
/// those with `p·a < 0` are negated, so that generating for `-p` from the
/// same stream yields exactly the negated vector.
pub fn generate_ugc(user: &UserProfile, config: &WorldConfig, rng: &mut Stream) -> Result<Attrs> {
    let dims = user.p.len();
    for _ in 0..config.retry_cap {
        let a = sample_attrs(dims, config.attr_density, rng);
        match dot(&user.p, &a) {
            0 => continue,
            s if s > 0 => return Ok(a),
            _ => return Ok(a.into_iter().map(|v| -v).collect()),
        }
    }
    Err(Error::RetryCap {
        what: "sampling a preference-revealing UGC signal",
        cap: config.retry_cap,
    })
}

pub fn generate_episode(
    user: &UserProfile,
    signals: usize,
    kind: SignalKind,
    config: &WorldConfig,
    rng: &mut Stream,
) -> Result<Episode> {
    if signals == 0 {
        return Err(Error::invalid("an episode needs at least one signal"));
    }
    let mut out = Vec::with_capacity(signals);
    for i in 0..signals {
        let ugc = match kind {
            SignalKind::Pairs => false,
            SignalKind::Ugc => true,
            SignalKind::Mixed => rng.random::<bool>(),
        };
        out.push(if ugc {
            Signal::Ugc(generate_ugc(user, config, rng)?)
        } else {
            let mut pair = generate_pair(user, config, rng)?;
            pair.post_id = i as u64;
            Signal::Pair(pair)
        });
    }
    let mut test = generate_pair(user, config, rng)?;
    test.post_id = signals as u64;
    Ok(Episode {
        user: user.clone(),
        signals: out,
        test,
    })
}

/// Swap every pair and negate every UGC vector along with the user.
pub fn reverse_episode(episode: &Episode) -> Episode {
    Episode {
        user: episode.user.negated(),
        signals: episode
            .signals
            .iter()
            .map(|s| match s {
                Signal::Pair(pair) => Signal::Pair(pair.swapped()),
                Signal::Ugc(a) => Signal::Ugc(a.iter().map(|v| -v).collect()),
            })
            .collect(),
        test: episode.test.swapped(),
    }
}

pub fn golden_description(user: &UserProfile) -> ParsedDescription {
    ParsedDescription { q: user.p.clone() }
}

/// Episode `index` of the dataset identified by `(master_seed, domain)`.
pub fn episode_at(config: &WorldConfig, master_seed: u64, domain: u64, index: usize) -> Result<Episode> {
    let mut stream = rng::stream(master_seed, &[domain, index as u64]);
    let user = sample_user(config, &mut stream)?;
    generate_episode(&user, config.signals, config.signal_kind, config, &mut stream)
}

/// `count` episodes, each from its own derived stream. Parallel and serial
/// generation produce identical results.
pub fn generate_dataset(config: &WorldConfig, master_seed: u64, domain: u64, count: usize) -> Result<Vec<Episode>> {
    config.validate()?;
    (0..count)
        .into_par_iter()
        .map(|i| episode_at(config, master_seed, domain, i))
        .collect()
}

// ---------------------------------------------------------------------------
// episodes.jsonl
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UserRecord {
    p: Attrs,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairRecord {
    chosen: Attrs,
    rejected: Attrs,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum SignalRecord {
    Pair { chosen: Attrs, rejected: Attrs },
    Ugc { attrs: Attrs },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeRecord {
    user: UserRecord,
    signals: Vec<SignalRecord>,
    test: PairRecord,
}

impl From<&Episode> for EpisodeRecord {
    fn from(e: &Episode) -> Self {
        EpisodeRecord {
            user: UserRecord { p: e.user.p.clone() },
            signals: e
                .signals
                .iter()
                .map(|s| match s {
                    Signal::Pair(pair) => SignalRecord::Pair {
                        chosen: pair.chosen.clone(),
                        rejected: pair.rejected.clone(),
                    },
                    Signal::Ugc(a) => SignalRecord::Ugc { attrs: a.clone() },
                })
                .collect(),
            test: PairRecord {
                chosen: e.test.chosen.clone(),
                rejected: e.test.rejected.clone(),
            },
        }
    }
}

fn check_vector(v: &Attrs, dims: usize, line: usize) -> Result<()> {
    if v.len() != dims || v.iter().any(|x| !(-1..=1).contains(x)) {
        return Err(Error::Parse {
            what: format!("episode on line {line}"),
            msg: format!("attribute vectors must have {dims} entries in {{-1,0,1}}"),
        });
    }
    Ok(())
}

impl EpisodeRecord {
    fn into_episode(self, line: usize) -> Result<Episode> {
        let dims = self.user.p.len();
        check_vector(&self.user.p, dims, line)?;
        let mut signals = Vec::with_capacity(self.signals.len());
        for (i, s) in self.signals.into_iter().enumerate() {
            signals.push(match s {
                SignalRecord::Pair { chosen, rejected } => {
                    check_vector(&chosen, dims, line)?;
                    check_vector(&rejected, dims, line)?;
                    Signal::Pair(PreferencePair {
                        post_id: i as u64,
                        chosen,
                        rejected,
                    })
                }
                SignalRecord::Ugc { attrs } => {
                    check_vector(&attrs, dims, line)?;
                    Signal::Ugc(attrs)
                }
            });
        }
        check_vector(&self.test.chosen, dims, line)?;
        check_vector(&self.test.rejected, dims, line)?;
        Ok(Episode {
            user: UserProfile { p: self.user.p },
            test: PreferencePair {
                post_id: signals.len() as u64,
                chosen: self.test.chosen,
                rejected: self.test.rejected,
            },
            signals,
        })
    }
}

pub fn episode_to_json(e: &Episode) -> String {
    serde_json::to_string(&EpisodeRecord::from(e)).expect("episode serialises")
}

pub fn episode_from_json(line: &str) -> Result<Episode> {
    let record: EpisodeRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
        what: "episode".into(),
        msg: e.to_string(),
    })?;
    record.into_episode(1)
}

pub fn write_episodes(w: &mut impl Write, episodes: &[Episode]) -> std::io::Result<()> {
    for e in episodes {
        writeln!(w, "{}", episode_to_json(e))?;
    }
    Ok(())
}

pub fn read_episodes(path: &Path) -> Result<Vec<Episode>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EpisodeRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            what: format!("{} line {}", path.display(), i + 1),
            msg: e.to_string(),
        })?;
        out.push(record.into_episode(i + 1)?);
    }
    Ok(out)
}
