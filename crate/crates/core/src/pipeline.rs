//! Stage runners behind the command-line interface. Each stage writes into
//! `out_dir/<stage>/` together with the resolved configuration it ran with.

use std::path::{Path, PathBuf};

use crate::artifact::{read_to_string, write_new};
use crate::checkpoint::{Checkpoint, SeedState};
use crate::coldstart::{filter_cold, read_cold, synthesize, train_sft, write_cold, sft_metrics_csv, ColdDataset, ColdRecord, SftExample};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{curves_svg, evaluate, summarize, DecodeMode, DescriptionSource, EvalReport};
use crate::grpo::{metrics_csv, parse_metrics_csv, train_rl, RlSetup};
use crate::policy::PolicyParams;
use crate::prefworld::{generate_dataset, read_episodes, write_episodes, Episode};
use crate::rng::{self, domain};
use crate::symlang::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenWorld,
    Teach,
    Sft,
    Rl,
    Eval,
    Report,
}

impl Stage {
    pub fn dir_name(self) -> &'static str {
        match self {
            Stage::GenWorld => "gen-world",
            Stage::Teach => "teach",
            Stage::Sft => "sft",
            Stage::Rl => "rl",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }
}

/// Options that are not part of the experiment configuration.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub force: bool,
    pub from_init: bool,
}

pub fn stage_dir(config: &RunConfig, stage: Stage) -> PathBuf {
    config.out_dir.join(stage.dir_name())
}

fn vocab(config: &RunConfig) -> Vocab {
    Vocab::new(config.world.dims)
}

/// Write an artifact, or accept an identical existing file.
fn emit(path: &Path, bytes: &[u8], force: bool) -> Result<()> {
    if !force && path.exists() && std::fs::read(path).map_err(|e| Error::io(path, e))? == bytes {
        return Ok(());
    }
    write_new(path, bytes, force)
}

/// Refuse to start a stage whose outputs already exist, before any work.
fn ensure_fresh(dir: &Path, names: &[&str], force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    for name in names {
        let p = dir.join(name);
        if p.exists() {
            return Err(Error::Exists(p));
        }
    }
    Ok(())
}

fn episodes_bytes(episodes: &[Episode]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_episodes(&mut buf, episodes).expect("in-memory write");
    buf
}

fn fallback(explicit: &Option<PathBuf>, candidates: &[PathBuf]) -> Option<PathBuf> {
    explicit.clone().or_else(|| candidates.iter().find(|p| p.exists()).cloned())
}

pub fn cold_episodes(config: &RunConfig) -> Result<Vec<Episode>> {
    generate_dataset(&config.world, config.seed, domain::COLD_EPISODES, config.world.num_episodes)
}

pub fn test_episodes(config: &RunConfig) -> Result<Vec<Episode>> {
    generate_dataset(&config.world, config.seed, domain::TEST, config.eval.test_size)
}

pub fn probe_episodes(config: &RunConfig) -> Result<Vec<Episode>> {
    generate_dataset(&config.world, config.seed, domain::PROBE, config.eval.probe_size)
}

fn load_or(path: Option<PathBuf>, generate: impl FnOnce() -> Result<Vec<Episode>>) -> Result<Vec<Episode>> {
    match path {
        Some(p) => read_episodes(&p),
        None => generate(),
    }
}

fn check_dims(config: &RunConfig, episodes: &[Episode], what: &str) -> Result<()> {
    if let Some(e) = episodes.iter().find(|e| e.dims() != config.world.dims) {
        return Err(Error::invalid(format!(
            "{what} has {}-dimensional episodes but world.dims is {}",
            e.dims(),
            config.world.dims
        )));
    }
    Ok(())
}

pub fn initial_params(config: &RunConfig) -> PolicyParams {
    let shape = config.policy.shape(vocab(config).size());
    PolicyParams::init(shape, config.policy.init_scale, &mut rng::stream(config.seed, &[domain::INIT]))
}

fn load_params(config: &RunConfig, path: &Path) -> Result<PolicyParams> {
    let ck = Checkpoint::load(path)?;
    let expected = config.policy.shape(vocab(config).size());
    if ck.params.shape != expected {
        return Err(Error::invalid(format!(
            "checkpoint {} has shape {:?}, configuration implies {:?}",
            path.display(),
            ck.params.shape,
            expected
        )));
    }
    Ok(ck.params)
}

/// What a stage produced.
#[derive(Debug, Clone, Default)]
pub struct StageOutput {
    pub files: Vec<PathBuf>,
    pub notes: Vec<String>,
}

/// Runs one stage. The configuration's `inputs` are resolved first and the
/// resolved copy is written beside the outputs.
pub fn run_stage(stage: Stage, config: &RunConfig, opts: RunOptions) -> Result<StageOutput> {
    config.validate()?;
    let mut resolved = config.clone();
    let dir = stage_dir(config, stage);
    let out_of = |s: Stage, name: &str| stage_dir(config, s).join(name);
    let mut out = StageOutput::default();
    let put = |out: &mut StageOutput, name: &str, bytes: &[u8]| -> Result<()> {
        let p = dir.join(name);
        emit(&p, bytes, opts.force)?;
        out.files.push(p);
        Ok(())
    };
    match stage {
        Stage::GenWorld => {
            ensure_fresh(&dir, &["episodes.jsonl", "test.jsonl", "probe.jsonl"], opts.force)?;
            put(&mut out, "episodes.jsonl", &episodes_bytes(&cold_episodes(config)?))?;
            put(&mut out, "test.jsonl", &episodes_bytes(&test_episodes(config)?))?;
            put(&mut out, "probe.jsonl", &episodes_bytes(&probe_episodes(config)?))?;
        }
        Stage::Teach => {
            ensure_fresh(&dir, &["cold.jsonl"], opts.force)?;
            resolved.inputs.episodes = fallback(&config.inputs.episodes, &[out_of(Stage::GenWorld, "episodes.jsonl")]);
            let episodes = load_or(resolved.inputs.episodes.clone(), || cold_episodes(config))?;
            check_dims(config, &episodes, "episodes")?;
            let data = teach(config, &episodes)?;
            let mut buf = Vec::new();
            write_cold(&mut buf, &data).expect("in-memory write");
            put(&mut out, "cold.jsonl", &buf)?;
            out.notes.push(format!(
                "retained {} of {} candidates (retention {:.4})",
                data.records.len(),
                data.candidates,
                data.retention()
            ));
        }
        Stage::Sft => {
            ensure_fresh(&dir, &["checkpoint.json", "sft_metrics.csv"], opts.force)?;
            resolved.inputs.episodes = fallback(&config.inputs.episodes, &[out_of(Stage::GenWorld, "episodes.jsonl")]);
            resolved.inputs.cold = fallback(&config.inputs.cold, &[out_of(Stage::Teach, "cold.jsonl")]);
            let episodes = load_or(resolved.inputs.episodes.clone(), || cold_episodes(config))?;
            check_dims(config, &episodes, "episodes")?;
            let records = match &resolved.inputs.cold {
                Some(p) => read_cold(p, vocab(config))?,
                None => teach(config, &episodes)?.records,
            };
            let (params, rows) = sft(config, &episodes, &records)?;
            let ck = checkpoint(&resolved, params, "sft", rows.len());
            put(&mut out, "checkpoint.json", ck.to_json().as_bytes())?;
            put(&mut out, "sft_metrics.csv", sft_metrics_csv(&rows).as_bytes())?;
            if let Some(last) = rows.last() {
                out.notes.push(format!("{} SFT steps, final loss {:.6}", rows.len(), last.loss));
            }
        }
        Stage::Rl => {
            ensure_fresh(&dir, &["checkpoint.json", "metrics.csv"], opts.force)?;
            resolved.inputs.checkpoint = fallback(&config.inputs.checkpoint, &[out_of(Stage::Sft, "checkpoint.json")]);
            resolved.inputs.probe_episodes = fallback(&config.inputs.probe_episodes, &[out_of(Stage::GenWorld, "probe.jsonl")]);
            let start = match (&resolved.inputs.checkpoint, opts.from_init) {
                (Some(p), _) => load_params(config, p)?,
                (None, true) => initial_params(config),
                (None, false) => {
                    return Err(Error::invalid(format!(
                        "rl needs inputs.checkpoint (no SFT checkpoint at {}); pass --from-init to start from initialization",
                        out_of(Stage::Sft, "checkpoint.json").display()
                    )))
                }
            };
            let probe = load_or(resolved.inputs.probe_episodes.clone(), || probe_episodes(config))?;
            check_dims(config, &probe, "probe episodes")?;
            let (params, rows) = rl(config, start, &probe)?;
            let ck = checkpoint(&resolved, params, "rl", rows.len());
            put(&mut out, "checkpoint.json", ck.to_json().as_bytes())?;
            put(&mut out, "metrics.csv", metrics_csv(&rows).as_bytes())?;
            if let Some(last) = rows.last() {
                out.notes.push(format!(
                    "{} RL steps, final reward {:.4}, probe Acc_jud {:.4}",
                    rows.len(),
                    last.reward_mean,
                    last.acc_jud_probe
                ));
            }
        }
        Stage::Eval => {
            ensure_fresh(&dir, &["eval_report.json", "summary.json"], opts.force)?;
            resolved.inputs.checkpoint = fallback(
                &config.inputs.checkpoint,
                &[out_of(Stage::Rl, "checkpoint.json"), out_of(Stage::Sft, "checkpoint.json")],
            );
            resolved.inputs.test_episodes = fallback(&config.inputs.test_episodes, &[out_of(Stage::GenWorld, "test.jsonl")]);
            resolved.inputs.metrics = fallback(&config.inputs.metrics, &[out_of(Stage::Rl, "metrics.csv")]);
            let Some(ck_path) = resolved.inputs.checkpoint.clone() else {
                return Err(Error::invalid("eval needs inputs.checkpoint (no RL or SFT checkpoint under out_dir)"));
            };
            let params = load_params(config, &ck_path)?;
            let test = load_or(resolved.inputs.test_episodes.clone(), || test_episodes(config))?;
            check_dims(config, &test, "test episodes")?;
            let report = eval_policy(config, &params, &test)?;
            let rows = match &resolved.inputs.metrics {
                Some(p) => Some(parse_metrics_csv(&read_to_string(p)?)?),
                None => None,
            };
            let summary = summarize(&report, rows.as_deref(), &resolved.config_hash(), config.seed);
            put(&mut out, "eval_report.json", pretty(&report).as_bytes())?;
            put(&mut out, "summary.json", pretty(&summary).as_bytes())?;
            out.notes.push(format!(
                "Acc_jud {:.4}, Acc_gen {:.4}, reversed {:.4}",
                report.acc_jud, report.acc_gen, report.reversal.reversed
            ));
        }
        Stage::Report => {
            ensure_fresh(&dir, &["summary.json", "curves.svg"], opts.force)?;
            resolved.inputs.metrics = fallback(&config.inputs.metrics, &[out_of(Stage::Rl, "metrics.csv")]);
            resolved.inputs.eval_report = fallback(&config.inputs.eval_report, &[out_of(Stage::Eval, "eval_report.json")]);
            let Some(metrics_path) = resolved.inputs.metrics.clone() else {
                return Err(Error::invalid("report needs inputs.metrics (no RL metrics.csv under out_dir)"));
            };
            let Some(report_path) = resolved.inputs.eval_report.clone() else {
                return Err(Error::invalid("report needs inputs.eval_report (no eval_report.json under out_dir)"));
            };
            let rows = parse_metrics_csv(&read_to_string(&metrics_path)?)?;
            let report: EvalReport = serde_json::from_str(&read_to_string(&report_path)?).map_err(|e| Error::Parse {
                what: report_path.display().to_string(),
                msg: e.to_string(),
            })?;
            let summary = summarize(&report, Some(&rows), &resolved.config_hash(), config.seed);
            put(&mut out, "summary.json", pretty(&summary).as_bytes())?;
            put(&mut out, "curves.svg", curves_svg(&rows)?.as_bytes())?;
        }
    }
    put(&mut out, "resolved_config.json", resolved.to_json().as_bytes())?;
    Ok(out)
}

fn pretty<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serialises");
    s.push('\n');
    s
}

fn checkpoint(resolved: &RunConfig, params: PolicyParams, stage: &str, steps: usize) -> Checkpoint {
    Checkpoint {
        config: serde_json::to_value(resolved).expect("config serialises"),
        seed_state: SeedState {
            master_seed: resolved.seed,
            stage: stage.into(),
            step: steps as u64,
        },
        params,
    }
}

/// Teacher synthesis plus outcome filtering.
pub fn teach(config: &RunConfig, episodes: &[Episode]) -> Result<ColdDataset> {
    let candidates = synthesize(episodes, &config.coldstart, config.seed)?;
    let reward = config.oracle.reward(config.coldstart.reward_source, vocab(config));
    filter_cold(&candidates, episodes, &reward, config.seed)
}

pub fn sft(
    config: &RunConfig,
    episodes: &[Episode],
    records: &[ColdRecord],
) -> Result<(PolicyParams, Vec<crate::coldstart::SftRow>)> {
    let examples: Vec<SftExample> = records
        .iter()
        .map(|r| {
            let e = episodes
                .get(r.episode_idx)
                .ok_or_else(|| Error::invalid(format!("cold record refers to missing episode {}", r.episode_idx)))?;
            SftExample::new(vocab(config), r, e)
        })
        .collect::<Result<_>>()?;
    train_sft(initial_params(config), &examples, &config.coldstart, config.seed)
}

pub fn rl(config: &RunConfig, start: PolicyParams, probe: &[Episode]) -> Result<(PolicyParams, Vec<crate::grpo::RlRow>)> {
    let reward = config.oracle.reward(config.rl.reward_source, vocab(config));
    let setup = RlSetup {
        config: &config.rl,
        world: &config.world,
        decode: &config.decode,
        reward: &reward,
        probe,
        probe_judge: &config.oracle.judge,
        seed: config.seed,
    };
    train_rl(start, &setup)
}

pub fn eval_policy(config: &RunConfig, params: &PolicyParams, test: &[Episode]) -> Result<EvalReport> {
    let mode = if config.eval.sampled {
        DecodeMode::Sampled {
            seed: rng::derive_seed(config.seed, &[domain::EVAL]),
        }
    } else {
        DecodeMode::Greedy
    };
    let source = DescriptionSource::Policy { params, mode };
    let mut report = evaluate(&source, test, &config.world, &config.oracle, &config.eval, &config.decode, config.seed)?;
    if config.judge.url.is_some() {
        let acc = remote_acc(config, &source, test)?;
        report.generalization.insert("remote_judge".into(), acc);
    }
    Ok(report)
}

/// Accuracy under an external judge: reward 1 when it gives the chosen
/// response probability above one half.
fn remote_acc(config: &RunConfig, source: &DescriptionSource<'_>, test: &[Episode]) -> Result<f64> {
    use crate::oracles::{JudgeRequest, RemoteJudge};
    use rayon::prelude::*;
    let judge = RemoteJudge::new(&config.judge)?;
    let hits: Vec<u8> = test
        .par_iter()
        .enumerate()
        .map(|(i, e)| match source.describe(e, i, &config.decode)? {
            Some(q) => Ok((judge.remote_judge(&JudgeRequest::new(&q, &e.test))? > 0.5) as u8),
            None => Ok(0),
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().map(|&h| h as u64).sum::<u64>() as f64 / test.len() as f64)
}
