//! Offline pivot pipeline: decomposition into (state, expert turn)
//! candidates, reward profiling under a frozen reference policy, variance and
//! difficulty filtering, and the resampling diversity statistic.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::TurnAction;
use crate::mdp::{replay, rollout, EnvSuite, MdpError, TurnEnv};
use crate::policy::{action_support, PolicySnapshot, TurnPolicy};
use crate::seed::rng_for;
use crate::state::{InteractionState, MalformedTrajectory, Trajectory, TranscriptEntry};
use crate::verifier::{r_func, JudgeClient, MatchRule};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Malformed(#[from] MalformedTrajectory),
    #[error("no profile for candidate `{0}`")]
    MissingProfile(String),
    #[error("profiling needs K >= 2, got {0}")]
    TooFewRollouts(usize),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("dataset has no header record")]
    MissingHeader,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Mdp(#[from] MdpError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PivotCandidate {
    /// `<trajectory id>/<depth>`.
    pub candidate_id: String,
    pub traj_id: String,
    pub depth: usize,
    pub state: InteractionState,
    pub expert_action: TurnAction,
}

/// One candidate per assistant turn of every trajectory.
pub fn decompose(trajectories: &[Trajectory]) -> Result<Vec<PivotCandidate>, PipelineError> {
    let mut out = Vec::new();
    for traj in trajectories {
        traj.validate(None)?;
        for (t, step) in traj.steps.iter().enumerate() {
            out.push(PivotCandidate {
                candidate_id: format!("{}/{t}", traj.id),
                traj_id: traj.id.clone(),
                depth: t,
                state: step.state.clone(),
                expert_action: step.action.clone(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileStats {
    pub k: usize,
    pub rewards: Vec<f64>,
    pub mean: f64,
    /// Sample variance with the `K - 1` denominator.
    pub variance: f64,
    pub rule_id: String,
}

impl ProfileStats {
    pub fn from_rewards(rewards: Vec<f64>, rule_id: impl Into<String>) -> Self {
        let k = rewards.len();
        let mean = rewards.iter().sum::<f64>() / k as f64;
        let variance = if k >= 2 && rewards.iter().any(|r| *r != rewards[0]) {
            rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (k - 1) as f64
        } else {
            0.0
        };
        Self {
            k,
            rewards,
            mean,
            variance,
            rule_id: rule_id.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileMode {
    /// Verifier reward of one sampled turn against the expert turn.
    #[default]
    Turn,
    /// Acceptance of a full reference-policy rollout from the state.
    FullReturn,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProfileReport {
    pub stats: BTreeMap<String, ProfileStats>,
    /// Per-candidate failures; the batch continues past them.
    pub failures: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct ProfileConfig {
    pub k: usize,
    pub rule: MatchRule,
    pub mode: ProfileMode,
    pub master_seed: u64,
    pub workers: usize,
}

fn profile_one<E, P>(
    candidate: &PivotCandidate,
    reference: &P,
    suite: &EnvSuite<E>,
    cfg: &ProfileConfig,
    judge: Option<&dyn JudgeClient>,
) -> Result<ProfileStats, String>
where
    E: TurnEnv,
    P: TurnPolicy,
{
    let env = suite
        .get(&candidate.state.context_id)
        .map_err(|e| e.to_string())?;
    let state = replay(env, &candidate.state.transcript).map_err(|e| e.to_string())?;
    if state.key() != candidate.state.key() {
        return Err("replayed state key differs from the stored one".into());
    }
    let support = action_support(env, &state);
    let mut rewards = Vec::with_capacity(cfg.k);
    for k in 0..cfg.k {
        let mut rng = rng_for(cfg.master_seed, &[&candidate.candidate_id, &k.to_string()]);
        let reward = match cfg.mode {
            ProfileMode::Turn => {
                let a = reference
                    .sample(&state, &support, &mut rng)
                    .map_err(|e| e.to_string())?;
                r_func(&cfg.rule, &state, &a, &candidate.expert_action, judge)
                    .map_err(|e| e.to_string())?
            }
            ProfileMode::FullReturn => {
                let t = rollout(env, reference, &state, &mut rng, &candidate.candidate_id)
                    .map_err(|e| e.to_string())?;
                if t.accepted {
                    1.0
                } else {
                    0.0
                }
            }
        };
        rewards.push(reward);
    }
    Ok(ProfileStats::from_rewards(rewards, cfg.rule.rule_id()))
}

/// Profiles every candidate with `K` rollouts of the frozen reference. The
/// `k`-th rollout of a candidate draws from a generator seeded by
/// `(master_seed, candidate_id, k)`, so results do not depend on order or
/// on the number of workers.
pub fn profile<E, P>(
    candidates: &[PivotCandidate],
    reference: &PolicySnapshot<P>,
    suite: &EnvSuite<E>,
    cfg: &ProfileConfig,
    judge: Option<&dyn JudgeClient>,
) -> Result<ProfileReport, PipelineError>
where
    E: TurnEnv,
    P: TurnPolicy + Clone + Sync,
{
    if cfg.k < 2 {
        return Err(PipelineError::TooFewRollouts(cfg.k));
    }
    let policy = reference.policy();
    let run = |c: &PivotCandidate| {
        (
            c.candidate_id.clone(),
            profile_one(c, policy, suite, cfg, judge),
        )
    };
    let results: Vec<(String, Result<ProfileStats, String>)> = if cfg.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        pool.install(|| candidates.par_iter().map(run).collect())
    } else {
        candidates.iter().map(run).collect()
    };
    let mut report = ProfileReport::default();
    for (id, r) in results {
        match r {
            Ok(stats) => {
                report.stats.insert(id, stats);
            }
            Err(e) => {
                report.failures.insert(id, e);
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterTag {
    Random,
    Mixed,
    Adv,
}

impl FilterTag {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "random" => Some(Self::Random),
            "mixed" => Some(Self::Mixed),
            "adv" => Some(Self::Adv),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::Mixed => "mixed",
            Self::Adv => "adv",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilteredDataset {
    pub tag: FilterTag,
    /// Member ids in candidate order.
    pub ids: Vec<String>,
    pub eps_var: f64,
    pub lambda_diff: f64,
}

impl FilteredDataset {
    pub fn id_set(&self) -> BTreeSet<&str> {
        self.ids.iter().map(String::as_str).collect()
    }
}

/// Tags a profiled candidate satisfies: always `random`; `mixed` when the
/// variance exceeds `eps_var`; `adv` when also the mean is below
/// `lambda_diff` (strictly).
pub fn tags_for(stats: &ProfileStats, eps_var: f64, lambda_diff: f64) -> Vec<FilterTag> {
    let mut tags = vec![FilterTag::Random];
    if stats.variance > eps_var {
        tags.push(FilterTag::Mixed);
        if stats.mean < lambda_diff {
            tags.push(FilterTag::Adv);
        }
    }
    tags
}

pub fn filter(
    candidates: &[PivotCandidate],
    stats: &BTreeMap<String, ProfileStats>,
    tag: FilterTag,
    eps_var: f64,
    lambda_diff: f64,
) -> Result<FilteredDataset, PipelineError> {
    let mut ids = Vec::new();
    for c in candidates {
        let keep = match tag {
            FilterTag::Random => true,
            _ => {
                let s = stats
                    .get(&c.candidate_id)
                    .ok_or_else(|| PipelineError::MissingProfile(c.candidate_id.clone()))?;
                tags_for(s, eps_var, lambda_diff).contains(&tag)
            }
        };
        if keep {
            ids.push(c.candidate_id.clone());
        }
    }
    Ok(FilteredDataset {
        tag,
        ids,
        eps_var,
        lambda_diff,
    })
}

/// Provenance of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub rule_id: String,
    pub iou_threshold: f64,
    pub k: usize,
    pub master_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<FilterTag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_var: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_diff: Option<f64>,
    /// Echo of the producing configuration.
    #[serde(default)]
    pub config: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub candidate_id: String,
    pub traj_id: String,
    pub context_id: String,
    pub depth: usize,
    pub prefix: Vec<TranscriptEntry>,
    pub expert_action: TurnAction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewards: Option<Vec<f64>>,
    #[serde(default)]
    pub tags: Vec<FilterTag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum DatasetLine {
    Header(DatasetHeader),
    Candidate(DatasetRecord),
}

impl DatasetRecord {
    pub fn new(
        c: &PivotCandidate,
        stats: Option<&ProfileStats>,
        failure: Option<&str>,
        eps_var: f64,
        lambda_diff: f64,
    ) -> Self {
        Self {
            candidate_id: c.candidate_id.clone(),
            traj_id: c.traj_id.clone(),
            context_id: c.state.context_id.clone(),
            depth: c.depth,
            prefix: c.state.transcript.clone(),
            expert_action: c.expert_action.clone(),
            mu: stats.map(|s| s.mean),
            sigma2: stats.map(|s| s.variance),
            rewards: stats.map(|s| s.rewards.clone()),
            tags: stats
                .map(|s| tags_for(s, eps_var, lambda_diff))
                .unwrap_or_default(),
            error: failure.map(str::to_string),
        }
    }

    pub fn candidate(&self) -> PivotCandidate {
        PivotCandidate {
            candidate_id: self.candidate_id.clone(),
            traj_id: self.traj_id.clone(),
            depth: self.depth,
            state: InteractionState::from_transcript(
                self.context_id.clone(),
                self.prefix.clone(),
                false,
            ),
            expert_action: self.expert_action.clone(),
        }
    }

    pub fn stats(&self, rule_id: &str) -> Option<ProfileStats> {
        let rewards = self.rewards.clone()?;
        let mut s = ProfileStats::from_rewards(rewards, rule_id);
        // keep the stored numbers authoritative
        s.mean = self.mu?;
        s.variance = self.sigma2?;
        Some(s)
    }
}

pub fn write_dataset<W: Write>(
    out: &mut W,
    header: &DatasetHeader,
    records: &[DatasetRecord],
) -> Result<(), PipelineError> {
    let line =
        serde_json::to_string(&DatasetLine::Header(header.clone())).expect("header serializes");
    writeln!(out, "{line}")?;
    for r in records {
        let line =
            serde_json::to_string(&DatasetLine::Candidate(r.clone())).expect("record serializes");
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset<R: BufRead>(
    input: R,
) -> Result<(DatasetHeader, Vec<DatasetRecord>), PipelineError> {
    let mut header = None;
    let mut records = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: DatasetLine =
            serde_json::from_str(&line).map_err(|e| PipelineError::Parse {
                line: idx + 1,
                message: e.to_string(),
            })?;
        match parsed {
            DatasetLine::Header(h) => header = Some(h),
            DatasetLine::Candidate(r) => records.push(r),
        }
    }
    Ok((header.ok_or(PipelineError::MissingHeader)?, records))
}

/// Resampling diversity at one prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityRecord {
    pub traj_id: String,
    pub depth: usize,
    pub k: usize,
    /// Distinct canonical turns among the `k` samples.
    pub unique: usize,
    pub flag: bool,
}

/// Number of distinct canonical keys among `k` samples at `state`.
pub fn count_unique<P: TurnPolicy, R: Rng + ?Sized>(
    policy: &P,
    state: &InteractionState,
    support: &[TurnAction],
    k: usize,
    rng: &mut R,
) -> Result<usize, PipelineError> {
    let mut seen = BTreeSet::new();
    for _ in 0..k {
        let a = policy
            .sample(state, support, rng)
            .map_err(|e| PipelineError::Mdp(MdpError::Policy(e)))?;
        seen.insert(a.canonical_key().to_string());
    }
    Ok(seen.len())
}

pub fn unique_actions<E: TurnEnv, P: TurnPolicy, R: Rng + ?Sized>(
    policy: &P,
    env: &E,
    candidate: &PivotCandidate,
    k: usize,
    rng: &mut R,
) -> Result<DiversityRecord, PipelineError> {
    let support = action_support(env, &candidate.state);
    let unique = count_unique(policy, &candidate.state, &support, k.max(1), rng)?;
    Ok(DiversityRecord {
        traj_id: candidate.traj_id.clone(),
        depth: candidate.depth,
        k,
        unique,
        flag: unique > 1,
    })
}

/// Writes `traj_id,depth,U,flag`, one row per (trajectory, depth) up to the
/// longest trajectory; depths a trajectory does not reach have blank cells.
pub fn export_diversity<W: Write>(
    out: W,
    records: &[DiversityRecord],
) -> Result<(), PipelineError> {
    let mut by_traj: BTreeMap<&str, BTreeMap<usize, &DiversityRecord>> = BTreeMap::new();
    for r in records {
        by_traj.entry(&r.traj_id).or_default().insert(r.depth, r);
    }
    let width = records.iter().map(|r| r.depth + 1).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["traj_id", "depth", "U", "flag"])?;
    for (traj, rows) in &by_traj {
        for depth in 0..width {
            let d = depth.to_string();
            match rows.get(&depth) {
                Some(r) => {
                    let flag = if r.flag { "1" } else { "0" };
                    w.write_record([*traj, d.as_str(), &r.unique.to_string(), flag])?
                }
                None => w.write_record([*traj, d.as_str(), "", ""])?,
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{SnapshotRole, TabularSoftmaxPolicy};
    use crate::synth::{build_env, expert_trajectory, PivotPlan, SynthEnv, SynthEnvSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn env(leak: f64) -> (SynthEnv, Trajectory) {
        let (env, oracle) = build_env(&SynthEnvSpec::new(
            5,
            PivotPlan {
                pivot_depths: vec![1, 3],
                acceptable_per_pivot: 1,
                distractors_per_pivot: 3,
                value_leak: leak,
            },
            21,
        ))
        .unwrap();
        let t = expert_trajectory(&env, &oracle, &mut ChaCha8Rng::seed_from_u64(0), "e0").unwrap();
        (env, t)
    }

    fn cfg(k: usize) -> ProfileConfig {
        ProfileConfig {
            k,
            rule: MatchRule::default(),
            mode: ProfileMode::Turn,
            master_seed: 99,
            workers: 1,
        }
    }

    #[test]
    fn decompose_counts_assistant_turns() {
        let (_, t) = env(0.0);
        let c = decompose(std::slice::from_ref(&t)).unwrap();
        assert_eq!(c.len(), 5);
        assert_eq!(
            c.iter().map(|c| c.depth).collect::<Vec<_>>(),
            vec![0, 1, 2, 3, 4]
        );
        assert!(decompose(&[]).unwrap().is_empty());
        let mut broken = t.clone();
        broken.steps[2].observation.payload.push('!');
        assert!(matches!(
            decompose(&[broken]),
            Err(PipelineError::Malformed(_))
        ));
    }

    #[test]
    fn sample_variance_uses_k_minus_one() {
        let s = ProfileStats::from_rewards(vec![1.0, 1.0, 0.0], "r");
        assert!((s.mean - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.variance - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(ProfileStats::from_rewards(vec![1.0; 4], "r").variance, 0.0);
    }

    #[test]
    fn one_hot_reference_profiles_as_solved() {
        let (env, t) = env(0.0);
        let suite = EnvSuite::single(env);
        let cands = decompose(std::slice::from_ref(&t)).unwrap();
        let mut p = TabularSoftmaxPolicy::uniform();
        for c in &cands {
            p.set_logit(&c.state, &c.expert_action, 1e3);
        }
        let snap = PolicySnapshot::take(&p, SnapshotRole::Reference);
        let rep = profile(&cands, &snap, &suite, &cfg(8), None).unwrap();
        for s in rep.stats.values() {
            assert_eq!(s.mean, 1.0);
            assert_eq!(s.variance, 0.0);
        }
    }

    #[test]
    fn profiling_is_worker_independent() {
        let (env, t) = env(0.05);
        let suite = EnvSuite::single(env);
        let cands = decompose(std::slice::from_ref(&t)).unwrap();
        let snap = PolicySnapshot::take(&TabularSoftmaxPolicy::uniform(), SnapshotRole::Reference);
        let one = profile(&cands, &snap, &suite, &cfg(16), None).unwrap();
        let mut c4 = cfg(16);
        c4.workers = 4;
        let four = profile(&cands, &snap, &suite, &c4, None).unwrap();
        assert_eq!(one, four);
        let mut full = cfg(16);
        full.mode = ProfileMode::FullReturn;
        let rep = profile(&cands, &snap, &suite, &full, None).unwrap();
        assert!(rep.failures.is_empty());
    }

    #[test]
    fn unknown_context_is_a_per_candidate_failure() {
        let (env, t) = env(0.0);
        let suite = EnvSuite::single(env);
        let mut cands = decompose(std::slice::from_ref(&t)).unwrap();
        cands[0].state.context_id = "elsewhere".into();
        let snap = PolicySnapshot::take(&TabularSoftmaxPolicy::uniform(), SnapshotRole::Reference);
        let rep = profile(&cands, &snap, &suite, &cfg(4), None).unwrap();
        assert_eq!(rep.failures.len(), 1);
        assert_eq!(rep.stats.len(), cands.len() - 1);
        assert!(matches!(
            profile(&cands, &snap, &suite, &cfg(1), None),
            Err(PipelineError::TooFewRollouts(1))
        ));
    }

    #[test]
    fn filter_semantics() {
        let (_, t) = env(0.0);
        let cands = decompose(std::slice::from_ref(&t)).unwrap();
        let rewards = [
            vec![1.0; 4],
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0; 4],
            vec![1.0, 1.0, 1.0, 0.0],
            vec![1.0; 4],
        ];
        let mut stats: BTreeMap<String, ProfileStats> = cands
            .iter()
            .zip(rewards)
            .map(|(c, r)| (c.candidate_id.clone(), ProfileStats::from_rewards(r, "x")))
            .collect();
        let mixed = filter(&cands, &stats, FilterTag::Mixed, 0.0, 0.6).unwrap();
        assert_eq!(mixed.ids, vec!["e0/1", "e0/3"]);
        let adv = filter(&cands, &stats, FilterTag::Adv, 0.0, 0.6).unwrap();
        assert_eq!(adv.ids, vec!["e0/1"]);
        // mean exactly at the threshold is excluded
        stats.get_mut("e0/3").unwrap().mean = 0.6;
        assert_eq!(
            filter(&cands, &stats, FilterTag::Adv, 0.0, 0.6)
                .unwrap()
                .ids,
            vec!["e0/1"]
        );
        stats.remove("e0/0");
        assert!(matches!(
            filter(&cands, &stats, FilterTag::Mixed, 0.0, 0.6),
            Err(PipelineError::MissingProfile(_))
        ));
        assert_eq!(
            filter(&cands, &stats, FilterTag::Random, 0.0, 0.6)
                .unwrap()
                .ids
                .len(),
            5
        );
    }

    #[test]
    fn dataset_round_trip() {
        let (_, t) = env(0.0);
        let cands = decompose(std::slice::from_ref(&t)).unwrap();
        let header = DatasetHeader {
            rule_id: "tool_functional@0.5".into(),
            iou_threshold: 0.5,
            k: 4,
            master_seed: 1,
            tag: None,
            eps_var: Some(0.0),
            lambda_diff: Some(0.6),
            config: BTreeMap::new(),
        };
        let stats = ProfileStats::from_rewards(vec![1.0, 0.0, 1.0, 0.0], "tool_functional@0.5");
        let records: Vec<_> = cands
            .iter()
            .map(|c| DatasetRecord::new(c, Some(&stats), None, 0.0, 0.6))
            .collect();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &header, &records).unwrap();
        let (h, back) = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(h, header);
        assert_eq!(back, records);
        assert_eq!(back[2].candidate(), cands[2]);
        assert_eq!(
            back[0].tags,
            vec![FilterTag::Random, FilterTag::Mixed, FilterTag::Adv]
        );
        assert!(matches!(
            read_dataset("".as_bytes()),
            Err(PipelineError::MissingHeader)
        ));
    }

    #[test]
    fn diversity_export_pads_short_trajectories() {
        let mk = |t: &str, d: usize| DiversityRecord {
            traj_id: t.into(),
            depth: d,
            k: 4,
            unique: 1,
            flag: false,
        };
        let mut recs: Vec<_> = (0..3).map(|d| mk("a", d)).collect();
        recs.extend((0..5).map(|d| mk("b", d)));
        let mut buf = Vec::new();
        export_diversity(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 11);
        assert_eq!(lines[4], "a,3,,");
        assert_eq!(lines[5], "a,4,,");
        assert!(lines.iter().skip(1).all(|l| !l.ends_with(",1")));
    }

    #[test]
    fn deterministic_policy_has_one_unique_action() {
        let (env, t) = env(0.0);
        let cands = decompose(std::slice::from_ref(&t)).unwrap();
        let mut p = TabularSoftmaxPolicy::uniform();
        for c in &cands {
            p.set_logit(&c.state, &c.expert_action, 1e3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for c in &cands {
            assert_eq!(unique_actions(&p, &env, c, 16, &mut rng).unwrap().unique, 1);
            assert_eq!(
                unique_actions(&TabularSoftmaxPolicy::uniform(), &env, c, 1, &mut rng)
                    .unwrap()
                    .unique,
                1
            );
        }
    }

    /// `E[U]` by enumerating every count vector `(n1..n4)` summing to `k`
    /// with its multinomial probability.
    fn enumerated_expected_unique(k: usize) -> f64 {
        let fact = |n: usize| (1..=n).map(|x| x as f64).product::<f64>();
        let mut e = 0.0;
        for a in 0..=k {
            for b in 0..=k - a {
                for c in 0..=k - a - b {
                    let d = k - a - b - c;
                    let counts = [a, b, c, d];
                    let ways = fact(k) / counts.iter().map(|n| fact(*n)).product::<f64>();
                    let distinct = counts.iter().filter(|n| **n > 0).count();
                    e += ways * 0.25f64.powi(k as i32) * distinct as f64;
                }
            }
        }
        e
    }

    #[test]
    fn uniform_four_way_diversity_matches_enumeration() {
        let exact = enumerated_expected_unique(16);
        assert!((exact - 4.0 * (1.0 - 0.75f64.powi(16))).abs() < 1e-12);
        let (env, t) = env(0.0);
        let pivot = decompose(std::slice::from_ref(&t))
            .unwrap()
            .into_iter()
            .find(|c| env.is_planted_pivot(&c.state))
            .unwrap();
        assert_eq!(action_support(&env, &pivot.state).len(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let trials = 10_000;
        let total: usize = (0..trials)
            .map(|_| {
                unique_actions(&TabularSoftmaxPolicy::uniform(), &env, &pivot, 16, &mut rng)
                    .unwrap()
                    .unique
            })
            .sum();
        assert!((total as f64 / trials as f64 - exact).abs() < 0.05);
    }
}
