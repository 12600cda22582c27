//! One function per subcommand. Every artifact carries the resolved
//! parameters and the paths of the invocation in its header.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use pivot_core::mdp::EnvSuite;
use pivot_core::pipeline::{
    decompose, export_diversity, filter, profile, read_dataset, unique_actions, write_dataset,
    DatasetHeader, DatasetRecord, PivotCandidate, ProfileConfig, ProfileStats,
};
use pivot_core::policy::{load_checkpoint, save_checkpoint, Checkpoint, TabularSoftmaxPolicy};
use pivot_core::record::{read_trajectories, write_trajectories};
use pivot_core::seed::{rng_for, sub_seed};
use pivot_core::synth::{
    build_suite, expert_trajectory, reference_policy, AcceptOracle, SynthEnv, SynthEnvSpec,
};
use pivot_core::trainer::{evaluate_suite, train_with_hook, TrainerError};
use pivot_core::verifier::{JudgeClient, MatchKind, StubJudge, SubprocessJudge};
use pivot_core::{PolicySnapshot, SnapshotRole};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::Params;
use crate::{report, verify, CliError, Command, EnvAction, VerifyTarget};

pub type Echo = BTreeMap<String, Value>;

/// Suite file written by `synth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteFile {
    pub spec: SynthEnvSpec,
    pub contexts: usize,
    pub config: Echo,
}

pub fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

pub fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::io(path, e))
}

fn flush(mut w: BufWriter<File>, path: &Path) -> Result<(), CliError> {
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Resolved parameters plus the command and its paths.
pub fn echo(params: &Params, command: &str, paths: &[(&str, &Path)]) -> Echo {
    let mut map: Echo = match serde_json::to_value(params).expect("params serialize") {
        Value::Object(m) => m.into_iter().collect(),
        _ => unreachable!("params serialize to an object"),
    };
    map.insert("command".into(), Value::String(command.into()));
    let paths: serde_json::Map<String, Value> = paths
        .iter()
        .map(|(k, p)| (k.to_string(), Value::String(p.display().to_string())))
        .collect();
    map.insert("paths".into(), Value::Object(paths));
    map
}

pub fn load_suite(path: &Path) -> Result<(EnvSuite<SynthEnv>, AcceptOracle, SuiteFile), CliError> {
    let file: SuiteFile = serde_json::from_reader(open(path)?)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    let (suite, oracle) = build_suite(&file.spec, file.contexts)?;
    Ok((suite, oracle, file))
}

fn load_policy(path: &Path) -> Result<TabularSoftmaxPolicy, CliError> {
    match load_checkpoint(open(path)?)? {
        Checkpoint::Tabular(p) => Ok(p),
        Checkpoint::Token(_) => Err(CliError::Validation(format!(
            "{}: token-factored checkpoints cannot drive synthetic-suite rollouts",
            path.display()
        ))),
    }
}

fn reference(
    suite: &EnvSuite<SynthEnv>,
    params: &Params,
    path: Option<&Path>,
) -> Result<TabularSoftmaxPolicy, CliError> {
    match path {
        Some(p) => load_policy(p),
        None => Ok(reference_policy(
            suite,
            params.prior_margin,
            params.pivot_bias,
            params.temperature,
        )?),
    }
}

fn judge(params: &Params) -> Result<Option<Box<dyn JudgeClient>>, CliError> {
    if params.match_rule()?.kind != MatchKind::Judge {
        return Ok(None);
    }
    let mut words = params.judge_command.split_whitespace();
    Ok(Some(match words.next() {
        Some(program) => Box::new(SubprocessJudge::new(
            program,
            words.map(str::to_string).collect(),
        )),
        None => Box::new(StubJudge::default()),
    }))
}

fn dataset_header(params: &Params, echo: Echo) -> Result<DatasetHeader, CliError> {
    let rule = params.match_rule()?;
    Ok(DatasetHeader {
        rule_id: rule.rule_id(),
        iou_threshold: rule.iou_threshold,
        k: params.k,
        master_seed: params.seed,
        tag: None,
        eps_var: None,
        lambda_diff: None,
        config: echo,
    })
}

fn read_records(path: &Path) -> Result<(DatasetHeader, Vec<DatasetRecord>), CliError> {
    read_dataset(open(path)?).map_err(|e| match e {
        pivot_core::pipeline::PipelineError::Parse { line, message } => {
            CliError::Validation(format!("{}: line {line}: {message}", path.display()))
        }
        other => other.into(),
    })
}

fn write_records(
    path: &Path,
    header: &DatasetHeader,
    records: &[DatasetRecord],
) -> Result<(), CliError> {
    let mut w = create(path)?;
    write_dataset(&mut w, header, records)?;
    flush(w, path)
}

fn write_checkpoint(path: &Path, policy: &TabularSoftmaxPolicy) -> Result<(), CliError> {
    let mut w = create(path)?;
    save_checkpoint(&mut w, &Checkpoint::Tabular(policy.clone()))?;
    flush(w, path)
}

pub fn dispatch(command: &Command, params: &Params) -> Result<String, CliError> {
    match command {
        Command::Synth { out } => synth(params, out),
        Command::Env {
            action: EnvAction::Describe { env, out },
        } => describe(env, out.as_deref()),
        Command::Teach { env, out } => teach(params, env, out),
        Command::Decompose { trajectories, out } => decompose_cmd(params, trajectories, out),
        Command::Profile {
            env,
            candidates,
            out,
            reference,
        } => profile_cmd(params, env, candidates, out, reference.as_deref()),
        Command::Filter { input, out } => filter_cmd(params, input, out),
        Command::Train {
            env,
            dataset,
            log,
            checkpoint,
            reference,
        } => train_cmd(params, env, dataset, log, checkpoint, reference.as_deref()),
        Command::Eval {
            env,
            checkpoint,
            out,
        } => eval_cmd(params, env, checkpoint.as_deref(), out.as_deref()),
        Command::Diversity {
            env,
            candidates,
            out,
            checkpoint,
        } => diversity_cmd(params, env, candidates, out, checkpoint.as_deref()),
        Command::Verify { target } => match target {
            VerifyTarget::Theorems { out } => verify_report(verify::theorems(params)?, out),
            VerifyTarget::Values { env, out } => {
                let (suite, _, _) = load_suite(env)?;
                verify_report(verify::values(&suite, params)?, out)
            }
        },
        Command::Report { logs, out, summary } => report::run(logs, out, summary.as_deref()),
    }
}

fn synth(params: &Params, out: &Path) -> Result<String, CliError> {
    let spec = params.synth_spec();
    let (suite, _) = build_suite(&spec, params.contexts)?;
    let file = SuiteFile {
        spec,
        contexts: params.contexts,
        config: echo(params, "synth", &[("out", out)]),
    };
    let mut w = create(out)?;
    serde_json::to_writer_pretty(&mut w, &file).map_err(|e| CliError::Validation(e.to_string()))?;
    writeln!(w).map_err(|e| CliError::io(out, e))?;
    flush(w, out)?;
    Ok(format!(
        "wrote {} contexts to {}",
        suite.len(),
        out.display()
    ))
}

fn describe(env: &Path, out: Option<&Path>) -> Result<String, CliError> {
    let (suite, _, _) = load_suite(env)?;
    let descriptions: Vec<_> = suite.iter().map(SynthEnv::describe).collect();
    let text = serde_json::to_string_pretty(&descriptions)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    match out {
        Some(path) => {
            let mut w = create(path)?;
            writeln!(w, "{text}").map_err(|e| CliError::io(path, e))?;
            flush(w, path)?;
            Ok(format!(
                "described {} contexts in {}",
                descriptions.len(),
                path.display()
            ))
        }
        None => Ok(text),
    }
}

fn teach(params: &Params, env: &Path, out: &Path) -> Result<String, CliError> {
    let (suite, oracle, _) = load_suite(env)?;
    let mut trajs = Vec::new();
    for e in suite.iter() {
        let ctx = pivot_core::TurnEnv::context(e).id.clone();
        let mut rng = rng_for(params.seed, &["teach", &ctx]);
        trajs.push(expert_trajectory(
            e,
            &oracle,
            &mut rng,
            format!("teach-{ctx}"),
        )?);
    }
    let mut w = create(out)?;
    write_trajectories(&mut w, &trajs)?;
    flush(w, out)?;
    let accepted = trajs.iter().filter(|t| t.accepted).count();
    Ok(format!(
        "wrote {} teacher trajectories ({accepted} accepted)",
        trajs.len()
    ))
}

fn decompose_cmd(params: &Params, trajectories: &Path, out: &Path) -> Result<String, CliError> {
    let trajs = read_trajectories(open(trajectories)?)?;
    let cands = decompose(&trajs)?;
    let header = dataset_header(
        params,
        echo(
            params,
            "decompose",
            &[("trajectories", trajectories), ("out", out)],
        ),
    )?;
    let records: Vec<_> = cands
        .iter()
        .map(|c| DatasetRecord::new(c, None, None, params.eps_var, params.lambda_diff))
        .collect();
    write_records(out, &header, &records)?;
    Ok(format!("wrote {} candidates", records.len()))
}

fn candidates_of(records: &[DatasetRecord]) -> Vec<PivotCandidate> {
    records.iter().map(DatasetRecord::candidate).collect()
}

fn profile_cmd(
    params: &Params,
    env: &Path,
    candidates: &Path,
    out: &Path,
    reference_path: Option<&Path>,
) -> Result<String, CliError> {
    let (suite, _, _) = load_suite(env)?;
    let (_, records) = read_records(candidates)?;
    let cands = candidates_of(&records);
    let policy = reference(&suite, params, reference_path)?;
    let snapshot = PolicySnapshot::take(&policy, SnapshotRole::Reference);
    let cfg = ProfileConfig {
        k: params.k,
        rule: params.match_rule()?,
        mode: params.profile_mode()?,
        master_seed: params.seed,
        workers: params.workers,
    };
    let judge = judge(params)?;
    let report = profile(&cands, &snapshot, &suite, &cfg, judge.as_deref())?;
    let mut paths = vec![("env", env), ("candidates", candidates), ("out", out)];
    if let Some(r) = reference_path {
        paths.push(("reference", r));
    }
    let mut header = dataset_header(params, echo(params, "profile", &paths))?;
    header.eps_var = Some(params.eps_var);
    header.lambda_diff = Some(params.lambda_diff);
    let out_records: Vec<_> = cands
        .iter()
        .map(|c| {
            DatasetRecord::new(
                c,
                report.stats.get(&c.candidate_id),
                report.failures.get(&c.candidate_id).map(String::as_str),
                params.eps_var,
                params.lambda_diff,
            )
        })
        .collect();
    write_records(out, &header, &out_records)?;
    Ok(format!(
        "profiled {} candidates ({} failed)",
        report.stats.len(),
        report.failures.len()
    ))
}

fn filter_cmd(params: &Params, input: &Path, out: &Path) -> Result<String, CliError> {
    let tag = params.filter_tag()?;
    let (in_header, records) = read_records(input)?;
    let cands = candidates_of(&records);
    let stats: BTreeMap<String, ProfileStats> = records
        .iter()
        .filter_map(|r| Some((r.candidate_id.clone(), r.stats(&in_header.rule_id)?)))
        .collect();
    let kept = filter(&cands, &stats, tag, params.eps_var, params.lambda_diff)?;
    let ids = kept.id_set();
    let subset: Vec<_> = records
        .iter()
        .filter(|r| ids.contains(r.candidate_id.as_str()))
        .cloned()
        .collect();
    let header = DatasetHeader {
        tag: Some(tag),
        eps_var: Some(params.eps_var),
        lambda_diff: Some(params.lambda_diff),
        config: echo(params, "filter", &[("input", input), ("out", out)]),
        ..in_header
    };
    write_records(out, &header, &subset)?;
    Ok(format!(
        "kept {} of {} candidates as {}",
        subset.len(),
        records.len(),
        tag.as_str()
    ))
}

fn step_path(base: &Path, step: usize) -> std::path::PathBuf {
    let mut name = base.as_os_str().to_owned();
    name.push(format!(".step{step:06}"));
    name.into()
}

fn train_cmd(
    params: &Params,
    env: &Path,
    dataset: &Path,
    log: &Path,
    checkpoint: &Path,
    reference_path: Option<&Path>,
) -> Result<String, CliError> {
    let (suite, _, _) = load_suite(env)?;
    let (_, records) = read_records(dataset)?;
    let cands = candidates_of(&records);
    let initial = reference(&suite, params, reference_path)?;
    let snapshot = PolicySnapshot::take(&initial, SnapshotRole::Reference);
    let cfg = params.train_config();
    let judge = judge(params)?;
    let every = params.checkpoint_every;
    let (policy, mut train_log) = train_with_hook(
        &cands,
        &suite,
        initial,
        &snapshot,
        &cfg,
        judge.as_deref(),
        |step, p| {
            if every > 0 && step % every == 0 {
                write_checkpoint(&step_path(checkpoint, step), p)
                    .map_err(|e| TrainerError::InvalidConfig(format!("checkpoint: {e}")))?;
            }
            Ok(())
        },
    )?;
    let mut paths = vec![
        ("env", env),
        ("dataset", dataset),
        ("log", log),
        ("checkpoint", checkpoint),
    ];
    if let Some(r) = reference_path {
        paths.push(("reference", r));
    }
    train_log.header.echo = echo(params, "train", &paths);
    let mut w = create(log)?;
    train_log.write(&mut w)?;
    flush(w, log)?;
    write_checkpoint(checkpoint, &policy)?;
    for f in &train_log.failures {
        eprintln!("skipped: {f}");
    }
    Ok(format!(
        "trained {} steps; success {:.4} -> {:.4}",
        train_log.steps.len(),
        train_log.header.initial_success.unwrap_or(f64::NAN),
        train_log
            .final_success()
            .or(train_log.header.initial_success)
            .unwrap_or(f64::NAN)
    ))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalResult {
    pub success: f64,
    pub episodes_per_context: usize,
    pub contexts: usize,
    pub config: Echo,
}

fn eval_cmd(
    params: &Params,
    env: &Path,
    checkpoint: Option<&Path>,
    out: Option<&Path>,
) -> Result<String, CliError> {
    let (suite, _, _) = load_suite(env)?;
    let policy = reference(&suite, params, checkpoint)?;
    let success = evaluate_suite(
        &policy,
        &suite,
        params.episodes,
        sub_seed(params.seed, &["eval"]),
    )?;
    if let Some(path) = out {
        let mut paths = vec![("env", env), ("out", path)];
        if let Some(c) = checkpoint {
            paths.push(("checkpoint", c));
        }
        let result = EvalResult {
            success,
            episodes_per_context: params.episodes,
            contexts: suite.len(),
            config: echo(params, "eval", &paths),
        };
        let mut w = create(path)?;
        serde_json::to_writer_pretty(&mut w, &result)
            .map_err(|e| CliError::Validation(e.to_string()))?;
        writeln!(w).map_err(|e| CliError::io(path, e))?;
        flush(w, path)?;
    }
    Ok(format!("success {success}"))
}

fn diversity_cmd(
    params: &Params,
    env: &Path,
    candidates: &Path,
    out: &Path,
    checkpoint: Option<&Path>,
) -> Result<String, CliError> {
    let (suite, _, _) = load_suite(env)?;
    let (_, records) = read_records(candidates)?;
    let policy = reference(&suite, params, checkpoint)?;
    let mut rows = Vec::new();
    for c in candidates_of(&records) {
        let e = suite.get(&c.state.context_id)?;
        let mut rng = rng_for(params.seed, &["diversity", &c.candidate_id]);
        rows.push(unique_actions(
            &policy,
            e,
            &c,
            params.diversity_k,
            &mut rng,
        )?);
    }
    let w = create(out)?;
    export_diversity(w, &rows)?;
    let flagged = rows.iter().filter(|r| r.flag).count();
    Ok(format!("flagged {flagged} of {} prefixes", rows.len()))
}

fn verify_report(report: verify::Report, out: &Path) -> Result<String, CliError> {
    let mut w = create(out)?;
    w.write_all(report.render().as_bytes())
        .map_err(|e| CliError::io(out, e))?;
    flush(w, out)?;
    let failed: Vec<_> = report
        .checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name.clone())
        .collect();
    if failed.is_empty() {
        Ok(format!("all {} checks passed", report.checks.len()))
    } else {
        Err(CliError::VerificationFailed(failed.join(", ")))
    }
}
