//! Aligned per-step metric tables from training logs, one column group per
//! dataset tag.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use pivot_core::trainer::TrainLog;
use serde::{Deserialize, Serialize};

use crate::commands::{create, open};
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagSummary {
    pub tag: String,
    pub steps: usize,
    pub final_success: Option<f64>,
    pub second_half_reward_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub tags: Vec<TagSummary>,
    /// Present when both an `adv` and a `random` log were given.
    pub adv_std_exceeds_random: Option<bool>,
}

fn tag_of(log: &TrainLog, path: &Path) -> String {
    log.header
        .config
        .tag
        .map(|t| t.as_str().to_string())
        .unwrap_or_else(|| {
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        })
}

/// Table columns are `step` then `<tag>_mean_reward`, `<tag>_reward_std`,
/// `<tag>_success` per log; cells are blank where a log has no value.
pub fn build(logs: &[(String, TrainLog)]) -> (Vec<String>, Vec<Vec<String>>, Summary) {
    let mut header = vec!["step".to_string()];
    for (tag, _) in logs {
        for m in ["mean_reward", "reward_std", "success"] {
            header.push(format!("{tag}_{m}"));
        }
    }
    let steps: BTreeSet<usize> = logs
        .iter()
        .flat_map(|(_, l)| l.steps.iter().map(|s| s.step))
        .collect();
    let indexed: Vec<BTreeMap<usize, _>> = logs
        .iter()
        .map(|(_, l)| l.steps.iter().map(|s| (s.step, s)).collect())
        .collect();
    let rows = steps
        .iter()
        .map(|step| {
            let mut row = vec![step.to_string()];
            for idx in &indexed {
                match idx.get(step) {
                    Some(s) => {
                        row.push(s.mean_reward.to_string());
                        row.push(s.reward_std.to_string());
                        row.push(s.eval_success.map(|x| x.to_string()).unwrap_or_default());
                    }
                    None => row.extend([String::new(), String::new(), String::new()]),
                }
            }
            row
        })
        .collect();
    let tags: Vec<TagSummary> = logs
        .iter()
        .map(|(tag, l)| TagSummary {
            tag: tag.clone(),
            steps: l.steps.len(),
            final_success: l.final_success(),
            second_half_reward_std: l.second_half_reward_std(),
        })
        .collect();
    let find = |t: &str| {
        tags.iter()
            .find(|s| s.tag == t)
            .map(|s| s.second_half_reward_std)
    };
    let adv_std_exceeds_random = match (find("adv"), find("random")) {
        (Some(a), Some(r)) => Some(a > r),
        _ => None,
    };
    (
        header,
        rows,
        Summary {
            tags,
            adv_std_exceeds_random,
        },
    )
}

pub fn run(
    paths: &[std::path::PathBuf],
    out: &Path,
    summary_path: Option<&Path>,
) -> Result<String, CliError> {
    let mut logs = Vec::new();
    for p in paths {
        let log = TrainLog::read(open(p)?)?;
        logs.push((tag_of(&log, p), log));
    }
    let (header, rows, summary) = build(&logs);
    let mut w = csv::Writer::from_writer(create(out)?);
    let csv_err = |e: csv::Error| CliError::Validation(format!("{}: {e}", out.display()));
    w.write_record(&header).map_err(csv_err)?;
    for r in &rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::io(out, e))?;
    if let Some(path) = summary_path {
        let mut f = create(path)?;
        serde_json::to_writer_pretty(&mut f, &summary)
            .map_err(|e| CliError::Validation(e.to_string()))?;
        writeln!(f).map_err(|e| CliError::io(path, e))?;
        f.flush().map_err(|e| CliError::io(path, e))?;
    }
    Ok(match summary.adv_std_exceeds_random {
        Some(v) => format!(
            "{} rows; adv second-half reward std exceeds random: {v}",
            rows.len()
        ),
        None => format!("{} rows", rows.len()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use pivot_core::pipeline::FilterTag;
    use pivot_core::trainer::{StepMetrics, TrainConfig, TrainHeader};

    fn log(tag: FilterTag, stds: &[f64]) -> TrainLog {
        TrainLog {
            header: TrainHeader {
                config: TrainConfig {
                    tag: Some(tag),
                    ..TrainConfig::default()
                },
                dataset_size: 1,
                initial_success: None,
                echo: Default::default(),
            },
            steps: stds
                .iter()
                .enumerate()
                .map(|(i, s)| StepMetrics {
                    step: i + 1,
                    mean_reward: 0.5,
                    reward_std: *s,
                    grad_norm: 0.0,
                    kl_ref: 0.0,
                    clip_fraction: 0.0,
                    groups: 1,
                    skipped_groups: 0,
                    eval_success: None,
                })
                .collect(),
            failures: Vec::new(),
        }
    }

    #[test]
    fn empty_log_gives_header_only() {
        let (h, rows, s) = build(&[("adv".into(), log(FilterTag::Adv, &[]))]);
        assert_eq!(h.len(), 4);
        assert!(rows.is_empty());
        assert_eq!(s.adv_std_exceeds_random, None);
    }

    #[test]
    fn two_tags_align_and_get_a_verdict() {
        let (h, rows, s) = build(&[
            ("adv".into(), log(FilterTag::Adv, &[0.4, 0.3, 0.2])),
            ("random".into(), log(FilterTag::Random, &[0.1, 0.1])),
        ]);
        assert_eq!(h.len(), 7);
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[2][4], "");
        assert_eq!(s.adv_std_exceeds_random, Some(true));
    }
}
