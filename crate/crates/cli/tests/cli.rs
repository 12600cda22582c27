use std::path::Path;

use pivot_cli::run;

fn pivot(dir: &Path, args: &[&str]) -> i32 {
    let mut argv = vec!["pivot".to_string()];
    argv.extend(args.iter().map(|a| match a.strip_prefix('@') {
        Some(rest) => dir.join(rest).display().to_string(),
        None => a.to_string(),
    }));
    run(argv)
}

fn small_suite(dir: &Path) {
    assert_eq!(
        pivot(
            dir,
            &[
                "--horizon",
                "6",
                "--pivot-depths",
                "1,3",
                "--contexts",
                "2",
                "synth",
                "--out",
                "@env.json"
            ]
        ),
        0
    );
    assert_eq!(
        pivot(
            dir,
            &["teach", "--env", "@env.json", "--out", "@traj.jsonl"]
        ),
        0
    );
    assert_eq!(
        pivot(
            dir,
            &[
                "decompose",
                "--trajectories",
                "@traj.jsonl",
                "--out",
                "@cands.jsonl"
            ]
        ),
        0
    );
}

#[test]
fn filtering_unprofiled_candidates_by_signal_fails() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_suite(d);
    assert_eq!(
        pivot(
            d,
            &[
                "--tag",
                "adv",
                "filter",
                "--input",
                "@cands.jsonl",
                "--out",
                "@adv.jsonl"
            ]
        ),
        1
    );
    assert_eq!(
        pivot(
            d,
            &[
                "--tag",
                "random",
                "filter",
                "--input",
                "@cands.jsonl",
                "--out",
                "@all.jsonl"
            ]
        ),
        0
    );
}

#[test]
fn usage_and_validation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(pivot(d, &["no-such-command"]), 1);
    assert_eq!(
        pivot(d, &["--rule", "fuzzy", "synth", "--out", "@env.json"]),
        1
    );
    assert_eq!(
        pivot(d, &["--pivot-depths", "1,1", "synth", "--out", "@env.json"]),
        1
    );
    assert_eq!(
        pivot(d, &["teach", "--env", "@missing.json", "--out", "@t.jsonl"]),
        1
    );
    std::fs::write(d.join("bad.toml"), "not_a_param = 3\n").unwrap();
    assert_eq!(
        pivot(d, &["--config", "@bad.toml", "synth", "--out", "@env.json"]),
        1
    );
    assert_eq!(pivot(d, &["--help"]), 0);
}

#[test]
fn verification_passes_on_enumerable_suites() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_suite(d);
    assert_eq!(
        pivot(d, &["verify", "theorems", "--out", "@theorems.txt"]),
        0
    );
    assert_eq!(
        pivot(
            d,
            &[
                "--horizon",
                "6",
                "--pivot-depths",
                "1,3",
                "verify",
                "values",
                "--env",
                "@env.json",
                "--out",
                "@values.txt"
            ]
        ),
        0
    );
    let text = std::fs::read_to_string(d.join("values.txt")).unwrap();
    assert!(text.contains("overall PASS"), "{text}");
    assert!(!text.contains("FAIL"));
}

#[test]
fn verification_of_an_unenumerable_suite_is_not_vacuous() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(
        pivot(
            d,
            &[
                "--horizon",
                "36",
                "--pivot-depths",
                "1,18,34",
                "--contexts",
                "1",
                "synth",
                "--out",
                "@big.json"
            ]
        ),
        0
    );
    assert_eq!(
        pivot(
            d,
            &[
                "verify",
                "values",
                "--env",
                "@big.json",
                "--out",
                "@values.txt"
            ]
        ),
        2
    );
    assert!(std::fs::read_to_string(d.join("values.txt"))
        .unwrap()
        .contains("not_enumerable"));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("cfg.toml"),
        "contexts = 3\nhorizon = 6\npivot_depths = [1, 3]\n",
    )
    .unwrap();
    assert_eq!(
        pivot(d, &["--config", "@cfg.toml", "synth", "--out", "@a.json"]),
        0
    );
    assert_eq!(
        pivot(
            d,
            &[
                "--config",
                "@cfg.toml",
                "--contexts",
                "2",
                "synth",
                "--out",
                "@b.json"
            ]
        ),
        0
    );
    let count = |f: &str| {
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(d.join(f)).unwrap()).unwrap();
        (
            v["contexts"].as_u64().unwrap(),
            v["spec"]["horizon_max"].as_u64().unwrap(),
        )
    };
    assert_eq!(count("a.json"), (3, 6));
    assert_eq!(count("b.json"), (2, 6));
}

#[test]
fn short_pipeline_produces_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_suite(d);
    let common = [
        "--steps",
        "12",
        "--eval-every",
        "6",
        "--eval-episodes",
        "4",
        "--k",
        "8",
    ];
    let with = |rest: &[&str]| {
        let mut v: Vec<&str> = common.to_vec();
        v.extend_from_slice(rest);
        pivot(d, &v)
    };
    assert_eq!(
        with(&[
            "profile",
            "--env",
            "@env.json",
            "--candidates",
            "@cands.jsonl",
            "--out",
            "@prof.jsonl"
        ]),
        0
    );
    assert_eq!(
        with(&[
            "--tag",
            "random",
            "filter",
            "--input",
            "@prof.jsonl",
            "--out",
            "@random.jsonl"
        ]),
        0
    );
    assert_eq!(
        with(&[
            "--tag",
            "random",
            "--checkpoint-every",
            "6",
            "train",
            "--env",
            "@env.json",
            "--dataset",
            "@random.jsonl",
            "--log",
            "@random.log",
            "--checkpoint",
            "@random.ckpt"
        ]),
        0
    );
    assert!(d.join("random.ckpt.step000006").exists());
    assert_eq!(
        with(&["eval", "--env", "@env.json", "--checkpoint", "@random.ckpt"]),
        0
    );
    assert_eq!(
        with(&[
            "diversity",
            "--env",
            "@env.json",
            "--candidates",
            "@cands.jsonl",
            "--out",
            "@div.csv",
            "--checkpoint",
            "@random.ckpt"
        ]),
        0
    );
    assert_eq!(
        pivot(
            d,
            &["report", "--logs", "@random.log", "--out", "@report.csv"]
        ),
        0
    );
    let csv = std::fs::read_to_string(d.join("report.csv")).unwrap();
    assert!(csv.starts_with("step,random_mean_reward,random_reward_std,random_success"));
    assert_eq!(csv.lines().count(), 13);
}
