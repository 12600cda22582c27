//! Run parameters: flags override the config file, which overrides the
//! built-in defaults. The file is flat TOML and unknown keys are rejected.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use pivot_core::pipeline::{FilterTag, ProfileMode};
use pivot_core::seed::sub_seed;
use pivot_core::synth::{PivotPlan, SynthEnvSpec};
use pivot_core::trainer::TrainConfig;
use pivot_core::verifier::MatchRule;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Comma-separated list of depths on the command line, an array in TOML.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DepthList(pub Vec<usize>);

impl FromStr for DepthList {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.trim().is_empty() {
            return Ok(Self(Vec::new()));
        }
        s.split(',')
            .map(|x| x.trim().parse::<usize>().map_err(|e| format!("`{x}`: {e}")))
            .collect::<Result<Vec<_>, _>>()
            .map(Self)
    }
}

impl fmt::Display for DepthList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        write!(f, "{}", parts.join(","))
    }
}

macro_rules! params {
    ($( $name:ident : $ty:ty = $default:expr, $help:literal; )*) => {
        /// Every tunable parameter, each optional so that flags and the
        /// config file can be layered.
        #[derive(Debug, Clone, Default, clap::Args, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct ParamArgs {
            $(
                #[arg(long, global = true, help = $help)]
                pub $name: Option<$ty>,
            )*
        }

        /// Fully resolved parameters, echoed into every output header.
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct Params {
            $( pub $name: $ty, )*
        }

        impl ParamArgs {
            /// Fields set here win over `lower`.
            pub fn over(self, lower: ParamArgs) -> ParamArgs {
                ParamArgs { $( $name: self.$name.or(lower.$name), )* }
            }

            pub fn resolve(self) -> Params {
                Params { $( $name: self.$name.unwrap_or_else(|| $default), )* }
            }
        }
    };
}

params! {
    seed: u64 = 0, "Master seed; every random stream derives from it [default: 0]";
    contexts: usize = 8, "Number of environment contexts in the suite [default: 8]";
    horizon: usize = 12, "Turns per episode [default: 12]";
    pivot_depths: DepthList = DepthList(vec![2, 5, 8]), "Comma-separated pivot depths, each below horizon - 1 [default: 2,5,8]";
    acceptable: usize = 1, "Acceptable actions per pivot [default: 1]";
    distractors: usize = 3, "Distractor actions per pivot [default: 3]";
    leak: f64 = 0.02, "Probability that a wrong pivot action is recovered [default: 0.02]";
    num_tools: usize = 0, "Tools per context, 0 derives it from the distractor count [default: 0]";
    prior_margin: f64 = 8.0, "Reference logit margin on the preferred action at non-pivot depths [default: 8]";
    pivot_bias: f64 = 0.0, "Reference logit bias on acceptable pivot actions [default: 0]";
    temperature: f64 = 1.0, "Reference policy temperature [default: 1]";
    k: usize = 8, "Profiling rollouts per candidate [default: 8]";
    profile_mode: String = "turn".into(), "Profiling reward: turn or full_return [default: turn]";
    rule: String = "tool_functional".into(), "Matching rule: strict, tool_functional or judge [default: tool_functional]";
    iou_threshold: f64 = 0.5, "Word-set IOU threshold for free-text fields [default: 0.5]";
    judge_command: String = String::new(), "Judge program for the judge rule; empty uses the built-in stub [default: empty]";
    eps_var: f64 = 0.0, "Variance threshold for the mixed filter [default: 0]";
    lambda_diff: f64 = 0.6, "Mean-reward threshold for the adv filter (strict) [default: 0.6]";
    tag: String = "adv".into(), "Filter tag: random, mixed or adv [default: adv]";
    delta: f64 = 0.1, "Advantage-gap threshold for pivot states [default: 0.1]";
    group_size: usize = 8, "Samples per rollout group [default: 8]";
    clip_eps: f64 = 0.2, "Ratio clip range [default: 0.2]";
    kl_beta: f64 = 0.0, "KL penalty to the reference policy [default: 0]";
    eps_std: f64 = 1e-4, "Advantage std floor [default: 1e-4]";
    learning_rate: f64 = 0.5, "Gradient ascent step size [default: 0.5]";
    steps: usize = 400, "Training steps [default: 400]";
    batch_size: usize = 4, "States per training step [default: 4]";
    inner_epochs: usize = 1, "Updates per snapshot [default: 1]";
    eval_every: usize = 50, "Evaluate every this many steps, 0 only at the end [default: 50]";
    eval_episodes: usize = 32, "Evaluation episodes per context during training [default: 32]";
    checkpoint_every: usize = 0, "Write a checkpoint every this many steps, 0 only at the end [default: 0]";
    episodes: usize = 64, "Episodes per context for the eval command [default: 64]";
    diversity_k: usize = 16, "Resamples per prefix for the diversity statistic [default: 16]";
    workers: usize = 1, "Worker threads for profiling [default: 1]";
}

fn invalid(message: impl Into<String>) -> CliError {
    CliError::Validation(message.into())
}

impl Params {
    pub fn load(flags: ParamArgs, config: Option<&Path>) -> Result<Self, CliError> {
        let file = match config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                toml::from_str::<ParamArgs>(&text)
                    .map_err(|e| invalid(format!("config {}: {e}", path.display())))?
            }
            None => ParamArgs::default(),
        };
        let params = flags.over(file).resolve();
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.match_rule()?;
        self.profile_mode()?;
        self.filter_tag()?;
        if self.workers == 0 {
            return Err(invalid("workers must be >= 1"));
        }
        if self.k < 2 {
            return Err(invalid("k must be >= 2"));
        }
        if self.diversity_k == 0 || self.episodes == 0 {
            return Err(invalid("diversity_k and episodes must be >= 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(invalid("temperature must be finite and > 0"));
        }
        if !self.prior_margin.is_finite() || !self.pivot_bias.is_finite() {
            return Err(invalid("prior_margin and pivot_bias must be finite"));
        }
        self.train_config()
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        self.synth_spec()
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        Ok(())
    }

    pub fn match_rule(&self) -> Result<MatchRule, CliError> {
        let rule = match self.rule.as_str() {
            "strict" => MatchRule::strict(),
            "tool_functional" => MatchRule::tool_functional(self.iou_threshold),
            "judge" => {
                let mut r = MatchRule::judge(
                    (!self.judge_command.is_empty()).then(|| self.judge_command.clone()),
                );
                r.iou_threshold = self.iou_threshold;
                r
            }
            other => return Err(invalid(format!("unknown rule `{other}`"))),
        };
        rule.validate().map_err(|e| invalid(e.to_string()))?;
        Ok(rule)
    }

    pub fn profile_mode(&self) -> Result<ProfileMode, CliError> {
        match self.profile_mode.as_str() {
            "turn" => Ok(ProfileMode::Turn),
            "full_return" => Ok(ProfileMode::FullReturn),
            other => Err(invalid(format!("unknown profile_mode `{other}`"))),
        }
    }

    pub fn filter_tag(&self) -> Result<FilterTag, CliError> {
        FilterTag::parse(&self.tag).ok_or_else(|| invalid(format!("unknown tag `{}`", self.tag)))
    }

    pub fn synth_spec(&self) -> SynthEnvSpec {
        let mut spec = SynthEnvSpec::new(
            self.horizon,
            PivotPlan {
                pivot_depths: self.pivot_depths.0.clone(),
                acceptable_per_pivot: self.acceptable,
                distractors_per_pivot: self.distractors,
                value_leak: self.leak,
            },
            sub_seed(self.seed, &["synth"]),
        );
        if self.num_tools > 0 {
            spec.num_tools = self.num_tools;
        }
        spec
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            group_size: self.group_size,
            clip_eps: self.clip_eps,
            kl_beta: self.kl_beta,
            eps_std: self.eps_std,
            learning_rate: self.learning_rate,
            steps: self.steps,
            batch_size: self.batch_size,
            inner_epochs: self.inner_epochs,
            eval_every: self.eval_every,
            eval_episodes: self.eval_episodes,
            tag: FilterTag::parse(&self.tag),
            seed: self.seed,
            rule: self.match_rule().unwrap_or_default(),
        }
    }
}
