//! Flat `key = value` experiment configuration.
//!
//! The format is line-based: `#` starts a comment, blank lines are
//! skipped, keys use dotted section prefixes (`sgd.learning_rate = 0.05`).
//! Unknown keys — and keys that do not apply to the configured source or
//! strategy — are hard errors, so a typo can never silently fall back to a
//! default.
//!
//! Recognized keys:
//!
//! ```text
//! data.source            idx | synthetic | digits           (required)
//!   idx:       data.images, data.labels (paths, .gz ok), data.groups
//!   synthetic: data.tasks, data.classes_per_task, data.dim,
//!              data.n_per_class, data.separation, data.seed (default 0)
//!   digits:    data.n_per_class, data.groups, data.seed (default 0)
//!   data.groups = 0,2,4,6,8|1,3,5,7,9   labels per task, | between tasks
//! model.layers           e.g. 784,100,10                    (required)
//! model.activation       relu | tanh                        (default relu)
//! strategy               sequential | sfa | l2 | ewc | rehearsal |
//!                        multitask                          (required)
//!   sfa:       sfa.p (default 1), sfa.beta (default 0.5)
//!   l2/ewc:    penalty.lambda (required)
//!   ewc:       ewc.fisher_samples = <n> | all (default all)
//!   rehearsal: rehearsal.past_fraction, rehearsal.per_task_cap (required)
//! sgd.learning_rate      default 0.05
//! sgd.batch_size         default 64
//! sgd.steps_per_task     default 2000
//! sgd.shuffle_seed       default 0
//! seeds                  comma list, default 0
//! out                    output directory (flag/env override)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{digit_glyphs, load_idx, split_by_labels, synthetic_gaussian_tasks, TaskStream};
use crate::nnet::{Activation, MlpSpec};
use crate::trainers::{PenaltyConfig, PenaltyKind, SfaConfig, SgdConfig, StrategyConfig};
use crate::{Error, Result};

/// Where the task stream comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum StreamSpec {
    Idx {
        images: PathBuf,
        labels: PathBuf,
        groups: Vec<Vec<usize>>,
    },
    Synthetic {
        seed: u64,
        tasks: usize,
        classes_per_task: usize,
        dim: usize,
        n_per_class: usize,
        separation: f64,
    },
    Digits {
        seed: u64,
        n_per_class: usize,
        groups: Vec<Vec<usize>>,
    },
}

impl StreamSpec {
    /// Materialize the task stream this spec describes.
    pub fn build(&self) -> Result<TaskStream> {
        match self {
            StreamSpec::Idx {
                images,
                labels,
                groups,
            } => {
                let data = load_idx(images, labels)?;
                split_by_labels(&data, groups)
            }
            StreamSpec::Synthetic {
                seed,
                tasks,
                classes_per_task,
                dim,
                n_per_class,
                separation,
            } => synthetic_gaussian_tasks(
                *seed,
                *tasks,
                *classes_per_task,
                *dim,
                *n_per_class,
                *separation,
            ),
            StreamSpec::Digits {
                seed,
                n_per_class,
                groups,
            } => {
                let data = digit_glyphs(*seed, *n_per_class)?;
                split_by_labels(&data, groups)
            }
        }
    }
}

/// Everything one `train` invocation needs.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub stream: StreamSpec,
    pub spec: MlpSpec,
    pub strategy: StrategyConfig,
    pub sgd: SgdConfig,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
}

fn bad_key(key: &str, value: &str, want: &str) -> Error {
    Error::Config(format!("key `{key}`: expected {want}, got {value:?}"))
}

/// The parsed key/value lines, consumed key by key so leftovers can be
/// reported as unknown.
struct KeyBag {
    map: BTreeMap<String, String>,
}

impl KeyBag {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.split_once('#') {
                Some((before, _)) => before,
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got {raw:?}", i + 1))
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            if map.insert(key.clone(), value).is_some() {
                return Err(Error::Config(format!("duplicate config key `{key}`")));
            }
        }
        Ok(KeyBag { map })
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn require(&mut self, key: &str) -> Result<String> {
        self.take(key)
            .ok_or_else(|| Error::Config(format!("missing required config key `{key}`")))
    }

    fn f64_or(&mut self, key: &str, default: f64) -> Result<f64> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| bad_key(key, &v, "a number")),
        }
    }

    fn require_f64(&mut self, key: &str) -> Result<f64> {
        let v = self.require(key)?;
        v.parse().map_err(|_| bad_key(key, &v, "a number"))
    }

    fn usize_or(&mut self, key: &str, default: usize) -> Result<usize> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| bad_key(key, &v, "a non-negative integer")),
        }
    }

    fn require_usize(&mut self, key: &str) -> Result<usize> {
        let v = self.require(key)?;
        v.parse().map_err(|_| bad_key(key, &v, "a non-negative integer"))
    }

    fn u64_or(&mut self, key: &str, default: u64) -> Result<u64> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| bad_key(key, &v, "a non-negative integer")),
        }
    }

    /// Error if `key` is still present: it does not belong with `context`.
    fn forbid(&mut self, key: &str, context: &str) -> Result<()> {
        if self.map.contains_key(key) {
            return Err(Error::Config(format!(
                "key `{key}` does not apply to {context}"
            )));
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        if self.map.is_empty() {
            return Ok(());
        }
        let keys: Vec<&str> = self.map.keys().map(String::as_str).collect();
        Err(Error::Config(format!(
            "unknown config key{} `{}`",
            if keys.len() == 1 { "" } else { "s" },
            keys.join("`, `")
        )))
    }
}

fn parse_usize_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|part| {
            part.trim()
                .parse()
                .map_err(|_| bad_key(key, value, "a comma-separated list of integers"))
        })
        .collect()
}

fn parse_groups(key: &str, value: &str) -> Result<Vec<Vec<usize>>> {
    value
        .split('|')
        .map(|group| parse_usize_list(key, group))
        .collect()
}

/// Every strategy-scoped key; whichever survive the strategy's own `take`
/// calls belong to a different strategy.
const STRATEGY_KEYS: &[&str] = &[
    "sfa.p",
    "sfa.beta",
    "penalty.lambda",
    "ewc.fisher_samples",
    "rehearsal.past_fraction",
    "rehearsal.per_task_cap",
];

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut bag = KeyBag::parse(text)?;

        let source = bag.require("data.source")?;
        let stream = match source.as_str() {
            "idx" => {
                let images = PathBuf::from(bag.require("data.images")?);
                let labels = PathBuf::from(bag.require("data.labels")?);
                let groups = parse_groups("data.groups", &bag.require("data.groups")?)?;
                StreamSpec::Idx {
                    images,
                    labels,
                    groups,
                }
            }
            "synthetic" => {
                bag.forbid("data.groups", "source `synthetic` (tasks own contiguous class blocks)")?;
                StreamSpec::Synthetic {
                    seed: bag.u64_or("data.seed", 0)?,
                    tasks: bag.require_usize("data.tasks")?,
                    classes_per_task: bag.require_usize("data.classes_per_task")?,
                    dim: bag.require_usize("data.dim")?,
                    n_per_class: bag.require_usize("data.n_per_class")?,
                    separation: bag.require_f64("data.separation")?,
                }
            }
            "digits" => StreamSpec::Digits {
                seed: bag.u64_or("data.seed", 0)?,
                n_per_class: bag.require_usize("data.n_per_class")?,
                groups: parse_groups("data.groups", &bag.require("data.groups")?)?,
            },
            other => {
                return Err(bad_key("data.source", other, "one of idx, synthetic, digits"))
            }
        };

        let layers = parse_usize_list("model.layers", &bag.require("model.layers")?)?;
        let activation = match bag.take("model.activation") {
            None => Activation::Relu,
            Some(v) => {
                Activation::parse(&v).map_err(|_| bad_key("model.activation", &v, "relu or tanh"))?
            }
        };
        let spec = MlpSpec::new(layers, activation)
            .map_err(|e| Error::Config(format!("key `model.layers`: {e}")))?;

        let strategy_name = bag.require("strategy")?;
        let strategy = match strategy_name.as_str() {
            "sequential" => StrategyConfig::Sequential,
            "multitask" => StrategyConfig::Multitask,
            "sfa" => StrategyConfig::Sfa(SfaConfig {
                p: bag.f64_or("sfa.p", 1.0)?,
                beta: bag.f64_or("sfa.beta", 0.5)?,
            }),
            "l2" | "ewc" => {
                let kind = if strategy_name == "l2" {
                    PenaltyKind::L2
                } else {
                    PenaltyKind::Ewc
                };
                let lambda = bag.require_f64("penalty.lambda")?;
                let fisher_samples = if kind == PenaltyKind::Ewc {
                    match bag.take("ewc.fisher_samples") {
                        None => None,
                        Some(v) if v == "all" => None,
                        Some(v) => Some(v.parse().map_err(|_| {
                            bad_key("ewc.fisher_samples", &v, "an integer or `all`")
                        })?),
                    }
                } else {
                    // left in the bag: reported as inapplicable below
                    None
                };
                StrategyConfig::Penalty(PenaltyConfig {
                    kind,
                    lambda,
                    fisher_samples,
                })
            }
            "rehearsal" => StrategyConfig::Rehearsal {
                past_fraction: bag.require_f64("rehearsal.past_fraction")?,
                per_task_cap: bag.require_usize("rehearsal.per_task_cap")?,
            },
            other => {
                return Err(bad_key(
                    "strategy",
                    other,
                    "one of sequential, sfa, l2, ewc, rehearsal, multitask",
                ))
            }
        };
        // any strategy-scoped key that survived belongs to a different
        // strategy — report it as inapplicable rather than unknown
        let context = format!("strategy `{strategy_name}`");
        for key in STRATEGY_KEYS {
            bag.forbid(key, &context)?;
        }

        let sgd = SgdConfig {
            learning_rate: bag.f64_or("sgd.learning_rate", 0.05)?,
            batch_size: bag.usize_or("sgd.batch_size", 64)?,
            steps_per_task: bag.usize_or("sgd.steps_per_task", 2000)?,
            shuffle_seed: bag.u64_or("sgd.shuffle_seed", 0)?,
        };

        let seeds = match bag.take("seeds") {
            None => vec![0],
            Some(v) => v
                .split(',')
                .map(|part| {
                    part.trim()
                        .parse()
                        .map_err(|_| bad_key("seeds", &v, "a comma-separated list of integers"))
                })
                .collect::<Result<Vec<u64>>>()?,
        };
        if seeds.is_empty() {
            return Err(Error::Config("key `seeds`: list is empty".into()));
        }

        let out = bag.take("out").map(PathBuf::from);

        bag.finish()?;

        sgd.validate()?;
        strategy.validate(&sgd)?;
        Ok(ExperimentConfig {
            stream,
            spec,
            strategy,
            sgd,
            seeds,
            out,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_full_digits_config() {
        let cfg = ExperimentConfig::parse(
            "# two-task digit split\n\
             data.source = digits\n\
             data.n_per_class = 360\n\
             data.groups = 0,2,4,6,8|1,3,5,7,9\n\
             model.layers = 784,100,10\n\
             strategy = sfa\n\
             sfa.p = 0.25\n\
             sfa.beta = 0.5\n\
             sgd.learning_rate = 0.1\n\
             seeds = 1,2,3\n\
             out = /tmp/results\n",
        )
        .unwrap();
        assert_eq!(
            cfg.stream,
            StreamSpec::Digits {
                seed: 0,
                n_per_class: 360,
                groups: vec![vec![0, 2, 4, 6, 8], vec![1, 3, 5, 7, 9]],
            }
        );
        assert_eq!(cfg.spec.layer_sizes(), &[784, 100, 10]);
        assert_eq!(cfg.spec.activation(), Activation::Relu);
        assert_eq!(
            cfg.strategy,
            StrategyConfig::Sfa(SfaConfig { p: 0.25, beta: 0.5 })
        );
        assert_eq!(cfg.sgd.learning_rate, 0.1);
        assert_eq!(cfg.sgd.batch_size, 64);
        assert_eq!(cfg.seeds, vec![1, 2, 3]);
        assert_eq!(cfg.out, Some(PathBuf::from("/tmp/results")));
    }

    #[test]
    fn parses_synthetic_and_idx_sources() {
        let cfg = ExperimentConfig::parse(
            "data.source = synthetic\n\
             data.tasks = 3\n\
             data.classes_per_task = 2\n\
             data.dim = 8\n\
             data.n_per_class = 50\n\
             data.separation = 4.0\n\
             model.layers = 8,16,6\n\
             model.activation = tanh\n\
             strategy = sequential\n",
        )
        .unwrap();
        assert!(matches!(cfg.stream, StreamSpec::Synthetic { tasks: 3, .. }));
        assert_eq!(cfg.spec.activation(), Activation::Tanh);
        assert_eq!(cfg.seeds, vec![0]);

        let cfg = ExperimentConfig::parse(
            "data.source = idx\n\
             data.images = imgs.idx.gz\n\
             data.labels = lbls.idx\n\
             data.groups = 0,1|2,3\n\
             model.layers = 4,2,4\n\
             strategy = ewc\n\
             penalty.lambda = 0.5\n\
             ewc.fisher_samples = 128\n",
        )
        .unwrap();
        assert!(matches!(cfg.stream, StreamSpec::Idx { .. }));
        assert_eq!(
            cfg.strategy,
            StrategyConfig::Penalty(PenaltyConfig {
                kind: PenaltyKind::Ewc,
                lambda: 0.5,
                fisher_samples: Some(128),
            })
        );
    }

    #[test]
    fn fisher_samples_all_means_whole_task() {
        let cfg = ExperimentConfig::parse(
            "data.source = digits\n\
             data.n_per_class = 10\n\
             data.groups = 0,1,2,3,4|5,6,7,8,9\n\
             model.layers = 784,16,10\n\
             strategy = ewc\n\
             penalty.lambda = 1\n\
             ewc.fisher_samples = all\n",
        )
        .unwrap();
        assert_eq!(
            cfg.strategy,
            StrategyConfig::Penalty(PenaltyConfig {
                kind: PenaltyKind::Ewc,
                lambda: 1.0,
                fisher_samples: None,
            })
        );
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::parse(
            "data.source = digits\n\
             data.n_per_class = 10\n\
             data.groups = 0|1\n\
             model.layers = 784,4,10\n\
             strategy = sfa\n\
             beta_final = 0.9\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("beta_final"), "got: {err}");
    }

    #[test]
    fn inapplicable_strategy_key_is_named() {
        let err = ExperimentConfig::parse(
            "data.source = digits\n\
             data.n_per_class = 10\n\
             data.groups = 0|1\n\
             model.layers = 784,4,10\n\
             strategy = l2\n\
             penalty.lambda = 0.5\n\
             sfa.p = 0.25\n",
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("sfa.p") && msg.contains("l2"), "got: {msg}");

        let err = ExperimentConfig::parse(
            "data.source = digits\n\
             data.n_per_class = 10\n\
             data.groups = 0|1\n\
             model.layers = 784,4,10\n\
             strategy = l2\n\
             penalty.lambda = 0.5\n\
             ewc.fisher_samples = 32\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("ewc.fisher_samples"), "got: {err}");
    }

    #[test]
    fn duplicate_and_malformed_lines_are_rejected() {
        let err = ExperimentConfig::parse("strategy = sfa\nstrategy = l2\n").unwrap_err();
        assert!(err.to_string().contains("duplicate"), "got: {err}");
        let err = ExperimentConfig::parse("just some words\n").unwrap_err();
        assert!(err.to_string().contains("line 1"), "got: {err}");
    }

    #[test]
    fn numeric_errors_name_key_and_value() {
        let err = ExperimentConfig::parse(
            "data.source = digits\n\
             data.n_per_class = ten\n\
             data.groups = 0|1\n\
             model.layers = 784,4,10\n\
             strategy = sequential\n",
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("data.n_per_class") && msg.contains("ten"), "got: {msg}");
    }

    #[test]
    fn missing_required_key_is_named() {
        let err = ExperimentConfig::parse(
            "data.source = digits\n\
             data.n_per_class = 10\n\
             data.groups = 0|1\n\
             strategy = sequential\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("model.layers"), "got: {err}");

        let err = ExperimentConfig::parse(
            "data.source = digits\n\
             data.groups = 0|1\n\
             data.n_per_class = 10\n\
             model.layers = 784,4,10\n\
             strategy = l2\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("penalty.lambda"), "got: {err}");
    }

    #[test]
    fn strategy_parameter_ranges_are_checked_at_parse_time() {
        let err = ExperimentConfig::parse(
            "data.source = digits\n\
             data.n_per_class = 10\n\
             data.groups = 0|1\n\
             model.layers = 784,4,10\n\
             strategy = sfa\n\
             sfa.p = 1.5\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("p must lie"), "got: {err}");
    }

    #[test]
    fn synthetic_stream_builds_and_rejects_groups() {
        let cfg = ExperimentConfig::parse(
            "data.source = synthetic\n\
             data.tasks = 2\n\
             data.classes_per_task = 2\n\
             data.dim = 4\n\
             data.n_per_class = 12\n\
             data.separation = 3.0\n\
             model.layers = 4,8,4\n\
             strategy = sequential\n",
        )
        .unwrap();
        let stream = cfg.stream.build().unwrap();
        assert_eq!(stream.num_tasks(), 2);
        assert_eq!(stream.class_count(), 4);

        let err = ExperimentConfig::parse(
            "data.source = synthetic\n\
             data.tasks = 2\n\
             data.classes_per_task = 2\n\
             data.dim = 4\n\
             data.n_per_class = 12\n\
             data.separation = 3.0\n\
             data.groups = 0|1\n\
             model.layers = 4,8,4\n\
             strategy = sequential\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("data.groups"), "got: {err}");
    }

    #[test]
    fn digits_stream_builds_tasks_with_named_label_groups() {
        let cfg = ExperimentConfig::parse(
            "data.source = digits\n\
             data.n_per_class = 12\n\
             data.groups = 0,2,4,6,8|1,3,5,7,9\n\
             model.layers = 784,16,10\n\
             strategy = sequential\n",
        )
        .unwrap();
        let stream = cfg.stream.build().unwrap();
        assert_eq!(stream.num_tasks(), 2);
        assert_eq!(stream.tasks()[0].name, "labels-0-2-4-6-8");
        assert_eq!(stream.tasks()[0].classes, vec![0, 2, 4, 6, 8]);
        assert_eq!(stream.feature_dim(), 784);
    }
}
