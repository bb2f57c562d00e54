//! Flat `key=value` experiment configuration.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use dualshot::datagen::{SplitSizes, SyntheticSpec};
use dualshot::translator::SupervisedConfig;
use dualshot::{DualConfig, LmConfig, NmtConfig};
use serde::Serialize;

use crate::CliError;

/// Every setting of a run. Precedence: command-line flags, then the config
/// file, then these defaults.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub languages: usize,
    pub base_vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub branching: usize,
    pub sizes: SplitSizes,
    pub bpe_merges: usize,
    pub nmt: NmtConfig,
    pub supervised: SupervisedConfig,
    pub nmt_steps: usize,
    pub resume_small_steps: usize,
    pub resume_full_steps: usize,
    pub lm: LmConfig,
    pub dual: DualConfig,
    pub dual_steps: usize,
    pub regimes: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            languages: 3,
            base_vocab: 24,
            min_len: 3,
            max_len: 12,
            branching: 4,
            sizes: SplitSizes::default(),
            bpe_merges: 1000,
            nmt: NmtConfig::default(),
            supervised: SupervisedConfig::default(),
            nmt_steps: 3000,
            resume_small_steps: 200,
            resume_full_steps: 1000,
            lm: LmConfig::default(),
            dual: DualConfig::default(),
            dual_steps: 300,
            regimes: "NMT-0,Dual-0,NMT-S,Dual-S,NMT-F".into(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str, expected: &str) -> Result<T, CliError> {
    value
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("config key `{key}`: expected {expected}, got `{value}`")))
}

macro_rules! config_keys {
    ($( $key:literal => $($field:ident).+ : $ty:ty, $doc:literal; )*) => {
        /// `(key, type, description)` for every accepted key.
        pub const KEYS: &[(&str, &str, &str)] = &[ $( ($key, stringify!($ty), $doc) ),* ];

        impl ExperimentConfig {
            /// Sets one key from its text value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
                match key {
                    $( $key => self.$($field).+ = parse_value::<$ty>(key, value, stringify!($ty))?, )*
                    _ => return Err(CliError::Usage(format!("unknown config key `{key}`"))),
                }
                Ok(())
            }

            /// Current value of every key, in declaration order.
            pub fn values(&self) -> Vec<(&'static str, String)> {
                vec![ $( ($key, display(&self.$($field).+)) ),* ]
            }
        }
    };
}

fn display<T: Display>(v: &T) -> String {
    v.to_string()
}

config_keys! {
    "seed" => seed: u64, "global seed; every component seed is derived from it";
    "languages" => languages: usize, "number of synthetic languages (pivot, zero-shot pair, extra)";
    "base_vocab" => base_vocab: usize, "words in the shared base language";
    "min_len" => min_len: usize, "shortest generated sentence";
    "max_len" => max_len: usize, "longest generated sentence";
    "branching" => branching: usize, "successors per word in the base Markov chain";
    "n_supervised" => sizes.supervised: usize, "pairs per supervised (pivot) pair";
    "n_mono" => sizes.monolingual: usize, "monolingual sentences per zero-shot language";
    "n_test" => sizes.test: usize, "multi-way test sentences";
    "n_small" => sizes.small_parallel: usize, "small parallel corpus for the zero-shot pair";
    "bpe_merges" => bpe_merges: usize, "maximum BPE merges";
    "nmt_embed" => nmt.embed: usize, "translator embedding width";
    "nmt_hidden" => nmt.hidden: usize, "translator LSTM width";
    "nmt_layers" => nmt.layers: usize, "translator LSTM depth";
    "nmt_attention" => nmt.attention: usize, "attention width";
    "nmt_batch" => supervised.batch_size: usize, "supervised batch size";
    "nmt_lr" => supervised.lr: f64, "supervised SGD learning rate";
    "nmt_clip" => supervised.clip_norm: f64, "supervised gradient clip norm (0 = off)";
    "nmt_steps" => nmt_steps: usize, "supervised steps for the pivot-only model";
    "resume_small_steps" => resume_small_steps: usize, "steps resuming on the small zero-shot-pair corpus";
    "resume_full_steps" => resume_full_steps: usize, "steps resuming on fully supervised zero-shot-pair data";
    "lm_layers" => lm.layers: usize, "language model depth";
    "lm_hidden" => lm.hidden: usize, "language model width";
    "lm_dropout" => lm.dropout: f64, "language model dropout";
    "lm_unroll" => lm.unroll: usize, "truncated backpropagation length";
    "lm_batch" => lm.batch_size: usize, "language model batch size";
    "lm_lr" => lm.lr: f64, "initial language model learning rate";
    "lm_halve_from" => lm.halve_from_epoch: usize, "first epoch whose learning rate is halved";
    "lm_epochs" => lm.epochs: usize, "language model epochs";
    "lm_clip" => lm.clip_norm: f64, "language model gradient clip norm";
    "alpha" => dual.alpha: f64, "fluency reward weight";
    "temperature" => dual.temperature: f64, "sampling temperature for dual training";
    "samples" => dual.samples: usize, "samples per source sentence";
    "dual_lr" => dual.lr: f64, "dual training learning rate";
    "dual_clip" => dual.clip_norm: f64, "dual training gradient clip norm (0 = off)";
    "dual_batch" => dual.batch_size: usize, "source sentences per direction and dual step";
    "dual_max_len_ratio" => dual.max_len_ratio: f64, "sampling budget per source token";
    "dual_max_len_extra" => dual.max_len_extra: usize, "extra sampling budget";
    "length_normalize" => dual.length_normalize: bool, "divide rewards by sequence length";
    "baseline" => dual.baseline: bool, "subtract the batch-mean reward";
    "dual_steps" => dual_steps: usize, "dual training steps";
    "regimes" => regimes: String, "comma-separated regimes to train and evaluate";
}

pub const REGIMES: [&str; 5] = ["NMT-0", "Dual-0", "NMT-S", "Dual-S", "NMT-F"];

impl ExperimentConfig {
    /// Parses `key=value` lines; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = ExperimentConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<(), CliError> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override `{}` is not key=value", o.as_ref())))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let range = |e: dualshot::Error| CliError::Usage(format!("config range error: {e}"));
        self.dual.validate().map_err(range)?;
        self.lm.validate().map_err(range)?;
        self.supervised.validate().map_err(range)?;
        self.synthetic_spec().map_err(range)?.validate().map_err(range)?;
        if self.languages < 3 {
            return Err(CliError::Usage("config range error: languages must be at least 3".into()));
        }
        for r in self.regime_list() {
            if !REGIMES.contains(&r) {
                return Err(CliError::Usage(format!("unknown regime `{r}` (expected one of {})", REGIMES.join(", "))));
            }
        }
        Ok(())
    }

    pub fn regime_list(&self) -> Vec<&str> {
        self.regimes.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
    }

    pub fn wants(&self, regime: &str) -> bool {
        self.regime_list().contains(&regime)
    }

    pub fn synthetic_spec(&self) -> dualshot::Result<SyntheticSpec> {
        let mut spec = SyntheticSpec::default_with_languages(self.languages, self.seed)?;
        spec.base_vocab = self.base_vocab;
        spec.min_len = self.min_len;
        spec.max_len = self.max_len;
        spec.branching = self.branching;
        Ok(spec)
    }

    /// `key=value` text that parses back to this config.
    pub fn to_text(&self) -> String {
        self.values().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Help text listing every key with its type and default.
    pub fn help() -> String {
        let defaults = ExperimentConfig::default().values();
        let mut s = String::from("Config keys (key=value, one per line; flags override the file):\n");
        for ((key, ty, doc), (_, default)) in KEYS.iter().zip(defaults) {
            s.push_str(&format!("  {key:<20} {ty:<6} {doc} [default: {default}]\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(ExperimentConfig::parse("").unwrap(), ExperimentConfig::default());
        assert_eq!(ExperimentConfig::parse("# note\n\n").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn alpha_is_parsed_and_range_checked() {
        assert_eq!(ExperimentConfig::parse("alpha=0.005").unwrap().dual.alpha, 0.005);
        let e = ExperimentConfig::parse("alpha=2").unwrap_err();
        assert!(e.to_string().contains("alpha"), "{e}");
    }

    #[test]
    fn errors_name_the_key() {
        let e = ExperimentConfig::parse("nmt_hidden=wide").unwrap_err();
        assert!(e.to_string().contains("nmt_hidden") && e.to_string().contains("usize"), "{e}");
        let e = ExperimentConfig::parse("colour=blue").unwrap_err();
        assert!(e.to_string().contains("colour"), "{e}");
        assert!(ExperimentConfig::parse("regimes=NMT-0,NMT-Q").is_err());
    }

    #[test]
    fn text_roundtrip() {
        let mut c = ExperimentConfig::default();
        c.set("temperature", "0.5").unwrap();
        c.set("baseline", "false").unwrap();
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(KEYS.len(), c.values().len());
        assert!(ExperimentConfig::help().contains("alpha"));
    }
}
