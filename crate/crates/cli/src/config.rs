//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::CliError;

/// Every accepted key with its default. An empty default means unset.
const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("out", "out"),
    ("data.dataset", "mnist"),
    ("data.dir", "data/mnist"),
    ("data.downscale", "true"),
    ("data.levels", "16"),
    ("data.split_seed", "1"),
    ("data.canvas", "22"),
    ("data.affine_seed", "0"),
    ("classifier.variant", "baseline"),
    ("classifier.c1", "32"),
    ("classifier.c2", "32"),
    ("classifier.kernel", "3"),
    ("classifier.fc3", "256"),
    ("classifier.fc_width1", "512"),
    ("classifier.fc_width2", "512"),
    ("classifier.conv_dropout", "0.2"),
    ("classifier.fc_dropout", "0.5"),
    ("classifier.dropout", "true"),
    ("classifier.lr", "0.0003"),
    ("classifier.max_steps", "10000"),
    ("classifier.batch_size", "64"),
    ("classifier.eval_every", "200"),
    ("classifier.patience", "10"),
    ("classifier.checkpoints", "0,10,100,1000,10000"),
    ("classifier.train_subset", ""),
    ("classifier.checkpoint", ""),
    ("inverter.layer", "FC3"),
    ("inverter.layers", "4"),
    ("inverter.filters", "32"),
    ("inverter.first_kernel", "5"),
    ("inverter.kernel", "3"),
    ("inverter.conditioning", "auto"),
    ("inverter.dropout", "0.5"),
    ("inverter.context_dropout", "0"),
    ("inverter.lr", "0.001"),
    ("inverter.lr_decay", "0.9999"),
    ("inverter.max_steps", "2000"),
    ("inverter.batch_size", "32"),
    ("inverter.eval_every", "200"),
    ("inverter.val_limit", "500"),
    ("inverter.dir", ""),
    ("mse.filters", "32"),
    ("mse.lr", "0.001"),
    ("mse.max_steps", "2000"),
    ("mse.batch_size", "32"),
    ("mse.eval_every", "200"),
    ("eval.split", "test"),
    ("eval.kind", "nce"),
    ("eval.n", "1000"),
    ("eval.k", "3"),
    ("eval.bins", "30"),
    ("eval.sigma2", "0.1"),
    ("eval.held_out", "0.5"),
    ("eval.n_test", "200"),
    ("eval.n_samples", "10"),
    ("eval.layers", "CONV1,CONV2,FC3"),
    ("eval.pool", "256"),
    ("eval.topk", "8"),
    ("eval.index", "0"),
    ("eval.rows", "4"),
    ("eval.cols", "8"),
    ("eval.workers", "1"),
    ("eval.regular_dir", ""),
    ("eval.overfit_dir", ""),
];

#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn known(key: &str) -> Result<(), CliError> {
    if KEYS.iter().any(|(k, _)| *k == key) {
        Ok(())
    } else {
        Err(CliError::usage(format!("unknown config key `{key}`")))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            let key = key.trim();
            known(key)?;
            if cfg.values.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(CliError::usage(format!("line {}: `{key}` set twice", n + 1)));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<(), CliError> {
        known(key)?;
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) =
            pair.split_once('=').ok_or_else(|| CliError::usage(format!("override `{pair}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn raw(&self, key: &str) -> &str {
        match self.values.get(key) {
            Some(v) => v,
            None => KEYS.iter().find(|(k, _)| *k == key).map(|(_, d)| *d).expect("known key"),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse().map_err(|e| CliError::usage(format!("`{key}` = `{raw}`: {e}")))
    }

    pub fn optional<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        if self.raw(key).is_empty() {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| CliError::usage(format!("`{key}` entry `{s}`: {e}"))))
            .collect()
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let raw = self.raw(key);
        (!raw.is_empty()).then(|| PathBuf::from(raw))
    }

    /// Every key with its effective value, in the file format.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        for (k, _) in KEYS {
            out.push_str(&format!("{k} = {}\n", self.raw(k)));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_defaults() {
        let cfg = RunConfig::parse("# run\nseed = 7  # trailing\n\nclassifier.lr=0.01\n").unwrap();
        assert_eq!(cfg.get::<u64>("seed").unwrap(), 7);
        assert_eq!(cfg.get::<f64>("classifier.lr").unwrap(), 0.01);
        assert_eq!(cfg.get::<usize>("inverter.filters").unwrap(), 32);
        assert_eq!(cfg.optional::<usize>("classifier.train_subset").unwrap(), None);
        assert_eq!(cfg.list::<usize>("classifier.checkpoints").unwrap(), vec![0, 10, 100, 1000, 10000]);
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        let err = RunConfig::parse("classfier.lr = 1").unwrap_err();
        assert!(err.to_string().contains("classfier.lr"));
        assert_eq!(err.code(), 1);
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::parse("seed").is_err());
    }

    #[test]
    fn resolved_round_trips() {
        let mut cfg = RunConfig::parse("eval.k = 5").unwrap();
        cfg.set_pair("inverter.layer=CONV2").unwrap();
        let again = RunConfig::parse(&cfg.resolved()).unwrap();
        assert_eq!(again.resolved(), cfg.resolved());
        assert_eq!(again.raw("inverter.layer"), "CONV2");
        assert_eq!(again.raw("eval.k"), "5");
    }

    #[test]
    fn bad_values_name_the_key() {
        let cfg = RunConfig::parse("classifier.lr = fast").unwrap();
        let err = cfg.get::<f64>("classifier.lr").unwrap_err();
        assert!(err.to_string().contains("classifier.lr"));
    }
}
