//! Optional TOML config file. Flags override file values, which override
//! the library defaults.

use std::path::Path;

use jigsaw_core::inference::EvalConfig;
use jigsaw_core::training::TrainConfig;
use serde::Deserialize;

use crate::CliError;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub data: DataSection,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n: Option<usize>,
    /// Room-count range such as `"3-6"`.
    pub rooms: Option<String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(FileConfig::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))
    }

    /// `--seed`, then the file, then `JIGSAW_SEED`, then 0.
    pub fn resolve_seed(&self, flag: Option<u64>) -> Result<u64, CliError> {
        if let Some(s) = flag.or(self.seed) {
            return Ok(s);
        }
        match std::env::var("JIGSAW_SEED") {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("JIGSAW_SEED must be an integer, got `{v}`"))),
            Err(_) => Ok(0),
        }
    }
}

/// Parses `"3-6"` or `"4"`.
pub fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let parse = |p: &str| p.trim().parse::<usize>().map_err(|_| format!("bad room count `{p}`"));
    let (lo, hi) = match s.split_once('-') {
        Some((a, b)) => (parse(a)?, parse(b)?),
        None => {
            let v = parse(s)?;
            (v, v)
        }
    };
    if lo > hi {
        return Err(format!("empty range `{s}`"));
    }
    Ok((lo, hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges() {
        assert_eq!(parse_range("3-6"), Ok((3, 6)));
        assert_eq!(parse_range("5"), Ok((5, 5)));
        assert!(parse_range("6-3").is_err());
        assert!(parse_range("a-3").is_err());
    }

    #[test]
    fn nested_sections_parse() {
        let cfg: FileConfig = toml::from_str(
            "seed = 4\n[data]\nrooms = \"3-5\"\n[train]\nepochs = 7\n[train.model]\nd_model = 32\n[eval]\nn_runs = 2\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, Some(4));
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.model.d_model, 32);
        assert_eq!(cfg.train.model.n_blocks, 6);
        assert_eq!(cfg.eval.n_runs, 2);
        assert!(toml::from_str::<FileConfig>("bogus = 1").is_err());
    }
}
