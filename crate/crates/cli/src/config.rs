//! Optional TOML settings file. Every key mirrors a command-line flag and a
//! flag given on the command line always wins.

use std::path::Path;

use anyhow::Context;
use serde::Deserialize;

#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub profile: Option<String>,
    /// Profiles swept by `compare`.
    pub profiles: Option<Vec<String>>,
    pub queue_depth: Option<usize>,
    /// Depths swept by `compare`.
    pub queue_depths: Option<Vec<usize>>,
    pub bus_width: Option<u32>,
    pub transfer_cost: Option<u64>,
    pub averaged: Option<bool>,
    pub halt_on_violation: Option<bool>,
    pub format: Option<String>,
    pub seed: Option<u64>,
    pub stack_capacity: Option<usize>,
    pub xlen: Option<u32>,
}

impl FileConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_known_keys() {
        let c =
            FileConfig::parse("profile = \"polling\"\nqueue_depths = [1, 8]\naveraged = true\n")
                .unwrap();
        assert_eq!(c.profile.as_deref(), Some("polling"));
        assert_eq!(c.queue_depths, Some(vec![1, 8]));
        assert_eq!(c.averaged, Some(true));
        assert_eq!(c.bus_width, None);
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(FileConfig::parse("queue_dpeth = 3\n").is_err());
    }
}
