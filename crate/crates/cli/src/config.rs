//! Layered settings. Each key resolves from the command-line flag, then the `EMPATH_<KEY>`
//! environment variable, then the `key = value` config file, then the built-in default.

use std::collections::HashMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

pub const ENV_PREFIX: &str = "EMPATH_";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Flag,
    Env,
    File,
    Default,
}

#[derive(Debug, Clone, Default)]
pub struct Settings {
    file: HashMap<String, String>,
    env: HashMap<String, String>,
}

fn normalize(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace('-', "_")
}

/// Parses `key = value` lines. Blank lines and lines starting with `#` are skipped.
pub fn parse_config(text: &str) -> Result<HashMap<String, String>> {
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("config line {}: expected `key = value`", i + 1))?;
        let k = normalize(k);
        if k.is_empty() {
            bail!("config line {}: empty key", i + 1);
        }
        let v = v.trim();
        let v = v
            .strip_prefix('"')
            .and_then(|s| s.strip_suffix('"'))
            .unwrap_or(v);
        out.insert(k, v.to_string());
    }
    Ok(out)
}

impl Settings {
    pub fn new(file: HashMap<String, String>, env: impl IntoIterator<Item = (String, String)>) -> Self {
        let env = env
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|k| (normalize(k), v)))
            .collect();
        Self { file, env }
    }

    /// Reads the config file named by `path`, or by `EMPATH_CONFIG` when `path` is absent,
    /// and captures the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let env: Vec<(String, String)> = std::env::vars().collect();
        let from_env = env
            .iter()
            .find(|(k, _)| k == "EMPATH_CONFIG")
            .map(|(_, v)| v.clone());
        let file = match path.map(|p| p.to_path_buf()).or(from_env.map(Into::into)) {
            Some(p) => {
                let text = std::fs::read_to_string(&p).with_context(|| format!("reading config {}", p.display()))?;
                parse_config(&text).with_context(|| format!("in {}", p.display()))?
            }
            None => HashMap::new(),
        };
        Ok(Self::new(file, env))
    }

    /// Raw value for `key` from the environment or the file, with its origin.
    pub fn lookup(&self, key: &str) -> Option<(&str, Source)> {
        let key = normalize(key);
        if let Some(v) = self.env.get(&key) {
            return Some((v, Source::Env));
        }
        self.file.get(&key).map(|v| (v.as_str(), Source::File))
    }

    pub fn opt<T>(&self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.lookup(key) {
            None => Ok(None),
            Some((raw, src)) => raw.parse().map(Some).map_err(|e| {
                let origin = match src {
                    Source::Env => format!("{ENV_PREFIX}{}", normalize(key).to_ascii_uppercase()),
                    _ => format!("config key {}", normalize(key)),
                };
                anyhow!("{origin}: cannot parse {raw:?}: {e}")
            }),
        }
    }

    pub fn get<T>(&self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.opt(key, flag)?.unwrap_or(default))
    }

    pub fn require<T>(&self, key: &str, flag: Option<T>) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.opt(key, flag)?
            .ok_or_else(|| anyhow!("missing --{} (or {ENV_PREFIX}{} / config key {})", key.replace('_', "-"), normalize(key).to_ascii_uppercase(), normalize(key)))
    }

    /// A switch that is on when the flag was given, else from env or file.
    pub fn switch(&self, key: &str, flag: bool) -> Result<bool> {
        if flag {
            return Ok(true);
        }
        match self.lookup(key).map(|(v, _)| v.to_ascii_lowercase()) {
            None => Ok(false),
            Some(v) => match v.as_str() {
                "1" | "true" | "yes" | "on" => Ok(true),
                "0" | "false" | "no" | "off" | "" => Ok(false),
                _ => bail!("{key}: expected a boolean, got {v:?}"),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings(file: &str, env: &[(&str, &str)]) -> Settings {
        Settings::new(
            parse_config(file).unwrap(),
            env.iter().map(|(k, v)| (k.to_string(), v.to_string())),
        )
    }

    #[test]
    fn precedence_flag_env_file_default() {
        let s = settings("epochs = 7\nseed = 3\n", &[("EMPATH_EPOCHS", "9"), ("OTHER_EPOCHS", "1")]);
        assert_eq!(s.get("epochs", Some(11usize), 4).unwrap(), 11);
        assert_eq!(s.get::<usize>("epochs", None, 4).unwrap(), 9);
        assert_eq!(s.get::<u64>("seed", None, 12).unwrap(), 3);
        assert_eq!(s.get::<u64>("batch_size", None, 32).unwrap(), 32);
    }

    #[test]
    fn keys_are_normalized() {
        let s = settings("Max-Body-Bytes = 10\n", &[("EMPATH_TIMEOUT_MS", "5")]);
        assert_eq!(s.get::<usize>("max_body_bytes", None, 0).unwrap(), 10);
        assert_eq!(s.get::<u64>("timeout-ms", None, 0).unwrap(), 5);
    }

    #[test]
    fn file_syntax() {
        let m = parse_config("# comment\n\nvocab = \"a b.txt\"\nbind=0.0.0.0:1\n").unwrap();
        assert_eq!(m["vocab"], "a b.txt");
        assert_eq!(m["bind"], "0.0.0.0:1");
        let e = parse_config("ok = 1\nbroken\n").unwrap_err();
        assert!(e.to_string().contains("line 2"));
    }

    #[test]
    fn bad_values_name_their_origin() {
        let s = settings("epochs = many\n", &[("EMPATH_SEED", "x")]);
        assert!(s.get::<usize>("epochs", None, 1).unwrap_err().to_string().contains("config key epochs"));
        assert!(s.get::<u64>("seed", None, 1).unwrap_err().to_string().contains("EMPATH_SEED"));
        assert!(s.require::<String>("corpus", None).unwrap_err().to_string().contains("--corpus"));
    }

    #[test]
    fn switches() {
        let s = settings("no_seeker = yes\nno_attention = maybe\n", &[]);
        assert!(s.switch("no_seeker", false).unwrap());
        assert!(s.switch("no_rationales", true).unwrap());
        assert!(!s.switch("no_rationales", false).unwrap());
        assert!(s.switch("no_attention", false).is_err());
    }
}
