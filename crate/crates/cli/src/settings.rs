use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;
use std::sync::Mutex;

use morphstn::io::parse_key_values;

use crate::CliError;

/// Options from a `--config` file. A flag given on the command line wins
/// over the file; keys the command never asks for are reported as errors.
#[derive(Debug, Default)]
pub(crate) struct Settings {
    entries: Vec<(String, String)>,
    used: Mutex<BTreeSet<String>>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Settings::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::input(format!("cannot read config {}: {e}", path.display())))?;
        let entries =
            parse_key_values(&text).map_err(|e| CliError::input(format!("config {}: {e}", path.display())))?;
        Ok(Settings {
            entries,
            used: Mutex::new(BTreeSet::new()),
        })
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.used.lock().expect("settings lock").insert(key.to_string());
        self.entries
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// The flag value if given, else the file value, else `None`.
    pub fn get<T>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        let from_file = self.raw(key);
        if flag.is_some() {
            return Ok(flag);
        }
        from_file
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| CliError::input(format!("config key `{key}`: {e}")))
            })
            .transpose()
    }

    pub fn get_or<T>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.get(flag, key)?.unwrap_or(default))
    }

    pub fn require<T>(&self, flag: Option<T>, key: &str) -> Result<T, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.get(flag, key)?
            .ok_or_else(|| CliError::input(format!("missing required option --{key}")))
    }

    /// Fails on keys that were never looked up.
    pub fn finish(&self) -> Result<(), CliError> {
        let used = self.used.lock().expect("settings lock");
        let unknown: BTreeSet<&str> = self
            .entries
            .iter()
            .map(|(k, _)| k.as_str())
            .filter(|k| !used.contains(*k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(CliError::input(format!(
                "unknown config keys: {}",
                unknown.into_iter().collect::<Vec<_>>().join(", ")
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings(text: &str) -> Settings {
        Settings {
            entries: parse_key_values(text).unwrap(),
            used: Mutex::new(BTreeSet::new()),
        }
    }

    #[test]
    fn flags_beat_file_and_file_beats_default() {
        let s = settings("step-size = 0.5\nprobes = 7\n");
        assert_eq!(s.get_or(Some(0.1), "step-size", 1.0).unwrap(), 0.1);
        assert_eq!(s.get_or(None::<usize>, "probes", 100).unwrap(), 7);
        assert_eq!(s.get_or(None::<usize>, "count", 3).unwrap(), 3);
        assert!(s.finish().is_ok());
    }

    #[test]
    fn unknown_and_malformed_keys_fail() {
        let s = settings("typo = 1\n");
        assert!(s.finish().is_err());
        let s = settings("probes = many\n");
        assert_eq!(s.get::<usize>(None, "probes").unwrap_err().code, 1);
    }
}
