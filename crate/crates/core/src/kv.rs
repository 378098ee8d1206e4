//! Flat `key = value` text files for configuration.
//!
//! One entry per line, `#` starts a comment, blank lines are ignored.
//! Unknown keys and duplicate keys are errors; keys that are absent keep
//! their default value.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// A configuration struct with a flat key-value text form.
pub trait KvConfig: Default + Sized {
    /// `(key, value)` pairs in declaration order.
    fn entries(&self) -> Vec<(&'static str, String)>;

    fn set(&mut self, key: &str, value: &str) -> Result<()>;

    fn validate(&self) -> Result<()> {
        Ok(())
    }

    fn to_kv_string(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("duplicate key `{key}`"),
                });
            }
            cfg.set(key, value.trim()).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn read_kv(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Self::from_kv_str(&text)
    }

    fn write_kv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_kv_string()).map_err(|e| Error::io(&path, e))
    }
}

pub fn parse_value<V>(key: &str, value: &str) -> Result<V>
where
    V: FromStr,
    V::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value `{value}` for `{key}`: {e}")))
}

/// Implement [`KvConfig`] for a struct whose listed fields all implement
/// `Display + FromStr`. Keys are the field names.
#[macro_export]
macro_rules! kv_fields {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        fn entries(&self) -> Vec<(&'static str, String)> {
            vec![$((stringify!($field), self.$field.to_string())),*]
        }

        fn set(&mut self, key: &str, value: &str) -> $crate::error::Result<()> {
            match key {
                $(stringify!($field) => self.$field = $crate::kv::parse_value(key, value)?,)*
                _ => {
                    return Err($crate::error::Error::Config(format!(
                        "unknown key `{key}` for {}",
                        stringify!($ty)
                    )))
                }
            }
            Ok(())
        }
    };
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Default, PartialEq)]
    struct Demo {
        alpha: f64,
        count: usize,
        flag: bool,
    }

    impl KvConfig for Demo {
        kv_fields!(Demo { alpha, count, flag });
    }

    #[test]
    fn round_trip_and_comments() {
        let d = Demo { alpha: 0.1 + 0.2, count: 3, flag: true };
        let text = d.to_kv_string();
        assert_eq!(Demo::from_kv_str(&text).unwrap(), d);
        let parsed = Demo::from_kv_str("# header\n\ncount = 7 # trailing\n").unwrap();
        assert_eq!(parsed, Demo { count: 7, ..Demo::default() });
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        let e = Demo::from_kv_str("alpah = 1").unwrap_err();
        assert!(e.to_string().contains("unknown key `alpah`"), "{e}");
        assert!(matches!(Demo::from_kv_str("count = 1\ncount = 2"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(Demo::from_kv_str("count 1"), Err(Error::Parse { line: 1, .. })));
        assert!(Demo::from_kv_str("count = -1").is_err());
    }
}
