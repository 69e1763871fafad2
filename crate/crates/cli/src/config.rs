//! Flat `key = value` run-configuration files and CLI-override merging.
//!
//! Every command accepts `--config FILE`. A value given as a flag wins
//! over the file; anything set in neither place falls back to the
//! built-in default. Each command echoes its fully-resolved settings
//! into the output directory, and that echo is itself a valid config
//! file, so any run can be repeated from it alone.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::CliError;

/// Every key any subcommand understands. Config files are shared across
/// subcommands, so each command ignores keys it does not read — but a
/// key outside this list is a typo and rejected outright.
pub const KNOWN_KEYS: &[&str] = &[
    // corpus generation
    "n_train",
    "n_test",
    "kp_vocab_size",
    "unseen_fraction",
    "absent_fraction",
    "kp_per_post_mean",
    "image_symbols",
    "image_len",
    // file paths
    "train",
    "test",
    "out",
    "cot_cache",
    "checkpoint",
    // resampling
    "target_overlap",
    // reasoning-trace production
    "teacher",
    "timestamp",
    // training
    "strategy",
    "gamma",
    "gamma_mode",
    "probe_timing",
    "lr",
    "final_lr_fraction",
    "epochs",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "batch_size",
    "layers",
    "heads",
    "dim",
    "ff_dim",
    "max_seq_len",
    "checkpoint_every",
    // evaluation
    "max_new",
    "label",
    // shared
    "seed",
];

#[derive(Debug)]
struct Entry {
    raw_key: String,
    line: usize,
    value: String,
}

/// Parsed config file, keyed by canonical key name.
#[derive(Debug, Default)]
pub struct FileConfig {
    entries: BTreeMap<String, Entry>,
}

/// Keys compare case-insensitively with `-` and `_` interchangeable, so
/// a file may spell a setting the way its flag is spelled.
fn canonical(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace('-', "_")
}

impl FileConfig {
    pub fn empty() -> FileConfig {
        FileConfig::default()
    }

    pub fn load(path: &Path) -> Result<FileConfig, CliError> {
        if !path.exists() {
            return Err(CliError::Data(format!("no such file: {}", path.display())));
        }
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("reading {}: {e}", path.display())))?;
        let mut entries: BTreeMap<String, Entry> = BTreeMap::new();
        for (i, raw_line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key_part, value_part)) = line.split_once('=') else {
                return Err(CliError::Usage(format!(
                    "{} line {line_no}: expected `key = value`, got {line:?}",
                    path.display()
                )));
            };
            let raw_key = key_part.trim().to_string();
            let value = value_part.trim().to_string();
            if raw_key.is_empty() {
                return Err(CliError::Usage(format!(
                    "{} line {line_no}: empty key",
                    path.display()
                )));
            }
            if value.is_empty() {
                return Err(CliError::Usage(format!(
                    "{} line {line_no}: key `{raw_key}` has an empty value",
                    path.display()
                )));
            }
            let key = canonical(&raw_key);
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(CliError::Usage(format!(
                    "{} line {line_no}: unknown config key `{raw_key}`",
                    path.display()
                )));
            }
            if let Some(prev) = entries.get(&key) {
                let detail = if prev.raw_key == raw_key {
                    format!("key `{raw_key}` set twice (lines {} and {line_no})", prev.line)
                } else {
                    format!(
                        "`{}` (line {}) and `{raw_key}` (line {line_no}) name the same setting",
                        prev.raw_key, prev.line
                    )
                };
                return Err(CliError::Usage(format!(
                    "config conflict in {}: {detail}",
                    path.display()
                )));
            }
            entries.insert(
                key,
                Entry {
                    raw_key,
                    line: line_no,
                    value,
                },
            );
        }
        Ok(FileConfig { entries })
    }

    fn get(&self, key: &str) -> Option<&Entry> {
        self.entries.get(key)
    }
}

pub fn load_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    match path {
        Some(p) => FileConfig::load(p),
        None => Ok(FileConfig::empty()),
    }
}

/// Merges flag values over file values over defaults, recording every
/// resolved setting for the config echo.
pub struct Resolver<'a> {
    file: &'a FileConfig,
    echo: Vec<(&'static str, String)>,
}

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

impl<'a> Resolver<'a> {
    pub fn new(file: &'a FileConfig) -> Resolver<'a> {
        Resolver { file, echo: Vec::new() }
    }

    fn parse_file_value<T>(&self, key: &'static str) -> Result<Option<T>, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.file.get(key) {
            None => Ok(None),
            Some(entry) => entry.value.parse().map(Some).map_err(|e| {
                CliError::Usage(format!(
                    "config key `{}` (line {}): invalid value {:?}: {e}",
                    entry.raw_key, entry.line, entry.value
                ))
            }),
        }
    }

    /// Typed setting with a default. The flag value, if any, arrives
    /// already parsed by clap.
    pub fn value<T>(&mut self, key: &'static str, cli: Option<T>, default: T) -> Result<T, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = match cli {
            Some(v) => v,
            None => self.parse_file_value(key)?.unwrap_or(default),
        };
        self.echo.push((key, v.to_string()));
        Ok(v)
    }

    /// Enum-like setting passed as a raw string on the command line and
    /// parsed here, so flag and file values share one parser.
    pub fn keyword<T>(&mut self, key: &'static str, cli: Option<String>, default: T) -> Result<T, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = match cli {
            Some(raw) => raw.parse().map_err(|e| {
                CliError::Usage(format!("invalid --{} value {raw:?}: {e}", flag_name(key)))
            })?,
            None => self.parse_file_value(key)?.unwrap_or(default),
        };
        self.echo.push((key, v.to_string()));
        Ok(v)
    }

    pub fn required_path(&mut self, key: &'static str, cli: Option<PathBuf>) -> Result<PathBuf, CliError> {
        match self.optional_path(key, cli) {
            Some(p) => Ok(p),
            None => Err(CliError::Usage(format!(
                "missing required setting `{key}`: pass --{} or set `{key} = …` in the config file",
                flag_name(key)
            ))),
        }
    }

    pub fn optional_path(&mut self, key: &'static str, cli: Option<PathBuf>) -> Option<PathBuf> {
        let v = match cli {
            Some(p) => Some(p),
            None => self.file.get(key).map(|e| PathBuf::from(&e.value)),
        };
        if let Some(p) = &v {
            self.echo.push((key, p.display().to_string()));
        }
        v
    }

    /// Writes the resolved settings as a reusable config file in `dir`.
    pub fn write_echo(&self, dir: &Path, command: &str) -> Result<PathBuf, CliError> {
        let path = dir.join("config.resolved.txt");
        let mut out = format!("# resolved configuration; rerun with: dyncot {command} --config <this file>\n");
        for (k, v) in &self.echo {
            out.push_str(&format!("{k} = {v}\n"));
        }
        fs::write(&path, out)
            .map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_cfg(dir: &tempfile::TempDir, body: &str) -> PathBuf {
        let path = dir.path().join("run.cfg");
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_cfg(&dir, "lr = 0.25\n# comment\nepochs = 7\n");
        let file = FileConfig::load(&path).unwrap();
        let mut r = Resolver::new(&file);
        assert_eq!(r.value("lr", Some(0.5f64), 0.1).unwrap(), 0.5);
        assert_eq!(r.value("epochs", None::<usize>, 1).unwrap(), 7);
        assert_eq!(r.value("seed", None::<u64>, 17).unwrap(), 17);
        assert_eq!(
            r.echo,
            vec![
                ("lr", "0.5".to_string()),
                ("epochs", "7".to_string()),
                ("seed", "17".to_string())
            ]
        );
    }

    #[test]
    fn duplicate_key_is_a_conflict_naming_both_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_cfg(&dir, "lr = 0.1\nseed = 3\nlr = 0.2\n");
        let err = FileConfig::load(&path).unwrap_err();
        let msg = format!("{err:?}");
        assert!(msg.contains("config conflict"), "{msg}");
        assert!(msg.contains("`lr`"), "{msg}");
        assert!(msg.contains("lines 1 and 3"), "{msg}");
    }

    #[test]
    fn aliased_spellings_conflict_naming_both_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_cfg(&dir, "gamma-mode = fixed\ngamma_mode = running_average\n");
        let err = FileConfig::load(&path).unwrap_err();
        let msg = format!("{err:?}");
        assert!(msg.contains("`gamma-mode`"), "{msg}");
        assert!(msg.contains("`gamma_mode`"), "{msg}");
        assert!(msg.contains("same setting"), "{msg}");
    }

    #[test]
    fn unknown_key_and_bad_syntax_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let bad_key = write_cfg(&dir, "learning_rate = 0.1\n");
        assert!(matches!(FileConfig::load(&bad_key), Err(CliError::Usage(m)) if m.contains("learning_rate")));
        let bad_line = write_cfg(&dir, "just some words\n");
        assert!(matches!(FileConfig::load(&bad_line), Err(CliError::Usage(m)) if m.contains("key = value")));
    }

    #[test]
    fn missing_config_file_names_the_path() {
        let err = FileConfig::load(Path::new("/nonexistent/run.cfg")).unwrap_err();
        assert!(matches!(&err, CliError::Data(m) if m.contains("/nonexistent/run.cfg")));
    }

    #[test]
    fn bad_file_value_names_key_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_cfg(&dir, "\nepochs = many\n");
        let file = FileConfig::load(&path).unwrap();
        let mut r = Resolver::new(&file);
        let err = r.value("epochs", None::<usize>, 1).unwrap_err();
        let msg = format!("{err:?}");
        assert!(msg.contains("`epochs`") && msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn echo_round_trips_through_the_loader() {
        let dir = tempfile::tempdir().unwrap();
        let file = FileConfig::empty();
        let mut r = Resolver::new(&file);
        r.value("seed", Some(9u64), 17).unwrap();
        r.value("lr", None::<f64>, 5e-5).unwrap();
        let out = dir.path().join("echo");
        fs::create_dir_all(&out).unwrap();
        let path = r.write_echo(&out, "train").unwrap();
        let reloaded = FileConfig::load(&path).unwrap();
        let mut r2 = Resolver::new(&reloaded);
        assert_eq!(r2.value("seed", None::<u64>, 17).unwrap(), 9);
        assert_eq!(r2.value("lr", None::<f64>, 0.0).unwrap(), 5e-5);
    }
}
