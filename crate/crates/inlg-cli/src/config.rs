//! Layered run-configuration resolution with per-key provenance.
//!
//! Precedence: command-line flags > config file > task preset > built-in
//! defaults. The resolved snapshot is written before any computation and can
//! be re-fed as a config file to reproduce the run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use inlg::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Default,
    File,
    Flag,
}

impl Provenance {
    fn as_str(self) -> &'static str {
        match self {
            Provenance::Default => "default",
            Provenance::File => "file",
            Provenance::Flag => "flag",
        }
    }
}

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    provenance: Provenance,
}

/// Every key the snapshot carries, with its built-in default.
pub const DEFAULTS: &[(&str, &str)] = &[
    // model
    ("d_model", "64"),
    ("n_layers", "2"),
    ("n_heads", "4"),
    ("d_ff", "256"),
    ("max_positions", "256"),
    ("prefix_len", "20"),
    ("d_v", "16"),
    ("mapping", "mlp"),
    ("mapping_layers", "2"),
    ("dropout", "0"),
    // training
    ("epochs", "20"),
    ("batch_size", "8"),
    ("lr", "0.001"),
    ("weight_decay", "0.01"),
    ("warmup_steps", "400"),
    ("clip_norm", "1"),
    ("tune_lm", "true"),
    ("pretrain_map", "false"),
    ("tune_map", "true"),
    ("drop_last", "false"),
    ("loss_reduction", "mean"),
    // objectives
    ("tau", "0.1"),
    ("lambda", "1"),
    ("n_no_contra", "10"),
    ("contrastive_denominator", "standard"),
    // decoding
    ("beam", "10"),
    ("max_output_len", "100"),
    ("alpha", "0"),
    // data
    ("vocab_mode", "word"),
    ("seed", "0"),
    // presets (recorded so a snapshot round-trips)
    ("task_preset", "none"),
    ("paper_hparams", "false"),
];

#[derive(Debug, Clone)]
pub struct RunConfig {
    entries: BTreeMap<String, Entry>,
}

fn parse_kv_lines(text: &str, source: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "{source}:{}: expected key=value, got {line:?}",
                idx + 1
            )));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Resolve from the three layers. `flags` carries only the keys the user
    /// actually passed.
    pub fn resolve(file: Option<&Path>, flags: &[(String, String)]) -> Result<RunConfig> {
        Self::resolve_with_overrides(&[], file, flags)
    }

    /// Like `resolve`, with subcommand-specific defaults (still below the
    /// file and flag layers).
    pub fn resolve_with_overrides(
        base_overrides: &[(&str, &str)],
        file: Option<&Path>,
        flags: &[(String, String)],
    ) -> Result<RunConfig> {
        let mut entries: BTreeMap<String, Entry> = DEFAULTS
            .iter()
            .map(|(k, v)| {
                (
                    k.to_string(),
                    Entry {
                        value: v.to_string(),
                        provenance: Provenance::Default,
                    },
                )
            })
            .collect();
        for (k, v) in base_overrides {
            entries
                .get_mut(*k)
                .unwrap_or_else(|| panic!("override of unknown key {k}"))
                .value = v.to_string();
        }

        let file_pairs = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                parse_kv_lines(&text, &path.display().to_string())?
            }
            None => Vec::new(),
        };
        for (k, _) in file_pairs.iter().chain(flags.iter()) {
            if !entries.contains_key(k) {
                return Err(Error::Config(format!("unknown config key {k:?}")));
            }
        }

        // The preset expands into the defaults layer, below file and flags.
        let lookup = |key: &str| -> Option<&str> {
            flags
                .iter()
                .rev()
                .find(|(k, _)| k == key)
                .or_else(|| file_pairs.iter().rev().find(|(k, _)| k == key))
                .map(|(_, v)| v.as_str())
        };
        let preset = lookup("task_preset").unwrap_or("none").to_string();
        let paper = lookup("paper_hparams").unwrap_or("false") == "true";
        let preset_pairs: Vec<(&str, &str)> = match preset.as_str() {
            "none" => vec![],
            "completion" => vec![("n_no_contra", "10"), ("lambda", "1"), ("max_output_len", "100")],
            "story" => vec![("n_no_contra", "15"), ("lambda", "0.2"), ("max_output_len", "150")],
            "concept" => vec![("n_no_contra", "4"), ("lambda", "1.5"), ("max_output_len", "64")],
            other => {
                return Err(Error::Config(format!(
                    "unknown task preset {other:?} (expected completion|story|concept)"
                )))
            }
        };
        if paper && preset == "none" {
            return Err(Error::Config(
                "--paper-hparams needs --task-preset to pick the hyperparameter column".to_string(),
            ));
        }
        for (k, v) in preset_pairs {
            entries.get_mut(k).unwrap().value = v.to_string();
        }
        if paper {
            for (k, v) in [
                ("lr", "0.00002"),
                ("weight_decay", "0.01"),
                ("warmup_steps", "400"),
                ("batch_size", "8"),
                ("epochs", "20"),
                ("beam", "10"),
            ] {
                entries.get_mut(k).unwrap().value = v.to_string();
            }
        }

        for (k, v) in &file_pairs {
            let e = entries.get_mut(k).unwrap();
            e.value = v.clone();
            e.provenance = Provenance::File;
        }
        for (k, v) in flags {
            let e = entries.get_mut(k).unwrap();
            e.value = v.clone();
            e.provenance = Provenance::Flag;
        }
        Ok(RunConfig { entries })
    }

    pub fn get(&self, key: &str) -> &str {
        &self
            .entries
            .get(key)
            .unwrap_or_else(|| panic!("unknown config key {key}"))
            .value
    }

    #[cfg(test)]
    pub fn provenance(&self, key: &str) -> Provenance {
        self.entries[key].provenance
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("config key {key}={:?} failed to parse", self.get(key))))
    }

    pub fn parse_bool(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "1" => Ok(true),
            "false" | "0" => Ok(false),
            other => Err(Error::Config(format!(
                "config key {key}={other:?} is not a boolean"
            ))),
        }
    }

    /// clip_norm accepts a number or "none".
    pub fn parse_clip(&self) -> Result<Option<f32>> {
        match self.get("clip_norm") {
            "none" | "off" | "0" => Ok(None),
            v => v
                .parse::<f32>()
                .map(Some)
                .map_err(|_| Error::Config(format!("clip_norm={v:?} is neither a number nor none"))),
        }
    }

    /// The snapshot: every key with its resolved value, provenance noted.
    pub fn snapshot(&self) -> String {
        let mut out = String::from("# resolved run configuration (re-feed with --config to reproduce)\n");
        for (k, e) in &self.entries {
            let _ = writeln!(out, "# {} <- {}", k, e.provenance.as_str());
            let _ = writeln!(out, "{}={}", k, e.value);
        }
        out
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.snapshot())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn empty_file_and_no_flags_is_all_defaults() {
        let cfg = RunConfig::resolve(None, &[]).unwrap();
        for (k, v) in DEFAULTS {
            assert_eq!(cfg.get(k), *v);
            assert_eq!(cfg.provenance(k), Provenance::Default);
        }
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "# comment line\ntau=0.07\nlambda=2").unwrap();
        drop(f);
        let flags = vec![("tau".to_string(), "0.2".to_string())];
        let cfg = RunConfig::resolve(Some(&path), &flags).unwrap();
        assert_eq!(cfg.get("tau"), "0.2");
        assert_eq!(cfg.provenance("tau"), Provenance::Flag);
        assert_eq!(cfg.get("lambda"), "2");
        assert_eq!(cfg.provenance("lambda"), Provenance::File);
        assert_eq!(cfg.get("beam"), "10");
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "taau=0.07\n").unwrap();
        match RunConfig::resolve(Some(&path), &[]) {
            Err(Error::Config(msg)) => assert!(msg.contains("taau"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn snapshot_round_trips_to_the_same_resolution() {
        let flags = vec![
            ("task_preset".to_string(), "story".to_string()),
            ("paper_hparams".to_string(), "true".to_string()),
            ("tau".to_string(), "0.05".to_string()),
        ];
        let cfg = RunConfig::resolve(None, &flags).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let snap = dir.path().join("config.snapshot");
        cfg.write_snapshot(&snap).unwrap();
        let again = RunConfig::resolve(Some(&snap), &[]).unwrap();
        for (k, _) in DEFAULTS {
            assert_eq!(cfg.get(k), again.get(k), "key {k} changed over round trip");
        }
    }

    #[test]
    fn story_preset_with_paper_hparams() {
        let flags = vec![
            ("task_preset".to_string(), "story".to_string()),
            ("paper_hparams".to_string(), "true".to_string()),
        ];
        let cfg = RunConfig::resolve(None, &flags).unwrap();
        assert_eq!(cfg.get("lambda"), "0.2");
        assert_eq!(cfg.get("n_no_contra"), "15");
        assert_eq!(cfg.get("max_output_len"), "150");
        assert_eq!(cfg.get("beam"), "10");
        assert_eq!(cfg.get("lr"), "0.00002");
        assert_eq!(cfg.get("epochs"), "20");
        // preset values sit in the defaults layer: a flag still wins
        let flags2 = vec![
            ("task_preset".to_string(), "concept".to_string()),
            ("lambda".to_string(), "3".to_string()),
        ];
        let cfg2 = RunConfig::resolve(None, &flags2).unwrap();
        assert_eq!(cfg2.get("lambda"), "3");
        assert_eq!(cfg2.get("n_no_contra"), "4");
        assert_eq!(cfg2.get("max_output_len"), "64");
    }

    #[test]
    fn paper_hparams_without_preset_is_an_error() {
        let flags = vec![("paper_hparams".to_string(), "true".to_string())];
        assert!(RunConfig::resolve(None, &flags).is_err());
    }
}
