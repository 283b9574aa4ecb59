//! Effective training configuration with the source of every value.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use normgen::kv::KvFile;
use normgen::training::{TrainConfig, CONFIG_KEYS};
use normgen::Error;

pub const SEED_ENV: &str = "NORMGEN_SEED";
pub const EFFECTIVE_CONFIG_FILE: &str = "config.txt";

/// Where an effective value came from, lowest priority first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Source {
    Default,
    Env,
    File,
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Default => "default",
            Source::Env => "env",
            Source::File => "file",
            Source::Flag => "flag",
        })
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: PathBuf,
    pub run_dir: PathBuf,
    pub resume: Option<PathBuf>,
    pub sources: BTreeMap<&'static str, Source>,
}

impl RunConfig {
    /// Layers defaults, `NORMGEN_SEED`, the config file and flag overrides.
    pub fn resolve(
        data: PathBuf,
        run_dir: PathBuf,
        resume: Option<PathBuf>,
        env_seed: Option<&str>,
        file: Option<&Path>,
        flags: &[(&'static str, String)],
    ) -> normgen::Result<Self> {
        let mut train = TrainConfig::default();
        let mut sources: BTreeMap<&'static str, Source> = CONFIG_KEYS.iter().map(|(k, _)| (*k, Source::Default)).collect();
        if let Some(v) = env_seed {
            train
                .set("seed", v)
                .map_err(|e| Error::Config(format!("{SEED_ENV}: {e}")))?;
            sources.insert("seed", Source::Env);
        }
        if let Some(path) = file {
            let kv = KvFile::read(path)?;
            train.apply_kv(&kv, path)?;
            for (k, _, _) in &kv.entries {
                let key = CONFIG_KEYS.iter().find(|(name, _)| name == k).expect("validated by apply_kv").0;
                sources.insert(key, Source::File);
            }
        }
        for (key, value) in flags {
            train
                .set(key, value)
                .map_err(|e| Error::Config(format!("--{}: {e}", key.replace('_', "-"))))?;
            sources.insert(key, Source::Flag);
        }
        train.validate()?;
        Ok(Self {
            train,
            data,
            run_dir,
            resume,
            sources,
        })
    }

    /// `key = value  # source` lines; the result parses as a config file.
    pub fn render(&self) -> String {
        let mut s = format!("# data: {}\n", self.data.display());
        if let Some(r) = &self.resume {
            s.push_str(&format!("# resume: {}\n", r.display()));
        }
        for (key, _) in CONFIG_KEYS {
            let value = self.train.get(key).expect("listed key");
            s.push_str(&format!("{key} = {value}  # {}\n", self.sources[key]));
        }
        s
    }
}

/// Help text listing every config key with its default.
pub fn keys_help() -> String {
    let d = TrainConfig::default();
    let width = CONFIG_KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Config keys (file `key = value` or `--key-name VALUE`), with defaults:\n");
    for (key, desc) in CONFIG_KEYS {
        s.push_str(&format!(
            "  {key:<width$}  {:<12}  {desc}\n",
            d.get(key).expect("listed key")
        ));
    }
    s.push_str(&format!(
        "Priority: flag > config file > {SEED_ENV} (seed only) > default."
    ));
    s
}
