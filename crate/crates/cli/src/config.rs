//! Resolved run configuration: every run writes `config.json` next to its
//! outputs, and `--config` replays one.

use std::fs;
use std::path::PathBuf;

use clap::Args;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{invalid, CmdResult};

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct Common {
    /// Seed behind every random draw of the run.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    /// Resolved config of an earlier run; replaces every option except --out.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

pub trait RunArgs: Serialize + DeserializeOwned {
    const NAME: &'static str;
    fn common(&self) -> &Common;
    fn common_mut(&mut self) -> &mut Common;
}

#[derive(Serialize, Deserialize)]
struct Resolved<T> {
    command: String,
    options: T,
}

/// Applies `--config`, creates the output directory and writes the resolved
/// options to `config.json` in it.
pub fn resolve<T: RunArgs>(mut args: T) -> CmdResult<(T, PathBuf)> {
    let out = args.common().out.clone().ok_or_else(|| invalid("--out is required"))?;
    if let Some(path) = args.common().config.clone() {
        let text = fs::read_to_string(&path)
            .map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        let resolved: Resolved<T> = serde_json::from_str(&text)?;
        if resolved.command != T::NAME {
            return Err(invalid(format!(
                "{} holds a '{}' config, not '{}'",
                path.display(),
                resolved.command,
                T::NAME
            )));
        }
        args = resolved.options;
        args.common_mut().out = Some(out.clone());
    }
    fs::create_dir_all(&out)?;
    let resolved = Resolved { command: T::NAME.to_string(), options: &args };
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&resolved)? + "\n")?;
    Ok((args, out))
}

macro_rules! run_args {
    ($($ty:ty => $name:literal),* $(,)?) => {
        $(impl $crate::config::RunArgs for $ty {
            const NAME: &'static str = $name;
            fn common(&self) -> &$crate::config::Common {
                &self.common
            }
            fn common_mut(&mut self) -> &mut $crate::config::Common {
                &mut self.common
            }
        })*
    };
}

pub(crate) use run_args;
