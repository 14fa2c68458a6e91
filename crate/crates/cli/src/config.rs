//! Config-file support. Values from the file are turned into command-line
//! flags placed ahead of the user's own flags, so anything given on the
//! command line wins.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use toml::{Table, Value};

use crate::exit::Failure;

/// Finds `--config <path>` or `--config=<path>` in raw arguments.
pub fn find_config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--" {
            break;
        }
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(rest) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(rest));
        }
    }
    None
}

fn flag_for(key: &str) -> String {
    format!("--{}", key.replace('_', "-"))
}

fn push_value(out: &mut Vec<OsString>, key: &str, value: &Value) -> anyhow::Result<()> {
    let flag = flag_for(key);
    match value {
        Value::Boolean(true) => out.push(flag.into()),
        Value::Boolean(false) => {}
        Value::String(s) => out.extend([flag.into(), s.into()]),
        Value::Integer(i) => out.extend([flag.into(), i.to_string().into()]),
        Value::Float(f) => out.extend([flag.into(), f.to_string().into()]),
        Value::Array(items) => {
            let parts: Vec<String> = items
                .iter()
                .map(|v| match v {
                    Value::Integer(i) => Ok(i.to_string()),
                    Value::Float(f) => Ok(f.to_string()),
                    Value::String(s) => Ok(s.clone()),
                    other => bail!("unsupported list entry {other} for {key:?}"),
                })
                .collect::<anyhow::Result<_>>()?;
            out.extend([flag.into(), parts.join(",").into()]);
        }
        other => bail!("unsupported value {other} for {key:?}"),
    }
    Ok(())
}

/// Flags for `command`: top-level keys and `[global]` first, then the
/// command's own section. Other sections are ignored.
pub fn flags_from_table(table: &Table, command: &str) -> anyhow::Result<Vec<OsString>> {
    let mut out = Vec::new();
    let mut section = None;
    let mut global = None;
    for (key, value) in table {
        match value {
            Value::Table(t) if key == command => section = Some(t),
            Value::Table(t) if key == "global" => global = Some(t),
            Value::Table(_) => {}
            _ if key == "config" => bail!("a config file cannot name another config file"),
            _ => push_value(&mut out, key, value)?,
        }
    }
    for t in [global, section].into_iter().flatten() {
        for (key, value) in t {
            push_value(&mut out, key, value)?;
        }
    }
    Ok(out)
}

pub fn load_table(path: &Path) -> Result<Table, Failure> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config file {}", path.display()))
        .map_err(Failure::Io)?;
    text.parse::<Table>()
        .with_context(|| format!("invalid config file {}", path.display()))
        .map_err(Failure::Config)
}

/// Rebuilds the argument list as `prog <command> <config flags> <user flags>`.
/// `command_index` is the position of the subcommand in `args`.
pub fn splice(args: &[OsString], command_index: usize, injected: Vec<OsString>) -> Vec<OsString> {
    let mut out = Vec::with_capacity(args.len() + injected.len());
    out.push(args[0].clone());
    out.push(args[command_index].clone());
    out.extend(injected);
    out.extend(args[1..command_index].iter().cloned());
    out.extend(args[command_index + 1..].iter().cloned());
    out
}
