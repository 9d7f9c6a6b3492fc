//! `--config FILE` support: `key = value` lines become flags placed ahead of
//! the command-line flags, so explicit flags win.

use std::ffi::OsString;
use std::fs;

use anyhow::{bail, Context, Result};
use clap::Command;

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("config line {}: expected `key = value`", i + 1);
        };
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            bail!("config line {}: empty key", i + 1);
        }
        out.push((i + 1, key, v.trim().to_string()));
    }
    Ok(out)
}

/// Removes `--config PATH` / `--config=PATH` from `args`, returning the path.
fn take_config_path(args: &mut Vec<OsString>) -> Result<Option<OsString>> {
    let mut path = None;
    let mut i = 0;
    while i < args.len() {
        let s = args[i].to_string_lossy().into_owned();
        if s == "--config" {
            if i + 1 >= args.len() {
                bail!("--config needs a file path");
            }
            path = Some(args.remove(i + 1));
            args.remove(i);
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(OsString::from(p));
            args.remove(i);
        } else {
            i += 1;
        }
    }
    Ok(path)
}

/// Rewrites `args` so config-file values precede the user's own flags.
/// Keys must name a flag of the chosen subcommand.
pub fn expand_config(cmd: &Command, mut args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = take_config_path(&mut args)? else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path).with_context(|| format!("reading config {}", path.to_string_lossy()))?;
    let entries = parse_config(&text)?;
    let Some(sub_pos) = args.iter().skip(1).position(|a| cmd.find_subcommand(a.to_string_lossy().as_ref()).is_some()) else {
        bail!("--config needs a subcommand");
    };
    let sub_pos = sub_pos + 1;
    let sub_name = args[sub_pos].to_string_lossy().into_owned();
    let sub = cmd.find_subcommand(&sub_name).expect("checked above");
    let mut injected = Vec::new();
    for (line, key, value) in entries {
        let Some(arg) = sub.get_arguments().find(|a| a.get_long() == Some(key.as_str())) else {
            bail!("config line {line}: unknown key `{key}` for `{sub_name}`");
        };
        if arg.get_action().takes_values() {
            injected.push(OsString::from(format!("--{key}")));
            injected.push(OsString::from(value));
        } else {
            match value.as_str() {
                "true" | "yes" | "1" => injected.push(OsString::from(format!("--{key}"))),
                "false" | "no" | "0" => {}
                _ => bail!("config line {line}: `{key}` expects true or false"),
            }
        }
    }
    args.splice(sub_pos + 1..sub_pos + 1, injected);
    Ok(args)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_underscores() {
        let e = parse_config("# top\niters = 5  # inline\nspectral_descriptors=8\n\n").unwrap();
        assert_eq!(e, vec![(2, "iters".into(), "5".into()), (3, "spectral-descriptors".into(), "8".into())]);
        assert!(parse_config("novalue\n").is_err());
    }
}
