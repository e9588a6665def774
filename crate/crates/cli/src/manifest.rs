//! Layered key=value settings and the per-run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nit_core::checkpoint::parse_kv;
use nit_harness::config::render_kv;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Keys describing the invocation rather than the work; ignored when a
/// manifest is fed back in as a config.
pub const RUN_PREFIX: &str = "run.";

/// Defaults, then the config file, then `--set` pairs, then explicit flags.
pub fn layer(
    config: Option<&Path>,
    sets: &[String],
    flags: &[(&str, Option<String>)],
) -> Result<BTreeMap<String, String>, CliError> {
    let mut kv = BTreeMap::new();
    if let Some(path) = config {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        kv.extend(parse_kv(&text)?.into_iter().filter(|(k, _)| !k.starts_with(RUN_PREFIX)));
    }
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {s:?}")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    for (k, v) in flags {
        if let Some(v) = v {
            kv.insert(k.to_string(), v.clone());
        }
    }
    Ok(kv)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `<out>/manifest_<command>.txt`: the full effective settings plus
/// their hash, the seed, the tool version and the raw command line.
pub fn write_manifest(out_dir: &Path, command: &str, seed: u64, effective: &BTreeMap<String, String>) -> Result<(), CliError> {
    fs::create_dir_all(out_dir)?;
    let body = render_kv(effective);
    let argv: Vec<String> = std::env::args().collect();
    let mut kv = effective.clone();
    kv.insert(format!("{RUN_PREFIX}command"), command.to_string());
    kv.insert(format!("{RUN_PREFIX}version"), env!("CARGO_PKG_VERSION").to_string());
    kv.insert(format!("{RUN_PREFIX}seed"), seed.to_string());
    kv.insert(format!("{RUN_PREFIX}config_sha256"), sha256_hex(body.as_bytes()));
    kv.insert(format!("{RUN_PREFIX}argv"), argv.join(" ").replace('\n', " "));
    let text = format!("# re-run with: nit {command} --config <this file>\n{}", render_kv(&kv));
    fs::write(out_dir.join(format!("manifest_{command}.txt")), text)?;
    Ok(())
}

/// Pulls a typed value out of `kv`, falling back to `default`.
pub fn take<V: std::str::FromStr>(kv: &mut BTreeMap<String, String>, key: &str, default: V) -> Result<V, CliError> {
    match kv.remove(key) {
        None => Ok(default),
        Some(raw) => raw
            .parse()
            .map_err(|_| CliError::Usage(format!("cannot parse {key}={raw}"))),
    }
}

/// Fails on any key the command did not consume.
pub fn reject_leftovers(kv: &BTreeMap<String, String>) -> Result<(), CliError> {
    match kv.keys().next() {
        Some(k) => Err(CliError::Usage(format!("unknown key {k}"))),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn later_layers_win() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.txt");
        fs::write(&cfg, "a=1\nb=1\nc=1\nrun.seed=9\n").unwrap();
        let kv = layer(Some(&cfg), &["b=2".into(), "c=2".into()], &[("c", Some("3".into())), ("d", None)]).unwrap();
        assert_eq!(kv, BTreeMap::from([("a".into(), "1".into()), ("b".into(), "2".into()), ("c".into(), "3".into())]));
        assert!(layer(None, &["novalue".into()], &[]).is_err());
    }

    #[test]
    fn hash_is_hex_sha256() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
