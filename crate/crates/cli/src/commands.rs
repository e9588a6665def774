//! One function per subcommand. Each resolves its effective settings, writes
//! the manifest, then does the work under the output directory.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use nit_core::blocks::NitParams;
use nit_core::checkpoint;
use nit_core::diffusion::{euler_sample, GuidanceConfig, SamplerConfig};
use nit_core::packing::{packing_efficiency, plan_packing};
use nit_core::NitParams32;
use nit_harness::config::RunConfig;
use nit_harness::data::{decode_latent, CodecConfig, Dataset, LatentNorm};
use nit_harness::image_io::{write_image, Rgb8};
use nit_harness::plot::line_plot;
use nit_harness::train::{parse_log, Trainer};
use nit_harness::verify::{parse_scope, render_csv, render_text, run_suites, Fault, VerifyOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::manifest::{layer, reject_leftovers, take, write_manifest};
use crate::{CliError, Common};

pub fn train(common: &Common, flags: &[(&str, Option<String>)]) -> Result<(), CliError> {
    let kv = layer(common.config.as_deref(), &common.set, flags)?;
    let cfg = RunConfig::from_kv(&kv)?;
    let effective = cfg.to_kv();
    write_manifest(&common.out_dir, "train", cfg.train.seed, &effective)?;

    let dataset = Dataset::build(cfg.dataset_spec())?;
    let params = NitParams32::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.train.seed))?;
    println!(
        "training {} parameters on {} instances (mixture {}) for {} steps",
        params.num_params(),
        dataset.instances.len(),
        cfg.data.mixture.tag(),
        cfg.train.steps
    );
    let mut trainer = Trainer::new(params, dataset, cfg.train)?;
    let every = cfg.train.log_every;
    let records = trainer.run(&common.out_dir, |r| {
        if r.step % every == 0 {
            println!("step {:>6}  loss {:.5}  waste {:.4}  tokens {}", r.step, r.loss, r.waste, r.tokens);
        }
    })?;
    if let (Some(first), Some(last)) = (records.first(), records.last()) {
        println!("loss {:.5} -> {:.5}", first.loss, last.loss);
    }
    println!("wrote {}", common.out_dir.join("model.nitc").display());
    Ok(())
}

struct SampleSettings {
    height: usize,
    width: usize,
    class_id: Option<u32>,
    seed: u64,
    steps: usize,
    cfg_scale: f64,
    cfg_lo: f64,
    cfg_hi: f64,
    checkpoint: Option<PathBuf>,
    output: String,
}

impl SampleSettings {
    fn from_kv(mut kv: BTreeMap<String, String>) -> Result<Self, CliError> {
        let class: i64 = take(&mut kv, "sample.class", 0)?;
        let ckpt: String = take(&mut kv, "sample.checkpoint", String::new())?;
        let s = Self {
            height: take(&mut kv, "sample.height", 64)?,
            width: take(&mut kv, "sample.width", 64)?,
            class_id: (class >= 0).then_some(class as u32),
            seed: take(&mut kv, "sample.seed", 0)?,
            steps: take(&mut kv, "sample.steps", 50)?,
            cfg_scale: take(&mut kv, "sample.cfg_scale", 2.25)?,
            cfg_lo: take(&mut kv, "sample.cfg_lo", 0.0)?,
            cfg_hi: take(&mut kv, "sample.cfg_hi", 0.7)?,
            checkpoint: (!ckpt.is_empty()).then(|| PathBuf::from(ckpt)),
            output: take(&mut kv, "sample.output", "sample.png".to_string())?,
        };
        reject_leftovers(&kv)?;
        Ok(s)
    }

    fn to_kv(&self) -> BTreeMap<String, String> {
        let ckpt = self.checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        [
            ("sample.height", self.height.to_string()),
            ("sample.width", self.width.to_string()),
            ("sample.class", self.class_id.map_or(-1, i64::from).to_string()),
            ("sample.seed", self.seed.to_string()),
            ("sample.steps", self.steps.to_string()),
            ("sample.cfg_scale", self.cfg_scale.to_string()),
            ("sample.cfg_lo", self.cfg_lo.to_string()),
            ("sample.cfg_hi", self.cfg_hi.to_string()),
            ("sample.checkpoint", ckpt),
            ("sample.output", self.output.clone()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Model, codec and latent statistics from a checkpoint, or a freshly
/// initialized default model when none is given.
fn load_generator(path: Option<&Path>, seed: u64) -> Result<(NitParams32, CodecConfig, LatentNorm), CliError> {
    match path {
        Some(p) => {
            let (params, mut extra) = checkpoint::load::<f32>(p)?;
            let d = CodecConfig::default();
            let codec = CodecConfig {
                downsample: take(&mut extra, "codec.downsample", d.downsample)?,
                keep: take(&mut extra, "codec.keep", d.keep)?,
                seed: take(&mut extra, "codec.seed", d.seed)?,
            };
            let norm = LatentNorm::from_kv(&extra).unwrap_or_else(|_| LatentNorm::identity(codec.latent_channels()));
            Ok((params, codec, norm))
        }
        None => {
            let cfg = RunConfig::default();
            let params = NitParams::new(cfg.model, &mut ChaCha8Rng::seed_from_u64(seed))?;
            let norm = LatentNorm::identity(cfg.codec.latent_channels());
            Ok((params, cfg.codec, norm))
        }
    }
}

pub fn sample(common: &Common, flags: &[(&str, Option<String>)]) -> Result<(), CliError> {
    let s = SampleSettings::from_kv(layer(common.config.as_deref(), &common.set, flags)?)?;
    write_manifest(&common.out_dir, "sample", s.seed, &s.to_kv())?;

    let (params, codec_cfg, norm) = load_generator(s.checkpoint.as_deref(), s.seed)?;
    if params.config.latent_channels != codec_cfg.latent_channels() {
        return Err(CliError::Usage("checkpoint model and codec disagree on latent channels".into()));
    }
    if let Some(c) = s.class_id {
        if c as usize >= params.config.num_classes {
            return Err(nit_core::NitError::LabelOutOfRange { label: c, num_classes: params.config.num_classes }.into());
        }
    }
    let unit = codec_cfg.downsample * params.config.patch_size;
    for (axis, size) in [("height", s.height), ("width", s.width)] {
        if size == 0 || size % unit != 0 {
            return Err(nit_core::NitError::NotDivisible { axis, size, factor: unit }.into());
        }
    }
    let codec = codec_cfg.build()?;
    let sampler = SamplerConfig::new(s.steps, s.seed)?;
    let guidance = GuidanceConfig::new(s.cfg_scale, s.cfg_lo, s.cfg_hi)?;
    let latent = euler_sample(
        &params,
        (s.height / codec_cfg.downsample, s.width / codec_cfg.downsample),
        s.class_id,
        &sampler,
        &guidance,
    )?;
    let img = decode_latent(&codec, &norm, &latent)?;
    let path = common.out_dir.join(&s.output);
    write_image(&path, &Rgb8::from_chw(&img)?)?;
    println!(
        "guidance scale {} on t in [{}, {}], {} Euler steps",
        guidance.scale, guidance.t_lo, guidance.t_hi, s.steps
    );
    println!("wrote {}", path.display());
    Ok(())
}

/// Parses `HxW` lines; blanks and `#` comments are skipped.
pub fn parse_sizes(text: &str) -> Result<Vec<(usize, usize)>, CliError> {
    text.split(|c| c == '\n' || c == ',')
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let bad = || CliError::Usage(format!("expected HxW, got {l:?}"));
            let (h, w) = l.split_once(['x', 'X']).ok_or_else(bad)?;
            Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
        })
        .collect()
}

pub fn pack_plan(common: &Common, flags: &[(&str, Option<String>)], input: Option<&Path>) -> Result<(), CliError> {
    let mut kv = layer(common.config.as_deref(), &common.set, flags)?;
    let downsample: usize = take(&mut kv, "pack.downsample", 32)?;
    let patch: usize = take(&mut kv, "pack.patch", 1)?;
    let budget: usize = take(&mut kv, "pack.budget", 2048)?;
    let listed: String = take(&mut kv, "pack.sizes", String::new())?;
    reject_leftovers(&kv)?;

    let sizes = if !listed.is_empty() {
        parse_sizes(&listed)?
    } else {
        let mut text = String::new();
        match input {
            Some(p) if p != Path::new("-") => text = std::fs::read_to_string(p)?,
            _ => {
                std::io::stdin().read_to_string(&mut text)?;
            }
        }
        parse_sizes(&text)?
    };
    if sizes.is_empty() {
        return Err(CliError::Usage("no sizes given".into()));
    }
    let unit = downsample * patch;
    let mut counts = Vec::with_capacity(sizes.len());
    for &(h, w) in &sizes {
        for (axis, size) in [("height", h), ("width", w)] {
            if unit == 0 || size == 0 || size % unit != 0 {
                return Err(nit_core::NitError::NotDivisible { axis, size, factor: unit }.into());
            }
        }
        counts.push((h / unit) * (w / unit));
    }
    let listed: Vec<String> = sizes.iter().map(|(h, w)| format!("{h}x{w}")).collect();
    let effective = BTreeMap::from([
        ("pack.downsample".to_string(), downsample.to_string()),
        ("pack.patch".to_string(), patch.to_string()),
        ("pack.budget".to_string(), budget.to_string()),
        ("pack.sizes".to_string(), listed.join(",")),
    ]);
    write_manifest(&common.out_dir, "pack-plan", 0, &effective)?;

    let plan = plan_packing(&counts, budget)?;
    let mut out = String::from("pack\tinstance\tsize\ttokens\n");
    for (p, pack) in plan.packs.iter().enumerate() {
        for &i in pack {
            out.push_str(&format!("{p}\t{i}\t{}\t{}\n", listed[i], counts[i]));
        }
    }
    for (p, t) in plan.pack_tokens(&counts).iter().enumerate() {
        out.push_str(&format!("total\t{p}\t{t}\t{budget}\n"));
    }
    out.push_str(&format!("waste\t{:.4}\n", packing_efficiency(&plan, &counts)));
    std::fs::write(common.out_dir.join("pack_plan.tsv"), &out)?;
    print!("{out}");
    Ok(())
}

/// Returns whether every suite passed.
pub fn verify(common: &Common, flags: &[(&str, Option<String>)]) -> Result<bool, CliError> {
    let mut kv = layer(common.config.as_deref(), &common.set, flags)?;
    let scope: String = take(&mut kv, "verify.scope", "all".to_string())?;
    let fault: String = take(&mut kv, "verify.inject_fault", String::new())?;
    let seed: u64 = take(&mut kv, "verify.seed", 0)?;
    reject_leftovers(&kv)?;
    let names = parse_scope(&scope)?;
    let fault = if fault.is_empty() { None } else { Some(Fault::parse(&fault)?) };
    let effective = BTreeMap::from([
        ("verify.scope".to_string(), scope),
        ("verify.inject_fault".to_string(), fault.map(|_| "attention-sign").unwrap_or("").to_string()),
        ("verify.seed".to_string(), seed.to_string()),
    ]);
    write_manifest(&common.out_dir, "verify", seed, &effective)?;

    let results = run_suites(&names, &VerifyOptions { seed, fault })?;
    print!("{}", render_text(&results));
    let csv_path = common.out_dir.join("verify_report.csv");
    std::fs::write(&csv_path, render_csv(&results))?;
    if let Some(att) = results.iter().find(|r| r.name == "attention") {
        println!("max attention deviation {:.3e} (tolerance {:.0e})", att.value, att.tolerance);
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        println!("all {} suites passed; report at {}", results.len(), csv_path.display());
        Ok(true)
    } else {
        eprintln!("failing suites: {}", failed.join(", "));
        Ok(false)
    }
}

pub fn stats(common: &Common, flags: &[(&str, Option<String>)]) -> Result<(), CliError> {
    let mut kv = layer(common.config.as_deref(), &common.set, flags)?;
    let default_log = common.out_dir.join("train_log.csv").display().to_string();
    let log: String = take(&mut kv, "stats.log", default_log)?;
    let output: String = take(&mut kv, "stats.output", "loss.png".to_string())?;
    let width: usize = take(&mut kv, "stats.width", 640)?;
    let height: usize = take(&mut kv, "stats.height", 400)?;
    reject_leftovers(&kv)?;
    if width < 80 || height < 60 {
        return Err(CliError::Usage("plot must be at least 80x60".into()));
    }
    let effective = BTreeMap::from([
        ("stats.log".to_string(), log.clone()),
        ("stats.output".to_string(), output.clone()),
        ("stats.width".to_string(), width.to_string()),
        ("stats.height".to_string(), height.to_string()),
    ]);
    write_manifest(&common.out_dir, "stats", 0, &effective)?;

    let records = parse_log(&std::fs::read_to_string(&log)?)?;
    let x: Vec<f64> = records.iter().map(|r| r.step as f64).collect();
    let y: Vec<f64> = records.iter().map(|r| r.loss).collect();
    let path = common.out_dir.join(&output);
    write_image(&path, &line_plot(&x, &y, width, height))?;
    if let (Some(first), Some(last)) = (records.first(), records.last()) {
        let min = y.iter().copied().fold(f64::INFINITY, f64::min);
        let waste = records.iter().map(|r| r.waste).sum::<f64>() / records.len() as f64;
        println!(
            "{} steps: loss {:.5} -> {:.5} (min {:.5}), mean waste {:.4}",
            last.step, first.loss, last.loss, min, waste
        );
    } else {
        println!("log is empty");
    }
    println!("wrote {}", path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_lists() {
        assert_eq!(parse_sizes("1600x960\n# c\n\n800X640").unwrap(), vec![(1600, 960), (800, 640)]);
        assert_eq!(parse_sizes("64x32,32x64").unwrap(), vec![(64, 32), (32, 64)]);
        assert!(parse_sizes("64by32").is_err());
    }
}
