//! Trains one mixture and prints loss and per-size sample metrics.
//!
//! `cargo run --release -p nit-harness --example toy_run -- <mixture> <steps> [tokens_per_step] [lr]`

use std::time::Instant;

use nit_core::blocks::NitConfig;
use nit_core::diffusion::{GuidanceConfig, SamplerConfig};
use nit_core::NitParams32;
use nit_harness::data::{make_epoch, Dataset, DatasetSpec, EpochConfig, Mixture};
use nit_harness::eval::{eval_generalization, EvalConfig};
use nit_harness::train::{evaluate_loss, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mixture = Mixture::parse(args.first().map(String::as_str).unwrap_or("b"))?;
    let steps: u64 = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(200);
    let tokens: usize = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(512);
    let lr: f64 = args.get(3).map(|s| s.parse()).transpose()?.unwrap_or(1e-3);

    let t0 = Instant::now();
    let ds = Dataset::build(DatasetSpec::mixture(mixture, 4, 2000, 0))?;
    println!("dataset built in {:.1}s", t0.elapsed().as_secs_f64());
    let params = NitParams32::new(NitConfig::tiny(12, 1, 4), &mut ChaCha8Rng::seed_from_u64(0))?;
    let cfg = TrainConfig { steps, tokens_per_step: tokens, lr, ..Default::default() };
    let mut trainer = Trainer::new(params, ds, cfg)?;
    let held = make_epoch(&trainer.dataset, &EpochConfig { seed: 1234, class_drop_prob: 0.0, ..trainer.epoch_config() }, 0)?;
    let held = &held[..held.len().min(40)];
    let base = evaluate_loss(&trainer.params, held)?;
    println!("baseline held-out loss {base:.4}");
    let t1 = Instant::now();
    for s in 0..steps {
        let r = trainer.step()?;
        if (s + 1) % 100 == 0 {
            let l = evaluate_loss(&trainer.params, held)?;
            println!("step {} train {:.4} held {:.4} ({:.1}% of base) {:.2}s/step", r.step, r.loss, l, 100.0 * l / base, t1.elapsed().as_secs_f64() / (s + 1) as f64);
        }
    }
    let eval = EvalConfig {
        sizes: vec![(64, 64), (128, 128), (96, 64), (160, 96)],
        per_class: 8,
        sampler: SamplerConfig::new(50, 7)?,
        guidance: GuidanceConfig::new(2.25, 0.0, 0.7)?,
        reference_seed: 99,
    };
    let t2 = Instant::now();
    for r in eval_generalization(&trainer.params, &trainer.dataset.codec, &trainer.dataset.norm, 4, &eval)? {
        println!("{:?}: hue acc {:.3} per class {:?} pixel dist {:.5}", r.size, r.hue_accuracy, r.per_class_accuracy, r.pixel_distance);
    }
    println!("eval {:.1}s", t2.elapsed().as_secs_f64());
    Ok(())
}
