//! Self-check suites run by `nit verify`: oracle comparisons and invariants
//! of every core component, on freshly drawn random inputs.

use std::fmt::Write as _;

use ndarray::{s, Array2};
use nit_core::attention::{packed_varlen_attention, qk_normalize, reference_attention, AttentionConfig};
use nit_core::blocks::{nit_block_forward, NitConfig, NitParams};
use nit_core::diffusion::{add_noise, velocity_target};
use nit_core::gradcheck::{check_model_gradients, GradCheckConfig};
use nit_core::packing::{build_cu_seqlens, pad_to_budget_waste, packing_efficiency, plan_packing, PackedBatch, PackedLayout};
use nit_core::rope::{angle_grid_from, base_frequencies, rope_for_packed, RopeConfig, RopeTable};
use nit_core::{NitError, Result, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const SUITES: [&str; 7] = ["packing", "attention", "isolation", "rope", "adaln", "gradcheck", "flow"];

/// Deliberate defects used to prove the suites can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Negates the logit scale inside the streaming attention kernel.
    AttentionSign,
}

impl Fault {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "attention-sign" => Ok(Self::AttentionSign),
            other => Err(NitError::Config(format!("unknown fault {other:?} (known: attention-sign)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub metric: &'static str,
    pub value: f64,
    pub tolerance: f64,
    pub checks: usize,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerifyOptions {
    pub seed: u64,
    pub fault: Option<Fault>,
}

/// Resolves a comma-separated scope (`all` or suite names).
pub fn parse_scope(scope: &str) -> Result<Vec<&'static str>> {
    let mut out = Vec::new();
    for part in scope.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if part == "all" {
            out.extend(SUITES);
            continue;
        }
        let name = SUITES
            .iter()
            .find(|s| **s == part)
            .ok_or_else(|| NitError::Config(format!("unknown suite {part:?} (known: all, {})", SUITES.join(", "))))?;
        out.push(*name);
    }
    out.dedup();
    if out.is_empty() {
        return Err(NitError::Config("empty verify scope".into()));
    }
    Ok(out)
}

pub fn run_suites(names: &[&'static str], opts: &VerifyOptions) -> Result<Vec<SuiteResult>> {
    names
        .iter()
        .map(|&name| {
            let seed = opts.seed ^ (name.len() as u64).wrapping_mul(0x9E37_79B9);
            match name {
                "packing" => packing_suite(seed),
                "attention" => attention_suite(seed, opts.fault),
                "isolation" => isolation_suite(seed, opts.fault),
                "rope" => rope_suite(seed),
                "adaln" => adaln_suite(seed),
                "gradcheck" => gradcheck_suite(seed),
                "flow" => flow_suite(seed),
                _ => unreachable!("scope already validated"),
            }
        })
        .collect()
}

fn normal_matrix<T: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<T> {
    Array2::from_shape_fn((rows, cols), |_| T::of(StandardNormal.sample(rng)))
}

fn packing_suite(seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    let workloads = 200;
    for w in 0..workloads {
        let budget = rng.random_range(64..=2048);
        let n = rng.random_range(1..=40);
        let counts: Vec<usize> = (0..n).map(|_| rng.random_range(1..=budget)).collect();
        let plan = plan_packing(&counts, budget)?;
        let mut seen: Vec<usize> = plan.packs.iter().flatten().copied().collect();
        seen.sort_unstable();
        if seen != (0..n).collect::<Vec<_>>() {
            failures.push(format!("workload {w}: not a partition"));
        }
        if plan.pack_tokens(&counts).iter().any(|&t| t > budget) {
            failures.push(format!("workload {w}: over budget"));
        }
        if plan_packing(&counts, budget)? != plan {
            failures.push(format!("workload {w}: nondeterministic"));
        }
        if packing_efficiency(&plan, &counts) > pad_to_budget_waste(&counts, budget) + 1e-12 {
            failures.push(format!("workload {w}: worse than padding each instance"));
        }
    }
    let example = [1500, 1500, 500];
    let waste = packing_efficiency(&plan_packing(&example, 2048)?, &example);
    if (waste - 0.1455).abs() > 1e-4 {
        failures.push(format!("three-size example waste {waste:.4}"));
    }
    Ok(SuiteResult {
        name: "packing",
        passed: failures.is_empty(),
        metric: "example_waste",
        value: waste,
        tolerance: 1e-4,
        checks: workloads + 1,
        detail: failures.first().cloned().unwrap_or_else(|| format!("{workloads} workloads")),
    })
}

fn random_pack(rng: &mut ChaCha8Rng, max_instances: usize, max_len: usize) -> Vec<usize> {
    let n = rng.random_range(1..=max_instances);
    (0..n).map(|_| rng.random_range(1..=max_len)).collect()
}

/// Random square-ish grids with the requested token counts rounded to `gh·gw`.
fn grids_for(lengths: &[usize]) -> Vec<(usize, usize)> {
    lengths
        .iter()
        .map(|&n| {
            let gh = (1..=n).rev().find(|d| n % d == 0 && d * d <= n).unwrap_or(1);
            (gh, n / gh)
        })
        .collect()
}

fn attention_suite(seed: u64, fault: Option<Fault>) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trials = 40;
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let heads = rng.random_range(1..=4);
        let hd = 4 * rng.random_range(1..=16 / heads.max(1)).max(1);
        let d = heads * hd;
        let lengths = random_pack(&mut rng, 8, 256);
        let layout = PackedLayout::from_grids(grids_for(&lengths))?;
        let cu = layout.cu_seqlens().to_vec();
        let n = layout.total_tokens();
        let mut cfg = AttentionConfig::new(d, heads)?
            .with_qk_norm(rng.random())
            .with_tile(rng.random_range(1..=96));
        cfg.inject_sign_flip = fault == Some(Fault::AttentionSign);
        let mut q = normal_matrix::<f32>(n, d, &mut rng);
        let mut k = normal_matrix::<f32>(n, d, &mut rng);
        let v = normal_matrix::<f32>(n, d, &mut rng);
        qk_normalize(&mut q, heads, cfg.qk_norm);
        qk_normalize(&mut k, heads, cfg.qk_norm);
        let rope: RopeTable<f32> = rope_for_packed(&layout, &RopeConfig::new(hd, 10_000.0)?)?;
        rope.rotate(q.view_mut());
        rope.rotate(k.view_mut());
        let packed = packed_varlen_attention(q.view(), k.view(), v.view(), &cu, &cfg)?;
        let reference = reference_attention(q.view(), k.view(), v.view(), &cu, &cfg)?;
        let dev = (&packed - &reference).iter().fold(0.0f64, |m, x| m.max(x.abs() as f64));
        worst = worst.max(dev);
    }
    let tol = 1e-5;
    Ok(SuiteResult {
        name: "attention",
        passed: worst <= tol,
        metric: "max_abs_deviation",
        value: worst,
        tolerance: tol,
        checks: trials,
        detail: format!("{trials} random packs against the dense masked reference"),
    })
}

fn isolation_suite(seed: u64, fault: Option<Fault>) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trials = 20;
    let mut worst_packed = 0.0f64;
    let mut worst_ref = 0.0f64;
    for _ in 0..trials {
        let lengths = random_pack(&mut rng, 6, 64);
        if lengths.len() < 2 {
            continue;
        }
        let cu = build_cu_seqlens(&lengths)?;
        let n = *cu.last().unwrap() as usize;
        let mut cfg = AttentionConfig::new(16, 2)?.with_tile(rng.random_range(1..=32));
        cfg.inject_sign_flip = fault == Some(Fault::AttentionSign);
        let q = normal_matrix::<f32>(n, 16, &mut rng);
        let k = normal_matrix::<f32>(n, 16, &mut rng);
        let v = normal_matrix::<f32>(n, 16, &mut rng);
        let victim = rng.random_range(0..lengths.len());
        let r = cu[victim] as usize..cu[victim + 1] as usize;
        let (mut q2, mut k2, mut v2) = (q.clone(), k.clone(), v.clone());
        for m in [&mut q2, &mut k2, &mut v2] {
            m.slice_mut(s![r.clone(), ..]).mapv_inplace(|x| x * 3.0 + 1.0);
        }
        let others = |a: &Array2<f32>, b: &Array2<f32>| {
            let mut m = 0.0f64;
            for (row, (x, y)) in a.outer_iter().zip(b.outer_iter()).enumerate() {
                if !r.contains(&row) {
                    m = m.max((&x - &y).iter().fold(0.0f64, |acc, d| acc.max(d.abs() as f64)));
                }
            }
            m
        };
        let p1 = packed_varlen_attention(q.view(), k.view(), v.view(), &cu, &cfg)?;
        let p2 = packed_varlen_attention(q2.view(), k2.view(), v2.view(), &cu, &cfg)?;
        let r1 = reference_attention(q.view(), k.view(), v.view(), &cu, &cfg)?;
        let r2 = reference_attention(q2.view(), k2.view(), v2.view(), &cu, &cfg)?;
        worst_packed = worst_packed.max(others(&p1, &p2));
        worst_ref = worst_ref.max(others(&r1, &r2));
    }
    let tol = 1e-6;
    Ok(SuiteResult {
        name: "isolation",
        passed: worst_ref == 0.0 && worst_packed <= tol,
        metric: "max_cross_instance_change",
        value: worst_packed.max(worst_ref),
        tolerance: tol,
        checks: trials,
        detail: format!("reference change {worst_ref:e}, packed change {worst_packed:e}"),
    })
}

fn rope_suite(seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trials = 30;
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let hd = 4 * rng.random_range(1..=16);
        let cfg = RopeConfig::new(hd, 10_000.0)?;
        let omega = base_frequencies(&cfg);
        let (gh, gw) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let origin = (rng.random_range(0..=64) as f64, rng.random_range(0..=64) as f64);
        let n = gh * gw;
        let q = normal_matrix::<f32>(n, hd, &mut rng);
        let k = normal_matrix::<f32>(n, hd, &mut rng);
        let logits = |o: (f64, f64)| {
            let table = RopeTable::<f32>::from_angles(&angle_grid_from(gh, gw, o, &omega));
            let (mut qr, mut kr) = (q.clone(), k.clone());
            table.rotate(qr.view_mut());
            table.rotate(kr.view_mut());
            // the logits attention actually exponentiates
            qr.dot(&kr.t()) * (hd as f32).powf(-0.5)
        };
        let a = logits((0.0, 0.0));
        let b = logits(origin);
        worst = worst.max((&a - &b).iter().fold(0.0f64, |m, x| m.max(x.abs() as f64)));
    }
    let tol = 1e-5;
    Ok(SuiteResult {
        name: "rope",
        passed: worst <= tol,
        metric: "max_logit_change",
        value: worst,
        tolerance: tol,
        checks: trials,
        detail: "grid translations up to (64, 64)".into(),
    })
}

fn random_batch<T: Scalar>(rng: &mut ChaCha8Rng, cfg: &NitConfig, max_instances: usize, max_side: usize) -> Result<PackedBatch<T>> {
    let n = rng.random_range(1..=max_instances);
    let grids: Vec<(usize, usize)> = (0..n)
        .map(|_| (rng.random_range(1..=max_side), rng.random_range(1..=max_side)))
        .collect();
    let layout = PackedLayout::from_grids(grids)?;
    let tokens = normal_matrix::<T>(layout.total_tokens(), cfg.token_dim(), rng);
    let labels = (0..n)
        .map(|_| rng.random_bool(0.8).then(|| rng.random_range(0..cfg.num_classes as u32)))
        .collect();
    let times = (0..n).map(|_| T::of(rng.random::<f64>())).collect();
    PackedBatch::new(tokens, layout, labels, times)
}

fn adaln_suite(seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = NitConfig::tiny(12, 1, 4);
    let params = NitParams::<f32>::new(cfg.clone(), &mut rng)?;
    let attn = cfg.attention()?;
    let rope_cfg = cfg.rope()?;
    let trials = 20;
    let mut out_max = 0.0f64;
    let mut block_max = 0.0f64;
    for _ in 0..trials {
        let batch = random_batch::<f32>(&mut rng, &cfg, 5, 8)?;
        let pred = params.forward(&batch)?;
        out_max = out_max.max(pred.iter().fold(0.0f64, |m, x| m.max(x.abs() as f64)));
        let cond = params.conditions(&batch.times, &batch.labels)?;
        let rope = rope_for_packed(&batch.layout, &rope_cfg)?;
        let z = normal_matrix::<f32>(batch.layout.total_tokens(), cfg.hidden_dim, &mut rng);
        for block in &params.blocks {
            let y = nit_block_forward(z.view(), &cond, &batch.layout, &rope, block, &attn)?;
            block_max = block_max.max((&y - &z).iter().fold(0.0f64, |m, x| m.max(x.abs() as f64)));
        }
    }
    let tol = 1e-6;
    Ok(SuiteResult {
        name: "adaln",
        passed: out_max == 0.0 && block_max <= tol,
        metric: "max_block_deviation",
        value: block_max,
        tolerance: tol,
        checks: trials,
        detail: format!("max |velocity| at init {out_max:e}"),
    })
}

fn gradcheck_suite(seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = NitConfig::gradcheck(4, 1, 3);
    cfg.qk_norm = true;
    cfg.attn_tile = 4;
    let mut params = NitParams::<f64>::new(cfg.clone(), &mut rng)?;
    // leave the zero-initialized regime so every path carries gradient
    params.randomize(0.3, &mut rng);
    let batch = random_batch::<f64>(&mut rng, &cfg, 3, 3)?;
    let target = normal_matrix::<f64>(batch.tokens.nrows(), cfg.token_dim(), &mut rng);
    let gc = GradCheckConfig { seed, ..Default::default() };
    let report = check_model_gradients(&params, &batch, &target, &gc)?;
    let detail = match report.worst() {
        Some(w) => format!("worst {}{:?}: analytic {:e} numeric {:e}", w.tensor, w.index, w.analytic, w.numeric),
        None => "no coordinates".into(),
    };
    Ok(SuiteResult {
        name: "gradcheck",
        passed: report.passed(),
        metric: "max_rel_error",
        value: report.max_rel_err(),
        tolerance: gc.rel_tol,
        checks: report.entries.len(),
        detail,
    })
}

fn flow_suite(seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trials = 50;
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (r, c) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let x = normal_matrix::<f64>(r, c, &mut rng);
        let e = normal_matrix::<f64>(r, c, &mut rng);
        let max_diff = |a: &Array2<f64>, b: &Array2<f64>| (a - b).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        worst = worst.max(max_diff(&add_noise(x.view(), e.view(), 0.0)?, &x));
        worst = worst.max(max_diff(&add_noise(x.view(), e.view(), 1.0)?, &e));
        let t: f64 = rng.random();
        let u: f64 = rng.random();
        let lhs = add_noise(x.view(), e.view(), t)? - add_noise(x.view(), e.view(), u)?;
        let rhs = velocity_target(x.view(), e.view())? * (t - u);
        // rounding scales with the operand magnitudes
        let mag = 1.0 + x.iter().chain(e.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
        worst = worst.max(max_diff(&lhs, &rhs) / mag);
    }
    let tol = 1e-12;
    Ok(SuiteResult {
        name: "flow",
        passed: worst <= tol,
        metric: "max_identity_error",
        value: worst,
        tolerance: tol,
        checks: trials,
        detail: "boundaries exact, path consistency relative to operand size, 64-bit".into(),
    })
}

pub fn render_csv(results: &[SuiteResult]) -> String {
    let mut out = String::from("suite,passed,metric,value,tolerance,checks,detail\n");
    for r in results {
        let detail = r.detail.replace('"', "'");
        let _ = writeln!(out, "{},{},{},{:e},{:e},{},\"{}\"", r.name, r.passed, r.metric, r.value, r.tolerance, r.checks, detail);
    }
    out
}

pub fn render_text(results: &[SuiteResult]) -> String {
    let mut out = String::new();
    for r in results {
        let _ = writeln!(
            out,
            "{:<4} {:<10} {} = {:.3e} (tolerance {:.1e}, {} checks) {}",
            if r.passed { "ok" } else { "FAIL" },
            r.name,
            r.metric,
            r.value,
            r.tolerance,
            r.checks,
            r.detail
        );
    }
    out
}
