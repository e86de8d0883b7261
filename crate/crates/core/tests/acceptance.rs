//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Set `ACCEPTANCE_ONLY=4,5` to run a subset.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::Rng;
use ultravar::checkpoint::Checkpoint;
use ultravar::config::RunConfig;
use ultravar::downstream::{arm_mean, report_csv, ReportRow};
use ultravar::metrics::{frechet_feature_distance, ms_ssim, ssim, SsimConfig};
use ultravar::nn::{Graph, ParamStore};
use ultravar::pem::Pem;
use ultravar::pipeline::*;
use ultravar::synth::{decode_pgm, encode_pgm, make_dataset, write_dataset, Dataset, Split};
use ultravar::tensor::Tensor;
use ultravar::var::*;
use ultravar::vqvae::{stack, Vqvae, VqvaeConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome { pass, detail: detail.into() }
    }
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed.as_secs_f64() < limit_s as f64
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let reports = common::gradient_suite();
    let elapsed = t.elapsed();
    let bad: Vec<String> = reports
        .iter()
        .filter(|r| r.worst > 1e-3 || r.instances < 10)
        .map(|r| format!("{} ({:.2e})", r.op, r.worst))
        .collect();
    let worst = reports.iter().map(|r| r.worst).fold(0.0, f64::max);
    Outcome::new(
        bad.is_empty() && within(elapsed, 60),
        format!(
            "{} ops x >=10 instances, worst rel err {:.2e}, {:.1}s{}",
            reports.len(),
            worst,
            elapsed.as_secs_f64(),
            if bad.is_empty() { String::new() } else { format!(", failing: {}", bad.join(", ")) }
        ),
    )
}

fn quantizer_oracle() -> Outcome {
    let cfg = VqvaeConfig {
        image_side: 8,
        downsample: 4,
        latent_channels: 2,
        codebook_size: 4,
        hidden: 4,
        schedule: vec![1, 2],
        ..VqvaeConfig::default()
    };
    let v = Vqvae::new(cfg).unwrap();
    let mut s = ParamStore::new();
    v.init(&mut s, &mut common::rng(1));
    let mut r = common::rng(2);
    let (mut token_mismatch, mut worst_telescope) = (0, 0.0f32);
    for _ in 0..100 {
        let cb = common::uniform(&[4, 2], -1.0, 1.0, &mut r);
        s.insert("vqvae.codebook", cb.clone());
        let f = common::uniform(&[1, 2, 2, 2], -1.5, 1.5, &mut r);
        let mut g = Graph::inference(&s);
        let fv = g.tape.leaf(&f).unwrap();
        let q = v.quantize(&mut g, fv).unwrap();
        let (k1, idx2, _) = common::two_scale_oracle(f.data(), cb.data(), 2);
        if q.tokens[0].grids != vec![vec![k1], idx2] {
            token_mismatch += 1;
        }
        let p1 = g.tape.data(q.partials[0]);
        let d2 = g.tape.data(q.inputs[1]);
        for i in 0..8 {
            worst_telescope = worst_telescope.max((f.data()[i] - p1[i] - d2[i]).abs());
        }
    }
    Outcome::new(
        token_mismatch == 0 && worst_telescope <= 1e-6,
        format!("100 instances, {token_mismatch} token mismatches, max |f - f̂_1 - r_2| = {worst_telescope:.1e}"),
    )
}

fn equation_forms() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    // smoothing layer with zero output weights
    let mut s = ParamStore::new();
    let ssl = SslConfig::default();
    ultravar::var::ssl::init(&mut s, &ssl, 16, &mut common::rng(3));
    let x = common::uniform(&[2, 13, 16], -4.0, 4.0, &mut common::rng(4));
    let mut g = Graph::inference(&s);
    let xv = g.tape.leaf(&x).unwrap();
    let y = smooth_scaling_batch(&mut g, &ssl, xv).unwrap();
    let ssl_ok = g.tape.data(y) == x.data();
    ok &= ssl_ok;
    notes.push(format!("ssl identity {}", ssl_ok));
    // modulation block with unit scale and zero shift
    let pem = Pem::new(ultravar::pem::PemConfig::default()).unwrap();
    let mut ps = ParamStore::new();
    pem.init(&mut ps, &mut common::rng(5));
    let c = pem.cfg.channels;
    let dc = pem.cfg.cond_dim;
    ps.insert("pem.gfm.0.scale.w", Tensor::zeros(&[dc, c]));
    ps.insert("pem.gfm.0.scale.b", Tensor::full(&[c], 1.0));
    ps.insert("pem.gfm.0.shift.w", Tensor::zeros(&[dc, c]));
    ps.insert("pem.gfm.0.shift.b", Tensor::zeros(&[c]));
    let mut r = common::rng(6);
    let feat = common::uniform(&[2, c, 6, 6], 0.0, 1.0, &mut r);
    let cond = common::uniform(&[2, dc], -1.0, 1.0, &mut r);
    let mut g = Graph::inference(&ps);
    let fv = g.tape.leaf(&feat).unwrap();
    let cv = g.tape.leaf(&cond).unwrap();
    let out = pem.gfm(&mut g, 0, fv, cv).unwrap();
    let got = g.tape.data(out).to_vec();
    let fx = g.conv("pem.gfm.0.f", fv, 1, 1).unwrap();
    let fxd = g.tape.data(fx).to_vec();
    let gfm_err = got
        .iter()
        .zip(&fxd)
        .map(|(o, f)| (o - 2.0 * f.max(0.0)).abs())
        .fold(0.0f32, f32::max);
    let gfm_ok = gfm_err <= 1e-6;
    ok &= gfm_ok;
    notes.push(format!("gfm 2f(x) err {gfm_err:.1e}"));
    // guidance off
    let cl: Vec<f32> = (0..32).map(|_| r.random_range(-5.0..5.0)).collect();
    let ul: Vec<f32> = (0..32).map(|_| r.random_range(-5.0..5.0)).collect();
    let cfg_ok = (0..=4).all(|i| cfg_combine(&cl, &ul, 0.0, i as f32 / 4.0) == cl);
    ok &= cfg_ok;
    notes.push(format!("cfg g=0 exact {cfg_ok}"));
    // refinement module at initialization
    let imgs = common::uniform(&[3, 1, 32, 32], 0.0, 1.0, &mut r);
    let refined = pem.apply_images(&ps, &imgs).unwrap();
    let pem_ok = refined == imgs;
    ok &= pem_ok;
    notes.push(format!("pem init identity {pem_ok}"));
    Outcome::new(ok, notes.join(", "))
}

fn stage1_desk_run() -> Outcome {
    let t = Instant::now();
    let mut cfg = RunConfig::default();
    cfg.stage1.epochs = 250; // 8 images, batch 4: 500 steps
    let ds = make_dataset(&cfg.synth, [4, 4], [1, 1]).unwrap();
    let (x, _) = ds.arrays(Split::Train);
    let (store, log) = train_vqvae(&cfg, &x, |_| {}).unwrap();
    let steps = cfg.stage1.epochs * x.len().div_ceil(cfg.stage1.batch_size);
    let vq = Vqvae::new(cfg.vqvae.clone()).unwrap();
    let pem = Pem::new(cfg.pem.clone()).unwrap();
    let mse = reconstruction_mse(&vq, Some(&pem), &store, &x).unwrap();
    let elapsed = t.elapsed();
    Outcome::new(
        mse < 0.01 && steps <= 500 && within(elapsed, 600),
        format!(
            "{steps} steps, reconstruction MSE {mse:.5} (last train l_recon {:.5}), {:.0}s",
            log.last().unwrap().l_recon,
            elapsed.as_secs_f64()
        ),
    )
}

/// Argmax of the conditional model: no guidance, near-zero temperature.
fn greedy(cfg: &RunConfig) -> GenArm {
    GenArm {
        sampler: SamplerConfig { temperature: 1e-3, top_p: 1e-6, cfg_scale: 0.0, ..cfg.sampler.clone() },
        ..GenArm::from_config(cfg)
    }
}

fn stage2_desk_run() -> Outcome {
    let t = Instant::now();
    let mut cfg = RunConfig::default();
    cfg.stage1.epochs = 60;
    cfg.stage2.epochs = 300;
    let ds = make_dataset(&cfg.synth, [2, 2], [1, 1]).unwrap();
    let (x, y) = ds.arrays(Split::Train);
    let (s1, _) = train_vqvae(&cfg, &x, |_| {}).unwrap();
    let (store, _) = train_var(&cfg, &s1, &x, &y, |_| {}).unwrap();
    let l_var = evaluate_var_loss(&cfg, &store, &x, &y).unwrap();
    let model = UltraVar::new(cfg.clone(), store).unwrap();
    let refs: Vec<&Tensor> = x.iter().collect();
    let pyramids = model.vqvae.tokenize(&model.store, &stack(&refs).unwrap()).unwrap();
    let arm = greedy(&cfg);
    let mut reproduced = 0;
    for (tokens, &label) in pyramids.iter().zip(&y) {
        let opts = GenerateOptions {
            forced: vec![tokens.grids[0].clone()],
            use_ssl: arm.use_ssl,
            use_pem: arm.use_pem,
            ..GenerateOptions::new(label, arm.sampler.clone())
        };
        let g = generate(&model.vqvae, &model.var, Some(&model.pem), &model.store, &opts).unwrap();
        reproduced += usize::from(&g.tokens == tokens);
    }
    let mut free_hits = 0;
    for class_id in 0..2 {
        let g = model.generate(class_id, 0, &arm).unwrap();
        free_hits += usize::from(pyramids.iter().zip(&y).any(|(p, &l)| l == class_id && *p == g.tokens));
    }
    let elapsed = t.elapsed();
    Outcome::new(
        l_var < 0.1 && reproduced == 4 && free_hits == 2 && within(elapsed, 900),
        format!(
            "L_VAR {l_var:.4}, {reproduced}/4 pyramids reproduced from their first-scale token, \
             {free_hits}/2 unforced class samples equal a training pyramid, {:.0}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn sampling_statistics() -> Outcome {
    let logits = [0.7f32.ln(), 0.3f32.ln()];
    let zeros = (0..10_000u64)
        .filter(|&i| sample(&logits, 1.0, 1.0, &mut sample_rng(2024, i)) == 0)
        .count();
    let freq = zeros as f64 / 10_000.0;
    let probs = [0.5f32, 0.3, 0.15, 0.05];
    let l4: Vec<f32> = probs.iter().map(|p| p.ln()).collect();
    let mut counts = [0usize; 4];
    for i in 0..10_000u64 {
        counts[sample(&l4, 1.0, 1.0, &mut sample_rng(7, i))] += 1;
    }
    let worst4 = counts
        .iter()
        .zip(&probs)
        .map(|(&c, &p)| (c as f64 / 10_000.0 - p as f64).abs())
        .fold(0.0, f64::max);
    let mut r = common::rng(8);
    let mut argmax_ok = true;
    for _ in 0..200 {
        let l: Vec<f32> = (0..64).map(|_| r.random_range(-4.0..4.0)).collect();
        let arg = (0..64).max_by(|&a, &b| l[a].total_cmp(&l[b])).unwrap();
        for temp in [1e-3f32, 0.3, 1.0, 2.0, 100.0] {
            argmax_ok &= sample(&l, temp, 1e-9, &mut r) == arg;
        }
    }
    Outcome::new(
        (freq - 0.7).abs() <= 0.02 && worst4 <= 0.02 && argmax_ok,
        format!("P(0)={freq:.4} (target 0.7), 4-way max dev {worst4:.4}, argmax invariance {argmax_ok}"),
    )
}

fn metric_identities() -> Outcome {
    let cfg = SsimConfig::default();
    let mut r = common::rng(9);
    let mut worst_self = 0.0f64;
    for _ in 0..5 {
        let x = common::uniform(&[1, 32, 32], 0.0, 1.0, &mut r);
        worst_self = worst_self
            .max((ssim(&x, &x, &cfg).unwrap() - 1.0).abs())
            .max((ms_ssim(&x, &x, &cfg, None).unwrap() - 1.0).abs());
    }
    let constant = ssim(&Tensor::full(&[1, 32, 32], 0.5), &Tensor::full(&[1, 32, 32], 0.25), &cfg).unwrap();
    let feats = common::uniform(&[64, 4], -1.0, 1.0, &mut r);
    let same = frechet_feature_distance(&feats, &feats).unwrap();
    let n = 100_000;
    let mut normal = |mu: f64| {
        let d: Vec<f32> = (0..n)
            .map(|_| {
                let (u1, u2): (f64, f64) = (r.random_range(1e-12..1.0), r.random());
                (mu + (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
            })
            .collect();
        Tensor::new(vec![n, 1], d).unwrap()
    };
    let a = normal(0.0);
    let b = normal(1.0);
    let shifted = frechet_feature_distance(&a, &b).unwrap();
    Outcome::new(
        worst_self <= 1e-9 && (constant - 0.8003).abs() <= 1e-3 && same <= 1e-6 && (shifted - 1.0).abs() <= 0.05,
        format!(
            "self-similarity dev {worst_self:.1e}, constant SSIM {constant:.4}, Fréchet same {same:.1e}, \
             N(0,1) vs N(1,1) {shifted:.4}"
        ),
    )
}

/// Benchmark configuration for the augmentation and ablation criteria.
///
/// The activation amplitude is lowered from the dataset default so that the
/// unaugmented classifier is far from saturation, which is the regime the
/// augmentation claim concerns.
fn benchmark_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.synth.activation_amplitude = 0.6;
    cfg.stage1.epochs = 15;
    cfg.stage2.epochs = 30;
    cfg
}

struct Benchmark {
    rows: Vec<ReportRow>,
    elapsed: Duration,
}

fn run_benchmark() -> Benchmark {
    let t = Instant::now();
    let cfg = benchmark_config();
    let ds = make_dataset(&cfg.synth, cfg.dataset.train, cfg.dataset.test).unwrap();
    let (x, y) = ds.arrays(Split::Train);
    let (s1, _) = train_vqvae(&cfg, &x, |_| {}).unwrap();
    let (store, _) = train_var(&cfg, &s1, &x, &y, |_| {}).unwrap();
    let model = UltraVar::new(cfg.clone(), store).unwrap();
    let rows = ablation_sweep(&model, &ds, &GenArm::table(&cfg)).unwrap();
    Benchmark { rows, elapsed: t.elapsed() }
}

fn per_seed(rows: &[ReportRow], arm: &str) -> String {
    rows.iter()
        .filter(|r| r.arm == arm)
        .map(|r| format!("s{}:R={:.3}/F1={:.3}", r.seed, r.report.recall, r.report.f1))
        .collect::<Vec<_>>()
        .join(" ")
}

fn augmentation_claim(b: &Benchmark) -> Outcome {
    let recall = |arm| arm_mean(&b.rows, arm, |r| r.recall).unwrap();
    let f1 = |arm| arm_mean(&b.rows, arm, |r| r.f1).unwrap();
    let (dr, df) = (recall("full") - recall(ORIGINAL_ARM), f1("full") - f1(ORIGINAL_ARM));
    Outcome::new(
        dr > 0.0 && df > 0.0 && within(b.elapsed, 1800),
        format!(
            "mean recall {:.3} -> {:.3} (delta {dr:+.3}), mean F1 {:.3} -> {:.3} (delta {df:+.3}); \
             original [{}]; augmented [{}]; {:.0}s",
            recall(ORIGINAL_ARM),
            recall("full"),
            f1(ORIGINAL_ARM),
            f1("full"),
            per_seed(&b.rows, ORIGINAL_ARM),
            per_seed(&b.rows, "full"),
            b.elapsed.as_secs_f64()
        ),
    )
}

fn ablation_direction(b: &Benchmark) -> Outcome {
    let f1 = |arm| arm_mean(&b.rows, arm, |r| r.f1).unwrap();
    Outcome::new(
        f1("full") >= f1("wo_scl"),
        format!(
            "mean F1 full {:.3}, w/o SCL {:.3}, w/o PEM {:.3}, original {:.3}",
            f1("full"),
            f1("wo_scl"),
            f1("wo_pem"),
            f1(ORIGINAL_ARM)
        ),
    )
}

fn tree_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism_and_formats() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    let mut cfg = RunConfig::default();
    let ds = make_dataset(&cfg.synth, [141, 75], [39, 15]).unwrap();
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_dataset(&ds, d1.path()).unwrap();
    write_dataset(&make_dataset(&cfg.synth, [141, 75], [39, 15]).unwrap(), d2.path()).unwrap();
    let same_data = tree_bytes(d1.path()) == tree_bytes(d2.path());
    ok &= same_data;
    notes.push(format!("dataset trees identical {same_data}"));

    cfg.stage1.epochs = 2;
    cfg.stage2.epochs = 2;
    let small: Dataset = make_dataset(&cfg.synth, [2, 2], [1, 1]).unwrap();
    let (x, y) = small.arrays(Split::Train);
    let ckpt = || {
        let (s1, _) = train_vqvae(&cfg, &x, |_| {}).unwrap();
        let (s2, _) = train_var(&cfg, &s1, &x, &y, |_| {}).unwrap();
        UltraVar::new(cfg.clone(), s2).unwrap().checkpoint().to_bytes()
    };
    let (c1, c2) = (ckpt(), ckpt());
    let same_ckpt = c1 == c2;
    ok &= same_ckpt;
    notes.push(format!("checkpoints identical {same_ckpt} ({} bytes)", c1.len()));

    let model = UltraVar::from_checkpoint(&Checkpoint::from_bytes(&c1).unwrap()).unwrap();
    let arm = GenArm::from_config(&cfg);
    let gen = |i| encode_pgm(&model.generate(1, i, &arm).unwrap().image).unwrap();
    let same_gen = (0..3).all(|i| gen(i) == gen(i));
    ok &= same_gen;
    notes.push(format!("generated images identical {same_gen}"));

    let mut r = common::rng(10);
    let mut detected = 0;
    for _ in 0..256 {
        let mut b = c1.clone();
        let bit = r.random_range(0..b.len() * 8);
        b[bit / 8] ^= 1 << (bit % 8);
        detected += usize::from(Checkpoint::from_bytes(&b).is_err());
    }
    ok &= detected == 256;
    notes.push(format!("{detected}/256 random bit flips detected"));

    let mut worst = 0.0f32;
    for _ in 0..20 {
        let img = common::uniform(&[1, 32, 32], 0.0, 1.0, &mut r);
        let back = decode_pgm(&encode_pgm(&img).unwrap(), std::path::Path::new("mem")).unwrap();
        worst = worst.max(img.max_abs_diff(&back));
    }
    let pgm_ok = worst <= 1.0 / 510.0 + 1e-7;
    ok &= pgm_ok;
    notes.push(format!("PGM round-trip max err {worst:.5} (bound {:.5})", 1.0 / 510.0));
    Outcome::new(ok, notes.join(", "))
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut bench: Option<Benchmark> = None;
    let mut failures = 0;
    for n in 1..=10 {
        if !wanted(n) {
            continue;
        }
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| match n {
            1 => gradient_suite(),
            2 => quantizer_oracle(),
            3 => equation_forms(),
            4 => stage1_desk_run(),
            5 => stage2_desk_run(),
            6 => sampling_statistics(),
            7 => metric_identities(),
            8 | 9 => {
                let b = bench.get_or_insert_with(run_benchmark);
                if n == 8 {
                    println!("{}", report_csv(&b.rows).trim_end());
                    augmentation_claim(b)
                } else {
                    ablation_direction(b)
                }
            }
            _ => determinism_and_formats(),
        }));
        let outcome = result.unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        if !outcome.pass {
            failures += 1;
        }
        println!(
            "criterion {n:>2}: {} ({:.1}s) {}",
            if outcome.pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            outcome.detail
        );
    }
    if failures > 0 {
        eprintln!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
