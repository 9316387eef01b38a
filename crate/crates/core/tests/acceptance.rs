//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.
//!
//! `cargo test --test acceptance -- 3 7` runs only criteria 3 and 7.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use antiref::augment::{apply_augment, diff_jpeg, AugmentOp, AugmentSpec};
use antiref::backend::{add_noise, make_toy_backend, DiffusionSchedule, NoisePredictor, ToyDenoiser};
use antiref::conditioner::{ConditionerRegistry, ConditionerSpec};
use antiref::encoder::{
    ane_forward, ane_init, encoder_protect, load_checkpoint, save_checkpoint, train_ane, AneEncoder, EncoderConfig, PhaseSchedule, TrainEvent,
    TrainOptions,
};
use antiref::eval::{psnr, robustness_suite, ssim, transfer_harness, AdvProbe, Transform};
use antiref::graph::{Graph, Tensor};
use antiref::io::write_png;
use antiref::loss::Objective;
use antiref::pgd::{pgd_protect, pgd_protect_observed, PgdOptions};
use antiref::{ImageTensor, LossWeights, NoiseBudget};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

// glibc trims and re-faults the heap after every step's graph is dropped
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const RADIUS: f64 = 13.0 / 255.0;
const BALL_SLACK: f64 = 1e-6;

/// Pilot run of criterion 11 (seed 11, 32x32 pattern image, toy:1 width 8,
/// unconditional objective, 300 steps, default augmentation, probe of 32 draws under seed 1100).
/// Recorded adv(jpeg75(protected)) - adv(clean); adv(clean) was 1.126640 and
/// adv(protected) 1.127521.
const PILOT_JPEG75_MARGIN: f64 = 8.514e-4;
/// Required fraction of the pilot margin.
const MARGIN_FRACTION: f64 = 0.5;

type Outcome = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Outcome);

/// PGD outputs of criterion 1, reused by criterion 2.
static BALL_OUTPUTS: Mutex<Vec<(ImageTensor, ImageTensor)>> = Mutex::new(Vec::new());

fn toy(seed: u64, width: usize) -> Arc<dyn NoisePredictor> {
    Arc::new(make_toy_backend(seed, width).unwrap())
}

fn conditioners(n: usize) -> Vec<ConditionerSpec> {
    ConditionerRegistry::with_defaults().specs()[..n].to_vec()
}

fn objective(backend: Arc<dyn NoisePredictor>, n_cond: usize, weights: LossWeights) -> Objective {
    Objective::new(vec![backend], conditioners(n_cond), weights, DiffusionSchedule::default()).unwrap()
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn ball_invariant() -> Outcome {
    let obj = objective(toy(1, 4), 0, LossWeights::new(3.0, vec![], 0.0).unwrap());
    let budget = NoiseBudget::new(RADIUS, 1e-3, 300).unwrap();
    let opts = PgdOptions { eval_every: 0, ..PgdOptions::default() };
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut violations = 0usize;
    let mut steps = 0usize;
    let mut outputs = Vec::new();
    for i in 0..50u64 {
        let img = ImageTensor::random(64, 64, 1000 + i);
        let record = pgd_protect_observed(&img, &obj, budget, opts.clone(), i, |s| {
            steps += 1;
            let d = s.image.linf_distance(&img).unwrap();
            worst = worst.max(d);
            if d > RADIUS + BALL_SLACK || s.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                violations += 1;
            }
        })
        .map_err(|e| format!("image {i}: {e}"))?;
        outputs.push((img, record.protected));
    }
    let elapsed = start.elapsed();
    *BALL_OUTPUTS.lock().unwrap() = outputs;
    check(
        violations == 0 && steps == 50 * 300 && elapsed < Duration::from_secs(120),
        format!(
            "{steps} steps checked, {violations} violations, max linf {worst:.9} <= {:.9}, {:.1}s < 120s",
            RADIUS + BALL_SLACK,
            elapsed.as_secs_f64()
        ),
    )
}

fn invisibility_bound() -> Outcome {
    let bound = 20.0 * (255.0f64 / 13.0).log10();
    let outputs = BALL_OUTPUTS.lock().unwrap();
    if outputs.is_empty() {
        return Err("no PGD outputs from criterion 1".into());
    }
    let mut min_psnr = f64::INFINITY;
    let mut min_ssim = f64::INFINITY;
    for (orig, prot) in outputs.iter() {
        min_psnr = min_psnr.min(psnr(orig, prot).unwrap());
        min_ssim = min_ssim.min(ssim(orig, prot).unwrap());
    }
    check(min_psnr >= bound, format!("{} outputs, min PSNR {min_psnr:.4} dB >= {bound:.4} dB (min SSIM {min_ssim:.4})", outputs.len()))
}

fn objective_ascent() -> Outcome {
    let obj = objective(toy(3, 8), 1, LossWeights::new(3.0, vec![5.0], 0.0).unwrap());
    let budget = NoiseBudget::new(RADIUS, 1e-3, 300).unwrap();
    // EOT off: the frozen evaluation sees un-augmented images
    let opts = PgdOptions { eval_every: 25, augment: AugmentSpec::identity(), ..PgdOptions::default() };
    let start = Instant::now();
    let record = pgd_protect(&ImageTensor::pattern(32, 32, 3), &obj, budget, opts, 3).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let j: Vec<f64> = record.eval_trace.iter().map(|&(_, v)| v).collect();
    if j.len() != 13 {
        return Err(format!("expected 13 checkpoints, got {}", j.len()));
    }
    let intervals = j.len() - 1;
    let rising = j.windows(2).filter(|w| w[1] >= w[0]).count();
    let needed = (0.9 * intervals as f64).ceil() as usize;
    check(
        j[intervals] > j[0] && rising >= needed && elapsed < Duration::from_secs(60),
        format!(
            "J_eval {:.6} -> {:.6}, {rising}/{intervals} intervals non-decreasing (need {needed}), {:.1}s < 60s",
            j[0],
            j[intervals],
            elapsed.as_secs_f64()
        ),
    )
}

fn gradient_fidelity() -> Outcome {
    let obj = objective(toy(4, 8), 1, LossWeights::new(1.0, vec![1.0], 1.0).unwrap());
    let clean = ImageTensor::pattern(8, 8, 4);
    // off the clean image so the regularizer has a gradient
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let shifted: Vec<f64> = clean.data().iter().map(|v| (v + rng.random_range(-0.04..0.04)).clamp(0.0, 1.0)).collect();
    let image = ImageTensor::new(8, 8, shifted).unwrap();
    let draws = obj.sample_draws(&mut rng, image.len());
    let (_, grad) = obj.value_and_grad(&image, &clean, &draws).map_err(|e| e.to_string())?;
    let h = 1e-5;
    let f = |data: Vec<f64>| obj.evaluate(&ImageTensor::new(8, 8, data).unwrap(), &clean, &draws).unwrap().total;
    let fd: Vec<f64> = (0..image.len())
        .map(|i| {
            let mut up = image.data().to_vec();
            up[i] += h;
            let mut down = image.data().to_vec();
            down[i] -= h;
            (f(up) - f(down)) / (2.0 * h)
        })
        .collect();
    let diff: f64 = grad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
    let rel = diff / norm;
    check(rel < 1e-3 && norm > 0.0, format!("relative L2 error {rel:.3e} < 1e-3 over {} entries (|grad| {norm:.3e})", fd.len()))
}

fn forward_process() -> Outcome {
    let x0 = [0.2, -0.7, 0.9];
    let eps = [1.3, -0.4, 0.05];
    let one = DiffusionSchedule::from_alpha_bar(vec![1.0]).unwrap();
    let near_zero = DiffusionSchedule::from_alpha_bar(vec![1e-300]).unwrap();
    let at_one = add_noise(&x0, &eps, 0, &one).unwrap();
    let at_zero = add_noise(&x0, &eps, 0, &near_zero).unwrap();
    let limits_exact = at_one == x0 && at_zero == eps;

    let a = 0.3;
    let schedule = DiffusionSchedule::from_alpha_bar(vec![a]).unwrap();
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut sums = [0.0; 3];
    for _ in 0..n {
        let e: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
        let xt = add_noise(&x0, &e, 0, &schedule).unwrap();
        sums.iter_mut().zip(&xt).for_each(|(s, v)| *s += v);
    }
    let se = (1.0 - a).sqrt() / (n as f64).sqrt();
    let worst_z = sums.iter().zip(&x0).map(|(s, x)| ((s / n as f64 - a.sqrt() * x) / se).abs()).fold(0.0, f64::max);
    check(limits_exact && worst_z < 4.0, format!("limits exact: {limits_exact}, mean deviation {worst_z:.2} SE < 4 over {n} draws"))
}

fn metric_oracles() -> Outcome {
    let img = ImageTensor::from_fn(16, 16, |y, x, c| 0.2 + 0.5 * ((y * 16 + x + c) % 7) as f64 / 7.0);
    let offset = |d: f64| ImageTensor::new(16, 16, img.data().iter().map(|v| v + d).collect()).unwrap();
    let p13 = psnr(&img, &offset(RADIUS)).unwrap();
    let p01 = psnr(&img, &offset(0.1)).unwrap();
    let e13 = (p13 - 20.0 * (255.0f64 / 13.0).log10()).abs();
    let e01 = (p01 - 20.0).abs();
    let self_ssim = ssim(&img, &img).unwrap();
    let (c1, c2) = ((0.01f64).powi(2), (0.03f64).powi(2));
    let expected = ((2.0 * 0.5 * 0.6 + c1) * c2) / ((0.25 + 0.36 + c1) * c2);
    let flat = ssim(&ImageTensor::uniform(16, 16, 0.5).unwrap(), &ImageTensor::uniform(16, 16, 0.6).unwrap()).unwrap();
    let e_flat = (flat - expected).abs();
    check(
        e13 < 1e-6 && e01 < 1e-6 && (self_ssim - 1.0).abs() < 1e-9 && e_flat < 1e-6,
        format!("PSNR {p13:.6}/{p01:.6} dB (errors {e13:.1e}, {e01:.1e}), SSIM(I,I) {self_ssim}, flat SSIM {flat:.6} vs {expected:.6}"),
    )
}

fn random_head(mut enc: AneEncoder, seed: u64) -> AneEncoder {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = enc.params().len();
    for t in &mut enc.params_mut()[n - 2..] {
        let data = (0..t.len()).map(|_| rng.random_range(-0.5..0.5)).collect();
        *t = Tensor::new(t.shape.clone(), data);
    }
    enc
}

fn ane_contracts() -> Outcome {
    let tokens = EncoderConfig::default().tokens();
    // full-resolution forward with the narrowest network
    let full = EncoderConfig { layers: 1, hidden: 8, heads: 1, mlp_ratio: 1.0, ..EncoderConfig::default() };
    let enc = random_head(ane_init(&full, 7).unwrap(), 70);
    let big = ane_forward(&enc, &ImageTensor::random(512, 512, 7)).map_err(|e| e.to_string())?;
    let shape_ok = big.shape() == [512, 512, 3];

    let enc = random_head(ane_init(&EncoderConfig::test_scale(64, 2, 32, 4), 7).unwrap(), 71);
    let img = ImageTensor::random(64, 64, 8);
    let before = enc.forward_calls();
    let record = encoder_protect(&enc, &img, Some(RADIUS)).map_err(|e| e.to_string())?;
    let calls = enc.forward_calls() - before;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ane.ckpt");
    save_checkpoint(&enc, &path).map_err(|e| e.to_string())?;
    let loaded = load_checkpoint(&path).map_err(|e| e.to_string())?;
    let a = ane_forward(&enc, &img).unwrap();
    let b = ane_forward(&loaded, &img).unwrap();
    let bit_identical = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()) && a.linf_norm() > 0.0;
    check(
        tokens == 4096 && shape_ok && calls == 1 && record.forward_calls == 1 && bit_identical,
        format!("tokens {tokens}, 512x512 forward shape {:?}, {calls} forward call, checkpoint forward bit-identical: {bit_identical}", big.shape()),
    )
}

fn two_phase_trainer() -> Outcome {
    let dataset: Vec<ImageTensor> = (0..4).map(|i| ImageTensor::pattern(16, 16, 100 + i)).collect();
    let base = make_toy_backend(1, 4).unwrap();
    let pool: Vec<Arc<dyn NoisePredictor>> = vec![Arc::new(base.sibling(1, 1e-2)), Arc::new(base.sibling(2, 1e-2))];
    let obj = objective(Arc::new(base), 4, LossWeights::pgd_default());
    let (interval, band) = (50u64, (0.5, 1.5));
    let phases = PhaseSchedule {
        phase1_steps: 200,
        phase2_steps: 200,
        switch_interval: interval,
        backend_pool: pool.iter().map(|b| b.id().to_string()).collect(),
        weight_perturb_range: band,
    };
    let opts = TrainOptions { batch_size: 1, learning_rate: 3e-3, ..TrainOptions::default() };
    let mut enc = ane_init(&EncoderConfig::test_scale(16, 2, 16, 2), 9).unwrap();
    let log = train_ane(&mut enc, &dataset, &obj, &AugmentSpec::identity(), &phases, &pool, &opts, 11).map_err(|e| e.to_string())?;
    let phase1: Vec<f64> = log.steps.iter().filter(|s| s.phase == 1).map(|s| s.objective).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (first, last) = (mean(&phase1[..20]), mean(&phase1[phase1.len() - 20..]));
    let switches = log.switch_steps();
    let expected: Vec<u64> = (0..4).map(|k| 200 + k * interval).collect();
    let base_w = &obj.weights.w_con;
    let mut refreshes = 0;
    let mut in_band = true;
    for e in &log.events {
        if let TrainEvent::WeightRefresh { w_con, .. } = e {
            refreshes += 1;
            in_band &= w_con.iter().zip(base_w).all(|(w, b)| *w >= band.0 * b && *w <= band.1 * b);
        }
    }
    check(
        phase1.len() == 200 && last > first && switches == expected && refreshes == 4 && in_band,
        format!("mean J first-20 {first:.6} -> last-20 {last:.6}, switches at {switches:?}, {refreshes} weight refreshes in band: {in_band}"),
    )
}

fn augmentation_differentiability() -> Outcome {
    let img = ImageTensor::pattern(16, 16, 9);
    let ops = [
        AugmentOp::Identity { probability: 1.0 },
        AugmentOp::CropResize { probability: 1.0, fraction: (0.8, 0.9) },
        AugmentOp::Jpeg { probability: 1.0, quality: (75, 75) },
        AugmentOp::GaussianNoise { probability: 1.0, sigma: 2.0 / 255.0 },
        AugmentOp::ColorJitter { probability: 1.0, channel_factor: (0.9, 1.1), brightness: 0.05 },
    ];
    let mut parts = Vec::new();
    let mut ok = true;
    for op in ops {
        let kind = op.kind();
        // rounding is piecewise constant, so jpeg is probed with a one-level step
        let h = if kind == "jpeg" { 1.0 / 255.0 } else { 1e-4 };
        let spec = AugmentSpec::only(op);
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        let weights: Vec<f64> = (0..img.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let direction: Vec<f64> = (0..img.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let probe = |sign: f64| {
            let data: Vec<f64> = img.data().iter().zip(&direction).map(|(v, d)| v + sign * h * d).collect();
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(vec![16, 16, 3], data));
            let (out, _) = apply_augment(&mut g, x, &spec, &mut ChaCha8Rng::seed_from_u64(91)).unwrap();
            g.value(out).data.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>()
        };
        let fd = (probe(1.0) - probe(-1.0)) / (2.0 * h);
        ok &= fd.is_finite() && fd != 0.0;
        parts.push(format!("{kind} {fd:.3e}"));
    }
    let jpeg100 = diff_jpeg(&img, 100).unwrap().linf_distance(&img).unwrap();
    ok &= jpeg100 <= 2.0 / 255.0;
    check(ok, format!("FD sensitivity {}; q100 linf {jpeg100:.5} <= {:.5}", parts.join(", "), 2.0 / 255.0))
}

/// Unconditional-only objective against `backend`.
fn adv_objective(backend: Arc<dyn NoisePredictor>) -> Objective {
    objective(backend, 0, LossWeights::new(1.0, vec![], 0.0).unwrap())
}

fn transfer_mechanism() -> Outcome {
    let a = make_toy_backend(1, 8).unwrap();
    let sibling: ToyDenoiser = a.sibling(10, 1e-2);
    let unrelated = toy(77, 8);
    let obj = adv_objective(Arc::new(a));
    let budget = NoiseBudget::new(RADIUS, 1e-3, 300).unwrap();
    let record = pgd_protect(&ImageTensor::pattern(32, 32, 10), &obj, budget, PgdOptions { eval_every: 0, ..PgdOptions::default() }, 10)
        .map_err(|e| e.to_string())?;
    let schedule = DiffusionSchedule::default();
    let sib = transfer_harness(&record, Arc::new(sibling), &schedule, 32, 1000).map_err(|e| e.to_string())?;
    let far = transfer_harness(&record, unrelated, &schedule, 32, 1000).map_err(|e| e.to_string())?;
    check(
        sib.error_protected > sib.error_clean,
        format!(
            "sibling: {:.6} -> {:.6} (margin {:.3e}); unrelated (measured only): margin {:.3e}",
            sib.error_clean,
            sib.error_protected,
            sib.margin(),
            far.margin()
        ),
    )
}

fn robustness_retention() -> Outcome {
    let backend = toy(1, 8);
    let obj = adv_objective(backend.clone());
    let budget = NoiseBudget::new(RADIUS, 1e-3, 300).unwrap();
    let record = pgd_protect(&ImageTensor::pattern(32, 32, 11), &obj, budget, PgdOptions { eval_every: 0, ..PgdOptions::default() }, 11)
        .map_err(|e| e.to_string())?;
    let probe = AdvProbe::new(backend, DiffusionSchedule::default(), 32, 1100);
    let report = robustness_suite(&record, &[Transform::Jpeg { quality: 75 }], &probe).map_err(|e| e.to_string())?;
    let t = &report.transforms[0];
    let margin = t.adv_protected - report.adv_clean;
    let threshold = MARGIN_FRACTION * PILOT_JPEG75_MARGIN;
    check(
        margin > 0.0 && margin > threshold,
        format!(
            "adv clean {:.6}, protected {:.6}, jpeg75(protected) {:.6}; margin {margin:.4e} > {threshold:.4e} (pilot {PILOT_JPEG75_MARGIN:.4e})",
            report.adv_clean, report.adv_protected, t.adv_protected
        ),
    )
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_antiref")).args(args).env("RUST_LOG", "warn").output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} exited with {}: {}", out.status, String::from_utf8_lossy(&out.stderr)))
    }
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn cli_round_trip() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let input = d.join("face.png");
    write_png(&input, &ImageTensor::pattern(32, 32, 12)).unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (out1, out2, rep) = (d.join("run1"), d.join("run2"), d.join("report"));
    for out in [&out1, &out2] {
        run_cli(&["protect", "--method", "pgd", "--in", &s(&input), "--out", &s(out), "--seed", "12"])?;
    }
    let files = ["face.protected.png", "face.perturbation.npy", "face.manifest.json"];
    let exist = files.iter().all(|f| out1.join(f).is_file());
    if !exist {
        return Err(format!("missing outputs in {}", out1.display()));
    }
    let manifest = out1.join("face.manifest.json");
    run_cli(&["evaluate", "--in", &s(&manifest), "--out", &s(&rep)])?;
    let manifest_psnr = json(&manifest)["psnr"].as_f64().ok_or("manifest has no psnr")?;
    let report_psnr = json(&rep.join("report.json"))["pairs"][0]["metrics"]["psnr"].as_f64().ok_or("report has no psnr")?;
    let gap = (manifest_psnr - report_psnr).abs();
    let same = files[..2].iter().all(|f| std::fs::read(out1.join(f)).unwrap() == std::fs::read(out2.join(f)).unwrap());
    check(
        gap <= 0.1 && same,
        format!("manifest PSNR {manifest_psnr:.4} dB, evaluate {report_psnr:.4} dB (gap {gap:.4} <= 0.1), repeat run byte-identical: {same}"),
    )
}

fn main() {
    let criteria: [Criterion; 12] = [
        (1, "ball invariant", ball_invariant),
        (2, "invisibility bound", invisibility_bound),
        (3, "objective ascent", objective_ascent),
        (4, "gradient fidelity", gradient_fidelity),
        (5, "forward-process identities", forward_process),
        (6, "metric oracles", metric_oracles),
        (7, "encoder contracts", ane_contracts),
        (8, "two-phase trainer", two_phase_trainer),
        (9, "augmentation differentiability", augmentation_differentiability),
        (10, "transfer mechanism", transfer_mechanism),
        (11, "robustness retention", robustness_retention),
        (12, "CLI round-trip", cli_round_trip),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    // criterion 2 reads the outputs of criterion 1
    let selected: Vec<u32> = if selected.contains(&2) && !selected.contains(&1) { [vec![1], selected].concat() } else { selected };
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} {name}: PASS ({detail}) [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} {name}: FAIL ({detail}) [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
