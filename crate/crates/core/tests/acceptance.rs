//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. `ACCEPTANCE_ONLY=1,4,9` runs a subset.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ricau::attention::{CaConfig, CoordinateAttention};
use ricau::cli::split_seed;
use ricau::config::{Preset, RunConfig};
use ricau::data::{generate_slices, AugmentConfig, Dataset, PhantomSpec};
use ricau::evaluation::{agatston_per_lesion, dice_per_class};
use ricau::gradcheck::{full_suite, END_TO_END_TOLERANCE, OP_TOLERANCE};
use ricau::layers::Activation;
use ricau::losses::{exp_log_dice, focal_logdice, inverse_frequency_weights, loss, weighted_focal, LossConfig, LossVariant};
use ricau::network::checkpoint::Checkpoint;
use ricau::network::{ArchConfig, RicauNet};
use ricau::tensor::io as tns;
use ricau::training::{lr_at, read_lr_column, TrainConfig, Trainer, METRICS_FILE};
use ricau::{Graph, Mask, Tensor};

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

fn uniform(dims: Vec<usize>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.gen_range(lo..hi)).unwrap()
}

fn random_mask(dims: Vec<usize>, rng: &mut ChaCha8Rng) -> Mask {
    let len = dims.iter().product();
    Mask::new(dims, (0..len).map(|_| rng.gen_range(0..6u8)).collect()).unwrap()
}

fn minutes(d: Duration) -> f64 {
    d.as_secs_f64() / 60.0
}

/// Gradient integrity: every op under 1e-4, blocks and network under 1e-3, < 2 min.
fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let reports = full_suite(0)?;
    let elapsed = start.elapsed();
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let worst_op = reports
        .iter()
        .filter(|r| r.tolerance == OP_TOLERANCE)
        .map(|r| r.max_rel_err)
        .fold(0.0, f64::max);
    let e2e = reports
        .iter()
        .find(|r| r.name == "ricau_net_end_to_end")
        .ok_or("no end-to-end check")?;
    let ok = failed.is_empty()
        && worst_op < OP_TOLERANCE
        && e2e.max_rel_err < END_TO_END_TOLERANCE
        && elapsed < Duration::from_secs(120);
    Ok((
        ok,
        format!(
            "{} checks, worst per-op {worst_op:.2e} (< 1e-4), end-to-end {:.2e} (< 1e-3), {:.1}s (< 120s), failed {failed:?}",
            reports.len(),
            e2e.max_rel_err,
            elapsed.as_secs_f64()
        ),
    ))
}

/// CA shape and range over 100 draws; softmax sums within 1e-6.
fn shape_and_range() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_gate = (f64::MAX, f64::MIN);
    for _ in 0..100 {
        let dims = vec![rng.gen_range(1..3), rng.gen_range(1..24), rng.gen_range(1..10), rng.gen_range(1..10)];
        let cfg = CaConfig {
            reduction_ratio: rng.gen_range(1..40),
            min_mid_channels: rng.gen_range(1..10),
            activation: if rng.gen_bool(0.5) { Activation::Relu } else { Activation::HardSwish },
        };
        let ca = CoordinateAttention::new("ca", dims[1], cfg)?;
        let store = ca.init_store::<f64>(rng.gen())?;
        let scale = rng.gen_range(0.1..5.0);
        let x = uniform(dims.clone(), -scale, scale, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false)?;
        let xv = g.constant(x)?;
        let maps = ca.attention_maps(&mut g, &p, &mut store.eval_access(), xv, ricau::attention::Gate::Sigmoid)?;
        let y = ca.forward(&mut g, &p, &mut store.eval_access(), xv)?;
        if g.dims(y) != dims.as_slice() {
            return Ok((false, format!("shape {:?} became {:?}", dims, g.dims(y))));
        }
        for &v in g.value(maps.a_h).data().iter().chain(g.value(maps.a_w).data()) {
            if !(v > 0.0 && v < 1.0) {
                return Ok((false, format!("attention value {v} outside (0, 1)")));
            }
            worst_gate = (worst_gate.0.min(v), worst_gate.1.max(v));
        }
    }
    let mut worst_sum = 0.0f64;
    for _ in 0..100 {
        let (n, h, w) = (rng.gen_range(1..4), rng.gen_range(1..9), rng.gen_range(1..9));
        let scale = rng.gen_range(0.1..30.0);
        let x = uniform(vec![n, 6, h, w], -scale, scale, &mut rng).cast::<f32>();
        let mut g = Graph::new();
        let xv = g.constant(x)?;
        let s = g.softmax_channel(xv)?;
        let v = g.value(s).data();
        for b in 0..n {
            for i in 0..h * w {
                let sum: f64 = (0..6).map(|c| v[(b * 6 + c) * h * w + i] as f64).sum();
                worst_sum = worst_sum.max((sum - 1.0).abs());
            }
        }
    }
    Ok((
        worst_sum <= 1e-6,
        format!(
            "100 CA draws keep shape, gates in [{:.3e}, {:.6}]; worst softmax |sum - 1| = {worst_sum:.2e} (<= 1e-6)",
            worst_gate.0, worst_gate.1
        ),
    ))
}

/// Combo linearity (exact) on 50 batches; CE within 1e-9 of the textbook formula.
fn loss_arithmetic() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    let mut worst_ce = 0.0f64;
    for _ in 0..50 {
        let (n, h, w) = (rng.gen_range(1..3), rng.gen_range(2..6), rng.gen_range(2..6));
        let logits = uniform(vec![n, 6, h, w], -3.0, 3.0, &mut rng);
        let target = random_mask(vec![n, h, w], &mut rng);
        let cfg = LossConfig {
            class_weights: (0..6).map(|_| rng.gen_range(0.1..3.0)).collect(),
            ..LossConfig::default()
        };
        let eval = |f: &dyn Fn(&mut Graph<f64>, ricau::Var) -> ricau::Result<ricau::Var>| {
            let mut g = Graph::new();
            let v = g.constant(logits.clone()).unwrap();
            let l = f(&mut g, v).unwrap();
            g.value(l).data()[0]
        };
        let combined = eval(&|g, v| focal_logdice(g, v, &target, &cfg));
        let wfl = eval(&|g, v| weighted_focal(g, v, &target, &cfg));
        let eldl = eval(&|g, v| exp_log_dice(g, v, &target, &cfg));
        if combined.to_bits() != (0.4 * wfl + 0.6 * eldl).to_bits() {
            mismatches += 1;
        }

        let ce_cfg = LossConfig {
            variant: LossVariant::CrossEntropy,
            ..cfg.clone()
        };
        let ce = eval(&|g, v| loss(g, v, &target, &ce_cfg));
        let hw = h * w;
        let mut textbook = 0.0;
        for b in 0..n {
            for i in 0..hw {
                let z: Vec<f64> = (0..6).map(|c| logits.data()[(b * 6 + c) * hw + i]).collect();
                let m = z.iter().copied().fold(f64::MIN, f64::max);
                let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                textbook += lse - z[target.data()[b * hw + i] as usize];
            }
        }
        textbook /= (n * hw) as f64;
        worst_ce = worst_ce.max((ce - textbook).abs());
    }
    Ok((
        mismatches == 0 && worst_ce <= 1e-9,
        format!("combo mismatches {mismatches}/50 (exact); worst |CE - textbook| = {worst_ce:.2e} (<= 1e-9)"),
    ))
}

/// Schedule landmarks and a 100-epoch metrics log matching `lr_at` exactly.
fn scheduler_trace() -> Outcome {
    let cfg = TrainConfig {
        epochs: 100,
        batch_size: 2,
        seed: 4,
        ..TrainConfig::default()
    };
    let landmarks = [(0.0, 1e-12), (5.0, 1e-4), (55.0, 5e-5)];
    let landmarks_ok = landmarks.iter().all(|&(e, v)| lr_at(e, &cfg) == v);

    let spec = PhantomSpec {
        size: 32,
        lesion_pixel_range: [(2, 8); 4],
        ..PhantomSpec::desk(2, 4)
    };
    let data = Dataset::from_samples(generate_slices(&spec)?);
    let arch = ArchConfig {
        levels: 2,
        base_channels: 2,
        ..ArchConfig::default()
    };
    let mut t = Trainer::new(RicauNet::new(arch)?, LossConfig::default(), cfg.clone(), AugmentConfig::disabled())?;
    let dir = tempfile::tempdir()?;
    t.fit(&data, None, Some(dir.path()))?;
    let logged = read_lr_column(&dir.path().join(METRICS_FILE))?;
    let exact = logged.len() == 100
        && logged
            .iter()
            .enumerate()
            .all(|(e, &lr)| lr.to_bits() == lr_at(e as f64, &cfg).to_bits());
    Ok((
        landmarks_ok && exact,
        format!(
            "lr(0) = {:e}, lr(5) = {:e}, lr(55) = {:e}; {} logged rows, bit-exact match: {exact}",
            lr_at(0.0, &cfg),
            lr_at(5.0, &cfg),
            lr_at(55.0, &cfg),
            logged.len()
        ),
    ))
}

/// Dice against brute-force counting on 1,000 random 8×8 pairs.
fn dice_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let classes = rng.gen_range(1..=6u8);
        let mut draw = || Mask::new(vec![8, 8], (0..64).map(|_| rng.gen_range(0..classes)).collect()).unwrap();
        let (pred, truth) = (draw(), draw());
        let report = dice_per_class(&pred, &truth)?;
        for c in 0..6u8 {
            let (mut i, mut p, mut t) = (0u32, 0u32, 0u32);
            for (&a, &b) in pred.data().iter().zip(truth.data()) {
                p += (a == c) as u32;
                t += (b == c) as u32;
                i += (a == c && b == c) as u32;
            }
            let expect = if p + t == 0 { 1.0 } else { 2.0 * i as f64 / (p + t) as f64 };
            if report.dice[c as usize] != expect {
                mismatches += 1;
            }
        }
    }
    Ok((mismatches == 0, format!("{mismatches} mismatches over 1000 pairs × 6 classes")))
}

/// Tiny network overfits 8 phantom slices within 300 steps, < 10 min.
fn overfit_smoke() -> Outcome {
    let start = Instant::now();
    let spec = PhantomSpec {
        p_lesion: [1.0; 4],
        ..PhantomSpec::desk(8, 5)
    };
    let data = Dataset::from_samples(generate_slices(&spec)?);
    let loss = LossConfig {
        class_weights: inverse_frequency_weights(&data.class_counts()),
        ..LossConfig::default()
    };
    let steps = 300;
    let cfg = TrainConfig {
        epochs: steps,
        batch_size: 8,
        init_lr: 1e-6,
        max_lr: 3e-3,
        warmup_epochs: 10.0,
        first_restart_epochs: steps as f64,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(RicauNet::new(ArchConfig::desk())?, loss, cfg, AugmentConfig::disabled())?;
    t.fit(&data, None, None)?;
    let r = t.validate(&data)?;
    let elapsed = start.elapsed();
    Ok((
        t.step_losses.len() == steps && r.mean_foreground() > 0.9 && elapsed < Duration::from_secs(600),
        format!(
            "{} steps, mean foreground dice {:.4} (> 0.9), lesion {:.3?}, {:.1} min (< 10)",
            t.step_losses.len(),
            r.mean_foreground(),
            r.lesion(),
            minutes(elapsed)
        ),
    ))
}

struct AblationRun {
    lm_dice: f64,
    foreground: f64,
}

fn ablation_run(train: &Dataset, test: &Dataset, variant: LossVariant, ca: bool, seed: u64) -> Result<AblationRun, Box<dyn std::error::Error>> {
    let mut cfg = RunConfig::preset(Preset::Desk);
    cfg.arch.ca_enabled = ca;
    cfg.loss.variant = variant;
    cfg.train.seed = seed;
    let mut t = Trainer::new(
        RicauNet::new(cfg.arch.clone())?,
        cfg.loss_config(&train.class_counts()),
        cfg.train.clone(),
        AugmentConfig::disabled(),
    )?;
    t.fit(train, None, None)?;
    let r = t.validate(test)?;
    Ok(AblationRun {
        lm_dice: r.dice[2],
        foreground: r.mean_foreground(),
    })
}

/// Loss and attention ablations on a fixed phantom set over three seeds.
fn ablations() -> Result<[(bool, String); 2], Box<dyn std::error::Error>> {
    let start = Instant::now();
    let train = Dataset::from_samples(generate_slices(&PhantomSpec::desk(2000, split_seed(0, 0)))?);
    let test = Dataset::from_samples(generate_slices(&PhantomSpec::desk(500, split_seed(0, 2)))?);
    let seeds = [1u64, 2, 3];
    let (mut fld_lm, mut ce_lm, mut ricau_fg, mut unet_fg) = (vec![], vec![], vec![], vec![]);
    for &seed in &seeds {
        let fld = ablation_run(&train, &test, LossVariant::FocalLogDice, true, seed)?;
        let ce = ablation_run(&train, &test, LossVariant::CrossEntropy, true, seed)?;
        let unet = ablation_run(&train, &test, LossVariant::FocalLogDice, false, seed)?;
        println!(
            "     seed {seed}: focal-logdice LM {:.4} fg {:.4} | ce LM {:.4} | unet fg {:.4}",
            fld.lm_dice, fld.foreground, ce.lm_dice, unet.foreground
        );
        fld_lm.push(fld.lm_dice);
        ce_lm.push(ce.lm_dice);
        ricau_fg.push(fld.foreground);
        unet_fg.push(unet.foreground);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let in_budget = start.elapsed() < Duration::from_secs(7200);
    let budget = format!("{:.1} min for both ablations (< 120)", minutes(start.elapsed()));
    Ok([
        (
            mean(&fld_lm) >= mean(&ce_lm) && in_budget,
            format!("mean LM dice focal-logdice {:.4} >= ce {:.4}; {budget}", mean(&fld_lm), mean(&ce_lm)),
        ),
        (
            mean(&ricau_fg) >= mean(&unet_fg) && in_budget,
            format!("mean foreground dice ricau {:.4} >= unet {:.4}; {budget}", mean(&ricau_fg), mean(&unet_fg)),
        ),
    ])
}

fn train_small(seed: u64) -> Result<(Trainer, Dataset), Box<dyn std::error::Error>> {
    let spec = PhantomSpec {
        size: 32,
        p_lesion: [0.5; 4],
        lesion_pixel_range: [(2, 8); 4],
        ..PhantomSpec::desk(12, 6)
    };
    let data = Dataset::from_samples(generate_slices(&spec)?);
    let arch = ArchConfig {
        levels: 2,
        base_channels: 4,
        ..ArchConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        init_lr: 1e-5,
        max_lr: 1e-3,
        warmup_epochs: 1.0,
        first_restart_epochs: 3.0,
        seed,
        ..TrainConfig::default()
    };
    let loss = LossConfig {
        class_weights: inverse_frequency_weights(&data.class_counts()),
        ..LossConfig::default()
    };
    let mut t = Trainer::new(RicauNet::new(arch)?, loss, cfg, AugmentConfig::default().scaled_to(32))?;
    t.fit(&data, Some(&data), None)?;
    Ok((t, data))
}

/// Bit-exact reruns and round-trips; the 4 mm² at 450 HU Agatston example.
fn determinism_and_persistence() -> Outcome {
    let (a, data) = train_small(8)?;
    let (b, _) = train_small(8)?;
    let same_metrics = a.history.len() == b.history.len()
        && a.history.iter().zip(&b.history).all(|(x, y)| {
            x.train_loss.to_bits() == y.train_loss.to_bits() && x.tsv_row() == y.tsv_row()
        })
        && a.step_losses.iter().zip(&b.step_losses).all(|(x, y)| x.to_bits() == y.to_bits());
    let same_weights = Checkpoint::from_store(&a.store).encode() == Checkpoint::from_store(&b.store).encode();

    let ck = a.state_checkpoint();
    let bytes = ck.encode();
    let reread = Checkpoint::read(&mut bytes.as_slice())?;
    let ck_exact = reread.encode() == bytes;
    let mut restored = a.net().init_store::<f32>(0)?;
    reread.load_into(&mut restored)?;
    let (x, _) = ricau::data::collate(&data.samples[..2])?;
    let ya = a.net().predict(&a.store, &x)?;
    let yb = a.net().predict(&restored, &x)?;
    let forward_exact = ya.data().iter().zip(yb.data()).all(|(p, q)| p.to_bits() == q.to_bits());

    let img = &data.samples[0].image;
    let tns_img = tns::read(&mut tns::encode_f32(img).as_slice())?.into_f32()?;
    let tns_mask = tns::read(&mut tns::encode_mask(&data.samples[0].mask).as_slice())?.into_mask()?;
    let tns_exact = tns_img.data().iter().zip(img.data()).all(|(p, q)| p.to_bits() == q.to_bits())
        && tns_img.dims() == img.dims()
        && tns_mask == data.samples[0].mask;

    // 2×2 pixels of 1 mm² at 450 HU: area 4 × weight 4; and 16 pixels of 0.25 mm²
    let score = |side: usize, area: f64| -> ricau::Result<f64> {
        let (h, w) = (8, 8);
        let mut labels = vec![0u8; h * w];
        let mut hu = vec![-1000.0f32; h * w];
        for y in 1..1 + side {
            for x in 1..1 + side {
                labels[y * w + x] = 3;
                hu[y * w + x] = 300.0;
            }
        }
        hu[w + 1] = 450.0;
        Ok(agatston_per_lesion(&Mask::new(vec![h, w], labels)?, &Tensor::new(vec![1, h, w], hu)?, area)?.total)
    };
    let (s1, s2) = (score(2, 1.0)?, score(4, 0.25)?);
    let agatston_ok = s1 == 16.0 && s2 == 16.0;

    Ok((
        same_metrics && same_weights && ck_exact && forward_exact && tns_exact && agatston_ok,
        format!(
            "rerun metrics {same_metrics}, weights {same_weights}; checkpoint {ck_exact}, reload forward {forward_exact}; \
             tns {tns_exact}; agatston {s1} and {s2} (expect 16.0)"
        ),
    ))
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let wanted = |k: usize| only.as_ref().map_or(true, |o| o.contains(&k));
    let names = [
        "gradient integrity",
        "shape and range invariants",
        "loss arithmetic",
        "scheduler trace",
        "dice oracle",
        "overfit smoke test",
        "loss ablation direction",
        "attention ablation direction",
        "determinism and persistence",
    ];
    let mut results: Vec<(usize, bool, String)> = Vec::new();
    let mut record = |k: usize, outcome: Outcome| {
        let (ok, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        println!("{} [{k}] {}: {detail}", if ok { "PASS" } else { "FAIL" }, names[k - 1]);
        results.push((k, ok, detail));
    };
    let single: [(usize, fn() -> Outcome); 6] = [
        (1, gradient_integrity),
        (2, shape_and_range),
        (3, loss_arithmetic),
        (4, scheduler_trace),
        (5, dice_oracle),
        (6, overfit_smoke),
    ];
    for (k, f) in single {
        if wanted(k) {
            record(k, f());
        }
    }
    if wanted(7) || wanted(8) {
        match ablations() {
            Ok([loss, attention]) => {
                record(7, Ok(loss));
                record(8, Ok(attention));
            }
            Err(e) => {
                let msg = e.to_string();
                record(7, Err(msg.clone().into()));
                record(8, Err(msg.into()));
            }
        }
    }
    if wanted(9) {
        record(9, determinism_and_persistence());
    }
    let failed = results.iter().filter(|r| !r.1).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
