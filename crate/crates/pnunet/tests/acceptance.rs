//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test --test acceptance -- 1 7`.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use pnunet::bench::bench_inference;
use pnunet::weights::{load_autoencoder, load_reconstructor, save_autoencoder, save_reconstructor};
use pnunet::Error;
use pnunet_core::baseline::{Autoencoder, AutoencoderConfig, SearchConfig};
use pnunet_core::detector::{anomaly_map, pixel_auroc, AnomalyResult};
use pnunet_core::imaging::{gen_synthetic_pair, procedural_texture, DefectKind, SyntheticDefectSpec};
use pnunet_core::noise::{
    compose_applied_noise, make_negative_gate, make_positive_noise, sample_base_noise, update_residual_maps,
    NoiseMaskPair,
};
use pnunet_core::reconstructor::{Reconstruct, Reconstructor, ReconstructorConfig};
use pnunet_core::ssim::{ssim_loss, ssim_loss_grad, ssim_map, SsimConfig};
use pnunet_core::trainer::{self, TrainConfig, TrainingData};
use pnunet_core::{Image, Tensor};
use serde_json::{json, Value};

type Check = (u32, &'static str, fn() -> Verdict);

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

/// Deterministic pseudo-random values in [0, 1) without pulling in an RNG.
struct Lcg(u64);

impl Lcg {
    fn next(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }

    fn tensor(&mut self, h: usize, w: usize, c: usize) -> Tensor {
        Tensor::from_fn(h, w, c, |_, _, _| self.next())
    }
}

// Criterion 1

fn naive_ssim_map(a: &Tensor, b: &Tensor, cfg: &SsimConfig) -> Vec<f64> {
    let (h, w, ch) = a.shape();
    let r = (cfg.window_size / 2) as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * cfg.sigma * cfg.sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    let mirror = |i: isize, n: usize| -> usize {
        let n = n as isize;
        (if i < 0 {
            -i - 1
        } else if i >= n {
            2 * n - i - 1
        } else {
            i
        }) as usize
    };
    let c1 = (cfg.k1 * cfg.dynamic_range).powi(2);
    let c2 = (cfg.k2 * cfg.dynamic_range).powi(2);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for c in 0..ch {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let wt = raw[(dy + r) as usize] * raw[(dx + r) as usize] / (total * total);
                        let yy = mirror(y as isize + dy, h);
                        let xx = mirror(x as isize + dx, w);
                        let (va, vb) = (a.get(yy, xx, c), b.get(yy, xx, c));
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * va * va;
                        sbb += wt * vb * vb;
                        sab += wt * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
            out[y * w + x] = acc / ch as f64;
        }
    }
    out
}

fn ssim_oracle() -> Verdict {
    let cfg = SsimConfig::default();
    let mut rng = Lcg(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let a = rng.tensor(16, 16, 1);
        let b = rng.tensor(16, 16, 1);
        let fast = ssim_map(&a, &b, &cfg).unwrap();
        let slow = naive_ssim_map(&a, &b, &cfg);
        for (x, y) in fast.data().iter().zip(&slow) {
            worst = worst.max((x - y).abs());
        }
    }
    verdict(worst <= 1e-6, format!("100 pairs, max abs difference {worst:.2e} (bound 1e-6)"))
}

// Criterion 2

fn reconstructor_gradient() -> Verdict {
    let model_cfg = ReconstructorConfig {
        levels: 2,
        base_channels: 4,
        seed: 5,
        ..ReconstructorConfig::default()
    };
    let ssim = SsimConfig {
        window_size: 7,
        ..SsimConfig::default()
    };
    let mut model = Reconstructor::init(model_cfg).unwrap();
    let mut rng = Lcg(2);
    let x = Image::new(Tensor::from_fn(8, 8, 1, |_, _, _| 0.2 + 0.6 * rng.next())).unwrap();
    let z = sample_base_noise((8, 8, 1), 0.2, 9).unwrap();
    let noisy = pnunet_core::noise::apply_noise(&x, &z).unwrap();
    let loss = |m: &Reconstructor| ssim_loss(&x, &m.forward(&noisy).unwrap(), &ssim).unwrap();

    let cache = model.forward_cached(&noisy).unwrap();
    let (_, g_out) = ssim_loss_grad(&x, cache.output(), &ssim).unwrap();
    let mut grads = model.params().zeros_like();
    model.backward(&cache, &g_out, &mut grads, false);

    let h = 1e-6;
    let mut worst = (0.0, String::new());
    let count = model.params().tensors().len();
    for t in 0..count {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..model.params().tensors()[t].numel() {
            let orig = model.params().tensors()[t].data[i];
            model.params_mut().tensors_mut()[t].data[i] = orig + h;
            let plus = loss(&model);
            model.params_mut().tensors_mut()[t].data[i] = orig - h;
            let minus = loss(&model);
            model.params_mut().tensors_mut()[t].data[i] = orig;
            let fd = (plus - minus) / (2.0 * h);
            num += (grads.tensors()[t].data[i] - fd).powi(2);
            den += fd * fd;
        }
        let rel = num.sqrt() / den.sqrt().max(1e-12);
        if rel > worst.0 {
            worst = (rel, model.params().tensors()[t].name.clone());
        }
    }
    verdict(
        worst.0 <= 1e-3,
        format!(
            "{count} tensors, {} parameters, worst relative error {:.2e} in {} (bound 1e-3)",
            model.params().numel(),
            worst.0,
            worst.1
        ),
    )
}

// Criterion 3

struct Identity;

impl Reconstruct for Identity {
    fn reconstruct(&self, x: &Tensor) -> pnunet_core::Result<Tensor> {
        Ok(x.clone())
    }
}

fn bit_equal(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits())
}

fn mask_formulas() -> Verdict {
    let side = 16;
    let normal: Vec<Image> = (0..3).map(|i| procedural_texture(side, side, 1, 70 + i).unwrap()).collect();
    let anomalous: Vec<Image> = (0..2).map(|i| procedural_texture(side, side, 1, 80 + i).unwrap()).collect();
    let masks = update_residual_maps(&Identity, &normal, &anomalous, 1000).unwrap();
    let positive_neutral = masks.positive.data().iter().all(|&v| v == 1.0);
    let negative_zero = masks.negative.data().iter().all(|&v| v == 0.0);
    let z = sample_base_noise((side, side, 1), 0.2, 11).unwrap();
    let positive_is_z = bit_equal(&make_positive_noise(&z, &masks).unwrap().data, &z.data);
    let gate_ones = make_negative_gate(&z, &masks).unwrap().data().iter().all(|&v| v == 1.0);
    let neutral = NoiseMaskPair::neutral(side, side);
    let composition_exact = [0.0, 0.25, 0.5, 1.0].iter().all(|&blend| {
        bit_equal(&compose_applied_noise(&z, &neutral, blend).unwrap().data, &z.data)
            && bit_equal(&compose_applied_noise(&z, &masks, blend).unwrap().data, &z.data)
    });
    let pass = positive_neutral && negative_zero && positive_is_z && gate_ones && composition_exact;
    verdict(
        pass,
        format!(
            "R_p neutral {positive_neutral}, R_n zero {negative_zero}, z_p == z {positive_is_z}, \
             gate ones {gate_ones}, composition exact {composition_exact}"
        ),
    )
}

// Criterion 4

fn schedules() -> Verdict {
    let data = TrainingData {
        normal: (0..2).map(|i| procedural_texture(8, 8, 1, 30 + i).unwrap()).collect(),
        anomalous: vec![procedural_texture(8, 8, 1, 40).unwrap()],
    };
    let toy = ReconstructorConfig {
        levels: 1,
        base_channels: 2,
        ..ReconstructorConfig::default()
    };
    let ssim = SsimConfig {
        window_size: 7,
        ..SsimConfig::default()
    };
    let mut counts = Vec::new();
    let mut exact = true;
    for iterations in [3000, 999, 5000] {
        let cfg = TrainConfig {
            iterations,
            mask_update_interval: 1000,
            batch_size: 1,
            patch_size: 8,
            mask_normal_samples: 1,
            ..TrainConfig::default()
        };
        let state = trainer::run::<pnunet_core::Error>(&data, &cfg, toy, &ssim, |_, _| Ok(())).unwrap();
        let expected: Vec<u64> = (1..=iterations / 1000).map(|k| k * 1000).collect();
        exact &= state.mask_update_iterations == expected;
        counts.push(state.mask_update_iterations.len());
    }
    verdict(
        counts == [3, 0, 5] && exact,
        format!("updates for T = 3000, 999, 5000 with K = 1000: {counts:?} (expected [3, 0, 5])"),
    )
}

// Criterion 5

const TEXTURE_SEED: u64 = 1000;
const DEFECT_INTENSITY: f64 = 0.15;
const DEFECT_SIZE: usize = 14;

fn defect_image(index: u64, seed: u64) -> (Image, Tensor) {
    let kind = if index.is_multiple_of(2) { DefectKind::Scratch } else { DefectKind::Blob };
    let base = procedural_texture(64, 64, 1, TEXTURE_SEED + seed).unwrap();
    let spec = SyntheticDefectSpec {
        kind,
        intensity: DEFECT_INTENSITY,
        size_px: DEFECT_SIZE,
        seed,
    };
    let (defective, mask) = gen_synthetic_pair(&base, &spec).unwrap();
    (defective, mask.into_tensor())
}

struct DetectionRun {
    auroc: f64,
    contrast: f64,
}

fn detection_run(data: &TrainingData, test: &[(Image, Tensor)], seed: u64, masks_enabled: bool) -> DetectionRun {
    let model_cfg = ReconstructorConfig {
        levels: 2,
        base_channels: 4,
        seed,
        ..ReconstructorConfig::default()
    };
    let cfg = TrainConfig {
        iterations: 5000,
        batch_size: 4,
        seed,
        masks_enabled,
        ..TrainConfig::default()
    };
    let state = trainer::run::<pnunet_core::Error>(data, &cfg, model_cfg, &SsimConfig::default(), |_, _| Ok(())).unwrap();
    let maps: Vec<AnomalyResult> = test.iter().map(|(x, _)| anomaly_map(&state.model, x, 1.0).unwrap()).collect();
    let gts: Vec<Tensor> = test.iter().map(|(_, g)| g.clone()).collect();
    let auroc = pixel_auroc(&maps, &gts).unwrap();
    let (mut on, mut n_on, mut off, mut n_off) = (0.0, 0usize, 0.0, 0usize);
    for (m, g) in maps.iter().zip(&gts) {
        for (v, label) in m.map.data().iter().zip(g.data()) {
            if *label > 0.5 {
                on += v;
                n_on += 1;
            } else {
                off += v;
                n_off += 1;
            }
        }
    }
    DetectionRun {
        auroc,
        contrast: (on / n_on as f64) / (off / n_off as f64),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn detection_quality() -> Verdict {
    let data = TrainingData {
        normal: (0..8).map(|s| procedural_texture(96, 96, 1, TEXTURE_SEED + s).unwrap()).collect(),
        anomalous: (0..4).map(|i| defect_image(i, 500 + i).0).collect(),
    };
    let test: Vec<(Image, Tensor)> = (0..20).map(|i| defect_image(i, 900 + i)).collect();
    let (mut with, mut without) = (Vec::new(), Vec::new());
    let (mut contrast_with, mut contrast_without) = (Vec::new(), Vec::new());
    for seed in 0..3 {
        let a = detection_run(&data, &test, seed, true);
        let b = detection_run(&data, &test, seed, false);
        println!(
            "    seed {seed}: AUROC masks {:.4} ablation {:.4}; contrast masks {:.3} ablation {:.3}",
            a.auroc, b.auroc, a.contrast, b.contrast
        );
        with.push(a.auroc);
        without.push(b.auroc);
        contrast_with.push(a.contrast);
        contrast_without.push(b.contrast);
    }
    let (m, b) = (mean(&with), mean(&without));
    let contrast_ok = contrast_with.iter().zip(&contrast_without).all(|(a, b)| a >= b);
    println!(
        "    contrast ratio masks >= ablation on every seed: {}",
        if contrast_ok { "yes" } else { "no" }
    );
    verdict(
        m >= 0.90 && m - b >= 0.02,
        format!("mean AUROC masks {m:.4} (bound 0.90), ablation {b:.4}, margin {:+.4} (bound +0.02)", m - b),
    )
}

// Criterion 6

fn speed_ratio() -> Verdict {
    let recon = Reconstructor::init(ReconstructorConfig::default()).unwrap();
    let ae = Autoencoder::init(AutoencoderConfig::default()).unwrap();
    let images: Vec<Image> = (0..10).map(|i| procedural_texture(64, 64, 1, 600 + i).unwrap()).collect();
    let scfg = SearchConfig {
        steps: 500,
        ..SearchConfig::default()
    };
    let r = bench_inference(&recon, &ae, &images, &scfg, &SsimConfig::default()).unwrap();
    let slowest = r.forward_seconds.iter().copied().fold(0.0, f64::max);
    verdict(
        r.ratio >= 50.0 && slowest <= 0.1,
        format!(
            "search {:.3} s, forward {:.4} s (slowest {:.4} s, bound 0.1), ratio {:.0} (bound 50)",
            r.mean_search_seconds, r.mean_forward_seconds, slowest, r.ratio
        ),
    )
}

// Criterion 7

fn serialization() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let recon = Reconstructor::init(ReconstructorConfig {
        seed: 21,
        ..ReconstructorConfig::default()
    })
    .unwrap();
    let ae = Autoencoder::init(AutoencoderConfig {
        seed: 22,
        ..AutoencoderConfig::default()
    })
    .unwrap();
    let (rp, ap) = (dir.path().join("r.pnuw"), dir.path().join("a.pnuw"));
    save_reconstructor(&rp, &recon).unwrap();
    save_autoencoder(&ap, &ae).unwrap();
    let bits = |a: &pnunet_core::params::ParamSet, b: &pnunet_core::params::ParamSet| {
        a.tensors().len() == b.tensors().len()
            && a.tensors().iter().zip(b.tensors()).all(|(x, y)| {
                x.name == y.name
                    && x.shape == y.shape
                    && x.data.iter().zip(&y.data).all(|(p, q)| p.to_bits() == q.to_bits())
            })
    };
    let r2 = load_reconstructor(&rp).unwrap();
    let a2 = load_autoencoder(&ap).unwrap();
    let round_trip =
        bits(recon.params(), r2.params()) && r2.config() == recon.config() && bits(ae.params(), a2.params()) && a2.config() == ae.config();

    let good = fs::read(&rp).unwrap();
    let damaged = dir.path().join("bad.pnuw");
    let mut detected = 0;
    let probes = 64;
    for k in 0..probes {
        let mut bytes = good.clone();
        // payload bytes sit between the header and the 4-byte checksum
        let pos = good.len() - 5 - k * (good.len() / (2 * probes));
        bytes[pos] ^= 0x10;
        fs::write(&damaged, &bytes).unwrap();
        if matches!(load_reconstructor(&damaged), Err(Error::Corrupt { .. })) {
            detected += 1;
        }
    }
    verdict(
        round_trip && detected == probes,
        format!("bit-exact round trip {round_trip}, corrupted payload detected {detected}/{probes}"),
    )
}

// Criterion 8

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_pnunet")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(String::from_utf8_lossy(&out.stderr).into_owned())
    }
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let config = tmp.path().join("config.json");
    let doc = json!({
        "dataset": {
            "normal_dir": data.join("train/normal"),
            "anomalous_dir": data.join("train/anomalous"),
            "ground_truth_dir": data.join("train/gt"),
        },
        "gen_data": {"image_size": 48, "train_normal": 6, "train_anomalous": 2, "test_normal": 0, "test_anomalous": 0},
        "trainer": {"iterations": 300, "mask_update_interval": 100, "batch_size": 4, "patch_size": 32, "checkpoint_every": 100},
        "reconstructor": {"levels": 2, "base_channels": 4}
    });
    fs::write(&config, doc.to_string()).unwrap();
    let cfg = config.to_str().unwrap();
    cli(&["gen-data", "--config", cfg, "--out", data.to_str().unwrap()]).unwrap();
    let runs = ["a", "b"].map(|name| tmp.path().join(name));
    for run in &runs {
        cli(&["train", "--config", cfg, "--seed", "7", "--out", run.to_str().unwrap()]).unwrap();
    }
    let [a, b] = runs.clone().map(|run| read_json(&run.join("report.json")));
    let losses_equal = a["loss_history"] == b["loss_history"] && a["loss_history"].as_array().unwrap().len() == 300;
    let weights_equal = fs::read(runs[0].join("ckpt_300.pnuw")).unwrap() == fs::read(runs[1].join("ckpt_300.pnuw")).unwrap();
    verdict(
        losses_equal && weights_equal,
        format!("loss histories identical {losses_equal}, final weight files identical {weights_equal}"),
    )
}

fn main() -> ExitCode {
    let criteria: [Check; 8] = [
        (1, "ssim oracle equivalence", ssim_oracle),
        (2, "reconstructor gradient check", reconstructor_gradient),
        (3, "mask formulas and neutrality", mask_formulas),
        (4, "mask update schedule", schedules),
        (5, "synthetic detection quality", detection_quality),
        (6, "inference speed ratio", speed_ratio),
        (7, "weight file round trip", serialization),
        (8, "training determinism", determinism),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (id, name, check) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {id} {name}: {status} ({}; {:.1} s)", v.detail, start.elapsed().as_secs_f64());
        failures += usize::from(!v.pass);
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criterion(s) failed");
        ExitCode::FAILURE
    }
}
