//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any criterion fails.
//!
//! The end-to-end criteria need a toy-trained model. It is trained once and
//! cached under the cargo target directory; delete `target/tmp/acceptance`
//! to retrain.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use num_rational::Ratio;
use sha2::{Digest, Sha256};
use tch::{Kind, Tensor};

use dae_progression::cohort::{encode_volume, generate_cohort, write_cohort, Cohort, CohortConfig, CohortSubject, Split, Volume, MANIFEST_FILE};
use dae_progression::diffusion::{ddim_sample, NoiseSchedule, TimestepSubsequence};
use dae_progression::eval::{
    area_by_age_bin, image_metrics, item_seed, jacobian_determinant, psnr, region_mean, register_demons,
    relative_volume_error_exact, sample_bilinear, spearman, ssim, to_grid, voxel_count, DemonsConfig, Grid,
};
use dae_progression::imaging::{DisplacementField, Image, Mask};
use dae_progression::latent::{latent_swap, run_swap_experiment};
use dae_progression::model::{ModelConfig, Precision, REGRESSOR_PREFIX, SHIFT_PREFIX};
use dae_progression::phantom::{render_phantom, PhantomConfig, PhantomSubject, Region, RegionMasks};
use dae_progression::progression::{apply_shift, AttributeVector, Diagnosis, LatentVector, ShiftVector, AGE_BINS};
use dae_progression::rng::SeededRng;
use dae_progression::train::{
    generate_followups, infer_followup, load_trained, parameter_grads, progression_objective, read_metrics,
    run_training, ProgressionBatch, RunOptions, StepNoise, TrainConfig, TrainState, TrainingExample, CHECKPOINT_DIR,
    FINAL_CHECKPOINT, METRICS_FILE,
};

const COHORT_SEED: u64 = 7;
const EVAL_SEED: u64 = 11;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b).abs().max().double_value(&[])
}

fn ddim_oracle_round_trip() -> Outcome {
    let start = Instant::now();
    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let mut rng = SeededRng::new(1);
    let target = rng.normal_tensor(&[2, 1, 16, 16], Kind::Double).sigmoid();
    let z = Tensor::zeros([2, 4], (Kind::Double, tch::Device::Cpu));
    let mut worst = 0.0f64;
    for steps in [1, 5, 10, 50] {
        let subseq = TimestepSubsequence::uniform(1000, steps).unwrap();
        let init = rng.normal_tensor(&[2, 1, 16, 16], Kind::Double);
        let out = ddim_sample(|_, _, _| Ok(target.copy()), &z, &sched, &subseq, &init).unwrap();
        worst = worst.max(max_abs_diff(&out, &target));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst <= 1e-4 && secs < 5.0, format!("max error {worst:.2e}, {secs:.2}s"))
}

fn tiny_masks(h: usize, w: usize) -> RegionMasks {
    let blob = |r0: usize, c0: usize| {
        Mask::from_shape_fn((h, w), |(r, c)| if (r0..r0 + 2).contains(&r) && (c0..c0 + 2).contains(&c) { 1.0 } else { 0.0 })
    };
    RegionMasks([blob(2, 3), blob(5, 1), blob(5, 5)])
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let config = TrainConfig {
        precision: Precision::F64,
        timesteps: 100,
        model: ModelConfig::tiny(),
        ..TrainConfig::default()
    };
    let (mse_w, ce_w) = (1.0, 0.5);
    let state = TrainState::new(config.clone()).unwrap();
    let mut rng = SeededRng::new(5);
    let images: Vec<Image> = (0..3).map(|_| Image::from_shape_fn((8, 8), |_| rng.uniform() as f32)).collect();
    let masks = tiny_masks(8, 8);
    let attrs = vec![
        AttributeVector::from_bin(Diagnosis::Cn, 1).unwrap(),
        AttributeVector::from_bin(Diagnosis::Mci, 4).unwrap(),
        AttributeVector::from_bin(Diagnosis::Ad, 10).unwrap(),
    ];
    let batch = ProgressionBatch::new(&images.iter().collect::<Vec<_>>(), &[&masks, &masks, &masks], attrs, 1, Kind::Double).unwrap();
    let noise = StepNoise::draw(&mut rng, 3, (8, 8), 100, Kind::Double);
    let loss = |s: &TrainState| progression_objective(&s.nets, s.schedule(), &batch, &noise, mse_w, ce_w).unwrap().total;
    let grads = parameter_grads(state.nets.store(), &loss(&state));
    let params = state.nets.store().params();
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut picker = SeededRng::new(9);
    while checked < 32 {
        let pi = picker.int_inclusive(0, params.len() - 1);
        let numel = params[pi].tensor.numel();
        let idx = picker.int_inclusive(0, numel - 1) as i64;
        let analytic = if grads[pi].defined() { grads[pi].view([-1]).double_value(&[idx]) } else { 0.0 };
        let nudge = |delta: f64| {
            tch::no_grad(|| {
                let mut e = params[pi].tensor.view([-1]).get(idx);
                let _ = e.f_add_scalar_(delta).unwrap();
            })
        };
        nudge(h);
        let up = loss(&state).double_value(&[]);
        nudge(-2.0 * h);
        let down = loss(&state).double_value(&[]);
        nudge(h);
        let numeric = (up - down) / (2.0 * h);
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale < 1e-8 { (analytic - numeric).abs() } else { (analytic - numeric).abs() / scale };
        worst = worst.max(rel);
        checked += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst < 1e-4 && secs < 60.0, format!("worst relative error {worst:.2e} over {checked} parameters, {secs:.1}s"))
}

fn shift_locality() -> Outcome {
    let mut rng = SeededRng::new(21);
    let mut bad = 0;
    for _ in 0..1000 {
        let d = rng.int_inclusive(2, 64);
        let m = rng.int_inclusive(1, d - 1);
        let z = LatentVector((0..d).map(|_| rng.normal() * 3.0).collect());
        let other = LatentVector((0..d).map(|_| rng.normal() * 3.0).collect());
        let shift = ShiftVector((0..m).map(|_| rng.normal()).collect());
        let shifted = apply_shift(&z, &shift).unwrap();
        let (a, b) = latent_swap(&z, &other, m).unwrap();
        let same = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits());
        if !(same(&shifted.0[m..], &z.0[m..]) && same(&a.0[m..], &z.0[m..]) && same(&b.0[m..], &other.0[m..])) {
            bad += 1;
        }
    }
    outcome(bad == 0, format!("{bad} of 1000 cases touched dims m..d"))
}

fn snapshot(state: &TrainState, prefix: &str) -> Vec<Vec<u64>> {
    state
        .nets
        .params_with_prefix(prefix)
        .map(|p| {
            let v: Vec<f64> = p.tensor.detach().to_kind(Kind::Double).view([-1]).try_into().unwrap();
            v.into_iter().map(f64::to_bits).collect()
        })
        .collect()
}

fn small_cohort(size: usize, counts: [usize; 3]) -> Cohort {
    let cfg = CohortConfig {
        phantom: PhantomConfig {
            image_height: size,
            image_width: size,
            supersample: 2,
            ..PhantomConfig::default()
        },
        train_counts: counts,
        test_counts: [2, 1, 2],
        min_swap_pairs: 0,
        ..CohortConfig::default()
    };
    generate_cohort(&cfg, 3).unwrap()
}

fn mode_gating() -> Outcome {
    let config = TrainConfig {
        batch_size: 4,
        timesteps: 50,
        model: ModelConfig {
            image_height: 16,
            image_width: 16,
            ..ModelConfig::tiny()
        },
        ..TrainConfig::default()
    };
    let examples = TrainingExample::from_cohort(&small_cohort(16, [2, 1, 1]), Split::Train).unwrap();
    let images: Vec<&Image> = examples.iter().map(|e| &e.image).collect();
    let masks: Vec<&RegionMasks> = examples.iter().map(|e| &e.masks).collect();
    let mut state = TrainState::new(config).unwrap();
    let (a0, r0) = (snapshot(&state, SHIFT_PREFIX), snapshot(&state, REGRESSOR_PREFIX));
    state.train_step_autoencode(&images).unwrap();
    let (a1, r1) = (snapshot(&state, SHIFT_PREFIX), snapshot(&state, REGRESSOR_PREFIX));
    let frozen = a0 == a1 && r0 == r1;
    let attrs = examples.iter().map(|e| AttributeVector::from_bin(e.diagnosis, 3).unwrap()).collect();
    let batch = ProgressionBatch::new(&images, &masks, attrs, 2, Kind::Float).unwrap();
    state.train_step_progression(&batch).unwrap();
    let a2 = snapshot(&state, SHIFT_PREFIX);
    let changed: usize = a1.iter().zip(&a2).map(|(x, y)| x.iter().zip(y).filter(|(p, q)| p != q).count()).sum();
    outcome(frozen && changed >= 1, format!("auto-encode step froze A and R: {frozen}; progression step changed {changed} A values"))
}

fn analytic_jacobian() -> Outcome {
    let n = 32;
    let scale = DisplacementField {
        rows: Array2::from_shape_fn((n, n), |(r, _)| 0.1 * r as f64),
        cols: Array2::from_shape_fn((n, n), |(_, c)| 0.1 * c as f64),
    };
    let shift = DisplacementField {
        rows: Grid::from_elem((n, n), 3.0),
        cols: Grid::from_elem((n, n), -1.5),
    };
    let interior = ndarray::s![1..n - 1, 1..n - 1];
    let err = |f: &DisplacementField, want: f64| {
        jacobian_determinant(f).slice(interior).iter().map(|j| (j - want).abs()).fold(0.0, f64::max)
    };
    let (e1, e2) = (err(&scale, 1.21), err(&shift, 1.0));
    outcome(e1 <= 1e-6 && e2 <= 1e-6, format!("scaling error {e1:.1e}, translation error {e2:.1e}"))
}

struct Trained {
    state: TrainState,
    cohort: Cohort,
}

/// Keyed by the training config and the rendered training images, so a
/// change to either retrains.
fn cache_dir(config: &TrainConfig, cohort: &Cohort) -> PathBuf {
    let mut digest = Sha256::new();
    digest.update(config.hash().as_bytes());
    for s in cohort.split(Split::Train) {
        for v in s.baseline.image.iter() {
            digest.update(v.to_le_bytes());
        }
    }
    let key = hex::encode(digest.finalize());
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(&key[..16])
}

fn newest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let mut found: Vec<PathBuf> = std::fs::read_dir(dir.join(CHECKPOINT_DIR))
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    found.sort();
    found.pop()
}

/// The default toy run: 64x64 phantoms, d = 64, m = 8, 50 + 100 epochs.
fn toy_model() -> Trained {
    let cohort = generate_cohort(&CohortConfig::toy(), COHORT_SEED).unwrap();
    let config = TrainConfig::toy();
    let dir = cache_dir(&config, &cohort);
    let final_path = dir.join(FINAL_CHECKPOINT);
    if !final_path.exists() {
        let examples = TrainingExample::from_cohort(&cohort, Split::Train).unwrap();
        let options = RunOptions {
            resume: newest_checkpoint(&dir),
            ..RunOptions::default()
        };
        println!("training toy model into {} (cached for later runs)", dir.display());
        let start = Instant::now();
        run_training(&config, &examples, &dir, &options).unwrap();
        println!("toy training took {:.1} min", start.elapsed().as_secs_f64() / 60.0);
    }
    Trained {
        state: load_trained(&final_path).unwrap(),
        cohort,
    }
}

fn subjects(cohort: &Cohort, diagnosis: Diagnosis) -> Vec<&CohortSubject> {
    cohort.split(Split::Test).filter(|s| s.subject.diagnosis == diagnosis).collect()
}

fn phantom_trend(t: &Trained) -> Outcome {
    let ad = subjects(&t.cohort, Diagnosis::Ad);
    let curve = area_by_age_bin(&t.state, &ad, &t.cohort.config.phantom, Diagnosis::Ad, EVAL_SEED).unwrap();
    let bins: Vec<f64> = (1..=AGE_BINS).map(|b| b as f64).collect();
    let series = |r: Region| curve.iter().map(|a| a[r.index()]).collect::<Vec<f64>>();
    let rho = |r: Region| spearman(&bins, &series(r)).unwrap_or(0.0);
    let (rv, rh) = (rho(Region::Ventricles), rho(Region::Hippocampus));
    let v = series(Region::Ventricles);
    let hc = series(Region::Hippocampus);
    outcome(
        rv > 0.8 && rh < -0.5,
        format!(
            "{} AD subjects: ventricle rho {rv:.3} ({:.5}..{:.5}), hippocampus rho {rh:.3} ({:.5}..{:.5})",
            ad.len(),
            v[0],
            v[AGE_BINS - 1],
            hc[0],
            hc[AGE_BINS - 1]
        ),
    )
}

fn identity_preservation(t: &Trained) -> Outcome {
    let cn = subjects(&t.cohort, Diagnosis::Cn);
    let images: Vec<&Image> = cn.iter().map(|s| &s.baseline.image).collect();
    let attrs = vec![AttributeVector::from_bin(Diagnosis::Cn, 1).unwrap(); cn.len()];
    let seeds: Vec<u64> = (0..cn.len()).map(|i| item_seed(EVAL_SEED, i)).collect();
    let subseq = t.state.config.subsequence().unwrap();
    let generated = generate_followups(&t.state.nets, t.state.schedule(), &subseq, &images, &attrs, &seeds).unwrap();
    let (mut own, mut cross) = (Vec::new(), Vec::new());
    for (i, g) in generated.iter().enumerate() {
        let g = to_grid(g);
        for (j, b) in images.iter().enumerate() {
            let p = psnr(&g, &to_grid(b)).unwrap();
            if i == j { own.push(p) } else { cross.push(p) }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (o, c) = (mean(&own), mean(&cross));
    outcome(o - c >= 5.0, format!("own {o:.2} dB vs cross-subject {c:.2} dB over {} CN subjects", cn.len()))
}

fn swap_direction(t: &Trained) -> Outcome {
    let report = run_swap_experiment(&t.state, &t.cohort, EVAL_SEED).unwrap();
    // Same margin as the identity criterion: own-baseline PSNR against the
    // mean over every other test subject's baseline.
    let identity = report.identity_margin_fraction();
    let (grow, hold) = (report.ad_growth_fraction(), report.cn_stasis_fraction());
    outcome(
        !report.rows.is_empty() && grow >= 0.75 && hold >= 0.75 && identity >= 0.9,
        format!(
            "{} pairs: AD-code growth {:.0}%, CN-code stasis {:.0}%, identity margin kept {:.0}%",
            report.rows.len(),
            100.0 * grow,
            100.0 * hold,
            100.0 * identity
        ),
    )
}

fn volumetric_oracle() -> Outcome {
    let mask = |n: usize| Mask::from_shape_fn((20, 20), |(r, c)| if r * 20 + c < n { 1.0 } else { 0.0 });
    // (baseline, true follow-up, generated follow-up) voxel counts and |gen - true| / baseline by hand.
    let cases: [(usize, usize, usize, Ratio<i128>); 5] = [
        (100, 120, 110, Ratio::new(1, 10)),
        (100, 120, 120, Ratio::new(0, 1)),
        (80, 72, 76, Ratio::new(1, 20)),
        (150, 160, 130, Ratio::new(1, 5)),
        (7, 9, 4, Ratio::new(5, 7)),
    ];
    let mut bad = Vec::new();
    for (b, t, g, want) in cases {
        let got = relative_volume_error_exact(voxel_count(&mask(b)), voxel_count(&mask(t)), voxel_count(&mask(g))).unwrap();
        if got != want {
            bad.push(format!("({b},{t},{g}) -> {got}, expected {want}"));
        }
    }
    let zero = relative_volume_error_exact(0, 1, 1).is_err();
    outcome(bad.is_empty() && zero, if bad.is_empty() { "5/5 exact, empty baseline rejected".into() } else { bad.join("; ") })
}

fn metric_identities() -> Outcome {
    let mut rng = SeededRng::new(31);
    let a = Grid::from_shape_fn((48, 40), |_| rng.uniform());
    let b = a.mapv(|v| (v + 0.2 * (rng.uniform() - 0.5)).clamp(0.0, 1.0));
    let same = image_metrics(&a, &a).unwrap();
    let identity = same.psnr == 100.0 && same.ssim == 1.0 && same.mse == 0.0;
    let asym = (ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs();
    let pair = image_metrics(&Grid::zeros((16, 16)), &Grid::from_elem((16, 16), 0.1)).unwrap();
    let closed = (pair.psnr - 20.0).abs() <= 1e-9 && (pair.mse - 0.01).abs() <= 1e-9;
    outcome(
        identity && asym <= 1e-10 && closed,
        format!(
            "identity {identity}, SSIM asymmetry {asym:.1e}, constant pair {:.12} dB / MSE {:.12}",
            pair.psnr, pair.mse
        ),
    )
}

fn registration_sanity() -> Outcome {
    let fixed = Grid::from_shape_fn((64, 64), |(r, c)| {
        let d2 = ((r as f64 - 30.0) / 9.0).powi(2) + ((c as f64 - 33.0) / 12.0).powi(2);
        0.2 + 0.6 * (-d2).exp() + 0.1 * (r as f64 * 0.3).sin() * (c as f64 * 0.2).cos()
    });
    let moving = Grid::from_shape_fn((64, 64), |(r, c)| sample_bilinear(&fixed, r as f64 - 3.0, c as f64));
    let demons = DemonsConfig::default();
    let reg = register_demons(&moving, &fixed, &demons).unwrap();
    let interior = ndarray::s![16..48, 16..48];
    let mean_r = reg.field.rows.slice(interior).mean().unwrap();
    let mean_c = reg.field.cols.slice(interior).mean().unwrap();
    let translation_ok = (mean_r - 3.0).abs() <= 0.5 && mean_c.abs() <= 0.5;

    let cfg = PhantomConfig::default();
    let (mut worst, mut cases) = (0.0f64, 0);
    for seed in 0..6u64 {
        let diag = Diagnosis::ALL[seed as usize % 3];
        let s = PhantomSubject::new("J", 100 + seed, diag, 66.0, &cfg);
        let base = render_phantom(&s, 66.0, &cfg).unwrap();
        for years in [1.0, 3.0, 5.0] {
            let fu = render_phantom(&s, 66.0 + years, &cfg).unwrap();
            let jac = jacobian_determinant(&register_demons(&to_grid(&fu.image), &to_grid(&base.image), &demons).unwrap().field);
            for region in Region::ALL {
                let ratio = fu.masks().unwrap().area(region) / base.masks().unwrap().area(region);
                if !(0.9..=1.3).contains(&ratio) {
                    continue;
                }
                let mean = region_mean(&jac, base.masks().unwrap().get(region)).unwrap();
                worst = worst.max((mean - ratio).abs() / ratio);
                cases += 1;
            }
        }
    }
    outcome(
        translation_ok && worst <= 0.10 && cases > 0,
        format!("translation ({mean_r:.3}, {mean_c:.3}); worst Jacobian/area mismatch {:.2}% over {cases} regions", 100.0 * worst),
    )
}

fn sha(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cohort_cfg = CohortConfig {
        phantom: PhantomConfig {
            image_height: 16,
            image_width: 16,
            supersample: 2,
            ..PhantomConfig::default()
        },
        train_counts: [3, 2, 3],
        test_counts: [3, 1, 3],
        min_swap_pairs: 0,
        ..CohortConfig::default()
    };
    let mut notes = Vec::new();
    let mut all = true;
    let manifests: Vec<String> = (0..2)
        .map(|i| {
            let dir = tmp.path().join(format!("data{i}"));
            write_cohort(&generate_cohort(&cohort_cfg, 5).unwrap(), &dir).unwrap();
            sha(&std::fs::read(dir.join(MANIFEST_FILE)).unwrap())
        })
        .collect();
    all &= manifests[0] == manifests[1];
    notes.push(format!("manifest {}", &manifests[0][..12]));
    let cohort = generate_cohort(&cohort_cfg, 5).unwrap();
    let examples = TrainingExample::from_cohort(&cohort, Split::Train).unwrap();
    for precision in [Precision::F32, Precision::F64] {
        let config = TrainConfig {
            epochs_autoencode: 1,
            epochs_progression: 1,
            batch_size: 4,
            timesteps: 50,
            sample_steps: 5,
            precision,
            model: ModelConfig {
                image_height: 16,
                image_width: 16,
                ..ModelConfig::tiny()
            },
            ..TrainConfig::default()
        };
        let runs: Vec<(String, String)> = (0..2)
            .map(|i| {
                let dir = tmp.path().join(format!("run{precision:?}{i}"));
                let summary = run_training(&config, &examples, &dir, &RunOptions::default()).unwrap();
                let log = sha(&std::fs::read(dir.join(METRICS_FILE)).unwrap());
                assert!(!read_metrics(&dir.join(METRICS_FILE)).unwrap().is_empty());
                let state = load_trained(&summary.final_checkpoint).unwrap();
                let out = infer_followup(&state, &cohort.subjects[0].baseline.image, Diagnosis::Ad, 4.0, 3).unwrap();
                let vol = Volume::from_slices(&[&out]).unwrap();
                (log, sha(&encode_volume(&vol)))
            })
            .collect();
        all &= runs[0] == runs[1];
        notes.push(format!("{precision:?} log {} output {}", &runs[0].0[..12], &runs[0].1[..12]));
    }
    outcome(all, notes.join(", "))
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, o: Outcome| {
        println!("criterion {n:>2} {:<28} {}  {}", name, if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    record(1, "ddim oracle round-trip", ddim_oracle_round_trip());
    record(2, "gradient check", gradient_check());
    record(3, "shift locality", shift_locality());
    record(4, "mode gating", mode_gating());
    record(5, "analytic jacobian", analytic_jacobian());
    record(9, "volumetric oracle", volumetric_oracle());
    record(10, "metric identities", metric_identities());
    record(11, "registration sanity", registration_sanity());
    record(12, "determinism", determinism());
    let trained = toy_model();
    record(6, "phantom end-to-end trend", phantom_trend(&trained));
    record(7, "identity preservation", identity_preservation(&trained));
    record(8, "latent swap direction", swap_direction(&trained));
    results.sort_by_key(|r| r.0);
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} of {} criteria passed in {:.1} min",
        results.len() - failed.len(),
        results.len(),
        start.elapsed().as_secs_f64() / 60.0
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
