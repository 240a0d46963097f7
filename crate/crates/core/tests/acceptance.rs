//! Acceptance suite: one test per criterion, each printing a single
//! `criterion N [PASS|FAIL]` line before asserting.

use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use gradstop::activations::{ActivationSpline, LinearActivation, RationalActivation};
use gradstop::dataops::DataOperator;
use gradstop::flow::{self, ControlSet, Scheme};
use gradstop::foe::{reg_energy, reg_grad, Expert, KernelBank};
use gradstop::imgcore::{add_gaussian_noise, conv2d, conv2d_adjoint, psnr, Boundary, Filter, Image};
use gradstop::model::{restore, ModelFile};
use gradstop::spectral::{self, contrast_factor, SpectralConfig, RESIDUAL_GATE};
use gradstop::stopping::{self, energy_j, IntegralRule, Toy2d};
use gradstop::synth::synthetic_image;
use gradstop::train::{self, loss_batch, param_gradients, DataSource, Params, Sample, Setup, Task, TrainConfig};
use gradstop::tvl2::{self, TvConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: &str, pass: bool, detail: String) {
    println!("criterion {n} [{}] {detail}", if pass { "PASS" } else { "FAIL" });
}

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
    Image::from_fn(w, h, |_, _| rng.random_range(-1.0..1.0))
}

fn zero_mean_filter(rng: &mut ChaCha8Rng, size: usize) -> Filter {
    let mut taps: Vec<f64> = (0..size * size).map(|_| rng.random_range(-1.0..1.0)).collect();
    let m = taps.iter().sum::<f64>() / taps.len() as f64;
    taps.iter_mut().for_each(|t| *t -= m);
    Filter::new(size, taps).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

fn smoke_config() -> TrainConfig {
    TrainConfig {
        num_kernels: 4,
        depth: 5,
        batch_size: 8,
        patch: 32,
        iters: 200,
        seed: 1,
        task: Task::Denoise { sigma: 0.1 },
        ..TrainConfig::default()
    }
}

/// The smoke-trained denoise model shared by criteria 5, 6 and 7.
fn smoke_model() -> &'static ModelFile {
    static MODEL: OnceLock<ModelFile> = OnceLock::new();
    MODEL.get_or_init(|| {
        let cfg = smoke_config();
        let start = Instant::now();
        let ds = train::make_dataset(DataSource::Synthetic, cfg.patch, cfg.seed).unwrap();
        let result = train::ipalm_train(&cfg, &ds).unwrap();
        println!(
            "smoke model: {} iterations in {:.1}s, T = {:.4}, loss {:.4e}",
            cfg.iters,
            start.elapsed().as_secs_f64(),
            result.params.stop_time,
            result.history.last().unwrap().loss
        );
        ModelFile::from_training(&cfg, result.params)
    })
}

#[test]
fn criterion_1_toy2d() {
    let start = Instant::now();
    let r = stopping::run_toy2d().unwrap();
    let secs = start.elapsed().as_secs_f64();
    let cross = r.curve.crossing_cell();
    let argmin = r.curve.argmin();
    let same_cell = cross.is_some_and(|c| r.curve.argmin_cells().contains(&c));
    let so = r.second_order.ratio;
    let pass = same_cell && (so - 0.071).abs() <= 0.01 && r.curve.len() == 59;
    report(
        "1",
        pass,
        format!(
            "toy2d: foc crossing cell {cross:?}, J argmin index {argmin} (T = {:.2}), second-order form {so:.4} (target 0.071 +- 0.01), {secs:.2}s",
            r.t_bar
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_2_integrator_orders() {
    let bank: KernelBank<RationalActivation> = KernelBank::empty();
    let op = DataOperator::identity();
    let b = Image::from_slice(&[0.0]).unwrap();
    let x0 = Image::from_slice(&[1.0]).unwrap();
    let c = ControlSet::new(1.0, &bank, &op, &b, &x0).unwrap();
    let exact = (-1.0f64).exp();
    let depths = [10usize, 100, 1000, 10_000];
    let slope = |scheme: Scheme| {
        let pts: Vec<(f64, f64)> = depths
            .iter()
            .map(|&s| {
                let x = flow::forward(&c, scheme, s).unwrap().final_state().data()[0];
                ((1.0 / s as f64).ln(), (x - exact).abs().ln())
            })
            .collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        sxy / sxx
    };
    let (e, h) = (slope(Scheme::Euler), slope(Scheme::Heun));
    let pass = (e - 1.0).abs() <= 0.15 && (h - 2.0).abs() <= 0.15;
    report(
        "2",
        pass,
        format!("error slopes: Euler {e:.4} (1 +- 0.15), Heun {h:.4} (2 +- 0.15)"),
    );
    assert!(pass);
}

/// Unconstrained copy of the parameters for finite differences.
struct Flat {
    t: f64,
    taps: Vec<Vec<f64>>,
    weights: Vec<Vec<f64>>,
}

impl Flat {
    fn of(p: &Params) -> Self {
        Self {
            t: p.stop_time,
            taps: p.bank.experts().iter().map(|e| e.filter.taps().to_vec()).collect(),
            weights: p
                .bank
                .experts()
                .iter()
                .map(|e| e.activation.weights().to_vec())
                .collect(),
        }
    }

    fn params(self) -> Params {
        let experts = self
            .taps
            .into_iter()
            .zip(self.weights)
            .map(|(k, w)| Expert {
                filter: Filter::new(7, k).unwrap(),
                activation: ActivationSpline::new(w).unwrap(),
            })
            .collect();
        Params {
            stop_time: self.t,
            bank: KernelBank::new(experts),
        }
    }
}

fn param_fd_error(scheme: Scheme) -> f64 {
    let cfg = TrainConfig {
        num_kernels: 2,
        num_weights: 31,
        depth: 5,
        scheme,
        t_init: 0.8,
        weight_slope: 0.6,
        ..TrainConfig::default()
    };
    let mut params = train::init_params(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let experts = params
        .bank
        .experts()
        .iter()
        .map(|e| {
            let w: Vec<f64> = e
                .activation
                .weights()
                .iter()
                .map(|v| v + rng.random_range(-0.05..0.05))
                .collect();
            Expert {
                filter: e.filter.clone(),
                activation: ActivationSpline::new(w).unwrap(),
            }
        })
        .collect();
    params.bank = KernelBank::new(experts);
    let op = cfg.task.operator(1.0).unwrap();
    let target = synthetic_image(16, 16, 5);
    let x0 = cfg.task.degrade(&target, &op, 105).unwrap();
    let batch = [Sample { x0, target }];
    let setup = Setup { op, scheme, depth: 5 };
    let (_, g) = param_gradients(&params, &setup, &batch).unwrap();

    let h = 1e-5;
    let fd = |edit: &dyn Fn(&mut Flat, f64)| {
        let mut up = Flat::of(&params);
        edit(&mut up, h);
        let mut dn = Flat::of(&params);
        edit(&mut dn, -h);
        let loss = |f: Flat| loss_batch(&f.params(), &setup, &batch).unwrap();
        (loss(up) - loss(dn)) / (2.0 * h)
    };
    let mut an = vec![g.d_t];
    let mut num = vec![fd(&|f, e| f.t += e)];
    for k in 0..2 {
        for i in (0..49).step_by(6) {
            an.push(g.d_kernels[k][i]);
            num.push(fd(&|f, e| f.taps[k][i] += e));
        }
        for j in (0..31).step_by(4) {
            an.push(g.d_weights[k][j]);
            num.push(fd(&|f, e| f.weights[k][j] += e));
        }
    }
    // each block is checked on its own so a small block is not masked
    let block_err = |idx: Vec<usize>| {
        let d: f64 = idx.iter().map(|&i| (an[i] - num[i]).powi(2)).sum::<f64>().sqrt();
        let n: f64 = idx.iter().map(|&i| num[i].powi(2)).sum::<f64>().sqrt();
        d / n.max(1e-300)
    };
    // per expert: 9 sampled taps then 8 sampled weights, after dT at index 0
    let per_k = 9 + 8;
    let kern: Vec<usize> = (0..2).flat_map(|k| (0..9).map(move |i| 1 + k * per_k + i)).collect();
    let wts: Vec<usize> = (0..2)
        .flat_map(|k| (0..8).map(move |j| 1 + k * per_k + 9 + j))
        .collect();
    block_err(vec![0]).max(block_err(kern)).max(block_err(wts))
}

#[test]
fn criterion_3_adjoints_and_gradients() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_adj: f64 = 0.0;
    for case in 0..100 {
        let (w, h) = (rng.random_range(5..20), rng.random_range(5..20));
        let x = random_image(&mut rng, w, h);
        let y = random_image(&mut rng, w, h);
        let f = zero_mean_filter(&mut rng, if case % 2 == 0 { 7 } else { 5 });
        let boundary = if case % 3 == 0 {
            Boundary::Zero
        } else {
            Boundary::Reflect
        };
        let d = (conv2d(&x, &f, boundary).dot(&y) - x.dot(&conv2d_adjoint(&y, &f, boundary))).abs();
        let op = DataOperator::gaussian_blur(rng.random_range(0.5..3.0)).unwrap();
        let d2 = (op.apply(&x).dot(&y) - x.dot(&op.apply_adjoint(&y))).abs();
        worst_adj = worst_adj.max(d).max(d2);
    }

    let mut bank_rng = ChaCha8Rng::seed_from_u64(8);
    let experts = (0..3)
        .map(|_| {
            let mut f = zero_mean_filter(&mut bank_rng, 7);
            let n = f.frobenius_sq().sqrt();
            f = Filter::new(7, f.taps().iter().map(|t| t / n).collect()).unwrap();
            let w = (0..63).map(|_| bank_rng.random_range(-0.1..0.1)).collect();
            Expert {
                filter: f,
                activation: ActivationSpline::new(w).unwrap(),
            }
        })
        .collect();
    let bank = KernelBank::new(experts);
    let x = synthetic_image(16, 16, 4);
    let dir = random_image(&mut rng, 16, 16);
    let h = 1e-6;
    let dd = |e: &dyn Fn(&Image) -> f64| (e(&x.plus_scaled(h, &dir)) - e(&x.plus_scaled(-h, &dir))) / (2.0 * h);
    let reg_err = rel(reg_grad(&bank, &x).dot(&dir), dd(&|z| reg_energy(&bank, z)));
    let op = DataOperator::gaussian_blur(1.5).unwrap().with_weight(2.0).unwrap();
    let b = synthetic_image(16, 16, 9);
    let data_err = rel(
        op.data_grad(&x, &b).unwrap().dot(&dir),
        dd(&|z| op.energy(z, &b).unwrap()),
    );
    let tv = TvConfig {
        nu: 0.3,
        eps: 1e-2,
        ..TvConfig::default()
    };
    let g = add_gaussian_noise(&x, 0.1, 1).unwrap();
    let tv_err = rel(
        tvl2::tv_grad(&x, &g, &tv).unwrap().dot(&dir),
        dd(&|z| tvl2::tv_energy(z, &g, &tv).unwrap()),
    );

    let (pe, ph) = (param_fd_error(Scheme::Euler), param_fd_error(Scheme::Heun));
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_adj <= 1e-10 && reg_err <= 1e-5 && data_err <= 1e-5 && tv_err <= 1e-5 && pe <= 1e-4 && ph <= 1e-4;
    report(
        "3",
        pass,
        format!(
            "adjoint gap {worst_adj:.1e} (<= 1e-10, 100 cases); FD rel err reg {reg_err:.1e}, data {data_err:.1e}, tv {tv_err:.1e} (<= 1e-5); params Euler {pe:.1e}, Heun {ph:.1e} (<= 1e-4); {secs:.1}s"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_4_foc_vs_fd() {
    let toy = Toy2d::new();
    let t = 1.2;
    let mut gaps = Vec::new();
    let mut last = (0.0, 0.0);
    for depth in [100, 1000] {
        let c = toy.control(t).unwrap();
        let p = stopping::evaluate(&c, Scheme::Euler, depth, &toy.target, IntegralRule::NodeAverage).unwrap();
        let j = |t: f64| {
            let traj = flow::forward_euler(&toy.control(t).unwrap(), depth).unwrap();
            energy_j(&traj, &toy.target).unwrap()
        };
        let fd = (j(t + 1e-5) - j(t - 1e-5)) / 2e-5;
        gaps.push((p.foc - fd).abs());
        last = (p.foc, fd);
    }
    let (foc, fd) = last;
    let ratio = gaps[0] / gaps[1];
    let pass = (foc - fd).abs() <= 1e-3f64.max(0.05 * fd.abs()) && (5.0..=20.0).contains(&ratio);
    report(
        "4",
        pass,
        format!(
            "at T = {t}, S = 1000: foc {foc:.6}, FD {fd:.6}, gap {:.2e}; gap S=100 / S=1000 = {ratio:.2} (about 10)",
            gaps[1]
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5a_tvl2_interior_maximum() {
    let start = Instant::now();
    let clean = synthetic_image(128, 128, 2024);
    let g = add_gaussian_noise(&clean, 0.1, 7).unwrap();
    let nus = [0.4, 0.6, 0.8, 1.2, 1.6];
    let iters: Vec<usize> = (0..=80).map(|k| k * 100).collect();
    let s = tvl2::tv_sweep(&g, &clean, &nus, &iters, &TvConfig::default()).unwrap();
    let peaks: Vec<String> = (0..nus.len())
        .map(|j| {
            format!(
                "nu {} peak {} it {:.2} dB",
                nus[j],
                iters[s.best_iter(j)],
                s.psnr[j][s.best_iter(j)]
            )
        })
        .collect();
    let pass = (0..nus.len()).all(|j| s.has_interior_maximum(j));
    report(
        "5a",
        pass,
        format!(
            "tvl2 128x128 sigma 0.1, input {:.2} dB: {}; {:.1}s",
            s.psnr[0][0],
            peaks.join(", "),
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5b_smoke_model_early_stopping() {
    let start = Instant::now();
    let model = smoke_model();
    let t = model.stop_time();
    // T is optimal for the expected loss, so the comparison uses the mean over
    // the held-out set; single images may peak on either side
    let n = 8u64;
    let mut mean = [0.0f64; 4];
    let mut per_image_peaks = 0;
    let mut lines = Vec::new();
    for i in 0..n {
        let clean = synthetic_image(64, 64, 900 + i);
        let noisy = add_gaussian_noise(&clean, 0.1, 500 + i).unwrap();
        let p = |tt: f64| psnr(&restore(model, &noisy, Some(tt)).unwrap(), &clean, 1.0).unwrap();
        let v = [psnr(&noisy, &clean, 1.0).unwrap(), p(0.5 * t), p(t), p(1.5 * t)];
        if v[2] >= v[1] && v[2] >= v[3] {
            per_image_peaks += 1;
        }
        mean.iter_mut().zip(v).for_each(|(m, x)| *m += x / n as f64);
        lines.push(format!("{:.2}/{:.2}/{:.2}/{:.2}", v[0], v[1], v[2], v[3]));
    }
    let ok = mean[2] >= mean[1] && mean[2] >= mean[3] && mean[2] - mean[0] >= 3.0;
    report(
        "5b",
        ok,
        format!(
            "smoke model T = {t:.4}; mean PSNR in/T/2/T/3T/2 = {:.2}/{:.2}/{:.2}/{:.2} dB over {n} held-out images (gain {:.2} dB >= 3); {per_image_peaks}/{n} images peak at T [{}]; {:.1}s incl. training",
            mean[0],
            mean[1],
            mean[2],
            mean[3],
            mean[2] - mean[0],
            lines.join(", "),
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_6_finite_stopping_time() {
    let model = smoke_model();
    let t = model.stop_time();
    // the stopping time is only constrained from below (T >= 0); no upper bound exists
    let pass = t.is_finite() && t > 0.0;
    report(
        "6",
        pass,
        format!("smoke-trained T = {t:.6}, finite and > 0, no upper box constraint"),
    );
    assert!(pass);
}

#[test]
fn criterion_7_spectral() {
    let start = Instant::now();
    // (a) single kernel, identity activation: the operator is K^T K
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    // a feasible kernel: zero mean and unit norm
    let f = zero_mean_filter(&mut rng, 7);
    let norm = f.frobenius_sq().sqrt();
    let bank = KernelBank::new(vec![Expert {
        filter: Filter::new(7, f.taps().iter().map(|t| t / norm).collect()).unwrap(),
        activation: LinearActivation { slope: 1.0 },
    }]);
    let n = 16;
    let dim = n * n;
    let mut m = nalgebra::DMatrix::zeros(dim, dim);
    for j in 0..dim {
        let mut e = Image::zeros(n, n);
        e.data_mut()[j] = 1.0;
        let col = bank.grad(&e);
        for i in 0..dim {
            m[(i, j)] = col.data()[i];
        }
    }
    let eig = nalgebra::SymmetricEigen::new(m).eigenvalues;
    let lin_cfg = SpectralConfig {
        count: 4,
        size: n,
        iters: 10_000,
        seed: 2,
        tol: 1e-9,
        ..SpectralConfig::default()
    };
    let lin = spectral::solve_eigenpairs(&bank, &[synthetic_image(48, 48, 3)], &lin_cfg).unwrap();
    let lin_dist = lin
        .iter()
        .map(|p| eig.iter().map(|&e| (e - p.lambda).abs()).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max);
    let pass_a = lin_dist <= 1e-6;

    // (b) trained small model
    let model = smoke_model();
    let t_model = Instant::now();
    let sources: Vec<Image> = (0..4).map(|i| synthetic_image(64, 64, 900 + i)).collect();
    let cfg = SpectralConfig {
        count: 16,
        size: 16,
        iters: 10_000,
        seed: 0,
        tol: 1e-5,
        ..SpectralConfig::default()
    };
    let pairs = spectral::solve_eigenpairs(model.bank(), &sources, &cfg).unwrap();
    let converged = pairs.iter().filter(|p| p.residual <= RESIDUAL_GATE).count();
    let pass_b = converged * 10 >= pairs.len() * 9;
    let (t, s) = (model.stop_time(), model.depth);
    let h = t / s as f64;
    let identity_ok = pairs.iter().all(|p| {
        let g = model.bank().grad(&p.v);
        let step = p.v.plus_scaled(-h, &g);
        let lhs = step.plus_scaled(-contrast_factor(p.lambda, t, s), &p.v).norm();
        lhs <= h * p.residual * (1.0 + 1e-9) + 1e-15
    });
    let residuals: Vec<String> = pairs.iter().map(|p| format!("{:.0e}", p.residual)).collect();
    let pass = pass_a && pass_b && identity_ok;
    report(
        "7",
        pass,
        format!(
            "(a) linear 16x16 max distance to dense spectrum {lin_dist:.1e} (<= 1e-6) {}; (b) {converged}/16 pairs with residual <= 1e-4 (need >= 90%) {} [{}], one-step identity {}; spectral time {:.1}s (model pairs {:.1}s)",
            if pass_a { "ok" } else { "FAILED" },
            if pass_b { "ok" } else { "FAILED" },
            residuals.join(" "),
            if identity_ok { "holds" } else { "VIOLATED" },
            start.elapsed().as_secs_f64(),
            t_model.elapsed().as_secs_f64()
        ),
    );
    assert!(pass_a, "linear spectrum check failed");
    assert!(identity_ok, "one-step identity failed");
    assert!(pass_b, "only {converged}/16 eigenpairs converged");
}

#[test]
fn criterion_8_contrast_factor() {
    let c = contrast_factor(11.696, 0.054, 1);
    let c20 = contrast_factor(11.696, 0.054 * 20.0, 20);
    let pass = (0.367..=0.369).contains(&c) && (c - c20).abs() < 1e-12;
    report(
        "8",
        pass,
        format!("contrast_factor(11.696, T/S = 0.054) = {c:.6} (in [0.367, 0.369])"),
    );
    assert!(pass);
}

fn gradstop(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_gradstop"))
        .args(args)
        .env("GRADSTOP_THREADS", "2")
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "gradstop {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn criterion_9_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let mut same = Vec::new();
    let run_twice = |name: &str, make: &dyn Fn(&Path) -> Vec<String>| {
        let outs: Vec<_> = (0..2)
            .map(|k| {
                let out = tmp.path().join(format!("{name}{k}"));
                let args = make(&out);
                let args: Vec<&str> = args.iter().map(String::as_str).collect();
                gradstop(&args);
                dir_bytes(&out)
            })
            .collect();
        !outs[0].is_empty() && outs[0] == outs[1]
    };
    let p = |d: &Path| d.to_str().unwrap().to_string();
    same.push((
        "toy2d",
        run_twice("toy", &|d| vec!["toy2d".into(), "--out".into(), p(d)]),
    ));
    let train_args = |d: &Path| -> Vec<String> {
        "train --nk 2 --depth 3 --iters 4 --batch 2 --patch 16 --seed 5 --out"
            .split(' ')
            .map(String::from)
            .chain([p(d)])
            .collect()
    };
    same.push(("train", run_twice("train", &train_args)));
    let model = tmp.path().join("train0/model.bin");
    let m = p(&model);
    same.push((
        "sweep",
        run_twice("sweep", &|d| {
            vec![
                "sweep",
                "--model",
                &m,
                "--count",
                "2",
                "--size",
                "24",
                "--t-count",
                "4",
                "--seed",
                "3",
                "--out",
            ]
            .into_iter()
            .map(String::from)
            .chain([p(d)])
            .collect()
        }),
    ));
    same.push((
        "spectra",
        run_twice("spectra", &|d| {
            vec![
                "spectra", "--model", &m, "--count", "3", "--size", "12", "--iters", "300", "--seed", "4", "--out",
            ]
            .into_iter()
            .map(String::from)
            .chain([p(d)])
            .collect()
        }),
    ));
    let pass = same.iter().all(|s| s.1);
    let detail: Vec<String> = same
        .iter()
        .map(|(n, ok)| format!("{n} {}", if *ok { "identical" } else { "DIFFERS" }))
        .collect();
    report("9", pass, format!("two runs each: {}", detail.join(", ")));
    assert!(pass);
}
