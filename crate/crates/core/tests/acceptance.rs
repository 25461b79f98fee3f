//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL`
//! verdict line for its criterion (run with `-- --nocapture` to see all
//! lines together) and then asserts, so a failing criterion also fails
//! the build.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use loadscale::config::derive_seed;
use loadscale::eval::{
    run_ablation_suite, AblationConfig, SynthHarmonic, SynthSpec, Variant,
};
use loadscale::features::{FeatureSpec, HarmonicBlock};
use loadscale::hierarchy::{
    downscale_stages, train_pipeline, BlendConfig, PipelinePlan, StagePlan,
};
use loadscale::ingest::{make_pairs, split_and_normalize, Aggregation, RawSeries};
use loadscale::linalg::Mat;
use loadscale::model::{CellKind, ModelConfig, ModelParams};
use loadscale::train::{backward, fd_gradient, fit, TrainConfig};
use loadscale::uncertainty::{
    estimate_residual_model, intervals, rejection_rates,
};
use loadscale::eval::WindowSpec;

fn verdict(name: &str, pass: bool, detail: &str) {
    println!("acceptance: {name} -> {} [{detail}]", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name} failed: {detail}");
}

fn synth(days: usize, noise_sd: f64, seed: u64) -> RawSeries {
    loadscale::eval::synth_generate(&SynthSpec {
        level: 100.0,
        slope: 0.002,
        harmonics: vec![
            SynthHarmonic { amplitude: 12.0, period: 24.0, phase: 3.0 },
            SynthHarmonic { amplitude: 3.0, period: 168.0, phase: 20.0 },
            SynthHarmonic { amplitude: 4.0, period: 28.0, phase: 11.0 },
            SynthHarmonic { amplitude: 4.0, period: 21.0, phase: 2.0 },
        ],
        noise_sd,
        n_days: days,
        seed,
    })
}

/// Analytic gradients of the composite training loss match central
/// finite differences for every parameter tensor, on all four
/// seasonal-branch/attention flag combinations.
#[test]
fn gradient_oracle() {
    let start = Instant::now();
    let fspec = FeatureSpec {
        blocks: vec![HarmonicBlock { period: 7.0, harmonics: 2 }],
        sub_periods: 4,
        phase0: 0.0,
    };
    let weights = fspec.penalty_row_weights();
    let t_len = 5;
    let mut worst_rel = 0.0_f64;
    let mut worst_at = String::new();
    let mut pass = true;

    for (use_fourier, use_attention) in [(false, false), (false, true), (true, false), (true, true)]
    {
        let cfg = ModelConfig {
            latent_width: 8,
            token_dim: 8,
            heads: 2,
            ffn_width: 8,
            sub_periods: 4,
            feat_width: fspec.feat_width(),
            use_fourier,
            use_attention,
            cell: CellKind::Gru,
        };
        let params = ModelParams::init(&cfg, 2024);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0: Vec<f64> = (0..t_len).map(|_| rng.random_range(-1.5..1.5)).collect();
        let feats: Vec<Mat> = if use_fourier {
            (0..t_len).map(|t| fspec.matrix(t as i64)).collect()
        } else {
            Vec::new()
        };
        let targets: Vec<Mat> = (0..t_len)
            .map(|_| {
                let mut m = Mat::zeros(cfg.sub_periods, 1);
                for v in m.data_mut() {
                    *v = rng.random_range(-1.0..1.0);
                }
                m
            })
            .collect();
        let tc = TrainConfig { lambda_f: 0.05, ..TrainConfig::default() };
        let res = backward(&params, &cfg, &x0, &feats, &targets, &weights, &tc).unwrap();
        let analytic = res.grads.flatten();
        let fd =
            fd_gradient(&params, &cfg, &x0, &feats, &targets, &weights, tc.lambda_f, 1e-6);
        assert_eq!(analytic.len(), fd.len());

        let mut layout: Vec<(&'static str, usize)> = Vec::new();
        params.for_each_tensor(|name, m| layout.push((name, m.rows() * m.cols())));
        let mut offset = 0;
        for (name, len) in layout {
            for i in offset..offset + len {
                let diff = (analytic[i] - fd[i]).abs();
                let rel = diff / analytic[i].abs().max(fd[i].abs()).max(1e-12);
                if !(diff < 1e-8 || rel < 1e-4) {
                    pass = false;
                }
                if diff >= 1e-8 && rel > worst_rel {
                    worst_rel = rel;
                    worst_at = format!(
                        "{name}[{}] flags=({use_fourier},{use_attention})",
                        i - offset
                    );
                }
            }
            offset += len;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let within_budget = elapsed < 120.0;
    verdict(
        "gradient oracle",
        pass && within_budget,
        &format!(
            "4 flag combos, worst rel err {:.2e}{}, {:.1}s",
            worst_rel,
            if worst_at.is_empty() { String::new() } else { format!(" at {worst_at}") },
            elapsed
        ),
    );
}

/// The seasonal feature matrix reproduces analytic sin/cos values at
/// rational phase points to 1e-12 and satisfies sin^2 + cos^2 = 1 for
/// every (sin, cos) pair.
#[test]
fn fourier_exactness() {
    use std::f64::consts::TAU;
    let mut max_err = 0.0_f64;
    let mut max_pair = 0.0_f64;

    // Hand values: one daily harmonic over four sub-periods at t = 0
    // hits angles 0, pi/2, pi, 3pi/2.
    let quarter = FeatureSpec {
        blocks: vec![HarmonicBlock { period: 1.0, harmonics: 1 }],
        sub_periods: 4,
        phase0: 0.0,
    };
    let m = quarter.matrix(0);
    let expect = [(0.0, 1.0), (1.0, 0.0), (0.0, -1.0), (-1.0, 0.0)];
    for (s, (sin_v, cos_v)) in expect.iter().enumerate() {
        max_err = max_err.max((m[(s, 0)] - sin_v).abs());
        max_err = max_err.max((m[(s, 1)] - cos_v).abs());
    }

    // General oracle: multi-block spec with a rational phase offset,
    // recomputed entry by entry from the closed form.
    let spec = FeatureSpec {
        blocks: vec![
            HarmonicBlock { period: 1.0, harmonics: 3 },
            HarmonicBlock { period: 7.0, harmonics: 2 },
        ],
        sub_periods: 24,
        phase0: 0.25,
    };
    for t in [-3_i64, 0, 5, 123] {
        let m = spec.matrix(t);
        let mut col = 0;
        for block in &spec.blocks {
            for k in 1..=block.harmonics {
                for s in 0..spec.sub_periods {
                    let pos = t as f64 + spec.phase0 + s as f64 / spec.sub_periods as f64;
                    let angle = TAU * k as f64 / block.period * pos;
                    max_err = max_err.max((m[(s, col)] - angle.sin()).abs());
                    max_err = max_err.max((m[(s, col + 1)] - angle.cos()).abs());
                    let pair = m[(s, col)] * m[(s, col)] + m[(s, col + 1)] * m[(s, col + 1)];
                    max_pair = max_pair.max((pair - 1.0).abs());
                }
                col += 2;
            }
        }
    }
    let pass = max_err < 1e-12 && max_pair < 1e-12;
    verdict(
        "fourier exactness",
        pass,
        &format!("max analytic err {max_err:.2e}, max pair-identity err {max_pair:.2e}"),
    );
}

/// Residual covariance equals the hand-computed unbiased estimate on a
/// three-sample two-horizon fixture, and stays positive semidefinite on
/// random fixtures.
#[test]
fn covariance_oracle() {
    // Residuals (1,2), (3,0), (5,4): mean (3,2), unbiased covariance
    // [[4,2],[2,4]].
    let y = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 0.0], vec![5.0, 4.0]]);
    let yhat = Mat::zeros(3, 2);
    let rm = estimate_residual_model(&y, &yhat).unwrap();
    let mut max_err = (rm.mean_r[0] - 3.0).abs().max((rm.mean_r[1] - 2.0).abs());
    let expect = [[4.0, 2.0], [2.0, 4.0]];
    for (i, row) in expect.iter().enumerate() {
        for (j, want) in row.iter().enumerate() {
            max_err = max_err.max((rm.sigma[(i, j)] - want).abs());
        }
    }
    let exact = max_err < 1e-12;

    let mut psd = true;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..20 {
        let w = rng.random_range(8..40);
        let k = rng.random_range(2..6);
        // Correlated residuals through a random mixing matrix.
        let mut mix = Mat::zeros(k, k);
        for v in mix.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let mut y = Mat::zeros(w, k);
        let mut yh = Mat::zeros(w, k);
        for t in 0..w {
            let g: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            for h in 0..k {
                let base = rng.random_range(-5.0..5.0);
                yh[(t, h)] = base;
                let noise: f64 = (0..k).map(|j| mix[(h, j)] * g[j]).sum();
                y[(t, h)] = base + noise;
            }
        }
        let rm = estimate_residual_model(&y, &yh).unwrap();
        psd &= rm.covariance_is_psd();
    }
    verdict(
        "covariance oracle",
        exact && psd,
        &format!("fixture max err {max_err:.2e}, 20/20 random fixtures PSD = {psd}"),
    );
}

/// On synthetic forecasts with i.i.d. Gaussian residuals and alpha =
/// 0.05, the mean rejection rate over 600 windows lands inside
/// [0.03, 0.07] and the per-horizon rates bracket the mean.
#[test]
fn calibration_property() {
    let start = Instant::now();
    // Lower-triangular mixing so residuals are correlated across
    // horizons with known covariance L L^T.
    let l = [[1.0, 0.0, 0.0], [0.5, 1.2, 0.0], [-0.3, 0.4, 0.8]];
    let k = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let draw_window = |rng: &mut ChaCha8Rng, yhat: &mut Mat, y: &mut Mat, t: usize| {
        let g: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for h in 0..k {
            let base = 50.0 + rng.random_range(-10.0..10.0);
            let noise: f64 = (0..=h).map(|j| l[h][j] * g[j]).sum();
            yhat[(t, h)] = base;
            y[(t, h)] = base + noise;
        }
    };

    let (n_train, n_test) = (800, 600);
    let mut yhat_train = Mat::zeros(n_train, k);
    let mut y_train = Mat::zeros(n_train, k);
    for t in 0..n_train {
        draw_window(&mut rng, &mut yhat_train, &mut y_train, t);
    }
    let rm = estimate_residual_model(&y_train, &yhat_train).unwrap();

    let alpha = 0.05;
    let mut yhat_test = Mat::zeros(n_test, k);
    let mut y_test = Mat::zeros(n_test, k);
    for t in 0..n_test {
        draw_window(&mut rng, &mut yhat_test, &mut y_test, t);
    }
    let sets: Vec<_> = (0..n_test)
        .map(|t| {
            let row: Vec<f64> = (0..k).map(|h| yhat_test[(t, h)]).collect();
            intervals(&row, &rm, alpha).unwrap()
        })
        .collect();
    let report = rejection_rates(&y_test, &sets);

    let elapsed = start.elapsed().as_secs_f64();
    let in_band = report.mean >= 0.03 && report.mean <= 0.07;
    let ordered = report.min <= report.mean && report.mean <= report.max;
    verdict(
        "calibration property",
        in_band && ordered && elapsed < 60.0,
        &format!(
            "{n_test} windows, mean {:.4} in [0.03,0.07], min {:.4} <= mean <= max {:.4}, {:.1}s",
            report.mean, report.min, report.max, elapsed
        ),
    );
}

/// On seeded synthetic data with daily and weekly harmonics plus trend,
/// the full model beats the bare recurrent variant in at least two of
/// three seeds and posts the lowest mean RMSE in at least two of three.
#[test]
fn ablation_ordering() {
    let start = Instant::now();
    let raw = synth(180, 1.0, 20260825);
    let features = FeatureSpec {
        blocks: vec![
            HarmonicBlock { period: 1.0, harmonics: 3 },
            HarmonicBlock { period: 7.0, harmonics: 8 },
        ],
        sub_periods: 24,
        phase0: 0.0,
    };
    let cfg = AblationConfig {
        k: 24,
        train_fraction: 0.75,
        aggregation: Aggregation::Mean,
        features: features.clone(),
        model: ModelConfig {
            latent_width: 32,
            token_dim: 16,
            heads: 4,
            ffn_width: 32,
            sub_periods: 24,
            feat_width: features.feat_width(),
            use_fourier: true,
            use_attention: true,
            cell: CellKind::Gru,
        },
        train: TrainConfig {
            lr: 1e-3,
            epochs: 120,
            seq_len: 48,
            ..TrainConfig::default()
        },
        windows: WindowSpec { n_windows: 40, stride: 1, horizon: 24 },
        alpha: 0.05,
        baseline: loadscale::baseline::HarmonicSpec {
            blocks: vec![
                HarmonicBlock { period: 24.0, harmonics: 3 },
                HarmonicBlock { period: 168.0, harmonics: 6 },
                HarmonicBlock { period: 21.0, harmonics: 1 },
            ],
            include_trend: true,
        },
    };
    let seeds: Vec<u64> = (0..3).map(|i| derive_seed(9, &format!("ablation/{i}"))).collect();
    let variants = [Variant::SimpleRnn, Variant::RnnAttn, Variant::FourierRnn];
    let outcomes = run_ablation_suite(&raw, &cfg, &seeds, &variants).unwrap();

    let rmse_of = |variant: Variant, seed: u64| -> f64 {
        outcomes
            .iter()
            .find(|o| o.variant == variant.name() && o.seed == seed)
            .and_then(|o| o.report.as_ref())
            .map(|r| r.mean_rmse)
            .unwrap_or(f64::INFINITY)
    };

    let mut beats_simple = 0;
    let mut lowest = 0;
    let mut lines = Vec::new();
    for &seed in &seeds {
        let simple = rmse_of(Variant::SimpleRnn, seed);
        let attn = rmse_of(Variant::RnnAttn, seed);
        let fourier = rmse_of(Variant::FourierRnn, seed);
        if fourier < simple {
            beats_simple += 1;
        }
        if fourier < simple && fourier < attn {
            lowest += 1;
        }
        lines.push(format!("seed {seed}: simple {simple:.3} attn {attn:.3} fourier {fourier:.3}"));
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = beats_simple >= 2 && lowest >= 2 && elapsed < 900.0;
    verdict(
        "ablation ordering",
        pass,
        &format!(
            "{}; beats simple {beats_simple}/3, lowest {lowest}/3, {:.0}s",
            lines.join("; "),
            elapsed
        ),
    );
}

/// A two-stage year-to-day-to-hour pipeline expands one yearly value
/// into 8760 hourly values, and with reconciliation on, every stage's
/// block aggregates match their drivers to 1e-9.
#[test]
fn hierarchical_consistency() {
    let raw = synth(730, 0.5, 31);
    let stage = |name: &str, k: usize, latent: usize, seed: u64| StagePlan {
        name: name.into(),
        k_stage: k,
        model: ModelConfig {
            latent_width: latent,
            token_dim: 8,
            heads: 2,
            ffn_width: 16,
            sub_periods: k,
            feat_width: 0,
            use_fourier: false,
            use_attention: false,
            cell: CellKind::Gru,
        },
        features: FeatureSpec { blocks: vec![], sub_periods: k, phase0: 0.0 },
        train: TrainConfig { epochs: 3, seq_len: 16, seed, ..TrainConfig::default() },
    };
    let plan = PipelinePlan {
        stages: vec![stage("year_to_day", 365, 16, 5), stage("day_to_hour", 24, 16, 6)],
        blend: BlendConfig { alpha: 0.7 },
        aggregation: Aggregation::Mean,
    };
    let (pipeline, _histories) = train_pipeline(&raw, &plan).unwrap();

    let yearly = 104.2;
    let outputs = downscale_stages(&pipeline, &[yearly], true).unwrap();
    let shapes_ok = outputs.len() == 2 && outputs[0].len() == 365 && outputs[1].len() == 8760;

    // Stage 1: the single 365-day block must aggregate back to the
    // yearly driver. Stage 2: each 24-hour block must aggregate back to
    // the day that drove it.
    let mut max_gap = (outputs[0].iter().sum::<f64>() / 365.0 - yearly).abs();
    for (d, &day) in outputs[0].iter().enumerate() {
        let block = &outputs[1][d * 24..(d + 1) * 24];
        let gap = (block.iter().sum::<f64>() / 24.0 - day).abs();
        max_gap = max_gap.max(gap);
    }
    verdict(
        "hierarchical consistency",
        shapes_ok && max_gap < 1e-9,
        &format!(
            "outputs 365 + {} values, max aggregate gap {max_gap:.2e}",
            outputs[1].len()
        ),
    );
}

/// Two identical end-to-end runs of the binary (same config, same seed)
/// produce bitwise-identical checkpoints and reports.
#[test]
fn determinism() {
    let bin = env!("CARGO_BIN_EXE_loadscale");
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let run = |args: &[&str]| {
        let out = std::process::Command::new(bin)
            .args(args)
            .current_dir(root)
            .output()
            .expect("binary runs");
        assert!(
            out.status.success(),
            "command {:?} failed: {}",
            args,
            String::from_utf8_lossy(&out.stderr)
        );
    };
    run(&["synth", "--days", "30", "--seed", "7", "--out", "s.csv"]);
    for tag in ["a", "b"] {
        run(&[
            "train", "--data", "s.csv", "--out-dir", &format!("run_{tag}"), "--epochs", "25",
            "--seed", "11",
        ]);
        run(&[
            "evaluate",
            "--checkpoint",
            &format!("run_{tag}/checkpoint.json"),
            "--data",
            "s.csv",
            "--windows",
            "5",
            "--out",
            &format!("eval_{tag}"),
        ]);
    }
    let bytes = |p: &str| std::fs::read(root.join(p)).unwrap();
    let ck_same = bytes("run_a/checkpoint.json") == bytes("run_b/checkpoint.json");
    let loss_same = bytes("run_a/loss.csv") == bytes("run_b/loss.csv");
    let report_same = bytes("eval_a/report.json") == bytes("eval_b/report.json");
    let rmse_same = bytes("eval_a/rmse.csv") == bytes("eval_b/rmse.csv");
    verdict(
        "determinism",
        ck_same && loss_same && report_same && rmse_same,
        &format!(
            "checkpoint {ck_same}, loss curve {loss_same}, report {report_same}, rmse {rmse_same}"
        ),
    );
}

/// Training the full model on well-posed synthetic data cuts the
/// composite loss by at least half between epoch 0 and the final epoch.
#[test]
fn loss_decrease() {
    let raw = synth(60, 1.0, 77);
    let pairs = make_pairs(&raw, 24, Aggregation::Mean).unwrap();
    let (train_ds, _test_ds) = split_and_normalize(&pairs, 0.75, 24).unwrap();
    let features = FeatureSpec {
        blocks: vec![
            HarmonicBlock { period: 1.0, harmonics: 3 },
            HarmonicBlock { period: 7.0, harmonics: 8 },
        ],
        sub_periods: 24,
        phase0: 0.0,
    };
    let cfg = ModelConfig {
        latent_width: 32,
        token_dim: 16,
        heads: 4,
        ffn_width: 32,
        sub_periods: 24,
        feat_width: features.feat_width(),
        use_fourier: true,
        use_attention: true,
        cell: CellKind::Gru,
    };
    let tc = TrainConfig { lr: 3e-3, epochs: 80, seq_len: 32, seed: 1, ..TrainConfig::default() };
    let (_params, history) = fit(&train_ds, &cfg, &features, &tc).unwrap();
    let first = history.first().unwrap().loss_total;
    let last = history.last().unwrap().loss_total;
    let pass = last <= 0.5 * first;
    verdict(
        "loss decrease",
        pass,
        &format!("epoch 0 loss {first:.4} -> final loss {last:.4} ({:.1}% of start)", 100.0 * last / first),
    );
}
