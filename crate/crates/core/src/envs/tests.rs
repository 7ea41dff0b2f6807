use std::path::Path;

use rand::Rng;

use super::background::{load_frame, stripes, CLEAN_LEVEL};
use super::render::AGENT_LEVEL;
use super::*;

fn env(task: Task, background: BackgroundSource) -> Env {
    let mut cfg = EnvConfig::new(task);
    cfg.background = background;
    cfg.seed = 3;
    Env::new(cfg).unwrap()
}

fn random_action(env: &Env, rng: &mut impl Rng) -> Vec<f64> {
    (0..env.action_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn same_seed_same_trajectory() {
    for bg in [BackgroundSource::Clean, BackgroundSource::random_per_step(), BackgroundSource::scripted_motion()] {
        let mut a = env(Task::PointmassLite, bg.clone());
        let mut b = env(Task::PointmassLite, bg);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(a.reset(11), b.reset(11));
        for _ in 0..50 {
            let act = random_action(&a, &mut rng);
            let ra = a.step(&act).unwrap();
            let rb = b.step(&act).unwrap();
            assert_eq!(ra.obs, rb.obs);
            assert_eq!(ra.reward.to_bits(), rb.reward.to_bits());
            assert_eq!(ra.info, rb.info);
        }
    }
}

#[test]
fn clean_background_outside_sprites_is_flat() {
    let e = env(Task::PendulumLite, BackgroundSource::Clean);
    let mask = e.agent_mask();
    for (v, m) in e.observation().flat().iter().zip(&mask) {
        if *m == 0.0 {
            assert_eq!(*v, CLEAN_LEVEL);
        }
    }
}

#[test]
fn pendulum_starts_hanging_down() {
    let mut e = env(Task::PendulumLite, BackgroundSource::Clean);
    for seed in 0..20 {
        e.reset(seed);
        assert!(e.state_reward() <= (PI - 0.1).cos() + 1e-12);
        let PhysicalState::Pendulum { omega, .. } = e.state().physical else { unreachable!() };
        assert_eq!(omega, 0.0);
    }
}

#[test]
fn hanging_pendulum_stays_put_without_torque() {
    let mut e = env(Task::PendulumLite, BackgroundSource::Clean);
    e.set_physical(PhysicalState::Pendulum { theta: PI, omega: 0.0 }).unwrap();
    for _ in 0..200 {
        e.step(&[0.0]).unwrap();
    }
    let PhysicalState::Pendulum { theta, omega } = e.state().physical else { unreachable!() };
    assert!(wrap_angle(theta - PI).abs() < 1e-9);
    assert!(omega.abs() < 1e-9);
}

#[test]
fn reward_sums_over_repeats() {
    let mut e = env(Task::PendulumLite, BackgroundSource::Clean);
    let mut manual = e.state().physical;
    let r = e.step(&[0.7]).unwrap();
    manual.integrate(&[0.7]);
    let r1 = manual.reward();
    manual.integrate(&[0.7]);
    let r2 = manual.reward();
    assert_eq!(r.reward, r1 + r2);
    assert_eq!(r.info, manual);
    assert_eq!(e.state().step, 2);
}

#[test]
fn pointmass_at_goal_earns_full_reward() {
    let mut e = env(Task::PointmassLite, BackgroundSource::Clean);
    e.set_physical(PhysicalState::PointMass {
        x: 0.3,
        y: -0.2,
        vx: 0.0,
        vy: 0.0,
        goal_x: 0.3,
        goal_y: -0.2,
    })
    .unwrap();
    let r = e.step(&[0.0, 0.0]).unwrap();
    assert_eq!(r.reward, 2.0);
}

#[test]
fn goal_follows_env_seed_not_episode_seed() {
    let goal = |e: &Env| match e.state().physical {
        PhysicalState::PointMass { goal_x, goal_y, .. } => (goal_x, goal_y),
        _ => unreachable!(),
    };
    let mut e = env(Task::PointmassLite, BackgroundSource::Clean);
    let g = goal(&e);
    assert_eq!(g, goal_position(3));
    for seed in [0, 1, 99] {
        e.reset(seed);
        assert_eq!(goal(&e), g);
    }
    assert_ne!(goal_position(4), g);
}

#[test]
fn episode_length_bounds_and_probe_soundness() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for task in [Task::PendulumLite, Task::PointmassLite] {
        let mut e = env(task, BackgroundSource::random_per_step());
        let mut decisions = 0;
        let mut log = EpisodeLog::default();
        loop {
            let act: Vec<f64> = random_action(&e, &mut rng).iter().map(|a| a * 3.0).collect();
            let r = e.step(&act).unwrap();
            decisions += 1;
            match task {
                Task::PendulumLite => assert!(r.reward.abs() <= 2.0),
                Task::PointmassLite => assert!((0.0..=2.0).contains(&r.reward)),
            }
            assert!(r.info.within_bounds());
            assert_eq!(r.info.agent_layer(16), e.agent_mask());
            log.push(decisions, &act, r.reward, r.info);
            if r.done {
                break;
            }
        }
        assert_eq!(decisions, 500);
        assert!(e.step(&vec![0.0; e.action_dim()]).is_err());
        let csv = log.to_csv();
        assert_eq!(csv.lines().count(), 501);
        assert!(csv.starts_with("t,action_0,"));
    }
}

#[test]
fn rejects_bad_configs_and_actions() {
    let mut cfg = EnvConfig::new(Task::PendulumLite);
    cfg.episode_length = 999;
    assert!(Env::new(cfg.clone()).is_err());
    cfg.episode_length = 1000;
    cfg.action_repeat = 0;
    assert!(Env::new(cfg).is_err());
    let mut e = env(Task::PendulumLite, BackgroundSource::Clean);
    assert!(e.step(&[0.0, 0.0]).is_err());
    assert!(e.step(&[f64::NAN]).is_err());
}

#[test]
fn agent_core_is_brighter_than_any_background() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for bg in [BackgroundSource::Clean, BackgroundSource::random_per_step(), BackgroundSource::scripted_motion()] {
        for task in [Task::PendulumLite, Task::PointmassLite] {
            let mut e = env(task, bg.clone());
            for _ in 0..100 {
                let act = random_action(&e, &mut rng);
                let r = e.step(&act).unwrap();
                let mask = e.agent_mask();
                assert!(mask.iter().any(|&m| m == 1.0));
                for ((v, m), b) in r.obs.flat().iter().zip(&mask).zip(e.background_frame()) {
                    if *m == 1.0 {
                        assert_eq!(*v, AGENT_LEVEL);
                        assert!(v - b >= 0.3);
                        assert!(v - bg.max_level() >= 0.3);
                    }
                }
            }
        }
    }
}

#[test]
fn changing_angle_only_touches_the_rod() {
    let mut e = env(Task::PendulumLite, BackgroundSource::Clean);
    e.set_physical(PhysicalState::Pendulum { theta: 0.4, omega: 0.0 }).unwrap();
    let a = e.observation();
    let ma = e.agent_mask();
    e.set_physical(PhysicalState::Pendulum { theta: 1.9, omega: 0.0 }).unwrap();
    let b = e.observation();
    let mb = e.agent_mask();
    let mut changed = 0;
    for i in 0..a.flat().len() {
        if a.flat()[i] != b.flat()[i] {
            changed += 1;
            assert!(ma[i] > 0.0 || mb[i] > 0.0);
        }
    }
    assert!(changed > 0);
}

#[test]
fn random_background_is_uncorrelated_in_time() {
    let mut bg = Background::new(BackgroundSource::random_per_step(), 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut prev = bg.frame(0, &mut rng);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for t in 1..=1000 {
        let next = bg.frame(t, &mut rng);
        xs.extend_from_slice(&prev);
        ys.extend_from_slice(&next);
        prev = next;
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n;
    let sx = (xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / n).sqrt();
    let sy = (ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / n).sqrt();
    let rho = cov / (sx * sy);
    assert!(rho.abs() < 0.05, "{rho}");
}

#[test]
fn stripes_repeat_with_image_period() {
    for t in 0..40 {
        assert_eq!(stripes(16, t, -0.5, -0.1), stripes(16, t + 16, -0.5, -0.1));
    }
    let a = stripes(16, 0, -0.5, -0.1);
    let b = stripes(16, 1, -0.5, -0.1);
    // one pixel of motion along x
    for y in 0..16 {
        for x in 0..15 {
            assert_eq!(b[y * 16 + x], a[y * 16 + x + 1]);
        }
    }
}

fn write_clip(dir: &Path, level: u8, frames: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..frames {
        let img = image::GrayImage::from_fn(20, 12, |x, _| image::Luma([level.wrapping_add((x + i as u32) as u8)]));
        img.save(dir.join(format!("frame_{i:06}.pgm"))).unwrap();
    }
}

#[test]
fn frame_dir_splits_are_disjoint() {
    let root = tempfile::tempdir().unwrap();
    write_clip(&root.path().join("train/a"), 0, 3);
    write_clip(&root.path().join("train/b"), 40, 2);
    write_clip(&root.path().join("eval/c"), 200, 4);

    let load = |split| {
        let src = BackgroundSource::FrameDir {
            root: root.path().to_path_buf(),
            split,
        };
        Background::new(src, 16).unwrap()
    };
    let mut train = load(Split::Train);
    let mut eval = load(Split::Eval);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut train_frames = Vec::new();
    for _ in 0..10 {
        train.reset(&mut rng);
        assert_ne!(train.clip_name(), Some("c"));
        for t in 0..5 {
            train_frames.push(train.frame(t, &mut rng));
        }
    }
    for _ in 0..10 {
        eval.reset(&mut rng);
        assert_eq!(eval.clip_name(), Some("c"));
        for t in 0..9 {
            let f = eval.frame(t, &mut rng);
            assert!(f.iter().all(|v| (-0.5..=0.0).contains(v)));
            assert!(!train_frames.contains(&f));
        }
    }
}

#[test]
fn frame_dir_wraps_and_crops() {
    let root = tempfile::tempdir().unwrap();
    write_clip(&root.path().join("train/a"), 0, 2);
    let src = BackgroundSource::FrameDir {
        root: root.path().to_path_buf(),
        split: Split::Train,
    };
    let mut bg = Background::new(src, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    bg.reset(&mut rng);
    let f0 = bg.frame(0, &mut rng);
    let f1 = bg.frame(1, &mut rng);
    assert_ne!(f0, f1);
    assert_eq!(bg.frame(2, &mut rng), f0);
    // 20×12 → centre 12×12 starting at column 4; first pixel value 4/255
    let direct = load_frame(&root.path().join("train/a/frame_000000.pgm"), 8).unwrap();
    assert_eq!(direct, f0);
    assert!((direct[0] - (4.0 / 255.0 * 0.5 - 0.5)).abs() < 1e-12);
}

#[test]
fn missing_frame_dir_is_a_load_error() {
    let root = tempfile::tempdir().unwrap();
    let src = BackgroundSource::FrameDir {
        root: root.path().to_path_buf(),
        split: Split::Eval,
    };
    assert!(matches!(Background::new(src.clone(), 16), Err(Error::Load(_))));
    std::fs::create_dir_all(root.path().join("eval/empty")).unwrap();
    assert!(matches!(Background::new(src, 16), Err(Error::Load(_))));
}

#[test]
fn angles_wrap_into_half_open_interval() {
    assert_eq!(wrap_angle(PI), PI);
    assert_eq!(wrap_angle(-PI), PI);
    assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
    assert!((wrap_angle(0.1 - 4.0 * PI) - 0.1).abs() < 1e-12);
}
