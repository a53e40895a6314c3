use asuflex::agents::{read_trajectory, Arch};
use asuflex::ddpg::{Checkpoint, DdpgAgent, DdpgHyper};
use asuflex::harness::{evaluate, train_seed, RunConfig};
use asuflex::plant::OBS_DIM;
use asuflex::sysid;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn one_episode() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.total_steps = 96;
    cfg.eval_every = 96;
    cfg.ddpg.warmup = 32;
    cfg.ddpg.batch = 16;
    cfg
}

#[test]
fn one_episode_budget_gives_one_row_and_one_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let s = train_seed(&one_episode(), Arch::Direct, 3, None, dir.path()).unwrap();
    assert_eq!(s.episodes, 1);
    let text = std::fs::read_to_string(dir.path().join("learning_curve.csv")).unwrap();
    assert_eq!(text.lines().count(), 2);
    let checkpoints: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("checkpoint"))
        .collect();
    assert_eq!(checkpoints.len(), 1);
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = one_episode();
    cfg.total_steps = 288;
    let model_path = root.path().join("model.json");
    let (model, _, _) = sysid::identify(&cfg.plant(), cfg.episode.dt, &cfg.sysid, 1).unwrap();
    model.save(&model_path).unwrap();
    cfg.paths.model = model_path;
    for arch in [Arch::Direct, Arch::Hierarchical] {
        let model = (arch == Arch::Hierarchical).then_some(&model);
        let (a, b) = (root.path().join(format!("{arch}_a")), root.path().join(format!("{arch}_b")));
        train_seed(&cfg, arch, 9, model, &a).unwrap();
        train_seed(&cfg, arch, 9, model, &b).unwrap();
        for f in ["learning_curve.csv", "eval_curve.csv", "checkpoint_best.json", "best_trajectory.csv"] {
            assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{arch} {f}");
        }
    }
}

#[test]
fn learning_curve_steps_increase_and_episodes_are_unique() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = one_episode();
    cfg.total_steps = 300;
    train_seed(&cfg, Arch::Direct, 4, None, dir.path()).unwrap();
    let mut rdr = csv::Reader::from_path(dir.path().join("learning_curve.csv")).unwrap();
    let rows: Vec<(usize, usize)> = rdr
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].parse().unwrap(), r[1].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 4);
    for w in rows.windows(2) {
        assert!(w[1].0 > w[0].0);
        assert_eq!(w[1].1, w[0].1 + 1);
    }
    assert_eq!(rows.last().unwrap().0, 300);
}

#[test]
fn untrained_policy_evaluates_and_cost_matches_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::default();
    let agent = DdpgAgent::new(OBS_DIM, 4, DdpgHyper::default(), 5).unwrap();
    let ck_path = dir.path().join("ck.json");
    Checkpoint::new(agent, 0, ChaCha8Rng::seed_from_u64(0)).save(&ck_path).unwrap();

    let out = dir.path().join("eval");
    let first = evaluate(&ck_path, &cfg, 1, Some(&out)).unwrap();
    let second = evaluate(&ck_path, &cfg, 1, None).unwrap();
    assert_eq!(first, second);

    let rows = read_trajectory(std::fs::File::open(out.join("trajectory_ep0.csv")).unwrap()).unwrap();
    let dt_h = cfg.episode.dt / 3600.0;
    let cost: f64 = rows.iter().map(|r| r.price * r.p_net() * dt_h).sum();
    let reported = first.episodes[0].elec_cost;
    assert!((cost - reported).abs() <= 1e-9 * reported.abs(), "{cost} vs {reported}");
}
