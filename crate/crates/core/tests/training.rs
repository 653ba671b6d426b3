use dpilab::data::DatasetKind;
use dpilab::experiment::{heldout_objective, HeldoutSpec};
use dpilab::train::{train, Checkpoint, Framework, LoadedRun, RunConfig};
use dpilab::Strategy;

fn short(framework: Framework, strategy: Strategy) -> RunConfig {
    RunConfig {
        framework,
        conditioning: strategy,
        iterations: 1500,
        hidden: vec![64, 64],
        log_every: 100,
        ..RunConfig::default()
    }
}

fn window(losses: &[f64]) -> f64 {
    losses.iter().sum::<f64>() / losses.len() as f64
}

#[test]
fn gauss8_training_reduces_the_loss() {
    // The flow objective has a large irreducible part, so it falls less.
    for (framework, ratio) in [(Framework::Diffusion, 0.5), (Framework::Flow, 0.9)] {
        let out = train(&short(framework, Strategy::Dpi)).unwrap();
        let first = window(&out.losses[..100]);
        let last = window(&out.losses[out.losses.len() - 100..]);
        assert!(last < ratio * first, "{}: {} -> {}", framework, first, last);
    }
}

#[test]
fn trained_model_beats_its_initialization_on_held_out_data() {
    let spec = HeldoutSpec { n_test: 300, seeds: 1, grid: 20, eval_seed: 3 };
    let mut cfg = short(Framework::Diffusion, Strategy::TMap);
    cfg.iterations = 0;
    let init = heldout_objective(&LoadedRun::from_checkpoint(&train(&cfg).unwrap().checkpoint).unwrap(), &spec).unwrap();
    cfg.iterations = 1000;
    let trained = heldout_objective(&LoadedRun::from_checkpoint(&train(&cfg).unwrap().checkpoint).unwrap(), &spec).unwrap();
    assert!(trained < 0.6 * init, "{} vs {}", trained, init);
}

#[test]
fn checkpoint_files_reload_into_identical_samplers() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = short(Framework::Flow, Strategy::Dpi);
    cfg.dataset = DatasetKind::TwoMoons;
    cfg.iterations = 50;
    cfg.sample_steps = 20;
    let ckpt = train(&cfg).unwrap().checkpoint;
    let path = dir.path().join("run.dpi");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ckpt);
    let a = LoadedRun::from_checkpoint(&ckpt).unwrap().sample(64, 1).unwrap();
    let b = LoadedRun::load(&path).unwrap().sample(64, 1).unwrap();
    assert_eq!(a, b);
}
