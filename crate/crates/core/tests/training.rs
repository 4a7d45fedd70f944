use std::fs;
use std::path::Path;

use mfgan_core::data::GaussianTarget;
use mfgan_core::metrics::{read_metrics, METRICS_HEADER};
use mfgan_core::networks::{load_checkpoint, save_checkpoint, MlpSpec};
use mfgan_core::trainer::{checkpoint_dir, TrainConfig, Trainer, DISC_FILE, GEN_FILE, STATE_FILE};
use mfgan_core::Error;

fn small(outer_steps: u64) -> TrainConfig {
    TrainConfig {
        outer_steps,
        inner_steps: 2,
        batch_size: 16,
        lr_gen: 1e-3,
        lr_disc: 1e-3,
        seed: 11,
        eval_every: 5,
        checkpoint_every: 10,
        eval_samples: 200,
        ..TrainConfig::default()
    }
}

fn specs() -> (MlpSpec, MlpSpec) {
    (MlpSpec::generator(2, vec![8, 8]), MlpSpec::discriminator(2, vec![8, 8]))
}

fn train<'t>(cfg: TrainConfig, out: &Path, target: &'t GaussianTarget) -> Trainer<'t> {
    let (g, d) = specs();
    let mut tr = Trainer::new(cfg, g, d, target).unwrap();
    tr.run(out, &mut |_| {}).unwrap();
    tr
}

#[test]
fn zero_steps_writes_initial_checkpoint_only() {
    let target = GaussianTarget::isotropic(2, 5.0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let tr = train(small(0), dir.path(), &target);
    assert_eq!(tr.step(), 0);
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.trim_end(), METRICS_HEADER);
    let ckpts: Vec<_> = fs::read_dir(dir.path().join("checkpoints")).unwrap().collect();
    assert_eq!(ckpts.len(), 1);
    let step0 = checkpoint_dir(dir.path(), 0);
    for f in [GEN_FILE, DISC_FILE, STATE_FILE] {
        assert!(step0.join(f).exists(), "{f}");
    }
    let (spec, params) = load_checkpoint(&dir.path().join(GEN_FILE)).unwrap();
    assert_eq!(&spec, tr.generator().0);
    assert!(params.bits_eq(tr.generator().1));
}

#[test]
fn evaluation_and_checkpoint_schedule() {
    let target = GaussianTarget::isotropic(2, 5.0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    train(small(23), dir.path(), &target);
    let rows = read_metrics(&dir.path().join("metrics.csv")).unwrap();
    let steps: Vec<u64> = rows.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![5, 10, 15, 20, 23]);
    for step in [0, 10, 20, 23] {
        assert!(checkpoint_dir(dir.path(), step).join(GEN_FILE).exists());
    }
    assert!(rows.iter().all(|r| r.loss.identity_holds() && r.w2 >= 0.0));
}

#[test]
fn same_seed_reproduces_metrics_bytes() {
    let target = GaussianTarget::isotropic(2, 5.0).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    train(small(15), a.path(), &target);
    train(small(15), b.path(), &target);
    for f in ["metrics.csv", GEN_FILE, DISC_FILE] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let c = tempfile::tempdir().unwrap();
    train(TrainConfig { seed: 12, ..small(15) }, c.path(), &target);
    assert_ne!(
        fs::read(a.path().join(GEN_FILE)).unwrap(),
        fs::read(c.path().join(GEN_FILE)).unwrap()
    );
}

#[test]
fn resume_continues_bit_exactly() {
    let target = GaussianTarget::isotropic(2, 5.0).unwrap();
    let whole = tempfile::tempdir().unwrap();
    let straight = train(small(20), whole.path(), &target);

    let split = tempfile::tempdir().unwrap();
    train(small(10), split.path(), &target);
    let (g, d) = specs();
    let mut resumed =
        Trainer::resume(small(20), g, d, &target, &checkpoint_dir(split.path(), 10)).unwrap();
    assert_eq!(resumed.step(), 10);
    resumed.run(split.path(), &mut |_| {}).unwrap();

    assert!(resumed.generator().1.bits_eq(straight.generator().1));
    assert!(resumed.potential().1.bits_eq(straight.potential().1));
    assert_eq!(
        fs::read(whole.path().join("metrics.csv")).unwrap(),
        fs::read(split.path().join("metrics.csv")).unwrap()
    );
}

#[test]
fn resume_with_other_seed_is_refused() {
    let target = GaussianTarget::isotropic(2, 5.0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    train(small(5), dir.path(), &target);
    let (g, d) = specs();
    let res = Trainer::resume(
        TrainConfig { seed: 99, ..small(10) },
        g,
        d,
        &target,
        &checkpoint_dir(dir.path(), 5),
    );
    assert!(matches!(res, Err(Error::Config(_))));
}

#[test]
fn mismatched_networks_are_refused() {
    let target = GaussianTarget::isotropic(3, 0.0).unwrap();
    let (g, d) = specs();
    assert!(matches!(
        Trainer::new(small(1), g, d, &target),
        Err(Error::InvalidSpec(_))
    ));
}

#[test]
fn divergence_aborts_with_last_good_checkpoint() {
    // Start from a potential so steep that the Hamiltonian overflows.
    let target = GaussianTarget::isotropic(2, 5.0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    train(small(0), dir.path(), &target);
    let start = checkpoint_dir(dir.path(), 0);
    let (spec, mut disc) = load_checkpoint(&start.join(DISC_FILE)).unwrap();
    let last = disc.layers() - 1;
    disc.weight_mut(last).data_mut().iter_mut().for_each(|w| *w *= 1e300);
    save_checkpoint(&spec, &disc, &start.join(DISC_FILE)).unwrap();

    let (g, d) = specs();
    let mut tr = Trainer::resume(small(20), g, d, &target, &start).unwrap();
    match tr.run(dir.path(), &mut |_| {}) {
        Err(Error::TrainingAborted { step, last_good, source }) => {
            assert_eq!(step, 1);
            assert_eq!(last_good, start);
            assert!(matches!(*source, Error::NonFiniteLoss(_)), "{source}");
        }
        other => panic!("expected an abort, got {:?}", other.map(|o| o.final_step)),
    }
}

#[test]
fn observer_sees_every_step() {
    let target = GaussianTarget::isotropic(2, 5.0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (g, d) = specs();
    let mut tr = Trainer::new(small(7), g, d, &target).unwrap();
    let mut seen = Vec::new();
    tr.run(dir.path(), &mut |r| {
        assert_eq!(r.inner_totals.len(), 2);
        seen.push(r.step);
    })
    .unwrap();
    assert_eq!(seen, (1..=7).collect::<Vec<_>>());
}
