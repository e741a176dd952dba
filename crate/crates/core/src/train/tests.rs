use super::*;
use crate::synth::make_dataset;

fn tiny_config() -> TrainConfig {
    TrainConfig {
        image_size: 16,
        base_width: 4,
        code_background: 3,
        code_object: 2,
        batch_size: 2,
        steps: 7,
        seed: 5,
        lr: 1e-3,
        ..TrainConfig::default()
    }
}

fn tiny_data() -> (Vec<Sample>, Vec<Sample>) {
    make_dataset(5, 3, 16, 21).unwrap()
}

fn batches() -> (Tensor<f32>, Tensor<f32>) {
    let (w, o) = tiny_data();
    (
        Tensor::stack(&[&w[0].image, &w[1].image]).unwrap(),
        Tensor::stack(&[&o[0].image, &o[1].image]).unwrap(),
    )
}

fn same_nets(a: &ParamStore<f32>, b: &ParamStore<f32>, nets: &[Net]) -> bool {
    nets.iter().all(|&n| a.net(n) == b.net(n))
}

#[test]
fn zero_steps_returns_the_initialization() {
    let cfg = TrainConfig { steps: 0, ..tiny_config() };
    let (w, o) = tiny_data();
    let out = train(cfg.clone(), &w, &o, None).unwrap();
    assert!(out.metrics.is_empty());
    assert_eq!(out.checkpoint, Trainer::new(cfg).unwrap().checkpoint());
    assert_eq!(out.checkpoint.step, 0);
    assert!(out.checkpoint.opt_g.acc.values().all(|t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn each_phase_only_moves_its_own_networks() {
    let (xa, xb) = batches();
    let mut t = Trainer::new(tiny_config()).unwrap();
    let before = t.params.clone();
    t.discriminator_update(&xa, &xb).unwrap();
    assert!(same_nets(&before, &t.params, &Net::GENERATOR));
    assert!(!same_nets(&before, &t.params, &[Net::DiscWith]));
    assert!(!same_nets(&before, &t.params, &[Net::DiscWithout]));

    let mid = t.params.clone();
    t.generator_update(&xa, &xb).unwrap();
    assert!(same_nets(&mid, &t.params, &Net::DISCRIMINATORS));
    assert!(!same_nets(&mid, &t.params, &[Net::Encoder]));
    assert!(!same_nets(&mid, &t.params, &[Net::Decoder]));
}

#[test]
fn stacked_mode_also_respects_the_partition() {
    let (xa, xb) = batches();
    let mut t = Trainer::new(TrainConfig {
        mode: Mode::Stacked,
        ..tiny_config()
    })
    .unwrap();
    let before = t.params.clone();
    let m = t.train_step(&xa, &xb).unwrap();
    assert!(m.gen.total.is_finite());
    let names = |p: &ParamStore<f32>| p.iter_params().map(|(n, k, t)| (n, k.to_string(), t.shape().to_vec())).collect::<Vec<_>>();
    assert_eq!(names(&before), names(&t.params));
}

#[test]
fn misrouted_gradients_are_caught() {
    let store = ParamStore::<f32>::init(&tiny_config().model(), 1);
    let mut grads: BTreeMap<(Net, String), Tensor<f32>> = store
        .iter_params()
        .filter(|(n, _, _)| n.is_generator())
        .map(|(n, k, t)| ((n, k.to_string()), t.clone()))
        .collect();
    check_keys(&grads, &store, &Net::GENERATOR).unwrap();
    assert!(check_keys(&grads, &store, &Net::DISCRIMINATORS).is_err());
    grads.insert((Net::DiscWith, "fc.bias".into()), Tensor::zeros(&[1]));
    assert!(matches!(
        check_keys(&grads, &store, &Net::GENERATOR),
        Err(TrainError::GradientKeys(_))
    ));
}

#[test]
fn metrics_carry_six_generator_and_two_discriminator_terms() {
    let (xa, xb) = batches();
    let mut t = Trainer::new(tiny_config()).unwrap();
    let m = t.train_step(&xa, &xb).unwrap();
    assert_eq!(m.step, 1);
    let row = m.csv_row();
    assert_eq!(row.split(',').count(), 9);
    assert_eq!(METRICS_HEADER.split(',').count(), 9);
    let g = m.gen;
    for v in [g.rec_au, g.rec_b0, g.gan_0, g.gan_ne0, g.null, g.par, m.d_with, m.d_without] {
        assert!(v.is_finite() && v >= 0.0);
    }
}

#[test]
fn equal_seeds_give_bit_identical_runs() {
    let (w, o) = tiny_data();
    let a = train(tiny_config(), &w, &o, None).unwrap();
    let b = train(tiny_config(), &w, &o, None).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(encode_checkpoint(&a.checkpoint), encode_checkpoint(&b.checkpoint));
    let c = train(TrainConfig { seed: 6, ..tiny_config() }, &w, &o, None).unwrap();
    assert_ne!(a.metrics, c.metrics);
}

#[test]
fn resuming_reproduces_the_uninterrupted_run() {
    let (w, o) = tiny_data();
    let full = train(tiny_config(), &w, &o, None).unwrap();
    for cut in [1, 2, 3, 4] {
        let first = train(TrainConfig { steps: cut, ..tiny_config() }, &w, &o, None).unwrap();
        let bytes = encode_checkpoint(&first.checkpoint);
        let mut trainer = Trainer::from_checkpoint(decode_checkpoint(&bytes).unwrap());
        trainer.config.steps = 7;
        let rest = train_from(trainer, &w, &o, None, |_| {}).unwrap();
        let mut joined = first.metrics.clone();
        joined.extend(rest.metrics);
        assert_eq!(joined, full.metrics, "cut at {cut}");
        assert_eq!(rest.checkpoint.params, full.checkpoint.params);
        assert_eq!(rest.checkpoint.opt_g, full.checkpoint.opt_g);
        assert_eq!(rest.checkpoint.rng_state, full.checkpoint.rng_state);
    }
}

#[test]
fn output_directory_holds_log_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let (w, o) = tiny_data();
    let cfg = TrainConfig {
        checkpoint_every: 3,
        ..tiny_config()
    };
    let out = train(cfg, &w, &o, Some(dir.path())).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 8);
    assert_eq!(lines[7], out.metrics[6].csv_row());
    for name in ["step_00000003.ggck", "step_00000006.ggck", "final.ggck"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let back = load_checkpoint(dir.path().join("final.ggck")).unwrap();
    assert_eq!(back, out.checkpoint);
    let mid = load_checkpoint(dir.path().join("step_00000003.ggck")).unwrap();
    assert_eq!(mid.step, 3);
}

#[test]
fn empty_or_misshapen_data_is_rejected() {
    let (w, o) = tiny_data();
    assert!(matches!(train(tiny_config(), &w, &[], None), Err(TrainError::Data(_))));
    let (big, _) = make_dataset(2, 0, 32, 1).unwrap();
    assert!(matches!(train(tiny_config(), &big, &o, None), Err(TrainError::Data(_))));
}

fn sample_checkpoint() -> Checkpoint {
    let (w, o) = tiny_data();
    let cfg = TrainConfig {
        steps: 2,
        momentum: 0.5,
        ..tiny_config()
    };
    train(cfg, &w, &o, None).unwrap().checkpoint
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    let ck = sample_checkpoint();
    assert!(!ck.opt_d.mom.is_empty());
    let bytes = encode_checkpoint(&ck);
    assert_eq!(&bytes[..4], MAGIC);
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(encode_checkpoint(&back), bytes);
}

#[test]
fn corrupted_checkpoints_are_rejected_distinctly() {
    let bytes = encode_checkpoint(&sample_checkpoint());

    let mut flipped = bytes.clone();
    let at = bytes.len() - 10;
    flipped[at] ^= 0x01;
    assert!(matches!(decode_checkpoint(&flipped), Err(CheckpointError::Crc { .. })));

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(decode_checkpoint(&magic), Err(CheckpointError::BadMagic)));

    let mut version = bytes.clone();
    version[4] = 2;
    assert!(matches!(
        decode_checkpoint(&version),
        Err(CheckpointError::Version { found: 2 })
    ));
}

#[test]
fn every_truncation_is_an_error_and_mid_table_cuts_name_the_tensor() {
    let bytes = encode_checkpoint(&sample_checkpoint());
    let cfg_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let table_start = 12 + cfg_len + 24 + 4;
    // First tensor: name length, then the name itself.
    let name_len = u16::from_le_bytes(bytes[table_start..table_start + 2].try_into().unwrap()) as usize;
    let first_name = std::str::from_utf8(&bytes[table_start + 2..table_start + 2 + name_len]).unwrap();
    for cut in 0..bytes.len() {
        let err = decode_checkpoint(&bytes[..cut]).expect_err("truncated file accepted");
        if cut >= table_start + 2 + name_len + 2 && cut < bytes.len() - 4 {
            match err {
                CheckpointError::Truncated(what) => assert!(what.contains("tensor"), "{what}"),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        if cut == table_start + 2 + name_len + 10 {
            let msg = decode_checkpoint(&bytes[..cut]).unwrap_err().to_string();
            assert!(msg.contains(first_name), "{msg}");
        }
    }
}
