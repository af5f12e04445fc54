use poreflow::autodiff::{Tape, Tensor};
use poreflow::grids::{OccupancyField, VoxelGrid};
use poreflow::metrics::dice;
use poreflow::unet::{binarize, UNetConfig, UNetInput, UNetModel, UNetTrainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_input(dims: [usize; 3], history: usize, rng: &mut ChaCha8Rng) -> UNetInput {
    let n: usize = dims.iter().product();
    UNetInput {
        history: (0..history)
            .map(|_| OccupancyField::from_fn(dims, |_, _, _| rng.gen_bool(0.4)))
            .collect(),
        velocity: VoxelGrid::from_vec(dims, 3, (0..3 * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
        geometry: OccupancyField::from_fn(dims, |_, _, _| rng.gen_bool(0.7)),
    }
}

fn tiny(depth: usize, base: usize) -> UNetConfig {
    UNetConfig {
        depth,
        base_channels: base,
        ..Default::default()
    }
}

#[test]
fn output_shape_matches_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = UNetModel::new(UNetConfig::default(), 1).unwrap();
    let out = m.logits(&random_input([32, 32, 32], 2, &mut rng)).unwrap();
    assert_eq!(out.dims(), [32, 32, 32]);
    assert_eq!(out.channels(), 1);

    // non-multiple dims are padded and cropped back
    let m = UNetModel::new(tiny(2, 2), 1).unwrap();
    let out = m.logits(&random_input([10, 7, 5], 2, &mut rng)).unwrap();
    assert_eq!(out.dims(), [10, 7, 5]);
}

#[test]
fn zero_head_gives_bias_everywhere() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut m = UNetModel::new(tiny(2, 4), 2).unwrap();
    m.zero_head(-0.75);
    let out = m.logits(&random_input([8, 8, 8], 2, &mut rng)).unwrap();
    assert!(out.data().iter().all(|&z| z == -0.75));
}

#[test]
fn encoder_widths_double_per_level() {
    let m = UNetModel::new(UNetConfig::default(), 0).unwrap();
    assert_eq!(m.encoder_channels(), vec![16, 32, 64, 128]);
    let m = UNetModel::new(tiny(2, 5), 0).unwrap();
    assert_eq!(m.encoder_channels(), vec![5, 10, 20]);
}

#[test]
fn velocity_ablation_only_changes_first_layer() {
    let full = UNetModel::new(UNetConfig::default(), 0).unwrap();
    let ablated = UNetModel::new(UNetConfig { no_velocity: true, ..Default::default() }, 0).unwrap();
    let count = |m: &UNetModel| m.params.ids().filter(|&id| m.params.is_trainable(id)).map(|id| m.params.get(id).len()).sum::<usize>();
    assert_eq!(count(&full) - count(&ablated), 3 * 16 * 27);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input = random_input([8, 8, 8], 2, &mut rng);
    let a = ablated.assemble(&input).unwrap();
    assert_eq!(a.channels(), 3);
    assert_eq!(a.channel(2), input.geometry.grid().channel(0));
    let f = full.assemble(&input).unwrap();
    assert_eq!(f.channels(), 6);
    assert_eq!(f.channel(2), input.velocity.channel(0));
    assert_eq!(f.channel(5), input.geometry.grid().channel(0));
}

#[test]
fn uniform_zero_logits_cost_ln2() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut m = UNetModel::new(tiny(2, 2), 4).unwrap();
    m.zero_head(0.0);
    let input = random_input([8, 8, 8], 2, &mut rng);
    let target = OccupancyField::from_fn([8, 8, 8], |x, _, _| x < 3);
    let tape = Tape::new();
    let loss = m.batch_loss(&tape, &[input], &[target.grid()]).unwrap();
    assert!((tape.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn confident_correct_logits_have_negligible_loss() {
    let y: Vec<f64> = (0..64).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect();
    let z: Vec<f64> = y.iter().map(|&t| if t == 1.0 { 20.0 } else { -20.0 }).collect();
    let tape = Tape::new();
    let v = tape.constant(Tensor::new([64], z).unwrap());
    let loss = tape.bce_with_logits(v, &y).unwrap();
    assert!(tape.value(loss).item() < 1e-6);
}

#[test]
fn non_binary_target_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = UNetModel::new(tiny(1, 2), 5).unwrap();
    let input = random_input([4, 4, 4], 2, &mut rng);
    let bad = VoxelGrid::filled([4, 4, 4], 1, 0.5);
    let tape = Tape::new();
    assert!(matches!(
        m.batch_loss(&tape, &[input], &[&bad]),
        Err(poreflow::Error::Input(_))
    ));
}

#[test]
fn binarize_agrees_with_sign() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let g = VoxelGrid::from_vec([5, 4, 3], 1, (0..60).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    let b = binarize(&g);
    for (i, &z) in g.data().iter().enumerate() {
        assert_eq!(b.is_set_linear(i), z >= 0.0);
    }
}

#[test]
fn full_network_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut m = UNetModel::new(tiny(1, 1), 7).unwrap();
    let trainable: usize = m.params.ids().filter(|&id| m.params.is_trainable(id)).map(|id| m.params.get(id).len()).sum();
    assert!(trainable <= 1000, "{trainable} parameters");
    let inputs = vec![random_input([8, 8, 8], 2, &mut rng), random_input([8, 8, 8], 2, &mut rng)];
    let t1 = OccupancyField::from_fn([8, 8, 8], |x, y, _| x + y < 8);
    let t2 = OccupancyField::from_fn([8, 8, 8], |x, _, z| x > z);
    let targets = [t1.grid(), t2.grid()];
    let loss_of = |m: &UNetModel| {
        let tape = Tape::new();
        let l = m.batch_loss(&tape, &inputs, &targets).unwrap();
        let v = tape.value(l).item();
        v
    };
    let tape = Tape::new();
    let l = m.batch_loss(&tape, &inputs, &targets).unwrap();
    let grads = tape.backward(l).unwrap().param_grads(&m.params);

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = m.params.ids().filter(|&id| m.params.is_trainable(id)).collect();
    for id in ids {
        let g = grads[id.index()].clone().expect("trainable parameter has a gradient");
        let n = m.params.get(id).len();
        for _ in 0..4.min(n) {
            let i = rng.gen_range(0..n);
            let orig = m.params.get(id).data()[i];
            m.params.get_mut(id).data_mut()[i] = orig + h;
            let up = loss_of(&m);
            m.params.get_mut(id).data_mut()[i] = orig - h;
            let down = loss_of(&m);
            m.params.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (g[i] - numeric).abs() / g[i].abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    assert!(worst < 1e-3, "worst relative error {worst}");
}

#[test]
fn checkpoint_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut m = UNetModel::new(tiny(2, 3), 8).unwrap();
    m.velocity_scale = 2.5;
    let input = random_input([8, 8, 8], 2, &mut rng);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("unet.ckpt");
    m.save(&path).unwrap();
    let back = UNetModel::load(&path).unwrap();
    assert_eq!(back.velocity_scale, 2.5);
    assert_eq!(back.config, m.config);
    let a = m.logits(&input).unwrap();
    let b = back.logits(&input).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-3);
    }
}

#[test]
fn overfits_one_moving_interface() {
    let dims = [16, 16, 16];
    let front = |pos: usize| OccupancyField::from_fn(dims, move |x, y, z| x + (y % 4) / 2 + (z % 3) / 2 < pos);
    let mut vel = VoxelGrid::zeros(dims, 3);
    vel.channel_mut(0).fill(0.5);
    let input = UNetInput {
        history: vec![front(4), front(6)],
        velocity: vel,
        geometry: OccupancyField::from_fn(dims, |x, y, z| (x * 7 + y * 3 + z) % 11 != 0),
    };
    let target = front(8);
    let cfg = UNetConfig {
        base_channels: 4,
        ..Default::default()
    };
    let mut trainer = UNetTrainer::new(UNetModel::new(cfg, 11).unwrap());
    for _ in 0..300 {
        trainer.train_step(std::slice::from_ref(&input), &[target.grid()], 1e-2).unwrap();
    }
    let pred = trainer.model.predict(&input).unwrap();
    let d = dice(&pred, &target).unwrap();
    assert!(d > 0.95, "dice {d}");
}
