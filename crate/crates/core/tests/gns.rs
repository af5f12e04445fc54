use poreflow::autodiff::{Tape, Tensor};
use poreflow::gns::{GnsConfig, GnsModel, GnsSample, GnsTrainer};
use poreflow::graph::{FlowGraph, NormStats, NODE_FEATURES};
use poreflow::grids::{OccupancyField, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(no_geometry: bool) -> GnsConfig {
    GnsConfig {
        hidden: 8,
        layers: 2,
        radius: 3.0,
        max_neighbors: 8,
        patch_size: 8,
        patch_pool: 2,
        image_channels: vec![2, 3],
        no_geometry,
        ..Default::default()
    }
}

fn random_frame(n: usize, extent: f64, rng: &mut ChaCha8Rng) -> (Vec<Vec3>, Vec<Vec3>, Vec<Vec<Vec3>>) {
    let cur: Vec<Vec3> = (0..n)
        .map(|_| [rng.gen_range(1.0..extent), rng.gen_range(1.0..extent), rng.gen_range(1.0..extent)])
        .collect();
    let vel: Vec<Vec3> = (0..n)
        .map(|_| [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)])
        .collect();
    let prev = cur.iter().zip(&vel).map(|(p, v)| [p[0] - v[0], p[1] - v[1], p[2] - v[2]]).collect();
    let history = (0..5)
        .map(|k| vel.iter().map(|v| [v[0] * (1.0 - 0.1 * k as f64), v[1], v[2]]).collect())
        .collect();
    (prev, cur, history)
}

fn model(cfg: GnsConfig, seed: u64) -> GnsModel {
    let mut m = GnsModel::new(cfg, seed).unwrap();
    m.stats = Some(NormStats::identity());
    m
}

fn sphere_geometry(n: usize) -> OccupancyField {
    let c = n as f64 / 2.0;
    OccupancyField::from_fn([n, n, n], |x, y, z| {
        let d = (x as f64 - c).powi(2) + (y as f64 - c).powi(2) + (z as f64 - c).powi(2);
        d > (n as f64 / 5.0).powi(2)
    })
}

#[test]
fn isolated_node_ignores_far_particles() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = model(small(true), 3);
    let (prev, cur, hist) = random_frame(6, 5.0, &mut rng);
    let geo = OccupancyField::full([8, 8, 8]);
    let g = m.build_graph(&prev[..1], &cur[..1], &hist.iter().map(|h| h[..1].to_vec()).collect::<Vec<_>>()).unwrap();
    assert_eq!(g.num_edges(), 0);
    let alone = m.predict(&g, &geo, &geo).unwrap();

    // same particle plus a far cluster
    let far = |p: &Vec3| [p[0] + 100.0, p[1], p[2]];
    let mut prev2 = vec![prev[0]];
    let mut cur2 = vec![cur[0]];
    prev2.extend(prev[1..].iter().map(far));
    cur2.extend(cur[1..].iter().map(far));
    let g2 = m.build_graph(&prev2, &cur2, &hist).unwrap();
    let with = m.predict(&g2, &geo, &geo).unwrap();
    assert_eq!(alone[0], with[0]);
}

#[test]
fn permutation_equivariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = model(small(false), 4);
    let geo = sphere_geometry(16);
    let interface = OccupancyField::from_fn([16, 16, 16], |x, _, _| x < 6);
    let (prev, cur, hist) = random_frame(12, 14.0, &mut rng);
    let g = m.build_graph(&prev, &cur, &hist).unwrap();
    let out = m.predict(&g, &geo, &interface).unwrap();

    let mut perm: Vec<usize> = (0..12).collect();
    for i in (1..12).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }
    let pick = |v: &[Vec3]| perm.iter().map(|&i| v[i]).collect::<Vec<_>>();
    let hist_p: Vec<Vec<Vec3>> = hist.iter().map(|h| pick(h)).collect();
    let g = m.build_graph(&pick(&prev), &pick(&cur), &hist_p).unwrap();
    let out_p = m.predict(&g, &geo, &interface).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        for a in 0..3 {
            assert!((out_p[k][a] - out[i][a]).abs() < 1e-10);
        }
    }
}

#[test]
fn zero_decoder_predicts_mean_velocity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut m = model(small(false), 5);
    let mut stats = NormStats::identity();
    stats.velocity.mean = vec![0.3, -0.2, 0.05];
    stats.velocity.std = vec![2.0, 3.0, 0.5];
    m.stats = Some(stats);
    m.zero_decoder();
    let (prev, cur, hist) = random_frame(7, 7.0, &mut rng);
    let geo = OccupancyField::full([8, 8, 8]);
    let g = m.build_graph(&prev, &cur, &hist).unwrap();
    for v in m.predict(&g, &geo, &geo).unwrap() {
        assert_eq!(v, [0.3, -0.2, 0.05]);
    }
}

#[test]
fn translation_invariant_when_positions_masked() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = GnsConfig {
        mask_absolute_positions: true,
        ..small(true)
    };
    let m = model(cfg, 6);
    let geo = OccupancyField::full([8, 8, 8]);
    let (prev, cur, hist) = random_frame(10, 6.0, &mut rng);
    let shift = |v: &[Vec3]| v.iter().map(|p| [p[0] + 3.5, p[1] - 1.25, p[2] + 7.0]).collect::<Vec<_>>();
    let a = m.predict(&m.build_graph(&prev, &cur, &hist).unwrap(), &geo, &geo).unwrap();
    let b = m
        .predict(&m.build_graph(&shift(&prev), &shift(&cur), &hist).unwrap(), &geo, &geo)
        .unwrap();
    for (x, y) in a.iter().zip(&b) {
        for k in 0..3 {
            assert!((x[k] - y[k]).abs() < 1e-10);
        }
    }
}

/// Gradient of node 0's output with respect to the last node's input
/// features on a chain graph.
fn chain_influence(len: usize) -> f64 {
    let cfg = GnsConfig {
        hidden: 16,
        layers: 10,
        radius: 1.5,
        max_neighbors: 4,
        ..small(true)
    };
    let m = model(cfg, 11);
    let cur: Vec<Vec3> = (0..len).map(|i| [i as f64, 0.0, 0.0]).collect();
    let hist = vec![vec![[0.1, 0.0, 0.0]; len]; 5];
    let g = FlowGraph::build(&cur, &cur, &hist, 1.5, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let feats: Vec<f64> = (0..len * NODE_FEATURES).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let tape = Tape::new();
    let node = tape.leaf(Tensor::new([len, NODE_FEATURES], feats).unwrap());
    let edge = tape.constant(Tensor::new([g.edge_features.rows, g.edge_features.cols], g.edge_features.data.clone()).unwrap());
    let out = m.forward_features(&tape, node, edge, &g.edge_index, None).unwrap();
    let first = tape.slice(out, 0, 0, 1).unwrap();
    let loss = tape.mean(first);
    let grads = tape.backward(loss).unwrap();
    let g = grads.get(node).unwrap();
    g[(len - 1) * NODE_FEATURES..].iter().map(|x| x.abs()).sum()
}

#[test]
fn receptive_field_is_layer_count_hops() {
    assert!(chain_influence(10) > 0.0);
    assert!(chain_influence(11) > 0.0);
    assert_eq!(chain_influence(12), 0.0);
}

#[test]
fn full_network_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut m = model(small(false), 7);
    let geo = sphere_geometry(16);
    let interface = OccupancyField::from_fn([16, 16, 16], |x, y, _| x + y < 14);
    let (prev, cur, hist) = random_frame(10, 6.0, &mut rng);
    let target: Vec<Vec3> = (0..10).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
    let sample = GnsSample {
        prev,
        cur,
        history: hist,
        target,
        interface,
    };
    let loss_of = |m: &GnsModel| {
        let tape = Tape::new();
        let l = m.sample_loss(&tape, &sample, &geo, None).unwrap();
        let v = tape.value(l).item();
        v
    };
    let tape = Tape::new();
    let l = m.sample_loss(&tape, &sample, &geo, None).unwrap();
    let grads = tape.backward(l).unwrap().param_grads(&m.params);

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for id in m.params.ids() {
        let g = grads[id.index()].as_ref().expect("every parameter receives a gradient");
        let n = m.params.get(id).len();
        for _ in 0..3.min(n) {
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
            checked += 1;
        }
    }
    assert!(checked > 50);
    assert!(worst < 1e-3, "worst relative error {worst}");
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let m = model(small(false), 8);
    let geo = sphere_geometry(16);
    let (prev, cur, hist) = random_frame(8, 10.0, &mut rng);
    let g = m.build_graph(&prev, &cur, &hist).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gns.ckpt");
    m.save(&path).unwrap();
    let back = GnsModel::load(&path).unwrap();
    assert_eq!(back.config, m.config);
    let a = m.predict(&g, &geo, &geo).unwrap();
    let b = back.predict(&g, &geo, &geo).unwrap();
    for (x, y) in a.iter().zip(&b) {
        for k in 0..3 {
            // parameters are stored in single precision
            assert!((x[k] - y[k]).abs() < 1e-4);
        }
    }
}

#[test]
fn noise_free_overfit_on_one_frame() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = GnsConfig {
        hidden: 16,
        layers: 2,
        noise_std: 0.0,
        ..small(false)
    };
    let mut m = GnsModel::new(cfg, 9).unwrap();
    let (prev, cur, hist) = random_frame(20, 10.0, &mut rng);
    let target: Vec<Vec3> = cur.iter().map(|p| [0.1 * p[1], -0.05 * p[0], 0.2]).collect();
    let g = m.build_graph(&prev, &cur, &hist).unwrap();
    m.stats = Some(NormStats::fit(&[&g], &[&target]).unwrap());
    let geo = sphere_geometry(16);
    let sample = GnsSample {
        prev,
        cur,
        history: hist,
        target,
        interface: OccupancyField::empty([16, 16, 16]),
    };
    let mut trainer = GnsTrainer::new(m, 1);
    let first = trainer.train_step(&sample, &geo, 3e-3).unwrap();
    let mut last = first;
    for _ in 0..199 {
        last = trainer.train_step(&sample, &geo, 3e-3).unwrap();
    }
    assert!(last * 10.0 <= first, "loss {first} -> {last}");
}
