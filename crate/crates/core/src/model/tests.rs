use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use super::*;

pub(crate) fn tiny_config(k: usize) -> ModelConfig {
    ModelConfig {
        k,
        resolution: 4,
        latent_dim: 3,
        feature_dim: 6,
        iterations: 2,
        channels: vec![2, 3],
        seed: 5,
        class_id: 0,
    }
}

pub(crate) fn random_sample(k: usize, r: usize, seed: u64, mask: Option<Vec<bool>>) -> ShapeSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let parts = (0..k)
        .map(|_| {
            let v = (0..r * r * r).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
            VoxelGrid::from_values(r, v).unwrap()
        })
        .collect();
    let boxes = (0..k)
        .map(|_| {
            Box6::new(
                std::array::from_fn(|_| rng.random_range(0.2..0.8)),
                std::array::from_fn(|_| rng.random_range(0.1..0.5)),
            )
        })
        .collect();
    let mask = PartMask::new(mask.unwrap_or_else(|| vec![true; k]));
    ShapeSample::new(0, parts, boxes, mask).unwrap()
}

fn values(tape: &Tape<f64>, v: Var) -> Vec<f64> {
    tape.value(v).data().to_vec()
}

#[test]
fn latent_and_feature_widths_default_to_512() {
    let config = ModelConfig::new(2, 16).unwrap();
    assert_eq!(config.channels, vec![8, 16, 32, 64]);
    let model = SagNet::<f32>::new(config).unwrap();
    let s = random_sample(2, 16, 1, None);
    let lat = model.encode(&[&s]).unwrap();
    assert_eq!(lat[0].mu.len(), 512);
    assert_eq!(lat[0].sigma.len(), 512);
    assert!(lat[0].sigma.iter().all(|&v| v > 0.0));
}

#[test]
fn config_validation_and_json_round_trip() {
    assert!(ModelConfig::new(1, 16).is_err());
    assert!(ModelConfig::new(2, 12).is_err());
    let mut c = tiny_config(3);
    c.iterations = 5;
    assert!(c.validate().is_err());
    let dir = tempfile::tempdir().unwrap();
    let c = tiny_config(3);
    c.save(&dir.path().join("config.json")).unwrap();
    let text = fs::read_to_string(dir.path().join("config.json")).unwrap();
    for key in ["\"k\"", "\"r\"", "\"latent_dim\"", "\"T\"", "\"channels\"", "\"seed\""] {
        assert!(text.contains(key), "{key}");
    }
    assert_eq!(ModelConfig::load(&dir.path().join("config.json")).unwrap(), c);
}

#[test]
fn single_iteration_is_one_gru_step_on_encoder_features() {
    let mut config = tiny_config(3);
    config.iterations = 1;
    let model = SagNet::<f64>::new(config).unwrap();
    let s = random_sample(3, 4, 2, None);
    let batch = Batch::new(&model.config, &[&s]).unwrap();
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape, false);
    let state = model.analyze(&mut tape, &p, &batch).unwrap();
    let ly = &model.layers;
    let vox = tape.constant(batch.voxels.clone());
    let enc = ly.geo_enc.forward(&mut tape, &p, vox).unwrap();
    let zero = tape.constant(Tensor::zeros(&[3, 6]));
    let expected = ly.geo_gru.step(&mut tape, &p, Some(enc), zero).unwrap();
    assert_eq!(values(&tape, state.geo), values(&tape, expected));
    assert_eq!(state.t, 1);
}

#[test]
fn two_iterations_match_hand_unrolled_reference() {
    let model = SagNet::<f64>::new(tiny_config(2)).unwrap();
    let s = random_sample(2, 4, 3, None);
    let batch = Batch::new(&model.config, &[&s]).unwrap();
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape, false);
    let state = model.analyze(&mut tape, &p, &batch).unwrap();

    // reference: plain vectors, no masking needed with both parts present
    let ly = &model.layers;
    let vox = tape.constant(batch.voxels.clone());
    let pairs = tape.constant(batch.pairs.clone());
    let eg = ly.geo_enc.forward(&mut tape, &p, vox).unwrap();
    let es = ly.str_enc.forward(&mut tape, &p, pairs).unwrap();
    let z2 = tape.constant(Tensor::zeros(&[2, 6]));
    let z1 = tape.constant(Tensor::zeros(&[1, 6]));
    let h1 = ly.geo_gru.step(&mut tape, &p, Some(eg), z2).unwrap();
    let s1 = ly.str_gru.step(&mut tape, &p, Some(es), z1).unwrap();
    let h0 = tape.slice_rows(h1, 0, 1).unwrap();
    let hb = tape.slice_rows(h1, 1, 1).unwrap();
    let g0 = ly.f_g.forward(&mut tape, &p, h0, s1).unwrap();
    let m0 = tape.mul(g0, s1).unwrap();
    let g1 = ly.f_g.forward(&mut tape, &p, hb, s1).unwrap();
    let m1 = tape.mul(g1, s1).unwrap();
    let fa = ly.f_s.forward(&mut tape, &p, s1, h0).unwrap();
    let fb = ly.f_s.forward(&mut tape, &p, s1, hb).unwrap();
    let ta = tape.mul(fa, h0).unwrap();
    let tb = tape.mul(fb, hb).unwrap();
    let ms = tape.add(ta, tb).unwrap();
    let mg = tape.concat_rows(&[m0, m1]).unwrap();
    let h2 = ly.geo_gru.step(&mut tape, &p, Some(mg), h1).unwrap();
    let s2 = ly.str_gru.step(&mut tape, &p, Some(ms), s1).unwrap();
    let close = |a: Vec<f64>, b: Vec<f64>| a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12);
    assert!(close(values(&tape, state.geo), values(&tape, h2)));
    assert!(close(values(&tape, state.structure), values(&tape, s2)));
}

#[test]
fn absent_part_features_stay_zero() {
    let model = SagNet::<f64>::new(tiny_config(3)).unwrap();
    for t in 1..=3 {
        let mut m = model.clone();
        m.config.iterations = t;
        let s = random_sample(3, 4, 4, Some(vec![true, false, true]));
        let other = random_sample(3, 4, 5, None);
        let batch = Batch::new(&m.config, &[&s, &other]).unwrap();
        let mut tape = Tape::new();
        let p = m.store.bind(&mut tape, false);
        let state = m.analyze(&mut tape, &p, &batch).unwrap();
        let g = values(&tape, state.geo);
        // part 1 of item 0 is row 1 * 2 + 0
        assert!(g[2 * 6..3 * 6].iter().all(|&v| v == 0.0));
        assert!(g[3 * 6..4 * 6].iter().any(|&v| v != 0.0));
        let st = values(&tape, state.structure);
        // pairs (0,1) and (1,2) of item 0 are rows 0 and 4
        assert!(st[..6].iter().chain(&st[4 * 6..5 * 6]).all(|&v| v == 0.0));
        assert!(st[2 * 6..3 * 6].iter().any(|&v| v != 0.0));
    }
}

#[test]
fn mask_changes_the_latent_and_encoding_is_deterministic() {
    let model = SagNet::<f64>::new(tiny_config(3)).unwrap();
    let a = random_sample(3, 4, 6, None);
    let mut b = a.clone();
    b.mask.set(2, false);
    b.zero_absent();
    let la = model.encode(&[&a]).unwrap();
    let lb = model.encode(&[&b]).unwrap();
    assert_ne!(la, lb);
    assert_eq!(la, model.encode(&[&a]).unwrap());
    // batching does not change per-item results beyond rounding
    let both = model.encode(&[&a, &b]).unwrap();
    for (x, y) in both[1].mu.iter().zip(&lb[0].mu) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn fusion_order_matters() {
    let model = SagNet::<f64>::new(tiny_config(2)).unwrap();
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape, false);
    let ly = &model.layers;
    let a = tape.constant(randn(&[1, 6], 1));
    let b = tape.constant(randn(&[1, 6], 2));
    let z = tape.constant(Tensor::zeros(&[1, 6]));
    let ab = ly.fusion.step(&mut tape, &p, Some(a), z).unwrap();
    let ab = ly.fusion.step(&mut tape, &p, Some(b), ab).unwrap();
    let ba = ly.fusion.step(&mut tape, &p, Some(b), z).unwrap();
    let ba = ly.fusion.step(&mut tape, &p, Some(a), ba).unwrap();
    assert_ne!(values(&tape, ab), values(&tape, ba));
}

fn randn(dims: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
}

fn dist_of(tape: &mut Tape<f64>, mu: &[f64], log_sigma: &[f64]) -> LatentDistribution {
    let n = mu.len();
    LatentDistribution {
        mu: tape.param(Tensor::new(vec![1, n], mu.to_vec()).unwrap()),
        log_sigma: tape.param(Tensor::new(vec![1, n], log_sigma.to_vec()).unwrap()),
    }
}

#[test]
fn reparameterize_limits() {
    let mut tape = Tape::new();
    let d = dist_of(&mut tape, &[0.3, -1.0], &[0.5, -0.2]);
    let z = reparameterize(&mut tape, &d, Tensor::zeros(&[1, 2])).unwrap();
    assert_eq!(values(&tape, z), vec![0.3, -1.0]);
    let d = dist_of(&mut tape, &[0.3, -1.0], &[-40.0, -40.0]);
    let z = reparameterize(&mut tape, &d, randn(&[1, 2], 3)).unwrap();
    for (a, b) in values(&tape, z).iter().zip([0.3, -1.0]) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn reparameterize_is_differentiable_in_mu_and_sigma() {
    let mut tape = Tape::new();
    let d = dist_of(&mut tape, &[0.3], &[0.5]);
    let z = reparameterize(&mut tape, &d, Tensor::new(vec![1, 1], vec![2.0]).unwrap()).unwrap();
    let s = tape.sum(z).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(d.mu).unwrap(), &[1.0]);
    assert!((g.get(d.log_sigma).unwrap()[0] - 2.0 * 0.5f64.exp()).abs() < 1e-15);
}

#[test]
fn reparameterized_mean_matches_mu() {
    let n = 100_000;
    let mu = [0.7, -0.2, 1.5];
    let sigma = [0.5f64, 1.0, 2.0];
    let mut tape = Tape::new();
    let d = LatentDistribution {
        mu: tape.constant(Tensor::new(vec![n, 3], mu.iter().cycle().take(3 * n).copied().collect()).unwrap()),
        log_sigma: tape.constant(
            Tensor::new(vec![n, 3], sigma.iter().map(|s| s.ln()).cycle().take(3 * n).collect()).unwrap(),
        ),
    };
    let z = reparameterize(&mut tape, &d, randn(&[n, 3], 11)).unwrap();
    let z = values(&tape, z);
    for c in 0..3 {
        let mean: f64 = z.iter().skip(c).step_by(3).sum::<f64>() / n as f64;
        assert!((mean - mu[c]).abs() < 3.0 * sigma[c] / (n as f64).sqrt(), "coord {c}: {mean}");
    }
}

#[test]
fn box_averaging() {
    let pairs = pair_index_list(2).unwrap();
    let cand = [[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2]];
    let boxes = average_boxes(&pairs, &cand, &PartMask::all(2));
    assert_eq!(boxes[0].to_array(), [0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
    assert_eq!(boxes[1].to_array(), [0.7, 0.8, 0.9, 1.0, 1.1, 1.2]);

    let pairs = pair_index_list(7).unwrap();
    let beta = 0.375;
    let mut cand = vec![[0.0; 12]; 21];
    let mut counted = 0;
    for (p, (a, b)) in pairs.pairs().iter().enumerate() {
        for c in 0..12 {
            cand[p][c] = (p * 12 + c) as f64;
        }
        if *a == 3 {
            cand[p][..6].fill(beta);
            counted += 1;
        }
        if *b == 3 {
            cand[p][6..].fill(beta);
            counted += 1;
        }
    }
    assert_eq!(counted, 6);
    let boxes = average_boxes(&pairs, &cand, &PartMask::all(7));
    assert_eq!(boxes[3].to_array(), [beta as f32; 6]);
    // part 0 averages the first halves of pairs 0..6
    let expected: f64 = (0..6).map(|p| (p * 12) as f64).sum::<f64>() / 6.0;
    assert!((boxes[0].center[0] as f64 - expected).abs() < 1e-4);
}

#[test]
fn absent_partners_are_skipped_in_box_averaging() {
    let pairs = pair_index_list(3).unwrap();
    let mut cand = vec![[9.0; 12]; 3];
    cand[1][..6].fill(0.25); // pair (0,2)
    let boxes = average_boxes(&pairs, &cand, &PartMask::new(vec![true, false, true]));
    assert_eq!(boxes[0].to_array(), [0.25; 6]);
    assert_eq!(boxes[1], Box6::ZERO);
}

#[test]
fn decoding_is_deterministic_and_in_range() {
    let model = SagNet::<f32>::new(tiny_config(3)).unwrap();
    let codes = vec![vec![0.1, -0.4, 1.2], vec![0.0; 3]];
    let masks = vec![PartMask::all(3), PartMask::new(vec![false, true, true])];
    let a = model.decode(&codes, &masks).unwrap();
    let b = model.decode(&codes, &masks).unwrap();
    assert_eq!(a, b);
    assert!(a[0].parts.iter().all(|g| g.values().iter().all(|&v| v > 0.0 && v < 1.0)));
    assert!(a[1].parts[0].values().iter().all(|&v| v == 0.0));
    assert_eq!(a[1].boxes[0], Box6::ZERO);
    assert!(model.decode(&codes[..1], &masks).is_err());
}

#[test]
fn save_and_load_preserve_outputs() {
    let model = SagNet::<f32>::new(tiny_config(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    let back = SagNet::<f32>::load(dir.path()).unwrap();
    assert_eq!(back.store, model.store);
    let s = random_sample(2, 4, 8, None);
    assert_eq!(back.reconstruct(&[&s]).unwrap(), model.reconstruct(&[&s]).unwrap());
}

#[test]
fn wrong_arity_sample_is_rejected() {
    let model = SagNet::<f32>::new(tiny_config(3)).unwrap();
    let s = random_sample(2, 4, 9, None);
    assert!(matches!(model.encode(&[&s]), Err(ModelError::Contract(_))));
}
