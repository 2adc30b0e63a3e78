use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::autodiff::{grad_check, GradCheckOptions};
use crate::shapes::pair_index_list;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(dims: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let n: usize = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| StandardNormal.sample(&mut r)).collect()).unwrap()
}

/// Perturb every parameter so zero-initialized biases are exercised too.
fn jitter(store: &mut ParamStore<f64>, seed: u64) {
    let ids: Vec<ParamId> = store.ids().collect();
    for (n, id) in ids.into_iter().enumerate() {
        let noise = randn(store.get(id).dims(), seed * 1000 + n as u64);
        let t = store.get_mut(id);
        for (v, e) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += 0.1 * e;
        }
    }
}

fn params_of(store: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    store.iter().map(|(_, t)| t.clone()).collect()
}

fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var, TensorError> {
    let w = tape.constant(randn(tape.dims(y), seed ^ 77));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn assert_grad<F>(store: &ParamStore<f64>, seed: u64, f: F)
where
    F: Fn(&mut Tape<f64>, &Bound) -> Result<Var, TensorError>,
{
    let report = grad_check(
        |t, v| {
            let p = Bound::from_vars(v.to_vec());
            let y = f(t, &p)?;
            project(t, y, seed)
        },
        &params_of(store),
        &GradCheckOptions {
            seed,
            ..Default::default()
        },
    );
    assert!(report.passed(), "{report:?}");
}

#[test]
fn geo_encoder_default_output_is_512() {
    let mut store = ParamStore::<f32>::new();
    let enc = GeoEncoder::new(&mut store, &mut rng(0), "enc", 32, &[8, 16, 32, 64, 128], 512).unwrap();
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let x = tape.constant(Tensor::zeros(&[2, 32, 32, 32, 1]));
    let f = enc.forward(&mut tape, &p, x).unwrap();
    assert_eq!(tape.dims(f), &[2, 512]);
    let d = tape.value(f).data();
    assert_eq!(d[..512], d[512..]);
}

#[test]
fn geo_encoder_rejects_wrong_resolution() {
    let mut store = ParamStore::<f32>::new();
    let enc = GeoEncoder::new(&mut store, &mut rng(0), "enc", 8, &[2, 2, 2], 4).unwrap();
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let x = tape.constant(Tensor::zeros(&[1, 16, 16, 16, 1]));
    assert!(matches!(enc.forward(&mut tape, &p, x), Err(TensorError::Shape { .. })));
    assert!(GeoEncoder::new(&mut ParamStore::<f32>::new(), &mut rng(0), "e", 8, &[2, 2], 4).is_err());
    assert!(GeoEncoder::new(&mut ParamStore::<f32>::new(), &mut rng(0), "e", 12, &[2, 2], 4).is_err());
}

#[test]
fn geo_decoder_output_is_a_probability_volume() {
    let mut store = ParamStore::<f32>::new();
    let dec = GeoDecoder::new(&mut store, &mut rng(1), "dec", 16, &[8, 16, 32, 64], 512).unwrap();
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let f = tape.constant(randn(&[3, 512], 2).cast());
    let logits = dec.forward(&mut tape, &p, f).unwrap();
    assert_eq!(tape.dims(logits), &[3, 16, 16, 16, 1]);
    let probs = tape.sigmoid(logits).unwrap();
    assert!(tape.value(probs).data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn geo_layers_pass_gradient_check() {
    for seed in 0..3 {
        let mut store = ParamStore::<f64>::new();
        let enc = GeoEncoder::new(&mut store, &mut rng(seed), "enc", 4, &[2, 3], 5).unwrap();
        jitter(&mut store, seed);
        let x = randn(&[2, 4, 4, 4, 1], seed + 10);
        assert_grad(&store, seed, |t, p| {
            let x = t.constant(x.clone());
            enc.forward(t, p, x)
        });

        let mut store = ParamStore::<f64>::new();
        let dec = GeoDecoder::new(&mut store, &mut rng(seed), "dec", 4, &[2, 3], 5).unwrap();
        jitter(&mut store, seed);
        let f = randn(&[2, 5], seed + 20);
        assert_grad(&store, seed, |t, p| {
            let f = t.constant(f.clone());
            dec.forward(t, p, f)
        });
    }
}

#[test]
fn struct_layers_dims_bias_and_gradients() {
    let mut store = ParamStore::<f64>::new();
    let enc = StructEncoder::new(&mut store, &mut rng(3), "se", 512);
    let dec = StructDecoder::new(&mut store, &mut rng(3), "sd", 512);
    let bias_values: Vec<f64> = (0..12).map(|i| i as f64 * 0.1).collect();
    store.get_mut(dec.fc.b).data_mut().copy_from_slice(&bias_values);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let pairs = tape.constant(randn(&[4, 12], 4));
    let h = enc.forward(&mut tape, &p, pairs).unwrap();
    assert_eq!(tape.dims(h), &[4, 512]);
    let zero = tape.constant(Tensor::zeros(&[1, 512]));
    let out = dec.forward(&mut tape, &p, zero).unwrap();
    assert_eq!(tape.value(out).data(), bias_values.as_slice());

    for seed in 0..3 {
        let mut store = ParamStore::<f64>::new();
        let enc = StructEncoder::new(&mut store, &mut rng(seed), "se", 6);
        let dec = StructDecoder::new(&mut store, &mut rng(seed), "sd", 6);
        jitter(&mut store, seed);
        let x = randn(&[3, 12], seed + 5);
        assert_grad(&store, seed, |t, p| {
            let x = t.constant(x.clone());
            let h = enc.forward(t, p, x)?;
            dec.forward(t, p, h)
        });
    }
}

#[test]
fn gru_with_zero_parameters_halves_the_state() {
    let mut store = ParamStore::<f64>::new();
    let gru = Gru::new(&mut store, &mut rng(0), "g", 4, 4);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let h0 = randn(&[2, 4], 1);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let x = tape.constant(randn(&[2, 4], 2));
    let h = tape.constant(h0.clone());
    let h1 = gru.step(&mut tape, &p, Some(x), h).unwrap();
    for (a, b) in tape.value(h1).data().iter().zip(h0.data()) {
        assert!((a - 0.5 * b).abs() < 1e-15);
    }
}

#[test]
fn saturated_update_gate_keeps_the_state() {
    let mut store = ParamStore::<f64>::new();
    let gru = Gru::new(&mut store, &mut rng(5), "g", 3, 3);
    store.get_mut(gru.bh).data_mut()[3..6].fill(20.0);
    let h0 = randn(&[1, 3], 6);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let x = tape.constant(randn(&[1, 3], 7));
    let h = tape.constant(h0.clone());
    let h1 = gru.step(&mut tape, &p, Some(x), h).unwrap();
    for (a, b) in tape.value(h1).data().iter().zip(h0.data()) {
        assert!((a - b).abs() < 1e-7);
    }
}

#[test]
fn gru_chain_passes_gradient_check() {
    for seed in 0..3 {
        let mut store = ParamStore::<f64>::new();
        let gru = Gru::new(&mut store, &mut rng(seed), "g", 3, 4);
        let blind = Gru::new(&mut store, &mut rng(seed), "b", 0, 4);
        jitter(&mut store, seed);
        let xs: Vec<Tensor<f64>> = (0..3).map(|i| randn(&[2, 3], seed * 10 + i)).collect();
        let h0 = randn(&[2, 4], seed + 99);
        assert_grad(&store, seed, |t, p| {
            let mut h = t.constant(h0.clone());
            for x in &xs {
                let x = t.constant(x.clone());
                h = gru.step(t, p, Some(x), h)?;
            }
            blind.step(t, p, None, h)
        });
    }
}

#[test]
fn gru_rejects_mismatched_input() {
    let mut store = ParamStore::<f64>::new();
    let blind = Gru::new(&mut store, &mut rng(0), "b", 0, 2);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let h = tape.constant(Tensor::zeros(&[1, 2]));
    let x = tape.constant(Tensor::zeros(&[1, 2]));
    assert!(blind.step(&mut tape, &p, Some(x), h).is_err());
}

struct AttnFixture {
    store: ParamStore<f64>,
    f_g: AttentionGate,
    f_s: AttentionGate,
}

fn attn_fixture(h: usize, seed: u64) -> AttnFixture {
    let mut store = ParamStore::<f64>::new();
    let f_g = AttentionGate::new(&mut store, &mut rng(seed), "fg", h);
    let f_s = AttentionGate::new(&mut store, &mut rng(seed + 1), "fs", h);
    jitter(&mut store, seed);
    AttnFixture { store, f_g, f_s }
}

fn run_attention(fx: &AttnFixture, geo: &Tensor<f64>, st: &Tensor<f64>, k: usize, masks: &[Vec<bool>]) -> (Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new();
    let p = fx.store.bind(&mut tape, false);
    let g = tape.constant(geo.clone());
    let s = tape.constant(st.clone());
    let inc = Incidence::new(k, masks).unwrap();
    let (mg, ms) = attention_messages(&mut tape, &p, &fx.f_g, &fx.f_s, g, s, &inc).unwrap();
    (tape.value(mg).data().to_vec(), tape.value(ms).data().to_vec())
}

fn gate_ref(store: &ParamStore<f64>, gate: &AttentionGate, a: &[f64], b: &[f64]) -> Vec<f64> {
    let w = store.get(gate.fc.w).data();
    let bias = store.get(gate.fc.b).data();
    let h = bias.len();
    let input: Vec<f64> = a.iter().chain(b).copied().collect();
    (0..h)
        .map(|o| {
            let s: f64 = input.iter().enumerate().map(|(i, v)| v * w[i * h + o]).sum::<f64>() + bias[o];
            1.0 / (1.0 + (-s).exp())
        })
        .collect()
}

#[test]
fn attention_matches_direct_summation() {
    let (k, h) = (3, 4);
    let fx = attn_fixture(h, 11);
    let pairs = pair_index_list(k).unwrap();
    let geo = randn(&[k, h], 12);
    let st = randn(&[pairs.len(), h], 13);
    let (mg, ms) = run_attention(&fx, &geo, &st, k, &[vec![true; k]]);
    let row = |t: &Tensor<f64>, r: usize| t.data()[r * h..(r + 1) * h].to_vec();
    for i in 0..k {
        let mut expected = vec![0.0; h];
        for (p, &(a, b)) in pairs.pairs().iter().enumerate() {
            if a == i || b == i {
                let gate = gate_ref(&fx.store, &fx.f_g, &row(&geo, i), &row(&st, p));
                for c in 0..h {
                    expected[c] += gate[c] * st.data()[p * h + c];
                }
            }
        }
        for c in 0..h {
            assert!((mg[i * h + c] - expected[c]).abs() < 1e-12);
        }
    }
    for (p, &(a, b)) in pairs.pairs().iter().enumerate() {
        let ga = gate_ref(&fx.store, &fx.f_s, &row(&st, p), &row(&geo, a));
        let gb = gate_ref(&fx.store, &fx.f_s, &row(&st, p), &row(&geo, b));
        for c in 0..h {
            let expected = ga[c] * geo.data()[a * h + c] + gb[c] * geo.data()[b * h + c];
            assert!((ms[p * h + c] - expected).abs() < 1e-12);
            assert!(ga[c] > 0.0 && ga[c] < 1.0);
        }
    }
}

#[test]
fn attention_two_parts_is_a_single_term() {
    let h = 3;
    let fx = attn_fixture(h, 21);
    let geo = randn(&[2, h], 22);
    let st = randn(&[1, h], 23);
    let (mg, _) = run_attention(&fx, &geo, &st, 2, &[vec![true, true]]);
    let gate = gate_ref(&fx.store, &fx.f_g, &geo.data()[..h], st.data());
    for c in 0..h {
        assert!((mg[c] - gate[c] * st.data()[c]).abs() < 1e-12);
    }
}

#[test]
fn attention_of_zero_features_is_zero() {
    let fx = attn_fixture(4, 31);
    let (mg, ms) = run_attention(&fx, &Tensor::zeros(&[4, 4]), &Tensor::zeros(&[6, 4]), 4, &[vec![true; 4]]);
    assert!(mg.iter().chain(&ms).all(|&v| v == 0.0));
}

#[test]
fn absent_parts_exchange_nothing() {
    let h = 3;
    let fx = attn_fixture(h, 41);
    let geo = randn(&[3, h], 42);
    let st = randn(&[3, h], 43);
    let (mg, ms) = run_attention(&fx, &geo, &st, 3, &[vec![true, false, true]]);
    assert!(mg[h..2 * h].iter().all(|&v| v == 0.0));
    // pairs (0,1) and (1,2) touch the absent part
    assert!(ms[..h].iter().chain(&ms[2 * h..]).all(|&v| v == 0.0));
    assert!(ms[h..2 * h].iter().any(|&v| v != 0.0));
}

#[test]
fn attention_is_permutation_equivariant() {
    let (k, h) = (4, 3);
    let fx = attn_fixture(h, 51);
    let pairs = pair_index_list(k).unwrap();
    let geo = randn(&[k, h], 52);
    let st = randn(&[pairs.len(), h], 53);
    let perm = [2usize, 0, 3, 1];
    // new part perm[i] is old part i
    let mut pgeo = vec![0.0; k * h];
    for i in 0..k {
        pgeo[perm[i] * h..(perm[i] + 1) * h].copy_from_slice(&geo.data()[i * h..(i + 1) * h]);
    }
    let mut pst = vec![0.0; pairs.len() * h];
    for (p, &(a, b)) in pairs.pairs().iter().enumerate() {
        let q = pairs.position(perm[a].min(perm[b]), perm[a].max(perm[b])).unwrap();
        pst[q * h..(q + 1) * h].copy_from_slice(&st.data()[p * h..(p + 1) * h]);
    }
    let (mg, _) = run_attention(&fx, &geo, &st, k, &[vec![true; k]]);
    let (pmg, _) = run_attention(
        &fx,
        &Tensor::new(vec![k, h], pgeo).unwrap(),
        &Tensor::new(vec![pairs.len(), h], pst).unwrap(),
        k,
        &[vec![true; k]],
    );
    for i in 0..k {
        for c in 0..h {
            assert!((mg[i * h + c] - pmg[perm[i] * h + c]).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_passes_gradient_check() {
    for seed in 0..3 {
        let fx = attn_fixture(3, 60 + seed);
        let geo = randn(&[6, 3], seed);
        let st = randn(&[6, 3], seed + 1);
        let masks = vec![vec![true, true, true], vec![true, false, true]];
        let inc = Incidence::new(3, &masks).unwrap();
        let mut store = fx.store.clone();
        let g_id = store.add("geo", geo);
        let s_id = store.add("st", st);
        assert_grad(&store, seed, |t, p| {
            let (mg, ms) = attention_messages(t, p, &fx.f_g, &fx.f_s, p.var(g_id), p.var(s_id), &inc)?;
            let a = t.sum(mg)?;
            let b = t.square(ms)?;
            let b = t.sum(b)?;
            t.add(a, b)
        });
    }
}
