use statrs::distribution::{Chi, ContinuousCDF};

use super::*;
use crate::model::ModelConfig;

fn tiny_model(k: usize) -> SagNet<f32> {
    SagNet::new(ModelConfig {
        k,
        resolution: 4,
        latent_dim: 3,
        feature_dim: 6,
        iterations: 2,
        channels: vec![2, 3],
        seed: 5,
        class_id: 0,
    })
    .unwrap()
}

fn shape(seed: u64, k: usize, mask: Vec<bool>) -> ShapeSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (parts, boxes): (Vec<_>, Vec<_>) = (0..k).map(|_| random_part(&mut rng, 4)).unzip();
    ShapeSample::new(0, parts, boxes, PartMask::new(mask)).unwrap()
}

#[test]
fn sampling_is_seeded_and_binary() {
    let m = tiny_model(3);
    let a = sample_shapes(&m, 40, 7, &MaskPolicy::All).unwrap();
    let b = sample_shapes(&m, 40, 7, &MaskPolicy::All).unwrap();
    let c = sample_shapes(&m, 40, 8, &MaskPolicy::All).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.len(), 40);
    assert!(a.iter().all(|s| s.parts.iter().all(|p| p.is_binary()) && s.mask == PartMask::all(3)));
}

#[test]
fn empirical_masks_come_from_training() {
    let m = tiny_model(3);
    let train = vec![shape(1, 3, vec![true, false, true]), shape(2, 3, vec![false, true, true])];
    let policy = MaskPolicy::empirical(&train);
    let out = sample_shapes(&m, 50, 3, &policy).unwrap();
    let seen: std::collections::BTreeSet<Vec<bool>> = out.iter().map(|s| s.mask.flags().to_vec()).collect();
    assert_eq!(seen.len(), 2);
    assert!(seen.iter().all(|f| train.iter().any(|t| t.mask.flags() == f.as_slice())));
    let fixed = MaskPolicy::Fixed(PartMask::new(vec![true, true, false]));
    assert!(sample_shapes(&m, 5, 3, &fixed).unwrap().iter().all(|s| !s.mask.get(2)));
    assert!(sample_shapes(&m, 1, 3, &MaskPolicy::Fixed(PartMask::new(vec![true]))).is_err());
}

#[test]
fn latent_norms_follow_chi_distribution() {
    let n = 10_000;
    let mut norms: Vec<f64> = sample_latents(n, 512, 11)
        .iter()
        .map(|z| z.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt())
        .collect();
    norms.sort_by(f64::total_cmp);
    let chi = Chi::new(512).unwrap();
    let d = norms
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = chi.cdf(x);
            (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
        })
        .fold(0.0, f64::max);
    // Kolmogorov critical value for p = 0.01
    assert!(d * (n as f64).sqrt() < 1.628, "KS statistic {d}");
}

#[test]
fn interpolation_endpoints_match_reconstructions() {
    let m = tiny_model(2);
    let a = shape(3, 2, vec![true, true]);
    let b = shape(4, 2, vec![true, true]);
    let path = interpolate(&m, &a, &b, 5).unwrap();
    assert_eq!(path.len(), 5);
    assert_eq!(path[0], m.reconstruct(&[&a]).unwrap()[0]);
    assert_eq!(path[4], m.reconstruct(&[&b]).unwrap()[0]);
    for s in &path {
        assert!(s.all_finite());
        assert!(s.parts.iter().flat_map(|p| p.values()).all(|&v| v > 0.0 && v < 1.0));
    }
    let same = interpolate(&m, &a, &a, 3).unwrap();
    assert_eq!(same[1], m.reconstruct(&[&a]).unwrap()[0]);
    assert!(interpolate(&m, &a, &b, 1).is_err());
}

#[test]
fn completion_keeps_fixed_parts() {
    let m = tiny_model(3);
    let partial = shape(5, 3, vec![true, false, true]);
    let mut problem = CompletionProblem::new(partial.clone(), vec![1]);
    problem.iterations = 12;
    let out = complete(&m, &problem).unwrap();
    assert_eq!(out.drift.len(), 12);
    assert!(out.drift.iter().all(|d| d.is_finite()));
    for i in [0, 2] {
        assert_eq!(out.sample.parts[i], partial.parts[i]);
        assert_eq!(out.sample.boxes[i], partial.boxes[i]);
    }
    assert!(out.sample.mask.get(1));
    assert!(out.sample.parts[1].is_binary());
    assert_eq!(out, complete(&m, &problem).unwrap());
}

#[test]
fn completion_edge_cases() {
    let m = tiny_model(2);
    let s = shape(6, 2, vec![true, true]);
    let none = complete(&m, &CompletionProblem::new(s.clone(), vec![])).unwrap();
    assert_eq!(none.sample, s);
    assert!(matches!(complete(&m, &CompletionProblem::new(s.clone(), vec![0, 1])), Err(TaskError::Contract(_))));
    assert!(complete(&m, &CompletionProblem::new(s.clone(), vec![4])).is_err());
    let problems: Vec<CompletionProblem> = (0..3)
        .map(|i| CompletionProblem {
            iterations: 3,
            seed: i,
            ..CompletionProblem::new(s.clone(), vec![1])
        })
        .collect();
    let all = complete_all(&m, &problems).unwrap();
    assert_eq!(all[2], complete(&m, &problems[2]).unwrap());
}

#[test]
fn mapping_overwrites_one_modality() {
    let m = tiny_model(2);
    let s = shape(7, 2, vec![true, true]);
    let g2s = map_modality(&m, &s, Direction::G2S, 5, 1).unwrap();
    assert_eq!(g2s.sample.parts, s.parts);
    assert_ne!(g2s.sample.boxes, s.boxes);
    assert!(g2s.error.unwrap().is_finite());
    let s2g = map_modality(&m, &s, Direction::S2G, 5, 1).unwrap();
    assert_eq!(s2g.sample.boxes, s.boxes);
    assert!(s2g.sample.parts.iter().all(|p| p.is_binary()));
    assert!(s2g.error.unwrap() >= 0.0);
    assert_eq!(s2g.drift.len(), 5);
    assert_eq!("G2S".parse::<Direction>().unwrap(), Direction::G2S);
    assert!(matches!("sideways".parse::<Direction>(), Err(TaskError::Contract(_))));
}
