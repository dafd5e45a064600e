//! Properties that only make sense on trained models: latent statistics,
//! sample moments, interpolation behaviour, and the dataset's separability.

use std::collections::HashSet;

use flowaug_core::eval::{
    evaluate, fit_flow, generate_synthetic_dataset, stratified_split, train_classifier, AugmentRecipe, Class,
    ClassifierConfig, SyntheticSeismoConfig,
};
use flowaug_core::flow::{AttentionPlacement, FlowConfig, FlowModel};
use flowaug_core::synthesis::{
    decode, encode, generate_augmentations, interpolate, interpolate_latent, sample, InterpolationMode,
    InterpolationSpec,
};
use flowaug_core::verify::train_toy;
use flowaug_core::{Dequantizer, SeededRng, Tensor, TrainConfig};

fn toy() -> (Tensor, FlowModel) {
    let (data, model, _) = train_toy(50, 11).unwrap();
    (data, model)
}

/// Per-dimension values of every latent part, item-major.
fn flat_latents(model: &FlowModel, x: &Tensor) -> Vec<Vec<f64>> {
    let z = encode(model, x).unwrap();
    (0..x.batch())
        .map(|i| z.parts.iter().flat_map(|p| p.item_at(i).into_data()).collect())
        .collect()
}

fn moments(points: &[[f64; 2]]) -> [f64; 5] {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let cov = |f: &dyn Fn(&[f64; 2]) -> f64| points.iter().map(f).sum::<f64>() / (n - 1.0);
    [
        mx,
        my,
        cov(&|p| (p[0] - mx).powi(2)),
        cov(&|p| (p[1] - my).powi(2)),
        cov(&|p| (p[0] - mx) * (p[1] - my)),
    ]
}

fn bootstrap_sd(points: &[[f64; 2]], rounds: usize, rng: &mut SeededRng) -> [f64; 5] {
    let reps: Vec<[f64; 5]> = (0..rounds)
        .map(|_| {
            let resample: Vec<[f64; 2]> = (0..points.len()).map(|_| points[rng.below(points.len())]).collect();
            moments(&resample)
        })
        .collect();
    std::array::from_fn(|k| {
        let m = reps.iter().map(|r| r[k]).sum::<f64>() / rounds as f64;
        (reps.iter().map(|r| (r[k] - m).powi(2)).sum::<f64>() / (rounds - 1) as f64).sqrt()
    })
}

fn points(t: &Tensor) -> Vec<[f64; 2]> {
    t.data().chunks(2).map(|c| [c[0], c[1]]).collect()
}

#[test]
fn toy_latents_are_roughly_standard_normal() {
    let (data, model) = toy();
    let idx: Vec<usize> = (0..500).collect();
    let z = flat_latents(&model, &data.select(&idx));
    for d in 0..z[0].len() {
        let col: Vec<f64> = z.iter().map(|v| v[d]).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (col.len() - 1) as f64;
        assert!(mean.abs() < 0.2, "dim {d} mean {mean}");
        assert!((0.5..=1.5).contains(&var), "dim {d} variance {var}");
    }
}

#[test]
fn toy_samples_match_data_moments() {
    let (data, model) = toy();
    let mut rng = SeededRng::new(5);
    let drawn = sample(&model, data.batch(), 1.0, &mut rng).unwrap();
    let drawn = Tensor::stack(&drawn).unwrap();
    let (pd, ps) = (points(&data), points(&drawn));
    let (md, ms) = (moments(&pd), moments(&ps));
    let (sd, ss) = (bootstrap_sd(&pd, 200, &mut rng), bootstrap_sd(&ps, 200, &mut rng));
    for k in 0..5 {
        let band = 3.0 * (sd[k].powi(2) + ss[k].powi(2)).sqrt();
        assert!((md[k] - ms[k]).abs() <= band, "moment {k}: data {} samples {} band {band}", md[k], ms[k]);
    }
}

#[test]
fn decoded_interpolation_is_continuous_in_t() {
    let (data, model) = toy();
    let za = encode(&model, &data.select(&[0, 1, 2, 3])).unwrap();
    let zb = encode(&model, &data.select(&[4, 5, 6, 7])).unwrap();
    for mode in [InterpolationMode::Linear, InterpolationMode::Spherical] {
        let mut prev: Option<Tensor> = None;
        let mut worst = 0.0f64;
        for k in 1..1000 {
            let x = decode(&model, &interpolate_latent(&za, &zb, k as f64 * 1e-3, mode).unwrap()).unwrap();
            if let Some(p) = &prev {
                worst = worst.max(p.max_abs_diff(&x));
            }
            prev = Some(x);
        }
        assert!(worst < 0.05, "{mode:?}: step change {worst}");
    }
}

fn rare_images(count: usize) -> (Tensor, Vec<usize>) {
    let ds = generate_synthetic_dataset(&SyntheticSeismoConfig {
        size: 16,
        count: 700,
        seed: 3,
        ..SyntheticSeismoConfig::default()
    })
    .unwrap();
    let pos: Vec<usize> = ds.positions_of(Class::Bad).into_iter().take(count).collect();
    assert_eq!(pos.len(), count);
    let rare = ds.subset(&pos);
    (rare.images, rare.ids)
}

fn small_recipe() -> AugmentRecipe {
    AugmentRecipe {
        flow: FlowConfig {
            levels: 2,
            steps_per_level: 2,
            hidden: 8,
            attention: AttentionPlacement::LastLevel,
            ..FlowConfig::default()
        },
        training: TrainConfig {
            epochs: 5,
            batch_size: 10,
            warmup_steps: 10,
            ..TrainConfig::default()
        },
        ..AugmentRecipe::default()
    }
}

#[test]
fn trained_flow_round_trips_rare_images_and_interpolates_new_ones() {
    let (images, _) = rare_images(50);
    let (model, _) = fit_flow(&images, &small_recipe(), 8).unwrap();
    let back = decode(&model, &encode(&model, &images).unwrap()).unwrap();
    assert!(back.max_abs_diff(&images) < 1e-5);

    for (a, b) in [(0, 1), (2, 3), (10, 40)] {
        let (xa, xb) = (images.select(&[a]), images.select(&[b]));
        let mid = interpolate(&model, &xa, &xb, 0.5, InterpolationMode::Linear)
            .unwrap()
            .map(|v| v.clamp(0.0, 1.0 - 1.0 / 256.0));
        assert!(mid.data().iter().all(|v| (0.0..1.0).contains(v)));
        let mad = |x: &Tensor| mid.zip_map(x, |p, q| (p - q).abs()).unwrap().mean();
        assert!(mad(&xa) >= 1e-3 && mad(&xb) >= 1e-3, "pair ({a}, {b})");
    }
}

#[test]
fn thousand_augmentations_from_fifty_sources_are_distinct() {
    let (images, ids) = rare_images(50);
    let (model, _) = fit_flow(&images, &AugmentRecipe { training: TrainConfig { epochs: 1, ..small_recipe().training }, ..small_recipe() }, 9).unwrap();
    let set = generate_augmentations(
        &model,
        &images,
        &ids,
        1000,
        &InterpolationSpec::default(),
        &Dequantizer::eight_bit(),
        0,
        &mut SeededRng::new(10),
    )
    .unwrap();
    assert_eq!(set.len(), 1000);
    let mut seen = HashSet::new();
    for p in &set.provenance {
        assert!(p.t > 0.0 && p.t < 1.0);
        assert!(ids.contains(&p.source_a) && ids.contains(&p.source_b) && p.source_a != p.source_b);
        assert!(seen.insert((p.source_a, p.source_b, p.t.to_bits())), "duplicate {p:?}");
    }
}

#[test]
fn balanced_subsample_is_separable() {
    let ds = generate_synthetic_dataset(&SyntheticSeismoConfig::default()).unwrap();
    let mut pos = Vec::new();
    for c in Class::ALL {
        pos.extend(ds.positions_of(c).into_iter().take(240));
    }
    let balanced = ds.subset(&pos);
    let split = stratified_split(&balanced, None, 0.15, 0.25, 1).unwrap();
    let trained = train_classifier(
        &balanced.subset(&split.train),
        &balanced.subset(&split.valid),
        &ClassifierConfig::default(),
    )
    .unwrap();
    let m = evaluate(&trained.model, &balanced.subset(&split.test)).unwrap();
    assert!(m.accuracy >= 0.9, "accuracy {} {:?}", m.accuracy, m.confusion);
}
