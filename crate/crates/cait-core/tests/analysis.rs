//! Analysis instrumentation: branch-norm ratios, attention extraction,
//! and saliency maps.

use cait_core::analysis::{
    branch_ratios, extract_attention, saliency, SaliencyMap, Upsample,
};
use cait_core::blocks::{LayerScaleInit, ResidualStrategy, Stage};
use cait_core::cait::{CaitConfig, CaitModel, ClsPolicy};
use cait_core::rng::{streams, SeedRng};
use cait_core::tensor::Tensor;
use cait_core::CoreError;

fn toy_model(strategy: ResidualStrategy, seed: u64) -> CaitModel {
    let mut cfg = CaitConfig::toy(3).unwrap();
    cfg.strategy = strategy;
    cfg.drop_rate = 0.0;
    CaitModel::init(cfg, &mut SeedRng::new(seed, streams::MODEL_INIT)).unwrap()
}

fn probe(cfg: &CaitConfig, n: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = SeedRng::new(seed, streams::DATA);
    (0..n)
        .map(|_| {
            Tensor::from_vec(
                vec![cfg.patch_count, cfg.patch_dim()],
                rng.uniform_vec(cfg.patch_count * cfg.patch_dim(), 0.0, 1.0),
            )
            .unwrap()
        })
        .collect()
}

#[test]
fn zero_scales_give_exactly_zero_ratios() {
    let model = toy_model(
        ResidualStrategy::LayerScale {
            init: LayerScaleInit::Zero,
        },
        1,
    );
    let series = branch_ratios(&model, &probe(&model.config, 3, 2)).unwrap();
    assert_eq!(series.entries.len(), 2 * model.config.total_depth());
    for e in &series.entries {
        assert_eq!(e.ratio, 0.0);
        assert!(!e.flagged);
    }
}

#[test]
fn constant_init_scales_first_layer_ratio_linearly() {
    // Same seed => identical weights; only the diagonal init differs, so
    // the first attention branch (which sees the same input either way)
    // must scale exactly with epsilon.
    let small = toy_model(ResidualStrategy::layerscale(1e-5), 9);
    let unit = toy_model(ResidualStrategy::layerscale(1.0), 9);
    let inputs = probe(&small.config, 2, 3);
    let rs = branch_ratios(&small, &inputs).unwrap();
    let ru = branch_ratios(&unit, &inputs).unwrap();
    let a = rs.entries[0].ratio;
    let b = ru.entries[0].ratio;
    assert!((a - 1e-5 * b).abs() <= 1e-12 * b.max(1.0), "{a} vs 1e-5 * {b}");
    // And every ratio of the small-init model starts near zero.
    for e in &rs.entries {
        assert!(e.ratio < 1e-3, "layer {} ratio {}", e.layer, e.ratio);
    }
}

#[test]
fn folded_model_has_identical_ratios() {
    let mut model = toy_model(ResidualStrategy::layerscale(0.1), 4);
    let mut rng = SeedRng::new(40, streams::MODEL_INIT);
    for name in model.scale_param_names() {
        let id = model.store.find(&name).unwrap();
        let n = model.store.get(id).value.numel();
        let vals = rng.uniform_vec(n, -0.4, 0.6);
        model.store.get_mut(id).value.data_mut().copy_from_slice(&vals);
    }
    let folded = model.fold_layerscale().unwrap();
    let inputs = probe(&model.config, 3, 5);
    let a = branch_ratios(&model, &inputs).unwrap();
    let b = branch_ratios(&folded, &inputs).unwrap();
    assert_eq!(a.entries.len(), b.entries.len());
    for (x, y) in a.entries.iter().zip(&b.entries) {
        let denom = x.ratio.abs().max(1e-12);
        assert!(
            ((x.ratio - y.ratio).abs() / denom) < 1e-10,
            "layer {} branch {}: {} vs {}",
            x.layer,
            x.branch,
            x.ratio,
            y.ratio
        );
    }
}

#[test]
fn extraction_yields_heads_times_ca_layers_maps() {
    // XXS-style layout: 4 heads, 2 class-attention layers -> 8 maps.
    let model = toy_model(ResidualStrategy::layerscale(0.1), 6);
    assert_eq!(model.config.heads, 4);
    assert_eq!(model.config.ca_depth, 2);
    let patches = &probe(&model.config, 1, 7)[0];
    let records = extract_attention(&model, patches).unwrap();
    assert_eq!(records.len(), 2);
    let maps: usize = records.iter().map(|r| r.heads * r.queries).sum();
    assert_eq!(maps, 8);
    for rec in &records {
        assert_eq!(rec.stage, Stage::ClassAttention);
        for s in rec.row_sums() {
            assert!((s - 1.0).abs() < 1e-10);
        }
    }
}

#[test]
fn extraction_requires_class_attention_policy() {
    let mut cfg = CaitConfig::toy(2).unwrap();
    cfg.cls_policy = ClsPolicy::AveragePooling;
    cfg.ca_depth = 0;
    let model = CaitModel::init(cfg, &mut SeedRng::new(8, streams::MODEL_INIT)).unwrap();
    let patches = &probe(&model.config, 1, 8)[0];
    assert!(matches!(
        extract_attention(&model, patches),
        Err(CoreError::Config(_))
    ));
}

#[test]
fn extraction_is_side_effect_free() {
    let model = toy_model(ResidualStrategy::layerscale(0.1), 10);
    let patches = &probe(&model.config, 1, 11)[0];
    let a = extract_attention(&model, patches).unwrap();
    let b = extract_attention(&model, patches).unwrap();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert!(x
            .weights
            .iter()
            .zip(&y.weights)
            .all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn zeroed_query_key_projections_give_uniform_maps() {
    let mut model = toy_model(ResidualStrategy::layerscale(0.1), 12);
    for (_, p) in model.store.iter_mut() {
        if p.name.contains(".attn.q.") || p.name.contains(".attn.k.") {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let patches = &probe(&model.config, 1, 13)[0];
    let records = extract_attention(&model, patches).unwrap();
    for rec in &records {
        let uniform = 1.0 / rec.keys as f64;
        for w in &rec.weights {
            assert!((w - uniform).abs() < 1e-12);
        }
    }
}

#[test]
fn single_head_saliency_is_the_normalized_upsampled_map() {
    let mut cfg = CaitConfig::toy(2).unwrap();
    cfg.heads = 1;
    cfg.d = 64;
    cfg.keys_include_class = false;
    let model = CaitModel::init(cfg, &mut SeedRng::new(14, streams::MODEL_INIT)).unwrap();
    let patches = &probe(&model.config, 1, 15)[0];
    let records = extract_attention(&model, patches).unwrap();
    let rec = &records[0];
    let sal = saliency(
        &records,
        rec.layer_index,
        (4, 4),
        (64, 64),
        false,
        Upsample::Nearest,
        0,
    )
    .unwrap();
    // Values span [0, 1] and hit both bounds.
    let lo = sal.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = sal.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(lo, 0.0);
    assert_eq!(hi, 1.0);
    // Nearest upsampling: pixel centers reproduce the (normalized) map.
    let map = rec.map(0, 0);
    let mlo = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let mhi = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for i in 0..4 {
        for j in 0..4 {
            let want = (map[i * 4 + j] - mlo) / (mhi - mlo);
            let got = sal.values[(16 * i + 8) * 64 + (16 * j + 8)];
            assert!((got - want).abs() < 1e-12);
        }
    }
}

#[test]
fn constant_attention_normalizes_to_half() {
    let mut model = toy_model(ResidualStrategy::layerscale(0.1), 16);
    for (_, p) in model.store.iter_mut() {
        if p.name.contains(".attn.q.") || p.name.contains(".attn.k.") {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let patches = &probe(&model.config, 1, 17)[0];
    let records = extract_attention(&model, patches).unwrap();
    let rec = &records[0];
    let sal: SaliencyMap = saliency(
        &records,
        rec.layer_index,
        (4, 4),
        (32, 32),
        model.config.keys_include_class,
        Upsample::Nearest,
        0,
    )
    .unwrap();
    assert!(sal.values.iter().all(|v| *v == 0.5));
}

#[test]
fn saliency_range_stays_in_unit_interval_bilinear() {
    let model = toy_model(ResidualStrategy::layerscale(0.1), 18);
    let patches = &probe(&model.config, 1, 19)[0];
    let records = extract_attention(&model, patches).unwrap();
    let sal = saliency(
        &records,
        records[0].layer_index,
        (4, 4),
        (64, 64),
        model.config.keys_include_class,
        Upsample::Bilinear,
        3,
    )
    .unwrap();
    assert_eq!(sal.source_image, 3);
    assert!(sal.values.iter().all(|v| (0.0..=1.0).contains(v)));
}
