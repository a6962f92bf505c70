mod common;

use common::nets::{net_shape, random_selection, NetShape};
use netdisguise::disguise::{adapt_output_layer_with, AdaptMode, AdaptationMeta};
use netdisguise::graph::{BnLayerStats, BnStats, FilterSelection, LayerSelection, LayerSpec, ModelGraph, ParamRole};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sel(layers: &[(usize, &[usize])]) -> FilterSelection {
    FilterSelection::new(layers.iter().map(|(l, f)| LayerSelection { layer: *l, filters: f.to_vec() }).collect())
}

fn two_conv() -> ModelGraph {
    let layers = vec![
        LayerSpec::conv(4, 1, 3, 1),
        LayerSpec::Relu,
        LayerSpec::conv(4, 4, 3, 1),
        LayerSpec::Relu,
        LayerSpec::AvgPoolGlobal,
        LayerSpec::dense(3, 4),
    ];
    ModelGraph::init(layers, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
}

/// Rule-based membership, evaluated one flat index at a time.
fn in_secret_set(g: &ModelGraph, s: &FilterSelection, i: usize) -> bool {
    let loc = g.locate(i).unwrap();
    let weighted = g.weight_layers();
    let out = *weighted.last().unwrap();
    let selected = |layer: usize, f: usize| layer == out || s.contains(layer, f);
    let prev = weighted.iter().rev().find(|&&w| w < loc.layer).copied();
    match loc.role {
        ParamRole::Weight => {
            let in_sel = match prev {
                None => true,
                Some(p) => {
                    let d_prev = g.layers()[p].filters().unwrap();
                    let width = g.layers()[loc.layer].filter_len().unwrap();
                    let j = match g.layers()[loc.layer] {
                        LayerSpec::Dense { in_width, .. } => loc.index[1] / (in_width / d_prev),
                        _ => loc.index[1],
                    };
                    let _ = width;
                    selected(p, j)
                }
            };
            selected(loc.layer, loc.index[0]) && in_sel
        }
        ParamRole::Bias => selected(loc.layer, loc.index[0]),
        ParamRole::Gamma | ParamRole::Beta => selected(prev.unwrap(), loc.index[0]),
        _ => false,
    }
}

#[test]
fn cross_channel_restriction_in_the_mask() {
    let g = two_conv();
    let id = AdaptationMeta::identity(3);
    let s = sel(&[(0, &[0, 1]), (2, &[2])]);
    let m = g.selection_to_mask(&s, &id).unwrap();
    for j in 0..4 {
        for k in 0..9 {
            let i = g.index_of(2, ParamRole::Weight, &[2, j, k / 3, k % 3]).unwrap();
            assert_eq!(m.value(i), if j < 2 { 0 } else { 1 });
        }
    }
    // filters outside S_2 stay trainable everywhere
    let i = g.index_of(2, ParamRole::Weight, &[1, 0, 0, 0]).unwrap();
    assert_eq!(m.value(i), 1);
}

#[test]
fn full_selection_freezes_every_original_parameter() {
    let g = two_conv();
    let id = AdaptationMeta::identity(3);
    let m = g.selection_to_mask(&FilterSelection::all(&g, &id).unwrap(), &id).unwrap();
    assert_eq!(m.frozen_count(), g.param_count());
}

#[test]
fn frozen_count_matches_enumeration() {
    let layers = vec![
        LayerSpec::conv(6, 2, 3, 1),
        LayerSpec::Relu,
        LayerSpec::conv(8, 6, 3, 1),
        LayerSpec::Relu,
        LayerSpec::MaxPool,
        LayerSpec::dense(10, 8 * 4),
        LayerSpec::Relu,
        LayerSpec::dense(3, 10),
    ];
    let g = ModelGraph::init(layers, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let id = AdaptationMeta::identity(3);
    let s = sel(&[(0, &[3, 4, 5]), (2, &[4, 5, 6, 7]), (5, &[5, 6, 7, 8, 9])]);
    let m = g.selection_to_mask(&s, &id).unwrap();
    let enumerated = (0..g.param_count()).filter(|&i| in_secret_set(&g, &s, i)).count();
    // input channels 2, then per layer |S_l|·|S_{l-1}|·kernel + |S_l|; the
    // dense layer sees 4 columns per selected channel, the output keeps all 3
    let closed_form = (3 * 2 * 9 + 3) + (4 * 3 * 9 + 4) + (5 * 4 * 4 + 5) + (3 * 5 + 3);
    assert_eq!(enumerated, closed_form);
    assert_eq!(m.frozen_count(), closed_form);
    for i in 0..g.param_count() {
        assert_eq!(m.is_frozen(i), in_secret_set(&g, &s, i), "index {i}");
    }
}

#[test]
fn identity_extraction_is_bit_exact() {
    let shape = NetShape { in_channels: 2, side: 6, convs: vec![(4, true, true), (3, true, false)], hidden: Some(5), outputs: 3 };
    let g = shape.graph(5);
    let id = AdaptationMeta::identity(3);
    let sub = g.extract_subnetwork(&FilterSelection::all(&g, &id).unwrap(), &BnStats::from_graph(&g), &id).unwrap();
    assert_eq!(sub, g);
    let x = shape.input(3, 6);
    let (a, b) = (g.predict(&x).unwrap(), sub.predict(&x).unwrap());
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn single_layer_extraction_keeps_rows() {
    let layers = vec![LayerSpec::conv(4, 2, 3, 0), LayerSpec::Relu, LayerSpec::dense(2, 4 * 4)];
    let g = ModelGraph::init(layers, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let id = AdaptationMeta::identity(2);
    let sub = g.extract_subnetwork(&sel(&[(0, &[1, 3])]), &BnStats::default(), &id).unwrap();
    assert_eq!(sub.layers()[0], LayerSpec::conv(2, 2, 3, 0));
    let w = g.role_slice(0, ParamRole::Weight).unwrap();
    let sw = sub.role_slice(0, ParamRole::Weight).unwrap();
    assert_eq!(&sw[..18], &w[18..36]);
    assert_eq!(&sw[18..], &w[54..72]);
    assert_eq!(sub.layers()[2], LayerSpec::dense(2, 8));
}

fn random_stats(g: &ModelGraph, seed: u64) -> BnStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = g
        .batchnorm_layers()
        .into_iter()
        .map(|l| {
            let c = g.layer_range(l).len() / 4;
            BnLayerStats {
                mean: (0..c).map(|_| rng.random_range(-0.5..0.5)).collect(),
                var: (0..c).map(|_| rng.random_range(0.5..2.0)).collect(),
            }
        })
        .collect();
    BnStats { layers }
}

/// The full network with every unselected parameter zeroed, unselected
/// batchnorm channels silenced and secret statistics installed.
fn masked_reference(g: &ModelGraph, s: &FilterSelection, stats: &BnStats) -> ModelGraph {
    let mut m = g.clone();
    let bn = g.batchnorm_layers();
    for i in 0..g.param_count() {
        let loc = g.locate(i).unwrap();
        match loc.role {
            ParamRole::RunningMean | ParamRole::RunningVar => {
                let k = bn.iter().position(|&l| l == loc.layer).unwrap();
                let st = &stats.layers[k];
                m.params_mut()[i] = if loc.role == ParamRole::RunningMean { st.mean[loc.index[0]] } else { st.var[loc.index[0]] };
            }
            _ if !in_secret_set(g, s, i) => m.params_mut()[i] = 0.0,
            _ => {}
        }
    }
    m
}

#[test]
fn extraction_matches_masked_forward_on_random_nets() {
    let mut runner = proptest::test_runner::TestRunner::new(ProptestConfig::with_cases(48));
    runner
        .run(&(net_shape(), any::<u64>()), |(shape, seed)| {
            let g = shape.graph(seed);
            let id = AdaptationMeta::identity(shape.outputs);
            let s = random_selection(&g, &id, seed ^ 1);
            let stats = random_stats(&g, seed ^ 2);
            let sub = g.extract_subnetwork(&s, &stats, &id).unwrap();
            let reference = masked_reference(&g, &s, &stats);
            let x = shape.input(2, seed ^ 3);
            let (a, b) = (sub.predict(&x).unwrap(), reference.predict(&x).unwrap());
            prop_assert_eq!(a.shape(), b.shape());
            for (p, q) in a.data().iter().zip(b.data()) {
                prop_assert!((p - q).abs() <= 1e-5 * (1.0 + q.abs()), "{} vs {}", p, q);
            }
            Ok(())
        })
        .unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flattening_is_a_bijection(shape in net_shape(), seed in any::<u64>()) {
        let g = shape.graph(seed);
        for i in 0..g.param_count() {
            let loc = g.locate(i).unwrap();
            prop_assert_eq!(g.index_of(loc.layer, loc.role, &loc.index).unwrap(), i);
        }
        prop_assert!(g.locate(g.param_count()).is_err());
    }

    #[test]
    fn enlarging_a_selection_never_unfreezes(shape in net_shape(), seed in any::<u64>()) {
        let g = shape.graph(seed);
        let id = AdaptationMeta::identity(shape.outputs);
        let small = random_selection(&g, &id, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let mut big = small.clone();
        for s in &mut big.layers {
            let d = g.layers()[s.layer].filters().unwrap();
            s.filters.extend((0..d).filter(|_| rng.random_bool(0.4)));
        }
        let big = FilterSelection::new(big.layers);
        prop_assert!(small.is_subset_of(&big));
        let (ms, mb) = (g.selection_to_mask(&small, &id).unwrap(), g.selection_to_mask(&big, &id).unwrap());
        for i in ms.frozen_indices() {
            prop_assert!(mb.is_frozen(i));
        }
    }

    #[test]
    fn extracted_values_reembed_bit_exactly(shape in net_shape(), seed in any::<u64>()) {
        let g = shape.graph(seed);
        let id = AdaptationMeta::identity(shape.outputs);
        let s = random_selection(&g, &id, seed);
        let (sub, map) = g.extract_with_map(&s, &BnStats::from_graph(&g), &id).unwrap();
        let mut blank = vec![f32::NAN; g.param_count()];
        map.scatter_selected(sub.params(), &mut blank);
        let mask = g.selection_to_mask(&s, &id).unwrap();
        for i in 0..g.param_count() {
            if mask.is_frozen(i) {
                prop_assert_eq!(blank[i].to_bits(), g.params()[i].to_bits());
            } else {
                prop_assert!(blank[i].is_nan());
            }
        }
        prop_assert_eq!(map.gather(g.params()), sub.params().to_vec());
    }
}

#[test]
fn selection_errors() {
    let g = two_conv();
    let id = AdaptationMeta::identity(3);
    assert!(g.selection_to_mask(&sel(&[(0, &[0])]), &id).is_err());
    assert!(g.selection_to_mask(&sel(&[(0, &[0]), (2, &[])]), &id).is_err());
    assert!(g.selection_to_mask(&sel(&[(0, &[0]), (2, &[4])]), &id).is_err());
    assert!(g.selection_to_mask(&sel(&[(0, &[0]), (3, &[1])]), &id).is_err());
    let s = sel(&[(0, &[0]), (2, &[1])]);
    assert!(g.extract_subnetwork(&s, &BnStats { layers: vec![BnLayerStats { mean: vec![0.0], var: vec![1.0] }] }, &id).is_err());
}

#[test]
fn same_width_adaptation_is_identity() {
    let g = NetShape { in_channels: 1, side: 4, convs: vec![(3, false, true)], hidden: None, outputs: 10 }.graph(1);
    let (a, meta) = adapt_output_layer_with(&g, 10, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(meta.mode, AdaptMode::None);
    assert_eq!(a, g);
}

#[test]
fn widened_output_preserves_the_original_neurons() {
    let shape = NetShape { in_channels: 1, side: 4, convs: vec![(3, true, true)], hidden: Some(6), outputs: 4 };
    let g = shape.graph(2);
    let (a, meta) = adapt_output_layer_with(&g, 10, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(meta.mode, AdaptMode::Upsample);
    assert_eq!(a.output_dim(), 10);
    let x = shape.input(5, 3);
    let (before, after) = (g.predict(&x).unwrap(), a.predict(&x).unwrap());
    for n in 0..5 {
        for k in 0..4 {
            assert_eq!(before.data()[n * 4 + k].to_bits(), after.data()[n * 10 + k].to_bits());
        }
    }
    let all = FilterSelection::all(&a, &meta).unwrap();
    let mask = a.selection_to_mask(&all, &meta).unwrap();
    let out = *a.weight_layers().last().unwrap();
    for r in 4..10 {
        assert_eq!(mask.value(a.index_of(out, ParamRole::Bias, &[r]).unwrap()), 1);
        assert_eq!(mask.value(a.index_of(out, ParamRole::Weight, &[r, 0]).unwrap()), 1);
    }
}

#[test]
fn extended_output_parameter_count() {
    let shape = NetShape { in_channels: 1, side: 4, convs: vec![(3, false, true)], hidden: Some(7), outputs: 10 };
    let g = shape.graph(4);
    for added in [1, 3, 5] {
        let (a, meta) = adapt_output_layer_with(&g, 4, Some(added), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(meta.mode, AdaptMode::HiddenExtend);
        assert_eq!(meta.added_neurons, added);
        // enumerate the new parameters tensor by tensor
        let fan_in = 7;
        let mut count = 0;
        for l in a.weight_layers() {
            for (role, shape) in a.layers()[l].param_shapes() {
                let n: usize = shape.iter().product();
                count += match (l, role) {
                    (l, _) if l == a.weight_layers()[a.weight_layers().len() - 1] => n,
                    (l, ParamRole::Weight) if l == a.weight_layers()[a.weight_layers().len() - 2] => added * fan_in,
                    (l, ParamRole::Bias) if l == a.weight_layers()[a.weight_layers().len() - 2] => added,
                    _ => 0,
                };
            }
        }
        assert_eq!(count, added * (fan_in + 1) + 4 * (10 + added) + 4);
        assert_eq!(a.param_count() - g.param_count(), count);
        // the original ten logits survive through the hidden layer
        let sub = a
            .extract_subnetwork(&FilterSelection::all(&a, &meta).unwrap(), &BnStats::from_graph(&a), &meta)
            .unwrap();
        assert_eq!(sub, g);
    }
    assert_eq!(AdaptationMeta::default_added_neurons(10), 3);
    assert!(adapt_output_layer_with(&g, 0, None, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}
