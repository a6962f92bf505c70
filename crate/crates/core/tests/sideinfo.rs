mod common;

use common::nets::{case, NetShape};
use netdisguise::disguise::AdaptationMeta;
use netdisguise::graph::{BnStats, FilterSelection, LayerSelection, LayerSpec, ModelGraph};
use netdisguise::sideinfo::{embed, extract, frame_payload, parse_payload, payload_len, select_hosts, SideInfoError, SideInfoPayload, StegoKey};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn two_layer() -> ModelGraph {
    let layers = vec![LayerSpec::conv(4, 1, 3, 1), LayerSpec::Relu, LayerSpec::conv(4, 4, 3, 1), LayerSpec::Relu, LayerSpec::dense(2, 4 * 3 * 3)];
    ModelGraph::init(layers, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
}

#[test]
fn membership_bitstring_example() {
    let g = two_layer();
    let sel = FilterSelection::new(vec![LayerSelection { layer: 0, filters: vec![0, 1] }, LayerSelection { layer: 2, filters: vec![2] }]);
    let adapt = AdaptationMeta::identity(2);
    let p = frame_payload(&g, &sel, &adapt, &BnStats::default()).unwrap();
    let bytes = p.to_bytes();
    // version, layer count, three filter counts
    assert_eq!(&bytes[..9], &[1, 3, 0, 4, 0, 4, 0, 2, 0]);
    // 0011 1101, then the two output rows and padding
    assert_eq!(bytes[9], 0b0011_1101);
    assert_eq!(bytes[10], 0);
    // empty statistics block
    assert_eq!(&bytes[24..28], &[0, 0, 0, 0]);
    assert_eq!(bytes.len(), payload_len(&g));
    let (s, a, bn) = parse_payload(&g, &p).unwrap();
    assert_eq!((s, a), (sel, adapt));
    assert!(bn.layers.is_empty());
}

fn hosts_only_lsb(before: &ModelGraph, after: &ModelGraph, hosts: &[usize]) -> Result<(), TestCaseError> {
    let mut is_host = vec![false; before.param_count()];
    hosts.iter().for_each(|&h| is_host[h] = true);
    for (i, (a, b)) in before.params().iter().zip(after.params()).enumerate() {
        let d = a.to_bits() ^ b.to_bits();
        prop_assert!(d == 0 || (is_host[i] && d == 1), "parameter {i}: {a} -> {b}");
    }
    Ok(())
}

/// Networks wide enough to carry their own side information.
fn host_shape() -> impl Strategy<Value = NetShape> {
    (
        6usize..10,
        prop::collection::vec((4usize..10, any::<bool>(), any::<bool>()), 1..4),
        prop::option::of(6usize..16),
        1usize..8,
    )
        .prop_map(|(in_channels, convs, hidden, outputs)| NetShape { in_channels, side: 6, convs, hidden, outputs })
}

#[test]
fn frame_embed_extract_parse_round_trips() {
    let mut runner = TestRunner::new(Config { cases: 200, ..Config::default() });
    let skipped = std::cell::Cell::new(0);
    runner
        .run(&(host_shape(), 1usize..9, any::<u64>(), any::<u64>()), |(shape, o_t, seed, key)| {
            let c = case(&shape, o_t, seed);
            let p = frame_payload(&c.stego, &c.selection, &c.adapt, &c.bn).unwrap();
            prop_assert_eq!(p.to_bytes().len(), payload_len(&c.stego));
            let marked = match embed(&c.stego, &p, StegoKey(key)) {
                Ok(m) => m,
                Err(SideInfoError::Capacity { bits, params }) => {
                    prop_assert!(bits > params);
                    skipped.set(skipped.get() + 1);
                    return Ok(());
                }
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            };
            let hosts = select_hosts(StegoKey(key), c.stego.param_count(), payload_len(&c.stego) * 8).unwrap();
            hosts_only_lsb(&c.stego, &marked, &hosts)?;
            let back = extract(&marked, StegoKey(key)).unwrap();
            prop_assert_eq!(back.to_bytes(), p.to_bytes());
            let (sel, adapt, bn) = parse_payload(&marked, &back).unwrap();
            prop_assert_eq!(sel, c.selection);
            prop_assert_eq!(adapt, c.adapt);
            prop_assert_eq!(bn, c.bn);
            Ok(())
        })
        .unwrap();
    assert!(skipped.get() < 20, "{} of 200 cases could not carry their payload", skipped.get());
}

#[test]
fn wrong_keys_are_rejected() {
    let shape = NetShape { in_channels: 3, side: 6, convs: vec![(8, true, true), (12, true, false)], hidden: Some(8), outputs: 3 };
    let c = case(&shape, 3, 4);
    let p = frame_payload(&c.stego, &c.selection, &c.adapt, &c.bn).unwrap();
    let marked = embed(&c.stego, &p, StegoKey(77)).unwrap();
    for k in 0..2000u64 {
        let key = StegoKey(77 ^ (k + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        assert!(matches!(extract(&marked, key), Err(SideInfoError::Checksum { .. })), "key {key:?}");
    }
}

#[test]
fn tampering_is_detected() {
    let shape = NetShape { in_channels: 8, side: 4, convs: vec![(6, true, false)], hidden: None, outputs: 2 };
    let c = case(&shape, 2, 1);
    let p = frame_payload(&c.stego, &c.selection, &c.adapt, &c.bn).unwrap();
    let marked = embed(&c.stego, &p, StegoKey(5)).unwrap();
    let hosts = select_hosts(StegoKey(5), marked.param_count(), payload_len(&marked) * 8).unwrap();
    for &h in hosts.iter().step_by(7) {
        let mut t = marked.clone();
        t.params_mut()[h] = f32::from_bits(t.params()[h].to_bits() ^ 1);
        assert!(matches!(extract(&t, StegoKey(5)), Err(SideInfoError::Checksum { .. })));
    }
}

#[test]
fn host_lists_are_deterministic_prefixes() {
    let a = select_hosts(StegoKey(3), 1000, 100).unwrap();
    assert_eq!(a, select_hosts(StegoKey(3), 1000, 100).unwrap());
    assert_eq!(&select_hosts(StegoKey(3), 1000, 400).unwrap()[..100], a.as_slice());
    let mut sorted = a.clone();
    sorted.sort_unstable();
    sorted.dedup();
    assert_eq!(sorted.len(), 100);
}

#[test]
fn adjacent_keys_overlap_like_independent_draws() {
    // overlap of two independent m-subsets of N is hypergeometric
    let (n, m) = (10_000usize, 1_000usize);
    let mean = (m * m) as f64 / n as f64;
    let var = m as f64 * (m as f64 / n as f64) * (1.0 - m as f64 / n as f64) * (n - m) as f64 / (n - 1) as f64;
    let pairs = 200u64;
    let mut within = 0;
    let mut total = 0.0;
    for k in 0..pairs {
        let a = select_hosts(StegoKey(k * 1_000_003), n, m).unwrap();
        let b = select_hosts(StegoKey(k * 1_000_003 + 1), n, m).unwrap();
        let mut in_a = vec![false; n];
        a.iter().for_each(|&i| in_a[i] = true);
        let x = b.iter().filter(|&&i| in_a[i]).count() as f64;
        total += x;
        if (x - mean).abs() <= 3.0 * var.sqrt() {
            within += 1;
        }
    }
    let avg = total / pairs as f64;
    assert!((avg - mean).abs() <= 3.0 * (var / pairs as f64).sqrt(), "mean overlap {avg}, expected {mean}");
    assert!(within as f64 >= 0.97 * pairs as f64, "{within} of {pairs} within 3σ");
}

#[test]
fn embedding_limits() {
    let tiny = ModelGraph::init(vec![LayerSpec::dense(1, 1)], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let sel = FilterSelection::new(vec![]);
    let p = frame_payload(&tiny, &sel, &AdaptationMeta::identity(1), &BnStats::default()).unwrap();
    assert!(matches!(embed(&tiny, &p, StegoKey(1)), Err(SideInfoError::Capacity { .. })));

    let g = two_layer();
    let sel = FilterSelection::new(vec![LayerSelection { layer: 0, filters: vec![0] }, LayerSelection { layer: 2, filters: vec![1] }]);
    let p = frame_payload(&g, &sel, &AdaptationMeta::identity(2), &BnStats::default()).unwrap();
    let mut bad = g.clone();
    bad.params_mut().iter_mut().for_each(|v| *v = f32::INFINITY);
    assert!(matches!(embed(&bad, &p, StegoKey(1)), Err(SideInfoError::NonFiniteHost(_))));
}

#[test]
fn parse_rejects_layouts_that_do_not_fit() {
    let g = two_layer();
    let sel = FilterSelection::new(vec![LayerSelection { layer: 0, filters: vec![0] }, LayerSelection { layer: 2, filters: vec![1] }]);
    let p = frame_payload(&g, &sel, &AdaptationMeta::identity(2), &BnStats::default()).unwrap();
    let mut short = p.clone();
    short.membership[1].pop();
    assert!(matches!(parse_payload(&g, &short), Err(SideInfoError::Layout(_))));
    let mut empty = p.clone();
    empty.membership[0] = vec![true; 4];
    assert!(parse_payload(&g, &empty).is_err());
    let mut output = p;
    output.membership[2][0] = true;
    assert!(matches!(parse_payload(&g, &output), Err(SideInfoError::Layout(_))));
    let mut bytes = SideInfoPayload::to_bytes(&output);
    bytes[0] = 9;
    let crc = crc32fast::hash(&bytes[..bytes.len() - 4]);
    let n = bytes.len();
    bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
    assert!(matches!(SideInfoPayload::from_bytes(&bytes, &[]), Err(SideInfoError::Version(9))));
}
