//! Small random architectures for property tests.

use netdisguise::disguise::{adapt_output_layer, AdaptationMeta};
use netdisguise::graph::{BnLayerStats, BnStats, FilterSelection, LayerSelection, LayerSpec, ModelGraph};
use netdisguise::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Conv stack on `side × side` inputs followed by a dense head.
#[derive(Debug, Clone)]
pub struct NetShape {
    pub in_channels: usize,
    pub side: usize,
    pub convs: Vec<(usize, bool, bool)>,
    pub hidden: Option<usize>,
    pub outputs: usize,
}

impl NetShape {
    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        let mut c = self.in_channels;
        let mut side = self.side;
        for &(d, bn, pool) in &self.convs {
            layers.push(LayerSpec::conv(d, c, 3, 1));
            if bn {
                layers.push(LayerSpec::BatchNorm { channels: d });
            }
            layers.push(LayerSpec::Relu);
            if pool && side >= 2 {
                layers.push(LayerSpec::MaxPool);
                side /= 2;
            }
            c = d;
        }
        let mut width = c * side * side;
        if let Some(h) = self.hidden {
            layers.push(LayerSpec::dense(h, width));
            layers.push(LayerSpec::Relu);
            width = h;
        }
        layers.push(LayerSpec::dense(self.outputs, width));
        layers
    }

    pub fn input(&self, batch: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = batch * self.in_channels * self.side * self.side;
        Tensor::new(vec![batch, self.in_channels, self.side, self.side], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    pub fn graph(&self, seed: u64) -> ModelGraph {
        let mut g = ModelGraph::init(self.layers(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        // non-trivial affine and running statistics
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb0);
        for l in g.batchnorm_layers() {
            let r = g.layer_range(l);
            let c = r.len() / 4;
            let p = &mut g.params_mut()[r];
            for i in 0..c {
                p[i] = rng.random_range(0.5..1.5);
                p[c + i] = rng.random_range(-0.5..0.5);
                p[2 * c + i] = rng.random_range(-0.3..0.3);
                p[3 * c + i] = rng.random_range(0.5..2.0);
            }
        }
        g
    }
}

pub fn net_shape() -> impl Strategy<Value = NetShape> {
    (
        1usize..3,
        prop::sample::select(vec![4usize, 5, 6]),
        prop::collection::vec((1usize..6, any::<bool>(), any::<bool>()), 1..4),
        prop::option::of(2usize..6),
        1usize..5,
    )
        .prop_map(|(in_channels, side, convs, hidden, outputs)| NetShape { in_channels, side, convs, hidden, outputs })
}

/// A random nonempty subset of each selectable layer.
pub fn random_selection(g: &ModelGraph, adapt: &AdaptationMeta, seed: u64) -> FilterSelection {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = g
        .selectable_layers(adapt)
        .unwrap()
        .into_iter()
        .map(|l| {
            let d = g.layers()[l].filters().unwrap();
            let mut filters: Vec<usize> = (0..d).filter(|_| rng.random_bool(0.5)).collect();
            if filters.is_empty() {
                filters.push(rng.random_range(0..d));
            }
            LayerSelection { layer: l, filters }
        })
        .collect();
    FilterSelection::new(layers)
}

/// An adapted random network with a random selection and random secret
/// statistics.
pub struct Case {
    pub secret: ModelGraph,
    pub stego: ModelGraph,
    pub adapt: AdaptationMeta,
    pub selection: FilterSelection,
    pub bn: BnStats,
}

pub fn case(shape: &NetShape, stego_outputs: usize, seed: u64) -> Case {
    let secret = shape.graph(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xada);
    let (stego, adapt) = adapt_output_layer(&secret, stego_outputs, &mut rng).unwrap();
    let selection = random_selection(&stego, &adapt, seed ^ 0x5e1);
    let bn = BnStats {
        layers: BnStats::from_graph(&stego)
            .layers
            .into_iter()
            .map(|l| BnLayerStats {
                mean: l.mean.iter().map(|_| rng.random_range(-1.0..1.0)).collect(),
                var: l.var.iter().map(|_| rng.random_range(0.1..3.0)).collect(),
            })
            .collect(),
    };
    Case { secret, stego, adapt, selection, bn }
}
