//! Side information framing and keyed least-significant-bit embedding.
//!
//! Payload layout, little-endian, bits packed most-significant first:
//!
//! ```text
//! version u8 | layer_count u16 | d^l u16 × L
//! membership bits Σ d^l, zero-padded to a byte (0 = selected)
//! mode u8 | O_e u32 | O_t u32 | added u32
//! stat_count u32 | per batchnorm layer: mean words, then var words
//! crc32 u32 over everything before it
//! ```
//!
//! Membership covers every weighted layer of the stego graph. Secret output
//! rows are 0 and adaptation rows 1; an appended final layer is all 1.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::disguise::{AdaptMode, AdaptationMeta};
use crate::graph::{BnLayerStats, BnStats, FilterSelection, GraphError, LayerSelection, LayerSpec, ModelGraph};

pub const PAYLOAD_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum SideInfoError {
    #[error("payload of {bits} bits exceeds {params} host parameters")]
    Capacity { bits: usize, params: usize },
    #[error("host parameter {0} is not finite")]
    NonFiniteHost(usize),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("unknown payload version {0}")]
    Version(u8),
    #[error("payload does not fit the architecture: {0}")]
    Layout(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type Result<T> = std::result::Result<T, SideInfoError>;

/// Location key of the embedded payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StegoKey(pub u64);

/// The SplitMix64 stream.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
}

/// `m` distinct host indices in `[0, n)`.
///
/// Step `k` swaps position `i = n − 1 − k` with `next() mod (i + 1)` and
/// emits position `i`, so the list for `m` is a prefix of the list for any
/// larger `m`.
pub fn select_hosts(key: StegoKey, n: usize, m: usize) -> Result<Vec<usize>> {
    if m > n {
        return Err(SideInfoError::Capacity { bits: m, params: n });
    }
    let mut a: Vec<usize> = (0..n).collect();
    let mut rng = SplitMix64::new(key.0);
    let mut out = Vec::with_capacity(m);
    for k in 0..m {
        let i = n - 1 - k;
        let r = (rng.next_u64() % (i as u64 + 1)) as usize;
        a.swap(i, r);
        out.push(a[i]);
    }
    Ok(out)
}

/// Decoded side information.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideInfoPayload {
    /// One stream per weighted layer; `true` marks a filter outside the
    /// secret set.
    pub membership: Vec<Vec<bool>>,
    pub adaptation: AdaptationMeta,
    pub bn_stats: BnStats,
}

fn layout(m: String) -> SideInfoError {
    SideInfoError::Layout(m)
}

/// Builds the payload for a stego graph.
pub fn frame_payload(stego: &ModelGraph, sel: &FilterSelection, adapt: &AdaptationMeta, bn_stats: &BnStats) -> Result<SideInfoPayload> {
    // rejects any selection that does not fit the graph
    stego.selection_to_mask(sel, adapt)?;
    let selectable = stego.selectable_layers(adapt)?;
    let mut tail = tail_membership(stego, adapt)?.into_iter();
    let membership = stego
        .weight_layers()
        .into_iter()
        .map(|l| match selectable.iter().position(|&s| s == l) {
            Some(k) => {
                let d = stego.layers()[l].filters().expect("weighted");
                let set = &sel.layers[k].filters;
                (0..d).map(|f| set.binary_search(&f).is_err()).collect()
            }
            None => tail.next().expect("one stream per tail layer").1,
        })
        .collect();
    let widths = bn_widths(stego);
    if bn_stats.layers.len() != widths.len() {
        return Err(layout(format!("{} batchnorm layers, {} statistics", widths.len(), bn_stats.layers.len())));
    }
    for (k, (&c, s)) in widths.iter().zip(&bn_stats.layers).enumerate() {
        if s.mean.len() != c || s.var.len() != c {
            return Err(layout(format!("statistics block {k} does not have {c} channels")));
        }
    }
    Ok(SideInfoPayload { membership, adaptation: *adapt, bn_stats: bn_stats.clone() })
}

/// Recovers the selection, adaptation and statistics, checking every
/// stream against the stego architecture.
pub fn parse_payload(stego: &ModelGraph, payload: &SideInfoPayload) -> Result<(FilterSelection, AdaptationMeta, BnStats)> {
    let adapt = payload.adaptation;
    adapt.check(stego)?;
    let weights = stego.weight_layers();
    if payload.membership.len() != weights.len() {
        return Err(layout(format!("{} membership streams for {} weighted layers", payload.membership.len(), weights.len())));
    }
    for (&l, bits) in weights.iter().zip(&payload.membership) {
        let d = stego.layers()[l].filters().expect("weighted");
        if bits.len() != d {
            return Err(layout(format!("layer {l} has {d} filters, stream has {} bits", bits.len())));
        }
    }
    let expected = tail_membership(stego, &adapt)?;
    for (l, want) in expected {
        let k = weights.iter().position(|&w| w == l).expect("weighted");
        if payload.membership[k] != want {
            return Err(layout(format!("membership of output layer {l} does not match the adaptation")));
        }
    }
    let selectable = stego.selectable_layers(&adapt)?;
    let sel = FilterSelection::new(
        selectable
            .iter()
            .map(|&l| {
                let k = weights.iter().position(|&w| w == l).expect("weighted");
                LayerSelection { layer: l, filters: payload.membership[k].iter().enumerate().filter(|(_, &b)| !b).map(|(f, _)| f).collect() }
            })
            .collect(),
    );
    frame_payload(stego, &sel, &adapt, &payload.bn_stats)?;
    Ok((sel, adapt, payload.bn_stats.clone()))
}

/// Membership streams of the layers at and after the secret output.
fn tail_membership(stego: &ModelGraph, adapt: &AdaptationMeta) -> Result<Vec<(usize, Vec<bool>)>> {
    let out = stego.secret_output_layer(adapt)?;
    Ok(stego
        .weight_layers()
        .into_iter()
        .filter(|&l| l >= out)
        .map(|l| {
            let d = stego.layers()[l].filters().expect("weighted");
            let bits = if l == out { (0..d).map(|f| f >= adapt.original_output_dim).collect() } else { vec![true; d] };
            (l, bits)
        })
        .collect())
}

impl SideInfoPayload {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![PAYLOAD_VERSION];
        out.extend_from_slice(&(self.membership.len() as u16).to_le_bytes());
        for m in &self.membership {
            out.extend_from_slice(&(m.len() as u16).to_le_bytes());
        }
        out.extend(pack_bits(self.membership.iter().flatten().copied()));
        let a = &self.adaptation;
        out.push(a.mode.code());
        for v in [a.original_output_dim, a.stego_output_dim, a.added_neurons] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.bn_stats.layers.len() as u32).to_le_bytes());
        for l in &self.bn_stats.layers {
            for v in l.mean.iter().chain(&l.var) {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses a framed payload. Batchnorm widths come from `bn_widths`,
    /// which the architecture fixes.
    pub fn from_bytes(bytes: &[u8], bn_widths: &[usize]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(layout("payload shorter than its checksum".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(SideInfoError::Checksum { stored, computed });
        }
        let mut r = Reader { buf: body, pos: 0 };
        let version = r.u8()?;
        if version != PAYLOAD_VERSION {
            return Err(SideInfoError::Version(version));
        }
        let layer_count = r.u16()? as usize;
        let counts: Vec<usize> = (0..layer_count).map(|_| r.u16().map(usize::from)).collect::<Result<_>>()?;
        let total: usize = counts.iter().sum();
        let packed = r.take(total.div_ceil(8))?;
        let mut bits = (0..total).map(|i| packed[i / 8] >> (7 - i % 8) & 1 == 1);
        let membership = counts.iter().map(|&d| bits.by_ref().take(d).collect()).collect();
        let mode = AdaptMode::from_code(r.u8()?).ok_or_else(|| layout("unknown adaptation mode".into()))?;
        let (o_e, o_t, added) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let adaptation = AdaptationMeta {
            mode,
            original_output_dim: o_e,
            stego_output_dim: o_t,
            added_neurons: added,
            appended_final_layer: mode == AdaptMode::HiddenExtend,
        };
        let stat_count = r.u32()? as usize;
        if stat_count != bn_widths.len() {
            return Err(layout(format!("{stat_count} statistics blocks for {} batchnorm layers", bn_widths.len())));
        }
        let mut layers = Vec::with_capacity(stat_count);
        for &c in bn_widths {
            let mean = (0..c).map(|_| r.u32().map(f32::from_bits)).collect::<Result<_>>()?;
            let var = (0..c).map(|_| r.u32().map(f32::from_bits)).collect::<Result<_>>()?;
            layers.push(BnLayerStats { mean, var });
        }
        if r.pos != body.len() {
            return Err(layout(format!("{} trailing payload bytes", body.len() - r.pos)));
        }
        Ok(Self { membership, adaptation, bn_stats: BnStats { layers } })
    }
}

fn pack_bits(bits: impl Iterator<Item = bool>) -> Vec<u8> {
    let mut out = Vec::new();
    for (i, b) in bits.enumerate() {
        if i % 8 == 0 {
            out.push(0);
        }
        if b {
            *out.last_mut().expect("pushed") |= 0x80 >> (i % 8);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| layout("payload truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn bn_widths(graph: &ModelGraph) -> Vec<usize> {
    graph
        .batchnorm_layers()
        .into_iter()
        .map(|l| match graph.layers()[l] {
            LayerSpec::BatchNorm { channels } => channels,
            _ => unreachable!("batchnorm layer"),
        })
        .collect()
}

/// Framed payload length in bytes, from the architecture alone.
pub fn payload_len(graph: &ModelGraph) -> usize {
    let weights = graph.weight_layers();
    let filters: usize = weights.iter().map(|&l| graph.layers()[l].filters().expect("weighted")).sum();
    let channels: usize = bn_widths(graph).iter().sum();
    1 + 2 + 2 * weights.len() + filters.div_ceil(8) + 13 + 4 + 8 * channels + 4
}

/// Writes the payload into the least significant bits of keyed hosts.
pub fn embed(model: &ModelGraph, payload: &SideInfoPayload, key: StegoKey) -> Result<ModelGraph> {
    let bytes = payload.to_bytes();
    let bits = bytes.len() * 8;
    let hosts = select_hosts(key, model.param_count(), bits).map_err(|_| SideInfoError::Capacity { bits, params: model.param_count() })?;
    let mut out = model.clone();
    let params = out.params_mut();
    for (k, &h) in hosts.iter().enumerate() {
        if !params[h].is_finite() {
            return Err(SideInfoError::NonFiniteHost(h));
        }
        let bit = (bytes[k / 8] >> (7 - k % 8) & 1) as u32;
        params[h] = f32::from_bits(params[h].to_bits() & !1 | bit);
    }
    Ok(out)
}

/// Frames the side information of a stego graph and embeds it under `key`.
pub fn seal(stego: &ModelGraph, sel: &FilterSelection, adapt: &AdaptationMeta, bn_stats: &BnStats, key: StegoKey) -> Result<ModelGraph> {
    embed(stego, &frame_payload(stego, sel, adapt, bn_stats)?, key)
}

/// Reads and verifies the payload embedded under `key`.
pub fn extract(model: &ModelGraph, key: StegoKey) -> Result<SideInfoPayload> {
    let len = payload_len(model);
    let hosts = select_hosts(key, model.param_count(), len * 8)?;
    let params = model.params();
    let mut bytes = vec![0u8; len];
    for (k, &h) in hosts.iter().enumerate() {
        bytes[k / 8] |= ((params[h].to_bits() & 1) as u8) << (7 - k % 8);
    }
    SideInfoPayload::from_bytes(&bytes, &bn_widths(model))
}
