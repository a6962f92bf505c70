//! Receiver-side reconstruction of the secret network.

use crate::graph::ModelGraph;
use crate::sideinfo::{extract, parse_payload, Result, StegoKey};

/// Extracts the side information under `key` and rebuilds the secret
/// network at its original output width.
pub fn recover(stego: &ModelGraph, key: StegoKey) -> Result<ModelGraph> {
    let payload = extract(stego, key)?;
    let (sel, adapt, bn) = parse_payload(stego, &payload)?;
    Ok(stego.extract_subnetwork(&sel, &bn, &adapt)?)
}

/// Relative parameter overhead `N_stego / N_secret − 1`.
pub fn expansion_rate(secret: &ModelGraph, stego: &ModelGraph) -> f64 {
    stego.param_count() as f64 / secret.param_count() as f64 - 1.0
}
