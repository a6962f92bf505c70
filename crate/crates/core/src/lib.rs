//! Model disguising: hide a secret network inside a stego network that
//! performs an unrelated task, then recover it with a key.

pub mod disguise;
pub mod graph;
pub mod importance;
pub mod recovery;
pub mod sideinfo;
pub mod steganalysis;
pub mod tasks;
pub mod tensor;
