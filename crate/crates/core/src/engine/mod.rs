//! Minimal reverse-mode tensor engine with Adam and EMA.

mod graph;
pub mod gradcheck;
pub mod kernels;
mod ops;
mod optim;
mod tensor;

pub use graph::{BackwardCtx, BackwardOp, Gradients, Graph, Var};
pub use optim::{AdamConfig, AdamState, EmaState};
pub use tensor::{Real, Tensor};

/// FNV-1a over the bit patterns of a tensor list. Used to prove that frozen
/// parameters stay untouched.
pub fn checksum<'a, R: Real>(tensors: impl IntoIterator<Item = &'a Tensor<R>>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |b: u8| {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    };
    for t in tensors {
        for &d in t.shape() {
            (d as u64).to_le_bytes().into_iter().for_each(&mut feed);
        }
        for v in t.data() {
            v.f64().to_bits().to_le_bytes().into_iter().for_each(&mut feed);
        }
    }
    h
}
