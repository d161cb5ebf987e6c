//! The two cross-batch stores: the FIFO queue of momentum embeddings and the
//! bank of momentum prototypes.
//!
//! `cargo run --example memory_stores`

use mopro::memory::{EmbeddingQueue, PrototypeBank};
use mopro::numkit::{l2_normalize_rows, Tensor};

fn main() -> mopro::Result<()> {
    let mut queue = EmbeddingQueue::new(4, 2)?;
    for step in 0..3 {
        let angle = step as f64;
        let batch = Tensor::new(vec![2, 2], vec![angle.cos(), angle.sin(), -angle.sin(), angle.cos()])?;
        queue.enqueue(&batch)?;
        println!("after push {step}: len {} full {} cursor {}", queue.len(), queue.is_full(), queue.cursor());
    }
    println!("oldest to newest: {:?}", queue.entries().collect::<Vec<_>>());

    let embeddings = l2_normalize_rows(&Tensor::new(vec![4, 2], vec![1.0, 0.1, 0.9, -0.1, -0.2, 1.0, 0.1, 0.8])?)?;
    let mut bank = PrototypeBank::new(2, 2, 0.9)?;
    bank.init_prototypes(&embeddings, &[0, 0, 1, 1])?;
    println!("initial prototypes: {:?} {:?}", bank.prototype(0), bank.prototype(1));

    // Repeated updates toward one direction: the prototype converges on it
    // and stays unit length.
    for _ in 0..50 {
        bank.update_prototype(0, &[0.0, 1.0])?;
    }
    let c = bank.prototype(0);
    println!("prototype 0 after 50 updates: {c:?} (norm {:.6})", c.iter().map(|v| v * v).sum::<f64>().sqrt());
    println!("scores at tau=0.1 for [0, 1]: {:?}", bank.prototype_scores(&[0.0, 1.0], 0.1)?);
    Ok(())
}
