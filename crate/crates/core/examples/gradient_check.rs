//! Check the tape's analytic gradients against central finite differences,
//! for a small network expression and for the fused contrastive losses.
//!
//! `cargo run --release --example gradient_check`

use mopro::memory::{EmbeddingQueue, PrototypeBank};
use mopro::noise::PseudoLabel;
use mopro::numkit::{check_against_central_differences, check_gradient, l2_normalize_rows, Rng, Tensor, DEFAULT_STEP};
use mopro::objectives::{loss_inst_with_grad, loss_proto_with_grad};

fn random(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.normal()).collect()).expect("shape matches data")
}

fn main() -> mopro::Result<()> {
    let mut rng = Rng::new(7);
    let w = random(&mut rng, 5, 3);
    let x = random(&mut rng, 4, 5);

    // Any scalar expression recorded on the tape can be checked.
    let err = check_gradient(
        |g, input| {
            let wv = g.constant(w.clone());
            let h = g.matmul(input, wv).unwrap();
            let h = g.relu(h);
            let n = g.l2_normalize(h).unwrap();
            let p = g.softmax_rows(n).unwrap();
            let sq = g.mul(p, p).unwrap();
            g.sum(sq)
        },
        &x,
        DEFAULT_STEP,
    );
    println!("network expression: max relative error {err:.2e}");

    let dim = 4;
    let unit = |rng: &mut Rng, n: usize| l2_normalize_rows(&random(rng, n, dim)).expect("non-zero rows");
    let mut bank = PrototypeBank::new(3, dim, 0.999)?;
    bank.init_prototypes(&unit(&mut rng, 3), &[0, 1, 2])?;
    let mut queue = EmbeddingQueue::new(6, dim)?;
    queue.enqueue(&unit(&mut rng, 6))?;
    let positive = unit(&mut rng, 1);
    let z = random(&mut rng, 1, dim);

    // The fused losses return their gradient w.r.t. the unit embedding.
    let zn = l2_normalize_rows(&z)?.row(0).to_vec();
    let (_, g_pro) = loss_proto_with_grad(&zn, &bank, PseudoLabel::Kept(1), 0.1)?;
    let err = check_against_central_differences(&g_pro, &Tensor::new(vec![1, dim], zn.clone())?, DEFAULT_STEP, |t| {
        loss_proto_with_grad(t.row(0), &bank, PseudoLabel::Kept(1), 0.1).unwrap().0
    });
    println!("prototypical loss: max relative error {err:.2e}");

    let (_, g_ins) = loss_inst_with_grad(&zn, positive.row(0), &queue, 0.1)?;
    let err = check_against_central_differences(&g_ins, &Tensor::new(vec![1, dim], zn)?, DEFAULT_STEP, |t| {
        loss_inst_with_grad(t.row(0), positive.row(0), &queue, 0.1).unwrap().0
    });
    println!("instance loss: max relative error {err:.2e}");
    Ok(())
}
