//! The label-correction rule on hand-made inputs: blend the classifier's
//! probabilities with prototype similarities, then harden.
//!
//! `cargo run --example noise_correction`

use mopro::noise::{correct_batch, hard_pseudo_label, soft_pseudo_label, PseudoLabel};
use mopro::numkit::Tensor;

fn main() -> mopro::Result<()> {
    let (alpha, threshold) = (0.5, 0.8);
    let cases: [(&str, [f64; 4], [f64; 4], usize); 4] = [
        ("confident, disagrees with label", [0.9, 0.05, 0.03, 0.02], [0.85, 0.1, 0.03, 0.02], 2),
        ("unsure, label still plausible", [0.4, 0.3, 0.2, 0.1], [0.3, 0.4, 0.2, 0.1], 1),
        ("unsure, label implausible", [0.45, 0.45, 0.05, 0.05], [0.45, 0.45, 0.05, 0.05], 3),
        ("exactly uniform on the label", [0.25; 4], [0.25; 4], 0),
    ];
    for (name, p, s, y) in cases {
        let q = soft_pseudo_label(&p, &s, alpha)?;
        let label = hard_pseudo_label(&q, y, threshold)?;
        let verdict = match label {
            PseudoLabel::Argmax(k) => format!("relabelled to class {k}"),
            PseudoLabel::Kept(k) => format!("kept label {k}"),
            PseudoLabel::Ood => "out-of-distribution".to_string(),
        };
        println!("{name:<34} q={:?} y={y} -> {verdict}", q.as_slice());
    }

    // The batched form also counts which rule fired.
    let p = Tensor::new(vec![2, 3], vec![0.95, 0.03, 0.02, 0.34, 0.33, 0.33])?;
    let s = Tensor::new(vec![2, 3], vec![0.9, 0.05, 0.05, 0.2, 0.2, 0.6])?;
    let (labels, counts) = correct_batch(&p, &s, &[1, 0], alpha, threshold)?;
    println!("batch: {labels:?}, rule counts {counts:?}");
    Ok(())
}
