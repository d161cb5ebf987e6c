//! Dense tensors, a reverse-mode tape, seeded randomness and a
//! finite-difference gradient checker.

mod gradcheck;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{check_against_central_differences, check_gradient, DEFAULT_STEP};
pub use rng::{Rng, RngState};
pub use tape::{Graph, Var};
pub use tensor::{dot, l2_normalize_rows, norm, softmax, softmax_rows, Tensor};

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use super::Rng;

    fn random_tensor(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.normal()).collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = Rng::new(11);
        let a = random_tensor(&mut rng, 3, 4);
        let b = random_tensor(&mut rng, 4, 2);
        let err = check_gradient(
            |g, a| {
                let b = g.constant(b.clone());
                let c = g.matmul(a, b).unwrap();
                g.sum(c)
            },
            &a,
            DEFAULT_STEP,
        );
        assert!(err <= 1e-6, "err = {err}");

        // analytic form: each row of dA is the vector of b's row sums
        let mut g = Graph::new();
        let av = g.param(a.clone());
        let bv = g.constant(b.clone());
        let c = g.matmul(av, bv).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        let row_sums: Vec<f64> = b.row_iter().map(|r| r.iter().sum()).collect();
        for row in g.grad(av).unwrap().chunks(4) {
            for (x, y) in row.iter().zip(&row_sums) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn l2_normalize_gradient_matches_finite_differences() {
        let mut rng = Rng::new(5);
        for _ in 0..5 {
            let x = random_tensor(&mut rng, 3, 5);
            let w = random_tensor(&mut rng, 3, 5);
            // weighted sum so the check is not blind to the tangent-space projection
            let err = check_gradient(
                |g, x| {
                    let n = g.l2_normalize(x).unwrap();
                    let w = g.constant(w.clone());
                    let m = g.mul(n, w).unwrap();
                    g.sum(m)
                },
                &x,
                DEFAULT_STEP,
            );
            assert!(err <= 1e-6, "err = {err}");
            let err = check_gradient(
                |g, x| {
                    let n = g.l2_normalize(x).unwrap();
                    g.sum(n)
                },
                &x,
                DEFAULT_STEP,
            );
            assert!(err <= 1e-6, "err = {err}");
        }
    }

    #[test]
    fn softmax_and_relu_gradients_match_finite_differences() {
        let mut rng = Rng::new(9);
        let x = random_tensor(&mut rng, 4, 3);
        let w = random_tensor(&mut rng, 4, 3);
        let err = check_gradient(
            |g, x| {
                let p = g.softmax_rows(x).unwrap();
                let w = g.constant(w.clone());
                let m = g.mul(p, w).unwrap();
                g.sum(m)
            },
            &x,
            DEFAULT_STEP,
        );
        assert!(err <= 1e-6, "err = {err}");

        let w2 = random_tensor(&mut rng, 3, 2);
        let b = random_tensor(&mut rng, 1, 2);
        let err = check_gradient(
            |g, x| {
                let w2 = g.constant(w2.clone());
                let b = g.constant(b.clone());
                let h = g.matmul(x, w2).unwrap();
                let h = g.add_bias(h, b).unwrap();
                let r = g.relu(h);
                let s = g.scale(r, 0.5);
                g.sum(s)
            },
            &x,
            DEFAULT_STEP,
        );
        assert!(err <= 1e-6, "err = {err}");
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 2..8), 1..6)) {
            let cols = rows[0].len();
            let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| { r.resize(cols, 0.0); r }).collect();
            let t = Tensor::from_rows(&rows).unwrap();
            let s = softmax_rows(&t).unwrap();
            for row in s.row_iter() {
                let total: f64 = row.iter().sum();
                prop_assert!((total - 1.0).abs() <= 1e-12);
                prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
            }
        }

        #[test]
        fn normalized_rows_are_unit(data in prop::collection::vec(0.1f64..10.0, 6)) {
            let t = Tensor::new(vec![2, 3], data).unwrap();
            let n = l2_normalize_rows(&t).unwrap();
            for row in n.row_iter() {
                prop_assert!((norm(row) - 1.0).abs() < 1e-12);
            }
        }
    }
}
