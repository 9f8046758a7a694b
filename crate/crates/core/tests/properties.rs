//! Property tests over the numeric substrate and the autodiff op space.

use lam_core::autodiff::{PadMode, Tape, Tensor, Var};
use lam_core::numerics::{random_orthogonal, solve_lse, sym_eig, Mat, Rng};
use proptest::prelude::*;

fn mat_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Mat> {
    proptest::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |data| Mat::from_vec(rows, cols, data))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sym_eig_trace_and_orthonormality(m in mat_strategy(6, 6)) {
        let s = m.add(&m.transpose()).scale(0.5);
        let e = sym_eig(&s).unwrap();
        let tr: f64 = e.values.iter().sum();
        prop_assert!((tr - s.trace()).abs() <= 1e-8 * s.trace().abs().max(1.0));
        let vtv = e.vectors.matmul_tn(&e.vectors);
        prop_assert!(vtv.sub(&Mat::identity(6)).frob_norm() <= 1e-8);
        for w in e.values.windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn lse_residual_orthogonal_to_inputs(x in mat_strategy(24, 4), y in mat_strategy(24, 2)) {
        let w = solve_lse(&x, &y, 0.0).unwrap();
        let resid = x.matmul_nt(&w).sub(&y);
        let cross = x.matmul_tn(&resid).max_abs();
        let scale = x.max_abs().max(1.0) * y.max_abs().max(1.0);
        prop_assert!(cross <= 1e-8 * scale.max(1.0), "cross {cross}");
    }

    #[test]
    fn random_orthogonal_projects(seed in 0u64..5000) {
        let mut rng = Rng::new(seed);
        let q = random_orthogonal(12, 3, &mut rng).unwrap();
        let qqtq = q.matmul(&q.matmul_tn(&q));
        prop_assert!(qqtq.sub(&q).frob_norm() <= 1e-9);
    }
}

// One randomly composed graph per case, drawing from the full op set; its
// tape gradient must match central finite differences on the probed leaf.
#[derive(Clone, Copy, Debug)]
enum GraphKind {
    Dense,
    ConvZero,
    ConvPeriodic,
    Gather,
    Broadcast,
}

fn build(kind: GraphKind, tape: &mut Tape, x: &Tensor, aux: &[Tensor]) -> (Var, Var) {
    match kind {
        GraphKind::Dense => {
            let xv = tape.leaf(x.clone());
            let w = tape.leaf(aux[0].clone());
            let b = tape.leaf(aux[1].clone());
            let t = tape.leaf(aux[2].clone());
            let y = tape.matmul(xv, w).unwrap();
            let y = tape.add_row_vec(y, b).unwrap();
            let y = tape.relu(y);
            let l1 = tape.mse(y, t).unwrap();
            let l2 = tape.sum_all(y);
            let l2 = tape.scale(l2, 0.05);
            (tape.add(l1, l2).unwrap(), xv)
        }
        GraphKind::ConvZero | GraphKind::ConvPeriodic => {
            let pad = if matches!(kind, GraphKind::ConvZero) { PadMode::Zero } else { PadMode::Periodic };
            let xv = tape.leaf(x.clone());
            let k = tape.leaf(aux[0].clone());
            let cb = tape.leaf(aux[1].clone());
            let y = tape.conv2d(xv, k, pad).unwrap();
            let y = tape.add_chan_vec(y, cb).unwrap();
            let y = tape.relu(y);
            (tape.mean_all(y), xv)
        }
        GraphKind::Gather => {
            let xv = tape.leaf(x.clone());
            let t = tape.leaf(aux[0].clone());
            let g = tape.gather_rows(xv, &[0, 2, 2, 1]).unwrap();
            let d = tape.sub(g, t).unwrap();
            let sq = tape.mse(d, t).unwrap();
            (tape.scale(sq, 1.7), xv)
        }
        GraphKind::Broadcast => {
            let xv = tape.leaf(x.clone());
            let o = tape.leaf(aux[0].clone());
            let b = tape.broadcast_spatial(xv, 3, 3).unwrap();
            let c = tape.concat_channels(o, b).unwrap();
            let r = tape.reshape(c, &[2 * 3 * 9]).unwrap();
            let r2 = tape.reshape(r, &[2, 27]).unwrap();
            (tape.mean_all(r2), xv)
        }
    }
}

fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in &mut t.data {
        *v = rng.normal();
    }
    t
}

fn fd_check(kind: GraphKind, x: &Tensor, aux: &[Tensor], tol: f64) -> f64 {
    let mut tape = Tape::new();
    let (loss, probe) = build(kind, &mut tape, x, aux);
    let mut grads = tape.backward(loss).unwrap();
    let g = grads.take(probe, &x.shape);
    let h = 1e-5;
    let mut num = 0.0;
    let mut den: f64 = 0.0;
    let mut fd = vec![0.0; x.numel()];
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data[i] += h;
        let mut tp = Tape::new();
        let (lp, _) = build(kind, &mut tp, &plus, aux);
        let mut minus = x.clone();
        minus.data[i] -= h;
        let mut tm = Tape::new();
        let (lm, _) = build(kind, &mut tm, &minus, aux);
        fd[i] = (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * h);
    }
    for (a, b) in fd.iter().zip(&g.data) {
        num += (a - b) * (a - b);
        den += a * a;
    }
    let rel = num.sqrt() / den.sqrt().max(1e-8);
    assert!(rel <= tol, "{kind:?}: relative gradient error {rel}");
    rel
}

#[test]
fn op_space_gradients_match_finite_differences() {
    let kinds = [
        GraphKind::Dense,
        GraphKind::ConvZero,
        GraphKind::ConvPeriodic,
        GraphKind::Gather,
        GraphKind::Broadcast,
    ];
    let mut rng = Rng::new(99);
    for kind in kinds {
        for _ in 0..6 {
            let (x, aux) = match kind {
                GraphKind::Dense => (
                    rand_tensor(&[4, 3], &mut rng),
                    vec![
                        rand_tensor(&[3, 2], &mut rng),
                        rand_tensor(&[2], &mut rng),
                        rand_tensor(&[4, 2], &mut rng),
                    ],
                ),
                GraphKind::ConvZero | GraphKind::ConvPeriodic => (
                    rand_tensor(&[2, 2, 4, 4], &mut rng),
                    vec![rand_tensor(&[3, 2, 3, 3], &mut rng), rand_tensor(&[3], &mut rng)],
                ),
                GraphKind::Gather => {
                    (rand_tensor(&[3, 4], &mut rng), vec![rand_tensor(&[4, 4], &mut rng)])
                }
                GraphKind::Broadcast => {
                    (rand_tensor(&[2, 2], &mut rng), vec![rand_tensor(&[2, 1, 3, 3], &mut rng)])
                }
            };
            fd_check(kind, &x, &aux, 1e-5);
        }
    }
}
