use super::*;
use ndarray::{ArrayD, IxDyn};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn randn(shape: &[usize], seed: u64) -> ArrayD<Real> {
    let mut rng = StdRng::seed_from_u64(seed);
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random::<f64>() * 2.0 - 1.0)
}

/// Central finite differences against the analytic gradient at every
/// coordinate of `x0`.
fn check_grad(f: impl for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>, x0: ArrayD<Real>, tol: Real) {
    let tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let loss = f(&tape, x);
    let grads = backward(loss);
    let g = grads.wrt_or_zeros(x).as_standard_layout().to_owned();

    let eps = 1e-5;
    let flat: Vec<usize> = (0..x0.len()).collect();
    for &i in &flat {
        let mut xp = x0.clone();
        xp.as_slice_mut().unwrap()[i] += eps;
        let mut xm = x0.clone();
        xm.as_slice_mut().unwrap()[i] -= eps;
        let tp = Tape::new();
        let fp = f(&tp, tp.leaf(xp)).scalar_value();
        let tm = Tape::new();
        let fm = f(&tm, tm.leaf(xm)).scalar_value();
        let num = (fp - fm) / (2.0 * eps);
        let ana = g.as_slice().unwrap()[i];
        let denom = num.abs().max(ana.abs()).max(1e-6);
        assert!(
            (num - ana).abs() / denom < tol,
            "grad mismatch at {}: numeric {} vs analytic {}",
            i,
            num,
            ana
        );
    }
}

#[test]
fn grad_elementwise_chain() {
    check_grad(
        |t, x| {
            let c = t.constant(randn(&[2, 3], 7));
            x.mul(c).sigmoid().silu().sqr().sum_all()
        },
        randn(&[2, 3], 1),
        1e-6,
    );
}

#[test]
fn grad_broadcast_add_mul() {
    // [2,3,4] against [3,1] exercises both leading-axis and size-1 reduction.
    check_grad(
        |t, x| {
            let b = t.constant(randn(&[3, 1], 8));
            x.add(b).sqr().sum_all()
        },
        randn(&[2, 3, 4], 2),
        1e-6,
    );
    check_grad(
        |t, x| {
            let b = t.constant(randn(&[2, 3, 4], 9));
            x.mul(b).sum_all()
        },
        randn(&[3, 4], 3),
        1e-6,
    );
}

#[test]
fn grad_div_exp_ln_sqrt() {
    let x0 = randn(&[2, 3], 4).mapv(|v| v.abs() + 0.5);
    check_grad(
        |t, x| {
            let d = t.constant(randn(&[2, 3], 10).mapv(|v| v.abs() + 1.0));
            x.div(d).exp().ln().sqrt().sum_all()
        },
        x0,
        1e-5,
    );
}

#[test]
fn grad_matmul_both_sides() {
    check_grad(
        |t, x| {
            let b = t.constant(randn(&[3, 5], 11));
            x.matmul(b).sqr().sum_all()
        },
        randn(&[4, 3], 5),
        1e-6,
    );
    check_grad(
        |t, x| {
            let a = t.constant(randn(&[4, 3], 12));
            a.matmul(x).sqr().sum_all()
        },
        randn(&[3, 5], 6),
        1e-6,
    );
}

#[test]
fn grad_conv2d_input_and_weight() {
    for &(stride, pad) in &[(1usize, 1usize), (2, 1)] {
        check_grad(
            |t, x| {
                let w = t.constant(randn(&[2, 3, 3, 3], 13));
                x.conv2d(w, stride, pad).sqr().sum_all()
            },
            randn(&[2, 3, 6, 6], 7),
            1e-5,
        );
        check_grad(
            |t, w| {
                let x = t.constant(randn(&[2, 3, 6, 6], 14));
                x.conv2d(w, stride, pad).sqr().sum_all()
            },
            randn(&[2, 3, 3, 3], 8),
            1e-5,
        );
    }
}

#[test]
fn grad_upsample_softmax_gather() {
    check_grad(
        |_t, x| x.upsample2x().sqr().sum_all(),
        randn(&[1, 2, 3, 3], 9),
        1e-6,
    );
    check_grad(
        |t, x| {
            let w = t.constant(randn(&[4, 4], 15));
            x.softmax().matmul(w).sqr().sum_all()
        },
        randn(&[5, 4], 10),
        1e-5,
    );
    check_grad(
        |_t, x| x.gather_rows(&[0, 2, 2, 1]).sqr().sum_all(),
        randn(&[3, 4], 11),
        1e-6,
    );
}

#[test]
fn grad_shape_ops() {
    check_grad(
        |_t, x| {
            x.permute(&[0, 2, 1])
                .reshape(&[6, 2])
                .sum_axes_keep(&[1])
                .sqr()
                .sum_all()
        },
        randn(&[2, 2, 3], 12),
        1e-6,
    );
}

#[test]
fn constants_get_no_grad() {
    let tape = Tape::new();
    let x = tape.leaf(randn(&[2, 2], 1));
    let c = tape.constant(randn(&[2, 2], 2));
    let loss = x.mul(c).sum_all();
    let grads = backward(loss);
    assert!(grads.wrt(x).is_some());
    assert!(grads.wrt(c).is_none());
}

#[test]
fn softmax_rows_sum_to_one() {
    let tape = Tape::new();
    let x = tape.constant(randn(&[7, 5], 3).mapv(|v| v * 10.0));
    let s = x.softmax();
    let v = s.value();
    for row in v.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&p| p >= 0.0));
    }
}

#[test]
fn mse_of_identical_is_zero() {
    let tape = Tape::new();
    let a = tape.constant(randn(&[3, 3], 4));
    let b = tape.constant(a.value());
    assert_eq!(a.mse(b).scalar_value(), 0.0);
}
