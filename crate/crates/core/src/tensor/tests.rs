use proptest::prelude::*;

use super::*;
use crate::gradcheck::{check_inputs, project, random_tensor};

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, v.to_vec()).unwrap()
}

fn assert_grad_ok(name: &str, inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> crate::Result<Var>) {
    let r = check_inputs(name, inputs, 1e-4, 1e-6, f).unwrap();
    assert!(r.passed(), "{name}: max err {:e} at {}", r.max_err, r.worst);
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut g = Graph::<f64>::new();
    let i = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
    let b = g.constant(t(&[2, 2], &[3., 4., 5., 6.]));
    let y = g.matmul(i, b).unwrap();
    assert_eq!(g.value(y).data(), &[3., 4., 5., 6.]);

    let a = g.constant(t(&[1, 2], &[1., 2.]));
    let b = g.constant(t(&[2, 1], &[3., 4.]));
    let y = g.matmul(a, b).unwrap();
    assert_eq!(g.value(y).data(), &[11.]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 5]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn matmul_gradients() {
    let a = random_tensor(&[5, 7], -2.0, 2.0, 1);
    let b = random_tensor(&[7, 3], -2.0, 2.0, 2);
    assert_grad_ok("matmul", &[a, b], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        project(g, y, 3)
    });
    // batched, and batched against a shared right operand
    let a = random_tensor(&[2, 3, 4], -2.0, 2.0, 4);
    let b = random_tensor(&[2, 4, 2], -2.0, 2.0, 5);
    let w = random_tensor(&[4, 3], -2.0, 2.0, 6);
    assert_grad_ok("bmm", &[a, b, w], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        let z = g.matmul(v[0], v[2])?;
        let p = project(g, y, 7)?;
        let q = project(g, z, 8)?;
        g.add(p, q)
    });
}

#[test]
fn elementwise_identities() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(random_tensor(&[3, 4], -2.0, 2.0, 9));
    let ones = g.constant(Tensor::ones(&[3, 4]));
    let y = g.mul(x, ones).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let z = g.constant(Tensor::scalar(0.0));
    let s = g.sigmoid(z).unwrap();
    assert_eq!(g.value(s).item(), 0.5);

    let p = g.constant(t(&[3], &[1.0, -1.0, 0.5]));
    let y = g.gelu(p).unwrap();
    // tanh-approximation values computed independently
    let want = [0.841191990607477, -0.1588080093925231, 0.34571400982483486];
    for (a, b) in g.value(y).data().iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn log_rejects_non_positive_and_broadcast_failure() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[2], &[1.0, 0.0]));
    assert!(matches!(g.log(x), Err(crate::Error::Domain { .. })));
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2]));
    assert!(matches!(g.add(a, b), Err(crate::Error::Shape { .. })));
}

#[test]
fn elementwise_gradients() {
    let a = random_tensor(&[3, 4], -2.0, 2.0, 10);
    let b = random_tensor(&[4], 0.5, 2.0, 11);
    let pos = random_tensor(&[3, 4], 0.1, 2.0, 12);
    assert_grad_ok("binary-broadcast", &[a.clone(), b], |g, v| {
        let s = g.add(v[0], v[1])?;
        let d = g.sub(s, v[1])?;
        let m = g.mul(d, v[1])?;
        let q = g.div(m, v[1])?;
        let q = g.div(q, v[1])?;
        project(g, q, 13)
    });
    let pts = random_tensor(&[17], -2.0, 2.0, 14);
    assert_grad_ok("gelu", &[pts], |g, v| {
        let y = g.gelu(v[0])?;
        project(g, y, 15)
    });
    assert_grad_ok("sigmoid-exp", &[a], |g, v| {
        let y = g.sigmoid(v[0])?;
        let e = g.exp(v[0])?;
        let s = g.add(y, e)?;
        let s = g.scale(s, 0.7)?;
        let s = g.add_scalar(s, 2.0)?;
        project(g, s, 16)
    });
    assert_grad_ok("log", &[pos], |g, v| {
        let y = g.log(v[0])?;
        project(g, y, 17)
    });
}

#[test]
fn softmax_cases() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[3]));
    let y = g.softmax_lastdim(x).unwrap();
    for v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-7);
    }
    let x = g.constant(Tensor::new(&[2], vec![1000.0f32, 0.0]).unwrap());
    let y = g.softmax_lastdim(x).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 0.0]);

    let x = random_tensor(&[4, 5], -2.0, 2.0, 18);
    assert_grad_ok("softmax", &[x], |g, v| {
        let y = g.softmax_lastdim(v[0])?;
        project(g, y, 19)
    });
}

#[test]
fn layernorm_cases() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[1, 3], &[5., 5., 5.]));
    let one = g.constant(Tensor::ones(&[3]));
    let zero = g.constant(Tensor::zeros(&[3]));
    let y = g.layernorm(x, one, zero, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0., 0., 0.]);

    let x = g.constant(random_tensor(&[4, 3], -2.0, 2.0, 20));
    let b = g.constant(t(&[3], &[0.1, -0.2, 0.3]));
    let y = g.layernorm(x, zero, b, 1e-5).unwrap();
    for row in g.value(y).data().chunks(3) {
        assert_eq!(row, &[0.1, -0.2, 0.3]);
    }

    let x = g.constant(random_tensor(&[6, 8], -2.0, 2.0, 21));
    let one8 = g.constant(Tensor::ones(&[8]));
    let zero8 = g.constant(Tensor::zeros(&[8]));
    let y = g.layernorm(x, one8, zero8, 1e-5).unwrap();
    for row in g.value(y).data().chunks(8) {
        let m: f64 = row.iter().sum::<f64>() / 8.0;
        let v: f64 = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 8.0;
        assert!(m.abs() < 1e-5 && (v - 1.0).abs() < 1e-4, "mean {m} var {v}");
    }

    let x = random_tensor(&[3, 8], -2.0, 2.0, 22);
    let gam = random_tensor(&[8], 0.5, 1.5, 23);
    let bet = random_tensor(&[8], -0.5, 0.5, 24);
    assert_grad_ok("layernorm", &[x, gam, bet], |g, v| {
        let y = g.layernorm(v[0], v[1], v[2], 1e-5)?;
        project(g, y, 25)
    });
}

#[test]
fn concat_split_and_gradients() {
    let a = random_tensor(&[2, 3], -2.0, 2.0, 26);
    let b = random_tensor(&[2, 5], -2.0, 2.0, 27);
    let mut g = Graph::<f64>::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.concat(&[va, vb], 1).unwrap();
    assert_eq!(g.shape(c), &[2, 8]);
    for r in 0..2 {
        assert_eq!(&g.value(c).data()[r * 8..r * 8 + 3], &a.data()[r * 3..r * 3 + 3]);
    }
    let parts = g.split(c, 1, &[3, 5]).unwrap();
    assert_eq!(g.value(parts[0]), &a);
    assert_eq!(g.value(parts[1]), &b);
    assert!(g.split(c, 1, &[3, 4]).is_err());

    assert_grad_ok("concat", &[a, b], |g, v| {
        let c = g.concat(&[v[0], v[1]], 1)?;
        let n = g.narrow(c, 1, 2, 4)?;
        project(g, n, 28)
    });
}

#[test]
fn shape_op_gradients() {
    let x = random_tensor(&[2, 3, 4], -2.0, 2.0, 29);
    assert_grad_ok("permute-reshape-gather", &[x], |g, v| {
        let p = g.permute(v[0], &[2, 0, 1])?;
        let r = g.reshape(p, &[8, 3])?;
        let q = g.gather_rows(r, &[7, 0, 0, 3])?;
        let s = g.transpose_last(q)?;
        project(g, s, 30)
    });
}

#[test]
fn upsample_cases() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[6, 2], 0.7));
    let y = g.upsample2x(x, (2, 3)).unwrap();
    assert_eq!(g.shape(y), &[24, 2]);
    assert!(g.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));

    let x = g.constant(t(&[1, 1], &[2.5]));
    let y = g.upsample2x(x, (1, 1)).unwrap();
    assert_eq!(g.value(y).data(), &[2.5; 4]);

    let x = random_tensor(&[9, 2], -2.0, 2.0, 31);
    assert_grad_ok("upsample2x", std::slice::from_ref(&x), |g, v| {
        let y = g.upsample2x(v[0], (3, 3))?;
        project(g, y, 32)
    });
    assert_grad_ok("resize", &[x], |g, v| {
        let y = g.resize_bilinear(v[0], (3, 3), (7, 5))?;
        project(g, y, 33)
    });
}

#[test]
fn bce_gradient() {
    let x = random_tensor(&[10], -2.0, 2.0, 34);
    let target: Tensor<f64> = t(&[10], &[1., 0., 1., 1., 0., 0., 1., 0., 1., 0.]);
    assert_grad_ok("bce", &[x], |g, v| {
        let y = g.bce_with_logits(v[0], &target)?;
        g.mean(y)
    });
}

#[test]
fn backward_basics() {
    let x0 = random_tensor(&[3, 2], -2.0, 2.0, 35);
    let mut g = Graph::<f64>::new();
    let x = g.leaf(x0.clone(), true);
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);
    assert!(matches!(g.backward(s), Err(crate::Error::Backward(_))));
    g.zero_grad();
    g.backward(s).unwrap();

    let mut g = Graph::<f64>::new();
    let x = g.leaf(x0.clone(), true);
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    for (gv, xv) in g.grad(x).unwrap().data().iter().zip(x0.data()) {
        assert_eq!(*gv, 2.0 * xv);
    }
    let non_scalar = g.mul(x, x).unwrap();
    g.zero_grad();
    assert!(g.backward(non_scalar).is_err());
}

#[test]
fn non_finite_is_an_error() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::new(&[1], vec![100.0f32]).unwrap());
    assert!(matches!(g.exp(x), Err(crate::Error::NonFinite { op: "exp" })));
}

proptest! {
    #[test]
    fn permute_reshape_round_trip(
        dims in prop::collection::vec(1usize..4, 1..5),
        seed in any::<u64>(),
    ) {
        let x = random_tensor(&dims, -1.0, 1.0, seed);
        let mut g = Graph::<f64>::new();
        let v = g.constant(x.clone());
        let mut axes: Vec<usize> = (0..dims.len()).collect();
        axes.reverse();
        let p = g.permute(v, &axes).unwrap();
        let back = g.permute(p, &axes).unwrap();
        prop_assert_eq!(g.value(back), &x);
        let flat = g.reshape(v, &[x.len()]).unwrap();
        let r = g.reshape(flat, &dims).unwrap();
        prop_assert_eq!(g.value(r), &x);
    }

    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..5, cols in 1usize..9, seed in any::<u64>(),
    ) {
        let x = random_tensor(&[rows, cols], -30.0, 30.0, seed);
        let mut g = Graph::<f64>::new();
        let v = g.constant(x);
        let y = g.softmax_lastdim(v).unwrap();
        for row in g.value(y).data().chunks(cols) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
