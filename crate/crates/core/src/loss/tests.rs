use proptest::prelude::*;

use super::*;
use crate::gradcheck::{check_inputs, random_tensor};
use crate::rng;

fn mask(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng::seeded(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| if rng::bernoulli(&mut r, 0.4) { 1.0 } else { 0.0 }).collect()).unwrap()
}

fn saturated(gt: &Tensor<f64>, sign: f64) -> Tensor<f64> {
    Tensor::new(gt.shape(), gt.data().iter().map(|&v| sign * if v > 0.5 { 20.0 } else { -20.0 }).collect()).unwrap()
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Direct formulas, independent of the graph implementation.
fn naive_bce_pixel(x: f64, g: f64) -> f64 {
    -(g * sig(x).ln() + (1.0 - g) * (1.0 - sig(x)).ln())
}

fn naive_iou(x: &[f64], gt: &[f64]) -> f64 {
    let p: Vec<f64> = x.iter().map(|&v| sig(v)).collect();
    let inter: f64 = p.iter().zip(gt).map(|(a, b)| a * b).sum();
    let union: f64 = p.iter().sum::<f64>() + gt.iter().sum::<f64>() - inter;
    1.0 - (inter + 1.0) / (union + 1.0)
}

fn eval(f: impl FnOnce(&mut Graph<f64>) -> Result<Var>) -> f64 {
    let mut g = Graph::new();
    let v = f(&mut g).unwrap();
    g.value(v).item()
}

#[test]
fn default_weights() {
    assert_eq!(LossWeights::default().lambda, [0.4, 0.6, 0.8, 1.0]);
    assert!(LossWeights { lambda: [0.4, 0.0, 0.8, 1.0] }.validate().is_err());
}

#[test]
fn bce_cases() {
    let gt = mask(&[8, 8], 1);
    let zero = eval(|g| {
        let x = g.constant(Tensor::zeros(&[8, 8]));
        bce(g, x, &gt)
    });
    assert!((zero - std::f64::consts::LN_2).abs() < 1e-12);
    let sat = eval(|g| {
        let x = g.constant(saturated(&gt, 1.0));
        bce(g, x, &gt)
    });
    assert!(sat < 2.1e-9 && sat > 2.0e-9, "{sat}");

    let x = random_tensor(&[8, 8], -4.0, 4.0, 2);
    let got = eval(|g| {
        let v = g.constant(x.clone());
        bce(g, v, &gt)
    });
    let want: f64 = x.data().iter().zip(gt.data()).map(|(&a, &b)| naive_bce_pixel(a, b)).sum::<f64>() / 64.0;
    assert!((got - want).abs() < 1e-6);

    let mut g = Graph::new();
    let v = g.constant(Tensor::zeros(&[4, 8]));
    assert!(bce(&mut g, v, &gt).is_err());
}

#[test]
fn iou_cases() {
    let gt = mask(&[8, 8], 3);
    let perfect = eval(|g| {
        let x = g.constant(saturated(&gt, 1.0));
        iou(g, x, &gt)
    });
    assert!(perfect <= 1e-6, "{perfect}");
    let disjoint = eval(|g| {
        let x = g.constant(saturated(&gt, -1.0));
        iou(g, x, &gt)
    });
    assert!((disjoint - (1.0 - 1.0 / 65.0)).abs() < 1e-6, "{disjoint}");

    let x = random_tensor(&[8, 8], -3.0, 3.0, 4);
    let got = eval(|g| {
        let v = g.constant(x.clone());
        iou(g, v, &gt)
    });
    assert!((got - naive_iou(x.data(), gt.data())).abs() < 1e-6);
}

#[test]
fn logmse_cases() {
    let gt = random_tensor(&[6, 6], 0.0, 1.0, 5);
    let same = eval(|g| {
        let p = g.constant(gt.clone());
        logmse(g, p, &gt)
    });
    assert_eq!(same, 0.0);
    let (a, b) = (0.3, 0.8);
    let got = eval(|g| {
        let p = g.constant(Tensor::full(&[4, 4], a));
        logmse(g, p, &Tensor::full(&[4, 4], b))
    });
    let want = ((a + 0.01f64).ln() - (b + 0.01f64).ln()).powi(2);
    assert!((got - want).abs() < 1e-15);

    let mut g = Graph::new();
    let p = g.constant(Tensor::full(&[2, 2], 1.5));
    assert!(matches!(logmse(&mut g, p, &Tensor::full(&[2, 2], 0.5)), Err(Error::Domain { .. })));

    let pred = random_tensor(&[5, 5], 0.05, 0.95, 6);
    let target = random_tensor(&[5, 5], 0.0, 1.0, 7);
    let r = check_inputs("logmse", &[pred], 1e-4, 1e-6, |g, v| logmse(g, v[0], &target)).unwrap();
    assert!(r.passed(), "{} {}", r.max_err, r.worst);
}

#[test]
fn dec_cases() {
    let gt = mask(&[4, 4], 7);
    let depth = random_tensor(&[4, 4], 0.0, 1.0, 8);
    let w = dec_weights(&depth, &depth).unwrap();
    assert!(w.data().iter().all(|&v| v == 0.0));
    let x = random_tensor(&[4, 4], -2.0, 2.0, 9);
    let zero = eval(|g| {
        let v = g.constant(x.clone());
        dec(g, v, &gt, &w)
    });
    assert_eq!(zero, 0.0);

    let ones = Tensor::ones(&[4, 4]);
    let weighted = eval(|g| {
        let v = g.constant(x.clone());
        dec(g, v, &gt, &ones)
    });
    let plain = eval(|g| {
        let v = g.constant(x.clone());
        bce(g, v, &gt)
    });
    assert!((weighted - plain).abs() < 1e-9);

    // 2x1 image, w = [1, 0]
    let gt2 = Tensor::new(&[2, 1], vec![1.0, 0.0]).unwrap();
    let x2 = Tensor::new(&[2, 1], vec![0.3, -1.2]).unwrap();
    let w2 = dec_weights(&Tensor::new(&[2, 1], vec![0.9, 0.5]).unwrap(), &Tensor::new(&[2, 1], vec![0.5, 0.5]).unwrap()).unwrap();
    assert_eq!(w2.data(), &[1.0, 0.0]);
    let got = eval(|g| {
        let v = g.constant(x2.clone());
        dec(g, v, &gt2, &w2)
    });
    let a = naive_bce_pixel(0.3, 1.0);
    assert!((got - a).abs() < 1e-7, "{got} vs {a}");
}

#[test]
fn dec_weights_are_normalized() {
    let p = Tensor::new(&[3], vec![0.2, 0.9, 0.5]).unwrap();
    let t = Tensor::new(&[3], vec![0.4, 0.5, 0.5]).unwrap();
    let w = dec_weights(&p, &t).unwrap();
    let want = [0.5f64, 1.0, 0.0];
    for (a, b) in w.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn dec_weights_ignore_positive_rescaling(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let p = random_tensor(&[5, 5], 0.0, 1.0, seed);
        let t = random_tensor(&[5, 5], 0.0, 1.0, seed ^ 1);
        let w = dec_weights(&p, &t).unwrap();
        let ps = Tensor::new(&[5, 5], p.data().iter().map(|v| v * scale).collect()).unwrap();
        let ts = Tensor::new(&[5, 5], t.data().iter().map(|v| v * scale).collect()).unwrap();
        let ws = dec_weights(&ps, &ts).unwrap();
        prop_assert!(w.max_abs_diff(&ws) < 1e-12);
    }

    #[test]
    fn terms_are_nonnegative(seed in any::<u64>()) {
        let gt = mask(&[6, 6], seed);
        let x = random_tensor(&[6, 6], -5.0, 5.0, seed ^ 2);
        let d = random_tensor(&[6, 6], 0.0, 1.0, seed ^ 3);
        let dg = random_tensor(&[6, 6], 0.0, 1.0, seed ^ 4);
        let w = dec_weights(&d, &dg).unwrap();
        let mut g = Graph::new();
        let v = g.constant(x);
        let dv = g.constant(d.clone());
        for t in [bce(&mut g, v, &gt).unwrap(), iou(&mut g, v, &gt).unwrap(), dec(&mut g, v, &gt, &w).unwrap(), logmse(&mut g, dv, &dg).unwrap()] {
            let val = g.value(t).item();
            prop_assert!(val >= 0.0 && val.is_finite());
        }
    }
}

struct Case {
    g: Graph<f64>,
    preds: Predictions,
    mask: Tensor<f64>,
    depth: Tensor<f64>,
}

fn case(depth: bool, mls: bool, perfect: bool, seed: u64) -> Case {
    let mask = mask(&[8, 8], seed);
    let depth_gt = random_tensor(&[8, 8], 0.0, 1.0, seed + 1);
    let mut g = Graph::new();
    let mut logits = |k: u64| {
        let t = if perfect { saturated(&mask, 1.0) } else { random_tensor(&[8, 8], -3.0, 3.0, seed + 10 + k) };
        g.constant(t)
    };
    let saliency = logits(0);
    let mls_maps = if mls { (1..4).map(&mut logits).collect() } else { Vec::new() };
    let d = depth.then(|| {
        let t = if perfect { depth_gt.clone() } else { random_tensor(&[8, 8], 0.0, 1.0, seed + 20) };
        g.constant(t)
    });
    Case {
        g,
        preds: Predictions {
            saliency,
            depth: d,
            mls: mls_maps,
        },
        mask,
        depth: depth_gt,
    }
}

fn run_total(c: &mut Case) -> LossReport {
    let t = Targets {
        mask: &c.mask,
        depth: &c.depth,
    };
    total_loss(&mut c.g, &c.preds, t, &LossWeights::default(), None).unwrap().1
}

#[test]
fn perfect_predictions_vanish() {
    let mut c = case(true, true, true, 30);
    let r = run_total(&mut c);
    assert!(r.total <= 1e-5, "{r:?}");
    assert_eq!(r.logmse, 0.0);
    for l in r.levels.iter().flatten() {
        assert!(l.bce <= 1e-5 && l.iou <= 1e-5 && l.dec == 0.0);
    }
}

#[test]
fn mfa_only_uses_the_final_map() {
    let mut c = case(false, false, false, 40);
    let r = run_total(&mut c);
    assert!(r.levels[..3].iter().all(|l| l.is_none()));
    let l4 = r.levels[3].unwrap();
    assert_eq!(l4.dec, 0.0);
    assert_eq!(r.logmse, 0.0);
    let (sal, m) = (c.g.value(c.preds.saliency).clone(), c.mask.clone());
    let want = 1.0
        * (sal.data().iter().zip(m.data()).map(|(&a, &b)| naive_bce_pixel(a, b)).sum::<f64>() / 64.0
            + naive_iou(sal.data(), m.data()));
    assert!((r.total - want).abs() < 1e-9);
}

#[test]
fn total_recomposes_from_parts() {
    for (depth, mls) in [(true, true), (true, false), (false, false)] {
        let mut c = case(depth, mls, false, 50);
        let r = run_total(&mut c);
        assert!((r.total - r.recompose(&LossWeights::default())).abs() < 1e-6);
        // and against sums recomputed here from the raw maps
        let m = &c.mask;
        let dw = c.preds.depth.map(|d| dec_weights(c.g.value(d), &c.depth).unwrap());
        let mut maps: Vec<Var> = c.preds.mls.clone();
        maps.push(c.preds.saliency);
        let lam = if mls { vec![0.4, 0.6, 0.8, 1.0] } else { vec![1.0] };
        let mut want = 0.0;
        for (x, l) in maps.iter().zip(lam) {
            let xv = c.g.value(*x).data();
            let b: f64 = xv.iter().zip(m.data()).map(|(&a, &g)| naive_bce_pixel(a, g)).sum::<f64>() / 64.0;
            let mut term = b + naive_iou(xv, m.data());
            if let Some(w) = &dw {
                let num: f64 = xv.iter().zip(m.data()).zip(w.data()).map(|((&a, &g), &w)| w * naive_bce_pixel(a, g)).sum();
                term += num / (w.data().iter().sum::<f64>() + 1e-8);
            }
            want += l * term;
        }
        if let Some(d) = c.preds.depth {
            let p = c.g.value(d).data();
            want += p.iter().zip(c.depth.data()).map(|(a, b)| ((a + 0.01f64).ln() - (b + 0.01f64).ln()).powi(2)).sum::<f64>() / 64.0;
        }
        assert!((r.total - want).abs() < 1e-6, "{} vs {want}", r.total);
    }
}

#[test]
fn report_tsv_columns() {
    let mut c = case(true, false, false, 60);
    let r = run_total(&mut c);
    let header = LossReport::tsv_header();
    let line = r.to_tsv();
    assert_eq!(header.split('\t').count(), 14);
    assert_eq!(line.split('\t').count(), 14);
    assert!(line.split('\t').nth(2).unwrap() == "-");
}

#[test]
fn non_finite_term_is_named() {
    let mask = Tensor::<f32>::ones(&[2, 2]);
    let depth = Tensor::<f32>::full(&[2, 2], 0.5);
    let mut g = Graph::<f32>::new();
    let sal = g.constant(Tensor::full(&[2, 2], 0.0));
    let d = g.constant(Tensor::full(&[2, 2], f32::NAN));
    let preds = Predictions {
        saliency: sal,
        depth: Some(d),
        mls: Vec::new(),
    };
    let err = total_loss(&mut g, &preds, Targets { mask: &mask, depth: &depth }, &LossWeights::default(), None).unwrap_err();
    assert!(err.to_string().contains("logmse"), "{err}");
}
