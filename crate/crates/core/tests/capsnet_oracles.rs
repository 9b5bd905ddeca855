mod common;

use capsgan_core::capsnet::{
    margin_loss, AgreementKind, CapsuleLayer, MarginLossConfig, RoutingConfig,
};
use capsgan_core::rng::SeededRng;
use capsgan_core::{Graph, Tensor};
use common::{margin_ref, nest3, nest4, routing_ref};

struct Case {
    u: Tensor,
    w: Tensor,
    layer: CapsuleLayer,
}

fn random_case(rng: &mut SeededRng, cosine: bool) -> Case {
    let batch = 1 + rng.below(3);
    let in_caps = 1 + rng.below(5);
    let out_caps = 1 + rng.below(4);
    let in_dim = 1 + rng.below(4);
    let out_dim = 1 + rng.below(4);
    let layer = CapsuleLayer {
        in_caps,
        out_caps,
        in_dim,
        out_dim,
        routing: RoutingConfig {
            iters: 3,
            agreement: if cosine {
                AgreementKind::Cosine
            } else {
                AgreementKind::Dot
            },
        },
    };
    Case {
        u: rng.normal_tensor(&[batch, in_caps, in_dim]),
        w: rng.normal_tensor(&layer.weight_shape()),
        layer,
    }
}

fn run(case: &Case) -> (Tensor, Vec<Tensor>) {
    let mut g = Graph::new();
    let u = g.constant(case.u.clone());
    let w = g.constant(case.w.clone());
    let trace = case.layer.forward_traced(&mut g, u, w).unwrap();
    let couplings = trace
        .couplings
        .iter()
        .map(|&c| g.value(c).clone())
        .collect();
    (g.value(trace.output).clone(), couplings)
}

#[test]
fn routing_matches_straight_line_reference() {
    let mut rng = SeededRng::new(2024);
    for cosine in [false, true] {
        for _ in 0..300 {
            let case = random_case(&mut rng, cosine);
            let (v, couplings) = run(&case);
            let (v_ref, c_ref) = routing_ref(&nest3(&case.u), &nest4(&case.w), 3, cosine);
            for (got, want) in nest3(&v)
                .iter()
                .flatten()
                .flatten()
                .zip(v_ref.iter().flatten().flatten())
            {
                assert!((got - want).abs() <= 1e-12, "v {got} vs {want}");
            }
            assert_eq!(couplings.len(), 3);
            for (t, c) in couplings.iter().enumerate() {
                let c = nest3(c);
                for (b, per_i) in c.iter().enumerate() {
                    for (i, row) in per_i.iter().enumerate() {
                        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                        assert!(row.iter().all(|&x| x >= 0.0));
                        for (got, want) in row.iter().zip(&c_ref[t][b][i]) {
                            assert!((got - want).abs() <= 1e-12, "c {got} vs {want}");
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn documented_small_instance() {
    // I=3, J=2, d=2, three iterations
    let mut rng = SeededRng::new(5);
    let layer = CapsuleLayer {
        in_caps: 3,
        out_caps: 2,
        in_dim: 2,
        out_dim: 2,
        routing: RoutingConfig::default(),
    };
    let case = Case {
        u: rng.normal_tensor(&[1, 3, 2]),
        w: rng.normal_tensor(&layer.weight_shape()),
        layer,
    };
    let (v, _) = run(&case);
    let (v_ref, _) = routing_ref(&nest3(&case.u), &nest4(&case.w), 3, false);
    for (got, want) in v.data().iter().zip(v_ref.iter().flatten().flatten()) {
        assert!((got - want).abs() <= 1e-12);
    }
}

#[test]
fn routing_is_equivariant_in_lower_capsules() {
    let mut rng = SeededRng::new(77);
    for _ in 0..100 {
        let case = random_case(&mut rng, false);
        let l = case.layer;
        let mut perm: Vec<usize> = (0..l.in_caps).collect();
        rng.shuffle(&mut perm);
        let batch = case.u.shape()[0];
        let mut u = Vec::new();
        for b in 0..batch {
            for &i in &perm {
                u.extend_from_slice(&case.u.data()[(b * l.in_caps + i) * l.in_dim..][..l.in_dim]);
            }
        }
        let block = l.out_caps * l.out_dim * l.in_dim;
        let w: Vec<f64> = perm
            .iter()
            .flat_map(|&i| case.w.data()[i * block..][..block].to_vec())
            .collect();
        let permuted = Case {
            u: Tensor::new(case.u.shape().to_vec(), u).unwrap(),
            w: Tensor::new(case.w.shape().to_vec(), w).unwrap(),
            layer: l,
        };
        let (a, _) = run(&case);
        let (b, _) = run(&permuted);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
        }
    }
}

#[test]
fn capsule_norms_stay_below_one() {
    let mut rng = SeededRng::new(8);
    for _ in 0..50 {
        let mut case = random_case(&mut rng, false);
        case.w = case.w.map(|x| x * 1e3);
        let (v, _) = run(&case);
        for cap in v.data().chunks(case.layer.out_dim) {
            let n = cap.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((0.0..1.0).contains(&n), "{n}");
        }
    }
}

fn margin(norms: &[f64], targets: &[f64], cfg: &MarginLossConfig) -> f64 {
    let n = norms.len();
    let mut g = Graph::new();
    let v = g.constant(Tensor::new(vec![n, 1], norms.to_vec()).unwrap());
    let t = Tensor::new(vec![n, 1], targets.to_vec()).unwrap();
    let loss = margin_loss(&mut g, v, &t, cfg).unwrap();
    g.value(loss).item()
}

#[test]
fn margin_loss_matches_scalar_evaluation() {
    let cfg = MarginLossConfig::default();
    let mut rng = SeededRng::new(31);
    let mut total = 0.0;
    let mut norms = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..1000 {
        let v = rng.uniform();
        let t = if rng.below(2) == 1 { 1.0 } else { 0.0 };
        let want = margin_ref(v, t, cfg.m_plus, cfg.m_minus, cfg.lambda);
        let got = margin(&[v], &[t], &cfg);
        assert!((got - want).abs() <= 1e-12, "v={v} t={t}: {got} vs {want}");
        assert!(got >= 0.0);
        total += want;
        norms.push(v);
        targets.push(t);
    }
    let batched = margin(&norms, &targets, &cfg);
    assert!((batched - total / 1000.0).abs() <= 1e-12);
}

#[test]
fn margin_loss_worked_examples_are_exact() {
    let cfg = MarginLossConfig::default();
    assert_eq!(margin(&[0.9], &[1.0], &cfg), 0.0);
    assert_eq!(margin(&[0.1], &[0.0], &cfg), 0.0);
    assert_eq!(margin(&[0.6], &[0.0], &cfg), 0.125);
    assert_eq!(margin(&[0.0], &[1.0], &cfg), 0.81);
}

#[test]
fn margin_loss_zero_iff_margins_met() {
    let cfg = MarginLossConfig::default();
    let mut rng = SeededRng::new(4);
    for _ in 0..500 {
        let k = 1 + rng.below(4);
        let norms: Vec<f64> = (0..k).map(|_| rng.uniform()).collect();
        let targets: Vec<f64> = (0..k).map(|_| rng.below(2) as f64).collect();
        let met = norms.iter().zip(&targets).all(|(&v, &t)| {
            if t == 1.0 {
                v >= cfg.m_plus
            } else {
                v <= cfg.m_minus
            }
        });
        let mut g = Graph::new();
        let v = g.constant(Tensor::new(vec![1, k], norms).unwrap());
        let l = margin_loss(&mut g, v, &Tensor::new(vec![1, k], targets).unwrap(), &cfg).unwrap();
        assert_eq!(g.value(l).item() == 0.0, met);
    }
}
