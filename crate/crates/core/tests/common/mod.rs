//! Independent oracles shared by the integration tests. Nothing here calls
//! into the code paths it is used to check, except for building graphs.
#![allow(dead_code)]

use capsgan_core::rng::SeededRng;
use capsgan_core::{Graph, Tensor, Var};
use nalgebra::DMatrix;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
pub const FD_SCALE_FLOOR: f64 = 1e-6;

/// Worst-case mismatch between reverse-mode and central-difference gradients.
#[derive(Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst: (usize, usize, f64, f64),
    pub checked: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= FD_REL_TOL
    }
}

/// `build` maps parameter leaves to any output; the output is projected onto
/// a fixed random direction so non-scalar ops are checked in full.
pub fn gradcheck<F>(inputs: &[Tensor], build: F) -> GradCheck
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor], proj: Option<&Tensor>| -> (f64, Tensor, Graph, Vec<Var>, Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        let out_val = g.value(out).clone();
        let proj = proj
            .cloned()
            .unwrap_or_else(|| SeededRng::new(0xfeed).uniform_tensor(out_val.shape(), -1.0, 1.0));
        let p = g.constant(proj.clone());
        let prod = g.mul(out, p).unwrap();
        let loss = g.sum(prod, None).unwrap();
        (g.value(loss).item(), proj, g, vars, loss)
    };
    let (_, proj, g, vars, loss) = eval(inputs, None);
    let grads = g.backward(loss).unwrap();
    let mut result = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0, 0.0, 0.0),
        checked: 0,
    };
    for (ti, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v);
        for ei in 0..inputs[ti].len() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[ei] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[ei] -= FD_STEP;
            let fp = eval(&plus, Some(&proj)).0;
            let fm = eval(&minus, Some(&proj)).0;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let a = analytic.data()[ei];
            let diff = (a - numeric).abs();
            let rel = diff / a.abs().max(numeric.abs()).max(FD_SCALE_FLOOR);
            result.checked += 1;
            if rel > result.max_rel_err {
                result.max_rel_err = rel;
                result.worst = (ti, ei, a, numeric);
            }
        }
    }
    result
}

/// Random tensor with every entry at least `gap` away from `kink`.
pub fn away_from(rng: &mut SeededRng, shape: &[usize], kink: f64, gap: f64) -> Tensor {
    let mut t = rng.uniform_tensor(shape, -1.5, 1.5);
    for v in t.data_mut() {
        if (*v - kink).abs() < gap {
            *v = kink + if *v >= kink { gap } else { -gap } * 2.0;
        }
    }
    t
}

/// Squash for one vector, straight from the formula.
pub fn squash_ref(s: &[f64]) -> Vec<f64> {
    let q: f64 = s.iter().map(|x| x * x).sum();
    let f = q / ((1.0 + q) * (q + 1e-12).sqrt());
    s.iter().map(|x| x * f).collect()
}

/// Routing-by-agreement written out with nested vectors.
///
/// `u[b][i][d_in]`, `w[i][j][d_out][d_in]`; returns `(v[b][j][d_out], couplings per iteration c[t][b][i][j])`.
pub fn routing_ref(
    u: &[Vec<Vec<f64>>],
    w: &[Vec<Vec<Vec<f64>>>],
    iters: usize,
    cosine: bool,
) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<Vec<f64>>>>) {
    let n_i = w.len();
    let n_j = w[0].len();
    let d_out = w[0][0].len();
    let mut all_v = Vec::new();
    let mut all_c = vec![Vec::new(); iters];
    for ub in u {
        let mut uhat = vec![vec![vec![0.0; d_out]; n_j]; n_i];
        for i in 0..n_i {
            for j in 0..n_j {
                for o in 0..d_out {
                    uhat[i][j][o] = w[i][j][o].iter().zip(&ub[i]).map(|(a, b)| a * b).sum();
                }
            }
        }
        let mut b = vec![vec![0.0; n_j]; n_i];
        let mut v = vec![vec![0.0; d_out]; n_j];
        for (t, c_hist) in all_c.iter_mut().enumerate() {
            let c: Vec<Vec<f64>> = b
                .iter()
                .map(|row| {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    e.iter().map(|x| x / z).collect()
                })
                .collect();
            for j in 0..n_j {
                let mut s = vec![0.0; d_out];
                for i in 0..n_i {
                    for o in 0..d_out {
                        s[o] += c[i][j] * uhat[i][j][o];
                    }
                }
                v[j] = squash_ref(&s);
            }
            c_hist.push(c);
            if t + 1 < iters {
                for i in 0..n_i {
                    for j in 0..n_j {
                        let dot: f64 = uhat[i][j].iter().zip(&v[j]).map(|(a, b)| a * b).sum();
                        b[i][j] += if cosine {
                            let nu = (uhat[i][j].iter().map(|a| a * a).sum::<f64>() + 1e-12).sqrt();
                            let nv = (v[j].iter().map(|a| a * a).sum::<f64>() + 1e-12).sqrt();
                            dot / (nu * nv)
                        } else {
                            dot
                        };
                    }
                }
            }
        }
        all_v.push(v);
    }
    (all_v, all_c)
}

pub fn nest3(t: &Tensor) -> Vec<Vec<Vec<f64>>> {
    let s = t.shape();
    (0..s[0])
        .map(|a| {
            (0..s[1])
                .map(|b| t.data()[(a * s[1] + b) * s[2]..][..s[2]].to_vec())
                .collect()
        })
        .collect()
}

pub fn nest4(t: &Tensor) -> Vec<Vec<Vec<Vec<f64>>>> {
    let s = t.shape();
    (0..s[0])
        .map(|a| {
            (0..s[1])
                .map(|b| {
                    (0..s[2])
                        .map(|c| t.data()[((a * s[1] + b) * s[2] + c) * s[3]..][..s[3]].to_vec())
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// One term of the margin loss for a single class, evaluated in scalars.
pub fn margin_ref(norm: f64, target: f64, m_plus: f64, m_minus: f64, lambda: f64) -> f64 {
    let pos = (m_plus - norm).max(0.0);
    let neg = (norm - m_minus).max(0.0);
    target * pos * pos + lambda * (1.0 - target) * neg * neg
}

type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;

/// One randomized finite-difference case per operation kind; every tensor has
/// at most 64 elements and kinked ops are sampled away from their kinks.
pub fn op_cases(seed: u64) -> Vec<(&'static str, Vec<Tensor>, Builder)> {
    use capsgan_core::Op;
    let mut r = SeededRng::new(seed);
    let mut n = |shape: &[usize]| r.uniform_tensor(shape, -1.0, 1.0);
    let unary = |op: Op| -> Builder { Box::new(move |g, v| g.apply(op.clone(), &[v[0]]).unwrap()) };
    let binary =
        |op: Op| -> Builder { Box::new(move |g, v| g.apply(op.clone(), &[v[0], v[1]]).unwrap()) };
    let mut kinked = SeededRng::new(seed ^ 0x55);
    vec![
        ("matmul", vec![n(&[3, 4]), n(&[4, 5])], binary(Op::MatMul)),
        (
            "conv2d",
            vec![n(&[2, 2, 4, 4]), n(&[3, 2, 3, 3])],
            binary(Op::Conv2d { stride: 1, pad: 1 }),
        ),
        (
            "conv2d_strided",
            vec![n(&[1, 2, 5, 5]), n(&[2, 2, 3, 3])],
            binary(Op::Conv2d { stride: 2, pad: 1 }),
        ),
        (
            "conv2d_transpose",
            vec![n(&[2, 2, 3, 3]), n(&[2, 1, 4, 4])],
            binary(Op::ConvTranspose2d { stride: 2, pad: 1 }),
        ),
        ("add", vec![n(&[2, 3]), n(&[2, 3])], binary(Op::Add)),
        ("sub", vec![n(&[2, 3]), n(&[2, 3])], binary(Op::Sub)),
        ("mul", vec![n(&[2, 3]), n(&[2, 3])], binary(Op::Mul)),
        (
            "bias_add",
            vec![n(&[2, 3, 2, 2]), n(&[3])],
            binary(Op::BiasAdd),
        ),
        (
            "relu",
            vec![away_from(&mut kinked, &[4, 4], 0.0, 1e-3)],
            unary(Op::Relu),
        ),
        (
            "leaky_relu",
            vec![away_from(&mut kinked, &[4, 4], 0.0, 1e-3)],
            unary(Op::LeakyRelu(0.2)),
        ),
        ("sigmoid", vec![n(&[4, 4])], unary(Op::Sigmoid)),
        ("tanh", vec![n(&[4, 4])], unary(Op::Tanh)),
        ("softplus", vec![n(&[4, 4])], unary(Op::Softplus)),
        ("square", vec![n(&[4, 4])], unary(Op::Square)),
        (
            "affine",
            vec![n(&[4, 4])],
            unary(Op::Affine {
                scale: -1.7,
                shift: 0.3,
            }),
        ),
        (
            "max_with_scalar",
            vec![away_from(&mut kinked, &[4, 4], 0.2, 1e-3)],
            unary(Op::MaxScalar(0.2)),
        ),
        (
            "softmax",
            vec![n(&[2, 3, 4])],
            unary(Op::Softmax { axis: 1 }),
        ),
        ("reshape", vec![n(&[2, 6])], unary(Op::Reshape(vec![3, 4]))),
        (
            "permute",
            vec![n(&[2, 3, 4])],
            unary(Op::Permute(vec![2, 0, 1])),
        ),
        (
            "concat",
            vec![n(&[2, 1, 3]), n(&[2, 2, 3]), n(&[2, 3, 3])],
            Box::new(|g, v| g.concat(v, 1).unwrap()),
        ),
        (
            "vector_norm",
            vec![n(&[2, 3, 4])],
            unary(Op::VectorNorm {
                axis: 2,
                eps: 1e-12,
            }),
        ),
        (
            "reduce_sum",
            vec![n(&[2, 3, 4])],
            unary(Op::Sum { axis: Some(1) }),
        ),
        (
            "reduce_sum_all",
            vec![n(&[2, 3, 4])],
            unary(Op::Sum { axis: None }),
        ),
        (
            "reduce_mean",
            vec![n(&[2, 3, 4])],
            unary(Op::Mean { axis: Some(0) }),
        ),
        (
            "reduce_mean_all",
            vec![n(&[2, 3, 4])],
            unary(Op::Mean { axis: None }),
        ),
        (
            "squash",
            vec![n(&[2, 3, 4])],
            unary(Op::Squash {
                axis: 2,
                eps: 1e-12,
            }),
        ),
        (
            "squash_large",
            vec![n(&[2, 4]).map(|v| 5.0 * v)],
            unary(Op::Squash {
                axis: 1,
                eps: 1e-12,
            }),
        ),
        (
            "capsule_predict",
            vec![n(&[2, 3, 4]), n(&[3, 2, 2, 4])],
            binary(Op::CapsulePredict),
        ),
        (
            "route_combine",
            vec![n(&[2, 3, 2]), n(&[2, 3, 2, 4])],
            binary(Op::RouteCombine),
        ),
        (
            "agreement_dot",
            vec![n(&[2, 3, 2, 4]), n(&[2, 2, 4])],
            binary(Op::Agreement {
                cosine: false,
                eps: 1e-12,
            }),
        ),
        (
            "agreement_cosine",
            vec![n(&[2, 3, 2, 4]), n(&[2, 2, 4])],
            binary(Op::Agreement {
                cosine: true,
                eps: 1e-12,
            }),
        ),
    ]
}

/// conv → leaky_relu → primary capsules → routed layer (3 iterations) →
/// capsule norm → margin loss, with every weight tensor ≤ 64 elements.
pub fn composite_case(seed: u64, cosine: bool) -> (Vec<Tensor>, Builder) {
    use capsgan_core::capsnet::{
        self, AgreementKind, CapsuleLayer, MarginLossConfig, PrimaryCapsSpec, RoutingConfig,
    };
    let mut r = SeededRng::new(seed);
    let x = r.uniform_tensor(&[2, 1, 5, 5], -1.0, 1.0);
    let k1 = r.uniform_tensor(&[3, 1, 3, 3], -0.8, 0.8);
    let b1 = r.uniform_tensor(&[3], -0.1, 0.1);
    let k2 = r.uniform_tensor(&[4, 3, 2, 2], -0.8, 0.8);
    let w = r.uniform_tensor(&[8, 2, 2, 2], -1.0, 1.0);
    let inputs = vec![x, k1, b1, k2, w];
    let build: Builder = Box::new(move |g, v| {
        let h = g.conv2d(v[0], v[1], 1, 0).unwrap();
        let h = g.bias_add(h, v[2]).unwrap();
        let h = g.leaky_relu(h, 0.2).unwrap();
        let spec = PrimaryCapsSpec {
            capsule_dim: 2,
            channels: 2,
            kernel: 2,
            stride: 1,
            pad: 0,
        };
        let caps = capsnet::primary_capsules(g, h, v[3], None, &spec).unwrap();
        let agreement = if cosine {
            AgreementKind::Cosine
        } else {
            AgreementKind::Dot
        };
        let layer = CapsuleLayer {
            in_caps: 8,
            out_caps: 2,
            in_dim: 2,
            out_dim: 2,
            routing: RoutingConfig {
                iters: 3,
                agreement,
            },
        };
        let out = layer.forward(g, caps, v[4]).unwrap();
        let norms = capsnet::capsule_norms(g, out).unwrap();
        let t = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        capsnet::margin_loss(g, norms, &t, &MarginLossConfig::default()).unwrap()
    });
    (inputs, build)
}

/// Dense mutual-kNN graph by brute force: j is a neighbour of i when fewer
/// than k other points are strictly closer, or equally close with a lower
/// index.
pub fn mutual_knn_dense(x: &[Vec<f64>], k: usize) -> DMatrix<f64> {
    let n = x.len();
    let d = |a: usize, b: usize| {
        x[a].iter()
            .zip(&x[b])
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
    };
    let near = |i: usize, j: usize| {
        let rank = (0..n)
            .filter(|&m| m != i && m != j && (d(i, m) < d(i, j) || (d(i, m) == d(i, j) && m < j)))
            .count();
        rank < k
    };
    DMatrix::from_fn(n, n, |i, j| {
        if i != j && near(i, j) && near(j, i) {
            1.0
        } else {
            0.0
        }
    })
}

/// `(1 - alpha)(I - alpha S)^-1 Y` with `S = D^-1/2 W D^-1/2`.
pub fn closed_form(w: &DMatrix<f64>, y: &DMatrix<f64>, alpha: f64) -> DMatrix<f64> {
    let n = w.nrows();
    let deg: Vec<f64> = (0..n).map(|i| w.row(i).sum()).collect();
    let s = DMatrix::from_fn(n, n, |i, j| {
        if deg[i] > 0.0 && deg[j] > 0.0 {
            w[(i, j)] / (deg[i] * deg[j]).sqrt()
        } else {
            0.0
        }
    });
    let a = DMatrix::identity(n, n) - s * alpha;
    a.lu()
        .solve(&(y * (1.0 - alpha)))
        .expect("I - alpha S is invertible")
}

/// 102 points in 2-d, alternating between unit blobs at x = -5 and x = +5.
pub fn blobs(seed: u64) -> (Vec<f64>, Vec<usize>) {
    let mut rng = SeededRng::new(seed);
    let mut x = Vec::new();
    let mut truth = Vec::new();
    for i in 0..102 {
        let c = i % 2;
        x.push(if c == 0 { -5.0 } else { 5.0 } + rng.normal());
        x.push(rng.normal());
        truth.push(c);
    }
    (x, truth)
}

pub fn one_label_each(truth: &[usize]) -> Vec<Option<usize>> {
    (0..truth.len())
        .map(|i| (i < 2).then_some(truth[i]))
        .collect()
}
