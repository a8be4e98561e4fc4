//! Central finite-difference oracle for reverse-mode gradients.
//!
//! The checked function returns any tensor `y`; the scalar probed is
//! `L = Σ rᵢ·yᵢ` with fixed random weights `r`, evaluated in `f64` on the
//! finite-difference side so the oracle does not share the graph's reduction.

use rand::{Rng, SeedableRng};

use crate::{Graph, Result, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Norm-wise relative error `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` per input.
    pub rel_err: Vec<f64>,
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.rel_err.iter().copied().fold(0.0, f64::max)
    }
}

fn probe_weights(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    (0..n).map(|_| rng.gen_range(0.5f32..1.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect()
}

/// Compares gradients of every input with respect to `Σ r·f(inputs)`.
pub fn check<F>(inputs: &[Tensor], h: f32, seed: u64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&mut g, &vars)?;
        Ok(g.value(y).to_vec())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let y = f(&mut g, &vars)?;
    let r = probe_weights(g.value(y).len(), seed);
    let shape = g.shape(y).to_vec();
    let rv = g.constant(Tensor::new(shape, r.clone())?);
    let weighted = g.mul(y, rv)?;
    let root = g.sum(weighted);
    let grads = g.backward(root)?;

    let probe = |out: &[f32]| -> f64 { out.iter().zip(&r).map(|(&a, &b)| a as f64 * b as f64).sum() };

    let mut report = GradCheckReport { rel_err: vec![], analytic: vec![], numeric: vec![] };
    for (k, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = grads
            .get(*var)
            .map(|t| t.data().iter().map(|&v| v as f64).collect())
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let mut numeric = vec![0.0; inputs[k].numel()];
        let mut vals = inputs.to_vec();
        for i in 0..inputs[k].numel() {
            let x = inputs[k].data()[i];
            let (xp, xm) = (x + h, x - h);
            vals[k].data_mut()[i] = xp;
            let fp = probe(&eval(&vals)?);
            vals[k].data_mut()[i] = xm;
            let fm = probe(&eval(&vals)?);
            vals[k].data_mut()[i] = x;
            numeric[i] = (fp - fm) / (xp as f64 - xm as f64);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn).max(1e-12);
        report.rel_err.push(diff / denom);
        report.analytic.push(analytic);
        report.numeric.push(numeric);
    }
    Ok(report)
}


/// Central differences of an `f64` reference forward, compared with the graph's
/// reverse-mode gradient of `Σ r·f`.
pub fn check_against_reference(case: &OpCase, h: f64, seed: u64) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.variable(t.clone())).collect();
    let y = (case.f)(&mut g, &vars)?;
    let r = probe_weights(g.value(y).len(), seed);
    let rv = g.constant(Tensor::new(g.shape(y).to_vec(), r.clone())?);
    let weighted = g.mul(y, rv)?;
    let root = g.sum(weighted);
    let grads = g.backward(root)?;

    let base: Vec<Vec<f64>> =
        case.inputs.iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect();
    let probe = |vals: &[Vec<f64>]| -> f64 {
        (case.reference)(vals).iter().zip(&r).map(|(a, &b)| a * b as f64).sum()
    };
    let mut report = GradCheckReport { rel_err: vec![], analytic: vec![], numeric: vec![] };
    for (k, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> =
            grads.get(*var).expect("inputs are variables").data().iter().map(|&v| v as f64).collect();
        let mut vals = base.clone();
        let mut numeric = vec![0.0; analytic.len()];
        for i in 0..analytic.len() {
            let x = base[k][i];
            vals[k][i] = x + h;
            let fp = probe(&vals);
            vals[k][i] = x - h;
            let fm = probe(&vals);
            vals[k][i] = x;
            numeric[i] = (fp - fm) / (2.0 * h);
        }
        let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        report.rel_err.push(diff / na.max(nn).max(1e-12));
        report.analytic.push(analytic);
        report.numeric.push(numeric);
    }
    Ok(report)
}

type CaseFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;
type RefFn = Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>;

/// One differentiable operation with inputs drawn away from its kinks and a
/// naive double-precision reference forward.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub f: CaseFn,
    pub reference: RefFn,
}

fn away_from_zero<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.2f32..1.5);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn positive<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::rand_uniform(shape.to_vec(), 0.5, 2.0, rng)
}

fn normal<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

fn unravel(mut i: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for d in (0..shape.len()).rev() {
        idx[d] = i % shape[d];
        i /= shape[d];
    }
    idx
}

fn ravel(idx: &[usize], shape: &[usize]) -> usize {
    idx.iter().zip(shape).fold(0, |acc, (&i, &n)| acc * n + i)
}

/// Naive numpy broadcasting for the reference side.
fn ref_broadcast(a: &[usize], b: &[usize], f: impl Fn(f64, f64) -> f64, va: &[f64], vb: &[f64]) -> Vec<f64> {
    let n = a.len().max(b.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut p = vec![1; n - s.len()];
        p.extend_from_slice(s);
        p
    };
    let (pa, pb) = (pad(a), pad(b));
    let out: Vec<usize> = pa.iter().zip(&pb).map(|(&x, &y)| x.max(y)).collect();
    (0..out.iter().product())
        .map(|o| {
            let idx = unravel(o, &out);
            let ia: Vec<usize> = idx.iter().zip(&pa).map(|(&i, &d)| if d == 1 { 0 } else { i }).collect();
            let ib: Vec<usize> = idx.iter().zip(&pb).map(|(&i, &d)| if d == 1 { 0 } else { i }).collect();
            f(va[ravel(&ia, &pa)], vb[ravel(&ib, &pb)])
        })
        .collect()
}

fn ref_matmul(va: &[f64], vb: &[f64], batch: usize, m: usize, k: usize, n: usize, shared: bool) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let bo = if shared { 0 } else { bi * k * n };
        for i in 0..m {
            for j in 0..n {
                out[(bi * m + i) * n + j] =
                    (0..k).map(|p| va[(bi * m + i) * k + p] * vb[bo + p * n + j]).sum();
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn ref_conv(
    x: &[f64],
    w: &[f64],
    b: Option<&[f64]>,
    xs: [usize; 4],
    ws: [usize; 4],
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let [n, ci, h, wd] = xs;
    let [co, _, kh, kw] = ws;
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * co * ho * wo];
    for bi in 0..n {
        for o in 0..co {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b[o]);
                    for c in 0..ci {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xx * stride + j) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x[((bi * ci + c) * h + iy as usize) * wd + ix as usize]
                                        * w[((o * ci + c) * kh + i) * kw + j];
                                }
                            }
                        }
                    }
                    out[((bi * co + o) * ho + y) * wo + xx] = acc;
                }
            }
        }
    }
    out
}

/// Every operation the graph registers, instantiated for one seed.
pub fn registered_ops(seed: u64) -> Vec<OpCase> {
    use crate::graph::UnaryKind as U;
    use crate::SparseMap;
    use std::sync::Arc;

    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut cases: Vec<OpCase> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($inp:expr),*], $f:expr, $r:expr) => {
            cases.push(OpCase {
                name: $name,
                inputs: vec![$($inp),*],
                f: Box::new($f),
                reference: Box::new($r),
            })
        };
    }

    case!("add", [normal(&[3, 4], rng), normal(&[4], rng)], |g, v| g.add(v[0], v[1]), |x| {
        ref_broadcast(&[3, 4], &[4], |a, b| a + b, &x[0], &x[1])
    });
    case!("sub", [normal(&[2, 1, 3], rng), normal(&[4, 1], rng)], |g, v| g.sub(v[0], v[1]), |x| {
        ref_broadcast(&[2, 1, 3], &[4, 1], |a, b| a - b, &x[0], &x[1])
    });
    case!("mul", [normal(&[3, 4], rng), normal(&[3, 1], rng)], |g, v| g.mul(v[0], v[1]), |x| {
        ref_broadcast(&[3, 4], &[3, 1], |a, b| a * b, &x[0], &x[1])
    });
    case!("div", [normal(&[3, 4], rng), positive(&[4], rng)], |g, v| g.div(v[0], v[1]), |x| {
        ref_broadcast(&[3, 4], &[4], |a, b| a / b, &x[0], &x[1])
    });
    let unaries: [(&'static str, U, Tensor, fn(f64) -> f64); 11] = [
        ("neg", U::Neg, normal(&[2, 5], rng), |x| -x),
        ("exp", U::Exp, normal(&[2, 5], rng), f64::exp),
        ("log", U::Log, positive(&[2, 5], rng), f64::ln),
        ("sqrt", U::Sqrt, positive(&[2, 5], rng), f64::sqrt),
        ("square", U::Square, normal(&[2, 5], rng), |x| x * x),
        ("abs", U::Abs, away_from_zero(&[2, 5], rng), f64::abs),
        ("relu", U::Relu, away_from_zero(&[2, 5], rng), |x| x.max(0.0)),
        ("silu", U::Silu, normal(&[2, 5], rng), |x| x / (1.0 + (-x).exp())),
        ("sigmoid", U::Sigmoid, normal(&[2, 5], rng), |x| 1.0 / (1.0 + (-x).exp())),
        ("tanh", U::Tanh, normal(&[2, 5], rng), f64::tanh),
        ("softplus", U::Softplus, normal(&[2, 5], rng), |x| (1.0 + x.exp()).ln()),
    ];
    for (name, kind, input, rf) in unaries {
        case!(name, [input], move |g, v| Ok(g.unary(kind, v[0])), move |x| x[0]
            .iter()
            .map(|&v| rf(v))
            .collect());
    }
    // |x| ≥ 0.2 keeps 0.5·x off the clamp edges at ±0.1
    case!(
        "clamp",
        [away_from_zero(&[3, 3], rng)],
        |g, v| {
            let s = g.mul_scalar(v[0], 0.5);
            Ok(g.clamp(s, -0.1, 0.1))
        },
        |x| x[0].iter().map(|v| (0.5 * v).clamp(-0.1, 0.1)).collect()
    );
    case!("add_scalar", [normal(&[4], rng)], |g, v| Ok(g.add_scalar(v[0], 0.7)), |x| x[0]
        .iter()
        .map(|v| v + 0.7)
        .collect());
    case!("mul_scalar", [normal(&[4], rng)], |g, v| Ok(g.mul_scalar(v[0], -1.3)), |x| x[0]
        .iter()
        .map(|v| v * -1.3)
        .collect());
    case!("sum", [normal(&[3, 4], rng)], |g, v| Ok(g.sum(v[0])), |x| vec![x[0].iter().sum()]);
    case!("mean", [normal(&[3, 4], rng)], |g, v| Ok(g.mean(v[0])), |x| vec![
        x[0].iter().sum::<f64>() / 12.0
    ]);
    case!("sum_axis", [normal(&[2, 3, 4], rng)], |g, v| g.sum_axis(v[0], 1), |x| {
        (0..8).map(|o| (0..3).map(|k| x[0][(o / 4) * 12 + k * 4 + o % 4]).sum()).collect()
    });
    case!("mean_axis", [normal(&[2, 3, 4], rng)], |g, v| g.mean_axis(v[0], 2), |x| {
        x[0].chunks(4).map(|c| c.iter().sum::<f64>() / 4.0).collect()
    });
    case!("matmul", [normal(&[3, 4], rng), normal(&[4, 2], rng)], |g, v| g.matmul(v[0], v[1]), |x| {
        ref_matmul(&x[0], &x[1], 1, 3, 4, 2, true)
    });
    case!(
        "matmul_batched",
        [normal(&[2, 3, 4], rng), normal(&[2, 4, 5], rng)],
        |g, v| g.matmul(v[0], v[1]),
        |x| ref_matmul(&x[0], &x[1], 2, 3, 4, 5, false)
    );
    case!(
        "matmul_shared",
        [normal(&[2, 3, 4], rng), normal(&[4, 5], rng)],
        |g, v| g.matmul(v[0], v[1]),
        |x| ref_matmul(&x[0], &x[1], 2, 3, 4, 5, true)
    );
    case!("reshape", [normal(&[2, 6], rng)], |g, v| g.reshape(v[0], &[3, 4]), |x| x[0].clone());
    case!("permute", [normal(&[2, 3, 4], rng)], |g, v| g.permute(v[0], &[2, 0, 1]), |x| {
        (0..24)
            .map(|o| {
                let idx = unravel(o, &[4, 2, 3]);
                x[0][ravel(&[idx[1], idx[2], idx[0]], &[2, 3, 4])]
            })
            .collect()
    });
    case!("transpose", [normal(&[3, 5], rng)], |g, v| g.transpose(v[0]), |x| {
        (0..15).map(|o| x[0][(o % 3) * 5 + o / 3]).collect()
    });
    case!(
        "concat",
        [normal(&[2, 3, 2], rng), normal(&[2, 1, 2], rng)],
        |g, v| g.concat(&[v[0], v[1]], 1),
        |x| {
            let mut out = vec![];
            for o in 0..2 {
                out.extend_from_slice(&x[0][o * 6..(o + 1) * 6]);
                out.extend_from_slice(&x[1][o * 2..(o + 1) * 2]);
            }
            out
        }
    );
    case!("narrow", [normal(&[3, 5], rng)], |g, v| g.narrow(v[0], 1, 1, 3), |x| {
        x[0].chunks(5).flat_map(|r| r[1..4].to_vec()).collect()
    });
    case!(
        "conv2d",
        [normal(&[2, 2, 5, 5], rng), normal(&[3, 2, 3, 3], rng), normal(&[3], rng)],
        |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1),
        |x| ref_conv(&x[0], &x[1], Some(&x[2]), [2, 2, 5, 5], [3, 2, 3, 3], 2, 1)
    );
    case!(
        "conv2d_same",
        [normal(&[1, 3, 4, 4], rng), normal(&[2, 3, 3, 3], rng)],
        |g, v| g.conv2d(v[0], v[1], None, 1, 1),
        |x| ref_conv(&x[0], &x[1], None, [1, 3, 4, 4], [2, 3, 3, 3], 1, 1)
    );
    case!("upsample_nearest", [normal(&[1, 2, 2, 3], rng)], |g, v| g.upsample_nearest(v[0], 2), |x| {
        (0..48)
            .map(|o| {
                let [_, c, y, xx] = unravel(o, &[1, 2, 4, 6])[..] else { unreachable!() };
                x[0][(c * 2 + y / 2) * 3 + xx / 2]
            })
            .collect()
    });
    case!("softmax", [normal(&[3, 5], rng)], |g, v| g.softmax(v[0]), |x| {
        x[0].chunks(5)
            .flat_map(|r| {
                let s: f64 = r.iter().map(|v| v.exp()).sum();
                r.iter().map(move |v| v.exp() / s)
            })
            .collect()
    });
    case!("cumsum_exclusive", [normal(&[2, 4], rng)], |g, v| g.cumsum(v[0], 1, true), |x| {
        x[0].chunks(4).flat_map(|r| (0..4).map(|k| r[..k].iter().sum::<f64>()).collect::<Vec<_>>()).collect()
    });
    case!("cumsum_inclusive", [normal(&[3, 2], rng)], |g, v| g.cumsum(v[0], 0, false), |x| {
        (0..6).map(|o| (0..=o / 2).map(|k| x[0][k * 2 + o % 2]).sum()).collect()
    });
    let mut map = SparseMap::new(6);
    let mut dense = vec![vec![0.0f64; 6]; 4];
    for (r, row) in dense.iter_mut().enumerate() {
        let terms: Vec<(usize, f32)> = (0..3).map(|k| ((r + 2 * k) % 6, rng.gen_range(0.0f32..1.0))).collect();
        for &(c, w) in &terms {
            row[c] += w as f64;
        }
        map.push_row(terms);
    }
    let map = Arc::new(map);
    case!(
        "sparse_apply",
        [normal(&[3, 6], rng)],
        move |g, v| g.sparse_apply(v[0], map.clone()),
        move |x| {
            x[0].chunks(6)
                .flat_map(|src| dense.iter().map(|row| row.iter().zip(src).map(|(w, s)| w * s).sum()).collect::<Vec<f64>>())
                .collect()
        }
    );
    case!("gather_rows", [normal(&[4, 3], rng)], |g, v| g.gather_rows(v[0], &[2, 0, 2, 3]), |x| {
        [2usize, 0, 2, 3].iter().flat_map(|&i| x[0][i * 3..(i + 1) * 3].to_vec()).collect()
    });
    case!(
        "group_norm",
        [normal(&[2, 4, 3, 3], rng), normal(&[2, 4], rng), normal(&[4], rng)],
        |g, v| crate::nn::group_norm(g, v[0], 2, v[1], v[2]),
        |x| {
            let mut out = vec![0.0; 72];
            for n in 0..2 {
                for grp in 0..2 {
                    let s = n * 36 + grp * 18;
                    let vals = &x[0][s..s + 18];
                    let mu = vals.iter().sum::<f64>() / 18.0;
                    let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 18.0;
                    for j in 0..18 {
                        let c = grp * 2 + j / 9;
                        let normed = (vals[j] - mu) / (var + crate::nn::GN_EPS as f64).sqrt();
                        out[s + j] = normed * x[1][n * 4 + c] + x[2][c];
                    }
                }
            }
            out
        }
    );
    cases
}
