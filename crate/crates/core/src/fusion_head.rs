//! Gated fusion of the image descriptor with node embeddings, the unified
//! prediction head, and the level-aware objective.
//!
//! Per node and dimension the gate picks a convex combination
//! `gamma * e + (1 - gamma) * z`. Fused node states are mean-pooled,
//! concatenated with `z`, and mapped to one logit per hierarchy node. The
//! loss uses cross-entropy on a level whose target row has exactly one
//! positive and mean binary cross-entropy otherwise, averaged over levels.

use std::collections::BTreeMap;

use crate::encoder::LN_EPS;
use crate::error::{Error, Result};
use crate::hierarchy::LevelPartition;
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub fn gate_param_shapes(dim: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        ("gate.weight".into(), vec![2 * dim, dim]),
        ("gate.bias".into(), vec![dim]),
        ("gate.norm.gain".into(), vec![dim]),
        ("gate.norm.bias".into(), vec![dim]),
    ]
}

/// Head over `[pooled | z]` producing `outputs` logits.
pub fn head_param_shapes(input: usize, outputs: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        ("head.weight".into(), vec![input, outputs]),
        ("head.bias".into(), vec![outputs]),
    ]
}

fn get(p: &BTreeMap<String, Var>, name: &str) -> Result<Var> {
    p.get(name)
        .copied()
        .ok_or_else(|| Error::InvalidArgument(format!("missing parameter '{name}'")))
}

#[derive(Clone, Copy, Debug)]
pub struct GateNet {
    pub weight: Var,
    pub bias: Var,
    pub gain: Var,
    pub norm_bias: Var,
}

impl GateNet {
    pub fn from_params(p: &BTreeMap<String, Var>) -> Result<Self> {
        Ok(Self {
            weight: get(p, "gate.weight")?,
            bias: get(p, "gate.bias")?,
            gain: get(p, "gate.norm.gain")?,
            norm_bias: get(p, "gate.norm.bias")?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Head {
    pub weight: Var,
    pub bias: Var,
}

impl Head {
    pub fn from_params(p: &BTreeMap<String, Var>) -> Result<Self> {
        Ok(Self {
            weight: get(p, "head.weight")?,
            bias: get(p, "head.bias")?,
        })
    }
}

/// `z: [B, d]` repeated over `m` nodes: `[B, m, d]`.
pub fn replicate<T: Scalar>(g: &mut Graph<T>, z: Var, m: usize) -> Result<Var> {
    let s = g.shape(z).to_vec();
    if s.len() != 2 {
        return Err(Error::shape("replicate", format!("z {s:?}, expected [B, d]")));
    }
    let z3 = g.reshape(z, &[s[0], 1, s[1]])?;
    g.expand(z3, 1, m)
}

fn check_pair<T: Scalar>(g: &Graph<T>, op: &'static str, z: Var, e: Var) -> Result<()> {
    let (sz, se) = (g.shape(z), g.shape(e));
    if sz.len() != 2 || se.len() != 3 || sz[0] != se[0] || sz[1] != se[2] {
        return Err(Error::shape(op, format!("z {sz:?} vs E {se:?}")));
    }
    Ok(())
}

/// `sigmoid(LayerNorm([z | e_v] W_g + b_g))` for every node: `[B, M, d]`.
pub fn gate<T: Scalar>(g: &mut Graph<T>, z: Var, e: Var, net: &GateNet) -> Result<Var> {
    check_pair(g, "gate", z, e)?;
    let m = g.shape(e)[1];
    let zr = replicate(g, z, m)?;
    let input = g.concat(&[zr, e], 2)?;
    let pre = g.matmul(input, net.weight)?;
    let pre = g.add(pre, net.bias)?;
    let n = g.layer_norm(pre, net.gain, net.norm_bias, LN_EPS)?;
    g.sigmoid(n)
}

/// `gamma * e + (1 - gamma) * z`, written so that `gamma = 1` returns `e`
/// and `gamma = 0` returns the replicated `z` exactly.
pub fn fuse<T: Scalar>(g: &mut Graph<T>, z: Var, e: Var, gamma: Var) -> Result<Var> {
    check_pair(g, "fuse", z, e)?;
    if g.shape(gamma) != g.shape(e) {
        return Err(Error::shape("fuse", format!("gamma {:?} vs E {:?}", g.shape(gamma), g.shape(e))));
    }
    let m = g.shape(e)[1];
    let zr = replicate(g, z, m)?;
    let semantic = g.mul(gamma, e)?;
    let rest = g.affine(gamma, -1.0, 1.0)?;
    let visual = g.mul(rest, zr)?;
    g.add(semantic, visual)
}

/// `[mean_v h_v | z] W_out + b_out`: `[B, |V|]`.
pub fn predict<T: Scalar>(g: &mut Graph<T>, nodes: Var, z: Var, head: &Head) -> Result<Var> {
    check_pair(g, "predict", z, nodes)?;
    let pooled = g.mean_axis(nodes, 1)?;
    let joint = g.concat(&[pooled, z], 1)?;
    let out = g.matmul(joint, head.weight)?;
    g.add(out, head.bias)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossRule {
    /// Exactly one positive at this index.
    CrossEntropy(usize),
    BinaryCrossEntropy,
}

pub fn row_rule<T: Scalar>(row: &[T]) -> LossRule {
    let positives: Vec<usize> = row
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != T::zero())
        .map(|(i, _)| i)
        .collect();
    match positives.as_slice() {
        [i] if row[*i] == T::one() => LossRule::CrossEntropy(*i),
        _ => LossRule::BinaryCrossEntropy,
    }
}

/// Batch mean of per-row losses for one level slice. `targets` is `[B, n]`
/// with 0/1 entries.
pub fn adaptive_level_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: &Tensor<T>) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s != targets.shape() {
        return Err(Error::shape(
            "adaptive_level_loss",
            format!("logits {s:?} vs targets {:?}", targets.shape()),
        ));
    }
    let (b, n) = (s[0], s[1]);
    let mut ce_mask = vec![T::zero(); b * n];
    let mut bce_weight = vec![T::zero(); b * n];
    let (mut any_ce, mut any_bce) = (false, false);
    for r in 0..b {
        match row_rule(&targets.data()[r * n..(r + 1) * n]) {
            LossRule::CrossEntropy(i) => {
                ce_mask[r * n + i] = T::one();
                any_ce = true;
            }
            LossRule::BinaryCrossEntropy => {
                bce_weight[r * n..(r + 1) * n].fill(T::of(1.0 / n as f64));
                any_bce = true;
            }
        }
    }
    let mut parts = Vec::new();
    if any_ce {
        let ls = g.log_softmax(logits)?;
        let mask = g.constant(Tensor::new(s.clone(), ce_mask)?)?;
        let picked = g.mul(ls, mask)?;
        let total = g.sum(picked)?;
        parts.push(g.scale(total, -1.0)?);
    }
    if any_bce {
        let bce = g.bce_with_logits(logits, targets)?;
        let w = g.constant(Tensor::new(s.clone(), bce_weight)?)?;
        let weighted = g.mul(bce, w)?;
        parts.push(g.sum(weighted)?);
    }
    let total = match parts.as_slice() {
        [one] => *one,
        [a, c] => g.add(*a, *c)?,
        _ => unreachable!("every row picks a rule"),
    };
    g.scale(total, 1.0 / b as f64)
}

/// Columns of `y: [B, |V|]` for `ids`.
pub fn select_columns<T: Scalar>(y: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    let s = y.shape();
    if s.len() != 2 || ids.iter().any(|&i| i >= s[1]) {
        return Err(Error::shape("select_columns", format!("{s:?} with ids {ids:?}")));
    }
    let mut out = Vec::with_capacity(s[0] * ids.len());
    for r in 0..s[0] {
        out.extend(ids.iter().map(|&i| y.data()[r * s[1] + i]));
    }
    Tensor::new(vec![s[0], ids.len()], out)
}

/// Unweighted mean of the adaptive loss over every level of `partition`.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &Tensor<T>,
    partition: &LevelPartition,
) -> Result<Var> {
    let width: usize = partition.levels.iter().map(Vec::len).sum();
    if g.shape(logits).len() != 2 || g.shape(logits)[1] != width || targets.shape() != g.shape(logits) {
        return Err(Error::shape(
            "total_loss",
            format!(
                "logits {:?}, targets {:?}, partition covers {width} nodes",
                g.shape(logits),
                targets.shape()
            ),
        ));
    }
    let mut sum: Option<Var> = None;
    for ids in &partition.levels {
        let lt = g.index_select(logits, 1, ids)?;
        let yt = select_columns(targets, ids)?;
        let l = adaptive_level_loss(g, lt, &yt)?;
        sum = Some(match sum {
            None => l,
            Some(acc) => g.add(acc, l)?,
        });
    }
    let sum = sum.ok_or_else(|| Error::InvalidArgument("partition has no levels".into()))?;
    g.scale(sum, 1.0 / partition.levels.len() as f64)
}

/// Flat-baseline objective: mean BCE over leaf logits.
pub fn flat_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, leaf_targets: &Tensor<T>) -> Result<Var> {
    let bce = g.bce_with_logits(logits, leaf_targets)?;
    g.mean(bce)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::fixtures;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    fn level_loss(logits: &[f64], y: &[f64], n: usize) -> f64 {
        let mut g = Graph::<f64>::new(false, 0);
        let b = logits.len() / n;
        let l = g.constant(t(&[b, n], logits)).unwrap();
        let out = adaptive_level_loss(&mut g, l, &t(&[b, n], y)).unwrap();
        g.value(out).item().unwrap()
    }

    #[test]
    fn loss_closed_forms() {
        let ln3 = 3f64.ln();
        let ln2 = 2f64.ln();
        assert!((level_loss(&[0.0; 3], &[0.0, 1.0, 0.0], 3) - ln3).abs() < 1e-12);
        assert!((level_loss(&[0.0; 3], &[1.0, 1.0, 0.0], 3) - ln2).abs() < 1e-12);
        assert!((level_loss(&[0.0; 2], &[0.0, 0.0], 2) - ln2).abs() < 1e-12);
        // mixed rows average by batch
        let mixed = level_loss(&[0.0; 6], &[0.0, 1.0, 0.0, 1.0, 1.0, 0.0], 3);
        assert!((mixed - (ln3 + ln2) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn total_is_mean_of_levels() {
        let h = crate::hierarchy::LabelHierarchy::from_yaml_str(
            "levels: 2\nnodes:\n  - {name: A, level: 1}\n  - {name: B, level: 1}\n  - {name: a1, level: 2, parents: [A]}\n  - {name: a2, level: 2, parents: [A]}\n  - {name: b1, level: 2, parents: [B]}\n",
        )
        .unwrap();
        let part = h.level_partition();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = random(&[2, 5], &mut rng);
        let y = t(&[2, 5], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let mut g = Graph::new(false, 0);
        let l = g.constant(logits.clone()).unwrap();
        let tot = total_loss(&mut g, l, &y, &part).unwrap();
        let got = g.value(tot).item().unwrap();
        let a = level_loss(&select_columns(&logits, &[0, 1]).unwrap().into_data(), &select_columns(&y, &[0, 1]).unwrap().into_data(), 2);
        let b = level_loss(&select_columns(&logits, &[2, 3, 4]).unwrap().into_data(), &select_columns(&y, &[2, 3, 4]).unwrap().into_data(), 3);
        assert!((got - (a + b) / 2.0).abs() < 1e-12);
    }

    /// Hand-rolled oracle: per level, per row, CE or mean BCE, then means.
    fn oracle(logits: &[f64], y: &[f64], n: usize, levels: &[Vec<usize>]) -> f64 {
        let b = logits.len() / n;
        let mut total = 0.0;
        for ids in levels {
            let mut level = 0.0;
            for r in 0..b {
                let x: Vec<f64> = ids.iter().map(|&i| logits[r * n + i]).collect();
                let t: Vec<f64> = ids.iter().map(|&i| y[r * n + i]).collect();
                let pos: f64 = t.iter().sum();
                level += if pos == 1.0 {
                    let k = t.iter().position(|&v| v == 1.0).unwrap();
                    let lse = x.iter().map(|v| v.exp()).sum::<f64>().ln();
                    lse - x[k]
                } else {
                    x.iter()
                        .zip(&t)
                        .map(|(&x, &t)| -(t * (1.0 / (1.0 + (-x).exp())).ln() + (1.0 - t) * (1.0 - 1.0 / (1.0 + (-x).exp())).ln()))
                        .sum::<f64>()
                        / x.len() as f64
                };
            }
            total += level / b as f64;
        }
        total / levels.len() as f64
    }

    #[test]
    fn aid_shaped_targets_match_oracle() {
        let h = fixtures::aid();
        let part = h.level_partition();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let names = [["ship", "trees"], ["cars", "sea"], ["court", "field"], ["tanks", "tanks"]];
        let mut y = Vec::new();
        for pair in names {
            let ids: Vec<usize> = pair.iter().map(|n| h.id_of(n).unwrap()).collect();
            let v = h.closed_vector(&ids).unwrap();
            y.extend(v.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }));
        }
        let y = t(&[4, 35], &y);
        let logits = random(&[4, 35], &mut rng);
        let mut g = Graph::new(false, 0);
        let l = g.constant(logits.clone()).unwrap();
        let tot = total_loss(&mut g, l, &y, &part).unwrap();
        let want = oracle(logits.data(), y.data(), 35, &part.levels);
        assert!((g.value(tot).item().unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = t(&[3, 4], &[0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let params: BTreeMap<String, Tensor<f64>> = [("x".to_string(), random(&[3, 4], &mut rng))].into();
        let r = crate::tensor::grad_check(&params, 1e-6, 0, false, |g, p| adaptive_level_loss(g, p["x"], &y)).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn gate_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = 4;
        let mut g = Graph::<f64>::new(false, 0);
        let z = g.constant(random(&[2, d], &mut rng)).unwrap();
        let e = g.constant(random(&[2, 3, d], &mut rng)).unwrap();
        let zero = GateNet {
            weight: g.constant(Tensor::zeros(&[2 * d, d])).unwrap(),
            bias: g.constant(Tensor::zeros(&[d])).unwrap(),
            gain: g.constant(Tensor::full(&[d], 1.0)).unwrap(),
            norm_bias: g.constant(Tensor::zeros(&[d])).unwrap(),
        };
        let gm = gate(&mut g, z, e, &zero).unwrap();
        assert!(g.value(gm).data().iter().all(|&v| v == 0.5));

        let net = GateNet {
            weight: g.constant(random(&[2 * d, d], &mut rng)).unwrap(),
            bias: g.constant(random(&[d], &mut rng)).unwrap(),
            gain: g.constant(random(&[d], &mut rng)).unwrap(),
            norm_bias: g.constant(random(&[d], &mut rng)).unwrap(),
        };
        let gm = gate(&mut g, z, e, &net).unwrap();
        let v = g.value(gm).data();
        assert!(v.iter().all(|&x| x > 0.0 && x < 1.0));
        assert_ne!(&v[0..d], &v[d..2 * d], "distinct nodes share a gate");
    }

    #[test]
    fn fusion_boundaries_and_convexity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let (b, m, d) = (2, 3, 4);
            let mut g = Graph::<f64>::new(false, 0);
            let zt = random(&[b, d], &mut rng);
            let et = random(&[b, m, d], &mut rng);
            let z = g.constant(zt.clone()).unwrap();
            let e = g.constant(et.clone()).unwrap();
            let ones = g.constant(Tensor::full(&[b, m, d], 1.0)).unwrap();
            let zeros = g.constant(Tensor::zeros(&[b, m, d])).unwrap();
            let f1 = fuse(&mut g, z, e, ones).unwrap();
            assert_eq!(g.value(f1), &et);
            let f0 = fuse(&mut g, z, e, zeros).unwrap();
            for (i, v) in g.value(f0).data().iter().enumerate() {
                let (bi, j) = (i / (m * d), i % d);
                assert_eq!(*v, zt.data()[bi * d + j]);
            }
            let gam = random(&[b, m, d], &mut rng).data().iter().map(|x| (x + 2.0) / 4.0).collect();
            let gam = g.constant(Tensor::new(vec![b, m, d], gam).unwrap()).unwrap();
            let f = fuse(&mut g, z, e, gam).unwrap();
            for (i, v) in g.value(f).data().iter().enumerate() {
                let (bi, j) = (i / (m * d), i % d);
                let (a, c) = (et.data()[i], zt.data()[bi * d + j]);
                assert!(*v >= a.min(c) - 1e-7 && *v <= a.max(c) + 1e-7);
            }
        }
    }

    #[test]
    fn predict_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (b, m, d, v) = (3, 35, 4, 35);
        let mut g = Graph::<f64>::new(false, 0);
        let ht = random(&[b, m, d], &mut rng);
        let zt = random(&[b, d], &mut rng);
        let wt = random(&[2 * d, v], &mut rng);
        let bt = random(&[v], &mut rng);
        let h = g.constant(ht.clone()).unwrap();
        let z = g.constant(zt.clone()).unwrap();
        let head = Head {
            weight: g.constant(wt.clone()).unwrap(),
            bias: g.constant(bt.clone()).unwrap(),
        };
        let out = predict(&mut g, h, z, &head).unwrap();
        assert_eq!(g.value(out).shape(), &[3, 35]);
        for bi in 0..b {
            let mut feat = vec![0.0; 2 * d];
            for node in 0..m {
                for j in 0..d {
                    feat[j] += ht.data()[(bi * m + node) * d + j] / m as f64;
                }
            }
            feat[d..].copy_from_slice(&zt.data()[bi * d..(bi + 1) * d]);
            for o in 0..v {
                let want = bt.data()[o] + (0..2 * d).map(|i| feat[i] * wt.data()[i * v + o]).sum::<f64>();
                assert!((g.value(out).data()[bi * v + o] - want).abs() < 1e-6);
            }
        }

        let zero_head = Head {
            weight: g.constant(Tensor::zeros(&[2 * d, v])).unwrap(),
            bias: head.bias,
        };
        let out = predict(&mut g, h, z, &zero_head).unwrap();
        for bi in 0..b {
            assert_eq!(&g.value(out).data()[bi * v..(bi + 1) * v], bt.data());
        }
    }

    #[test]
    fn row_rule_routing() {
        assert_eq!(row_rule(&[0.0, 1.0, 0.0]), LossRule::CrossEntropy(1));
        assert_eq!(row_rule(&[1.0, 1.0]), LossRule::BinaryCrossEntropy);
        assert_eq!(row_rule::<f64>(&[0.0, 0.0]), LossRule::BinaryCrossEntropy);
    }
}
