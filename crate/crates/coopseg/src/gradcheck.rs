//! Finite-difference gradient checks and gradient-isolation checks.
//!
//! Both suites are library functions so the CLI's `gradcheck` command, the
//! unit tests, and the acceptance suite all run the identical checks.
//!
//! The finite-difference oracle is central differences per input
//! coordinate against a scalarized loss (an inner product with a fixed
//! random probe, except for losses that are already scalar). Relative
//! error uses `|a - n| / max(1, |a|, |n|)` so tiny gradients are judged
//! absolutely and large ones relatively.

use std::collections::BTreeMap;

use rand::Rng;

use crate::coop::{
    default_multi_wiring, default_same_taps, joint_loss, ConnectionScheme, CoopError, CoopModel,
};
use crate::rng::rng_from;
use crate::segnet::{default_spec, BlockKind, BlockSpec, NetworkSpec};
use crate::tensor::{Elem, Graph, LabelMap, Tensor, TensorError, TensorId};

/// Finite-difference step size for the active build.
pub fn fd_epsilon() -> f64 {
    if cfg!(feature = "f64") {
        1e-5
    } else {
        1e-3
    }
}

/// Worst acceptable relative error for the active build.
pub fn fd_tolerance() -> f64 {
    if cfg!(feature = "f64") {
        1e-5
    } else {
        1e-2
    }
}

/// Result of checking one op's analytic gradients.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub op: String,
    pub worst_rel_error: f64,
    pub tolerance: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.worst_rel_error < self.tolerance
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1.0f64.max(a.abs()).max(n.abs())
}

fn random_tensor(shape: Vec<usize>, seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = rng_from(seed);
    let n: usize = shape.iter().product();
    let data: Vec<Elem> = (0..n).map(|_| rng.random_range(lo..hi) as Elem).collect();
    Tensor::new(shape, data).unwrap()
}

fn random_labels(shape: Vec<usize>, k: usize, seed: u64) -> LabelMap {
    let mut rng = rng_from(seed);
    let n: usize = shape.iter().product();
    let data: Vec<u8> = (0..n).map(|_| rng.random_range(0..k) as u8).collect();
    LabelMap::new(shape, data).unwrap()
}

type LossBuilder = dyn Fn(&mut Graph, &[TensorId]) -> Result<TensorId, TensorError>;

struct FdCase {
    name: &'static str,
    inputs: Vec<Tensor>,
    build: Box<LossBuilder>,
}

fn run_case(case: &FdCase, corrupt: bool) -> Result<OpCheck, TensorError> {
    // Analytic gradients.
    let mut g = Graph::new();
    let ids: Vec<TensorId> = case
        .inputs
        .iter()
        .map(|t| g.leaf(t.leaf_clone().with_requires_grad(true)))
        .collect();
    let loss = (case.build)(&mut g, &ids)?;
    g.backward(loss)?;
    let mut analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| g.grad(id).unwrap().iter().map(|&v| f64::from(v)).collect())
        .collect();
    if corrupt {
        // Test fixture: simulate a broken backward for this op.
        analytic[0][0] += 1.0;
    }

    // Central differences, one coordinate at a time.
    let eps = fd_epsilon();
    let eval = |inputs: &[Tensor]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let ids: Vec<TensorId> = inputs.iter().map(|t| g.leaf(t.leaf_clone())).collect();
        let loss = (case.build)(&mut g, &ids)?;
        Ok(f64::from(g.value(loss)[0]))
    };
    let mut worst = 0.0f64;
    for (i, input) in case.inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = case.inputs.clone();
            let mut minus = case.inputs.clone();
            let base = f64::from(input.data()[j]);
            let mut pd = input.data().to_vec();
            pd[j] = (base + eps) as Elem;
            plus[i] = Tensor::new(input.shape().to_vec(), pd)?;
            let mut md = input.data().to_vec();
            md[j] = (base - eps) as Elem;
            minus[i] = Tensor::new(input.shape().to_vec(), md)?;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
            worst = worst.max(rel_error(analytic[i][j], numeric));
        }
    }
    Ok(OpCheck {
        op: case.name.to_string(),
        worst_rel_error: worst,
        tolerance: fd_tolerance(),
    })
}

/// A small two-level encoder-decoder used by the composite check.
fn mini_spec() -> NetworkSpec {
    NetworkSpec {
        blocks: vec![
            BlockSpec {
                name: "enc".into(),
                kind: BlockKind::ConvRelu {
                    out_channels: 4,
                    kernel: 3,
                    padding: 1,
                },
            },
            BlockSpec {
                name: "pool".into(),
                kind: BlockKind::Pool { k: 2 },
            },
            BlockSpec {
                name: "mid".into(),
                kind: BlockKind::ConvRelu {
                    out_channels: 6,
                    kernel: 3,
                    padding: 1,
                },
            },
            BlockSpec {
                name: "up".into(),
                kind: BlockKind::Upsample { factor: 2 },
            },
            BlockSpec {
                name: "head".into(),
                kind: BlockKind::Head { num_classes: 3 },
            },
        ],
        in_channels: 2,
        num_classes: 3,
    }
}

fn cases() -> Vec<FdCase> {
    let mut cases = Vec::new();

    let probe_seed = 900;
    cases.push(FdCase {
        name: "conv2d",
        inputs: vec![
            random_tensor(vec![2, 3, 5, 5], 101, -1.0, 1.0),
            random_tensor(vec![4, 3, 3, 3], 102, -0.7, 0.7),
            random_tensor(vec![4], 103, -0.5, 0.5),
        ],
        build: Box::new(move |g, ids| {
            let y = g.conv2d(ids[0], ids[1], ids[2], 1, 1)?;
            let probe = g.leaf(random_tensor(vec![2, 4, 5, 5], probe_seed, -1.0, 1.0));
            g.dot(y, probe)
        }),
    });

    cases.push(FdCase {
        name: "conv2d_strided",
        inputs: vec![
            random_tensor(vec![1, 2, 7, 7], 111, -1.0, 1.0),
            random_tensor(vec![3, 2, 3, 3], 112, -0.7, 0.7),
            random_tensor(vec![3], 113, -0.5, 0.5),
        ],
        build: Box::new(move |g, ids| {
            let y = g.conv2d(ids[0], ids[1], ids[2], 2, 1)?;
            let probe = g.leaf(random_tensor(vec![1, 3, 4, 4], probe_seed + 1, -1.0, 1.0));
            g.dot(y, probe)
        }),
    });

    cases.push(FdCase {
        name: "relu",
        inputs: vec![random_tensor(vec![2, 3, 4, 4], 121, -1.0, 1.0)],
        build: Box::new(move |g, ids| {
            let y = g.relu(ids[0])?;
            let probe = g.leaf(random_tensor(vec![2, 3, 4, 4], probe_seed + 2, -1.0, 1.0));
            g.dot(y, probe)
        }),
    });

    cases.push(FdCase {
        name: "max_pool2d",
        inputs: vec![random_tensor(vec![1, 2, 4, 4], 131, -1.0, 1.0)],
        build: Box::new(move |g, ids| {
            let y = g.max_pool2d(ids[0], 2)?;
            let probe = g.leaf(random_tensor(vec![1, 2, 2, 2], probe_seed + 3, -1.0, 1.0));
            g.dot(y, probe)
        }),
    });

    cases.push(FdCase {
        name: "upsample_bilinear_up",
        inputs: vec![random_tensor(vec![1, 2, 3, 4], 141, -1.0, 1.0)],
        build: Box::new(move |g, ids| {
            let y = g.upsample_bilinear(ids[0], 5, 7)?;
            let probe = g.leaf(random_tensor(vec![1, 2, 5, 7], probe_seed + 4, -1.0, 1.0));
            g.dot(y, probe)
        }),
    });

    cases.push(FdCase {
        name: "upsample_bilinear_down",
        inputs: vec![random_tensor(vec![1, 2, 6, 5], 151, -1.0, 1.0)],
        build: Box::new(move |g, ids| {
            let y = g.upsample_bilinear(ids[0], 3, 2)?;
            let probe = g.leaf(random_tensor(vec![1, 2, 3, 2], probe_seed + 5, -1.0, 1.0));
            g.dot(y, probe)
        }),
    });

    cases.push(FdCase {
        name: "concat_channels",
        inputs: vec![
            random_tensor(vec![1, 2, 3, 3], 161, -1.0, 1.0),
            random_tensor(vec![1, 3, 3, 3], 162, -1.0, 1.0),
        ],
        build: Box::new(move |g, ids| {
            let y = g.concat_channels(ids[0], ids[1])?;
            let probe = g.leaf(random_tensor(vec![1, 5, 3, 3], probe_seed + 6, -1.0, 1.0));
            g.dot(y, probe)
        }),
    });

    let ce_labels = random_labels(vec![2, 3, 3], 4, 171);
    cases.push(FdCase {
        name: "softmax_cross_entropy",
        inputs: vec![random_tensor(vec![2, 4, 3, 3], 172, -1.0, 1.0)],
        build: Box::new(move |g, ids| g.softmax_cross_entropy(ids[0], &ce_labels)),
    });

    cases.push(FdCase {
        name: "add",
        inputs: vec![
            random_tensor(vec![2, 1, 2, 3], 181, -1.0, 1.0),
            random_tensor(vec![2, 1, 2, 3], 182, -1.0, 1.0),
        ],
        build: Box::new(move |g, ids| {
            let y = g.add(ids[0], ids[1])?;
            let probe = g.leaf(random_tensor(vec![2, 1, 2, 3], probe_seed + 7, -1.0, 1.0));
            g.dot(y, probe)
        }),
    });

    cases.push(FdCase {
        name: "sum",
        inputs: vec![random_tensor(vec![3, 2, 2, 2], 191, -1.0, 1.0)],
        build: Box::new(move |g, ids| g.sum(ids[0])),
    });

    // Composite: every parameter coordinate of a small network against the
    // cross-entropy loss of its forward pass.
    let spec = mini_spec();
    let net = crate::segnet::Network::init(&spec, &BTreeMap::new(), 33).unwrap();
    let param_tensors: Vec<Tensor> = net
        .params()
        .iter()
        .map(|p| p.value().leaf_clone())
        .collect();
    let images = random_tensor(vec![1, 2, 8, 8], 201, 0.0, 1.0);
    let labels = random_labels(vec![1, 8, 8], 3, 202);
    let spec_for_build = spec.clone();
    cases.push(FdCase {
        name: "network_composite",
        inputs: param_tensors,
        build: Box::new(move |g, ids| {
            // Rebuild the network forward from raw graph ops so the leaf
            // tensors under test are the parameters themselves.
            let img = g.leaf(images.leaf_clone());
            let mut cur = img;
            let mut next = 0usize;
            for block in &spec_for_build.blocks {
                match block.kind {
                    BlockKind::ConvRelu { padding, .. } => {
                        let conv = g.conv2d(cur, ids[next], ids[next + 1], 1, padding)?;
                        next += 2;
                        cur = g.relu(conv)?;
                    }
                    BlockKind::Pool { k } => cur = g.max_pool2d(cur, k)?,
                    BlockKind::Upsample { factor } => {
                        let (h, w) = {
                            let s = g.shape(cur);
                            (s[2], s[3])
                        };
                        cur = g.upsample_bilinear(cur, h * factor, w * factor)?;
                    }
                    BlockKind::Head { .. } => {
                        cur = g.conv2d(cur, ids[next], ids[next + 1], 1, 0)?;
                        next += 2;
                    }
                }
            }
            g.softmax_cross_entropy(cur, &labels)
        }),
    });

    cases
}

/// Directional-derivative check of the full cooperative path: perturb all
/// parameters of a two-network model along a random direction and compare
/// the finite difference of the joint loss against the inner product with
/// the analytic gradient. This exercises `coop_forward`, the injections,
/// and the gradient accumulation exactly as training uses them.
fn coop_directional_case(corrupt: bool) -> Result<OpCheck, TensorError> {
    let spec = mini_spec();
    let scheme = ConnectionScheme::same_layer(vec!["mid".into()]);
    let base = CoopModel::build(&spec, scheme, 61, 62).expect("valid bundled wiring");
    let images = random_tensor(vec![2, 2, 8, 8], 301, 0.0, 1.0);
    let labels = random_labels(vec![2, 8, 8], 3, 302);

    let loss_of = |model: &CoopModel| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let img = g.leaf(images.leaf_clone());
        let fwd = model.forward(&mut g, img).expect("shapes fixed by construction");
        let jl = crate::coop::joint_loss(&mut g, fwd.logits_top, fwd.logits_bottom, &labels)
            .expect("labels fixed by construction");
        Ok(f64::from(jl.total))
    };

    // Analytic gradient, accumulated the way the trainer does it.
    let mut model = base.clone();
    let mut g = Graph::new();
    let img = g.leaf(images.leaf_clone());
    let fwd = model.forward(&mut g, img).expect("shapes fixed by construction");
    let jl = crate::coop::joint_loss(&mut g, fwd.logits_top, fwd.logits_bottom, &labels)
        .expect("labels fixed by construction");
    g.backward(jl.total_id)?;
    model.accumulate_grads(&g, &fwd);

    let eps = fd_epsilon();
    let mut worst = 0.0f64;
    for dir_seed in 0..3u64 {
        // Random unit-scale direction over every parameter of both nets.
        let mut rng = rng_from(400 + dir_seed);
        let direction: Vec<Vec<f64>> = model
            .top()
            .params()
            .iter()
            .chain(model.bottom().unwrap().params())
            .map(|p| (0..p.numel()).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();

        let mut analytic = 0.0f64;
        for (p, d) in model
            .top()
            .params()
            .iter()
            .chain(model.bottom().unwrap().params())
            .zip(&direction)
        {
            for (&g, &dv) in p.grad().expect("populated").iter().zip(d) {
                analytic += f64::from(g) * dv;
            }
        }
        if corrupt {
            analytic += 1.0;
        }

        let shifted = |sign: f64| -> Result<f64, TensorError> {
            let mut m = base.clone();
            let mut di = direction.iter();
            for p in m.top_mut().params_mut() {
                let d = di.next().unwrap();
                for (v, &dv) in p.value_mut().data_mut().iter_mut().zip(d) {
                    *v += (sign * eps * dv) as Elem;
                }
            }
            for p in m.bottom_mut().unwrap().params_mut() {
                let d = di.next().unwrap();
                for (v, &dv) in p.value_mut().data_mut().iter_mut().zip(d) {
                    *v += (sign * eps * dv) as Elem;
                }
            }
            loss_of(&m)
        };
        let numeric = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * eps);
        worst = worst.max(rel_error(analytic, numeric));
    }
    Ok(OpCheck {
        op: "coop_joint_loss".to_string(),
        worst_rel_error: worst,
        tolerance: fd_tolerance(),
    })
}

/// Runs central finite differences over every op. `corrupt_op`, when set to
/// a case name, deliberately perturbs that case's analytic gradient — a
/// negative-control fixture for the CLI's failure path.
pub fn finite_difference_suite(corrupt_op: Option<&str>) -> Result<Vec<OpCheck>, TensorError> {
    let mut checks: Vec<OpCheck> = cases()
        .iter()
        .map(|case| run_case(case, corrupt_op == Some(case.name)))
        .collect::<Result<_, _>>()?;
    checks.push(coop_directional_case(corrupt_op == Some("coop_joint_loss"))?);
    Ok(checks)
}

/// One directionality check of the connection for a scheme/detach pair.
#[derive(Debug, Clone)]
pub struct IsolationCheck {
    pub method: &'static str,
    pub detach: bool,
    /// L2 norm of d(loss1)/d(bottom parameters); must be exactly zero.
    pub loss1_grad_bottom_norm: Option<f64>,
    /// L2 norm of d(loss2)/d(top parameters).
    pub loss2_grad_top_norm: Option<f64>,
    pub passed: bool,
    pub rule: &'static str,
}

fn grad_norm(g: &Graph, leaves: &[(usize, TensorId)]) -> f64 {
    let mut acc = 0.0f64;
    for &(_, id) in leaves {
        if let Some(grad) = g.grad(id) {
            for &v in grad {
                acc += f64::from(v) * f64::from(v);
            }
        }
    }
    acc.sqrt()
}

fn isolation_for(scheme: ConnectionScheme) -> Result<IsolationCheck, CoopError> {
    let spec = default_spec(3, 4);
    let method = scheme.method_name();
    let detach = scheme.detach_gradients;
    let model = CoopModel::build(&spec, scheme, 21, 22)?;
    let images = random_tensor(vec![2, 3, 16, 16], 210, 0.0, 1.0);
    let labels = random_labels(vec![2, 16, 16], 4, 211);

    // Pass A: backward from loss1 alone; bottom gradients must be zero.
    let mut g1 = Graph::new();
    let img1 = g1.leaf(images.leaf_clone());
    let fwd1 = model.forward(&mut g1, img1)?;
    let jl1 = joint_loss(&mut g1, fwd1.logits_top, fwd1.logits_bottom, &labels)?;
    g1.backward(jl1.loss1_id).map_err(CoopError::Tensor)?;
    let loss1_grad_bottom_norm = fwd1
        .bottom_pass
        .as_ref()
        .map(|p| grad_norm(&g1, &p.param_leaves));

    // Pass B: backward from loss2 alone; measure gradient into the top.
    let loss2_grad_top_norm = if model.bottom().is_some() {
        let mut g2 = Graph::new();
        let img2 = g2.leaf(images.leaf_clone());
        let fwd2 = model.forward(&mut g2, img2)?;
        let jl2 = joint_loss(&mut g2, fwd2.logits_top, fwd2.logits_bottom, &labels)?;
        let loss2_id = jl2.loss2_id.expect("two-network scheme has loss2");
        g2.backward(loss2_id).map_err(CoopError::Tensor)?;
        Some(grad_norm(&g2, &fwd2.top_pass.param_leaves))
    } else {
        None
    };

    let (passed, rule) = match (method, detach) {
        ("single", _) => (
            loss1_grad_bottom_norm.is_none() && loss2_grad_top_norm.is_none(),
            "single network has no bottom gradients at all",
        ),
        ("ensemble", _) => (
            loss1_grad_bottom_norm == Some(0.0) && loss2_grad_top_norm == Some(0.0),
            "ensemble: both cross-network gradients exactly zero",
        ),
        (_, false) => (
            loss1_grad_bottom_norm == Some(0.0) && loss2_grad_top_norm.is_some_and(|n| n > 0.0),
            "connected: loss1 never reaches the bottom; loss2 couples into the top",
        ),
        (_, true) => (
            loss1_grad_bottom_norm == Some(0.0) && loss2_grad_top_norm == Some(0.0),
            "detached: the connection carries values but no gradients",
        ),
    };
    Ok(IsolationCheck {
        method,
        detach,
        loss1_grad_bottom_norm,
        loss2_grad_top_norm,
        passed,
        rule,
    })
}

/// Directionality checks for all four schemes, cooperative ones with the
/// connection gradient both on and off.
pub fn isolation_suite() -> Result<Vec<IsolationCheck>, CoopError> {
    let (sources, target) = default_multi_wiring();
    let mut checks = vec![
        isolation_for(ConnectionScheme::single())?,
        isolation_for(ConnectionScheme::ensemble())?,
    ];
    for detach in [false, true] {
        checks.push(isolation_for(
            ConnectionScheme::same_layer(default_same_taps()).with_detach(detach),
        )?);
        checks.push(isolation_for(
            ConnectionScheme::multi_layer(sources.clone(), target.clone()).with_detach(detach),
        )?);
    }
    Ok(checks)
}
