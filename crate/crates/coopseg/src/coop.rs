//! Cooperative model construction: the four method topologies and the
//! joint loss.
//!
//! A cooperative model trains two identically structured networks at once.
//! The *top* network always runs plain; one-directional connections send
//! its feature maps into the *bottom* network, which concatenates them onto
//! its own features. Both losses are summed and optimized in one step.
//!
//! Topologies:
//! - `Single` — one network, the baseline.
//! - `Ensemble` — two unconnected networks under the summed loss,
//!   predictions fused at eval time.
//! - `SameLayer` — each connected block of the bottom network also consumes
//!   the top network's feature from the identical position, doubling that
//!   block's in-channels.
//! - `MultiLayer` — several top taps (shallow to deep) are resized to a
//!   common spatial size, concatenated, and injected at one bottom block.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::segnet::{BlockKind, ChannelOverrides, NetError, NetPass, Network, NetworkSpec};
use crate::tensor::{self, Elem, Graph, LabelMap, Tensor, TensorError, TensorId};

#[derive(Debug, Error)]
pub enum CoopError {
    #[error("unknown tap {0:?}")]
    UnknownTap(String),
    #[error("multi-layer target {0:?} must not be the head block")]
    TargetIsHead(String),
    #[error("same-layer tap {0:?} listed twice")]
    DuplicateTap(String),
    #[error("multi-layer connection needs at least one source tap")]
    EmptySources,
    #[error("logits shapes differ: {a:?} vs {b:?}")]
    LogitsMismatch { a: Vec<usize>, b: Vec<usize> },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which of the four topologies to build.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SchemeKind {
    Single,
    Ensemble,
    SameLayer {
        taps: Vec<String>,
    },
    MultiLayer {
        sources: Vec<String>,
        target: String,
    },
}

/// Topology plus gradient-flow policy. With `detach_gradients` the bottom
/// loss stops at the connection instead of backpropagating into the top
/// network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectionScheme {
    pub kind: SchemeKind,
    pub detach_gradients: bool,
}

impl ConnectionScheme {
    pub fn single() -> Self {
        ConnectionScheme {
            kind: SchemeKind::Single,
            detach_gradients: false,
        }
    }

    pub fn ensemble() -> Self {
        ConnectionScheme {
            kind: SchemeKind::Ensemble,
            detach_gradients: false,
        }
    }

    pub fn same_layer(taps: Vec<String>) -> Self {
        ConnectionScheme {
            kind: SchemeKind::SameLayer { taps },
            detach_gradients: false,
        }
    }

    pub fn multi_layer(sources: Vec<String>, target: impl Into<String>) -> Self {
        ConnectionScheme {
            kind: SchemeKind::MultiLayer {
                sources,
                target: target.into(),
            },
            detach_gradients: false,
        }
    }

    pub fn with_detach(mut self, detach: bool) -> Self {
        self.detach_gradients = detach;
        self
    }

    /// CLI method tag: `single`, `ensemble`, `same`, or `multi`.
    pub fn method_name(&self) -> &'static str {
        match self.kind {
            SchemeKind::Single => "single",
            SchemeKind::Ensemble => "ensemble",
            SchemeKind::SameLayer { .. } => "same",
            SchemeKind::MultiLayer { .. } => "multi",
        }
    }

    pub fn is_two_network(&self) -> bool {
        !matches!(self.kind, SchemeKind::Single)
    }
}

/// Connection taps used by the bundled toy architecture. Two encoder-side
/// connections keep the loss2-into-top feedback loop well inside the
/// stable region of the bundled training protocol; wiring every conv block
/// makes the coupled system stall on some seeds.
pub fn default_same_taps() -> Vec<String> {
    ["enc2", "mid"].into_iter().map(String::from).collect()
}

/// Shallow-to-deep encoder taps feeding the first decoder conv of the
/// bundled toy architecture.
pub fn default_multi_wiring() -> (Vec<String>, String) {
    (
        ["enc1", "enc2", "mid"]
            .into_iter()
            .map(String::from)
            .collect(),
        "dec1".to_string(),
    )
}

/// Two (or one, for `Single`) instantiated networks under one scheme.
/// The bottom network carries the channel overrides the scheme mandates;
/// the two networks never share parameters.
#[derive(Debug, Clone)]
pub struct CoopModel {
    scheme: ConnectionScheme,
    top: Network,
    bottom: Option<Network>,
}

/// Ids produced by one forward pass of a [`CoopModel`].
#[derive(Debug)]
pub struct CoopForward {
    pub logits_top: TensorId,
    pub logits_bottom: Option<TensorId>,
    pub top_pass: NetPass,
    pub bottom_pass: Option<NetPass>,
}

/// The summed loss of one step. `total` is exactly `loss1 + loss2` (the
/// same scalar addition that produced the graph node); for single-network
/// models `loss2` is zero and `total` *is* the `loss1` node.
#[derive(Debug, Clone, Copy)]
pub struct JointLoss {
    pub loss1_id: TensorId,
    pub loss2_id: Option<TensorId>,
    pub total_id: TensorId,
    pub loss1: Elem,
    pub loss2: Elem,
    pub total: Elem,
}

/// Override table the scheme mandates for the bottom network.
fn bottom_overrides(spec: &NetworkSpec, kind: &SchemeKind) -> Result<ChannelOverrides, CoopError> {
    let mut overrides = ChannelOverrides::new();
    match kind {
        SchemeKind::Single | SchemeKind::Ensemble => {}
        SchemeKind::SameLayer { taps } => {
            for t in taps {
                let natural = spec
                    .natural_in_channels(t)
                    .map_err(|_| CoopError::UnknownTap(t.clone()))?;
                if overrides.insert(t.clone(), 2 * natural).is_some() {
                    return Err(CoopError::DuplicateTap(t.clone()));
                }
            }
        }
        SchemeKind::MultiLayer { sources, target } => {
            if sources.is_empty() {
                return Err(CoopError::EmptySources);
            }
            let target_idx = spec
                .block_index(target)
                .ok_or_else(|| CoopError::UnknownTap(target.clone()))?;
            if matches!(spec.blocks[target_idx].kind, BlockKind::Head { .. }) {
                return Err(CoopError::TargetIsHead(target.clone()));
            }
            let natural = spec.natural_in_channels(target)?;
            let mut extra = 0;
            for s in sources {
                extra += spec
                    .tap_channels(s)
                    .map_err(|_| CoopError::UnknownTap(s.clone()))?;
            }
            overrides.insert(target.clone(), natural + extra);
        }
    }
    Ok(overrides)
}

impl CoopModel {
    /// Instantiates the topology: top network from `seed1` (no overrides)
    /// and, unless `Single`, a bottom network from `seed2` with the
    /// override table the scheme mandates. Equal seeds are permitted but
    /// warned about: they defeat the point of differing initializations.
    pub fn build(
        spec: &NetworkSpec,
        scheme: ConnectionScheme,
        seed1: u64,
        seed2: u64,
    ) -> Result<Self, CoopError> {
        if scheme.is_two_network() && seed1 == seed2 {
            eprintln!(
                "warning: both networks seeded with {seed1}; their initial parameters will be identical"
            );
        }
        let overrides = bottom_overrides(spec, &scheme.kind)?;
        let top = Network::init(spec, &ChannelOverrides::new(), seed1)?;
        let bottom = if scheme.is_two_network() {
            Some(Network::init(spec, &overrides, seed2)?)
        } else {
            None
        };
        Ok(CoopModel {
            scheme,
            top,
            bottom,
        })
    }

    pub fn scheme(&self) -> &ConnectionScheme {
        &self.scheme
    }

    pub fn spec(&self) -> &NetworkSpec {
        self.top.spec()
    }

    pub fn top(&self) -> &Network {
        &self.top
    }

    pub fn top_mut(&mut self) -> &mut Network {
        &mut self.top
    }

    pub fn bottom(&self) -> Option<&Network> {
        self.bottom.as_ref()
    }

    pub fn bottom_mut(&mut self) -> Option<&mut Network> {
        self.bottom.as_mut()
    }

    pub fn param_count(&self) -> usize {
        self.top.param_count() + self.bottom.as_ref().map_or(0, |b| b.param_count())
    }

    /// Runs the topology forward. The top network always runs plain; the
    /// bottom network (when present) receives the scheme's injections,
    /// optionally detached from the top graph.
    pub fn forward(&self, g: &mut Graph, images: TensorId) -> Result<CoopForward, CoopError> {
        let top_pass = self.top.forward_with_taps(g, images, &BTreeMap::new())?;
        let spec = self.top.spec();
        let detach = self.scheme.detach_gradients;

        // The feature entering block `idx` of the top network: the
        // predecessor's tap, or the input image for the first block.
        let input_position = |pass: &NetPass, idx: usize| -> TensorId {
            if idx == 0 {
                images
            } else {
                pass.taps[&spec.blocks[idx - 1].name]
            }
        };

        let bottom_pass = match (&self.scheme.kind, &self.bottom) {
            (SchemeKind::Single, _) => None,
            (SchemeKind::Ensemble, Some(bottom)) => {
                Some(bottom.forward_with_taps(g, images, &BTreeMap::new())?)
            }
            (SchemeKind::SameLayer { taps }, Some(bottom)) => {
                let mut injections = BTreeMap::new();
                for t in taps {
                    let idx = spec
                        .block_index(t)
                        .ok_or_else(|| CoopError::UnknownTap(t.clone()))?;
                    let mut src = input_position(&top_pass, idx);
                    if detach {
                        src = g.detach(src);
                    }
                    injections.insert(t.clone(), src);
                }
                Some(bottom.forward_with_taps(g, images, &injections)?)
            }
            (SchemeKind::MultiLayer { sources, target }, Some(bottom)) => {
                let idx = spec
                    .block_index(target)
                    .ok_or_else(|| CoopError::UnknownTap(target.clone()))?;
                // Spatial size of the bottom's local feature at the target:
                // identical to the top's, since overrides only widen channels.
                let at = input_position(&top_pass, idx);
                let shape = g.shape(at);
                let (th, tw) = (shape[2], shape[3]);
                let mut agg = aggregate_source_taps(g, &top_pass.taps, sources, th, tw)?;
                if detach {
                    agg = g.detach(agg);
                }
                let mut injections = BTreeMap::new();
                injections.insert(target.clone(), agg);
                Some(bottom.forward_with_taps(g, images, &injections)?)
            }
            (_, None) => unreachable!("two-network scheme without a bottom network"),
        };

        Ok(CoopForward {
            logits_top: top_pass.logits,
            logits_bottom: bottom_pass.as_ref().map(|p| p.logits),
            top_pass,
            bottom_pass,
        })
    }

    /// Pulls this pass's leaf gradients into the persistent buffers of both
    /// networks.
    pub fn accumulate_grads(&mut self, g: &Graph, fwd: &CoopForward) {
        self.top.accumulate_grads(g, &fwd.top_pass);
        if let (Some(bottom), Some(pass)) = (self.bottom.as_mut(), fwd.bottom_pass.as_ref()) {
            bottom.accumulate_grads(g, pass);
        }
    }

    /// One momentum-SGD step over the union of top and bottom parameters.
    pub fn sgd_step(&mut self, lr: Elem, momentum: Elem) -> Result<(), TensorError> {
        tensor::sgd_step(self.top.params_mut(), lr, momentum)?;
        if let Some(bottom) = self.bottom.as_mut() {
            tensor::sgd_step(bottom.params_mut(), lr, momentum)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.top.zero_grads();
        if let Some(bottom) = self.bottom.as_mut() {
            bottom.zero_grads();
        }
    }
}

/// Resizes every source tap to `(target_h, target_w)` with bilinear
/// interpolation and concatenates them in listed order. Output channels are
/// the sum of the source channels.
pub fn aggregate_source_taps(
    g: &mut Graph,
    taps: &BTreeMap<String, TensorId>,
    sources: &[String],
    target_h: usize,
    target_w: usize,
) -> Result<TensorId, CoopError> {
    if sources.is_empty() {
        return Err(CoopError::EmptySources);
    }
    let mut resized = Vec::with_capacity(sources.len());
    for s in sources {
        let &id = taps
            .get(s)
            .ok_or_else(|| CoopError::UnknownTap(s.clone()))?;
        resized.push(g.upsample_bilinear(id, target_h, target_w)?);
    }
    let mut acc = resized[0];
    for &r in &resized[1..] {
        acc = g.concat_channels(acc, r)?;
    }
    Ok(acc)
}

/// `Loss = Loss1 + Loss2`: per-network softmax cross-entropy against the
/// same labels, summed. With no bottom logits, `loss2` is zero and `total`
/// is the `loss1` node itself.
pub fn joint_loss(
    g: &mut Graph,
    logits_top: TensorId,
    logits_bottom: Option<TensorId>,
    labels: &LabelMap,
) -> Result<JointLoss, CoopError> {
    let loss1_id = g.softmax_cross_entropy(logits_top, labels)?;
    let loss1 = g.tensor(loss1_id).scalar();
    match logits_bottom {
        None => Ok(JointLoss {
            loss1_id,
            loss2_id: None,
            total_id: loss1_id,
            loss1,
            loss2: 0.0,
            total: loss1,
        }),
        Some(lb) => {
            let loss2_id = g.softmax_cross_entropy(lb, labels)?;
            let loss2 = g.tensor(loss2_id).scalar();
            let total_id = g.add(loss1_id, loss2_id)?;
            let total = g.tensor(total_id).scalar();
            Ok(JointLoss {
                loss1_id,
                loss2_id: Some(loss2_id),
                total_id,
                loss1,
                loss2,
                total,
            })
        }
    }
}

/// Per-pixel mean of the two networks' softmax distributions.
pub fn ensemble_predict(logits_top: &Tensor, logits_bottom: &Tensor) -> Result<Tensor, CoopError> {
    if logits_top.shape() != logits_bottom.shape() {
        return Err(CoopError::LogitsMismatch {
            a: logits_top.shape().to_vec(),
            b: logits_bottom.shape().to_vec(),
        });
    }
    let (n, k, h, w) = logits_top.dims4()?;
    let hw = h * w;
    let plane = k * hw;
    let mut out = vec![0.0 as Elem; n * plane];
    let mut buf = vec![0.0 as Elem; k];
    for (x, scale) in [(logits_top, 0.5 as Elem), (logits_bottom, 0.5 as Elem)] {
        let data = x.data();
        for ni in 0..n {
            for p in 0..hw {
                let base = ni * plane + p;
                let mut m = Elem::NEG_INFINITY;
                for ki in 0..k {
                    m = m.max(data[base + ki * hw]);
                }
                let mut sum = 0.0 as Elem;
                for ki in 0..k {
                    let e = (data[base + ki * hw] - m).exp();
                    buf[ki] = e;
                    sum += e;
                }
                for ki in 0..k {
                    out[base + ki * hw] += scale * buf[ki] / sum;
                }
            }
        }
    }
    Ok(Tensor::new(vec![n, k, h, w], out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::default_spec;
    use rand::Rng;

    fn random_images(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = crate::rng::rng_from(seed);
        let data: Vec<Elem> = (0..n * c * h * w)
            .map(|_| rng.random_range(0.0f64..1.0) as Elem)
            .collect();
        Tensor::new(vec![n, c, h, w], data).unwrap()
    }

    fn random_labels(n: usize, h: usize, w: usize, k: usize, seed: u64) -> LabelMap {
        let mut rng = crate::rng::rng_from(seed);
        let data: Vec<u8> = (0..n * h * w)
            .map(|_| rng.random_range(0..k) as u8)
            .collect();
        LabelMap::new(vec![n, h, w], data).unwrap()
    }

    #[test]
    fn same_layer_override_doubles_natural_in_channels() {
        let spec = default_spec(3, 4);
        // enc2's natural in-channels is 16, so its receiving conv takes 32.
        let model = CoopModel::build(
            &spec,
            ConnectionScheme::same_layer(vec!["enc2".into()]),
            1,
            2,
        )
        .unwrap();
        let bottom = model.bottom().unwrap();
        assert_eq!(bottom.overrides()["enc2"], 32);
        let (w, _) = bottom.block_params("enc2").unwrap();
        assert_eq!(w.shape(), &[32, 32, 3, 3]);
    }

    #[test]
    fn single_has_one_network_worth_of_params() {
        let spec = default_spec(3, 4);
        let single = CoopModel::build(&spec, ConnectionScheme::single(), 1, 2).unwrap();
        let plain = Network::init(&spec, &ChannelOverrides::new(), 1).unwrap();
        assert!(single.bottom().is_none());
        assert_eq!(single.param_count(), plain.param_count());
    }

    #[test]
    fn multi_layer_override_sums_source_channels() {
        let spec = default_spec(3, 4);
        // Sources {enc1, enc2, mid} carry {16, 32, 64} channels; dec1's
        // natural in-count is 64, so the override is 64 + 112 = 176.
        let (sources, target) = default_multi_wiring();
        let model =
            CoopModel::build(&spec, ConnectionScheme::multi_layer(sources, target), 1, 2).unwrap();
        assert_eq!(model.bottom().unwrap().overrides()["dec1"], 176);

        // And the forward propagates shapes.
        let mut g = Graph::new();
        let img = g.leaf(random_images(1, 3, 16, 16, 5));
        let fwd = model.forward(&mut g, img).unwrap();
        assert_eq!(g.shape(fwd.logits_bottom.unwrap()), &[1, 4, 16, 16]);
    }

    #[test]
    fn scheme_validation_errors() {
        let spec = default_spec(3, 4);
        assert!(matches!(
            CoopModel::build(
                &spec,
                ConnectionScheme::same_layer(vec!["nope".into()]),
                1,
                2
            ),
            Err(CoopError::UnknownTap(_))
        ));
        assert!(matches!(
            CoopModel::build(
                &spec,
                ConnectionScheme::multi_layer(vec!["enc1".into()], "head"),
                1,
                2
            ),
            Err(CoopError::TargetIsHead(_))
        ));
        assert!(matches!(
            CoopModel::build(
                &spec,
                ConnectionScheme::multi_layer(Vec::new(), "dec1"),
                1,
                2
            ),
            Err(CoopError::EmptySources)
        ));
    }

    #[test]
    fn single_forward_has_no_bottom_logits() {
        let spec = default_spec(3, 4);
        let model = CoopModel::build(&spec, ConnectionScheme::single(), 1, 2).unwrap();
        let mut g = Graph::new();
        let img = g.leaf(random_images(2, 3, 16, 16, 3));
        let fwd = model.forward(&mut g, img).unwrap();
        assert!(fwd.logits_bottom.is_none());
    }

    #[test]
    fn ensemble_with_equal_seeds_gives_identical_logits() {
        let spec = default_spec(3, 4);
        let model = CoopModel::build(&spec, ConnectionScheme::ensemble(), 9, 9).unwrap();
        let mut g = Graph::new();
        let img = g.leaf(random_images(2, 3, 16, 16, 4));
        let fwd = model.forward(&mut g, img).unwrap();
        assert_eq!(g.value(fwd.logits_top), g.value(fwd.logits_bottom.unwrap()));
    }

    #[test]
    fn zero_weight_splice_reduces_to_plain_bottom() {
        // Zero the injected-channel weights of every receiving conv and the
        // cooperative bottom must match an unconnected bottom whose local
        // weights were copied over.
        let spec = default_spec(3, 4);
        let taps = default_same_taps();
        let mut same =
            CoopModel::build(&spec, ConnectionScheme::same_layer(taps.clone()), 11, 12).unwrap();
        let mut ens = CoopModel::build(&spec, ConnectionScheme::ensemble(), 11, 12).unwrap();

        let chain_nat: BTreeMap<String, usize> = spec
            .blocks
            .iter()
            .map(|b| (b.name.clone(), spec.natural_in_channels(&b.name).unwrap()))
            .collect();

        for block in &spec.blocks {
            let same_bottom = same.bottom_mut().unwrap();
            let Some((w_same, b_same)) = same_bottom.block_params_mut(&block.name) else {
                continue;
            };
            if taps.contains(&block.name) {
                let nat = chain_nat[&block.name];
                let shape = w_same.shape().to_vec();
                let (out, _eff, kh, kw) = (shape[0], shape[1], shape[2], shape[3]);
                // Zero the injected half, copy the local half into the
                // ensemble bottom.
                let mut local = vec![0.0 as Elem; out * nat * kh * kw];
                {
                    let data = w_same.value_mut().data_mut();
                    for o in 0..out {
                        for ci in 0..shape[1] {
                            for t in 0..kh * kw {
                                let idx = (o * shape[1] + ci) * kh * kw + t;
                                if ci < nat {
                                    local[(o * nat + ci) * kh * kw + t] = data[idx];
                                } else {
                                    data[idx] = 0.0;
                                }
                            }
                        }
                    }
                }
                let bias = b_same.value().data().to_vec();
                let ens_bottom = ens.bottom_mut().unwrap();
                let (w_ens, b_ens) = ens_bottom.block_params_mut(&block.name).unwrap();
                w_ens.value_mut().data_mut().copy_from_slice(&local);
                b_ens.value_mut().data_mut().copy_from_slice(&bias);
            } else {
                let w = w_same.value().data().to_vec();
                let b = b_same.value().data().to_vec();
                let ens_bottom = ens.bottom_mut().unwrap();
                let (w_ens, b_ens) = ens_bottom.block_params_mut(&block.name).unwrap();
                w_ens.value_mut().data_mut().copy_from_slice(&w);
                b_ens.value_mut().data_mut().copy_from_slice(&b);
            }
        }

        let img = random_images(2, 3, 16, 16, 99);
        let mut g1 = Graph::new();
        let i1 = g1.leaf(img.clone());
        let f1 = same.forward(&mut g1, i1).unwrap();
        let mut g2 = Graph::new();
        let i2 = g2.leaf(img);
        let f2 = ens.forward(&mut g2, i2).unwrap();
        let a = g1.value(f1.logits_bottom.unwrap());
        let b = g2.value(f2.logits_bottom.unwrap());
        let max_abs = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0 as Elem, Elem::max);
        assert!(max_abs <= 1e-6, "max abs diff {max_abs}");
    }

    #[test]
    fn aggregate_identity_and_channel_sum() {
        let spec = default_spec(3, 4);
        let net = Network::init(&spec, &ChannelOverrides::new(), 3).unwrap();
        let mut g = Graph::new();
        let img = g.leaf(random_images(1, 3, 16, 16, 8));
        let pass = net
            .forward_with_taps(&mut g, img, &BTreeMap::new())
            .unwrap();

        // Single source already at target size: output equals the tap.
        let dec1 = pass.taps["dec1"];
        let shape = g.shape(dec1).to_vec();
        let agg = aggregate_source_taps(
            &mut g,
            &pass.taps,
            &["dec1".to_string()],
            shape[2],
            shape[3],
        )
        .unwrap();
        assert_eq!(g.value(agg), g.value(dec1));

        // {enc1, enc2} carry {16, 32} channels -> 48 at the target size.
        let agg2 = aggregate_source_taps(
            &mut g,
            &pass.taps,
            &["enc1".to_string(), "enc2".to_string()],
            8,
            8,
        )
        .unwrap();
        assert_eq!(g.shape(agg2), &[1, 48, 8, 8]);
    }

    #[test]
    fn aggregate_preserves_constant_taps_across_scales() {
        let mut g = Graph::new();
        let mut taps = BTreeMap::new();
        taps.insert(
            "a".to_string(),
            g.leaf(Tensor::filled(vec![1, 2, 4, 4], 1.0)),
        );
        taps.insert(
            "b".to_string(),
            g.leaf(Tensor::filled(vec![1, 3, 8, 8], 2.0)),
        );
        let agg = aggregate_source_taps(&mut g, &taps, &["a".to_string(), "b".to_string()], 6, 6)
            .unwrap();
        let v = g.value(agg);
        assert_eq!(g.shape(agg), &[1, 5, 6, 6]);
        assert!(v[..2 * 36].iter().all(|&x| x == 1.0));
        assert!(v[2 * 36..].iter().all(|&x| x == 2.0));
    }

    #[test]
    fn joint_loss_is_exact_sum() {
        let spec = default_spec(3, 4);
        let model = CoopModel::build(&spec, ConnectionScheme::ensemble(), 1, 2).unwrap();
        let mut g = Graph::new();
        let img = g.leaf(random_images(2, 3, 16, 16, 6));
        let labels = random_labels(2, 16, 16, 4, 7);
        let fwd = model.forward(&mut g, img).unwrap();
        let jl = joint_loss(&mut g, fwd.logits_top, fwd.logits_bottom, &labels).unwrap();
        assert_eq!(jl.total - (jl.loss1 + jl.loss2), 0.0);
    }

    #[test]
    fn joint_loss_single_is_loss1() {
        let labels = LabelMap::new(vec![1, 2, 2], vec![0; 4]).unwrap();
        let mut g = Graph::new();
        let logits = g.leaf(random_images(1, 4, 2, 2, 10));
        let jl = joint_loss(&mut g, logits, None, &labels).unwrap();
        assert_eq!(jl.total, jl.loss1);
        assert_eq!(jl.loss2, 0.0);
        assert!(jl.loss2_id.is_none());
        assert_eq!(jl.total_id, jl.loss1_id);
    }

    #[test]
    fn joint_loss_uniform_logits_doubles_ln_k() {
        // Identical uniform logits from both nets at K=4: total = 2 ln 4.
        let labels = LabelMap::new(vec![1, 3, 3], vec![2; 9]).unwrap();
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(vec![1, 4, 3, 3]));
        let b = g.leaf(Tensor::zeros(vec![1, 4, 3, 3]));
        let jl = joint_loss(&mut g, a, Some(b), &labels).unwrap();
        let want = 2.0 * 4.0f64.ln();
        assert!((f64::from(jl.total) - want).abs() < 1e-5, "{}", jl.total);
    }

    #[test]
    fn ensemble_predict_of_equal_logits_is_softmax() {
        let logits = random_images(1, 4, 3, 3, 20);
        let p = ensemble_predict(&logits, &logits).unwrap();
        // Rows sum to one and match a directly computed softmax.
        let hw = 9;
        for pix in 0..hw {
            let mut sum = 0.0 as Elem;
            let mut direct = [0.0 as Elem; 4];
            let mut m = Elem::NEG_INFINITY;
            for k in 0..4 {
                m = m.max(logits.data()[k * hw + pix]);
            }
            let mut z = 0.0 as Elem;
            for k in 0..4 {
                direct[k] = (logits.data()[k * hw + pix] - m).exp();
                z += direct[k];
            }
            for k in 0..4 {
                let got = p.data()[k * hw + pix];
                sum += got;
                assert!((got - direct[k] / z).abs() < 1e-5);
            }
            assert!((sum - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn ensemble_predict_averages_saturated_one_hots() {
        let a = vec![40.0 as Elem, 0.0, 0.0]; // class 0 certain
        let b = vec![0.0 as Elem, 0.0, 40.0]; // class 2 certain
        let ta = Tensor::new(vec![1, 3, 1, 1], a).unwrap();
        let tb = Tensor::new(vec![1, 3, 1, 1], b).unwrap();
        let p = ensemble_predict(&ta, &tb).unwrap();
        assert!((p.data()[0] - 0.5).abs() < 1e-4);
        assert!((p.data()[2] - 0.5).abs() < 1e-4);
        assert!(p.data()[1] < 1e-4);
    }

    #[test]
    fn ensemble_predict_matches_direct_formula_on_random_pair() {
        let a = random_images(2, 5, 4, 4, 30);
        let b = random_images(2, 5, 4, 4, 31);
        let p = ensemble_predict(&a, &b).unwrap();
        let softmax = |x: &Tensor, n: usize, k: usize, pix: usize, hw: usize| -> Vec<f64> {
            let base = n * k * hw + pix;
            let vals: Vec<f64> = (0..k)
                .map(|ki| f64::from(x.data()[base + ki * hw]))
                .collect();
            let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = vals.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            exps.iter().map(|e| e / z).collect()
        };
        for n in 0..2 {
            for pix in 0..16 {
                let pa = softmax(&a, n, 5, pix, 16);
                let pb = softmax(&b, n, 5, pix, 16);
                for k in 0..5 {
                    let want = 0.5 * (pa[k] + pb[k]);
                    let got = f64::from(p.data()[(n * 5 + k) * 16 + pix]);
                    assert!((got - want).abs() < 1e-5);
                }
            }
        }

        let bad = random_images(2, 4, 4, 4, 32);
        assert!(matches!(
            ensemble_predict(&a, &bad),
            Err(CoopError::LogitsMismatch { .. })
        ));
    }

    #[test]
    fn same_layer_parameter_count_closed_form() {
        // SameLayer params = 2x single + extra-in * k*k * out at each
        // connected tap.
        let spec = default_spec(3, 4);
        let taps = default_same_taps();
        let single = Network::init(&spec, &ChannelOverrides::new(), 1).unwrap();
        let model =
            CoopModel::build(&spec, ConnectionScheme::same_layer(taps.clone()), 1, 2).unwrap();
        let mut extra = 0usize;
        for t in &taps {
            let natural = spec.natural_in_channels(t).unwrap();
            let out = spec.tap_channels(t).unwrap();
            extra += natural * 3 * 3 * out;
        }
        assert_eq!(model.param_count(), 2 * single.param_count() + extra);
    }
}
