//! Declarative toy encoder-decoder segmentation network.
//!
//! A [`NetworkSpec`] is an ordered list of named blocks; every block output
//! is a *tap point* where features can be exported or injected. Injection
//! concatenates an external feature map onto the local feature right before
//! the named block consumes it, so a receiving conv sees
//! `local channels + injected channels` inputs — widened via a
//! [`ChannelOverrides`] table fixed at construction time.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::rng::{derive_seed, rng_from};
use crate::tensor::{Elem, Graph, Param, Tensor, TensorError, TensorId};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("duplicate tap name {0:?}")]
    DuplicateTap(String),
    #[error("spec must end with exactly one head block")]
    HeadMisplaced,
    #[error("unknown block {0:?}")]
    UnknownBlock(String),
    #[error("override for {block:?} is {given}, below the natural in-channel count {natural}")]
    OverrideTooSmall {
        block: String,
        given: usize,
        natural: usize,
    },
    #[error("in_channels must be >= 1 and num_classes >= 2, got {in_channels}/{num_classes}")]
    BadDimensions {
        in_channels: usize,
        num_classes: usize,
    },
    #[error("spec line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("block {block:?}: {source}")]
    Block { block: String, source: TensorError },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// What a block does. `ConvRelu` and `Head` carry parameters; `Head` is a
/// 1x1 conv producing class logits with no activation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BlockKind {
    ConvRelu {
        out_channels: usize,
        kernel: usize,
        padding: usize,
    },
    Pool {
        k: usize,
    },
    Upsample {
        factor: usize,
    },
    Head {
        num_classes: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpec {
    pub name: String,
    pub kind: BlockKind,
}

/// Widened in-channel counts for blocks that receive injected features,
/// keyed by block name.
pub type ChannelOverrides = BTreeMap<String, usize>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub blocks: Vec<BlockSpec>,
    pub in_channels: usize,
    pub num_classes: usize,
}

/// Channel bookkeeping for one block under a given override table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockChannels {
    pub natural_in: usize,
    pub effective_in: usize,
    pub out: usize,
}

impl NetworkSpec {
    /// Validates tap uniqueness, head placement, and dimension bounds.
    pub fn validate(&self) -> Result<(), NetError> {
        if self.in_channels < 1 || self.num_classes < 2 {
            return Err(NetError::BadDimensions {
                in_channels: self.in_channels,
                num_classes: self.num_classes,
            });
        }
        let mut seen = BTreeMap::new();
        for b in &self.blocks {
            if seen.insert(b.name.clone(), ()).is_some() {
                return Err(NetError::DuplicateTap(b.name.clone()));
            }
        }
        let heads = self
            .blocks
            .iter()
            .filter(|b| matches!(b.kind, BlockKind::Head { .. }))
            .count();
        let last_is_head = self
            .blocks
            .last()
            .is_some_and(|b| matches!(b.kind, BlockKind::Head { .. }));
        if heads != 1 || !last_is_head {
            return Err(NetError::HeadMisplaced);
        }
        Ok(())
    }

    pub fn block_index(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }

    /// Per-block channel chain under `overrides`. Checks that every
    /// override names a real block and never narrows below the natural
    /// in-channel count.
    pub fn channel_chain(
        &self,
        overrides: &ChannelOverrides,
    ) -> Result<Vec<BlockChannels>, NetError> {
        for name in overrides.keys() {
            if self.block_index(name).is_none() {
                return Err(NetError::UnknownBlock(name.clone()));
            }
        }
        let mut chain = Vec::with_capacity(self.blocks.len());
        let mut cur = self.in_channels;
        for b in &self.blocks {
            let natural_in = cur;
            let effective_in = match overrides.get(&b.name) {
                Some(&given) => {
                    if given < natural_in {
                        return Err(NetError::OverrideTooSmall {
                            block: b.name.clone(),
                            given,
                            natural: natural_in,
                        });
                    }
                    given
                }
                None => natural_in,
            };
            let out = match b.kind {
                BlockKind::ConvRelu { out_channels, .. } => out_channels,
                BlockKind::Pool { .. } | BlockKind::Upsample { .. } => effective_in,
                BlockKind::Head { num_classes } => num_classes,
            };
            chain.push(BlockChannels {
                natural_in,
                effective_in,
                out,
            });
            cur = out;
        }
        Ok(chain)
    }

    /// Out-channel count of the named tap (the block's output).
    pub fn tap_channels(&self, name: &str) -> Result<usize, NetError> {
        let idx = self
            .block_index(name)
            .ok_or_else(|| NetError::UnknownBlock(name.to_string()))?;
        let chain = self.channel_chain(&ChannelOverrides::new())?;
        Ok(chain[idx].out)
    }

    /// Natural in-channel count of the named block (what its local feature
    /// carries before any injection).
    pub fn natural_in_channels(&self, name: &str) -> Result<usize, NetError> {
        let idx = self
            .block_index(name)
            .ok_or_else(|| NetError::UnknownBlock(name.to_string()))?;
        let chain = self.channel_chain(&ChannelOverrides::new())?;
        Ok(chain[idx].natural_in)
    }

    /// Human-readable text form: header key-value lines, then one
    /// `name kind args` line per block.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "in_channels {}", self.in_channels);
        let _ = writeln!(s, "num_classes {}", self.num_classes);
        for b in &self.blocks {
            match b.kind {
                BlockKind::ConvRelu {
                    out_channels,
                    kernel,
                    padding,
                } => {
                    let _ = writeln!(s, "{} conv_relu {out_channels} {kernel} {padding}", b.name);
                }
                BlockKind::Pool { k } => {
                    let _ = writeln!(s, "{} pool {k}", b.name);
                }
                BlockKind::Upsample { factor } => {
                    let _ = writeln!(s, "{} upsample {factor}", b.name);
                }
                BlockKind::Head { num_classes } => {
                    let _ = writeln!(s, "{} head {num_classes}", b.name);
                }
            }
        }
        s
    }

    /// Parses the text form emitted by [`NetworkSpec::to_text`]. Blank
    /// lines and `#` comments are skipped.
    pub fn from_text(text: &str) -> Result<Self, NetError> {
        let mut in_channels = None;
        let mut num_classes = None;
        let mut blocks = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = trimmed.split_whitespace().collect();
            let parse = |s: &str| -> Result<usize, NetError> {
                s.parse().map_err(|_| NetError::Parse {
                    line,
                    message: format!("expected a number, got {s:?}"),
                })
            };
            match fields.as_slice() {
                ["in_channels", v] => in_channels = Some(parse(v)?),
                ["num_classes", v] => num_classes = Some(parse(v)?),
                [name, "conv_relu", oc, k, p] => blocks.push(BlockSpec {
                    name: (*name).to_string(),
                    kind: BlockKind::ConvRelu {
                        out_channels: parse(oc)?,
                        kernel: parse(k)?,
                        padding: parse(p)?,
                    },
                }),
                [name, "pool", k] => blocks.push(BlockSpec {
                    name: (*name).to_string(),
                    kind: BlockKind::Pool { k: parse(k)? },
                }),
                [name, "upsample", f] => blocks.push(BlockSpec {
                    name: (*name).to_string(),
                    kind: BlockKind::Upsample { factor: parse(f)? },
                }),
                [name, "head", k] => blocks.push(BlockSpec {
                    name: (*name).to_string(),
                    kind: BlockKind::Head {
                        num_classes: parse(k)?,
                    },
                }),
                _ => {
                    return Err(NetError::Parse {
                        line,
                        message: format!("unrecognized block line {trimmed:?}"),
                    })
                }
            }
        }
        let spec = NetworkSpec {
            blocks,
            in_channels: in_channels.ok_or(NetError::Parse {
                line: 0,
                message: "missing in_channels header".into(),
            })?,
            num_classes: num_classes.ok_or(NetError::Parse {
                line: 0,
                message: "missing num_classes header".into(),
            })?,
        };
        if let BlockKind::Head { num_classes } = spec
            .blocks
            .last()
            .ok_or(NetError::HeadMisplaced)?
            .kind
            .clone()
        {
            if num_classes != spec.num_classes {
                return Err(NetError::Parse {
                    line: 0,
                    message: format!(
                        "head classes {num_classes} disagree with num_classes {}",
                        spec.num_classes
                    ),
                });
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// The bundled reference architecture: two pool levels down, two upsample
/// levels back, 3x3 convs throughout, 1x1 head.
pub fn default_spec(in_channels: usize, num_classes: usize) -> NetworkSpec {
    let conv = |name: &str, out: usize| BlockSpec {
        name: name.to_string(),
        kind: BlockKind::ConvRelu {
            out_channels: out,
            kernel: 3,
            padding: 1,
        },
    };
    let spec = NetworkSpec {
        blocks: vec![
            conv("enc1", 16),
            BlockSpec {
                name: "pool1".into(),
                kind: BlockKind::Pool { k: 2 },
            },
            conv("enc2", 32),
            BlockSpec {
                name: "pool2".into(),
                kind: BlockKind::Pool { k: 2 },
            },
            conv("mid", 64),
            BlockSpec {
                name: "up1".into(),
                kind: BlockKind::Upsample { factor: 2 },
            },
            conv("dec1", 32),
            BlockSpec {
                name: "up2".into(),
                kind: BlockKind::Upsample { factor: 2 },
            },
            conv("dec2", 16),
            BlockSpec {
                name: "head".into(),
                kind: BlockKind::Head { num_classes },
            },
        ],
        in_channels,
        num_classes,
    };
    debug_assert!(spec.validate().is_ok());
    spec
}

/// One forward pass through a network: final logits, every tap output
/// (the network's own features, recorded before any injection that the
/// *next* block would consume), and the graph leaves its parameters were
/// copied to.
#[derive(Debug)]
pub struct NetPass {
    pub logits: TensorId,
    pub taps: BTreeMap<String, TensorId>,
    pub param_leaves: Vec<(usize, TensorId)>,
}

/// Instantiated network: spec, override table, and one weight/bias pair
/// per conv or head block.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    overrides: ChannelOverrides,
    params: Vec<Param>,
    /// Map block name -> (weight index, bias index) into `params`.
    param_index: BTreeMap<String, (usize, usize)>,
    seed: u64,
}

impl Network {
    /// Instantiates parameters for `spec` + `overrides`, deterministic in
    /// `seed`. Weights are He-initialized (zero-mean normal with stddev
    /// `sqrt(2 / fan_in)` where fan_in counts the block's actual, possibly
    /// widened, input taps); biases start at zero.
    pub fn init(
        spec: &NetworkSpec,
        overrides: &ChannelOverrides,
        seed: u64,
    ) -> Result<Self, NetError> {
        spec.validate()?;
        let chain = spec.channel_chain(overrides)?;
        let mut params = Vec::new();
        let mut param_index = BTreeMap::new();
        for (idx, (block, ch)) in spec.blocks.iter().zip(&chain).enumerate() {
            let (out, kernel) = match block.kind {
                BlockKind::ConvRelu {
                    out_channels,
                    kernel,
                    ..
                } => (out_channels, kernel),
                BlockKind::Head { num_classes } => (num_classes, 1),
                _ => continue,
            };
            let fan_in = ch.effective_in * kernel * kernel;
            let std = (2.0 / fan_in as f64).sqrt();
            let mut rng = rng_from(derive_seed(seed, idx as u64));
            let wdata: Vec<Elem> = (0..out * fan_in)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    (z * std) as Elem
                })
                .collect();
            let weight = Tensor::new(vec![out, ch.effective_in, kernel, kernel], wdata)?;
            let bias = Tensor::zeros(vec![out]);
            let w_idx = params.len();
            params.push(Param::new(format!("{}.weight", block.name), weight));
            params.push(Param::new(format!("{}.bias", block.name), bias));
            param_index.insert(block.name.clone(), (w_idx, w_idx + 1));
        }
        Ok(Network {
            spec: spec.clone(),
            overrides: overrides.clone(),
            params,
            param_index,
            seed,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn overrides(&self) -> &ChannelOverrides {
        &self.overrides
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn block_params(&self, name: &str) -> Option<(&Param, &Param)> {
        let &(w, b) = self.param_index.get(name)?;
        Some((&self.params[w], &self.params[b]))
    }

    pub fn block_params_mut(&mut self, name: &str) -> Option<(&mut Param, &mut Param)> {
        let &(w, b) = self.param_index.get(name)?;
        debug_assert_ne!(w, b);
        let (lo, hi) = self.params.split_at_mut(b);
        Some((&mut lo[w], &mut hi[0]))
    }

    /// Runs the blocks in order. Each entry of `injections` is
    /// channel-concatenated onto the local feature immediately before the
    /// named block consumes it (local channels first). Returns the logits
    /// plus every block's own output as a tap.
    pub fn forward_with_taps(
        &self,
        g: &mut Graph,
        input: TensorId,
        injections: &BTreeMap<String, TensorId>,
    ) -> Result<NetPass, NetError> {
        for name in injections.keys() {
            if self.spec.block_index(name).is_none() {
                return Err(NetError::UnknownBlock(name.clone()));
            }
        }
        let mut taps = BTreeMap::new();
        let mut param_leaves = Vec::new();
        let mut cur = input;
        for block in &self.spec.blocks {
            let ctx = |source: TensorError| NetError::Block {
                block: block.name.clone(),
                source,
            };
            if let Some(&inj) = injections.get(&block.name) {
                cur = g.concat_channels(cur, inj).map_err(ctx)?;
            }
            cur = match block.kind {
                BlockKind::ConvRelu { padding, .. } => {
                    let (w_idx, b_idx) = self.param_index[&block.name];
                    let w = g.leaf(self.params[w_idx].value().leaf_clone());
                    let b = g.leaf(self.params[b_idx].value().leaf_clone());
                    param_leaves.push((w_idx, w));
                    param_leaves.push((b_idx, b));
                    let conv = g.conv2d(cur, w, b, 1, padding).map_err(ctx)?;
                    g.relu(conv).map_err(ctx)?
                }
                BlockKind::Pool { k } => g.max_pool2d(cur, k).map_err(ctx)?,
                BlockKind::Upsample { factor } => {
                    let shape = g.shape(cur);
                    let (h, w) = (shape[2], shape[3]);
                    g.upsample_bilinear(cur, h * factor, w * factor)
                        .map_err(ctx)?
                }
                BlockKind::Head { .. } => {
                    let (w_idx, b_idx) = self.param_index[&block.name];
                    let w = g.leaf(self.params[w_idx].value().leaf_clone());
                    let b = g.leaf(self.params[b_idx].value().leaf_clone());
                    param_leaves.push((w_idx, w));
                    param_leaves.push((b_idx, b));
                    g.conv2d(cur, w, b, 1, 0).map_err(ctx)?
                }
            };
            taps.insert(block.name.clone(), cur);
        }
        Ok(NetPass {
            logits: cur,
            taps,
            param_leaves,
        })
    }

    /// Pulls the gradients of this pass's parameter leaves out of the graph
    /// and accumulates them onto the persistent parameter buffers.
    pub fn accumulate_grads(&mut self, g: &Graph, pass: &NetPass) {
        for &(idx, id) in &pass.param_leaves {
            if let Some(grad) = g.grad(id) {
                self.params[idx].accumulate_grad(grad);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }
}
