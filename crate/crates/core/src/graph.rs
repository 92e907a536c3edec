//! Graph compiler: turns a [`DUNetConfig`] into an executable
//! [`ComputeGraph`] realizing stacked U-Nets (order 0) through fully dense
//! connectivity (order N−1).
//!
//! Each block is the bottleneck
//! `Concat → BN → ReLU → Conv1×1(→compress) → BN → ReLU → Conv3×3(→growth)`.
//! Within a U-Net, blocks exchange accumulated feature streams (the block's
//! input concat plus its new features), DenseNet style; across U-Nets a
//! block at semantic position (ℓ, side) receives the growth-width outputs
//! of the same position from its K nearest predecessors. Every U-Net ends
//! in a supervision head.

use std::collections::BTreeMap;
use std::fmt;

use crate::config::{BitWidth, DUNetConfig, Supervision, WeightMode};
use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Block-level structure (connectivity, dump, analysis)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Side {
    TopDown,
    BottomUp,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Side::TopDown => write!(f, "td"),
            Side::BottomUp => write!(f, "bu"),
        }
    }
}

/// Position of a block within its U-Net; blocks at the same position in
/// different U-Nets share semantic meaning (and shared buffers).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SemanticPosition {
    /// 1..=L; level ℓ operates at resolution R / 2^(ℓ−1).
    pub level: usize,
    pub side: Side,
}

impl fmt::Display for SemanticPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.side, self.level)
    }
}

/// The 2L semantic positions of an L-level U-Net, in dataflow order.
pub fn positions_for(levels: usize) -> Vec<SemanticPosition> {
    let mut v = Vec::with_capacity(2 * levels);
    for level in 1..=levels {
        v.push(SemanticPosition {
            level,
            side: Side::TopDown,
        });
    }
    for level in (1..=levels).rev() {
        v.push(SemanticPosition {
            level,
            side: Side::BottomUp,
        });
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum BlockRef {
    Stem,
    Block { unet: usize, pos: SemanticPosition },
    Head { unet: usize },
    /// Produces the input stream of `unet` from its predecessor.
    Transition { unet: usize },
    Refine,
}

impl fmt::Display for BlockRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockRef::Stem => write!(f, "stem"),
            BlockRef::Block { unet, pos } => write!(f, "u{unet}:{pos}"),
            BlockRef::Head { unet } => write!(f, "u{unet}:head"),
            BlockRef::Transition { unet } => write!(f, "u{unet}:trans"),
            BlockRef::Refine => write!(f, "refine"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EdgeKind {
    LocalSkip,
    CrossUnet,
    Downsample,
    Upsample,
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EdgeKind::LocalSkip => write!(f, "local-skip"),
            EdgeKind::CrossUnet => write!(f, "cross-unet"),
            EdgeKind::Downsample => write!(f, "downsample"),
            EdgeKind::Upsample => write!(f, "upsample"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct BlockEdge {
    pub src: BlockRef,
    pub dst: BlockRef,
    pub kind: EdgeKind,
}

/// All cross-U-Net edges of an (N, L, K) configuration: block (n, ℓ, side)
/// receives same-position features from U-Nets n−K..n−1, clipped at 0.
pub fn build_connectivity(num_unets: usize, levels: usize, order: usize) -> Result<Vec<BlockEdge>> {
    if num_unets == 0 {
        return Err(Error::InvalidArg("num_unets must be ≥ 1".into()));
    }
    if order + 1 > num_unets {
        return Err(Error::InvalidArg(format!(
            "order must satisfy 0 ≤ K ≤ N−1, got K={order} with N={num_unets}"
        )));
    }
    let mut edges = Vec::new();
    for n in 0..num_unets {
        let k = order.min(n);
        for pos in positions_for(levels) {
            for m in n - k..n {
                edges.push(BlockEdge {
                    src: BlockRef::Block { unet: m, pos },
                    dst: BlockRef::Block { unet: n, pos },
                    kind: EdgeKind::CrossUnet,
                });
            }
        }
    }
    Ok(edges)
}

// ---------------------------------------------------------------------------
// Op-level structure (what the engine executes)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SlotId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SharedRole {
    Concat,
    Bn,
}

/// Marks a slot as living in the pre-allocated buffer pair of a semantic
/// position (efficient mode only; naive mode ignores it).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SharedSlot {
    /// Index into [`ComputeGraph::positions`].
    pub position: usize,
    pub role: SharedRole,
}

#[derive(Debug, Clone)]
pub struct SlotInfo {
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Scaled by the batch size at execution time; false for scalar losses.
    pub per_sample: bool,
    pub shared: Option<SharedSlot>,
    /// Owning U-Net for per-U-Net breakdowns; None for stem/refine.
    pub unet: Option<usize>,
}

impl SlotInfo {
    pub fn chw(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn len(&self, batch: usize) -> usize {
        if self.per_sample {
            batch * self.chw()
        } else {
            self.chw()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    BnGamma,
    BnBeta,
    Bias,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Gaussian with fan-in scaling: N(0, 2/fan_in).
    HeNormal { fan_in: usize },
    One,
    Zero,
}

#[derive(Debug, Clone)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub kind: ParamKind,
    /// Weight quantizer attached to the consuming conv, if any.
    pub wquant: Option<WeightMode>,
}

impl ParamDecl {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Conv2d {
        stride: usize,
        pad: usize,
        weight: ParamId,
        bias: Option<ParamId>,
    },
    BatchNorm {
        gamma: ParamId,
        beta: ParamId,
    },
    Relu,
    MaxPool2,
    Upsample2,
    Concat,
    Add,
    GlobalAvgPool,
    /// Dataflow quantizer: k-bit linear map on activations in forward,
    /// gradient quantization and straight-through masking in backward.
    QuantAct {
        act_bits: Option<u32>,
        grad_bits: Option<u32>,
    },
    /// Mean squared error against the runtime target of head `head`.
    Loss {
        head: usize,
    },
}

#[derive(Debug, Clone)]
pub struct OpNode {
    pub kind: OpKind,
    pub inputs: Vec<SlotId>,
    pub output: SlotId,
    pub label: String,
}

#[derive(Debug, Clone)]
pub struct HeadInfo {
    pub unet: usize,
    /// 0 for the first forward pass, 1 for the iterative refinement pass.
    pub pass: usize,
    pub supervision: Supervision,
    pub heatmaps: SlotId,
    pub coords: Option<SlotId>,
    pub loss_slot: SlotId,
}

/// Compiled description of a DU-Net: immutable, freely shareable; all
/// execution state lives in the engine.
#[derive(Debug, Clone)]
pub struct ComputeGraph {
    pub config: DUNetConfig,
    /// The 2L semantic positions, dataflow order.
    pub positions: Vec<SemanticPosition>,
    /// Widest concat width (channels) per position across all U-Nets/passes.
    pub position_max_channels: Vec<usize>,
    pub slots: Vec<SlotInfo>,
    pub params: Vec<ParamDecl>,
    /// Topological order.
    pub ops: Vec<OpNode>,
    pub heads: Vec<HeadInfo>,
    pub block_edges: Vec<BlockEdge>,
    pub input_slot: SlotId,
    pub num_passes: usize,
    pub iterative_wrapped: bool,
}

impl ComputeGraph {
    /// Deterministic adjacency listing: one `src dst edge-type` line,
    /// lexicographically sorted.
    pub fn dump(&self) -> String {
        let mut lines: Vec<String> = self
            .block_edges
            .iter()
            .map(|e| format!("{} {} {}", e.src, e.dst, e.kind))
            .collect();
        lines.sort();
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    pub fn cross_edges(&self) -> Vec<BlockEdge> {
        self.block_edges
            .iter()
            .filter(|e| e.kind == EdgeKind::CrossUnet)
            .copied()
            .collect()
    }

    /// Trivial graph with no ops: forward returns its input unchanged.
    pub fn identity(channels: usize, height: usize, width: usize) -> Self {
        let cfg = DUNetConfig::default();
        ComputeGraph {
            config: cfg,
            positions: Vec::new(),
            position_max_channels: Vec::new(),
            slots: vec![SlotInfo {
                name: "input".into(),
                channels,
                height,
                width,
                per_sample: true,
                shared: None,
                unet: None,
            }],
            params: Vec::new(),
            ops: Vec::new(),
            heads: Vec::new(),
            block_edges: Vec::new(),
            input_slot: SlotId(0),
            num_passes: 1,
            iterative_wrapped: false,
        }
    }
}

// ---------------------------------------------------------------------------
// Compilation
// ---------------------------------------------------------------------------

/// Compile a config into a single-pass graph. Use [`wrap_iterative`] to add
/// the refinement pass when `config.iterative` is set.
pub fn compile(config: &DUNetConfig) -> Result<ComputeGraph> {
    config.validate()?;
    Builder::new(config.clone()).build(1)
}

/// Add the iterative-refinement wrapper: a refine block merges the stem
/// output with the last U-Net's pre-head features, and its output replaces
/// the stem input for a second full pass through the same weights. Both
/// passes' heads are supervised. No-op for non-iterative configs.
pub fn wrap_iterative(graph: ComputeGraph) -> Result<ComputeGraph> {
    if !graph.config.iterative {
        return Ok(graph);
    }
    if graph.iterative_wrapped {
        return Err(Error::InvalidArg(
            "wrap_iterative called twice on the same graph".into(),
        ));
    }
    Builder::new(graph.config.clone()).build(2)
}

/// Compile and, for iterative configs, wrap in one call.
pub fn compile_full(config: &DUNetConfig) -> Result<ComputeGraph> {
    wrap_iterative(compile(config)?)
}

struct Builder {
    cfg: DUNetConfig,
    slots: Vec<SlotInfo>,
    params: Vec<ParamDecl>,
    ops: Vec<OpNode>,
    heads: Vec<HeadInfo>,
    edges: Vec<BlockEdge>,
    registry: BTreeMap<String, ParamId>,
    positions: Vec<SemanticPosition>,
    position_max_channels: Vec<usize>,
    current_unet: Option<usize>,
}

/// A feature stream: an ordered list of channel segments at one resolution.
type Stream = Vec<SlotId>;

impl Builder {
    fn new(cfg: DUNetConfig) -> Self {
        let positions = positions_for(cfg.levels);
        let n_pos = positions.len();
        Builder {
            cfg,
            slots: Vec::new(),
            params: Vec::new(),
            ops: Vec::new(),
            heads: Vec::new(),
            edges: Vec::new(),
            registry: BTreeMap::new(),
            positions,
            position_max_channels: vec![0; n_pos],
            current_unet: None,
        }
    }

    fn slot(
        &mut self,
        name: String,
        channels: usize,
        height: usize,
        width: usize,
        shared: Option<SharedSlot>,
    ) -> SlotId {
        let id = SlotId(self.slots.len());
        self.slots.push(SlotInfo {
            name,
            channels,
            height,
            width,
            per_sample: true,
            shared,
            unet: self.current_unet,
        });
        id
    }

    fn scalar_slot(&mut self, name: String) -> SlotId {
        let id = SlotId(self.slots.len());
        self.slots.push(SlotInfo {
            name,
            channels: 1,
            height: 1,
            width: 1,
            per_sample: false,
            shared: None,
            unet: self.current_unet,
        });
        id
    }

    fn param(&mut self, key: &str, shape: Vec<usize>, init: Init, kind: ParamKind) -> ParamId {
        if let Some(&id) = self.registry.get(key) {
            return id;
        }
        let id = ParamId(self.params.len());
        self.params.push(ParamDecl {
            name: key.to_string(),
            shape,
            init,
            kind,
            wquant: None,
        });
        self.registry.insert(key.to_string(), id);
        id
    }

    fn push(&mut self, kind: OpKind, inputs: Vec<SlotId>, output: SlotId, label: String) {
        self.ops.push(OpNode {
            kind,
            inputs,
            output,
            label,
        });
    }

    fn ch(&self, s: SlotId) -> usize {
        self.slots[s.0].channels
    }

    fn hw(&self, s: SlotId) -> (usize, usize) {
        (self.slots[s.0].height, self.slots[s.0].width)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        key: &str,
        input: SlotId,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        with_bias: bool,
        quantizable: bool,
    ) -> SlotId {
        let in_ch = self.ch(input);
        let (h, w) = self.hw(input);
        let oh = (h + 2 * pad - kernel) / stride + 1;
        let ow = (w + 2 * pad - kernel) / stride + 1;
        let fan_in = in_ch * kernel * kernel;
        let weight = self.param(
            key,
            vec![out_ch, in_ch, kernel, kernel],
            Init::HeNormal { fan_in },
            ParamKind::ConvWeight,
        );
        if quantizable {
            if let (BitWidth::Bits(_), Some(mode)) = (self.cfg.quant.bit_w, self.cfg.quant.weight_mode)
            {
                self.params[weight.0].wquant = Some(mode);
            }
        }
        let bias = with_bias.then(|| {
            self.param(
                &format!("{key}.bias"),
                vec![out_ch],
                Init::Zero,
                ParamKind::Bias,
            )
        });
        let out = self.slot(format!("{key}.out"), out_ch, oh, ow, None);
        self.push(
            OpKind::Conv2d {
                stride,
                pad,
                weight,
                bias,
            },
            vec![input],
            out,
            key.to_string(),
        );
        out
    }

    fn bn(&mut self, key: &str, input: SlotId, shared: Option<SharedSlot>) -> SlotId {
        let c = self.ch(input);
        let (h, w) = self.hw(input);
        let gamma = self.param(&format!("{key}.gamma"), vec![c], Init::One, ParamKind::BnGamma);
        let beta = self.param(&format!("{key}.beta"), vec![c], Init::Zero, ParamKind::BnBeta);
        let out = self.slot(format!("{key}.out"), c, h, w, shared);
        self.push(OpKind::BatchNorm { gamma, beta }, vec![input], out, key.to_string());
        out
    }

    fn relu(&mut self, label: &str, input: SlotId) -> SlotId {
        let c = self.ch(input);
        let (h, w) = self.hw(input);
        let out = self.slot(format!("{label}.out"), c, h, w, None);
        self.push(OpKind::Relu, vec![input], out, label.to_string());
        out
    }

    fn pool2(&mut self, label: &str, input: SlotId) -> SlotId {
        let c = self.ch(input);
        let (h, w) = self.hw(input);
        let out = self.slot(format!("{label}.out"), c, h / 2, w / 2, None);
        self.push(OpKind::MaxPool2, vec![input], out, label.to_string());
        out
    }

    fn up2(&mut self, label: &str, input: SlotId) -> SlotId {
        let c = self.ch(input);
        let (h, w) = self.hw(input);
        let out = self.slot(format!("{label}.out"), c, 2 * h, 2 * w, None);
        self.push(OpKind::Upsample2, vec![input], out, label.to_string());
        out
    }

    fn concat(&mut self, label: &str, parts: &[SlotId], shared: Option<SharedSlot>) -> SlotId {
        let (h, w) = self.hw(parts[0]);
        let c: usize = parts.iter().map(|&p| self.ch(p)).sum();
        let out = self.slot(format!("{label}.out"), c, h, w, shared);
        self.push(OpKind::Concat, parts.to_vec(), out, label.to_string());
        out
    }

    fn add(&mut self, label: &str, a: SlotId, b: SlotId) -> SlotId {
        let c = self.ch(a);
        let (h, w) = self.hw(a);
        let out = self.slot(format!("{label}.out"), c, h, w, None);
        self.push(OpKind::Add, vec![a, b], out, label.to_string());
        out
    }

    /// Dataflow quantizer after a block output, when the scheme asks for it.
    fn quant_cut(&mut self, label: &str, input: SlotId) -> SlotId {
        let act = match self.cfg.quant.bit_i {
            BitWidth::Bits(b) => Some(b),
            BitWidth::Full => None,
        };
        let grad = match self.cfg.quant.bit_g {
            BitWidth::Bits(b) => Some(b),
            BitWidth::Full => None,
        };
        if act.is_none() && grad.is_none() {
            return input;
        }
        let c = self.ch(input);
        let (h, w) = self.hw(input);
        let out = self.slot(format!("{label}.out"), c, h, w, None);
        self.push(
            OpKind::QuantAct {
                act_bits: act,
                grad_bits: grad,
            },
            vec![input],
            out,
            label.to_string(),
        );
        out
    }

    /// The bottleneck unit shared by every block:
    /// Concat → BN → ReLU → Conv1×1(→compress) → BN → ReLU → Conv3×3(→growth).
    /// `position` links the concat/BN outputs to a shared-buffer pair.
    #[allow(clippy::too_many_arguments)]
    fn bottleneck(
        &mut self,
        key: &str,
        parts: &[SlotId],
        position: Option<usize>,
        compress: usize,
        growth: usize,
    ) -> SlotId {
        let cat = self.concat(
            &format!("{key}.concat"),
            parts,
            position.map(|p| SharedSlot {
                position: p,
                role: SharedRole::Concat,
            }),
        );
        if let Some(p) = position {
            let width = self.ch(cat);
            if width > self.position_max_channels[p] {
                self.position_max_channels[p] = width;
            }
        }
        let bn1 = self.bn(
            &format!("{key}.bn1"),
            cat,
            position.map(|p| SharedSlot {
                position: p,
                role: SharedRole::Bn,
            }),
        );
        let r1 = self.relu(&format!("{key}.relu1"), bn1);
        let c1 = self.conv(&format!("{key}.conv1"), r1, compress, 1, 1, 0, false, true);
        let bn2 = self.bn(&format!("{key}.bn2"), c1, None);
        let r2 = self.relu(&format!("{key}.relu2"), bn2);
        let out = self.conv(&format!("{key}.conv3"), r2, growth, 3, 1, 1, false, true);
        self.quant_cut(&format!("{key}.q"), out)
    }

    fn pos_index(&self, level: usize, side: Side) -> usize {
        self.positions
            .iter()
            .position(|p| p.level == level && p.side == side)
            .expect("semantic position exists")
    }

    fn build(mut self, passes: usize) -> Result<ComputeGraph> {
        let cfg = self.cfg.clone();
        let res = cfg.input_resolution;
        let img = cfg.image_resolution();

        // Stem: Conv 7×7 stride 2 → BN → ReLU → max-pool 2.
        let input = self.slot("input".into(), 3, img, img, None);
        let sc = self.conv("stem.conv", input, cfg.stem_channels, 7, 2, 3, false, false);
        let sb = self.bn("stem.bn", sc, None);
        let sr = self.relu("stem.relu", sb);
        let stem_out = self.pool2("stem.pool", sr);
        debug_assert_eq!(self.hw(stem_out), (res, res));

        let mut pass_input = vec![stem_out];
        let mut last_prehead: Option<SlotId> = None;

        for pass in 0..passes {
            let mut block_out: BTreeMap<(usize, usize, Side), SlotId> = BTreeMap::new();
            let mut v_n: Stream = pass_input.clone();
            for n in 0..cfg.num_unets {
                self.current_unet = Some(n);
                let tag = |s: &str| format!("u{n}.{s}");
                let kn = cfg.order.min(n);
                let supervision = if pass == 0 {
                    cfg.supervision
                } else {
                    cfg.supervision2.unwrap_or(cfg.supervision)
                };

                // --- top-down path ---
                let mut td_streams: Vec<Stream> = Vec::with_capacity(cfg.levels + 1);
                td_streams.push(Vec::new()); // level 0 placeholder
                for l in 1..=cfg.levels {
                    let local: Stream = if l == 1 {
                        v_n.clone()
                    } else {
                        let prev = td_streams[l - 1].clone();
                        prev.iter()
                            .enumerate()
                            .map(|(i, &p)| self.pool2(&tag(&format!("td{l}.pool{i}")), p))
                            .collect()
                    };
                    let mut parts = local.clone();
                    for m in n - kn..n {
                        parts.push(block_out[&(m, l, Side::TopDown)]);
                    }
                    let pos = self.pos_index(l, Side::TopDown);
                    let out = self.bottleneck(
                        &tag(&format!("td{l}")),
                        &parts,
                        Some(pos),
                        cfg.compress_channels,
                        cfg.growth_channels,
                    );
                    block_out.insert((n, l, Side::TopDown), out);
                    let mut stream = if cfg.legacy_sum_skip { Vec::new() } else { local };
                    stream.push(out);
                    td_streams.push(stream);
                    if pass == 0 {
                        self.record_td_edges(n, l);
                    }
                }

                // --- bottom-up path ---
                let mut bu_streams: Vec<Option<Stream>> = vec![None; cfg.levels + 2];
                for l in (1..=cfg.levels).rev() {
                    let local: Stream = if l == cfg.levels {
                        td_streams[l].clone()
                    } else {
                        let up: Stream = bu_streams[l + 1]
                            .as_ref()
                            .unwrap()
                            .clone()
                            .iter()
                            .enumerate()
                            .map(|(i, &p)| self.up2(&tag(&format!("bu{l}.up{i}")), p))
                            .collect();
                        if cfg.legacy_sum_skip {
                            // classic stacked form: summed skip, single segment
                            let skip = td_streams[l][0];
                            vec![self.add(&tag(&format!("bu{l}.sum")), up[0], skip)]
                        } else {
                            let mut s = up;
                            s.extend_from_slice(&td_streams[l]);
                            s
                        }
                    };
                    let mut parts = local.clone();
                    for m in n - kn..n {
                        parts.push(block_out[&(m, l, Side::BottomUp)]);
                    }
                    let pos = self.pos_index(l, Side::BottomUp);
                    let out = self.bottleneck(
                        &tag(&format!("bu{l}")),
                        &parts,
                        Some(pos),
                        cfg.compress_channels,
                        cfg.growth_channels,
                    );
                    block_out.insert((n, l, Side::BottomUp), out);
                    let mut stream = if cfg.legacy_sum_skip { Vec::new() } else { local };
                    stream.push(out);
                    bu_streams[l] = Some(stream);
                    if pass == 0 {
                        self.record_bu_edges(n, l, cfg.levels);
                    }
                }

                // --- head ---
                let final_stream = bu_streams[1].as_ref().unwrap().clone();
                let prehead = if final_stream.len() == 1 {
                    final_stream[0]
                } else {
                    self.concat(&tag("head.concat"), &final_stream, None)
                };
                let heat = self.conv(
                    &tag("head.det"),
                    prehead,
                    cfg.num_landmarks,
                    1,
                    1,
                    0,
                    true,
                    false,
                );
                let mut coords = None;
                if supervision == Supervision::Regression {
                    let c = self.ch(prehead);
                    let gap = self.slot(tag("head.gap.out"), c, 1, 1, None);
                    self.push(OpKind::GlobalAvgPool, vec![prehead], gap, tag("head.gap"));
                    coords = Some(self.conv(
                        &tag("head.reg"),
                        gap,
                        2 * cfg.num_landmarks,
                        1,
                        1,
                        0,
                        true,
                        false,
                    ));
                }
                let head_idx = self.heads.len();
                let loss_slot = self.scalar_slot(format!("u{n}.p{pass}.loss"));
                let pred = match supervision {
                    Supervision::Detection => heat,
                    Supervision::Regression => coords.unwrap(),
                };
                self.push(
                    OpKind::Loss { head: head_idx },
                    vec![pred],
                    loss_slot,
                    format!("u{n}.p{pass}.loss"),
                );
                self.heads.push(HeadInfo {
                    unet: n,
                    pass,
                    supervision,
                    heatmaps: heat,
                    coords,
                    loss_slot,
                });
                if pass == 0 {
                    self.edges.push(BlockEdge {
                        src: BlockRef::Block {
                            unet: n,
                            pos: SemanticPosition {
                                level: 1,
                                side: Side::BottomUp,
                            },
                        },
                        dst: BlockRef::Head { unet: n },
                        kind: EdgeKind::LocalSkip,
                    });
                }

                // --- transition into the next U-Net ---
                if n + 1 < cfg.num_unets {
                    let tcat = self.concat(&format!("u{}.trans.concat", n + 1), &[prehead, heat], None);
                    let v = self.conv(
                        &format!("u{}.trans", n + 1),
                        tcat,
                        cfg.stem_channels,
                        1,
                        1,
                        0,
                        false,
                        true,
                    );
                    v_n = vec![v];
                    if pass == 0 {
                        for (src, kind) in [
                            (
                                BlockRef::Block {
                                    unet: n,
                                    pos: SemanticPosition {
                                        level: 1,
                                        side: Side::BottomUp,
                                    },
                                },
                                EdgeKind::LocalSkip,
                            ),
                            (BlockRef::Head { unet: n }, EdgeKind::LocalSkip),
                        ] {
                            self.edges.push(BlockEdge {
                                src,
                                dst: BlockRef::Transition { unet: n + 1 },
                                kind,
                            });
                        }
                        self.edges.push(BlockEdge {
                            src: BlockRef::Transition { unet: n + 1 },
                            dst: BlockRef::Block {
                                unet: n + 1,
                                pos: SemanticPosition {
                                    level: 1,
                                    side: Side::TopDown,
                                },
                            },
                            kind: EdgeKind::LocalSkip,
                        });
                    }
                } else {
                    last_prehead = Some(prehead);
                }
                self.current_unet = None;
            }

            // --- iterative refinement: merge stem input with the last
            // U-Net's pre-head features, then run the same weights again ---
            if pass + 1 < passes {
                let prehead = last_prehead.expect("last U-Net emitted");
                let refine_compress = (3 * cfg.compress_channels).div_ceil(4);
                let refined = self.bottleneck(
                    "refine",
                    &[stem_out, prehead],
                    None,
                    refine_compress,
                    cfg.stem_channels,
                );
                pass_input = vec![refined];
                self.edges.push(BlockEdge {
                    src: BlockRef::Stem,
                    dst: BlockRef::Refine,
                    kind: EdgeKind::LocalSkip,
                });
                self.edges.push(BlockEdge {
                    src: BlockRef::Block {
                        unet: cfg.num_unets - 1,
                        pos: SemanticPosition {
                            level: 1,
                            side: Side::BottomUp,
                        },
                    },
                    dst: BlockRef::Refine,
                    kind: EdgeKind::LocalSkip,
                });
                self.edges.push(BlockEdge {
                    src: BlockRef::Refine,
                    dst: BlockRef::Block {
                        unet: 0,
                        pos: SemanticPosition {
                            level: 1,
                            side: Side::TopDown,
                        },
                    },
                    kind: EdgeKind::LocalSkip,
                });
            }
        }

        // stem feeds the first U-Net
        self.edges.push(BlockEdge {
            src: BlockRef::Stem,
            dst: BlockRef::Block {
                unet: 0,
                pos: SemanticPosition {
                    level: 1,
                    side: Side::TopDown,
                },
            },
            kind: EdgeKind::LocalSkip,
        });

        // cross-unet edges come from the connectivity builder
        let cross = build_connectivity(cfg.num_unets, cfg.levels, cfg.order)?;
        self.edges.extend(cross);

        if self.ops.is_empty() {
            return Err(Error::InvalidArg("compiled graph is empty".into()));
        }

        Ok(ComputeGraph {
            config: cfg,
            positions: self.positions,
            position_max_channels: self.position_max_channels,
            slots: self.slots,
            params: self.params,
            ops: self.ops,
            heads: self.heads,
            block_edges: self.edges,
            input_slot: SlotId(0),
            num_passes: passes,
            iterative_wrapped: passes > 1,
        })
    }

    fn record_td_edges(&mut self, n: usize, l: usize) {
        if l > 1 {
            self.edges.push(BlockEdge {
                src: BlockRef::Block {
                    unet: n,
                    pos: SemanticPosition {
                        level: l - 1,
                        side: Side::TopDown,
                    },
                },
                dst: BlockRef::Block {
                    unet: n,
                    pos: SemanticPosition {
                        level: l,
                        side: Side::TopDown,
                    },
                },
                kind: EdgeKind::Downsample,
            });
        }
    }

    fn record_bu_edges(&mut self, n: usize, l: usize, levels: usize) {
        let dst = BlockRef::Block {
            unet: n,
            pos: SemanticPosition {
                level: l,
                side: Side::BottomUp,
            },
        };
        // same-level skip from the top-down side
        self.edges.push(BlockEdge {
            src: BlockRef::Block {
                unet: n,
                pos: SemanticPosition {
                    level: l,
                    side: Side::TopDown,
                },
            },
            dst,
            kind: EdgeKind::LocalSkip,
        });
        if l < levels {
            self.edges.push(BlockEdge {
                src: BlockRef::Block {
                    unet: n,
                    pos: SemanticPosition {
                        level: l + 1,
                        side: Side::BottomUp,
                    },
                },
                dst,
                kind: EdgeKind::Upsample,
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, l: usize, k: usize) -> DUNetConfig {
        DUNetConfig {
            num_unets: n,
            levels: l,
            order: k,
            input_resolution: 1 << (l + 1),
            num_landmarks: 4,
            stem_channels: 16,
            compress_channels: 16,
            growth_channels: 8,
            ..DUNetConfig::default()
        }
    }

    /// Brute-force enumeration of the order-K pattern, independent of the
    /// production builder: every pair (m, n) with n−K ≤ m < n, per position.
    fn brute_force_cross_count(n: usize, l: usize, k: usize) -> usize {
        let mut count = 0;
        for dst in 0..n {
            for src in 0..n {
                if src < dst && dst - src <= k {
                    count += 2 * l;
                }
            }
        }
        count
    }

    #[test]
    fn connectivity_counts_match_brute_force() {
        // N=4, L=4, K=0 → 0 cross edges (pure stacking)
        assert_eq!(build_connectivity(4, 4, 0).unwrap().len(), 0);
        // N=3, L=4, K=1 → 2 connected pairs × 8 positions = 16
        assert_eq!(build_connectivity(3, 4, 1).unwrap().len(), 16);
        // N=3, L=4, K=2 → (1+2) pairs × 8 = 24
        assert_eq!(build_connectivity(3, 4, 2).unwrap().len(), 24);
        for n in 1..6 {
            for k in 0..n {
                for l in 1..4 {
                    assert_eq!(
                        build_connectivity(n, l, k).unwrap().len(),
                        brute_force_cross_count(n, l, k),
                        "N={n} L={l} K={k}"
                    );
                }
            }
        }
        assert!(build_connectivity(3, 4, 3).is_err());
    }

    #[test]
    fn order_monotonicity_and_dense_limit() {
        // cross-edge count nondecreasing in K; quadratic at K=N−1, linear at fixed K
        for n in [4usize, 8] {
            let l = 3;
            let mut prev = 0;
            for k in 0..n {
                let count = build_connectivity(n, l, k).unwrap().len();
                assert!(count >= prev);
                prev = count;
            }
            assert_eq!(prev, n * (n - 1) / 2 * 2 * l);
        }
        // fixed small K: (K·N − K(K+1)/2)·2L
        let (n, l, k) = (9usize, 4usize, 2usize);
        assert_eq!(
            build_connectivity(n, l, k).unwrap().len(),
            (k * n - k * (k + 1) / 2) * 2 * l
        );
    }

    #[test]
    fn compiled_cross_edges_match_connectivity() {
        let g = compile(&cfg(3, 2, 2)).unwrap();
        let mut compiled = g.cross_edges();
        let mut expected = build_connectivity(3, 2, 2).unwrap();
        compiled.sort();
        expected.sort();
        assert_eq!(compiled, expected);
    }

    #[test]
    fn single_unet_ignores_order() {
        // N=1 admits only K=0 and has no cross edges
        let g = compile(&cfg(1, 2, 0)).unwrap();
        assert!(g.cross_edges().is_empty());
        assert_eq!(g.heads.len(), 1);
    }

    #[test]
    fn deepest_bottom_up_block_inputs_follow_dense_transitions() {
        // N=2, L=1, K=1: the bottom-up block of U-Net 2 (index 1)
        // concatenates its local input stream (v), the same-level top-down
        // output, and the cross feature from U-Net 1 (index 0).
        let g = compile(&cfg(2, 1, 1)).unwrap();
        let op = g
            .ops
            .iter()
            .find(|o| o.label == "u1.bu1.concat")
            .expect("bottom-up concat of U-Net 1");
        assert_eq!(op.inputs.len(), 3, "local stream + own td + 1 cross");
        let names: Vec<&str> = op
            .inputs
            .iter()
            .map(|s| g.slots[s.0].name.as_str())
            .collect();
        // local stream segments: the U-Net input v and the own top-down
        // output; then the cross segment from U-Net 0
        assert_eq!(names[0], "u1.trans.out");
        assert!(names[1].starts_with("u1.td1"), "{names:?}");
        assert!(names[2].starts_with("u0.bu1"), "{names:?}");
    }

    #[test]
    fn order0_blocks_read_only_their_own_unet() {
        let g = compile(&cfg(3, 2, 0)).unwrap();
        for op in &g.ops {
            if let OpKind::Concat = op.kind {
                if !op.label.contains(".td") && !op.label.contains(".bu") {
                    continue;
                }
                let Some(unet) = op.label.strip_prefix('u').and_then(|r| {
                    r.split('.').next().and_then(|d| d.parse::<usize>().ok())
                }) else {
                    continue;
                };
                for inp in &op.inputs {
                    let name = &g.slots[inp.0].name;
                    if let Some(other) = name.strip_prefix('u').and_then(|r| {
                        r.split('.').next().and_then(|d| d.parse::<usize>().ok())
                    }) {
                        assert_eq!(
                            other, unet,
                            "order-0 block {} reads {}",
                            op.label, name
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn head_shapes_and_supervision_counts() {
        let g = compile(&cfg(4, 2, 1)).unwrap();
        assert_eq!(g.heads.len(), 4, "one supervised head per U-Net");
        let r = g.config.input_resolution;
        for h in &g.heads {
            let s = &g.slots[h.heatmaps.0];
            assert_eq!(
                (s.channels, s.height, s.width),
                (g.config.num_landmarks, r, r)
            );
        }
    }

    #[test]
    fn iterative_wrap_adds_refine_and_second_pass() {
        let mut c = cfg(2, 2, 1);
        c.iterative = true;
        c.supervision2 = Some(Supervision::Regression);
        let base = compile(&c).unwrap();
        let base_params: usize = base.params.iter().map(|p| p.len()).sum();
        let wrapped = wrap_iterative(base).unwrap();
        assert_eq!(wrapped.heads.len(), 4, "2 passes × 2 U-Nets");
        assert_eq!(wrapped.num_passes, 2);
        let wrapped_params: usize = wrapped.params.iter().map(|p| p.len()).sum();
        assert!(wrapped_params > base_params);
        // the increase is the refine block plus the pass-2 regression heads
        assert!(wrapped
            .params
            .iter()
            .any(|p| p.name.starts_with("refine.")));
        assert!(wrap_iterative(wrapped).is_err(), "wrapping twice must fail");

        // non-iterative wrap is a no-op
        let plain = compile(&cfg(2, 2, 1)).unwrap();
        let ops_before = plain.ops.len();
        let same = wrap_iterative(plain).unwrap();
        assert_eq!(same.ops.len(), ops_before);
    }

    #[test]
    fn dump_is_deterministic_and_sorted() {
        let a = compile(&cfg(2, 2, 1)).unwrap().dump();
        let b = compile(&cfg(2, 2, 1)).unwrap().dump();
        assert_eq!(a, b);
        let mut lines: Vec<&str> = a.lines().collect();
        let orig = lines.clone();
        lines.sort();
        assert_eq!(lines, orig);
        assert!(a.contains("stem u0:td1 local-skip"));
    }

    #[test]
    fn position_max_channels_track_widest_occupant() {
        let g = compile(&cfg(3, 2, 1)).unwrap();
        for (i, pos) in g.positions.iter().enumerate() {
            let max = g
                .ops
                .iter()
                .filter(|o| matches!(o.kind, OpKind::Concat))
                .filter(|o| {
                    g.slots[o.output.0]
                        .shared
                        .is_some_and(|s| s.position == i && s.role == SharedRole::Concat)
                })
                .map(|o| g.slots[o.output.0].channels)
                .max()
                .unwrap();
            assert_eq!(
                g.position_max_channels[i], max,
                "position {pos} widest occupant"
            );
        }
    }
}
