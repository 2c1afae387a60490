//! Network architecture IR.
//!
//! A network is a list of convolutional blocks connected through `prev`
//! links. Every block carries an explicit `stage` index; the stage ordering
//! is the analysis sequence used by the statistics and the planner. Pooling,
//! normalisation and activation layers are not modelled: an edge between two
//! blocks abstracts whatever non-parametric layers sit between them.
//!
//! Text format, one block per line:
//!
//! ```text
//! # comment
//! meta last_unit_stages=2
//! block conv1 in=3 out=64 k=3x3 group=1 stage=0
//! block conv2 in=64 out=128 k=3x3 group=2 stage=1 bias prev=conv1
//! ```
//!
//! Optional block flags are `bias`, `excluded` (or `excluded=true|false`)
//! and `prev=a,b,...`. A block whose `excluded` flag is absent is excluded
//! automatically when it sits in the first stage, the last stage, or one of
//! the trailing `last_unit_stages` stages (default 1), which is how the last
//! inception unit of an inception-style network is marked.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use thiserror::Error;

/// Metadata key holding the number of trailing stages that form the last
/// unit of the network; all of them are excluded from refinement.
pub const LAST_UNIT_STAGES_KEY: &str = "last_unit_stages";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IrError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("network has no blocks")]
    Empty,
    #[error("duplicate block name `{0}`")]
    DuplicateBlock(String),
    #[error("block `{block}`: field `{field}` must be positive")]
    ZeroField { block: String, field: &'static str },
    #[error("block `{block}` lists unknown predecessor `{prev}`")]
    UnknownPredecessor { block: String, prev: String },
    #[error("cycle detected through block `{0}`")]
    Cycle(String),
    #[error("block `{block}` (stage {stage}) has predecessor `{prev}` at stage {prev_stage}; predecessors must sit in earlier stages")]
    StageOrder { block: String, stage: u32, prev: String, prev_stage: u32 },
    #[error("stage {0} is empty; stage indices must be contiguous from 0")]
    StageGap(u32),
    #[error("block `{0}` is in stage 0 but lists predecessors")]
    InputWithPredecessor(String),
    #[error("block `{0}` is past stage 0 but lists no predecessors")]
    MissingPredecessor(String),
    #[error("block `{block}`: in_channels={found} but predecessors supply {expected}")]
    ChannelMismatch { block: String, expected: u64, found: u32 },
    #[error("block `{block}`: group {group} does not divide {what} ({channels})")]
    GroupDivisibility { block: String, group: u32, what: String, channels: u32 },
    #[error("invalid metadata `{key}`: {message}")]
    Metadata { key: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvBlock {
    pub name: String,
    pub in_channels: u32,
    /// Number of hidden units produced by the block.
    pub out_channels: u32,
    pub kernel_h: u32,
    pub kernel_w: u32,
    /// Symmetric-split factor on this block's inputs (grouped convolution).
    pub group: u32,
    pub has_bias: bool,
    pub stage: u32,
    pub excluded: bool,
    /// Producers feeding this block, in concatenation order.
    pub prev: Vec<String>,
}

impl ConvBlock {
    pub fn new(name: impl Into<String>, in_channels: u32, out_channels: u32, kernel: (u32, u32), stage: u32) -> Self {
        Self {
            name: name.into(),
            in_channels,
            out_channels,
            kernel_h: kernel.0,
            kernel_w: kernel.1,
            group: 1,
            has_bias: false,
            stage,
            excluded: false,
            prev: Vec::new(),
        }
    }

    pub fn with_group(mut self, group: u32) -> Self {
        self.group = group;
        self
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn with_prev<S: Into<String>>(mut self, prev: impl IntoIterator<Item = S>) -> Self {
        self.prev = prev.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_excluded(mut self, excluded: bool) -> Self {
        self.excluded = excluded;
        self
    }

    /// Weight (+ bias) count of this block.
    pub fn params(&self) -> u64 {
        let per_filter = u64::from(self.in_channels / self.group) * u64::from(self.kernel_h) * u64::from(self.kernel_w);
        let weights = per_filter * u64::from(self.out_channels);
        weights + if self.has_bias { u64::from(self.out_channels) } else { 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NetworkIR {
    pub blocks: Vec<ConvBlock>,
    pub metadata: BTreeMap<String, String>,
}

impl NetworkIR {
    /// Builds an IR and validates it.
    pub fn new(blocks: Vec<ConvBlock>, metadata: BTreeMap<String, String>) -> Result<Self, IrError> {
        let ir = Self { blocks, metadata };
        ir.validate()?;
        Ok(ir)
    }

    pub fn block(&self, name: &str) -> Option<&ConvBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn block_index(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }

    /// Number of populated stages (`max stage + 1`).
    pub fn num_stages(&self) -> u32 {
        self.blocks.iter().map(|b| b.stage + 1).max().unwrap_or(0)
    }

    /// `(producer, consumer)` pairs.
    pub fn edges(&self) -> Vec<(String, String)> {
        self.blocks
            .iter()
            .flat_map(|b| b.prev.iter().map(move |p| (p.clone(), b.name.clone())))
            .collect()
    }

    /// Names of blocks that list `name` as a predecessor.
    pub fn consumers(&self, name: &str) -> Vec<&ConvBlock> {
        self.blocks.iter().filter(|b| b.prev.iter().any(|p| p == name)).collect()
    }

    pub fn last_unit_stages(&self) -> Result<u32, IrError> {
        match self.metadata.get(LAST_UNIT_STAGES_KEY) {
            None => Ok(1),
            Some(v) => v.parse::<u32>().ok().filter(|n| *n >= 1).ok_or_else(|| IrError::Metadata {
                key: LAST_UNIT_STAGES_KEY.into(),
                message: format!("expected a positive integer, got `{v}`"),
            }),
        }
    }

    /// Exclusion implied by position: first stage, last stage, or the
    /// trailing last-unit stages.
    pub fn auto_excluded(&self, stage: u32) -> bool {
        let n = self.num_stages();
        let tail = self.last_unit_stages().unwrap_or(1);
        stage == 0 || stage + tail >= n
    }

    pub fn validate(&self) -> Result<(), IrError> {
        if self.blocks.is_empty() {
            return Err(IrError::Empty);
        }
        self.last_unit_stages()?;
        let mut index = HashMap::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            if index.insert(b.name.as_str(), i).is_some() {
                return Err(IrError::DuplicateBlock(b.name.clone()));
            }
            for (field, v) in [
                ("in", b.in_channels),
                ("out", b.out_channels),
                ("kernel_h", b.kernel_h),
                ("kernel_w", b.kernel_w),
                ("group", b.group),
            ] {
                if v == 0 {
                    return Err(IrError::ZeroField { block: b.name.clone(), field });
                }
            }
        }
        for b in &self.blocks {
            for p in &b.prev {
                if !index.contains_key(p.as_str()) {
                    return Err(IrError::UnknownPredecessor { block: b.name.clone(), prev: p.clone() });
                }
            }
        }
        check_acyclic(self, &index)?;
        check_stages(self, &index)?;

        for b in &self.blocks {
            if b.in_channels % b.group != 0 {
                return Err(IrError::GroupDivisibility {
                    block: b.name.clone(),
                    group: b.group,
                    what: "in_channels".into(),
                    channels: b.in_channels,
                });
            }
            if b.out_channels % b.group != 0 {
                return Err(IrError::GroupDivisibility {
                    block: b.name.clone(),
                    group: b.group,
                    what: "out_channels".into(),
                    channels: b.out_channels,
                });
            }
            if b.prev.is_empty() {
                continue;
            }
            let mut supplied = 0u64;
            for p in &b.prev {
                let producer = &self.blocks[index[p.as_str()]];
                supplied += u64::from(producer.out_channels);
                if !producer.out_channels.is_multiple_of(b.group) {
                    return Err(IrError::GroupDivisibility {
                        block: b.name.clone(),
                        group: b.group,
                        what: format!("out_channels of predecessor `{}`", producer.name),
                        channels: producer.out_channels,
                    });
                }
            }
            if supplied != u64::from(b.in_channels) {
                return Err(IrError::ChannelMismatch { block: b.name.clone(), expected: supplied, found: b.in_channels });
            }
        }
        Ok(())
    }
}

fn check_acyclic(ir: &NetworkIR, index: &HashMap<&str, usize>) -> Result<(), IrError> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Open,
        Done,
    }
    let mut marks = vec![Mark::New; ir.blocks.len()];
    for start in 0..ir.blocks.len() {
        if marks[start] != Mark::New {
            continue;
        }
        // iterative DFS over predecessor links
        let mut stack = vec![(start, 0usize)];
        marks[start] = Mark::Open;
        while let Some(&mut (node, ref mut next)) = stack.last_mut() {
            let prev = &ir.blocks[node].prev;
            if *next < prev.len() {
                let child = index[prev[*next].as_str()];
                *next += 1;
                match marks[child] {
                    Mark::Open => return Err(IrError::Cycle(ir.blocks[child].name.clone())),
                    Mark::New => {
                        marks[child] = Mark::Open;
                        stack.push((child, 0));
                    }
                    Mark::Done => {}
                }
            } else {
                marks[node] = Mark::Done;
                stack.pop();
            }
        }
    }
    Ok(())
}

fn check_stages(ir: &NetworkIR, index: &HashMap<&str, usize>) -> Result<(), IrError> {
    for b in &ir.blocks {
        for p in &b.prev {
            let producer = &ir.blocks[index[p.as_str()]];
            if producer.stage >= b.stage {
                return Err(IrError::StageOrder {
                    block: b.name.clone(),
                    stage: b.stage,
                    prev: p.clone(),
                    prev_stage: producer.stage,
                });
            }
        }
        if b.stage == 0 && !b.prev.is_empty() {
            return Err(IrError::InputWithPredecessor(b.name.clone()));
        }
        if b.stage > 0 && b.prev.is_empty() {
            return Err(IrError::MissingPredecessor(b.name.clone()));
        }
    }
    let populated: HashSet<u32> = ir.blocks.iter().map(|b| b.stage).collect();
    if let Some(gap) = (0..ir.num_stages()).find(|s| !populated.contains(s)) {
        return Err(IrError::StageGap(gap));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Text format
// ---------------------------------------------------------------------------

fn is_identifier(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.' | '/'))
}

fn syntax(line: usize, message: impl Into<String>) -> IrError {
    IrError::Syntax { line, message: message.into() }
}

fn parse_u32(line: usize, key: &str, v: &str) -> Result<u32, IrError> {
    v.parse::<u32>().map_err(|_| syntax(line, format!("`{key}` expects an unsigned integer, got `{v}`")))
}

/// Parses and validates IR source text.
pub fn parse_network(text: &str) -> Result<NetworkIR, IrError> {
    let mut blocks = Vec::new();
    // explicit excluded flags; `None` means "derive from position"
    let mut explicit_excluded = Vec::new();
    let mut metadata = BTreeMap::new();

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("meta") => {
                let rest = line["meta".len()..].trim();
                let (k, v) = rest.split_once('=').ok_or_else(|| syntax(line_no, "expected `meta <key>=<value>`"))?;
                let (k, v) = (k.trim(), v.trim());
                if !is_identifier(k) {
                    return Err(syntax(line_no, format!("invalid metadata key `{k}`")));
                }
                if metadata.insert(k.to_string(), v.to_string()).is_some() {
                    return Err(syntax(line_no, format!("duplicate metadata key `{k}`")));
                }
            }
            Some("block") => {
                let (block, excluded) = parse_block_line(line_no, tokens)?;
                blocks.push(block);
                explicit_excluded.push(excluded);
            }
            Some(other) => return Err(syntax(line_no, format!("unknown directive `{other}`"))),
            None => unreachable!(),
        }
    }

    let mut ir = NetworkIR { blocks, metadata };
    // positional exclusion needs num_stages and metadata, so resolve after
    // all lines are read
    ir.last_unit_stages()?;
    for (idx, explicit) in explicit_excluded.into_iter().enumerate() {
        let stage = ir.blocks[idx].stage;
        ir.blocks[idx].excluded = explicit.unwrap_or_else(|| ir.auto_excluded(stage));
    }
    ir.validate()?;
    Ok(ir)
}

fn parse_block_line<'a>(line: usize, mut tokens: impl Iterator<Item = &'a str>) -> Result<(ConvBlock, Option<bool>), IrError> {
    let name = tokens.next().ok_or_else(|| syntax(line, "missing block name"))?;
    if !is_identifier(name) {
        return Err(syntax(line, format!("invalid block name `{name}`")));
    }
    let mut seen = HashSet::new();
    let (mut inc, mut outc, mut kernel, mut group, mut stage) = (None, None, None, None, None);
    let mut has_bias = false;
    let mut excluded = None;
    let mut prev = Vec::new();

    for tok in tokens {
        let (key, value) = match tok.split_once('=') {
            Some((k, v)) => (k, Some(v)),
            None => (tok, None),
        };
        if !seen.insert(key) {
            return Err(syntax(line, format!("duplicate field `{key}`")));
        }
        match (key, value) {
            ("in", Some(v)) => inc = Some(parse_u32(line, key, v)?),
            ("out", Some(v)) => outc = Some(parse_u32(line, key, v)?),
            ("group", Some(v)) => group = Some(parse_u32(line, key, v)?),
            ("stage", Some(v)) => stage = Some(parse_u32(line, key, v)?),
            ("k", Some(v)) => {
                let (h, w) = v.split_once('x').ok_or_else(|| syntax(line, format!("`k` expects <h>x<w>, got `{v}`")))?;
                kernel = Some((parse_u32(line, "k", h)?, parse_u32(line, "k", w)?));
            }
            ("bias", None) => has_bias = true,
            ("excluded", None) => excluded = Some(true),
            ("excluded", Some("true")) => excluded = Some(true),
            ("excluded", Some("false")) => excluded = Some(false),
            ("prev", Some(v)) => {
                for p in v.split(',') {
                    if !is_identifier(p) {
                        return Err(syntax(line, format!("invalid predecessor name `{p}`")));
                    }
                    prev.push(p.to_string());
                }
            }
            _ => return Err(syntax(line, format!("unexpected token `{tok}`"))),
        }
    }
    let missing = |f: &str| syntax(line, format!("block `{name}` is missing `{f}=`"));
    let (kernel_h, kernel_w) = kernel.ok_or_else(|| missing("k"))?;
    let block = ConvBlock {
        name: name.to_string(),
        in_channels: inc.ok_or_else(|| missing("in"))?,
        out_channels: outc.ok_or_else(|| missing("out"))?,
        kernel_h,
        kernel_w,
        group: group.ok_or_else(|| missing("group"))?,
        has_bias,
        stage: stage.ok_or_else(|| missing("stage"))?,
        excluded: false,
        prev,
    };
    Ok((block, excluded))
}

/// Canonical text: metadata lines sorted by key, then one line per block in
/// IR order with fields in grammar order.
pub fn serialize_network(ir: &NetworkIR) -> String {
    let mut out = String::new();
    for (k, v) in &ir.metadata {
        let _ = writeln!(out, "meta {k}={v}");
    }
    for b in &ir.blocks {
        let _ = write!(
            out,
            "block {} in={} out={} k={}x{} group={} stage={}",
            b.name, b.in_channels, b.out_channels, b.kernel_h, b.kernel_w, b.group, b.stage
        );
        if b.has_bias {
            out.push_str(" bias");
        }
        if b.excluded {
            out.push_str(" excluded");
        } else if ir.auto_excluded(b.stage) {
            out.push_str(" excluded=false");
        }
        if !b.prev.is_empty() {
            let _ = write!(out, " prev={}", b.prev.join(","));
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Analysis sequence
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stage {
    pub index: u32,
    pub blocks: Vec<String>,
}

/// Stage-ordered traversal of the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnalysisSequence {
    pub stages: Vec<Stage>,
}

impl AnalysisSequence {
    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn stage_of(&self, block: &str) -> Option<u32> {
        self.stages.iter().find(|s| s.blocks.iter().any(|b| b == block)).map(|s| s.index)
    }

    /// Blocks in stages strictly after `stage`, stopping before the final
    /// stage (which never contributes to the subsequent-layer average).
    pub fn subsequent(&self, stage: u32) -> Vec<&str> {
        let last = self.stages.len().saturating_sub(1);
        self.stages
            .iter()
            .filter(|s| s.index > stage && (s.index as usize) < last)
            .flat_map(|s| s.blocks.iter().map(String::as_str))
            .collect()
    }
}

/// Groups blocks by stage in ascending order. Blocks within a stage keep IR
/// order. A block's "previous" blocks are its direct `prev` links.
pub fn analysis_sequence(ir: &NetworkIR) -> Result<AnalysisSequence, IrError> {
    let index: HashMap<&str, usize> = ir.blocks.iter().enumerate().map(|(i, b)| (b.name.as_str(), i)).collect();
    for b in &ir.blocks {
        for p in &b.prev {
            if !index.contains_key(p.as_str()) {
                return Err(IrError::UnknownPredecessor { block: b.name.clone(), prev: p.clone() });
            }
        }
    }
    check_acyclic(ir, &index)?;
    check_stages(ir, &index)?;
    let mut stages: Vec<Stage> = (0..ir.num_stages()).map(|index| Stage { index, blocks: Vec::new() }).collect();
    for b in &ir.blocks {
        stages[b.stage as usize].blocks.push(b.name.clone());
    }
    Ok(AnalysisSequence { stages })
}

// ---------------------------------------------------------------------------
// Parameter counting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParamCount {
    pub per_block: BTreeMap<String, u64>,
    pub conv_total: u64,
}

/// Per block: `(in / group) * kh * kw * out`, plus `out` when biased.
pub fn param_count(ir: &NetworkIR) -> Result<ParamCount, IrError> {
    let mut count = ParamCount::default();
    for b in &ir.blocks {
        if b.group == 0 || b.in_channels % b.group != 0 {
            return Err(IrError::GroupDivisibility {
                block: b.name.clone(),
                group: b.group,
                what: "in_channels".into(),
                channels: b.in_channels,
            });
        }
        let p = b.params();
        count.per_block.insert(b.name.clone(), p);
        count.conv_total += p;
    }
    Ok(count)
}
