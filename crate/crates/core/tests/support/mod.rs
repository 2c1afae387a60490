//! Test-only oracles and generators. Nothing here calls into the planner,
//! the parameter counter or the precision code it is used to check.
#![allow(dead_code)]

use std::collections::BTreeMap;

use archrefine::netir::{ConvBlock, NetworkIR};
use archrefine::sepstats::{SeparationTally, TallyTable};
use num_rational::Ratio;
use rand::Rng;

pub type Q = Ratio<i128>;

// ---------------------------------------------------------------------------
// Exact planner oracle
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleCase {
    Excluded,
    A,
    B,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleFactors {
    pub stretch_steps: u32,
    pub split_exponent: u32,
    pub case: OracleCase,
}

pub struct OracleInput {
    /// Stage count `L`.
    pub stages: usize,
    /// For each stage: `(block, excluded, n_plus, n_minus, n_total)`.
    pub blocks: Vec<Vec<(String, bool, i128, i128, i128)>>,
    pub lambda: Q,
}

fn floor_q(x: Q) -> u32 {
    let f = x.floor();
    u32::try_from(*f.numer() / *f.denom()).unwrap()
}

/// Straight evaluation of the refinement formulas with 1-based layer
/// indices: `xi(l) = sum_{i=l+1}^{L-1} (n+^i / n_T) / (L - l - 1)`.
pub fn oracle_plan(input: &OracleInput) -> (BTreeMap<String, OracleFactors>, Q) {
    let big_l = input.stages as i128;
    // per-layer n+/n_T, mean over blocks of the layer, layer 1 has none
    let layer_ratio = |l: i128| -> Q {
        let blocks = &input.blocks[(l - 1) as usize];
        if l == 1 {
            return Q::from_integer(0);
        }
        let sum: Q = blocks.iter().map(|b| Q::new(b.2, b.4)).fold(Q::from_integer(0), |a, b| a + b);
        sum / Q::from_integer(blocks.len() as i128)
    };
    let xi = |l: i128| -> Q {
        let count = big_l - l - 1;
        if count <= 0 {
            return Q::from_integer(0);
        }
        let mut s = Q::from_integer(0);
        for i in l + 1..=big_l - 1 {
            s += layer_ratio(i);
        }
        s / Q::from_integer(count)
    };

    let mut out = BTreeMap::new();
    let mut lambda_o = Q::from_integer(0);
    for l in 1..=big_l {
        for (name, excluded, n_plus, n_minus, n_total) in &input.blocks[(l - 1) as usize] {
            if l == 1 || *excluded {
                out.insert(name.clone(), OracleFactors { stretch_steps: 0, split_exponent: 0, case: OracleCase::Excluded });
                continue;
            }
            let x = xi(l);
            let plus = Q::new(*n_plus, *n_total) * x;
            let minus = Q::new(*n_minus, *n_total) * x;
            let split_exponent = floor_q(minus / input.lambda);
            let f = if n_plus < n_minus {
                lambda_o = lambda_o.max(minus);
                OracleFactors { stretch_steps: 0, split_exponent, case: OracleCase::A }
            } else {
                lambda_o = lambda_o.max(plus).max(minus);
                OracleFactors { stretch_steps: floor_q(plus / input.lambda), split_exponent, case: OracleCase::B }
            };
            out.insert(name.clone(), f);
        }
    }
    (out, lambda_o)
}

pub fn q_to_f64(q: Q) -> f64 {
    *q.numer() as f64 / *q.denom() as f64
}

// ---------------------------------------------------------------------------
// Random planner instances
// ---------------------------------------------------------------------------

pub struct Instance {
    pub ir: NetworkIR,
    pub tallies: TallyTable,
    pub oracle: OracleInput,
}

/// Random network with `3..=max_stages` stages (some with up to three
/// parallel blocks fed by the whole previous stage) and random tallies for
/// `num_classes <= max_classes`. `width` must be divisible by any split the
/// caller plans to apply.
pub fn random_instance(rng: &mut impl Rng, max_classes: usize, max_stages: usize, width: u32, lambda: Q) -> Instance {
    let m = rng.random_range(2..=max_classes) as u64;
    let n_total = m * m;
    let stages = rng.random_range(3..=max_stages);
    let multi = rng.random_bool(0.3);
    let tail = if multi && stages >= 4 && rng.random_bool(0.5) { 2 } else { 1 };

    let mut blocks = Vec::new();
    let mut prev_names: Vec<String> = Vec::new();
    let mut oracle_blocks = Vec::new();
    let mut tallies = TallyTable::default();
    for s in 0..stages {
        let count = if multi && s > 0 && s + 1 < stages { rng.random_range(1..=3) } else { 1 };
        let mut names = Vec::new();
        let mut oracle_stage = Vec::new();
        for b in 0..count {
            let name = format!("s{s}b{b}");
            let in_channels = if s == 0 { 3 } else { width * prev_names.len() as u32 };
            let mut block = ConvBlock::new(name.clone(), in_channels, width, (3, 3), s as u32).with_bias(rng.random_bool(0.5));
            block.prev = prev_names.clone();
            block.excluded = s == 0 || s + tail >= stages;
            let n_plus = rng.random_range(0..=n_total);
            let n_minus = rng.random_range(0..=n_total - n_plus);
            if s > 0 {
                tallies.insert(name.clone(), s as u32, SeparationTally::new(n_plus, n_minus, n_total - n_plus - n_minus));
            }
            oracle_stage.push((name.clone(), block.excluded, n_plus as i128, n_minus as i128, n_total as i128));
            blocks.push(block);
            names.push(name);
        }
        oracle_blocks.push(oracle_stage);
        prev_names = names;
    }
    let mut metadata = BTreeMap::new();
    if tail > 1 {
        metadata.insert("last_unit_stages".to_string(), tail.to_string());
    }
    let ir = NetworkIR::new(blocks, metadata).expect("generated IR is valid");
    Instance { ir, tallies, oracle: OracleInput { stages, blocks: oracle_blocks, lambda } }
}

/// Random small rational in [1/30, 1], so split exponents stay below 31.
pub fn random_lambda(rng: &mut impl Rng) -> Q {
    let den = rng.random_range(1..=40i128);
    let num = rng.random_range((den + 29) / 30..=den);
    Q::new(num, den)
}

// ---------------------------------------------------------------------------
// Parameter counting by connection enumeration
// ---------------------------------------------------------------------------

/// Counts weights by visiting every (input channel, output channel) pair
/// and keeping those whose channel groups coincide.
pub fn enumerate_weights(in_channels: u32, out_channels: u32, kh: u32, kw: u32, group: u32) -> u64 {
    let in_per = in_channels / group;
    let out_per = out_channels / group;
    let mut count = 0u64;
    for o in 0..out_channels {
        for i in 0..in_channels {
            if i / in_per == o / out_per {
                count += u64::from(kh * kw);
            }
        }
    }
    count
}

// ---------------------------------------------------------------------------
// precision@k by exhaustive ranking
// ---------------------------------------------------------------------------

/// TP and FP counted by computing each class's rank from scratch: the number
/// of classes scoring higher, plus equal-scoring classes with lower index.
pub fn precision_oracle(scores: &[Vec<f64>], truth: &[Vec<u8>], k: usize) -> Option<(u64, u64)> {
    let (mut tp, mut fp) = (0, 0);
    let mut any = false;
    for (s, t) in scores.iter().zip(truth) {
        let p = t.iter().filter(|&&v| v == 1).count();
        if p == 0 {
            continue;
        }
        any = true;
        let take = p.min(k);
        for c in 0..s.len() {
            let rank = (0..s.len()).filter(|&d| s[d] > s[c] || (s[d] == s[c] && d < c)).count();
            if rank < take {
                if t[c] == 1 {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
    }
    any.then_some((tp, fp))
}

// ---------------------------------------------------------------------------
// Random valid IRs
// ---------------------------------------------------------------------------

/// Random valid DAG: 1..=6 stages of 1..=3 blocks, each consuming a random
/// non-empty subset of earlier blocks that includes one block of the
/// previous stage.
pub fn random_ir(rng: &mut impl Rng) -> NetworkIR {
    let stages = rng.random_range(1..=6u32);
    let mut blocks: Vec<ConvBlock> = Vec::new();
    let mut by_stage: Vec<Vec<usize>> = Vec::new();
    for s in 0..stages {
        let earlier = blocks.len();
        let mut this = Vec::new();
        for b in 0..rng.random_range(1..=3) {
            let group = [1u32, 2, 4][rng.random_range(0..3)];
            let out = 4 * rng.random_range(1..=16u32);
            let kernel = (rng.random_range(1..=7), rng.random_range(1..=7));
            let mut block = ConvBlock::new(format!("b{s}_{b}"), 0, out, kernel, s).with_group(group).with_bias(rng.random_bool(0.5));
            if s == 0 {
                block.in_channels = group * rng.random_range(1..=4);
            } else {
                let last = &by_stage[s as usize - 1];
                let mut prev = vec![last[rng.random_range(0..last.len())]];
                for i in 0..earlier {
                    if !prev.contains(&i) && rng.random_bool(0.2) {
                        prev.push(i);
                    }
                }
                block.in_channels = prev.iter().map(|&i| blocks[i].out_channels).sum();
                block.prev = prev.iter().map(|&i| blocks[i].name.clone()).collect();
            }
            this.push(blocks.len());
            blocks.push(block);
        }
        by_stage.push(this);
    }
    let mut metadata = BTreeMap::new();
    if rng.random_bool(0.5) {
        metadata.insert("last_unit_stages".to_string(), rng.random_range(1..=2).to_string());
    }
    if rng.random_bool(0.5) {
        metadata.insert("source".to_string(), "round 3 of 5".to_string());
    }
    let mut ir = NetworkIR { blocks, metadata };
    for i in 0..ir.blocks.len() {
        let auto = ir.auto_excluded(ir.blocks[i].stage);
        ir.blocks[i].excluded = if rng.random_bool(0.2) { !auto } else { auto };
    }
    ir.validate().expect("generated IR is valid");
    ir
}
