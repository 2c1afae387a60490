//! Applies a refinement plan to a network and reports the size change.
//!
//! Stretching multiplies a block's output channels; splitting multiplies its
//! group count. Channel counts are rounded to the nearest integer and then
//! up to the smallest multiple of `lcm(own group, every consumer's group)`
//! so that each grouped convolution divides the channels it splits. Consumer
//! input widths are recomputed as the sum of their producers' outputs.

use std::fmt::Write as _;

use log::info;
use thiserror::Error;

use crate::netir::{param_count, IrError, NetworkIR};
use crate::planner::{build_plan, lambda_upper_bound, PlanError, PlannerConfig, RefinementPlan};
use crate::sepstats::TallyTable;

#[derive(Debug, Error)]
pub enum RewriteError {
    #[error("plan has no entry for block `{0}`")]
    MissingBlock(String),
    #[error("plan names `{0}`, which is not a block of the network")]
    UnknownBlock(String),
    #[error("block `{block}`: group {group} cannot divide its fixed {in_channels} input channels")]
    Unrepairable { block: String, group: u32, in_channels: u32 },
    #[error("block `{0}`: refined channel or group count overflows u32")]
    Overflow(String),
    #[error("refined network is invalid: {0}")]
    Ir(#[from] IrError),
    #[error(transparent)]
    Plan(#[from] PlanError),
}

/// A stretched width that needed rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAdjustment {
    pub block: String,
    /// `out_channels * stretch` before rounding.
    pub requested: f64,
    pub multiple_of: u32,
    pub out_channels: u32,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: u64, b: u64) -> u64 {
    a / gcd(a, b) * b
}

pub fn apply_plan(ir: &NetworkIR, plan: &RefinementPlan) -> Result<NetworkIR, RewriteError> {
    apply_plan_logged(ir, plan).map(|(refined, _)| refined)
}

/// Like [`apply_plan`], also returning every width that had to be rounded.
pub fn apply_plan_logged(ir: &NetworkIR, plan: &RefinementPlan) -> Result<(NetworkIR, Vec<ChannelAdjustment>), RewriteError> {
    for (name, _) in &plan.per_block {
        if ir.block(name).is_none() {
            return Err(RewriteError::UnknownBlock(name.clone()));
        }
    }
    let factors = ir
        .blocks
        .iter()
        .map(|b| plan.get(&b.name).copied().ok_or_else(|| RewriteError::MissingBlock(b.name.clone())))
        .collect::<Result<Vec<_>, _>>()?;

    let groups = ir
        .blocks
        .iter()
        .zip(&factors)
        .map(|(b, f)| b.group.checked_mul(f.split).ok_or_else(|| RewriteError::Overflow(b.name.clone())))
        .collect::<Result<Vec<u32>, _>>()?;

    let mut refined = ir.clone();
    let mut adjustments = Vec::new();
    for (i, b) in ir.blocks.iter().enumerate() {
        let mut multiple = u64::from(groups[i]);
        for (j, c) in ir.blocks.iter().enumerate() {
            if c.prev.contains(&b.name) {
                multiple = lcm(multiple, u64::from(groups[j]));
            }
        }
        let requested = f64::from(b.out_channels) * factors[i].stretch;
        let rounded = (requested.round() as u64).max(1);
        let out = rounded.div_ceil(multiple) * multiple;
        let out = u32::try_from(out).map_err(|_| RewriteError::Overflow(b.name.clone()))?;
        if f64::from(out) != requested {
            info!("block `{}`: {} x {} = {requested} channels, rounded to {out} (multiple of {multiple})", b.name, b.out_channels, factors[i].stretch);
            adjustments.push(ChannelAdjustment {
                block: b.name.clone(),
                requested,
                multiple_of: multiple as u32,
                out_channels: out,
            });
        }
        refined.blocks[i].out_channels = out;
        refined.blocks[i].group = groups[i];
    }

    for i in 0..refined.blocks.len() {
        if refined.blocks[i].prev.is_empty() {
            continue;
        }
        let supplied: u64 = refined.blocks[i]
            .prev
            .iter()
            .map(|p| u64::from(refined.block(p).expect("validated predecessor").out_channels))
            .sum();
        refined.blocks[i].in_channels = u32::try_from(supplied).map_err(|_| RewriteError::Overflow(refined.blocks[i].name.clone()))?;
    }
    for b in &refined.blocks {
        if b.in_channels % b.group != 0 {
            return Err(RewriteError::Unrepairable { block: b.name.clone(), group: b.group, in_channels: b.in_channels });
        }
    }
    refined.validate()?;
    Ok((refined, adjustments))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockDelta {
    pub block: String,
    pub before: u64,
    pub after: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SizeReport {
    pub original_conv_params: u64,
    pub refined_conv_params: u64,
    /// `100 * (1 - refined / original)`; negative when the network grew.
    pub reduction_pct: f64,
    pub per_block: Vec<BlockDelta>,
}

impl SizeReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "original_conv_params={}", self.original_conv_params);
        let _ = writeln!(out, "refined_conv_params={}", self.refined_conv_params);
        let _ = writeln!(out, "reduction_pct={:.6}", self.reduction_pct);
        for d in &self.per_block {
            let pct = block_reduction(d.before, d.after);
            let _ = writeln!(out, "block {} before={} after={} reduction_pct={pct:.6}", d.block, d.before, d.after);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("block,before,after,reduction_pct\n");
        for d in &self.per_block {
            let _ = writeln!(out, "{},{},{},{:.6}", d.block, d.before, d.after, block_reduction(d.before, d.after));
        }
        let _ = writeln!(out, "TOTAL,{},{},{:.6}", self.original_conv_params, self.refined_conv_params, self.reduction_pct);
        out
    }
}

fn block_reduction(before: u64, after: u64) -> f64 {
    if before == 0 {
        0.0
    } else {
        100.0 * (1.0 - after as f64 / before as f64)
    }
}

/// Convolutional parameter totals of two versions of a network. Blocks are
/// matched by name, in the order of `before`.
pub fn size_report(before: &NetworkIR, after: &NetworkIR) -> Result<SizeReport, RewriteError> {
    let a = param_count(before)?;
    let b = param_count(after)?;
    let per_block = before
        .blocks
        .iter()
        .map(|blk| BlockDelta {
            block: blk.name.clone(),
            before: a.per_block[&blk.name],
            after: b.per_block.get(&blk.name).copied().unwrap_or(0),
        })
        .collect();
    Ok(SizeReport {
        original_conv_params: a.conv_total,
        refined_conv_params: b.conv_total,
        reduction_pct: block_reduction(a.conv_total, b.conv_total),
        per_block,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub above_lambda_o: bool,
    pub plan: RefinementPlan,
    pub refined_conv_params: u64,
}

/// Plans and applies the refinement for each `lambda`.
pub fn sweep(ir: &NetworkIR, tallies: &TallyTable, lambdas: &[f64]) -> Result<Vec<SweepRow>, RewriteError> {
    let lambda_o = lambda_upper_bound(ir, tallies)?;
    lambdas
        .iter()
        .map(|&lambda| {
            let plan = build_plan(ir, tallies, &PlannerConfig::with_lambda(lambda)?)?;
            let refined = apply_plan(ir, &plan)?;
            Ok(SweepRow {
                lambda,
                above_lambda_o: lambda > lambda_o,
                plan,
                refined_conv_params: param_count(&refined)?.conv_total,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netir::{parse_network, serialize_network};
    use crate::planner::{BlockFactors, Case};

    fn plan_with(ir: &NetworkIR, entries: &[(&str, f64, u32)]) -> RefinementPlan {
        let mut plan = RefinementPlan::identity(ir, 0.25);
        for &(name, stretch, split) in entries {
            let f = plan.per_block.iter_mut().find(|(n, _)| n == name).unwrap();
            f.1 = BlockFactors { stretch, stretch_steps: ((stretch - 1.0) / 0.25).round() as u32, split, case: Case::B };
        }
        plan
    }

    const ALEX: &str = "block conv1 in=3 out=96 k=11x11 group=1 stage=0\n\
                        block conv2 in=96 out=256 k=11x11 group=1 stage=1 prev=conv1\n\
                        block conv3 in=256 out=384 k=3x3 group=1 stage=2 prev=conv2\n";

    #[test]
    fn stretch_one_and_a_half() {
        let ir = parse_network(
            "block a in=3 out=64 k=3x3 group=1 stage=0\n\
             block b in=64 out=64 k=3x3 group=1 stage=1 prev=a\n\
             block c in=64 out=10 k=1x1 group=1 stage=2 prev=b\n",
        )
        .unwrap();
        let refined = apply_plan(&ir, &plan_with(&ir, &[("b", 1.5, 1)])).unwrap();
        assert_eq!(refined.block("b").unwrap().out_channels, 96);
        assert_eq!(refined.block("c").unwrap().in_channels, 96);
    }

    #[test]
    fn split_two_halves_the_block() {
        let ir = parse_network(ALEX).unwrap();
        let refined = apply_plan(&ir, &plan_with(&ir, &[("conv2", 1.0, 2)])).unwrap();
        let conv2 = refined.block("conv2").unwrap();
        assert_eq!((conv2.in_channels, conv2.out_channels, conv2.group), (96, 256, 2));
        let r = size_report(&ir, &refined).unwrap();
        let d = r.per_block.iter().find(|d| d.block == "conv2").unwrap();
        assert_eq!((d.before, d.after), (2_973_696, 1_486_848));
    }

    #[test]
    fn identity_plan_is_byte_identical() {
        let ir = parse_network(ALEX).unwrap();
        let refined = apply_plan(&ir, &RefinementPlan::identity(&ir, 0.25)).unwrap();
        assert_eq!(serialize_network(&refined), serialize_network(&ir));
        assert_eq!(size_report(&ir, &refined).unwrap().reduction_pct, 0.0);
    }

    #[test]
    fn stretch_and_split_on_one_block() {
        let ir = parse_network(ALEX).unwrap();
        let refined = apply_plan(&ir, &plan_with(&ir, &[("conv2", 1.25, 2)])).unwrap();
        let r = size_report(&ir, &refined).unwrap();
        let d = r.per_block.iter().find(|d| d.block == "conv2").unwrap();
        assert_eq!(d.after * 2, d.before * 5 / 4);
        assert_eq!(block_reduction(d.before, d.after), 37.5);
    }

    #[test]
    fn rounding_respects_consumer_groups() {
        let ir = parse_network(
            "block a in=3 out=6 k=1x1 group=1 stage=0\n\
             block b in=6 out=6 k=1x1 group=1 stage=1 prev=a\n\
             block c in=6 out=8 k=1x1 group=1 stage=2 prev=b\n",
        )
        .unwrap();
        // 6 * 1.25 = 7.5 -> 8, then up to a multiple of lcm(2, 4) = 4
        let (refined, adj) = apply_plan_logged(&ir, &plan_with(&ir, &[("b", 1.25, 2), ("c", 1.0, 4)])).unwrap();
        let b = refined.block("b").unwrap();
        assert_eq!((b.out_channels, b.group), (8, 2));
        assert_eq!(refined.block("c").unwrap().in_channels, 8);
        assert!(adj.iter().any(|a| a.block == "b" && a.out_channels == 8));
        // a: 6 channels must become a multiple of 2 (already is)
        assert_eq!(refined.block("a").unwrap().out_channels, 6);
    }

    #[test]
    fn input_stage_split_is_unrepairable() {
        let ir = parse_network(ALEX).unwrap();
        let err = apply_plan(&ir, &plan_with(&ir, &[("conv1", 1.0, 2)])).unwrap_err();
        assert!(matches!(err, RewriteError::Unrepairable { ref block, .. } if block == "conv1"), "{err}");
    }

    #[test]
    fn plan_coverage_checked() {
        let ir = parse_network(ALEX).unwrap();
        let mut plan = RefinementPlan::identity(&ir, 0.25);
        plan.per_block.pop();
        assert!(matches!(apply_plan(&ir, &plan), Err(RewriteError::MissingBlock(b)) if b == "conv3"));
        let mut plan = RefinementPlan::identity(&ir, 0.25);
        plan.per_block.push(("ghost".into(), BlockFactors::identity(Case::A)));
        assert!(matches!(apply_plan(&ir, &plan), Err(RewriteError::UnknownBlock(_))));
    }

    #[test]
    fn splits_compose() {
        let ir = parse_network(ALEX).unwrap();
        let once = apply_plan(&ir, &plan_with(&ir, &[("conv2", 1.0, 2)])).unwrap();
        let twice = apply_plan(&once, &plan_with(&once, &[("conv2", 1.0, 2)])).unwrap();
        assert_eq!(twice.block("conv2").unwrap().group, 4);
    }

    #[test]
    fn report_formats() {
        let ir = parse_network(ALEX).unwrap();
        let refined = apply_plan(&ir, &plan_with(&ir, &[("conv2", 1.0, 2)])).unwrap();
        let r = size_report(&ir, &refined).unwrap();
        assert!(r.to_text().contains("block conv2 before=2973696 after=1486848 reduction_pct=50.000000"));
        assert!(r.to_csv().starts_with("block,before,after,reduction_pct\nconv1,"));
    }
}
