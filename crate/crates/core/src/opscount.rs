//! Static BOPs / FLOPs / OPs accounting.
//!
//! One multiply-accumulate counts as one operation. Batch norm, pooling and
//! activations are not counted. `OPs = BOPs / 64 + FLOPs`.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::arch::{LayerOp, NetworkSpec};
use crate::error::Result;

/// Binary operations folded into one OP.
pub const BOPS_PER_OP: f64 = 64.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerOps {
    pub id: String,
    pub op: LayerOp,
    pub bops: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpsReport {
    pub layers: Vec<LayerOps>,
    pub bops: u64,
    pub flops: u64,
}

impl OpsReport {
    pub fn ops(&self) -> f64 {
        combined_ops(self.bops, self.flops)
    }

    /// Human-readable table followed by the totals line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let width = self.layers.iter().map(|l| l.id.len()).max().unwrap_or(5).max(5);
        writeln!(s, "{:<width$}  {:<11}  {:>14}  {:>14}", "layer", "type", "bops", "flops").unwrap();
        for l in &self.layers {
            writeln!(s, "{:<width$}  {:<11}  {:>14}  {:>14}", l.id, l.op.name(), l.bops, l.flops).unwrap();
        }
        s.push_str(&self.totals_line());
        s.push('\n');
        s
    }

    /// One `key=value` line per layer, then the totals line.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for l in &self.layers {
            writeln!(s, "id={} type={} bops={} flops={}", l.id, l.op.name(), l.bops, l.flops).unwrap();
        }
        s.push_str(&self.totals_line());
        s.push('\n');
        s
    }

    pub fn totals_line(&self) -> String {
        format!("BOPS={} FLOPS={} OPS={:.6e}", self.bops, self.flops, self.ops())
    }
}

pub fn combined_ops(bops: u64, flops: u64) -> f64 {
    bops as f64 / BOPS_PER_OP + flops as f64
}

/// Per-image operation counts for every multiply-accumulate layer of `net`.
pub fn count_ops(net: &NetworkSpec) -> Result<OpsReport> {
    let layers: Vec<LayerOps> = net
        .layers()?
        .into_iter()
        .map(|l| {
            let macs = l.macs();
            let (bops, flops) = match l.op {
                LayerOp::BinaryConv => (macs, 0),
                LayerOp::RealConv | LayerOp::FullyConnected => (0, macs),
            };
            LayerOps {
                id: l.id,
                op: l.op,
                bops,
                flops,
            }
        })
        .collect();
    Ok(OpsReport {
        bops: layers.iter().map(|l| l.bops).sum(),
        flops: layers.iter().map(|l| l.flops).sum(),
        layers,
    })
}

/// Multiply-accumulate counters incremented by the kernels themselves.
#[derive(Debug, Default)]
pub struct OpTally {
    binary: AtomicU64,
    real: AtomicU64,
}

impl OpTally {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_binary(&self, macs: u64) {
        self.binary.fetch_add(macs, Ordering::Relaxed);
    }

    pub fn add_real(&self, macs: u64) {
        self.real.fetch_add(macs, Ordering::Relaxed);
    }

    pub fn binary(&self) -> u64 {
        self.binary.load(Ordering::Relaxed)
    }

    pub fn real(&self) -> u64 {
        self.real.load(Ordering::Relaxed)
    }
}
