//! Coefficient summaries and sign-input histograms of a trained network.

use std::fmt::Write as _;

use crate::arch::Network;
use crate::error::{Error, Result};
use crate::tensor::FloatTensor;

pub const HISTOGRAM_CSV_HEADER: &str = "unit,bin_lo,bin_hi,count";

#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientSummary {
    pub unit: String,
    pub coefficient: &'static str,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub count: usize,
}

/// Min, max and mean of every learnable activation coefficient per unit.
pub fn coefficient_summaries(net: &Network) -> Vec<CoefficientSummary> {
    let mut out = Vec::new();
    for (unit, groups) in net.coefficients() {
        for (coefficient, values) in groups {
            if values.is_empty() {
                continue;
            }
            let min = values.iter().copied().fold(f64::INFINITY, f64::min);
            let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            out.push(CoefficientSummary {
                unit: unit.clone(),
                coefficient,
                min,
                max,
                mean,
                count: values.len(),
            });
        }
    }
    out
}

pub fn summaries_text(rows: &[CoefficientSummary]) -> String {
    let mut s = String::new();
    for r in rows {
        writeln!(
            s,
            "{:<20} {:<6} min={:+.6} max={:+.6} mean={:+.6} n={}",
            r.unit, r.coefficient, r.min, r.max, r.mean, r.count
        )
        .unwrap();
    }
    s
}

/// Equal-width bins over `lo..hi`. Values outside the range land in the
/// first or last bin, so the counts always sum to the number of values.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub unit: String,
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(unit: impl Into<String>, lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins == 0 || !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidArgument(format!("bad histogram range {lo}..{hi} with {bins} bins")));
        }
        Ok(Self {
            unit: unit.into(),
            lo,
            hi,
            counts: vec![0; bins],
        })
    }

    pub fn add(&mut self, v: f64) {
        let bins = self.counts.len();
        let pos = (v - self.lo) / (self.hi - self.lo) * bins as f64;
        // NaN casts to 0
        let i = (pos.max(0.0) as usize).min(bins - 1);
        self.counts[i] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        let w = (self.hi - self.lo) / self.counts.len() as f64;
        (self.lo + w * i as f64, self.lo + w * (i + 1) as f64)
    }
}

/// Histograms of every unit's sign input over the batch `x`.
pub fn activation_histograms(net: &Network, x: &FloatTensor, lo: f64, hi: f64, bins: usize) -> Result<Vec<Histogram>> {
    net.unit_inputs(x)?
        .into_iter()
        .map(|(unit, t)| {
            let mut h = Histogram::new(unit, lo, hi, bins)?;
            t.data().iter().for_each(|&v| h.add(v));
            Ok(h)
        })
        .collect()
}

pub fn histograms_csv(hists: &[Histogram]) -> String {
    let mut s = String::from(HISTOGRAM_CSV_HEADER);
    s.push('\n');
    for h in hists {
        for (i, c) in h.counts.iter().enumerate() {
            let (a, b) = h.bin_edges(i);
            writeln!(s, "{},{a},{b},{c}", h.unit).unwrap();
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_network_for, Scale, Variant};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fresh_reactnet_has_initial_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = build_network_for(Variant::reactnet_a(), Scale::Desk, [1, 8, 8], 10);
        let net = Network::new(&spec, &mut rng).unwrap();
        let rows = coefficient_summaries(&net);
        for kind in ["alpha", "beta", "gamma", "zeta"] {
            assert!(rows.iter().any(|r| r.coefficient == kind));
        }
        for r in &rows {
            let expected = if r.coefficient == "beta" { 0.25 } else { 0.0 };
            assert_eq!((r.min, r.max, r.mean), (expected, expected, expected), "{} {}", r.unit, r.coefficient);
        }
        assert_eq!(summaries_text(&rows).lines().count(), rows.len());
    }

    #[test]
    fn histogram_counts_every_activation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = build_network_for(Variant::reactnet_a(), Scale::Desk, [1, 8, 8], 10);
        let net = Network::new(&spec, &mut rng).unwrap();
        let x = FloatTensor::from_fn(&[3, 1, 8, 8], |_| rng.gen_range(-4.0..4.0));
        let expected: usize = net.unit_inputs(&x).unwrap().iter().map(|(_, t)| t.len()).sum();
        let hists = activation_histograms(&net, &x, -1.0, 1.0, 7).unwrap();
        let csv = histograms_csv(&hists);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(HISTOGRAM_CSV_HEADER));
        let total: u64 = lines.map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap()).sum();
        assert_eq!(total as usize, expected);
    }

    #[test]
    fn out_of_range_values_clamp_to_edge_bins() {
        let mut h = Histogram::new("u", 0.0, 1.0, 4).unwrap();
        for v in [-5.0, 0.0, 0.3, 0.99, 1.0, 7.0, f64::NAN] {
            h.add(v);
        }
        assert_eq!(h.counts, vec![3, 1, 0, 3]);
        assert_eq!(h.bin_edges(1), (0.25, 0.5));
        assert!(Histogram::new("u", 1.0, 1.0, 3).is_err());
    }
}
