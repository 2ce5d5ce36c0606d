//! Parameter, MAC and latency table for the network variants.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::{Init, Network, NetworkSpec, Upsampling, Variant};
use crate::tensor::Tensor;

pub const MIN_RUNS: usize = 10;
pub const MIN_WARMUP: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LatencyStats {
    pub median_ms: f64,
    pub p90_ms: f64,
}

impl LatencyStats {
    /// Nearest-rank median and 90th percentile.
    pub fn from_samples(samples_ms: &[f64]) -> Result<Self> {
        if samples_ms.is_empty() || samples_ms.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("latency", "need finite samples"));
        }
        let mut s = samples_ms.to_vec();
        s.sort_by(f64::total_cmp);
        let rank = |q: f64| s[((q * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
        Ok(LatencyStats {
            median_ms: rank(0.5),
            p90_ms: rank(0.9),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub variant: Variant,
    pub structure: String,
    pub params: usize,
    pub macs: u64,
    pub latency: LatencyStats,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub input_size: usize,
    pub runs: usize,
    pub warmup: usize,
    pub host: String,
    pub rows: Vec<BenchRow>,
}

/// Block13 widths and upsampling, e.g. `368-368-256 / 192-192-128, bilinear`.
pub fn structure(spec: &NetworkSpec) -> String {
    let join = |w: &[usize]| w.iter().map(usize::to_string).collect::<Vec<_>>().join("-");
    let up = match spec.upsampling {
        Upsampling::BilinearConv => "bilinear",
        Upsampling::TransposedConv => "transposed",
    };
    format!("{} / {}, {up}", join(&spec.block13a_widths), join(&spec.block13b_widths))
}

pub fn host_descriptor() -> String {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    format!("{}-{} {cpu} ({threads} threads)", std::env::consts::OS, std::env::consts::ARCH)
}

/// Builds each variant with seeded weights, counts it and times `runs`
/// single-image forward passes after `warmup` untimed ones. Timed passes
/// go round-robin over the variants so host drift affects all of them alike.
pub fn bench(variants: &[Variant], input_size: usize, runs: usize, warmup: usize) -> Result<BenchReport> {
    if runs < MIN_RUNS || warmup < MIN_WARMUP {
        return Err(Error::Config(format!(
            "bench needs at least {MIN_RUNS} runs and {MIN_WARMUP} warmups, got {runs} and {warmup}"
        )));
    }
    let image = Tensor::from_fn(&[1, 3, input_size, input_size], |i| ((i * 7919) % 255) as f32 / 127.5 - 1.0);
    let nets = variants
        .iter()
        .map(|&v| Network::build(NetworkSpec::preset(v).with_input_size(input_size), Init::Random(0)))
        .collect::<Result<Vec<_>>>()?;
    for net in &nets {
        for _ in 0..warmup {
            net.forward(&image)?;
        }
    }
    let mut samples = vec![Vec::with_capacity(runs); nets.len()];
    for _ in 0..runs {
        for (net, s) in nets.iter().zip(&mut samples) {
            let t = Instant::now();
            net.forward(&image)?;
            s.push(t.elapsed().as_secs_f64() * 1e3);
        }
    }
    let rows = nets
        .iter()
        .zip(&samples)
        .map(|(net, s)| {
            Ok(BenchRow {
                variant: net.spec().variant,
                structure: structure(net.spec()),
                params: net.count_params(),
                macs: net.count_flops(input_size).macs,
                latency: LatencyStats::from_samples(s)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(BenchReport {
        input_size,
        runs,
        warmup,
        host: host_descriptor(),
        rows,
    })
}

impl BenchReport {
    pub fn table(&self) -> String {
        let mut out = format!(
            "host: {}\ninput {s}x{s}, {} runs after {} warmups\n",
            self.host,
            self.runs,
            self.warmup,
            s = self.input_size
        );
        let _ = writeln!(
            out,
            "{:<8} {:<36} {:>10} {:>14} {:>11} {:>9}",
            "variant", "structure", "params", "MACs", "median ms", "p90 ms"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<8} {:<36} {:>10} {:>14} {:>11.2} {:>9.2}",
                r.variant.to_string(),
                r.structure,
                r.params,
                r.macs,
                r.latency.median_ms,
                r.latency.p90_ms
            );
        }
        out
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("variant,structure,params,macs,median_ms,p90_ms,host\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},\"{}\",{},{},{:.4},{:.4},\"{}\"",
                r.variant, r.structure, r.params, r.macs, r.latency.median_ms, r.latency.p90_ms, self.host
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_stats() {
        let s: Vec<f64> = (1..=10).map(f64::from).collect();
        let l = LatencyStats::from_samples(&s).unwrap();
        assert_eq!((l.median_ms, l.p90_ms), (5.0, 9.0));
    }

    #[test]
    fn too_few_runs_rejected() {
        assert!(bench(&[Variant::TypeA], 64, 5, 3).is_err());
    }
}
