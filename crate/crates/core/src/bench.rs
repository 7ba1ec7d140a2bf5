//! Attention latency harness: median wall time per (variant, length), allocation peaks,
//! and a log-log least-squares slope per variant.

use std::alloc::{GlobalAlloc, Layout, System};
use std::hint::black_box;
use std::io::Write;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::attention::{default_positions, head_attention, AttentionConfig, AttentionVariant};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static ACTIVE: AtomicBool = AtomicBool::new(false);

/// System allocator with live/peak byte counters. Install it as the global allocator in a
/// binary or test target to get measured peaks instead of analytic estimates.
pub struct TrackingAllocator;

impl TrackingAllocator {
    /// True once any allocation has gone through the tracker.
    pub fn is_active() -> bool {
        ACTIVE.load(Ordering::Relaxed)
    }

    pub fn current_bytes() -> usize {
        CURRENT.load(Ordering::Relaxed)
    }

    pub fn peak_bytes() -> usize {
        PEAK.load(Ordering::Relaxed)
    }

    /// Lowers the peak to the current live size and returns that size.
    pub fn reset_peak() -> usize {
        let now = CURRENT.load(Ordering::Relaxed);
        PEAK.store(now, Ordering::Relaxed);
        now
    }

    fn grow(bytes: usize) {
        let now = CURRENT.fetch_add(bytes, Ordering::Relaxed) + bytes;
        PEAK.fetch_max(now, Ordering::Relaxed);
    }

    fn shrink(bytes: usize) {
        CURRENT.fetch_sub(bytes, Ordering::Relaxed);
    }
}

unsafe impl GlobalAlloc for TrackingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            ACTIVE.store(true, Ordering::Relaxed);
            Self::grow(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            ACTIVE.store(true, Ordering::Relaxed);
            Self::grow(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        Self::shrink(layout.size());
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            if new_size > layout.size() {
                Self::grow(new_size - layout.size());
            } else {
                Self::shrink(layout.size() - new_size);
            }
        }
        p
    }
}

/// Bytes of intermediate buffers one head of `variant` needs at length `l`, width `d`.
pub fn estimated_peak_bytes(variant: AttentionVariant, l: usize, d: usize) -> usize {
    let f = std::mem::size_of::<f64>();
    let elems = match variant {
        // kᵀ, scores, output
        AttentionVariant::Softmax => l.saturating_mul(l).saturating_add(2 * l * d),
        // φ(q), φ(k), S, z, numerator, denominator, output
        AttentionVariant::Linearized => 4 * l * d + d * d + d + l,
        // plus the permuted copies of φ(q) and φ(k)
        AttentionVariant::LinearizedRpe => 6 * l * d + d * d + d + l,
    };
    elems.saturating_mul(f)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchSpec {
    pub lengths: Vec<usize>,
    pub variants: Vec<AttentionVariant>,
    pub head_dim: usize,
    pub heads: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub seed: u64,
    /// Points whose estimated peak exceeds this are recorded as out of memory without running.
    pub memory_cap_bytes: Option<usize>,
    /// More than one thread evaluates heads in parallel (throughput mode).
    pub threads: usize,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            lengths: vec![256, 512, 1024, 2048, 4096, 8192],
            variants: AttentionVariant::ALL.to_vec(),
            head_dim: 64,
            heads: 1,
            repetitions: 10,
            warmup: 3,
            seed: 42,
            memory_cap_bytes: None,
            threads: 1,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.lengths.is_empty() || self.lengths[0] == 0 {
            p.push("lengths must be non-empty and positive".to_string());
        }
        if self.lengths.windows(2).any(|w| w[0] >= w[1]) {
            p.push(format!("lengths must be strictly increasing, got {:?}", self.lengths));
        }
        if self.variants.is_empty() {
            p.push("at least one variant is required".into());
        }
        if self.repetitions < 3 {
            p.push(format!("repetitions must be at least 3, got {}", self.repetitions));
        }
        if self.head_dim == 0 || self.heads == 0 {
            p.push("heads and head_dim must be positive".into());
        }
        if self.threads == 0 {
            p.push("threads must be at least 1".into());
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchPoint {
    pub variant: AttentionVariant,
    pub length: usize,
    /// `None` when the point ran out of memory.
    pub median_ms: Option<f64>,
    pub ms_per_element: Option<f64>,
    pub peak_bytes_est: usize,
    /// Whether the peak comes from allocator counters rather than the analytic estimate.
    pub peak_measured: bool,
}

impl BenchPoint {
    pub fn is_oom(&self) -> bool {
        self.median_ms.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantSlope {
    pub variant: AttentionVariant,
    /// `None` with fewer than four completed points.
    pub slope: Option<f64>,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub spec: BenchSpec,
    pub points: Vec<BenchPoint>,
    pub slopes: Vec<VariantSlope>,
    pub mode: &'static str,
}

pub const CSV_HEADER: [&str; 5] = ["variant", "length", "median_ms", "ms_per_element", "peak_bytes_est"];
const OOM: &str = "oom";

impl BenchReport {
    pub fn point(&self, variant: AttentionVariant, length: usize) -> Option<&BenchPoint> {
        self.points.iter().find(|p| p.variant == variant && p.length == length)
    }

    pub fn slope(&self, variant: AttentionVariant) -> Option<f64> {
        self.slopes.iter().find(|s| s.variant == variant).and_then(|s| s.slope)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(CSV_HEADER).map_err(csv_err)?;
        for p in &self.points {
            let fmt = |v: Option<f64>| v.map_or_else(|| OOM.to_string(), |x| x.to_string());
            w.write_record([
                p.variant.name().to_string(),
                p.length.to_string(),
                fmt(p.median_ms),
                fmt(p.ms_per_element),
                p.peak_bytes_est.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Least-squares slope of `ln y` against `ln x`. Needs at least two distinct `x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    let n = points.len() as f64;
    if points.len() < 2 || points.iter().any(|&(x, y)| x <= 0.0 || y <= 0.0) {
        return None;
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

struct Inputs {
    q: Vec<Tensor>,
    k: Vec<Tensor>,
    v: Vec<Tensor>,
    positions: Vec<i64>,
}

fn run_once(config: &AttentionConfig, inputs: &Inputs, pool: Option<&rayon::ThreadPool>) -> Result<()> {
    let head = |h: usize| {
        head_attention(config, h, &inputs.q[h], &inputs.k[h], &inputs.v[h], &inputs.positions, &inputs.positions)
            .map(|t| black_box(t.data().len()))
    };
    match pool {
        Some(pool) => pool.install(|| (0..config.num_heads).into_par_iter().map(head).collect::<Result<Vec<_>>>())?,
        None => (0..config.num_heads).map(head).collect::<Result<Vec<_>>>()?,
    };
    Ok(())
}

struct Slot {
    length: usize,
    estimate: usize,
    inputs: Option<Inputs>,
    times: Vec<f64>,
    peaks: Vec<f64>,
}

/// Measures every length of one variant. Repetitions are interleaved across lengths
/// (rep 1 of every length, then rep 2, ...) so slow phases of the machine spread over all
/// lengths instead of biasing whichever length happened to run during them.
fn measure_variant(spec: &BenchSpec, variant: AttentionVariant, pool: Option<&rayon::ThreadPool>) -> Result<Vec<BenchPoint>> {
    let config = AttentionConfig::new(variant, spec.heads, spec.head_dim)?;
    let mut slots: Vec<Slot> = spec
        .lengths
        .iter()
        .map(|&length| {
            let estimate = estimated_peak_bytes(variant, length, spec.head_dim).saturating_mul(spec.heads);
            let inputs = if spec.memory_cap_bytes.is_some_and(|cap| estimate > cap) {
                log::warn!("{variant} at L={length}: estimated {estimate} bytes exceeds the cap, recorded as oom");
                None
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (length as u64).rotate_left(32));
                let mut gen = || -> Vec<Tensor> {
                    (0..spec.heads)
                        .map(|_| Tensor::randn(&[length, spec.head_dim], &mut rng))
                        .collect()
                };
                Some(Inputs {
                    q: gen(),
                    k: gen(),
                    v: gen(),
                    positions: default_positions(length),
                })
            };
            Slot {
                length,
                estimate,
                inputs,
                times: Vec::with_capacity(spec.repetitions),
                peaks: Vec::with_capacity(spec.repetitions),
            }
        })
        .collect();

    for rep in 0..spec.warmup + spec.repetitions {
        for slot in &mut slots {
            let Some(inputs) = &slot.inputs else { continue };
            let base = TrackingAllocator::reset_peak();
            let start = Instant::now();
            match run_once(&config, inputs, pool) {
                Ok(()) => {}
                Err(Error::OutOfMemory { bytes }) => {
                    log::warn!("{variant} at L={}: allocation of {bytes} bytes failed, recorded as oom", slot.length);
                    slot.inputs = None;
                    slot.times.clear();
                    continue;
                }
                Err(e) => return Err(e),
            }
            let elapsed = start.elapsed().as_secs_f64() * 1e3;
            if rep >= spec.warmup {
                slot.times.push(elapsed);
                slot.peaks.push(TrackingAllocator::peak_bytes().saturating_sub(base) as f64);
            }
        }
    }

    let measured = TrackingAllocator::is_active();
    Ok(slots
        .into_iter()
        .map(|slot| {
            if slot.inputs.is_none() {
                return BenchPoint {
                    variant,
                    length: slot.length,
                    median_ms: None,
                    ms_per_element: None,
                    peak_bytes_est: slot.estimate,
                    peak_measured: false,
                };
            }
            let median_ms = median(slot.times);
            BenchPoint {
                variant,
                length: slot.length,
                median_ms: Some(median_ms),
                ms_per_element: Some(median_ms / slot.length as f64),
                peak_bytes_est: if measured { median(slot.peaks) as usize } else { slot.estimate },
                peak_measured: measured,
            }
        })
        .collect())
}

/// Runs every (variant, length) pair of `spec`, one variant at a time.
pub fn run_bench(spec: &BenchSpec) -> Result<BenchReport> {
    spec.validate()?;
    let pool = if spec.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(spec.threads)
                .build()
                .map_err(|e| Error::config(e.to_string()))?,
        )
    } else {
        None
    };
    let mut points = Vec::new();
    let mut slopes = Vec::new();
    for &variant in &spec.variants {
        let measured = measure_variant(spec, variant, pool.as_ref())?;
        let fit: Vec<(f64, f64)> = measured
            .iter()
            .filter_map(|p| p.median_ms.map(|ms| (p.length as f64, ms)))
            .collect();
        for p in &measured {
            log::info!("{variant} L={}: {:?} ms", p.length, p.median_ms);
        }
        points.extend(measured);
        slopes.push(VariantSlope {
            variant,
            slope: if fit.len() >= 4 { log_log_slope(&fit) } else { None },
            points: fit.len(),
        });
    }
    Ok(BenchReport {
        spec: spec.clone(),
        points,
        slopes,
        mode: if spec.threads > 1 { "throughput (parallel heads)" } else { "single-threaded" },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(lengths: Vec<usize>) -> BenchSpec {
        BenchSpec {
            lengths,
            head_dim: 8,
            repetitions: 3,
            warmup: 1,
            ..BenchSpec::default()
        }
    }

    #[test]
    fn slope_of_exact_power_laws() {
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 4.0, 8.0].iter().map(|&x: &f64| (x, 3.0 * x.powi(2))).collect();
        assert!((log_log_slope(&pts).unwrap() - 2.0).abs() < 1e-12);
        let flat: Vec<(f64, f64)> = [1.0, 10.0, 100.0].iter().map(|&x| (x, 5.0)).collect();
        assert!(log_log_slope(&flat).unwrap().abs() < 1e-12);
        assert!(log_log_slope(&[(1.0, 1.0)]).is_none());
        assert!(log_log_slope(&[(1.0, 1.0), (1.0, 2.0)]).is_none());
    }

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn spec_validation_lists_problems() {
        let bad = BenchSpec {
            lengths: vec![512, 256],
            repetitions: 2,
            threads: 0,
            ..BenchSpec::default()
        };
        match bad.validate() {
            Err(Error::Config(p)) => assert_eq!(p.len(), 3),
            other => panic!("{other:?}"),
        }
        assert!(BenchSpec::default().validate().is_ok());
    }

    #[test]
    fn one_point_per_pair() {
        let r = run_bench(&quick(vec![16, 32])).unwrap();
        assert_eq!(r.points.len(), 6);
        assert!(r.points.iter().all(|p| p.median_ms.unwrap() >= 0.0));
        assert!(r.slopes.iter().all(|s| s.slope.is_none() && s.points == 2));
    }

    #[test]
    fn cap_records_oom_for_quadratic_variant_only() {
        let spec = BenchSpec {
            memory_cap_bytes: Some(estimated_peak_bytes(AttentionVariant::Softmax, 32, 8) - 1),
            ..quick(vec![16, 32])
        };
        let r = run_bench(&spec).unwrap();
        assert!(r.point(AttentionVariant::Softmax, 32).unwrap().is_oom());
        assert!(!r.point(AttentionVariant::Softmax, 16).unwrap().is_oom());
        assert!(!r.point(AttentionVariant::Linearized, 32).unwrap().is_oom());
    }

    #[test]
    fn csv_schema() {
        let spec = BenchSpec {
            memory_cap_bytes: Some(estimated_peak_bytes(AttentionVariant::Softmax, 32, 8) - 1),
            variants: vec![AttentionVariant::Softmax],
            ..quick(vec![16, 32])
        };
        let mut buf = Vec::new();
        run_bench(&spec).unwrap().write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "variant,length,median_ms,ms_per_element,peak_bytes_est");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("softmax,16,"));
        assert!(lines[2].starts_with("softmax,32,oom,oom,"));
    }

    #[test]
    fn parallel_heads_mode() {
        let spec = BenchSpec {
            heads: 4,
            threads: 2,
            variants: vec![AttentionVariant::LinearizedRpe],
            ..quick(vec![16])
        };
        let r = run_bench(&spec).unwrap();
        assert_eq!(r.mode, "throughput (parallel heads)");
        assert_eq!(r.points.len(), 1);
    }

    #[test]
    fn estimates_grow_quadratically_for_softmax_only() {
        let s = |l| estimated_peak_bytes(AttentionVariant::Softmax, l, 64) as f64;
        let r = |l| estimated_peak_bytes(AttentionVariant::LinearizedRpe, l, 64) as f64;
        assert!(s(8192) / s(4096) > 3.5);
        assert!(r(8192) / r(4096) < 2.1);
    }
}
