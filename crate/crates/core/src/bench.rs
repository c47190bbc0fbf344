//! Serialization latency benchmark.

use std::fmt::Write as _;
use std::io::Write;
use std::time::Instant;

use crate::backbone::synthetic_scene;
use crate::curves::{make_order, Curve, SerializationOrder};
use crate::error::{Error, Result};

/// nuScenes voxel grid.
pub const BENCH_GRID: [u32; 3] = [360, 360, 32];

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub voxels: usize,
    pub curves: Vec<Curve>,
    pub seed: u64,
    pub warmup: usize,
    pub repetitions: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            voxels: 20_000,
            curves: vec![Curve::ZOrderX, Curve::ZOrderY, Curve::Hilbert],
            seed: 0,
            warmup: 3,
            repetitions: 31,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub curve: Curve,
    pub voxels: usize,
    pub median_ms: f64,
    pub valid: bool,
    pub order: SerializationOrder,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
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

/// Times `make_order` per curve on a seeded uniform scene.
pub fn serialize_bench(opts: &BenchOptions) -> Result<BenchReport> {
    if opts.voxels == 0 {
        return Err(Error::config("voxels", "need at least one voxel"));
    }
    if opts.repetitions < 10 || opts.warmup < 2 {
        return Err(Error::config(
            "repetitions",
            "need at least 10 timed repetitions and 2 warm-up runs",
        ));
    }
    let scene = synthetic_scene(opts.voxels, BENCH_GRID, 0, opts.seed)?;
    let mut rows = Vec::with_capacity(opts.curves.len());
    for &curve in &opts.curves {
        let curve = match curve {
            Curve::Random(_) => Curve::Random(opts.seed),
            c => c,
        };
        for _ in 0..opts.warmup {
            std::hint::black_box(make_order(&scene, curve)?);
        }
        let mut times = Vec::with_capacity(opts.repetitions);
        let mut last = None;
        for _ in 0..opts.repetitions {
            let start = Instant::now();
            let order = std::hint::black_box(make_order(&scene, curve)?);
            times.push(start.elapsed().as_secs_f64() * 1e3);
            last = Some(order);
        }
        let order = last.expect("at least one repetition");
        rows.push(BenchRow {
            curve,
            voxels: opts.voxels,
            median_ms: median(times),
            valid: order.is_valid(),
            order,
        });
    }
    Ok(BenchReport { rows })
}

impl BenchReport {
    pub fn row(&self, curve_name: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.curve.name() == curve_name)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "curve,voxels,median_ms,valid")?;
        for r in &self.rows {
            writeln!(w, "{},{},{:.6},{}", r.curve, r.voxels, r.median_ms, r.valid)?;
        }
        Ok(())
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10} {:>8} {:>12} {:>6}",
            "curve", "voxels", "median ms", "valid"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<10} {:>8} {:>12.4} {:>6}",
                r.curve.name(),
                r.voxels,
                r.median_ms,
                r.valid
            );
        }
        if let (Some(h), Some(z)) = (self.row("hilbert"), self.row("zorder-x")) {
            if z.median_ms > 0.0 {
                let _ = writeln!(
                    s,
                    "hilbert / zorder-x latency ratio: {:.1}",
                    h.median_ms / z.median_ms
                );
            }
        }
        let _ = writeln!(
            s,
            "note: coordinates are uniform over a {}x{}x{} grid; real LiDAR scenes are far from uniform.",
            BENCH_GRID[0], BENCH_GRID[1], BENCH_GRID[2]
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_voxel_bench() {
        let opts = BenchOptions {
            voxels: 1,
            curves: vec![Curve::ZOrderX, Curve::Hilbert],
            ..BenchOptions::default()
        };
        let report = serialize_bench(&opts).unwrap();
        for r in &report.rows {
            assert_eq!(r.order.perm, vec![0]);
            assert!(r.valid);
        }
    }

    #[test]
    fn same_seed_same_permutations() {
        let opts = BenchOptions {
            voxels: 500,
            curves: vec![Curve::ZOrderY, Curve::Random(0)],
            seed: 4,
            ..BenchOptions::default()
        };
        let a = serialize_bench(&opts).unwrap();
        let b = serialize_bench(&opts).unwrap();
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!(x.order, y.order);
        }
    }

    #[test]
    fn rejects_impossible_requests() {
        let zero = BenchOptions {
            voxels: 0,
            ..BenchOptions::default()
        };
        assert!(serialize_bench(&zero).is_err());
        let too_many = BenchOptions {
            voxels: 360 * 360 * 32 + 1,
            ..BenchOptions::default()
        };
        assert!(serialize_bench(&too_many).is_err());
    }

    #[test]
    fn csv_has_header() {
        let opts = BenchOptions {
            voxels: 10,
            curves: vec![Curve::ZOrderX],
            ..BenchOptions::default()
        };
        let mut buf = Vec::new();
        serialize_bench(&opts).unwrap().write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("curve,voxels,median_ms,valid\nzorder-x,10,"));
    }
}
