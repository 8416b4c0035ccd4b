//! Wall-clock scaling of bucketed versus dense attention.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::glam::{dense_attention_reference, glam_forward, Glam, GlamConfig};
use crate::nn::ParamStore;
use crate::tensor::{parallel_enabled, Tensor};

/// Minimum aggregate time of one timing sample.
const MIN_SAMPLE_SECS: f64 = 0.010;
/// Guard-check size and tolerance (single bucket, 32-bit).
const GUARD_N: usize = 512;
const GUARD_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub channels: usize,
    pub tokens_per_bucket: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![1024, 2048, 4096, 8192],
            channels: 64,
            tokens_per_bucket: 16,
            repeats: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub buckets: usize,
    /// Median seconds per call.
    pub dense_secs: f64,
    pub glam_secs: f64,
    /// Calls per timing sample.
    pub dense_calls: usize,
    pub glam_calls: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub rows: Vec<BenchRow>,
    pub dense_slope: f64,
    pub glam_slope: f64,
    pub guard_max_diff: f64,
    pub parallel: bool,
    pub threads: usize,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

/// Median seconds per call over `repeats` samples, each running enough
/// calls to last at least [`MIN_SAMPLE_SECS`].
fn time_median(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<(f64, usize)> {
    let start = Instant::now();
    f()?;
    let once = start.elapsed().as_secs_f64().max(1e-9);
    let calls = ((MIN_SAMPLE_SECS / once).ceil() as usize).max(1);
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        for _ in 0..calls {
            f()?;
        }
        samples.push(t.elapsed().as_secs_f64() / calls as f64);
    }
    samples.sort_by(f64::total_cmp);
    Ok((samples[samples.len() / 2], calls))
}

fn module(c: usize, buckets: usize, seed: u64) -> Result<(Glam, ParamStore<f32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = GlamConfig {
        dim: c,
        ass_hidden: c,
        buckets,
        hash_seed: seed,
    };
    let glam = Glam::new(&mut store, "bench", cfg, &mut rng)?;
    Ok((glam, store))
}

fn tokens(n: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(&[n, c], |_| StandardNormal.sample(rng))
}

pub fn bench_attention(config: &BenchConfig) -> Result<BenchReport> {
    if config.sizes.is_empty() || config.sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("benchmark sizes must be non-empty and strictly ascending"));
    }
    if config.repeats < 5 || config.channels == 0 || config.tokens_per_bucket == 0 {
        return Err(Error::invalid("benchmark needs repeats >= 5 and positive channels / tokens_per_bucket"));
    }
    let c = config.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let (glam, store) = module(c, 1, config.seed)?;
    let x = tokens(GUARD_N, c, &mut rng);
    let guard = glam_forward(&store, &glam, &x)?.max_abs_diff(&dense_attention_reference(&store, &glam, &x)?);
    if !(guard <= GUARD_TOL) {
        return Err(Error::invalid(format!(
            "guard check failed: bucketed and dense attention differ by {guard} at n = {GUARD_N}"
        )));
    }

    let mut rows = Vec::with_capacity(config.sizes.len());
    for &n in &config.sizes {
        let buckets = (n / config.tokens_per_bucket).max(1);
        let (glam, store) = module(c, buckets, config.seed.wrapping_add(n as u64))?;
        let x = tokens(n, c, &mut rng);
        let (dense_secs, dense_calls) = time_median(config.repeats, || dense_attention_reference(&store, &glam, &x).map(drop))?;
        let (glam_secs, glam_calls) = time_median(config.repeats, || glam_forward(&store, &glam, &x).map(drop))?;
        log::info!("n = {n}: dense {dense_secs:.4}s, bucketed {glam_secs:.4}s");
        rows.push(BenchRow {
            n,
            buckets,
            dense_secs,
            glam_secs,
            dense_calls,
            glam_calls,
        });
    }
    let ns: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let dense: Vec<f64> = rows.iter().map(|r| r.dense_secs).collect();
    let glam: Vec<f64> = rows.iter().map(|r| r.glam_secs).collect();
    let (dense_slope, glam_slope) = if rows.len() > 1 {
        (loglog_slope(&ns, &dense), loglog_slope(&ns, &glam))
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(BenchReport {
        config: config.clone(),
        rows,
        dense_slope,
        glam_slope,
        guard_max_diff: guard,
        parallel: parallel_enabled(),
        threads: if parallel_enabled() { rayon::current_num_threads() } else { 1 },
    })
}

impl BenchReport {
    /// CSV with `#` header and footer lines.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# parallel={} threads={} channels={} tokens_per_bucket={} repeats={} guard_max_diff={:e}",
            self.parallel, self.threads, self.config.channels, self.config.tokens_per_bucket, self.config.repeats, self.guard_max_diff
        );
        s.push_str("n,buckets,dense_ms,glam_ms,dense_calls,glam_calls\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{},{}",
                r.n,
                r.buckets,
                r.dense_secs * 1e3,
                r.glam_secs * 1e3,
                r.dense_calls,
                r.glam_calls
            );
        }
        let _ = writeln!(s, "# slope_dense={:.4} slope_glam={:.4}", self.dense_slope, self.glam_slope);
        s
    }

    /// Log-log plot of both timing curves.
    pub fn to_svg(&self) -> String {
        let (w, h, m) = (640.0, 420.0, 60.0);
        let all: Vec<f64> = self.rows.iter().flat_map(|r| [r.dense_secs, r.glam_secs]).collect();
        let (ymin, ymax) = all.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v.ln()), b.max(v.ln())));
        let (xmin, xmax) = (
            (self.rows.first().map_or(1, |r| r.n) as f64).ln(),
            (self.rows.last().map_or(2, |r| r.n) as f64).ln(),
        );
        let sx = |n: usize| m + ((n as f64).ln() - xmin) / (xmax - xmin).max(1e-9) * (w - 2.0 * m);
        let sy = |t: f64| h - m - (t.ln() - ymin) / (ymax - ymin).max(1e-9) * (h - 2.0 * m);
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<path d="M{m} {m} V{} H{}" stroke="black" fill="none"/>"#,
            h - m,
            w - m
        );
        for (name, color, pick, slope) in [
            ("dense", "#c0392b", 0, self.dense_slope),
            ("bucketed", "#2471a3", 1, self.glam_slope),
        ] {
            let pts: Vec<String> = self
                .rows
                .iter()
                .map(|r| {
                    let t = if pick == 0 { r.dense_secs } else { r.glam_secs };
                    format!("{:.1},{:.1}", sx(r.n), sy(t))
                })
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" stroke="{color}" stroke-width="2" fill="none"/>"#,
                pts.join(" ")
            );
            let y = if pick == 0 { 20.0 } else { 36.0 };
            let _ = writeln!(s, r#"<text x="{}" y="{y}" fill="{color}">{name} (slope {slope:.2})</text>"#, m + 10.0);
        }
        for r in &self.rows {
            let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, sx(r.n), h - m + 18.0, r.n);
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">tokens (log scale)</text>"#, w / 2.0, h - 15.0);
        let _ = writeln!(
            s,
            r#"<text x="15" y="{}" transform="rotate(-90 15 {})" text-anchor="middle">seconds (log scale)</text>"#,
            h / 2.0,
            h / 2.0
        );
        s.push_str("</svg>\n");
        s
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [("bench_attn.csv", self.to_csv()), ("bench_attn.svg", self.to_svg())] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}
