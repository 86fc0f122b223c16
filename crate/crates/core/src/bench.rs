//! Wall-clock scaling of the two sequence-mixing kernels.
//!
//! Only the mixing computation is timed: for Grassmann mixing the reduction,
//! pairing, Plücker encoding, normalization, averaging and projection; for
//! attention the scores `QKᵀ`, the causal softmax and the product with `V`.
//! Inputs and work buffers are allocated before the clock starts.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::ops::softmax_rows;
use crate::blocks::{pair_average, project_features, MixSettings, Pairing};
use crate::error::{Error, Result};
use crate::geometry::{plucker_dim, DEFAULT_PLUCKER_EPS};
use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mechanism {
    GrassmannMix,
    AttentionScores,
}

impl Mechanism {
    pub const ALL: [Mechanism; 2] = [Mechanism::GrassmannMix, Mechanism::AttentionScores];
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mechanism::GrassmannMix => "grassmann-mix",
            Mechanism::AttentionScores => "attention-scores",
        })
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grassmann-mix" => Ok(Mechanism::GrassmannMix),
            "attention-scores" => Ok(Mechanism::AttentionScores),
            other => Err(Error::invalid(format!("unknown mechanism '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub d: usize,
    pub r: usize,
    pub offsets: Vec<usize>,
    pub repeats: usize,
    pub warmups: usize,
    /// Each sample repeats the kernel until at least this much wall time
    /// has passed and reports the mean per run.
    pub min_sample_seconds: f64,
    pub seed: u64,
    /// Grid points whose working set would exceed this many bytes are
    /// skipped.
    pub max_bytes: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            d: 64,
            r: 16,
            offsets: vec![1, 2, 4, 8, 12, 16],
            repeats: 5,
            warmups: 2,
            min_sample_seconds: 0.05,
            seed: 0,
            max_bytes: 1 << 30,
        }
    }
}

impl BenchConfig {
    fn validate(&self) -> Result<()> {
        if self.repeats < 5 {
            return Err(Error::invalid(format!("repeats = {} but at least 5 are required", self.repeats)));
        }
        if !(self.min_sample_seconds >= 0.0 && self.min_sample_seconds.is_finite()) {
            return Err(Error::invalid("min_sample_seconds must be finite and non-negative"));
        }
        if self.r < 2 || self.d == 0 || self.offsets.is_empty() || self.offsets.contains(&0) {
            return Err(Error::invalid("need d > 0, r >= 2 and a non-empty set of positive offsets"));
        }
        Ok(())
    }

    /// Bytes of inputs and buffers one run at length `l` needs.
    pub fn working_set(&self, mechanism: Mechanism, l: usize) -> usize {
        let (d, r, c) = (self.d, self.r, plucker_dim(self.r));
        let floats = match mechanism {
            Mechanism::GrassmannMix => l * d + r * d + r + d * c + d + l * r + l * c + l * d,
            Mechanism::AttentionScores => 4 * l * d + l * l,
        };
        floats.saturating_mul(4).saturating_add(l * std::mem::size_of::<usize>())
    }
}

/// Wall-clock samples of one grid point, in seconds per kernel run.
#[derive(Debug, Clone, PartialEq)]
pub struct Timing {
    pub samples: Vec<f64>,
    /// Kernel runs averaged into each sample.
    pub runs_per_sample: usize,
}

impl Timing {
    pub fn median(&self) -> f64 {
        median(&self.samples)
    }
}

pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "median of no samples");
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn alloc(n: usize) -> Option<Vec<f32>> {
    let mut v = Vec::new();
    v.try_reserve_exact(n).ok()?;
    v.resize(n, 0.0);
    Some(v)
}

fn random(rng: &mut ChaCha8Rng, n: usize) -> Option<Vec<f32>> {
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let mut v = alloc(n)?;
    v.iter_mut().for_each(|x| *x = normal.sample(rng));
    Some(v)
}

/// Pre-allocated inputs and buffers for one Grassmann mixing run.
pub(crate) struct GrassmannKernel {
    l: usize,
    d: usize,
    r: usize,
    offsets: Vec<usize>,
    h: Vec<f32>,
    w_red: Vec<f32>,
    b_red: Vec<f32>,
    w_plu: Vec<f32>,
    b_plu: Vec<f32>,
    z: Vec<f32>,
    pbar: Vec<f32>,
    counts: Vec<usize>,
    pub(crate) out: Vec<f32>,
}

impl GrassmannKernel {
    pub(crate) fn new(cfg: &BenchConfig, l: usize) -> Option<Self> {
        let (d, r, c) = (cfg.d, cfg.r, plucker_dim(cfg.r));
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut counts = Vec::new();
        counts.try_reserve_exact(l).ok()?;
        counts.resize(l, 0);
        Some(GrassmannKernel {
            l,
            d,
            r,
            offsets: cfg.offsets.clone(),
            h: random(&mut rng, l * d)?,
            w_red: random(&mut rng, r * d)?,
            b_red: random(&mut rng, r)?,
            w_plu: random(&mut rng, d * c)?,
            b_plu: random(&mut rng, d)?,
            z: alloc(l * r)?,
            pbar: alloc(l * c)?,
            counts,
            out: alloc(l * d)?,
        })
    }

    pub(crate) fn run(&mut self) {
        let (l, d, r) = (self.l, self.d, self.r);
        f32::gemm(l, d, r, 1.0, &self.h, d, 1, &self.w_red, 1, d, 0.0, &mut self.z, r, 1);
        for row in self.z.chunks_mut(r) {
            row.iter_mut().zip(&self.b_red).for_each(|(v, b)| *v += b);
        }
        let mix = MixSettings {
            offsets: &self.offsets,
            pairing: Pairing::Backward,
            eps: DEFAULT_PLUCKER_EPS,
        };
        pair_average(&self.z, r, l, &mix, &mut self.pbar, &mut self.counts);
        project_features(&self.pbar, &self.counts, &self.w_plu, &self.b_plu, &mut self.out);
    }
}

/// Pre-allocated inputs and buffers for one single-head causal attention run.
pub(crate) struct AttentionKernel {
    l: usize,
    d: usize,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    scores: Vec<f32>,
    pub(crate) out: Vec<f32>,
}

impl AttentionKernel {
    pub(crate) fn new(cfg: &BenchConfig, l: usize) -> Option<Self> {
        let d = cfg.d;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Some(AttentionKernel {
            l,
            d,
            q: random(&mut rng, l * d)?,
            k: random(&mut rng, l * d)?,
            v: random(&mut rng, l * d)?,
            scores: alloc(l.checked_mul(l)?)?,
            out: alloc(l * d)?,
        })
    }

    pub(crate) fn run(&mut self) {
        let (l, d) = (self.l, self.d);
        let scale = 1.0 / (d as f32).sqrt();
        f32::gemm(l, d, l, scale, &self.q, d, 1, &self.k, 1, d, 0.0, &mut self.scores, l, 1);
        for i in 0..l {
            let row = &mut self.scores[i * l..(i + 1) * l];
            softmax_rows(&mut row[..=i], i + 1);
            row[i + 1..].iter_mut().for_each(|v| *v = 0.0);
        }
        f32::gemm(l, l, d, 1.0, &self.scores, l, 1, &self.v, d, 1, 0.0, &mut self.out, d, 1);
    }
}

enum Kernel {
    Grassmann(GrassmannKernel),
    Attention(AttentionKernel),
}

impl Kernel {
    fn run(&mut self) {
        match self {
            Kernel::Grassmann(k) => k.run(),
            Kernel::Attention(k) => k.run(),
        }
    }

    /// Mean seconds per run over `n` back-to-back runs.
    fn sample(&mut self, n: usize) -> f64 {
        let t = Instant::now();
        for _ in 0..n {
            self.run();
        }
        t.elapsed().as_secs_f64() / n as f64
    }
}

/// A kernel ready to be sampled, with its runs-per-sample already chosen.
struct Prepared {
    kernel: Kernel,
    runs: usize,
}

fn prepare(mechanism: Mechanism, l: usize, cfg: &BenchConfig) -> Result<Option<Prepared>> {
    cfg.validate()?;
    if l == 0 {
        return Err(Error::invalid("sequence length must be positive"));
    }
    if cfg.working_set(mechanism, l) > cfg.max_bytes {
        return Ok(None);
    }
    let kernel = match mechanism {
        Mechanism::GrassmannMix => GrassmannKernel::new(cfg, l).map(Kernel::Grassmann),
        Mechanism::AttentionScores => AttentionKernel::new(cfg, l).map(Kernel::Attention),
    };
    let Some(mut kernel) = kernel else {
        return Ok(None);
    };
    for _ in 0..cfg.warmups {
        kernel.run();
    }
    let mut runs = 1;
    while runs < 1 << 20 && kernel.sample(runs) * (runs as f64) < cfg.min_sample_seconds {
        runs *= 2;
    }
    Ok(Some(Prepared { kernel, runs }))
}

/// Takes `repeats` samples of one mechanism at length `l` after the
/// configured warm-ups. Returns `None` when the working set does not fit.
pub fn time_mixing(mechanism: Mechanism, l: usize, cfg: &BenchConfig) -> Result<Option<Timing>> {
    Ok(prepare(mechanism, l, cfg)?.map(|mut p| Timing {
        samples: (0..cfg.repeats).map(|_| p.kernel.sample(p.runs)).collect(),
        runs_per_sample: p.runs,
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub mechanism: Mechanism,
    pub l: usize,
    pub d: usize,
    pub r: usize,
    pub m: usize,
    pub repeats: usize,
    /// `None` when the grid point was skipped for lack of memory.
    pub median_seconds: Option<f64>,
}

/// `time(l_to) / time(l_from)` for adjacent lengths with `l_to = 2 l_from`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoublingRatio {
    pub mechanism: Mechanism,
    pub l_from: usize,
    pub l_to: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    /// Sorted by mechanism, then length.
    pub rows: Vec<BenchRow>,
    pub ratios: Vec<DoublingRatio>,
}

impl BenchReport {
    /// `(L, median seconds)` of the timed rows of one mechanism.
    pub fn series(&self, mechanism: Mechanism) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.mechanism == mechanism)
            .filter_map(|r| r.median_seconds.map(|t| (r.l, t)))
            .collect()
    }

    pub fn ratios_for(&self, mechanism: Mechanism) -> Vec<DoublingRatio> {
        self.ratios.iter().filter(|r| r.mechanism == mechanism).copied().collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("mechanism,L,d,r,m,repeats,median_seconds\n");
        for r in &self.rows {
            let t = r.median_seconds.map_or("skipped".to_string(), |t| format!("{t:.9}"));
            out.push_str(&format!("{},{},{},{},{},{},{t}\n", r.mechanism, r.l, r.d, r.r, r.m, r.repeats));
        }
        out.push_str("\nmechanism,L_from,L_to,ratio\n");
        for r in &self.ratios {
            out.push_str(&format!("{},{},{},{:.6}\n", r.mechanism, r.l_from, r.l_to, r.ratio));
        }
        out
    }
}

fn doubling_ratios(rows: &[BenchRow]) -> Vec<DoublingRatio> {
    rows.windows(2)
        .filter(|w| w[0].mechanism == w[1].mechanism && w[1].l == 2 * w[0].l)
        .filter_map(|w| match (w[0].median_seconds, w[1].median_seconds) {
            (Some(a), Some(b)) => Some(DoublingRatio {
                mechanism: w[0].mechanism,
                l_from: w[0].l,
                l_to: w[1].l,
                ratio: b / a,
            }),
            _ => None,
        })
        .collect()
}

/// Runs the full `mechanisms x lengths` grid. Samples are taken round-robin
/// across grid points so slow phases of the machine affect all points alike.
pub fn scaling_report(lengths: &[usize], mechanisms: &[Mechanism], cfg: &BenchConfig) -> Result<BenchReport> {
    if lengths.is_empty() || lengths.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid(format!("lengths {lengths:?} must be non-empty and strictly increasing")));
    }
    let mut mechanisms = mechanisms.to_vec();
    mechanisms.sort();
    mechanisms.dedup();
    let mut points = Vec::new();
    for &mechanism in &mechanisms {
        for &l in lengths {
            points.push((mechanism, l, prepare(mechanism, l, cfg)?));
        }
    }
    let mut samples = vec![Vec::with_capacity(cfg.repeats); points.len()];
    for _ in 0..cfg.repeats {
        for ((_, _, prepared), out) in points.iter_mut().zip(&mut samples) {
            if let Some(p) = prepared {
                out.push(p.kernel.sample(p.runs));
            }
        }
    }
    let rows = points
        .iter()
        .zip(&samples)
        .map(|((mechanism, l, prepared), s)| BenchRow {
            mechanism: *mechanism,
            l: *l,
            d: cfg.d,
            r: cfg.r,
            m: cfg.offsets.len(),
            repeats: cfg.repeats,
            median_seconds: prepared.as_ref().map(|_| median(s)),
        })
        .collect::<Vec<_>>();
    let ratios = doubling_ratios(&rows);
    Ok(BenchReport { rows, ratios })
}

/// Coefficient of determination of the least-squares line `y = a + b x`.
pub fn linear_fit_r2(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = points.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    let syy: f64 = points.iter().map(|(_, y)| (y - my).powi(2)).sum();
    if syy == 0.0 {
        return 1.0;
    }
    let b = sxy / sxx;
    let ss_res: f64 = points.iter().map(|(x, y)| (y - my - b * (x - mx)).powi(2)).sum();
    1.0 - ss_res / syy
}

/// Residual sum of squares of the best fit `y = a x^power` through the origin.
pub fn power_fit_residual(points: &[(f64, f64)], power: i32) -> f64 {
    let num: f64 = points.iter().map(|(x, y)| x.powi(power) * y).sum();
    let den: f64 = points.iter().map(|(x, _)| x.powi(2 * power)).sum();
    let a = num / den;
    points.iter().map(|(x, y)| (y - a * x.powi(power)).powi(2)).sum()
}
