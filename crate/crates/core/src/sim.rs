//! Log-coordinate Euler–Maruyama simulation, deterministic parallel
//! ensembles and occupation-measure accumulation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ChainSpec, State, TildeSpec};
use crate::rng::NormalStream;

pub const DEFAULT_DT: f64 = 1e-3;
pub const DEFAULT_CAP: f64 = 60.0;
pub const MAX_RECORDS: u64 = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    pub burn_in: f64,
    pub thin: u64,
    pub seed: u64,
    pub cap: f64,
}

impl SimConfig {
    /// Defaults for a horizon: `dt = 1e-3`, 20% burn-in, at most 10⁶ records.
    pub fn new(horizon: f64, seed: u64) -> Self {
        let mut c = Self {
            dt: DEFAULT_DT,
            horizon,
            burn_in: 0.2 * horizon,
            thin: 1,
            seed,
            cap: DEFAULT_CAP,
        };
        c.thin = c.default_thin();
        c
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self.thin = self.default_thin();
        self
    }

    pub fn with_burn_in(mut self, burn_in: f64) -> Self {
        self.burn_in = burn_in;
        self.thin = self.default_thin();
        self
    }

    pub fn with_thin(mut self, thin: u64) -> Self {
        self.thin = thin;
        self
    }

    /// Smallest stride keeping the post-burn-in record count at most 10⁶.
    pub fn default_thin(&self) -> u64 {
        if !(self.dt > 0.0) || !(self.horizon > self.burn_in) {
            return 1;
        }
        let steps = ((self.horizon - self.burn_in) / self.dt).ceil() as u64 + 1;
        steps.div_ceil(MAX_RECORDS).max(1)
    }

    pub fn total_steps(&self) -> u64 {
        (self.horizon / self.dt).round() as u64
    }

    pub fn burn_steps(&self) -> u64 {
        (self.burn_in / self.dt).round() as u64
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad("horizon must be positive");
        }
        if !(self.burn_in >= 0.0 && self.burn_in < self.horizon) {
            return bad("burn_in must lie in [0, horizon)");
        }
        if self.thin < 1 {
            return bad("thin must be at least 1");
        }
        if !(self.cap > 0.0) {
            return bad("cap must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("initial state must be nonnegative, finite and of length {expected}")]
    InvalidStart { expected: usize },
    #[error("trajectory has no records")]
    EmptyTrajectory,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExitInfo {
    pub time: f64,
    /// 1-based species whose log-density exceeded the cap.
    pub species: usize,
    pub reason: &'static str,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub n: usize,
    pub times: Vec<f64>,
    /// Row-major `times.len() × n` densities.
    pub states: Vec<f64>,
    pub exited: Option<ExitInfo>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.n..(k + 1) * self.n]
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, &[f64])> {
        self.times.iter().copied().zip(self.states.chunks_exact(self.n))
    }

    /// CSV with header `t,x1..xn`; uses shortest round-trip formatting.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t");
        for i in 1..=self.n {
            s.push_str(&format!(",x{i}"));
        }
        s.push('\n');
        for (t, x) in self.iter() {
            s.push_str(&format!("{t}"));
            for v in x {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

/// `y'_i = y_i + F̃_i(e^y)·dt + σ_i·√dt·ξ_i`.
pub fn step_log_em(tilde: &TildeSpec, y: &[f64], dt: f64, xi: &[f64]) -> Vec<f64> {
    let n = tilde.n();
    let x: Vec<f64> = y.iter().map(|v| v.exp()).collect();
    let mut f = vec![0.0; n];
    tilde.per_capita_into(&x, &mut f);
    let sq = dt.sqrt();
    (0..n)
        .map(|i| y[i] + f[i] * dt + tilde.sigma(i + 1) * sq * xi[i])
        .collect()
}

/// Allocation-free integrator state for one path.
struct Stepper<'a> {
    tilde: &'a TildeSpec,
    alive: Vec<bool>,
    y: Vec<f64>,
    x: Vec<f64>,
    f: Vec<f64>,
    xi: Vec<f64>,
    noise: Vec<f64>,
    dt: f64,
    stream: NormalStream,
}

impl<'a> Stepper<'a> {
    fn new(tilde: &'a TildeSpec, x0: &[f64], config: &SimConfig, replica: u64) -> Self {
        let n = tilde.n();
        let sq = config.dt.sqrt();
        Self {
            tilde,
            alive: x0.iter().map(|&v| v > 0.0).collect(),
            y: x0.iter().map(|&v| if v > 0.0 { v.ln() } else { f64::NEG_INFINITY }).collect(),
            x: x0.to_vec(),
            f: vec![0.0; n],
            xi: vec![0.0; n],
            noise: tilde.sigmas().iter().map(|s| s * sq).collect(),
            dt: config.dt,
            stream: NormalStream::new(config.seed, replica, n),
        }
    }

    /// Advances one step; returns the first species above the cap, if any.
    #[inline]
    fn step(&mut self, cap: f64) -> Option<usize> {
        self.stream.fill(&mut self.xi);
        self.tilde.per_capita_into(&self.x, &mut self.f);
        let mut over = None;
        for i in 0..self.y.len() {
            if !self.alive[i] {
                continue;
            }
            let yi = self.y[i] + self.f[i] * self.dt + self.noise[i] * self.xi[i];
            self.y[i] = yi;
            self.x[i] = yi.exp();
            if yi > cap && over.is_none() {
                over = Some(i + 1);
            }
        }
        over
    }
}

fn check_start(tilde: &TildeSpec, x0: &[f64]) -> Result<(), SimError> {
    if x0.len() != tilde.n() || x0.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(SimError::InvalidStart { expected: tilde.n() });
    }
    Ok(())
}

pub fn simulate(spec: &ChainSpec, x0: &State, config: &SimConfig) -> Result<Trajectory, SimError> {
    simulate_tilde(&spec.tilde(), x0, config)
}

pub fn simulate_tilde(tilde: &TildeSpec, x0: &[f64], config: &SimConfig) -> Result<Trajectory, SimError> {
    config.validate()?;
    check_start(tilde, x0)?;
    let n = tilde.n();
    let total = config.total_steps();
    let burn = config.burn_steps();
    let cap_records = (total.saturating_sub(burn) / config.thin + 1) as usize;
    let mut traj = Trajectory {
        n,
        times: Vec::with_capacity(cap_records),
        states: Vec::with_capacity(cap_records * n),
        exited: None,
    };
    let mut st = Stepper::new(tilde, x0, config, 0);
    let record = |k: u64, st: &Stepper, traj: &mut Trajectory| {
        if k >= burn && (k - burn).is_multiple_of(config.thin) {
            traj.times.push(k as f64 * config.dt);
            traj.states.extend_from_slice(&st.x);
        }
    };
    record(0, &st, &mut traj);
    for k in 1..=total {
        if let Some(sp) = st.step(config.cap) {
            traj.exited = Some(ExitInfo {
                time: k as f64 * config.dt,
                species: sp,
                reason: "log-density above cap",
            });
            break;
        }
        record(k, &st, &mut traj);
    }
    Ok(traj)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramSpec {
    pub bins: usize,
    pub log_min: f64,
    pub log_max: f64,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self {
            bins: 256,
            log_min: -20.0,
            log_max: 20.0,
        }
    }
}

impl HistogramSpec {
    /// Slot index: 0 is underflow (including zero), `bins + 1` is overflow.
    pub fn slot(&self, x: f64) -> usize {
        if !(x > 0.0) {
            return 0;
        }
        let z = x.ln();
        if z < self.log_min {
            0
        } else if z >= self.log_max {
            self.bins + 1
        } else {
            let k = ((z - self.log_min) / (self.log_max - self.log_min) * self.bins as f64) as usize;
            1 + k.min(self.bins - 1)
        }
    }

    /// Lower density edge of in-range bin `k` (0-based).
    pub fn lower_edge(&self, k: usize) -> f64 {
        (self.log_min + (self.log_max - self.log_min) * k as f64 / self.bins as f64).exp()
    }
}

/// Per-species log-binned time masses.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogHistogram {
    pub spec: HistogramSpec,
    /// `n × (bins + 2)` masses.
    pub masses: Vec<Vec<f64>>,
}

impl LogHistogram {
    pub fn new(n: usize, spec: HistogramSpec) -> Self {
        Self {
            spec,
            masses: vec![vec![0.0; spec.bins + 2]; n],
        }
    }

    pub fn add(&mut self, x: &[f64], w: f64) {
        for (i, &v) in x.iter().enumerate() {
            self.masses[i][self.spec.slot(v)] += w;
        }
    }

    pub fn merge(&mut self, other: &Self) {
        for (a, b) in self.masses.iter_mut().zip(&other.masses) {
            for (p, q) in a.iter_mut().zip(b) {
                *p += q;
            }
        }
    }

    pub fn total(&self, species: usize) -> f64 {
        self.masses[species].iter().sum()
    }

    pub fn normalized(&self, species: usize) -> Vec<f64> {
        let t = self.total(species);
        self.masses[species].iter().map(|m| m / t).collect()
    }
}

/// Running occupation-measure statistics along one or more paths.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OccupationAccumulator {
    pub n: usize,
    pub duration: f64,
    /// Time average of `X`.
    pub moment1: Vec<f64>,
    /// Time average of `F̃(X)`.
    #[serde(rename = "momentF")]
    pub moment_f: Vec<f64>,
    pub histogram: LogHistogram,
    /// Time averages of `X` over consecutive blocks of equal duration.
    pub block_moment1: Vec<Vec<f64>>,
    #[serde(skip)]
    sum_x: Vec<f64>,
    #[serde(skip)]
    sum_f: Vec<f64>,
}

impl OccupationAccumulator {
    pub fn new(n: usize, grid: HistogramSpec) -> Self {
        Self {
            n,
            duration: 0.0,
            moment1: vec![0.0; n],
            moment_f: vec![0.0; n],
            histogram: LogHistogram::new(n, grid),
            block_moment1: Vec::new(),
            sum_x: vec![0.0; n],
            sum_f: vec![0.0; n],
        }
    }

    fn push(&mut self, x: &[f64], f: &[f64], w: f64) {
        self.duration += w;
        for i in 0..self.n {
            self.sum_x[i] += w * x[i];
            self.sum_f[i] += w * f[i];
        }
        self.histogram.add(x, w);
    }

    fn refresh(&mut self) {
        for i in 0..self.n {
            self.moment1[i] = self.sum_x[i] / self.duration;
            self.moment_f[i] = self.sum_f[i] / self.duration;
        }
    }

    /// Pools two accumulators (time-weighted); blocks are concatenated.
    pub fn merge(&mut self, other: &Self) {
        self.duration += other.duration;
        for i in 0..self.n {
            self.sum_x[i] += other.sum_x[i];
            self.sum_f[i] += other.sum_f[i];
        }
        self.histogram.merge(&other.histogram);
        self.block_moment1.extend(other.block_moment1.iter().cloned());
        if self.duration > 0.0 {
            self.refresh();
        }
    }

    /// Fraction of time species `i` (0-based) spends below `threshold`,
    /// resolved to the histogram grid.
    pub fn fraction_below_grid(&self, i: usize, threshold: f64) -> f64 {
        let k = self.histogram.spec.slot(threshold);
        self.histogram.masses[i][..k].iter().sum::<f64>() / self.duration
    }
}

pub const DEFAULT_BLOCKS: usize = 50;

/// Time-weighted occupation statistics of the recorded path, each record
/// standing for the interval up to the next one.
pub fn occupation_measure(
    traj: &Trajectory,
    tilde: &TildeSpec,
    grid: HistogramSpec,
) -> Result<OccupationAccumulator, SimError> {
    occupation_measure_blocks(traj, tilde, grid, DEFAULT_BLOCKS)
}

pub fn occupation_measure_blocks(
    traj: &Trajectory,
    tilde: &TildeSpec,
    grid: HistogramSpec,
    blocks: usize,
) -> Result<OccupationAccumulator, SimError> {
    if traj.is_empty() {
        return Err(SimError::EmptyTrajectory);
    }
    let n = traj.n;
    let mut acc = OccupationAccumulator::new(n, grid);
    let w = if traj.len() > 1 {
        (traj.times[traj.len() - 1] - traj.times[0]) / (traj.len() - 1) as f64
    } else {
        1.0
    };
    let w = if w > 0.0 { w } else { 1.0 };
    let mut f = vec![0.0; n];
    let blocks = blocks.clamp(1, traj.len());
    let per_block = traj.len() / blocks;
    let mut block_sum = vec![0.0; n];
    let mut in_block = 0usize;
    for (_, x) in traj.iter() {
        tilde.per_capita_into(x, &mut f);
        acc.push(x, &f, w);
        for i in 0..n {
            block_sum[i] += x[i];
        }
        in_block += 1;
        if in_block == per_block && acc.block_moment1.len() < blocks {
            acc.block_moment1.push(block_sum.iter().map(|s| s / per_block as f64).collect());
            block_sum.iter_mut().for_each(|s| *s = 0.0);
            in_block = 0;
        }
    }
    acc.refresh();
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpeciesExtinction {
    pub species: usize,
    pub time_average: f64,
    pub fraction_below: f64,
}

/// Per-species time averages and sub-threshold occupancy over the records.
pub fn extinction_stats(traj: &Trajectory, threshold: f64) -> Vec<SpeciesExtinction> {
    let m = traj.len().max(1) as f64;
    (0..traj.n)
        .map(|i| {
            let (mut sum, mut below) = (0.0, 0usize);
            for (_, x) in traj.iter() {
                sum += x[i];
                if x[i] < threshold {
                    below += 1;
                }
            }
            SpeciesExtinction {
                species: i + 1,
                time_average: sum / m,
                fraction_below: below as f64 / m,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleRequest {
    pub replicas: usize,
    /// Times at which every replica's state is sampled.
    pub snapshot_times: Vec<f64>,
    /// Accumulate post-burn-in occupation statistics.
    pub occupation: bool,
    pub grid: HistogramSpec,
    pub extinction_threshold: f64,
    /// Worker threads; `None` uses the available parallelism.
    pub workers: Option<usize>,
}

impl EnsembleRequest {
    pub fn new(replicas: usize) -> Self {
        Self {
            replicas,
            snapshot_times: Vec::new(),
            occupation: true,
            grid: HistogramSpec::default(),
            extinction_threshold: 1e-6,
            workers: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnsembleSummary {
    pub replicas: usize,
    pub exited: usize,
    pub snapshot_times: Vec<f64>,
    /// `snapshots[t][r]` is replica `r`'s state at `snapshot_times[t]`;
    /// replicas that exited are omitted from later snapshots.
    pub snapshots: Vec<Vec<Vec<f64>>>,
    pub terminal: Vec<Vec<f64>>,
    pub occupation: Option<OccupationAccumulator>,
    pub extinction: Vec<SpeciesExtinction>,
}

struct ReplicaOutput {
    snapshots: Vec<Option<Vec<f64>>>,
    terminal: Option<Vec<f64>>,
    occupation: Option<OccupationAccumulator>,
    below: Vec<u64>,
    records: u64,
}

fn run_replica(
    tilde: &TildeSpec,
    x0: &[f64],
    config: &SimConfig,
    req: &EnsembleRequest,
    snap_steps: &[u64],
    replica: u64,
) -> ReplicaOutput {
    let n = tilde.n();
    let total = config.total_steps();
    let burn = config.burn_steps();
    let w = config.thin as f64 * config.dt;
    let mut st = Stepper::new(tilde, x0, config, replica);
    let mut occ = req.occupation.then(|| OccupationAccumulator::new(n, req.grid));
    let mut snapshots = vec![None; snap_steps.len()];
    let mut below = vec![0u64; n];
    let mut records = 0u64;
    let mut f = vec![0.0; n];
    let mut exited = false;
    let mut next_snap = 0usize;
    let mut visit = |k: u64, x: &[f64], snapshots: &mut Vec<Option<Vec<f64>>>, occ: &mut Option<OccupationAccumulator>| {
        while next_snap < snap_steps.len() && snap_steps[next_snap] == k {
            snapshots[next_snap] = Some(x.to_vec());
            next_snap += 1;
        }
        if k >= burn && (k - burn).is_multiple_of(config.thin) {
            records += 1;
            for i in 0..n {
                if x[i] < req.extinction_threshold {
                    below[i] += 1;
                }
            }
            if let Some(o) = occ.as_mut() {
                tilde.per_capita_into(x, &mut f);
                o.push(x, &f, w);
            }
        }
    };
    visit(0, &st.x.clone(), &mut snapshots, &mut occ);
    for k in 1..=total {
        if st.step(config.cap).is_some() {
            exited = true;
            break;
        }
        let x = std::mem::take(&mut st.x);
        visit(k, &x, &mut snapshots, &mut occ);
        st.x = x;
    }
    if let Some(o) = occ.as_mut() {
        if o.duration > 0.0 {
            o.refresh();
            o.block_moment1.push(o.moment1.clone());
        }
    }
    ReplicaOutput {
        snapshots,
        terminal: (!exited).then(|| st.x.clone()),
        occupation: if exited { None } else { occ },
        below,
        records,
    }
}

/// Replicas processed per parallel batch before the serial merge.
const BATCH: usize = 256;

pub fn ensemble(
    spec: &ChainSpec,
    x0: &State,
    req: &EnsembleRequest,
    config: &SimConfig,
) -> Result<EnsembleSummary, SimError> {
    ensemble_tilde(&spec.tilde(), x0, req, config)
}

pub fn ensemble_tilde(
    tilde: &TildeSpec,
    x0: &[f64],
    req: &EnsembleRequest,
    config: &SimConfig,
) -> Result<EnsembleSummary, SimError> {
    config.validate()?;
    check_start(tilde, x0)?;
    if req.replicas == 0 {
        return Err(SimError::InvalidConfig("replicas must be at least 1".into()));
    }
    let mut snap_times = req.snapshot_times.clone();
    if snap_times.windows(2).any(|w| !(w[1] > w[0])) || snap_times.iter().any(|&t| !(t >= 0.0 && t <= config.horizon)) {
        return Err(SimError::InvalidConfig("snapshot times must be increasing within [0, horizon]".into()));
    }
    let snap_steps: Vec<u64> = snap_times.iter().map(|t| (t / config.dt).round() as u64).collect();
    if snap_steps.windows(2).any(|w| w[1] == w[0]) {
        return Err(SimError::InvalidConfig("snapshot times closer than dt".into()));
    }
    snap_times = snap_steps.iter().map(|&k| k as f64 * config.dt).collect();

    let n = tilde.n();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(req.workers.unwrap_or(0))
        .build()
        .map_err(|e| SimError::InvalidConfig(format!("thread pool: {e}")))?;
    let mut summary = EnsembleSummary {
        replicas: req.replicas,
        exited: 0,
        snapshot_times: snap_times,
        snapshots: vec![Vec::new(); snap_steps.len()],
        terminal: Vec::new(),
        occupation: None,
        extinction: Vec::new(),
    };
    let mut below = vec![0u64; n];
    let mut records = 0u64;
    let mut start = 0usize;
    while start < req.replicas {
        let end = (start + BATCH).min(req.replicas);
        let outs: Vec<ReplicaOutput> = pool.install(|| {
            (start..end)
                .into_par_iter()
                .map(|r| run_replica(tilde, x0, config, req, &snap_steps, r as u64))
                .collect()
        });
        for out in outs {
            for (slot, s) in summary.snapshots.iter_mut().zip(out.snapshots) {
                if let Some(s) = s {
                    slot.push(s);
                }
            }
            match out.terminal {
                Some(t) => {
                    summary.terminal.push(t);
                    for (b, o) in below.iter_mut().zip(&out.below) {
                        *b += o;
                    }
                    records += out.records;
                    if let Some(o) = out.occupation {
                        match summary.occupation.as_mut() {
                            Some(acc) => acc.merge(&o),
                            None => summary.occupation = Some(o),
                        }
                    }
                }
                None => summary.exited += 1,
            }
        }
        start = end;
    }
    if summary.exited > 0 {
        log::warn!("{} of {} replicas exceeded the log-density cap and were excluded", summary.exited, req.replicas);
    }
    let occ_mean = summary.occupation.as_ref().map(|o| o.moment1.clone());
    summary.extinction = (0..n)
        .map(|i| SpeciesExtinction {
            species: i + 1,
            time_average: occ_mean.as_ref().map_or(f64::NAN, |m| m[i]),
            fraction_below: if records > 0 { below[i] as f64 / records as f64 } else { f64::NAN },
        })
        .collect();
    Ok(summary)
}
