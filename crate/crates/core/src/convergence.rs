//! Empirical convergence diagnostics: binned distances between ensemble
//! snapshots, exponential-versus-polynomial rate fits, invasion rates and
//! the stationary moment identity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::model::{ChainSpec, State};
use crate::persistence;
use crate::sim::{self, EnsembleRequest, HistogramSpec, OccupationAccumulator, SimConfig, SimError};
use crate::stats::{self, LinearFit};

/// Minimum R² advantage for a verdict.
pub const R2_MARGIN: f64 = 0.1;
/// Percentile of the bootstrap self-distance used as the noise floor.
pub const NOISE_PERCENTILE: f64 = 95.0;
pub const NOISE_RESAMPLES: usize = 200;
pub const BINS_PER_AXIS: usize = 16;
/// Largest dimension binned jointly; above it pairwise marginals are used.
pub const JOINT_MAX_DIM: usize = 3;

#[derive(Clone, Debug, PartialEq, Error)]
pub enum ConvergenceError {
    #[error("histograms are on different grids")]
    GridMismatch,
    #[error("need at least {needed} snapshot times, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("the {j}-species sub-chain is not persistent: {reason}")]
    SubchainNotPersistent { j: usize, reason: String },
    #[error("species index {j} has no species above it (n = {n})")]
    NoSpeciesAbove { j: usize, n: usize },
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Common bin grid: per-axis cut points and the axis sets binned together.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Grid {
    pub cuts: Vec<Vec<f64>>,
    pub views: Vec<Vec<usize>>,
}

/// Normalized masses per view.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Binned {
    pub masses: Vec<Vec<f64>>,
}

impl Grid {
    /// Cut points at pooled quantiles of each coordinate.
    pub fn from_samples<'a>(n: usize, samples: impl Iterator<Item = &'a [f64]> + Clone, bins_per_axis: usize) -> Self {
        let cuts = (0..n)
            .map(|i| {
                let mut v: Vec<f64> = samples.clone().map(|x| x[i]).collect();
                v.sort_by(f64::total_cmp);
                let mut c: Vec<f64> = (1..bins_per_axis)
                    .filter_map(|k| {
                        if v.is_empty() {
                            return None;
                        }
                        let pos = k * v.len() / bins_per_axis;
                        Some(v[pos.min(v.len() - 1)])
                    })
                    .collect();
                c.dedup();
                c
            })
            .collect();
        let views = if n <= JOINT_MAX_DIM {
            vec![(0..n).collect()]
        } else {
            let mut p = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    p.push(vec![i, j]);
                }
            }
            p
        };
        Self { cuts, views }
    }

    fn axis_bin(&self, axis: usize, v: f64) -> usize {
        self.cuts[axis].partition_point(|&c| c <= v)
    }

    pub fn view_size(&self, view: usize) -> usize {
        self.views[view].iter().map(|&a| self.cuts[a].len() + 1).product()
    }

    fn cell(&self, view: usize, x: &[f64]) -> usize {
        let mut idx = 0;
        for &a in &self.views[view] {
            idx = idx * (self.cuts[a].len() + 1) + self.axis_bin(a, x[a]);
        }
        idx
    }

    /// `Σ_{s in cell} f(s) / N` per cell.
    pub fn bin_weighted<'a>(&self, samples: impl Iterator<Item = &'a [f64]> + Clone, f: impl Fn(&[f64]) -> f64) -> Binned {
        let count = samples.clone().count().max(1) as f64;
        let masses = (0..self.views.len())
            .map(|v| {
                let mut m = vec![0.0; self.view_size(v)];
                for x in samples.clone() {
                    m[self.cell(v, x)] += f(x);
                }
                m.iter_mut().for_each(|c| *c /= count);
                m
            })
            .collect();
        Binned { masses }
    }

    pub fn bin<'a>(&self, samples: impl Iterator<Item = &'a [f64]> + Clone) -> Binned {
        self.bin_weighted(samples, |_| 1.0)
    }
}

/// Half the L1 distance of bin masses; the maximum over views.
pub fn distance_tv(h1: &Binned, h2: &Binned) -> Result<f64, ConvergenceError> {
    if h1.masses.len() != h2.masses.len() || h1.masses.iter().zip(&h2.masses).any(|(a, b)| a.len() != b.len()) {
        return Err(ConvergenceError::GridMismatch);
    }
    Ok(h1
        .masses
        .iter()
        .zip(&h2.masses)
        .map(|(a, b)| 0.5 * a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f64>())
        .fold(0.0, f64::max))
}

/// Proxy for the f-weighted norm: half the L1 distance of f-weighted bin
/// masses. It bounds the supremum over `|g| ≤ f` from below only up to
/// binning; with `f ≡ 1` it is exactly [`distance_tv`].
pub fn distance_fnorm(samples1: &[Vec<f64>], samples2: &[Vec<f64>], f: impl Fn(&[f64]) -> f64, grid: &Grid) -> f64 {
    let a = grid.bin_weighted(samples1.iter().map(|v| v.as_slice()), &f);
    let b = grid.bin_weighted(samples2.iter().map(|v| v.as_slice()), &f);
    distance_tv(&a, &b).expect("same grid")
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SnapshotSet {
    pub times: Vec<f64>,
    pub grid: Grid,
    pub histograms: Vec<Binned>,
    #[serde(skip)]
    pub samples: Vec<Vec<Vec<f64>>>,
    pub replica_count: usize,
    pub exited: usize,
    pub seed: u64,
}

impl SnapshotSet {
    /// Bins samples taken at `times` on a grid pooled over all of them.
    pub fn from_samples(times: Vec<f64>, samples: Vec<Vec<Vec<f64>>>, replica_count: usize, seed: u64) -> Self {
        let n = samples.iter().flatten().next().map_or(1, |x| x.len());
        let grid = Grid::from_samples(n, samples.iter().flatten().map(|v| v.as_slice()), BINS_PER_AXIS);
        let histograms = samples.iter().map(|s| grid.bin(s.iter().map(|v| v.as_slice()))).collect();
        Self {
            times,
            grid,
            histograms,
            samples,
            replica_count,
            exited: 0,
            seed,
        }
    }

    /// 95th percentile of the distance between two bootstrap resamples of
    /// snapshot `k`.
    pub fn noise_floor(&self, k: usize) -> f64 {
        let s = &self.samples[k];
        if s.is_empty() {
            return f64::NAN;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6e6f_6973_6566_6c72);
        let resample = |rng: &mut ChaCha8Rng| {
            let idx: Vec<usize> = (0..s.len()).map(|_| rng.random_range(0..s.len())).collect();
            self.grid.bin(idx.iter().map(|&i| s[i].as_slice()))
        };
        let d: Vec<f64> = (0..NOISE_RESAMPLES)
            .map(|_| {
                let a = resample(&mut rng);
                let b = resample(&mut rng);
                distance_tv(&a, &b).unwrap()
            })
            .collect();
        stats::percentile(&d, NOISE_PERCENTILE)
    }

    /// `(t_k, TV(snapshot_k, last))` for all snapshots before the last.
    pub fn distances_to_last(&self) -> Vec<(f64, f64)> {
        let last = self.histograms.len() - 1;
        (0..last)
            .map(|k| (self.times[k], distance_tv(&self.histograms[k], &self.histograms[last]).unwrap()))
            .collect()
    }
}

pub fn snapshot_distributions(
    spec: &ChainSpec,
    x0: &State,
    times: &[f64],
    replicas: usize,
    config: &SimConfig,
    workers: Option<usize>,
) -> Result<SnapshotSet, ConvergenceError> {
    let mut cfg = config.clone();
    if let Some(&last) = times.last() {
        cfg.horizon = last.max(cfg.dt);
    }
    cfg.burn_in = 0.0;
    let mut req = EnsembleRequest::new(replicas);
    req.snapshot_times = times.to_vec();
    req.occupation = false;
    req.workers = workers;
    let sum = sim::ensemble(spec, x0, &req, &cfg)?;
    let mut set = SnapshotSet::from_samples(sum.snapshot_times, sum.snapshots, replicas, config.seed);
    set.exited = sum.exited;
    Ok(set)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Exponential,
    Polynomial,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExpFit {
    pub rate: f64,
    pub r2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PolyFit {
    pub exponent: f64,
    pub r2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateFit {
    pub distances: Vec<(f64, f64)>,
    pub exp: Option<ExpFit>,
    pub poly: Option<PolyFit>,
    pub verdict: Verdict,
    pub noise_floor: f64,
    /// Distance between the last two snapshots.
    pub last_gap: Option<f64>,
    pub points_above_floor: usize,
    pub reason: String,
}

/// Fits `ln d = a − ς t` and `ln d = a − e ln t` on the leading run of
/// distances above the floor (at `t > 0`), then compares the fits.
pub fn fit_rates(distances: &[(f64, f64)], noise_floor: f64, last_gap: Option<f64>) -> RateFit {
    // Once a distance reaches the floor, later ones are noise around it.
    let used: Vec<(f64, f64)> = distances
        .iter()
        .copied()
        .filter(|&(t, _)| t > 0.0)
        .take_while(|&(_, d)| d > noise_floor && d > 0.0)
        .collect();
    let t: Vec<f64> = used.iter().map(|p| p.0).collect();
    let ln_t: Vec<f64> = t.iter().map(|v| v.ln()).collect();
    let ln_d: Vec<f64> = used.iter().map(|p| p.1.ln()).collect();
    let to_exp = |f: LinearFit| ExpFit { rate: -f.slope, r2: f.r2 };
    let to_poly = |f: LinearFit| PolyFit { exponent: -f.slope, r2: f.r2 };
    let exp = stats::ols(&t, &ln_d).map(to_exp);
    let poly = stats::ols(&ln_t, &ln_d).map(to_poly);
    let (verdict, reason) = if used.len() < 4 {
        (Verdict::Inconclusive, format!("only {} distances above the noise floor", used.len()))
    } else if last_gap.is_some_and(|g| g > noise_floor) {
        (Verdict::Inconclusive, "last two snapshots are not within the noise floor".to_string())
    } else {
        let (e, p) = (exp.as_ref().unwrap().r2, poly.as_ref().unwrap().r2);
        if e - p >= R2_MARGIN {
            (Verdict::Exponential, format!("exponential R² exceeds polynomial by {:.3}", e - p))
        } else if p - e >= R2_MARGIN {
            (Verdict::Polynomial, format!("polynomial R² exceeds exponential by {:.3}", p - e))
        } else {
            (Verdict::Inconclusive, format!("R² difference {:.3} below margin", e - p))
        }
    };
    RateFit {
        distances: distances.to_vec(),
        exp,
        poly,
        verdict,
        noise_floor,
        last_gap,
        points_above_floor: used.len(),
        reason,
    }
}

/// Rate diagnosis with the last snapshot standing in for the stationary law.
pub fn rate_fit(snapshots: &SnapshotSet) -> Result<RateFit, ConvergenceError> {
    let m = snapshots.times.len();
    if m < 5 {
        return Err(ConvergenceError::TooFewPoints { needed: 5, got: m });
    }
    let distances = snapshots.distances_to_last();
    let floor = snapshots.noise_floor(m - 1);
    let last_gap = distances.last().map(|p| p.1);
    Ok(fit_rates(&distances, floor, last_gap))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InvasionEstimate {
    /// Invading species index (`j + 1`).
    pub species: usize,
    pub estimate: f64,
    pub standard_error: f64,
    /// `−ã_{j+1,0} + ã_{j+1,j}·p̃*_j`.
    pub closed_form: f64,
}

fn check_subchain(spec: &ChainSpec, j: usize) -> Result<State, ConvergenceError> {
    let n = spec.n();
    if j == 0 || j >= n {
        return Err(ConvergenceError::NoSpeciesAbove { j, n });
    }
    let sub = spec.subchain(j);
    let tilde = sub.tilde();
    if !(sub.sigma(1) > 0.0 || sub.sigma(j) > 0.0) {
        return Err(ConvergenceError::SubchainNotPersistent {
            j,
            reason: "neither species 1 nor species j is noisy".into(),
        });
    }
    persistence::equilibrium(&tilde).map_err(|e| ConvergenceError::SubchainNotPersistent {
        j,
        reason: format!("delta({j}) = {} is not positive", e.delta_n),
    })
}

/// Closed form of the invasion rate of species `j + 1` against the
/// `j`-species sub-chain's stationary law.
pub fn invasion_rate_closed_form(spec: &ChainSpec, j: usize) -> Result<f64, ConvergenceError> {
    let p = check_subchain(spec, j)?;
    let t = spec.tilde();
    Ok(-t.a(j + 1, 0) + t.a(j + 1, j) * p[j - 1])
}

/// Time average of `F̃_{j+1}` along the `j`-species sub-chain started at its
/// equilibrium.
pub fn boundary_invasion_rate(spec: &ChainSpec, j: usize, config: &SimConfig) -> Result<InvasionEstimate, ConvergenceError> {
    let p = check_subchain(spec, j)?;
    let closed_form = invasion_rate_closed_form(spec, j)?;
    let t = spec.tilde();
    let (death, gain) = (t.a(j + 1, 0), t.a(j + 1, j));
    let traj = sim::simulate(&spec.subchain(j), &p, config)?;
    let series: Vec<f64> = traj.iter().map(|(_, x)| -death + gain * x[j - 1]).collect();
    if series.is_empty() {
        return Err(SimError::EmptyTrajectory.into());
    }
    let blocks = stats::block_means(&series, sim::DEFAULT_BLOCKS);
    Ok(InvasionEstimate {
        species: j + 1,
        estimate: stats::mean(&series),
        standard_error: stats::bootstrap_se(&blocks, stats::DEFAULT_RESAMPLES, config.seed),
        closed_form,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MomentCheck {
    /// `F̃_i` evaluated at the occupation mean; zero for the stationary law.
    pub residual: Vec<f64>,
    pub standard_error: Vec<f64>,
    /// Residuals within this many standard errors count as converged.
    pub threshold_se: f64,
    pub converged: bool,
}

pub const MOMENT_THRESHOLD_SE: f64 = 3.0;

pub fn moment_identity_check(spec: &ChainSpec, occupation: &OccupationAccumulator) -> MomentCheck {
    let tilde = spec.tilde();
    let residual = tilde.per_capita(&occupation.moment1);
    let n = spec.n();
    let per_block: Vec<Vec<f64>> = occupation.block_moment1.iter().map(|m| tilde.per_capita(m)).collect();
    let standard_error: Vec<f64> = (0..n)
        .map(|i| {
            let v: Vec<f64> = per_block.iter().map(|r| r[i]).collect();
            stats::bootstrap_se(&v, stats::DEFAULT_RESAMPLES, i as u64)
        })
        .collect();
    let converged = residual
        .iter()
        .zip(&standard_error)
        .all(|(r, se)| se.is_finite() && r.abs() <= MOMENT_THRESHOLD_SE * se);
    MomentCheck {
        residual,
        standard_error,
        threshold_se: MOMENT_THRESHOLD_SE,
        converged,
    }
}

/// Bootstrap standard errors of the occupation mean from its block means.
pub fn moment1_standard_errors(occupation: &OccupationAccumulator, seed: u64) -> Vec<f64> {
    (0..occupation.n)
        .map(|i| {
            let v: Vec<f64> = occupation.block_moment1.iter().map(|m| m[i]).collect();
            stats::bootstrap_se(&v, stats::DEFAULT_RESAMPLES, seed.wrapping_add(i as u64))
        })
        .collect()
}

/// Occupation statistics of one long path, for the moment checks.
pub fn long_run_occupation(spec: &ChainSpec, x0: &State, config: &SimConfig) -> Result<OccupationAccumulator, ConvergenceError> {
    let traj = sim::simulate(spec, x0, config)?;
    Ok(sim::occupation_measure(&traj, &spec.tilde(), HistogramSpec::default())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binned(m: &[f64]) -> Binned {
        Binned { masses: vec![m.to_vec()] }
    }

    #[test]
    fn tv_examples() {
        assert_eq!(distance_tv(&binned(&[0.5, 0.5]), &binned(&[1.0, 0.0])).unwrap(), 0.5);
        assert_eq!(distance_tv(&binned(&[0.3, 0.7]), &binned(&[0.3, 0.7])).unwrap(), 0.0);
        assert_eq!(distance_tv(&binned(&[1.0, 0.0]), &binned(&[0.0, 1.0])).unwrap(), 1.0);
        assert_eq!(
            distance_tv(&binned(&[1.0, 0.0]), &binned(&[1.0, 0.0, 0.0])),
            Err(ConvergenceError::GridMismatch)
        );
    }

    #[test]
    fn tv_is_a_metric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut draw = || {
            let v: Vec<f64> = (0..12).map(|_| rng.random::<f64>()).collect();
            let s: f64 = v.iter().sum();
            binned(&v.iter().map(|x| x / s).collect::<Vec<_>>())
        };
        for _ in 0..200 {
            let (a, b, c) = (draw(), draw(), draw());
            let ab = distance_tv(&a, &b).unwrap();
            assert_eq!(ab, distance_tv(&b, &a).unwrap());
            assert!(ab <= distance_tv(&a, &c).unwrap() + distance_tv(&c, &b).unwrap() + 1e-15);
            assert!((0.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn fnorm_with_unit_weight_is_tv() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in [2, 5] {
            let s1: Vec<Vec<f64>> = (0..500).map(|_| (0..n).map(|_| rng.random::<f64>()).collect()).collect();
            let s2: Vec<Vec<f64>> = (0..500).map(|_| (0..n).map(|_| rng.random::<f64>().powi(2)).collect()).collect();
            let grid = Grid::from_samples(n, s1.iter().chain(&s2).map(|v| v.as_slice()), BINS_PER_AXIS);
            let tv = distance_tv(&grid.bin(s1.iter().map(|v| v.as_slice())), &grid.bin(s2.iter().map(|v| v.as_slice()))).unwrap();
            assert!((distance_fnorm(&s1, &s2, |_| 1.0, &grid) - tv).abs() < 1e-12);
            assert_eq!(distance_fnorm(&s1, &s1, |x| x[0] + 3.0, &grid), 0.0);
        }
    }

    #[test]
    fn synthetic_exponential_law() {
        let d: Vec<(f64, f64)> = (0..8).map(|k| 0.25 * 2f64.powi(k)).map(|t| (t, (-t).exp())).collect();
        let fit = fit_rates(&d[..7], 0.0, None);
        assert_eq!(fit.verdict, Verdict::Exponential, "{fit:?}");
        assert!((fit.exp.unwrap().rate - 1.0).abs() < 0.05);
    }

    #[test]
    fn synthetic_polynomial_law() {
        let d: Vec<(f64, f64)> = (0..9).map(|k| 2f64.powi(k)).map(|t| (t, 1.0 / t)).collect();
        let fit = fit_rates(&d, 0.0, None);
        assert_eq!(fit.verdict, Verdict::Polynomial, "{fit:?}");
        assert!((fit.poly.unwrap().exponent - 1.0).abs() < 0.1);
    }

    #[test]
    fn too_few_points_is_inconclusive() {
        let d = vec![(1.0, 0.5), (2.0, 0.2), (3.0, 0.01), (4.0, 0.005), (5.0, 0.004)];
        let fit = fit_rates(&d, 0.006, None);
        assert_eq!(fit.verdict, Verdict::Inconclusive);
        let fit = fit_rates(&d, 0.001, Some(0.5));
        assert_eq!(fit.verdict, Verdict::Inconclusive);
    }

    fn two_chain(sigma: &[f64]) -> ChainSpec {
        ChainSpec::new(3.0, &[1.0], &[1.0, 0.4], &[1.0], &[1.0], sigma).unwrap()
    }

    #[test]
    fn point_mass_at_time_zero_and_late_stationarity() {
        let spec = two_chain(&[0.4, 0.2]);
        let x0 = State(vec![0.5, 0.5]);
        let cfg = SimConfig::new(1.0, 13).with_dt(0.01);
        let set = snapshot_distributions(&spec, &x0, &[0.0, 10.0, 20.0], 2000, &cfg, None).unwrap();
        let h0 = &set.histograms[0].masses[0];
        assert_eq!(h0.iter().filter(|&&m| m > 0.0).count(), 1);
        assert!((h0.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let late = distance_tv(&set.histograms[1], &set.histograms[2]).unwrap();
        assert!(late <= set.noise_floor(2), "{late} vs {}", set.noise_floor(2));
    }

    #[test]
    fn split_seed_self_distance_at_floor() {
        let spec = two_chain(&[0.4, 0.2]);
        let x0 = State(vec![0.5, 0.5]);
        let run = |seed| {
            let cfg = SimConfig::new(1.0, seed).with_dt(0.01);
            snapshot_distributions(&spec, &x0, &[5.0], 2000, &cfg, None).unwrap()
        };
        let (a, b) = (run(1), run(2));
        let set = SnapshotSet::from_samples(
            vec![5.0, 5.0],
            vec![a.samples[0].clone(), b.samples[0].clone()],
            2000,
            3,
        );
        let d = distance_tv(&set.histograms[0], &set.histograms[1]).unwrap();
        assert!(d <= set.noise_floor(1), "{d} vs {}", set.noise_floor(1));
    }

    #[test]
    fn invasion_rate_errors() {
        let spec = two_chain(&[0.4, 0.2]);
        assert!(matches!(
            boundary_invasion_rate(&spec, 2, &SimConfig::new(10.0, 0)),
            Err(ConvergenceError::NoSpeciesAbove { .. })
        ));
        let quiet = two_chain(&[0.0, 0.2]);
        assert!(matches!(
            invasion_rate_closed_form(&quiet, 1),
            Err(ConvergenceError::SubchainNotPersistent { .. })
        ));
    }

    #[test]
    fn invasion_rate_sign_follows_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut checked = 0;
        while checked < 50 {
            let u = |rng: &mut ChaCha8Rng| rng.random_range(0.1..2.0);
            let n = rng.random_range(2..=5);
            let death: Vec<f64> = (1..n).map(|_| u(&mut rng)).collect();
            let diag: Vec<f64> = (0..n).map(|_| u(&mut rng)).collect();
            let lower: Vec<f64> = (1..n).map(|_| u(&mut rng)).collect();
            let upper: Vec<f64> = (1..n).map(|_| u(&mut rng)).collect();
            let sigma: Vec<f64> = (0..n).map(|_| u(&mut rng) * 0.5).collect();
            let spec = ChainSpec::new(u(&mut rng) * 2.0, &death, &diag, &lower, &upper, &sigma).unwrap();
            let delta = persistence::delta_tilde_all(&spec.tilde());
            for j in 1..n {
                if delta[j - 1] <= 0.0 || delta[j].abs() < 1e-6 {
                    continue;
                }
                let r = invasion_rate_closed_form(&spec, j).unwrap();
                assert_eq!(r > 0.0, delta[j] > 0.0, "j={j} rate={r} delta={delta:?}");
                checked += 1;
            }
        }
    }

    #[test]
    fn moment_identity_on_exact_moments() {
        let spec = two_chain(&[0.4, 0.2]);
        let p = persistence::equilibrium(&spec.tilde()).unwrap();
        let mut occ = OccupationAccumulator::new(2, HistogramSpec::default());
        occ.moment1 = p.to_vec();
        occ.block_moment1 = vec![p.to_vec(); 10];
        let chk = moment_identity_check(&spec, &occ);
        assert!(chk.residual.iter().all(|r| r.abs() < 1e-12));
    }

    #[test]
    fn short_run_moments_unconverged() {
        let spec = two_chain(&[0.4, 0.2]);
        let cfg = SimConfig::new(2.0, 3).with_dt(1e-3).with_burn_in(0.0);
        let occ = long_run_occupation(&spec, &State(vec![0.05, 4.0]), &cfg).unwrap();
        assert!(!moment_identity_check(&spec, &occ).converged);
    }
}
