//! Front-end producing a reduction basis by any of the supported methods.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grassmann::{trust_region_solve, GrassmannCost, GrassmannPoint, SolverTrace, TrustRegionConfig};
use crate::information::{signal_to_noise_spectrum, EkldObjective, InfoScores, KldObjective, NegMiObjective};
use crate::linalg::{gen_eig_spd, sym_eig, symmetrize, SpdMatrix};
use crate::model::{GaussianProblem, SubspaceBasis};

const KMEANS_MAX_ITER: usize = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ReductionMethod {
    #[serde(rename = "mi")]
    Mi,
    #[serde(rename = "kld")]
    Kld,
    #[serde(rename = "ekld")]
    Ekld,
    #[serde(rename = "pca-a")]
    PcaA,
    #[serde(rename = "pca-y")]
    PcaY,
    #[serde(rename = "pca-yn")]
    PcaYn,
    #[serde(rename = "centroids")]
    Centroids,
    #[serde(rename = "cav")]
    ClusterAverages,
}

impl ReductionMethod {
    pub const ALL: [ReductionMethod; 8] = [
        Self::Mi,
        Self::Kld,
        Self::Ekld,
        Self::PcaA,
        Self::PcaY,
        Self::PcaYn,
        Self::Centroids,
        Self::ClusterAverages,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Self::Mi => "mi",
            Self::Kld => "kld",
            Self::Ekld => "ekld",
            Self::PcaA => "pca-a",
            Self::PcaY => "pca-y",
            Self::PcaYn => "pca-yn",
            Self::Centroids => "centroids",
            Self::ClusterAverages => "cav",
        }
    }

    /// Whether the method needs an observed realization.
    pub fn needs_data(self) -> bool {
        self == Self::Kld
    }

    /// Whether the method needs observation locations.
    pub fn needs_locations(self) -> bool {
        matches!(self, Self::Centroids | Self::ClusterAverages)
    }
}

impl fmt::Display for ReductionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ReductionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown reduction method '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcaVariant {
    /// Eigenvectors of `C_A`.
    A,
    /// Eigenvectors of `C_Y`.
    Y,
    /// Eigenvectors of `C_Y C_E⁻¹`.
    Yn,
}

#[derive(Debug, Clone)]
pub struct ReductionReport {
    pub method: ReductionMethod,
    pub r: usize,
    pub basis: SubspaceBasis,
    pub scores: InfoScores,
    /// Method-specific spectrum, descending: `ν` for MI, `√λ` for PCA variants,
    /// the reduced generalized spectrum of `(VᵀC_A V, VᵀC_E V)` otherwise.
    pub spectrum: DVector<f64>,
    /// Full generalized spectrum of `(C_A, C_E)`.
    pub nu_spectrum: DVector<f64>,
    pub trace: Option<SolverTrace>,
    pub wall_ms: u64,
}

/// Settings for the optimization-based reducers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeOptions {
    pub trust_region: TrustRegionConfig,
    /// Total number of starts; the first is always the MI basis, the rest are
    /// seeded random orthonormal bases.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        Self {
            trust_region: TrustRegionConfig::default(),
            restarts: 1,
            seed: 0,
        }
    }
}

/// Optional inputs some methods require.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReduceInputs<'a> {
    pub y: Option<&'a DVector<f64>>,
    pub locations: Option<&'a DMatrix<f64>>,
    pub optimize: OptimizeOptions,
    pub seed: u64,
}

impl GrassmannCost for KldObjective {
    fn cost(&self, v: &DMatrix<f64>) -> Result<f64> {
        self.value(v)
    }

    fn euclidean_gradient(&self, v: &DMatrix<f64>, _fd_step: f64) -> Result<DMatrix<f64>> {
        self.gradient(v)
    }
}

impl GrassmannCost for EkldObjective {
    fn cost(&self, v: &DMatrix<f64>) -> Result<f64> {
        self.value(v)
    }

    fn euclidean_gradient(&self, v: &DMatrix<f64>, _fd_step: f64) -> Result<DMatrix<f64>> {
        self.gradient(v)
    }
}

impl GrassmannCost for NegMiObjective {
    fn cost(&self, v: &DMatrix<f64>) -> Result<f64> {
        self.value(v)
    }

    fn euclidean_gradient(&self, v: &DMatrix<f64>, _fd_step: f64) -> Result<DMatrix<f64>> {
        self.gradient(v)
    }
}

/// Dispatches to the method's reducer.
pub fn reduce(problem: &GaussianProblem, method: ReductionMethod, r: usize, inputs: &ReduceInputs) -> Result<ReductionReport> {
    let locations = || {
        inputs
            .locations
            .ok_or_else(|| Error::InvalidArgument(format!("method '{method}' needs observation locations")))
    };
    match method {
        ReductionMethod::Mi => reduce_mi(problem, r, inputs.y),
        ReductionMethod::PcaA => reduce_pca(problem, r, PcaVariant::A, inputs.y),
        ReductionMethod::PcaY => reduce_pca(problem, r, PcaVariant::Y, inputs.y),
        ReductionMethod::PcaYn => reduce_pca(problem, r, PcaVariant::Yn, inputs.y),
        ReductionMethod::Kld => {
            let y = inputs
                .y
                .ok_or_else(|| Error::InvalidArgument("method 'kld' needs an observed realization".into()))?;
            reduce_kld(problem, y, r, &inputs.optimize)
        }
        ReductionMethod::Ekld => reduce_ekld(problem, r, &inputs.optimize, inputs.y),
        ReductionMethod::Centroids => reduce_centroids(problem, locations()?, r, inputs.seed, inputs.y),
        ReductionMethod::ClusterAverages => reduce_cluster_averages(problem, locations()?, r, inputs.seed, inputs.y),
    }
}

fn check_rank(problem: &GaussianProblem, r: usize) -> Result<()> {
    let n = problem.n_obs();
    if r == 0 || r > n {
        return Err(Error::InvalidArgument(format!("reduced dimension must satisfy 1 <= r <= {n}, got {r}")));
    }
    Ok(())
}

fn elapsed_ms(start: Instant) -> u64 {
    start.elapsed().as_millis().try_into().unwrap_or(u64::MAX)
}

/// Generalized spectrum of `(VᵀC_A V, VᵀC_E V)`.
fn reduced_spectrum(problem: &GaussianProblem, basis: &SubspaceBasis) -> Result<DVector<f64>> {
    let v = basis.matrix();
    let signal = symmetrize(&(v.transpose() * &problem.moments.cov_a * v));
    let noise = SpdMatrix::new(v.transpose() * problem.noise.cov.matrix() * v)?;
    Ok(gen_eig_spd(&signal, &noise)?.values.map(|x| x.max(0.0)))
}

fn finish(
    problem: &GaussianProblem,
    method: ReductionMethod,
    basis: SubspaceBasis,
    spectrum: DVector<f64>,
    trace: Option<SolverTrace>,
    y: Option<&DVector<f64>>,
    start: Instant,
) -> Result<ReductionReport> {
    let scores = InfoScores::evaluate(problem, &basis, y)?;
    let nu_spectrum = signal_to_noise_spectrum(problem)?;
    Ok(ReductionReport {
        method,
        r: basis.rank(),
        basis,
        scores,
        spectrum,
        nu_spectrum,
        trace,
        wall_ms: elapsed_ms(start),
    })
}

/// Leading generalized eigenvectors of `C_A v = ν C_E v`.
pub fn reduce_mi(problem: &GaussianProblem, r: usize, y: Option<&DVector<f64>>) -> Result<ReductionReport> {
    let start = Instant::now();
    check_rank(problem, r)?;
    let eig = gen_eig_spd(&problem.moments.cov_a, &problem.noise.cov)?;
    let basis = SubspaceBasis::new(eig.leading_vectors(r))?;
    let nu = eig.values.map(|x| x.max(0.0));
    finish(problem, ReductionMethod::Mi, basis, nu, None, y, start)
}

pub fn reduce_pca(problem: &GaussianProblem, r: usize, variant: PcaVariant, y: Option<&DVector<f64>>) -> Result<ReductionReport> {
    let start = Instant::now();
    check_rank(problem, r)?;
    let (method, values, vectors) = match variant {
        PcaVariant::A => {
            let eig = sym_eig(&problem.moments.cov_a)?;
            let v = eig.leading_vectors(r);
            (ReductionMethod::PcaA, eig.values, v)
        }
        PcaVariant::Y => {
            let eig = sym_eig(problem.obs_cov().matrix())?;
            let v = eig.leading_vectors(r);
            (ReductionMethod::PcaY, eig.values, v)
        }
        PcaVariant::Yn => {
            // C_Y u = λ C_E u  ⇔  C_Y C_E⁻¹ (C_E u) = λ (C_E u)
            let eig = gen_eig_spd(problem.obs_cov().matrix(), &problem.noise.cov)?;
            let vectors = problem.noise.cov.matrix() * eig.leading_vectors(r);
            (ReductionMethod::PcaYn, eig.values, vectors)
        }
    };
    let basis = SubspaceBasis::orthonormalized(&vectors)?;
    let spectrum = values.map(|x| x.max(0.0).sqrt());
    finish(problem, method, basis, spectrum, None, y, start)
}

fn random_start(rng: &mut ChaCha8Rng, n: usize, r: usize) -> Result<GrassmannPoint> {
    let m = DMatrix::from_fn(n, r, |_, _| rng.sample::<f64, _>(StandardNormal));
    GrassmannPoint::from_span(&m)
}

fn optimize<C: GrassmannCost>(
    problem: &GaussianProblem,
    cost: &C,
    r: usize,
    opts: &OptimizeOptions,
) -> Result<(GrassmannPoint, SolverTrace)> {
    let warm = reduce_mi(problem, r, None)?;
    let mut starts = vec![GrassmannPoint::from_span(warm.basis.matrix())?];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 1..opts.restarts.max(1) {
        starts.push(random_start(&mut rng, problem.n_obs(), r)?);
    }
    let mut best: Option<(GrassmannPoint, SolverTrace)> = None;
    for v0 in &starts {
        let (v, trace) = trust_region_solve(cost, v0, &opts.trust_region)?;
        if best.as_ref().map_or(true, |(_, b)| trace.final_cost < b.final_cost) {
            best = Some((v, trace));
        }
    }
    Ok(best.expect("at least one start"))
}

/// Minimizes the KLD to the full posterior for the realization `y`.
pub fn reduce_kld(problem: &GaussianProblem, y: &DVector<f64>, r: usize, opts: &OptimizeOptions) -> Result<ReductionReport> {
    let start = Instant::now();
    check_rank(problem, r)?;
    let cost = KldObjective::new(problem, y)?;
    let (v, trace) = optimize(problem, &cost, r, opts)?;
    let basis = SubspaceBasis::new(v.into_basis())?;
    let spectrum = reduced_spectrum(problem, &basis)?;
    finish(problem, ReductionMethod::Kld, basis, spectrum, Some(trace), Some(y), start)
}

/// Minimizes the expected KLD over data realizations.
pub fn reduce_ekld(problem: &GaussianProblem, r: usize, opts: &OptimizeOptions, y: Option<&DVector<f64>>) -> Result<ReductionReport> {
    let start = Instant::now();
    check_rank(problem, r)?;
    let cost = EkldObjective::new(problem)?;
    let (v, trace) = optimize(problem, &cost, r, opts)?;
    let basis = SubspaceBasis::new(v.into_basis())?;
    let spectrum = reduced_spectrum(problem, &basis)?;
    finish(problem, ReductionMethod::Ekld, basis, spectrum, Some(trace), y, start)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    /// `k × d`
    pub centroids: DMatrix<f64>,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after each Lloyd iteration.
    pub inertia_history: Vec<f64>,
}

impl ClusterAssignment {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == cluster).then_some(i))
            .collect()
    }
}

fn sq_dist(points: &DMatrix<f64>, i: usize, centroids: &DMatrix<f64>, j: usize) -> f64 {
    points
        .row(i)
        .iter()
        .zip(centroids.row(j).iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

/// Nearest centroid, ties to the lowest index.
fn assign(points: &DMatrix<f64>, centroids: &DMatrix<f64>) -> (Vec<usize>, Vec<f64>) {
    (0..points.nrows())
        .map(|i| {
            let mut best = (0, f64::INFINITY);
            for j in 0..centroids.nrows() {
                let d = sq_dist(points, i, centroids, j);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .unzip()
}

fn kmeans_pp(points: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = points.nrows();
    let mut centroids = DMatrix::zeros(k, points.ncols());
    centroids.set_row(0, &points.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points, i, &centroids, 0)).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            // Guard against landing on a zero-weight tail point through round-off.
            if d2[chosen] == 0.0 {
                chosen = d2.iter().rposition(|&w| w > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.set_row(c, &points.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points, i, &centroids, c));
        }
    }
    centroids
}

/// Lloyd iterations from k-means++ seeding.
pub fn kmeans(points: &DMatrix<f64>, k: usize, seed: u64) -> Result<ClusterAssignment> {
    let (n, d) = points.shape();
    if n == 0 || d == 0 {
        return Err(Error::EmptyInput("kmeans points"));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("need 1 <= k <= {n} clusters, got {k}")));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("kmeans points"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(points, k, &mut rng);
    let (mut labels, mut dists) = assign(points, &centroids);
    let mut history = Vec::new();
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITER {
        iterations += 1;
        let mut sums = DMatrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            let mut row = sums.row_mut(l);
            row += points.row(i);
        }
        for j in 0..k {
            if counts[j] > 0 {
                let mean = sums.row(j) / counts[j] as f64;
                centroids.set_row(j, &mean);
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                // Reseed at the point farthest from its current centroid.
                let (far, _) = dists
                    .iter()
                    .enumerate()
                    .fold((0, -1.0), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
                centroids.set_row(j, &points.row(far));
                dists[far] = 0.0;
            }
        }
        let (new_labels, new_dists) = assign(points, &centroids);
        history.push(new_dists.iter().sum());
        let done = new_labels == labels;
        labels = new_labels;
        dists = new_dists;
        if done {
            break;
        }
    }
    let inertia = dists.iter().sum();
    Ok(ClusterAssignment {
        labels,
        centroids,
        inertia,
        iterations,
        inertia_history: history,
    })
}

fn cluster_members(assignment: &ClusterAssignment) -> Result<Vec<Vec<usize>>> {
    let members: Vec<Vec<usize>> = (0..assignment.k()).map(|j| assignment.members(j)).collect();
    if members.iter().any(Vec::is_empty) {
        return Err(Error::InvalidArgument(
            "clustering produced an empty cluster (fewer distinct locations than clusters)".into(),
        ));
    }
    Ok(members)
}

fn check_locations(problem: &GaussianProblem, locations: &DMatrix<f64>) -> Result<()> {
    if locations.nrows() != problem.n_obs() {
        return Err(Error::DimensionMismatch {
            context: "observation locations",
            expected: problem.n_obs(),
            found: locations.nrows(),
        });
    }
    Ok(())
}

/// Selection matrix picking, per cluster, the member nearest its centroid.
pub fn centroid_selection(locations: &DMatrix<f64>, k: usize, seed: u64) -> Result<DMatrix<f64>> {
    let assignment = kmeans(locations, k, seed)?;
    let members = cluster_members(&assignment)?;
    let mut basis = DMatrix::zeros(locations.nrows(), k);
    for (j, group) in members.iter().enumerate() {
        let mut best = (group[0], f64::INFINITY);
        for &i in group {
            let d = sq_dist(locations, i, &assignment.centroids, j);
            if d < best.1 {
                best = (i, d);
            }
        }
        basis[(best.0, j)] = 1.0;
    }
    Ok(basis)
}

/// Equal-weight averaging matrix over each cluster.
pub fn cluster_average_matrix(locations: &DMatrix<f64>, k: usize, seed: u64) -> Result<DMatrix<f64>> {
    let assignment = kmeans(locations, k, seed)?;
    let members = cluster_members(&assignment)?;
    let mut basis = DMatrix::zeros(locations.nrows(), k);
    for (j, group) in members.iter().enumerate() {
        let w = 1.0 / group.len() as f64;
        for &i in group {
            basis[(i, j)] = w;
        }
    }
    Ok(basis)
}

pub fn reduce_centroids(
    problem: &GaussianProblem,
    locations: &DMatrix<f64>,
    k: usize,
    seed: u64,
    y: Option<&DVector<f64>>,
) -> Result<ReductionReport> {
    let start = Instant::now();
    check_rank(problem, k)?;
    check_locations(problem, locations)?;
    let basis = SubspaceBasis::new(centroid_selection(locations, k, seed)?)?;
    let spectrum = reduced_spectrum(problem, &basis)?;
    finish(problem, ReductionMethod::Centroids, basis, spectrum, None, y, start)
}

pub fn reduce_cluster_averages(
    problem: &GaussianProblem,
    locations: &DMatrix<f64>,
    k: usize,
    seed: u64,
    y: Option<&DVector<f64>>,
) -> Result<ReductionReport> {
    let start = Instant::now();
    check_rank(problem, k)?;
    check_locations(problem, locations)?;
    let basis = SubspaceBasis::new(cluster_average_matrix(locations, k, seed)?)?;
    let spectrum = reduced_spectrum(problem, &basis)?;
    finish(problem, ReductionMethod::ClusterAverages, basis, spectrum, None, y, start)
}
