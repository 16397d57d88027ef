//! Monte Carlo model of randomized inversion: prototypes, aligned and
//! isotropic query embeddings, and the finite-sample separation of the
//! similarity and variability statistics.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UmidError};
use crate::inversion::{compute_stats, Statistics};
use crate::linalg::{gaussian_vec, random_unit};
use crate::rng::{stream, StreamRng};

/// Number of runs used to estimate population statistics.
pub const POPULATION_RUNS: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    pub dim: usize,
    pub num_prototypes: usize,
    /// Alignment of a member embedding with its prototype.
    pub gamma_in: f64,
    /// Probability mass a member run puts off its aligned prototype.
    pub leakage: f64,
    /// Radius of the optimization residual.
    pub eps_opt: f64,
    pub seed: u64,
}

impl Default for TheoryParams {
    fn default() -> Self {
        Self {
            dim: 512,
            num_prototypes: 64,
            gamma_in: 0.5,
            leakage: 0.05,
            eps_opt: 0.05,
            seed: 0,
        }
    }
}

impl TheoryParams {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 || self.num_prototypes < 2 {
            return Err(UmidError::Argument(format!(
                "need dim >= 2 and at least 2 prototypes, got d={} M={}",
                self.dim, self.num_prototypes
            )));
        }
        if !(self.gamma_in > 0.0 && self.gamma_in <= 1.0) {
            return Err(UmidError::Argument(format!("gamma_in must be in (0, 1], got {}", self.gamma_in)));
        }
        if !(0.0..=1.0).contains(&self.leakage) {
            return Err(UmidError::Argument(format!("leakage must be in [0, 1], got {}", self.leakage)));
        }
        if !(self.eps_opt >= 0.0 && self.eps_opt < 1.0) {
            return Err(UmidError::Argument(format!("eps_opt must be in [0, 1), got {}", self.eps_opt)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeModel {
    pub params: TheoryParams,
    /// One unit prototype per row.
    pub prototypes: Array2<f64>,
    /// Largest absolute inner product between distinct prototypes.
    pub coherence: f64,
}

/// Largest |mu_y . mu_z| over distinct rows.
pub fn max_coherence(prototypes: &Array2<f64>) -> f64 {
    let gram = prototypes.dot(&prototypes.t());
    let mut worst = 0.0f64;
    for i in 0..gram.nrows() {
        for j in (i + 1)..gram.ncols() {
            worst = worst.max(gram[[i, j]].abs());
        }
    }
    worst
}

impl PrototypeModel {
    pub fn new(params: TheoryParams) -> Result<Self> {
        params.validate()?;
        let mut rng = stream(params.seed, "theory/prototypes", 0);
        let (m, d) = (params.num_prototypes, params.dim);
        let mut prototypes = Array2::zeros((m, d));
        for mut row in prototypes.rows_mut() {
            row.assign(&Array1::from(random_unit(&mut rng, d)));
        }
        Self::from_prototypes(params, prototypes)
    }

    /// Use caller-supplied prototypes (rows are normalized).
    pub fn from_prototypes(params: TheoryParams, mut prototypes: Array2<f64>) -> Result<Self> {
        let params = TheoryParams {
            dim: prototypes.ncols(),
            num_prototypes: prototypes.nrows(),
            ..params
        };
        params.validate()?;
        for mut row in prototypes.rows_mut() {
            let n = row.dot(&row).sqrt();
            if !(n > 0.0) {
                return Err(UmidError::Argument("prototype with zero norm".into()));
            }
            row /= n;
        }
        let coherence = max_coherence(&prototypes);
        Ok(Self {
            params,
            prototypes,
            coherence,
        })
    }

    pub fn prototype(&self, k: usize) -> ArrayView1<'_, f64> {
        self.prototypes.row(k)
    }
}

pub fn sample_prototypes(dim: usize, num_prototypes: usize, seed: u64) -> Result<PrototypeModel> {
    PrototypeModel::new(TheoryParams {
        dim,
        num_prototypes,
        seed,
        ..TheoryParams::default()
    })
}

fn unit_orthogonal_to<R: Rng + ?Sized>(rng: &mut R, mu: ArrayView1<f64>) -> Array1<f64> {
    loop {
        let mut w = Array1::from(gaussian_vec(rng, mu.len()));
        let along = w.dot(&mu);
        w.scaled_add(-along, &mu);
        let n = w.dot(&w).sqrt();
        if n > 1e-12 {
            return w / n;
        }
    }
}

/// `gamma * mu_y + sqrt(1 - gamma^2) * w` with `w` a unit vector orthogonal to `mu_y`.
pub fn make_member<R: Rng + ?Sized>(model: &PrototypeModel, target: usize, rng: &mut R) -> Result<Array1<f64>> {
    let g = model.params.gamma_in;
    if !(g > 0.0 && g <= 1.0) {
        return Err(UmidError::Argument(format!("gamma_in must be in (0, 1], got {g}")));
    }
    if target >= model.params.num_prototypes {
        return Err(UmidError::Argument(format!("prototype index {target} out of range")));
    }
    let mu = model.prototype(target);
    let w = unit_orthogonal_to(rng, mu);
    Ok(&mu * g + &w * (1.0 - g * g).sqrt())
}

pub fn make_nonmember<R: Rng + ?Sized>(model: &PrototypeModel, rng: &mut R) -> Array1<f64> {
    Array1::from(random_unit(rng, model.params.dim))
}

/// Whose prototype distribution a simulated query follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Member { target: usize },
    NonMember,
}

fn draw_prototype<R: Rng + ?Sized>(model: &PrototypeModel, role: Role, rng: &mut R) -> usize {
    let m = model.params.num_prototypes;
    match role {
        Role::NonMember => rng.random_range(0..m),
        Role::Member { target } => {
            if rng.random::<f64>() >= model.params.leakage {
                target
            } else {
                let k = rng.random_range(0..m - 1);
                if k >= target {
                    k + 1
                } else {
                    k
                }
            }
        }
    }
}

/// One run: `normalize(mu_C + Delta)`, Delta uniform in the eps_opt ball.
pub fn simulate_run<R: Rng + ?Sized>(model: &PrototypeModel, role: Role, rng: &mut R) -> Array1<f64> {
    let c = draw_prototype(model, role, rng);
    let mut v = model.prototype(c).to_owned();
    let eps = model.params.eps_opt;
    if eps > 0.0 {
        let d = model.params.dim as f64;
        let radius = eps * rng.random::<f64>().powf(1.0 / d);
        let dir = Array1::from(random_unit(rng, model.params.dim));
        v.scaled_add(radius, &dir);
    }
    let n = v.dot(&v).sqrt();
    v / n
}

pub fn simulate_embeddings<R: Rng + ?Sized>(model: &PrototypeModel, role: Role, n: usize, rng: &mut R) -> Array2<f64> {
    let mut out = Array2::zeros((n, model.params.dim));
    for mut row in out.rows_mut() {
        row.assign(&simulate_run(model, role, rng));
    }
    out
}

/// Statistics of `n` simulated runs against `v_t`.
pub fn simulate_runs<R: Rng + ?Sized>(
    model: &PrototypeModel,
    v_t: ArrayView1<f64>,
    role: Role,
    n: usize,
    rng: &mut R,
) -> Result<Statistics> {
    if n == 0 {
        return Err(UmidError::Argument("need at least one run".into()));
    }
    compute_stats(v_t, simulate_embeddings(model, role, n, rng).view())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationStats {
    pub s_inf: f64,
    pub d_inf2: f64,
    pub mean_prototype: Array1<f64>,
}

/// Long-run limit estimated from `runs` streamed runs.
pub fn population_stats(
    model: &PrototypeModel,
    v_t: ArrayView1<f64>,
    role: Role,
    runs: usize,
    seed: u64,
) -> PopulationStats {
    let mut rng = stream(seed, "theory/population", 0);
    let mut sum = Array1::zeros(model.params.dim);
    for _ in 0..runs {
        sum += &simulate_run(model, role, &mut rng);
    }
    let m = sum / runs as f64;
    PopulationStats {
        s_inf: v_t.dot(&m),
        d_inf2: 1.0 - m.dot(&m),
        mean_prototype: m,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub member: Statistics,
    pub nonmember: Statistics,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub params: TheoryParams,
    pub coherence: f64,
    pub n: usize,
    pub trials: usize,
    pub member_population: Statistics,
    pub nonmember_population: Statistics,
    pub gap_s: f64,
    pub gap_d: f64,
    pub gamma: f64,
    pub s_threshold: f64,
    pub d2_threshold: f64,
    pub success_rate: f64,
    #[serde(skip)]
    pub outcomes: Vec<TrialOutcome>,
}

impl SeparationReport {
    /// Per-trial rows `(role, S_n, D_n2)`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("trial,role,S_n,D_n2,success\n");
        for (i, o) in self.outcomes.iter().enumerate() {
            for (role, s) in [("member", o.member), ("non-member", o.nonmember)] {
                out.push_str(&format!(
                    "{i},{role},{:.12},{:.12},{}\n",
                    s.similarity, s.variability, o.success
                ));
            }
        }
        out
    }
}

/// The fixed query pair every trial audits.
pub struct QueryPair {
    pub model: PrototypeModel,
    pub member: Array1<f64>,
    pub nonmember: Array1<f64>,
    pub member_population: PopulationStats,
    pub nonmember_population: PopulationStats,
}

pub const MEMBER_TARGET: usize = 0;

pub fn query_pair(params: &TheoryParams) -> Result<QueryPair> {
    let model = PrototypeModel::new(params.clone())?;
    let mut rng = stream(params.seed, "theory/queries", 0);
    let member = make_member(&model, MEMBER_TARGET, &mut rng)?;
    let nonmember = make_nonmember(&model, &mut rng);
    let role = Role::Member { target: MEMBER_TARGET };
    let member_population = population_stats(&model, member.view(), role, POPULATION_RUNS, params.seed);
    let nonmember_population =
        population_stats(&model, nonmember.view(), Role::NonMember, POPULATION_RUNS, params.seed ^ 1);
    Ok(QueryPair {
        model,
        member,
        nonmember,
        member_population,
        nonmember_population,
    })
}

fn trial_rng(seed: u64, label: &str, n: usize, trial: usize) -> StreamRng {
    stream(crate::rng::derive_seed(seed, label, n as u64), "theory/trial", trial as u64)
}

/// Joint success rate of the four separation inequalities at sample size
/// `n`, with midpoint thresholds from the population estimates.
pub fn verify_theorem(params: &TheoryParams, n: usize, trials: usize) -> Result<SeparationReport> {
    let pair = query_pair(params)?;
    verify_theorem_with(&pair, n, trials)
}

pub fn verify_theorem_with(pair: &QueryPair, n: usize, trials: usize) -> Result<SeparationReport> {
    if n == 0 || trials == 0 {
        return Err(UmidError::Argument("n and trials must be positive".into()));
    }
    let (pin, pout) = (&pair.member_population, &pair.nonmember_population);
    let gap_s = pin.s_inf - pout.s_inf;
    let gap_d = pout.d_inf2 - pin.d_inf2;
    if gap_s.min(gap_d) <= 0.0 {
        return Err(UmidError::NoSeparation { gap_s, gap_d });
    }
    let s_threshold = 0.5 * (pin.s_inf + pout.s_inf);
    let d2_threshold = 0.5 * (pin.d_inf2 + pout.d_inf2);
    let seed = pair.model.params.seed;
    let outcomes: Vec<TrialOutcome> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, "separation", n, t);
            let role = Role::Member { target: MEMBER_TARGET };
            let member = simulate_runs(&pair.model, pair.member.view(), role, n, &mut rng)?;
            let nonmember = simulate_runs(&pair.model, pair.nonmember.view(), Role::NonMember, n, &mut rng)?;
            let success = member.similarity >= s_threshold
                && member.variability <= d2_threshold
                && nonmember.similarity < s_threshold
                && nonmember.variability > d2_threshold;
            Ok(TrialOutcome {
                member,
                nonmember,
                success,
            })
        })
        .collect::<Result<_>>()?;
    let success_rate = outcomes.iter().filter(|o| o.success).count() as f64 / trials as f64;
    let pop = |p: &PopulationStats| Statistics {
        similarity: p.s_inf,
        variability: p.d_inf2,
    };
    Ok(SeparationReport {
        params: pair.model.params.clone(),
        coherence: pair.model.coherence,
        n,
        trials,
        member_population: pop(pin),
        nonmember_population: pop(pout),
        gap_s,
        gap_d,
        gamma: gap_s.min(gap_d),
        s_threshold,
        d2_threshold,
        success_rate,
        outcomes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationRow {
    pub n: usize,
    pub rms_s: f64,
    pub rms_d2: f64,
    /// `3 * sqrt(ln(2 / 0.01) / (2n))`
    pub bound: f64,
    pub within_bound_s: f64,
    pub within_bound_d2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub params: TheoryParams,
    pub trials: usize,
    pub rows: Vec<ConcentrationRow>,
    pub slope_s: f64,
    pub slope_d2: f64,
}

impl ConcentrationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,rms_S_n,rms_D_n2,bound,within_bound_S,within_bound_D2\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.12},{:.12},{:.12},{:.4},{:.4}\n",
                r.n, r.rms_s, r.rms_d2, r.bound, r.within_bound_s, r.within_bound_d2
            ));
        }
        out
    }
}

pub fn hoeffding_bound(n: usize) -> f64 {
    3.0 * ((2.0f64 / 0.01).ln() / (2.0 * n as f64)).sqrt()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let (mx, my) = (crate::linalg::mean(&lx), crate::linalg::mean(&ly));
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

/// RMS deviation of the member statistics from their long-run values per n.
pub fn verify_concentration(params: &TheoryParams, n_grid: &[usize], trials: usize) -> Result<ConcentrationReport> {
    if n_grid.len() < 2 || n_grid.windows(2).any(|w| w[0] >= w[1]) || n_grid[0] == 0 {
        return Err(UmidError::Argument("n grid must be positive, increasing, with at least 2 sizes".into()));
    }
    if trials == 0 {
        return Err(UmidError::Argument("trials must be positive".into()));
    }
    let pair = query_pair(params)?;
    let pop = &pair.member_population;
    let role = Role::Member { target: MEMBER_TARGET };
    let mut rows = Vec::with_capacity(n_grid.len());
    for &n in n_grid {
        let devs: Vec<(f64, f64)> = (0..trials)
            .into_par_iter()
            .map(|t| {
                let mut rng = trial_rng(params.seed, "concentration", n, t);
                let s = simulate_runs(&pair.model, pair.member.view(), role, n, &mut rng)?;
                Ok((s.similarity - pop.s_inf, s.variability - pop.d_inf2))
            })
            .collect::<Result<_>>()?;
        let rms = |f: fn(&(f64, f64)) -> f64| (devs.iter().map(|d| f(d).powi(2)).sum::<f64>() / trials as f64).sqrt();
        let bound = hoeffding_bound(n);
        let within = |f: fn(&(f64, f64)) -> f64| devs.iter().filter(|d| f(d).abs() <= bound).count() as f64 / trials as f64;
        rows.push(ConcentrationRow {
            n,
            rms_s: rms(|d| d.0),
            rms_d2: rms(|d| d.1),
            bound,
            within_bound_s: within(|d| d.0),
            within_bound_d2: within(|d| d.1),
        });
    }
    let ns: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let slope_s = log_log_slope(&ns, &rows.iter().map(|r| r.rms_s).collect::<Vec<_>>());
    let slope_d2 = log_log_slope(&ns, &rows.iter().map(|r| r.rms_d2).collect::<Vec<_>>());
    Ok(ConcentrationReport {
        params: params.clone(),
        trials,
        rows,
        slope_s,
        slope_d2,
    })
}
