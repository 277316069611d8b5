//! Relationship between the per-unit drop probability `p` and the
//! block-center probability `gamma` of block masks.
//!
//! A block mask is built by drawing centers independently with probability
//! `gamma` over an `m x n` plane and covering a `b x b` square (clipped at
//! the border) around every center, `b = 2k + 1`. A unit is dropped when at
//! least one center lies in its clipped neighbourhood, so each unit's drop
//! probability is `1 - (1 - gamma)^N` where `N` counts the centers that can
//! reach it. Grouping the units by `N` into an interior region, four `k x k`
//! corners and four edge strips gives the closed form in [`p_exact`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{dropblock_pattern, CenterRegion};
use crate::rng::RngStream;

/// Plane size and block size of a block mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockGeometry {
    pub m: usize,
    pub n: usize,
    pub b_size: usize,
}

impl BlockGeometry {
    /// `b_size` must be odd and fit inside the plane.
    pub fn new(m: usize, n: usize, b_size: usize) -> Result<Self> {
        check_block_size(b_size)?;
        if b_size > m || b_size > n {
            return Err(Error::invalid(format!(
                "block size {b_size} does not fit in a {m}x{n} plane"
            )));
        }
        Ok(Self { m, n, b_size })
    }

    /// Half width `k` of the block, `b_size = 2k + 1`.
    pub fn k(&self) -> usize {
        (self.b_size - 1) / 2
    }

    pub fn units(&self) -> usize {
        self.m * self.n
    }

    /// Whether the closed form of [`p_exact`] applies (`m, n > 2 b_size`).
    pub fn supports_exact(&self) -> bool {
        self.m > 2 * self.b_size && self.n > 2 * self.b_size
    }

    fn require_exact(&self) -> Result<()> {
        if self.supports_exact() {
            Ok(())
        } else {
            Err(Error::GeometryTooSmall {
                m: self.m,
                n: self.n,
                b_size: self.b_size,
            })
        }
    }

    /// Region a unit falls into: interior, corner, or edge strip.
    pub fn region_of(&self, i: usize, j: usize) -> Region {
        let k = self.k();
        let row_border = i < k || i >= self.m - k;
        let col_border = j < k || j >= self.n - k;
        match (row_border, col_border) {
            (false, false) => Region::Interior,
            (true, true) => Region::Corner,
            _ => Region::Edge,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Interior,
    Corner,
    Edge,
}

fn check_block_size(b_size: usize) -> Result<()> {
    if b_size == 0 || b_size.is_multiple_of(2) {
        return Err(Error::invalid(format!("block size must be odd and >= 1, got {b_size}")));
    }
    Ok(())
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::invalid(format!("{name} = {v} outside [0, 1]")));
    }
    Ok(())
}

/// How `gamma` is derived from a target drop probability.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaMode {
    /// `p / b^2`
    Simple,
    /// `p m n / (b^2 (m-b+1)(n-b+1))`
    #[default]
    Corrected,
    /// Numerical inversion of [`p_exact`].
    Exact,
}

impl std::str::FromStr for GammaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple" => Ok(Self::Simple),
            "corrected" => Ok(Self::Corrected),
            "exact" => Ok(Self::Exact),
            other => Err(Error::invalid(format!("unknown gamma mode '{other}'"))),
        }
    }
}

/// `(1 - gamma)^e`, via `log1p` so small `gamma` keeps full precision.
#[inline]
fn keep_pow(gamma: f64, e: f64) -> f64 {
    (e * (-gamma).ln_1p()).exp()
}

pub fn gamma_simple(p: f64, b_size: usize) -> Result<f64> {
    check_unit("p", p)?;
    check_block_size(b_size)?;
    Ok(p / (b_size * b_size) as f64)
}

/// Center probability that accounts for centers being confined to the
/// region where a full block fits. Capped at 1.
pub fn gamma_corrected(p: f64, geom: &BlockGeometry) -> Result<f64> {
    check_unit("p", p)?;
    let b = geom.b_size;
    let valid = ((geom.m - b + 1) * (geom.n - b + 1)) as f64;
    Ok((p * geom.units() as f64 / ((b * b) as f64 * valid)).min(1.0))
}

pub fn gamma_for(mode: GammaMode, p: f64, geom: &BlockGeometry) -> Result<f64> {
    match mode {
        GammaMode::Simple => gamma_simple(p, geom.b_size),
        GammaMode::Corrected => gamma_corrected(p, geom),
        GammaMode::Exact => solve_gamma_exact(p, geom, 1e-12),
    }
}

/// Per-unit drop probability of a full-grid, border-clipped block mask.
///
/// ```text
/// p = (1-2k/m)(1-2k/n)(1-(1-g)^{(2k+1)^2})
///   + 4/(mn) [k^2 - sum_{1<=i,j<=k} (1-g)^{(k+i)(k+j)}]
///   + 2(1/m + 1/n - 4k/(mn)) sum_{j=1..k} [1 - (1-g)^{(2k+1)(k+j)}]
/// ```
///
/// The edge sum is the expanded form of the geometric ratio
/// `k - (1-g)^{(2k+1)(k+1)} (1-(1-g)^{(2k+1)k}) / (1-(1-g)^{2k+1})`, which is
/// 0/0 at `g = 0`. Requires `m, n > 2 b_size`.
pub fn p_exact(gamma: f64, geom: &BlockGeometry) -> Result<f64> {
    check_unit("gamma", gamma)?;
    geom.require_exact()?;
    let k = geom.k();
    let b = geom.b_size as f64;
    let (m, n) = (geom.m as f64, geom.n as f64);
    let kf = k as f64;

    let interior = (m - 2.0 * kf) * (n - 2.0 * kf) * (1.0 - keep_pow(gamma, b * b));
    let mut corner_kept = 0.0;
    for i in 1..=k {
        for j in 1..=k {
            corner_kept += keep_pow(gamma, ((k + i) * (k + j)) as f64);
        }
    }
    let corner = 4.0 * (kf * kf - corner_kept);
    let edge_strip: f64 = (1..=k).map(|j| 1.0 - keep_pow(gamma, b * (k + j) as f64)).sum();
    let edge = 2.0 * (m + n - 4.0 * kf) * edge_strip;

    Ok((interior + corner + edge) / (m * n))
}

/// Drop probability when border clipping is ignored: `1 - (1-gamma)^{b^2}`.
pub fn p_no_margin(gamma: f64, b_size: usize) -> f64 {
    1.0 - keep_pow(gamma, (b_size * b_size) as f64)
}

/// Drop probability when only the `(m-b+1)(n-b+1)` positions whose block
/// fits entirely count: `(m-b+1)(n-b+1)(1-(1-gamma)^{b^2}) / (mn)`.
pub fn p_valid_region(gamma: f64, geom: &BlockGeometry) -> f64 {
    let b = geom.b_size;
    let valid = ((geom.m - b + 1) * (geom.n - b + 1)) as f64;
    valid * p_no_margin(gamma, b) / geom.units() as f64
}

/// Inverts [`p_exact`] by bisection on `[0, 1]`.
///
/// The `p / b^2` and corrected estimates are evaluated first and used to
/// shrink the bracket; `p_exact` is increasing in `gamma`, so each estimate
/// lands on one side of the root.
pub fn solve_gamma_exact(p_target: f64, geom: &BlockGeometry, tol: f64) -> Result<f64> {
    check_unit("p", p_target)?;
    geom.require_exact()?;
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::invalid(format!("tolerance must be positive, got {tol}")));
    }
    if p_target == 0.0 {
        return Ok(0.0);
    }
    if p_target == 1.0 {
        return Ok(1.0);
    }

    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for seed in [gamma_simple(p_target, geom.b_size)?, gamma_corrected(p_target, geom)?] {
        let residual = p_exact(seed, geom)? - p_target;
        if residual.abs() <= tol {
            return Ok(seed);
        }
        if residual < 0.0 {
            lo = lo.max(seed);
        } else {
            hi = hi.min(seed);
        }
    }

    const MAX_ITER: usize = 200;
    for _ in 0..MAX_ITER {
        let mid = 0.5 * (lo + hi);
        let residual = p_exact(mid, geom)? - p_target;
        if residual.abs() <= tol {
            return Ok(mid);
        }
        if residual < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Numerical(format!(
        "gamma bisection for p = {p_target} on {}x{} (b = {}) did not reach tol {tol} in {MAX_ITER} iterations",
        geom.m, geom.n, geom.b_size
    )))
}

/// Number of centers (over the full grid) whose clipped block covers unit
/// `(i, j)`, 0-based.
pub fn coverage_count(geom: &BlockGeometry, i: usize, j: usize) -> usize {
    let k = geom.k();
    let span = |x: usize, len: usize| (x + k).min(len - 1) - x.saturating_sub(k) + 1;
    span(i, geom.m) * span(j, geom.n)
}

/// Drop probability of a single unit under full-grid centers.
pub fn unit_drop_probability(gamma: f64, geom: &BlockGeometry, i: usize, j: usize) -> f64 {
    1.0 - keep_pow(gamma, coverage_count(geom, i, j) as f64)
}

/// Expected number of dropped units per region.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RegionExpectations {
    pub interior: f64,
    pub corner: f64,
    pub edge: f64,
}

impl RegionExpectations {
    pub fn total(&self) -> f64 {
        self.interior + self.corner + self.edge
    }
}

/// Sums per-unit drop probabilities region by region.
pub fn region_expectations(gamma: f64, geom: &BlockGeometry) -> Result<RegionExpectations> {
    check_unit("gamma", gamma)?;
    geom.require_exact()?;
    let mut e = RegionExpectations {
        interior: 0.0,
        corner: 0.0,
        edge: 0.0,
    };
    for i in 0..geom.m {
        for j in 0..geom.n {
            let p = unit_drop_probability(gamma, geom, i, j);
            match geom.region_of(i, j) {
                Region::Interior => e.interior += p,
                Region::Corner => e.corner += p,
                Region::Edge => e.edge += p,
            }
        }
    }
    Ok(e)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RegionMeans {
    pub interior: Option<f64>,
    pub corner: Option<f64>,
    pub edge: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GeometryJson {
    pub m: usize,
    pub n: usize,
    pub b_size: usize,
}

/// Monte Carlo drop statistics of single-channel block masks.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MaskStatsReport {
    pub gamma: f64,
    pub geometry: GeometryJson,
    pub center_region: CenterRegion,
    pub trials: usize,
    /// `None` when the closed form does not apply.
    pub analytic_p: Option<f64>,
    pub empirical_p: f64,
    pub abs_deviation: Option<f64>,
    /// Binomial standard error treating all `m n trials` units as independent.
    pub sigma_binomial: f64,
    /// Standard error of the per-trial drop fraction.
    pub sigma_trials: f64,
    pub region_means: RegionMeans,
    /// Row-major `m x n` drop frequencies.
    pub freq_map: Vec<f64>,
}

impl MaskStatsReport {
    /// `|analytic - empirical| <= sigmas * sigma_binomial`, when an analytic
    /// value exists.
    pub fn within_binomial_sigma(&self, sigmas: f64) -> Option<bool> {
        self.abs_deviation.map(|d| d <= sigmas * self.sigma_binomial)
    }

    pub fn freq(&self, i: usize, j: usize) -> f64 {
        self.freq_map[i * self.geometry.n + j]
    }
}

/// Samples `trials` block masks and tabulates how often each unit is dropped.
pub fn mc_drop_rate(
    gamma: f64,
    geom: &BlockGeometry,
    trials: usize,
    rng: &mut RngStream,
    center_region: CenterRegion,
) -> Result<MaskStatsReport> {
    check_unit("gamma", gamma)?;
    if trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    let units = geom.units();
    let mut counts = vec![0u64; units];
    let (mut frac_sum, mut frac_sq) = (0.0, 0.0);
    for _ in 0..trials {
        let pattern = dropblock_pattern(geom, gamma, rng, center_region)?;
        let mut dropped = 0u64;
        for (c, &d) in counts.iter_mut().zip(pattern.cells()) {
            if d {
                *c += 1;
                dropped += 1;
            }
        }
        let f = dropped as f64 / units as f64;
        frac_sum += f;
        frac_sq += f * f;
    }

    let t = trials as f64;
    let freq_map: Vec<f64> = counts.iter().map(|&c| c as f64 / t).collect();
    let total: u64 = counts.iter().sum();
    let empirical_p = total as f64 / (units as f64 * t);

    let analytic_p = match center_region {
        CenterRegion::Full if geom.supports_exact() => Some(p_exact(gamma, geom)?),
        _ => None,
    };
    let p_ref = analytic_p.unwrap_or(empirical_p);
    let sigma_binomial = (p_ref * (1.0 - p_ref) / (units as f64 * t)).sqrt();
    let var_trial = if trials > 1 {
        ((frac_sq - frac_sum * frac_sum / t) / (t - 1.0)).max(0.0)
    } else {
        0.0
    };

    let mut sums = [0.0; 3];
    let mut sizes = [0usize; 3];
    for i in 0..geom.m {
        for j in 0..geom.n {
            let r = match geom.region_of(i, j) {
                Region::Interior => 0,
                Region::Corner => 1,
                Region::Edge => 2,
            };
            sums[r] += freq_map[i * geom.n + j];
            sizes[r] += 1;
        }
    }
    let mean = |r: usize| (sizes[r] > 0).then(|| sums[r] / sizes[r] as f64);

    Ok(MaskStatsReport {
        gamma,
        geometry: GeometryJson {
            m: geom.m,
            n: geom.n,
            b_size: geom.b_size,
        },
        center_region,
        trials,
        analytic_p,
        empirical_p,
        abs_deviation: analytic_p.map(|p| (p - empirical_p).abs()),
        sigma_binomial,
        sigma_trials: (var_trial / t).sqrt(),
        region_means: RegionMeans {
            interior: mean(0),
            corner: mean(1),
            edge: mean(2),
        },
        freq_map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(m: usize, n: usize, b: usize) -> BlockGeometry {
        BlockGeometry::new(m, n, b).unwrap()
    }

    #[test]
    fn simple_gamma_values() {
        assert!((gamma_simple(0.2, 3).unwrap() - 0.2 / 9.0).abs() < 1e-15);
        assert!((gamma_simple(0.2, 3).unwrap() - 0.0222222).abs() < 1e-7);
        assert_eq!(gamma_simple(0.0, 5).unwrap(), 0.0);
        assert_eq!(gamma_simple(0.37, 1).unwrap(), 0.37);
        assert!(gamma_simple(0.2, 4).is_err());
        assert!(gamma_simple(1.2, 3).is_err());
    }

    #[test]
    fn corrected_gamma_values() {
        let g = gamma_corrected(0.2, &geom(32, 32, 3)).unwrap();
        assert!((g - 0.2 * 1024.0 / (9.0 * 900.0)).abs() < 1e-15);
        assert!((g - 0.0252840).abs() < 1e-7);
        assert_eq!(gamma_corrected(0.0, &geom(32, 32, 3)).unwrap(), 0.0);
        assert_eq!(gamma_corrected(0.3, &geom(8, 9, 1)).unwrap(), 0.3);
        assert!(BlockGeometry::new(2, 8, 3).is_err());
        assert!(BlockGeometry::new(8, 8, 2).is_err());
    }

    #[test]
    fn exact_boundary_values() {
        for g in [geom(12, 12, 3), geom(20, 17, 5), geom(32, 32, 3)] {
            assert_eq!(p_exact(0.0, &g).unwrap(), 0.0);
            assert!((p_exact(1.0, &g).unwrap() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn exact_requires_large_plane() {
        let err = p_exact(0.1, &geom(6, 20, 3)).unwrap_err();
        assert!(matches!(err, Error::GeometryTooSmall { .. }));
        assert!(solve_gamma_exact(0.5, &geom(6, 6, 3), 1e-12).is_err());
        assert!(p_exact(0.1, &geom(7, 7, 3)).is_ok());
    }

    #[test]
    fn unit_block_is_identity() {
        let g = geom(9, 11, 1);
        for gamma in [0.0, 0.013, 0.5, 0.97, 1.0] {
            assert!((p_exact(gamma, &g).unwrap() - gamma).abs() <= 1e-15);
        }
    }

    #[test]
    fn no_margin_small_values() {
        assert_eq!(p_no_margin(0.0, 3), 0.0);
        assert!((p_no_margin(0.25, 1) - 0.25).abs() < 1e-16);
        // 1 - (0.9777778)^9 expanded by the binomial series to 12 terms
        let g = 0.0222222_f64;
        let mut series = 0.0;
        let mut binom = 1.0;
        for j in 1..=9 {
            binom *= (9 - j + 1) as f64 / j as f64;
            series -= binom * (-g).powi(j);
        }
        assert!((p_no_margin(g, 3) - series).abs() < 1e-15);
    }

    #[test]
    fn valid_region_limits() {
        assert_eq!(p_valid_region(0.0, &geom(32, 32, 3)), 0.0);
        let big = geom(10_000, 10_000, 3);
        let (p1, p2) = (p_no_margin(0.05, 3), p_valid_region(0.05, &big));
        assert!((p1 - p2).abs() / p1 <= 1e-3);
    }

    #[test]
    fn solver_trivial_targets_and_residual() {
        let g = geom(32, 32, 3);
        assert_eq!(solve_gamma_exact(0.0, &g, 1e-12).unwrap(), 0.0);
        assert_eq!(solve_gamma_exact(1.0, &g, 1e-12).unwrap(), 1.0);
        let gamma = solve_gamma_exact(0.5, &g, 1e-12).unwrap();
        assert!((p_exact(gamma, &g).unwrap() - 0.5).abs() <= 1e-12);
        // the p/b^2 estimate is always a lower bound
        assert!(gamma >= gamma_simple(0.5, 3).unwrap());
        assert!(solve_gamma_exact(0.5, &g, 0.0).is_err());
    }

    #[test]
    fn coverage_counts_on_corner_and_interior() {
        let g = geom(12, 12, 3);
        assert_eq!(coverage_count(&g, 0, 0), 4);
        assert_eq!(coverage_count(&g, 0, 5), 6);
        assert_eq!(coverage_count(&g, 5, 5), 9);
        assert_eq!(coverage_count(&g, 11, 11), 4);
    }

    #[test]
    fn mc_degenerate_gammas() {
        let g = geom(12, 12, 3);
        let mut rng = RngStream::new(1, 0);
        let r0 = mc_drop_rate(0.0, &g, 50, &mut rng, CenterRegion::Full).unwrap();
        assert!(r0.freq_map.iter().all(|&f| f == 0.0));
        assert_eq!(r0.abs_deviation, Some(0.0));
        let r1 = mc_drop_rate(1.0, &g, 50, &mut rng, CenterRegion::Full).unwrap();
        assert!(r1.freq_map.iter().all(|&f| f == 1.0));
        assert_eq!(r1.within_binomial_sigma(3.0), Some(true));
        assert!(mc_drop_rate(0.1, &g, 0, &mut rng, CenterRegion::Full).is_err());
    }

    #[test]
    fn report_json_has_documented_keys() {
        let g = geom(12, 12, 3);
        let mut rng = RngStream::new(1, 0);
        let r = mc_drop_rate(0.05, &g, 10, &mut rng, CenterRegion::Full).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        for key in ["gamma", "geometry", "trials", "analytic_p", "empirical_p", "abs_deviation", "region_means", "freq_map"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["geometry"]["b_size"], 3);
        assert_eq!(v["freq_map"].as_array().unwrap().len(), 144);
        assert!(v["region_means"]["corner"].is_number());
    }
}
