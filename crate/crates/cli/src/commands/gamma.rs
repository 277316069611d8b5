use rblock_core::gamma::{gamma_for, p_exact, p_no_margin, p_valid_region, solve_gamma_exact, BlockGeometry, GammaMode};
use serde::Serialize;

use crate::exit::{CliError, CliResult};
use crate::{Globals, Output};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Target per-unit drop probability.
    #[arg(long)]
    pub p: f64,
    /// Block size (odd).
    #[arg(long, default_value_t = 3)]
    pub bsize: usize,
    /// Plane height; required by `corrected` and `exact`.
    #[arg(long)]
    pub m: Option<usize>,
    /// Plane width; required by `corrected` and `exact`.
    #[arg(long)]
    pub n: Option<usize>,
    /// simple | corrected | exact
    #[arg(long, default_value = "corrected", value_parser = super::parse_key::<GammaMode>)]
    pub mode: GammaMode,
    /// Bisection tolerance on the drop probability (exact mode).
    #[arg(long, default_value_t = 1e-12)]
    pub tol: f64,
}

#[derive(Debug, Serialize)]
pub struct GammaReport {
    pub mode: GammaMode,
    pub p: f64,
    pub b_size: usize,
    pub m: Option<usize>,
    pub n: Option<usize>,
    pub gamma: f64,
    /// Drop probability ignoring the border (upper bound).
    pub p1: Option<f64>,
    /// Drop probability with centers confined to the valid region (lower bound).
    pub p2: Option<f64>,
    pub p_exact: Option<f64>,
    pub residual: Option<f64>,
}

pub fn run(a: &Args, _g: Globals) -> CliResult<Output> {
    let geometry = match (a.m, a.n) {
        (Some(m), Some(n)) => Some(BlockGeometry::new(m, n, a.bsize)?),
        (None, None) => None,
        _ => return Err(CliError::usage("--m and --n must be given together")),
    };
    let mut report = GammaReport {
        mode: a.mode,
        p: a.p,
        b_size: a.bsize,
        m: a.m,
        n: a.n,
        gamma: 0.0,
        p1: None,
        p2: None,
        p_exact: None,
        residual: None,
    };
    match (a.mode, geometry) {
        (GammaMode::Simple, _) => report.gamma = rblock_core::gamma::gamma_simple(a.p, a.bsize)?,
        (_, None) => return Err(CliError::usage(format!("--mode {:?} needs --m and --n", a.mode).to_lowercase())),
        (GammaMode::Corrected, Some(geom)) => report.gamma = gamma_for(GammaMode::Corrected, a.p, &geom)?,
        (GammaMode::Exact, Some(geom)) => {
            if !geom.supports_exact() {
                return Err(CliError::numerical(format!(
                    "exact mode needs m, n > 2*b_size for the closed-form drop probability; got {}x{} with b_size {}",
                    geom.m, geom.n, geom.b_size
                )));
            }
            let gamma = solve_gamma_exact(a.p, &geom, a.tol)?;
            let p = p_exact(gamma, &geom)?;
            report.gamma = gamma;
            report.p1 = Some(p_no_margin(gamma, a.bsize));
            report.p2 = Some(p_valid_region(gamma, &geom));
            report.p_exact = Some(p);
            report.residual = Some((p - a.p).abs());
        }
    }

    let mut text = format!("gamma = {:.7}\n", report.gamma);
    if let (Some(p1), Some(p2), Some(r)) = (report.p1, report.p2, report.residual) {
        text.push_str(&format!("p1 (no border) = {p1:.10}\np2 (valid centers) = {p2:.10}\nresidual = {r:.3e}\n"));
    }
    Output::new(text, report)
}
