use rblock_core::gamma::{mc_drop_rate, BlockGeometry};
use rblock_core::mask::{marginal_drop_stats, CenterRegion, DropMethod, DropSpec, MaskShape};
use rblock_core::rng::RngStream;
use serde::Serialize;
use serde_json::Value;

use crate::exit::{CliError, CliResult, NUMERICAL};
use crate::{Globals, Output};

pub const MIN_TRIALS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SigmaRule {
    /// Standard error of the per-trial drop fraction.
    Trial,
    /// Binomial standard error over all unit draws, treating units as independent.
    Binomial,
}

#[derive(Debug, clap::Args)]
#[command(group(clap::ArgGroup::new("target").required(true).args(["gamma", "method"])))]
pub struct Args {
    /// Block-center probability of a single block mask.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Method whose marginal drop rate is checked instead.
    #[arg(long, value_parser = super::parse_key::<DropMethod>)]
    pub method: Option<DropMethod>,
    /// Drop rate for --method; defaults to the method's reference rate.
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub m: usize,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 3)]
    pub bsize: usize,
    /// Channels (method mode).
    #[arg(long, default_value_t = 1)]
    pub c: usize,
    #[arg(long, default_value_t = 100_000)]
    pub trials: usize,
    /// full | valid
    #[arg(long, default_value = "full", value_parser = super::parse_key::<CenterRegion>)]
    pub center_region: CenterRegion,
    /// Standard error used for the verdict.
    #[arg(long, value_enum, default_value_t = SigmaRule::Trial)]
    pub sigma: SigmaRule,
    /// Verdict threshold in standard errors.
    #[arg(long, default_value_t = 3.0)]
    pub sigmas: f64,
}

struct Verdict {
    deviation: Option<f64>,
    sigma: f64,
    pass: Option<bool>,
}

fn verdict(a: &Args, deviation: Option<f64>, sigma_binomial: f64, sigma_trials: f64) -> Verdict {
    let sigma = match a.sigma {
        SigmaRule::Trial => sigma_trials,
        SigmaRule::Binomial => sigma_binomial,
    };
    Verdict { deviation, sigma, pass: deviation.map(|d| d <= a.sigmas * sigma) }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"))
}

pub fn run(a: &Args, g: Globals) -> CliResult<Output> {
    if a.trials < MIN_TRIALS {
        return Err(CliError::usage(format!("--trials must be at least {MIN_TRIALS}")));
    }
    let mut rng = RngStream::new(g.seed.unwrap_or(0), 0);
    let (mut doc, mut text, v) = if let Some(gamma) = a.gamma {
        let geom = BlockGeometry::new(a.m, a.n, a.bsize)?;
        let r = mc_drop_rate(gamma, &geom, a.trials, &mut rng, a.center_region)?;
        let v = verdict(a, r.abs_deviation, r.sigma_binomial, r.sigma_trials);
        let text = format!(
            "gamma = {gamma}, {}x{} plane, b = {}, {} trials, centers: {}\n\
             analytic p  = {}\nempirical p = {:.6}\n\
             sigma binomial = {:.3e}, sigma trial = {:.3e}\n\
             region means: interior {}, corner {}, edge {}\n",
            a.m,
            a.n,
            a.bsize,
            a.trials,
            serde_json::to_value(a.center_region)?.as_str().unwrap_or_default(),
            fmt_opt(r.analytic_p),
            r.empirical_p,
            r.sigma_binomial,
            r.sigma_trials,
            fmt_opt(r.region_means.interior),
            fmt_opt(r.region_means.corner),
            fmt_opt(r.region_means.edge),
        );
        (serde_json::to_value(&r)?, text, v)
    } else {
        let method = a.method.expect("clap enforces one target");
        let spec = DropSpec {
            method,
            p: a.p.unwrap_or_else(|| method.default_p()),
            b_size: a.bsize,
            center_region: a.center_region,
            ..DropSpec::default()
        };
        let r = marginal_drop_stats(&spec, MaskShape::new(a.c, a.m, a.n), a.trials, &mut rng)?;
        let v = verdict(a, Some(r.abs_deviation), r.sigma_binomial, r.sigma_trials);
        let text = format!(
            "{} (p = {}), {}x{}x{}, {} trials\n\
             analytic rate  = {:.6}\nempirical rate = {:.6}{}\n\
             sigma binomial = {:.3e}, sigma trial = {:.3e}\n",
            method.display_name(),
            spec.p,
            a.m,
            a.n,
            a.c,
            a.trials,
            r.analytic_rate,
            r.empirical_rate1,
            r.empirical_rate2.map_or(String::new(), |e| format!(" (sub-model 2: {e:.6})")),
            r.sigma_binomial,
            r.sigma_trials,
        );
        (serde_json::to_value(&r)?, text, v)
    };

    let obj = doc.as_object_mut().expect("reports serialize to objects");
    obj.insert("sigma_rule".into(), serde_json::to_value(a.sigma)?);
    obj.insert("sigmas".into(), a.sigmas.into());
    obj.insert("threshold".into(), (a.sigmas * v.sigma).into());
    obj.insert("pass".into(), v.pass.map_or(Value::Null, Value::Bool));

    let rule = format!("{} sigma ({:?})", a.sigmas, a.sigma).to_lowercase();
    let code = match (v.pass, v.deviation) {
        (Some(true), Some(d)) => {
            text.push_str(&format!("PASS: |delta p| = {d:.3e} <= {rule} = {:.3e}\n", a.sigmas * v.sigma));
            0
        }
        (Some(false), Some(d)) => {
            text.push_str(&format!("FAIL: |delta p| = {d:.3e} > {rule} = {:.3e}\n", a.sigmas * v.sigma));
            NUMERICAL
        }
        _ => {
            text.push_str("no closed form for this configuration; Monte Carlo estimate only\n");
            0
        }
    };
    Ok(Output { text, json: doc, code })
}
