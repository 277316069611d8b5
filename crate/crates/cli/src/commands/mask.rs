use std::path::PathBuf;

use rblock_core::gamma::GammaMode;
use rblock_core::mask::{sample_step, CenterRegion, DropMethod, DropSpec, MaskShape, StepMasks};
use rblock_core::rng::RngStream;
use rblock_core::train::STREAM_MASKS;
use serde::Serialize;

use crate::exit::CliResult;
use crate::{Globals, Output};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Method key, e.g. bdropdml, sdropdml, dropblock, rdrop.
    #[arg(long, value_parser = super::parse_key::<DropMethod>)]
    pub method: DropMethod,
    /// Plane height.
    #[arg(long)]
    pub m: usize,
    /// Plane width.
    #[arg(long)]
    pub n: usize,
    /// Channels.
    #[arg(long, default_value_t = 1)]
    pub c: usize,
    /// Drop rate; defaults to the method's reference rate.
    #[arg(long)]
    pub p: Option<f64>,
    /// Block size (odd).
    #[arg(long, default_value_t = 3)]
    pub bsize: usize,
    #[arg(long, default_value = "corrected", value_parser = super::parse_key::<GammaMode>)]
    pub gamma_mode: GammaMode,
    /// full | valid
    #[arg(long, default_value = "full", value_parser = super::parse_key::<CenterRegion>)]
    pub center_region: CenterRegion,
    /// Output JSON file.
    #[arg(long)]
    pub out: PathBuf,
}

/// On-disk mask format. Arrays are flattened channel-major: index
/// `(c * m + i) * n + j`.
#[derive(Debug, Serialize)]
pub struct MaskFile {
    pub shape: [usize; 3],
    pub method: DropMethod,
    pub p: f64,
    pub b_size: usize,
    pub keep1: Vec<f64>,
    pub keep2: Option<Vec<f64>>,
    pub scale1: f64,
    pub scale2: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Serialize)]
struct Summary {
    path: String,
    method: DropMethod,
    p: f64,
    shape: [usize; 3],
    drop_count1: usize,
    drop_count2: Option<usize>,
    degenerate: u32,
}

pub fn run(a: &Args, g: Globals) -> CliResult<Output> {
    let seed = g.seed.unwrap_or(0);
    let spec = DropSpec {
        method: a.method,
        p: a.p.unwrap_or_else(|| a.method.default_p()),
        b_size: a.bsize,
        gamma_mode: a.gamma_mode,
        center_region: a.center_region,
        ..DropSpec::default()
    };
    let shape = MaskShape::new(a.c, a.m, a.n);
    let mut rng = RngStream::new(seed, STREAM_MASKS);
    let (file, counts, degenerate) = match sample_step(shape, &spec, &mut rng)? {
        StepMasks::Single(k) => (
            MaskFile {
                shape: [a.m, a.n, a.c],
                method: a.method,
                p: spec.p,
                b_size: a.bsize,
                keep1: k.keep.into_vec(),
                keep2: None,
                scale1: k.scale,
                scale2: None,
                seed,
            },
            (k.drop_count, None),
            k.degenerate as u32,
        ),
        StepMasks::Pair(pair) => (
            MaskFile {
                shape: [a.m, a.n, a.c],
                method: a.method,
                p: spec.p,
                b_size: a.bsize,
                keep1: pair.keep1.into_vec(),
                keep2: Some(pair.keep2.into_vec()),
                scale1: pair.scale1,
                scale2: Some(pair.scale2),
                seed,
            },
            (pair.raw_drop_count1, Some(pair.raw_drop_count2)),
            pair.degenerate,
        ),
    };
    let mut text = serde_json::to_string(&file)?;
    text.push('\n');
    std::fs::write(&a.out, text)
        .map_err(|e| crate::exit::CliError::data(format!("cannot write {}: {e}", a.out.display())))?;

    let units = a.c * a.m * a.n;
    let mut human = format!(
        "wrote {} ({}, p = {}, {}x{}x{})\nsub-model 1 drops {}/{units} units\n",
        a.out.display(),
        a.method.display_name(),
        spec.p,
        a.m,
        a.n,
        a.c,
        counts.0
    );
    if let Some(d2) = counts.1 {
        human.push_str(&format!("sub-model 2 drops {d2}/{units} units\n"));
    }
    let summary = Summary {
        path: a.out.display().to_string(),
        method: a.method,
        p: spec.p,
        shape: file.shape,
        drop_count1: counts.0,
        drop_count2: counts.1,
        degenerate,
    };
    Output::new(human, summary)
}
