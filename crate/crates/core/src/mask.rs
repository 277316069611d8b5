//! Drop masks for single models and for pairs of sub-models.
//!
//! All samplers return *keep* masks of shape `(1, channels, height, width)`
//! already divided by their kept proportion, so every mask has mean 1.
//! Probabilities are drop probabilities throughout: block centers fire with
//! probability `gamma` and channels are dropped with probability `p`.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gamma::{gamma_for, p_exact, solve_gamma_exact, BlockGeometry, GammaMode};
use crate::rng::RngStream;
use crate::tensor::Tensor4;

/// Where block centers may be drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterRegion {
    /// Anywhere on the plane; blocks are clipped at the border.
    #[default]
    Full,
    /// Only where the whole block fits inside the plane.
    Valid,
}

impl std::str::FromStr for CenterRegion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "valid" => Ok(Self::Valid),
            other => Err(Error::invalid(format!("unknown center region '{other}'"))),
        }
    }
}

/// Binary `height x width` drop pattern; `true` marks a dropped unit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DropPattern {
    height: usize,
    width: usize,
    cells: Vec<bool>,
}

impl DropPattern {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.width + j]
    }

    pub fn dropped(&self) -> usize {
        self.cells.iter().filter(|&&d| d).count()
    }
}

/// Covers a `b x b` square, clipped at the border, around every center.
pub fn expand_centers(geom: &BlockGeometry, centers: &[bool]) -> Result<DropPattern> {
    if centers.len() != geom.units() {
        return Err(Error::shape("expand_centers", &[geom.m, geom.n], &[centers.len()]));
    }
    let (m, n, k) = (geom.m, geom.n, geom.k());
    let mut cells = vec![false; m * n];
    for ci in 0..m {
        for cj in 0..n {
            if !centers[ci * n + cj] {
                continue;
            }
            for i in ci.saturating_sub(k)..=(ci + k).min(m - 1) {
                cells[i * n + cj.saturating_sub(k)..=i * n + (cj + k).min(n - 1)].fill(true);
            }
        }
    }
    Ok(DropPattern {
        height: m,
        width: n,
        cells,
    })
}

/// Draws block centers with probability `gamma` and expands them.
pub fn dropblock_pattern(
    geom: &BlockGeometry,
    gamma: f64,
    rng: &mut RngStream,
    center_region: CenterRegion,
) -> Result<DropPattern> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid(format!("gamma = {gamma} outside [0, 1]")));
    }
    let (m, n, k) = (geom.m, geom.n, geom.k());
    let mut centers = vec![false; m * n];
    match center_region {
        CenterRegion::Full => {
            for c in centers.iter_mut() {
                *c = rng.bernoulli(gamma);
            }
        }
        CenterRegion::Valid => {
            for i in k..m - k {
                for j in k..n - k {
                    centers[i * n + j] = rng.bernoulli(gamma);
                }
            }
        }
    }
    expand_centers(geom, &centers)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DropMethod {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "dropout")]
    Dropout,
    #[serde(rename = "spatialdropout")]
    SpatialDropout,
    #[serde(rename = "dropblock")]
    DropBlock,
    #[serde(rename = "rdrop")]
    RDropPair,
    #[serde(rename = "cdrop")]
    CDropPair,
    #[serde(rename = "rspatial")]
    RSpatialPair,
    #[serde(rename = "rdropblock")]
    RDropBlockPair,
    #[serde(rename = "bdropdml")]
    BDropDml,
    #[serde(rename = "sdropdml")]
    SDropDml,
}

impl DropMethod {
    pub const ALL: [DropMethod; 10] = [
        Self::Baseline,
        Self::Dropout,
        Self::SpatialDropout,
        Self::DropBlock,
        Self::RDropPair,
        Self::CDropPair,
        Self::RSpatialPair,
        Self::RDropBlockPair,
        Self::BDropDml,
        Self::SDropDml,
    ];

    /// The six two-sub-model strategies, in comparison-table order.
    pub const PAIRS: [DropMethod; 6] = [
        Self::RDropPair,
        Self::CDropPair,
        Self::RSpatialPair,
        Self::RDropBlockPair,
        Self::BDropDml,
        Self::SDropDml,
    ];

    pub fn is_pair(self) -> bool {
        Self::PAIRS.contains(&self)
    }

    /// Command-line / config identifier.
    pub fn key(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Dropout => "dropout",
            Self::SpatialDropout => "spatialdropout",
            Self::DropBlock => "dropblock",
            Self::RDropPair => "rdrop",
            Self::CDropPair => "cdrop",
            Self::RSpatialPair => "rspatial",
            Self::RDropBlockPair => "rdropblock",
            Self::BDropDml => "bdropdml",
            Self::SDropDml => "sdropdml",
        }
    }

    /// Name used in result tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Self::Baseline => "Baseline",
            Self::Dropout => "Dropout",
            Self::SpatialDropout => "SpatialDropout",
            Self::DropBlock => "DropBlock",
            Self::RDropPair => "R-Drop",
            Self::CDropPair => "C-Drop",
            Self::RSpatialPair => "R-SpatialDropout",
            Self::RDropBlockPair => "R-DropBlock",
            Self::BDropDml => "R-Block(BDropDML)",
            Self::SDropDml => "R-Block(SDropDML)",
        }
    }

    /// Drop probability each method is usually run at.
    pub fn default_p(self) -> f64 {
        match self {
            Self::Baseline => 0.0,
            Self::Dropout | Self::RDropPair | Self::CDropPair => 0.5,
            Self::SpatialDropout | Self::DropBlock | Self::RSpatialPair | Self::RDropBlockPair => 0.1,
            Self::BDropDml | Self::SDropDml => 0.2,
        }
    }
}

impl std::fmt::Display for DropMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.key())
    }
}

impl std::str::FromStr for DropMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase().replace(['-', '_', '(', ')'], "");
        let alias = match lower.as_str() {
            "spatial" => "spatialdropout",
            "rblockbdropdml" => "bdropdml",
            "rblocksdropdml" => "sdropdml",
            "rspatialdropout" => "rspatial",
            other => other,
        };
        Self::ALL
            .into_iter()
            .find(|m| m.key() == alias)
            .ok_or_else(|| Error::invalid(format!("unknown drop method '{s}'")))
    }
}

/// How `p` evolves over training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    #[default]
    Constant,
    /// `p(t) = target * t / total`, from 0 at the first epoch.
    LinearRamp { target: f64 },
}

impl Schedule {
    pub fn p_at(&self, base_p: f64, epoch: usize, total_epochs: usize) -> f64 {
        match *self {
            Schedule::Constant => base_p,
            Schedule::LinearRamp { target } => {
                if total_epochs == 0 {
                    target
                } else {
                    target * (epoch as f64 / total_epochs as f64)
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropSpec {
    pub method: DropMethod,
    pub p: f64,
    #[serde(default = "default_b_size")]
    pub b_size: usize,
    #[serde(default)]
    pub gamma_mode: GammaMode,
    #[serde(default)]
    pub center_region: CenterRegion,
    #[serde(default)]
    pub schedule: Schedule,
}

fn default_b_size() -> usize {
    3
}

impl Default for DropSpec {
    fn default() -> Self {
        Self::new(DropMethod::BDropDml, 0.2)
    }
}

impl DropSpec {
    pub fn new(method: DropMethod, p: f64) -> Self {
        Self {
            method,
            p,
            b_size: default_b_size(),
            gamma_mode: GammaMode::Corrected,
            center_region: CenterRegion::Full,
            schedule: Schedule::Constant,
        }
    }

    pub fn with_p(mut self, p: f64) -> Self {
        self.p = p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.p) {
            return Err(Error::invalid(format!("drop probability p = {} outside [0, 1)", self.p)));
        }
        if self.b_size == 0 || self.b_size.is_multiple_of(2) {
            return Err(Error::invalid(format!("block size must be odd, got {}", self.b_size)));
        }
        if self.method == DropMethod::CDropPair && self.p != 0.5 {
            return Err(Error::invalid(format!(
                "complementary element-wise pairs are defined for p = 0.5 only, got {}",
                self.p
            )));
        }
        if let Schedule::LinearRamp { target } = self.schedule {
            if !(0.0..1.0).contains(&target) {
                return Err(Error::invalid(format!("ramp target {target} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// Spec with `p` replaced by its scheduled value at `epoch`.
    pub fn at_epoch(&self, epoch: usize, total_epochs: usize) -> Self {
        self.with_p(self.schedule.p_at(self.p, epoch, total_epochs))
    }
}

/// Channel and spatial extent of the activations a mask applies to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl MaskShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn tensor_shape(&self) -> [usize; 4] {
        [1, self.channels, self.height, self.width]
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn geometry(&self, b_size: usize) -> Result<BlockGeometry> {
        BlockGeometry::new(self.height, self.width, b_size)
    }
}

/// A normalized keep mask.
#[derive(Clone, Debug, PartialEq)]
pub struct KeepMask {
    pub keep: Tensor4,
    /// `1 / s`, with `s` the kept proportion before normalization.
    pub scale: f64,
    pub drop_count: usize,
    /// Set when nothing was kept and the identity mask was substituted.
    pub degenerate: bool,
}

impl KeepMask {
    pub fn identity(shape: MaskShape) -> Self {
        Self {
            keep: Tensor4::ones(shape.tensor_shape()),
            scale: 1.0,
            drop_count: 0,
            degenerate: false,
        }
    }

    /// Normalizes a binary keep mask by its kept proportion. A mask that
    /// keeps nothing is replaced by the identity.
    pub fn from_binary(mut keep: Tensor4) -> Self {
        let total = keep.len();
        let kept = keep.data().iter().filter(|&&v| v != 0.0).count();
        if kept == 0 {
            return Self {
                keep: Tensor4::ones(keep.shape()),
                scale: 1.0,
                drop_count: total,
                degenerate: true,
            };
        }
        let scale = total as f64 / kept as f64;
        for v in keep.data_mut() {
            if *v != 0.0 {
                *v = scale;
            }
        }
        Self {
            keep,
            scale,
            drop_count: total - kept,
            degenerate: false,
        }
    }

    pub fn is_dropped(&self, idx: usize) -> bool {
        self.keep.data()[idx] == 0.0
    }
}

/// Keep masks for two sub-models that see the same input.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPair {
    pub keep1: Tensor4,
    pub keep2: Tensor4,
    pub scale1: f64,
    pub scale2: f64,
    pub raw_drop_count1: usize,
    pub raw_drop_count2: usize,
    /// Number of the two masks that fell back to the identity.
    pub degenerate: u32,
}

impl MaskPair {
    pub fn from_masks(a: KeepMask, b: KeepMask) -> Self {
        Self {
            degenerate: a.degenerate as u32 + b.degenerate as u32,
            scale1: a.scale,
            scale2: b.scale,
            raw_drop_count1: a.drop_count,
            raw_drop_count2: b.drop_count,
            keep1: a.keep,
            keep2: b.keep,
        }
    }

    fn from_binary(a: Tensor4, b: Tensor4) -> Self {
        Self::from_masks(KeepMask::from_binary(a), KeepMask::from_binary(b))
    }
}

/// Masks for one training step: one per sub-model.
#[derive(Clone, Debug, PartialEq)]
pub enum StepMasks {
    Single(KeepMask),
    Pair(MaskPair),
}

fn check_method(spec: &DropSpec, allowed: &[DropMethod], op: &str) -> Result<()> {
    spec.validate()?;
    if allowed.contains(&spec.method) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{op} cannot sample method '{}'", spec.method)))
    }
}

fn dropout_binary(shape: MaskShape, p: f64, rng: &mut RngStream) -> Tensor4 {
    let mut t = Tensor4::ones(shape.tensor_shape());
    for v in t.data_mut() {
        if rng.bernoulli(p) {
            *v = 0.0;
        }
    }
    t
}

fn spatial_binary(shape: MaskShape, p: f64, rng: &mut RngStream) -> Tensor4 {
    let mut t = Tensor4::ones(shape.tensor_shape());
    let plane = shape.plane();
    for c in 0..shape.channels {
        if rng.bernoulli(p) {
            t.data_mut()[c * plane..(c + 1) * plane].fill(0.0);
        }
    }
    t
}

fn dropblock_binary(shape: MaskShape, spec: &DropSpec, rng: &mut RngStream) -> Result<Tensor4> {
    let mut t = Tensor4::ones(shape.tensor_shape());
    if spec.p == 0.0 {
        return Ok(t);
    }
    let geom = shape.geometry(spec.b_size)?;
    let gamma = gamma_for(spec.gamma_mode, spec.p, &geom)?;
    let plane = shape.plane();
    for c in 0..shape.channels {
        let pattern = dropblock_pattern(&geom, gamma, rng, spec.center_region)?;
        for (v, &d) in t.data_mut()[c * plane..(c + 1) * plane].iter_mut().zip(pattern.cells()) {
            if d {
                *v = 0.0;
            }
        }
    }
    Ok(t)
}

/// One keep mask for a single-model method.
pub fn sample_single(shape: MaskShape, spec: &DropSpec, rng: &mut RngStream) -> Result<KeepMask> {
    use DropMethod::*;
    check_method(spec, &[Baseline, Dropout, SpatialDropout, DropBlock], "sample_single")?;
    let binary = match spec.method {
        Baseline => return Ok(KeepMask::identity(shape)),
        Dropout => dropout_binary(shape, spec.p, rng),
        SpatialDropout => spatial_binary(shape, spec.p, rng),
        _ => dropblock_binary(shape, spec, rng)?,
    };
    Ok(KeepMask::from_binary(binary))
}

/// Shared block pattern, channels split between the two sub-models.
///
/// Each channel goes to sub-model 1 with probability 1/2 and to sub-model 2
/// otherwise; a sub-model drops the shared pattern only on its channels.
pub fn sample_bdropdml(shape: MaskShape, spec: &DropSpec, rng: &mut RngStream) -> Result<MaskPair> {
    check_method(spec, &[DropMethod::BDropDml], "sample_bdropdml")?;
    let geom = shape.geometry(spec.b_size)?;
    let gamma = gamma_for(spec.gamma_mode, spec.p, &geom)?;
    let pattern = dropblock_pattern(&geom, gamma, rng, spec.center_region)?;
    let to_first: Vec<bool> = (0..shape.channels).map(|_| rng.bernoulli(0.5)).collect();

    let mut keep1 = Tensor4::ones(shape.tensor_shape());
    let mut keep2 = Tensor4::ones(shape.tensor_shape());
    let plane = shape.plane();
    for (c, &first) in to_first.iter().enumerate() {
        let target = if first { &mut keep1 } else { &mut keep2 };
        for (v, &d) in target.data_mut()[c * plane..(c + 1) * plane].iter_mut().zip(pattern.cells()) {
            if d {
                *v = 0.0;
            }
        }
    }
    Ok(MaskPair::from_binary(keep1, keep2))
}

fn gamma_cache() -> &'static Mutex<HashMap<BlockGeometry, f64>> {
    static CACHE: OnceLock<Mutex<HashMap<BlockGeometry, f64>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Center probability whose block mask drops half of the plane, memoized
/// per geometry.
pub fn half_plane_gamma(geom: &BlockGeometry) -> Result<f64> {
    if let Some(&g) = gamma_cache().lock().expect("gamma cache poisoned").get(geom) {
        return Ok(g);
    }
    let g = solve_gamma_exact(0.5, geom, 1e-12)?;
    gamma_cache().lock().expect("gamma cache poisoned").insert(*geom, g);
    Ok(g)
}

/// Shared dropped channels, plane split between the two sub-models.
///
/// Channels are dropped with probability `p`. On a dropped channel
/// sub-model 1 removes a block pattern calibrated to cover half the plane
/// and sub-model 2 removes its complement.
pub fn sample_sdropdml(shape: MaskShape, spec: &DropSpec, rng: &mut RngStream) -> Result<MaskPair> {
    check_method(spec, &[DropMethod::SDropDml], "sample_sdropdml")?;
    let dropped: Vec<bool> = (0..shape.channels).map(|_| rng.bernoulli(spec.p)).collect();
    let geom = shape.geometry(spec.b_size)?;
    let gamma = half_plane_gamma(&geom)?;
    let pattern = dropblock_pattern(&geom, gamma, rng, spec.center_region)?;

    let mut keep1 = Tensor4::ones(shape.tensor_shape());
    let mut keep2 = Tensor4::ones(shape.tensor_shape());
    let plane = shape.plane();
    for (c, _) in dropped.iter().enumerate().filter(|(_, &d)| d) {
        let range = c * plane..(c + 1) * plane;
        for ((k1, k2), &d) in keep1.data_mut()[range.clone()]
            .iter_mut()
            .zip(&mut keep2.data_mut()[range])
            .zip(pattern.cells())
        {
            if d {
                *k1 = 0.0;
            } else {
                *k2 = 0.0;
            }
        }
    }
    Ok(MaskPair::from_binary(keep1, keep2))
}

/// The four reference pair strategies: two independent draws of dropout,
/// spatial dropout or block dropout, or a complementary element-wise split.
pub fn sample_pair_baselines(shape: MaskShape, spec: &DropSpec, rng: &mut RngStream) -> Result<MaskPair> {
    use DropMethod::*;
    check_method(spec, &[RDropPair, CDropPair, RSpatialPair, RDropBlockPair], "sample_pair_baselines")?;
    Ok(match spec.method {
        RDropPair => MaskPair::from_binary(dropout_binary(shape, spec.p, rng), dropout_binary(shape, spec.p, rng)),
        CDropPair => {
            let first = dropout_binary(shape, 0.5, rng);
            let second = first.map(|v| 1.0 - v);
            MaskPair::from_binary(first, second)
        }
        RSpatialPair => MaskPair::from_binary(spatial_binary(shape, spec.p, rng), spatial_binary(shape, spec.p, rng)),
        _ => MaskPair::from_binary(dropblock_binary(shape, spec, rng)?, dropblock_binary(shape, spec, rng)?),
    })
}

/// Any pair method.
pub fn sample_pair(shape: MaskShape, spec: &DropSpec, rng: &mut RngStream) -> Result<MaskPair> {
    match spec.method {
        DropMethod::BDropDml => sample_bdropdml(shape, spec, rng),
        DropMethod::SDropDml => sample_sdropdml(shape, spec, rng),
        _ => sample_pair_baselines(shape, spec, rng),
    }
}

/// Single mask or pair, depending on the method.
pub fn sample_step(shape: MaskShape, spec: &DropSpec, rng: &mut RngStream) -> Result<StepMasks> {
    if spec.method.is_pair() {
        sample_pair(shape, spec, rng).map(StepMasks::Pair)
    } else {
        sample_single(shape, spec, rng).map(StepMasks::Single)
    }
}

fn check_broadcast(op: &'static str, x: &Tensor4, keep: &Tensor4) -> Result<()> {
    let [xb, xc, xh, xw] = x.shape();
    let [kb, kc, kh, kw] = keep.shape();
    if (kb != 1 && kb != xb) || (kc, kh, kw) != (xc, xh, xw) {
        return Err(Error::shape(op, &x.shape(), &keep.shape()));
    }
    Ok(())
}

fn broadcast_mul(x: &Tensor4, keep: &Tensor4) -> Tensor4 {
    let n = x.sample_len();
    let mut out = x.clone();
    for b in 0..x.batch() {
        let k = if keep.batch() == 1 { keep.sample(0) } else { keep.sample(b) };
        for (v, &m) in out.data_mut()[b * n..(b + 1) * n].iter_mut().zip(k) {
            *v *= m;
        }
    }
    out
}

/// Element-wise product; a batch-1 mask is shared across the batch.
pub fn apply_mask(activations: &Tensor4, keep: &Tensor4) -> Result<Tensor4> {
    check_broadcast("apply_mask", activations, keep)?;
    Ok(broadcast_mul(activations, keep))
}

pub fn apply_mask_backward(grad_out: &Tensor4, keep: &Tensor4) -> Result<Tensor4> {
    check_broadcast("apply_mask_backward", grad_out, keep)?;
    Ok(broadcast_mul(grad_out, keep))
}

/// Expected per-unit drop rate of each sub-model's mask under `spec`.
pub fn marginal_drop_target(spec: &DropSpec, shape: MaskShape) -> Result<f64> {
    use DropMethod::*;
    spec.validate()?;
    let block_rate = || -> Result<f64> {
        if spec.p == 0.0 {
            return Ok(0.0);
        }
        if spec.center_region != CenterRegion::Full {
            return Err(Error::invalid("no closed-form drop rate for valid-region centers"));
        }
        let geom = shape.geometry(spec.b_size)?;
        p_exact(gamma_for(spec.gamma_mode, spec.p, &geom)?, &geom)
    };
    Ok(match spec.method {
        Baseline => 0.0,
        Dropout | SpatialDropout | RDropPair | RSpatialPair => spec.p,
        CDropPair => 0.5,
        DropBlock | RDropBlockPair => block_rate()?,
        BDropDml => 0.5 * block_rate()?,
        SDropDml => {
            if spec.center_region != CenterRegion::Full {
                return Err(Error::invalid("no closed-form drop rate for valid-region centers"));
            }
            let geom = shape.geometry(spec.b_size)?;
            spec.p * p_exact(half_plane_gamma(&geom)?, &geom)?
        }
    })
}

/// Monte Carlo check of a method's marginal drop rate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MarginalReport {
    pub method: DropMethod,
    pub p: f64,
    pub shape: MaskShape,
    pub trials: usize,
    pub analytic_rate: f64,
    /// Empirical drop rate of sub-model 1 (the only mask for single methods).
    pub empirical_rate1: f64,
    pub empirical_rate2: Option<f64>,
    pub abs_deviation: f64,
    pub sigma_binomial: f64,
    pub sigma_trials: f64,
}

pub fn marginal_drop_stats(spec: &DropSpec, shape: MaskShape, trials: usize, rng: &mut RngStream) -> Result<MarginalReport> {
    if trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    let analytic = marginal_drop_target(spec, shape)?;
    let units = (shape.channels * shape.plane()) as f64;
    let (mut d1, mut d2) = (0usize, 0usize);
    let (mut fsum, mut fsq) = (0.0, 0.0);
    let pair = spec.method.is_pair();
    for _ in 0..trials {
        let (c1, c2) = match sample_step(shape, spec, rng)? {
            StepMasks::Single(m) => (m.drop_count, 0),
            StepMasks::Pair(p) => (p.raw_drop_count1, p.raw_drop_count2),
        };
        d1 += c1;
        d2 += c2;
        let f = c1 as f64 / units;
        fsum += f;
        fsq += f * f;
    }
    let t = trials as f64;
    let rate1 = d1 as f64 / (units * t);
    let var_trial = if trials > 1 { ((fsq - fsum * fsum / t) / (t - 1.0)).max(0.0) } else { 0.0 };
    Ok(MarginalReport {
        method: spec.method,
        p: spec.p,
        shape,
        trials,
        analytic_rate: analytic,
        empirical_rate1: rate1,
        empirical_rate2: pair.then(|| d2 as f64 / (units * t)),
        abs_deviation: (rate1 - analytic).abs(),
        sigma_binomial: (analytic * (1.0 - analytic) / (units * t)).sqrt(),
        sigma_trials: (var_trial / t).sqrt(),
    })
}
