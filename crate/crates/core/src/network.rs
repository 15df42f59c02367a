//! The QuasiQuadNet cascade.
//!
//! Layer 1 applies the oriented quasi quadrature measure to the image at
//! scale `s0` for `M` orientations `φ_m = mπ/M`. Layer `k` recomputes jets of
//! every previous map at `s_k = s0 r^(2(k-1))` and expands over `M` new
//! orientations. From layer `K` on, the previous layer is first summed over
//! its trailing orientation, which caps every layer at `M^(K-1)` maps.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{domain, Result};
use crate::image_io::Image;
use crate::quadrature::{qq_from_directional, qq_post_smooth, QqParams, DEFAULT_C};
use crate::scale_space::{self, directional_derivatives, jet_of_smoothed, Jet2};

/// Network hyperparameters. Missing JSON fields take the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Number of orientations M sampled over [0, π).
    pub orientations: usize,
    pub num_layers: usize,
    /// First layer K whose input is orientation-pooled.
    pub pool_from: usize,
    /// Inter-layer scale ratio r in σ units.
    pub scale_ratio: f64,
    /// Complementary normalization power Γ.
    pub big_gamma: f64,
    pub c: f64,
    /// Initial scales as variances (pixels²).
    pub s0_list: Vec<f64>,
    pub post_smooth: bool,
    /// Relative post-smoothing scale, used when `post_smooth` is set.
    pub r_post: f64,
    /// Kernel truncation tolerance.
    pub eps: f64,
    /// Descriptor means skip a border band of `ceil(border_factor * σ_max)`
    /// pixels; 0 averages over the whole image.
    pub border_factor: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            orientations: 8,
            num_layers: 4,
            pool_from: 3,
            scale_ratio: 2.0,
            big_gamma: 0.0,
            c: DEFAULT_C,
            s0_list: vec![1.0, 4.0, 16.0, 64.0],
            post_smooth: false,
            r_post: std::f64::consts::SQRT_2,
            eps: scale_space::DEFAULT_EPS,
            border_factor: 3.0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.orientations < 2 {
            return Err(domain!("need at least 2 orientations, got {}", self.orientations));
        }
        if self.orientations > u16::MAX as usize {
            return Err(domain!("too many orientations"));
        }
        if self.num_layers < 1 {
            return Err(domain!("need at least one layer"));
        }
        if self.pool_from < 1 || self.pool_from > self.num_layers {
            return Err(domain!(
                "pooling layer K={} must lie in 1..={}",
                self.pool_from,
                self.num_layers
            ));
        }
        if !(self.scale_ratio > 1.0) {
            return Err(domain!("scale ratio must exceed 1, got {}", self.scale_ratio));
        }
        if self.s0_list.is_empty() || self.s0_list.iter().any(|&s| !(s > 0.0)) {
            return Err(domain!("initial scales must be positive and non-empty"));
        }
        if !(self.border_factor >= 0.0) {
            return Err(domain!("border factor must be non-negative"));
        }
        if !(self.eps > 0.0 && self.eps < 1e-3) {
            return Err(domain!("eps must lie in (0, 1e-3)"));
        }
        self.qq_params().validate()
    }

    pub fn qq_params(&self) -> QqParams {
        QqParams {
            c: self.c,
            big_gamma: self.big_gamma,
            r_post: if self.post_smooth { self.r_post } else { 0.0 },
        }
    }

    /// Orientation angle of index `m`.
    pub fn angle(&self, m: usize) -> f64 {
        m as f64 * std::f64::consts::PI / self.orientations as f64
    }

    /// Whether layer `k` consumes the orientation-pooled previous layer.
    pub fn pools_input(&self, k: usize) -> bool {
        k >= 2 && k >= self.pool_from
    }

    /// Number of feature maps produced by layer `k` (1-based).
    pub fn map_count(&self, k: usize) -> usize {
        let m = self.orientations;
        let mut inputs = 1usize;
        for layer in 1..k {
            inputs *= m;
            if self.pools_input(layer + 1) {
                inputs /= m;
            }
        }
        inputs * m
    }

    /// Short stable hash of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// `s_k = s0 r^(2(k-1))`.
pub fn layer_scale(cfg: &NetConfig, s0: f64, k: usize) -> f64 {
    s0 * cfg.scale_ratio.powi(2 * (k as i32 - 1))
}

/// Orientation indices along a path through the cascade, one slot per layer.
/// Slots summed out by pooling hold `None`.
/// Serialized in its display form, e.g. `"3-*-5"`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct OrientationPath(pub Vec<Option<u16>>);

impl From<OrientationPath> for String {
    fn from(p: OrientationPath) -> String {
        p.to_string()
    }
}

impl TryFrom<String> for OrientationPath {
    type Error = crate::error::Error;

    fn try_from(s: String) -> Result<Self> {
        OrientationPath::parse(&s)
    }
}

impl OrientationPath {
    pub fn root() -> Self {
        OrientationPath(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn child(&self, m: usize) -> Self {
        let mut v = self.0.clone();
        v.push(Some(m as u16));
        OrientationPath(v)
    }

    /// Path with the trailing orientation summed out.
    pub fn pooled(&self) -> Self {
        let mut v = self.0.clone();
        if let Some(last) = v.last_mut() {
            *last = None;
        }
        OrientationPath(v)
    }

    pub fn is_pooled(&self) -> bool {
        matches!(self.0.last(), Some(None))
    }

    /// Every free index advanced by `shift` modulo `m`.
    pub fn shifted(&self, shift: usize, m: usize) -> Self {
        OrientationPath(
            self.0
                .iter()
                .map(|slot| slot.map(|a| ((a as usize + shift) % m) as u16))
                .collect(),
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        if text.is_empty() {
            return Ok(Self::root());
        }
        text.split('-')
            .map(|t| match t {
                "*" => Ok(None),
                n => n
                    .parse::<u16>()
                    .map(Some)
                    .map_err(|_| domain!("bad orientation path {text:?}")),
            })
            .collect::<Result<_>>()
            .map(OrientationPath)
    }
}

impl fmt::Display for OrientationPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|slot| slot.map_or("*".to_string(), |a| a.to_string()))
            .collect();
        write!(f, "{}", parts.join("-"))
    }
}

#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub layer_index: usize,
    pub maps: Vec<(OrientationPath, Image)>,
    pub scale_s: f64,
    pub pooled_input: bool,
}

impl LayerOutput {
    pub fn map(&self, path: &OrientationPath) -> Option<&Image> {
        self.maps
            .binary_search_by(|(p, _)| p.cmp(path))
            .ok()
            .map(|i| &self.maps[i].1)
    }
}

/// Sums maps over their trailing orientation. Maps sharing a prefix must be
/// adjacent, which the lexicographic ordering guarantees.
pub fn pool_orientations(layer: &LayerOutput) -> Result<LayerOutput> {
    if layer.maps.is_empty() {
        return Err(domain!("cannot pool an empty layer"));
    }
    if layer.maps.iter().any(|(p, _)| p.is_empty() || p.is_pooled()) {
        return Err(domain!("layer {} has no free trailing orientation", layer.layer_index));
    }
    let mut maps: Vec<(OrientationPath, Image)> = Vec::new();
    for (path, img) in &layer.maps {
        let key = path.pooled();
        match maps.last_mut() {
            Some((p, acc)) if *p == key => {
                *acc = add_fields(acc, img);
            }
            _ => maps.push((key, img.clone())),
        }
    }
    Ok(LayerOutput {
        layer_index: layer.layer_index,
        maps,
        scale_s: layer.scale_s,
        pooled_input: layer.pooled_input,
    })
}

fn add_fields(a: &Image, b: &Image) -> Image {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Image::field(a.width(), a.height(), data)
}

/// Spatial means of the five statistics of one orientation expansion:
/// `Lφ, |Lφ|, Lφφ, |Lφφ|, Q`.
pub type FiveStats = [f64; 5];

/// Means over `[band, w - band) × [band, h - band)`.
pub(crate) fn interior_stats(lphi: &Image, lphiphi: &Image, q: &Image, band: usize) -> FiveStats {
    let (w, h) = (lphi.width(), lphi.height());
    let mut acc = [0.0; 5];
    for y in band..h - band {
        let mut row = [0.0; 5];
        for x in band..w - band {
            let i = y * w + x;
            let (a, b) = (lphi.data()[i], lphiphi.data()[i]);
            row[0] += a;
            row[1] += a.abs();
            row[2] += b;
            row[3] += b.abs();
            row[4] += q.data()[i];
        }
        for (t, r) in acc.iter_mut().zip(row) {
            *t += r;
        }
    }
    let n = ((w - 2 * band) * (h - 2 * band)) as f64;
    acc.map(|v| v / n)
}

/// What to retain from expanding one input map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Keep {
    All,
    Pooled,
    Nothing,
}

pub(crate) struct Expansion {
    pub maps: Vec<(OrientationPath, Image)>,
    pub stats: Vec<FiveStats>,
}

/// Expands one input field over all orientations at scale `s`.
pub(crate) fn expand_input(
    path: &OrientationPath,
    field: &Image,
    s: f64,
    cfg: &NetConfig,
    keep: Keep,
    stats_band: Option<usize>,
) -> Result<Expansion> {
    let smoothed = scale_space::smooth(field, s, cfg.eps)?;
    let jet: Jet2 = jet_of_smoothed(smoothed, s, 1.0);
    let params = cfg.qq_params();
    let mut maps = Vec::new();
    let mut stats = Vec::new();
    let mut pooled: Option<Image> = None;
    for m in 0..cfg.orientations {
        let (lphi, lphiphi) = directional_derivatives(&jet, cfg.angle(m));
        let mut q = qq_from_directional(&lphi, &lphiphi, s, &params);
        if params.r_post > 0.0 {
            q = qq_post_smooth(&q, s, &params, cfg.eps)?;
        }
        if let Some(band) = stats_band {
            stats.push(interior_stats(&lphi, &lphiphi, &q, band));
        }
        match keep {
            Keep::All => maps.push((path.child(m), q)),
            Keep::Pooled => {
                pooled = Some(match pooled {
                    Some(acc) => add_fields(&acc, &q),
                    None => q,
                })
            }
            Keep::Nothing => {}
        }
    }
    if let Some(p) = pooled {
        maps.push((path.child(0).pooled(), p));
    }
    Ok(Expansion { maps, stats })
}

/// Rejects images too small for the coarsest scale of a pass at `s0`:
/// the deepest layer's standard deviation must not exceed half the
/// smaller image side.
pub(crate) fn check_geometry(img: &Image, cfg: &NetConfig, s0: f64) -> Result<()> {
    if img.channels() != 1 {
        return Err(domain!("network input must be single-channel"));
    }
    if img.width() < 16 || img.height() < 16 {
        return Err(domain!("network input must be at least 16x16"));
    }
    let sigma = layer_scale(cfg, s0, cfg.num_layers).sqrt();
    let half = img.width().min(img.height()) as f64 / 2.0;
    if sigma > half {
        return Err(domain!(
            "deepest scale σ={sigma:.1} exceeds half the image size ({half})"
        ));
    }
    Ok(())
}

/// Runs the cascade, handing every layer's expansions to `visit` and
/// keeping only what the next layer needs unless `keep_all` is set.
pub(crate) fn run_cascade(
    img: &Image,
    cfg: &NetConfig,
    s0: f64,
    keep_all: bool,
    stats_band: Option<usize>,
    mut visit: impl FnMut(usize, f64, &[Expansion]),
) -> Result<Vec<LayerOutput>> {
    cfg.validate()?;
    if !(s0 > 0.0) {
        return Err(domain!("initial scale must be positive, got {s0}"));
    }
    check_geometry(img, cfg, s0)?;

    let mut inputs: Vec<(OrientationPath, Image)> = vec![(OrientationPath::root(), img.clone())];
    let mut outputs = Vec::new();
    for k in 1..=cfg.num_layers {
        let s = layer_scale(cfg, s0, k);
        let last = k == cfg.num_layers;
        let next_pools = !last && cfg.pools_input(k + 1);
        let keep = if keep_all {
            Keep::All
        } else if last {
            Keep::Nothing
        } else if next_pools {
            Keep::Pooled
        } else {
            Keep::All
        };
        let expansions: Vec<Expansion> = inputs
            .par_iter()
            .map(|(path, field)| expand_input(path, field, s, cfg, keep, stats_band))
            .collect::<Result<_>>()?;
        visit(k, s, &expansions);

        let maps: Vec<(OrientationPath, Image)> =
            expansions.into_iter().flat_map(|e| e.maps).collect();
        let layer = LayerOutput {
            layer_index: k,
            maps,
            scale_s: s,
            pooled_input: cfg.pools_input(k),
        };
        if last {
            if keep_all {
                outputs.push(layer);
            }
            break;
        }
        inputs = if keep_all && next_pools {
            let pooled = pool_orientations(&layer)?.maps;
            outputs.push(layer);
            pooled
        } else if keep_all {
            let maps = layer.maps.clone();
            outputs.push(layer);
            maps
        } else {
            layer.maps
        };
    }
    Ok(outputs)
}

/// Builds every layer of the network for one initial scale `s0`.
pub fn build_network(img: &Image, cfg: &NetConfig, s0: f64) -> Result<Vec<LayerOutput>> {
    run_cascade(img, cfg, s0, true, None, |_, _, _| {})
}

/// Output paths of layer `k` in cascade order.
pub fn layer_paths(cfg: &NetConfig, k: usize) -> Vec<OrientationPath> {
    let mut inputs = vec![OrientationPath::root()];
    for layer in 1..=k {
        if cfg.pools_input(layer) {
            inputs = inputs.iter().map(|p| p.pooled()).collect();
            inputs.dedup();
        }
        inputs = inputs
            .iter()
            .flat_map(|p| (0..cfg.orientations).map(move |m| p.child(m)))
            .collect();
    }
    inputs
}
