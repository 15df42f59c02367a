//! Mean-reduced texture descriptors.
//!
//! For every layer input `F_(k-1)` (with `F_0` the smoothed image), every
//! orientation and every initial scale, the descriptor holds the interior
//! means of `∂φF`, `|∂φF|`, `∂φφF`, `|∂φφF|` and `QφF`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::image_io::{to_grey, to_luv, Image};
use crate::network::{layer_paths, layer_scale, run_cascade, NetConfig, OrientationPath};

pub const MAGIC: &[u8; 4] = b"QQD1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelMode {
    Grey,
    Luv,
}

impl ChannelMode {
    pub fn channel_count(self) -> usize {
        match self {
            ChannelMode::Grey => 1,
            ChannelMode::Luv => 3,
        }
    }
}

impl std::str::FromStr for ChannelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grey" | "gray" => Ok(ChannelMode::Grey),
            "luv" => Ok(ChannelMode::Luv),
            other => Err(domain!("unknown channel mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stat {
    MeanDphi,
    MeanAbsDphi,
    MeanDphiphi,
    MeanAbsDphiphi,
    MeanQ,
}

impl Stat {
    pub const ALL: [Stat; 5] = [
        Stat::MeanDphi,
        Stat::MeanAbsDphi,
        Stat::MeanDphiphi,
        Stat::MeanAbsDphiphi,
        Stat::MeanQ,
    ];
}

/// Position of one descriptor dimension. `path` is the output path of the
/// expansion, i.e. the input map's path followed by the orientation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SchemaEntry {
    pub channel: u8,
    pub s0_index: u16,
    pub layer: u16,
    pub path: OrientationPath,
    pub stat: Stat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub values: Vec<f64>,
    pub schema: Vec<SchemaEntry>,
}

impl Descriptor {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn concat(parts: Vec<Descriptor>) -> Descriptor {
        let mut values = Vec::new();
        let mut schema = Vec::new();
        for p in parts {
            values.extend(p.values);
            schema.extend(p.schema);
        }
        Descriptor { values, schema }
    }
}

/// Schema of one single-scale slice.
fn slice_schema(cfg: &NetConfig, channel: u8, s0_index: u16) -> Vec<SchemaEntry> {
    let mut out = Vec::new();
    for k in 1..=cfg.num_layers {
        for path in layer_paths(cfg, k) {
            for stat in Stat::ALL {
                out.push(SchemaEntry {
                    channel,
                    s0_index,
                    layer: k as u16,
                    path: path.clone(),
                    stat,
                });
            }
        }
    }
    out
}

/// Full schema; a pure function of the configuration and channel mode.
pub fn descriptor_schema(cfg: &NetConfig, mode: ChannelMode) -> Vec<SchemaEntry> {
    let mut out = Vec::new();
    for c in 0..mode.channel_count() {
        for i in 0..cfg.s0_list.len() {
            out.extend(slice_schema(cfg, c as u8, i as u16));
        }
    }
    out
}

/// Width of the excluded border for a pass at `s0`.
pub fn border_band(cfg: &NetConfig, s0: f64) -> usize {
    (cfg.border_factor * layer_scale(cfg, s0, cfg.num_layers).sqrt()).ceil() as usize
}

fn prepare_channels(img: &Image, mode: ChannelMode) -> Result<Vec<Image>> {
    match mode {
        ChannelMode::Grey => Ok(vec![to_grey(img)]),
        ChannelMode::Luv => {
            let luv = to_luv(img)?;
            Ok((0..3).map(|c| luv.channel(c)).collect())
        }
    }
}

fn channel_slice(field: &Image, cfg: &NetConfig, s0: f64, channel: u8, s0_index: u16) -> Result<Descriptor> {
    let band = border_band(cfg, s0);
    if field.width() <= 2 * band || field.height() <= 2 * band {
        return Err(domain!(
            "image {}x{} is smaller than twice the border band {band}",
            field.width(),
            field.height()
        ));
    }
    let mut values = Vec::with_capacity(slice_schema(cfg, 0, 0).len());
    run_cascade(field, cfg, s0, false, Some(band), |_, _, expansions| {
        for e in expansions {
            for stats in &e.stats {
                values.extend_from_slice(stats);
            }
        }
    })?;
    let schema = slice_schema(cfg, channel, s0_index);
    debug_assert_eq!(values.len(), schema.len());
    Ok(Descriptor { values, schema })
}

/// Single-scale slice of the descriptor for initial scale `s0`.
pub fn mean_reduce(img: &Image, cfg: &NetConfig, s0: f64, mode: ChannelMode) -> Result<Descriptor> {
    cfg.validate()?;
    let s0_index = cfg
        .s0_list
        .iter()
        .position(|&s| s == s0)
        .unwrap_or(0) as u16;
    let channels = prepare_channels(img, mode)?;
    let parts = channels
        .iter()
        .enumerate()
        .map(|(c, field)| channel_slice(field, cfg, s0, c as u8, s0_index))
        .collect::<Result<Vec<_>>>()?;
    Ok(Descriptor::concat(parts))
}

/// Concatenation of slices over channels and the configured initial scales.
pub fn assemble_descriptor(img: &Image, cfg: &NetConfig, mode: ChannelMode) -> Result<Descriptor> {
    cfg.validate()?;
    let channels = prepare_channels(img, mode)?;
    let jobs: Vec<(usize, usize)> = (0..channels.len())
        .flat_map(|c| (0..cfg.s0_list.len()).map(move |i| (c, i)))
        .collect();
    let parts = jobs
        .par_iter()
        .map(|&(c, i)| channel_slice(&channels[c], cfg, cfg.s0_list[i], c as u8, i as u16))
        .collect::<Result<Vec<_>>>()?;
    Ok(Descriptor::concat(parts))
}

/// One descriptor per grid of initial scales (variances).
pub fn aggregate_scales(
    img: &Image,
    cfg: &NetConfig,
    grids: &[Vec<f64>],
    mode: ChannelMode,
) -> Result<Vec<Descriptor>> {
    grids
        .iter()
        .map(|grid| {
            if grid.len() != cfg.s0_list.len() {
                return Err(domain!(
                    "scale grid has {} levels, configuration expects {}",
                    grid.len(),
                    cfg.s0_list.len()
                ));
            }
            let variant = NetConfig {
                s0_list: grid.clone(),
                ..cfg.clone()
            };
            assemble_descriptor(img, &variant, mode)
        })
        .collect()
}

/// Variances for a list of standard deviations.
pub fn variances(sigmas: &[f64]) -> Vec<f64> {
    sigmas.iter().map(|s| s * s).collect()
}

/// `grid` with every σ multiplied by `factor` (variances by `factor²`).
pub fn scaled_grid(grid: &[f64], factor: f64) -> Vec<f64> {
    grid.iter().map(|s| s * factor * factor).collect()
}

/// The five training grids σ0 ∈ {1,2,4,8} × {1, √2, 2, 2√2, 4}, as variances.
pub fn aggregation_grids(base: &[f64]) -> Vec<Vec<f64>> {
    (0..5)
        .map(|j| scaled_grid(base, 2f64.powf(j as f64 / 2.0)))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DescriptorHeader {
    pub config_hash: String,
    pub channel_mode: ChannelMode,
    pub config: NetConfig,
    pub length: usize,
    pub schema: Vec<SchemaEntry>,
}

/// `QQD1`, little-endian u32 header length, JSON header, then
/// little-endian f32 values.
pub fn write_descriptor(
    path: impl AsRef<Path>,
    desc: &Descriptor,
    cfg: &NetConfig,
    mode: ChannelMode,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_descriptor_to(&mut w, desc, cfg, mode)?;
    w.flush()?;
    Ok(())
}

pub fn write_descriptor_to(
    w: &mut impl Write,
    desc: &Descriptor,
    cfg: &NetConfig,
    mode: ChannelMode,
) -> Result<()> {
    let header = DescriptorHeader {
        config_hash: cfg.hash(),
        channel_mode: mode,
        config: cfg.clone(),
        length: desc.values.len(),
        schema: desc.schema.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for v in &desc.values {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_descriptor(path: impl AsRef<Path>) -> Result<(DescriptorHeader, Descriptor)> {
    read_descriptor_from(&mut BufReader::new(File::open(path)?))
}

pub fn read_descriptor_from(r: &mut impl Read) -> Result<(DescriptorHeader, Descriptor)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a QQD1 descriptor file".into()));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: DescriptorHeader = serde_json::from_slice(&json)?;
    if header.schema.len() != header.length {
        return Err(Error::Format("schema length does not match value count".into()));
    }
    let mut raw = vec![0u8; header.length * 4];
    r.read_exact(&mut raw)
        .map_err(|e| Error::Format(format!("truncated descriptor values: {e}")))?;
    let values = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let desc = Descriptor {
        values,
        schema: header.schema.clone(),
    };
    Ok((header, desc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scale_space;
    use rand::{Rng, SeedableRng};

    fn texture(n: usize, seed: u64) -> Image {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let img = Image::from_fn(n, n, |_, _| rng.gen::<f64>());
        scale_space::smooth(&img, 1.0, 1e-10).unwrap()
    }

    fn small_cfg() -> NetConfig {
        NetConfig {
            orientations: 4,
            num_layers: 3,
            pool_from: 3,
            s0_list: vec![1.0, 2.0],
            ..NetConfig::default()
        }
    }

    #[test]
    fn default_schema_length() {
        let cfg = NetConfig::default();
        assert_eq!(slice_schema(&cfg, 0, 0).len(), 1000);
        assert_eq!(descriptor_schema(&cfg, ChannelMode::Grey).len(), 4000);
        assert_eq!(descriptor_schema(&cfg, ChannelMode::Luv).len(), 12000);
        let per_layer: Vec<usize> = (1..=4)
            .map(|k| {
                slice_schema(&cfg, 0, 0)
                    .iter()
                    .filter(|e| e.layer as usize == k)
                    .count()
            })
            .collect();
        assert_eq!(per_layer, vec![40, 320, 320, 320]);
    }

    #[test]
    fn slice_shape_and_jensen() {
        let cfg = small_cfg();
        let img = texture(48, 1);
        let d = mean_reduce(&img, &cfg, 1.0, ChannelMode::Grey).unwrap();
        assert_eq!(d.len(), (4 + 16 + 16) * 5);
        for chunk in d.values.chunks(5) {
            assert!(chunk[1] >= chunk[0].abs() - 1e-15);
            assert!(chunk[3] >= chunk[2].abs() - 1e-15);
            assert!(chunk[4] >= 0.0);
        }
    }

    #[test]
    fn constant_image_is_all_zero() {
        let d = mean_reduce(&Image::constant(40, 40, 0.3), &small_cfg(), 1.0, ChannelMode::Grey).unwrap();
        assert!(d.values.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn assemble_and_aggregate() {
        let cfg = small_cfg();
        let img = texture(64, 2);
        let full = assemble_descriptor(&img, &cfg, ChannelMode::Grey).unwrap();
        assert_eq!(full.len(), 2 * 180);
        assert_eq!(full.schema, descriptor_schema(&cfg, ChannelMode::Grey));
        let again = assemble_descriptor(&img, &cfg, ChannelMode::Grey).unwrap();
        assert_eq!(full, again);

        let grids = vec![cfg.s0_list.clone(), scaled_grid(&cfg.s0_list, 2f64.sqrt())];
        let agg = aggregate_scales(&img, &cfg, &grids, ChannelMode::Grey).unwrap();
        assert_eq!(agg.len(), 2);
        assert_eq!(agg[0], full);
        assert_eq!(agg[1].len(), full.len());
        assert!(aggregate_scales(&img, &cfg, &[vec![1.0]], ChannelMode::Grey).is_err());
    }

    #[test]
    fn luv_mode_triples_length() {
        let cfg = NetConfig {
            s0_list: vec![1.0],
            num_layers: 2,
            pool_from: 2,
            ..small_cfg()
        };
        let rgb = Image::new(
            40,
            40,
            3,
            (0..40 * 40 * 3).map(|i| ((i * 37) % 101) as f64 / 100.0).collect(),
        )
        .unwrap();
        let d = assemble_descriptor(&rgb, &cfg, ChannelMode::Luv).unwrap();
        assert_eq!(d.len(), 3 * (4 + 4) * 5);
        assert!(assemble_descriptor(&to_grey(&rgb), &cfg, ChannelMode::Luv).is_err());
    }

    #[test]
    fn border_band_too_wide() {
        let cfg = small_cfg();
        // deepest σ at s0 = 2 is 4√2, band 17
        assert_eq!(border_band(&cfg, 2.0), 17);
        assert!(mean_reduce(&texture(32, 3), &cfg, 2.0, ChannelMode::Grey).is_err());
    }

    #[test]
    fn file_round_trip() {
        let cfg = small_cfg();
        let d = assemble_descriptor(&texture(48, 4), &cfg, ChannelMode::Grey).unwrap();
        let mut buf = Vec::new();
        write_descriptor_to(&mut buf, &d, &cfg, ChannelMode::Grey).unwrap();
        assert_eq!(&buf[..4], MAGIC);
        let (header, back) = read_descriptor_from(&mut buf.as_slice()).unwrap();
        assert_eq!(header.config_hash, cfg.hash());
        assert_eq!(back.schema, d.schema);
        for (a, b) in back.values.iter().zip(&d.values) {
            assert_eq!(*a as f32, *b as f32);
        }
        let mut again = Vec::new();
        write_descriptor_to(&mut again, &back, &cfg, ChannelMode::Grey).unwrap();
        assert_eq!(again, buf);
        assert!(read_descriptor_from(&mut &buf[..buf.len() - 3]).is_err());
        assert!(read_descriptor_from(&mut &b"QQD2xxxx"[..]).is_err());
    }

    #[test]
    fn aggregation_grids_match_paper_sets() {
        let base = variances(&[1.0, 2.0, 4.0, 8.0]);
        let grids = aggregation_grids(&base);
        assert_eq!(grids.len(), 5);
        let sig: Vec<f64> = grids[4].iter().map(|v| v.sqrt()).collect();
        for (a, b) in sig.iter().zip([4.0, 8.0, 16.0, 32.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let sig: Vec<f64> = grids[1].iter().map(|v| v.sqrt()).collect();
        assert!((sig[0] - 2f64.sqrt()).abs() < 1e-12);
    }
}
