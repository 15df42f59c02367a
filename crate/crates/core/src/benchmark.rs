//! Desk-scale scale-matching benchmark on procedural textures.
//!
//! Every class is a texture family at a characteristic wavelength. A sample
//! rendered at zoom `z` is drawn at `z` times the output size and resampled
//! by `1/z`, so its structures are `z` times smaller than at zoom 1.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::{predict, train, ClassifierKind, SvmParams};
use crate::descriptor::{assemble_descriptor, scaled_grid, ChannelMode};
use crate::error::{domain, Result};
use crate::image_io::{resample, Image};
use crate::network::NetConfig;
use crate::synthetic::{make_texture, TextureKind, TextureParams};

type Sample = (usize, usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkClass {
    pub kind: TextureKind,
    pub wavelength: f64,
}

impl BenchmarkClass {
    pub fn label(&self) -> String {
        format!("{}_{}", self.kind.name(), self.wavelength)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub classes: Vec<BenchmarkClass>,
    pub samples_per_class: usize,
    pub size: usize,
    /// Relative per-sample wavelength jitter.
    pub jitter: f64,
    pub seed: u64,
    pub classifier: ClassifierKind,
    pub net: NetConfig,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        let class = |kind, wavelength| BenchmarkClass { kind, wavelength };
        BenchmarkSpec {
            classes: vec![
                class(TextureKind::Grating, 16.0),
                class(TextureKind::Checker, 24.0),
                class(TextureKind::BlobNoise, 32.0),
                class(TextureKind::StripesIrregular, 20.0),
                class(TextureKind::Spots, 28.0),
            ],
            samples_per_class: 40,
            size: 128,
            jitter: 0.1,
            seed: 2024,
            classifier: ClassifierKind::Nn,
            net: NetConfig {
                orientations: 4,
                num_layers: 2,
                pool_from: 2,
                s0_list: vec![1.0, 4.0, 16.0],
                border_factor: 1.0,
                ..NetConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariantResult {
    pub factor: f64,
    pub covariant_accuracy: f64,
    pub non_covariant_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedResult {
    pub factor: f64,
    pub aggregated_accuracy: f64,
    pub single_grid_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config_hash: String,
    pub seed: u64,
    pub covariant: Vec<CovariantResult>,
    pub aggregated: Vec<AggregatedResult>,
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.classes.len() < 2 {
            return Err(domain!("benchmark needs at least 2 classes"));
        }
        if self.samples_per_class < 2 {
            return Err(domain!("benchmark needs at least 2 samples per class"));
        }
        if !(0.0..0.5).contains(&self.jitter) {
            return Err(domain!("jitter must lie in [0, 0.5)"));
        }
        Ok(())
    }

    fn sample_seed(&self, class: usize, sample: usize) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add((class as u64) << 32 | sample as u64)
    }

    /// Sample `sample` of class `class` with structures `zoom` times smaller
    /// than the class wavelength.
    pub fn render(&self, class: usize, sample: usize, zoom: f64) -> Result<Image> {
        if !(zoom >= 1.0) {
            return Err(domain!("zoom must be at least 1"));
        }
        let c = &self.classes[class];
        let seed = self.sample_seed(class, sample);
        // jitter drawn from the seed so it is shared across zoom levels
        let u = (seed.wrapping_mul(0x2545_F491_4F6C_DD1D) >> 11) as f64 / (1u64 << 53) as f64;
        let params = TextureParams {
            wavelength: c.wavelength * (1.0 + self.jitter * (2.0 * u - 1.0)),
            ..TextureParams::default()
        };
        let big = (self.size as f64 * zoom).round() as usize;
        let img = make_texture(c.kind, &params, seed, big)?;
        if big == self.size {
            Ok(img)
        } else {
            resample(&img, self.size as f64 / big as f64)
        }
    }

    fn descriptors(&self, samples: &[Sample], zoom: f64, grid: &[f64]) -> Result<Vec<Vec<f64>>> {
        let cfg = NetConfig {
            s0_list: grid.to_vec(),
            ..self.net.clone()
        };
        samples
            .par_iter()
            .map(|&(c, i)| Ok(assemble_descriptor(&self.render(c, i, zoom)?, &cfg, ChannelMode::Grey)?.values))
            .collect()
    }

    /// `(class, sample)` pairs for the training and test halves.
    fn split(&self) -> (Vec<Sample>, Vec<Sample>) {
        let half = self.samples_per_class / 2;
        let all = |range: std::ops::Range<usize>| -> Vec<Sample> {
            (0..self.classes.len())
                .flat_map(|c| range.clone().map(move |i| (c, i)))
                .collect()
        };
        (all(0..half), all(half..self.samples_per_class))
    }

    fn accuracy(
        &self,
        train_x: &[Vec<f64>],
        train_y: &[String],
        test_x: &[Vec<f64>],
        test_y: &[String],
    ) -> Result<f64> {
        let model = train(train_x, train_y, self.classifier, &SvmParams::default())?;
        let mut correct = 0;
        for (x, y) in test_x.iter().zip(test_y) {
            correct += usize::from(&predict(&model, x)?.0 == y);
        }
        Ok(correct as f64 / test_x.len() as f64)
    }

    fn labels(&self, samples: &[Sample]) -> Vec<String> {
        samples.iter().map(|&(c, _)| self.classes[c].label()).collect()
    }

    /// Training images have structures `factor` times smaller than test
    /// images. Covariant matching multiplies the test σ₀ grid by `factor`;
    /// non-covariant matching uses the base grid on both sides.
    pub fn covariant_matching(&self, factor: f64) -> Result<CovariantResult> {
        self.validate()?;
        let (train_s, test_s) = self.split();
        let base = self.net.s0_list.clone();
        let train_x = self.descriptors(&train_s, factor, &base)?;
        let test_cov = self.descriptors(&test_s, 1.0, &scaled_grid(&base, factor))?;
        let test_plain = self.descriptors(&test_s, 1.0, &base)?;
        let (train_y, test_y) = (self.labels(&train_s), self.labels(&test_s));
        Ok(CovariantResult {
            factor,
            covariant_accuracy: self.accuracy(&train_x, &train_y, &test_cov, &test_y)?,
            non_covariant_accuracy: self.accuracy(&train_x, &train_y, &test_plain, &test_y)?,
        })
    }

    /// Training at zoom 1 over the five grids σ₀ × 2^(j/2), j = 0..4, versus
    /// the base grid only; test images at zoom `factor` on the base grid.
    pub fn aggregated_matching(&self, factors: &[f64]) -> Result<Vec<AggregatedResult>> {
        self.validate()?;
        let (train_s, test_s) = self.split();
        let base = self.net.s0_list.clone();
        let grids: Vec<Vec<f64>> = (0..5).map(|j| scaled_grid(&base, 2f64.powf(j as f64 / 2.0))).collect();
        let per_grid = grids
            .iter()
            .map(|g| self.descriptors(&train_s, 1.0, g))
            .collect::<Result<Vec<_>>>()?;
        let train_y = self.labels(&train_s);
        let agg_x: Vec<Vec<f64>> = per_grid.iter().flatten().cloned().collect();
        let agg_y: Vec<String> = (0..grids.len()).flat_map(|_| train_y.iter().cloned()).collect();
        let test_y = self.labels(&test_s);
        factors
            .iter()
            .map(|&factor| {
                let test_x = self.descriptors(&test_s, factor, &base)?;
                Ok(AggregatedResult {
                    factor,
                    aggregated_accuracy: self.accuracy(&agg_x, &agg_y, &test_x, &test_y)?,
                    single_grid_accuracy: self.accuracy(&per_grid[0], &train_y, &test_x, &test_y)?,
                })
            })
            .collect()
    }

    pub fn run(&self, covariant_factors: &[f64], aggregated_factors: &[f64]) -> Result<BenchmarkReport> {
        Ok(BenchmarkReport {
            config_hash: self.net.hash(),
            seed: self.seed,
            covariant: covariant_factors
                .iter()
                .map(|&f| self.covariant_matching(f))
                .collect::<Result<_>>()?,
            aggregated: self.aggregated_matching(aggregated_factors)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_is_deterministic_and_zoomed() {
        let spec = BenchmarkSpec::default();
        let a = spec.render(0, 3, 2.0).unwrap();
        assert_eq!(a, spec.render(0, 3, 2.0).unwrap());
        assert_eq!((a.width(), a.height()), (128, 128));
        assert_ne!(a, spec.render(0, 4, 2.0).unwrap());
        assert!(spec.render(0, 0, 0.5).is_err());
    }

    #[test]
    fn validation() {
        let mut spec = BenchmarkSpec::default();
        spec.classes.truncate(1);
        assert!(spec.validate().is_err());
        let spec = BenchmarkSpec {
            jitter: 0.7,
            ..BenchmarkSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = BenchmarkSpec::default();
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<BenchmarkSpec>(&json).unwrap(), spec);
        let partial: BenchmarkSpec = serde_json::from_str(r#"{"samples_per_class": 4}"#).unwrap();
        assert_eq!(partial.samples_per_class, 4);
    }
}
