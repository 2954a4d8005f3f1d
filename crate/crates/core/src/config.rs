//! Configuration for every pipeline stage, plus the flat `key=value`
//! config-file loader used by the CLI.

use std::path::Path;

use crate::error::{Error, Result};

/// Point-distance guidance parameters.
#[derive(Debug, Clone, Copy)]
pub struct DistanceConfig {
    /// Exponential factor applied to the sigmoid of the reciprocal
    /// accumulated distance.
    pub d: f64,
    /// When true (default) the score decreases with accumulated distance,
    /// so overlapping another instance is penalized. When false the printed
    /// increasing form (negative exponent) is used instead.
    pub penalize: bool,
}

impl Default for DistanceConfig {
    fn default() -> Self {
        DistanceConfig { d: 0.015, penalize: true }
    }
}

/// Positive/negative proposal sampling parameters.
#[derive(Debug, Clone, Copy)]
pub struct SamplerConfig {
    /// Scale factor for the positive-box recalibration.
    pub v: f64,
    /// Max IoU a background negative may have against any bag proposal.
    pub t_neg1: f64,
    /// Max IoU a part negative may have against its source box.
    pub t_neg2: f64,
    /// Background negatives drawn per image.
    pub n_bg: usize,
    /// Part negatives drawn per instance.
    pub n_part: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { v: 0.1, t_neg1: 0.3, t_neg2: 0.5, n_bg: 32, n_part: 8 }
    }
}

/// Box-mining parameters.
#[derive(Debug, Clone, Copy)]
pub struct MiningConfig {
    /// Number of top-scored candidates examined.
    pub k: usize,
    /// IoU floor for merging a larger candidate.
    pub t_min1: f64,
    /// IoU floor for merging an enclosing candidate when no larger
    /// candidate merged.
    pub t_min2: f64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig { k: 3, t_min1: 0.6, t_min2: 0.3 }
    }
}

/// Affinity-refinement parameters.
#[derive(Debug, Clone)]
pub struct AffinityConfig {
    /// Global bandwidth on the image plane.
    pub zeta_g: f64,
    /// Global bandwidth on feature planes.
    pub sigma_g: f64,
    /// Local bandwidth on the image plane.
    pub zeta_l: f64,
    /// Local bandwidth on feature planes.
    pub sigma_l: f64,
    /// Odd kernel size per pyramid level; the first entry also serves the
    /// image plane. Levels beyond the list reuse the last entry.
    pub kernel_sizes: Vec<usize>,
    /// Number of local filtering blocks.
    pub cascade_blocks: usize,
    /// Blend weight for image-plane blocks.
    pub lambda_i: f64,
    /// Blend weight for feature-plane blocks.
    pub lambda_s: f64,
    /// Exclude the self term from both filter sums (the printed
    /// normalizer); default false keeps the convex-combination form.
    pub literal_normalizer: bool,
}

impl Default for AffinityConfig {
    fn default() -> Self {
        AffinityConfig {
            zeta_g: 0.1,
            sigma_g: 0.1,
            zeta_l: 0.1,
            sigma_l: 0.1,
            kernel_sizes: vec![5, 5, 3, 3],
            cascade_blocks: 2,
            lambda_i: 0.5,
            lambda_s: 0.5,
            literal_normalizer: false,
        }
    }
}

impl AffinityConfig {
    pub fn kernel_for_level(&self, level: usize) -> usize {
        *self
            .kernel_sizes
            .get(level)
            .or_else(|| self.kernel_sizes.last())
            .unwrap_or(&3)
    }
}

/// Full-batch gradient-descent settings for a head.
#[derive(Debug, Clone, Copy)]
pub struct TrainerConfig {
    pub iters: usize,
    pub lr: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig { iters: 400, lr: 0.5 }
    }
}

/// Completeness-head training settings.
#[derive(Debug, Clone, Copy)]
pub struct CompletenessConfig {
    /// Self-distillation loop count (select, retarget, retrain, reselect).
    pub loops: usize,
    /// Proposals averaged for context enhancement.
    pub top_k: usize,
    pub iters: usize,
    pub lr: f64,
}

impl Default for CompletenessConfig {
    fn default() -> Self {
        CompletenessConfig { loops: 2, top_k: 3, iters: 150, lr: 0.5 }
    }
}

/// Which stages run during selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Take the proposal with the highest generator score; no learning.
    GeneratorTop1,
    /// Bag heads without distance guidance, refinement, or completeness.
    PlainMil,
    /// Distance guidance, refinement, and box mining, but no completeness
    /// distillation.
    NoCompleteness,
    /// Everything.
    Full,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Mode> {
        match s {
            "generator-top1" => Ok(Mode::GeneratorTop1),
            "plain-mil" => Ok(Mode::PlainMil),
            "no-completeness" => Ok(Mode::NoCompleteness),
            "full" => Ok(Mode::Full),
            other => Err(Error::schema("mode", format!("unknown mode `{other}`"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::GeneratorTop1 => "generator-top1",
            Mode::PlainMil => "plain-mil",
            Mode::NoCompleteness => "no-completeness",
            Mode::Full => "full",
        }
    }
}

/// Everything the pipeline needs, bundled.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub seed: u64,
    pub parallelism: usize,
    pub mode: Mode,
    pub distance: DistanceConfig,
    pub sampler: SamplerConfig,
    pub mining: MiningConfig,
    pub affinity: AffinityConfig,
    pub select_trainer: TrainerConfig,
    pub refine_trainer: TrainerConfig,
    pub completeness: CompletenessConfig,
    /// Loss weight for the bag loss inside the total-loss assembly.
    pub lambda: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            parallelism: 1,
            mode: Mode::Full,
            distance: DistanceConfig::default(),
            sampler: SamplerConfig::default(),
            mining: MiningConfig::default(),
            affinity: AffinityConfig::default(),
            select_trainer: TrainerConfig::default(),
            refine_trainer: TrainerConfig { iters: 300, lr: 0.5 },
            completeness: CompletenessConfig::default(),
            lambda: 0.25,
        }
    }
}

impl PipelineConfig {
    /// Apply one `key=value` override. Unknown keys error.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::schema("config", format!("bad value `{value}` for `{key}`")))
        }
        match key {
            "seed" => self.seed = parse(key, value)?,
            "parallelism" => self.parallelism = parse(key, value)?,
            "mode" => self.mode = Mode::parse(value)?,
            "distance.d" => self.distance.d = parse(key, value)?,
            "distance.penalize" => self.distance.penalize = parse(key, value)?,
            "sampler.v" => self.sampler.v = parse(key, value)?,
            "sampler.t_neg1" => self.sampler.t_neg1 = parse(key, value)?,
            "sampler.t_neg2" => self.sampler.t_neg2 = parse(key, value)?,
            "sampler.n_bg" => self.sampler.n_bg = parse(key, value)?,
            "sampler.n_part" => self.sampler.n_part = parse(key, value)?,
            "mining.k" => self.mining.k = parse(key, value)?,
            "mining.t_min1" => self.mining.t_min1 = parse(key, value)?,
            "mining.t_min2" => self.mining.t_min2 = parse(key, value)?,
            "affinity.zeta_g" => self.affinity.zeta_g = parse(key, value)?,
            "affinity.sigma_g" => self.affinity.sigma_g = parse(key, value)?,
            "affinity.zeta_l" => self.affinity.zeta_l = parse(key, value)?,
            "affinity.sigma_l" => self.affinity.sigma_l = parse(key, value)?,
            "affinity.cascade_blocks" => self.affinity.cascade_blocks = parse(key, value)?,
            "affinity.lambda_i" => self.affinity.lambda_i = parse(key, value)?,
            "affinity.lambda_s" => self.affinity.lambda_s = parse(key, value)?,
            "affinity.literal_normalizer" => {
                self.affinity.literal_normalizer = parse(key, value)?
            }
            "affinity.kernel_sizes" => {
                let sizes: Result<Vec<usize>> =
                    value.split(',').map(|s| parse("affinity.kernel_sizes", s.trim())).collect();
                self.affinity.kernel_sizes = sizes?;
            }
            "select.iters" => self.select_trainer.iters = parse(key, value)?,
            "select.lr" => self.select_trainer.lr = parse(key, value)?,
            "refine.iters" => self.refine_trainer.iters = parse(key, value)?,
            "refine.lr" => self.refine_trainer.lr = parse(key, value)?,
            "completeness.loops" => self.completeness.loops = parse(key, value)?,
            "completeness.top_k" => self.completeness.top_k = parse(key, value)?,
            "completeness.iters" => self.completeness.iters = parse(key, value)?,
            "completeness.lr" => self.completeness.lr = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            other => {
                return Err(Error::schema("config", format!("unknown key `{other}`")));
            }
        }
        Ok(())
    }

    /// Load overrides from a flat `key=value` file. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn load_overrides(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::schema("config", format!("line {}: expected key=value", lineno + 1))
            })?;
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.distance.d, 0.015);
        assert_eq!(cfg.sampler.t_neg1, 0.3);
        assert_eq!(cfg.sampler.t_neg2, 0.5);
        assert_eq!(cfg.mining.k, 3);
        assert_eq!(cfg.mining.t_min1, 0.6);
        assert_eq!(cfg.mining.t_min2, 0.3);
        assert_eq!(cfg.affinity.cascade_blocks, 2);
        assert_eq!(cfg.affinity.lambda_i, 0.5);
        assert_eq!(cfg.affinity.kernel_sizes[0], 5);
        assert_eq!(cfg.lambda, 0.25);
    }

    #[test]
    fn apply_overrides() {
        let mut cfg = PipelineConfig::default();
        cfg.apply("distance.d", "0.5").unwrap();
        cfg.apply("mode", "plain-mil").unwrap();
        cfg.apply("affinity.kernel_sizes", "7,5,3").unwrap();
        assert_eq!(cfg.distance.d, 0.5);
        assert_eq!(cfg.mode, Mode::PlainMil);
        assert_eq!(cfg.affinity.kernel_sizes, vec![7, 5, 3]);
        assert!(cfg.apply("nope", "1").is_err());
    }
}
