//! Layered settings: built-in defaults, then a `key = value` file, then flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cryoscore::denoiser::DenoiseConfig;
use cryoscore::evaluation::{DEFAULT_MATCH_THRESHOLD, FSC_THRESHOLD};
use cryoscore::score_model::ScoreModelConfig;
use cryoscore::target_bank::BankConfig;
use cryoscore::trainer::{parse_key_values, TrainingSchedule};

use crate::UsageError;

/// Environment variable naming the default configuration file.
pub const CONFIG_ENV: &str = "CRYOSCORE_CONFIG";

#[derive(Debug, Clone)]
pub struct Settings {
    pub schedule: TrainingSchedule,
    pub model: ScoreModelConfig,
    pub bank: BankConfig,
    /// Block size of the downsampling features used when building a bank.
    pub bank_feature_factor: usize,
    pub denoise: DenoiseConfig,
    pub match_threshold: f64,
    pub fsc_threshold: f64,
    /// Robust-sigma multiplier of the template picker used by `sweep`.
    pub pick_sigma: f64,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            schedule: TrainingSchedule::default(),
            model: ScoreModelConfig::default(),
            bank: BankConfig::default(),
            bank_feature_factor: 4,
            denoise: DenoiseConfig::default(),
            match_threshold: DEFAULT_MATCH_THRESHOLD,
            fsc_threshold: FSC_THRESHOLD,
            pick_sigma: 4.0,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| UsageError(format!("{key}: cannot parse {v:?}")).into())
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(UsageError(format!("{key}: expected a boolean, got {v:?}")).into()),
    }
}

fn optional_usize(key: &str, v: &str) -> Result<Option<usize>> {
    if v.eq_ignore_ascii_case("auto") || v.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

impl Settings {
    /// Applies one key to whichever group owns it.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        if self.schedule.set(key, v)? {
            self.model.patch_size = self.schedule.patch_size;
            self.bank.out_size = self.schedule.patch_size;
            return Ok(());
        }
        if self.model.set(key, v)? {
            return Ok(());
        }
        match key {
            "views" => self.bank.n_views = num(key, v)?,
            "inplane_rotations" => self.bank.inplane_rotations = num(key, v)?,
            "cutoff" => self.bank.cutoff = num(key, v)?,
            "rolloff_fraction" => self.bank.rolloff_fraction = num(key, v)?,
            "tau" => self.bank.temperature = num(key, v)?,
            "center_per_match" => self.bank.center_per_match = flag(key, v)?,
            "bank_feature_factor" => self.bank_feature_factor = num(key, v)?,
            "iters" => self.denoise.n_iterations = num(key, v)?,
            "noise_a" => self.denoise.noise_map.a = num(key, v)?,
            "noise_b" => self.denoise.noise_map.b = num(key, v)?,
            "tile_size" => self.denoise.tile_size = optional_usize(key, v)?,
            "overlap" => self.denoise.overlap = optional_usize(key, v)?,
            "max_update" => self.denoise.max_update = num(key, v)?,
            "iteration_indexed" => self.denoise.iteration_indexed = flag(key, v)?,
            "threshold" => self.match_threshold = num(key, v)?,
            "fsc_threshold" => self.fsc_threshold = num(key, v)?,
            "pick_sigma" => self.pick_sigma = num(key, v)?,
            _ => return Err(UsageError(format!("unknown configuration key {key:?}")).into()),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_key_values(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Defaults overlaid with `explicit`, or else the file named by
    /// [`CONFIG_ENV`] when it is set.
    pub fn load(explicit: Option<&Path>) -> Result<Settings> {
        let mut s = Settings::default();
        s.bank.out_size = s.schedule.patch_size;
        let path: Option<PathBuf> = explicit
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()).map(PathBuf::from));
        if let Some(p) = path {
            let text = std::fs::read_to_string(&p).with_context(|| format!("reading config {}", p.display()))?;
            s.apply_text(&text).with_context(|| format!("in config {}", p.display()))?;
        }
        Ok(s)
    }

    pub fn to_config_string(&self) -> String {
        let b = &self.bank;
        let d = &self.denoise;
        let opt = |v: Option<usize>| v.map_or("auto".to_string(), |x| x.to_string());
        format!(
            "{}{}views = {}\ninplane_rotations = {}\ncutoff = {}\nrolloff_fraction = {}\ntau = {}\ncenter_per_match = {}\n\
             bank_feature_factor = {}\niters = {}\nnoise_a = {}\nnoise_b = {}\ntile_size = {}\noverlap = {}\nmax_update = {}\n\
             iteration_indexed = {}\nthreshold = {}\nfsc_threshold = {}\npick_sigma = {}\n",
            self.schedule.to_config_string(),
            self.model.to_config_string(),
            b.n_views,
            b.inplane_rotations,
            b.cutoff,
            b.rolloff_fraction,
            b.temperature,
            b.center_per_match,
            self.bank_feature_factor,
            d.n_iterations,
            d.noise_map.a,
            d.noise_map.b,
            opt(d.tile_size),
            opt(d.overlap),
            d.max_update,
            d.iteration_indexed,
            self.match_threshold,
            self.fsc_threshold,
            self.pick_sigma
        )
    }
}
