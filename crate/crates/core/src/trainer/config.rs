//! Flat `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Lists are comma-separated.
//! Keys cover [`TrainingSchedule`] and [`ScoreModelConfig`]; unknown keys are
//! rejected so typos do not pass silently.

use std::fmt::Write as _;
use std::str::FromStr;

use super::{FeatureSource, TrainingSchedule};
use crate::error::{Error, Result};
use crate::noise_model::PoissonGaussianParams;
use crate::score_model::ScoreModelConfig;

pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Parse(format!("{key}: cannot parse {v:?}")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| num(key, s.trim())).collect()
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::Parse(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn optional(key: &str, v: &str) -> Result<Option<f64>> {
    if v.eq_ignore_ascii_case("none") || v.is_empty() {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl TrainingSchedule {
    /// Applies one key; returns `false` if the key is not a schedule key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "epochs" => self.epochs = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "lr_decay_factor" => self.lr_decay_factor = num(key, v)?,
            "lr_decay_steps" => self.lr_decay_steps = num(key, v)?,
            "adam_beta1" => self.adam_betas.0 = num(key, v)?,
            "adam_beta2" => self.adam_betas.1 = num(key, v)?,
            "sigma_a_levels" => self.sigma_a_levels = list(key, v)?,
            "warmup_epochs" => self.warmup_epochs = num(key, v)?,
            "ramp_end_epochs" => self.ramp_end_epochs = num(key, v)?,
            "patches_per_micrograph" => self.patches_per_micrograph = num(key, v)?,
            "patch_size" => self.patch_size = num(key, v)?,
            "encoder_refresh_epochs" => self.encoder_refresh_epochs = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "dsm_only" => self.dsm_only = flag(key, v)?,
            "fixed_wt" => self.fixed_wt = optional(key, v)?,
            "target_gain" => self.target_gain = num(key, v)?,
            "augment" => {
                self.augment = if flag(key, v)? {
                    Some(self.augment.unwrap_or_default())
                } else {
                    None
                }
            }
            "augment_alpha" => self.augment.get_or_insert_with(Default::default).alpha = num(key, v)?,
            "augment_offset" => self.augment.get_or_insert_with(Default::default).b = num(key, v)?,
            "augment_sigma_det" => self.augment.get_or_insert_with(Default::default).sigma_det = num(key, v)?,
            "features" => {
                self.features = match v {
                    "encoder" => FeatureSource::Encoder,
                    _ => match v.strip_prefix("downsample") {
                        Some(rest) => FeatureSource::Downsample(if rest.is_empty() {
                            8
                        } else {
                            num(key, rest.trim_start_matches(':'))?
                        }),
                        None => return Err(Error::Parse(format!("features: unknown source {v:?}"))),
                    },
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let (b1, b2) = self.adam_betas;
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "lr_decay_factor = {}", self.lr_decay_factor);
        let _ = writeln!(s, "lr_decay_steps = {}", self.lr_decay_steps);
        let _ = writeln!(s, "adam_beta1 = {b1}");
        let _ = writeln!(s, "adam_beta2 = {b2}");
        let _ = writeln!(s, "sigma_a_levels = {}", join(&self.sigma_a_levels));
        let _ = writeln!(s, "warmup_epochs = {}", self.warmup_epochs);
        let _ = writeln!(s, "ramp_end_epochs = {}", self.ramp_end_epochs);
        let _ = writeln!(s, "patches_per_micrograph = {}", self.patches_per_micrograph);
        let _ = writeln!(s, "patch_size = {}", self.patch_size);
        let _ = writeln!(s, "encoder_refresh_epochs = {}", self.encoder_refresh_epochs);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "dsm_only = {}", self.dsm_only);
        let _ = writeln!(
            s,
            "fixed_wt = {}",
            self.fixed_wt.map_or("none".to_string(), |w| w.to_string())
        );
        let _ = writeln!(s, "target_gain = {}", self.target_gain);
        let _ = writeln!(s, "augment = {}", self.augment.is_some());
        if let Some(PoissonGaussianParams { alpha, b, sigma_det }) = self.augment {
            let _ = writeln!(s, "augment_alpha = {alpha}");
            let _ = writeln!(s, "augment_offset = {b}");
            let _ = writeln!(s, "augment_sigma_det = {sigma_det}");
        }
        let _ = writeln!(
            s,
            "features = {}",
            match self.features {
                FeatureSource::Encoder => "encoder".to_string(),
                FeatureSource::Downsample(f) => format!("downsample:{f}"),
            }
        );
        s
    }
}

impl ScoreModelConfig {
    /// Applies one key; returns `false` if the key is not an architecture key.
    /// `patch_size` is shared with the schedule and handled by [`parse_config`].
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "base_width" => self.base_width = num(key, v)?,
            "channel_multipliers" => self.channel_multipliers = list(key, v)?,
            "encode_level" => self.encode_level = num(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_config_string(&self) -> String {
        format!(
            "base_width = {}\nchannel_multipliers = {}\nencode_level = {}\n",
            self.base_width,
            join(&self.channel_multipliers),
            self.encode_level
        )
    }
}

/// Applies every key of `text` on top of the given defaults. The model patch
/// size follows the schedule's `patch_size`.
pub fn parse_config(text: &str, sched: &mut TrainingSchedule, model: &mut ScoreModelConfig) -> Result<()> {
    for (k, v) in parse_key_values(text)? {
        if !(sched.set(&k, &v)? || model.set(&k, &v)?) {
            return Err(Error::Parse(format!("unknown configuration key {k:?}")));
        }
    }
    model.patch_size = sched.patch_size;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_errors() {
        let mut s = TrainingSchedule {
            sigma_a_levels: vec![0.7, 0.5],
            fixed_wt: Some(0.1),
            augment: Some(PoissonGaussianParams::default()),
            features: FeatureSource::Downsample(4),
            ..Default::default()
        };
        s.epochs = 12;
        let m = ScoreModelConfig::desk();
        let text = format!("# comment\n{}{}", s.to_config_string(), m.to_config_string());
        let mut s2 = TrainingSchedule::default();
        let mut m2 = ScoreModelConfig::default();
        parse_config(&text, &mut s2, &mut m2).unwrap();
        assert_eq!(s2, s);
        assert_eq!(m2.base_width, 32);
        assert_eq!(m2.channel_multipliers, vec![1, 2]);
        assert_eq!(m2.patch_size, s.patch_size);
        assert!(parse_config("bogus = 1", &mut s2, &mut m2).is_err());
        assert!(parse_config("epochs", &mut s2, &mut m2).is_err());
        assert!(parse_config("epochs = ten", &mut s2, &mut m2).is_err());
        parse_config("fixed_wt = none\naugment = false", &mut s2, &mut m2).unwrap();
        assert_eq!((s2.fixed_wt, s2.augment), (None, None));
    }
}
