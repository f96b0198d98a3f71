//! Run configuration: TOML file, `section.key=value` overrides, defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sga_core::aggregator::{build_schedule, LayerSchedule, ScheduleOptions, ScheduleSpec};
use sga_core::bench::{config_id, BenchConfig, Phase};
use sga_core::model::{ModelConfig, TokenLayout};
use sga_core::subsample::{ScoreMaps, Strategy};
use sga_core::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[serde(alias = "vggt_style")]
    Vggt,
    #[serde(alias = "pi3_style")]
    Pi3,
}

impl Mode {
    pub fn layout(self) -> TokenLayout {
        match self {
            Mode::Vggt => TokenLayout::VggtStyle,
            Mode::Pi3 => TokenLayout::Pi3Style,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub mode: Mode,
    /// Layout default (48 or 36) when absent.
    pub num_blocks: Option<usize>,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { mode: Mode::Vggt, num_blocks: None, embed_dim: 64, num_heads: 4, mlp_ratio: 4.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub batch: usize,
    pub frames: usize,
    pub n_h: usize,
    pub n_w: usize,
    pub seed: u64,
    /// JSON score maps (one list per frame) for the score-based strategy.
    pub score_maps: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { batch: 1, frames: 4, n_h: 8, n_w: 8, seed: 0, score_maps: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    /// Layout default (9 or 10) when absent.
    pub t_early: Option<usize>,
    /// Last global layer when absent.
    pub t_end: Option<usize>,
    pub sigma: usize,
    pub strategy: Strategy,
    pub selection_seed: u64,
    pub diagonal: bool,
    pub mean_fill: bool,
    /// Layout default when absent.
    pub keep_first_frame_full: Option<bool>,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            t_early: None,
            t_end: None,
            sigma: 2,
            strategy: Strategy::FixedGrid,
            selection_seed: 0,
            diagonal: true,
            mean_fill: true,
            keep_first_frame_full: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub directory: PathBuf,
    /// Any of "json", "csv".
    pub formats: Vec<String>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { directory: PathBuf::from("runs"), formats: vec!["json".into(), "csv".into()] }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub data: DataSection,
    pub schedule: ScheduleSection,
    pub output: OutputSection,
}

const SECTIONS: [&str; 4] = ["model", "data", "schedule", "output"];

/// Short key spellings accepted in overrides.
fn canonical_key(section: &str, key: &str) -> String {
    match (section, key) {
        ("model", "C") => "embed_dim",
        ("model", "H") => "num_heads",
        ("data", "B") => "batch",
        ("data", "N") => "frames",
        _ => key,
    }
    .to_string()
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn config_error(field: &str, reason: impl Into<String>) -> Error {
    Error::Config { field: field.to_string(), reason: reason.into() }
}

impl RunConfig {
    /// Defaults, overlaid by the file, overlaid by `section.key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, Error> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| config_error("config", format!("{}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| config_error("config", e.to_string()))?
            }
            None => toml::Table::new(),
        };
        for item in overrides {
            let (path, raw) = item
                .split_once('=')
                .ok_or_else(|| config_error(item, "override must look like section.key=value"))?;
            let (section, key) = path
                .split_once('.')
                .ok_or_else(|| config_error(path, "override key must be section.key"))?;
            if !SECTIONS.contains(&section) {
                return Err(config_error(path, format!("unknown section, expected one of {SECTIONS:?}")));
            }
            let entry = table
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let toml::Value::Table(t) = entry else {
                return Err(config_error(section, "must be a table"));
            };
            t.insert(canonical_key(section, key), parse_value(raw));
        }
        for (section, value) in &table {
            if !SECTIONS.contains(&section.as_str()) {
                return Err(config_error(section, "unknown section"));
            }
            let toml::Value::Table(t) = value else {
                return Err(config_error(section, "must be a table"));
            };
            // Re-deserialize each section alone so errors carry the field path.
            let text = toml::to_string(t).map_err(|e| config_error(section, e.to_string()))?;
            let check = match section.as_str() {
                "model" => toml::from_str::<ModelSection>(&text).map(drop),
                "data" => toml::from_str::<DataSection>(&text).map(drop),
                "schedule" => toml::from_str::<ScheduleSection>(&text).map(drop),
                _ => toml::from_str::<OutputSection>(&text).map(drop),
            };
            check.map_err(|e| config_error(section, e.message().to_string()))?;
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_error("config", e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn layout(&self) -> TokenLayout {
        self.model.mode.layout()
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut m = ModelConfig::new(self.layout());
        if let Some(n) = self.model.num_blocks {
            m.num_blocks = n;
        }
        m.embed_dim = self.model.embed_dim;
        m.num_heads = self.model.num_heads;
        m.mlp_ratio = self.model.mlp_ratio;
        m.seed = self.model.seed;
        m
    }

    pub fn num_global(&self) -> usize {
        self.model_config().num_global_blocks()
    }

    pub fn t_early(&self) -> usize {
        self.schedule.t_early.unwrap_or(self.layout().default_t_early())
    }

    pub fn t_end(&self) -> usize {
        self.schedule.t_end.unwrap_or(self.num_global().saturating_sub(1))
    }

    pub fn schedule_options(&self) -> ScheduleOptions {
        let mut o = ScheduleOptions::for_layout(self.layout());
        o.strategy = self.schedule.strategy;
        o.seed = self.schedule.selection_seed;
        o.diagonal = self.schedule.diagonal;
        o.mean_fill = self.schedule.mean_fill;
        if let Some(k) = self.schedule.keep_first_frame_full {
            o.keep_first_frame_full = k;
        }
        o
    }

    pub fn schedule_spec(&self) -> ScheduleSpec {
        let o = self.schedule_options();
        ScheduleSpec {
            num_global: self.num_global(),
            t_early: self.t_early(),
            t_end: self.t_end(),
            sigma: self.schedule.sigma,
            strategy: o.strategy,
            diagonal: o.diagonal,
            mean_fill: o.mean_fill,
            keep_first_frame_full: o.keep_first_frame_full,
        }
    }

    pub fn layer_schedule(&self) -> Result<LayerSchedule, Error> {
        build_schedule(self.num_global(), self.t_early(), self.t_end(), self.schedule.sigma, &self.schedule_options())
            .map_err(|e| config_error("schedule", e.to_string()))
    }

    pub fn score_maps(&self) -> Result<Option<ScoreMaps>, Error> {
        match &self.data.score_maps {
            Some(p) => {
                let maps = ScoreMaps::load(p).map_err(|e| config_error("data.score_maps", e.to_string()))?;
                maps.validate(self.data.frames, sga_core::model::PatchGrid::new(self.data.n_h, self.data.n_w))
                    .map_err(|e| config_error("data.score_maps", e.to_string()))?;
                Ok(Some(maps))
            }
            None => Ok(None),
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.model_config()
            .validate()
            .map_err(|e| config_error("model", e.to_string()))?;
        for (field, v) in [("data.batch", self.data.batch), ("data.frames", self.data.frames), ("data.n_h", self.data.n_h), ("data.n_w", self.data.n_w)] {
            if v == 0 {
                return Err(config_error(field, "must be positive"));
            }
        }
        if self.schedule.sigma == 0 {
            return Err(config_error("schedule.sigma", "must be at least 1"));
        }
        if !(self.model.mlp_ratio > 0.0) {
            return Err(config_error("model.mlp_ratio", "must be positive"));
        }
        for f in &self.output.formats {
            if f != "json" && f != "csv" {
                return Err(config_error("output.formats", format!("unknown format {f:?}")));
            }
        }
        if self.schedule.strategy == Strategy::ScoreBased && self.data.score_maps.is_none() {
            return Err(config_error("data.score_maps", "the score_based strategy needs a score map file"));
        }
        self.layer_schedule()?;
        self.score_maps()?;
        Ok(())
    }

    pub fn wants(&self, format: &str) -> bool {
        self.output.formats.iter().any(|f| f == format)
    }

    /// Hash of everything that affects results (the output section excluded).
    pub fn config_id(&self) -> String {
        config_id(&(&self.model, &self.data, &self.schedule))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output.directory.join(self.config_id())
    }

    pub fn bench_config(&self, phase: Phase, repeats: usize, warmups: usize) -> BenchConfig {
        BenchConfig {
            layout: self.layout(),
            frames: self.data.frames,
            n_h: self.data.n_h,
            n_w: self.data.n_w,
            dim: self.model.embed_dim,
            heads: self.model.num_heads,
            mlp_ratio: self.model.mlp_ratio,
            num_blocks: self.model.num_blocks,
            seed: self.model.seed,
            t_early: self.t_early(),
            t_end: self.schedule.t_end,
            sigma: self.schedule.sigma,
            strategy: self.schedule.strategy,
            diagonal: self.schedule.diagonal,
            mean_fill: self.schedule.mean_fill,
            keep_first_frame_full: self.schedule.keep_first_frame_full,
            phase,
            repeats,
            warmups,
            ..BenchConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let c = RunConfig::load(None, &[]).unwrap();
        assert_eq!(c.t_early(), 9);
        assert_eq!(c.t_end(), 23);
        assert_eq!(c.config_id().len(), 12);
    }

    #[test]
    fn overrides_beat_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[model]\nmode = \"pi3\"\nseed = 4\n[schedule]\nsigma = 4\n").unwrap();
        let c = RunConfig::load(Some(&p), &["schedule.sigma=9".into(), "model.C=32".into(), "schedule.strategy=low_norm".into()]).unwrap();
        assert_eq!(c.model.mode, Mode::Pi3);
        assert_eq!(c.model.seed, 4);
        assert_eq!(c.schedule.sigma, 9);
        assert_eq!(c.model.embed_dim, 32);
        assert_eq!(c.schedule.strategy, Strategy::LowNorm);
    }

    #[test]
    fn unknown_keys_rejected_with_path() {
        let err = RunConfig::load(None, &["schedule.sigmaa=2".into()]).unwrap_err();
        assert!(err.to_string().contains("schedule"), "{err}");
        assert!(RunConfig::load(None, &["bogus.x=1".into()]).is_err());
        assert!(RunConfig::load(None, &["model.num_heads=5".into()]).is_err());
        assert!(RunConfig::load(None, &["schedule.t_early=30".into()]).is_err());
    }

    #[test]
    fn config_id_ignores_output_directory() {
        let a = RunConfig::load(None, &[]).unwrap();
        let b = RunConfig::load(None, &["output.directory=elsewhere".into()]).unwrap();
        let c = RunConfig::load(None, &["data.seed=1".into()]).unwrap();
        assert_eq!(a.config_id(), b.config_id());
        assert_ne!(a.config_id(), c.config_id());
    }
}
