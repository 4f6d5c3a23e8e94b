//! `key=value` run configuration files.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::eval::{MergeMode, PipelineConfig};
use crate::model::{Aggregate, ContextFusion, RefineConfig, SegModelConfig};
use crate::tiling::{ContextScale, IGNORE_LABEL};
use crate::train::TrainConfig;

/// Every setting a CLI run needs. Files and command-line overrides go
/// through the same [`RunConfig::set`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub patch: usize,
    pub overlap: usize,
    pub context_lambdas: Vec<ContextScale>,
    pub num_classes: usize,
    pub lr0: f64,
    pub epochs: usize,
    pub gamma: f64,
    pub seed: u64,
    pub refine_scale: ContextScale,
    pub merge_mode: MergeMode,
    pub aggregate: Aggregate,
    pub fusion: ContextFusion,
    pub accum_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            patch: 64,
            overlap: 16,
            context_lambdas: vec![
                ContextScale::Factor(1.0),
                ContextScale::Factor(2.0),
                ContextScale::Factor(3.0),
            ],
            num_classes: 5,
            lr0: 2e-3,
            epochs: 40,
            gamma: 3.0,
            seed: 0,
            refine_scale: ContextScale::Factor(2.0),
            merge_mode: MergeMode::Average,
            aggregate: Aggregate::Local,
            fusion: ContextFusion::Adaptive,
            accum_steps: 6,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_scale(key: &str, value: &str) -> Result<ContextScale> {
    match value {
        "g" | "G" => Ok(ContextScale::Global),
        v => {
            let l: f64 = parse(key, v)?;
            if !(l >= 1.0) || !l.is_finite() {
                return Err(Error::Config(format!("{key}: scale {v} must be >= 1")));
            }
            Ok(ContextScale::Factor(l))
        }
    }
}

fn parse_fusion(value: &str) -> Result<ContextFusion> {
    match value {
        "adaptive" => Ok(ContextFusion::Adaptive),
        "uniform" => Ok(ContextFusion::Uniform),
        "none" => Ok(ContextFusion::Disabled),
        _ => Err(Error::Config(format!("fusion must be adaptive|uniform|none, got {value:?}"))),
    }
}

fn fusion_name(f: ContextFusion) -> &'static str {
    match f {
        ContextFusion::Adaptive => "adaptive",
        ContextFusion::Uniform => "uniform",
        ContextFusion::Disabled => "none",
    }
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "patch" => self.patch = parse(key, value)?,
            "overlap" => self.overlap = parse(key, value)?,
            "context_lambdas" => {
                self.context_lambdas = value
                    .split(',')
                    .map(|v| parse_scale(key, v.trim()))
                    .collect::<Result<_>>()?
            }
            "num_classes" => self.num_classes = parse(key, value)?,
            "lr0" => self.lr0 = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "refine_scale" => self.refine_scale = parse_scale(key, value)?,
            "merge_mode" => self.merge_mode = value.parse()?,
            "aggregate" => self.aggregate = value.parse()?,
            "fusion" => self.fusion = parse_fusion(value)?,
            "accum_steps" => self.accum_steps = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines over the defaults. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at_line = |e: Error| Error::Config(format!("line {}: {}", i + 1, e.to_string().trim_start_matches("configuration error: ")));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
            cfg.set(key.trim(), value).map_err(at_line)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = super::read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Config(format!("{}: not UTF-8", path.display())))?;
        Self::parse(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.to_string().trim_start_matches("configuration error: "))))
    }

    /// Canonical text form; parses back to the same config.
    pub fn to_text(&self) -> String {
        let lambdas: Vec<String> = self.context_lambdas.iter().map(|s| s.to_string()).collect();
        let mut s = String::new();
        for (k, v) in [
            ("patch", self.patch.to_string()),
            ("overlap", self.overlap.to_string()),
            ("context_lambdas", lambdas.join(",")),
            ("num_classes", self.num_classes.to_string()),
            ("lr0", self.lr0.to_string()),
            ("epochs", self.epochs.to_string()),
            ("gamma", self.gamma.to_string()),
            ("seed", self.seed.to_string()),
            ("refine_scale", self.refine_scale.to_string()),
            ("merge_mode", self.merge_mode.to_string()),
            ("aggregate", self.aggregate.to_string()),
            ("fusion", fusion_name(self.fusion).to_string()),
            ("accum_steps", self.accum_steps.to_string()),
        ] {
            writeln!(s, "{k}={v}").unwrap();
        }
        s
    }

    pub fn seg_model(&self) -> SegModelConfig {
        SegModelConfig {
            num_classes: self.num_classes,
            context_lambdas: self.context_lambdas.clone(),
            patch: self.patch,
            focal_gamma: self.gamma,
            aggregate: self.aggregate,
            fusion: self.fusion,
            ..SegModelConfig::default()
        }
    }

    pub fn refine_model(&self) -> RefineConfig {
        RefineConfig {
            num_classes: self.num_classes,
            patch: self.patch,
            aggregate: self.aggregate,
            focal_gamma: self.gamma,
            ..RefineConfig::default()
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lr0: self.lr0,
            accum_steps: self.accum_steps,
            epochs: self.epochs,
            seed: self.seed,
            focal_gamma: self.gamma,
            refine_source_epochs: TrainConfig::default_source_epochs(self.epochs),
            ..TrainConfig::default()
        }
    }

    pub fn pipeline(&self, threads: usize) -> PipelineConfig {
        PipelineConfig {
            patch: self.patch,
            overlap: self.overlap,
            merge: self.merge_mode,
            refine_scale: self.refine_scale,
            num_classes: self.num_classes,
            ignore: IGNORE_LABEL,
            threads,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_keys_with_comments() {
        let text = "# desk run\npatch=32\noverlap = 8\ncontext_lambdas=1,2,g\nnum_classes=4\n\nlr0=1e-3 # fast\n\
                    epochs=3\ngamma=2\nseed=9\nrefine_scale=3\nmerge_mode=refine\naggregate=context\nfusion=uniform\naccum_steps=2\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.patch, 32);
        assert_eq!(c.overlap, 8);
        assert_eq!(
            c.context_lambdas,
            vec![ContextScale::Factor(1.0), ContextScale::Factor(2.0), ContextScale::Global]
        );
        assert_eq!((c.num_classes, c.lr0, c.epochs, c.gamma, c.seed), (4, 1e-3, 3, 2.0, 9));
        assert_eq!(c.refine_scale, ContextScale::Factor(3.0));
        assert_eq!(c.merge_mode, MergeMode::Refine);
        assert_eq!(c.aggregate, Aggregate::Context);
        assert_eq!(c.fusion, ContextFusion::Uniform);
        assert_eq!(c.accum_steps, 2);
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn unknown_key_reports_line_number() {
        let err = RunConfig::parse("patch=64\n\n# x\ncolour=red\n").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Config(_)));
        assert!(msg.contains("line 4") && msg.contains("colour"), "{msg}");
    }

    #[test]
    fn malformed_values_are_rejected() {
        for bad in ["patch=abc", "context_lambdas=1,0.5", "merge_mode=blend", "noequals", "fusion=max"] {
            assert!(matches!(RunConfig::parse(bad), Err(Error::Config(m)) if m.contains("line 1")), "{bad}");
        }
    }

    #[test]
    fn later_set_overrides_file_value() {
        let mut c = RunConfig::parse("seed=1\n").unwrap();
        c.set("seed", "2").unwrap();
        assert_eq!(c.seed, 2);
        assert!(c.set("bogus", "1").is_err());
    }

    #[test]
    fn defaults_are_the_desk_geometry() {
        let c = RunConfig::default();
        assert_eq!((c.patch, c.overlap, c.num_classes), (64, 16, 5));
        assert_eq!(c.seg_model(), SegModelConfig::default());
        assert_eq!(c.refine_scale, ContextScale::Factor(2.0));
    }
}
