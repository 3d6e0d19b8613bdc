use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::CliError;
use crate::density::KernelSpec;
use crate::ingest::{rule_for, DatasetId, IngestError};
use crate::labels::{DownsampleSpec, NormalizationSpec};
use crate::preprocess::ResizeRule;

/// Pipeline configuration as read from `--config`. Every field is optional;
/// command-line flags take precedence. `kernel` and `resize` are partial
/// objects merged over the dataset's built-in rule.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: Option<DatasetId>,
    pub manifest: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub strict: Option<bool>,
    pub kernel: Option<Value>,
    pub resize: Option<Value>,
    pub downsample: Option<DownsampleSpec>,
    pub normalization: Option<NormalizationSpec>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))
    }
}

/// A fully resolved configuration. Serializes to the snapshot recorded in
/// the experiment store.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResolvedConfig {
    pub dataset: DatasetId,
    pub manifest: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub strict: bool,
    pub kernel: KernelSpec,
    pub resize: ResizeRule,
    pub downsample: Option<DownsampleSpec>,
    pub normalization: Option<NormalizationSpec>,
    #[serde(skip)]
    pub threads: usize,
}

fn merge(base: Value, patch: &Value) -> Result<Value, String> {
    let Value::Object(patch) = patch else {
        return Err("override must be a JSON object".into());
    };
    let mut base = base;
    let obj = base.as_object_mut().expect("specs serialize to objects");
    for (k, v) in patch {
        obj.insert(k.clone(), v.clone());
    }
    Ok(base)
}

fn overridden<T>(base: T, patch: Option<&Value>, what: &str) -> Result<T, CliError>
where
    T: Serialize + for<'de> Deserialize<'de>,
{
    let Some(patch) = patch else { return Ok(base) };
    let merged = merge(serde_json::to_value(base).expect("spec serializes"), patch)
        .map_err(|e| CliError::usage(format!("{what}: {e}")))?;
    serde_json::from_value(merged).map_err(|e| CliError::usage(format!("{what}: {e}")))
}

impl PipelineConfig {
    pub fn resolve(self) -> Result<ResolvedConfig, CliError> {
        let dataset = self
            .dataset
            .ok_or_else(|| CliError::usage("no dataset given (config `dataset` or --dataset)"))?;
        let manifest = self
            .manifest
            .ok_or_else(|| CliError::usage("no manifest given (config `manifest` or --manifest)"))?;
        let output_dir = self
            .output_dir
            .ok_or_else(|| CliError::usage("no output directory given (config `output_dir` or --out)"))?;

        let (kernel, resize) = match rule_for(dataset) {
            Ok((rule, kernel)) => (
                overridden(kernel, self.kernel.as_ref(), "kernel")?,
                overridden(rule, self.resize.as_ref(), "resize")?,
            ),
            Err(IngestError::CustomWithoutRules) => {
                let (Some(k), Some(r)) = (self.kernel.as_ref(), self.resize.as_ref()) else {
                    return Err(CliError::usage(
                        "dataset CUSTOM needs explicit `kernel` and `resize` entries in the config",
                    ));
                };
                let resize: ResizeRule =
                    serde_json::from_value(r.clone()).map_err(|e| CliError::usage(format!("resize: {e}")))?;
                (overridden(KernelSpec::fixed(), Some(k), "kernel")?, resize)
            }
            Err(e) => return Err(CliError::usage(e.to_string())),
        };
        kernel.validate().map_err(|e| CliError::usage(e.to_string()))?;
        resize.validate().map_err(|e| CliError::usage(e.to_string()))?;
        if let Some(d) = self.downsample {
            if d.factor == 0 {
                return Err(CliError::usage("downsample.factor must be >= 1"));
            }
        }
        if let Some(n) = self.normalization {
            if !(n.label_factor > 0.0 && n.label_factor.is_finite()) {
                return Err(CliError::usage("normalization.label_factor must be positive"));
            }
        }
        let threads = match self.threads {
            Some(0) => return Err(CliError::usage("threads must be >= 1")),
            Some(t) => t,
            None => std::thread::available_parallelism().map_or(1, |n| n.get()),
        };
        Ok(ResolvedConfig {
            dataset,
            manifest,
            output_dir,
            seed: self.seed.unwrap_or(0),
            strict: self.strict.unwrap_or(false),
            kernel,
            resize,
            downsample: self.downsample,
            normalization: self.normalization,
            threads,
        })
    }
}
