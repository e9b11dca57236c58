//! Artifact emission. JSON artifacts are wrapped as `{meta, result}`; CSV
//! artifacts start with `# key: value` comment lines carrying the same meta.

use std::io::Write;
use std::path::Path;

use procova_mmrm::FitResult;
use serde::Serialize;
use serde_json::{json, Value};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Serialize)]
pub struct Meta {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    /// Covariance structures tried by the fit, in order.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ladder: Option<Value>,
}

impl Meta {
    pub fn new(seed: Option<u64>, workers: Option<usize>) -> Self {
        Self {
            tool: "procova",
            version: procova_mmrm::VERSION,
            command: String::new(),
            config: Value::Null,
            seed,
            workers,
            ladder: None,
        }
    }

    pub fn command(&mut self, name: &str, settings: &impl Serialize) {
        self.command = name.to_owned();
        self.config = serde_json::to_value(settings).unwrap_or(Value::Null);
    }

    pub fn ladder(&mut self, fit: &FitResult) {
        self.ladder = Some(json!({
            "selected": fit.structure,
            "attempts": fit.attempts,
        }));
    }

    fn comment_lines(&self) -> String {
        let mut out = format!("# tool: {}\n# version: {}\n# command: {}\n", self.tool, self.version, self.command);
        if let Some(seed) = self.seed {
            out.push_str(&format!("# seed: {seed}\n"));
        }
        if let Some(w) = self.workers {
            out.push_str(&format!("# workers: {w}\n"));
        }
        if let Some(l) = &self.ladder {
            out.push_str(&format!("# ladder: {l}\n"));
        }
        out.push_str(&format!("# config: {}\n", self.config));
        out
    }
}

pub enum Body {
    Json(Value),
    Csv(String),
}

pub struct Artifact {
    pub name: &'static str,
    pub body: Body,
    /// Written to the output directory only, never to stdout.
    pub secondary: bool,
}

impl Artifact {
    pub fn json(name: &'static str, value: Value) -> Self {
        Self { name, body: Body::Json(value), secondary: false }
    }

    pub fn csv(name: &'static str, table: String) -> Self {
        Self { name, body: Body::Csv(table), secondary: false }
    }

    pub fn secondary(mut self) -> Self {
        self.secondary = true;
        self
    }

    fn render(&self, meta: &Meta) -> Result<String, CliError> {
        match &self.body {
            Body::Json(v) => {
                let doc = json!({ "meta": meta, "result": v });
                let mut s = serde_json::to_string_pretty(&doc)
                    .map_err(|e| CliError::Lib(procova_mmrm::Error::Numerical(format!("serialization: {e}"))))?;
                s.push('\n');
                Ok(s)
            }
            Body::Csv(t) => Ok(format!("{}{t}", meta.comment_lines())),
        }
    }

    fn is(&self, format: Format) -> bool {
        matches!((&self.body, format), (Body::Json(_), Format::Json) | (Body::Csv(_), Format::Csv))
    }
}

/// Writes every artifact into `dir` (when given) and the first primary
/// artifact of `format` to stdout.
pub fn emit(artifacts: &[Artifact], meta: &Meta, dir: Option<&Path>, format: Format) -> Result<(), CliError> {
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
        for a in artifacts {
            std::fs::write(dir.join(a.name), a.render(meta)?)?;
            log::info!("wrote {}", dir.join(a.name).display());
        }
    }
    if let Some(a) = artifacts.iter().find(|a| !a.secondary && a.is(format)) {
        let mut stdout = std::io::stdout().lock();
        stdout.write_all(a.render(meta)?.as_bytes())?;
        stdout.flush()?;
    }
    Ok(())
}
