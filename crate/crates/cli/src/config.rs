use std::path::PathBuf;

use clap::Args;
use serde::Deserialize;

use kla_core::recurrence::{Gating, Normalization, RuleKind, SequenceFactor, UpdateRule};
use kla_core::tensor::Precision;

use crate::commands::CliError;

/// Options shared by all subcommands. Each may also come from the JSON file
/// given by `--config`; flags take precedence over the file.
#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Common {
    /// JSON file with any of the options below.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Update rule: kla, gdn, deltanet, longhorn, gla, retnet, linear.
    #[arg(long, global = true)]
    pub rule: Option<String>,
    /// Write-coefficient variant: kaczmarz, none, key-norm or learned-scalar.
    #[arg(long, global = true)]
    pub norm: Option<String>,
    /// dual or single.
    #[arg(long, global = true)]
    pub gating: Option<String>,
    /// off, inv-t, inv-sqrt-t or inv-log-t.
    #[arg(long, global = true)]
    pub seq_factor: Option<String>,
    #[arg(long, global = true)]
    pub d_model: Option<usize>,
    #[arg(long, global = true)]
    pub dk: Option<usize>,
    /// Must equal dk · vexpand when both are given.
    #[arg(long, global = true)]
    pub dv: Option<usize>,
    #[arg(long, global = true)]
    pub vexpand: Option<usize>,
    #[arg(long, global = true)]
    pub chunk: Option<usize>,
    #[arg(long, global = true)]
    pub eps: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub len: Option<usize>,
    #[arg(long, global = true)]
    pub samples: Option<usize>,
    /// Report file or artifact directory, depending on the subcommand.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// f64 or f32.
    #[arg(long, global = true)]
    pub precision: Option<String>,
}

macro_rules! overlay {
    ($flags:ident, $file:ident, $($f:ident),*) => {
        $( if $flags.$f.is_none() { $flags.$f = $file.$f; } )*
    };
}

impl Common {
    /// Merges the config file, if any, under the flags.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            let file: Common = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("bad config {}: {e}", path.display())))?;
            overlay!(
                self, file, rule, norm, gating, seq_factor, d_model, dk, dv, vexpand, chunk, eps, seed, len, samples,
                out, precision
            );
        }
        Ok(self)
    }

    pub fn rule_or(&self, default: RuleKind) -> Result<UpdateRule, CliError> {
        let kind = match &self.rule {
            Some(r) => r.parse().map_err(|e: kla_core::recurrence::RecurrenceError| CliError::Config(e.to_string()))?,
            None => default,
        };
        let mut rule = UpdateRule::new(kind);
        if let Some(n) = &self.norm {
            rule.normalization = match n.as_str() {
                "kaczmarz" => Normalization::Kaczmarz,
                "none" => Normalization::None,
                "key-norm" => Normalization::KeyNormOnly,
                "learned-scalar" => Normalization::LearnedScalar(1.0),
                other => return Err(CliError::Config(format!("unknown normalization {other}"))),
            };
        }
        if let Some(g) = &self.gating {
            rule.gating = match g.as_str() {
                "dual" => Gating::Dual,
                "single" => Gating::Single,
                other => return Err(CliError::Config(format!("unknown gating {other}"))),
            };
        }
        if let Some(f) = &self.seq_factor {
            rule.sequence_factor = match f.as_str() {
                "off" => SequenceFactor::Off,
                "inv-t" => SequenceFactor::InvT,
                "inv-sqrt-t" => SequenceFactor::InvSqrtT,
                "inv-log-t" => SequenceFactor::InvLogT,
                other => return Err(CliError::Config(format!("unknown sequence factor {other}"))),
            };
        }
        rule.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(rule)
    }

    /// `(d_k, v_expand, d_v)`, checking that the three agree.
    pub fn dims(&self, default_dk: usize) -> Result<(usize, usize, usize), CliError> {
        let dk = self.dk.unwrap_or(default_dk);
        if dk == 0 {
            return Err(CliError::Config("dk must be positive".into()));
        }
        let (vexpand, dv) = match (self.vexpand, self.dv) {
            (Some(e), Some(v)) if e * dk != v => {
                return Err(CliError::Config(format!("dv = {v} disagrees with dk · vexpand = {}", e * dk)))
            }
            (Some(e), _) => (e, e * dk),
            (None, Some(v)) if v % dk == 0 => (v / dk, v),
            (None, Some(v)) => (0, v),
            (None, None) => (1, dk),
        };
        if dv == 0 {
            return Err(CliError::Config("dv must be positive".into()));
        }
        Ok((dk, vexpand, dv))
    }

    pub fn precision(&self) -> Result<Precision, CliError> {
        match self.precision.as_deref() {
            None | Some("f64") => Ok(Precision::F64),
            Some("f32") => Ok(Precision::F32),
            Some(other) => Err(CliError::Config(format!("unknown precision {other}"))),
        }
    }

    /// Rejects 32-bit precision for commands that only run in 64-bit.
    pub fn require_f64(&self, command: &str) -> Result<(), CliError> {
        match self.precision()? {
            Precision::F64 => Ok(()),
            Precision::F32 => Err(CliError::Config(format!("{command} runs in 64-bit only"))),
        }
    }

    pub fn seed_required(&self, command: &str) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| CliError::Config(format!("{command} requires --seed")))
    }
}
