//! Run configuration, validation and the flat `section.key = value` file format.
//!
//! The file format is a subset of TOML restricted to dotted keys, one per
//! line, e.g. `bdro.tau1 = 1.0`. Sections are `run`, `bdro`, `semiuot` and
//! `server`; their keys match the struct fields below one-to-one.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionKind {
    Pathological,
    Dirichlet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunParams {
    pub num_clients: usize,
    pub participation_fraction: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub num_classes: usize,
    pub num_ood_prompts: usize,
    pub embedding_dim: usize,
    pub context_dim: usize,
    pub temperature: f64,
    pub fusion: f64,
    pub seed: u64,
    pub enable_bos: bool,
    pub enable_goc: bool,
    pub eval_every: usize,
    pub partition: PartitionKind,
    pub classes_per_client: usize,
    pub overlap: bool,
    pub dirichlet_alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BdroConfig {
    pub sigma: f64,
    pub gamma: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub mu: f64,
    pub steps_global: usize,
    pub steps_ood: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemiUotConfig {
    pub lambda: f64,
    pub max_iters: usize,
    pub convergence_tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    pub alpha: f64,
    /// Seemly-OOD count. `None` means `ceil(0.1 * J)` for `J` concatenated prompts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_m: Option<usize>,
    pub percentile: f64,
    pub candidate_pool_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunParams,
    pub bdro: BdroConfig,
    pub semiuot: SemiUotConfig,
    pub server: ServerConfig,
}

impl Default for BdroConfig {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            gamma: 0.001,
            tau1: 1.0,
            tau2: 1.0,
            mu: 1.0,
            steps_global: 1,
            steps_ood: 1,
            inner_lr: 0.1,
            outer_lr: 0.05,
        }
    }
}

impl Default for SemiUotConfig {
    fn default() -> Self {
        Self { lambda: 0.001, max_iters: 2000, convergence_tol: 1e-10 }
    }
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self { alpha: 0.95, top_m: None, percentile: 1.0, candidate_pool_size: 20 }
    }
}

impl Default for RunParams {
    fn default() -> Self {
        Self {
            num_clients: 5,
            participation_fraction: 1.0,
            rounds: 15,
            local_epochs: 2,
            batch_size: 32,
            num_classes: 10,
            num_ood_prompts: 5,
            embedding_dim: 32,
            context_dim: 32,
            temperature: 0.07,
            fusion: 0.5,
            seed: 42,
            enable_bos: true,
            enable_goc: true,
            eval_every: 1,
            partition: PartitionKind::Pathological,
            classes_per_client: 2,
            overlap: false,
            dirichlet_alpha: 0.5,
        }
    }
}

impl Default for RunConfig {
    /// The demo configuration used by the bundled synthetic benchmark.
    fn default() -> Self {
        Self {
            run: RunParams::default(),
            bdro: BdroConfig::default(),
            semiuot: SemiUotConfig::default(),
            server: ServerConfig::default(),
        }
    }
}

fn fail<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

impl RunConfig {
    /// Check every invariant, reporting the first violation.
    pub fn validate(self) -> Result<Self> {
        let r = &self.run;
        if r.num_clients < 1 {
            return fail("run.num_clients must be >= 1");
        }
        if !(r.participation_fraction > 0.0 && r.participation_fraction <= 1.0) {
            return fail("run.participation_fraction out of (0,1]");
        }
        for (name, v) in [
            ("run.rounds", r.rounds),
            ("run.local_epochs", r.local_epochs),
            ("run.batch_size", r.batch_size),
            ("run.num_classes", r.num_classes),
            ("run.num_ood_prompts", r.num_ood_prompts),
            ("run.embedding_dim", r.embedding_dim),
            ("run.context_dim", r.context_dim),
            ("run.eval_every", r.eval_every),
        ] {
            if v < 1 {
                return fail(format!("{name} must be >= 1"));
            }
        }
        if !(r.temperature > 0.0 && r.temperature.is_finite()) {
            return fail("run.temperature must be > 0");
        }
        if !(0.0..=1.0).contains(&r.fusion) {
            return fail("run.fusion out of [0,1]");
        }
        if r.seed > i64::MAX as u64 {
            return fail("run.seed must fit in 63 bits");
        }
        match r.partition {
            PartitionKind::Pathological if r.classes_per_client < 1 => {
                return fail("run.classes_per_client must be >= 1")
            }
            PartitionKind::Dirichlet if !(r.dirichlet_alpha > 0.0) => {
                return fail("run.dirichlet_alpha must be > 0")
            }
            _ => {}
        }

        let b = &self.bdro;
        if !(b.sigma >= 0.0) {
            return fail("bdro.sigma must be >= 0");
        }
        if !(b.gamma >= 0.0) {
            return fail("bdro.gamma must be >= 0");
        }
        for (name, v) in [
            ("bdro.tau1", b.tau1),
            ("bdro.tau2", b.tau2),
            ("bdro.mu", b.mu),
            ("bdro.inner_lr", b.inner_lr),
            ("bdro.outer_lr", b.outer_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be > 0"));
            }
        }

        let s = &self.semiuot;
        if !(s.lambda >= 0.0 && s.lambda.is_finite()) {
            return fail("semiuot.lambda must be >= 0");
        }
        if s.max_iters < 1 {
            return fail("semiuot.max_iters must be >= 1");
        }
        if !(s.convergence_tol > 0.0) {
            return fail("semiuot.convergence_tol must be > 0");
        }

        let v = &self.server;
        if !(0.0..=1.0).contains(&v.alpha) {
            return fail("server.alpha out of [0,1]");
        }
        if let Some(m) = v.top_m {
            if m < 1 || m > r.num_clients * r.num_ood_prompts {
                return fail("server.top_m out of [1, K*U]");
            }
        }
        if !(0.0..=1.0).contains(&v.percentile) {
            return fail("server.percentile out of [0,1]");
        }
        if v.candidate_pool_size < r.num_ood_prompts {
            return fail("server.candidate_pool_size must be >= run.num_ood_prompts");
        }
        Ok(self)
    }

    /// Parse the flat dotted-key format.
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Print in the flat dotted-key format. Floats use the shortest
    /// representation that round-trips.
    pub fn to_flat_string(&self) -> String {
        let mut out = String::new();
        let r = &self.run;
        let partition = match r.partition {
            PartitionKind::Pathological => "pathological",
            PartitionKind::Dirichlet => "dirichlet",
        };
        let lines: Vec<(&str, String)> = vec![
            ("run.num_clients", r.num_clients.to_string()),
            ("run.participation_fraction", float(r.participation_fraction)),
            ("run.rounds", r.rounds.to_string()),
            ("run.local_epochs", r.local_epochs.to_string()),
            ("run.batch_size", r.batch_size.to_string()),
            ("run.num_classes", r.num_classes.to_string()),
            ("run.num_ood_prompts", r.num_ood_prompts.to_string()),
            ("run.embedding_dim", r.embedding_dim.to_string()),
            ("run.context_dim", r.context_dim.to_string()),
            ("run.temperature", float(r.temperature)),
            ("run.fusion", float(r.fusion)),
            ("run.seed", r.seed.to_string()),
            ("run.enable_bos", r.enable_bos.to_string()),
            ("run.enable_goc", r.enable_goc.to_string()),
            ("run.eval_every", r.eval_every.to_string()),
            ("run.partition", format!("\"{partition}\"")),
            ("run.classes_per_client", r.classes_per_client.to_string()),
            ("run.overlap", r.overlap.to_string()),
            ("run.dirichlet_alpha", float(r.dirichlet_alpha)),
            ("bdro.sigma", float(self.bdro.sigma)),
            ("bdro.gamma", float(self.bdro.gamma)),
            ("bdro.tau1", float(self.bdro.tau1)),
            ("bdro.tau2", float(self.bdro.tau2)),
            ("bdro.mu", float(self.bdro.mu)),
            ("bdro.steps_global", self.bdro.steps_global.to_string()),
            ("bdro.steps_ood", self.bdro.steps_ood.to_string()),
            ("bdro.inner_lr", float(self.bdro.inner_lr)),
            ("bdro.outer_lr", float(self.bdro.outer_lr)),
            ("semiuot.lambda", float(self.semiuot.lambda)),
            ("semiuot.max_iters", self.semiuot.max_iters.to_string()),
            ("semiuot.convergence_tol", float(self.semiuot.convergence_tol)),
            ("server.alpha", float(self.server.alpha)),
            ("server.percentile", float(self.server.percentile)),
            ("server.candidate_pool_size", self.server.candidate_pool_size.to_string()),
        ];
        for (k, v) in lines {
            let _ = writeln!(out, "{k} = {v}");
        }
        if let Some(m) = self.server.top_m {
            let _ = writeln!(out, "server.top_m = {m}");
        }
        out
    }
}

// `{:?}` is the shortest round-trip representation and always carries a
// decimal point or exponent, which TOML needs to read the value back as a float.
fn float(v: f64) -> String {
    format!("{v:?}")
}
