//! Round orchestration: staging, parallel local training, server step and
//! evaluation.

use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::client::{local_train, ClientShard, ClientState, McmScorer, Predictor};
use crate::config::{PartitionKind, RunConfig};
use crate::data::{init_ood_prompts, partition_dirichlet, partition_pathological, EmbeddingDataset};
use crate::encoder::FrozenEncoder;
use crate::error::{Error, Result};
use crate::metrics::{auroc, fpr95};
use crate::objective::Sample;
use crate::prompt::{PromptBank, PromptContext, Role};
use crate::rng::derive_rng;
use crate::server::server_round;

/// Scale of the standard-normal prompt initialization.
pub const INIT_SCALE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub acc: f64,
    pub cacc: f64,
    /// `None` when the dataset has no OOD test split.
    pub auroc: Option<f64>,
    pub fpr95: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: usize,
    pub participants: Vec<usize>,
    pub train_loss: f64,
    pub metrics: Option<EvalMetrics>,
    pub duration_secs: f64,
}

impl RoundReport {
    /// Copy with wall-clock timing cleared, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        Self { duration_secs: 0.0, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub reports: Vec<RoundReport>,
    pub global: PromptBank,
    pub ood: PromptBank,
    pub locals: Vec<PromptBank>,
}

impl RunOutcome {
    pub fn final_metrics(&self) -> Option<EvalMetrics> {
        self.reports.iter().rev().find_map(|r| r.metrics)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub threads: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { threads: 1 }
    }
}

/// `ceil(fraction·K)` distinct client ids, sorted.
pub fn sample_participants<R: Rng + ?Sized>(k: usize, fraction: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config("participation fraction out of (0,1]".into()));
    }
    let n = ((fraction * k as f64).ceil() as usize).min(k);
    let mut ids = sample(rng, k, n).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

pub fn encoder_for(cfg: &RunConfig) -> FrozenEncoder {
    FrozenEncoder::random(cfg.run.embedding_dim, cfg.run.context_dim, &mut derive_rng(cfg.run.seed, "encoder"))
}

fn random_context<R: Rng>(d: usize, rng: &mut R) -> Vec<f64> {
    (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            INIT_SCALE * z
        })
        .collect()
}

fn random_id_bank(role: Role, names: &[Vec<f64>], d_ctx: usize, seed: u64, label: &str) -> PromptBank {
    let mut rng = derive_rng(seed, label);
    let prompts = names
        .iter()
        .enumerate()
        .map(|(c, name)| PromptContext::id(role, c, random_context(d_ctx, &mut rng), name.clone()))
        .collect();
    PromptBank::new(role, prompts)
}

fn check_compatible(cfg: &RunConfig, ds: &EmbeddingDataset, enc: &FrozenEncoder) -> Result<()> {
    let r = &cfg.run;
    ds.validate()?;
    if ds.num_classes != r.num_classes {
        return Err(Error::Config(format!("run.num_classes is {} but the dataset has {}", r.num_classes, ds.num_classes)));
    }
    if ds.dim != r.embedding_dim {
        return Err(Error::Config(format!("run.embedding_dim is {} but the dataset has {}", r.embedding_dim, ds.dim)));
    }
    if r.context_dim != ds.dim {
        return Err(Error::Config(format!(
            "run.context_dim must equal the class-name dimension {} (got {})",
            ds.dim, r.context_dim
        )));
    }
    if enc.embed_dim() != r.embedding_dim || enc.context_dim() != r.context_dim {
        return Err(Error::Config("encoder shape does not match run dimensions".into()));
    }
    if ds.candidate_pool.len() < cfg.server.candidate_pool_size {
        return Err(Error::Data(format!(
            "dataset holds {} candidates, server.candidate_pool_size is {}",
            ds.candidate_pool.len(),
            cfg.server.candidate_pool_size
        )));
    }
    Ok(())
}

pub fn build_shards(cfg: &RunConfig, ds: &EmbeddingDataset) -> Result<Vec<ClientShard>> {
    let r = &cfg.run;
    let labels = ds.train_labels();
    let mut rng = derive_rng(r.seed, "partition");
    let parts = match r.partition {
        PartitionKind::Dirichlet => partition_dirichlet(&labels, r.num_clients, r.dirichlet_alpha, &mut rng)?,
        PartitionKind::Pathological => {
            partition_pathological(&labels, r.num_classes, r.num_clients, r.classes_per_client, r.overlap, &mut rng)?
        }
    };
    parts
        .into_iter()
        .enumerate()
        .map(|(k, idx)| {
            let samples: Vec<Sample> = idx.iter().map(|&i| ds.id_train[i].clone()).collect();
            ClientShard::new(k, samples, r.num_classes)
        })
        .collect()
}

/// Initial (global, OOD, locals) banks for a run.
pub fn initial_banks(cfg: &RunConfig, ds: &EmbeddingDataset) -> Result<(PromptBank, PromptBank, Vec<PromptBank>)> {
    let r = &cfg.run;
    let names = &ds.class_name_embeddings;
    let global = random_id_bank(Role::GlobalId, names, r.context_dim, r.seed, "init/global");
    let locals = (0..r.num_clients)
        .map(|k| random_id_bank(Role::Local, names, r.context_dim, r.seed, &format!("init/local/{k}")))
        .collect();
    let base = random_context(r.context_dim, &mut derive_rng(r.seed, "init/ood"));
    let pool = &ds.candidate_pool[..cfg.server.candidate_pool_size];
    let ood = init_ood_prompts(pool, names, cfg.server.percentile, r.num_ood_prompts, &base)?;
    Ok((global, ood, locals))
}

/// Count-weighted ACC/CACC over each client's own classes, MCM-based
/// detection on the global bank.
pub fn evaluate(
    cfg: &RunConfig,
    ds: &EmbeddingDataset,
    enc: &FrozenEncoder,
    shards: &[ClientShard],
    locals: &[PromptBank],
    global: &PromptBank,
) -> Result<EvalMetrics> {
    let (tau, rho) = (cfg.run.temperature, cfg.run.fusion);
    let (mut hit, mut hit_c, mut n, mut n_c) = (0usize, 0usize, 0usize, 0usize);
    for (shard, local) in shards.iter().zip(locals) {
        let pred = Predictor::new(local, global, enc, tau, rho)?;
        for s in ds.id_test.iter().filter(|s| shard.holds_class(s.label)) {
            n += 1;
            hit += usize::from(pred.predict(&s.x)? == s.label);
        }
        for s in ds.idc_test.iter().filter(|s| shard.holds_class(s.label)) {
            n_c += 1;
            hit_c += usize::from(pred.predict(&s.x)? == s.label);
        }
    }
    if n == 0 || n_c == 0 {
        return Err(Error::Data("no test samples fall in any client's classes".into()));
    }
    let (auroc_v, fpr_v) = if ds.ood_test.is_empty() || ds.id_test.is_empty() {
        (None, None)
    } else {
        let mcm = McmScorer::new(global, enc, tau)?;
        let id: Vec<f64> = ds.id_test.iter().map(|s| mcm.score(&s.x)).collect::<Result<_>>()?;
        let ood: Vec<f64> = ds.ood_test.iter().map(|x| mcm.score(x)).collect::<Result<_>>()?;
        (Some(auroc(&id, &ood)?), Some(fpr95(&id, &ood)?))
    };
    Ok(EvalMetrics { acc: hit as f64 / n as f64, cacc: hit_c as f64 / n_c as f64, auroc: auroc_v, fpr95: fpr_v })
}

/// Run all rounds. `on_round` sees each report as soon as it is final.
pub fn run(
    cfg: &RunConfig,
    ds: &EmbeddingDataset,
    enc: &FrozenEncoder,
    opts: RunOptions,
    mut on_round: impl FnMut(&RoundReport),
) -> Result<RunOutcome> {
    // zero rounds is accepted here as a no-op run
    let mut checked = cfg.clone();
    checked.run.rounds = checked.run.rounds.max(1);
    checked.validate()?;
    let cfg = cfg.clone();
    check_compatible(&cfg, ds, enc)?;
    let r = &cfg.run;
    let shards = build_shards(&cfg, ds)?;
    let (mut global, mut ood, locals) = initial_banks(&cfg, ds)?;
    let mut states: Vec<ClientState> = locals.into_iter().map(ClientState::new).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let mut reports = Vec::with_capacity(r.rounds);
    for t in 0..r.rounds {
        let start = Instant::now();
        let participants = sample_participants(r.num_clients, r.participation_fraction, &mut derive_rng(r.seed, &format!("round/{t}/participants")))?;
        for &k in &participants {
            states[k].stage(global.clone(), ood.clone());
        }
        let cfg_ref = &cfg;
        let results: Vec<Result<(PromptBank, PromptBank, Option<f64>)>> = pool.install(|| {
            states
                .par_iter_mut()
                .zip(shards.par_iter())
                .enumerate()
                .filter(|(k, _)| participants.binary_search(k).is_ok())
                .map(|(k, (state, shard))| {
                    let mut rng = derive_rng(cfg_ref.run.seed, &format!("round/{t}/client/{k}"));
                    let (g, o, stats) = local_train(state, shard, enc, cfg_ref, &mut rng)?;
                    Ok((g, o, stats.mean_loss()))
                })
                .collect()
        });
        let mut globals = Vec::with_capacity(participants.len());
        let mut oods = Vec::with_capacity(participants.len());
        let mut losses = Vec::new();
        for res in results {
            let (g, o, l) = res?;
            globals.push(g);
            oods.push(o);
            losses.extend(l);
        }
        let counts: Vec<Vec<usize>> = participants.iter().map(|&k| shards[k].class_counts.clone()).collect();
        let outcome = server_round(&globals, &oods, &counts, &global, &cfg)?;
        global = outcome.new_global;
        ood = outcome.new_ood;

        let train_loss = if losses.is_empty() { 0.0 } else { losses.iter().sum::<f64>() / losses.len() as f64 };
        let metrics = if (t + 1) % r.eval_every == 0 || t + 1 == r.rounds {
            let locals: Vec<PromptBank> = states.iter().map(|s| s.local_bank.clone()).collect();
            Some(evaluate(&cfg, ds, enc, &shards, &locals, &global)?)
        } else {
            None
        };
        let report = RoundReport { round: t, participants, train_loss, metrics, duration_secs: start.elapsed().as_secs_f64() };
        on_round(&report);
        reports.push(report);
    }
    Ok(RunOutcome { reports, global, ood, locals: states.into_iter().map(|s| s.local_bank).collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticSpec};

    fn small() -> (RunConfig, EmbeddingDataset) {
        let mut cfg = RunConfig::default();
        cfg.run.num_classes = 4;
        cfg.run.num_clients = 2;
        cfg.run.rounds = 2;
        cfg.run.embedding_dim = 8;
        cfg.run.context_dim = 8;
        cfg.run.num_ood_prompts = 2;
        cfg.run.batch_size = 8;
        cfg.run.local_epochs = 1;
        cfg.server.candidate_pool_size = 6;
        let spec = SyntheticSpec {
            classes: 4,
            ood_classes: 2,
            dim: 8,
            train_per_class: 10,
            test_per_class: 6,
            ood_per_class: 6,
            shift_magnitude: 0.3,
            pool_size: 6,
        };
        let ds = gen_synthetic(&spec, &mut derive_rng(1, "ds")).unwrap();
        (cfg, ds)
    }

    #[test]
    fn participant_sampling() {
        let mut rng = derive_rng(1, "p");
        assert_eq!(sample_participants(7, 1.0, &mut rng).unwrap(), (0..7).collect::<Vec<_>>());
        let ten = sample_participants(100, 0.1, &mut rng).unwrap();
        assert_eq!(ten.len(), 10);
        assert!(ten.windows(2).all(|w| w[0] < w[1]));
        let a = sample_participants(50, 0.3, &mut derive_rng(5, "p")).unwrap();
        assert_eq!(a, sample_participants(50, 0.3, &mut derive_rng(5, "p")).unwrap());
        assert!(sample_participants(5, 0.0, &mut rng).is_err());
    }

    #[test]
    fn zero_rounds_returns_initialization() {
        let (mut cfg, ds) = small();
        cfg.run.rounds = 0;
        let enc = encoder_for(&cfg);
        let out = run(&cfg, &ds, &enc, RunOptions::default(), |_| {}).unwrap();
        let (g, o, l) = initial_banks(&cfg, &ds).unwrap();
        assert!(out.reports.is_empty());
        assert_eq!((out.global, out.ood, out.locals), (g, o, l));
    }

    #[test]
    fn runs_are_reproducible_across_threads() {
        let (cfg, ds) = small();
        let enc = encoder_for(&cfg);
        let a = run(&cfg, &ds, &enc, RunOptions { threads: 1 }, |_| {}).unwrap();
        let b = run(&cfg, &ds, &enc, RunOptions { threads: 3 }, |_| {}).unwrap();
        assert_eq!(a.reports.len(), 2);
        let strip = |o: &RunOutcome| o.reports.iter().map(RoundReport::without_timing).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
        assert_eq!((a.global, a.ood, a.locals), (b.global, b.ood, b.locals));
        for m in a.reports.iter().filter_map(|r| r.metrics) {
            for v in [m.acc, m.cacc, m.auroc.unwrap(), m.fpr95.unwrap()] {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn absent_clients_keep_local_bank() {
        let (mut cfg, ds) = small();
        cfg.run.num_clients = 4;
        cfg.run.participation_fraction = 0.25;
        cfg.run.rounds = 1;
        cfg.run.partition = PartitionKind::Dirichlet;
        let enc = encoder_for(&cfg);
        let out = run(&cfg, &ds, &enc, RunOptions::default(), |_| {}).unwrap();
        let (_, _, init) = initial_banks(&cfg, &ds).unwrap();
        let p = &out.reports[0].participants;
        assert_eq!(p.len(), 1);
        for (k, (after, before)) in out.locals.iter().zip(&init).enumerate() {
            assert_eq!(after == before, !p.contains(&k), "client {k}");
        }
    }

    #[test]
    fn eval_stride() {
        let (mut cfg, ds) = small();
        cfg.run.rounds = 3;
        cfg.run.eval_every = 2;
        let enc = encoder_for(&cfg);
        let mut seen = 0;
        let out = run(&cfg, &ds, &enc, RunOptions::default(), |_| seen += 1).unwrap();
        assert_eq!(seen, 3);
        let evald: Vec<bool> = out.reports.iter().map(|r| r.metrics.is_some()).collect();
        assert_eq!(evald, vec![false, true, true]);
    }

    #[test]
    fn mismatched_dims_rejected() {
        let (mut cfg, ds) = small();
        cfg.run.context_dim = 4;
        let enc = encoder_for(&cfg);
        assert!(run(&cfg, &ds, &enc, RunOptions::default(), |_| {}).is_err());
    }
}
