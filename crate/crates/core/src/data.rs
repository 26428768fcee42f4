//! Synthetic embedding benchmarks, non-IID partitioning, OOD prompt
//! initialization and the `EMBDS` text format.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};
use crate::objective::Sample;
use crate::prompt::{PromptBank, PromptContext, Role};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    pub dim: usize,
    pub num_classes: usize,
    pub ood_classes: usize,
    pub id_train: Vec<Sample>,
    pub id_test: Vec<Sample>,
    pub idc_test: Vec<Sample>,
    pub ood_test: Vec<Vec<f64>>,
    pub class_name_embeddings: Vec<Vec<f64>>,
    pub candidate_pool: Vec<Vec<f64>>,
}

impl EmbeddingDataset {
    pub fn train_labels(&self) -> Vec<usize> {
        self.id_train.iter().map(|s| s.label).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim;
        if self.class_name_embeddings.len() != self.num_classes {
            return Err(Error::Data(format!(
                "expected {} class names, found {}",
                self.num_classes,
                self.class_name_embeddings.len()
            )));
        }
        let samples = self.id_train.iter().chain(&self.id_test).chain(&self.idc_test);
        for s in samples {
            if s.label >= self.num_classes {
                return Err(Error::InvalidLabel(s.label));
            }
            check_vec(&s.x, d)?;
        }
        let vecs = self.ood_test.iter().chain(&self.class_name_embeddings).chain(&self.candidate_pool);
        for v in vecs {
            check_vec(v, d)?;
        }
        Ok(())
    }
}

fn check_vec(v: &[f64], d: usize) -> Result<()> {
    if v.len() != d {
        return Err(Error::Dimension { expected: d, got: v.len() });
    }
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::Data("non-finite embedding value".into()));
    }
    Ok(())
}

/// Shape of a synthetic benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub ood_classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub ood_per_class: usize,
    pub shift_magnitude: f64,
    /// Total candidate pool size; the pool holds one name per OOD class
    /// and random distractors for the rest.
    pub pool_size: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            ood_classes: 5,
            dim: 32,
            train_per_class: 60,
            test_per_class: 40,
            ood_per_class: 40,
            shift_magnitude: 0.5,
            pool_size: 20,
        }
    }
}

pub const SAMPLE_NOISE_STD: f64 = 0.1;
pub const MAX_CENTER_COSINE: f64 = 0.9;

fn gaussian_vec<R: Rng + ?Sized>(d: usize, std: f64, rng: &mut R) -> Vec<f64> {
    (0..d)
    .map(|_| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
    .collect()
}

fn to_unit(v: Vec<f64>) -> Option<Vec<f64>> {
    let n = norm(&v);
    (n > 0.0 && n.is_finite()).then(|| v.into_iter().map(|x| x / n).collect())
}

fn unit_vec<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v = gaussian_vec(d, 1.0, rng);
        if let Some(u) = to_unit(v) {
            return u;
        }
    }
}

fn noisy_unit<R: Rng + ?Sized>(center: &[f64], rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> =
            center.iter().zip(gaussian_vec(center.len(), SAMPLE_NOISE_STD, rng)).map(|(c, n)| c + n).collect();
        if let Some(u) = to_unit(v) {
            return u;
        }
    }
}

pub fn gen_synthetic<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Result<EmbeddingDataset> {
    let SyntheticSpec { classes, ood_classes, dim, .. } = *spec;
    if classes == 0 || dim == 0 || spec.train_per_class == 0 || spec.test_per_class == 0 {
        return Err(Error::Config("synthetic parameters must be positive".into()));
    }
    if !(spec.shift_magnitude >= 0.0 && spec.shift_magnitude.is_finite()) {
        return Err(Error::Config("shift magnitude must be finite and nonnegative".into()));
    }
    if spec.pool_size < ood_classes {
        return Err(Error::Config(format!(
            "candidate pool of {} cannot hold {} OOD class names",
            spec.pool_size, ood_classes
        )));
    }

    // ID and OOD centers share one rejection pass.
    let wanted = classes + ood_classes;
    let budget = 10 * classes * spec.pool_size.max(1);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(wanted);
    let mut draws = 0;
    while centers.len() < wanted {
        if draws >= budget {
            return Err(Error::Data(format!("center rejection sampling failed after {draws} draws")));
        }
        draws += 1;
        let c = unit_vec(dim, rng);
        if centers.iter().all(|o| dot(o, &c) < MAX_CENTER_COSINE) {
            centers.push(c);
        }
    }
    let (id_centers, ood_centers) = centers.split_at(classes);

    let mut id_train = Vec::with_capacity(classes * spec.train_per_class);
    let mut id_test = Vec::with_capacity(classes * spec.test_per_class);
    for (c, center) in id_centers.iter().enumerate() {
        for _ in 0..spec.train_per_class {
            id_train.push(Sample::new(noisy_unit(center, rng), c));
        }
        for _ in 0..spec.test_per_class {
            id_test.push(Sample::new(noisy_unit(center, rng), c));
        }
    }

    let idc_test = if spec.shift_magnitude == 0.0 {
        id_test.clone()
    } else {
        id_test
            .iter()
            .map(|s| {
                let dir = unit_vec(dim, rng);
                let shifted: Vec<f64> =
                    s.x.iter().zip(&dir).map(|(x, u)| x + spec.shift_magnitude * u).collect();
                // antipodal cancellation has probability zero; fall back to the clean sample
                Sample::new(to_unit(shifted).unwrap_or_else(|| s.x.clone()), s.label)
            })
            .collect()
    };

    let mut ood_test = Vec::with_capacity(ood_classes * spec.ood_per_class);
    for center in ood_centers {
        for _ in 0..spec.ood_per_class {
            ood_test.push(noisy_unit(center, rng));
        }
    }

    let mut candidate_pool: Vec<Vec<f64>> = ood_centers.to_vec();
    while candidate_pool.len() < spec.pool_size {
        candidate_pool.push(unit_vec(dim, rng));
    }

    Ok(EmbeddingDataset {
        dim,
        num_classes: classes,
        ood_classes,
        id_train,
        id_test,
        idc_test,
        ood_test,
        class_name_embeddings: id_centers.to_vec(),
        candidate_pool,
    })
}

fn assigned_once(parts: &mut [Vec<usize>]) {
    for p in parts.iter_mut() {
        p.sort_unstable();
    }
}

fn indices_by_class(labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    by_class
}

fn num_classes_of(labels: &[usize]) -> usize {
    labels.iter().max().map_or(0, |m| m + 1)
}

/// Per-class Dirichlet(α·1) allocation of sample indices to `k` clients.
pub fn partition_dirichlet<R: Rng + ?Sized>(
    labels: &[usize],
    k: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config("dirichlet alpha must be positive".into()));
    }
    let mut parts = vec![Vec::new(); k];
    if k == 1 {
        parts[0] = (0..labels.len()).collect();
        return Ok(parts);
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    for mut idx in indices_by_class(labels, num_classes_of(labels)) {
        idx.shuffle(rng);
        let mut w: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = w.iter().sum();
        if total > 0.0 {
            w.iter_mut().for_each(|x| *x /= total);
        } else {
            // every gamma draw underflowed: all mass to one client
            w = vec![0.0; k];
            w[rng.random_range(0..k)] = 1.0;
        }
        let n = idx.len();
        let mut start = 0;
        let mut cum = 0.0;
        for (client, wk) in w.iter().enumerate() {
            cum += wk;
            let end = if client + 1 == k { n } else { ((cum * n as f64).floor() as usize).clamp(start, n) };
            parts[client].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }
    // empty-client repair
    while let Some(empty) = parts.iter().position(|p| p.is_empty()) {
        let largest = (0..k).max_by_key(|&i| (parts[i].len(), std::cmp::Reverse(i))).unwrap_or(0);
        if parts[largest].len() < 2 {
            break;
        }
        let moved = parts[largest].pop().unwrap_or_default();
        parts[empty].push(moved);
    }
    assigned_once(&mut parts);
    Ok(parts)
}

/// Fixed class subsets per client. Disjoint subsets unless `overlap`.
/// Classes nobody drew are handed out so the result stays a partition.
pub fn partition_pathological<R: Rng + ?Sized>(
    labels: &[usize],
    num_classes: usize,
    k: usize,
    classes_per_client: usize,
    overlap: bool,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if k == 0 || classes_per_client == 0 {
        return Err(Error::Config("need at least one client and one class per client".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::InvalidLabel(bad));
    }
    let mut owners: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    let mut perm: Vec<usize> = (0..num_classes).collect();
    if overlap {
        if classes_per_client > num_classes {
            return Err(Error::Config(format!(
                "classes_per_client {classes_per_client} exceeds {num_classes} classes"
            )));
        }
        for client in 0..k {
            perm.shuffle(rng);
            for &c in &perm[..classes_per_client] {
                owners[c].push(client);
            }
        }
        for o in owners.iter_mut().filter(|o| o.is_empty()) {
            o.push(rng.random_range(0..k));
        }
    } else {
        if k * classes_per_client > num_classes {
            return Err(Error::Config(format!(
                "non-overlap needs {k}*{classes_per_client} <= {num_classes} classes"
            )));
        }
        perm.shuffle(rng);
        for (slot, &c) in perm.iter().enumerate() {
            let client = if slot < k * classes_per_client { slot / classes_per_client } else { slot % k };
            owners[c].push(client);
        }
    }

    let mut parts = vec![Vec::new(); k];
    for (c, mut idx) in indices_by_class(labels, num_classes).into_iter().enumerate() {
        idx.shuffle(rng);
        let o = &mut owners[c];
        o.sort_unstable();
        let n = idx.len();
        for (j, &client) in o.iter().enumerate() {
            let lo = j * n / o.len();
            let hi = (j + 1) * n / o.len();
            parts[client].extend_from_slice(&idx[lo..hi]);
        }
    }
    assigned_once(&mut parts);
    Ok(parts)
}

/// Mean Shannon entropy (nats) of each client's label histogram.
pub fn mean_label_entropy(parts: &[Vec<usize>], labels: &[usize], num_classes: usize) -> f64 {
    let mut total = 0.0;
    let mut counted = 0;
    for p in parts.iter().filter(|p| !p.is_empty()) {
        let mut hist = vec![0usize; num_classes];
        for &i in p {
            hist[labels[i]] += 1;
        }
        let n = p.len() as f64;
        total -= hist.iter().filter(|&&h| h > 0).map(|&h| (h as f64 / n) * (h as f64 / n).ln()).sum::<f64>();
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

/// Linear-interpolation percentile, `eta` in [0, 1].
pub fn percentile(values: &[f64], eta: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = eta * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Negative-label distance of each candidate: the η-percentile of its
/// negative cosines to the ID class names.
pub fn candidate_distances(pool: &[Vec<f64>], id_names: &[Vec<f64>], eta: f64) -> Result<Vec<f64>> {
    if id_names.is_empty() {
        return Err(Error::Data("no ID class names".into()));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Config("percentile must lie in [0,1]".into()));
    }
    pool.iter()
        .map(|cand| {
            let neg: Vec<f64> = id_names.iter().map(|e| cosine(cand, e).map(|c| -c)).collect::<Result<_>>()?;
            Ok(percentile(&neg, eta))
        })
        .collect()
}

/// Indices of the `u` candidates farthest from the ID classes, best first.
pub fn select_ood_candidates(pool: &[Vec<f64>], id_names: &[Vec<f64>], eta: f64, u: usize) -> Result<Vec<usize>> {
    if pool.len() < u {
        return Err(Error::Bank(format!("candidate pool of {} is smaller than U = {u}", pool.len())));
    }
    let d = candidate_distances(pool, id_names, eta)?;
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| d[b].total_cmp(&d[a]).then(a.cmp(&b)));
    order.truncate(u);
    Ok(order)
}

pub fn init_ood_prompts(
    candidate_pool: &[Vec<f64>],
    id_class_name_embeddings: &[Vec<f64>],
    eta: f64,
    u: usize,
    base_context: &[f64],
) -> Result<PromptBank> {
    let picked = select_ood_candidates(candidate_pool, id_class_name_embeddings, eta, u)?;
    let prompts = picked
        .into_iter()
        .map(|i| PromptContext::ood(base_context.to_vec(), candidate_pool[i].clone()))
        .collect();
    Ok(PromptBank::new(Role::Ood, prompts))
}

pub const EMBDS_HEADER: &str = "EMBDS v1";

fn push_record(out: &mut String, split: &str, label: i64, v: &[f64]) {
    let _ = write!(out, "{split} {label} ");
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{x:.16e}");
    }
    out.push('\n');
}

pub fn dataset_to_string(ds: &EmbeddingDataset) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{EMBDS_HEADER}");
    let _ = writeln!(out, "dims {} {} {}", ds.num_classes, ds.ood_classes, ds.dim);
    for (split, set) in [("train", &ds.id_train), ("test", &ds.id_test), ("idc", &ds.idc_test)] {
        for s in set {
            push_record(&mut out, split, s.label as i64, &s.x);
        }
    }
    for v in &ds.ood_test {
        push_record(&mut out, "ood", -1, v);
    }
    for (c, v) in ds.class_name_embeddings.iter().enumerate() {
        push_record(&mut out, "name", c as i64, v);
    }
    for v in &ds.candidate_pool {
        push_record(&mut out, "cand", -1, v);
    }
    out
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &EmbeddingDataset) -> Result<()> {
    std::fs::write(path, dataset_to_string(ds))?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    parse_dataset(&std::fs::read_to_string(path)?)
}

pub fn parse_dataset(text: &str) -> Result<EmbeddingDataset> {
    let err = |line: usize, msg: String| Error::Parse { line, msg };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));

    match lines.next() {
        Some((_, l)) if l.trim() == EMBDS_HEADER => {}
        Some((n, _)) => return Err(err(n, format!("expected header `{EMBDS_HEADER}`"))),
        None => return Err(err(1, "empty file".into())),
    }
    let (n, dims) = lines.next().ok_or_else(|| err(2, "missing dims line".into()))?;
    let f: Vec<&str> = dims.split_whitespace().collect();
    if f.len() != 4 || f[0] != "dims" {
        return Err(err(n, "expected `dims C U_ood d`".into()));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|e| err(n, format!("bad dimension `{s}`: {e}")));
    let (classes, ood_classes, dim) = (num(f[1])?, num(f[2])?, num(f[3])?);

    let mut names: Vec<Option<Vec<f64>>> = vec![None; classes];
    let mut ds = EmbeddingDataset {
        dim,
        num_classes: classes,
        ood_classes,
        id_train: Vec::new(),
        id_test: Vec::new(),
        idc_test: Vec::new(),
        ood_test: Vec::new(),
        class_name_embeddings: Vec::new(),
        candidate_pool: Vec::new(),
    };
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (split, label, values) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some(s), Some(l), Some(v), None) => (s, l, v),
            _ => return Err(err(n, "expected `<split> <label> <values>`".into())),
        };
        let label: i64 = label.parse().map_err(|e| err(n, format!("bad label `{label}`: {e}")))?;
        let x: Vec<f64> = values
            .split(',')
            .map(|t| t.parse::<f64>().map_err(|e| err(n, format!("bad float `{t}`: {e}"))))
            .collect::<Result<_>>()?;
        if x.len() != dim {
            return Err(err(n, format!("expected {dim} values, found {}", x.len())));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(err(n, "non-finite value".into()));
        }
        let class = |label: i64| {
            usize::try_from(label)
                .ok()
                .filter(|&c| c < classes)
                .ok_or_else(|| err(n, format!("label {label} outside [0,{classes})")))
        };
        match split {
            "train" => ds.id_train.push(Sample::new(x, class(label)?)),
            "test" => ds.id_test.push(Sample::new(x, class(label)?)),
            "idc" => ds.idc_test.push(Sample::new(x, class(label)?)),
            "ood" | "cand" => {
                if label != -1 {
                    return Err(err(n, format!("{split} records carry label -1, found {label}")));
                }
                if split == "ood" {
                    ds.ood_test.push(x);
                } else {
                    ds.candidate_pool.push(x);
                }
            }
            "name" => {
                let c = class(label)?;
                if names[c].replace(x).is_some() {
                    return Err(err(n, format!("duplicate name for class {c}")));
                }
            }
            other => return Err(err(n, format!("unknown split `{other}`"))),
        }
    }
    ds.class_name_embeddings = names
        .into_iter()
        .enumerate()
        .map(|(c, v)| v.ok_or_else(|| Error::Data(format!("missing name record for class {c}"))))
        .collect::<Result<_>>()?;
    Ok(ds)
}
