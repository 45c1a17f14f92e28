//! Synthetic multi-domain benchmarks.
//!
//! Every domain sees the same class prototypes through its own affine
//! distortion of a shared base map, so `domain_transform_scale` dials the
//! amount of domain shift. The vocabulary simulates a pretrained
//! vision-language model: category-word tokens are a fixed linear image of
//! the class prototypes, domain-word tokens are class-independent.
//!
//! With `style_dim > 0` domain offsets live in a shared low-dimensional style
//! subspace, and each domain word is a random code in that same subspace, so
//! words describe plausible styles without naming any particular domain.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::embedding::{cosine, invert_spd, Embedding, Matrix};
use crate::error::{Result, TdgError};
use crate::rng::RngStream;
use crate::words::DomainWordPool;

/// Prototype pairs must have cosine below this.
pub const PROTOTYPE_MAX_COSINE: f64 = 0.7;
const PROTOTYPE_MAX_TRIES: usize = 10_000;
const PROBE_RIDGE: f64 = 1e-6;

/// Extra damping on the per-domain linear distortion relative to the style
/// offset, so that domains differ mostly along the style subspace.
pub const DISTORTION_GAIN: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSpec {
    pub num_classes: usize,
    pub num_domains: usize,
    pub samples_per_cell: usize,
    pub latent_dim: usize,
    pub raw_dim: usize,
    pub token_dim: usize,
    /// Dimension of the shared text/image feature space.
    pub embed_dim: usize,
    pub domain_transform_scale: f64,
    pub noise_std: f64,
    pub alignment_noise_std: f64,
    /// Rank of the style subspace shared by domain offsets and domain words;
    /// 0 makes both unstructured.
    pub style_dim: usize,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            num_classes: 5,
            num_domains: 4,
            samples_per_cell: 60,
            latent_dim: 8,
            raw_dim: 24,
            token_dim: 32,
            embed_dim: 16,
            domain_transform_scale: 0.5,
            noise_std: 0.3,
            alignment_noise_std: 0.1,
            style_dim: 4,
            seed: 0,
        }
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(TdgError::Spec(m.to_string()));
        if self.num_classes < 2 {
            return err("at least 2 classes are required");
        }
        if self.num_domains < 2 {
            return err("at least 2 domains are required");
        }
        if self.samples_per_cell == 0
            || self.latent_dim == 0
            || self.raw_dim == 0
            || self.token_dim == 0
            || self.embed_dim == 0
        {
            return err("all sizes and dimensions must be at least 1");
        }
        if self.embed_dim > self.token_dim {
            return err("embed_dim must not exceed token_dim");
        }
        if self.latent_dim + self.style_dim > self.raw_dim {
            return err("latent_dim + style_dim must not exceed raw_dim");
        }
        if self.style_dim > self.token_dim {
            return err("style_dim must not exceed token_dim");
        }
        for (name, v) in [
            ("domain_transform_scale", self.domain_transform_scale),
            ("noise_std", self.noise_std),
            ("alignment_noise_std", self.alignment_noise_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(TdgError::Spec(format!("{name} must be a finite non-negative number")));
            }
        }
        Ok(())
    }
}

/// Per-domain affine map from latent space to raw features.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainTransform {
    pub map: Matrix,
    pub bias: Vec<f64>,
}

/// Token embeddings standing in for a pretrained text vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    /// `d_tok × k` map from latent prototypes to token space.
    pub projection: Matrix,
    pub category_tokens: Vec<Embedding>,
    /// `d_tok × style_dim` map from style codes to token space.
    pub style_projection: Option<Matrix>,
    seed: u64,
    token_dim: usize,
}

impl Vocabulary {
    /// Deterministic token for an arbitrary domain word: a Gaussian style
    /// code pushed through the style projection, or plain Gaussian noise
    /// when there is no style subspace.
    pub fn domain_word_token(&self, word: &str) -> Embedding {
        let key = word.trim().to_lowercase();
        let mut rng = RngStream::new(self.seed, format!("domain-word/{key}"));
        match &self.style_projection {
            Some(q) => {
                let code = rng.gaussian_vec(q.cols(), 1.0);
                Embedding::from_raw(q.matvec(&code).expect("style code matches projection"))
            }
            None => Embedding::gaussian(self.token_dim, (1.0 / self.token_dim as f64).sqrt(), &mut rng),
        }
    }

    /// Returns the pool with a token attached to every word.
    pub fn embed_pool(&self, pool: &DomainWordPool) -> Result<DomainWordPool> {
        let tokens = pool.words().iter().map(|w| self.domain_word_token(w)).collect();
        pool.clone().with_token_embeddings(tokens)
    }
}

/// Everything about a benchmark except its samples.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkMeta {
    pub spec: BenchmarkSpec,
    /// Unit-norm class prototypes, one per row.
    pub prototypes: Matrix,
    /// Shared `m × k` base map.
    pub base_map: Matrix,
    /// `m × style_dim` map from style codes to raw features.
    pub style_map: Option<Matrix>,
    pub domains: Vec<DomainTransform>,
    pub vocabulary: Vocabulary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub label: usize,
    pub domain: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiDomainDataset {
    pub meta: BenchmarkMeta,
    pub samples: Vec<Sample>,
}

/// Read access to samples. The training harness only touches data through
/// this trait, which lets tests count which domains were read.
pub trait SampleStore {
    fn meta(&self) -> &BenchmarkMeta;
    fn sample(&self, index: usize) -> &Sample;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleStore for MultiDomainDataset {
    fn meta(&self) -> &BenchmarkMeta {
        &self.meta
    }

    fn sample(&self, index: usize) -> &Sample {
        &self.samples[index]
    }

    fn len(&self) -> usize {
        self.samples.len()
    }
}

impl MultiDomainDataset {
    pub fn spec(&self) -> &BenchmarkSpec {
        &self.meta.spec
    }

    pub fn num_domains(&self) -> usize {
        self.meta.spec.num_domains
    }

    pub fn num_classes(&self) -> usize {
        self.meta.spec.num_classes
    }

    pub fn domain_indices(&self, domain: usize) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.domain == domain)
            .map(|(i, _)| i)
            .collect()
    }

    fn check_domain(&self, domain: usize) -> Result<()> {
        if domain < self.num_domains() {
            Ok(())
        } else {
            Err(TdgError::Index {
                index: domain,
                len: self.num_domains(),
            })
        }
    }
}

fn draw_prototypes(spec: &BenchmarkSpec, rng: &mut RngStream) -> Result<Matrix> {
    let k = spec.latent_dim;
    let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(spec.num_classes);
    let mut tries = 0;
    while accepted.len() < spec.num_classes {
        tries += 1;
        if tries > PROTOTYPE_MAX_TRIES {
            return Err(TdgError::Spec(format!(
                "could not place {} prototypes with pairwise cosine < {PROTOTYPE_MAX_COSINE} in {k} dimensions",
                spec.num_classes
            )));
        }
        let v = rng.gaussian_vec(k, 1.0);
        let Ok(v) = crate::embedding::normalize(&v) else {
            continue;
        };
        let ok = accepted
            .iter()
            .all(|a| cosine(a, &v).map(|c| c < PROTOTYPE_MAX_COSINE).unwrap_or(false));
        if ok {
            accepted.push(v.into_vec());
        }
    }
    Matrix::from_rows(spec.num_classes, k, accepted.concat())
}

/// Draws a full benchmark from its spec; identical specs give identical data.
pub fn generate_benchmark(spec: &BenchmarkSpec) -> Result<MultiDomainDataset> {
    spec.validate()?;
    let root = RngStream::new(spec.seed, "benchmark");
    let (k, m) = (spec.latent_dim, spec.raw_dim);
    let s = spec.domain_transform_scale;

    let prototypes = draw_prototypes(spec, &mut root.derive("prototypes"))?;
    let base_map = Matrix::gaussian(m, k, (1.0 / k as f64).sqrt(), &mut root.derive("base-map"));
    let r = spec.style_dim;
    let style_map = (r > 0)
        .then(|| Matrix::gaussian(m, r, (1.0 / k as f64).sqrt(), &mut root.derive("style-map")));

    let mut domains = Vec::with_capacity(spec.num_domains);
    for d in 0..spec.num_domains {
        let mut rng = root.derive(format!("domain/{d}"));
        // A_d = R_d·P + s·Δ_d with R_d = I + s·S_d and b_d = s·S·β_d (or s·β_d
        // without a style map); every domain collapses onto P when s = 0.
        let mut rotation = Matrix::gaussian(m, m, (1.0 / m as f64).sqrt(), &mut rng);
        for v in rotation.data_mut() {
            *v *= s * DISTORTION_GAIN;
        }
        for i in 0..m {
            rotation.set(i, i, rotation.get(i, i) + 1.0);
        }
        let delta = Matrix::gaussian(m, k, (1.0 / k as f64).sqrt(), &mut rng);
        let mut map = rotation.matmul(&base_map)?;
        map.add_scaled(s * DISTORTION_GAIN, &delta);
        let raw_bias = match &style_map {
            Some(sm) => sm.matvec(&rng.gaussian_vec(r, 1.0))?,
            None => rng.gaussian_vec(m, 1.0),
        };
        let bias = raw_bias.into_iter().map(|v| s * v).collect();
        domains.push(DomainTransform { map, bias });
    }

    let mut vrng = root.derive("vocabulary");
    let projection = Matrix::gaussian(
        spec.token_dim,
        k,
        (1.0 / spec.token_dim as f64).sqrt(),
        &mut vrng,
    );
    let mut category_tokens = Vec::with_capacity(spec.num_classes);
    for c in 0..spec.num_classes {
        let mut t = projection.matvec(prototypes.row(c))?;
        for (ti, n) in t.iter_mut().zip(vrng.gaussian_vec(spec.token_dim, spec.alignment_noise_std)) {
            *ti += n;
        }
        category_tokens.push(Embedding::new(t)?);
    }
    let style_projection = (r > 0).then(|| {
        Matrix::gaussian(
            spec.token_dim,
            r,
            (1.0 / spec.token_dim as f64).sqrt(),
            &mut root.derive("style-projection"),
        )
    });
    let vocabulary = Vocabulary {
        projection,
        category_tokens,
        style_projection,
        seed: spec.seed,
        token_dim: spec.token_dim,
    };

    let mut samples = Vec::with_capacity(spec.num_domains * spec.num_classes * spec.samples_per_cell);
    for (d, tr) in domains.iter().enumerate() {
        for c in 0..spec.num_classes {
            let mut rng = root.derive(format!("cell/{c}/{d}"));
            for _ in 0..spec.samples_per_cell {
                let latent: Vec<f64> = prototypes
                    .row(c)
                    .iter()
                    .zip(rng.gaussian_vec(k, spec.noise_std))
                    .map(|(mu, e)| mu + e)
                    .collect();
                let mut x = tr.map.matvec(&latent)?;
                for ((xi, bi), e) in x.iter_mut().zip(&tr.bias).zip(rng.gaussian_vec(m, spec.noise_std)) {
                    *xi += bi + e;
                }
                samples.push(Sample {
                    x,
                    label: c,
                    domain: d,
                });
            }
        }
    }

    Ok(MultiDomainDataset {
        meta: BenchmarkMeta {
            spec: spec.clone(),
            prototypes,
            base_map,
            style_map,
            domains,
            vocabulary,
        },
        samples,
    })
}

/// Train/validation indices for each source domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub sources: Vec<usize>,
    /// Domains that are not sources; never read during training.
    pub held_out: Vec<usize>,
    pub train: BTreeMap<usize, Vec<usize>>,
    pub val: BTreeMap<usize, Vec<usize>>,
}

impl SplitPlan {
    pub fn train_indices(&self) -> Vec<usize> {
        self.train.values().flatten().copied().collect()
    }

    pub fn val_indices(&self) -> Vec<usize> {
        self.val.values().flatten().copied().collect()
    }
}

/// Shuffles each source domain and holds out 10% (at least one sample) for
/// validation.
pub fn split_train_val(
    ds: &MultiDomainDataset,
    sources: &[usize],
    seed: u64,
) -> Result<SplitPlan> {
    if sources.is_empty() {
        return Err(TdgError::Split("no source domains".into()));
    }
    let mut sorted = sources.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut train = BTreeMap::new();
    let mut val = BTreeMap::new();
    for &d in &sorted {
        ds.check_domain(d)?;
        let mut idx = ds.domain_indices(d);
        if idx.len() < 2 {
            return Err(TdgError::Split(format!(
                "domain {d} has {} samples, need at least 2",
                idx.len()
            )));
        }
        RngStream::new(seed, format!("split/{d}")).shuffle(&mut idx);
        let n_val = (idx.len() / 10).max(1);
        let tr = idx.split_off(n_val);
        val.insert(d, idx);
        train.insert(d, tr);
    }
    let held_out = (0..ds.num_domains()).filter(|d| !sorted.contains(d)).collect();
    Ok(SplitPlan {
        sources: sorted,
        held_out,
        train,
        val,
    })
}

/// `(all domains except target, target)`.
pub fn leave_one_domain_out(ds: &MultiDomainDataset, target: usize) -> Result<(Vec<usize>, usize)> {
    ds.check_domain(target)?;
    Ok(((0..ds.num_domains()).filter(|&d| d != target).collect(), target))
}

/// Accuracy of a ridge least-squares one-vs-rest probe on raw features,
/// fitted on the pooled source training splits and scored on all other
/// domains (or on the sources themselves when nothing is held out).
pub fn separability_probe(ds: &MultiDomainDataset, sources: &[usize]) -> Result<f64> {
    let plan = split_train_val(ds, sources, ds.spec().seed)?;
    let train = plan.train_indices();
    let eval: Vec<usize> = if plan.held_out.is_empty() {
        plan.val_indices()
    } else {
        plan.held_out.iter().flat_map(|&d| ds.domain_indices(d)).collect()
    };

    let m = ds.spec().raw_dim + 1;
    let nc = ds.num_classes();
    let mut gram = Matrix::zeros(m, m);
    let mut rhs = Matrix::zeros(m, nc);
    for &i in &train {
        let s = &ds.samples[i];
        let feat: Vec<f64> = s.x.iter().copied().chain(std::iter::once(1.0)).collect();
        for a in 0..m {
            for b in 0..m {
                gram.set(a, b, gram.get(a, b) + feat[a] * feat[b]);
            }
            rhs.set(a, s.label, rhs.get(a, s.label) + feat[a]);
        }
    }
    let weights = invert_spd(&gram, PROBE_RIDGE)?.matmul(&rhs)?;
    let weights_t = weights.transpose();

    let mut correct = 0usize;
    for &i in &eval {
        let s = &ds.samples[i];
        let feat: Vec<f64> = s.x.iter().copied().chain(std::iter::once(1.0)).collect();
        let scores = weights_t.matvec(&feat)?;
        let mut best = 0;
        for (c, &v) in scores.iter().enumerate() {
            if v > scores[best] {
                best = c;
            }
        }
        if best == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / eval.len() as f64)
}

// ---------------------------------------------------------------------------
// Text export / import

const FORMAT_HEADER: &str = "# tdg synthetic benchmark v1";

fn write_matrix(out: &mut String, name: &str, m: &Matrix) {
    let _ = writeln!(out, "[{name} {}x{}]", m.rows(), m.cols());
    for r in 0..m.rows() {
        write_row(out, m.row(r));
    }
}

fn write_row(out: &mut String, row: &[f64]) {
    let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
    out.push_str(&cells.join(","));
    out.push('\n');
}

impl MultiDomainDataset {
    /// Self-describing text form: a spec block, the generating parameters, the
    /// vocabulary, then one `domain,class,x_0..x_{m-1}` row per sample.
    pub fn to_text(&self) -> Result<String> {
        let mut out = String::new();
        out.push_str(FORMAT_HEADER);
        out.push_str("\n[spec]\n");
        out.push_str(
            &toml::to_string(&self.meta.spec).map_err(|e| TdgError::Parse(e.to_string()))?,
        );
        write_matrix(&mut out, "prototypes", &self.meta.prototypes);
        write_matrix(&mut out, "base_map", &self.meta.base_map);
        if let Some(sm) = &self.meta.style_map {
            write_matrix(&mut out, "style_map", sm);
        }
        for (d, tr) in self.meta.domains.iter().enumerate() {
            write_matrix(&mut out, &format!("domain.{d}.map"), &tr.map);
            let _ = writeln!(out, "[domain.{d}.bias 1x{}]", tr.bias.len());
            write_row(&mut out, &tr.bias);
        }
        write_matrix(&mut out, "vocabulary.projection", &self.meta.vocabulary.projection);
        let cats = &self.meta.vocabulary.category_tokens;
        let _ = writeln!(
            out,
            "[vocabulary.category_tokens {}x{}]",
            cats.len(),
            self.meta.spec.token_dim
        );
        for t in cats {
            write_row(&mut out, t);
        }
        if let Some(q) = &self.meta.vocabulary.style_projection {
            write_matrix(&mut out, "vocabulary.style_projection", q);
        }
        let _ = writeln!(out, "[samples {}]", self.samples.len());
        let mut header = vec!["domain".to_string(), "class".to_string()];
        header.extend((0..self.meta.spec.raw_dim).map(|i| format!("x_{i}")));
        out.push_str(&header.join(","));
        out.push('\n');
        for s in &self.samples {
            let _ = write!(out, "{},{}", s.domain, s.label);
            for v in &s.x {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_text<W: Write>(&self, mut sink: W) -> Result<()> {
        sink.write_all(self.to_text()?.as_bytes())?;
        Ok(())
    }

    pub fn read_text<R: BufRead>(source: R) -> Result<Self> {
        let mut sections: Vec<(String, Vec<String>)> = Vec::new();
        for (n, line) in source.lines().enumerate() {
            let line = line?;
            if n == 0 {
                if line.trim() != FORMAT_HEADER {
                    return Err(TdgError::Parse("missing benchmark header line".into()));
                }
                continue;
            }
            if let Some(h) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                sections.push((h.to_string(), Vec::new()));
            } else if let Some((_, body)) = sections.last_mut() {
                body.push(line);
            } else if !line.trim().is_empty() {
                return Err(TdgError::Parse(format!("line {} is outside any section", n + 1)));
            }
        }
        let mut by_name: BTreeMap<String, (String, Vec<String>)> = BTreeMap::new();
        for (header, body) in sections {
            let mut parts = header.splitn(2, ' ');
            let name = parts.next().unwrap_or_default().to_string();
            let shape = parts.next().unwrap_or_default().to_string();
            by_name.insert(name, (shape, body));
        }
        let mut take = |name: &str| {
            by_name
                .remove(name)
                .ok_or_else(|| TdgError::Parse(format!("missing section [{name}]")))
        };

        let (_, spec_body) = take("spec")?;
        let spec: BenchmarkSpec =
            toml::from_str(&spec_body.join("\n")).map_err(|e| TdgError::Parse(e.to_string()))?;
        spec.validate()?;

        let prototypes = parse_matrix(take("prototypes")?)?;
        let base_map = parse_matrix(take("base_map")?)?;
        let style_map = if spec.style_dim > 0 {
            Some(parse_matrix(take("style_map")?)?)
        } else {
            None
        };
        let mut domains = Vec::with_capacity(spec.num_domains);
        for d in 0..spec.num_domains {
            let map = parse_matrix(take(&format!("domain.{d}.map"))?)?;
            let bias = parse_matrix(take(&format!("domain.{d}.bias"))?)?.data().to_vec();
            domains.push(DomainTransform { map, bias });
        }
        let projection = parse_matrix(take("vocabulary.projection")?)?;
        let cats = parse_matrix(take("vocabulary.category_tokens")?)?;
        let category_tokens = (0..cats.rows())
            .map(|r| Embedding::new(cats.row(r).to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let style_projection = if spec.style_dim > 0 {
            Some(parse_matrix(take("vocabulary.style_projection")?)?)
        } else {
            None
        };

        let (count, rows) = take("samples")?;
        let count: usize = count
            .trim()
            .parse()
            .map_err(|_| TdgError::Parse(format!("bad sample count {count:?}")))?;
        let mut samples = Vec::with_capacity(count);
        for row in rows.iter().skip(1).filter(|r| !r.trim().is_empty()) {
            let mut cells = row.split(',');
            let mut next_usize = |what: &str| -> Result<usize> {
                cells
                    .next()
                    .and_then(|c| c.trim().parse().ok())
                    .ok_or_else(|| TdgError::Parse(format!("bad {what} in sample row {row:?}")))
            };
            let domain = next_usize("domain")?;
            let label = next_usize("class")?;
            let x = cells.map(parse_f64).collect::<Result<Vec<f64>>>()?;
            if x.len() != spec.raw_dim || domain >= spec.num_domains || label >= spec.num_classes {
                return Err(TdgError::Parse(format!("malformed sample row {row:?}")));
            }
            samples.push(Sample { x, label, domain });
        }
        if samples.len() != count {
            return Err(TdgError::Parse(format!(
                "expected {count} samples, found {}",
                samples.len()
            )));
        }

        let vocabulary = Vocabulary {
            projection,
            category_tokens,
            style_projection,
            seed: spec.seed,
            token_dim: spec.token_dim,
        };
        Ok(Self {
            meta: BenchmarkMeta {
                spec,
                prototypes,
                base_map,
                style_map,
                domains,
                vocabulary,
            },
            samples,
        })
    }
}

fn parse_f64(s: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| TdgError::Parse(format!("bad number {s:?}")))?;
    if !v.is_finite() {
        return Err(TdgError::Parse(format!("non-finite number {s:?}")));
    }
    Ok(v)
}

fn parse_matrix((shape, body): (String, Vec<String>)) -> Result<Matrix> {
    let (r, c) = shape
        .trim()
        .split_once('x')
        .ok_or_else(|| TdgError::Parse(format!("bad matrix shape {shape:?}")))?;
    let rows: usize = r.parse().map_err(|_| TdgError::Parse(format!("bad shape {shape:?}")))?;
    let cols: usize = c.parse().map_err(|_| TdgError::Parse(format!("bad shape {shape:?}")))?;
    let mut data = Vec::with_capacity(rows * cols);
    for line in body.iter().filter(|l| !l.trim().is_empty()) {
        for cell in line.split(',') {
            data.push(parse_f64(cell)?);
        }
    }
    Matrix::from_rows(rows, cols, data).map_err(|_| {
        TdgError::Parse(format!("matrix body does not match shape {shape}"))
    })
}
