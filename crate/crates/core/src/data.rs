//! Synthetic organ/disease VQA data, answer vocabulary, and JSONL I/O.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoders::ImageGrid;
use crate::error::{Error, Result};
use crate::prior::{KnowledgeGraph, Node, NodeKind};

pub const YES: &str = "yes";
pub const NO: &str = "no";

const ORGANS: [&str; 8] = ["liver", "lung", "kidney", "heart", "brain", "spleen", "stomach", "colon"];
const DISEASES: [&str; 16] = [
    "cyst", "tumor", "nodule", "edema", "fracture", "effusion", "abscess", "lesion", "polyp", "stone",
    "hemorrhage", "infarct", "calcification", "atrophy", "fibrosis", "pneumonia",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QType {
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QASample {
    pub image: ImageGrid,
    pub question: String,
    pub answer: String,
    pub qtype: QType,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    image: Vec<Vec<f64>>,
    question: String,
    answer: String,
    qtype: QType,
}

/// Ordered set of answer strings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct AnswerVocabulary {
    answers: Vec<String>,
}

impl AnswerVocabulary {
    pub fn new(answers: Vec<String>) -> Result<Self> {
        if answers.is_empty() {
            return Err(Error::contract("empty answer vocabulary"));
        }
        let mut seen = HashSet::new();
        for a in &answers {
            if a.split_whitespace().next().is_none() {
                return Err(Error::contract("blank answer string"));
            }
            if !seen.insert(a.as_str()) {
                return Err(Error::contract(format!("duplicate answer {a:?}")));
            }
        }
        Ok(Self { answers })
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn index_of(&self, answer: &str) -> Option<usize> {
        self.answers.iter().position(|a| a == answer)
    }

    pub fn get(&self, i: usize) -> &str {
        &self.answers[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.answers.iter().map(String::as_str)
    }
}

impl TryFrom<Vec<String>> for AnswerVocabulary {
    type Error = Error;

    fn try_from(v: Vec<String>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<AnswerVocabulary> for Vec<String> {
    fn from(v: AnswerVocabulary) -> Self {
        v.answers
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub organs: usize,
    pub diseases: usize,
    pub seed: u64,
    pub image_size: usize,
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_train: 512,
            n_val: 128,
            n_test: 128,
            organs: 4,
            diseases: 8,
            seed: 7,
            image_size: 32,
            noise: 0.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Spec(m));
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return fail(format!(
                "split sizes {}/{}/{} must all be at least 1",
                self.n_train, self.n_val, self.n_test
            ));
        }
        if self.organs == 0 {
            return fail("need at least one organ".into());
        }
        if self.diseases < self.organs {
            return fail(format!(
                "{} diseases cannot cover {} organs",
                self.diseases, self.organs
            ));
        }
        if self.image_size < 8 || self.image_size % 4 != 0 {
            return fail(format!("image size {} must be a multiple of 4, at least 8", self.image_size));
        }
        if !(0.0..=0.2).contains(&self.noise) {
            return fail(format!("noise {} outside [0, 0.2]", self.noise));
        }
        Ok(())
    }

    pub fn organ_names(&self) -> Vec<String> {
        names(&ORGANS, "organ", self.organs)
    }

    pub fn disease_names(&self) -> Vec<String> {
        names(&DISEASES, "disease", self.diseases)
    }

    /// Nodes are organs then diseases. Disease `j` affects organ `j mod O`,
    /// and the first `O` diseases also affect organ `(j + 1) mod O`.
    pub fn graph(&self) -> Result<KnowledgeGraph> {
        self.validate()?;
        let o = self.organs;
        let mut nodes: Vec<Node> = self
            .organ_names()
            .into_iter()
            .map(|name| Node {
                name,
                kind: NodeKind::Organ,
            })
            .collect();
        nodes.extend(self.disease_names().into_iter().map(|name| Node {
            name,
            kind: NodeKind::Disease,
        }));
        let mut edges = Vec::new();
        for j in 0..self.diseases {
            edges.push([j % o, o + j]);
            if j < o && (j + 1) % o != j % o {
                edges.push([(j + 1) % o, o + j]);
            }
        }
        KnowledgeGraph::from_edges(nodes, &edges)
    }

    pub fn vocabulary(&self) -> Result<AnswerVocabulary> {
        let mut v = vec![YES.to_string(), NO.to_string()];
        v.extend(self.organ_names());
        v.extend(self.disease_names());
        AnswerVocabulary::new(v)
    }
}

fn names(base: &[&str], prefix: &str, n: usize) -> Vec<String> {
    (0..n)
        .map(|i| base.get(i).map_or_else(|| format!("{prefix}{i}"), |s| s.to_string()))
        .collect()
}

/// What an image depicts before noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ImageParams {
    pub organ: usize,
    pub disease: usize,
    pub dx: usize,
    pub dy: usize,
}

/// Off-cell level of every disease texture.
pub const TEXTURE_LOW: f64 = 0.3;

/// Organ picks the quadrant and blob shape, disease the texture and on-cell
/// intensity; `dx`/`dy` jitter the blob inside its quadrant. Textures are
/// anchored to the image grid, so they do not move with the jitter.
pub fn render(p: ImageParams, spec: &SyntheticSpec, noise_rng: &mut impl Rng) -> Result<ImageGrid> {
    let size = spec.image_size;
    let half = size / 2;
    let blob = size / 4;
    let quadrant = p.organ % 4;
    let shape = (p.organ + p.organ / 4) % 4;
    let (oy, ox) = ((quadrant / 2) * half + p.dy, (quadrant % 2) * half + p.dx);
    let texture = p.disease % 4;
    let levels = spec.diseases.div_ceil(4);
    let intensity = TEXTURE_LOW + (1.0 - TEXTURE_LOW) * ((p.disease / 4 + 1) as f64) / levels as f64;

    let mut px = vec![0.0; size * size];
    let c = (blob as f64 - 1.0) / 2.0;
    for r in 0..blob {
        for k in 0..blob {
            let (fr, fk) = (r as f64 - c, k as f64 - c);
            let inside = match shape {
                0 => true,
                1 => fr * fr + fk * fk <= c * c + 0.5,
                2 => fr.abs() <= blob as f64 / 6.0 || fk.abs() <= blob as f64 / 6.0,
                _ => r == 0 || k == 0 || r == blob - 1 || k == blob - 1,
            };
            if inside {
                let (y, x) = (oy + r, ox + k);
                let on = match texture {
                    0 => (y + x) % 2 == 0,
                    1 => y % 2 == 0,
                    2 => x % 2 == 0,
                    _ => (y + 2 * x) % 4 < 2,
                };
                px[y * size + x] = if on { intensity } else { TEXTURE_LOW };
            }
        }
    }
    if spec.noise > 0.0 {
        let n = Normal::new(0.0, spec.noise).map_err(|e| Error::Spec(e.to_string()))?;
        for v in &mut px {
            *v = (*v + n.sample(noise_rng)).clamp(0.0, 1.0);
        }
    }
    ImageGrid::new(size, size, px)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<QASample>,
    pub val: Vec<QASample>,
    pub test: Vec<QASample>,
    pub vocab: AnswerVocabulary,
    pub graph: KnowledgeGraph,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[QASample]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::config(format!("unknown split {other:?}"))),
        }
    }

    pub fn all_samples(&self) -> impl Iterator<Item = &QASample> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

/// Generated splits plus the image tuples behind each sample.
#[derive(Debug, Clone)]
pub struct Generated {
    pub dataset: Dataset,
    pub params: [Vec<ImageParams>; 3],
}

pub fn generate(spec: &SyntheticSpec) -> Result<Generated> {
    spec.validate()?;
    let graph = spec.graph()?;
    let vocab = spec.vocabulary()?;
    let (organs, diseases) = (spec.organ_names(), spec.disease_names());
    let o = spec.organs;
    let jitter = spec.image_size / 4;
    // Three offsets per axis: images repeat within a split under different questions.
    let step = (spec.image_size / 8).max(1);

    let mut tuples = Vec::new();
    for organ in 0..o {
        for disease in 0..spec.diseases {
            if !graph.adjacent(organ, o + disease) {
                continue;
            }
            for dy in (0..=jitter).step_by(step) {
                for dx in (0..=jitter).step_by(step) {
                    tuples.push(ImageParams { organ, disease, dx, dy });
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    tuples.shuffle(&mut rng);

    let sizes = [spec.n_train, spec.n_val, spec.n_test];
    let total: usize = sizes.iter().sum();
    let pools = partition(&tuples, &sizes, total)?;

    let mut out: [Vec<QASample>; 3] = Default::default();
    let mut used: [Vec<ImageParams>; 3] = Default::default();
    for (split, (&n, pool)) in sizes.iter().zip(&pools).enumerate() {
        let mut closed_yes = true;
        for i in 0..n {
            let p = pool[i % pool.len()];
            let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ ((split as u64) << 48) ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let image = render(p, spec, &mut noise_rng)?;
            let template = rng.random_range(0..4);
            let (question, answer, qtype) = match template {
                0 => ("what organ is shown".to_string(), organs[p.organ].clone(), QType::Open),
                1 => ("what disease is present".to_string(), diseases[p.disease].clone(), QType::Open),
                _ => {
                    let (names, truth) = if template == 2 { (&organs, p.organ) } else { (&diseases, p.disease) };
                    let asked = if closed_yes || names.len() == 1 {
                        truth
                    } else {
                        let k = rng.random_range(0..names.len() - 1);
                        if k >= truth { k + 1 } else { k }
                    };
                    let kind = if template == 2 { "organ" } else { "disease" };
                    let answer = if asked == truth { YES } else { NO };
                    closed_yes = !closed_yes;
                    (format!("is the {kind} {}", names[asked]), answer.to_string(), QType::Closed)
                }
            };
            debug_assert!(graph.adjacent(p.organ, o + p.disease));
            out[split].push(QASample {
                image,
                question,
                answer,
                qtype,
            });
            used[split].push(p);
        }
    }
    let [train, val, test] = out;
    Ok(Generated {
        dataset: Dataset {
            train,
            val,
            test,
            vocab,
            graph,
        },
        params: used,
    })
}

/// Splits `tuples` into disjoint pools sized in proportion to `sizes`.
fn partition(tuples: &[ImageParams], sizes: &[usize; 3], total: usize) -> Result<[Vec<ImageParams>; 3]> {
    let n = tuples.len();
    if n < 3 {
        return Err(Error::Spec(format!("only {n} distinct images for three splits")));
    }
    let mut counts = [0usize; 3];
    if total <= n {
        counts = *sizes;
    } else {
        for (c, &s) in counts.iter_mut().zip(sizes) {
            *c = (s * n / total).max(1);
        }
        let excess = counts.iter().sum::<usize>().saturating_sub(n);
        counts[0] -= excess;
    }
    let (a, rest) = tuples.split_at(counts[0]);
    let (b, rest) = rest.split_at(counts[1]);
    Ok([a.to_vec(), b.to_vec(), rest[..counts[2]].to_vec()])
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

fn to_record(s: &QASample) -> Record {
    Record {
        image: s.image.to_rows(),
        question: s.question.clone(),
        answer: s.answer.clone(),
        qtype: s.qtype,
    }
}

pub fn write_split(path: &Path, samples: &[QASample]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut f, &to_record(s))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Writes `train/val/test.jsonl`, `vocab.json` and `graph.json` into `dir`.
pub fn write(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, samples) in SPLITS.iter().zip([&ds.train, &ds.val, &ds.test]) {
        write_split(&dir.join(format!("{name}.jsonl")), samples)?;
    }
    write_json(&dir.join("vocab.json"), &ds.vocab)?;
    write_json(&dir.join("graph.json"), &ds.graph.to_file())
}

pub fn load_vocab(path: &Path) -> Result<AnswerVocabulary> {
    let text = fs::read_to_string(path)?;
    let raw: Vec<String> = serde_json::from_str(&text).map_err(|e| Error::load(path, e.line(), e.to_string()))?;
    AnswerVocabulary::new(raw).map_err(|e| Error::load(path, 0, e.to_string()))
}

/// Reads one JSONL split, validating each record against `vocab`.
pub fn load(path: &Path, vocab: &AnswerVocabulary) -> Result<Vec<QASample>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::load(path, n, e.to_string()))?;
        out.push(validate_record(rec, vocab).map_err(|e| Error::load(path, n, e.to_string()))?);
    }
    if out.is_empty() {
        return Err(Error::load(path, 0, "no records"));
    }
    Ok(out)
}

fn validate_record(rec: Record, vocab: &AnswerVocabulary) -> Result<QASample> {
    if vocab.index_of(&rec.answer).is_none() {
        return Err(Error::contract(format!("answer {:?} not in vocabulary", rec.answer)));
    }
    if rec.qtype == QType::Closed && rec.answer != YES && rec.answer != NO {
        return Err(Error::contract(format!("closed question with answer {:?}", rec.answer)));
    }
    if rec.question.split_whitespace().next().is_none() {
        return Err(Error::contract("empty question"));
    }
    Ok(QASample {
        image: ImageGrid::from_rows(&rec.image)?,
        question: rec.question,
        answer: rec.answer,
        qtype: rec.qtype,
    })
}

pub fn paths(dir: &Path) -> [PathBuf; 5] {
    [
        dir.join("train.jsonl"),
        dir.join("val.jsonl"),
        dir.join("test.jsonl"),
        dir.join("vocab.json"),
        dir.join("graph.json"),
    ]
}

pub fn load_dir(dir: &Path) -> Result<Dataset> {
    let [train, val, test, vocab, graph] = paths(dir);
    let vocab = load_vocab(&vocab)?;
    Ok(Dataset {
        train: load(&train, &vocab)?,
        val: load(&val, &vocab)?,
        test: load(&test, &vocab)?,
        graph: KnowledgeGraph::load(&graph)?,
        vocab,
    })
}
