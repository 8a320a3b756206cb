//! Synthetic latent "motions" with controlled frequency content, paired with
//! template sentences, plus frozen toy text and motion feature encoders.
//!
//! Families:
//! - `static`: a constant pose plus small noise.
//! - `walk`: a pose plus a low-frequency gait oscillation.
//! - `stumble`: a walk with a short burst of frame-to-frame alternation.
//! - `transition`: a smooth blend between two poses.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, ensure, Error, Result};
use crate::rng;
use crate::tensor_grad::Tensor;
use crate::text_mamba::TextEmbedding;
use crate::wavelet::dwt_haar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Static,
    Walk,
    Stumble,
    Transition,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Static, Family::Walk, Family::Stumble, Family::Transition];

    pub fn name(self) -> &'static str {
        match self {
            Family::Static => "static",
            Family::Walk => "walk",
            Family::Stumble => "stumble",
            Family::Transition => "transition",
        }
    }

    pub fn templates(self) -> impl Iterator<Item = &'static Template> {
        TEMPLATES.iter().filter(move |t| t.family == self)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| contract(format!("unknown motion family `{s}` (expected static, walk, stumble or transition)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pose {
    Stand,
    Sit,
    Lie,
}

impl Pose {
    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Motion {
    Hold(Pose),
    /// Gait cycles per sequence.
    Gait { cycles: f64 },
    Stumble { cycles: f64 },
    Blend(Pose, Pose),
}

/// A sentence and the motion it describes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Template {
    pub family: Family,
    pub text: &'static str,
    pub motion: Motion,
}

pub const TEMPLATES: [Template; 11] = [
    Template { family: Family::Static, text: "a person stands still", motion: Motion::Hold(Pose::Stand) },
    Template { family: Family::Static, text: "a person sits still on a chair", motion: Motion::Hold(Pose::Sit) },
    Template { family: Family::Static, text: "a person lies still on the ground", motion: Motion::Hold(Pose::Lie) },
    Template { family: Family::Walk, text: "a person walks slowly forward", motion: Motion::Gait { cycles: 1.0 } },
    Template { family: Family::Walk, text: "a person walks quickly forward", motion: Motion::Gait { cycles: 2.0 } },
    Template {
        family: Family::Stumble,
        text: "a person stumbles while walking slowly",
        motion: Motion::Stumble { cycles: 1.0 },
    },
    Template {
        family: Family::Stumble,
        text: "a person trips and stumbles while walking quickly",
        motion: Motion::Stumble { cycles: 2.0 },
    },
    Template {
        family: Family::Transition,
        text: "a person sits down from standing",
        motion: Motion::Blend(Pose::Stand, Pose::Sit),
    },
    Template {
        family: Family::Transition,
        text: "a person stands up from sitting",
        motion: Motion::Blend(Pose::Sit, Pose::Stand),
    },
    Template {
        family: Family::Transition,
        text: "a person lies down from standing",
        motion: Motion::Blend(Pose::Stand, Pose::Lie),
    },
    Template {
        family: Family::Transition,
        text: "a person gets up from lying on the ground",
        motion: Motion::Blend(Pose::Lie, Pose::Stand),
    },
];

/// Looks up a template by its exact sentence.
pub fn template_for(text: &str) -> Option<&'static Template> {
    TEMPLATES.iter().find(|t| t.text == text)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Samples per family name.
    pub counts: BTreeMap<String, usize>,
    pub latent_length: usize,
    pub channels: usize,
    /// Standard deviation of the per-frame noise added to every family.
    pub noise_level: f64,
    pub pose_scale: f64,
    pub gait_amplitude: f64,
    pub burst_amplitude: f64,
    /// Frames in a stumble burst.
    pub burst_length: usize,
    /// Frames over which a transition blends.
    pub blend_width: f64,
    /// Seed of the shared poses and gait directions. Corpora generated with
    /// different sample seeds but the same basis share one distribution.
    pub basis_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            counts: Family::ALL.iter().map(|f| (f.name().to_string(), 128)).collect(),
            latent_length: 16,
            channels: 32,
            noise_level: 0.05,
            pose_scale: 0.8,
            gait_amplitude: 0.6,
            burst_amplitude: 0.8,
            burst_length: 4,
            blend_width: 4.0,
            basis_seed: 20_240_607,
        }
    }
}

impl CorpusConfig {
    /// Parsed `(family, count)` pairs in canonical family order.
    pub fn family_counts(&self) -> Result<Vec<(Family, usize)>> {
        let mut out = Vec::new();
        for (name, &count) in &self.counts {
            let family: Family = name.parse()?;
            ensure!(count >= 1, "count for family `{name}` must be at least 1");
            out.push((family, count));
        }
        ensure!(!out.is_empty(), "corpus config lists no families");
        out.sort();
        Ok(out)
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn validate(&self) -> Result<()> {
        self.family_counts()?;
        ensure!(self.latent_length >= 8 && self.latent_length % 2 == 0, "latent_length must be even and >= 8");
        ensure!(self.channels >= 1, "channels must be positive");
        ensure!(self.burst_length >= 1 && self.burst_length + 2 < self.latent_length, "burst_length out of range");
        ensure!(self.blend_width > 0.0, "blend_width must be positive");
        for (name, v) in [
            ("noise_level", self.noise_level),
            ("pose_scale", self.pose_scale),
            ("gait_amplitude", self.gait_amplitude),
            ("burst_amplitude", self.burst_amplitude),
        ] {
            ensure!(v >= 0.0 && v.is_finite(), "{name} must be finite and >= 0");
        }
        Ok(())
    }
}

/// Shared geometry of a corpus: poses, gait directions and the burst pattern.
#[derive(Clone, Debug, PartialEq)]
struct Basis {
    poses: [Vec<f64>; 3],
    gait_sin: Vec<f64>,
    gait_cos: Vec<f64>,
    burst: Vec<f64>,
}

impl Basis {
    fn new(cfg: &CorpusConfig) -> Self {
        let c = cfg.channels;
        let mut r = rng::stream(cfg.basis_seed, "motion-basis");
        let mut draw = |scale: f64| -> Vec<f64> { (0..c).map(|_| scale * rng::standard_normal(&mut r)).collect() };
        let poses = [draw(cfg.pose_scale), draw(cfg.pose_scale), draw(cfg.pose_scale)];
        let gait_sin = draw(cfg.gait_amplitude);
        let gait_cos = draw(cfg.gait_amplitude);
        let burst = draw(cfg.burst_amplitude);
        Self { poses, gait_sin, gait_cos, burst }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionSample {
    /// `L × C`.
    pub sequence: Tensor,
    pub text: String,
    pub class_id: Family,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub seed: u64,
    pub samples: Vec<MotionSample>,
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

fn render(template: &Template, basis: &Basis, cfg: &CorpusConfig, r: &mut impl Rng) -> Tensor {
    let (l, c) = (cfg.latent_length, cfg.channels);
    let mut x = vec![0.0; l * c];
    let gait = |x: &mut [f64], cycles: f64, r: &mut dyn rand::RngCore| {
        let phase = r.random_range(0.0..std::f64::consts::TAU);
        let amp = r.random_range(0.8..1.2);
        for t in 0..l {
            let arg = std::f64::consts::TAU * cycles * t as f64 / l as f64 + phase;
            let (s, co) = arg.sin_cos();
            for ch in 0..c {
                x[t * c + ch] += basis.poses[Pose::Stand.index()][ch]
                    + amp * (basis.gait_sin[ch] * s + basis.gait_cos[ch] * co);
            }
        }
    };
    match template.motion {
        Motion::Hold(p) => {
            for t in 0..l {
                x[t * c..(t + 1) * c].copy_from_slice(&basis.poses[p.index()]);
            }
        }
        Motion::Gait { cycles } => gait(&mut x, cycles, r),
        Motion::Stumble { cycles } => {
            gait(&mut x, cycles, r);
            let onset = r.random_range(1..l - cfg.burst_length);
            let strength = r.random_range(0.8..1.2);
            for t in onset..onset + cfg.burst_length {
                let sign = if t % 2 == 0 { 1.0 } else { -1.0 };
                for ch in 0..c {
                    x[t * c + ch] += sign * strength * basis.burst[ch];
                }
            }
        }
        Motion::Blend(from, to) => {
            let centre = r.random_range(0.35..0.65) * l as f64;
            for t in 0..l {
                let s = smoothstep((t as f64 - centre) / cfg.blend_width + 0.5);
                for ch in 0..c {
                    x[t * c + ch] = (1.0 - s) * basis.poses[from.index()][ch] + s * basis.poses[to.index()][ch];
                }
            }
        }
    }
    for v in x.iter_mut() {
        *v += cfg.noise_level * rng::standard_normal(r);
    }
    Tensor::from_parts(vec![l, c], x)
}

/// Deterministic corpus: families in canonical order, templates round-robin
/// within a family, sample `j` of family `f` seeded from `(seed, f, j)`.
pub fn generate_corpus(config: &CorpusConfig, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let basis = Basis::new(config);
    let mut samples = Vec::with_capacity(config.total());
    for (family, count) in config.family_counts()? {
        let templates: Vec<&Template> = family.templates().collect();
        let family_seed = rng::derive_seed(seed, family.name());
        for j in 0..count {
            let template = templates[j % templates.len()];
            let sample_seed = rng::derive_indexed(family_seed, "sample", j as u64);
            let mut r = rng::stream(sample_seed, "render");
            samples.push(MotionSample {
                sequence: render(template, &basis, config, &mut r),
                text: template.text.to_string(),
                class_id: family,
                seed: sample_seed,
            });
        }
    }
    Ok(Corpus { config: config.clone(), seed, samples })
}

pub const CORPUS_FORMAT: &str = "ftmssm-corpus";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    format: String,
    version: u32,
    seed: u64,
    count: usize,
    config: CorpusConfig,
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    class: Family,
    seed: u64,
    text: String,
    sequence: Vec<f64>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Line-delimited JSON: a header line, then one record per sample with the
    /// sequence flattened row-major.
    pub fn to_jsonl(&self) -> Result<String> {
        let header = CorpusHeader {
            format: CORPUS_FORMAT.to_string(),
            version: CORPUS_VERSION,
            seed: self.seed,
            count: self.samples.len(),
            config: self.config.clone(),
        };
        let mut out = serde_json::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
        out.push('\n');
        for s in &self.samples {
            let rec = SampleRecord { class: s.class_id, seed: s.seed, text: s.text.clone(), sequence: s.sequence.data().to_vec() };
            out.push_str(&serde_json::to_string(&rec).map_err(|e| Error::Format(e.to_string()))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: CorpusHeader = serde_json::from_str(lines.next().ok_or_else(|| Error::Format("empty corpus file".into()))?)
            .map_err(|e| Error::Format(format!("corpus header: {e}")))?;
        if header.format != CORPUS_FORMAT || header.version != CORPUS_VERSION {
            return Err(Error::Format(format!(
                "corpus format {} v{}, expected {CORPUS_FORMAT} v{CORPUS_VERSION}",
                header.format, header.version
            )));
        }
        let (l, c) = (header.config.latent_length, header.config.channels);
        let mut samples = Vec::with_capacity(header.count);
        for (i, line) in lines.enumerate() {
            let rec: SampleRecord =
                serde_json::from_str(line).map_err(|e| Error::Format(format!("corpus record {i}: {e}")))?;
            let sequence = Tensor::new(vec![l, c], rec.sequence)
                .map_err(|e| Error::Format(format!("corpus record {i}: {e}")))?;
            samples.push(MotionSample { sequence, text: rec.text, class_id: rec.class, seed: rec.seed });
        }
        if samples.len() != header.count {
            return Err(Error::Format(format!("header announces {} records, found {}", header.count, samples.len())));
        }
        Ok(Self { config: header.config, seed: header.seed, samples })
    }
}

/// Fraction of the total Haar energy that sits in the high band.
pub fn high_band_fraction(sequence: &Tensor) -> Result<f64> {
    let bands = dwt_haar(sequence)?;
    let (low, high) = (bands.low.sum_sq(), bands.high.sum_sq());
    ensure!(low + high > 0.0, "sequence has zero energy");
    Ok(high / (low + high))
}

pub const TEXT_DIM: usize = 64;

fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase).collect()
}

/// Hashed bag of unigrams and bigrams with FNV signs, L2-normalized.
pub fn encode_text(text: &str, width: usize) -> Result<TextEmbedding> {
    ensure!(width > 0, "embedding width must be positive");
    let toks = tokens(text);
    ensure!(!toks.is_empty(), "text has no tokens: {text:?}");
    let mut v = vec![0.0; width];
    let bigrams = toks.windows(2).map(|w| format!("{} {}", w[0], w[1]));
    for tok in toks.iter().cloned().chain(bigrams) {
        let h = rng::fnv1a(tok.as_bytes());
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[(h % width as u64) as usize] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    ensure!(norm > 0.0, "text hashes to the zero vector: {text:?}");
    TextEmbedding::new(v.into_iter().map(|x| x / norm).collect())
}

pub const FEATURE_DIM: usize = 32;

/// Frozen seeded projection of `[mean ‖ std ‖ low-band energy ‖ high-band
/// energy]` (each per channel) to `F` features, without bias.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub length: usize,
    pub channels: usize,
    /// `4C × F`.
    pub projection: Tensor,
}

impl FeatureExtractor {
    pub fn new(length: usize, channels: usize, dim: usize, seed: u64) -> Result<Self> {
        ensure!(length >= 2 && channels >= 1 && dim >= 1, "invalid feature extractor dimensions");
        let rows = 4 * channels;
        let projection = rng::normal_tensor(&mut rng::stream(seed, "feature-projection"), &[rows, dim], 1.0 / (rows as f64).sqrt());
        Ok(Self { length, channels, projection })
    }

    pub fn dim(&self) -> usize {
        self.projection.cols()
    }

    /// The unprojected statistics.
    pub fn statistics(&self, sequence: &Tensor) -> Result<Vec<f64>> {
        ensure!(
            sequence.shape() == [self.length, self.channels],
            "sequence shape {:?} does not match [{}, {}]",
            sequence.shape(),
            self.length,
            self.channels
        );
        let (l, c) = (self.length, self.channels);
        let d = sequence.data();
        let mut stats = vec![0.0; 4 * c];
        for ch in 0..c {
            let mean = (0..l).map(|t| d[t * c + ch]).sum::<f64>() / l as f64;
            let var = (0..l).map(|t| (d[t * c + ch] - mean).powi(2)).sum::<f64>() / l as f64;
            stats[ch] = mean;
            stats[c + ch] = var.sqrt();
        }
        let bands = dwt_haar(sequence)?;
        let half = bands.low.rows();
        for ch in 0..c {
            stats[2 * c + ch] = (0..half).map(|t| bands.low.at2(t, ch).powi(2)).sum::<f64>() / l as f64;
            stats[3 * c + ch] = (0..half).map(|t| bands.high.at2(t, ch).powi(2)).sum::<f64>() / l as f64;
        }
        Ok(stats)
    }

    pub fn extract(&self, sequence: &Tensor) -> Result<Vec<f64>> {
        let stats = self.statistics(sequence)?;
        let f = self.dim();
        let p = self.projection.data();
        let mut out = vec![0.0; f];
        for (i, s) in stats.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(&p[i * f..(i + 1) * f]) {
                *o += s * w;
            }
        }
        Ok(out)
    }

    /// Features of many sequences as an `n × F` matrix.
    pub fn extract_all<'a>(&self, sequences: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor> {
        let rows = sequences.into_iter().map(|s| self.extract(s)).collect::<Result<Vec<_>>>()?;
        Tensor::from_rows(&rows)
    }
}

/// Affine map from text embeddings into motion-feature space, fitted once by
/// ridge regression on a reference corpus and then frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct TextFeatureMap {
    /// `E × F`.
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

impl TextFeatureMap {
    /// Minimizes `Σ‖Wᵀe_i + b − y_i‖² + λ‖W‖²`; the bias is unpenalized.
    pub fn fit(texts: &[TextEmbedding], features: &Tensor, lambda: f64) -> Result<Self> {
        let (n, f) = features.dims2()?;
        ensure!(n == texts.len() && n >= 2, "need at least two paired samples, got {} texts and {n} features", texts.len());
        ensure!(lambda > 0.0, "ridge penalty must be positive");
        let e = texts[0].width();
        ensure!(texts.iter().all(|t| t.width() == e), "text embeddings differ in width");
        let x = DMatrix::from_fn(n, e, |i, j| texts[i].values()[j]);
        let y = DMatrix::from_row_slice(n, f, features.data());
        let x_mean = x.row_mean();
        let y_mean = y.row_mean();
        let xc = DMatrix::from_fn(n, e, |i, j| x[(i, j)] - x_mean[j]);
        let yc = DMatrix::from_fn(n, f, |i, j| y[(i, j)] - y_mean[j]);
        let gram = xc.transpose() * &xc + DMatrix::identity(e, e) * lambda;
        let chol = gram.cholesky().ok_or_else(|| contract("ridge system is not positive definite"))?;
        let w = chol.solve(&(xc.transpose() * yc));
        let bias: Vec<f64> = (0..f).map(|j| y_mean[j] - (0..e).map(|k| x_mean[k] * w[(k, j)]).sum::<f64>()).collect();
        let weight = Tensor::new(vec![e, f], (0..e).flat_map(|k| (0..f).map(move |j| (k, j))).map(|(k, j)| w[(k, j)]).collect())?;
        Ok(Self { weight, bias })
    }

    pub fn apply(&self, text: &TextEmbedding) -> Result<Vec<f64>> {
        let (e, f) = self.weight.dims2()?;
        ensure!(text.width() == e, "text width {} does not match map width {e}", text.width());
        let mut out = self.bias.clone();
        for (k, v) in text.values().iter().enumerate() {
            for (o, w) in out.iter_mut().zip(&self.weight.data()[k * f..(k + 1) * f]) {
                *o += v * w;
            }
        }
        Ok(out)
    }

    pub fn apply_all<'a>(&self, texts: impl IntoIterator<Item = &'a TextEmbedding>) -> Result<Tensor> {
        let rows = texts.into_iter().map(|t| self.apply(t)).collect::<Result<Vec<_>>>()?;
        Tensor::from_rows(&rows)
    }
}
