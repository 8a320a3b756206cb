use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ftmssm_core::audit::{self, AuditReport, BlockResult};
use ftmssm_core::denoiser::Denoiser;
use ftmssm_core::diffusion::checkpoint::{Checkpoint, CheckpointHeader};
use ftmssm_core::diffusion::{sample, DiffusionSchedule, Example};
use ftmssm_core::metrics::{diversity, fid, mm_dist, mmodality, r_precision, FeatureSet, RPrecision};
use ftmssm_core::rng;
use ftmssm_core::synthetic_motion::{
    encode_text, generate_corpus, Corpus, Family, FeatureExtractor, TextFeatureMap, FEATURE_DIM,
};
use ftmssm_core::train::{train_steps, TrainState};
use ftmssm_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{io_at, CliError};
use crate::svg::{line_chart, Series};

type Result<T> = std::result::Result<T, CliError>;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(io_at(path))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(io_at(path))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_at(dir))
}

fn load_corpus(path: &Path) -> Result<(Corpus, String)> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|_| CliError::usage(format!("{}: not UTF-8", path.display())))?;
    let corpus = Corpus::from_jsonl(text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    Ok((corpus, sha256_hex(&bytes)))
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, String)> {
    let bytes = read_file(path)?;
    let ck = Checkpoint::from_bytes(&bytes).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    Ok((ck, sha256_hex(&bytes)))
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<String> {
    let corpus = generate_corpus(&cfg.corpus, cfg.seed)?;
    write_file(out, corpus.to_jsonl()?)?;
    Ok(format!("wrote {} samples to {}", corpus.len(), out.display()))
}

fn loss_csv(trace: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        let _ = writeln!(s, "{i},{l}");
    }
    s
}

pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
}

impl TrainOutputs {
    pub fn in_dir(dir: &Path) -> Self {
        Self { checkpoint: dir.join("checkpoint.bin"), loss_csv: dir.join("loss.csv") }
    }
}

/// Trains until `cfg.train.steps` optimizer steps in total have been taken,
/// starting from `resume` when given.
pub fn train(cfg: &RunConfig, corpus_path: &Path, out_dir: &Path, resume: Option<&Path>) -> Result<String> {
    let (corpus, corpus_hash) = load_corpus(corpus_path)?;
    ensure_dir(out_dir)?;
    let (header, mut state) = match resume {
        Some(p) => {
            let (ck, _) = load_checkpoint(p)?;
            if let Some(h) = ck.header.meta.get("corpus_sha256") {
                if *h != corpus_hash {
                    return Err(CliError::usage(format!(
                        "checkpoint was trained on corpus {h}, not {corpus_hash}"
                    )));
                }
            }
            let mut header = ck.header;
            header.train = cfg.train.clone();
            (header, ck.state)
        }
        None => {
            let mut meta = BTreeMap::new();
            meta.insert("corpus_sha256".to_string(), corpus_hash.clone());
            meta.insert("run_config".to_string(), cfg.to_toml());
            let header = CheckpointHeader {
                model: cfg.model.clone(),
                schedule: cfg.schedule.clone(),
                train: cfg.train.clone(),
                meta,
            };
            let model = Denoiser::new(cfg.model.clone(), rng::derive_seed(cfg.seed, "init"))?;
            (header, TrainState::new(model, rng::derive_seed(cfg.seed, "train")))
        }
    };
    if header.model.timesteps != header.schedule.timesteps {
        return Err(CliError::usage("model and schedule disagree on the number of timesteps"));
    }
    let (l, c) = (header.model.latent_length, header.model.latent_dim);
    if corpus.config.latent_length != l || corpus.config.channels != c {
        return Err(CliError::usage(format!(
            "corpus samples are {}×{} but the model expects {l}×{c}",
            corpus.config.latent_length, corpus.config.channels
        )));
    }
    if state.step > cfg.train.steps {
        return Err(CliError::usage(format!(
            "checkpoint is at step {} which exceeds train.steps = {}",
            state.step, cfg.train.steps
        )));
    }
    let schedule = DiffusionSchedule::new(&header.schedule)?;
    let data = corpus
        .samples
        .iter()
        .map(|s| Ok(Example { z0: s.sequence.clone(), cond: encode_text(&s.text, header.model.text_dim)? }))
        .collect::<std::result::Result<Vec<_>, ftmssm_core::Error>>()?;
    let start = Instant::now();
    let remaining = cfg.train.steps - state.step;
    let result = train_steps(&mut state, &data, &schedule, &cfg.train, remaining, |k, loss| {
        if (k + 1) % 100 == 0 {
            eprintln!("step {} loss {loss:.4} ({:.1}s)", k + 1, start.elapsed().as_secs_f64());
        }
    });
    let out = TrainOutputs::in_dir(out_dir);
    write_file(&out.loss_csv, loss_csv(&state.loss_trace))?;
    result?;
    let ck = Checkpoint { header, state };
    ck.save(&out.checkpoint).map_err(|e| CliError::usage(format!("{}: {e}", out.checkpoint.display())))?;
    Ok(format!(
        "trained to step {} in {:.1}s; wrote {} and {}",
        ck.state.step,
        start.elapsed().as_secs_f64(),
        out.checkpoint.display(),
        out.loss_csv.display()
    ))
}

/// What to condition generated samples on.
pub enum Prompt {
    Text(String),
    Class(String),
}

pub const SAMPLES_FORMAT: &str = "ftmssm-samples";

#[derive(Serialize, Deserialize)]
pub struct SamplesHeader {
    pub format: String,
    pub version: u32,
    pub checkpoint_sha256: String,
    pub seed: u64,
    pub count: usize,
    pub inference_steps: usize,
    pub guidance_scale: Option<f64>,
}

#[derive(Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub text: String,
    pub class: Option<Family>,
    pub seed: u64,
    pub shape: [usize; 2],
    pub sequence: Vec<f64>,
}

fn generate(model: &Denoiser, schedule: &DiffusionSchedule, cfg: &RunConfig, text: &str, seed: u64) -> Result<Tensor> {
    let mc = model.config();
    let f_t = encode_text(text, mc.text_dim)?;
    Ok(sample(&f_t, model, schedule, &cfg.sampler.with_seed(seed), &[mc.latent_length, mc.latent_dim])?)
}

pub fn sample_cmd(
    cfg: &RunConfig,
    checkpoint: &Path,
    prompt: &Prompt,
    count: usize,
    out: &Path,
    svg_dir: Option<&Path>,
) -> Result<String> {
    if count == 0 {
        return Err(CliError::usage("count must be positive"));
    }
    let texts: Vec<(String, Option<Family>)> = match prompt {
        Prompt::Text(t) => {
            let class = ftmssm_core::synthetic_motion::template_for(t).map(|tpl| tpl.family);
            vec![(t.clone(), class); count]
        }
        Prompt::Class(name) => {
            let family: Family = name.parse()?;
            let templates: Vec<_> = family.templates().collect();
            (0..count).map(|i| (templates[i % templates.len()].text.to_string(), Some(family))).collect()
        }
    };
    let (ck, hash) = load_checkpoint(checkpoint)?;
    let schedule = DiffusionSchedule::new(&ck.header.schedule)?;
    let model = &ck.state.model;
    let header = SamplesHeader {
        format: SAMPLES_FORMAT.into(),
        version: 1,
        checkpoint_sha256: hash,
        seed: cfg.seed,
        count,
        inference_steps: cfg.sampler.inference_steps,
        guidance_scale: cfg.sampler.guidance_scale,
    };
    let mut body = serde_json::to_string(&header).expect("header serializes");
    body.push('\n');
    if let Some(dir) = svg_dir {
        ensure_dir(dir)?;
    }
    for (i, (text, class)) in texts.iter().enumerate() {
        let seed = rng::derive_indexed(cfg.seed, "sample", i as u64);
        let z = generate(model, &schedule, cfg, text, seed)?;
        let (l, c) = z.dims2()?;
        if let Some(dir) = svg_dir {
            let series: Vec<Series> = (0..c.min(4))
                .map(|ch| Series { label: format!("channel {ch}"), points: (0..l).map(|t| (t as f64, z.at2(t, ch))).collect() })
                .collect();
            write_file(&dir.join(format!("sample_{i:03}.svg")), line_chart(text, "frame", &series))?;
        }
        let rec = SampleRecord { index: i, text: text.clone(), class: *class, seed, shape: [l, c], sequence: z.into_data() };
        body.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        body.push('\n');
    }
    write_file(out, body)?;
    Ok(format!("wrote {count} samples to {}", out.display()))
}

/// Reads a samples file back into (records, header).
pub fn read_samples(path: &Path) -> Result<(SamplesHeader, Vec<SampleRecord>)> {
    let text = String::from_utf8(read_file(path)?).map_err(|_| CliError::usage("samples file is not UTF-8"))?;
    let mut lines = text.lines();
    let bad = |e: serde_json::Error| CliError::usage(format!("{}: {e}", path.display()));
    let header: SamplesHeader = serde_json::from_str(lines.next().unwrap_or("")).map_err(bad)?;
    let records = lines.map(|l| serde_json::from_str(l).map_err(bad)).collect::<Result<Vec<_>>>()?;
    Ok((header, records))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub r_precision: RPrecision,
    pub fid: f64,
    pub mm_dist: f64,
    pub diversity: f64,
    pub mmodality: f64,
}

pub const METRICS_FORMAT: &str = "ftmssm-metrics";

/// Evaluation of one checkpoint (or of the real corpus against itself).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format: String,
    pub version: u32,
    pub config: RunConfig,
    pub corpus_sha256: String,
    pub checkpoint_sha256: Option<String>,
    pub checkpoint_step: Option<u64>,
    pub samples: usize,
    pub generated: MetricRow,
    pub real: MetricRow,
    /// |Diversity(generated) − Diversity(real)|.
    pub diversity_gap: f64,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let e = &self.config.eval;
        let mut s = String::from("set,metric,value,pool_size,diversity_subset,seed,metric_seed,corpus_sha256\n");
        for (set, row) in [("generated", &self.generated), ("real", &self.real)] {
            let values = [
                ("r_precision_top1", row.r_precision.top1),
                ("r_precision_top2", row.r_precision.top2),
                ("r_precision_top3", row.r_precision.top3),
                ("fid", row.fid),
                ("mm_dist", row.mm_dist),
                ("diversity", row.diversity),
                ("mmodality", row.mmodality),
            ];
            for (name, v) in values {
                let _ = writeln!(
                    s,
                    "{set},{name},{v},{},{},{},{},{}",
                    e.pool_size, e.diversity_subset, self.config.seed, e.metric_seed, self.corpus_sha256
                );
            }
        }
        let _ = writeln!(
            s,
            "generated,diversity_gap,{},{},{},{},{},{}",
            self.diversity_gap, e.pool_size, e.diversity_subset, self.config.seed, e.metric_seed, self.corpus_sha256
        );
        s
    }
}

fn labelled(rows: Tensor, labels: Vec<String>) -> Result<FeatureSet> {
    Ok(FeatureSet::new(rows)?.with_labels(labels)?)
}

/// Keeps only members of groups with at least two entries.
fn repeated_groups(feats: &Tensor, labels: &[String]) -> Result<FeatureSet> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let keep: Vec<usize> = (0..labels.len()).filter(|&i| counts[labels[i].as_str()] >= 2).collect();
    if keep.is_empty() {
        return Err(CliError::usage("MModality needs at least one text with two samples"));
    }
    let rows: Vec<Vec<f64>> = keep.iter().map(|&i| feats.row(i).to_vec()).collect();
    labelled(Tensor::from_rows(&rows)?, keep.iter().map(|&i| labels[i].clone()).collect())
}

pub struct EvalOutputs {
    pub report: MetricsReport,
    pub seconds: f64,
}

pub fn evaluate(cfg: &RunConfig, corpus_path: &Path, checkpoint: Option<&Path>) -> Result<EvalOutputs> {
    let start = Instant::now();
    let e = &cfg.eval;
    let (corpus, corpus_hash) = load_corpus(corpus_path)?;
    let n = corpus.len();
    let needed = e.pool_size.max(2 * e.diversity_subset);
    if n < needed {
        return Err(CliError::usage(format!(
            "evaluation needs at least {needed} samples (pool_size {} and 2 × diversity_subset {}), corpus has {n}",
            e.pool_size, e.diversity_subset
        )));
    }
    let (l, c) = (corpus.config.latent_length, corpus.config.channels);
    let extractor = FeatureExtractor::new(l, c, FEATURE_DIM, e.feature_seed)?;
    let reference = generate_corpus(&corpus.config, e.evaluator_seed)?;
    let ref_feats = extractor.extract_all(reference.samples.iter().map(|s| &s.sequence))?;
    let ref_texts = reference.samples.iter().map(|s| encode_text(&s.text, ftmssm_core::synthetic_motion::TEXT_DIM)).collect::<std::result::Result<Vec<_>, _>>()?;
    let text_map = TextFeatureMap::fit(&ref_texts, &ref_feats, e.text_map_ridge)?;

    let texts: Vec<String> = corpus.samples.iter().map(|s| s.text.clone()).collect();
    let embeddings = texts.iter().map(|t| encode_text(t, ftmssm_core::synthetic_motion::TEXT_DIM)).collect::<std::result::Result<Vec<_>, _>>()?;
    let text_feats = FeatureSet::new(text_map.apply_all(&embeddings)?)?;
    let real_raw = extractor.extract_all(corpus.samples.iter().map(|s| &s.sequence))?;
    let real = FeatureSet::new(real_raw.clone())?;
    let real_mm = repeated_groups(&real_raw, &texts)?;

    let (gen, gen_mm, ck_hash, ck_step) = match checkpoint {
        Some(p) => {
            let (ck, hash) = load_checkpoint(p)?;
            let mc = ck.state.model.config();
            if mc.latent_length != l || mc.latent_dim != c {
                return Err(CliError::usage(format!(
                    "checkpoint generates {}×{} but the corpus holds {l}×{c}",
                    mc.latent_length, mc.latent_dim
                )));
            }
            let schedule = DiffusionSchedule::new(&ck.header.schedule)?;
            let model = &ck.state.model;
            let mut gens = Vec::with_capacity(n);
            for (i, t) in texts.iter().enumerate() {
                gens.push(generate(model, &schedule, cfg, t, rng::derive_indexed(cfg.seed, "eval-sample", i as u64))?);
            }
            let mut distinct: Vec<&String> = Vec::new();
            for t in &texts {
                if !distinct.contains(&t) && distinct.len() < e.mmodality_texts {
                    distinct.push(t);
                }
            }
            let mut mm_seqs = Vec::new();
            let mut mm_labels = Vec::new();
            for (k, t) in distinct.iter().enumerate() {
                for r in 0..e.mmodality_repeats {
                    let seed = rng::derive_indexed(cfg.seed, "eval-mmodality", (k * e.mmodality_repeats + r) as u64);
                    mm_seqs.push(generate(model, &schedule, cfg, t, seed)?);
                    mm_labels.push((*t).clone());
                }
            }
            let gen = FeatureSet::new(extractor.extract_all(gens.iter())?)?;
            let gen_mm = labelled(extractor.extract_all(mm_seqs.iter())?, mm_labels)?;
            (gen, gen_mm, Some(hash), Some(ck.state.step))
        }
        None => (real.clone(), real_mm.clone(), None, None),
    };

    let row = |feats: &FeatureSet, grouped: &FeatureSet| -> Result<MetricRow> {
        Ok(MetricRow {
            r_precision: r_precision(feats, &text_feats, e.pool_size, e.metric_seed)?,
            fid: fid(feats, &real)?,
            mm_dist: mm_dist(feats, &text_feats)?,
            diversity: diversity(feats, e.diversity_subset, e.metric_seed)?,
            mmodality: mmodality(grouped, e.mmodality_pairs, e.metric_seed)?,
        })
    };
    let generated = row(&gen, &gen_mm)?;
    let real_row = row(&real, &real_mm)?;
    let report = MetricsReport {
        format: METRICS_FORMAT.into(),
        version: 1,
        config: cfg.clone(),
        corpus_sha256: corpus_hash,
        checkpoint_sha256: ck_hash,
        checkpoint_step: ck_step,
        samples: n,
        diversity_gap: (generated.diversity - real_row.diversity).abs(),
        generated,
        real: real_row,
    };
    Ok(EvalOutputs { report, seconds: start.elapsed().as_secs_f64() })
}

/// Writes `metrics.json`, `metrics.csv` and `timing.json`. Only the last one
/// varies between identical runs.
pub fn eval_cmd(cfg: &RunConfig, corpus: &Path, checkpoint: Option<&Path>, out_dir: &Path) -> Result<String> {
    let out = evaluate(cfg, corpus, checkpoint)?;
    ensure_dir(out_dir)?;
    write_file(&out_dir.join("metrics.json"), out.report.to_json())?;
    write_file(&out_dir.join("metrics.csv"), out.report.to_csv())?;
    write_file(&out_dir.join("timing.json"), format!("{{\"wall_clock_seconds\": {}}}\n", out.seconds))?;
    let g = &out.report.generated;
    Ok(format!(
        "FID {:.4}  R-Precision {:.3}/{:.3}/{:.3}  MM-Dist {:.4}  Diversity {:.4}  MModality {:.4}  ({:.1}s)",
        g.fid, g.r_precision.top1, g.r_precision.top2, g.r_precision.top3, g.mm_dist, g.diversity, g.mmodality, out.seconds
    ))
}

pub fn format_audit(blocks: &[BlockResult]) -> String {
    let mut s = format!("{:<18} {:>8} {:>14} {:>14} {:>8}  status\n", "block", "entries", "max_rel_err", "max_abs_err", "seconds");
    for b in blocks {
        let status = match &b.worst {
            None if b.passed => "pass".to_string(),
            Some((name, err)) => format!("FAIL worst `{name}` rel error {err:.3e}"),
            None => "FAIL".to_string(),
        };
        let _ = writeln!(
            s,
            "{:<18} {:>8} {:>14.3e} {:>14.3e} {:>8.2}  {status}",
            b.block, b.entries, b.max_rel_error, b.max_abs_error, b.seconds
        );
    }
    s
}

#[derive(Serialize)]
struct GradcheckFile<'a> {
    audit: &'a AuditReport,
    passed: bool,
}

/// Runs the block audit (or only the corrupted-adjoint control). Any failing
/// block is a numeric failure.
pub fn gradcheck(cfg: &RunConfig, negative_control: bool, out: Option<&Path>) -> Result<String> {
    let g = &cfg.gradcheck;
    let report = if negative_control {
        let b = audit::corrupted_adjoint_fixture(g.seed, 1e-2, g.rel_tol, g.abs_tol)?;
        AuditReport { rel_tol: g.rel_tol, abs_tol: g.abs_tol, seed: g.seed, blocks: vec![b] }
    } else {
        audit::run_audit(g.seed, g.rel_tol, g.abs_tol)?
    };
    let table = format_audit(&report.blocks);
    if let Some(p) = out {
        let file = GradcheckFile { audit: &report, passed: report.passed() };
        write_file(p, serde_json::to_string_pretty(&file).expect("report serializes") + "\n")?;
    }
    if report.passed() {
        Ok(table)
    } else {
        let worst = report
            .blocks
            .iter()
            .filter(|b| !b.passed)
            .map(|b| match &b.worst {
                Some((name, err)) => format!("{}: parameter `{name}` relative error {err:.3e}", b.block),
                None => format!("{}: absolute error {:.3e}", b.block, b.max_abs_error),
            })
            .collect::<Vec<_>>()
            .join("; ");
        Err(CliError::Numeric(format!("{table}gradient check failed: {worst}")))
    }
}

fn read_loss_csv(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = String::from_utf8(read_file(path)?).map_err(|_| CliError::usage("loss file is not UTF-8"))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (s, v) = l.split_once(',').ok_or_else(|| CliError::usage(format!("bad loss line `{l}`")))?;
            let parse = |x: &str| x.parse::<f64>().map_err(|_| CliError::usage(format!("bad loss line `{l}`")));
            Ok((parse(s)?, parse(v)?))
        })
        .collect()
}

fn moving_average(points: &[(f64, f64)], window: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(points.len());
    let mut acc = 0.0;
    for i in 0..points.len() {
        acc += points[i].1;
        if i >= window {
            acc -= points[i - window].1;
        }
        out.push((points[i].0, acc / (i + 1).min(window) as f64));
    }
    out
}

/// Comparison table over evaluation reports plus loss curves.
pub fn report(evals: &[PathBuf], losses: &[PathBuf], out_dir: &Path) -> Result<String> {
    if evals.is_empty() && losses.is_empty() {
        return Err(CliError::usage("report needs at least one --eval or --loss input"));
    }
    ensure_dir(out_dir)?;
    let mut written = Vec::new();
    if !evals.is_empty() {
        let mut rows: Vec<(String, MetricRow)> = Vec::new();
        for (i, p) in evals.iter().enumerate() {
            let text = String::from_utf8(read_file(p)?).map_err(|_| CliError::usage("metrics file is not UTF-8"))?;
            let r: MetricsReport =
                serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
            if i == 0 {
                rows.push(("Real".into(), r.real.clone()));
            }
            let name = match (r.checkpoint_step, &r.checkpoint_sha256) {
                (Some(step), Some(h)) => format!("step {step} ({})", &h[..8]),
                _ => "real corpus".into(),
            };
            rows.push((name, r.generated));
        }
        let mut md = String::from(
            "| Method | R-Precision Top 1 | Top 2 | Top 3 | FID | MM-Dist | Diversity | MModality |\n|---|---|---|---|---|---|---|---|\n",
        );
        let mut csv = String::from("method,top1,top2,top3,fid,mm_dist,diversity,mmodality\n");
        for (name, r) in &rows {
            let p = &r.r_precision;
            let _ = writeln!(
                md,
                "| {name} | {:.3} | {:.3} | {:.3} | {:.4} | {:.4} | {:.4} | {:.4} |",
                p.top1, p.top2, p.top3, r.fid, r.mm_dist, r.diversity, r.mmodality
            );
            let _ = writeln!(csv, "{name},{},{},{},{},{},{},{}", p.top1, p.top2, p.top3, r.fid, r.mm_dist, r.diversity, r.mmodality);
        }
        write_file(&out_dir.join("table.md"), md)?;
        write_file(&out_dir.join("table.csv"), csv)?;
        written.extend(["table.md", "table.csv"]);
    }
    if !losses.is_empty() {
        let mut series = Vec::new();
        for p in losses {
            let pts = read_loss_csv(p)?;
            let label = p.parent().and_then(|d| d.file_name()).map(|n| n.to_string_lossy().into_owned());
            let label = label.unwrap_or_else(|| p.display().to_string());
            series.push(Series { label: format!("{label} (mean of 50)"), points: moving_average(&pts, 50) });
        }
        write_file(&out_dir.join("loss.svg"), line_chart("training loss", "step", &series))?;
        written.push("loss.svg");
    }
    Ok(format!("wrote {} to {}", written.join(", "), out_dir.display()))
}
