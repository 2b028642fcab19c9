use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use fairembed_core::arl::{debias_set, train_arl, train_arl_sequential, ArlChain, ArlEpoch, ArlModel, Debias};
use fairembed_core::eval::{
    accuracy_drop_report, compare_class_errors, repeat_probe, AccuracyDropReport, ClassErrorReport, LabelPairSource,
    LinearPairSource, NoisePairSource, PairSource, ProbeSummary, ZeroShotRecord, ZeroShotTask,
};
use fairembed_core::metrics::{audit, cosine_similarity, SkewDelta, SkewReport};
use fairembed_core::numerics::l2_norm;
use fairembed_core::pac::{pac_accuracy, train_pac, FrozenPac, PacEpoch, PacModel, PacTrainConfig};
use fairembed_core::store::{
    load_captions, load_embeddings, split_set, write_captions, write_jsonl, write_packed, write_vectors, Format,
};
use fairembed_core::synth::{generate, generate_zeroshot, SynthOracle};
use fairembed_core::{Attribute, EmbeddingSet, Error as CoreError, Rng, Split};

use crate::artifacts::{write_manifest, Outputs};
use crate::config::{Mode, ProbeSource, RunConfig};

/// What a command read and wrote, for its manifest.
struct Run {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

pub fn run(command: &str, cfg: &RunConfig) -> Result<()> {
    let run = match command {
        "synth" => cmd_synth(cfg)?,
        "train-pac" => cmd_train_pac(cfg)?,
        "train-arl" => cmd_train_arl(cfg)?,
        "debias" => cmd_debias(cfg)?,
        "audit" => cmd_audit(cfg)?,
        "probe" => cmd_probe(cfg)?,
        "zeroshot" => cmd_zeroshot(cfg)?,
        other => bail!("unknown command `{other}`"),
    };
    let manifest = write_manifest(&cfg.paths.reports, command, &cfg.canonical_json()?, &run.inputs, &run.outputs)?;
    log::info!("{command}: {} outputs, manifest {}", run.outputs.len(), manifest.display());
    Ok(())
}

fn require(path: &Path, producer: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(anyhow!("missing upstream artifact {} (produced by `fairembed {producer}`)", path.display()))
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn format_of(path: &Path, fallback: Format) -> Format {
    match path.extension().and_then(|e| e.to_str()) {
        Some("packed") => Format::Packed,
        Some("jsonl") => Format::Jsonl,
        _ => fallback,
    }
}

fn save_set(out: &mut Outputs, path: &Path, set: &EmbeddingSet, format: Format) -> Result<()> {
    out.write_with(path, |w| {
        match format {
            Format::Jsonl => write_jsonl(set, w)?,
            Format::Packed => write_packed(set, w)?,
        }
        Ok(())
    })
}

/// The configured embedding files, concatenated; records without a split
/// get one from `cfg.split`.
fn load_images(cfg: &RunConfig) -> Result<(EmbeddingSet, Vec<PathBuf>)> {
    let paths = cfg.embedding_paths();
    let mut sets = Vec::with_capacity(paths.len());
    for p in &paths {
        require(p, "synth")?;
        sets.push(load_embeddings(p, format_of(p, cfg.format))?);
    }
    let set = EmbeddingSet::concat(&sets)?;
    let set = if set.records().iter().any(|r| r.split.is_none()) { split_set(&set, cfg.seed, cfg.split)? } else { set };
    Ok((set, paths))
}

fn stage_order(cfg: &RunConfig, set: &EmbeddingSet) -> Vec<Attribute> {
    if cfg.order.is_empty() {
        set.attributes()
    } else {
        cfg.order.clone()
    }
}

fn read_pac(path: &Path) -> Result<FrozenPac> {
    require(path, "train-pac")?;
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(PacModel::read(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?.freeze())
}

fn read_learner(cfg: &RunConfig) -> Result<(Box<dyn Debias>, PathBuf)> {
    let path = cfg.arl_path();
    require(&path, "train-arl")?;
    let reader = BufReader::new(File::open(&path)?);
    let model: Box<dyn Debias> = match cfg.mode {
        Mode::Joint => Box::new(ArlModel::read(reader).with_context(|| format!("reading {}", path.display()))?),
        Mode::Sequential => Box::new(ArlChain::read(reader).with_context(|| format!("reading {}", path.display()))?),
    };
    Ok((model, path))
}

fn cmd_synth(cfg: &RunConfig) -> Result<Run> {
    let mut spec = cfg.synth.clone().unwrap_or_default();
    spec.seed = cfg.seed;
    let dir = &cfg.paths.data;
    if !dir.is_dir() {
        bail!("output directory {} does not exist", dir.display());
    }
    let generated = generate(&spec)?;
    let mut out = Outputs::new();
    for split in Split::ALL {
        save_set(&mut out, &cfg.split_file(split), &generated.images.subset(split), cfg.format)?;
    }
    out.write_with(cfg.captions_path(), |w| Ok(write_captions(&generated.captions, w)?))?;
    out.write_json(cfg.oracle_path(), &generated.oracle)?;
    let outputs = out.commit()?;
    ensure_dir(&cfg.paths.reports)?;
    Ok(Run { inputs: Vec::new(), outputs })
}

#[derive(Serialize)]
struct PacStageReport {
    attributes: Vec<Attribute>,
    epochs: Vec<PacEpoch>,
    test_accuracy: BTreeMap<Attribute, f64>,
}

#[derive(Serialize)]
struct PacTrainReport {
    mode: Mode,
    stages: Vec<PacStageReport>,
}

fn cmd_train_pac(cfg: &RunConfig) -> Result<Run> {
    let (set, inputs) = load_images(cfg)?;
    ensure_dir(&cfg.paths.checkpoints)?;
    ensure_dir(&cfg.paths.reports)?;
    let jobs: Vec<(PacTrainConfig, PathBuf)> = match cfg.mode {
        Mode::Joint => vec![(cfg.pac.clone(), cfg.joint_pac_path())],
        Mode::Sequential => stage_order(cfg, &set)
            .into_iter()
            .map(|a| (PacTrainConfig { attributes: Some(vec![a]), ..cfg.pac.clone() }, cfg.stage_pac_path(a)))
            .collect(),
    };
    let mut out = Outputs::new();
    let mut stages = Vec::with_capacity(jobs.len());
    for (pcfg, path) in jobs {
        let (model, epochs) = train_pac(&set, &pcfg)?;
        let test_accuracy = pac_accuracy(&model, &set, Some(Split::Test))?;
        log::info!("classifier {:?}: test accuracy {test_accuracy:?}", model.attributes());
        out.write_with(&path, |w| Ok(model.write(w)?))?;
        stages.push(PacStageReport { attributes: model.attributes(), epochs, test_accuracy });
    }
    out.write_json(cfg.paths.reports.join("pac-train.json"), &PacTrainReport { mode: cfg.mode, stages })?;
    Ok(Run { inputs, outputs: out.commit()? })
}

#[derive(Serialize)]
struct ArlStageReport {
    attributes: Vec<Attribute>,
    epochs: Vec<ArlEpoch>,
}

#[derive(Serialize)]
struct ArlTrainReport {
    mode: Mode,
    stages: Vec<ArlStageReport>,
}

#[derive(Serialize)]
struct NonFiniteDump<'a> {
    context: &'a str,
    batch_ids: &'a [String],
}

fn cmd_train_arl(cfg: &RunConfig) -> Result<Run> {
    let (set, mut inputs) = load_images(cfg)?;
    ensure_dir(&cfg.paths.checkpoints)?;
    ensure_dir(&cfg.paths.reports)?;
    let mut out = Outputs::new();
    let trained = match cfg.mode {
        Mode::Joint => {
            let path = cfg.joint_pac_path();
            let pac = read_pac(&path)?;
            inputs.push(path);
            let attrs = pac.attributes();
            train_arl(&set, &pac, &cfg.arl).map(|(model, epochs)| {
                let stages = vec![ArlStageReport { attributes: attrs, epochs }];
                (Box::new(model) as Box<dyn CheckpointWrite>, stages)
            })
        }
        Mode::Sequential => {
            let order = stage_order(cfg, &set);
            let mut pacs = BTreeMap::new();
            for &a in &order {
                let path = cfg.stage_pac_path(a);
                pacs.insert(a, read_pac(&path)?);
                inputs.push(path);
            }
            train_arl_sequential(&set, &pacs, &order, &cfg.arl).map(|(chain, logs)| {
                let stages = order
                    .iter()
                    .zip(logs)
                    .map(|(&a, epochs)| ArlStageReport { attributes: vec![a], epochs })
                    .collect();
                (Box::new(chain) as Box<dyn CheckpointWrite>, stages)
            })
        }
    };
    let (model, stages) = match trained {
        Ok(t) => t,
        Err(e) => {
            if let CoreError::NonFiniteLoss { context, batch_ids } = &e {
                log::error!("non-finite loss ({context}); batch ids: {}", batch_ids.join(" "));
                let mut dump = Outputs::new();
                dump.write_json(
                    cfg.paths.reports.join("nonfinite-batch.json"),
                    &NonFiniteDump { context, batch_ids },
                )?;
                dump.commit()?;
            }
            return Err(e.into());
        }
    };
    out.write_with(cfg.arl_path(), |w| model.write_to(w))?;
    out.write_json(cfg.paths.reports.join("arl-train.json"), &ArlTrainReport { mode: cfg.mode, stages })?;
    Ok(Run { inputs, outputs: out.commit()? })
}

trait CheckpointWrite {
    fn write_to(&self, w: &mut dyn Write) -> Result<()>;
}

impl CheckpointWrite for ArlModel {
    fn write_to(&self, w: &mut dyn Write) -> Result<()> {
        Ok(self.write(w)?)
    }
}

impl CheckpointWrite for ArlChain {
    fn write_to(&self, w: &mut dyn Write) -> Result<()> {
        Ok(self.write(w)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    /// Mean of `|e - phi_bar|`.
    pub mean_l2: f64,
    pub max_l2: f64,
    pub mean_cosine: f64,
}

/// Pairs records by position; both sets must list the same ids in order.
fn reconstruction(base: &EmbeddingSet, debiased: &EmbeddingSet) -> Result<Reconstruction> {
    if base.len() != debiased.len() || base.is_empty() {
        bail!("debiased set has {} records, base set {}", debiased.len(), base.len());
    }
    let (mut sum, mut max, mut cos) = (0.0f64, 0.0f64, 0.0);
    for (a, b) in base.records().iter().zip(debiased.records()) {
        if a.id != b.id {
            bail!("debiased record `{}` paired with base record `{}`", b.id, a.id);
        }
        let diff: Vec<f64> = a.vector.iter().zip(&b.vector).map(|(x, y)| x - y).collect();
        let n = l2_norm(&diff);
        sum += n;
        max = max.max(n);
        cos += cosine_similarity(&a.vector, &b.vector)?;
    }
    let count = base.len() as f64;
    Ok(Reconstruction { mean_l2: sum / count, max_l2: max, mean_cosine: cos / count })
}

#[derive(Serialize)]
struct DebiasReport {
    mode: Mode,
    records: usize,
    reconstruction: Reconstruction,
    /// Test-split classifier accuracy before and after, when checkpoints exist.
    accuracy_before: BTreeMap<Attribute, f64>,
    accuracy_after: BTreeMap<Attribute, f64>,
}

fn cmd_debias(cfg: &RunConfig) -> Result<Run> {
    let (set, mut inputs) = load_images(cfg)?;
    let (model, arl_path) = read_learner(cfg)?;
    inputs.push(arl_path);
    ensure_dir(&cfg.paths.data)?;
    ensure_dir(&cfg.paths.reports)?;
    let (debiased, residuals) = debias_set(model.as_ref(), &set)?;

    let (mut accuracy_before, mut accuracy_after) = (BTreeMap::new(), BTreeMap::new());
    let pac_paths: Vec<PathBuf> = match cfg.mode {
        Mode::Joint => vec![cfg.joint_pac_path()],
        Mode::Sequential => stage_order(cfg, &set).into_iter().map(|a| cfg.stage_pac_path(a)).collect(),
    };
    for path in pac_paths.into_iter().filter(|p| p.is_file()) {
        let pac = read_pac(&path)?;
        accuracy_before.extend(pac_accuracy(&pac, &set, Some(Split::Test))?);
        accuracy_after.extend(pac_accuracy(&pac, &debiased, Some(Split::Test))?);
        inputs.push(path);
    }

    let mut out = Outputs::new();
    save_set(&mut out, &cfg.debiased_path(), &debiased, cfg.format)?;
    out.write_with(cfg.residuals_path(), |w| Ok(write_vectors(set.d(), &residuals, w)?))?;
    let report = DebiasReport {
        mode: cfg.mode,
        records: set.len(),
        reconstruction: reconstruction(&set, &debiased)?,
        accuracy_before,
        accuracy_after,
    };
    out.write_json(cfg.paths.reports.join("debias.json"), &report)?;
    Ok(Run { inputs, outputs: out.commit()? })
}

fn audit_subset(cfg: &RunConfig, set: EmbeddingSet) -> EmbeddingSet {
    match cfg.audit_split {
        Some(split) => set.subset(split),
        None => set,
    }
}

fn write_audit(out: &mut Outputs, dir: &Path, stem: &str, report: &SkewReport, set: &EmbeddingSet) -> Result<()> {
    out.write_json(dir.join(format!("{stem}.json")), report)?;
    out.write_bytes(dir.join(format!("{stem}.txt")), report.to_text_table().as_bytes())?;
    out.write_with(dir.join(format!("{stem}.csv")), |w| {
        Ok(report.write_csv(w, |a| set.vocabulary(a).map(|v| v.labels().to_vec()).unwrap_or_default())?)
    })
}

#[derive(Serialize)]
struct AuditDelta {
    mode: Mode,
    reconstruction: Reconstruction,
    delta: SkewDelta,
}

fn cmd_audit(cfg: &RunConfig) -> Result<Run> {
    let (set, mut inputs) = load_images(cfg)?;
    let images = audit_subset(cfg, set);
    let captions_path = cfg.captions_path();
    require(&captions_path, "synth")?;
    let captions = load_captions(&captions_path)?;
    inputs.push(captions_path);
    ensure_dir(&cfg.paths.reports)?;
    let attrs = images.attributes();
    let before = audit(&images, &captions, &cfg.skew, &attrs)?;

    let dir = &cfg.paths.reports;
    let mut out = Outputs::new();
    write_audit(&mut out, dir, "audit-before", &before, &images)?;
    let debiased_path = cfg.debiased_path();
    if debiased_path.is_file() {
        let debiased = audit_subset(cfg, load_embeddings(&debiased_path, format_of(&debiased_path, cfg.format))?);
        inputs.push(debiased_path);
        let after = audit(&debiased, &captions, &cfg.skew, &attrs)?;
        write_audit(&mut out, dir, "audit-after", &after, &debiased)?;
        let delta = SkewDelta::between(&before, &after)?;
        let rec = reconstruction(&images, &debiased)?;
        let mut text = delta.to_text_table();
        text.push_str(&format!(
            "\nreconstruction: mean |e - phi| = {:.6}, max = {:.6}, mean cosine = {:.6}\n",
            rec.mean_l2, rec.max_l2, rec.mean_cosine
        ));
        out.write_bytes(dir.join("audit-delta.txt"), text.as_bytes())?;
        out.write_json(dir.join("audit-delta.json"), &AuditDelta { mode: cfg.mode, reconstruction: rec, delta })?;
    } else {
        log::info!("no debiased set at {}; auditing the base set only", debiased_path.display());
    }
    Ok(Run { inputs, outputs: out.commit()? })
}

#[derive(Serialize)]
struct ProbeReport {
    source: ProbeSource,
    d: usize,
    attribute: Option<Attribute>,
    summary: ProbeSummary,
}

fn cmd_probe(cfg: &RunConfig) -> Result<Run> {
    let p = &cfg.probe;
    let mut inputs = Vec::new();
    let (mut source, d, attribute): (Box<dyn PairSource>, usize, Option<Attribute>) = match p.source {
        ProbeSource::Linear => {
            let mut rng = Rng::stream(cfg.seed, u64::MAX);
            (Box::new(LinearPairSource::random(p.d, &mut rng)), p.d, None)
        }
        ProbeSource::Noise => (Box::new(NoisePairSource { d: p.d }), p.d, None),
        ProbeSource::Labels => {
            let (images, paths) = load_images(cfg)?;
            inputs.extend(paths);
            let prompts_path =
                cfg.paths.label_prompts.clone().ok_or_else(|| anyhow!("labels probe needs paths.label_prompts"))?;
            require(&prompts_path, "the exporter")?;
            let prompts = load_captions(&prompts_path)?;
            inputs.push(prompts_path);
            let vocab =
                images.vocabulary(p.attribute).ok_or(CoreError::UnknownAttribute(p.attribute))?.clone();
            let texts = vocab
                .labels()
                .iter()
                .map(|label| {
                    prompts
                        .iter()
                        .find(|c| c.attribute == p.attribute && &c.text == label)
                        .and_then(|c| c.vector.clone())
                        .ok_or_else(|| anyhow!("no prompt vector for {} label `{label}`", p.attribute))
                })
                .collect::<Result<Vec<_>>>()?;
            let d = images.d();
            (Box::new(LabelPairSource { images, attribute: p.attribute, texts }), d, Some(p.attribute))
        }
    };
    let summary = repeat_probe(source.as_mut(), &p.fit, cfg.seed)?;
    ensure_dir(&cfg.paths.reports)?;
    let text = format!(
        "probe source {:?}, d = {d}, {} repetitions of {} pairs\nrelative MSE: max {:.3e}, mean {:.3e}\n",
        p.source, summary.repetitions, p.fit.pairs, summary.max_relative_mse, summary.mean_relative_mse
    );
    let mut out = Outputs::new();
    out.write_json(cfg.paths.reports.join("probe.json"), &ProbeReport { source: p.source, d, attribute, summary })?;
    out.write_bytes(cfg.paths.reports.join("probe.txt"), text.as_bytes())?;
    Ok(Run { inputs, outputs: out.commit()? })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TaskFile {
    pub task: ZeroShotTask,
    pub records: Vec<ZeroShotRecord>,
}

#[derive(Serialize)]
struct ZeroShotReport {
    mode: Mode,
    drop: AccuracyDropReport,
    classes: Vec<ClassErrorReport>,
}

fn cmd_zeroshot(cfg: &RunConfig) -> Result<Run> {
    let (model, arl_path) = read_learner(cfg)?;
    let mut inputs = vec![arl_path];
    let tasks: Vec<(ZeroShotTask, Vec<ZeroShotRecord>)> = if cfg.paths.zeroshot_tasks.is_empty() {
        let oracle_path = cfg.oracle_path();
        require(&oracle_path, "synth")?;
        let oracle: SynthOracle = serde_json::from_reader(BufReader::new(File::open(&oracle_path)?))
            .with_context(|| format!("reading {}", oracle_path.display()))?;
        inputs.push(oracle_path);
        let mut spec = cfg.synth.clone().unwrap_or_default();
        spec.seed = cfg.seed;
        vec![generate_zeroshot(&spec, &oracle, &cfg.zeroshot)?]
    } else {
        let mut tasks = Vec::new();
        for path in &cfg.paths.zeroshot_tasks {
            require(path, "the exporter")?;
            let file: TaskFile = serde_json::from_reader(BufReader::new(File::open(path)?))
                .with_context(|| format!("reading {}", path.display()))?;
            tasks.push((file.task, file.records));
            inputs.push(path.clone());
        }
        tasks
    };
    let drop = accuracy_drop_report(&tasks, model.as_ref())?;
    let mut classes = Vec::with_capacity(tasks.len());
    for (task, records) in &tasks {
        let debiased = records
            .iter()
            .map(|r| Ok(ZeroShotRecord { vector: model.transform(&r.vector)?, ..r.clone() }))
            .collect::<Result<Vec<_>, CoreError>>()?;
        classes.push(compare_class_errors(task, records, &debiased)?);
    }
    let mut text = String::new();
    for t in &drop.tasks {
        text.push_str(&format!(
            "{}: top-1 {:.2}% -> {:.2}% (drop {:.2} points)\n",
            t.task,
            100.0 * t.accuracy_before,
            100.0 * t.accuracy_after,
            t.drop_points
        ));
    }
    text.push_str(&format!("mean drop: {:.2} points\n", drop.mean_drop_points));
    ensure_dir(&cfg.paths.reports)?;
    let mut out = Outputs::new();
    out.write_json(cfg.paths.reports.join("zeroshot.json"), &ZeroShotReport { mode: cfg.mode, drop, classes })?;
    out.write_bytes(cfg.paths.reports.join("zeroshot.txt"), text.as_bytes())?;
    Ok(Run { inputs, outputs: out.commit()? })
}
