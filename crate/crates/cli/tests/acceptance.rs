//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any criterion fails.
//!
//! 1. probe fidelity on an exactly linear map
//! 2. audit equals a brute-force skew recomputation on micro-instances
//! 3. analytic classifier and learner gradients match central differences
//! 4. end-to-end debiasing of the planted synthetic set
//! 5. zero-shot retention on classes orthogonal to the plant
//! 6. joint and sequential modes both run and report
//! 7. the CLI pipeline is byte-for-byte deterministic
//! 8. skew stays near zero when nothing is planted

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use fairembed_core::arl::{
    arl_backward, arl_loss, debias_set, train_arl, ActivationKind, ActivationSpec, ArlBatch, ArlEpoch,
    ArlLossWeights, ArlModel, ArlTrainConfig,
};
use fairembed_core::eval::{accuracy_drop_report, fit_probe, LinearPairSource, PairSource, ProbeConfig};
use fairembed_core::metrics::{audit, cosine_similarity, SkewConfig, SkewDelta, SkewReport, Smoothing};
use fairembed_core::numerics::Matrix;
use fairembed_core::pac::{
    pac_accuracy, pac_backward, pac_loss, train_pac, FrozenPac, PacArch, PacBatch, PacModel, PacTrainConfig,
};
use fairembed_core::synth::{generate, generate_zeroshot, BiasStrength, SynthOutput, SynthSpec, ZeroShotSpec};
use fairembed_core::{
    Attribute, CaptionRecord, EmbeddingRecord, EmbeddingSet, LabelVocabulary, Rng, Sentiment, Split,
};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// 1. probe fidelity

fn frobenius(m: &Matrix) -> f64 {
    m.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let cfg = ProbeConfig::default();
    let (mut worst_mse, mut worst_k) = (0.0f64, 0.0f64);
    for rep in 0..100u64 {
        let mut map_rng = Rng::stream(1, rep);
        let mut source = LinearPairSource::random(64, &mut map_rng);
        let pairs = source.sample(2000, &mut Rng::stream(2, rep)).map_err(|e| e.to_string())?;
        let model = fit_probe(&pairs, &cfg).map_err(|e| e.to_string())?;
        let diff: Vec<f64> = model.k.as_slice().iter().zip(source.k.as_slice()).map(|(a, b)| a - b).collect();
        let diff = Matrix::from_vec(64, 64, diff).map_err(|e| e.to_string())?;
        worst_mse = worst_mse.max(model.relative_mse);
        worst_k = worst_k.max(frobenius(&diff) / frobenius(&source.k));
    }
    let elapsed = start.elapsed();
    check(
        worst_mse < 1e-10 && worst_k < 1e-6 && elapsed < Duration::from_secs(30),
        format!(
            "100 reps, d=64, 2000 pairs: max held-out relative MSE {worst_mse:.2e} (< 1e-10), \
             max relative Frobenius error of K {worst_k:.2e} (< 1e-6), {elapsed:.1?} (< 30 s)"
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. brute-force skew oracle

/// Micro-instance with integer image and caption vectors, so cosine order
/// and threshold tests can be decided exactly.
struct Micro {
    attribute: Attribute,
    cardinality: usize,
    images: Vec<(String, [i64; 3], Option<usize>)>,
    captions: Vec<(String, [i64; 3], Sentiment)>,
    /// Threshold as the exact fraction `num / den`.
    eps: (i64, i64),
    k: usize,
}

fn idot(a: &[i64; 3], b: &[i64; 3]) -> i128 {
    a.iter().zip(b).map(|(x, y)| (*x as i128) * (*y as i128)).sum()
}

/// `cos(a, t) >= num/den`, decided in integers.
fn matches_exact(a: &[i64; 3], t: &[i64; 3], (num, den): (i64, i64)) -> bool {
    let s = idot(a, t);
    let at = idot(a, a) * idot(t, t);
    let (num, den) = (num as i128, den as i128);
    match (s >= 0, num >= 0) {
        (true, false) => true,
        (false, true) => false,
        // both non-negative: s/sqrt(at) >= num/den  <=>  s^2 den^2 >= num^2 at
        (true, true) => s * s * den * den >= num * num * at,
        // both negative: |s|/sqrt(at) <= |num|/den
        (false, false) => s * s * den * den <= num * num * at,
    }
}

fn on_threshold(a: &[i64; 3], t: &[i64; 3], (num, den): (i64, i64)) -> bool {
    let s = idot(a, t);
    let at = idot(a, a) * idot(t, t);
    (s >= 0) == (num >= 0) && s * s * (den as i128).pow(2) == (num as i128).pow(2) * at
}

/// Exact comparison of `cos(a, t)` and `cos(b, t)`.
fn cmp_cos(a: &[i64; 3], b: &[i64; 3], t: &[i64; 3]) -> std::cmp::Ordering {
    let (sa, sb) = (idot(a, t), idot(b, t));
    let (na, nb) = (idot(a, a), idot(b, b));
    match (sa >= 0, sb >= 0) {
        (true, false) => std::cmp::Ordering::Greater,
        (false, true) => std::cmp::Ordering::Less,
        (true, true) => (sa * sa * nb).cmp(&(sb * sb * na)),
        (false, false) => (sb * sb * na).cmp(&(sa * sa * nb)),
    }
}

struct OracleCaption {
    skipped: bool,
    matched: usize,
    k: usize,
    skews: Vec<Option<f64>>,
    skews_at_k: Vec<Option<f64>>,
}

fn oracle_skews(pool: &[(&String, &[i64; 3], usize)], chosen: &[usize], c: usize) -> Option<Vec<Option<f64>>> {
    if chosen.is_empty() {
        return None;
    }
    let n = pool.len() as f64;
    let m = chosen.len() as f64;
    Some(
        (0..c)
            .map(|l| {
                let base = pool.iter().filter(|p| p.2 == l).count();
                if base == 0 {
                    return None;
                }
                let hits = chosen.iter().filter(|&&i| pool[i].2 == l).count();
                let f_m = if hits == 0 { 1.0 / (2.0 * m) } else { hits as f64 / m };
                Some((f_m / (base as f64 / n)).ln())
            })
            .collect(),
    )
}

fn oracle_caption(inst: &Micro, t: &[i64; 3]) -> Option<OracleCaption> {
    let pool: Vec<(&String, &[i64; 3], usize)> =
        inst.images.iter().filter_map(|(id, v, l)| l.map(|l| (id, v, l))).collect();
    if pool.is_empty() {
        return None;
    }
    let matched: Vec<usize> = (0..pool.len()).filter(|&i| matches_exact(pool[i].1, t, inst.eps)).collect();
    let k = inst.k.min(pool.len());
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| cmp_cos(pool[b].1, pool[a].1, t).then_with(|| pool[a].0.cmp(pool[b].0)));
    order.truncate(k);
    let skews = oracle_skews(&pool, &matched, inst.cardinality);
    Some(OracleCaption {
        skipped: skews.is_none(),
        matched: matched.len(),
        k,
        skews: skews.unwrap_or_else(|| vec![None; inst.cardinality]),
        skews_at_k: oracle_skews(&pool, &order, inst.cardinality).expect("k >= 1"),
    })
}

fn extreme(v: &[Option<f64>], max: bool) -> f64 {
    let it = v.iter().flatten().copied();
    if max {
        it.fold(f64::NEG_INFINITY, f64::max)
    } else {
        it.fold(f64::INFINITY, f64::min)
    }
}

fn random_vector(rng: &mut Rng) -> [i64; 3] {
    loop {
        let v = [0, 1, 2].map(|_| rng.below(5) as i64 - 2);
        if v != [0, 0, 0] {
            return v;
        }
    }
}

const THRESHOLDS: [(i64, i64); 7] = [(-3, 2), (-1, 4), (0, 1), (1, 10), (1, 4), (1, 2), (3, 2)];

fn micro_instance(rng: &mut Rng) -> Micro {
    let attribute = Attribute::ALL[rng.below(3)];
    let cardinality = LabelVocabulary::fairface(attribute).cardinality();
    let n = 1 + rng.below(12);
    // Label layout: which labels may occur and how often records go unlabeled.
    let present: Vec<usize> = (0..cardinality).filter(|_| rng.below(3) > 0).collect();
    let present = if present.is_empty() { vec![rng.below(cardinality)] } else { present };
    let unlabeled_rate = [0.0, 0.0, 0.25, 0.6, 1.0][rng.below(5)];
    let mut ids: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut ids);
    let mut images: Vec<(String, [i64; 3], Option<usize>)> = Vec::with_capacity(n);
    for &id in &ids {
        let vector = if !images.is_empty() && rng.below(3) == 0 {
            // Parallel copy of an earlier image: an exact cosine tie.
            let src = images[rng.below(images.len())].1;
            let s = 1 + rng.below(3) as i64;
            src.map(|x| x * s)
        } else {
            random_vector(rng)
        };
        let label = (rng.next_f64() >= unlabeled_rate).then(|| present[rng.below(present.len())]);
        images.push((format!("img-{id:02}"), vector, label));
    }
    let captions = (0..1 + rng.below(3))
        .map(|c| (format!("cap-{c}"), random_vector(rng), Sentiment::ALL[rng.below(2)]))
        .collect();
    Micro { attribute, cardinality, images, captions, eps: THRESHOLDS[rng.below(THRESHOLDS.len())], k: 1 + rng.below(14) }
}

fn to_core(inst: &Micro) -> (EmbeddingSet, Vec<CaptionRecord>, SkewConfig) {
    let as_f = |v: &[i64; 3]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    let records = inst
        .images
        .iter()
        .map(|(id, v, l)| {
            let r = EmbeddingRecord::new(id.clone(), as_f(v));
            match l {
                Some(l) => r.with_label(inst.attribute, *l),
                None => r,
            }
        })
        .collect();
    let set = EmbeddingSet::new(3, vec![LabelVocabulary::fairface(inst.attribute)], "micro", records).unwrap();
    let captions = inst
        .captions
        .iter()
        .map(|(id, v, s)| CaptionRecord {
            id: id.clone(),
            text: id.clone(),
            vector: Some(as_f(v)),
            attribute: inst.attribute,
            sentiment: *s,
            scene: None,
        })
        .collect();
    let cfg = SkewConfig { epsilon: inst.eps.0 as f64 / inst.eps.1 as f64, k: inst.k, smoothing: Smoothing::HalfCount };
    (set, captions, cfg)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

fn close_opt(a: &[Option<f64>], b: &[Option<f64>]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| match (x, y) {
            (Some(x), Some(y)) => close(*x, *y),
            (None, None) => true,
            _ => false,
        })
}

/// Compares one instance; `Err` describes the first disagreement.
fn compare_micro(inst: &Micro) -> Result<(), String> {
    let (set, captions, cfg) = to_core(inst);
    let oracle: Vec<Option<OracleCaption>> = inst.captions.iter().map(|c| oracle_caption(inst, &c.1)).collect();
    let got = audit(&set, &captions, &cfg, &[inst.attribute]);
    let empty_pool = oracle.iter().any(Option::is_none);
    // A row whose captions all have empty match sets has no thresholded mean.
    let empty_row = !empty_pool
        && Sentiment::ALL.iter().any(|&s| {
            let mut row = inst.captions.iter().zip(&oracle).filter(|(c, _)| c.2 == s).peekable();
            row.peek().is_some() && row.all(|(_, o)| o.as_ref().unwrap().skipped)
        });
    if empty_pool || empty_row {
        return match got {
            Err(_) => Ok(()),
            Ok(_) => Err("expected an error for an empty labeled pool or an all-skipped row".into()),
        };
    }
    let mut expected_rows = 0;
    for sentiment in Sentiment::ALL {
        let idx: Vec<usize> = (0..inst.captions.len()).filter(|&i| inst.captions[i].2 == sentiment).collect();
        if idx.is_empty() {
            continue;
        }
        let used: Vec<&OracleCaption> =
            idx.iter().map(|&i| oracle[i].as_ref().unwrap()).filter(|c| !c.skipped).collect();
        expected_rows += 1;
        let report = got.as_ref().map_err(|e| format!("audit failed: {e}"))?;
        let row = report.row(inst.attribute, sentiment).ok_or("missing row")?;
        let mean = |f: &dyn Fn(&OracleCaption) -> f64, cs: &[&OracleCaption]| {
            cs.iter().map(|c| f(c)).sum::<f64>() / cs.len() as f64
        };
        let all: Vec<&OracleCaption> = idx.iter().map(|&i| oracle[i].as_ref().unwrap()).collect();
        let want = [
            mean(&|c| extreme(&c.skews, true), &used),
            mean(&|c| extreme(&c.skews, false), &used),
            mean(&|c| extreme(&c.skews_at_k, true), &all),
            mean(&|c| extreme(&c.skews_at_k, false), &all),
        ];
        let have = [row.max_skew, row.min_skew, row.max_skew_at_k, row.min_skew_at_k];
        if !want.iter().zip(&have).all(|(a, b)| close(*a, *b)) {
            return Err(format!("{sentiment}: row {have:?}, oracle {want:?}"));
        }
        if row.captions_skipped != all.len() - used.len() {
            return Err(format!("{sentiment}: {} skipped, oracle {}", row.captions_skipped, all.len() - used.len()));
        }
        for (entry, o) in row.breakdown.iter().zip(&all) {
            if entry.skipped != o.skipped
                || entry.matched != o.matched
                || entry.k != o.k
                || !close_opt(&entry.skews, &o.skews)
                || !close_opt(&entry.skews_at_k, &o.skews_at_k)
            {
                return Err(format!("caption {}: breakdown differs from the oracle", entry.caption_id));
            }
        }
    }
    match got {
        Ok(r) if r.rows.len() == expected_rows => Ok(()),
        Ok(r) => Err(format!("{} rows, oracle {expected_rows}", r.rows.len())),
        Err(e) => Err(format!("audit failed: {e}")),
    }
}

fn criterion_2() -> Outcome {
    let mut rng = Rng::new(2024);
    let (mut checked, mut regenerated, mut ties, mut failures) = (0, 0, 0, Vec::new());
    while checked < 200 {
        let inst = micro_instance(&mut rng);
        // A cosine exactly on a non-dyadic threshold has no exact f64 answer.
        let ambiguous = inst.eps == (1, 10)
            && inst.captions.iter().any(|c| inst.images.iter().any(|i| on_threshold(&i.1, &c.1, inst.eps)));
        if ambiguous {
            regenerated += 1;
            continue;
        }
        ties += usize::from(inst.images.iter().enumerate().any(|(a, x)| {
            inst.images[..a].iter().any(|y| inst.captions.iter().any(|c| cmp_cos(&x.1, &y.1, &c.1).is_eq()))
        }));
        checked += 1;
        if let Err(e) = compare_micro(&inst) {
            failures.push(format!("instance {checked}: {e}"));
        }
    }
    check(
        failures.is_empty(),
        format!(
            "200 micro-instances ({ties} with cosine ties, {regenerated} redrawn for a threshold tie): {} mismatches{}",
            failures.len(),
            failures.first().map(|f| format!(", first: {f}")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. gradient correctness

const H: f64 = 1e-5;

/// Worst coordinate of `analytic` against central differences of `f`.
#[derive(Clone, Copy, Default)]
struct Worst {
    rel: f64,
    analytic: f64,
    numeric: f64,
    coordinates: usize,
}

impl Worst {
    fn merge(self, other: Worst) -> Worst {
        let coordinates = self.coordinates + other.coordinates;
        let top = if other.rel > self.rel { other } else { self };
        Worst { coordinates, ..top }
    }
}

fn central_difference_error(mut f: impl FnMut(&[f64]) -> f64, params: &[f64], analytic: &[f64]) -> Worst {
    let mut x = params.to_vec();
    let mut worst = Worst { coordinates: x.len(), ..Worst::default() };
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + H;
        let plus = f(&x);
        x[i] = orig - H;
        let minus = f(&x);
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * H);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-8);
        let rel = if rel.is_nan() { f64::INFINITY } else { rel };
        if rel > worst.rel {
            worst = Worst { rel, analytic: analytic[i], numeric, coordinates: x.len() };
        }
    }
    worst
}

/// Smallest distance of any ReLU pre-activation or top-two logit gap from a
/// kink, over every row of `x` (inputs already normalized).
fn kink_margin(pac: &PacModel, x: &Matrix) -> f64 {
    let mut margin = f64::INFINITY;
    let trunk = pac.trunk.forward(x).unwrap();
    margin = trunk.as_slice().iter().fold(margin, |m, v| m.min(v.abs()));
    let hidden = Matrix::from_vec(trunk.rows(), trunk.cols(), trunk.as_slice().iter().map(|v| v.max(0.0)).collect())
        .unwrap();
    for head in &pac.heads {
        let pre = head.fc.forward(&hidden).unwrap();
        margin = pre.as_slice().iter().fold(margin, |m, v| m.min(v.abs()));
        let h2 = Matrix::from_vec(pre.rows(), pre.cols(), pre.as_slice().iter().map(|v| v.max(0.0)).collect())
            .unwrap();
        let logits = head.out.forward(&h2).unwrap();
        for i in 0..logits.rows() {
            let mut row = logits.row(i).to_vec();
            row.sort_by(|a, b| b.total_cmp(a));
            margin = margin.min(row[0] - row[1]);
        }
    }
    margin
}

fn random_records(rng: &mut Rng, n: usize, d: usize) -> Vec<EmbeddingRecord> {
    (0..n)
        .map(|i| {
            let mut r = EmbeddingRecord::new(format!("g{i}"), (0..d).map(|_| rng.normal()).collect());
            for (a, c) in [(Attribute::Race, 7), (Attribute::Gender, 2), (Attribute::Age, 4)] {
                if rng.below(4) > 0 {
                    r = r.with_label(a, rng.below(c));
                }
            }
            r
        })
        .collect()
}

fn normalized_rows(records: &[&EmbeddingRecord]) -> Matrix {
    let rows: Vec<Vec<f64>> = records
        .iter()
        .map(|r| {
            let n = r.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.vector.iter().map(|v| v / n).collect()
        })
        .collect();
    Matrix::from_rows(&rows).unwrap()
}

const MIN_MARGIN: f64 = 1e-3;

fn criterion_3() -> Outcome {
    let vocabs = LabelVocabulary::fairface_all();
    let arch = PacArch { hidden: 12, head_hidden: 6 };
    let (mut pac_worst, mut arl_worst, mut skipped) = (Worst::default(), Worst::default(), 0usize);
    let activations = [
        ActivationKind::Identity,
        ActivationKind::Gelu,
        ActivationKind::Tanh,
        ActivationKind::Custom("quick_gelu".into()),
    ];
    let mut done = 0;
    let mut seed = 0u64;
    while done < 50 {
        seed += 1;
        let mut rng = Rng::new(seed);
        let pac = PacModel::init(8, &vocabs, arch, &mut rng);
        let records = random_records(&mut rng, 6, 8);
        let refs: Vec<&EmbeddingRecord> = records.iter().collect();

        let mut arl = ArlModel::zeros(
            8,
            ActivationSpec { kind: activations[done % activations.len()].clone(), dropout_rate: 0.0 },
        );
        arl.set_flat_params(&(0..72).map(|_| 0.2 * rng.normal()).collect::<Vec<_>>()).unwrap();
        let phi: Vec<EmbeddingRecord> = records
            .iter()
            .map(|r| EmbeddingRecord { vector: arl.forward(&r.vector).unwrap().phi_bar, ..r.clone() })
            .collect();
        let phi_refs: Vec<&EmbeddingRecord> = phi.iter().collect();
        // Argmax ties and ReLU kinks make the loss non-differentiable.
        if kink_margin(&pac, &normalized_rows(&refs)) < MIN_MARGIN
            || kink_margin(&pac, &normalized_rows(&phi_refs)) < MIN_MARGIN
        {
            skipped += 1;
            continue;
        }

        let batch = PacBatch::from_records(&pac, &refs).unwrap();
        let (_, grads) = pac_backward(&pac, &batch).unwrap();
        let mut probe = pac.clone();
        pac_worst = pac_worst.merge(central_difference_error(
            |p| {
                probe.set_flat_params(p).unwrap();
                pac_loss(&probe, &batch).unwrap()
            },
            &pac.flat_params(),
            &grads.flatten(),
        ));

        let frozen: FrozenPac = pac.freeze();
        let batch = ArlBatch::from_records(&frozen, &refs).unwrap();
        let weights = ArlLossWeights::default();
        let (_, grads) = arl_backward(&arl, &frozen, &batch, &weights).unwrap();
        let mut probe = arl.clone();
        arl_worst = arl_worst.merge(central_difference_error(
            |p| {
                probe.set_flat_params(p).unwrap();
                arl_loss(&probe, &frozen, &batch, &weights).unwrap().total
            },
            &arl.flat_params(),
            &grads.flatten(),
        ));
        done += 1;
    }
    let describe = |w: &Worst| {
        format!(
            "max rel error {:.2e} over {} coordinates (analytic {:.6e}, numeric {:.6e})",
            w.rel, w.coordinates, w.analytic, w.numeric
        )
    };
    check(
        pac_worst.rel < 1e-4 && arl_worst.rel < 1e-4,
        format!(
            "50 instances at d=8, h=1e-5 ({skipped} redrawn near a kink or argmax tie): classifier {}; learner {} (< 1e-4)",
            describe(&pac_worst),
            describe(&arl_worst)
        ),
    )
}

// ---------------------------------------------------------------------------
// 4 and 5. end-to-end run on the planted set

struct EndToEnd {
    synth: SynthSpec,
    data: SynthOutput,
    pac: FrozenPac,
    baseline_val: BTreeMap<Attribute, f64>,
    arl: ArlModel,
    log: Vec<ArlEpoch>,
    debiased: EmbeddingSet,
    before: SkewReport,
    after: SkewReport,
    elapsed: Duration,
}

fn end_to_end() -> &'static EndToEnd {
    static RUN: OnceLock<EndToEnd> = OnceLock::new();
    RUN.get_or_init(|| {
        let synth = SynthSpec::default();
        let data = generate(&synth).expect("synthetic set");
        let start = Instant::now();
        let (pac, pac_log) = train_pac(&data.images, &PacTrainConfig::default()).expect("classifier training");
        let baseline_val = pac_log.last().expect("epochs").val_accuracy.clone();
        let pac = pac.freeze();
        let (arl, log) = train_arl(&data.images, &pac, &ArlTrainConfig::default()).expect("learner training");
        let (debiased, _) = debias_set(&arl, &data.images).expect("debias");
        let cfg = SkewConfig::default();
        let attrs = data.images.attributes();
        let before = audit(&data.images, &data.captions, &cfg, &attrs).expect("audit before");
        let after = audit(&debiased, &data.captions, &cfg, &attrs).expect("audit after");
        let elapsed = start.elapsed();
        EndToEnd { synth, data, pac, baseline_val, arl, log, debiased, before, after, elapsed }
    })
}

/// Frequency of the most common label in `split`.
fn chance(set: &EmbeddingSet, attribute: Attribute, split: Split) -> f64 {
    let sub = set.subset(split);
    let counts = sub.label_counts(attribute).unwrap();
    *counts.iter().max().unwrap() as f64 / counts.iter().sum::<usize>() as f64
}

fn criterion_4() -> Outcome {
    let run = end_to_end();
    let mut notes = Vec::new();
    let mut ok = true;

    let baseline_ok = run.baseline_val.values().all(|&a| a >= 0.95);
    ok &= baseline_ok;
    notes.push(format!("baseline val accuracy {:?} (>= 0.95)", rounded(&run.baseline_val)));

    let after = pac_accuracy(&run.pac, &run.debiased, Some(Split::Test)).unwrap();
    for (attr, acc) in &after {
        let limit = chance(&run.debiased, *attr, Split::Test) + 0.10;
        if *acc > limit {
            ok = false;
            notes.push(format!("{attr} accuracy on debiased {acc:.3} > chance+10pts {limit:.3}"));
        }
    }
    notes.push(format!("debiased test accuracy {:?}", rounded(&after)));

    let cos = run
        .data
        .images
        .records()
        .iter()
        .zip(run.debiased.records())
        .map(|(a, b)| cosine_similarity(&a.vector, &b.vector).unwrap())
        .sum::<f64>()
        / run.debiased.len() as f64;
    ok &= cos >= 0.95;
    notes.push(format!("mean cosine {cos:.4} (>= 0.95)"));

    let delta = SkewDelta::between(&run.before, &run.after).unwrap();
    let worst = delta.rows.iter().map(|r| r.max_skew_reduction).fold(f64::INFINITY, f64::min);
    ok &= worst >= 0.5;
    notes.push(format!("smallest MaxSkew reduction {:.1}% (>= 50%)", 100.0 * worst));

    let best_epoch = run.log.iter().filter(|e| e.best).map(|e| e.epoch).max().unwrap_or(0);
    notes.push(format!("learner best epoch {best_epoch} of {}", run.log.len() - 1));
    ok &= run.elapsed < Duration::from_secs(120);
    notes.push(format!("runtime {:.1?} (< 120 s)", run.elapsed));
    check(ok, notes.join("; "))
}

fn rounded(m: &BTreeMap<Attribute, f64>) -> BTreeMap<Attribute, f64> {
    m.iter().map(|(k, v)| (*k, (v * 1000.0).round() / 1000.0)).collect()
}

fn criterion_5() -> Outcome {
    let run = end_to_end();
    let (task, records) = generate_zeroshot(&run.synth, &run.data.oracle, &ZeroShotSpec::default()).unwrap();
    let report = accuracy_drop_report(&[(task, records)], &run.arl).unwrap();
    let t = &report.tasks[0];
    check(
        report.mean_drop_points <= 3.0,
        format!(
            "top-1 {:.1}% -> {:.1}%, drop {:.2} points (<= 3)",
            100.0 * t.accuracy_before,
            100.0 * t.accuracy_after,
            report.mean_drop_points
        ),
    )
}

// ---------------------------------------------------------------------------
// 6 and 7. CLI runs

fn fairembed(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_fairembed"))
        .current_dir(dir)
        .args(args)
        .env_remove("FAIREMBED_REPORT_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| format!("spawning fairembed: {e}"))?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("`fairembed {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn write_config(dir: &Path) -> Result<(), String> {
    fs::create_dir_all(dir.join("data")).map_err(|e| e.to_string())?;
    let cfg = serde_json::json!({
        "synth": {},
        "seed": 7,
        "probe": {"fit": {"repetitions": 3}}
    });
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(&cfg).unwrap()).map_err(|e| e.to_string())
}

fn pipeline(dir: &Path, mode: &str) -> Result<(), String> {
    let mode_set = format!("mode={mode}");
    let reports = format!("paths.reports=reports-{mode}");
    for cmd in ["train-pac", "train-arl", "debias", "audit", "zeroshot"] {
        fairembed(dir, &[cmd, "--config", "run.json", "--set", &mode_set, "--set", &reports])?;
    }
    Ok(())
}

fn read_json(path: &Path) -> Result<serde_json::Value, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn criterion_6() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    write_config(dir)?;
    fairembed(dir, &["synth", "--config", "run.json"])?;
    let mut lines = Vec::new();
    let mut keys = Vec::new();
    for mode in ["joint", "sequential"] {
        pipeline(dir, mode)?;
        let delta = read_json(&dir.join(format!("reports-{mode}/audit-delta.json")))?;
        let rec = &delta["reconstruction"];
        let rows = delta["delta"]["rows"].as_array().ok_or("delta rows missing")?;
        if rec["mean_l2"].as_f64().is_none() || rows.is_empty() {
            return Err(format!("{mode}: delta report lacks reconstruction or skew rows"));
        }
        keys.push(rows.iter().map(|r| (r["attribute"].clone(), r["sentiment"].clone())).collect::<Vec<_>>());
        let max_after = rows.iter().filter_map(|r| r["max_skew_after"].as_f64()).fold(0.0, f64::max);
        let zs = read_json(&dir.join(format!("reports-{mode}/zeroshot.json")))?;
        lines.push(format!(
            "{mode}: mean |e - phi| {:.4}, largest MaxSkew after {:.4}, zero-shot drop {:.2} pts",
            rec["mean_l2"].as_f64().unwrap(),
            max_after,
            zs["drop"]["mean_drop_points"].as_f64().unwrap_or(f64::NAN)
        ));
    }
    let comparable = keys[0] == keys[1];
    if !dir.join("checkpoints/arl-chain.bin").is_file() || !dir.join("checkpoints/pac-race.bin").is_file() {
        return Err("sequential mode did not write per-attribute checkpoints".into());
    }
    check(comparable, format!("{} (rows comparable: {comparable})", lines.join("; ")))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) {
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            if path.file_name().is_some_and(|n| n == "manifests") {
                continue;
            }
            collect_files(root, &path, out);
        } else {
            out.push(path.strip_prefix(root).unwrap().to_path_buf());
        }
    }
}

fn full_pipeline(dir: &Path) -> Result<(), String> {
    write_config(dir)?;
    for cmd in ["synth", "train-pac", "train-arl", "debias", "audit", "probe", "zeroshot"] {
        fairembed(dir, &[cmd, "--config", "run.json"])?;
    }
    Ok(())
}

fn criterion_7() -> Outcome {
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    full_pipeline(a.path())?;
    full_pipeline(b.path())?;
    let (mut fa, mut fb) = (Vec::new(), Vec::new());
    collect_files(a.path(), a.path(), &mut fa);
    collect_files(b.path(), b.path(), &mut fb);
    fa.sort();
    fb.sort();
    if fa != fb {
        return Err(format!("file lists differ: {fa:?} vs {fb:?}"));
    }
    let differing: Vec<String> = fa
        .iter()
        .filter(|p| fs::read(a.path().join(p)).unwrap() != fs::read(b.path().join(p)).unwrap())
        .map(|p| p.display().to_string())
        .collect();
    let hash = |d: &Path| read_json(&d.join("reports/manifests/train-arl.json")).map(|m| m["config_sha256"].clone());
    let same_hash = hash(a.path())? == hash(b.path())?;
    check(
        differing.is_empty() && same_hash,
        format!(
            "{} checkpoint, data and report files compared: {} differ{}; manifest config hashes equal: {same_hash}",
            fa.len(),
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(" ({})", differing.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. unbiased sanity

fn criterion_8() -> Outcome {
    let mut worst = 0.0f64;
    let mut at = (0, Attribute::Gender, Sentiment::Positive);
    for seed in 0..10 {
        let spec = SynthSpec { bias_strength: BiasStrength::Uniform(0.0), seed, ..SynthSpec::default() };
        let data = generate(&spec).map_err(|e| e.to_string())?;
        let report = audit(&data.images, &data.captions, &SkewConfig::default(), &data.images.attributes())
            .map_err(|e| e.to_string())?;
        for row in &report.rows {
            if row.max_skew.abs() > worst {
                worst = row.max_skew.abs();
                at = (seed, row.attribute, row.sentiment);
            }
        }
    }
    check(
        worst < 0.05,
        format!("10 seeds, N=5000: largest |MaxSkew| {worst:.4} (seed {}, {} {}) (< 0.05)", at.0, at.1, at.2),
    )
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("probe fidelity", criterion_1),
        ("skew oracle equivalence", criterion_2),
        ("gradient correctness", criterion_3),
        ("end-to-end debiasing", criterion_4),
        ("zero-shot retention", criterion_5),
        ("joint vs sequential", criterion_6),
        ("determinism", criterion_7),
        ("unbiased skew sanity", criterion_8),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f))
            .unwrap_or_else(|p| Err(format!("panicked: {}", panic_message(&p))));
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n} ({name}): {tag} [{:.1?}] {detail}", start.elapsed());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

fn panic_message(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
}
