//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! The desk-scale learning run pins its numbers in
//! `tests/fixtures/desk_scale.json`. When the file is absent the run writes
//! it; later runs must reproduce it.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::time::Instant;

use oshp_core::autograd::Tape;
use oshp_core::dual_metric::{agm_forward, beta_schedule, npm_logits, similarity_map, AgmHead, NpmHead, PredictionMap};
use oshp_core::embedding::EncoderConfig;
use oshp_core::episodic_data::{
    build_meta_test_list, generate_synthetic_samples, tailor_samples, Sample, SyntheticConfig,
};
use oshp_core::evaluation::{run_meta_test, FoldRow};
use oshp_core::objectives::nca_contrastive;
use oshp_core::params::ParamStore;
use oshp_core::prototypes::{masked_average_pool, Prototype};
use oshp_core::trainer::{BetaPolicy, FgsInference, ModelConfig};
use oshp_core::{
    derive_binary_mask, Checkpoint, Dataset, Episode, EvalReport, FoldSpec, LabelMap, LossWeights, MetricSpace, Model, OneShotParser,
    Phase, PrototypeBank, Split, Tensor, TestPair, TrainConfig, Trainer, Way,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_tensor(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn random_vec(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
}

// ---------------------------------------------------------------------------

fn c1_pool_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (d, h, w) = (rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..9));
        let feats = random_tensor(&mut rng, d, h, w);
        let labels: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..4)).collect();
        let class = labels[rng.random_range(0..labels.len())];
        let mask = LabelMap::new(h, w, labels).unwrap();
        let p = masked_average_pool(&feats, &mask, class, MetricSpace::Fgs).map_err(|e| e.to_string())?;
        for c in 0..d {
            let mut sum = 0.0;
            let mut n = 0usize;
            for y in 0..h {
                for x in 0..w {
                    if mask.get(y, x) == class {
                        sum += feats.at(c, y, x);
                        n += 1;
                    }
                }
            }
            worst = worst.max((p.vector[c] - sum / n as f64).abs());
        }
    }
    check(worst < 1e-6, format!("max abs error {worst:.3e} over 100 cases"))
}

fn c2_momentum_recursion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst: f64 = 0.0;
    for &alpha in &[0.0, 0.001, 0.5] {
        let start = random_vec(&mut rng, 16);
        let target = random_vec(&mut rng, 16);
        let gap0: f64 = start.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let mut bank = PrototypeBank::new(alpha, 0).unwrap();
        bank.momentum_update(&Prototype::new_static(1, MetricSpace::Fgs, start), 0)
            .map_err(|e| e.to_string())?;
        let p = Prototype::new_static(1, MetricSpace::Fgs, target.clone());
        for n in 1..=200usize {
            bank.momentum_update(&p, 0).map_err(|e| e.to_string())?;
            let entry = bank.get(MetricSpace::Fgs, 1).unwrap();
            let gap: f64 = entry.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            worst = worst.max((gap - (1.0 - alpha).powi(n as i32) * gap0).abs());
        }
    }
    check(
        worst <= 1e-9,
        format!("max deviation from (1-alpha)^n decay {worst:.3e} (alpha 0, 0.001, 0.5; n <= 200)"),
    )
}

fn heads(rng: &mut ChaCha8Rng, dim: usize) -> (ParamStore, AgmHead, NpmHead) {
    let mut store = ParamStore::new();
    let agm = AgmHead::new(&mut store, rng, "agm", dim, 2);
    let npm = NpmHead::new(&mut store, "npm", 1.0);
    let omega = (rng.random_range(0.5..5.0), rng.random_range(-1.0..1.0));
    let omega_bg = (rng.random_range(0.5..5.0), rng.random_range(-1.0..1.0));
    npm.set(&mut store, omega, omega_bg);
    (store, agm, npm)
}

/// AGM and NPM logits for `protos` over `feats`.
fn head_logits(
    store: &ParamStore,
    agm: &AgmHead,
    npm: &NpmHead,
    feats: &Tensor,
    protos: &[Vec<f64>],
) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let f = tape.constant(feats.clone());
    let p: Vec<_> = protos.iter().map(|v| tape.constant(Tensor::vector(v.clone()))).collect();
    let a = agm_forward(&mut tape, &bound, agm, f, &p).unwrap();
    let sims: Vec<_> = p.iter().map(|&q| similarity_map(&mut tape, f, q).unwrap()).collect();
    let n = npm_logits(&mut tape, &bound, npm, &sims).unwrap();
    (tape.value(a).clone(), tape.value(n).clone())
}

fn c3_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut worst: f64 = 0.0;
    for classes in 2..=6usize {
        for _ in 0..5 {
            let dim = 6;
            let (store, agm, npm) = heads(&mut rng, dim);
            let feats = random_tensor(&mut rng, dim, 5, 4);
            let protos: Vec<Vec<f64>> = (1..classes).map(|_| random_vec(&mut rng, dim)).collect();
            let (a, n) = head_logits(&store, &agm, &npm, &feats, &protos);
            let ids: Vec<u8> = (0..classes as u8).collect();
            for logits in [a, n] {
                let pred = PredictionMap::from_logits(&logits, &ids).map_err(|e| e.to_string())?;
                worst = worst.max(pred.normalization_error());
            }
        }
    }
    check(worst < 1e-6, format!("max |sum - 1| {worst:.3e} for class counts 2..=6"))
}

fn c4_equivariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut cases = 0;
    for k in 2..=5usize {
        for _ in 0..5 {
            let dim = 6;
            let (store, agm, npm) = heads(&mut rng, dim);
            let feats = random_tensor(&mut rng, dim, 4, 5);
            let protos: Vec<Vec<f64>> = (0..k).map(|_| random_vec(&mut rng, dim)).collect();
            let mut perm: Vec<usize> = (0..k).collect();
            while perm.iter().enumerate().all(|(i, &p)| i == p) {
                rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            }
            let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| protos[i].clone()).collect();
            let (a, n) = head_logits(&store, &agm, &npm, &feats, &protos);
            let (ap, np) = head_logits(&store, &agm, &npm, &feats, &permuted);
            for (name, base, moved) in [("AGM", &a, &ap), ("NPM", &n, &np)] {
                if base.channel(0) != moved.channel(0) {
                    return Err(format!("{name} background channel changed under permutation {perm:?}"));
                }
                for (j, &i) in perm.iter().enumerate() {
                    if moved.channel(j + 1) != base.channel(i + 1) {
                        return Err(format!("{name} channel {} is not channel {} permuted", j + 1, i + 1));
                    }
                }
            }
            cases += 1;
        }
    }
    Ok(format!("exact channel permutation for both heads in {cases} cases (2..=5 foreground prototypes)"))
}

// ---------------------------------------------------------------------------

fn block_mask(h: usize, w: usize, blocks: &[(usize, usize, usize, usize, u8)]) -> LabelMap {
    let mut m = LabelMap::filled(h, w, 0);
    for &(y0, x0, y1, x1, c) in blocks {
        for y in y0..y1 {
            for x in x0..x1 {
                m.set(y, x, c);
            }
        }
    }
    m
}

fn c5_gradient_check() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let config = ModelConfig {
        encoder: EncoderConfig {
            input_size: (8, 8),
            feature_dim: 4,
            stage_widths: vec![4],
            refine_layers: 0,
            downsample_factor: 2,
            cgs_dim: 4,
            fgs_dim: 4,
        },
        head_depth: 1,
        ..ModelConfig::default()
    };
    let mut model = Model::new(&config, [1, 2].into(), 0.001, 3, FgsInference::Npm, &mut rng).map_err(|e| e.to_string())?;
    let n_params = model.params.num_scalars();
    if n_params > 5000 {
        return Err(format!("{n_params} parameters exceed the 5k budget"));
    }
    let support_mask = block_mask(8, 8, &[(0, 0, 4, 4, 1), (4, 4, 8, 8, 2)]);
    let query_mask = block_mask(8, 8, &[(0, 4, 4, 8, 1), (4, 0, 8, 4, 2)]);
    let episode = Episode {
        support_image: random_tensor(&mut rng, 3, 8, 8),
        support_human: derive_binary_mask(&support_mask),
        support_mask,
        query_image: random_tensor(&mut rng, 3, 8, 8),
        query_human: Some(derive_binary_mask(&query_mask)),
        query_mask: Some(query_mask),
        class_set: vec![0, 1, 2],
        support_index: 0,
        query_index: 1,
    };
    let weights = LossWeights::default();
    let beta = 0.5;
    let loss_at = |m: &Model| -> Result<f64, String> {
        let mut bank = m.bank.clone();
        let l = m
            .episode_loss(&mut bank, &episode, 0, beta, &weights)
            .map_err(|e| e.to_string())?
            .ok_or("episode skipped")?;
        Ok(l.report.total)
    };
    let analytic: Vec<f64> = {
        let mut bank = model.bank.clone();
        let l = model
            .episode_loss(&mut bank, &episode, 0, beta, &weights)
            .map_err(|e| e.to_string())?
            .ok_or("episode skipped")?;
        if l.report.nca == 0.0 || l.report.agm_cgs == 0.0 || l.report.agm_fgs == 0.0 || l.report.npm_fgs == 0.0 {
            return Err(format!("some loss term is inactive: {:?}", l.report));
        }
        l.gradients(&model.params).iter().flat_map(|t| t.data().to_vec()).collect()
    };
    let h = 1e-6;
    let mut numeric = Vec::with_capacity(n_params);
    let n_tensors = model.params.len();
    for t in 0..n_tensors {
        let len = model.params.iter().nth(t).unwrap().value.len();
        for i in 0..len {
            let orig = model.params.iter().nth(t).unwrap().value.data()[i];
            model.params.iter_mut().nth(t).unwrap().value.data_mut()[i] = orig + h;
            let up = loss_at(&model)?;
            model.params.iter_mut().nth(t).unwrap().value.data_mut()[i] = orig - h;
            let down = loss_at(&model)?;
            model.params.iter_mut().nth(t).unwrap().value.data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let norm_a: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let norm_n: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let rel = diff / norm_a.max(norm_n);
    let secs = start.elapsed().as_secs_f64();
    check(
        rel < 1e-5 && secs < 120.0,
        format!("{n_params} parameters, relative error {rel:.3e}, {secs:.1}s"),
    )
}

fn c6_beta_schedule() -> Outcome {
    let b = |e, m| beta_schedule(e, m).unwrap();
    let ends = b(0, 8) == 1.0 && b(8, 8) == 0.0 && b(0, 50) == 1.0 && b(50, 50) == 0.0;
    let interior = b(2, 8) == 0.75 && b(4, 8) == 0.5 && b(6, 8) == 0.25 && b(25, 50) == 0.5;
    let trainer = Trainer::new(
        TrainConfig {
            max_epoch: 8,
            ..TrainConfig::default()
        },
        [1].into(),
    )
    .unwrap();
    let logged = (0..8).all(|e| trainer.beta(e).unwrap() == b(e, 8));
    check(
        ends && interior && logged,
        format!("endpoints {ends}, interior points 2/8, 4/8, 6/8, 25/50 {interior}, trainer agrees {logged}"),
    )
}

fn c7_nca() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let tau = 0.1;
    let single = nca_contrastive(&[random_vec(&mut rng, 8)], &[random_vec(&mut rng, 8)], tau).unwrap();
    let mut worst_ident: f64 = 0.0;
    for k in 2..=6usize {
        let p = random_vec(&mut rng, 8);
        let q: Vec<Vec<f64>> = (0..k).map(|_| random_vec(&mut rng, 8)).collect();
        let l = nca_contrastive(&q, &vec![p; k], tau).unwrap();
        worst_ident = worst_ident.max((l - (k as f64).ln()).abs());
    }
    let mut worst_scale: f64 = 0.0;
    for k in 2..=6usize {
        let q: Vec<Vec<f64>> = (0..k).map(|_| random_vec(&mut rng, 8)).collect();
        let s: Vec<Vec<f64>> = (0..k).map(|_| random_vec(&mut rng, 8)).collect();
        let base = nca_contrastive(&q, &s, tau).unwrap();
        for c in [1e-3, 0.37, 2.5, 1e3] {
            let sc = |v: &Vec<Vec<f64>>| v.iter().map(|x| x.iter().map(|a| a * c).collect()).collect::<Vec<Vec<f64>>>();
            let l = nca_contrastive(&sc(&q), &sc(&s), tau).unwrap();
            worst_scale = worst_scale.max((l - base).abs());
        }
    }
    check(
        single.abs() < 1e-12 && worst_ident <= 1e-9 && worst_scale <= 1e-9,
        format!(
            "single class {single:.1e}, identical prototypes |l - ln K| {worst_ident:.1e}, rescaling {worst_scale:.1e}"
        ),
    )
}

// ---------------------------------------------------------------------------

/// Parser whose predictions are a fixed function of the episode.
struct Scripted;

impl Scripted {
    fn predict(support: usize, query: usize, class_set: &[u8], h: usize, w: usize) -> LabelMap {
        let mut rng = ChaCha8Rng::seed_from_u64((support * 1000 + query) as u64);
        let data = (0..h * w).map(|_| class_set[rng.random_range(0..class_set.len())]).collect();
        LabelMap::new(h, w, data).unwrap()
    }
}

impl OneShotParser for Scripted {
    fn parse(&self, e: &Episode) -> oshp_core::Result<LabelMap> {
        Ok(Self::predict(
            e.support_index,
            e.query_index,
            &e.class_set,
            e.query_image.height(),
            e.query_image.width(),
        ))
    }
}

fn c8_metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let (h, w, n_classes) = (6, 7, 6u8);
    let mut samples = Vec::new();
    for (k, split) in [Split::MetaTestSupport, Split::MetaTestQuery].iter().cycle().take(20).enumerate() {
        let mask = LabelMap::new(h, w, (0..h * w).map(|_| rng.random_range(0..n_classes)).collect()).unwrap();
        samples.push(Sample {
            id: format!("s{k}"),
            image: Tensor::zeros(3, h, w),
            mask,
            human: None,
            split: *split,
        });
    }
    let data = Dataset {
        class_names: (0..n_classes).map(|c| if c == 0 { "background".into() } else { format!("c{c}") }).collect(),
        samples,
    };
    let fold = FoldSpec::identity(n_classes as usize, [4, 5]);
    let pairs: Vec<TestPair> = (0..50)
        .map(|_| {
            let s = 2 * rng.random_range(0..10);
            let q = 2 * rng.random_range(0..10) + 1;
            let mut cs: Vec<u8> = data.samples[s].mask.unique().into_iter().collect();
            if cs[0] != 0 {
                cs.insert(0, 0);
            }
            let target = cs[rng.random_range(1..cs.len())];
            TestPair {
                support_index: s,
                query_index: q,
                target,
                class_set: cs,
            }
        })
        .collect();

    for protocol in [Way::KWay, Way::OneWay] {
        let scores =
            run_meta_test(&Scripted, &data, &pairs, protocol, &fold, None).map_err(|e| e.to_string())?;
        // brute force: full confusion matrix per protocol
        let n = n_classes as usize;
        let mut conf = vec![vec![0u64; n]; n];
        let mut evaluated = BTreeSet::new();
        let mut biou = Vec::new();
        for p in &pairs {
            let cs = match protocol {
                Way::KWay => p.class_set.clone(),
                Way::OneWay => vec![0, p.target],
            };
            evaluated.extend(cs.iter().copied());
            let pred = Scripted::predict(p.support_index, p.query_index, &cs, h, w);
            let raw = &data.samples[p.query_index].mask;
            // 2x2 foreground/background confusion
            let mut bin = [[0u64; 2]; 2];
            for i in 0..h * w {
                let g = if cs.contains(&raw.data()[i]) { raw.data()[i] } else { 0 };
                let pr = pred.data()[i];
                conf[g as usize][pr as usize] += 1;
                bin[(g != 0) as usize][(pr != 0) as usize] += 1;
            }
            let iou = |k: usize| {
                let u = bin[k][0] + bin[k][1] + bin[0][k] + bin[1][k] - bin[k][k];
                if u == 0 { 1.0 } else { bin[k][k] as f64 / u as f64 }
            };
            biou.push((iou(0) + iou(1)) / 2.0);
        }
        let mut oracle_iou = BTreeMap::new();
        for &c in &evaluated {
            let c = c as usize;
            let tp = conf[c][c];
            let row: u64 = conf[c].iter().sum();
            let col: u64 = conf.iter().map(|r| r[c]).sum();
            let union = row + col - tp;
            if scores.confusion.counts(c as u8) != Some((tp, union)) {
                return Err(format!(
                    "{protocol:?} class {c}: counts {:?}, oracle {:?}",
                    scores.confusion.counts(c as u8),
                    (tp, union)
                ));
            }
            if union > 0 {
                oracle_iou.insert(c as u8, tp as f64 / union as f64);
            }
        }
        let mean = |set: &BTreeSet<u8>| {
            let v: Vec<f64> = set.iter().filter_map(|c| oracle_iou.get(c).copied()).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let total: u64 = conf.iter().flatten().sum();
        let correct: u64 = (0..n).map(|c| conf[c][c]).sum();
        let acc = correct as f64 / total as f64;
        if scores.per_class_iou != oracle_iou
            || scores.novel_miou != mean(&fold.novel_classes)
            || scores.human_miou != mean(&fold.human_classes())
            || scores.accuracy != Some(acc)
        {
            return Err(format!("{protocol:?} scores differ from the confusion-matrix oracle"));
        }
        if protocol == Way::OneWay {
            let b = biou.iter().sum::<f64>() / biou.len() as f64;
            if scores.binary_iou != Some(b) {
                return Err(format!("Binary-IoU {:?} vs oracle {b}", scores.binary_iou));
            }
        }
    }
    Ok("mIoU, accuracy and Binary-IoU equal the oracle on 50 pairs for both protocols".into())
}

// ---------------------------------------------------------------------------
// desk scale

struct Bench {
    train: Dataset,
    test: Dataset,
    fold: FoldSpec,
    pairs: Vec<TestPair>,
}

fn bench() -> Bench {
    let synth = SyntheticConfig::default();
    let raw = generate_synthetic_samples(&synth, 1).unwrap();
    let novel: Vec<u8> = ["hat", "skirt"]
        .iter()
        .map(|n| raw.class_names.iter().position(|c| c == n).unwrap() as u8)
        .collect();
    let fold = FoldSpec::identity(raw.class_names.len(), novel);
    let train = tailor_samples(&raw, &fold, Phase::MetaTrain).unwrap();
    let test = tailor_samples(&raw, &fold, Phase::MetaTest).unwrap();
    let pairs = build_meta_test_list(&test, &fold, 20, 3).unwrap();
    Bench {
        train,
        test,
        fold,
        pairs,
    }
}

fn desk_config(seed: u64) -> TrainConfig {
    let mut c = TrainConfig {
        seed,
        max_epoch: 30,
        episodes_per_epoch: 40,
        initial_lr: 0.05,
        max_grad_norm: Some(5.0),
        alpha: 0.01,
        ..TrainConfig::default()
    };
    c.model.encoder.feature_dim = 32;
    c.model.encoder.cgs_dim = 32;
    c.model.encoder.fgs_dim = 32;
    c
}

struct RunResult {
    epoch_losses: Vec<f64>,
    scores: oshp_core::MetaTestScores,
    secs: f64,
}

fn train_and_test(b: &Bench, config: TrainConfig) -> Result<RunResult, String> {
    let start = Instant::now();
    let mut t = Trainer::new(config, b.fold.base_classes.clone()).map_err(|e| e.to_string())?;
    let summaries = t
        .train(&b.train, &mut |_| Ok(()), &mut |_| {})
        .map_err(|e| e.to_string())?;
    let scores = run_meta_test(&t.model, &b.test, &b.pairs, Way::KWay, &b.fold, None).map_err(|e| e.to_string())?;
    Ok(RunResult {
        epoch_losses: summaries.iter().map(|s| s.mean_loss.total).collect(),
        scores,
        secs: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct DeskFixture {
    untrained_novel_miou: f64,
    untrained_human_miou: f64,
    trained_novel_miou: f64,
    trained_human_miou: f64,
    smoothed_loss: Vec<f64>,
}

fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/desk_scale.json")
}

fn c9_desk_scale(b: &Bench) -> Outcome {
    let config = desk_config(1);
    let mut untrained = Trainer::new(config.clone(), b.fold.base_classes.clone())
        .map_err(|e| e.to_string())?
        .model;
    untrained.populate_bank(&b.train).map_err(|e| e.to_string())?;
    let base = run_meta_test(&untrained, &b.test, &b.pairs, Way::KWay, &b.fold, None).map_err(|e| e.to_string())?;
    let run = train_and_test(b, config)?;
    let smoothed: Vec<f64> = run.epoch_losses.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    let got = DeskFixture {
        untrained_novel_miou: base.novel_miou.unwrap_or(0.0),
        untrained_human_miou: base.human_miou.unwrap_or(0.0),
        trained_novel_miou: run.scores.novel_miou.unwrap_or(0.0),
        trained_human_miou: run.scores.human_miou.unwrap_or(0.0),
        smoothed_loss: smoothed.clone(),
    };
    let path = fixture_path();
    let pinned = if path.exists() {
        let text = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
        let want: DeskFixture = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        if want != got {
            return Err(format!("run differs from the pinned fixture: got {got:?}, pinned {want:?}"));
        }
        "matches pinned fixture"
    } else {
        std::fs::create_dir_all(path.parent().unwrap()).map_err(|e| e.to_string())?;
        std::fs::write(&path, serde_json::to_string_pretty(&got).unwrap()).map_err(|e| e.to_string())?;
        "fixture pinned by this run"
    };
    let beats = |t: f64, u: f64| t > u && t >= 2.0 * u;
    let novel_ok = beats(got.trained_novel_miou, got.untrained_novel_miou);
    let human_ok = beats(got.trained_human_miou, got.untrained_human_miou);
    let rises: Vec<usize> = smoothed.windows(2).enumerate().filter(|(_, w)| w[1] > w[0]).map(|(i, _)| i + 5).collect();
    let detail = format!(
        "C_novel {:.4} vs untrained {:.4}, C_human {:.4} vs untrained {:.4}, smoothed loss {:.4} -> {:.4}, rises ending at epochs {rises:?}, {:.0}s, {pinned}",
        got.trained_novel_miou,
        got.untrained_novel_miou,
        got.trained_human_miou,
        got.untrained_human_miou,
        smoothed.first().copied().unwrap_or(f64::NAN),
        smoothed.last().copied().unwrap_or(f64::NAN),
        run.secs,
    );
    check(novel_ok && human_ok && rises.is_empty() && run.secs < 1200.0, detail)
}

fn c10_ablation(b: &Bench) -> Outcome {
    let variant = |beta: BetaPolicy, inference: FgsInference| {
        let mut c = desk_config(1);
        c.beta = beta;
        c.inference = inference;
        c.loss.nca = 0.0;
        c.loss.agm_cgs = 0.0;
        c
    };
    let scores = |c: TrainConfig| -> Result<(f64, f64), String> {
        let s = train_and_test(b, c)?.scores;
        Ok((s.novel_miou.unwrap_or(0.0), s.human_miou.unwrap_or(0.0)))
    };
    let agm = scores(variant(BetaPolicy::Constant(1.0), FgsInference::Agm))?;
    let npm = scores(variant(BetaPolicy::Constant(0.0), FgsInference::Npm))?;
    let no_ws = scores(variant(BetaPolicy::Constant(0.5), FgsInference::Npm))?;
    let ws = scores(variant(BetaPolicy::Linear, FgsInference::Npm))?;
    // AGM only is the C_novel reference, NPM only the C_human reference
    let novel_ok = ws.0 >= no_ws.0 && no_ws.0 >= agm.0;
    let human_ok = ws.1 >= no_ws.1 && no_ws.1 >= npm.1;
    check(
        novel_ok && human_ok,
        format!(
            "C_novel / C_human mIoU: DML {:.4} / {:.4}, DML w/o WS {:.4} / {:.4}, AGM only {:.4} / {:.4}, NPM only {:.4} / {:.4}",
            ws.0, ws.1, no_ws.0, no_ws.1, agm.0, agm.1, npm.0, npm.1
        ),
    )
}

fn c11_determinism() -> Outcome {
    let synth = SyntheticConfig {
        image_size: 32,
        meta_train_support: 6,
        meta_train_query: 6,
        meta_test_support: 6,
        meta_test_query: 6,
        ..SyntheticConfig::default()
    };
    let raw = generate_synthetic_samples(&synth, 5).unwrap();
    let fold = FoldSpec::identity(raw.class_names.len(), [5, 6]);
    let train = tailor_samples(&raw, &fold, Phase::MetaTrain).unwrap();
    let test = tailor_samples(&raw, &fold, Phase::MetaTest).unwrap();
    let pairs = build_meta_test_list(&test, &fold, 3, 0).unwrap();
    let mut config = TrainConfig {
        seed: 9,
        max_epoch: 4,
        episodes_per_epoch: 6,
        warmup_epochs: 1,
        ..TrainConfig::default()
    };
    config.model.encoder.input_size = (32, 32);
    config.model.encoder.feature_dim = 8;
    config.model.encoder.cgs_dim = 8;
    config.model.encoder.fgs_dim = 8;
    let run = || -> Result<(Checkpoint, Vec<String>), String> {
        let mut t = Trainer::new(config.clone(), fold.base_classes.clone()).map_err(|e| e.to_string())?;
        let mut log = Vec::new();
        t.train(&train, &mut |r| {
            log.push(serde_json::to_string(r).unwrap());
            Ok(())
        }, &mut |_| {})
        .map_err(|e| e.to_string())?;
        Ok((t.checkpoint(), log))
    };
    let (a, log_a) = run()?;
    let (b, log_b) = run()?;
    let bytes = |c: &Checkpoint| serde_json::to_string(c).unwrap();
    if a != b || bytes(&a) != bytes(&b) || log_a != log_b {
        return Err("same-seed runs diverged".into());
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("ck.json");
    a.save(&path).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    let report = |m: &Model| -> Result<EvalReport, String> {
        let k = run_meta_test(m, &test, &pairs, Way::KWay, &fold, None).map_err(|e| e.to_string())?;
        let o = run_meta_test(m, &test, &pairs, Way::OneWay, &fold, None).map_err(|e| e.to_string())?;
        Ok(EvalReport::new(vec![FoldRow::from_scores("f", Some(&k), Some(&o))]))
    };
    let before = report(&a.model)?;
    let after = report(&Trainer::from_checkpoint(loaded).map_err(|e| e.to_string())?.model)?;
    let bits = |r: &EvalReport| -> Vec<Option<u64>> {
        r.rows
            .iter()
            .flat_map(|row| {
                [
                    row.k_way_novel,
                    row.k_way_human,
                    row.k_way_accuracy,
                    row.one_way_novel,
                    row.one_way_human,
                    row.one_way_binary_iou,
                ]
            })
            .map(|v| v.map(f64::to_bits))
            .collect()
    };
    check(
        bits(&before) == bits(&after),
        format!("identical checkpoints and logs over {} steps; reloaded EvalReport is bit-identical", log_a.len()),
    )
}

fn main() {
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut bench_data: Option<Bench> = None;
    let mut failed = 0;
    type Crit<'a> = (&'a str, &'a str, Box<dyn Fn(&mut Option<Bench>) -> Outcome>);
    let criteria: Vec<Crit> = vec![
        ("1", "prototype pooling oracle", Box::new(|_| c1_pool_oracle())),
        ("2", "momentum recursion", Box::new(|_| c2_momentum_recursion())),
        ("3", "AGM/NPM normalization", Box::new(|_| c3_normalization())),
        ("4", "class-permutation equivariance", Box::new(|_| c4_equivariance())),
        ("5", "gradient check of the total objective", Box::new(|_| c5_gradient_check())),
        ("6", "beta schedule", Box::new(|_| c6_beta_schedule())),
        ("7", "NCA properties", Box::new(|_| c7_nca())),
        ("8", "metric oracle", Box::new(|_| c8_metric_oracle())),
        ("9", "desk-scale learning signal", Box::new(|b| c9_desk_scale(b.get_or_insert_with(bench)))),
        ("10", "ablation ordering", Box::new(|b| c10_ablation(b.get_or_insert_with(bench)))),
        ("11", "determinism and checkpoint round-trip", Box::new(|_| c11_determinism())),
    ];
    for (id, name, f) in &criteria {
        if let Some(want) = &filter {
            if want != id {
                continue;
            }
        }
        match f(&mut bench_data) {
            Ok(d) => println!("PASS criterion {id:>2} ({name}): {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {id:>2} ({name}): {d}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
