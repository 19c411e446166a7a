//! Temporary calibration harness; deleted before merge.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vitcap_core::ctn::CtnConfig;
use vitcap_core::decoder::{self, DecoderConfig};
use vitcap_core::encoder::{self, EncoderConfig};
use vitcap_core::model::{self, ModelConfig};
use vitcap_core::optim::AdamWConfig;
use vitcap_core::text::{concept_labels, ConceptMode, Vocab};
use vitcap_core::train::{
    self, ConceptSource, ImageRecord, Stage, TrainConfig, TrainExample,
};
use vitcap_core::{ParamSet, Tape};

fn desk_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            image_height: 16,
            image_width: 16,
            patch_size: 4,
            dim: 32,
            depth: 2,
            split_depth: 1,
            heads: 4,
            mlp_ratio: 2,
        },
        ctn: CtnConfig {
            depth: 1,
            heads: 4,
            mlp_ratio: 2,
            head_hidden: 32,
            top_k: 8,
            ..CtnConfig::default()
        },
        decoder: DecoderConfig {
            depth: 2,
            heads: 4,
            mlp_ratio: 2,
            max_caption_len: 12,
            mask_prob: 0.15,
        },
        vocab_size,
    }
}

fn dataset(
    count: usize,
    seed: u64,
    val_fraction: f64,
) -> (Vocab, Vec<ImageRecord<f32>>, Vec<ImageRecord<f32>>) {
    dataset_sized(count, seed, val_fraction, 16)
}

fn dataset_sized(
    count: usize,
    seed: u64,
    val_fraction: f64,
    image_size: usize,
) -> (Vocab, Vec<ImageRecord<f32>>, Vec<ImageRecord<f32>>) {
    let synth = vitcap_core::data::SynthConfig {
        count,
        seed,
        image_size,
        val_fraction,
    };
    let samples = vitcap_core::data::generate_synthetic::<f32>(&synth).unwrap();
    let vocab = Vocab::build(samples.iter().map(|s| s.caption.as_str()), 1);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for s in samples {
        let labels =
            concept_labels(std::slice::from_ref(&s.caption), &vocab, ConceptMode::Keywords)
                .unwrap();
        let rec = ImageRecord {
            name: s.name.clone(),
            image: s.image.clone(),
            captions: vec![s.caption.clone()],
            labels,
        };
        match s.split {
            vitcap_core::data::Split::Train => train.push(rec),
            vitcap_core::data::Split::Val => val.push(rec),
        }
    }
    (vocab, train, val)
}

fn stage1_cfg(steps: usize, lr: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        base_lr: lr,
        batch_size: 8,
        epochs: 0,
        max_steps: steps,
        seed,
        threads: 4,
        optimizer: AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
        ..TrainConfig::concepts()
    }
}

fn stage2_cfg(steps: usize, lr: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        base_lr: lr,
        batch_size: 8,
        epochs: 0,
        max_steps: steps,
        mask_prob: 0.3,
        seed,
        threads: 4,
        optimizer: AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
        ..TrainConfig::joint()
    }
}

/// Deterministic masked caption loss over records.
fn val_caption_loss(
    set: &ParamSet<f32>,
    cfg: &ModelConfig,
    vocab: &Vocab,
    records: &[ImageRecord<f32>],
    predicted_concepts: bool,
) -> f64 {
    let examples =
        train::training_examples(records, vocab, cfg.decoder.max_caption_len).unwrap();
    let mut total = 0.0;
    for (i, ex) in examples.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(90_000 + i as u64);
        let mlm = decoder::mlm_corrupt(&ex.caption_ids, 0.3, &mut rng).unwrap();
        let concepts: Vec<u32> = if predicted_concepts {
            let analysis = model::analyze_image(set, cfg, &ex.image).unwrap();
            analysis.concepts.top.iter().map(|&(id, _)| id).collect()
        } else {
            Vec::new()
        };
        let enc = encoder::encode_image(set, &cfg.encoder, &ex.image).unwrap();
        let mut tape = Tape::new();
        let visual = tape.constant(enc.last.clone());
        let out = decoder::decode_forward(
            &mut tape,
            set,
            &cfg.decoder,
            cfg.encoder.dim,
            &concepts,
            visual,
            &mlm.corrupted,
        )
        .unwrap();
        let loss =
            decoder::caption_loss(&mut tape, out.logits, &ex.caption_ids, &mlm.masked).unwrap();
        total += tape.value(loss).data()[0] as f64;
    }
    total / examples.len() as f64
}

fn desk_config_sized(vocab_size: usize, image_size: usize) -> ModelConfig {
    let mut cfg = desk_config(vocab_size);
    cfg.encoder.image_height = image_size;
    cfg.encoder.image_width = image_size;
    cfg
}

fn stage1_recall(
    set: &ParamSet<f32>,
    cfg: &ModelConfig,
    vocab: &Vocab,
    recs: &[ImageRecord<f32>],
) -> (f64, f64) {
    let probe = vocab.id("purple").unwrap() as usize;
    let mut hit = 0usize;
    let mut want = 0usize;
    let mut probe_probs = Vec::new();
    for rec in recs {
        let analysis = model::analyze_image(set, cfg, &rec.image).unwrap();
        let top: Vec<u32> = analysis.concepts.top.iter().map(|&(id, _)| id).collect();
        want += rec.labels.ids().len();
        hit += rec.labels.ids().iter().filter(|id| top.contains(id)).count();
        probe_probs.push(analysis.concepts.probs.data()[probe] as f64);
    }
    let mean = probe_probs.iter().sum::<f64>() / probe_probs.len() as f64;
    let var = probe_probs.iter().map(|p| (p - mean).powi(2)).sum::<f64>()
        / probe_probs.len() as f64;
    (hit as f64 / want as f64, var.sqrt())
}

#[test]
fn calibrate_s1_gradnorms() {
    let (vocab, train_recs, _) = dataset(32, 1234, 0.0);
    let cfg = desk_config(vocab.len());
    let examples =
        train::training_examples(&train_recs, &vocab, cfg.decoder.max_caption_len).unwrap();
    let set = model::init_params::<f32>(&cfg, 5).unwrap();
    let ex = &examples[0];
    let patches = encoder::patchify(&ex.image, cfg.encoder.patch_size).unwrap();
    let mut tape = Tape::new();
    let enc = encoder::encode(&mut tape, &set, &cfg.encoder, &patches, true, false).unwrap();
    let vars = vitcap_core::ctn::predict(&mut tape, &set, &cfg.ctn, cfg.encoder.dim, enc.mid)
        .unwrap();
    let loss =
        vitcap_core::ctn::concept_loss(&mut tape, vars.probs, &ex.labels, &cfg.ctn).unwrap();
    tape.backward(loss).unwrap();
    let grads = tape.into_param_grads();
    let mut names: Vec<(String, f64)> = grads
        .iter()
        .map(|(idx, g)| {
            let norm = g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            (set.get_at(*idx).name.clone(), norm)
        })
        .collect();
    names.sort_by(|a, b| a.0.cmp(&b.0));
    for (name, norm) in names {
        eprintln!("  {name}: {norm:.3e}");
    }
}

/// Rescales the flat 0.02 init toward fan-in scaling, in place.
fn rescale_init(set: &mut ParamSet<f32>, dim: usize) {
    let emb_factor = ((1.0 / dim as f64).sqrt() / 0.02) as f32;
    for p in set.iter_mut() {
        let name = p.name.clone();
        let shape = p.tensor.shape().to_vec();
        let is_weight = name.ends_with(".w")
            || name.contains(".w1")
            || name.contains(".w2")
            || name.ends_with(".wq")
            || name.ends_with(".wk")
            || name.ends_with(".wv")
            || name.ends_with(".wo");
        let factor = if is_weight && shape.len() == 2 {
            ((1.0 / shape[0] as f64).sqrt() / 0.02) as f32
        } else if name.ends_with(".pos")
            || name.ends_with(".cls")
            || name.ends_with(".embed")
            || name.contains(".seg")
        {
            emb_factor
        } else {
            1.0
        };
        if factor != 1.0 {
            for v in p.tensor.data_mut() {
                *v *= factor;
            }
        }
    }
}

#[test]
fn calibrate_s1_rescaled() {
    for &size in &[16usize] {
        let (vocab, train_recs, _) = dataset_sized(32, 1234, 0.0, size);
        let cfg = desk_config_sized(vocab.len(), size);
        let examples =
            train::training_examples(&train_recs, &vocab, cfg.decoder.max_caption_len)
                .unwrap();
        for &(lr, batch, steps) in &[
            (0.01f64, 8usize, 1000usize),
            (0.01, 8, 2000),
            (0.02, 8, 2000),
            (0.005, 8, 2000),
        ] {
            let t0 = Instant::now();
            let mut set = model::init_params::<f32>(&cfg, 5).unwrap();
            rescale_init(&mut set, cfg.encoder.dim);
            let s1 = TrainConfig {
                batch_size: batch,
                ..stage1_cfg(steps, lr, 5)
            };
            let reports =
                train::train_stage1(&mut set, &cfg, &examples, &s1, |_| {}).unwrap();
            let (recall, spread) = stage1_recall(&set, &cfg, &vocab, &train_recs);
            eprintln!(
                "size {size} lr {lr} batch {batch} steps {steps}: l_vc {:.5} recall {recall:.4} p-sd {spread:.4} in {:?}",
                reports.last().unwrap().l_vc,
                t0.elapsed()
            );
        }
    }
}

#[test]
fn calibrate_s1_matrix() {
    for &size in &[16usize, 24, 32] {
        let (vocab, train_recs, _) = dataset_sized(32, 1234, 0.0, size);
        let cfg = desk_config_sized(vocab.len(), size);
        let examples =
            train::training_examples(&train_recs, &vocab, cfg.decoder.max_caption_len)
                .unwrap();
        for &(lr, batch) in &[(0.01f64, 8usize), (0.02, 8), (0.05, 8), (0.02, 32), (0.05, 32)]
        {
            let t0 = Instant::now();
            let mut set = model::init_params::<f32>(&cfg, 5).unwrap();
            let s1 = TrainConfig {
                batch_size: batch,
                ..stage1_cfg(2000, lr, 5)
            };
            let reports =
                train::train_stage1(&mut set, &cfg, &examples, &s1, |_| {}).unwrap();
            let (recall, spread) = stage1_recall(&set, &cfg, &vocab, &train_recs);
            eprintln!(
                "size {size} lr {lr} batch {batch}: l_vc {:.5} recall {recall:.4} p10-sd {spread:.4} in {:?}",
                reports.last().unwrap().l_vc,
                t0.elapsed()
            );
        }
    }
}

#[test]
fn calibrate_a06_overfit() {
    let t0 = Instant::now();
    let (vocab, train_recs, _) = dataset(32, 1234, 0.0);
    let cfg = desk_config(vocab.len());
    let examples =
        train::training_examples(&train_recs, &vocab, cfg.decoder.max_caption_len).unwrap();
    eprintln!(
        "vocab {} examples {} max_labels {}",
        vocab.len(),
        examples.len(),
        train_recs.iter().map(|r| r.labels.ids().len()).max().unwrap()
    );

    let mut set = model::init_params::<f32>(&cfg, 5).unwrap();
    let s1 = stage1_cfg(2000, 0.01, 5);
    let reports = train::train_stage1(&mut set, &cfg, &examples, &s1, |r| {
        if r.step % 400 == 0 {
            eprintln!("  s1 step {} l_vc {:.5}", r.step, r.l_vc);
        }
    })
    .unwrap();
    eprintln!(
        "stage1 in {:?}, last l_vc {:.5}",
        t0.elapsed(),
        reports.last().unwrap().l_vc
    );
    for rec in &train_recs {
        let analysis = model::analyze_image(&set, &cfg, &rec.image).unwrap();
        let top: Vec<u32> = analysis.concepts.top.iter().map(|&(id, _)| id).collect();
        let missing: Vec<String> = rec
            .labels
            .ids()
            .iter()
            .filter(|id| !top.contains(id))
            .map(|&id| {
                let p = analysis.concepts.probs.data()[id as usize];
                format!("{}={:.3}", vocab.token(id).unwrap(), p)
            })
            .collect();
        if !missing.is_empty() {
            let ranked: Vec<String> = analysis
                .concepts
                .top
                .iter()
                .map(|&(id, p)| format!("{}={p:.3}", vocab.token(id).unwrap()))
                .collect();
            eprintln!(
                "  {}: missing {missing:?} of {:?}\n    top8 {ranked:?}",
                rec.name, rec.captions[0]
            );
        }
    }
    let t1 = Instant::now();

    model::copy_ctn_blocks_into_feature(&mut set, &cfg).unwrap();
    let s2 = TrainConfig {
        mask_prob: 0.5,
        ..stage2_cfg(2000, 0.005, 6)
    };
    let reports = train::train_stage2(&mut set, &cfg, &examples, &s2, None, |r| {
        if r.step % 400 == 0 {
            eprintln!("  s2 step {} l_cap {:.5}", r.step, r.l_cap);
        }
    })
    .unwrap();
    eprintln!(
        "stage2 in {:?}, last l_cap {:.5}",
        t1.elapsed(),
        reports.last().unwrap().l_cap
    );

    let t2 = Instant::now();
    let outcome = train::evaluate_model(
        &set,
        &cfg,
        &vocab,
        &train_recs,
        decoder::DecodeStrategy::Greedy,
    )
    .unwrap();
    let exact = outcome
        .items
        .iter()
        .filter(|it| it.caption == it.references[0])
        .count();
    eprintln!(
        "eval in {:?}: recall {:.4} bleu4 {:.4} exact {}/{}",
        t2.elapsed(),
        outcome.concept_recall,
        outcome.bleu4,
        exact,
        outcome.items.len()
    );
    for it in outcome.items.iter().take(6) {
        eprintln!("  got  {:?}\n  want {:?}", it.caption, it.references[0]);
    }
    eprintln!("a06 total {:?}", t0.elapsed());
}

#[test]
fn calibrate_a07_direction() {
    let t0 = Instant::now();
    let (vocab, train_recs, val_recs) = dataset(160, 777, 0.2);
    eprintln!("train {} val {}", train_recs.len(), val_recs.len());
    let cfg = desk_config(vocab.len());
    let examples =
        train::training_examples(&train_recs, &vocab, cfg.decoder.max_caption_len).unwrap();

    let mut with_ctn = Vec::new();
    let mut without = Vec::new();
    for seed in [11u64, 12, 13] {
        let mut set = model::init_params::<f32>(&cfg, seed).unwrap();
        let s1 = stage1_cfg(500, 0.01, seed);
        train::train_stage1(&mut set, &cfg, &examples, &s1, |_| {}).unwrap();
        model::copy_ctn_blocks_into_feature(&mut set, &cfg).unwrap();

        let mut set_pred = set.clone();
        let s2 = stage2_cfg(300, 0.005, seed + 50);
        train::train_stage2(&mut set_pred, &cfg, &examples, &s2, None, |_| {}).unwrap();
        let a = val_caption_loss(&set_pred, &cfg, &vocab, &val_recs, true);

        let mut set_none = set.clone();
        let s2n = TrainConfig {
            concept_source: ConceptSource::NoConcepts,
            ..s2.clone()
        };
        train::train_stage2(&mut set_none, &cfg, &examples, &s2n, None, |_| {}).unwrap();
        let b = val_caption_loss(&set_none, &cfg, &vocab, &val_recs, false);
        eprintln!("seed {seed}: predicted {a:.5} none {b:.5}");
        with_ctn.push(a);
        without.push(b);
    }
    with_ctn.sort_by(f64::total_cmp);
    without.sort_by(f64::total_cmp);
    eprintln!(
        "medians: predicted {:.5} none {:.5}; total {:?}",
        with_ctn[1],
        without[1],
        t0.elapsed()
    );
}

#[test]
fn calibrate_a05_distillation() {
    let t0 = Instant::now();
    let (vocab, train_recs, _) = dataset(8, 31, 0.0);
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            image_height: 8,
            image_width: 8,
            patch_size: 4,
            dim: 8,
            depth: 2,
            split_depth: 1,
            heads: 2,
            mlp_ratio: 2,
        },
        ctn: CtnConfig {
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            head_hidden: 8,
            top_k: 3,
            ..CtnConfig::default()
        },
        decoder: DecoderConfig {
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            max_caption_len: 12,
            mask_prob: 0.15,
        },
        vocab_size: vocab.len(),
    };
    // 8px synthetic images still render, but regenerate records at 8px.
    let synth = vitcap_core::data::SynthConfig {
        count: 8,
        seed: 31,
        image_size: 8,
        val_fraction: 0.0,
    };
    let samples = vitcap_core::data::generate_synthetic::<f32>(&synth).unwrap();
    let examples: Vec<TrainExample<f32>> = samples
        .iter()
        .map(|s| {
            let labels = concept_labels(
                std::slice::from_ref(&s.caption),
                &vocab,
                ConceptMode::AllTokens,
            )
            .unwrap();
            let mut ids = vocab.encode(&s.caption);
            ids.truncate(11);
            ids.push(Vocab::SEP);
            TrainExample {
                name: s.name.clone(),
                image: s.image.clone(),
                caption_ids: ids,
                labels,
            }
        })
        .collect();
    let _ = train_recs;

    // Teacher: briefly trained so distillation aligns with the data.
    let mut teacher_set = model::init_params::<f32>(&cfg, 42).unwrap();
    let tc = TrainConfig {
        base_lr: 0.005,
        batch_size: 4,
        epochs: 0,
        max_steps: 300,
        mask_prob: 0.3,
        concept_source: ConceptSource::GroundTruth,
        seed: 40,
        optimizer: AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
        ..TrainConfig::joint()
    };
    train::train_stage2(&mut teacher_set, &cfg, &examples, &tc, None, |_| {}).unwrap();

    let eval_kl = |student: &ParamSet<f32>, teacher: &ParamSet<f32>| -> f64 {
        let mut total = 0.0;
        for (i, ex) in examples.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(70_000 + i as u64);
            let mlm = decoder::mlm_corrupt(&ex.caption_ids, 0.3, &mut rng).unwrap();
            let mut concepts: Vec<u32> = ex.labels.ids().to_vec();
            concepts.truncate(cfg.ctn.top_k);
            let run = |set: &ParamSet<f32>| {
                let enc = encoder::encode_image(set, &cfg.encoder, &ex.image).unwrap();
                let mut tape = Tape::new();
                let visual = tape.constant(enc.last.clone());
                let out = decoder::decode_forward(
                    &mut tape,
                    set,
                    &cfg.decoder,
                    cfg.encoder.dim,
                    &concepts,
                    visual,
                    &mlm.corrupted,
                )
                .unwrap();
                tape.value(out.logits).clone()
            };
            let t_logits = run(teacher);
            let s_logits = run(student);
            let mut tape = Tape::new();
            let sv = tape.constant(s_logits);
            let kl = decoder::kd_loss(&mut tape, sv, &t_logits, &mlm.masked).unwrap();
            total += tape.value(kl).data()[0] as f64;
        }
        total / examples.len() as f64
    };

    let teacher = train::TeacherHandle::new(teacher_set, cfg, vocab.sha256_hex()).unwrap();
    let mut student = model::init_params::<f32>(&cfg, 7).unwrap();
    let initial = eval_kl(&student, teacher.params());
    let sc = TrainConfig {
        base_lr: 0.002,
        batch_size: 4,
        epochs: 0,
        max_steps: 500,
        mask_prob: 0.3,
        concept_source: ConceptSource::GroundTruth,
        seed: 41,
        optimizer: AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
        ..TrainConfig::joint()
    };
    let reports =
        train::train_stage2(&mut student, &cfg, &examples, &sc, Some(&teacher), |_| {}).unwrap();
    let final_kl = eval_kl(&student, teacher.params());
    eprintln!(
        "initial {initial:.5} final {final_kl:.5} l_dis first {:.5} last {:.5}; {:?}",
        reports.first().unwrap().l_dis,
        reports.last().unwrap().l_dis,
        t0.elapsed()
    );
    let _ = Stage::Joint;
}
