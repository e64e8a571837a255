//! Acceptance gate: one test per criterion, each printing a pass/fail line.
//!
//! Criteria 1-6 verify oracle equivalence, gradient integrity and the
//! frozen-parameter contract on small instances. Criteria 7-10 run the
//! synthetic zero-shot benchmark end to end and check the qualitative
//! orderings (zero-shot transfer works; adapters beat the frozen encoder;
//! one-stage beats two-stage; removing the segment generator hurts).
//! Criterion 11 checks bit-level reproducibility of the pipeline.
//!
//! Run with `cargo test -p ztad-core --test acceptance -- --nocapture`.

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::Instant;

use ztad_core::adapters::{inject_adapters, TEXT_SCOPE};
use ztad_core::autodiff::Tape;
use ztad_core::config::{ExperimentConfig, FinetuneMode, MaskMode, SoftNmsMode, StructureMode};
use ztad_core::encoders::{encode_text, temporal_transform};
use ztad_core::error::Result;
use ztad_core::evaluate::{evaluate_map, make_zero_shot_splits, GtEntry};
use ztad_core::experiment::{
    benchmark_config, build_model_params, evaluate_split, save_bundle, synthesize, train_split,
    DatasetBundle, TrainedModel,
};
use ztad_core::gradcheck::check_gradients;
use ztad_core::localizer::{
    build_localizer_params, deformable_attention, roi_align_1d,
    segment_generator,
};
use ztad_core::matrix::Matrix;
use ztad_core::params::{trainable_param_fraction, Binder, ParamSet};
use ztad_core::postprocess::{soft_nms, Detection, RankedDetection};
use ztad_core::rng::Rng;

use ztad_core::training::{
    actionness_loss, bbox_loss, classification_loss, hungarian_match,
    video_loss, LossWeights, PlainProposal, PlainTarget, TrainPhase, VideoSample,
};

fn pass(criterion: &str, detail: String) {
    println!("criterion {criterion}: PASS ({detail})");
}

// ---------------------------------------------------------------------------
// Criterion 1: Hungarian matching vs exhaustive enumeration
// ---------------------------------------------------------------------------

fn brute_force_min_cost(cost: &Matrix) -> f64 {
    fn recurse(cost: &Matrix, target: usize, used: &mut Vec<bool>) -> f64 {
        if target == cost.cols() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for q in 0..cost.rows() {
            if used[q] {
                continue;
            }
            used[q] = true;
            best = best.min(cost.get(q, target) + recurse(cost, target + 1, used));
            used[q] = false;
        }
        best
    }
    recurse(cost, 0, &mut vec![false; cost.rows()])
}

#[test]
fn criterion_01_matching_oracle() {
    let start = Instant::now();
    let mut rng = Rng::new(0xC1);
    for case in 0..200 {
        let n = rng.range_inclusive(1, 7);
        let k = rng.range_inclusive(1, n.min(5));
        let cost = Matrix::from_fn(n, k, |_, _| rng.uniform_in(-5.0, 5.0));
        let assignment = hungarian_match(&cost).unwrap();
        let total: f64 = assignment
            .pairs
            .iter()
            .map(|&(q, t)| cost.get(q, t))
            .sum();
        let expected = brute_force_min_cost(&cost);
        assert!(
            (total - expected).abs() < 1e-12,
            "case {case}: hungarian {total} vs brute force {expected}"
        );
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:.2?}");
    pass("1", format!("200 instances exact in {elapsed:.2?}"));
}

// ---------------------------------------------------------------------------
// Criterion 2: Soft-NMS vs step-by-step reference
// ---------------------------------------------------------------------------

/// Independent re-statement of the suppression procedure.
fn reference_soft_nms(
    mut pool: Vec<RankedDetection>,
    mode: SoftNmsMode,
    iou_threshold: f64,
    sigma: f64,
    min_score: f64,
) -> Vec<RankedDetection> {
    let mut kept = Vec::new();
    while !pool.is_empty() {
        // argmax by (score desc, start asc, end asc)
        let mut best = 0;
        for i in 1..pool.len() {
            let a = &pool[i];
            let b = &pool[best];
            let better = a.score > b.score
                || (a.score == b.score
                    && (a.start < b.start || (a.start == b.start && a.end < b.end)));
            if better {
                best = i;
            }
        }
        let current = pool.remove(best);
        let mut next = Vec::new();
        for mut d in pool {
            let inter = (current.end.min(d.end) - current.start.max(d.start)).max(0.0);
            let union = (current.end - current.start) + (d.end - d.start) - inter;
            let iou = if union > 0.0 { inter / union } else { 0.0 };
            match mode {
                SoftNmsMode::Linear => {
                    if iou > iou_threshold {
                        d.score *= 1.0 - iou;
                    }
                }
                SoftNmsMode::Gaussian => d.score *= (-iou * iou / sigma).exp(),
            }
            if d.score >= min_score {
                next.push(d);
            }
        }
        pool = next;
        kept.push(current);
    }
    kept
}

#[test]
fn criterion_02_soft_nms_oracle() {
    let mut rng = Rng::new(0xC2);
    for case in 0..100 {
        let count = rng.range_inclusive(1, 50);
        let detections: Vec<RankedDetection> = (0..count)
            .map(|_| {
                let start = rng.uniform_in(0.0, 40.0);
                RankedDetection {
                    start,
                    end: start + rng.uniform_in(0.5, 8.0),
                    class_index: 0,
                    score: rng.uniform(),
                }
            })
            .collect();
        for mode in [SoftNmsMode::Linear, SoftNmsMode::Gaussian] {
            let got = soft_nms(detections.clone(), mode, 0.3, 0.5, 1e-3);
            let expected = reference_soft_nms(detections.clone(), mode, 0.3, 0.5, 1e-3);
            assert_eq!(got.len(), expected.len(), "case {case} {mode:?}");
            for (g, e) in got.iter().zip(&expected) {
                assert_eq!(g.start, e.start, "case {case} {mode:?}");
                assert!(
                    (g.score - e.score).abs() < 1e-9,
                    "case {case} {mode:?}: {} vs {}",
                    g.score,
                    e.score
                );
            }
        }
    }
    // Two identical segments under the Gaussian mode.
    let pair = vec![
        RankedDetection { start: 1.0, end: 2.0, class_index: 0, score: 0.9 },
        RankedDetection { start: 1.0, end: 2.0, class_index: 0, score: 0.8 },
    ];
    let out = soft_nms(pair, SoftNmsMode::Gaussian, 0.3, 0.5, 1e-3);
    let expected = 0.8 * (-2.0_f64).exp();
    assert!((out[1].score - expected).abs() < 1e-6);
    pass(
        "2",
        format!("100 random sets within 1e-9; gaussian pair -> {:.6}", out[1].score),
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: mAP oracle fixtures and order invariance
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_map_oracle() {
    // Hand-enumerated fixture: PR points (1, 1/2), (1/2, 1/2), (2/3, 1).
    let gts = vec![
        GtEntry { video_id: "v".into(), start: 0.0, end: 10.0, class_name: "a".into() },
        GtEntry { video_id: "v".into(), start: 20.0, end: 30.0, class_name: "a".into() },
    ];
    let dets = vec![
        Detection { video_id: "v".into(), start: 0.0, end: 10.0, class_name: "a".into(), score: 0.9 },
        Detection { video_id: "v".into(), start: 50.0, end: 60.0, class_name: "a".into(), score: 0.8 },
        Detection { video_id: "v".into(), start: 20.0, end: 30.0, class_name: "a".into(), score: 0.7 },
    ];
    let table = evaluate_map(&dets, &gts, &[0.5]).unwrap();
    // Interpolation oracle over the 101-point grid.
    let points = [(1.0, 0.5), (0.5, 0.5), (2.0 / 3.0, 1.0)];
    let mut expected = 0.0;
    for g in 0..=100 {
        let r = g as f64 / 100.0;
        expected += points
            .iter()
            .filter(|(_, rec)| *rec >= r)
            .map(|(p, _)| *p)
            .fold(0.0, f64::max);
    }
    expected /= 101.0;
    assert!((table.rows[0].1 - expected).abs() < 1e-12);
    assert!((table.rows[0].1 - 253.0 / 303.0).abs() < 1e-12);

    // Perfect predictions give exactly 1, empty gives exactly 0.
    let perfect: Vec<Detection> = gts
        .iter()
        .map(|g| Detection {
            video_id: g.video_id.clone(),
            start: g.start,
            end: g.end,
            class_name: g.class_name.clone(),
            score: 1.0,
        })
        .collect();
    let ones = evaluate_map(&perfect, &gts, &[0.3, 0.5, 0.7]).unwrap();
    assert_eq!(ones.average, 1.0);
    let zeros = evaluate_map(&[], &gts, &[0.3, 0.5, 0.7]).unwrap();
    assert_eq!(zeros.average, 0.0);

    // Shuffle invariance over 50 random cases.
    let mut rng = Rng::new(0xC3);
    for case in 0..50 {
        let mut gts = Vec::new();
        let mut dets = Vec::new();
        for v in 0..3 {
            let video = format!("v{v}");
            for class in ["a", "b", "c"] {
                for _ in 0..rng.range_inclusive(1, 2) {
                    let s = rng.uniform_in(0.0, 50.0);
                    gts.push(GtEntry {
                        video_id: video.clone(),
                        start: s,
                        end: s + rng.uniform_in(1.0, 9.0),
                        class_name: class.into(),
                    });
                }
                for _ in 0..rng.range_inclusive(0, 4) {
                    let s = rng.uniform_in(0.0, 50.0);
                    dets.push(Detection {
                        video_id: video.clone(),
                        start: s,
                        end: s + rng.uniform_in(1.0, 9.0),
                        class_name: class.into(),
                        score: (rng.uniform() * 8.0).round() / 8.0,
                    });
                }
            }
        }
        let baseline = evaluate_map(&dets, &gts, &[0.3, 0.5, 0.7]).unwrap();
        let mut shuffled = dets.clone();
        rng.shuffle(&mut shuffled);
        let again = evaluate_map(&shuffled, &gts, &[0.3, 0.5, 0.7]).unwrap();
        assert_eq!(baseline, again, "case {case}");
    }
    pass("3", format!("fixture AP {:.6} = 253/303; invariances hold", table.rows[0].1));
}

// ---------------------------------------------------------------------------
// Criterion 4: gradient integrity
// ---------------------------------------------------------------------------

fn tiny_model_config() -> ztad_core::config::ModelConfig {
    ztad_core::config::ModelConfig {
        embed_dim: 8,
        max_positions: 16,
        temporal_blocks: 2,
        temporal_heads: 2,
        text_blocks: 1,
        text_heads: 2,
        mlp_ratio: 2,
        enc_layers: 2,
        dec_layers: 2,
        num_queries: 3,
        attn_heads: 2,
        sample_points: 2,
        ffn_dim: 16,
        roi_bins: 4,
        roi_samples_per_bin: 2,
        adapter_rank: 2,
        text_distortion_planes: 1,
        preprocess: ztad_core::config::PreprocessMode::Resize { target_len: 8 },
        ..Default::default()
    }
}

#[test]
fn criterion_04_gradient_integrity() {
    let start = Instant::now();
    let tol = 1e-4;
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut rng = Rng::new(0xC4);

    // temporal_transform
    {
        let model = tiny_model_config();
        let params = ztad_core::encoders::build_temporal_params(&model, &mut Rng::new(1));
        let input = Matrix::gaussian(5, 8, 1.0, &mut rng);
        let probe = Matrix::gaussian(5, 8, 1.0, &mut rng);
        let report = check_gradients(&[input], 1e-5, |tape, vars| {
            let binder = Binder::new(tape, &params);
            temporal_transform(&binder, &model, vars[0])
                .unwrap()
                .mul(binder.constant(probe.clone()))
                .sum_all()
        });
        worst.insert("temporal_transform", report.max_rel_err);
    }
    // adapt_mlp_forward
    {
        let x = Matrix::gaussian(4, 6, 1.0, &mut rng);
        let w = Matrix::gaussian(6, 6, 0.4, &mut rng);
        let down = Matrix::gaussian(6, 2, 0.5, &mut rng);
        let up = Matrix::gaussian(2, 6, 0.5, &mut rng);
        let probe = Matrix::gaussian(4, 6, 1.0, &mut rng);
        let report = check_gradients(&[x, down, up], 1e-6, |tape, vars| {
            let w = tape.leaf(w.clone());
            ztad_core::adapters::adapt_mlp_forward(vars[0], |v| v.matmul(w), vars[1], vars[2], 0.1)
                .mul(tape.leaf(probe.clone()))
                .sum_all()
        });
        worst.insert("adapt_mlp_forward", report.max_rel_err);
    }
    // deformable_attention_1d
    {
        let model = tiny_model_config();
        let params = build_localizer_params(&model, 8, &mut Rng::new(2));
        let queries = Matrix::gaussian(3, 8, 1.0, &mut rng);
        let values = Matrix::gaussian(7, 8, 1.0, &mut rng);
        let refs = Matrix::from_vec(3, 1, vec![0.21, 0.53, 0.77]);
        let probe = Matrix::gaussian(3, 8, 1.0, &mut rng);
        let report = check_gradients(&[queries, values, refs], 1e-6, |tape, vars| {
            let binder = Binder::new(tape, &params);
            deformable_attention(&binder, "localizer.enc0.attn", vars[0], vars[2], vars[1], &model)
                .mul(binder.constant(probe.clone()))
                .sum_all()
        });
        worst.insert("deformable_attention_1d", report.max_rel_err);
    }
    // roi_align_1d including segment endpoints
    {
        let model = tiny_model_config();
        let params = build_localizer_params(&model, 8, &mut Rng::new(3));
        let features = Matrix::gaussian(9, 4, 1.0, &mut rng);
        let s = Matrix::filled(1, 1, 0.13);
        let e = Matrix::filled(1, 1, 0.84);
        let probe = Matrix::gaussian(4, 4, 1.0, &mut rng);
        let report = check_gradients(&[features, s, e], 1e-6, |tape, vars| {
            let binder = Binder::new(tape, &params);
            roi_align_1d(&binder, vars[0], vars[1], vars[2], 4, 2)
                .unwrap()
                .mul(binder.constant(probe.clone()))
                .sum_all()
        });
        worst.insert("roi_align_1d", report.max_rel_err);
    }
    // segment_generator
    {
        let proj = Matrix::gaussian(6, 5, 1.0, &mut rng);
        let dec = Matrix::gaussian(2, 5, 1.0, &mut rng);
        let probe = Matrix::gaussian(6, 2, 1.0, &mut rng);
        let report = check_gradients(&[proj, dec], 1e-6, |tape, vars| {
            segment_generator(vars[0], vars[1])
                .mul(tape.leaf(probe.clone()))
                .sum_all()
        });
        worst.insert("segment_generator", report.max_rel_err);
    }
    // loss terms
    {
        let logits = Matrix::gaussian(4, 3, 0.1, &mut rng);
        let empty = ParamSet::new();
        let report = check_gradients(&[logits], 1e-6, |tape, vars| {
            let binder = Binder::new(tape, &empty);
            classification_loss(&binder, vars[0], &[(0, 0), (2, 1)], &[1, 2], 0.07).unwrap()
        });
        worst.insert("classification_loss", report.max_rel_err);

        let starts = Matrix::from_vec(3, 1, vec![0.12, 0.41, 0.66]);
        let ends = Matrix::from_vec(3, 1, vec![0.31, 0.57, 0.93]);
        let targets = vec![
            PlainTarget { start: 0.17, end: 0.36, class: 0 },
            PlainTarget { start: 0.58, end: 0.88, class: 1 },
        ];
        let report = check_gradients(&[starts, ends], 1e-6, |tape, vars| {
            let binder = Binder::new(tape, &empty);
            let (l1, giou) =
                bbox_loss(&binder, vars[0], vars[1], &[(0, 0), (2, 1)], &targets).unwrap();
            l1.add(giou)
        });
        worst.insert("bbox_loss", report.max_rel_err);

        let scores = Matrix::from_vec(3, 1, vec![0.21, 0.68, 0.45]);
        let proposals: Vec<PlainProposal> = (0..3)
            .map(|i| PlainProposal {
                start: 0.1 + 0.2 * i as f64,
                end: 0.25 + 0.2 * i as f64,
                logits: vec![],
                actionness: 0.0,
            })
            .collect();
        let targets = vec![PlainTarget { start: 0.15, end: 0.42, class: 0 }];
        let report = check_gradients(&[scores], 1e-6, |tape, vars| {
            let binder = Binder::new(tape, &empty);
            actionness_loss(&binder, vars[0], &proposals, &targets).unwrap()
        });
        worst.insert("actionness_loss", report.max_rel_err);
    }
    for (op, err) in &worst {
        assert!(*err < tol, "{op}: rel err {err:.2e} >= {tol:.0e}");
    }

    // End-to-end total-loss probe on 5 sampled parameters, tol 1e-3.
    let e2e_err = end_to_end_probe();
    assert!(e2e_err < 1e-3, "end-to-end probe rel err {e2e_err:.2e}");
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 120.0, "took {elapsed:.2?}");
    let summary: Vec<String> = worst
        .iter()
        .map(|(op, err)| format!("{op} {err:.1e}"))
        .collect();
    pass(
        "4",
        format!("{}; end-to-end {e2e_err:.1e}; {elapsed:.1?}", summary.join(", ")),
    );
}

/// Finite differences of the full video loss with respect to five sampled
/// parameter elements spread across the model.
fn end_to_end_probe() -> f64 {
    let gen = ztad_core::synthetic::GeneratorConfig {
        num_classes: 4,
        videos_per_class: 1,
        min_snippets: 8,
        max_snippets: 8,
        latent_dim: 6,
        snippet_dim: 5,
        seed: 5,
        ..Default::default()
    };
    let model = tiny_model_config();
    let concepts =
        ztad_core::concepts::ConceptTable::build(&gen.class_names(), gen.latent_dim, gen.seed)
            .unwrap();
    let mut params = ztad_core::encoders::build_frozen_clip(&gen, &model, &concepts).unwrap();
    params.merge(ztad_core::encoders::build_temporal_params(&model, &mut Rng::new(7)));
    params.merge(build_localizer_params(&model, gen.snippet_dim, &mut Rng::new(8)));
    inject_adapters(&mut params, &model, &mut Rng::new(9)).unwrap();
    // Move adapters off their zero init so their gradients are non-trivial.
    let mut rng = Rng::new(10);
    for block in 0..model.text_blocks {
        let name = format!("clip.text.block{block}.adapter.up");
        *params.value_mut(&name) = Matrix::gaussian(model.adapter_rank, model.embed_dim, 0.05, &mut rng);
    }

    let mut sample_rng = Rng::new(11);
    let latents = Matrix::gaussian(8, gen.latent_dim, 0.8, &mut sample_rng);
    let features = Matrix::gaussian(8, gen.snippet_dim, 0.8, &mut sample_rng);
    let sample = VideoSample {
        features,
        latents,
        targets: vec![
            PlainTarget { start: 0.2, end: 0.45, class: 0 },
            PlainTarget { start: 0.6, end: 0.85, class: 1 },
        ],
    };
    let seen = gen.class_names()[..2].to_vec();
    let weights = LossWeights {
        cls: 2.0,
        bbox: 1.0,
        actionness: 5.0,
        l1: 5.0,
        giou: 2.0,
        temperature: 0.07,
    };

    let eval_loss = |params: &ParamSet| -> f64 {
        let tape = Tape::new();
        let binder = Binder::new(&tape, params);
        let (loss, _) = video_loss(
            &binder,
            &model,
            &concepts,
            &seen,
            FinetuneMode::Adapter,
            TrainPhase::OneStage,
            &sample,
            &weights,
        )
        .unwrap();
        loss.scalar_value()
    };

    // Analytic gradients once.
    let tape = Tape::new();
    let binder = Binder::new(&tape, &params);
    let (loss, _) = video_loss(
        &binder,
        &model,
        &concepts,
        &seen,
        FinetuneMode::Adapter,
        TrainPhase::OneStage,
        &sample,
        &weights,
    )
    .unwrap();
    let grads = tape.backward(loss);
    let named = binder.trainable_grads(&grads);

    let probes = [
        "temporal.block0.attn.qkv.w",
        "localizer.enc0.attn.value.w",
        "localizer.boundary.fc1.w",
        "localizer.actionness.fc1.w",
        "clip.text.block0.adapter.up",
    ];
    let mut worst = 0.0_f64;
    let mut pick = Rng::new(12);
    for name in probes {
        let grad = named
            .get(name)
            .unwrap_or_else(|| panic!("no gradient recorded for {name}"));
        let elem = pick.below(grad.len());
        let eps = 1e-5;
        let mut perturbed = params.clone();
        perturbed.value_mut(name).as_mut_slice()[elem] += eps;
        let plus = eval_loss(&perturbed);
        perturbed.value_mut(name).as_mut_slice()[elem] -= 2.0 * eps;
        let minus = eval_loss(&perturbed);
        let fd = (plus - minus) / (2.0 * eps);
        let an = grad.as_slice()[elem];
        let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

// ---------------------------------------------------------------------------
// Criterion 5: frozen-parameter invariant after 50 steps
// ---------------------------------------------------------------------------

fn small_train_config(seed: u64) -> ExperimentConfig {
    let mut config = ExperimentConfig::default();
    config.dataset.num_classes = 6;
    config.dataset.videos_per_class = 2;
    config.dataset.min_snippets = 20;
    config.dataset.max_snippets = 30;
    config.dataset.latent_dim = 16;
    config.dataset.snippet_dim = 12;
    config.dataset.seed = seed;
    config.model.embed_dim = 16;
    config.model.max_positions = 32;
    config.model.temporal_blocks = 1;
    config.model.text_blocks = 2;
    config.model.enc_layers = 1;
    config.model.dec_layers = 2;
    config.model.num_queries = 4;
    config.model.attn_heads = 2;
    config.model.sample_points = 2;
    config.model.ffn_dim = 16;
    config.model.roi_bins = 4;
    config.model.adapter_rank = 4;
    config.model.mlp_ratio = 2;
    config.model.preprocess = ztad_core::config::PreprocessMode::Resize { target_len: 24 };
    config.training.batch_size = 2;
    config.training.seed = seed;
    config
}

#[test]
fn criterion_05_frozen_partition_after_fifty_steps() {
    for mode in [FinetuneMode::Adapter, FinetuneMode::Tpt] {
        let mut config = small_train_config(0xC5);
        config.training.finetune = mode;
        // ~50 steps: 6 samples per epoch at batch 2 -> 3 steps per epoch.
        config.training.epochs = 17;
        let bundle = synthesize(&config).unwrap();
        let splits = make_zero_shot_splits(&bundle.dataset.class_names, 0.75, 1, 0).unwrap();
        let before = bundle.frozen_clip.frozen_bits();
        let trained = train_split(&bundle, &config, &splits[0]).unwrap();
        assert!(trained.log.len() >= 50, "only {} steps", trained.log.len());
        let after: BTreeMap<String, Vec<u64>> = trained
            .params
            .frozen_bits()
            .into_iter()
            .filter(|(name, _)| name.starts_with("clip."))
            .collect();
        assert_eq!(before, after, "frozen params changed in {mode:?} mode");

        // Closed-form trainable fraction of the text encoder under adapters.
        if mode == FinetuneMode::Adapter {
            let mut scoped = ParamSet::new();
            for (name, p) in trained.params.iter() {
                if name.starts_with(TEXT_SCOPE) {
                    scoped.insert(name.clone(), p.value.clone(), p.trainable);
                }
            }
            let fraction =
                trainable_param_fraction(&ztad_core::adapters::text_encoder_partition(&trained.params), &scoped)
                    .unwrap();
            let d = config.model.embed_dim;
            let r = config.model.adapter_rank;
            let adapter_elems = 2 * d * r * config.model.text_blocks;
            let expected = adapter_elems as f64 / scoped.total_elements() as f64;
            assert!((fraction - expected).abs() < 1e-12);
        }
    }
    pass("5", "frozen bits identical after 50 adapter and 50 tpt steps".into());
}

// ---------------------------------------------------------------------------
// Criterion 6: identity at adapter injection
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_identity_at_init() {
    let config = small_train_config(0xC6);
    let bundle = synthesize(&config).unwrap();
    let names = bundle.dataset.class_names.clone();
    let frozen_out = {
        let tape = Tape::new();
        let binder = Binder::new(&tape, &bundle.frozen_clip);
        encode_text(&binder, &config.model, &bundle.dataset.concepts, &names, FinetuneMode::Frozen)
            .unwrap()
            .value()
            .as_slice()
            .to_vec()
    };
    let mut adapted = bundle.frozen_clip.clone();
    inject_adapters(&mut adapted, &config.model, &mut Rng::new(3)).unwrap();
    let adapted_out = {
        let tape = Tape::new();
        let binder = Binder::new(&tape, &adapted);
        encode_text(&binder, &config.model, &bundle.dataset.concepts, &names, FinetuneMode::Adapter)
            .unwrap()
            .value()
            .as_slice()
            .to_vec()
    };
    let mut max_delta = 0.0_f64;
    for (a, b) in frozen_out.iter().zip(&adapted_out) {
        max_delta = max_delta.max((a - b).abs());
    }
    assert!(max_delta < 1e-7, "max deviation {max_delta:.2e}");
    pass("6", format!("max |adapter - frozen| = {max_delta:.2e} at init"));
}

// ---------------------------------------------------------------------------
// Criteria 7-10: benchmark runs (shared fixture)
// ---------------------------------------------------------------------------

/// Chance band for the untrained detector, pinned from ten seeded untrained
/// evaluations (see `benchmark_baseline` below for the regeneration recipe).
const UNTRAINED_BAND: (f64, f64) = (0.0, 0.08);
const BENCHMARK_SEEDS: [u64; 3] = [7, 8, 9];

struct SeedRuns {
    adapter: Vec<f64>,   // per split AVG mAP, split 0 first
    frozen: f64,         // split 0
    two_stage: f64,      // split 0
    hard_mask: f64,      // split 0
}

struct BenchmarkRuns {
    per_seed: Vec<SeedRuns>,
    untrained: Vec<f64>,
}

fn run_variant(
    bundle: &DatasetBundle,
    config: &ExperimentConfig,
    split: &ztad_core::evaluate::ZeroShotSplit,
) -> Result<f64> {
    let trained = train_split(bundle, config, split)?;
    let eval = evaluate_split(bundle, config, split, &trained)?;
    Ok(eval.table.average)
}

fn benchmark_runs() -> &'static BenchmarkRuns {
    static RUNS: OnceLock<BenchmarkRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let mut per_seed = Vec::new();
        for (i, &seed) in BENCHMARK_SEEDS.iter().enumerate() {
            let config = benchmark_config(seed);
            let bundle = synthesize(&config).expect("synthesize benchmark");
            let splits = make_zero_shot_splits(
                &bundle.dataset.class_names,
                config.eval.seen_fraction,
                config.eval.n_splits,
                config.eval.split_seed,
            )
            .expect("splits");
            // Adapter runs: all splits for the first seed (criterion 7),
            // split 0 for the others.
            let adapter_splits = if i == 0 { splits.len() } else { 1 };
            let adapter: Vec<f64> = (0..adapter_splits)
                .map(|s| run_variant(&bundle, &config, &splits[s]).expect("adapter run"))
                .collect();
            let mut frozen_config = config.clone();
            frozen_config.training.finetune = FinetuneMode::Frozen;
            let frozen = run_variant(&bundle, &frozen_config, &splits[0]).expect("frozen run");
            let mut two_stage_config = config.clone();
            two_stage_config.structure = StructureMode::TwoStage;
            let two_stage =
                run_variant(&bundle, &two_stage_config, &splits[0]).expect("two-stage run");
            let mut hard_config = config.clone();
            hard_config.model.mask_mode = MaskMode::HardBoundary;
            let hard_mask = run_variant(&bundle, &hard_config, &splits[0]).expect("hard run");
            per_seed.push(SeedRuns {
                adapter,
                frozen,
                two_stage,
                hard_mask,
            });
        }
        // Untrained baselines on the first benchmark dataset.
        let config = benchmark_config(BENCHMARK_SEEDS[0]);
        let bundle = synthesize(&config).expect("synthesize");
        let splits = make_zero_shot_splits(
            &bundle.dataset.class_names,
            config.eval.seen_fraction,
            config.eval.n_splits,
            config.eval.split_seed,
        )
        .expect("splits");
        let untrained = (0..10)
            .map(|i| {
                let mut c = config.clone();
                c.training.seed = 100 + i as u64;
                let params = build_model_params(&bundle, &c, c.training.finetune)
                    .expect("init params");
                let model = TrainedModel {
                    params,
                    log: vec![],
                    seen_classes: splits[0].seen.clone(),
                    mode: c.training.finetune,
                };
                evaluate_split(&bundle, &c, &splits[0], &model)
                    .expect("untrained eval")
                    .table
                    .average
            })
            .collect();
        BenchmarkRuns {
            per_seed,
            untrained,
        }
    })
}

#[test]
fn criterion_07_zero_shot_transfer() {
    let runs = benchmark_runs();
    let adapter = &runs.per_seed[0].adapter;
    let avg = adapter.iter().sum::<f64>() / adapter.len() as f64;
    assert!(
        avg >= 0.30,
        "trained AVG mAP {avg:.4} below 0.30 (splits: {adapter:?})"
    );
    for (i, baseline) in runs.untrained.iter().enumerate() {
        assert!(
            *baseline >= UNTRAINED_BAND.0 && *baseline <= UNTRAINED_BAND.1,
            "untrained baseline {i} = {baseline:.4} outside pinned band {UNTRAINED_BAND:?}"
        );
    }
    pass(
        "7",
        format!(
            "trained AVG mAP {avg:.4} over {} splits; untrained within {UNTRAINED_BAND:?}",
            adapter.len()
        ),
    );
}

#[test]
fn criterion_08_adapter_beats_frozen() {
    let runs = benchmark_runs();
    let mut margins = Vec::new();
    for (seed, runs) in BENCHMARK_SEEDS.iter().zip(&runs.per_seed) {
        let margin = runs.adapter[0] - runs.frozen;
        assert!(
            margin > 0.0,
            "seed {seed}: adapter {:.4} <= frozen {:.4}",
            runs.adapter[0],
            runs.frozen
        );
        margins.push(margin);
    }
    pass(
        "8",
        format!("margins {:?} positive in 3/3 seeds", margins.iter().map(|m| format!("{m:+.4}")).collect::<Vec<_>>()),
    );
}

#[test]
fn criterion_09_one_stage_beats_two_stage() {
    let runs = benchmark_runs();
    for (seed, runs) in BENCHMARK_SEEDS.iter().zip(&runs.per_seed) {
        assert!(
            runs.adapter[0] >= runs.two_stage,
            "seed {seed}: one-stage {:.4} < two-stage {:.4}",
            runs.adapter[0],
            runs.two_stage
        );
    }
    let detail: Vec<String> = runs
        .per_seed
        .iter()
        .map(|r| format!("{:.4}>={:.4}", r.adapter[0], r.two_stage))
        .collect();
    pass("9", format!("one-stage >= two-stage in 3/3 seeds ({})", detail.join(", ")));
}

#[test]
fn criterion_10_segment_generator_matters() {
    let runs = benchmark_runs();
    for (seed, runs) in BENCHMARK_SEEDS.iter().zip(&runs.per_seed) {
        assert!(
            runs.hard_mask < runs.adapter[0],
            "seed {seed}: hard mask {:.4} did not reduce {:.4}",
            runs.hard_mask,
            runs.adapter[0]
        );
    }
    let detail: Vec<String> = runs
        .per_seed
        .iter()
        .map(|r| format!("{:.4}<{:.4}", r.hard_mask, r.adapter[0]))
        .collect();
    pass("10", format!("hard mask reduces mAP in 3/3 seeds ({})", detail.join(", ")));
}

// ---------------------------------------------------------------------------
// Criterion 11: bit-identical reproduction
// ---------------------------------------------------------------------------

#[test]
fn criterion_11_determinism() {
    let mut artefacts: Vec<(Vec<u8>, Vec<u8>, String)> = Vec::new();
    for round in 0..2 {
        let config = small_train_config(0xC11);
        let bundle = synthesize(&config).unwrap();
        let dir = std::env::temp_dir().join(format!("ztad_accept_det_{round}"));
        std::fs::remove_dir_all(&dir).ok();
        save_bundle(&bundle, &dir, false).unwrap();
        let annotations = std::fs::read(dir.join("annotations.json")).unwrap();
        let encoders = std::fs::read(dir.join("encoders.bin")).unwrap();
        let splits = make_zero_shot_splits(&bundle.dataset.class_names, 0.75, 1, 0).unwrap();
        let mut train_config = config.clone();
        train_config.training.epochs = 3;
        let trained = train_split(&bundle, &train_config, &splits[0]).unwrap();
        let eval = evaluate_split(&bundle, &train_config, &splits[0], &trained).unwrap();
        let csv = ztad_core::experiment::results_csv(
            &[eval],
            &train_config.eval.iou_thresholds,
        );
        artefacts.push((annotations, encoders, csv));
        std::fs::remove_dir_all(&dir).ok();
    }
    assert_eq!(artefacts[0].0, artefacts[1].0, "annotation bytes differ");
    assert_eq!(artefacts[0].1, artefacts[1].1, "encoder archive bytes differ");
    assert_eq!(artefacts[0].2, artefacts[1].2, "results CSV differs");
    pass("11", "synth/train/eval artefacts bit-identical across two runs".into());
}

// ---------------------------------------------------------------------------
// Auxiliary: regeneration recipe for the pinned untrained band
// ---------------------------------------------------------------------------

/// Prints the raw untrained baselines the band was pinned from.
/// `cargo test -p ztad-core --test acceptance baseline_recipe -- --ignored --nocapture`
#[test]
#[ignore]
fn baseline_recipe() {
    let runs = benchmark_runs();
    println!("untrained AVG mAP over 10 init seeds: {:?}", runs.untrained);
}

