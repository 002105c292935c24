//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use sbsr_acceptance::{central_difference, circle, metrics};
use sbsr_core::aggregation::{fuse_scales, fusion_weights, pool_views};
use sbsr_core::backbone::{add_noise_with, extract_features, Backbone, DenoiseCond, MockBackbone};
use sbsr_core::conditioning::{kv_names, local_kernel_name};
use sbsr_core::dataset::{
    apply_split, load_manifest, make_split, DatasetManifest, DatasetName, Role, ShapeRecord, SketchRecord,
    SplitProtocol,
};
use sbsr_core::encoders::{MockClip, Modality, StubCaptioner};
use sbsr_core::eval::{
    build_index, compute_metrics, embed_query, evaluate, rank, rank_scores, EmbeddingIndex, EvalOptions, E_CUTOFF,
};
use sbsr_core::imaging::{encode_png, load_image};
use sbsr_core::model::{prepare, Model, ModelConfig, PreparedImage};
use sbsr_core::objectives::{circle_t_loss, circle_t_with_grad, dynamic_scale, CircleTParams, LambdaGradient};
use sbsr_core::synthetic::{build, smoke_train_config, SynthConfig};
use sbsr_core::train::{fit, read_trace, Checkpoint};
use sbsr_core::ModelDims;
use sbsr_service::{router, AppState, RetrieveResponse, ServiceConfig};
use tower::ServiceExt;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> rand::rngs::StdRng {
    rand::rngs::StdRng::seed_from_u64(seed)
}

fn within_budget(start: Instant, budget: Duration) -> Result<(), String> {
    let spent = start.elapsed();
    ensure(spent < budget, || format!("took {spent:.1?}, budget {budget:?}"))
}

// ---------------------------------------------------------------- circle-T

/// Random parameters around the defaults and an input set kept away from
/// the hinge points, where the loss is not differentiable.
fn random_instance(r: &mut impl Rng, negatives: usize) -> (CircleTParams, f64, Vec<f64>) {
    let p = CircleTParams {
        delta_p: r.random_range(0.6..0.9),
        delta_n: r.random_range(0.1..0.4),
        gamma: r.random_range(4.0..64.0),
        beta: r.random_range(0.0..2.0),
        tau: r.random_range(0.2..2.0),
        lambda_max: r.random_range(1.0..4.0),
    };
    loop {
        let s_p = r.random_range(-1.0..1.0);
        let s_n: Vec<f64> = (0..negatives).map(|_| r.random_range(-1.0..1.0)).collect();
        let near_hinge = s_n.iter().any(|s| (s + p.delta_n).abs() < 1e-3);
        let mean = s_n.iter().sum::<f64>() / negatives.max(1) as f64;
        let raw = 1.0 + p.beta * (-mean / p.tau).exp();
        let near_clamp = negatives > 0 && (raw - p.lambda_max).abs() < 1e-3;
        if !near_hinge && !near_clamp {
            return (p, s_p, s_n);
        }
    }
}

fn grad_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

fn circle_gradient_check() -> Outcome {
    let start = Instant::now();
    let mut r = rng(11);
    let h = 1e-5;
    let mut worst = 0f64;
    for batch in 0..100 {
        let (p, s_p, s_n) = random_instance(&mut r, batch % 33);
        let mut x = vec![s_p];
        x.extend(&s_n);
        let f = |p: CircleTParams| move |v: &[f64]| circle_t_loss(v[0], &v[1..], &p).unwrap();

        // full mode differentiates through the scale factor
        let full = circle_t_with_grad(s_p, &s_n, &p, LambdaGradient::Full).map_err(|e| e.to_string())?;
        // detached mode holds it at its current value; clamping there does the same
        let lambda = dynamic_scale(s_n.iter().sum::<f64>() / s_n.len().max(1) as f64, &p);
        let frozen = CircleTParams { beta: 1e12, lambda_max: lambda, ..p };
        let detached = circle_t_with_grad(s_p, &s_n, &p, LambdaGradient::Detached).map_err(|e| e.to_string())?;

        for (i, (gf, gd)) in std::iter::once((full.grad_positive, detached.grad_positive))
            .chain(full.grad_negatives.iter().copied().zip(detached.grad_negatives.iter().copied()))
            .enumerate()
        {
            let e_full = grad_error(gf, central_difference(f(p), &x, i, h));
            let e_det = grad_error(gd, central_difference(f(frozen), &x, i, h));
            worst = worst.max(e_full).max(e_det);
            ensure(e_full < 1e-4 && e_det < 1e-4, || {
                format!("batch {batch} coordinate {i}: errors {e_full:.2e} (full), {e_det:.2e} (detached)")
            })?;
        }
    }
    within_budget(start, Duration::from_secs(10))?;
    Ok(format!("100 batches, 0-32 negatives, worst relative error {worst:.2e}"))
}

fn circle_oracle_equivalence() -> Outcome {
    let p = CircleTParams::default();
    let worked = circle_t_loss(0.9, &[0.3, 0.1], &p).map_err(|e| e.to_string())?;
    let err = circle::relative_error(worked, &circle::exact(0.9, &[0.3, 0.1], &p));
    ensure(circle::below(&err, 1e-9), || format!("worked example off by {err}"))?;

    let mut r = rng(12);
    for case in 0..1000 {
        let (p, s_p, s_n) = random_instance(&mut r, 1 + case % 32);
        let value = circle_t_loss(s_p, &s_n, &p).map_err(|e| e.to_string())?;
        let err = circle::relative_error(value, &circle::exact(s_p, &s_n, &p));
        ensure(circle::below(&err, 1e-9), || format!("case {case}: relative error {err}"))?;
    }

    for s_p in [-1.0, 0.0, 0.5, 1.0] {
        let v = circle_t_loss(s_p, &[], &p).map_err(|e| e.to_string())?;
        ensure(v.to_bits() == 0, || format!("empty negatives gave {v}"))?;
    }

    for case in 0..1000 {
        let (mut p, s_p, s_n) = random_instance(&mut r, case % 33);
        p.beta = 0.0;
        let ours = circle_t_loss(s_p, &s_n, &p).map_err(|e| e.to_string())?;
        let reference = circle::unit_scaled(&[s_p], &s_n, &p);
        ensure(ours.to_bits() == reference.to_bits(), || {
            format!("case {case}: {ours} vs unit-scaled reference {reference}")
        })?;
    }
    Ok("1000 exact-arithmetic cases within 1e-9; empty set is 0; zero beta matches the unit-scaled loss bit for bit".into())
}

fn lambda_properties() -> Outcome {
    let start = Instant::now();
    let means: Vec<f64> = (-400..=400).map(|i| i as f64 / 100.0).collect();
    let mut grid = 0;
    for beta in [0.0, 0.1, 0.5, 1.0, 2.0, 8.0] {
        for tau in [0.05, 0.2, 0.5, 1.0, 3.0] {
            for lambda_max in [1.0, 1.25, 2.0, 4.0, 16.0] {
                let p = CircleTParams { beta, tau, lambda_max, ..Default::default() };
                let values: Vec<f64> = means.iter().map(|&m| dynamic_scale(m, &p)).collect();
                ensure(values.iter().all(|&l| (1.0..=lambda_max).contains(&l)), || {
                    format!("out of bounds for {p:?}")
                })?;
                ensure(values.windows(2).all(|w| w[1] <= w[0]), || format!("increasing for {p:?}"))?;
                let far = dynamic_scale(-1e6, &p);
                let want = if beta == 0.0 { 1.0 } else { lambda_max };
                ensure(far == want, || format!("limit {far} for {p:?}, expected {want}"))?;
                if beta == 0.0 {
                    ensure(values.iter().all(|&l| l == 1.0), || "zero beta must give 1".into())?;
                }
                grid += 1;
            }
        }
    }
    let half = CircleTParams { beta: 0.5, tau: 1.0, lambda_max: 2.0, ..Default::default() };
    ensure(dynamic_scale(0.0, &half) == 1.5, || "scale at zero mean".into())?;
    let clamped = CircleTParams { beta: 0.5, tau: 0.5, lambda_max: 2.0, ..Default::default() };
    ensure(dynamic_scale(-10.0, &clamped) == 2.0, || "clamp at -10".into())?;
    within_budget(start, Duration::from_secs(1))?;
    Ok(format!("{grid} parameter settings x {} means", means.len()))
}

// ---------------------------------------------------------------- metrics

fn metrics_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(13);
    let gallery = 100;
    for instance in 0..50 {
        let classes = r.random_range(5..=10);
        let labels: Vec<String> = (0..gallery).map(|_| format!("c{}", r.random_range(0..classes))).collect();
        let ids: Vec<String> = (0..gallery).map(|i| format!("g{:03}", (i * 37) % gallery)).collect();
        let rows: Vec<Vec<f32>> = (0..gallery).map(|_| vec![1.0]).collect();
        let index = EmbeddingIndex::new(ids.clone(), labels.clone(), &rows).map_err(|e| e.to_string())?;

        let mut rankings = Vec::new();
        let mut query_labels = Vec::new();
        let mut oracle = Vec::new();
        for q in 0..20 {
            // coarse scores so that ties occur and the id tie-break matters
            let scores: Vec<f64> = (0..gallery).map(|_| r.random_range(0..40) as f64 / 40.0).collect();
            let label = format!("c{}", r.random_range(0..classes + 1));
            rankings.push(rank_scores(&format!("q{q}"), &index, &scores).map_err(|e| e.to_string())?);
            oracle.extend(metrics::query(&scores, &ids, &labels, &label, E_CUTOFF));
            query_labels.push(label);
        }
        let report = compute_metrics(&rankings, &query_labels).map_err(|e| e.to_string())?;
        ensure(report.query_count == oracle.len(), || format!("instance {instance}: query count"))?;
        ensure(report.excluded_queries == 20 - oracle.len(), || format!("instance {instance}: exclusions"))?;
        let mean = |f: fn(&metrics::Definitional) -> f64| oracle.iter().map(f).sum::<f64>() / oracle.len() as f64;
        let pairs = [
            ("NN", report.nn, mean(|m| m.nn)),
            ("FT", report.ft, mean(|m| m.ft)),
            ("ST", report.st, mean(|m| m.st)),
            ("E", report.e, mean(|m| m.e)),
            ("DCG", report.dcg, mean(|m| m.dcg)),
            ("nDCG", report.ndcg, mean(|m| m.dcg)),
            ("MRR", report.mrr, mean(|m| m.rr)),
            ("mAP", report.map, mean(|m| m.ap)),
        ];
        for (name, got, want) in pairs {
            ensure((got - want).abs() <= 1e-9, || format!("instance {instance}: {name} {got} vs {want}"))?;
        }
    }

    // every query's class ranked ahead of everything else
    let labels: Vec<String> = (0..100).map(|i| format!("c{}", i % 5)).collect();
    let ids: Vec<String> = (0..100).map(|i| format!("g{i:03}")).collect();
    let rows: Vec<Vec<f32>> = (0..100).map(|_| vec![1.0]).collect();
    let index = EmbeddingIndex::new(ids, labels.clone(), &rows).map_err(|e| e.to_string())?;
    let mut rankings = Vec::new();
    let mut query_labels = Vec::new();
    for q in 0..20 {
        let label = format!("c{}", q % 5);
        let scores: Vec<f64> = labels.iter().map(|l| if *l == label { 1.0 } else { 0.0 }).collect();
        rankings.push(rank_scores(&format!("q{q}"), &index, &scores).map_err(|e| e.to_string())?);
        query_labels.push(label);
    }
    let perfect = compute_metrics(&rankings, &query_labels).map_err(|e| e.to_string())?;
    for (name, v) in [
        ("NN", perfect.nn),
        ("FT", perfect.ft),
        ("DCG", perfect.dcg),
        ("nDCG", perfect.ndcg),
        ("MRR", perfect.mrr),
        ("mAP", perfect.map),
    ] {
        ensure(v == 1.0, || format!("perfect ranking gave {name} = {v}"))?;
    }
    within_budget(start, Duration::from_secs(30))?;
    Ok("50 instances of 20 x 100 match the rank-counting oracle; perfect ranking scores 1".into())
}

// ---------------------------------------------------------------- splits

/// A manifest with the official category, shape and sketch counts.
fn official_manifest(dataset: DatasetName) -> DatasetManifest {
    let (n_cat, n_shapes, n_sketches) = dataset.official_cardinality().unwrap();
    // names in scrambled order so that sorting is actually exercised
    let categories: Vec<String> = (0..n_cat).map(|i| format!("cat{:03}", (i * 7) % n_cat)).collect();
    let shapes = (0..n_shapes)
        .map(|i| ShapeRecord::new(format!("m{i}"), categories[i % n_cat].clone(), "m.off"))
        .collect();
    let sketches = (0..n_sketches)
        .map(|i| SketchRecord {
            id: format!("s{i}"),
            category: categories[i % n_cat].clone(),
            uri: "s.png".into(),
            role: if i % 4 == 0 { Role::Test } else { Role::Train },
            caption: None,
        })
        .collect();
    DatasetManifest {
        dataset,
        categories,
        shapes,
        sketches,
    }
}

fn split_protocol() -> Outcome {
    let mut lines = Vec::new();
    for (dataset, seen, unseen) in [(DatasetName::Shrec13, 79, 11), (DatasetName::Shrec14, 151, 20)] {
        let m = official_manifest(dataset.clone());
        ensure(m.is_official_cardinality(), || format!("{dataset} fixture cardinality"))?;
        let s = make_split(&m, SplitProtocol::SplitI).map_err(|e| e.to_string())?;
        ensure(s.seen_categories.len() == seen && s.unseen_categories.len() == unseen, || {
            format!("{dataset}: {} / {}", s.seen_categories.len(), s.unseen_categories.len())
        })?;
        let last_seen = s.seen_categories.iter().next_back().unwrap();
        ensure(s.unseen_categories.iter().all(|u| u > last_seen), || {
            format!("{dataset}: seen set is not an alphabetical prefix")
        })?;
        lines.push(format!("{dataset} split1 {seen}/{unseen}"));
    }

    // fixture properties of both rules
    let mut r = rng(14);
    for _ in 0..200 {
        let n = r.random_range(2..40);
        let counts: Vec<usize> = (0..n).map(|_| r.random_range(1..12)).collect();
        let mut m = DatasetManifest {
            dataset: "fixture".parse().unwrap(),
            categories: (0..n).map(|i| format!("k{:02}", (i * 13) % n)).collect(),
            shapes: Vec::new(),
            sketches: Vec::new(),
        };
        for (c, &k) in m.categories.clone().iter().zip(&counts) {
            for j in 0..k {
                m.shapes.push(ShapeRecord::new(format!("{c}/m{j}"), c.clone(), "m.off"));
            }
            m.sketches.push(SketchRecord {
                id: format!("{c}/s"),
                category: c.clone(),
                uri: "s.png".into(),
                role: Role::Train,
                caption: None,
            });
        }
        let all: BTreeSet<String> = m.categories.iter().cloned().collect();
        for protocol in [SplitProtocol::SplitI, SplitProtocol::SplitII] {
            let s = make_split(&m, protocol).map_err(|e| e.to_string())?;
            ensure(s.seen_categories.is_disjoint(&s.unseen_categories), || "overlapping partition".into())?;
            let union: BTreeSet<String> = s.seen_categories.union(&s.unseen_categories).cloned().collect();
            ensure(union == all, || "partition does not cover all categories".into())?;
            if protocol == SplitProtocol::SplitII {
                let counts = m.shape_counts();
                ensure(
                    all.iter().all(|c| s.is_unseen(c) == (counts[c.as_str()] <= 5)),
                    || "threshold rule violated".into(),
                )?;
            }
            let mut applied = m.clone();
            apply_split(&mut applied, &s);
            ensure(
                applied.sketches.iter().all(|k| !s.is_unseen(&k.category) || k.role == Role::Test),
                || "unseen sketch left out of the test role".into(),
            )?;
        }
    }
    lines.push("200 fixtures partitioned".into());

    match std::env::var_os("SBSR_SHREC_ROOT") {
        Some(root) => {
            for (dataset, unseen) in [(DatasetName::Shrec13, 23), (DatasetName::Shrec14, 38)] {
                let m = load_manifest(Path::new(&root), dataset.clone()).map_err(|e| e.to_string())?;
                let s = make_split(&m, SplitProtocol::SplitII).map_err(|e| e.to_string())?;
                ensure(s.unseen_categories.len() == unseen, || {
                    format!("{dataset} split2: {} unseen, published {unseen}", s.unseen_categories.len())
                })?;
                lines.push(format!("{dataset} split2 {unseen} unseen"));
            }
        }
        None => println!("SKIP  split protocol: Split-II on official data needs SBSR_SHREC_ROOT"),
    }
    Ok(lines.join("; "))
}

// ---------------------------------------------------------------- features

fn empty_cond(dims: &ModelDims) -> DenoiseCond {
    DenoiseCond {
        context: Tensor::zeros((1, dims.text_len, dims.context_dim()), DType::F32, &Device::Cpu).unwrap(),
        pooled: Tensor::zeros((1, dims.text_dim_g), DType::F32, &Device::Cpu).unwrap(),
        image: None,
    }
}

fn bits(t: &Tensor) -> Vec<u32> {
    t.flatten_all().unwrap().to_vec1::<f32>().unwrap().into_iter().map(f32::to_bits).collect()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f32>().unwrap()
}

fn feature_contract() -> Outcome {
    let start = Instant::now();
    let backbone = MockBackbone::new(ModelDims::full());
    let dims = backbone.dims().clone();
    let channels = [320, 640, 1280, 1280, 640, 320];
    let strides = [8, 16, 32, 32, 16, 8];
    for h in [256usize, 512] {
        let images = Tensor::rand(-1f32, 1f32, (1, h, h, 3), &Device::Cpu).map_err(|e| e.to_string())?;
        let t = sbsr_core::backbone::DEFAULT_TIMESTEP;
        let run = |seed| extract_features(&backbone, &images, &empty_cond(&dims), None, t, &[seed]).unwrap();
        let a = run(5);
        let want: Vec<_> = strides.iter().zip(channels).map(|(&s, c)| (h / s, h / s, c)).collect();
        ensure(a.shapes() == want, || format!("h={h}: {:?}", a.shapes()))?;
        let b = run(5);
        ensure(a.maps.iter().zip(&b.maps).all(|(x, y)| bits(&x.data) == bits(&y.data)), || {
            format!("h={h}: same seed gave different maps")
        })?;
        let c = run(6);
        ensure(a.maps.iter().zip(&c.maps).any(|(x, y)| bits(&x.data) != bits(&y.data)), || {
            format!("h={h}: noise seed has no effect")
        })?;
    }
    let z0 = Tensor::randn(0f32, 1f32, (2, 16, 4), &Device::Cpu).map_err(|e| e.to_string())?;
    let eps = Tensor::randn(0f32, 1f32, (2, 16, 4), &Device::Cpu).map_err(|e| e.to_string())?;
    let clean = add_noise_with(&z0, &eps, 1.0).map_err(|e| e.to_string())?;
    let pure = add_noise_with(&z0, &eps, 0.0).map_err(|e| e.to_string())?;
    ensure(max_abs_diff(&clean, &z0) == 0.0, || "alpha_bar = 1 is not the identity".into())?;
    ensure(max_abs_diff(&pure, &eps) == 0.0, || "alpha_bar = 0 is not pure noise".into())?;
    within_budget(start, Duration::from_secs(20))?;
    Ok("six maps with the expected shapes at 256 and 512; noise limits exact; seeded determinism".into())
}

// ---------------------------------------------------------------- conditioning

fn test_image(seed: u64) -> image::DynamicImage {
    let mut r = rng(seed);
    let mut img = image::GrayImage::from_pixel(64, 64, image::Luma([255]));
    let (cx, cy, rad) = (r.random_range(20..44) as i32, r.random_range(20..44) as i32, r.random_range(8..18) as i32);
    for (x, y, p) in img.enumerate_pixels_mut() {
        let d = ((x as i32 - cx).pow(2) + (y as i32 - cy).pow(2)) as f64;
        if d.sqrt() < rad as f64 {
            *p = image::Luma([60 + (d as u8 % 100)]);
        }
    }
    image::DynamicImage::ImageLuma8(img)
}

fn desk_items(clip: &MockClip, n: usize) -> Vec<PreparedImage> {
    (0..n)
        .map(|i| {
            prepare(&format!("x{i}"), &test_image(i as u64), 64, Modality::Sketch, None, None, clip, &StubCaptioner)
                .unwrap()
        })
        .collect()
}

fn desk_model(cfg: impl FnOnce(&mut ModelConfig)) -> Model {
    let mut config = ModelConfig {
        profile: "desk".into(),
        image_size: 64,
        ..Default::default()
    };
    cfg(&mut config);
    Model::new(config, vec!["a".into(), "b".into()], 0.1, 3).unwrap()
}

fn injection_ablation() -> Outcome {
    let dims = ModelDims::desk();
    let backbone = MockBackbone::new(dims.clone());
    let clip = MockClip::new(dims.vision_dim, dims.patch_grid);
    let items = desk_items(&clip, 3);
    let refs: Vec<&PreparedImage> = items.iter().collect();
    let seeds = [1, 2, 3];
    let features = |m: &Model| m.features(&backbone, &refs, &seeds).unwrap();

    let injected = desk_model(|_| {});
    let baseline = desk_model(|c| {
        c.conditioning.use_global = false;
        c.conditioning.use_local = false;
    });
    let (a, b) = (features(&injected), features(&baseline));
    ensure(a.maps.iter().zip(&b.maps).all(|(x, y)| bits(&x.data) == bits(&y.data)), || {
        "zero-initialized injection changed the features".into()
    })?;

    // give the injection parameters the kind of values training would leave
    let trained = |m: &Model| {
        let mut r = rng(15);
        let mut names: Vec<String> = (0..6).map(|s| kv_names(s).1).collect();
        names.extend((0..3).map(local_kernel_name));
        for name in names {
            let var = m.store.var(&name).unwrap();
            let shape = var.as_tensor().shape().clone();
            let values: Vec<f32> = (0..shape.elem_count()).map(|_| r.random_range(-0.05..0.05)).collect();
            var.set(&Tensor::from_vec(values, shape, &Device::Cpu).unwrap()).unwrap();
        }
    };
    let mut lines = Vec::new();
    let toggles: [(&str, fn(&mut ModelConfig)); 4] = [
        ("global", |c| c.conditioning.use_global = false),
        ("local", |c| c.conditioning.use_local = false),
        ("hard", |c| c.conditioning.use_hard = false),
        ("soft", |c| c.conditioning.use_soft = false),
    ];
    let on = desk_model(|_| {});
    trained(&on);
    let reference = features(&on);
    for (name, switch_off) in toggles {
        let off = desk_model(switch_off);
        trained(&off);
        let f = features(&off);
        let diff = reference
            .maps
            .iter()
            .zip(&f.maps)
            .map(|(x, y)| max_abs_diff(&x.data, &y.data))
            .fold(0f32, f32::max);
        ensure(diff > 0.0, || format!("toggling {name} left the features unchanged"))?;
        lines.push(format!("{name} {diff:.2e}"));
    }
    Ok(format!("zero injection is bit-exact; toggle max-abs differences: {}", lines.join(", ")))
}

// ---------------------------------------------------------------- aggregation

fn aggregation_properties() -> Outcome {
    let mut r = rng(16);
    for _ in 0..100 {
        let logits: Vec<f32> = (0..6).map(|_| r.random_range(-5.0..5.0)).collect();
        let w = fusion_weights(&Tensor::new(logits.as_slice(), &Device::Cpu).unwrap())
            .map_err(|e| e.to_string())?
            .to_vec1::<f32>()
            .unwrap();
        ensure(w.len() == 6 && w.iter().all(|&x| x >= 0.0), || format!("weights {w:?}"))?;
        ensure((w.iter().sum::<f32>() - 1.0).abs() < 1e-6, || format!("weights sum {}", w.iter().sum::<f32>()))?;

        let vectors: Vec<Tensor> = (0..6).map(|_| Tensor::randn(0f32, 1f32, (3, 8), &Device::Cpu).unwrap()).collect();
        let c = r.random_range(-3.0f32..3.0);
        let fused = fuse_scales(&vectors, &Tensor::new(&[c; 6], &Device::Cpu).unwrap()).map_err(|e| e.to_string())?;
        let mean = (Tensor::stack(&vectors, 0).unwrap().sum(0).unwrap() / 6.0).unwrap();
        ensure(max_abs_diff(&fused, &mean) < 1e-5, || "uniform fusion is not the mean".into())?;

        let views: Vec<Vec<f32>> = (0..r.random_range(1..8)).map(|_| (0..16).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let pooled = pool_views(&views).map_err(|e| e.to_string())?;
        let mut shuffled = views.clone();
        shuffled.reverse();
        shuffled.rotate_left(r.random_range(0..views.len()));
        ensure(pool_views(&shuffled).unwrap() == pooled, || "view pooling depends on order".into())?;
        let one = pool_views(&views[..1]).unwrap();
        let norm = views[0].iter().map(|x| x * x).sum::<f32>().sqrt();
        ensure(one.iter().zip(&views[0]).all(|(a, b)| (a - b / norm).abs() < 1e-6), || {
            "single-view pooling is not the normalized view".into()
        })?;
    }

    // embeddings the model publishes
    let dims = ModelDims::desk();
    let backbone = MockBackbone::new(dims.clone());
    let clip = MockClip::new(dims.vision_dim, dims.patch_grid);
    let items = desk_items(&clip, 4);
    let refs: Vec<&PreparedImage> = items.iter().collect();
    let model = desk_model(|_| {});
    let rows = model.embed_detached(&backbone, &refs, 2).map_err(|e| e.to_string())?;
    let pooled = pool_views(&model.fused_detached(&backbone, &refs, 4).map_err(|e| e.to_string())?).unwrap();
    let (_, query) = embed_query(&model, &backbone, &test_image(99), &clip, &StubCaptioner).map_err(|e| e.to_string())?;
    for v in rows.iter().chain([&pooled, &query]) {
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        ensure((n - 1.0).abs() < 1e-5, || format!("published embedding has norm {n}"))?;
    }
    Ok("simplex weights, uniform fusion is the mean, order-free pooling, unit embeddings".into())
}

// ---------------------------------------------------------------- training

struct World {
    root: PathBuf,
    manifest: DatasetManifest,
    split: sbsr_core::dataset::SplitSpec,
    backbone: MockBackbone,
    clip: MockClip,
}

fn world(root: &Path) -> World {
    let dims = ModelDims::desk();
    let clip = MockClip::new(dims.vision_dim, dims.patch_grid);
    let (manifest, split) = build(root, &SynthConfig::default(), &clip, &StubCaptioner, 3).unwrap();
    World {
        root: root.to_path_buf(),
        manifest,
        split,
        backbone: MockBackbone::new(dims),
        clip,
    }
}

fn smoke(w: &World, checkpoint: &mut Option<PathBuf>) -> Outcome {
    let start = Instant::now();
    let cfg = smoke_train_config(&w.root.join("smoke"), 50);
    let out = fit(&w.manifest, &w.split, &cfg, &w.backbone, &w.clip, &StubCaptioner, None).map_err(|e| e.to_string())?;
    ensure(out.trace.len() == 50, || format!("{} steps recorded", out.trace.len()))?;
    let first = out.trace[0].total;
    let last = out.trace[49].total;
    let drop = 1.0 - last / first;
    ensure(drop >= 0.30, || format!("loss {first:.2} -> {last:.2}, drop {:.1}%", 100.0 * drop))?;

    let ck = Checkpoint::load(&out.checkpoint).map_err(|e| e.to_string())?;
    let opts = EvalOptions { chunk: 8, ..Default::default() };
    let eval = evaluate(&ck, &w.manifest, &w.split, &w.backbone, &w.clip, &StubCaptioner, &opts)
        .map_err(|e| e.to_string())?;
    let held_out: BTreeSet<&str> = eval.index.labels.iter().map(String::as_str).collect();
    ensure(held_out.len() == 2, || format!("gallery classes {held_out:?}"))?;
    ensure(eval.report.map == 1.0, || format!("zero-shot mAP {}", eval.report.map))?;
    within_budget(start, Duration::from_secs(180))?;
    *checkpoint = Some(out.checkpoint);
    Ok(format!(
        "loss {first:.2} -> {last:.2} ({:.1}% drop), zero-shot mAP {} over {} queries, {:.1?}",
        100.0 * drop,
        eval.report.map,
        eval.report.query_count,
        start.elapsed()
    ))
}

fn frozen_and_checkpoints(w: &World) -> Outcome {
    let run = |dir: &str, steps, resume: Option<&Path>| {
        let cfg = smoke_train_config(&w.root.join(dir), steps);
        fit(&w.manifest, &w.split, &cfg, &w.backbone, &w.clip, &StubCaptioner, resume).map_err(|e| e.to_string())
    };
    let straight = run("straight", 4, None)?;
    ensure(straight.backbone_checksum_before == straight.backbone_checksum_after, || {
        "backbone weights changed during training".into()
    })?;

    let bytes = std::fs::read(&straight.checkpoint).map_err(|e| e.to_string())?;
    let ck = Checkpoint::from_bytes(&bytes).map_err(|e| e.to_string())?;
    ensure(ck.to_bytes().map_err(|e| e.to_string())? == bytes, || "checkpoint bytes changed on reload".into())?;
    let reloaded = ck.model().map_err(|e| e.to_string())?;
    ensure(
        reloaded.params_checksum().unwrap() == straight.model.params_checksum().unwrap(),
        || "reloaded parameters differ".into(),
    )?;

    let half = run("resumed", 2, None)?;
    let rest = run("resumed", 4, Some(&half.checkpoint))?;
    let stitched: Vec<_> = half.trace.iter().chain(&rest.trace).copied().collect();
    ensure(stitched == straight.trace, || "resumed trace diverges".into())?;
    let on_disk = read_trace(&w.root.join("resumed/smoke/loss.jsonl")).map_err(|e| e.to_string())?;
    ensure(on_disk == straight.trace, || "trace file diverges".into())?;
    ensure(
        rest.model.params_checksum().unwrap() == straight.model.params_checksum().unwrap(),
        || "resumed parameters differ".into(),
    )?;
    Ok("backbone checksum constant; checkpoint bytes round-trip; 2+2 resumed steps equal 4 straight".into())
}

fn online_offline(w: &World, checkpoint: &Path) -> Outcome {
    let ck = Checkpoint::load(checkpoint).map_err(|e| e.to_string())?;
    let model = ck.model().map_err(|e| e.to_string())?;
    let all: Vec<usize> = (0..w.manifest.shapes.len()).collect();
    let opts = EvalOptions { chunk: 8, ..Default::default() };
    let (index, meta) = build_index(&ck, &w.manifest, &all, &w.backbone, &w.clip, &StubCaptioner, &opts)
        .map_err(|e| e.to_string())?;
    let index_path = w.root.join("index.bin");
    index.to_set().save(&index_path, meta).map_err(|e| e.to_string())?;
    let config = ServiceConfig {
        checkpoint: checkpoint.to_path_buf(),
        index: index_path,
        manifest: w.root.join("synthetic/manifest.jsonl"),
        ..Default::default()
    };
    let app = router(Arc::new(AppState::load(config).map_err(|e| e.to_string())?));
    let runtime = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;

    let payloads: Vec<Vec<u8>> = w
        .manifest
        .sketches
        .iter()
        .take(20)
        .map(|s| encode_png(&load_image(&s.uri).unwrap()).unwrap())
        .collect();
    ensure(payloads.len() == 20, || format!("{} sketch payloads", payloads.len()))?;
    for (i, png) in payloads.iter().enumerate() {
        let raw = image::load_from_memory(png).map_err(|e| e.to_string())?;
        let (id, v) = embed_query(&model, &w.backbone, &raw, &w.clip, &StubCaptioner).map_err(|e| e.to_string())?;
        let offline: Vec<String> = rank(&id, &v, &index).map_err(|e| e.to_string())?.entries.into_iter().map(|e| e.id).collect();

        let req = Request::post(format!("/api/retrieve?k={}", index.len()))
            .header(header::CONTENT_TYPE, "image/png")
            .body(Body::from(png.clone()))
            .unwrap();
        let (status, body) = runtime.block_on(async {
            let resp = app.clone().oneshot(req).await.unwrap();
            let status = resp.status();
            (status, axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap())
        });
        ensure(status == StatusCode::OK, || format!("payload {i}: status {status}"))?;
        let online: RetrieveResponse = serde_json::from_slice(&body).map_err(|e| e.to_string())?;
        let online: Vec<String> = online.entries.into_iter().map(|e| e.shape_id).collect();
        ensure(online == offline, || format!("payload {i}: service order differs from offline ranking"))?;
    }
    Ok(format!("20 sketch payloads, full {}-item orderings identical", index.len()))
}

// ---------------------------------------------------------------- runner

fn report(name: &str, outcome: Outcome, failures: &mut usize) {
    match outcome {
        Ok(detail) => println!("PASS  {name}: {detail}"),
        Err(why) => {
            *failures += 1;
            println!("FAIL  {name}: {why}");
        }
    }
}

fn guarded(f: impl FnOnce() -> Outcome + std::panic::UnwindSafe) -> Outcome {
    std::panic::catch_unwind(f).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    })
}

fn main() {
    let mut failures = 0;
    report("circle-T gradient check", guarded(circle_gradient_check), &mut failures);
    report("circle-T oracle equivalence", guarded(circle_oracle_equivalence), &mut failures);
    report("scale factor properties", guarded(lambda_properties), &mut failures);
    report("metrics oracle", guarded(metrics_oracle), &mut failures);
    report("split protocol", guarded(split_protocol), &mut failures);
    report("feature contract", guarded(feature_contract), &mut failures);
    report("injection no-op and toggles", guarded(injection_ablation), &mut failures);
    report("aggregation properties", guarded(aggregation_properties), &mut failures);

    let tmp = tempfile::tempdir().expect("temp dir");
    let w = world(tmp.path());
    let mut checkpoint = None;
    report("end-to-end smoke", guarded(std::panic::AssertUnwindSafe(|| smoke(&w, &mut checkpoint))), &mut failures);
    report("frozen backbone and checkpoints", guarded(std::panic::AssertUnwindSafe(|| frozen_and_checkpoints(&w))), &mut failures);
    let online = match &checkpoint {
        Some(ck) => guarded(std::panic::AssertUnwindSafe(|| online_offline(&w, ck))),
        None => Err("no smoke checkpoint to serve".into()),
    };
    report("online/offline equivalence", online, &mut failures);

    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
