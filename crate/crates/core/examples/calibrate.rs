//! Scratch calibration run for the desk-scale reference configuration.

use std::time::Instant;

use gzsl_core::backbone::FeatureBatch;
use gzsl_core::data::{split_frames, SplitMode};
use gzsl_core::generator::evaluate_generator_mmd;
use gzsl_core::numerics::{dot, Matrix};
use gzsl_core::pipeline::{
    self, build_prototypes, evaluation_frames, run_eval, DataSource, RunConfig, SceneConfig,
};

fn main() {
    let mut config = RunConfig::default();
    config.seed = 42;
    config.data = DataSource::Scene(SceneConfig {
        scale: 0.1,
        ..SceneConfig::default()
    });
    if let Ok(proto_seed) = std::env::var("PROTO_SEED") {
        config.prototypes = gzsl_core::pipeline::PrototypeSource::Synthesize {
            dim: 64,
            seed: proto_seed.parse().unwrap(),
        };
    }

    let out = std::path::PathBuf::from(
        std::env::var("RUN_DIR").unwrap_or_else(|_| "/tmp/calib/run2".to_string()),
    );
    let t0 = Instant::now();
    if !out.join("classifier.ckpt").exists() {
        pipeline::run_all(&config, &out).unwrap();
    }
    println!("training reused/completed in {:?}", t0.elapsed());

    // criterion 8: untrained vs trained generator MMD
    let backbone = pipeline::load_backbone(&out).unwrap();
    let real = pipeline::real_seen_features(&config, &backbone).unwrap();
    let prototypes = build_prototypes(&config).unwrap();
    let untrained = gzsl_core::generator::GeneratorParams::init(
        &config.generator,
        prototypes.dim(),
        config.backbone.feature_dim,
        pipeline::derive_seed(config.seed, "stage2-generator-init"),
    )
    .unwrap();
    let trained = pipeline::load_generator(&out).unwrap();
    let mmd0 = evaluate_generator_mmd(&untrained, &real, &prototypes, 128, 999).unwrap();
    let mmd1 = evaluate_generator_mmd(&trained, &real, &prototypes, 128, 999).unwrap();
    println!("generator MMD untrained {mmd0:.6} -> trained {mmd1:.6} (ratio {:.2})", mmd0 / mmd1);

    // evaluation
    let frames = evaluation_frames(&config).unwrap();
    let t1 = Instant::now();
    let (report, cm) = run_eval(&config, &out, &frames, None).unwrap();
    println!("eval in {:?}", t1.elapsed());
    println!(
        "overall {:.4}  seen {:?}  unseen {:?}  HM {:?}",
        report.overall_accuracy, report.accuracy_seen, report.accuracy_unseen, report.hm_accuracy
    );
    println!(
        "per-class recall: {:?}",
        report
            .per_class_accuracy
            .iter()
            .map(|v| v.map(|x| (x * 1000.0).round() / 1000.0))
            .collect::<Vec<_>>()
    );
    println!(
        "miou seen {:?} unseen {:?} all {:?}",
        report.miou_seen, report.miou_unseen, report.miou_all
    );
    for i in 0..cm.size() {
        let row: Vec<u64> = (0..cm.size()).map(|j| cm.count(i, j)).collect();
        println!("cm[{}] = {:?}", cm.class_ids()[i], row);
    }

    // nearest-class-mean baseline on real features (diagnostic: are the
    // synthetic classes separable in feature space at all?)
    let eval_tagged = split_frames(&frames, &config.split, SplitMode::GzslEval);
    let mut eval_parts = Vec::new();
    for t in &eval_tagged {
        eval_parts.push(gzsl_core::backbone::extract_features(&backbone, &t.frame).unwrap());
    }
    let refs: Vec<&FeatureBatch> = eval_parts.iter().collect();
    let eval_features = FeatureBatch::concat(&refs).unwrap();

    // class means from TRAIN frames over ALL classes (diagnostic only)
    let train = pipeline::training_frames(&config).unwrap();
    let train_tagged = split_frames(&train, &config.split, SplitMode::GzslEval);
    let mut train_parts = Vec::new();
    for t in &train_tagged {
        train_parts.push(gzsl_core::backbone::extract_features(&backbone, &t.frame).unwrap());
    }
    let trefs: Vec<&FeatureBatch> = train_parts.iter().collect();
    let train_features = FeatureBatch::concat(&trefs).unwrap();
    let classes = train_features.distinct_labels();
    let dim = train_features.feature_dim();
    let mut means: Vec<(u32, Vec<f64>)> = Vec::new();
    for &c in &classes {
        let rows = train_features.rows_with_label(c);
        let mut mean = vec![0.0; dim];
        for &r in &rows {
            for (m, v) in mean.iter_mut().zip(train_features.row(r)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= rows.len() as f64;
        }
        means.push((c, mean));
    }
    let mut correct = 0usize;
    for i in 0..eval_features.len() {
        let x = eval_features.row(i);
        let mut best = (f64::INFINITY, 0u32);
        for (c, mean) in &means {
            let d2: f64 = x
                .iter()
                .zip(mean)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                - 0.0 * dot(x, mean);
            if d2 < best.0 {
                best = (d2, *c);
            }
        }
        if best.1 == eval_features.labels[i] {
            correct += 1;
        }
    }
    println!(
        "nearest-class-mean baseline accuracy: {:.4}",
        correct as f64 / eval_features.len() as f64
    );

    // 1-NN baselines: feature space and descriptor space (subsampled)
    let knn_acc = |train_rows: &Matrix, train_labels: &[u32], eval_rows: &Matrix, eval_labels: &[u32]| -> (f64, Vec<(u32, f64)>) {
        let mut per_class: std::collections::BTreeMap<u32, (usize, usize)> = Default::default();
        let mut hit = 0usize;
        let step = 7usize;
        let mut n = 0usize;
        for i in (0..eval_rows.rows()).step_by(step) {
            let x = eval_rows.row(i);
            let mut best = (f64::INFINITY, 0u32);
            for j in 0..train_rows.rows() {
                let d2: f64 = x
                    .iter()
                    .zip(train_rows.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d2 < best.0 {
                    best = (d2, train_labels[j]);
                }
            }
            let e = per_class.entry(eval_labels[i]).or_default();
            e.1 += 1;
            if best.1 == eval_labels[i] {
                hit += 1;
                e.0 += 1;
            }
            n += 1;
        }
        let per: Vec<(u32, f64)> = per_class
            .into_iter()
            .map(|(c, (h, t))| (c, h as f64 / t as f64))
            .collect();
        (hit as f64 / n as f64, per)
    };
    let (nn_feat, per_feat) = knn_acc(
        &train_features.features,
        &train_features.labels,
        &eval_features.features,
        &eval_features.labels,
    );
    println!("1-NN baseline in feature space: {nn_feat:.4} per-class {per_feat:?}");

    // descriptor space
    use gzsl_core::backbone::frame_descriptors;
    let mut train_desc_rows: Vec<Vec<f64>> = Vec::new();
    let mut train_desc_labels: Vec<u32> = Vec::new();
    for t in &train_tagged {
        let d = frame_descriptors(&t.frame, config.backbone.neighbors).unwrap();
        for i in 0..t.frame.len() {
            train_desc_rows.push(d.row(i).to_vec());
            train_desc_labels.push(t.frame.labels[i]);
        }
    }
    let mut eval_desc_rows: Vec<Vec<f64>> = Vec::new();
    let mut eval_desc_labels: Vec<u32> = Vec::new();
    for t in &eval_tagged {
        let d = frame_descriptors(&t.frame, config.backbone.neighbors).unwrap();
        for i in 0..t.frame.len() {
            eval_desc_rows.push(d.row(i).to_vec());
            eval_desc_labels.push(t.frame.labels[i]);
        }
    }
    let to_matrix = |rows: &[Vec<f64>]| {
        let mut m = Matrix::zeros(rows.len(), rows[0].len());
        for (i, r) in rows.iter().enumerate() {
            m.row_mut(i).copy_from_slice(r);
        }
        m
    };
    let (nn_desc, per_desc) = knn_acc(
        &to_matrix(&train_desc_rows),
        &train_desc_labels,
        &to_matrix(&eval_desc_rows),
        &eval_desc_labels,
    );
    println!("1-NN baseline in descriptor space: {nn_desc:.4} per-class {per_desc:?}");

    // where do the FAKE unseen features sit relative to real eval features?
    let fake = gzsl_core::generator::synthesize_unseen(
        &trained,
        &prototypes,
        200,
        pipeline::derive_seed(config.seed, "stage3-synthesize"),
    )
    .unwrap();
    for &c in &[1u32, 5u32] {
        let rows = fake.rows_with_label(c);
        let mut mean = vec![0.0; dim];
        for &r in &rows {
            for (m, v) in mean.iter_mut().zip(fake.row(r)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= rows.len() as f64;
        }
        // distance from fake-class mean to each real class mean
        let mut line = format!("fake class {c} mean -> real means:");
        for (rc, rmean) in &means {
            let d: f64 = mean
                .iter()
                .zip(rmean)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            line.push_str(&format!(" {rc}:{d:.2}"));
        }
        println!("{line}");
    }

    // RMS spread around the class mean: real vs fake
    let spread = |batch: &FeatureBatch, c: u32| -> f64 {
        let rows = batch.rows_with_label(c);
        if rows.is_empty() {
            return f64::NAN;
        }
        let d = batch.feature_dim();
        let mut mean = vec![0.0; d];
        for &r in &rows {
            for (m, v) in mean.iter_mut().zip(batch.row(r)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= rows.len() as f64;
        }
        let mut acc = 0.0;
        for &r in &rows {
            acc += batch
                .row(r)
                .iter()
                .zip(&mean)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        (acc / rows.len() as f64).sqrt()
    };
    for &c in &classes {
        println!(
            "class {c}: real spread {:.3}, fake spread {:.3}",
            spread(&train_features, c),
            spread(&fake, c)
        );
    }

    // 1-NN of eval features against the stage-3 TRAINING set
    // (real seen rows + fake unseen rows): predicts classifier behavior
    let real_seen = pipeline::real_seen_features(&config, &backbone).unwrap();
    let train_set = FeatureBatch::concat(&[&real_seen, &fake]).unwrap();
    let (nn_mixed, per_mixed) = knn_acc(
        &train_set.features,
        &train_set.labels,
        &eval_features.features,
        &eval_features.labels,
    );
    println!("1-NN vs stage-3 training set: {nn_mixed:.4} per-class {per_mixed:?}");

    // training-set accuracy of the stage-3 classifier, per class
    let clf = pipeline::load_classifier(&out).unwrap();
    let out_train = gzsl_core::classifier::classify(&clf, &train_set).unwrap();
    let mut per: std::collections::BTreeMap<u32, (usize, usize)> = Default::default();
    for (p, l) in out_train.predictions.iter().zip(&train_set.labels) {
        let e = per.entry(*l).or_default();
        e.1 += 1;
        if p == l {
            e.0 += 1;
        }
    }
    let per_view: Vec<(u32, f64)> = per
        .iter()
        .map(|(c, (h, t))| (*c, *h as f64 / *t as f64))
        .collect();
    println!("stage-3 training-set per-class accuracy: {per_view:?}");

    // fake-fake cluster separation
    let f1 = fake.rows_with_label(1);
    let f5 = fake.rows_with_label(5);
    let mut cross_nn = 0usize;
    for &i in f1.iter().step_by(10) {
        let x = fake.row(i);
        let d2 = |y: &[f64]| -> f64 { x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum() };
        let d_same = f1
            .iter()
            .filter(|&&r| r != i)
            .map(|&r| d2(fake.row(r)))
            .fold(f64::INFINITY, f64::min);
        let d_other = f5
            .iter()
            .map(|&r| d2(fake.row(r)))
            .fold(f64::INFINITY, f64::min);
        if d_other < d_same {
            cross_nn += 1;
        }
    }
    println!(
        "fake-floor rows whose nearest fake is an agv fake: {}/{}",
        cross_nn,
        f1.len() / 10
    );

    // distance competition: nearest same-class fake vs nearest seen row
    for &c in &[1u32, 5u32] {
        let fake_rows = fake.rows_with_label(c);
        let eval_rows = eval_features.rows_with_label(c);
        let mut wins = 0usize;
        let mut gaps = Vec::new();
        for &i in eval_rows.iter().step_by(5) {
            let x = eval_features.row(i);
            let d2 = |y: &[f64]| -> f64 {
                x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            };
            let d_fake = fake_rows
                .iter()
                .map(|&r| d2(fake.row(r)))
                .fold(f64::INFINITY, f64::min)
                .sqrt();
            let d_seen = (0..real_seen.len())
                .map(|r| d2(real_seen.row(r)))
                .fold(f64::INFINITY, f64::min)
                .sqrt();
            if d_fake < d_seen {
                wins += 1;
            }
            gaps.push(d_fake - d_seen);
        }
        gaps.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q = |p: f64| gaps[(p * (gaps.len() - 1) as f64) as usize];
        println!(
            "class {c}: fake-nearer fraction {:.3}, gap quantiles p10 {:.2} p50 {:.2} p90 {:.2}",
            wins as f64 / gaps.len() as f64,
            q(0.1),
            q(0.5),
            q(0.9)
        );
    }
}
