//! Calibration of the benchmark accuracy threshold against a plain
//! per-pixel gradient-boosting baseline. Run once with `--ignored`; the
//! result is pinned in `fixtures/benchmark.json`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ssboost::boosting::{golden_section, LineSearch};
use ssboost::loss::softmax;
use ssboost::scene::generate_corpus;
use ssboost::{
    soft_vq_code, train, FeatureBank, StructuredInstance, SyntheticSceneConfig, TrainConfig, TreeParams, TreeSample,
};

const PIXELS_PER_IMAGE: usize = 200;
const ROUNDS: usize = 100;
const DEPTH: usize = 4;

/// Per-pixel descriptor in the library's column layout: codes only, shape
/// and context columns held at zero.
fn pixel_descriptor(inst: &StructuredInstance, bank: &FeatureBank, p: usize, width: usize, k: usize) -> Vec<f64> {
    let layout = bank.layout(k);
    let mut d = vec![0.0; width];
    let mut col = layout.num_static() - layout.num_codes();
    for (g, group) in bank.groups.iter().enumerate() {
        let base = &inst.features().groups[g];
        let v = &base.values[p * base.dim..(p + 1) * base.dim];
        for c in 0..group.num_centers() {
            d[col] = soft_vq_code(v, group, c).unwrap();
            col += 1;
        }
    }
    d
}

fn risk(scores: &[Vec<f64>], labels: &[usize]) -> f64 {
    scores
        .iter()
        .zip(labels)
        .map(|(s, &y)| -softmax(s).unwrap().probs()[y].max(1e-300).ln())
        .sum()
}

#[test]
#[ignore = "calibration run; result pinned in fixtures/benchmark.json"]
fn per_pixel_gbm_baseline() {
    let fixture: serde_json::Value = serde_json::from_str(include_str!("fixtures/benchmark.json")).unwrap();
    let seed = |k: &str| fixture[k].as_u64().unwrap();
    let scene = SyntheticSceneConfig::default();
    let k = scene.num_classes;
    let train_set = generate_corpus(&scene, seed("train_seed"), seed("train_count") as usize).unwrap();
    let test_set = generate_corpus(&scene, seed("test_seed"), seed("test_count") as usize).unwrap();
    let bank = train(
        &train_set,
        &TrainConfig {
            iterations: 0,
            ..Default::default()
        },
    )
    .unwrap()
    .bank;
    let layout = bank.layout(k);
    let width = layout.width();

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for inst in &train_set {
        let labels = inst.labels().argmax();
        for p in sample(&mut rng, inst.num_pixels(), PIXELS_PER_IMAGE) {
            xs.push(pixel_descriptor(inst, &bank, p, width, k));
            ys.push(labels[p]);
        }
    }
    let mut prior = vec![1.0; k];
    ys.iter().for_each(|&y| prior[y] += 1.0);
    let total: f64 = prior.iter().sum();
    let f0: Vec<f64> = prior.iter().map(|c| (c / total).ln()).collect();
    let mut scores = vec![f0.clone(); xs.len()];
    let params = TreeParams {
        depth_limit: DEPTH,
        lambda: 0.0,
        prediction_cost: 1.0,
    };
    let mut trees = Vec::new();
    for _ in 0..ROUNDS {
        let samples: Vec<TreeSample> = xs
            .iter()
            .zip(&ys)
            .zip(&scores)
            .map(|((x, &y), s)| {
                let q = softmax(s).unwrap();
                let target = (0..k).map(|c| f64::from(u8::from(c == y)) - q.probs()[c]).collect();
                TreeSample {
                    descriptor: x.clone(),
                    target,
                    weight: 1.0,
                }
            })
            .collect();
        let tree = ssboost::train_tree(&samples, &layout, params, &Default::default(), &bank.costs()).unwrap();
        let u: Vec<Vec<f64>> = xs.iter().map(|x| ssboost::predict_tree(&tree, x).unwrap()).collect();
        let (alpha, _) = golden_section(
            |a| {
                let moved: Vec<Vec<f64>> = scores
                    .iter()
                    .zip(&u)
                    .map(|(s, d)| s.iter().zip(d).map(|(v, w)| v + a * w).collect())
                    .collect();
                risk(&moved, &ys)
            },
            LineSearch {
                alpha_max: 10.0,
                tol: 1e-4,
            },
        );
        for (s, d) in scores.iter_mut().zip(&u) {
            s.iter_mut().zip(d).for_each(|(v, w)| *v += alpha * w);
        }
        trees.push((tree, alpha));
    }

    let mut correct = 0usize;
    let mut count = 0usize;
    let mut majority = 0usize;
    let top = (0..k).max_by(|&a, &b| prior[a].total_cmp(&prior[b])).unwrap();
    for inst in &test_set {
        let labels = inst.labels().argmax();
        for p in 0..inst.num_pixels() {
            let x = pixel_descriptor(inst, &bank, p, width, k);
            let mut s = f0.clone();
            for (tree, alpha) in &trees {
                let d = ssboost::predict_tree(tree, &x).unwrap();
                s.iter_mut().zip(&d).for_each(|(v, w)| *v += alpha * w);
            }
            let pred = (0..k).max_by(|&a, &b| s[a].total_cmp(&s[b]).then(b.cmp(&a))).unwrap();
            correct += usize::from(pred == labels[p]);
            majority += usize::from(top == labels[p]);
            count += 1;
        }
    }
    // best accuracy any predictor constant on finest-level segments can reach
    let mut pure = 0usize;
    for inst in &test_set {
        let labels = inst.labels().argmax();
        let h = inst.hierarchy();
        for seg in h.level(h.finest_level()) {
            let mut counts = vec![0usize; k];
            seg.pixels.iter().for_each(|&p| counts[labels[p as usize]] += 1);
            pure += counts.iter().max().unwrap();
        }
    }
    println!(
        "per-pixel GBM test pixel accuracy {:.4} (majority {:.4}, finest-segment purity ceiling {:.4}, \
         {ROUNDS} rounds, depth {DEPTH})",
        correct as f64 / count as f64,
        majority as f64 / count as f64,
        pure as f64 / count as f64
    );
}
