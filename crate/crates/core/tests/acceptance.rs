//! Acceptance suite. Runs every criterion at its stated tolerance, prints
//! one PASS/FAIL line per criterion and exits nonzero if any failed.

mod common;

use std::cell::RefCell;
use std::time::Instant;

use capsule_core::checkpoint::Checkpoint;
use capsule_core::data::{
    generate_synthetic, make_retrieval_queries, DatasetSplit, ImagePayload, Item, SplitName, SyntheticSpec,
};
use capsule_core::distance::{self, Metric};
use capsule_core::encoders::{ImageEncoderKind, ItemEncoderConfig};
use capsule_core::eval;
use capsule_core::index::{self, compare_index_sizes, complete_outfit, EmbeddingIndex, IndexEntry};
use capsule_core::losses::{self, FocalConfig, RankingBatchItem, RankingComponents, RankingConfig};
use capsule_core::model::{self, HeadSet, ModelConfig, OutfitModel, TargetSpec};
use capsule_core::nn::{
    grad_check, grad_check_params, ConvGeometry, EncoderBlock, FeedForward, Graph, LayerNorm, Linear,
    MultiHeadAttention, ParamStore, SeqLayout, Tensor, TransformerEncoder, Var,
};
use capsule_core::training::{finetune_cir, pretrain_cp, CirInit, TrainConfig};
use capsule_core::Result as CoreResult;
use common::{jitter, random_tensor, rng, tiny_data, tiny_model_config};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

type Outcome = std::result::Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn FnOnce() -> Outcome + 'a>);
/// Means of (baseline, variant) and the per-seed pairs.
type AblationSummary = (f64, f64, Vec<(f64, f64)>);

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn core<T>(r: CoreResult<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- 1

const GRAD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;
const GRAD_POINTS: u64 = 20;

/// Contracts `out` against fixed random weights so every output coordinate
/// contributes a distinct gradient.
fn contract(g: &mut Graph, out: Var, seed: u64) -> CoreResult<Var> {
    let shape = g.value(out).shape().to_vec();
    let w = random_tensor(&mut rng(seed ^ 0xc0ffee), &shape, 1.0);
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

/// Values bounded away from zero, for ReLU's kink.
fn off_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn padded_layout(batch: usize, seq_len: usize, lens: &[usize]) -> SeqLayout {
    let valid = lens[..batch]
        .iter()
        .flat_map(|&len| (0..seq_len).map(move |s| s < len))
        .collect();
    SeqLayout { batch, seq_len, valid }
}

/// Distances are bounded away from zero, the hinge arguments from zero and
/// the nearest negative from the runner-up.
fn ranking_point_is_smooth(t: &Tensor, p: &Tensor, n: &Tensor, s: usize, cfg: &RankingConfig) -> bool {
    const GAP: f64 = 1e-3;
    for b in 0..t.rows() {
        let dp = distance::between(cfg.metric, t.row(b), p.row(b));
        let mut dn: Vec<f64> = (0..s)
            .map(|j| distance::between(cfg.metric, t.row(b), n.row(b * s + j)))
            .collect();
        if dp < GAP || dn.iter().any(|&d| d < GAP || (cfg.margin + dp - d).abs() < GAP) {
            return false;
        }
        dn.sort_by(f64::total_cmp);
        if dn.len() > 1 && dn[1] - dn[0] < GAP {
            return false;
        }
    }
    true
}

struct GradTally {
    worst: f64,
    worst_case: String,
    checks: usize,
}

impl GradTally {
    fn record(&mut self, case: &str, err: f64) {
        self.checks += 1;
        if err > self.worst || err.is_nan() {
            self.worst = if err.is_nan() { f64::INFINITY } else { err };
            self.worst_case = case.to_string();
        }
    }
}

fn op_checks(seed: u64, tally: &mut GradTally) -> CoreResult<()> {
    let mut r = rng(seed);
    let mut check = |name: &str, f: &dyn Fn(&mut Graph, &[Var]) -> CoreResult<Var>, point: Vec<Tensor>| {
        let err = grad_check(|g, v| f(g, v).and_then(|o| contract(g, o, seed)), &point, FD_STEP)?;
        tally.record(name, err);
        CoreResult::Ok(())
    };
    let a = random_tensor(&mut r, &[3, 4], 1.0);
    let b = random_tensor(&mut r, &[4, 5], 1.0);
    check("matmul", &|g, v| g.matmul(v[0], v[1]), vec![a.clone(), b])?;
    let c = random_tensor(&mut r, &[3, 4], 1.0);
    check("add", &|g, v| g.add(v[0], v[1]), vec![a.clone(), c.clone()])?;
    check("sub", &|g, v| g.sub(v[0], v[1]), vec![a.clone(), c.clone()])?;
    check("mul", &|g, v| g.mul(v[0], v[1]), vec![a.clone(), c.clone()])?;
    check(
        "add_bias",
        &|g, v| g.add_bias(v[0], v[1]),
        vec![a.clone(), random_tensor(&mut r, &[4], 1.0)],
    )?;
    check("scale", &|g, v| g.scale(v[0], -1.7), vec![a.clone()])?;
    check("gelu", &|g, v| g.gelu(v[0]), vec![random_tensor(&mut r, &[3, 4], 3.0)])?;
    check(
        "sigmoid",
        &|g, v| g.sigmoid(v[0]),
        vec![random_tensor(&mut r, &[3, 4], 3.0)],
    )?;
    check("relu", &|g, v| g.relu(v[0]), vec![off_zero(&mut r, &[3, 4])])?;
    check(
        "softmax",
        &|g, v| g.softmax(v[0], 1),
        vec![random_tensor(&mut r, &[3, 5], 2.0)],
    )?;
    check(
        "layer_norm",
        &|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
        vec![
            random_tensor(&mut r, &[4, 6], 2.0),
            random_tensor(&mut r, &[6], 1.5),
            random_tensor(&mut r, &[6], 1.0),
        ],
    )?;
    let layout = padded_layout(2, 4, &[4, 2]);
    check(
        "attention",
        &|g, v| g.attention(v[0], v[1], v[2], 2, &layout),
        vec![
            random_tensor(&mut r, &[8, 6], 1.5),
            random_tensor(&mut r, &[8, 6], 1.5),
            random_tensor(&mut r, &[8, 6], 1.5),
        ],
    )?;
    check(
        "concat_cols",
        &|g, v| g.concat_cols(&[v[0], v[1]]),
        vec![a.clone(), random_tensor(&mut r, &[3, 2], 1.0)],
    )?;
    check(
        "gather_rows",
        &|g, v| {
            g.gather_rows(
                &[v[0], v[1]],
                vec![Some((1, 0)), None, Some((0, 2)), Some((0, 2)), Some((1, 1))],
            )
        },
        vec![a.clone(), random_tensor(&mut r, &[2, 4], 1.0)],
    )?;
    check("reshape", &|g, v| g.reshape(v[0], &[2, 6]), vec![a.clone()])?;
    check("sum", &|g, v| g.sum(v[0]), vec![a.clone()])?;
    check("mean", &|g, v| g.mean(v[0]), vec![a.clone()])?;
    check(
        "group_mean_rows",
        &|g, v| g.group_mean_rows(v[0], 3),
        vec![random_tensor(&mut r, &[6, 4], 1.0)],
    )?;
    let geom = ConvGeometry {
        height: 5,
        width: 5,
        channels: 2,
        kernel: 3,
        stride: 2,
        pad: 1,
    };
    check(
        "conv (im2col)",
        &|g, v| {
            let cols = g.im2col(v[0], geom)?;
            g.matmul(cols, v[1])
        },
        vec![
            random_tensor(&mut r, &[2, 50], 1.0),
            random_tensor(&mut r, &[18, 3], 1.0),
        ],
    )?;

    let labels: Vec<u8> = (0..6).map(|_| r.random_range(0..2)).collect();
    let scores = Tensor::new(vec![6], (0..6).map(|_| r.random_range(0.05..0.95)).collect())?;
    let err = grad_check(|g, v| g.focal_loss(v[0], &labels, 2.0, 0.5), &[scores], FD_STEP)?;
    tally.record("focal_loss", err);

    for metric in [Metric::Euclidean, Metric::SquaredEuclidean] {
        for components in [RankingComponents::AllPlusHard, RankingComponents::All] {
            let cfg = RankingConfig {
                margin: 2.0,
                metric,
                components,
            };
            let s = 4;
            let point = loop {
                let t = random_tensor(&mut r, &[3, 5], 1.2);
                let p = random_tensor(&mut r, &[3, 5], 1.2);
                let n = random_tensor(&mut r, &[3 * s, 5], 1.2);
                if ranking_point_is_smooth(&t, &p, &n, s, &cfg) {
                    break vec![t, p, n];
                }
            };
            let err = grad_check(
                |g, v| g.setwise_ranking_loss(v[0], v[1], v[2], s, &cfg),
                &point,
                FD_STEP,
            )?;
            tally.record(&format!("ranking_loss {metric:?} {components:?}"), err);
        }
    }
    Ok(())
}

/// Checks a layer both with respect to its parameters and its input.
fn layer_check(
    name: &str,
    store: &ParamStore,
    input: Tensor,
    seed: u64,
    tally: &mut GradTally,
    forward: &dyn Fn(&mut Graph, &ParamStore, Var) -> CoreResult<Var>,
) -> CoreResult<()> {
    let x = input.clone();
    let report = grad_check_params(
        store,
        |g, s| {
            let xv = g.constant(x.clone());
            let out = forward(g, s, xv)?;
            contract(g, out, seed)
        },
        FD_STEP,
    )?;
    tally.record(&format!("{name} params ({})", report.worst_param), report.max_error);
    let err = grad_check(
        |g, v| {
            let out = forward(g, store, v[0])?;
            contract(g, out, seed)
        },
        &[input],
        FD_STEP,
    )?;
    tally.record(&format!("{name} input"), err);
    Ok(())
}

fn layer_checks(seed: u64, tally: &mut GradTally) -> CoreResult<()> {
    let mut r = rng(seed + 1000);
    let (d, heads, hidden) = (6, 2, 8);
    let layout = padded_layout(2, 4, &[3, 4]);

    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", 5, 4, &mut r);
    jitter(&mut store, &mut r, 0.3);
    let x = random_tensor(&mut r, &[3, 5], 1.0);
    layer_check("linear", &store, x, seed, tally, &|g, s, x| lin.forward(g, s, x))?;

    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", d);
    jitter(&mut store, &mut r, 0.5);
    let x = random_tensor(&mut r, &[4, d], 2.0);
    layer_check("layer_norm", &store, x, seed, tally, &|g, s, x| ln.forward(g, s, x))?;

    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "mha", d, heads, &mut r)?;
    jitter(&mut store, &mut r, 0.3);
    let x = random_tensor(&mut r, &[8, d], 1.0);
    layer_check("attention", &store, x, seed, tally, &|g, s, x| {
        mha.forward(g, s, x, x, &layout)
    })?;

    let mut store = ParamStore::new();
    let ff = FeedForward::new(&mut store, "ff", d, hidden, &mut r);
    jitter(&mut store, &mut r, 0.3);
    let x = random_tensor(&mut r, &[4, d], 1.0);
    layer_check("feed_forward", &store, x, seed, tally, &|g, s, x| ff.forward(g, s, x))?;

    let mut store = ParamStore::new();
    let block = EncoderBlock::new(&mut store, "blk", d, heads, hidden, &mut r)?;
    jitter(&mut store, &mut r, 0.3);
    let x = random_tensor(&mut r, &[8, d], 1.0);
    layer_check("encoder_block", &store, x, seed, tally, &|g, s, x| {
        block.forward(g, s, x, &layout)
    })?;

    let mut store = ParamStore::new();
    let enc = TransformerEncoder::new(&mut store, "enc", d, 2, heads, hidden, &mut r)?;
    jitter(&mut store, &mut r, 0.3);
    let x = random_tensor(&mut r, &[8, d], 1.0);
    layer_check("transformer", &store, x, seed, tally, &|g, s, x| {
        enc.forward(g, s, x, &layout)
    })?;
    Ok(())
}

fn cnn_item(rng: &mut impl Rng, id: usize) -> Item {
    Item {
        item_id: format!("img-{id}"),
        image: ImagePayload::Pixels((0..1024).map(|_| rng.random_range(0.0..1.0)).collect()),
        description: format!("striped wool scarf {id}"),
        fine_category: "scarves".into(),
        high_category: "accessories".into(),
        style: None,
    }
}

/// Whole-model checks: compatibility head with focal loss and retrieval head
/// with the ranking loss, over every trainable parameter.
fn model_checks(seed: u64, data: &DatasetSplit, tally: &mut GradTally) -> CoreResult<()> {
    let mut r = rng(seed + 2000);
    let mut m = OutfitModel::new(tiny_model_config(seed), HeadSet::BOTH)?;
    jitter(m.params_mut(), &mut r, 0.05);
    let cell = RefCell::new(m.clone());
    let run = |store: &ParamStore, f: &dyn Fn(&OutfitModel, &mut Graph) -> CoreResult<Var>, g: &mut Graph| {
        let mut model = cell.borrow_mut();
        model.params_mut().clone_from(store);
        f(&model, g)
    };

    let items = data.catalog.items();
    let pick = |r: &mut ChaCha8Rng, n: usize| -> Vec<&Item> { items.choose_multiple(r, n).collect() };
    let outfits: Vec<Vec<&Item>> = vec![pick(&mut r, 2), pick(&mut r, 4), pick(&mut r, 3)];
    let labels = [1u8, 0, 1];
    let cp = |model: &OutfitModel, g: &mut Graph| -> CoreResult<Var> {
        let s = model.cp_scores(g, &outfits)?;
        g.focal_loss(s, &labels, 2.0, 0.5)
    };
    let report = grad_check_params(m.params(), |g, s| run(s, &cp, g), FD_STEP)?;
    tally.record(&format!("model cp+focal ({})", report.worst_param), report.max_error);

    let cfg = RankingConfig::default();
    let s_neg = 3;
    let partials: Vec<Vec<&Item>> = vec![pick(&mut r, 1), pick(&mut r, 3)];
    let specs = [
        TargetSpec::category("tops-tees"),
        TargetSpec::free_text("dark leather boots"),
    ];
    let spec_refs: Vec<&TargetSpec> = specs.iter().collect();
    // Resample candidates until the loss is smooth at the evaluation point.
    let (positives, negatives) = loop {
        let positives = pick(&mut r, 2);
        let negatives = pick(&mut r, 2 * s_neg);
        let mut g = Graph::no_grad();
        let t = m.cir_targets(&mut g, &partials, &spec_refs)?;
        let p = m.encode_items(&mut g, &positives)?;
        let n = m.encode_items(&mut g, &negatives)?;
        if ranking_point_is_smooth(g.value(t), g.value(p), g.value(n), s_neg, &cfg) {
            break (positives, negatives);
        }
    };
    let cir = |model: &OutfitModel, g: &mut Graph| -> CoreResult<Var> {
        let t = model.cir_targets(g, &partials, &spec_refs)?;
        let p = model.encode_items(g, &positives)?;
        let n = model.encode_items(g, &negatives)?;
        g.setwise_ranking_loss(t, p, n, s_neg, &cfg)
    };
    let report = grad_check_params(m.params(), |g, s| run(s, &cir, g), FD_STEP)?;
    tally.record(&format!("model cir+ranking ({})", report.worst_param), report.max_error);
    Ok(())
}

/// Image CNN backbone end to end through the compatibility head.
fn cnn_check(seed: u64, tally: &mut GradTally) -> CoreResult<()> {
    let mut r = rng(seed + 3000);
    let config = ModelConfig {
        item: ItemEncoderConfig {
            image_encoder: ImageEncoderKind::Cnn,
            ..tiny_model_config(seed).item
        },
        ..tiny_model_config(seed)
    };
    let mut m = OutfitModel::new(config, HeadSet::CP)?;
    jitter(m.params_mut(), &mut r, 0.05);
    let items: Vec<Item> = (0..2).map(|i| cnn_item(&mut r, i)).collect();
    let outfit: Vec<&Item> = items.iter().collect();
    let cell = RefCell::new(m.clone());
    let report = grad_check_params(
        m.params(),
        |g, s| {
            let mut model = cell.borrow_mut();
            model.params_mut().clone_from(s);
            let score = model.cp_scores(g, std::slice::from_ref(&outfit))?;
            g.focal_loss(score, &[1], 2.0, 0.5)
        },
        FD_STEP,
    )?;
    tally.record(&format!("model cnn ({})", report.worst_param), report.max_error);
    Ok(())
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let data = tiny_data(11);
    let mut tally = GradTally {
        worst: 0.0,
        worst_case: String::new(),
        checks: 0,
    };
    for seed in 0..GRAD_POINTS {
        core(op_checks(seed, &mut tally))?;
        core(layer_checks(seed, &mut tally))?;
        core(model_checks(seed, &data, &mut tally))?;
        core(cnn_check(seed, &mut tally))?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(
        tally.worst < GRAD_TOL && secs < 120.0,
        format!(
            "{} checks at {GRAD_POINTS} points, max rel err {:.2e} ({}), {secs:.1}s",
            tally.checks, tally.worst, tally.worst_case
        ),
    )
}

// ---------------------------------------------------------------- 2

fn desk_model(seed: u64) -> CoreResult<OutfitModel> {
    OutfitModel::new(
        ModelConfig {
            seed,
            ..ModelConfig::default()
        },
        HeadSet::BOTH,
    )
}

fn criterion_2() -> Outcome {
    let data = core(generate_synthetic(&SyntheticSpec::default(), 3))?;
    let m = core(desk_model(3))?;
    let outfit = data.train.iter().find(|o| o.len() == 5).ok_or("no 5-item outfit")?;
    let mut items = core(data.catalog.resolve(&outfit.items))?;
    let spec = TargetSpec::category(items[0].fine_category.clone());
    let base_score = core(m.score(&items))?;
    let base_t = core(m.target_embedding(&items, &spec))?;
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        items.shuffle(&mut r);
        worst = worst.max((core(m.score(&items))? - base_score).abs());
        let t = core(m.target_embedding(&items, &spec))?;
        for (a, b) in t.iter().zip(&base_t) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst < 1e-6, format!("100 permutations, max |delta| {worst:.2e}"))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let data = core(generate_synthetic(&SyntheticSpec::default(), 4))?;
    let m = core(desk_model(4))?;
    let mut r = rng(3);
    let pool: Vec<&Item> = data.catalog.items().iter().collect();
    let mut worst = 0.0f64;
    for len in 2..=8 {
        let items: Vec<&Item> = pool.choose_multiple(&mut r, len).copied().collect();
        let filler: Vec<&Item> = pool.choose_multiple(&mut r, 8).copied().collect();
        let spec = TargetSpec::category(items[0].fine_category.clone());

        let mut g = Graph::no_grad();
        let f = core(m.encode_items(&mut g, &items))?;
        let groups = vec![(0..len).collect::<Vec<_>>()];
        let s0 = core(m.cp_forward(&mut g, f, &groups, None))?;
        let t0 = core(m.cir_forward(&mut g, f, &groups, &[&spec], None))?;
        let s1 = core(m.cp_forward(&mut g, f, &groups, Some(m.config().encoder.max_outfit_len)))?;
        let t1 = core(m.cir_forward(&mut g, f, &groups, &[&spec], Some(m.config().encoder.max_outfit_len)))?;

        // The same outfit batched next to a longer one is padded implicitly.
        let mut both = items.clone();
        both.extend(&filler);
        let fb = core(m.encode_items(&mut g, &both))?;
        let bgroups = vec![(0..len).collect::<Vec<_>>(), (len..len + 8).collect()];
        let filler_spec = TargetSpec::category(filler[0].fine_category.clone());
        let s2 = core(m.cp_forward(&mut g, fb, &bgroups, None))?;
        let t2 = core(m.cir_forward(&mut g, fb, &bgroups, &[&spec, &filler_spec], None))?;

        let s0v = g.value(s0).data()[0];
        for s in [g.value(s1).data()[0], g.value(s2).data()[0]] {
            worst = worst.max((s - s0v).abs());
        }
        let t0v = g.value(t0).row(0).to_vec();
        for t in [g.value(t1).row(0), g.value(t2).row(0)] {
            for (a, b) in t.iter().zip(&t0v) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    ensure(worst < 1e-6, format!("lengths 2..=8, max |delta| {worst:.2e}"))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let cfg = RankingConfig {
        margin: 2.0,
        ..RankingConfig::default()
    };
    let cases: [(f64, f64, Vec<f64>, f64); 3] = [
        (0.0, 0.0, vec![3.0], 0.0),
        (0.0, 1.0, vec![2.0], 2.0),
        (0.0, 0.0, vec![1.0, 3.0], 1.5),
    ];
    for (t, p, negs, expected) in &cases {
        let item = RankingBatchItem {
            t: vec![*t],
            positive: vec![*p],
            negatives: negs.iter().map(|&n| vec![n]).collect(),
        };
        let got = core(losses::setwise_ranking_loss(&item, &cfg))?;
        if got != *expected {
            return Err(format!("ranking case t={t} p={p} N={negs:?}: {got} != {expected}"));
        }
        let mut g = Graph::no_grad();
        let tv = g.constant(Tensor::from_rows(&[vec![*t]]).unwrap());
        let pv = g.constant(Tensor::from_rows(&[vec![*p]]).unwrap());
        let nv = g.constant(Tensor::from_rows(&negs.iter().map(|&n| vec![n]).collect::<Vec<_>>()).unwrap());
        let l = core(g.setwise_ranking_loss(tv, pv, nv, negs.len(), &cfg))?;
        if g.value(l).item() != *expected {
            return Err(format!(
                "graph ranking case N={negs:?}: {} != {expected}",
                g.value(l).item()
            ));
        }
    }

    let mut r = rng(4);
    let mut worst = 0.0f64;
    let config = FocalConfig { gamma: 0.0, alpha: 0.5 };
    for _ in 0..1000 {
        let s: f64 = r.random_range(1e-4..1.0 - 1e-4);
        let l: u8 = r.random_range(0..2);
        let bce = if l == 1 { -s.ln() } else { -(1.0 - s).ln() };
        let focal = 2.0 * core(losses::focal_loss(&[s], &[l], config))?;
        let mut g = Graph::no_grad();
        let sv = g.constant(Tensor::vector(vec![s]));
        let fv = core(g.focal_loss(sv, &[l], 0.0, 0.5))?;
        let graph_focal = 2.0 * g.value(fv).item();
        worst = worst.max((focal - bce).abs()).max((graph_focal - bce).abs());
    }
    ensure(
        worst < 1e-9,
        format!("3 hand cases exact, focal(gamma=0) vs BCE on 1000 pairs max |delta| {worst:.2e}"),
    )
}

// ---------------------------------------------------------------- 5

fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut credit = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                credit += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    credit / pairs
}

fn linear_scan(idx: &EmbeddingIndex, t: &[f64], k: usize, category: Option<&str>, exclude: &[&str]) -> Vec<String> {
    let mut all: Vec<(f64, &str)> = idx
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| category.is_none_or(|c| e.fine_category == c))
        .filter(|(_, e)| !exclude.contains(&e.item_id.as_str()))
        .map(|(row, e)| {
            let d = t
                .iter()
                .zip(idx.vector(row))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            (d, e.item_id.as_str())
        })
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));
    all.into_iter().take(k).map(|(_, id)| id.to_string()).collect()
}

fn criterion_5() -> Outcome {
    let mut r = rng(5);
    let mut auc_worst = 0.0f64;
    for set in 0..100 {
        let n = r.random_range(2..60);
        let mut labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        // Coarse scores on half the sets to exercise ties.
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                let s: f64 = r.random_range(0.0..1.0);
                if set % 2 == 0 {
                    (s * 5.0).floor() / 5.0
                } else {
                    s
                }
            })
            .collect();
        let got = core(eval::auc(&scores, &labels))?;
        auc_worst = auc_worst.max((got - brute_auc(&scores, &labels)).abs());
    }
    if auc_worst > 1e-12 {
        return Err(format!("AUC differs from brute force by {auc_worst:.2e}"));
    }

    let dim = 8;
    let rows: Vec<(IndexEntry, Vec<f64>)> = (0..10_000)
        .map(|i| {
            let cat = format!("cat-{}", r.random_range(0..7));
            // Quantized coordinates create exact distance ties.
            let v = (0..dim).map(|_| (r.random_range(-4.0f64..4.0)).round() / 2.0).collect();
            (
                IndexEntry {
                    item_id: format!("p{i:05}"),
                    fine_category: cat,
                    high_category: "all".into(),
                },
                v,
            )
        })
        .collect();
    let idx = core(EmbeddingIndex::from_parts(&"ab".repeat(32), dim, rows))?;
    let mut queries = 0;
    for q in 0..60 {
        let t: Vec<f64> = (0..dim).map(|_| r.random_range(-2.0..2.0)).collect();
        let k = [1, 5, 10, 50, 200][q % 5];
        let category = (q % 3 != 0).then(|| format!("cat-{}", q % 7));
        let excluded: Vec<String> = linear_scan(&idx, &t, 3, category.as_deref(), &[]);
        let exclude: Vec<&str> = if q % 2 == 0 {
            excluded.iter().map(String::as_str).collect()
        } else {
            vec![]
        };
        let got: Vec<String> = core(idx.knn_query(&t, k, category.as_deref(), &exclude))?
            .neighbors
            .into_iter()
            .map(|n| n.item_id)
            .collect();
        let want = linear_scan(&idx, &t, k, category.as_deref(), &exclude);
        if got != want {
            return Err(format!("knn query {q} (k={k}) differs from linear scan"));
        }
        queries += 1;
    }

    let recall = recall_oracle_check()?;
    Ok(format!(
        "AUC on 100 sets max |delta| {auc_worst:.1e}; knn matches linear scan on {queries} queries over 10000 points; {recall}"
    ))
}

fn recall_oracle_check() -> Outcome {
    let data = tiny_data(21);
    let m = core(OutfitModel::new(tiny_model_config(21), HeadSet::CIR))?;
    let idx = core(EmbeddingIndex::build(&data.catalog, &m))?;
    let mut queries = core(make_retrieval_queries(&data.test, &data.catalog, &mut rng(6)))?;
    let mut missing = queries[0].clone();
    missing.ground_truth = "not-in-index".into();
    queries.push(missing);
    let ks = [1, 3, 5, 10, 20, 1000];
    let report = core(eval::recall_at_k(&m, &idx, &data.catalog, &queries, &ks, 0))?;

    let items: Vec<&Item> = data.catalog.items().iter().collect();
    let feats = core(m.item_features(&items, 64))?;
    let mut ranks = Vec::new();
    for q in &queries {
        if data.catalog.get(&q.ground_truth).is_none() {
            ranks.push(None);
            continue;
        }
        let partial = core(data.catalog.resolve(&q.partial))?;
        let t = core(m.target_embedding(&partial, &TargetSpec::category(q.target_category.clone())))?;
        let mut cands: Vec<(f64, bool)> = items
            .iter()
            .zip(&feats)
            .filter(|(it, _)| it.fine_category == q.target_category && !q.partial.contains(&it.item_id))
            .map(|(it, f)| {
                let d = t.iter().zip(f).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                (d, it.item_id == q.ground_truth)
            })
            .collect();
        // Ground truth sorts after equal distances.
        cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        ranks.push(cands.iter().position(|c| c.1).map(|p| p + 1));
    }
    for &k in &ks {
        let oracle = ranks.iter().filter(|r| r.is_some_and(|r| r <= k)).count() as f64 / ranks.len() as f64;
        let got = report.metrics[&format!("recall@{k}")];
        if got != oracle {
            return Err(format!("recall@{k} {got} != oracle {oracle}"));
        }
    }
    Ok(format!(
        "recall@k matches re-ranking oracle on {} queries",
        queries.len()
    ))
}

// ---------------------------------------------------------------- 6

fn criterion_6(pretrained: &mut Option<Checkpoint>, data: &DatasetSplit) -> Outcome {
    let start = Instant::now();
    let config = TrainConfig {
        epochs_cp: 30,
        seed: 6,
        ..TrainConfig::default()
    };
    let out = core(pretrain_cp(
        ModelConfig {
            seed: 6,
            ..ModelConfig::default()
        },
        config,
        data,
    ))?;
    let secs = start.elapsed().as_secs_f64();
    let model = core(out.best.to_model())?;
    let test = &data.compatibility[&SplitName::Test];
    let report = core(eval::evaluate_cp(&model, &data.catalog, test, 0))?;
    let auc = report.metrics["auc"];
    let best_val = out
        .history
        .iter()
        .map(|r| r.val_metric)
        .fold(f64::NEG_INFINITY, f64::max);
    *pretrained = Some(out.best);
    ensure(
        auc >= 0.95 && secs < 600.0,
        format!(
            "held-out AUC {auc:.4} on {} outfits (best validation {best_val:.4}), 30 epochs in {secs:.0}s",
            test.len()
        ),
    )
}

// ---------------------------------------------------------------- 7

fn criterion_7(pretrained: Option<&Checkpoint>, data: &DatasetSplit) -> Outcome {
    let config = TrainConfig {
        epochs_cir: 30,
        seed: 7,
        ..TrainConfig::default()
    };
    let init = match pretrained {
        Some(c) => CirInit::Pretrained(c),
        None => CirInit::Scratch(ModelConfig {
            seed: 7,
            ..ModelConfig::default()
        }),
    };
    let out = core(finetune_cir(init, config, data))?;
    let model = core(out.best.to_model())?;
    let questions = &data.fitb[&SplitName::Test];
    let scorer = eval::ModelFitbScorer {
        model: &model,
        catalog: &data.catalog,
        mode: eval::FitbMode::CirDistance,
        batch: 100,
    };
    let report = core(eval::fitb_accuracy(&scorer, questions, 0))?;
    let acc = report.metrics["accuracy_cir_distance"];
    ensure(
        acc >= 0.85,
        format!("FITB accuracy {acc:.4} on {} questions (chance 0.25)", questions.len()),
    )
}

// ---------------------------------------------------------------- 8

const ABLATION_SEEDS: u64 = 3;

fn ablation_data(seed: u64, num_styles: usize) -> CoreResult<DatasetSplit> {
    let spec = SyntheticSpec {
        noise_sigma: 0.5,
        train_outfits: 300,
        num_styles,
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec, 100 + seed)
}

fn ablation_config(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        seed,
        epochs_cp: epochs,
        epochs_cir: epochs,
        ..TrainConfig::default()
    }
}

fn test_fitb(ckpt: &Checkpoint, data: &DatasetSplit) -> CoreResult<f64> {
    let m = ckpt.to_model()?;
    let scorer = eval::ModelFitbScorer {
        model: &m,
        catalog: &data.catalog,
        mode: eval::FitbMode::CirDistance,
        batch: 100,
    };
    Ok(eval::fitb_accuracy(&scorer, &data.fitb[&SplitName::Test], 0)?.metrics["accuracy_cir_distance"])
}

fn test_recall10(ckpt: &Checkpoint, data: &DatasetSplit) -> CoreResult<f64> {
    let m = ckpt.to_model()?;
    let idx = EmbeddingIndex::build(&data.catalog, &m)?;
    let queries = make_retrieval_queries(&data.test, &data.catalog, &mut rng(5))?;
    Ok(eval::recall_at_k(&m, &idx, &data.catalog, &queries, &[10], 0)?.metrics["recall@10"])
}

fn test_auc(ckpt: &Checkpoint, data: &DatasetSplit) -> CoreResult<f64> {
    let m = ckpt.to_model()?;
    Ok(eval::evaluate_cp(&m, &data.catalog, &data.compatibility[&SplitName::Test], 0)?.metrics["auc"])
}

/// Mean of (baseline, variant) over seeds.
fn ablation(run: impl Fn(u64) -> CoreResult<(f64, f64)>) -> std::result::Result<AblationSummary, String> {
    let per_seed: Vec<(f64, f64)> = (0..ABLATION_SEEDS).map(|s| core(run(s))).collect::<Result<_, _>>()?;
    let n = per_seed.len() as f64;
    let base = per_seed.iter().map(|p| p.0).sum::<f64>() / n;
    let variant = per_seed.iter().map(|p| p.1).sum::<f64>() / n;
    Ok((base, variant, per_seed))
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let mc = |seed| ModelConfig {
        seed,
        ..ModelConfig::default()
    };

    let a = ablation(|seed| {
        let data = ablation_data(seed, 4)?;
        let cfg = ablation_config(seed, 3);
        let scratch = finetune_cir(CirInit::Scratch(mc(seed)), cfg.clone(), &data)?;
        let cp = pretrain_cp(mc(seed), cfg.clone(), &data)?;
        let pre = finetune_cir(CirInit::Pretrained(&cp.best), cfg, &data)?;
        Ok((test_fitb(&scratch.best, &data)?, test_fitb(&pre.best, &data)?))
    })?;
    let b = ablation(|seed| {
        let data = ablation_data(seed, 4)?;
        let cfg = ablation_config(seed, 3);
        let all_only = TrainConfig {
            ranking_components: RankingComponents::All,
            ..cfg.clone()
        };
        let all = finetune_cir(CirInit::Scratch(mc(seed)), all_only, &data)?;
        let both = finetune_cir(CirInit::Scratch(mc(seed)), cfg, &data)?;
        Ok((test_fitb(&all.best, &data)?, test_fitb(&both.best, &data)?))
    })?;
    let c = ablation(|seed| {
        let data = ablation_data(seed, 16)?;
        let cfg = ablation_config(seed, 4);
        let high_only = TrainConfig {
            curriculum_switch_fraction: 1.0,
            ..cfg.clone()
        };
        let high = finetune_cir(CirInit::Scratch(mc(seed)), high_only, &data)?;
        let curriculum = finetune_cir(CirInit::Scratch(mc(seed)), cfg, &data)?;
        Ok((
            test_recall10(&high.best, &data)?,
            test_recall10(&curriculum.best, &data)?,
        ))
    })?;
    let d = ablation(|seed| {
        let data = ablation_data(seed, 4)?;
        let cfg = ablation_config(seed, 3);
        let frozen_cfg = TrainConfig {
            freeze_item_encoders: true,
            ..cfg.clone()
        };
        let frozen = pretrain_cp(mc(seed), frozen_cfg, &data)?;
        let e2e = pretrain_cp(mc(seed), cfg, &data)?;
        Ok((test_auc(&frozen.best, &data)?, test_auc(&e2e.best, &data)?))
    })?;

    let mut lines = Vec::new();
    let mut ok = true;
    for (tag, what, (base, variant, seeds)) in [
        ("a", "FITB scratch -> CP-pretrained", a),
        ("b", "FITB L_All -> L_All+L_Hard", b),
        ("c", "recall@10 high-level only -> curriculum", c),
        ("d", "AUC frozen random encoders -> end-to-end", d),
    ] {
        ok &= variant >= base;
        let per: Vec<String> = seeds.iter().map(|(x, y)| format!("{x:.3}/{y:.3}")).collect();
        lines.push(format!("({tag}) {what}: {base:.4} -> {variant:.4} [{}]", per.join(" ")));
    }
    lines.push(format!("{:.0}s", start.elapsed().as_secs_f64()));
    ensure(ok, lines.join("; "))
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Outcome {
    let data = tiny_data(9);
    let m = core(OutfitModel::new(tiny_model_config(9), HeadSet::CIR))?;
    let idx = core(EmbeddingIndex::build(&data.catalog, &m))?;
    let (n, d) = (idx.len(), idx.dim());
    let bytes = idx.to_bytes();
    if bytes.len() != idx.header_bytes() + n * d * 8 || idx.payload_bytes() != n * d * 8 {
        return Err(format!(
            "size {} != header {} + {n}*{d}*8",
            bytes.len(),
            idx.header_bytes()
        ));
    }

    // Same items and vectors labelled with C versus 2C categories of
    // equal-length names.
    let relabel = |cats: usize| -> CoreResult<EmbeddingIndex> {
        let rows = (0..n)
            .map(|row| {
                let mut e = idx.entries()[row].clone();
                e.fine_category = format!("c{:03}", row % cats);
                e.high_category = format!("h{:03}", row % cats);
                (e, idx.vector(row).to_vec())
            })
            .collect();
        EmbeddingIndex::from_parts(&idx.fingerprint(), d, rows)
    };
    let single = core(relabel(4))?.to_bytes().len();
    let doubled_index = core(relabel(8))?;
    let doubled = doubled_index.to_bytes().len();
    let fine: std::collections::BTreeSet<&str> = doubled_index
        .entries()
        .iter()
        .map(|e| e.fine_category.as_str())
        .collect();
    if single != doubled || fine.len() != 8 {
        return Err(format!("size changed under category doubling: {single} -> {doubled}"));
    }

    for cats in 1..=32 {
        let cmp = compare_index_sizes(n, d, cats);
        if cmp.subspace_bytes != cats as u64 * cmp.single_embedding_bytes || cmp.ratio != cats as f64 {
            return Err(format!(
                "subspace simulator at {cats} categories reports ratio {}",
                cmp.ratio
            ));
        }
    }

    let items: Vec<&Item> = data.catalog.items().iter().collect();
    for len in 1..=7 {
        let partial: Vec<&Item> = items.iter().step_by(5).take(len).copied().collect();
        let spec = TargetSpec::category(items[1].fine_category.clone());
        let (enc0, knn0) = (model::cir_forward_calls(), index::knn_query_calls());
        let res = core(complete_outfit(&idx, &m, &partial, &spec, 5))?;
        let (enc, knn) = (model::cir_forward_calls() - enc0, index::knn_query_calls() - knn0);
        if enc != 1 || knn != 1 {
            return Err(format!("partial length {len}: {enc} encoder calls, {knn} knn queries"));
        }
        if res
            .neighbors
            .iter()
            .any(|nb| partial.iter().any(|p| p.item_id == nb.item_id))
        {
            return Err(format!("partial length {len}: own item returned"));
        }
    }
    Ok(format!(
        "{} bytes = header {} + {n}x{d}x8; unchanged at 4 vs 8 categories; subspace ratio = C for C in 1..=32; 1 encoder pass + 1 knn query for partial lengths 1..=7",
        bytes.len(),
        idx.header_bytes()
    ))
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Outcome {
    let data = tiny_data(10);
    let cfg = TrainConfig {
        epochs_cp: 2,
        epochs_cir: 2,
        batch_size: 10,
        seed: 10,
        ..TrainConfig::default()
    };
    let run = || -> CoreResult<(Vec<u8>, Vec<u8>, String, String)> {
        let cp = pretrain_cp(tiny_model_config(10), cfg.clone(), &data)?;
        let cir = finetune_cir(CirInit::Pretrained(&cp.best), cfg.clone(), &data)?;
        let cp_model = cp.best.to_model()?;
        let cir_model = cir.best.to_model()?;
        let cp_report = eval::evaluate_cp(&cp_model, &data.catalog, &data.compatibility[&SplitName::Test], 1)?;
        let fitb_report = eval::evaluate_fitb(&cir_model, &data.catalog, &data.fitb[&SplitName::Test], 1)?;
        Ok((
            cp.best.to_bytes(),
            cir.best.to_bytes(),
            cp_report.to_json(),
            fitb_report.to_json(),
        ))
    };
    let first = core(run())?;
    let second = core(run())?;
    if first != second {
        return Err("repeated runs differ".into());
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ckpt = core(Checkpoint::from_bytes(&first.1))?;
    let path = dir.path().join("model.ckpt");
    core(ckpt.save(&path))?;
    let loaded = core(Checkpoint::load(&path))?;
    let file = std::fs::read(&path).map_err(|e| e.to_string())?;
    if loaded != ckpt || loaded.to_bytes() != file || file != first.1 {
        return Err("checkpoint round trip is not bit-exact".into());
    }
    let model = core(loaded.to_model())?;
    let idx = core(EmbeddingIndex::build(&data.catalog, &model))?;
    let ipath = dir.path().join("catalog.idx");
    core(idx.save(&ipath))?;
    let iloaded = core(EmbeddingIndex::load(&ipath))?;
    let ifile = std::fs::read(&ipath).map_err(|e| e.to_string())?;
    if iloaded != idx || iloaded.to_bytes() != ifile {
        return Err("index round trip is not bit-exact".into());
    }
    core(iloaded.check_fingerprint(&model.fingerprint()))?;
    Ok(format!(
        "two seeded runs give identical checkpoints ({} + {} bytes) and eval reports; checkpoint and index files round-trip bit-exactly",
        first.0.len(),
        first.1.len()
    ))
}

// ----------------------------------------------------------------

fn main() {
    let start = Instant::now();
    let synthetic = generate_synthetic(&SyntheticSpec::default(), 2024).expect("default synthetic data");
    let mut pretrained = None;
    let criteria: Vec<Criterion> = vec![
        ("gradient correctness", Box::new(criterion_1)),
        ("set invariance", Box::new(criterion_2)),
        ("masking", Box::new(criterion_3)),
        ("loss oracles", Box::new(criterion_4)),
        ("metric oracles", Box::new(criterion_5)),
        ("synthetic CP", Box::new(|| criterion_6(&mut pretrained, &synthetic))),
    ];
    let mut failed = 0;
    let mut report = |i: usize, name: &str, outcome: Outcome| {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {i:>2} {tag} {name}: {detail}");
    };
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        report(i + 1, name, f());
    }
    report(7, "synthetic FITB", criterion_7(pretrained.as_ref(), &synthetic));
    report(8, "ablation directions", criterion_8());
    report(9, "index contracts", criterion_9());
    report(10, "determinism", criterion_10());
    println!(
        "acceptance: {} of 10 passed in {:.0}s",
        10 - failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
