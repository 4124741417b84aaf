//! One PASS/FAIL line per acceptance criterion. Run with
//! `cargo test --release -p tdag-core --test acceptance -- --nocapture`.

mod common;

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdag_core::compgraph::build_dag;
use tdag_core::depth_sched::{longest_path, wavefront_schedule};
use tdag_core::dnode_select::{greedy_matched, select_exact, select_greedy, sweep, sweep_greedy, Strategy};
use tdag_core::ingest::{
    classify_active, make_batches, split_train_valid_test, ActiveSets, EventStream, Threshold,
};
use tdag_core::synthgen::{figure2_fixture, generate_scale_free, StreamSpec};
use tdag_core::traincore::gradcheck::{compare, numeric_grad, relative_error, worst, Flat, FD_EPS};
use tdag_core::traincore::toy::toy_dag;
use tdag_core::traincore::{
    backward, batch_dags, evaluate, forward_coupled, forward_dag, forward_decoupled, gru_backward, gru_forward,
    negatives_for, phis_from_coupled, rank_of_true, ranking_metrics, softmax_loss, softmax_loss_grad, toy_six_layer,
    train, Carry, EvalConfig, GruParams, Mlp, ModelState, Params, PhiTable, ToyConfig, TrainConfig,
};

use common::{memo_depth, random_dag};

/// Share of sandwich instances where greedy matches the exhaustive optimum,
/// measured once on the seeded instance set below and frozen as a floor.
const SANDWICH_EQUALITY_FLOOR: f64 = 0.87;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit: Duration) -> bool {
    elapsed < limit
}

fn c1_longest_path_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=200);
        let p_root = rng.gen_range(0.0..0.4);
        let max_in = rng.gen_range(1..=4);
        let dag = random_dag(&mut rng, n, p_root, max_in);
        if longest_path(&dag).unwrap().depth != memo_depth(&dag) {
            mismatches += 1;
        }
    }
    let t = start.elapsed();
    check(
        mismatches == 0 && within(t, Duration::from_secs(10)),
        format!("1000 DAGs, {mismatches} mismatches, {t:.2?} (< 10 s)"),
    )
}

fn c2_toy_structure() -> Outcome {
    let r = toy_six_layer(&ToyConfig {
        steps: 0,
        ..ToyConfig::default()
    });
    let split = tdag_core::dnode_select::decouple(&toy_dag(), 3).unwrap();
    let levels = wavefront_schedule(&split).unwrap().step_count;
    check(
        r.coupled_depth == 6 && r.decoupled_depth == 3 && r.segment_lengths == [3, 3] && levels == 3,
        format!(
            "depth {} -> {}, segments {:?}, schedule {levels} steps",
            r.coupled_depth, r.decoupled_depth, r.segment_lengths
        ),
    )
}

fn c3_toy_numeric() -> Outcome {
    let start = Instant::now();
    let r = toy_six_layer(&ToyConfig::default());
    let t = start.elapsed();
    check(
        r.residual <= 1e-3 && r.output_gap <= 1e-3 && r.equivalence_gap <= 1e-12 && within(t, Duration::from_secs(1)),
        format!(
            "|h3-φ3| {:.2e} (≤ 1e-3), |Δh6| {:.2e} (≤ 1e-3), preset gap {:.1e} (≤ 1e-12), {t:.2?} (< 1 s)",
            r.residual, r.output_gap, r.equivalence_gap
        ),
    )
}

fn c4_figure2() -> Outcome {
    let s = figure2_fixture();
    let dag = build_dag(&s, &ActiveSets::none(2, 2)).unwrap();
    let steps = wavefront_schedule(&dag).unwrap().step_count;
    let exact = select_exact(&dag, 3).unwrap();
    let greedy = select_greedy(&dag, 3).unwrap();
    let exact_steps = wavefront_schedule(&exact.dag).unwrap().step_count;
    let greedy_steps = wavefront_schedule(&greedy.dag).unwrap().step_count;
    check(
        steps == 6 && exact.dnodes.members.len() <= 3 && exact_steps <= 3 && greedy_steps <= 3,
        format!(
            "{steps} steps; exact {} d-nodes -> {exact_steps}; greedy K=3 -> {greedy_steps}",
            exact.dnodes.members.len()
        ),
    )
}

fn c5_sandwich() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut done, mut equal, mut violations) = (0, 0, 0);
    while done < 200 {
        let n = rng.gen_range(4..=24);
        let dag = random_dag(&mut rng, n, 0.2, 2);
        if dag.state_count() > 16 {
            continue;
        }
        let k = rng.gen_range(1..=3);
        let none = longest_path(&dag).unwrap().depth;
        let g = select_greedy(&dag, k).unwrap().final_depth();
        let e = select_exact(&dag, k).unwrap().final_depth();
        if !(e <= g && g <= none) {
            violations += 1;
        }
        if e == g {
            equal += 1;
        }
        done += 1;
    }
    let t = start.elapsed();
    let rate = equal as f64 / done as f64;
    check(
        violations == 0 && rate >= 0.5 && rate >= SANDWICH_EQUALITY_FLOOR && within(t, Duration::from_secs(60)),
        format!(
            "200 DAGs, {violations} order violations, greedy = exact in {:.1}% (≥ 50%, floor {:.1}%), {t:.2?} (< 60 s)",
            100.0 * rate,
            100.0 * SANDWICH_EQUALITY_FLOOR
        ),
    )
}

fn table5_stream() -> EventStream {
    generate_scale_free(&StreamSpec::new(1000, 1000, 100_000, 42)).unwrap()
}

fn c6_table5(s: &EventStream) -> Outcome {
    let start = Instant::now();
    let act = ActiveSets::none(s.n_users, s.n_items);
    let plan = make_batches(s, 300).unwrap();
    let greedy = sweep_greedy(s, &act, &plan, &[0, 10, 20, 40, 80]).unwrap();
    let means: Vec<f64> = greedy.iter().map(|r| r.mean_longest_path).collect();
    let decreasing = means.windows(2).all(|w| w[1] < w[0]);
    let cuts = sweep(s, &act, &plan, Strategy::CutByTime, &[2, 4, 8]).unwrap();
    let mut beats = true;
    let mut pairs = Vec::new();
    for cut in &cuts {
        let g = greedy_matched(s, &act, &plan, cut).unwrap();
        beats &= g.mean_longest_path < cut.mean_longest_path;
        pairs.push(format!(
            "{:.1} d-nodes: greedy {:.2} vs cut {:.2}",
            cut.n_dnodes, g.mean_longest_path, cut.mean_longest_path
        ));
    }
    let t = start.elapsed();
    let shown: Vec<String> = means.iter().map(|m| format!("{m:.2}")).collect();
    check(
        decreasing && beats && within(t, Duration::from_secs(300)),
        format!(
            "greedy K 0/10/20/40/80 -> {}; {}; {t:.2?} (< 300 s)",
            shown.join(" > "),
            pairs.join("; ")
        ),
    )
}

fn c7_active_ablation(s: &EventStream) -> Outcome {
    let plan = make_batches(s, 300).unwrap();
    let settings = [
        (Threshold::Infinite, Threshold::Infinite),
        (Threshold::Finite(800), Threshold::Finite(400)),
        (Threshold::Finite(400), Threshold::Finite(200)),
        (Threshold::Finite(200), Threshold::Finite(100)),
    ];
    let mut work = Vec::new();
    let mut depth = Vec::new();
    for (u, i) in settings {
        let act = classify_active(s, u, i);
        let stats = tdag_core::depth_sched::batch_depth_stats(s, &act, &plan).unwrap();
        work.push(stats.total_work());
        depth.push(stats.mean_depth);
    }
    let ok = work.windows(2).all(|w| w[1] < w[0]) && depth.windows(2).all(|w| w[1] < w[0]);
    check(
        ok,
        format!(
            "thresholds ∞/∞, 800/400, 400/200, 200/100: State nodes {work:?}, mean depth [{}]",
            depth.iter().map(|d| format!("{d:.2}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

/// GRU parameters together with its three inputs.
#[derive(Clone)]
struct GruCase {
    p: GruParams,
    x: Flat,
}

impl Params for GruCase {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut b = self.p.blocks();
        b.extend(self.x.blocks());
        b
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut b = self.p.blocks_mut();
        b.extend(self.x.blocks_mut());
        b
    }
}

#[derive(Clone)]
struct MlpCase {
    m: Mlp,
    x: Flat,
}

impl Params for MlpCase {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut b = self.m.blocks();
        b.extend(self.x.blocks());
        b
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut b = self.m.blocks_mut();
        b.extend(self.x.blocks_mut());
        b
    }
}

#[derive(Clone)]
struct FullCase(ModelState, PhiTable);

impl Params for FullCase {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut b = self.0.blocks();
        b.extend(self.1.blocks());
        b
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut b = self.0.blocks_mut();
        b.extend(self.1.blocks_mut());
        b
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, a: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-a..a)).collect()
}

fn gru_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.gen_range(1..=8);
    let f = rng.gen_range(1..=4);
    let mut p = GruParams::init(d, d + f, &mut rng);
    p.blocks_mut().into_iter().for_each(|(_, b)| b.iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3)));
    let case = GruCase {
        p,
        x: Flat(uniform(&mut rng, 2 * d + f, 1.0)),
    };
    let w = uniform(&mut rng, d, 1.0);
    let out = |c: &GruCase| {
        let (h, o) = c.x.0.split_at(d);
        let (o, feat) = o.split_at(d);
        gru_forward(h, o, feat, &c.p)
    };
    let (_, cache) = out(&case);
    let mut grads = case.p.zeros_like();
    let (a, b, c) = gru_backward(&case.p, &cache, &w, &mut grads);
    let analytic = GruCase {
        p: grads,
        x: Flat([a, b, c].concat()),
    };
    let n = numeric_grad(&case, FD_EPS, |c| out(c).0.iter().zip(&w).map(|(x, y)| x * y).sum());
    worst(&compare(&analytic, &n)).1
}

fn mlp_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (i, h, o) = (rng.gen_range(1..=16), rng.gen_range(1..=8), rng.gen_range(1..=8));
    let case = MlpCase {
        m: Mlp::init(i, h, o, &mut rng),
        x: Flat(uniform(&mut rng, i, 1.0)),
    };
    let w = uniform(&mut rng, o, 1.0);
    let (_, cache) = case.m.forward(&case.x.0);
    let mut grads = case.m.zeros_like();
    let dx = case.m.backward(&cache, &w, &mut grads);
    let analytic = MlpCase { m: grads, x: Flat(dx) };
    let n = numeric_grad(&case, FD_EPS, |c| c.m.forward(&c.x.0).0.iter().zip(&w).map(|(a, b)| a * b).sum());
    worst(&compare(&analytic, &n)).1
}

fn loss_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.gen_range(1..=12);
    let s = Flat(uniform(&mut rng, m, 3.0));
    let (_, g) = softmax_loss_grad(&s.0).unwrap();
    let n = numeric_grad(&s, FD_EPS, |q| softmax_loss(&q.0).unwrap());
    relative_error(&g, &n.0)
}

/// Ranking loss plus penalty on a decoupled batch that reads carried state.
fn full_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.gen_range(2..=8);
    let spec = StreamSpec {
        feature_dim: 1 + (seed % 2) as usize,
        ..StreamSpec::new(7, 5, 50, seed)
    };
    let s = generate_scale_free(&spec).unwrap();
    let act = classify_active(&s, Threshold::Finite(12), Threshold::Finite(14));
    let m = ModelState::init(d, &act, &s.feature_cardinality, seed);
    let dags: Vec<_> = [0..20, 20..50]
        .into_iter()
        .map(|r| {
            let dag = tdag_core::compgraph::build_dag_range(&s, &act, r).unwrap();
            select_greedy(&dag, 3).unwrap().dag
        })
        .collect();
    let mut phis = phis_from_coupled(&m, &s, &act, &dags, rng.gen_range(0.2..3.0)).unwrap();
    for k in phis.keys().collect::<Vec<_>>() {
        let v: Vec<f64> = phis.get(&k).unwrap().iter().map(|x| x + rng.gen_range(-0.2..0.2)).collect();
        phis.insert(k, v);
    }
    let (first, _) = forward_dag(&m, &phis, &s, &act, &dags[0], None, &Carry::new()).unwrap();
    let mut carry = Carry::new();
    carry.advance(&s, &dags[0], &first);
    let negs = negatives_for(&s, dags[1].event_range(), 3, &mut rng);
    let case = FullCase(m, phis);
    let (trace, tape) = forward_dag(&case.0, &case.1, &s, &act, &dags[1], Some(&negs), &carry).unwrap();
    let (gm, gp) = backward(&case.0, &case.1, &trace, &tape);
    let n = numeric_grad(&case, FD_EPS, |c| {
        forward_dag(&c.0, &c.1, &s, &act, &dags[1], Some(&negs), &carry).unwrap().0.total_loss
    });
    worst(&compare(&FullCase(gm, gp), &n)).1
}

fn c8_gradients() -> Outcome {
    let start = Instant::now();
    let mut errors: Vec<(&str, f64)> = Vec::new();
    errors.extend((0..6).map(|s| ("gru", gru_case(100 + s))));
    errors.extend((0..5).map(|s| ("mlp", mlp_case(200 + s))));
    errors.extend((0..5).map(|s| ("loss", loss_case(300 + s))));
    errors.extend((0..6).map(|s| ("model+penalty", full_case(400 + s))));
    let t = start.elapsed();
    let (kind, err) = errors.iter().copied().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    check(
        errors.len() >= 20 && err <= 1e-4 && within(t, Duration::from_secs(30)),
        format!(
            "{} configurations, worst relative error {err:.2e} ({kind}) (≤ 1e-4), {t:.2?} (< 30 s)",
            errors.len()
        ),
    )
}

fn c9_equivalence() -> Outcome {
    let spec = StreamSpec {
        feature_dim: 2,
        ..StreamSpec::new(40, 25, 500, 11)
    };
    let s = generate_scale_free(&spec).unwrap();
    let act = classify_active(&s, Threshold::Finite(40), Threshold::Finite(40));
    let m = ModelState::init(8, &act, &s.feature_cardinality, 3);
    let res = select_greedy(&build_dag(&s, &act).unwrap(), 10).unwrap();
    let phis = phis_from_coupled(&m, &s, &act, std::slice::from_ref(&res.dag), 1.0).unwrap();
    let a = forward_coupled(&s, &act, &m, None).unwrap();
    let b = forward_decoupled(&s, &act, &m, &res, &phis, None).unwrap();
    let gap = res
        .dag
        .state_indices()
        .flat_map(|i| a.emb[i].iter().zip(&b.emb[i]).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);
    check(
        res.dnodes.members.len() == 10 && gap <= 1e-12,
        format!(
            "500 events, {} d-nodes, max |Δemb| {gap:.1e} (≤ 1e-12)",
            res.dnodes.members.len()
        ),
    )
}

fn c10_end_to_end() -> Outcome {
    let start = Instant::now();
    let spec = StreamSpec {
        feature_dim: 2,
        ..StreamSpec::new(50, 30, 5000, 7)
    };
    let s = generate_scale_free(&spec).unwrap();
    let (train_s, valid, test) = split_train_valid_test(&s, (0.7, 0.1, 0.2)).unwrap();
    let act = classify_active(&train_s, Threshold::Finite(200), Threshold::Finite(200));
    let plan = make_batches(&train_s, 35).unwrap();
    let history = train_s.concat(&valid);
    let cfg = TrainConfig::default();
    let run = |strategy, k| {
        let dags = batch_dags(&train_s, &act, &plan, strategy, k).unwrap();
        let out = train(&train_s, &act, &dags, &cfg).unwrap();
        let m = evaluate(&history, &test, &act, &out.model, &EvalConfig::default()).unwrap();
        (m, out.metrics.steps_per_epoch)
    };
    let (coupled, steps_c) = run(Strategy::None, 0);
    let (decoupled, steps_d) = run(Strategy::Greedy, 10);
    let t = start.elapsed();
    let fewer = steps_d.iter().zip(&steps_c).all(|(d, c)| d < c);
    let gap = (coupled.mrr - decoupled.mrr).abs();
    check(
        gap <= 0.05 && fewer && within(t, Duration::from_secs(120)),
        format!(
            "MRR coupled {:.4} vs decoupled {:.4}, |Δ| {gap:.4} (≤ 0.05); steps/epoch {} vs {}; {t:.2?} (< 120 s)",
            coupled.mrr, decoupled.mrr, steps_c[0], steps_d[0]
        ),
    )
}

fn c11_random_mrr() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ranks: Vec<f64> = (0..10_000)
        .map(|_| {
            let scores: Vec<f64> = (0..500).map(|_| rng.gen::<f64>()).collect();
            rank_of_true(&scores)
        })
        .collect();
    let mrr = ranking_metrics(&ranks).mrr;
    let expected = (1..=500).map(|k| 1.0 / k as f64).sum::<f64>() / 500.0;
    check(
        (mrr - expected).abs() <= 0.002,
        format!("10000 events, MRR {mrr:.5} vs H500/500 = {expected:.5} (±0.002)"),
    )
}

#[test]
fn acceptance() {
    let stream = table5_stream();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("longest-path oracle", Box::new(c1_longest_path_oracle)),
        ("six-layer toy, structure", Box::new(c2_toy_structure)),
        ("six-layer toy, numerics", Box::new(c3_toy_numeric)),
        ("two-user fixture", Box::new(c4_figure2)),
        ("exact/greedy/none sandwich", Box::new(c5_sandwich)),
        ("depth trend over K", Box::new(|| c6_table5(&stream))),
        ("active-node ablation", Box::new(|| c7_active_ablation(&stream))),
        ("gradient suite", Box::new(c8_gradients)),
        ("decoupled = coupled", Box::new(c9_equivalence)),
        ("end-to-end training", Box::new(c10_end_to_end)),
        ("random-score MRR", Box::new(c11_random_mrr)),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        println!("{} {:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
        if !o.pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
