//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any fails. Run with `cargo test -p sigtraj-core --test acceptance`.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sigtraj::harness::{
    build_windows, closed_loop_unroll, sim_config_for, ReplayPredictor, RunConfig,
};
use sigtraj::metrics::{
    ade, build_report, count_cell, fde, kde_nll, min_ade, min_fde, ttc, DetectorConfig,
};
use sigtraj::microsim::{self, SimConfig};
use sigtraj::model::{
    train, AgentInput, ConstantVelocity, CvaeModel, ModelConfig, Normalizer, TrainConfig, Window,
};
use sigtraj::nn::{
    blend, grad_check, AdditiveAttention, BiLstm, Dense, GruCell, LstmCell, Mlp, ParamSet,
    Tensor, Var, Graph,
};
use sigtraj::scene::central_differences;
use sigtraj::{Point2, Scenario, SignalColor, SignalTimeline, Trajectory, TrajectoryLog, VehicleId, VehicleState};

// ---- pinned tolerances and budgets ----

const ORACLE_REL_TOL: f64 = 1e-9;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_EPS: f64 = 1e-5;
/// Step for the full loss, where roundoff dominates at smaller steps.
const LOSS_GRAD_EPS: f64 = 1e-3;
const PERMUTATION_TOL: f64 = 1e-12;
const PRIOR_WEIGHT_TOL: f64 = 1e-12;
const MC_SAMPLES: usize = 1_000_000;
const MC_SE_FACTOR: f64 = 3.0;
const TRAIN_LOSS_RATIO: f64 = 0.7;

const BUDGET_FIXTURES: Duration = Duration::from_secs(1);
const BUDGET_ORACLES: Duration = Duration::from_secs(10);
const BUDGET_COMPLIANCE: Duration = Duration::from_secs(120);
const BUDGET_GRADIENTS: Duration = Duration::from_secs(60);
const BUDGET_TRAINING: Duration = Duration::from_secs(600);

const DT: f64 = 0.1;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, budget: Duration) -> Result<(), String> {
    ensure(elapsed < budget, || format!("took {:.2?}, budget {budget:.0?}", elapsed))
}

// ---- criterion 1: detector fixtures ----

fn from_positions(id: u64, cluster: &str, pos: &[Point2]) -> Trajectory {
    let d = central_differences(pos, DT);
    Trajectory {
        vehicle_id: VehicleId(id),
        cluster_id: Some(cluster.to_string()),
        states: pos
            .iter()
            .zip(d)
            .enumerate()
            .map(|(k, (&p, (v, a)))| VehicleState {
                t: k as f64 * DT,
                pos: p,
                vel: v,
                acc: a,
            })
            .collect(),
    }
}

struct Fixture {
    name: &'static str,
    log: TrajectoryLog,
    timeline: SignalTimeline,
    /// red-light, mid-intersection, pre-stopbar, TTC encounters
    want: (usize, usize, usize, usize),
}

struct Bed {
    scenario: Scenario,
}

impl Bed {
    fn drive(&self, cluster: &str, id: u64, n: usize, s: impl Fn(f64) -> f64) -> Trajectory {
        let c = self.scenario.geometry.cluster(cluster).unwrap();
        let pos: Vec<Point2> = (0..n).map(|k| c.centerline.point_at(s(k as f64 * DT))).collect();
        from_positions(id, cluster, &pos)
    }

    fn bar(&self, cluster: &str) -> f64 {
        self.scenario.geometry.cluster(cluster).unwrap().stopbar_s()
    }

    fn length(&self, cluster: &str) -> f64 {
        self.scenario.geometry.cluster(cluster).unwrap().centerline.length()
    }

    /// Every movement Green except `movement`, which follows `color`.
    fn timeline(&self, movement: &str, n: usize, color: impl Fn(f64) -> SignalColor) -> SignalTimeline {
        let colors = self
            .scenario
            .plan
            .movements
            .keys()
            .map(|m| {
                let seq = (0..n)
                    .map(|k| if m == movement { color(k as f64 * DT) } else { SignalColor::Green })
                    .collect();
                (m.clone(), seq)
            })
            .collect();
        SignalTimeline { dt: DT, colors }
    }

    fn green(&self, n: usize) -> SignalTimeline {
        self.timeline("", n, |_| SignalColor::Green)
    }
}

fn red_between(a: f64, b: f64) -> impl Fn(f64) -> SignalColor {
    move |t| if t >= a - 1e-9 && t < b - 1e-9 { SignalColor::Red } else { SignalColor::Green }
}

fn fixtures(bed: &Bed) -> Vec<Fixture> {
    let ebt = "T on EBT";
    let bar = bed.bar(ebt);
    let mut out = Vec::new();
    let mut add = |name, trs: Vec<Trajectory>, timeline, want| {
        out.push(Fixture {
            name,
            log: TrajectoryLog::new(DT, trs),
            timeline,
            want,
        })
    };

    let red = bed.timeline("EBT", 600, red_between(5.0, 30.0));
    add(
        "crosses at 10 s during Red",
        vec![bed.drive(ebt, 1, 300, |t| bar - 100.0 + 10.0 * t)],
        red.clone(),
        (1, 0, 0, 0),
    );
    add(
        "waits 1 m back until after Red",
        vec![bed.drive(ebt, 2, 500, |t| if t < 31.0 { bar - 1.0 } else { bar - 1.0 + 5.0 * (t - 31.0) })],
        bed.timeline("EBT", 600, red_between(0.0, 30.0)),
        (0, 0, 0, 0),
    );
    add(
        "crosses at the Red to Green instant",
        vec![bed.drive(ebt, 3, 500, |t| bar - 300.0 + 10.0 * t)],
        red,
        (0, 0, 0, 0),
    );

    let rt = "R on EBTR";
    let rbar = bed.bar(rt);
    add(
        "right turn on Red",
        vec![bed.drive(rt, 4, 200, |t| rbar - 20.0 + 5.0 * t)],
        bed.timeline("EBR", 300, |_| SignalColor::Red),
        (1, 0, 0, 0),
    );

    // inside the box at bar + 6, crawling at `v` for `secs`
    let crawl = |id, v: f64, secs: f64| {
        let s0 = bar + 6.0;
        bed.drive(ebt, id, 200 + (secs / DT) as usize, move |t| {
            if t < 1.0 {
                s0 - 10.0 * (1.0 - t)
            } else if t < 1.0 + secs {
                s0 + v * (t - 1.0)
            } else {
                s0 + v * secs + 10.0 * (t - 1.0 - secs)
            }
        })
    };
    add("box crawl 2.0 m/s for 2.5 s", vec![crawl(5, 2.0, 2.5)], bed.green(400), (0, 1, 0, 0));
    add("box crawl 2.0 m/s for 1.5 s", vec![crawl(6, 2.0, 1.5)], bed.green(400), (0, 0, 0, 0));
    add("box crawl 3.0 m/s for 10 s", vec![crawl(7, 3.0, 10.0)], bed.green(400), (0, 0, 0, 0));

    add(
        "idle 7 m back through 20 s of Green",
        vec![bed.drive(ebt, 8, 200, |_| bar - 7.0)],
        bed.green(400),
        (0, 0, 1, 0),
    );
    add(
        "idle 7 m back, leaves after 10 s",
        vec![bed.drive(ebt, 9, 200, |t| if t < 10.0 { bar - 7.0 } else { bar - 7.0 + 4.0 * (t - 10.0) })],
        bed.green(400),
        (0, 0, 0, 0),
    );
    add(
        "follower blocked by a leader just past the bar",
        vec![
            bed.drive(ebt, 10, 200, |_| bar - 2.0),
            bed.drive(ebt, 11, 200, |_| bar + 1.0),
        ],
        bed.green(400),
        (0, 0, 0, 0),
    );

    let wbt = "T on WBT";
    let (le, lw) = (bed.length(ebt), bed.length(wbt));
    let n = ((le.min(lw) - 2.0) / 10.0 / DT) as usize;
    add(
        "opposing through movements meet head-on",
        vec![
            bed.drive(ebt, 12, n, |t| 10.0 * t),
            bed.drive(wbt, 13, n, |t| 10.0 * t),
        ],
        bed.green(n + 10),
        (0, 0, 0, 1),
    );
    add(
        "two vehicles 20 m apart at equal speed",
        vec![
            bed.drive(ebt, 14, 200, |t| 30.0 + 10.0 * t),
            bed.drive(ebt, 15, 200, |t| 10.0 + 10.0 * t),
        ],
        bed.green(400),
        (0, 0, 0, 0),
    );
    // leader parked downstream of the box; the follower closes, backs off
    // and closes again
    let parked = bar + 80.0;
    let mut gap = 30.0;
    let mut gaps = Vec::new();
    for k in 0..120 {
        gaps.push(gap);
        gap += if k < 20 { -8.0 } else if k < 60 { 8.0 } else { -8.0 } * DT;
    }
    add(
        "approach, retreat, approach",
        vec![
            bed.drive(ebt, 16, 120, move |_| parked),
            bed.drive(ebt, 17, 120, move |t| parked - gaps[((t / DT).round() as usize).min(119)]),
        ],
        bed.green(200),
        (0, 0, 0, 2),
    );
    out
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let bed = Bed {
        scenario: Scenario::testbed(),
    };
    let cfg = DetectorConfig::default();
    let fx = fixtures(&bed);
    let trajectories: usize = fx.iter().map(|f| f.log.trajectories.len()).sum();
    ensure(trajectories >= 12, || format!("only {trajectories} fixture trajectories"))?;
    for f in &fx {
        let audit = build_report(&f.log, &f.timeline, &bed.scenario.geometry, &cfg).map_err(|e| e.to_string())?;
        let t = &audit.report.totals;
        let got = (t.red_light, t.mid_stop, t.pre_stopbar, audit.conflicts.len());
        ensure(got == f.want, || format!("{}: got {got:?}, want {:?}", f.name, f.want))?;
    }
    let el = start.elapsed();
    within(el, BUDGET_FIXTURES)?;
    Ok(format!("{} fixtures, {trajectories} trajectories, exact counts ({el:.2?})", fx.len()))
}

// ---- criterion 2: displacement and TTC oracles ----

fn rel_close(a: f64, b: f64) -> bool {
    (a - b).abs() <= ORACLE_REL_TOL * a.abs().max(b.abs()).max(1e-300)
}

fn random_path(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<Point2> {
    (0..n)
        .map(|_| Point2::new(rng.random_range(-scale..scale), rng.random_range(-scale..scale)))
        .collect()
}

fn hypot(a: Point2, b: Point2) -> f64 {
    ((a.x - b.x) * (a.x - b.x) + (a.y - b.y) * (a.y - b.y)).sqrt()
}

fn oracle_ade(p: &[Point2], t: &[Point2]) -> f64 {
    let mut s = 0.0;
    for i in 0..t.len() {
        s += hypot(p[i], t[i]);
    }
    s / t.len() as f64
}

fn oracle_kde(samples: &[Vec<Point2>], truth: &[Point2]) -> f64 {
    let k = samples.len() as f64;
    let mut total = 0.0;
    for (step, x) in truth.iter().enumerate() {
        let xs: Vec<f64> = samples.iter().map(|s| s[step].x).collect();
        let ys: Vec<f64> = samples.iter().map(|s| s[step].y).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / k;
        let var = |v: &[f64]| {
            let m = mean(v);
            v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (k - 1.0)
        };
        let h = (((var(&xs) + var(&ys)) / 2.0).sqrt() * k.powf(-1.0 / 6.0)).max(1e-3);
        let mut dens = 0.0;
        for j in 0..samples.len() {
            let r2 = (x.x - xs[j]).powi(2) + (x.y - ys[j]).powi(2);
            dens += (-r2 / (2.0 * h * h)).exp() / (2.0 * std::f64::consts::PI * h * h);
        }
        total -= (dens / k).ln();
    }
    total / truth.len() as f64
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    for case in 0..100 {
        let d = rng.random_range(0.0..100.0);
        let v = rng.random_range(-20.0..20.0);
        let got = ttc(d, v).map_err(|e| e.to_string())?;
        let ok = match got {
            Some(t) => v > 0.0 && rel_close(t, d / v),
            None => v <= 0.0,
        };
        ensure(ok, || format!("ttc case {case}: ttc({d}, {v}) = {got:?}"))?;

        let t = rng.random_range(1..15);
        let truth = random_path(&mut rng, t, 50.0);
        let k = rng.random_range(2..26);
        let cands: Vec<Vec<Point2>> = (0..k).map(|_| random_path(&mut rng, t, 50.0)).collect();
        let (mut best_a, mut best_f) = (f64::MAX, f64::MAX);
        for c in &cands {
            let a = oracle_ade(c, &truth);
            let f = hypot(c[t - 1], truth[t - 1]);
            ensure(rel_close(ade(c, &truth).unwrap(), a), || format!("ade case {case}"))?;
            ensure(rel_close(fde(c, &truth).unwrap(), f), || format!("fde case {case}"))?;
            best_a = best_a.min(a);
            best_f = best_f.min(f);
        }
        ensure(rel_close(min_ade(&cands, &truth).unwrap(), best_a), || format!("min_ade case {case}"))?;
        ensure(rel_close(min_fde(&cands, &truth).unwrap(), best_f), || format!("min_fde case {case}"))?;

        let truth = random_path(&mut rng, t, 2.5);
        let samples: Vec<Vec<Point2>> = (0..k).map(|_| random_path(&mut rng, t, 2.5)).collect();
        let got = kde_nll(&samples, &truth, None).unwrap();
        let want = oracle_kde(&samples, &truth);
        ensure(rel_close(got, want), || format!("kde_nll case {case}: {got} vs {want}"))?;
        checked += 1;
    }
    let el = start.elapsed();
    within(el, BUDGET_ORACLES)?;
    Ok(format!("{checked} cases per metric within {ORACLE_REL_TOL:e} ({el:.2?})"))
}

// ---- criterion 3: ground-truth compliance ----

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let sc = Scenario::testbed();
    let cfg = DetectorConfig::default();
    let mut vehicles = 0;
    for seed in 0..5 {
        let sim = SimConfig::uniform(&sc.geometry, 1000.0, 4000.0, seed);
        let out = microsim::run(&sim, &sc.geometry, &sc.plan).map_err(|e| e.to_string())?;
        let audit = build_report(&out.log, &out.timeline, &sc.geometry, &cfg).map_err(|e| e.to_string())?;
        let t = &audit.report.totals;
        ensure((t.red_light, t.mid_stop, t.pre_stopbar) == (0, 0, 0), || {
            format!(
                "seed {seed}: red {} mid {} pre {} over {} vehicles",
                t.red_light, t.mid_stop, t.pre_stopbar, t.total
            )
        })?;
        vehicles += t.total;
    }
    let el = start.elapsed();
    within(el, BUDGET_COMPLIANCE)?;
    Ok(format!("5 seeds x 4000 s, {vehicles} vehicles, 0 violations ({el:.2?})"))
}

// ---- criterion 4: gradients ----

fn rand_tensor(rng: &mut impl Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Worst relative error of `build`, contracted with a fixed random weight.
fn check_op(ps: &ParamSet, build: impl Fn(&mut Graph, &ParamSet) -> Var) -> f64 {
    let f = |p: &ParamSet| {
        let mut g = Graph::new();
        let out = build(&mut g, p);
        let (r, c) = g.shape(out);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let w = g.input(rand_tensor(&mut rng, r, c));
        let prod = g.mul(out, w);
        let loss = g.sum_all(prod);
        (g.value(loss).item(), g.backward(loss, p))
    };
    grad_check(f, ps, GRAD_EPS, None).max_rel_error
}

type OpCase = (&'static str, Box<dyn Fn(&mut Graph, &ParamSet) -> Var>);

fn primitive_cases(ps: &mut ParamSet, rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let a = ps.add("a", rand_tensor(rng, 3, 4));
    let b = ps.add("b", rand_tensor(rng, 3, 4));
    let row = ps.add("row", rand_tensor(rng, 1, 4));
    let col = ps.add("col", rand_tensor(rng, 3, 1));
    let m = ps.add("m", rand_tensor(rng, 4, 2));
    let raw = ps.add("raw", rand_tensor(rng, 3, 5));
    let target = rand_tensor(rng, 3, 2);
    let mask = Tensor::matrix(3, 1, vec![1.0, 0.0, 1.0]);
    let unary = |name, f: fn(&mut Graph, Var) -> Var| -> OpCase {
        (name, Box::new(move |g: &mut Graph, p: &ParamSet| {
            let x = g.param(p, a);
            f(g, x)
        }))
    };
    let binary = |name, f: fn(&mut Graph, Var, Var) -> Var| -> OpCase {
        (name, Box::new(move |g: &mut Graph, p: &ParamSet| {
            let (x, y) = (g.param(p, a), g.param(p, b));
            f(g, x, y)
        }))
    };
    vec![
        binary("add", Graph::add),
        binary("sub", Graph::sub),
        binary("mul", Graph::mul),
        unary("neg", Graph::neg),
        unary("tanh", Graph::tanh),
        unary("sigmoid", Graph::sigmoid),
        unary("exp", Graph::exp),
        unary("row_sum", Graph::row_sum),
        unary("sum_all", Graph::sum_all),
        unary("mean_all", Graph::mean_all),
        unary("log_softmax_rows", Graph::log_softmax_rows),
        ("affine", Box::new(move |g, p| {
            let x = g.param(p, a);
            g.affine(x, 0.7, -0.2)
        })),
        ("matmul", Box::new(move |g, p| {
            let (x, y) = (g.param(p, a), g.param(p, m));
            g.matmul(x, y)
        })),
        ("add_row", Box::new(move |g, p| {
            let (x, r) = (g.param(p, a), g.param(p, row));
            g.add_row(x, r)
        })),
        ("mul_col", Box::new(move |g, p| {
            let (x, c) = (g.param(p, a), g.param(p, col));
            g.mul_col(x, c)
        })),
        ("concat_cols", Box::new(move |g, p| {
            let (x, y, c) = (g.param(p, a), g.param(p, m), g.param(p, col));
            let y = g.matmul(x, y);
            g.concat_cols(&[x, y, c])
        })),
        ("slice_cols", Box::new(move |g, p| {
            let x = g.param(p, a);
            g.slice_cols(x, 1, 2)
        })),
        ("repeat_rows", Box::new(move |g, p| {
            let x = g.param(p, a);
            g.repeat_rows(x, 3)
        })),
        ("reshape", Box::new(move |g, p| {
            let x = g.param(p, a);
            g.reshape(x, 2, 6)
        })),
        ("broadcast_rows", Box::new(move |g, p| {
            let r = g.param(p, row);
            g.broadcast_rows(r, 5)
        })),
        ("take_rows", Box::new(move |g, p| {
            let x = g.param(p, a);
            g.take_rows(x, &[2, 0, 2, 1])
        })),
        ("blend", Box::new(move |g, p| {
            let (x, y) = (g.param(p, a), g.param(p, b));
            let mk = g.input(mask.clone());
            blend(g, mk, x, y)
        })),
        ("binormal_logpdf", Box::new(move |g, p| {
            let x = g.param(p, raw);
            g.binormal_logpdf(x, target.clone())
        })),
    ]
}

fn layer_cases(ps: &mut ParamSet, rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let dense = Dense::new(ps, "dense", 3, 4, rng);
    let mlp = Mlp::new(ps, "mlp", &[3, 5, 2], true, rng);
    let lstm = LstmCell::new(ps, "lstm", 3, 4, rng);
    let gru = GruCell::new(ps, "gru", 3, 4, rng);
    let bi = BiLstm::new(ps, "bi", 3, 2, rng);
    let att = AdditiveAttention::new(ps, "att", 3, 4, 5, rng);
    // move weights off their initial values, zero biases included
    for t in ps.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.1 * rng.random_range(-1.0..1.0);
        }
    }
    let xs: Vec<Tensor> = (0..3).map(|_| rand_tensor(rng, 2, 3)).collect();
    let h0 = rand_tensor(rng, 2, 4);
    let extra = rand_tensor(rng, 2, 12);
    let (x0, x1, x2, x3) = (xs[0].clone(), xs.clone(), xs.clone(), xs.clone());
    let (h1, h2, e2) = (h0.clone(), h0.clone(), extra.clone());
    let (k1, q1) = (xs.clone(), h0.clone());
    let mask = Tensor::matrix(2, 1, vec![1.0, 0.0]);
    vec![
        ("Dense", Box::new(move |g, p| {
            let x = g.input(x0.clone());
            dense.forward(g, p, x).unwrap()
        })),
        ("Mlp", Box::new(move |g, p| {
            let x = g.input(xs[1].clone());
            mlp.forward(g, p, x).unwrap()
        })),
        ("LstmCell", Box::new(move |g, p| {
            let x: Vec<Var> = x1.iter().map(|t| g.input(t.clone())).collect();
            let one = g.input(Tensor::filled(2, 1, 1.0));
            let m = g.input(mask.clone());
            let h = g.input(h1.clone());
            let (h, c) = lstm.step(g, p, x[0], h, h).unwrap();
            let _ = c;
            let run = lstm.run(g, p, &x, Some(&[one, m, one])).unwrap();
            g.concat_cols(&[h, run])
        })),
        ("GruCell", Box::new(move |g, p| {
            let x: Vec<Var> = x2.iter().map(|t| g.input(t.clone())).collect();
            let mut h = g.input(h2.clone());
            let e = g.input(e2.clone());
            h = gru.step(g, p, x[0], h).unwrap();
            gru.step_with_extra(g, p, x[1], h, Some(e)).unwrap()
        })),
        ("BiLstm", Box::new(move |g, p| {
            let x: Vec<Var> = x3.iter().map(|t| g.input(t.clone())).collect();
            bi.run(g, p, &x).unwrap()
        })),
        ("AdditiveAttention", Box::new(move |g, p| {
            let keys: Vec<Var> = k1.iter().map(|t| g.input(t.clone())).collect();
            let q = g.input(q1.clone());
            let (pooled, w) = att.forward(g, p, &keys, q).unwrap();
            g.concat_cols(&[pooled, w])
        })),
    ]
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        history: 4,
        future: 3,
        latent: 3,
        history_hidden: 4,
        edge_hidden: 4,
        future_hidden: 3,
        decoder_hidden: 5,
        position_hidden: 4,
        position_dim: 3,
        encoding_dim: 5,
        attention_dim: 3,
        ..ModelConfig::default()
    }
}

fn sim_windows(config: &ModelConfig, seconds: f64, seed: u64) -> Vec<Window> {
    let sc = Scenario::testbed();
    let sim = SimConfig::uniform(&sc.geometry, 1500.0, seconds, seed);
    let out = microsim::run(&sim, &sc.geometry, &sc.plan).unwrap();
    build_windows(&out.log, &out.timeline, &sc.geometry, config, 1).unwrap()
}

fn fitted_model(config: ModelConfig, windows: &[Window], seed: u64) -> CvaeModel {
    let ids = Scenario::testbed().geometry.cluster_ids();
    let mut m = CvaeModel::new(config, ids, seed).unwrap();
    m.normalizer = Normalizer::fit(windows);
    m
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = (0.0, "");
    let mut ps = ParamSet::new();
    let prims = primitive_cases(&mut ps, &mut rng);
    let mut ls = ParamSet::new();
    let layers = layer_cases(&mut ls, &mut rng);
    let n = prims.len() + layers.len();
    for (set, cases) in [(&ps, prims), (&ls, layers)] {
        for (name, build) in cases {
            let e = check_op(set, build);
            ensure(e < GRAD_REL_TOL, || format!("{name}: rel error {e:e}"))?;
            if e > worst.0 {
                worst = (e, name);
            }
        }
    }
    let cfg = tiny_config();
    let ws = sim_windows(&cfg, 90.0, 2);
    let m = fitted_model(cfg, &ws, 7);
    let a = ws
        .iter()
        .find(|w| !w.input.neighbors.is_empty())
        .ok_or("no window with a neighbor")?;
    let b = ws.iter().find(|w| w.input.vehicle_id != a.input.vehicle_id).unwrap();
    let batch = vec![a, b];
    let r = grad_check(|p| m.elbo_loss(p, &batch, 0.7), &m.params, LOSS_GRAD_EPS, None);
    ensure(r.checked == m.params.num_values(), || "not every parameter checked".into())?;
    ensure(r.max_rel_error < GRAD_REL_TOL, || format!("full loss: {:?}", r.worst))?;
    let el = start.elapsed();
    within(el, BUDGET_GRADIENTS)?;
    Ok(format!(
        "{n} primitives (worst {} {:.1e}), full loss over {} values {:.1e} ({el:.2?})",
        worst.1, worst.0, r.checked, r.max_rel_error
    ))
}

// ---- criterion 5: latent structure ----

fn criterion_5() -> Outcome {
    let sc = Scenario::testbed();
    let cfg = ModelConfig {
        history_hidden: 8,
        edge_hidden: 8,
        future_hidden: 8,
        decoder_hidden: 16,
        position_hidden: 8,
        position_dim: 4,
        encoding_dim: 12,
        attention_dim: 6,
        ..ModelConfig::default()
    };
    let ws = sim_windows(&cfg, 90.0, 2);
    let m = fitted_model(cfg, &ws, 4);
    let inputs: Vec<&AgentInput> = ws.iter().take(8).map(|w| &w.input).collect();
    let preds = m.predict_distribution(&inputs);
    let (prior, _) = m.latent_distributions(&inputs, None);
    for (p, q) in preds.iter().zip(&prior) {
        ensure(p.modes.len() == 25, || format!("{} modes", p.modes.len()))?;
        ensure((p.weights.iter().sum::<f64>() - 1.0).abs() < PRIOR_WEIGHT_TOL, || "weights off the simplex".into())?;
        for (a, b) in p.weights.iter().zip(&q.probs) {
            ensure((a - b).abs() < PRIOR_WEIGHT_TOL, || format!("weight {a} vs prior {b}"))?;
        }
    }

    let batch: Vec<&Window> = ws.iter().take(3).collect();
    let (ll, _, lq) = m.elbo_terms(&batch);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_z: f64 = 0.0;
    for b in 0..batch.len() {
        let q: Vec<f64> = lq[b].iter().map(|x| x.exp()).collect();
        let exact: f64 = q.iter().zip(&ll[b]).map(|(q, l)| q * l).sum();
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..MC_SAMPLES {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut z = q.len() - 1;
            for (i, p) in q.iter().enumerate() {
                acc += p;
                if u < acc {
                    z = i;
                    break;
                }
            }
            s += ll[b][z];
            s2 += ll[b][z] * ll[b][z];
        }
        let n = MC_SAMPLES as f64;
        let mean = s / n;
        let se = ((s2 / n - mean * mean).max(0.0) / n).sqrt().max(1e-12);
        let zscore = (mean - exact).abs() / se;
        ensure(zscore <= MC_SE_FACTOR, || format!("MC {mean} vs enumerated {exact}, {zscore:.2} SE"))?;
        worst_z = worst_z.max(zscore);
    }

    let w = ws
        .iter()
        .find(|w| w.input.neighbors.len() >= 3)
        .ok_or("no window with 3 neighbors")?;
    let mut rev = w.input.clone();
    rev.neighbors.reverse();
    let mut rot = w.input.clone();
    rot.neighbors.rotate_left(1);
    let (base_prior, _) = m.latent_distributions(&[&w.input], None);
    let base_pred = m.predict_distribution(&[&w.input]);
    let mut max_diff: f64 = 0.0;
    for other in [&rev, &rot] {
        let (p, _) = m.latent_distributions(&[other], None);
        for (a, b) in p[0].probs.iter().zip(&base_prior[0].probs) {
            max_diff = max_diff.max((a - b).abs());
        }
        let pred = m.predict_distribution(&[other]);
        for (ma, mb) in pred[0].modes.iter().zip(&base_pred[0].modes) {
            for (ga, gb) in ma.iter().zip(mb) {
                max_diff = max_diff.max((ga.mean[0] - gb.mean[0]).abs()).max((ga.mean[1] - gb.mean[1]).abs());
            }
        }
    }
    ensure(max_diff <= PERMUTATION_TOL, || format!("permuted neighbors moved outputs by {max_diff:e}"))?;
    let _ = sc;
    Ok(format!(
        "25 modes, weights equal prior, MC within {worst_z:.2} SE, permutation diff {max_diff:.1e}"
    ))
}

// ---- criterion 6: desk-scale training ----

const DESK_CLUSTERS: [&str; 2] = ["T on EBT", "L on NBL"];
const DESK_TRAJECTORIES: usize = 50;
/// Grid steps between window anchors (10 s).
const DESK_STRIDE: usize = 40;
const DESK_SEED: u64 = 1;

fn desk_config() -> ModelConfig {
    ModelConfig {
        history_hidden: 16,
        edge_hidden: 16,
        future_hidden: 16,
        decoder_hidden: 32,
        position_hidden: 16,
        position_dim: 8,
        encoding_dim: 32,
        attention_dim: 16,
        ..ModelConfig::default()
    }
}

fn desk_windows(config: &ModelConfig) -> Result<Vec<Window>, String> {
    let sc = Scenario::testbed();
    let sim = SimConfig {
        duration: 600.0,
        seed: DESK_SEED,
        arrival_rates: DESK_CLUSTERS.iter().map(|c| (c.to_string(), 300.0)).collect::<BTreeMap<_, _>>(),
        ..SimConfig::default()
    };
    let out = microsim::run(&sim, &sc.geometry, &sc.plan).map_err(|e| e.to_string())?;
    let ids: Vec<VehicleId> = out.log.trajectories.iter().map(|t| t.vehicle_id).take(DESK_TRAJECTORIES).collect();
    ensure(ids.len() == DESK_TRAJECTORIES, || format!("only {} trajectories", ids.len()))?;
    let kept: Vec<Trajectory> = out
        .log
        .trajectories
        .iter()
        .filter(|t| ids.contains(&t.vehicle_id))
        .cloned()
        .collect();
    let log = TrajectoryLog::new(out.log.dt, kept);
    build_windows(&log, &out.timeline, &sc.geometry, config, DESK_STRIDE).map_err(|e| e.to_string())
}

fn criterion_6() -> Outcome {
    let cfg = desk_config();
    let ws = desk_windows(&cfg)?;
    let ids = Scenario::testbed().geometry.cluster_ids();
    let tc = TrainConfig {
        epochs: 200,
        batch_size: 32,
        seed: DESK_SEED,
        ..TrainConfig::default()
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let a = pool.install(|| train(&ws, &cfg, ids.clone(), &tc)).map_err(|e| e.to_string())?;
    let el = start.elapsed();
    let b = pool.install(|| train(&ws, &cfg, ids.clone(), &tc)).map_err(|e| e.to_string())?;
    ensure(a.curve == b.curve && a.model.params == b.model.params, || "two runs with one seed differ".into())?;
    let (first, last) = (a.curve[0], *a.curve.last().unwrap());
    let ratio = last / first;
    ensure(first > 0.0 && ratio <= TRAIN_LOSS_RATIO, || {
        format!("loss {first:.4} -> {last:.4}, ratio {ratio:.3} > {TRAIN_LOSS_RATIO}")
    })?;
    within(el, BUDGET_TRAINING)?;
    Ok(format!(
        "{} windows, loss {first:.4} -> {last:.4} (ratio {ratio:.3}), repeatable, one run {el:.2?}",
        ws.len()
    ))
}

// ---- criteria 7 and 8: closed loop and report ----

fn criterion_7_and_8() -> (Outcome, Outcome) {
    let sc = Scenario::testbed();
    let model = ModelConfig::default();
    let run = RunConfig {
        duration: 300.0,
        total_vph: 1000.0,
        seed: 3,
        ..RunConfig::default()
    };
    let det = DetectorConfig::default();
    let go = || -> Result<_, String> {
        let sim = sim_config_for(&run, &sc.geometry, model.dt).map_err(|e| e.to_string())?;
        let gt = microsim::run(&sim, &sc.geometry, &sc.plan).map_err(|e| e.to_string())?;
        let cv = ConstantVelocity { dt: model.dt };
        let cvb = closed_loop_unroll(&sc, &sim, &cv, &model, &run, &det).map_err(|e| e.to_string())?;
        let replay = ReplayPredictor::new(&gt.log, model.dt);
        let rb = closed_loop_unroll(&sc, &sim, &replay, &model, &run, &det).map_err(|e| e.to_string())?;
        Ok((cvb, rb))
    };
    let (cvb, rb) = match go() {
        Ok(x) => x,
        Err(e) => return (Err(e.clone()), Err(e)),
    };
    let c7 = (|| {
        let cvt = &cvb.audit.report.totals;
        ensure(cvt.red_light >= 1, || "constant velocity ran no red light".into())?;
        let rt = &rb.audit.report.totals;
        let d = &rb.displacement;
        ensure(
            (rt.red_light, rt.mid_stop, rt.pre_stopbar) == (0, 0, 0),
            || format!("replay violations red {} mid {} pre {}", rt.red_light, rt.mid_stop, rt.pre_stopbar),
        )?;
        ensure(d.count > 0 && d.ade == 0.0 && d.fde == 0.0, || format!("replay ADE {} FDE {}", d.ade, d.fde))?;
        ensure(rb.diagnostics.is_clean(), || rb.diagnostics.to_text())?;
        Ok(format!(
            "constant velocity {} red-light of {}; replay 0 violations, ADE 0, FDE 0 over {} windows",
            cvt.red_light, cvt.total, d.count
        ))
    })();
    let c8 = (|| {
        let r = &cvb.audit.report;
        let want = sc.geometry.cluster_ids();
        let got: Vec<String> = r.rows.iter().map(|r| r.cluster.clone()).collect();
        ensure(got.len() == 11 && got == want, || format!("rows {got:?}"))?;
        ensure(got.first().map(String::as_str) == Some("L on EBL"), || "first row".into())?;
        ensure(got.last().map(String::as_str) == Some("T on WBTR"), || "last row".into())?;
        let t = &r.totals;
        let table = r.to_table();
        let last = table.lines().find(|l| l.starts_with("Total")).unwrap_or_default();
        ensure(last.starts_with("Total"), || format!("totals line {last:?}"))?;
        for (count, name) in [(t.red_light, "red"), (t.mid_stop, "mid"), (t.pre_stopbar, "pre")] {
            let cell = count_cell(count, t.total);
            let pct = cell.split(['(', '%']).nth(1).unwrap_or_default();
            let decimals = pct.split('.').nth(1).map(str::len);
            ensure(decimals == Some(1), || format!("{name} cell {cell:?}"))?;
            ensure(last.contains(&cell), || format!("{name} cell {cell:?} missing from {last:?}"))?;
        }
        Ok(format!("11 rows in cluster order, totals \"{}\"", last.split_whitespace().collect::<Vec<_>>().join(" ")))
    })();
    (c7, c8)
}

fn main() -> ExitCode {
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let want = |n: usize| only.is_empty() || only.contains(&n);
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let runs: [(usize, fn() -> Outcome); 6] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
    ];
    for (n, f) in runs {
        if want(n) {
            let r = f();
            report(n, &r);
            results.push((n, r));
        }
    }
    if want(7) || want(8) {
        let (c7, c8) = criterion_7_and_8();
        for (n, r) in [(7, c7), (8, c8)] {
            if want(n) {
                report(n, &r);
                results.push((n, r));
            }
        }
    }
    let failed = results.iter().filter(|(_, r)| r.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn report(n: usize, r: &Outcome) {
    match r {
        Ok(msg) => println!("PASS criterion {n}: {msg}"),
        Err(msg) => println!("FAIL criterion {n}: {msg}"),
    }
}
