//! Scratch calibration harness (temporary).

use dml::data::Dataset;
use dml::losses::LabelBatch;
use dml::tensor::Tensor;
use dml::trainer::{train, CohortConfig, MemberSpec, Mode, TrainOutcome};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn mix(parts: &[u64]) -> u64 {
    let mut h = 0x9E3779B97F4A7C15u64;
    for &p in parts {
        h ^= p.wrapping_mul(0xBF58476D1CE4E5B9).rotate_left(31);
        h = h.wrapping_mul(0x94D049BB133111EB);
    }
    h
}

fn spiral(
    turn: f64,
    noise: f64,
    n_train: usize,
    n_test: usize,
    classes: usize,
    seed: u64,
    standardize: bool,
) -> Dataset {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..classes {
        let per = (n_train + n_test) / classes;
        let tr = n_train / classes;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, c as u64]));
        let mut pts: Vec<(f64, f64)> = (0..per)
            .map(|i| {
                let frac = (i as f64 + 0.5) / per as f64;
                let r = 0.08 + 0.92 * frac;
                let eps: f64 = StandardNormal.sample(&mut rng);
                let th = std::f64::consts::TAU * c as f64 / classes as f64 + frac * turn + noise * eps;
                (r * th.cos(), r * th.sin())
            })
            .collect();
        // split shuffle
        for i in (1..pts.len()).rev() {
            let j = rng.gen_range(0..=i);
            pts.swap(i, j);
        }
        for (i, p) in pts.into_iter().enumerate() {
            if i < tr {
                train.push((p, c));
            } else {
                test.push((p, c));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, 1000]));
    for v in [&mut train, &mut test] {
        for i in (1..v.len()).rev() {
            let j = rng.gen_range(0..=i);
            v.swap(i, j);
        }
    }
    let pack = |pts: &[((f64, f64), usize)]| {
        let xs: Vec<f64> = pts.iter().flat_map(|((x, y), _)| [*x, *y]).collect();
        let ys: Vec<usize> = pts.iter().map(|(_, c)| *c).collect();
        (xs, ys)
    };
    let (mut train_xs, train_ys) = pack(&train);
    let (mut test_xs, test_ys) = pack(&test);
    if standardize {
        for d in 0..2 {
            let n = train_ys.len() as f64;
            let mean: f64 = train_xs.iter().skip(d).step_by(2).sum::<f64>() / n;
            let var: f64 = train_xs.iter().skip(d).step_by(2).map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let s = var.sqrt();
            for x in train_xs.iter_mut().skip(d).step_by(2) {
                *x = (*x - mean) / s;
            }
            for x in test_xs.iter_mut().skip(d).step_by(2) {
                *x = (*x - mean) / s;
            }
        }
    }
    let train_x = Tensor::matrix(train_ys.len(), 2, train_xs);
    let train_y = LabelBatch::new(train_ys, classes).unwrap();
    let test_x = Tensor::matrix(test_ys.len(), 2, test_xs);
    let test_y = LabelBatch::new(test_ys, classes).unwrap();
    Dataset {
        train_x,
        train_y,
        test_x,
        test_y,
        provenance: format!("cal turn={turn} noise={noise}"),
    }
}

fn summarize(o: &TrainOutcome, d: &Dataset) -> (f64, f64, f64) {
    let rows = o.report.final_rows();
    let test = rows.iter().map(|r| r.test_acc).sum::<f64>() / rows.len() as f64;
    let ent = rows.iter().map(|r| r.entropy).sum::<f64>() / rows.len() as f64;
    let train_acc = o
        .members
        .iter()
        .map(|p| dml::trainer::eval_metrics(p, &d.train_x, &d.train_y).unwrap().accuracy)
        .sum::<f64>()
        / o.members.len() as f64;
    (test, train_acc, ent)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let epochs: u32 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(200);
    let stdz = std::env::var("CAL_STD").map(|v| v == "1").unwrap_or(false);
    let turns: Vec<f64> = std::env::var("CAL_TURNS")
        .unwrap_or_else(|_| "8,11".into())
        .split(',')
        .map(|s| s.parse().unwrap())
        .collect();
    let noises: Vec<f64> = std::env::var("CAL_NOISES")
        .unwrap_or_else(|_| "0.2,0.4,0.6".into())
        .split(',')
        .map(|s| s.parse().unwrap())
        .collect();
    for &turn in &turns {
        for &noise in &noises {
            let dataset = spiral(turn, noise, 1500, 1500, 3, 7, stdz);
            let mut wins = 0;
            let mut sum_delta = 0.0;
            let mut line = String::new();
            for rep in 0..seeds {
                let base = CohortConfig {
                    members: vec![
                        MemberSpec::new(vec![64, 64], mix(&[rep, 1])),
                        MemberSpec::new(vec![64, 64], mix(&[rep, 2])),
                    ],
                    epochs,
                    data_seed: mix(&[rep, 99]),
                    ..CohortConfig::default()
                };
                let rule = if std::env::var("CAL_SIM").map(|v| v == "1").unwrap_or(false) {
                    dml::trainer::UpdateRule::Simultaneous
                } else {
                    dml::trainer::UpdateRule::RoundRobin
                };
                let indep = train(&CohortConfig { mode: Mode::Independent, ..base.clone() }, &dataset).unwrap();
                let dml_o = train(
                    &CohortConfig { mode: Mode::Dml, update_rule: rule, ..base.clone() },
                    &dataset,
                )
                .unwrap();
                let (ia, it, _ie) = summarize(&indep, &dataset);
                let (da, dt, _de) = summarize(&dml_o, &dataset);
                if da > ia {
                    wins += 1;
                }
                sum_delta += da - ia;
                line.push_str(&format!(" [i {ia:.3}/{it:.3} d {da:.3}/{dt:.3}]"));
            }
            println!(
                "turn {turn:>4} noise {noise:.1}: wins {wins}/{seeds} mean_delta {:+.4}{line}",
                sum_delta / seeds as f64
            );
        }
    }
}
