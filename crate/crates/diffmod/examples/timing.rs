// temporary experiment: convergence speed and achievable F1 at desk scale
use diffmod::config::RunConfig;
use diffmod::model::DiffModParams;
use diffmod::pipeline::eval::{evaluate, EvalConfig};
use diffmod::pipeline::optimizer::Adam;
use diffmod::pipeline::train::train_step;
use diffmod::scenegen::generate_scene;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(600);
    let n_train: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(16);
    let seed: u64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1);

    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.train.iterations = iters;
    cfg.train.warmup_iters = 100;
    cfg.train.decay_at = (iters * 4) / 5;
    cfg.resolve();
    cfg.validate().unwrap();

    let t0 = Instant::now();
    let mut train_scenes = Vec::new();
    for i in 0..n_train {
        let mut sc = cfg.scene.clone();
        sc.seed = diffmod::numerics::init::derive_seed_index(cfg.dataset_seed(), i as u64);
        train_scenes.push(generate_scene(&sc).unwrap());
    }
    let mut test_scenes = Vec::new();
    for i in 0..4 {
        let mut sc = cfg.scene.clone();
        sc.seed = diffmod::numerics::init::derive_seed_index(cfg.dataset_seed(), 10_000 + i as u64);
        test_scenes.push(generate_scene(&sc).unwrap());
    }
    eprintln!("scenes generated in {:?}", t0.elapsed());

    let mut model = DiffModParams::new(cfg.model.clone()).unwrap();
    let mut opt = Adam::new(&model.parameters());
    let eval_cfg = EvalConfig { d_eval: 5.0, seed: 2 };
    let t_train = Instant::now();
    for it in 0..iters {
        let entry = train_step(&mut model, &train_scenes, &cfg.train, &mut opt, it).unwrap();
        if it % 25 == 0 {
            eprintln!(
                "iter {it} ({:.0}s): loss {:.4} | lvl4 cls {:.4} reg {:.4} miss {:.4}",
                t_train.elapsed().as_secs_f64(),
                entry.total,
                entry.levels[3].cls,
                entry.levels[3].reg,
                entry.levels[3].miss
            );
        }
        if it > 0 && (it % 150 == 0 || it + 1 == iters) {
            let rep = evaluate(&model, &test_scenes, &eval_cfg).unwrap();
            eprintln!(
                ">>> iter {it}: Re {:.3} Pr {:.3} F1 {:.3} jitter {:.3}",
                rep.mean_recall, rep.mean_precision, rep.mean_f1, rep.mean_jitter
            );
        }
    }
    eprintln!("trained {iters} iters in {:?}", t_train.elapsed());
    let rep = evaluate(&model, &test_scenes, &eval_cfg).unwrap();
    for m in &rep.per_sequence {
        eprintln!(
            "seq {}: Re {:.3} Pr {:.3} F1 {:.3} tp {} fp {} fn {}",
            m.sequence, m.recall, m.precision, m.f1, m.tp, m.fp, m.fn_
        );
    }
    eprintln!(
        "FINAL: Re {:.3} Pr {:.3} F1 {:.3} jitter {:.3}",
        rep.mean_recall, rep.mean_precision, rep.mean_f1, rep.mean_jitter
    );
}
