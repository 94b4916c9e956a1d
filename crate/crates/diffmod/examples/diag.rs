// temporary diagnostic: what does the trained model predict at inference?
use diffmod::config::RunConfig;
use diffmod::features::{compute_feature_field, frame_window};
use diffmod::model::{init_points, DiffModParams};
use diffmod::numerics::tape::Tape;
use diffmod::pipeline::optimizer::Adam;
use diffmod::pipeline::train::train_step;
use diffmod::scenegen::generate_scene;

fn main() {
    let iters: usize = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(150);
    let mut cfg = RunConfig::default();
    cfg.seed = 1;
    cfg.train.warmup_iters = 50;
    cfg.train.batch_size = 2;
    cfg.resolve();
    let mut train_scenes = Vec::new();
    for i in 0..8 {
        let mut sc = cfg.scene.clone();
        sc.seed = diffmod::numerics::init::derive_seed_index(cfg.dataset_seed(), i as u64);
        train_scenes.push(generate_scene(&sc).unwrap());
    }
    let mut model = DiffModParams::new(cfg.model.clone()).unwrap();
    let mut opt = Adam::new(&model.parameters());
    for it in 0..iters {
        let e = train_step(&mut model, &train_scenes, &cfg.train, &mut opt, it).unwrap();
        if it % 25 == 0 {
            eprintln!("iter {it}: loss {:.3}", e.total);
        }
    }

    // Inference probe on a held-out scene
    let mut sc = cfg.scene.clone();
    sc.seed = 999;
    let scene = generate_scene(&sc).unwrap();
    let t = 5;
    let window = frame_window(&scene.frames, t);
    let field = compute_feature_field(&window, t).unwrap();
    let pts = init_points(500, 128, 128, 7);
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let grid = model.region_grid(128, 128);
    let hidden = model.initial_hidden(&mut tape, &vars, &grid).unwrap();
    let (outs, _) = model.forward_frame(&mut tape, &vars, &field, &pts, hidden, None).unwrap();

    let centers = scene.visible_centers(t);
    eprintln!(
        "targets at frame {t}: {:?}",
        centers.iter().map(|c| (c.0 as i32, c.1 as i32)).collect::<Vec<_>>()
    );
    for (li, out) in outs.iter().enumerate() {
        let probs = tape.value(out.probs);
        let coords = tape.value(out.coords);
        let inputs = tape.value(out.input_coords);
        let mut sorted: Vec<f64> = probs.to_vec();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let n_above: usize = probs.iter().filter(|p| **p >= 0.5).count();
        let mean_off: f64 = (0..500)
            .map(|i| {
                ((coords[i * 2] - inputs[i * 2]).powi(2)
                    + (coords[i * 2 + 1] - inputs[i * 2 + 1]).powi(2))
                .sqrt()
            })
            .sum::<f64>()
            / 500.0;
        let nearest: Vec<f64> = centers
            .iter()
            .map(|&(gx, gy, _)| {
                (0..500)
                    .map(|i| {
                        ((coords[i * 2] - gx).powi(2) + (coords[i * 2 + 1] - gy).powi(2)).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let near_probs: Vec<f64> = centers
            .iter()
            .map(|&(gx, gy, _)| {
                let mut bi = 0;
                let mut bd = f64::INFINITY;
                for i in 0..500 {
                    let d = ((coords[i * 2] - gx).powi(2) + (coords[i * 2 + 1] - gy).powi(2)).sqrt();
                    if d < bd {
                        bd = d;
                        bi = i;
                    }
                }
                probs[bi]
            })
            .collect();
        eprintln!(
            "level {}: top5 P {:?} | #P>=0.5 {} | mean|off| {:.3} | nearest dists {:?} | near P {:?}",
            li + 1,
            &sorted[..5].iter().map(|p| (p * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            n_above,
            mean_off,
            nearest.iter().map(|d| (d * 10.0).round() / 10.0).collect::<Vec<_>>(),
            near_probs.iter().map(|p| (p * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
        );
    }
}
