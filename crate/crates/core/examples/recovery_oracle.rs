//! Runs the two-stage fit over seeded synthetic scenes and prints per-scene
//! aligned errors. Usage: recovery_oracle <noise_px> <occlusion> [count] [variant]

use mvpose::fitting::{run_two_stage, FitConfig};
use mvpose::metrics::pa_mpjpe;
use mvpose::synth::{apply_variant, generate_scene, AblationVariant, SceneConfig};
use mvpose::toy::toy_model;
use nalgebra::Vector3;

fn mm(v: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    v.iter().map(|p| p * 1000.0).collect()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let noise: f64 = args.get(1).map_or(0.0, |s| s.parse().unwrap());
    let occlusion: f64 = args.get(2).map_or(0.0, |s| s.parse().unwrap());
    let count: u64 = args.get(3).map_or(20, |s| s.parse().unwrap());
    let variant: AblationVariant = args
        .get(4)
        .map_or(AblationVariant::AllViews, |s| s.parse().unwrap());
    let model = toy_model();
    let cfg = FitConfig::default();
    let (mut sum2, mut sum1) = (0.0, 0.0);
    for seed in 0..count {
        let scene = generate_scene(
            &model,
            &SceneConfig {
                seed,
                pixel_noise_std: noise,
                occlusion_rate: occlusion,
                ..SceneConfig::default()
            },
        )
        .unwrap();
        let scene = apply_variant(&scene, variant, cfg.lambda).unwrap();
        let t0 = std::time::Instant::now();
        let res = run_two_stage(
            &model,
            &scene.intrinsics(),
            &scene.filtered(cfg.lambda),
            &cfg,
        )
        .unwrap();
        let fit = &res.stage_two;
        let r = fit.reference_view;
        let pred: Vec<_> = fit
            .keypoints
            .iter()
            .map(|k| k + fit.params.translations[r])
            .collect();
        let pa2 = pa_mpjpe(&mm(&pred), &mm(&scene.ground_truth_camera(r).unwrap())).unwrap();
        let v = res.screened.view;
        let s1 = &res.stage_one.views[v];
        let pred1: Vec<_> = model
            .keypoints_of(&s1.params)
            .unwrap()
            .iter()
            .map(|k| k + s1.translation)
            .collect();
        let pa1 = pa_mpjpe(&mm(&pred1), &mm(&scene.ground_truth_camera(v).unwrap())).unwrap();
        sum2 += pa2;
        sum1 += pa1;
        println!(
            "seed {seed:2} loss {:.3e} pa2 {pa2:8.3} pa1 {pa1:8.3} rounds {} iters {:?} {:.2}s",
            fit.loss_2d,
            fit.rounds.len(),
            fit.rounds.iter().map(|d| d.iterations).collect::<Vec<_>>(),
            t0.elapsed().as_secs_f64()
        );
    }
    println!(
        "mean pa2 {:.3} pa1 {:.3}",
        sum2 / count as f64,
        sum1 / count as f64
    );
}
