// temp timing probe
use posemirror::data::{generate_synthetic_sample, SynthConfig};
use posemirror::nets::{Model, NetConfig};
use posemirror::objectives::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let config = NetConfig::toy();
    let model: Model<f32> = Model::init(&config, 1).unwrap();
    let synth = SynthConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let samples: Vec<_> = (0..16).map(|i| generate_synthetic_sample(i, &synth).unwrap()).collect();
    let items: Vec<_> = samples.iter().map(|s| {
        let image = s.image.clone().into_dyn();
        let pose = s.heatmaps(16, 16).unwrap();
        let noise = SampleNoise::<f32>::draw(&config, &mut rng);
        (image, pose, noise)
    }).collect();

    for (name, kind, trainable) in [
        ("recognizer", ObjectiveKind::RecognizerLoss, [true,false,false,false,false,false,false]),
        ("pose_vae", ObjectiveKind::PoseVae, [false,false,false,true,false,true,false]),
        ("image_vae", ObjectiveKind::ImageVae, [false,true,true,false,true,false,false]),
        ("supervised_l", ObjectiveKind::SupervisedLambda(0.01), [true,true,true,true,true,true,false]),
        ("unsupervised", ObjectiveKind::Unsupervised, [true,true,true,true,true,true,false]),
    ] {
        let t0 = Instant::now();
        use rayon::prelude::*;
        let n: usize = items.par_iter().map(|(im, pose, noise)| {
            let pose_opt = if matches!(kind, ObjectiveKind::Unsupervised) { None } else { Some(pose) };
            let e = evaluate_objective(&model, kind, Some(im), pose_opt, noise, trainable, true, false).unwrap();
            e.grads.map(|g| g.len()).unwrap_or(0)
        }).sum();
        let dt = t0.elapsed();
        println!("{name}: batch16 fwd+bwd in {:.3}s ({n})", dt.as_secs_f64());
    }
}
