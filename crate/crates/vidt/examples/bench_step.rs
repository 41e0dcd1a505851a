use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use vidt::losses::{detection_loss, BoxSet, ClsMode, LossWeights};
use vidt::model::{ModelConfig, VidtModel};
use vidt::nn::Fwd;
use vidt::tensor::Tape;

fn main() {
    let mut r = ChaCha20Rng::seed_from_u64(1);
    let cfg = ModelConfig::default();
    let model = VidtModel::new(cfg, &mut r).unwrap();
    let img_data: Vec<f64> = (0..64 * 64 * 3).map(|_| r.gen_range(0.0..1.0)).collect();
    let gt = BoxSet { boxes: vec![0.3, 0.3, 0.2, 0.2, 0.7, 0.6, 0.2, 0.3], labels: vec![0, 2] };
    let w = LossWeights::default();
    let step = || {
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape);
        let img = tape.constant(img_data.clone(), &[64, 64, 3]).unwrap();
        let mut r2 = ChaCha20Rng::seed_from_u64(0);
        let mut fx = Fwd::new(&mut tape, &bound, &mut r2, 0.0);
        let out = model.forward_on(&mut fx, img, 0).unwrap();
        let loss = detection_loss(&mut tape, &out.layers, &gt, &w, ClsMode::Focal, 3).unwrap();
        tape.backward(loss).unwrap();
        std::hint::black_box(tape.grad(bound.get(model.backbone.embed.proj.w)));
    };
    for _ in 0..20 { step(); }
    let start = std::time::Instant::now();
    let n = 200;
    for _ in 0..n { step(); }
    println!("fwd+loss+bwd steady state: {:.2} ms", start.elapsed().as_secs_f64() * 1000.0 / n as f64);
}
