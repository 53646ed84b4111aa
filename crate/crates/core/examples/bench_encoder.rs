use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sitar::encoder::{Encoder, EncoderSpec, ImageBatch, ReferenceEncoder};
use sitar::linalg::Matrix;

fn main() {
    let mut spec = EncoderSpec::desk(8);
    if let Some(p) = std::env::args().nth(1) { spec.patch_size = p.parse().unwrap(); }
    if let Some(w) = std::env::args().nth(2) { spec.width = w.parse().unwrap(); }
    if let Some(v) = std::env::args().nth(3) { spec.stem_patch = v.parse().unwrap(); }
    if let Some(v) = std::env::args().nth(4) { spec.stem_width = v.parse().unwrap(); }
    let model = ReferenceEncoder::new(spec.clone(), 0).unwrap();
    println!("params: {}", model.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 72;
    let side = spec.input_side;
    let data: Vec<f64> = (0..n * side * side * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let batch = ImageBatch::from_raw(n, side, data);
    for _ in 0..3 {
        let t = Instant::now();
        let plan = model.sample_drop_plan(n, &mut rng);
        let (logits, cache) = model.forward(&batch, &plan).unwrap();
        let t1 = t.elapsed();
        let g = model.backward(&cache, &Matrix::from_vec(n, 8, vec![0.01; n * 8]));
        let t2 = t.elapsed();
        println!("fwd {:?} total {:?} per image {:?} ({} {})", t1, t2, t2 / n as u32, logits.rows, g.len());
    }
}
