//! Times one forward pass per resolution with random weights.

use std::time::Instant;

use mnv2::{MobileNetV2, Tensor};

fn main() -> mnv2::Result<()> {
    let model = MobileNetV2::random(11, 0)?;
    for s in [32, 64, 128, 224, 256] {
        let x = Tensor::full([1, 3, s, s], 0.5);
        model.forward(&x)?;
        let t = Instant::now();
        let iters = 3;
        for _ in 0..iters {
            model.forward(&x)?;
        }
        let per = t.elapsed().as_secs_f64() / iters as f64;
        println!("S={s:4}  {:8.2} ms/img  {:8.1} img/s", per * 1e3, 1.0 / per);
    }
    Ok(())
}
