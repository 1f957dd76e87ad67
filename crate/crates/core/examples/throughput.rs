//! Measures train-step throughput of the generator at a given size.
//!
//! usage: throughput [size] [c1,c2,c3] [res_blocks] [batch] [steps]

use std::time::Instant;

use tta_inpaint::generator::{Architecture, GeneratorParams};
use tta_inpaint::tensor::Tensor;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let size: usize = args.get(1).map_or(256, |s| s.parse().unwrap());
    let widths: Vec<usize> = args
        .get(2)
        .map_or("16,32,64".to_string(), |s| s.clone())
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    let blocks: usize = args.get(3).map_or(8, |s| s.parse().unwrap());
    let batch: usize = args.get(4).map_or(2, |s| s.parse().unwrap());
    let steps: usize = args.get(5).map_or(5, |s| s.parse().unwrap());
    let arch = Architecture::reduced([widths[0], widths[1], widths[2]], blocks);
    let mut params = GeneratorParams::init(arch, 0).unwrap();
    let input = Tensor::from_vec(
        batch,
        4,
        size,
        size,
        (0..batch * 4 * size * size).map(|i| (i % 17) as f32 / 17.0).collect(),
    )
    .unwrap();
    let start = Instant::now();
    for _ in 0..steps {
        let (out, tape) = params.forward_train(&input).unwrap();
        let _ = params.backward(&tape, &out).unwrap();
    }
    let per = start.elapsed().as_secs_f64() / steps as f64;
    println!("{size}px {arch:?} batch {batch}: {:.1} ms/step", per * 1e3);
}
