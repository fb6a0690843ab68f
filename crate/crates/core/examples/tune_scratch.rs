use tricomp_core::layer::{compress_toy, FpToyModel};
use tricomp_core::train::{train_toy, TextureStream, TrainConfig};

fn run(tag: &str, body: &[usize], amp: f64, hr: usize, cycles: f64) {
    let mut worst: f64 = 0.0;
    let t1 = std::time::Instant::now();
    let seeds: Vec<u64> = (0..10).map(|i| 7 * i + 5).collect();
    for &seed in &seeds {
        let teacher = FpToyModel::seeded(seed, 3, body, 4);
        let (mut student, _) = compress_toy(&teacher, 8, 2).unwrap();
        let mut stream = TextureStream::new(seed * 3 + 1, 3, hr, hr)
            .with_amplitude(amp)
            .with_max_cycles(cycles);
        let cfg = TrainConfig {
            learning_rate: 2e-5,
            iterations: 200,
            batch: 8,
            seed,
        };
        let trace = train_toy(&mut student, &teacher, &mut stream, &cfg).unwrap();
        let ratio = trace[199] / trace[0];
        worst = worst.max(ratio);
        print!(" {ratio:.2}");
    }
    println!("  <- {tag} (worst {worst:.3}, {:?})", t1.elapsed());
}

fn main() {
    run("[16;6] amp4 cyc3", &[16; 6], 4.0, 16, 3.0);
    run("[12;6] amp4 cyc3", &[12; 6], 4.0, 16, 3.0);
    run("[8;6]  amp4 cyc3", &[8; 6], 4.0, 16, 3.0);
    run("[16;8] amp4 cyc3", &[16; 8], 4.0, 16, 3.0);
    run("[12;8] amp4 cyc3", &[12; 8], 4.0, 16, 3.0);
}
