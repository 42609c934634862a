use std::time::Instant;

use arising_core::ising::{sample_dataset, ThermalParams};
use arising_core::models::{ArModel, DatasetProvenance, ModelKind, SequenceDataset};
use arising_core::paths::{PathKind, PathOrdering};
use arising_core::training::{train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let l: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(8);
    let n: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2000);
    let epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(40);
    let batch: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(16);
    let kind = match args.get(5).map(|s| s.as_str()).unwrap_or("transformer") {
        "rnn" => ModelKind::Rnn,
        _ => ModelKind::Transformer,
    };
    let path_kind: PathKind = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(PathKind::Zigzag);
    let beta = 0.435;

    let t0 = Instant::now();
    let params = ThermalParams::new(l, beta, n, 12345);
    let batch_data = sample_dataset(&params).unwrap();
    eprintln!("sampling {n} configs at L={l}: {:.1?} (E/site {:.4}, |m| {:.4})",
        t0.elapsed(), batch_data.stats.energy_per_site, batch_data.stats.abs_magnetization);

    let path = PathOrdering::new(path_kind, l).unwrap();
    let data = SequenceDataset::from_configs(&batch_data.configs, &path, beta,
        DatasetProvenance { seed: 12345, algorithm: "hybrid".into() });

    let mut model = ArModel::new(kind, l * l, 7);
    let mut cfg = TrainConfig::new(epochs, 99);
    cfg.batch_size = batch;
    cfg.n_model_samples = 2000;
    cfg.checkpoint_epochs = vec![1, 2, 4, 8, 16, 32];
    let t1 = Instant::now();
    let trace = train(&mut model, &data, &path, &cfg).unwrap();
    let dt = t1.elapsed().as_secs_f64();
    eprintln!("train {epochs} epochs: {dt:.1}s ({:.2} s/epoch)", dt / epochs as f64);
    for e in &trace.epochs {
        {
            println!("epoch {:4}  train {:.4}  val {:.4}  (per site {:.5})",
                e.epoch, e.train_nll, e.val_nll, e.val_nll / (l * l) as f64);
        }
    }
    for c in &trace.checkpoints {
        println!("checkpoint {:4}: anisotropy {:.4}  G(1,0) {:.4}  G(0,1) {:.4}  G(2,0) {:.4}  G(0,2) {:.4}",
            c.epoch, c.anisotropy, c.correlation.g(1, 0), c.correlation.g(0, 1),
            c.correlation.g(2, 0), c.correlation.g(0, 2));
    }
}
