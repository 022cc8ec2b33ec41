// scratch harness: sweep lr and sizes to pick overfit-test settings
use dualshot::config::{DenseContextConfig, DetectorConfig};
use dualshot::dataio::{generate_synthetic_dataset, parse_wider_annotations, SizeDistribution, SyntheticSpec};
use dualshot::training::{train, TrainDataset};

fn overfit_cfg(lr: f64, crop: u32, iters: u64, batch: usize) -> DetectorConfig {
    let mut cfg = DetectorConfig::desk();
    cfg.sampler.crop_size = crop;
    cfg.sampler.anchor_sizes = vec![8.0, 16.0, 32.0, 64.0];
    cfg.network.strides = vec![2, 4, 8, 16];
    cfg.network.channels = vec![8, 12, 16, 16];
    cfg.network.lfpn_levels = 2;
    cfg.network.dense = DenseContextConfig { stages: 2, growth_channels: 6, projection_channels: 12 };
    cfg.optim.batch_size = batch;
    cfg.optim.scale = 1;
    cfg.optim.total_iters = iters;
    cfg.optim.warmup_iters = iters / 10;
    cfg.optim.decay_iters = vec![iters * 2 / 3, iters * 5 / 6];
    cfg.optim.lr_peak = lr;
    cfg.optim.checkpoint_every = 100000;
    cfg.validate().unwrap();
    cfg
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-2);
    let iters: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(400);
    let crop: u32 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(96);
    let batch: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(2);

    let cfg = overfit_cfg(lr, crop, iters, batch);
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        n_images: 8,
        image_size: crop + crop / 2,
        faces_per_image: 2,
        sizes: SizeDistribution::LogUniform { lo: 12.0, hi: 48.0 },
        seed: 21,
    };
    let ds = generate_synthetic_dataset(&spec, dir.path()).unwrap();
    let records = parse_wider_annotations(std::io::Cursor::new(
        std::fs::read_to_string(&ds.annotation_file).unwrap(),
    ))
    .unwrap();
    let dataset = TrainDataset::load(dir.path(), &records).unwrap();

    let t0 = std::time::Instant::now();
    let out = tempfile::tempdir().unwrap();
    let outcome = train(&dataset, &cfg, out.path()).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let window = |a: usize, b: usize| -> f64 {
        outcome.records[a..b].iter().map(|r| r.report.total).sum::<f64>() / (b - a) as f64
    };
    let n = outcome.records.len();
    println!(
        "lr={lr} iters={iters} crop={crop} batch={batch}: {:.1}s ({:.0} ms/iter)",
        secs,
        1000.0 * secs / n as f64
    );
    for w in 0..8 {
        let a = w * n / 8;
        let b = (w + 1) * n / 8;
        let avg = |f: &dyn Fn(&dualshot::losses::LossReport) -> f64| -> f64 {
            outcome.records[a..b].iter().map(|r| f(&r.report)).sum::<f64>() / (b - a) as f64
        };
        println!(
            "  window {w}: total {:.3} | cls1 {:.3} cls2 {:.3} reg1 {:.3} reg2 {:.3} seg {:.3} af {:.3} pos2 {:.1}",
            window(a, b),
            avg(&|r| r.cls_first),
            avg(&|r| r.cls_second),
            avg(&|r| r.reg_first),
            avg(&|r| r.reg_second),
            avg(&|r| r.seg),
            avg(&|r| r.anchor_free),
            outcome.records[a..b].iter().map(|r| r.report.positives_second as f64).sum::<f64>() / (b - a) as f64,
        );
    }
}
