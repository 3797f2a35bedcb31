// Scratch harness for training hyperparameters (not part of the deliverable).
use shapegrasp::cloud::{CanonicalObjectSample, Category};
use shapegrasp::gripper::GripperSpec;
use shapegrasp::labeler::{label_dense_grasps, LabelerParams};
use shapegrasp::loss::LossConfig;
use shapegrasp::model::{train, AeConfig};
use shapegrasp::shapes::{make_canonical_shape, ShapeParams};

fn main() {
    let spec = GripperSpec::default();
    let shape = ShapeParams::Can { radius: 0.3, height: 0.9 };
    let cloud = make_canonical_shape(&shape, 64, 7).unwrap();
    let labels = label_dense_grasps(&cloud, 0.12, &spec, &LabelerParams::default()).unwrap();
    let sample = CanonicalObjectSample { category: Category::Can, cloud, scale: 0.12, labels };

    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2000);
    let wide: bool = args.get(3).map(|s| s == "wide").unwrap_or(false);

    let cfg = AeConfig {
        n_points: 64,
        embed_dim: 16,
        encoder_widths: if wide { vec![64, 128] } else { vec![32, 64] },
        decoder_widths: if wide { vec![128, 256] } else { vec![64, 128] },
        epochs,
        batch_size: 1,
        learning_rate: lr,
        seed: 11,
        ..AeConfig::default()
    };
    let t0 = std::time::Instant::now();
    let (_, log) = train(&[sample], &cfg, &spec, &LossConfig::default()).unwrap();
    for e in log.epochs.iter().step_by(epochs / 10) {
        println!(
            "epoch {:5}  total {:.6}  chamfer {:.6}  gate {:.2}",
            e.epoch, e.mean_total, e.mean_chamfer, e.gate_open_fraction
        );
    }
    let last = log.epochs.last().unwrap();
    println!("final chamfer {:.8}  ({:?})", last.mean_chamfer, t0.elapsed());
}
