// Scratch probe for tuning the synthetic task (not part of the deliverable).

use std::time::Instant;

use tlora_core::adapters::{attach_adapters, AdapterConfig, Method};
use tlora_core::data::{build_vocab, gen_synthetic, EncodedDataset, SynthSpec};
use tlora_core::model::{build_model, ModelConfig};
use tlora_core::train::{evaluate, train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let method = if args.get(1).map(String::as_str) == Some("lora") {
        Method::Lora
    } else {
        Method::Tlora
    };
    let ntrain: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(192);
    let seq_len: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(5);
    let epochs: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(150);
    let dropout: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let seed: u64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(42);
    let vocab_size: usize = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(32);
    let data_seed: u64 = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(seed);

    let spec = SynthSpec::new(ntrain, vocab_size, seq_len, data_seed);
    let (train_ex, val_ex) = gen_synthetic(&spec).unwrap();
    let vocab = build_vocab(&train_ex, 64).unwrap();
    let mcfg = ModelConfig::toy(vocab.len());
    let mut m = build_model(&mcfg, seed).unwrap();
    m.freeze_all();
    let mut acfg = AdapterConfig::new(method);
    acfg.rank = 8;
    acfg.dropout_p = dropout;
    let mut model = attach_adapters(m, &acfg, seed).unwrap();
    let train_data = EncodedDataset::encode(&vocab, &train_ex, 32, 2).unwrap();
    let val_data = EncodedDataset::encode(&vocab, &val_ex, 32, 2).unwrap();

    let mut cfg = TrainConfig::new(seed);
    cfg.epochs = epochs;

    let t0 = Instant::now();
    let run = train(&mut model, &train_data, &val_data, &cfg, None).unwrap();
    let dt = t0.elapsed();

    let train_eval = evaluate(&model, &train_data, cfg.batch_size).unwrap();
    let val_eval = evaluate(&model, &val_data, cfg.batch_size).unwrap();
    println!(
        "{method:?} ntrain={ntrain} seq={seq_len} epochs={epochs} p={dropout} seed={seed}: \
         train_acc={:.3} val_acc={:.3} final_train_loss={:.4} val_loss={:.4} [{:.1}s]",
        train_eval.accuracy,
        val_eval.accuracy,
        run.snapshots.last().unwrap().train_loss,
        val_eval.loss,
        dt.as_secs_f64()
    );
    // Epoch trajectory every 10.
    for s in run.snapshots.iter().step_by(10) {
        println!(
            "  epoch {:>3}: train_loss={:.4} val_loss={:.4} val_acc={:.3}",
            s.epoch, s.train_loss, s.val_loss, s.val_acc
        );
    }
}
