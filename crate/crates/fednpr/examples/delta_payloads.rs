//! The round payload: exactly what leaves a client.
//!
//! Each round a client uploads its parameter delta (trained minus
//! downloaded) and its training sample count — never features, labels,
//! priors, or prototypes. This example serializes a round's deltas to the
//! versioned binary payload format, reads them back bit-exactly, and prints
//! the tensor inventory.
//!
//! Run with: `cargo run --example delta_payloads`

use fednpr::federation::{read_round_payload, write_round_payload, ModelDelta};
use fednpr::nn::{ModelConfig, ModelParams};
use fednpr::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let config = ModelConfig {
        input_dim: 8,
        hidden_dims: vec![16],
        feature_dim: 4,
        n_classes: 3,
    };

    // Two clients' deltas, faked here as differences of independent draws.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let deltas: Vec<ModelDelta> = (0..2)
        .map(|i| {
            let downloaded = ModelParams::init(&config, &mut rng);
            let trained = ModelParams::init(&config, &mut rng);
            ModelDelta {
                extractor: trained
                    .extractor
                    .iter()
                    .zip(&downloaded.extractor)
                    .map(|(t, d)| t.sub(d))
                    .collect(),
                classifier: trained.classifier.sub(&downloaded.classifier),
                sample_count: 100 * (i + 1),
            }
        })
        .collect();

    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("round_0001.bin");
    write_round_payload(&path, &deltas)?;
    let bytes = std::fs::metadata(&path)?.len();
    println!("wrote {} client deltas to {} ({bytes} bytes)\n", deltas.len(), path.display());

    let restored = read_round_payload(&path)?;
    for (i, (a, b)) in deltas.iter().zip(&restored).enumerate() {
        println!("client {i}: {} training samples", b.sample_count);
        for (l, layer) in b.extractor.iter().enumerate() {
            println!(
                "  extractor.{l}.weight {}x{}   extractor.{l}.bias {}",
                layer.weight.rows(),
                layer.weight.cols(),
                layer.bias.len()
            );
        }
        println!(
            "  classifier.weight  {}x{}   classifier.bias  {}",
            b.classifier.weight.rows(),
            b.classifier.weight.cols(),
            b.classifier.bias.len()
        );
        let identical = a.sample_count == b.sample_count
            && a.classifier == b.classifier
            && a.extractor == b.extractor;
        println!("  round-trip bit-identical: {identical}");
        assert!(identical);
    }
    Ok(())
}
