//! Train the baseline: LSTM encoder plus shallow decoder, fed raw sensor
//! windows with no recovery stage. Every pipeline step is spelled out here
//! at the library level; the run config in train_cs_shred automates the
//! same sequence.

use cs_shred::field::{
    extract_sequences, extract_targets, fit_scaler, place_sensors, split_dataset,
    train_time_rows, valid_locations, Normalization, EPS_VALID,
};
use cs_shred::metrics::evaluate;
use cs_shred::net::{init_params, FinalActivation, ModelSpec};
use cs_shred::synth::SyntheticSpec;
use cs_shred::train::{fit, LossWeights, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = 17;
    let field = cs_shred::synth::generate_synthetic(&SyntheticSpec {
        n_x: 16,
        n_y: 16,
        n_t: 160,
        n_modes: 2,
        seed,
        ..SyntheticSpec::default()
    })?;
    let (n_x, n_y, n_t) = field.dims();
    let lag = 16;

    // normalize on the rows the training windows can see, nothing later
    let scaler = fit_scaler(&field, train_time_rows(n_t, lag, 0.7), Normalization::MinMax)?;
    let normalized = scaler.apply_field(&field);

    // three sensors on locations that carry signal
    let valid = valid_locations(&normalized, EPS_VALID)?;
    let sensors = place_sensors(&valid, 3, seed)?;
    println!("sensors at flat indices {:?}", sensors.indices);

    let inputs = extract_sequences(&normalized, &sensors, lag)?;
    let targets = extract_targets(&normalized, lag)?;
    let (train_ds, val_ds, test_ds) =
        split_dataset(&inputs, &targets, &targets, None, lag, (0.7, 0.2))?;
    println!(
        "samples: {} train, {} val, {} test",
        train_ds.n_samples(),
        val_ds.n_samples(),
        test_ds.n_samples()
    );

    let spec = ModelSpec {
        input_dim: 3,
        hidden_size: 24,
        hidden_layers: 1,
        d1: 64,
        d2: 96,
        output_dim: n_x * n_y,
        split_input_weights: false,
        dropout: 0.0,
        final_activation: FinalActivation::Linear,
    };
    let tc = TrainConfig {
        epochs: 60,
        batch_size: 16,
        lr: 5e-3,
        seed,
        ..TrainConfig::default()
    };
    // plain mean squared error, the classic way to train this baseline
    let lw = LossWeights {
        lambda_l1: 0.0,
        lambda_snr: 0.0,
        ..LossWeights::default()
    };
    let result = fit(init_params(&spec, seed), &train_ds, &val_ds, None, &tc, &lw)?;
    println!(
        "best validation loss {:.4e} at epoch {}, stopped early: {}",
        result.best_val_loss, result.best_epoch, result.stopped_early
    );
    for rec in result.history.iter().step_by(10) {
        println!(
            "  epoch {:>3}: train {:.4e}, val {:.4e}, lr {:.1e}",
            rec.epoch, rec.train_loss, rec.val_loss, rec.lr
        );
    }

    let (report, _) = evaluate(&result.params, None, &test_ds, &scaler, n_x, n_y)?;
    print!("\n{}", report.to_text());
    Ok(())
}
