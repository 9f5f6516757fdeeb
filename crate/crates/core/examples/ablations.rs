//! Trains every model variant for a few steps on the default dataset and
//! prints the loss trajectory and validation co-bps of each.
//!
//! ```text
//! cargo run --release --example ablations -- [steps]
//! ```

use langevinflow::data::{make_dataset, LorenzConfig};
use langevinflow::metrics::co_smoothing;
use langevinflow::model::{LangevinFlow, ModelConfig, Variant};
use langevinflow::train::{TrainConfig, Trainer};

fn main() -> langevinflow::Result<()> {
    let steps: usize = std::env::args().nth(1).map_or(20, |s| s.parse().expect("steps"));
    let data = make_dataset(&LorenzConfig::default())?;
    let idx: Vec<usize> = (0..16).collect();
    for variant in Variant::ALL {
        let model = LangevinFlow::new(ModelConfig { variant, ..ModelConfig::default() })?;
        let n_params = model.n_params();
        let mut trainer = Trainer::new(model, TrainConfig::default())?;
        trainer.model.init_readout_bias(&data.train);
        let losses = (0..steps)
            .map(|_| trainer.train_step(&data.train, &idx).map(|r| r.parts.nll))
            .collect::<langevinflow::Result<Vec<_>>>()?;
        println!(
            "{:<28} {:>6} params  nll {:8.2} -> {:8.2}  val co-bps {:.4}",
            variant.name(),
            n_params,
            losses[0],
            losses[steps - 1],
            co_smoothing(&trainer.model, &data.val)?
        );
    }
    Ok(())
}
