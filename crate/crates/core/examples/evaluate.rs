//! Scores rates on the validation split: the ground-truth rates as an
//! upper reference, then a briefly trained model.
//!
//! ```text
//! cargo run --release --example evaluate -- [epochs]
//! ```

use langevinflow::data::{make_dataset, LorenzConfig};
use langevinflow::metrics::{evaluate, evaluate_rates, DEFAULT_RIDGE_ALPHA};
use langevinflow::model::{LangevinFlow, ModelConfig};
use langevinflow::train::{TrainConfig, Trainer};

fn main() -> langevinflow::Result<()> {
    let epochs = std::env::args().nth(1).map_or(3, |s| s.parse().expect("epochs"));
    let data = make_dataset(&LorenzConfig::default())?;

    let truth: Vec<_> = data.val.iter().map(|t| t.rates.clone().expect("true rates")).collect();
    println!("## ground-truth rates\n{}", evaluate_rates(&truth, &data.val, DEFAULT_RIDGE_ALPHA)?.to_text());

    let mut trainer = Trainer::new(LangevinFlow::new(ModelConfig::default())?, TrainConfig { epochs, ..TrainConfig::default() })?;
    trainer.fit(&data.train, &data.val, None)?;
    let report = evaluate(trainer.best_model(), &data.val, DEFAULT_RIDGE_ALPHA)?;
    println!("## model after {epochs} epochs\n{}", report.to_text());
    println!("## per neuron\n{}", report.to_tsv());
    Ok(())
}
