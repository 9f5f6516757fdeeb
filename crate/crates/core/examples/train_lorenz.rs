//! Trains the full model on the synthetic Lorenz dataset and reports
//! validation metrics against the ground-truth rates.
//!
//! ```text
//! cargo run --release --example train_lorenz -- [epochs] [out_dir]
//! ```

use langevinflow::data::{make_dataset, LorenzConfig};
use langevinflow::metrics::{evaluate, DEFAULT_RIDGE_ALPHA};
use langevinflow::model::{LangevinFlow, ModelConfig};
use langevinflow::train::{TrainConfig, Trainer};

fn main() -> langevinflow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(Ok(TrainConfig::default().epochs), |s| s.parse()).expect("epochs");
    let out = args.next().map(std::path::PathBuf::from);

    let data = make_dataset(&LorenzConfig::default())?;
    let model = LangevinFlow::new(ModelConfig::default())?;
    println!("{} parameters", model.n_params());
    let mut trainer = Trainer::new(model, TrainConfig { epochs, ..TrainConfig::default() })?;
    let start = std::time::Instant::now();
    trainer.fit(&data.train, &data.val, out.as_deref())?;
    println!("trained {} epochs in {:.1?}", trainer.state.epoch, start.elapsed());

    let report = evaluate(trainer.best_model(), &data.val, DEFAULT_RIDGE_ALPHA)?;
    print!("{}", report.to_text());
    Ok(())
}
