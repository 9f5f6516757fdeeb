//! Trains briefly, then prints one trial's latent position as a coarse
//! text heatmap (time down, latent dimension across) and writes the same
//! table as tab-separated text for external plotting.
//!
//! ```text
//! cargo run --release --example export_waves -- [epochs] [out.tsv]
//! ```

use langevinflow::cli::latent_table;
use langevinflow::data::{make_dataset, LorenzConfig};
use langevinflow::model::{LangevinFlow, ModelConfig};
use langevinflow::train::{TrainConfig, Trainer};

const SHADES: &[u8] = b" .:-=+*#%@";

fn main() -> langevinflow::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(5, |s| s.parse().expect("epochs"));
    let out = args.next().unwrap_or_else(|| "latents_trial0.tsv".into());
    let data = make_dataset(&LorenzConfig::default())?;
    let mut trainer = Trainer::new(LangevinFlow::new(ModelConfig::default())?, TrainConfig { epochs, ..TrainConfig::default() })?;
    trainer.fit(&data.train, &data.val, None)?;
    let model = trainer.best_model();

    let p = model.predict(&data.val[..1])?.remove(0);
    let (z, v) = (p.z.expect("latents"), p.v.expect("velocities"));
    let scale = z.data().iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-12);
    for t in 0..z.rows() {
        let line: String = z
            .row(t)
            .iter()
            .map(|x| SHADES[(((x / scale + 1.0) / 2.0) * (SHADES.len() - 1) as f64).round() as usize] as char)
            .collect();
        println!("{t:3} |{line}|");
    }
    std::fs::write(&out, latent_table(&z, &v, model.config.groups)).map_err(|e| langevinflow::Error::Io {
        path: out.clone().into(),
        source: e,
    })?;
    println!("wrote {out}");
    Ok(())
}
