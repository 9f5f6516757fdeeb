//! Generates the default synthetic Lorenz dataset and writes it to disk.
//!
//! ```text
//! cargo run --release --example generate_lorenz -- [out_dir]
//! ```

use langevinflow::data::{make_dataset, write_dataset, LorenzConfig};

fn main() -> langevinflow::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "lorenz_data".into());
    let cfg = LorenzConfig::default();
    let ds = make_dataset(&cfg)?;
    write_dataset(&out, &ds, Some(&cfg))?;

    let s = ds.summary();
    println!("{} train / {} val trials, {} bins, {} neurons", s.n_train, s.n_val, cfg.n_bins(), cfg.n_neurons);
    println!("held-out neurons {}, forward bins {}", cfg.n_held_out(), cfg.n_forward());
    println!("total spikes {}, mean rate {:.3} spikes/bin", s.total_spikes, s.mean_rate);

    // the first trial's latent state drives every neuron's rate
    let t = &ds.train[0];
    let l = t.latents.as_ref().expect("synthetic trials carry latents");
    for b in (0..t.n_bins()).step_by(10) {
        println!("bin {b:2}  x {:7.2} y {:7.2} z {:6.2}", l.at(b, 0), l.at(b, 1), l.at(b, 2));
    }
    println!("wrote {out}/");
    Ok(())
}
