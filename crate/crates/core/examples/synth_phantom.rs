//! Generates a small phantom split, writes it to disk and reads it back.
//!
//! ```text
//! cargo run --release --example synth_phantom -- /tmp/phantom 200
//! ```

use ricau::data::{generate_phantom, Dataset, PhantomSpec, CLASS_NAMES};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let dest = args.next().unwrap_or_else(|| "phantom".into());
    let slices: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(200);

    let spec = PhantomSpec::desk(slices, 7);
    generate_phantom(&spec, &dest)?;
    let data = Dataset::load(&dest)?;

    let counts = data.class_counts();
    let total: u64 = counts.iter().sum();
    let present = data.slices_with_class();
    println!("{} slices of {:?} in {dest}", data.len(), data.extent()?);
    println!("class\tpixels\tfraction\tslices_with_class");
    for (c, name) in CLASS_NAMES.iter().enumerate() {
        println!(
            "{name}\t{}\t{:.2e}\t{:.3}",
            counts[c],
            counts[c] as f64 / total as f64,
            present[c] as f64 / data.len() as f64
        );
    }
    Ok(())
}
