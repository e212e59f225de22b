//! Runs one coordinate-attention module on a random feature map and prints the
//! attention profiles along each axis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ricau::attention::{CaConfig, CoordinateAttention, Gate};
use ricau::{Graph, Tensor};

fn main() -> anyhow::Result<()> {
    let (n, c, h, w) = (1, 16, 8, 12);
    let ca = CoordinateAttention::new("ca", c, CaConfig::default())?;
    let store = ca.init_store::<f32>(3)?;
    println!("channels {c}, bottleneck {}, parameters {}", ca.mid, ca.param_count());

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // a bright band in rows 2..4 so the height profile has something to find
    let x = Tensor::from_fn(vec![n, c, h, w], |i| {
        let row = (i / w) % h;
        rng.gen_range(-1.0..1.0) + if (2..4).contains(&row) { 3.0 } else { 0.0 }
    })?;

    let mut g = Graph::new();
    let bound = store.bind(&mut g, false)?;
    let xv = g.constant(x)?;
    let maps = ca.attention_maps(&mut g, &bound, &mut store.eval_access(), xv, Gate::Sigmoid)?;
    let y = ca.forward(&mut g, &bound, &mut store.eval_access(), xv)?;

    let a_h = g.value(maps.a_h);
    let a_w = g.value(maps.a_w);
    println!("a_h dims {:?}, a_w dims {:?}, output dims {:?}", a_h.dims(), a_w.dims(), g.dims(y));
    println!("channel 0 height profile:");
    for v in &a_h.data()[..h] {
        println!("  {v:.4}");
    }
    println!("channel 0 width profile:");
    for v in &a_w.data()[..w] {
        println!("  {v:.4}");
    }
    let (lo, hi) = a_h
        .data()
        .iter()
        .chain(a_w.data())
        .fold((f32::MAX, f32::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    println!("all attention weights in [{lo:.4}, {hi:.4}]");
    Ok(())
}
