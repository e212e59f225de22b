//! Per-vessel calcium scores on a hand-built slice and on a generated phantom.

use ricau::data::{generate_slices, PhantomSpec, LAD, LM, RCA};
use ricau::evaluation::{agatston_per_lesion, density_weight};
use ricau::{Mask, Tensor};

fn main() -> anyhow::Result<()> {
    let (h, w) = (16, 16);
    let mut labels = vec![0u8; h * w];
    let mut hu = vec![-1000.0f32; h * w];
    let mut paint = |y0: usize, x0: usize, side: usize, label: u8, peak: f32| {
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                labels[y * w + x] = label;
                hu[y * w + x] = 150.0;
            }
        }
        hu[y0 * w + x0] = peak;
    };
    // 1 mm² pixels: a 2×2 LM lesion peaking at 450 HU scores 4 mm² × 4
    paint(1, 1, 2, LM, 450.0);
    paint(6, 6, 3, LAD, 250.0);
    paint(12, 2, 2, RCA, 120.0);
    let mask = Mask::new(vec![h, w], labels)?;
    let image = Tensor::new(vec![1, h, w], hu)?;
    let report = agatston_per_lesion(&mask, &image, 1.0)?;
    print!("{}", report.to_tsv());
    for peak in [120.0, 130.0, 250.0, 350.0, 450.0] {
        println!("weight({peak} HU) = {}", density_weight(peak));
    }

    // 64×64 phantom pixels cover the same field of view as 512×512 at 0.7 mm
    let area = (0.7 * 8.0) * (0.7 * 8.0);
    let mut total = 0.0;
    for s in generate_slices(&PhantomSpec::desk(50, 3))? {
        total += agatston_per_lesion(&s.mask, &s.image, area)?.total;
    }
    println!("phantom total over 50 slices at {area:.2} mm² per pixel: {total:.1}");
    Ok(())
}
