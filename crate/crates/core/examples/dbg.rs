use snapsr_core::*;
fn main() {
    let layout = mosaic::MosaicLayout::standard();
    let cmf = chroma::CmfTable::builtin();
    for seed in [31u64, 1, 2, 3, 4, 5, 77, 123, 500, 9999] {
        let base = data::SceneSpec::new(seed, 16, 16).unwrap()
            .with_spectral_range(520.0, 600.0)
            .with_spectral_width(15.0, 30.0);
        let flat = data::generate_scene(&base.clone().flat(), &layout, &cmf).unwrap();
        let tex = data::generate_scene(&base, &layout, &cmf).unwrap();
        let p = |s: &data::DatasetSample| {
            let pred = chroma::baseline_pipeline(&s.raw, &layout, &cmf).unwrap();
            metrics::psnr(&pred, &s.hr_rgb, None).unwrap()
        };
        println!("seed {:5}: flat {:6.2} dB  textured {:6.2} dB  margin {:+.2}", seed, p(&flat), p(&tex), p(&flat)-p(&tex));
    }
}
