use fracvit::data::{crop_resize, normalize_side, synth_generate, GrayImage};

fn main() {
    let out = std::env::args().nth(1).unwrap_or_else(|| "preview".into());
    std::fs::create_dir_all(&out).unwrap();
    let d = synth_generate(1, 0).unwrap();
    for (s, img) in d.manifest.samples.iter().zip(&d.images) {
        img.save_png(&std::path::Path::new(&out).join(format!("{}-src.png", s.id))).unwrap();
        let t = normalize_side(&crop_resize(img, &s.bbox, 64).unwrap(), s.side);
        GrayImage::from_tensor(&t).unwrap().save_png(&std::path::Path::new(&out).join(format!("{}-crop.png", s.id))).unwrap();
    }
}
