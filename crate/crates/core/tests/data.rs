use fracvit::data::synth::{motif, SOURCE_SIZE};
use fracvit::data::{
    class_histogram, crop_resize, load_manifest, load_samples, normalize_side, synth_generate, write_dataset,
    BoundingBox, FractureLabel, GrayImage, Manifest, Sample, Side,
};
use fracvit::tensor::Tensor;
use fracvit_oracles::{bilinear64, to64};
use proptest::prelude::*;

const TARGET: usize = 64;

/// Mean intensity along the nominal centre lines of each class motif; a
/// motif counts as present when its lines are clearly darker than bone.
fn detect(t: &Tensor) -> FractureLabel {
    let side = t.shape()[2];
    let sample = |u: f32, v: f32| {
        let x = ((u * side as f32 - 0.5).round() as usize).min(side - 1);
        let y = ((v * side as f32 - 0.5).round() as usize).min(side - 1);
        t.data()[y * side + x]
    };
    let mut best = (FractureLabel::Unbroken, 0.45f32);
    for label in FractureLabel::ALL {
        let segments = motif(label);
        if segments.is_empty() {
            continue;
        }
        let mut total = 0.0;
        let mut count = 0;
        for &(a, b) in segments {
            for k in 0..=20 {
                let s = k as f32 / 20.0;
                total += sample(a.0 + s * (b.0 - a.0), a.1 + s * (b.1 - a.1));
                count += 1;
            }
        }
        let mean = total / count as f32;
        if mean < best.1 {
            best = (label, mean);
        }
    }
    best.0
}

fn generated_tensors(n: usize, seed: u64) -> (Manifest, Vec<Tensor>) {
    let d = synth_generate(n, seed).unwrap();
    let tensors = d
        .manifest
        .samples
        .iter()
        .zip(&d.images)
        .map(|(s, img)| normalize_side(&crop_resize(img, &s.bbox, TARGET).unwrap(), s.side))
        .collect();
    (d.manifest, tensors)
}

#[test]
fn motif_detector_recovers_every_label() {
    let (manifest, tensors) = generated_tensors(40, 3);
    for (s, t) in manifest.samples.iter().zip(&tensors) {
        assert_eq!(detect(t), s.label, "sample {}", s.id);
    }
}

#[test]
fn nearest_centroid_beats_chance() {
    let (train_m, train) = generated_tensors(20, 1);
    let (test_m, test) = generated_tensors(10, 2);
    let dim = TARGET * TARGET;
    let mut centroids = vec![vec![0.0f64; dim]; 7];
    let mut counts = [0usize; 7];
    for (s, t) in train_m.samples.iter().zip(&train) {
        let c = s.label.index();
        counts[c] += 1;
        centroids[c].iter_mut().zip(t.data()).for_each(|(a, b)| *a += *b as f64);
    }
    for (c, n) in centroids.iter_mut().zip(counts) {
        c.iter_mut().for_each(|v| *v /= n as f64);
    }
    let correct = test_m
        .samples
        .iter()
        .zip(&test)
        .filter(|(s, t)| {
            let d = |c: &Vec<f64>| c.iter().zip(t.data()).map(|(a, b)| (a - *b as f64).powi(2)).sum::<f64>();
            let best = (0..7).min_by(|&a, &b| d(&centroids[a]).total_cmp(&d(&centroids[b]))).unwrap();
            best == s.label.index()
        })
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc > 1.0 / 7.0, "nearest-centroid accuracy {acc}");
}

#[test]
fn fifty_per_class_gives_350_samples() {
    let d = synth_generate(50, 7).unwrap();
    assert_eq!(d.manifest.samples.len(), 350);
    assert_eq!(class_histogram(&d.manifest), [50; 7]);
}

#[test]
fn written_dataset_loads_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    let d = synth_generate(2, 5).unwrap();
    let path = write_dataset(&d, dir.path()).unwrap();
    let m = load_manifest(&path).unwrap();
    assert_eq!(m, d.manifest);
    let tensors = load_samples(dir.path(), &m, TARGET).unwrap();
    assert_eq!(tensors.len(), 14);
    for (s, t) in m.samples.iter().zip(&tensors) {
        assert_eq!(detect(t), s.label);
    }
}

#[test]
fn checkerboard_downsize_matches_bilinear_oracle() {
    let (w, h) = (50, 40);
    let data: Vec<f32> = (0..w * h).map(|i| if (i % w / 3 + i / w / 3) % 2 == 0 { 1.0 } else { 0.0 }).collect();
    let img = GrayImage::new(w, h, data.clone()).unwrap();
    for (bbox, target) in [((0, 0, 50, 40), 17), ((5, 3, 31, 29), 12), ((10, 10, 7, 9), 20)] {
        let b = BoundingBox { x: bbox.0 as u32, y: bbox.1 as u32, w: bbox.2 as u32, h: bbox.3 as u32 };
        let got = crop_resize(&img, &b, target).unwrap();
        let expected = bilinear64(&to64(&data), w, bbox, target);
        for (g, e) in got.data().iter().zip(&expected) {
            assert!((*g as f64 - e).abs() < 1e-4, "{g} vs {e}");
        }
    }
}

#[test]
fn paper_class_histogram_fixture() {
    let counts = [2003usize, 631, 329, 174, 625, 339, 106];
    let mut samples = Vec::new();
    for (label, &n) in FractureLabel::ALL.iter().zip(&counts) {
        for i in 0..n {
            samples.push(Sample {
                id: format!("{label}-{i}"),
                path: format!("{label}-{i}.png"),
                bbox: BoundingBox { x: 0, y: 0, w: 1, h: 1 },
                side: Side::Left,
                label: *label,
            });
        }
    }
    let m = Manifest { samples, ..Manifest::default() };
    assert_eq!(class_histogram(&m), counts);
    assert_eq!(class_histogram(&m).iter().sum::<usize>(), 4207);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pipeline_output_is_224_square_in_unit_range(
        w in 1usize..300, h in 1usize..300, seed in 0u64..1000,
        fx in 0.0f64..1.0, fy in 0.0f64..1.0, fw in 0.01f64..1.0, fh in 0.01f64..1.0,
        right in any::<bool>(),
    ) {
        let mut r = fracvit_oracles::rng(seed);
        let data = fracvit_oracles::random_vec(&mut r, w * h, 0.0, 1.0);
        let img = GrayImage::new(w, h, data).unwrap();
        let bx = ((fx * w as f64) as usize).min(w - 1);
        let by = ((fy * h as f64) as usize).min(h - 1);
        let bw = ((fw * (w - bx) as f64).ceil() as usize).max(1);
        let bh = ((fh * (h - by) as f64).ceil() as usize).max(1);
        let b = BoundingBox { x: bx as u32, y: by as u32, w: bw as u32, h: bh as u32 };
        let side = if right { Side::Right } else { Side::Left };
        let t = normalize_side(&crop_resize(&img, &b, 224).unwrap(), side);
        prop_assert_eq!(t.shape(), &[1, 224, 224]);
        prop_assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(&normalize_side(&normalize_side(&t, Side::Right), Side::Right), &t);
        prop_assert_eq!(&normalize_side(&t, Side::Left), &t);
    }
}

#[test]
fn source_size_is_square() {
    let d = synth_generate(1, 0).unwrap();
    assert!(d.images.iter().all(|i| i.width == SOURCE_SIZE && i.height == SOURCE_SIZE));
}
