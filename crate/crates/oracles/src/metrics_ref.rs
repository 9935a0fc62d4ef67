//! Brute-force partition and classification metrics: direct loops over
//! samples, all sample pairs, and all label permutations.

fn distinct(labels: &[usize]) -> Vec<usize> {
    let mut v = labels.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

fn count(labels: &[usize], value: usize) -> f64 {
    labels.iter().filter(|&&l| l == value).count() as f64
}

fn joint(a: &[usize], b: &[usize], va: usize, vb: usize) -> f64 {
    a.iter().zip(b).filter(|&(&x, &y)| x == va && y == vb).count() as f64
}

/// NMI by explicit entropy sums, arithmetic-mean normalisation.
pub fn nmi_ref(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let h = |l: &[usize]| -> f64 {
        distinct(l).iter().map(|&v| {
            let p = count(l, v) / n;
            -p * p.ln()
        }).sum()
    };
    let (ha, hb) = (h(a), h(b));
    if ha == 0.0 && hb == 0.0 {
        return 1.0;
    }
    let mut mi = 0.0;
    for &va in &distinct(a) {
        for &vb in &distinct(b) {
            let pij = joint(a, b, va, vb) / n;
            if pij > 0.0 {
                mi += pij * (pij / (count(a, va) / n * count(b, vb) / n)).ln();
            }
        }
    }
    mi / ((ha + hb) / 2.0)
}

/// ARI from the four pair-agreement counts over all unordered pairs.
pub fn ari_ref(a: &[usize], b: &[usize]) -> f64 {
    let (mut n11, mut n10, mut n01, mut n00) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            match (a[i] == a[j], b[i] == b[j]) {
                (true, true) => n11 += 1.0,
                (true, false) => n10 += 1.0,
                (false, true) => n01 += 1.0,
                (false, false) => n00 += 1.0,
            }
        }
    }
    let den = (n00 + n01) * (n01 + n11) + (n00 + n10) * (n10 + n11);
    if den == 0.0 {
        return 1.0;
    }
    2.0 * (n00 * n11 - n01 * n10) / den
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

/// Best accuracy over every one-to-one cluster→class map, by enumeration.
pub fn clustering_accuracy_ref(truth: &[usize], clusters: &[usize]) -> f64 {
    let classes = distinct(truth);
    let ids = distinct(clusters);
    let k = classes.len().max(ids.len());
    let mut best = 0usize;
    for perm in permutations(k) {
        let hits = truth
            .iter()
            .zip(clusters)
            .filter(|&(t, c)| {
                let ci = ids.iter().position(|x| x == c).unwrap();
                classes.get(perm[ci]) == Some(t)
            })
            .count();
        best = best.max(hits);
    }
    best as f64 / truth.len() as f64
}

/// `(precision, recall, f1)` of `class` counted sample by sample.
pub fn prf_ref(truth: &[usize], pred: &[usize], class: usize) -> (f64, f64, f64) {
    let tp = truth.iter().zip(pred).filter(|&(&t, &p)| t == class && p == class).count() as f64;
    let fp = truth.iter().zip(pred).filter(|&(&t, &p)| t != class && p == class).count() as f64;
    let fn_ = truth.iter().zip(pred).filter(|&(&t, &p)| t == class && p != class).count() as f64;
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    let f1 = if tp > 0.0 { 2.0 * tp / (2.0 * tp + fp + fn_) } else { 0.0 };
    (precision, recall, f1)
}

/// Classes that occur in either labelling.
pub fn classes_ref(truth: &[usize], pred: &[usize]) -> Vec<usize> {
    distinct(&[truth, pred].concat())
}

pub fn macro_ref(truth: &[usize], pred: &[usize], pick: fn((f64, f64, f64)) -> f64) -> f64 {
    let cs = classes_ref(truth, pred);
    cs.iter().map(|&c| pick(prf_ref(truth, pred, c))).sum::<f64>() / cs.len() as f64
}

/// Compares every library metric with its brute-force counterpart on
/// `instances` random labellings (2..=20 samples, 1..=4 classes). Returns
/// the largest absolute deviation seen.
pub fn sweep(seed: u64, instances: usize) -> Result<f64, String> {
    use fracvit::metrics::{aggregate, ari, class_scores, clustering_accuracy, nmi, Aggregate, ConfusionMatrix};
    use rand::Rng;

    let mut rng = crate::rng(seed);
    let mut worst = 0.0f64;
    let mut check = |what: &str, got: f64, want: f64, a: &[usize], b: &[usize]| -> Result<(), String> {
        let d = (got - want).abs();
        worst = worst.max(d);
        if d > 1e-9 {
            return Err(format!("{what}: library {got} vs oracle {want} on {a:?} / {b:?}"));
        }
        Ok(())
    };
    for _ in 0..instances {
        let n = rng.random_range(2..=20);
        let ka = rng.random_range(1..=4);
        let kb = rng.random_range(1..=4);
        let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..ka)).collect();
        let b: Vec<usize> = (0..n).map(|_| rng.random_range(0..kb)).collect();
        let e = |r: fracvit::Result<f64>| r.map_err(|e| e.to_string());
        check("nmi", e(nmi(&a, &b))?, nmi_ref(&a, &b), &a, &b)?;
        check("ari", e(ari(&a, &b))?, ari_ref(&a, &b), &a, &b)?;
        check("clustering accuracy", e(clustering_accuracy(&a, &b))?, clustering_accuracy_ref(&a, &b), &a, &b)?;
        let cm = ConfusionMatrix::new(&a, &b, 4).map_err(|e| e.to_string())?;
        for c in classes_ref(&a, &b) {
            let (p, r, f) = class_scores(&cm, c);
            let (pw, rw, fw) = prf_ref(&a, &b, c);
            check("precision", p, pw, &a, &b)?;
            check("recall", r, rw, &a, &b)?;
            check("f1", f, fw, &a, &b)?;
        }
        check("macro precision", e(aggregate(Aggregate::MacroPrecision, &a, &b))?, macro_ref(&a, &b, |t| t.0), &a, &b)?;
        check("macro recall", e(aggregate(Aggregate::MacroRecall, &a, &b))?, macro_ref(&a, &b, |t| t.1), &a, &b)?;
        check("macro f1", e(aggregate(Aggregate::MacroF1, &a, &b))?, macro_ref(&a, &b, |t| t.2), &a, &b)?;
        let acc = a.iter().zip(&b).filter(|(x, y)| x == y).count() as f64 / n as f64;
        check("accuracy", e(aggregate(Aggregate::Accuracy, &a, &b))?, acc, &a, &b)?;
    }
    Ok(worst)
}

/// The small hand-worked fixtures, checked against the library.
pub fn hand_examples() -> Result<(), String> {
    use fracvit::metrics::{aggregate, ari, class_scores, clustering_accuracy, nmi, Aggregate, ConfusionMatrix};

    let e = |r: fracvit::Result<f64>| r.map_err(|e| e.to_string());
    let expect = |what: &str, got: f64, want: f64| -> Result<(), String> {
        if (got - want).abs() > 1e-12 {
            return Err(format!("{what}: got {got}, expected {want}"));
        }
        Ok(())
    };
    let (t, p) = ([0, 0, 1, 1], [0, 1, 0, 1]);
    let cm = ConfusionMatrix::new(&t, &p, 2).map_err(|e| e.to_string())?;
    for c in 0..2 {
        let (pr, rc, _) = class_scores(&cm, c);
        expect("2x2 precision", pr, 0.5)?;
        expect("2x2 recall", rc, 0.5)?;
    }
    expect("2x2 macro f1", e(aggregate(Aggregate::MacroF1, &t, &p))?, 0.5)?;
    expect("2x2 nmi", e(nmi(&t, &p))?, 0.0)?;
    expect("2x2 ari", e(ari(&t, &p))?, -0.5)?;
    expect("2x2 ari vs pair enumeration", e(ari(&t, &p))?, ari_ref(&t, &p))?;

    let y = [0, 1, 2, 2, 1, 0, 3];
    for m in [Aggregate::Accuracy, Aggregate::MacroPrecision, Aggregate::MacroRecall, Aggregate::MacroF1] {
        expect("perfect predictions", e(aggregate(m, &y, &y))?, 1.0)?;
    }
    expect("identical nmi", e(nmi(&y, &y))?, 1.0)?;
    expect("identical ari", e(ari(&y, &y))?, 1.0)?;
    expect("identical clustering accuracy", e(clustering_accuracy(&y, &y))?, 1.0)?;
    expect("relabelled clusters", e(clustering_accuracy(&[0, 0, 1, 1], &[1, 1, 0, 0]))?, 1.0)?;

    let (t, p) = ([0, 1, 2, 2, 1], [0, 1, 1, 0, 1]);
    let cm = ConfusionMatrix::new(&t, &p, 3).map_err(|e| e.to_string())?;
    let (pr, rc, _) = class_scores(&cm, 2);
    expect("never-predicted class precision", pr, 0.0)?;
    expect("never-predicted class recall", rc, 0.0)?;
    Ok(())
}
