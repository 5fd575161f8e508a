use affkit::crf::{mean_field, ColorImage, CrfConfig, UnaryField};
use affkit::geometry::{roi_align, BoundingBox, RoiAlignConfig};
use affkit::layers::Conv2dParams;
use affkit::metrics::bleu_n;
use affkit::recurrent::{run_sequence, Cell, CellKind};
use affkit::{ParamStore, SeededRng, Tape, Tensor};
use criterion::{black_box, criterion_group, criterion_main, Criterion};

fn conv2d(c: &mut Criterion) {
    let mut rng = SeededRng::new(1);
    let x = rng.uniform_tensor(&[16, 32, 32], -1.0, 1.0);
    let w = rng.uniform_tensor(&[16, 16, 3, 3], -1.0, 1.0);
    let b = rng.uniform_tensor(&[16], -1.0, 1.0);
    let p = Conv2dParams::square(16, 3, 1, 1);
    c.bench_function("conv2d 16x32x32 k3 forward+backward", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
            let y = tape.conv2d(xv, wv, bv, &p).unwrap();
            let s = tape.sum(y);
            black_box(tape.backward(s).unwrap());
        })
    });
}

fn roi(c: &mut Criterion) {
    let mut rng = SeededRng::new(2);
    let feat = rng.uniform_tensor(&[64, 16, 16], -1.0, 1.0);
    let cfg = RoiAlignConfig::default();
    let rois: Vec<BoundingBox> = (0..32)
        .map(|_| {
            let (x, y) = (rng.uniform(0.0, 150.0), rng.uniform(0.0, 150.0));
            BoundingBox::new(x, y, x + rng.uniform(16.0, 100.0), y + rng.uniform(16.0, 100.0)).unwrap()
        })
        .collect();
    c.bench_function("roi_align 32 rois on 64x16x16", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let f = tape.leaf(feat.clone());
            for r in &rois {
                black_box(roi_align(&mut tape, f, r, &cfg).unwrap());
            }
        })
    });
}

fn crf(c: &mut Criterion) {
    let mut rng = SeededRng::new(3);
    let (h, w, l) = (32, 32, 3);
    let probs = rng.uniform_tensor(&[l, h, w], 0.05, 1.0);
    let unary = UnaryField::from_probabilities(&probs).unwrap();
    let pixels = (0..h * w).map(|_| [rng.uniform(0.0, 255.0), rng.uniform(0.0, 255.0), rng.uniform(0.0, 255.0)]).collect();
    let image = ColorImage::new(h, w, pixels).unwrap();
    let cfg = CrfConfig::default();
    let mut g = c.benchmark_group("crf");
    g.sample_size(10);
    g.bench_function("mean_field 32x32, 3 labels, 5 iterations", |bench| {
        bench.iter(|| black_box(mean_field(&unary, &image, &cfg).unwrap()))
    });
    g.finish();
}

fn lstm(c: &mut Criterion) {
    let mut rng = SeededRng::new(4);
    let mut store = ParamStore::new();
    let cell = Cell::new(CellKind::Lstm, &mut store, "lstm", 64, 128, &mut rng).unwrap();
    let xs: Vec<Tensor> = (0..30).map(|_| rng.uniform_tensor(&[64], -1.0, 1.0)).collect();
    c.bench_function("lstm 30 steps, 64 -> 128, forward+backward", |bench| {
        bench.iter(|| {
            let mut tape = Tape::with_params(&store);
            let xv: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
            let init = cell.zero_state(&mut tape);
            let hs = run_sequence(&mut tape, &cell, &xv, init).unwrap();
            let s = tape.sum(*hs.last().unwrap());
            black_box(tape.backward(s).unwrap());
        })
    });
}

fn bleu(c: &mut Criterion) {
    let words = ["lefthand", "righthand", "carry", "pour", "cut", "apple", "water", "knife", "box", "cup"];
    let mut rng = SeededRng::new(5);
    let mut sentence = |n: usize| -> Vec<&str> { (0..n).map(|_| words[rng.below(words.len())]).collect() };
    let pairs: Vec<(Vec<&str>, Vec<Vec<&str>>)> = (0..200).map(|_| (sentence(12), vec![sentence(12), sentence(10)])).collect();
    c.bench_function("bleu_4 on 200 sentence pairs", |bench| {
        bench.iter(|| {
            for (cand, refs) in &pairs {
                black_box(bleu_n(cand, refs, 4));
            }
        })
    });
}

criterion_group!(benches, conv2d, roi, crf, lstm, bleu);
criterion_main!(benches);
