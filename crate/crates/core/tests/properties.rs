use std::path::Path;

use capocr::data::{DatasetManifest, ImageRef, Sample, Split, Task, Vocab};
use capocr::eval::{weighted_average, TaskResult};
use capocr::graph::Graph;
use capocr::pipeline::{parse_boxes, reading_order, TextBox};
use capocr::preprocess::{ocr_resize, plan_resize, AugmentConfig};
use capocr::{stream, Image, Tensor};
use proptest::prelude::*;

fn alphabet_text() -> impl Strategy<Value = String> {
    proptest::collection::vec(proptest::sample::select(capocr::data::vocab::DEFAULT_ALPHABET.chars().collect::<Vec<_>>()), 0..12)
        .prop_map(|v| v.into_iter().collect())
}

proptest! {
    #[test]
    fn resize_always_fills_the_square(w in 1usize..120, h in 1usize..120, res in 8usize..40, seed: u64) {
        let cfg = AugmentConfig { resolution: res, min_edge: (res / 4).max(1), ..Default::default() };
        let img = Image::from_fn(w, h, |x, y| [(x % 3) as f64 / 2.0, (y % 5) as f64 / 4.0, 0.5]);
        let out = ocr_resize(&img, &cfg, &mut stream(seed)).unwrap();
        prop_assert_eq!((out.width(), out.height()), (res, res));
        prop_assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn resize_plan_keeps_long_edge_and_respects_floor(w in 1usize..5000, h in 1usize..5000) {
        let cfg = AugmentConfig::default();
        let p = plan_resize(w, h, &cfg);
        prop_assert_eq!(p.new_width.max(p.new_height), 480);
        prop_assert!(p.new_width.min(p.new_height) >= 64);
        prop_assert_eq!(p.new_width + p.pad_x, 480);
        prop_assert_eq!(p.new_height + p.pad_y, 480);
    }

    #[test]
    fn vocab_round_trip(text in alphabet_text()) {
        let v = Vocab::default();
        let ids = v.encode(&text);
        prop_assert_eq!(ids.len(), text.chars().count() + 2);
        prop_assert_eq!(v.decode(&ids), text);
    }

    #[test]
    fn manifest_text_round_trip(texts in proptest::collection::vec("[A-Z0-9]{1,6}", 0..20)) {
        let base = Path::new("/data/doc");
        let samples = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Sample::new(ImageRef::Path(base.join(format!("train/{i}.png"))), t, Task::Document).unwrap())
            .collect();
        let m = DatasetManifest { task: Task::Document, split: Split::Train, samples };
        let text = m.to_text(base).unwrap();
        prop_assert_eq!(DatasetManifest::parse(&text, base, "m").unwrap(), m);
    }

    #[test]
    fn box_lines_round_trip(raw in proptest::collection::vec((0usize..500, 0usize..500, 1usize..50, 1usize..50), 0..10)) {
        let boxes: Vec<TextBox> = raw.iter().map(|&(x, y, w, h)| TextBox::new(x, y, x + w, y + h).unwrap()).collect();
        let text: String = boxes.iter().map(|b| serde_json::to_string(b).unwrap() + "\n").collect();
        prop_assert_eq!(parse_boxes(&text, "b").unwrap(), boxes);
    }

    #[test]
    fn reading_order_ignores_input_order(
        raw in proptest::collection::vec((0usize..300, 0usize..300, 1usize..40, 1usize..20), 1..12),
        seed: u64,
    ) {
        use rand::seq::SliceRandom;
        let boxes: Vec<TextBox> = raw.iter().map(|&(x, y, w, h)| TextBox::new(x, y, x + w, y + h).unwrap()).collect();
        let mut shuffled = boxes.clone();
        shuffled.shuffle(&mut stream(seed));
        let a = reading_order(&boxes);
        prop_assert_eq!(&a, &reading_order(&shuffled));
        let mut sorted_a = a.clone();
        let mut sorted_in = boxes.clone();
        sorted_a.sort_by_key(|b| (b.x0, b.y0, b.x1, b.y1));
        sorted_in.sort_by_key(|b| (b.x0, b.y0, b.x1, b.y1));
        prop_assert_eq!(sorted_a, sorted_in);
    }

    #[test]
    fn weighted_average_is_bounded(parts in proptest::collection::vec((1usize..1000, 0.0f64..=1.0), 1..6)) {
        let results: Vec<TaskResult> = parts
            .iter()
            .enumerate()
            .map(|(i, &(n, frac))| TaskResult::new(format!("t{i}"), n, (n as f64 * frac) as usize).unwrap())
            .collect();
        let avg = weighted_average(&results).unwrap();
        let lo = results.iter().map(|r| r.accuracy).fold(f64::INFINITY, f64::min);
        let hi = results.iter().map(|r| r.accuracy).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(avg >= lo - 1e-9 && avg <= hi + 1e-9);
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..50.0, seed: u64) {
        use rand::Rng;
        let mut rng = stream(seed);
        let mut g = Graph::new();
        let x = g.constant(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap();
        let s = g.softmax_rows(x);
        for row in g.value(s).chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn tensor_rejects_mismatched_length(shape in proptest::collection::vec(1usize..5, 1..4), extra in 1usize..4) {
        let n: usize = shape.iter().product();
        prop_assert!(Tensor::new(shape.clone(), vec![0.0; n]).is_ok());
        prop_assert!(Tensor::new(shape, vec![0.0; n + extra]).is_err());
    }

    #[test]
    fn ppm_round_trip(w in 1usize..20, h in 1usize..20, seed: u64) {
        use rand::Rng;
        let mut rng = stream(seed);
        let img = Image::from_fn(w, h, |_, _| [0; 3].map(|_: i32| rng.random_range(0u8..=255) as f64 / 255.0));
        prop_assert_eq!(Image::decode(&img.encode_ppm()).unwrap(), img.clone());
        prop_assert_eq!(Image::decode(&img.encode_png().unwrap()).unwrap(), img);
    }
}
