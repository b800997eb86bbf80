//! Goodness-of-fit checks on the two sources of randomness that shape
//! training: the padding split of the resize and the mixture shuffle.

use capocr::data::{Mixture, Sample, Task};
use capocr::preprocess::{ocr_resize, AugmentConfig};
use capocr::{stream, Image};
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// p-value of Pearson's statistic against a uniform expectation.
fn uniform_p_value(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(stat)
}

#[test]
fn random_padding_split_is_uniform() {
    // red top row, blue bottom row: replicated red rows reveal the top pad
    let img = Image::from_fn(32, 8, |_, y| match y {
        0 => [1.0, 0.0, 0.0],
        7 => [0.0, 0.0, 1.0],
        _ => [0.0, 1.0, 0.0],
    });
    let cfg = AugmentConfig {
        resolution: 32,
        min_edge: 4,
        ..Default::default()
    };
    let mut rng = stream(5);
    let mut counts = vec![0usize; 25];
    for _ in 0..5000 {
        let out = ocr_resize(&img, &cfg, &mut rng).unwrap();
        let red = (0..32).filter(|&y| out.get(0, y) == [1.0, 0.0, 0.0]).count();
        counts[red - 1] += 1;
    }
    let p = uniform_p_value(&counts);
    assert!(p > 0.001, "p = {p}, counts {counts:?}");
}

#[test]
fn mixture_positions_are_uniform() {
    let part = |task: Task, n: usize| -> Vec<Sample> {
        (0..n)
            .map(|i| Sample::inline(Image::filled(1, 1, [1.0; 3]), &format!("{i}"), task).unwrap())
            .collect()
    };
    let a = part(Task::Scene, 3);
    let b = part(Task::Web, 5);
    let m = Mixture::new(vec![&a, &b]).unwrap();
    let mut rng = stream(9);
    // where the first scene sample lands, over many epochs
    let mut counts = vec![0usize; m.len()];
    for _ in 0..8000 {
        let order = m.epoch_indices(&mut rng);
        counts[order.iter().position(|&x| x == (0, 0)).unwrap()] += 1;
    }
    let p = uniform_p_value(&counts);
    assert!(p > 0.001, "p = {p}, counts {counts:?}");
}

#[test]
fn centered_padding_is_fixed() {
    let img = Image::from_fn(30, 6, |x, _| [x as f64 / 30.0; 3]);
    let cfg = AugmentConfig {
        resolution: 30,
        min_edge: 2,
        ..Default::default()
    }
    .deterministic();
    let first = ocr_resize(&img, &cfg, &mut stream(1)).unwrap();
    for seed in 2..20 {
        assert_eq!(ocr_resize(&img, &cfg, &mut stream(seed)).unwrap(), first);
    }
}
