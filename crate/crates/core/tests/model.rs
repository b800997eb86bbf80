use capocr::checkpoint::Checkpoint;
use capocr::data::vocab::BOS;
use capocr::data::Vocab;
use capocr::model::{Captioner, ModelConfig, Recognizer};
use capocr::preprocess::{AugmentConfig, Preprocess};
use capocr::{stream, Image};
use rand::seq::SliceRandom;
use rand::Rng;

fn small() -> ModelConfig {
    ModelConfig {
        patch_size: 4,
        d_model: 16,
        n_heads: 2,
        n_enc_layers: 2,
        n_dec_layers: 2,
        d_ffn: 32,
        vocab_size: Vocab::default().len(),
        max_target_len: 6,
        input_resolution: 16,
        pretrain_resolution: 16,
        dropout: 0.0,
    }
}

fn noise(res: usize, seed: u64) -> Image {
    let mut rng = stream(seed);
    Image::from_fn(res, res, |_, _| [rng.random(), rng.random(), rng.random()])
}

fn rows(t: &capocr::Tensor) -> Vec<&[f64]> {
    t.data().chunks(t.cols()).collect()
}

#[test]
fn encoder_is_permutation_equivariant_without_positions() {
    let mut model = Captioner::new(small(), 1).unwrap();
    let pos = model.params().find("enc.pos").unwrap();
    model.params_mut().get_mut(pos).data_mut().fill(0.0);
    let cfg = model.config().clone();
    let (p, grid) = (cfg.patch_size, cfg.grid());
    let img = noise(cfg.input_resolution, 3);

    let mut perm: Vec<usize> = (0..grid * grid).collect();
    perm.shuffle(&mut stream(4));
    // patch k of the new image is patch perm[k] of the old one
    let permuted = Image::from_fn(img.width(), img.height(), |x, y| {
        let k = (y / p) * grid + x / p;
        let src = perm[k];
        img.get((src % grid) * p + x % p, (src / grid) * p + y % p)
    });

    let a = model.encode(&img).unwrap();
    let b = model.encode(&permuted).unwrap();
    let (ra, rb) = (rows(&a), rows(&b));
    for (k, &src) in perm.iter().enumerate() {
        for (x, y) in rb[k].iter().zip(ra[src]) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn patch_embedding_is_local() {
    let model = Captioner::new(small(), 2).unwrap();
    let cfg = model.config().clone();
    let img = noise(cfg.input_resolution, 5);
    let mut edited = img.clone();
    // repaint patch (1, 2) only
    for y in 2 * cfg.patch_size..3 * cfg.patch_size {
        for x in cfg.patch_size..2 * cfg.patch_size {
            edited.set(x, y, [0.0, 1.0, 0.5]);
        }
    }
    let a = model.embed_patches(&img).unwrap();
    let b = model.embed_patches(&edited).unwrap();
    let (ra, rb) = (rows(&a), rows(&b));
    let changed: Vec<usize> = (0..ra.len()).filter(|&i| ra[i] != rb[i]).collect();
    assert_eq!(changed, vec![2 * cfg.grid() + 1]);
}

#[test]
fn decoder_is_causal() {
    let model = Captioner::new(small(), 3).unwrap();
    let img = noise(16, 6);
    let a = model.forward_teacher_forced(&img, &[BOS, 5, 6, 7, 8]).unwrap();
    let b = model.forward_teacher_forced(&img, &[BOS, 5, 6, 30, 9]).unwrap();
    let (ra, rb) = (rows(&a), rows(&b));
    assert_eq!(ra[..3], rb[..3]);
    assert_ne!(ra[3], rb[3]);
}

#[test]
fn checkpoint_round_trip_gives_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let model = Captioner::new(small(), 4).unwrap();
    let vocab = Vocab::default();
    let pre = Preprocess::Aspect(AugmentConfig {
        resolution: 16,
        min_edge: 4,
        ..Default::default()
    });
    let ck = Checkpoint::new(&model, &vocab, pre);
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.fingerprint(), ck.fingerprint());

    let img = noise(16, 7);
    let seq = [BOS, 4, 5, 6];
    let before = model.forward_teacher_forced(&img, &seq).unwrap();
    let after = loaded.model().unwrap().forward_teacher_forced(&img, &seq).unwrap();
    let bits = |t: &capocr::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&before), bits(&after));

    let wide = noise(40, 8);
    let r1 = Recognizer::from_checkpoint(&ck).unwrap();
    let r2 = Recognizer::from_checkpoint(&loaded).unwrap();
    use capocr::eval::Recognize;
    assert_eq!(r1.recognize(&wide).unwrap(), r2.recognize(&wide).unwrap());
}

#[test]
fn resolution_change_keeps_outputs_finite() {
    let model = Captioner::new(small(), 5).unwrap();
    let bigger = model.with_input_resolution(24).unwrap();
    assert_eq!(bigger.config().n_patches(), 36);
    let logits = bigger.forward_teacher_forced(&noise(24, 9), &[BOS, 4]).unwrap();
    assert!(logits.is_finite());
    assert_eq!(bigger.params().numel(), model.params().numel());
}

#[test]
fn wrong_input_size_is_a_contract_error() {
    let model = Captioner::new(small(), 6).unwrap();
    let err = model.encode(&noise(20, 1)).unwrap_err();
    assert!(matches!(err, capocr::Error::Contract(_)), "{err}");
}
