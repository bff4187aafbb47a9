use mvaema_core::imaging::{
    denormalize_value, encode_png, encode_ppm, load_normalize, normalize_value, patchify, synth_pixels, unpatchify,
    ImageTensor, RgbImage, IMAGE_SIZE, NUM_PATCHES, PATCH_DIM,
};
use mvaema_core::Category;
use mvaema_tensor::{AdamConfig, AdamState, ParamStore, Tape, Tensor};
use proptest::prelude::*;

fn random_image(w: usize, h: usize, seed: u64) -> RgbImage {
    let mut x = seed | 1;
    let pixels = (0..w * h * 3)
        .map(|_| {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            (x >> 24) as u8
        })
        .collect();
    RgbImage { width: w, height: h, pixels }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn patches_partition_the_image(seed in any::<u64>()) {
        let img = load_normalize(&encode_ppm(&random_image(IMAGE_SIZE, IMAGE_SIZE, seed))).unwrap();
        let seq = patchify(&img).unwrap();
        prop_assert_eq!(seq.len(), NUM_PATCHES);
        prop_assert!((0..NUM_PATCHES).all(|i| seq.patch(i).len() == PATCH_DIM));
        prop_assert_eq!(unpatchify(&seq).unwrap(), img);
    }

    #[test]
    fn any_size_loads_into_range(w in 1usize..300, h in 1usize..300, seed in any::<u64>()) {
        let bytes = encode_png(&random_image(w, h, seed)).unwrap();
        let img = load_normalize(&bytes).unwrap();
        prop_assert_eq!(img.data().len(), IMAGE_SIZE * IMAGE_SIZE * 3);
        prop_assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn normalization_is_invertible_on_the_grid() {
    for x in 0..=255u8 {
        assert_eq!(denormalize_value(normalize_value(x as f32)).round() as u8, x);
    }
    assert!((normalize_value(128.0) - 0.0039).abs() < 1e-4);
    assert!(ImageTensor::new(vec![0.0; 10]).is_err());
}

/// Softmax regression on the mean intensity alone, trained with Adam.
#[test]
fn categories_are_separable_by_mean_intensity() {
    let per = 20;
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for c in Category::ALL {
        for seed in 0..per as u64 {
            let img = synth_pixels(c, 500 + seed);
            let mean = img.pixels.iter().map(|&p| p as f64).sum::<f64>() / img.pixels.len() as f64;
            feats.push(mean);
            labels.push(c.index());
        }
    }
    let mu = feats.iter().sum::<f64>() / feats.len() as f64;
    let sd = (feats.iter().map(|f| (f - mu).powi(2)).sum::<f64>() / feats.len() as f64).sqrt();
    let x: Vec<f64> = feats.iter().map(|f| (f - mu) / sd).collect();
    let n = x.len();
    let classes = Category::ALL.len();

    let mut params = ParamStore::<f64>::new();
    params.insert("w", Tensor::zeros(&[1, classes]).with_requires_grad(true)).unwrap();
    params.insert("b", Tensor::zeros(&[classes]).with_requires_grad(true)).unwrap();
    let mut adam = AdamState::new(AdamConfig { lr: 0.1, ..AdamConfig::default() }, params.tensors());
    let weights = vec![1.0; n];
    let mut logits = Vec::new();
    for _ in 0..3000 {
        params.zero_grad();
        let grads = {
            let tape = Tape::new();
            let p = params.bind(&tape);
            let input = tape.constant_from(&[n, 1], x.clone()).unwrap();
            let z = input.matmul(p.get("w").unwrap()).unwrap().add_row(p.get("b").unwrap()).unwrap();
            logits = z.to_vec();
            let loss = z.cross_entropy(&labels, &weights).unwrap();
            tape.backward(loss).unwrap()
        };
        params.accumulate(&grads).unwrap();
        adam.step(params.tensors_mut()).unwrap();
    }
    let correct = (0..n)
        .filter(|&i| {
            let row = &logits[i * classes..(i + 1) * classes];
            let arg = (0..classes).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            arg == labels[i]
        })
        .count();
    let acc = correct as f64 / n as f64;
    assert!(acc >= 0.95, "probe train accuracy {acc}");
}
