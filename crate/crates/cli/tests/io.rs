use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand::rngs::StdRng;
use swaptrain::models::{init_params, DeblurConfig, Model, ModelSpec};
use swaptrain::Tensor;
use swaptrain_cli::io::*;

fn model(seed: u64) -> Model<f32> {
    init_params(&ModelSpec::Deblur(DeblurConfig::default()), seed).unwrap()
}

fn bits(m: &Model<f32>) -> Vec<u32> {
    m.params.values().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.uim");
    let src = model(3);
    save_model(&path, &src).unwrap();
    let mut dst = model(4);
    assert_ne!(bits(&src), bits(&dst));
    load_model(&path, &mut dst).unwrap();
    assert_eq!(bits(&src), bits(&dst));
    assert_eq!(src.params.names(), dst.params.names());
    // Saving the loaded model reproduces the file byte for byte.
    let again = dir.path().join("again.uim");
    save_model(&again, &dst).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn every_single_bit_flip_is_detected() {
    let bytes = encode_tensors(&params_entries(&model(1).params)).unwrap();
    let mut rng = StdRng::seed_from_u64(99);
    for _ in 0..1000 {
        let mut bad = bytes.clone();
        let bit = rng.random_range(0..bad.len() * 8);
        bad[bit / 8] ^= 1 << (bit % 8);
        assert!(decode_tensors(&bad).is_err(), "flip of bit {bit} went unnoticed");
    }
}

#[test]
fn truncation_and_extension_are_detected() {
    let bytes = encode_tensors(&[("a".into(), Tensor::full(&[3, 2], 1.5f32))]).unwrap();
    for cut in [1, 4, 10, bytes.len() - 16] {
        assert!(decode_tensors(&bytes[..bytes.len() - cut]).is_err());
    }
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(decode_tensors(&longer).is_err());
}

#[test]
fn loading_into_a_different_architecture_fails() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.uim");
    save_model(&path, &model(0)).unwrap();
    let mut other: Model<f32> = init_params(
        &ModelSpec::Deblur(DeblurConfig {
            kernel_head: false,
            ..DeblurConfig::default()
        }),
        0,
    )
    .unwrap();
    assert!(load_model(&path, &mut other).is_err());
}

#[test]
fn pgm_round_trip_is_exact_at_8_bits() {
    let data: Vec<f32> = (0..=255).map(|v| v as f32 / 255.0).collect();
    let img = Tensor::new(&[16, 16], data.clone()).unwrap();
    let back = decode_netpbm(&encode_pgm(&img).unwrap()).unwrap();
    assert_eq!((back.width, back.height, back.channels), (16, 16, 1));
    assert_eq!(back.to_gray().data(), &data[..]);
}

fn entries() -> impl Strategy<Value = Vec<(String, Tensor<f32>)>> {
    let one = ("[a-z.0-9]{0,12}", prop::collection::vec(0usize..4, 0..4)).prop_flat_map(|(name, shape)| {
        let n: usize = shape.iter().product();
        prop::collection::vec(any::<u32>(), n)
            .prop_map(move |raw| (name.clone(), Tensor::new(&shape, raw.into_iter().map(f32::from_bits).collect()).unwrap()))
    });
    prop::collection::vec(one, 0..5)
}

proptest! {
    #[test]
    fn arbitrary_containers_round_trip(es in entries()) {
        let decoded = decode_tensors(&encode_tensors(&es).unwrap()).unwrap();
        prop_assert_eq!(decoded.len(), es.len());
        for ((n1, t1), (n2, t2)) in es.iter().zip(&decoded) {
            prop_assert_eq!(n1, n2);
            prop_assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u32> = t2.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(b1, b2);
        }
    }
}
