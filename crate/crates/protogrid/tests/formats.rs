#[path = "../../core/tests/support/contract.rs"]
mod contract;

use proptest::prelude::*;
use protogrid::checkpoint::{decode, encode, load_checkpoint, save_checkpoint, Checkpoint};
use protogrid::config;
use protogrid::dataset::{load_dataset, save_dataset};
use protogrid::tensor_file::{load_tensor, save_tensor, Tensor, TensorData};
use protogrid::Error;
use protogrid_core::data::{DatasetSplit, RasterSample};
use protogrid_core::model::ModelKind;
use protogrid_core::parallel::Sequential;
use protogrid_core::train::train;

fn trained(kind: ModelKind) -> Checkpoint {
    let data = contract::tiny_data(120, 2);
    let cfg = contract::tiny_config(kind);
    let out = train::<f32, _>(&cfg, &data, &Sequential, &mut |_| {}).unwrap();
    Checkpoint { model: out.model, channel_names: data.channel_names.clone(), class_names: None, train: Some(cfg) }
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let data = contract::tiny_data(120, 2);
    let refs: Vec<&RasterSample> = data.test.iter().collect();
    for kind in [ModelKind::ProtoChannel, ModelKind::ProtoJoint, ModelKind::StandardNn] {
        let ckpt = trained(kind);
        let path = dir.path().join(format!("{}.pgckpt", kind.as_str()));
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt, "{}", kind.as_str());
        assert_eq!(encode(&back).unwrap(), std::fs::read(&path).unwrap());
        assert_eq!(bits(&back.model.logits(&refs).unwrap()), bits(&ckpt.model.logits(&refs).unwrap()));
    }
}

#[test]
fn projected_provenance_survives_a_round_trip() {
    let ckpt = trained(ModelKind::ProtoChannel);
    let net = ckpt.model.as_prototype().unwrap();
    assert!(net.bank.is_projected());
    let back = decode(&encode(&ckpt).unwrap()).unwrap();
    assert_eq!(back.model.as_prototype().unwrap().bank.provenance, net.bank.provenance);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let bytes = encode(&trained(ModelKind::StandardNn)).unwrap();
    assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Format { .. })));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode(&bad), Err(Error::Format { .. })));
}

#[test]
fn dataset_round_trip_preserves_samples() {
    let dir = tempfile::tempdir().unwrap();
    let data = contract::tiny_data(60, 8);
    let manifest = save_dataset(dir.path(), &data, None).unwrap();
    let back = load_dataset(&manifest).unwrap();
    assert_eq!(back.manifest.uint8_divisor, Some(255.0));
    assert_eq!(back.split, data);

    let mut float = data.clone();
    float.train[0].pixels[5] = 0.123_456_7;
    let d2 = dir.path().join("float");
    let back = load_dataset(save_dataset(&d2, &float, None).unwrap()).unwrap();
    assert_eq!(back.manifest.uint8_divisor, None);
    assert_eq!(back.split, float);
}

#[test]
fn unknown_config_key_is_named() {
    let text = config::PRESETS[0].1.to_string() + "\nprototypes_per_klass = 3\n";
    let err = config::parse(&text).unwrap_err().to_string();
    assert!(err.contains("prototypes_per_klass"), "{err}");
}

#[test]
fn every_preset_parses() {
    for (name, _) in config::PRESETS {
        let cfg = config::preset(name).unwrap();
        cfg.train_config().validate().unwrap();
    }
}

fn split_of(split: &DatasetSplit) -> usize {
    split.train.len() + split.validation.len() + split.test.len()
}

#[test]
fn generated_split_has_expected_sizes() {
    assert_eq!(split_of(&contract::tiny_data(100, 1)), 100);
}

proptest! {
    #[test]
    fn tensor_round_trip_is_bit_exact(
        raw in prop::collection::vec(any::<u32>(), 1..64),
        bytes in prop::collection::vec(any::<u8>(), 1..64),
        doubles in prop::collection::vec(any::<u64>(), 1..32),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let f32s: Vec<f32> = raw.iter().map(|&b| f32::from_bits(b)).filter(|x| x.is_finite()).collect();
        let f64s: Vec<f64> = doubles.iter().map(|&b| f64::from_bits(b)).filter(|x| x.is_finite()).collect();
        let mut cases = vec![TensorData::U8(bytes)];
        if !f32s.is_empty() {
            cases.push(TensorData::F32(f32s));
        }
        if !f64s.is_empty() {
            cases.push(TensorData::F64(f64s));
        }
        for data in cases {
            let t = Tensor::new(vec![data.len(), 1], data).unwrap();
            let path = dir.path().join("t.pgt");
            save_tensor(&path, &t).unwrap();
            let back = load_tensor(&path).unwrap();
            prop_assert_eq!(back.encode().unwrap(), t.encode().unwrap());
            prop_assert_eq!(back.dims, t.dims);
        }
    }
}
