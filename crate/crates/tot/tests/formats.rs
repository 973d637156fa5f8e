use std::path::Path;

use proptest::prelude::*;
use tot::formats::*;
use tot::CliError;
use tot_core::model::{ModelConfig, TotModel};
use tot_core::synthgen::{generate_dataset, Dataset, MixingKind, Preset};
use tot_core::train::{TrainConfig, Trainer};

fn dataset(preset: Preset, seed: u64, steps: usize) -> Dataset {
    let mut c = preset.config(seed);
    c.total_steps = steps;
    c.validation_size = steps / 4;
    generate_dataset(&c).unwrap()
}

fn trained_checkpoint() -> tot_core::train::Checkpoint {
    let model = TotModel::new(ModelConfig {
        encoder_hidden: vec![8],
        decoder_hidden: vec![8],
        reducer_hidden: vec![4],
        forecaster_hidden: vec![8],
        noise_hidden: vec![4],
        ..ModelConfig::default()
    })
    .unwrap();
    let mut tr = Trainer::new(model, 3);
    let ds = dataset(Preset::A, 0, 120);
    tr.train_steps(&ds.x, &TrainConfig { batch_size: 8, ..TrainConfig::default() }, 5).unwrap();
    tr.checkpoint()
}

fn bits(t: &tot_core::Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn dataset_round_trip(seed in 0u64..1000, preset in 0usize..4, steps in 40usize..200, drop_z in any::<bool>(), sparse in any::<bool>()) {
        let p = [Preset::A, Preset::B, Preset::C, Preset::D][preset];
        let mut c = p.config(seed);
        c.total_steps = steps;
        c.validation_size = 10;
        if sparse {
            c.mixing = MixingKind::SparseBanded;
        }
        let mut ds = generate_dataset(&c).unwrap();
        if drop_z {
            ds.z = None;
        }
        let back = decode_dataset(&encode_dataset(&ds), Path::new("mem")).unwrap();
        prop_assert_eq!(bits(&back.x), bits(&ds.x));
        prop_assert_eq!(back.z.as_ref().map(bits), ds.z.as_ref().map(bits));
        prop_assert_eq!(&back, &ds);
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let ck = trained_checkpoint();
    let bytes = encode_checkpoint(&ck);
    let back = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
    assert_eq!(back, ck);
    assert_eq!(encode_checkpoint(&back), bytes);
}

#[test]
fn every_truncation_and_byte_flip_is_rejected() {
    let ds_bytes = encode_dataset(&dataset(Preset::B, 1, 30));
    let ck_bytes = encode_checkpoint(&trained_checkpoint());
    for (name, bytes) in [("dataset", &ds_bytes), ("checkpoint", &ck_bytes)] {
        let decode = |b: &[u8]| -> Result<(), CliError> {
            if name == "dataset" {
                decode_dataset(b, Path::new("f")).map(drop)
            } else {
                decode_checkpoint(b, Path::new("f")).map(drop)
            }
        };
        let step = (bytes.len() / 300).max(1);
        for cut in (0..bytes.len()).step_by(step) {
            let e = decode(&bytes[..cut]).unwrap_err();
            assert_eq!(e.exit_code(), 4, "{name} cut {cut}: {e}");
        }
        for pos in (0..bytes.len()).step_by(step) {
            let mut b = bytes.clone();
            b[pos] ^= 0x10;
            let e = decode(&b).unwrap_err();
            assert_eq!(e.exit_code(), 4, "{name} flip {pos}: {e}");
        }
    }
}

fn reseal(mut body: Vec<u8>) -> Vec<u8> {
    let crc = crc32fast::hash(&body);
    body.extend_from_slice(&crc.to_le_bytes());
    body
}

#[test]
fn version_mismatch_is_reported_as_such() {
    let bytes = encode_dataset(&dataset(Preset::A, 2, 30));
    let mut body = bytes[..bytes.len() - 4].to_vec();
    body[4..8].copy_from_slice(&99u32.to_le_bytes());
    match decode_dataset(&reseal(body), Path::new("f")) {
        Err(CliError::Version { found: 99, expected: 1, .. }) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn trailing_bytes_and_inconsistent_headers_are_rejected() {
    let bytes = encode_dataset(&dataset(Preset::A, 2, 30));
    let mut body = bytes[..bytes.len() - 4].to_vec();
    body.extend_from_slice(&[0; 8]);
    assert!(decode_dataset(&reseal(body), Path::new("f")).is_err());

    let mut body = bytes[..bytes.len() - 4].to_vec();
    // header n no longer matches the embedded configuration
    body[8..12].copy_from_slice(&4u32.to_le_bytes());
    assert!(decode_dataset(&reseal(body), Path::new("f")).is_err());
}

#[test]
fn csv_exports_have_expected_shape() {
    let ds = dataset(Preset::A, 0, 25);
    let text = String::from_utf8(dataset_csv(&ds).unwrap()).unwrap();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    assert_eq!(rdr.headers().unwrap().len(), 1 + 2 * ds.n());
    assert_eq!(rdr.records().count(), 25);
}

#[test]
fn files_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("nested/d.totd");
    let ds = dataset(Preset::C, 4, 50);
    save_dataset(&p, &ds).unwrap();
    assert_eq!(load_dataset(&p).unwrap(), ds);
    let missing = load_dataset(&dir.path().join("nope.totd")).unwrap_err();
    assert_eq!(missing.exit_code(), 4);
}
