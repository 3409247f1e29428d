use ccn_cli::format::*;
use ccn_core::synthcam::{generate_dataset, Dataset, GenConfig, Sample};
use ccn_core::tensor::Tensor;
use ccn_core::trainer::{Architecture, HeadMode, Model, DEFAULT_BACKBONE_WIDTHS};
use ccn_core::PadMode;
use proptest::prelude::*;

fn small_gen() -> GenConfig {
    GenConfig { samples_per_cell: 5, n_views: 8, image_size: 16, ..GenConfig::default() }
}

fn sample_strategy(g: usize, n_classes: u16) -> impl Strategy<Value = Sample> {
    (
        prop::collection::vec(0.0f32..=1.0, g * g),
        0..=n_classes,
        prop::option::of(-3.14159f32..3.14159),
        prop::array::uniform4(0.5f32..40.0),
    )
        .prop_map(|(image, label, az, bbox)| Sample {
            image,
            label,
            azimuth: if label == 0 { None } else { az },
            bbox,
        })
}

fn dataset_strategy() -> impl Strategy<Value = Dataset> {
    (1usize..6, 1u16..5, 1usize..4).prop_flat_map(|(g, c, half)| {
        prop::collection::vec(sample_strategy(g, c), 0..12).prop_map(move |samples| Dataset {
            image_size: g,
            n_classes: usize::from(c),
            n_views: 2 * half,
            samples,
        })
    })
}

proptest! {
    #[test]
    fn dataset_round_trip_is_bitwise(data in dataset_strategy()) {
        let bytes = dataset_bytes(&data).unwrap();
        let back = read_dataset_from(bytes.as_slice()).unwrap();
        prop_assert_eq!(back.image_size, data.image_size);
        prop_assert_eq!(back.samples.len(), data.samples.len());
        for (a, b) in back.samples.iter().zip(&data.samples) {
            prop_assert_eq!(a.image.iter().map(|p| p.to_bits()).collect::<Vec<_>>(), b.image.iter().map(|p| p.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(a.label, b.label);
            prop_assert_eq!(a.azimuth.map(f32::to_bits), b.azimuth.map(f32::to_bits));
            prop_assert_eq!(a.bbox.map(f32::to_bits), b.bbox.map(f32::to_bits));
        }
        prop_assert_eq!(dataset_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise(seed in any::<u64>(), baseline in any::<bool>(), flip in any::<bool>(), scale in -1e300f64..1e300) {
        let arch = Architecture {
            k: 3,
            n_views: 4,
            n_classes: 2,
            ch_in: 2,
            ch_out: 3,
            head_mode: if baseline { HeadMode::Baseline } else { HeadMode::Ccn },
            pad_mode: if flip { PadMode::Flip } else { PadMode::Wrap },
        };
        let mut model = Model::init(arch, [2, 3, 4], seed).unwrap();
        // exercise extreme payloads as well as ordinary ones
        let t = &mut model.params[1].tensor;
        *t = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * scale).collect()).unwrap();
        let bytes = checkpoint_bytes(&model).unwrap();
        let back = read_checkpoint_from(bytes.as_slice()).unwrap();
        prop_assert_eq!(&back, &model);
        prop_assert_eq!(checkpoint_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn every_truncation_is_reported(cut in 0usize..400) {
        let data = Dataset { image_size: 3, n_classes: 2, n_views: 4, samples: vec![
            Sample { image: vec![0.5; 9], label: 1, azimuth: Some(0.25), bbox: [1.0, 1.0, 2.0, 2.0] },
            Sample { image: vec![0.0; 9], label: 0, azimuth: None, bbox: [1.5, 1.5, 3.0, 3.0] },
        ] };
        let bytes = dataset_bytes(&data).unwrap();
        let cut = cut % bytes.len();
        match read_dataset_from(&bytes[..cut]) {
            Err(FormatError::Truncated { offset, .. }) => prop_assert!(offset <= cut as u64),
            other => prop_assert!(false, "cut {} gave {:?}", cut, other.map(|d| d.len())),
        }
    }
}

#[test]
fn generated_split_round_trips_field_by_field() {
    let data = generate_dataset(&GenConfig::default()).unwrap();
    let total = data.train.len() + data.val.len();
    assert!(total >= 720);
    for set in [&data.train, &data.val] {
        let back = read_dataset_from(dataset_bytes(set).unwrap().as_slice()).unwrap();
        assert_eq!(&back, set);
    }
}

#[test]
fn nan_azimuth_means_unannotated() {
    let data = Dataset {
        image_size: 1,
        n_classes: 1,
        n_views: 2,
        samples: vec![Sample { image: vec![0.0], label: 1, azimuth: None, bbox: [0.5, 0.5, 1.0, 1.0] }],
    };
    let bytes = dataset_bytes(&data).unwrap();
    let az = &bytes[DATASET_HEADER_LEN as usize + 4 + 2..][..4];
    assert_eq!(u32::from_le_bytes(az.try_into().unwrap()), UNANNOTATED_BITS);
    assert!(f32::from_bits(UNANNOTATED_BITS).is_nan());
    assert_eq!(read_dataset_from(bytes.as_slice()).unwrap().samples[0].azimuth, None);
}

#[test]
fn corrupted_magic_fails_at_offset_zero() {
    let mut bytes = dataset_bytes(&generate_dataset(&small_gen()).unwrap().val).unwrap();
    bytes[0] = b'X';
    match read_dataset_from(bytes.as_slice()) {
        Err(FormatError::Malformed { offset: 0, .. }) => {}
        other => panic!("{:?}", other.map(|d| d.len())),
    }
    let mut ckpt = checkpoint_bytes(&Model::init(arch(), DEFAULT_BACKBONE_WIDTHS, 1).unwrap()).unwrap();
    ckpt[2] = 0;
    assert!(matches!(read_checkpoint_from(ckpt.as_slice()), Err(FormatError::Malformed { offset: 0, .. })));
}

fn arch() -> Architecture {
    Architecture { k: 7, n_views: 8, n_classes: 3, ch_in: 4, ch_out: 4, head_mode: HeadMode::Ccn, pad_mode: PadMode::Wrap }
}

#[test]
fn malformed_fields_name_their_offset() {
    let data = Dataset {
        image_size: 2,
        n_classes: 2,
        n_views: 4,
        samples: vec![Sample { image: vec![0.1; 4], label: 2, azimuth: Some(1.0), bbox: [1.0, 1.0, 2.0, 2.0] }],
    };
    let bytes = dataset_bytes(&data).unwrap();
    let rec = DATASET_HEADER_LEN as usize;
    let at = |e: Result<Dataset, FormatError>| match e {
        Err(FormatError::Malformed { offset, .. }) => offset,
        other => panic!("{:?}", other.map(|d| d.len())),
    };

    let mut b = bytes.clone();
    b[4] = 9;
    assert_eq!(at(read_dataset_from(b.as_slice())), 4);

    let mut b = bytes.clone();
    b[rec + 4..rec + 8].copy_from_slice(&2.0f32.to_le_bytes());
    assert_eq!(at(read_dataset_from(b.as_slice())), (rec + 4) as u64);

    let mut b = bytes.clone();
    b[rec + 16..rec + 18].copy_from_slice(&3u16.to_le_bytes());
    assert_eq!(at(read_dataset_from(b.as_slice())), (rec + 16) as u64);

    let mut b = bytes.clone();
    b[rec + 18..rec + 22].copy_from_slice(&0x7fc0_0001u32.to_le_bytes());
    assert_eq!(at(read_dataset_from(b.as_slice())), (rec + 18) as u64);

    let mut b = bytes.clone();
    b.push(0);
    assert_eq!(at(read_dataset_from(b.as_slice())), bytes.len() as u64);
}

#[test]
fn streaming_reader_yields_records_in_order() {
    let set = generate_dataset(&small_gen()).unwrap().val;
    let bytes = dataset_bytes(&set).unwrap();
    let mut reader = DatasetReader::new(bytes.as_slice()).unwrap();
    assert_eq!(reader.header().n_samples as usize, set.len());
    let rec = reader.header().record_len();
    let first = reader.next().unwrap().unwrap();
    assert_eq!(first, set.samples[0]);
    assert_eq!(reader.offset(), DATASET_HEADER_LEN + rec);
    assert_eq!(reader.count(), set.len() - 1);
}

#[test]
fn checkpoint_with_wrong_tensor_is_rejected() {
    let mut model = Model::init(arch(), DEFAULT_BACKBONE_WIDTHS, 3).unwrap();
    model.params[9].name = "cylinder.middle".into();
    let bytes = checkpoint_bytes(&model).unwrap();
    assert!(read_checkpoint_from(bytes.as_slice()).is_err());
}

#[test]
fn atomic_write_replaces_whole_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("set.ccns");
    let set = generate_dataset(&small_gen()).unwrap().val;
    write_dataset(&path, &set).unwrap();
    let first = std::fs::read(&path).unwrap();
    write_dataset(&path, &set).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
    assert_eq!(read_dataset(&path).unwrap(), set);
    // only the target remains in the directory
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
}
