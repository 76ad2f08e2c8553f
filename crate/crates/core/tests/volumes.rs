use volseg::volumes::{decode_container, encode_container, load_mask, load_volume, save_mask, save_volume};
use volseg::volumes::Dims;
use volseg::*;

#[test]
fn files_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let (v, m) = generate_phantom(&PhantomSpec::new(24, 16, 12, DomainTag::Pediatric, 5)).unwrap();
    save_volume(&v, dir.path().join("p5")).unwrap();
    save_mask(&m, v.voxel_id(), dir.path().join("p5_mask")).unwrap();
    assert_eq!(load_volume(dir.path().join("p5")).unwrap(), v);
    let (mask, id) = load_mask(dir.path().join("p5_mask")).unwrap();
    assert_eq!(mask, m);
    assert_eq!(id, v.voxel_id());
}

#[test]
fn container_matches_header_and_rejects_trailing_bytes() {
    let (v, _) = generate_phantom(&PhantomSpec::new(16, 16, 16, DomainTag::Ssa, 1)).unwrap();
    let mut bytes = encode_container(&v);
    let (h, back) = decode_container(&bytes).unwrap();
    assert_eq!(back, v);
    assert_eq!(h.modalities, ["T1", "T1c", "T2", "T2-FLAIR"]);
    bytes.push(0);
    assert!(matches!(decode_container(&bytes), Err(Error::PayloadSize { .. })));
}

#[test]
fn normalization_of_a_hand_volume() {
    // Modality 0 foreground {1, 3}: mean 2, std 1. Other channels {2, 6}: mean 4, std 2.
    let dims = Dims {
        depth: 1,
        height: 1,
        width: 3,
    };
    let mut data = vec![1.0, 0.0, 3.0];
    for _ in 1..4 {
        data.extend([2.0, 6.0, 0.0]);
    }
    let n = Volume::new(dims, "h", data).unwrap().normalize().unwrap();
    assert_eq!(n.modality(0), &[-1.0, 0.0, 1.0]);
    assert_eq!(n.modality(3), &[-1.0, 1.0, 0.0]);
}

#[test]
fn domains_differ_in_visibility_not_in_format() {
    let vols: Vec<(Volume, SegMask)> = DomainTag::ALL
        .iter()
        .map(|d| generate_phantom(&PhantomSpec::new(32, 32, 16, *d, 3)).unwrap())
        .collect();
    for (v, m) in &vols {
        assert_eq!(v.dims(), m.dims());
        assert!(m.count() > 0);
        assert!(v.normalize().is_ok());
    }
    assert_ne!(vols[0].0.data(), vols[1].0.data());
}

#[test]
fn modality_transform_labels_parse_back() {
    for s in ["all", "replicate:T2-FLAIR", "drop:T1c"] {
        assert_eq!(ModalityTransform::parse(s).unwrap().label(), s);
    }
    assert!(ModalityTransform::parse("keep:T1").is_err());
}
