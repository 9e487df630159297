mod common;

use leukoct::dicom::{
    encode_dicom, load_patient, parse_dicom, slice_elements, tags, write_dicom, write_patient,
    DicomError, Label, PatientRecord, TransferSyntax,
};
use proptest::prelude::*;

const SYNTAXES: [TransferSyntax; 2] = [
    TransferSyntax::ExplicitVrLittleEndian,
    TransferSyntax::ImplicitVrLittleEndian,
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn written_slices_parse_back_exactly(seed in any::<u64>(), explicit in any::<bool>()) {
        let slice = common::random_slice(&mut common::rng(seed));
        let syntax = SYNTAXES[usize::from(!explicit)];
        let bytes = write_dicom(&slice, syntax).unwrap();
        prop_assert_eq!(parse_dicom(&bytes).unwrap(), slice);
    }

    #[test]
    fn writer_is_deterministic(seed in any::<u64>()) {
        let slice = common::random_slice(&mut common::rng(seed));
        let a = write_dicom(&slice, TransferSyntax::ExplicitVrLittleEndian).unwrap();
        let b = write_dicom(&slice, TransferSyntax::ExplicitVrLittleEndian).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn truncation_never_panics(seed in any::<u64>(), cut in 0.0f64..1.0) {
        let slice = common::random_slice(&mut common::rng(seed));
        let bytes = write_dicom(&slice, TransferSyntax::ExplicitVrLittleEndian).unwrap();
        let n = (bytes.len() as f64 * cut) as usize;
        prop_assert!(parse_dicom(&bytes[..n]).is_err());
    }
}

#[test]
fn each_missing_required_tag_is_named() {
    let slice = common::random_slice(&mut common::rng(7));
    for syntax in SYNTAXES {
        for tag in tags::REQUIRED {
            let els: Vec<_> = slice_elements(&slice)
                .unwrap()
                .into_iter()
                .filter(|e| e.tag != tag)
                .collect();
            match parse_dicom(&encode_dicom(&els, syntax)) {
                Err(DicomError::MissingTag(t)) => assert_eq!(t, tag),
                other => panic!("{tag} removed under {syntax:?}: {other:?}"),
            }
        }
    }
}

fn record(id: &str, positions: &[Option<f64>], instances: &[i32]) -> PatientRecord {
    let mut r = common::rng(3);
    let slices = positions
        .iter()
        .zip(instances)
        .map(|(&p, &i)| {
            let mut s = common::random_slice(&mut r);
            s.slice_position = p;
            s.instance_number = i;
            s
        })
        .collect();
    PatientRecord {
        patient_id: id.into(),
        slices,
        label: Label::Positive,
        finding_text: Some("periventricular hypodensity".into()),
    }
}

#[test]
fn patient_directory_round_trip_orders_by_position() {
    let tmp = tempfile::tempdir().unwrap();
    let rec = record("P1", &[Some(10.0), Some(-5.0), Some(2.5)], &[1, 2, 3]);
    write_patient(tmp.path(), &rec, TransferSyntax::ImplicitVrLittleEndian).unwrap();
    let back = load_patient(tmp.path()).unwrap();
    assert_eq!(back.patient_id, "P1");
    assert_eq!(back.label, Label::Positive);
    assert_eq!(back.finding_text, rec.finding_text);
    let order: Vec<_> = back.slices.iter().map(|s| s.slice_position).collect();
    assert_eq!(order, vec![Some(-5.0), Some(2.5), Some(10.0)]);
}

#[test]
fn partial_positions_fall_back_to_instance_number() {
    let tmp = tempfile::tempdir().unwrap();
    let rec = record("P2", &[Some(1.0), None, Some(0.0)], &[9, 4, 6]);
    write_patient(tmp.path(), &rec, TransferSyntax::ExplicitVrLittleEndian).unwrap();
    let back = load_patient(tmp.path()).unwrap();
    let order: Vec<_> = back.slices.iter().map(|s| s.instance_number).collect();
    assert_eq!(order, vec![4, 6, 9]);
}

#[test]
fn duplicate_ordering_key_is_ambiguous() {
    let tmp = tempfile::tempdir().unwrap();
    let rec = record("P3", &[None, None], &[5, 5]);
    write_patient(tmp.path(), &rec, TransferSyntax::ExplicitVrLittleEndian).unwrap();
    assert!(matches!(
        load_patient(tmp.path()),
        Err(DicomError::AmbiguousOrdering { .. })
    ));
}

#[test]
fn missing_sidecar_and_missing_slices() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(matches!(load_patient(tmp.path()), Err(DicomError::MissingSidecar(_))));
    let rec = record("P4", &[Some(0.0)], &[1]);
    write_patient(tmp.path(), &rec, TransferSyntax::ExplicitVrLittleEndian).unwrap();
    std::fs::remove_file(tmp.path().join("P4_0000.dcm")).unwrap();
    assert!(matches!(load_patient(tmp.path()), Err(DicomError::NoSlices(_))));
}
