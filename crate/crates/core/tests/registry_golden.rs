use std::collections::BTreeSet;

use csg0_core::{Error, LabelRegistry};

const GTA5_IDD: &str = include_str!("../data/gta5_idd.csv");
const CITYSCAPES_MAPILLARY: &str = include_str!("../data/cityscapes_mapillary.csv");

/// `(domain, name, orig_id, cont_id)` rows read straight from the CSV text.
fn rows(text: &str) -> Vec<(String, String, i64, usize)> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            (
                rec[0].to_string(),
                rec[1].to_string(),
                rec[2].trim().parse().unwrap(),
                rec[3].trim().parse().unwrap(),
            )
        })
        .collect()
}

fn round_trip(text: &str) -> LabelRegistry {
    let reg = LabelRegistry::load_mapping(text).unwrap();
    for (domain, name, orig, cont) in rows(text) {
        if orig < 0 {
            continue;
        }
        assert_eq!(
            reg.remap(&domain, orig).unwrap(),
            cont,
            "{domain}/{name} ({orig})"
        );
    }
    reg
}

#[test]
fn gta5_idd_rows_round_trip() {
    let reg = round_trip(GTA5_IDD);
    assert_eq!(reg.remap("gta5", 7).unwrap(), 7);
    assert_eq!(reg.remap("idd", 0).unwrap(), 7);
    assert_eq!(reg.remap("idd", 11).unwrap(), 38);
}

#[test]
fn cityscapes_mapillary_rows_round_trip() {
    let reg = round_trip(CITYSCAPES_MAPILLARY);
    assert_eq!(reg.remap("cityscapes", 7).unwrap(), 7);
    assert_eq!(reg.remap("mapillary", 2).unwrap(), 37);
    assert_eq!(reg.remap("mapillary", 9).unwrap(), 37);
    assert_eq!(reg.remap("mapillary", 44).unwrap(), 17);
}

#[test]
fn idd_class_counts() {
    let reg = LabelRegistry::load_mapping(GTA5_IDD).unwrap();
    assert_eq!(reg.base_classes(), 35);
    assert_eq!(reg.total_classes(1).unwrap(), 44);
    assert_eq!(reg.step(1).unwrap().c_new, 9);
}

#[test]
fn mapillary_class_count() {
    let reg = LabelRegistry::load_mapping(CITYSCAPES_MAPILLARY).unwrap();
    assert_eq!(reg.total_classes(1).unwrap(), 64);
}

#[test]
fn counts_match_an_independent_tally() {
    for text in [GTA5_IDD, CITYSCAPES_MAPILLARY] {
        let reg = LabelRegistry::load_mapping(text).unwrap();
        let all = rows(text);
        let base_domain = &all[0].0;
        let base: BTreeSet<usize> = all
            .iter()
            .filter(|r| &r.0 == base_domain)
            .map(|r| r.3)
            .collect();
        let every: BTreeSet<usize> = all.iter().map(|r| r.3).collect();
        assert_eq!(reg.base_classes(), base.len());
        assert_eq!(reg.total_classes(1).unwrap(), every.len());
        assert_eq!(reg.step(1).unwrap().c_new, every.difference(&base).count());
    }
}

#[test]
fn unknown_original_id_is_a_lookup_error() {
    let reg = LabelRegistry::load_mapping(GTA5_IDD).unwrap();
    assert!(matches!(reg.remap("idd", 99), Err(Error::Lookup(_))));
    assert!(matches!(reg.remap("nowhere", 0), Err(Error::Lookup(_))));
}

#[test]
fn unmapped_rows_are_not_sampleable() {
    let reg = LabelRegistry::load_mapping(GTA5_IDD).unwrap();
    let terrain = reg.classes_of("idd").find(|d| d.name == "terrain").unwrap();
    assert!(!terrain.sampleable());
    assert!(!reg.sampleable_ids("idd").contains(&22));
    assert!(reg.sampleable_ids("idd").contains(&38));
}

#[test]
fn csv_serialization_round_trips() {
    for text in [GTA5_IDD, CITYSCAPES_MAPILLARY] {
        let reg = LabelRegistry::load_mapping(text).unwrap();
        assert_eq!(LabelRegistry::load_mapping(&reg.to_csv()).unwrap(), reg);
    }
}

#[test]
fn malformed_rows_report_their_line() {
    let bad = "domain,name,orig_id,cont_id\nbase,a,0,0\nbase,b,x,1\n";
    match LabelRegistry::load_mapping(bad) {
        Err(Error::Parse { row, .. }) => assert_eq!(row, 3),
        other => panic!("expected parse error, got {other:?}"),
    }
}
