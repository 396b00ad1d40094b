use super::*;
use crate::adapters::Ablation;

fn cfg() -> ModelConfig {
    ModelConfig { layers: 2, heads: 2, d_visual: 3, d_model: 6, vocab: 11, grid: 2, max_text: 5 }
}

fn trained() -> (BaseModel, AdapterSet) {
    let base = BaseModel::new(cfg(), 1).unwrap();
    let mut adapters = AdapterSet::new(AdapterConfig { init_scale: 0.3, ..AdapterConfig::default() }, &cfg(), 2).unwrap();
    adapters.randomize(3, 0.7);
    (base, adapters)
}

fn bits(store: &ParamStore) -> Vec<(String, Vec<usize>, Vec<u64>)> {
    store.iter().map(|p| (p.name.clone(), p.value.shape().to_vec(), p.value.data().iter().map(|v| v.to_bits()).collect())).collect()
}

#[test]
fn round_trip_is_bit_exact() {
    let (base, adapters) = trained();
    let bytes = to_bytes(&base, Some(&adapters)).unwrap();
    assert_eq!(&bytes[..8], MAGIC);
    let back = from_bytes(&bytes).unwrap();
    assert_eq!(bits(&back.base.store), bits(&base.store));
    let a = back.adapters.as_ref().unwrap();
    assert_eq!(bits(&a.store), bits(&adapters.store));
    assert_eq!(a.config, adapters.config);
    assert_eq!(to_bytes(&back.base, back.adapters.as_ref()).unwrap(), bytes);

    let base_only = from_bytes(&to_bytes(&base, None).unwrap()).unwrap();
    assert!(base_only.adapters.is_none());
}

#[test]
fn header_is_documented_json() {
    let (base, adapters) = trained();
    let bytes = to_bytes(&base, Some(&adapters)).unwrap();
    let (header, data) = read_header(&bytes).unwrap();
    assert_eq!((header.format.as_str(), header.version), (FORMAT, VERSION));
    assert!(header.tensors.iter().all(|t| t.name.starts_with("base.") || t.name.starts_with("adapters.layers.")));
    let values: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    assert_eq!(data.len(), 8 * values);
}

#[test]
fn ablated_layouts_survive_the_round_trip() {
    for ablation in [Ablation::NoQmoe, Ablation::NoKmoe, Ablation::NoA3moe] {
        let c = AdapterConfig::default().with_ablation(ablation);
        let adapters = AdapterSet::new(c, &cfg(), 4).unwrap();
        let base = BaseModel::new(cfg(), 5).unwrap();
        let back = from_bytes(&to_bytes(&base, Some(&adapters)).unwrap()).unwrap();
        assert_eq!(bits(&back.adapters.unwrap().store), bits(&adapters.store));
    }
}

#[test]
fn corrupted_or_mismatched_files_are_rejected() {
    let (base, adapters) = trained();
    let bytes = to_bytes(&base, Some(&adapters)).unwrap();
    assert!(matches!(from_bytes(b"NOTACKPT"), Err(Error::Format(_))));
    assert!(matches!(from_bytes(&bytes[..bytes.len() - 8]), Err(Error::Format(_))));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(from_bytes(&long), Err(Error::Format(_))));

    let (mut header, data) = read_header(&bytes).unwrap();
    let rebuild = |h: &CheckpointHeader| {
        let json = serde_json::to_vec(h).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend((json.len() as u64).to_le_bytes());
        out.extend(json);
        out.extend(data);
        out
    };
    header.version = 99;
    assert!(matches!(from_bytes(&rebuild(&header)), Err(Error::Compatibility(_))));
    header.version = VERSION;
    header.tensors[0].name = "base.bogus".into();
    assert!(matches!(from_bytes(&rebuild(&header)), Err(Error::Compatibility(_))));

    let back = from_bytes(&bytes).unwrap();
    assert!(back.require_model(&cfg()).is_ok());
    assert!(matches!(back.require_model(&ModelConfig { heads: 3, d_model: 6, ..cfg() }), Err(Error::Compatibility(_))));
}

#[test]
fn files_on_disk() {
    let (base, adapters) = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save(&path, &base, Some(&adapters)).unwrap();
    let back = load(&path).unwrap();
    assert_eq!(bits(&back.adapters.unwrap().store), bits(&adapters.store));
    assert!(matches!(load(&dir.path().join("missing")), Err(Error::Io(_))));
}
