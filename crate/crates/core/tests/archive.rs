mod common;

use common::*;
use proptest::prelude::*;
use qnet::archive::{decode_blob, decode_integer, decode_manifest, decode_network, encode_integer, encode_network, load_network, save_network, Provenance};
use qnet::integer::compile_model;
use qnet::layers::replace_bn_relu;

#[test]
fn float_archive_round_trips_and_detects_tampering() {
    let data = small_task(1);
    let net = quantized(&data, 2, 4, 1);
    let prov = Provenance::new("Q24", 1, Some("cfg"));
    let enc = encode_network(&net, &prov).unwrap();
    let (back, p) = decode_network(&enc.manifest, &enc.blob).unwrap();
    assert_eq!(back, net);
    assert_eq!(p, prov);
    let again = encode_network(&back, &prov).unwrap();
    assert_eq!((again.manifest.clone(), again.blob.clone()), (enc.manifest.clone(), enc.blob.clone()));

    let mut blob = enc.blob.clone();
    blob[3] ^= 1;
    assert!(decode_network(&enc.manifest, &blob).is_err());
    assert!(decode_network(&enc.manifest, &enc.blob[..enc.blob.len() - 4]).is_err());

    let dir = tempfile::tempdir().unwrap();
    save_network(&net, &prov, dir.path()).unwrap();
    assert_eq!(load_network(dir.path()).unwrap().0, net);
}

fn sample_archives() -> (Vec<u8>, Vec<u8>, Vec<u8>, Vec<u8>) {
    let data = small_task(2);
    let fq = replace_bn_relu(&quantized(&data, 2, 4, 2)).unwrap();
    let f = encode_network(&fq, &Provenance::new("FQ24", 2, None)).unwrap();
    let i = encode_integer(&compile_model(&fq).unwrap(), &Provenance::new("int", 2, None)).unwrap();
    (f.manifest, f.blob, i.manifest, i.blob)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn decoders_reject_garbage_without_panicking(bytes in prop::collection::vec(any::<u8>(), 0..512), blob in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = decode_manifest(&bytes);
        let _ = decode_network(&bytes, &blob);
        let _ = decode_integer(&bytes, &blob);
    }

    #[test]
    fn corrupted_archives_fail_cleanly(pos in any::<prop::sample::Index>(), val in any::<u8>(), which in 0usize..4) {
        let (mut fm, mut fb, mut im, mut ib) = sample_archives();
        let target = [&mut fm, &mut fb, &mut im, &mut ib][which].as_mut_slice() as *mut [u8];
        // SAFETY: the pointer refers to one of the live local vectors above
        let target = unsafe { &mut *target };
        let i = pos.index(target.len());
        target[i] = val;
        let _ = decode_network(&fm, &fb);
        let _ = decode_integer(&im, &ib);
        if let Ok(m) = decode_manifest(&fm) {
            let _ = decode_blob(&m, &fb);
        }
    }
}

fn fuzz_seed(target: &str, name: &str) -> Vec<u8> {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target).join(name);
    std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn split_seed(data: &[u8]) -> (&[u8], &[u8]) {
    let n = u32::from_le_bytes(data[..4].try_into().unwrap()) as usize;
    data[4..].split_at(n)
}

#[test]
fn fuzz_seeds_are_valid_inputs() {
    for name in ["fq24", "q45"] {
        let seed = fuzz_seed("float_archive", name);
        let (m, b) = split_seed(&seed);
        decode_network(m, b).unwrap();
    }
    let seed = fuzz_seed("integer_archive", "int");
    let (m, b) = split_seed(&seed);
    decode_integer(m, b).unwrap();
    for name in ["run.toml", "minimal.toml"] {
        qnet::config::RunConfig::from_toml(std::str::from_utf8(&fuzz_seed("config", name)).unwrap()).unwrap();
    }
    let csv = fuzz_seed("csv", "one_d");
    let schema = qnet::data::CsvSchema { sample_shape: vec![3], n_classes: 2 };
    assert_eq!(qnet::data::read_csv_features(&csv[1..], &schema, "one_d".as_ref()).unwrap().len(), 2);
}
