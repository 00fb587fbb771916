#![no_main]

use libfuzzer_sys::fuzz_target;
use qnet::data::{read_csv_features, CsvSchema};

fuzz_target!(|data: &[u8]| {
    // first byte picks the sample shape so both 1-D and 2-D rows get exercised
    let Some((&sel, rest)) = data.split_first() else { return };
    let schema = CsvSchema { sample_shape: if sel % 2 == 0 { vec![3] } else { vec![2, 2] }, n_classes: 1 + (sel as usize / 2) % 4 };
    let _ = read_csv_features(rest, &schema, "fuzz.csv".as_ref());
});
