//! Manifest JSON, a NUL byte, then the raw payload.

#![no_main]

use adapt_core::scoring::AttentionTensor;
use adapt_core::tensor_file::{TensorFile, TensorManifest};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let (json, payload) = match data.iter().position(|&b| b == 0) {
        Some(i) => (&data[..i], Some(&data[i + 1..])),
        None => (data, None),
    };
    let Ok(manifest) = TensorManifest::from_json(json) else {
        return;
    };
    if let Ok(tensor) = TensorFile::from_parts(manifest, payload) {
        let expected: usize = tensor.dims.iter().product();
        assert_eq!(expected, tensor.data.len());
        let _ = AttentionTensor::try_from(tensor);
    }
});
