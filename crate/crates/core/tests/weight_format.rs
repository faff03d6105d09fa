//! The container layout and parameter names an external exporter must emit.

use kintile_core::{Generator, GeneratorConfig, KinError, NormMode, TranslateOptions, WeightStore};

/// Serializes entries the way an exporter written from the format
/// description would, independent of `WeightStore::to_bytes`.
fn encode(entries: &[(String, Vec<usize>, Vec<f32>)]) -> Vec<u8> {
    let mut out = b"URW1".to_vec();
    out.extend(1u32.to_le_bytes());
    out.extend((entries.len() as u32).to_le_bytes());
    for (name, dims, data) in entries {
        out.extend((name.len() as u16).to_le_bytes());
        out.extend(name.as_bytes());
        out.push(dims.len() as u8);
        for &d in dims {
            out.extend((d as u32).to_le_bytes());
        }
        for &v in data {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

fn tiny() -> GeneratorConfig {
    GeneratorConfig {
        base_width: 2,
        n_resblocks: 1,
        patch_size: 16,
        ..GeneratorConfig::default()
    }
}

fn entries(cfg: &GeneratorConfig) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut e: Vec<_> = cfg
        .parameter_specs()
        .into_iter()
        .enumerate()
        .map(|(i, (name, dims))| {
            let n: usize = dims.iter().product();
            let data = (0..n).map(|j| ((i * 31 + j * 7) % 13) as f32 * 0.01 - 0.05).collect();
            (name, dims, data)
        })
        .collect();
    e.sort_by(|a, b| a.0.cmp(&b.0));
    e
}

#[test]
fn canonical_names_for_one_block() {
    let names: Vec<String> = tiny().parameter_specs().into_iter().map(|(n, _)| n).collect();
    let mut expected: Vec<String> = ["stem", "down1", "down2", "res1", "up1", "up2", "head"]
        .iter()
        .flat_map(|p| match *p {
            "res1" => vec!["res1.conv1".to_string(), "res1.conv2".to_string()],
            p => vec![format!("{p}.conv")],
        })
        .flat_map(|c| [format!("{c}.weight"), format!("{c}.bias")])
        .collect();
    for k in 1..=7 {
        expected.push(format!("norm{k}.gamma"));
        expected.push(format!("norm{k}.beta"));
    }
    assert_eq!(names, expected);
}

#[test]
fn transposed_weights_use_cout_first() {
    let specs = tiny().parameter_specs();
    let dims = |name: &str| specs.iter().find(|(n, _)| n == name).unwrap().1.clone();
    assert_eq!(dims("up1.conv.weight"), [4, 8, 3, 3]);
    assert_eq!(dims("up2.conv.weight"), [2, 4, 3, 3]);
    assert_eq!(dims("norm7.gamma"), [2]);
}

#[test]
fn externally_encoded_container_loads() {
    let cfg = tiny();
    let bytes = encode(&entries(&cfg));
    let store = WeightStore::from_bytes(&bytes).unwrap();
    assert_eq!(store.to_bytes().unwrap(), bytes);

    let inferred = GeneratorConfig::infer_from_store(&store, 16).unwrap();
    assert_eq!(inferred, cfg);
    let gen = Generator::from_store(inferred, &store, false).unwrap();
    let img = kintile_core::synthetic_gradient(32, 16, 0).to_tensor();
    let (out, _) = kintile_core::translate(&img, &gen, &TranslateOptions::new(NormMode::PatchIn)).unwrap();
    assert_eq!(out.shape(), [1, 3, 16, 32]);
}

#[test]
fn unsorted_or_trailing_bytes_are_rejected() {
    let cfg = tiny();
    let mut e = entries(&cfg);
    let mut bytes = encode(&e);
    bytes.push(0);
    assert!(WeightStore::from_bytes(&bytes).is_err());

    e.swap(0, 1);
    assert!(WeightStore::from_bytes(&encode(&e)).is_err());
}

#[test]
fn missing_parameter_is_named() {
    let cfg = tiny();
    let e: Vec<_> = entries(&cfg).into_iter().filter(|(n, _, _)| n != "norm3.beta").collect();
    let store = WeightStore::from_bytes(&encode(&e)).unwrap();
    let err = Generator::from_store(cfg, &store, false).unwrap_err();
    assert!(matches!(err, KinError::MissingParameter(_)), "{err}");
    assert!(err.to_string().contains("norm3.beta"));
}
