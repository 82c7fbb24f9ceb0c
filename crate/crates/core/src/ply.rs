//! Gaussian scenes in the binary little-endian PLY layout used by common
//! Gaussian splatting exports.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::{Gaussian3D, Rgb, Vec3};
use crate::sh;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

struct Element {
    name: String,
    count: usize,
    props: Vec<(String, Scalar)>,
}

fn parse_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), msg: msg.into() }
}

fn rest_name(i: usize) -> String {
    format!("f_rest_{i}")
}

pub fn load_ply(path: &Path) -> Result<Vec<Gaussian3D>> {
    let bytes = fs::read(path)?;
    parse_ply(&bytes, path)
}

pub fn parse_ply(bytes: &[u8], path: &Path) -> Result<Vec<Gaussian3D>> {
    const END: &[u8] = b"end_header\n";
    let end = bytes.windows(END.len()).position(|w| w == END).ok_or_else(|| parse_err(path, "missing end_header"))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| parse_err(path, "header is not ASCII"))?;
    let mut body = &bytes[end + END.len()..];

    let mut elements: Vec<Element> = Vec::new();
    for (lineno, line) in header.lines().enumerate() {
        let at = |m: &str| parse_err(path, format!("header line {}: {m}", lineno + 1));
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["ply"] | [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", "binary_little_endian", "1.0"] => {}
            ["format", other, ..] => return Err(at(&format!("unsupported format {other}"))),
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| at("bad element count"))?,
                props: Vec::new(),
            }),
            ["property", "list", ..] => return Err(at("list properties are not supported")),
            ["property", ty, name] => {
                let ty = Scalar::parse(ty).ok_or_else(|| at(&format!("unknown type {ty}")))?;
                elements.last_mut().ok_or_else(|| at("property before element"))?.props.push((name.to_string(), ty));
            }
            _ => return Err(at(&format!("unrecognized line `{line}`"))),
        }
    }
    if !header.starts_with("ply") {
        return Err(parse_err(path, "missing ply magic"));
    }

    let mut scene = None;
    for el in &elements {
        let stride: usize = el.props.iter().map(|p| p.1.size()).sum();
        let need = stride * el.count;
        if body.len() < need {
            return Err(parse_err(
                path,
                format!("element {} truncated: need {need} bytes, have {}", el.name, body.len()),
            ));
        }
        if el.name == "vertex" {
            scene = Some(read_vertices(el, &body[..need], path)?);
        }
        body = &body[need..];
    }
    scene.ok_or_else(|| parse_err(path, "no vertex element"))
}

fn read_vertices(el: &Element, data: &[u8], path: &Path) -> Result<Vec<Gaussian3D>> {
    let mut offsets = std::collections::HashMap::new();
    let mut off = 0;
    for (name, ty) in &el.props {
        offsets.insert(name.as_str(), (off, *ty));
        off += ty.size();
    }
    let stride = off;
    let n_rest = (0..).take_while(|i| offsets.contains_key(rest_name(*i).as_str())).count();
    let degree = match n_rest {
        0 => 0,
        9 => 1,
        24 => 2,
        45 => 3,
        n => return Err(parse_err(path, format!("{n} f_rest properties do not match any SH degree"))),
    };
    let mut required: Vec<String> = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity"].map(String::from).to_vec();
    required.extend((0..3).map(|i| format!("scale_{i}")));
    required.extend((0..4).map(|i| format!("rot_{i}")));
    for r in &required {
        if !offsets.contains_key(r.as_str()) {
            return Err(parse_err(path, format!("missing vertex property {r}")));
        }
    }
    let known = |n: &str| {
        required.iter().any(|r| r == n)
            || ["nx", "ny", "nz"].contains(&n)
            || n.strip_prefix("f_rest_").is_some_and(|i| i.parse::<usize>().is_ok_and(|i| i < n_rest))
    };
    for (name, _) in &el.props {
        if !known(name) {
            log::warn!("{}: ignoring vertex property {name}", path.display());
        }
    }

    let k = sh::coeff_count(degree);
    Ok((0..el.count)
        .map(|v| {
            let row = &data[v * stride..(v + 1) * stride];
            let get = |name: &str| {
                let (o, ty) = offsets[name];
                ty.read(&row[o..])
            };
            let mut coeffs: Vec<Rgb> = vec![[get("f_dc_0"), get("f_dc_1"), get("f_dc_2")]];
            for b in 1..k {
                coeffs.push(std::array::from_fn(|c| get(&rest_name(c * (k - 1) + b - 1))));
            }
            Gaussian3D {
                mean: Vec3::new(get("x"), get("y"), get("z")),
                log_scale: Vec3::new(get("scale_0"), get("scale_1"), get("scale_2")),
                rotation: [get("rot_0"), get("rot_1"), get("rot_2"), get("rot_3")],
                opacity_logit: get("opacity"),
                sh: coeffs,
            }
        })
        .collect())
}

/// Writes float32 properties in the usual export order. All Gaussians must
/// share one SH degree.
pub fn save_ply(scene: &[Gaussian3D], path: &Path) -> Result<()> {
    let k = scene.first().map_or(1, |g| g.sh.len());
    sh::degree_from_len(k)?;
    if let Some(g) = scene.iter().find(|g| g.sh.len() != k) {
        return Err(Error::ShapeMismatch(format!("mixed SH sizes {} and {}", k, g.sh.len())));
    }
    let mut names: Vec<String> =
        ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"].map(String::from).to_vec();
    names.extend((0..3 * (k - 1)).map(rest_name));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));

    let mut out = Vec::new();
    writeln!(out, "ply\nformat binary_little_endian 1.0\nelement vertex {}", scene.len())?;
    for n in &names {
        writeln!(out, "property float {n}")?;
    }
    writeln!(out, "end_header")?;
    for g in scene {
        let mut row: Vec<f64> = vec![g.mean.x, g.mean.y, g.mean.z, 0.0, 0.0, 0.0];
        row.extend_from_slice(&g.sh[0]);
        for c in 0..3 {
            for b in 1..k {
                row.push(g.sh[b][c]);
            }
        }
        row.push(g.opacity_logit);
        row.extend(g.log_scale.iter());
        row.extend(g.rotation);
        for v in row {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::random_scene;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for degree in 0..=3 {
            let scene = random_scene(&mut rng, 7, degree);
            let a = dir.path().join(format!("a{degree}.ply"));
            let b = dir.path().join(format!("b{degree}.ply"));
            save_ply(&scene, &a).unwrap();
            let first = load_ply(&a).unwrap();
            save_ply(&first, &b).unwrap();
            let second = load_ply(&b).unwrap();
            assert_eq!(first, second);
            assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
            assert_eq!(first[0].sh.len(), sh::coeff_count(degree));
            assert_eq!(first[3].sh[0][1], scene[3].sh[0][1] as f32 as f64);
        }
    }

    #[test]
    fn empty_scene_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.ply");
        save_ply(&[], &p).unwrap();
        assert!(load_ply(&p).unwrap().is_empty());
    }

    #[test]
    fn channel_major_rest_layout() {
        let mut g = random_scene(&mut ChaCha8Rng::seed_from_u64(2), 1, 1).pop().unwrap();
        g.sh[1] = [1.0, 2.0, 3.0];
        g.sh[2] = [4.0, 5.0, 6.0];
        g.sh[3] = [7.0, 8.0, 9.0];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.ply");
        save_ply(&[g], &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        let start = bytes.windows(11).position(|w| w == b"end_header\n").unwrap() + 11;
        let floats: Vec<f32> = bytes[start..].chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        assert_eq!(&floats[9..18], &[1.0, 4.0, 7.0, 2.0, 5.0, 8.0, 3.0, 6.0, 9.0]);
    }

    #[test]
    fn missing_property_is_reported() {
        let header = b"ply\nformat binary_little_endian 1.0\nelement vertex 0\nproperty float x\nend_header\n";
        let err = parse_ply(header, Path::new("t.ply")).unwrap_err();
        assert!(err.to_string().contains("missing vertex property y"), "{err}");
    }

    #[test]
    fn unknown_properties_are_skipped() {
        let mut bytes = b"ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty uchar red\n".to_vec();
        let names = [
            "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1",
            "rot_2", "rot_3",
        ];
        for n in names {
            bytes.extend_from_slice(format!("property float {n}\n").as_bytes());
        }
        bytes.extend_from_slice(b"end_header\n");
        bytes.push(200);
        for i in 0..names.len() {
            bytes.extend_from_slice(&(i as f32).to_le_bytes());
        }
        let g = parse_ply(&bytes, Path::new("t.ply")).unwrap();
        assert_eq!(g[0].mean, Vec3::new(0.0, 1.0, 2.0));
        assert_eq!(g[0].rotation, [10.0, 11.0, 12.0, 13.0]);
    }

    #[test]
    fn truncated_body_is_an_error() {
        let header = b"ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty float x\nend_header\n\0\0\0\0";
        assert!(parse_ply(header, Path::new("t.ply")).unwrap_err().to_string().contains("truncated"));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn any_scene_round_trips(seed in 0u64..10_000, n in 0usize..20, degree in 0usize..=3) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("s.ply");
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            save_ply(&random_scene(&mut rng, n, degree), &path).unwrap();
            let once = load_ply(&path).unwrap();
            save_ply(&once, &path).unwrap();
            proptest::prop_assert_eq!(load_ply(&path).unwrap(), once);
        }
    }
}
