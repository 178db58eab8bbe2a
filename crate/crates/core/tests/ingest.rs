use std::fs;
use std::path::{Path, PathBuf};

use brainage::ingest::{
    convert_all, read_volume, scan_source, Axis, ImageRecord, Manifest, SliceMode, SlicePolicy, SourceFormat,
};
use brainage::preprocess::{assemble_dataset, load_converted, TENSOR_LEN};
use brainage::Error;

fn write_png_gray(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> u8) {
    let img = image::GrayImage::from_fn(w, h, |x, y| image::Luma([f(x, y)]));
    img.save(path).unwrap();
}

fn write_labels(path: &Path, rows: &[(&str, &str, f64)]) {
    let mut text = String::from("source_path,subject_id,age_years,sex\n");
    for (p, s, a) in rows {
        text.push_str(&format!("{p},{s},{a},F\n"));
    }
    fs::write(path, text).unwrap();
}

fn write_dicom(path: &Path, rows: u16, cols: u16, frames: u16, pixels: &[u16], slope: f64, intercept: f64) {
    use dicom_core::value::PrimitiveValue;
    use dicom_core::{DataElement, VR};
    use dicom_dictionary_std::tags;
    use dicom_object::{FileMetaTableBuilder, InMemDicomObject};

    let mut obj = InMemDicomObject::new_empty();
    let put = |obj: &mut InMemDicomObject, tag, vr, v: PrimitiveValue| {
        obj.put(DataElement::new(tag, vr, v));
    };
    put(&mut obj, tags::SOP_CLASS_UID, VR::UI, "1.2.840.10008.5.1.4.1.1.4".into());
    put(&mut obj, tags::SOP_INSTANCE_UID, VR::UI, "1.2.826.0.1.3680043.2.1125.1".into());
    put(&mut obj, tags::MODALITY, VR::CS, "MR".into());
    put(&mut obj, tags::SAMPLES_PER_PIXEL, VR::US, PrimitiveValue::from(1u16));
    put(&mut obj, tags::PHOTOMETRIC_INTERPRETATION, VR::CS, "MONOCHROME2".into());
    put(&mut obj, tags::ROWS, VR::US, PrimitiveValue::from(rows));
    put(&mut obj, tags::COLUMNS, VR::US, PrimitiveValue::from(cols));
    if frames > 1 {
        put(&mut obj, tags::NUMBER_OF_FRAMES, VR::IS, frames.to_string().into());
    }
    put(&mut obj, tags::BITS_ALLOCATED, VR::US, PrimitiveValue::from(16u16));
    put(&mut obj, tags::BITS_STORED, VR::US, PrimitiveValue::from(16u16));
    put(&mut obj, tags::HIGH_BIT, VR::US, PrimitiveValue::from(15u16));
    put(&mut obj, tags::PIXEL_REPRESENTATION, VR::US, PrimitiveValue::from(0u16));
    put(&mut obj, tags::RESCALE_SLOPE, VR::DS, slope.to_string().into());
    put(&mut obj, tags::RESCALE_INTERCEPT, VR::DS, intercept.to_string().into());
    put(&mut obj, tags::PIXEL_DATA, VR::OW, PrimitiveValue::U16(pixels.iter().copied().collect()));
    let file = obj
        .with_meta(
            FileMetaTableBuilder::new()
                .transfer_syntax("1.2.840.10008.1.2.1")
                .media_storage_sop_class_uid("1.2.840.10008.5.1.4.1.1.4")
                .media_storage_sop_instance_uid("1.2.826.0.1.3680043.2.1125.1"),
        )
        .unwrap();
    file.write_to_file(path).unwrap();
}

/// `(z, y, x)` int16 volume with per-slice real ranges, stored in file
/// order `zspace, yspace, xspace`.
fn write_minc1(path: &Path, dims: [usize; 3], voxels: &[i16], slice_min: &[f64], slice_max: &[f64]) {
    use netcdf3::{DataSet, FileWriter, Version};
    let mut ds = DataSet::new();
    for (name, n) in ["zspace", "yspace", "xspace"].iter().zip(dims) {
        ds.add_fixed_dim(name, n).unwrap();
    }
    ds.add_var_i16("image", &["zspace", "yspace", "xspace"]).unwrap();
    ds.add_var_attr_string("image", "signtype", "signed__").unwrap();
    ds.add_var_attr_f64("image", "valid_range", vec![-1000.0, 1000.0]).unwrap();
    ds.add_var_f64("image-min", &["zspace"]).unwrap();
    ds.add_var_f64("image-max", &["zspace"]).unwrap();
    let mut w = FileWriter::create_new(path).unwrap();
    w.set_def(&ds, Version::Classic, 0).unwrap();
    w.write_var_i16("image", voxels).unwrap();
    w.write_var_f64("image-min", slice_min).unwrap();
    w.write_var_f64("image-max", slice_max).unwrap();
    w.close().unwrap();
}

#[cfg(feature = "minc2")]
fn write_minc2(path: &Path, file_dims: [usize; 3], dimorder: &str, voxels: &[f32]) {
    use hdf5_metno as h5;
    let f = h5::File::create(path).unwrap();
    let g = f.create_group("minc-2.0").unwrap().create_group("image").unwrap().create_group("0").unwrap();
    let ds = g.new_dataset::<f32>().shape(file_dims).create("image").unwrap();
    ds.write_raw(voxels).unwrap();
    let attr = ds.new_attr::<h5::types::VarLenAscii>().create("dimorder").unwrap();
    attr.write_scalar(&h5::types::VarLenAscii::from_ascii(dimorder).unwrap()).unwrap();
}

fn record(rel: &str, format: SourceFormat) -> ImageRecord {
    ImageRecord {
        source_path: rel.into(),
        source_format: format,
        converted_path: None,
        slice: None,
        subject_id: "s1".into(),
        age_years: 40.0,
        sex: Default::default(),
    }
}

fn converted_bytes(r: &ImageRecord) -> Vec<u8> {
    image::open(r.converted_path.as_ref().unwrap()).unwrap().into_rgb8().into_raw()
}

#[test]
fn png_tree_to_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    fs::create_dir_all(src.join("sub")).unwrap();
    write_png_gray(&src.join("b.png"), 224, 224, |x, _| x as u8);
    write_png_gray(&src.join("a.png"), 64, 48, |x, y| (x * 3 + y) as u8);
    write_png_gray(&src.join("sub/c.png"), 224, 224, |_, y| y as u8);
    let labels = tmp.path().join("labels.csv");
    write_labels(&labels, &[("a.png", "s1", 20.5), ("b.png", "s2", 33.0), ("sub/c.png", "s3", 71.0)]);

    let m = scan_source(&src, &labels).unwrap();
    let paths: Vec<&Path> = m.records.iter().map(|r| r.source_path.as_path()).collect();
    assert_eq!(paths, [Path::new("a.png"), Path::new("b.png"), Path::new("sub/c.png")]);

    let out = tmp.path().join("out");
    let report = convert_all(&m, &SlicePolicy::default(), &out).unwrap();
    assert!(report.failures.is_empty());
    let conv = report.manifest.unwrap();
    assert_eq!(conv.len(), 3);
    for r in &conv.records {
        let img = image::open(r.converted_path.as_ref().unwrap()).unwrap();
        assert_eq!((img.width(), img.height()), (224, 224));
        assert_eq!(img.color(), image::ColorType::Rgb8);
        let px = img.into_rgb8().into_raw();
        assert!(px.chunks(3).all(|p| p[0] == p[1] && p[1] == p[2]));
    }
    // native-size gradient 0..223 rescales to the full byte range
    let b = converted_bytes(&conv.records[1]);
    assert_eq!((b[0], b[223 * 3]), (0, 255));

    let ds = assemble_dataset(&conv).unwrap();
    assert_eq!(ds.targets, vec![20.5, 33.0, 71.0]);
    assert_eq!(ds.subjects, vec!["s1", "s2", "s3"]);
    assert!(ds.inputs.iter().all(|x| x.data().len() == TENSOR_LEN));

    // byte-identical on a second conversion
    let again = convert_all(&m, &SlicePolicy::default(), &tmp.path().join("out2")).unwrap();
    for (x, y) in conv.records.iter().zip(&again.manifest.unwrap().records) {
        assert_eq!(
            fs::read(x.converted_path.as_ref().unwrap()).unwrap(),
            fs::read(y.converted_path.as_ref().unwrap()).unwrap()
        );
    }
}

#[test]
fn missing_and_duplicate_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    fs::create_dir_all(&src).unwrap();
    for n in ["a.png", "b.png"] {
        write_png_gray(&src.join(n), 8, 8, |x, y| (x + y) as u8);
    }
    let labels = tmp.path().join("labels.csv");
    write_labels(&labels, &[("a.png", "s1", 30.0)]);
    match scan_source(&src, &labels) {
        Err(Error::MissingLabels(p)) => assert_eq!(p, vec!["b.png"]),
        other => panic!("expected missing labels, got {other:?}"),
    }
    write_labels(&labels, &[("a.png", "s1", 30.0), ("a.png", "s1", 31.0), ("b.png", "s2", 30.0)]);
    assert!(scan_source(&src, &labels).is_err());
}

#[test]
fn corrupt_and_constant_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    fs::create_dir_all(&src).unwrap();
    write_png_gray(&src.join("flat.png"), 30, 30, |_, _| 77);
    write_png_gray(&src.join("ok.png"), 30, 30, |x, _| x as u8);
    // PNG signature followed by garbage
    let mut bad = b"\x89PNG\r\n\x1a\n".to_vec();
    bad.extend_from_slice(&[7u8; 40]);
    fs::write(src.join("broken.png"), bad).unwrap();
    let labels = tmp.path().join("labels.csv");
    write_labels(&labels, &[("flat.png", "s1", 30.0), ("ok.png", "s2", 31.0), ("broken.png", "s3", 32.0)]);
    let m = scan_source(&src, &labels).unwrap();
    let report = convert_all(&m, &SlicePolicy::default(), &tmp.path().join("out")).unwrap();
    assert_eq!(report.failures.len(), 1);
    assert_eq!(report.failures[0].source_path, PathBuf::from("broken.png"));
    assert_eq!(report.warnings.len(), 1);
    let conv = report.manifest.unwrap();
    assert_eq!(conv.len(), 2);
    let flat = conv.records.iter().find(|r| r.source_path == Path::new("flat.png")).unwrap();
    assert!(converted_bytes(flat).iter().all(|&b| b == 0));
}

#[test]
fn dicom_rescale_and_frames() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("scan.dcm");
    let (rows, cols) = (6u16, 8u16);
    let pixels: Vec<u16> = (0..rows as usize * cols as usize).map(|i| 100 + i as u16).collect();
    write_dicom(&path, rows, cols, 1, &pixels, 2.0, -50.0);
    assert_eq!(SourceFormat::detect(&path).unwrap(), Some(SourceFormat::Dicom));
    let vol = read_volume(&path, SourceFormat::Dicom).unwrap();
    assert_eq!((vol.depth, vol.rows, vol.cols, vol.channels), (1, 6, 8, 1));
    assert_eq!(vol.at(0, 0, 0, 0), 2.0 * 100.0 - 50.0);
    assert_eq!(vol.at(0, 5, 7, 0), 2.0 * 147.0 - 50.0);

    let multi = tmp.path().join("multi.dcm");
    let frames: Vec<u16> = (0..4 * 16).map(|i| (i / 16 * 10 + i % 16) as u16).collect();
    write_dicom(&multi, 4, 4, 4, &frames, 1.0, 0.0);
    let vol = read_volume(&multi, SourceFormat::Dicom).unwrap();
    assert_eq!((vol.depth, vol.rows, vol.cols), (4, 4, 4));
    assert_eq!(vol.at(3, 0, 1, 0), 31.0);

    let m = Manifest::new(tmp.path(), vec![record("multi.dcm", SourceFormat::Dicom)]).unwrap();
    let all = SlicePolicy {
        mode: SliceMode::All,
        k: 1,
        axis: Axis::Axial,
    };
    let report = convert_all(&m, &all, &tmp.path().join("out")).unwrap();
    assert_eq!(report.converted(), 4);
}

#[test]
fn minc1_every_k_slices() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("vol.mnc");
    let dims = [60, 10, 12];
    let n = dims.iter().product::<usize>();
    let voxels: Vec<i16> = (0..n).map(|i| ((i % 120) as i16) * 10 - 600).collect();
    let smin: Vec<f64> = (0..60).map(|z| z as f64).collect();
    let smax: Vec<f64> = (0..60).map(|z| 100.0 + z as f64).collect();
    write_minc1(&path, dims, &voxels, &smin, &smax);
    assert_eq!(SourceFormat::detect(&path).unwrap(), Some(SourceFormat::Minc));

    let vol = read_volume(&path, SourceFormat::Minc).unwrap();
    assert_eq!((vol.depth, vol.rows, vol.cols), (60, 10, 12));
    // real = (v - vmin) / (vmax - vmin) * (smax - smin) + smin
    let z = 7;
    let v = voxels[z * 120 + 3 * 12 + 5] as f64;
    let expected = (v + 1000.0) / 2000.0 * 100.0 + z as f64;
    assert!((vol.at(z, 3, 5, 0) - expected).abs() < 1e-9);

    let m = Manifest::new(tmp.path(), vec![record("vol.mnc", SourceFormat::Minc)]).unwrap();
    let policy = SlicePolicy {
        mode: SliceMode::EveryK,
        k: 30,
        axis: Axis::Axial,
    };
    let conv = convert_all(&m, &policy, &tmp.path().join("out")).unwrap().manifest.unwrap();
    let ids: Vec<String> = conv.records.iter().map(|r| r.record_id()).collect();
    assert_eq!(ids, vec!["vol.mnc#axial:0", "vol.mnc#axial:30"]);
    assert!(conv.records.iter().all(|r| r.age_years == 40.0 && r.subject_id == "s1"));
    for r in &conv.records {
        let t = load_converted(r.converted_path.as_ref().unwrap()).unwrap();
        assert_eq!(t.data().len(), TENSOR_LEN);
    }
}

#[cfg(feature = "minc2")]
#[test]
fn minc2_axis_order() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("vol2.mnc");
    // stored x-fastest as (zspace, xspace, yspace): z=5, x=4, y=3
    let (z, x, y) = (5, 4, 3);
    let value = |zi: usize, yi: usize, xi: usize| (zi * 100 + yi * 10 + xi) as f32;
    let mut voxels = Vec::new();
    for zi in 0..z {
        for xi in 0..x {
            for yi in 0..y {
                voxels.push(value(zi, yi, xi));
            }
        }
    }
    write_minc2(&path, [z, x, y], "zspace,xspace,yspace", &voxels);
    assert_eq!(SourceFormat::detect(&path).unwrap(), Some(SourceFormat::Minc));
    let vol = read_volume(&path, SourceFormat::Minc).unwrap();
    assert_eq!((vol.depth, vol.rows, vol.cols), (5, 3, 4));
    assert_eq!(vol.at(2, 1, 3, 0), value(2, 1, 3) as f64);

    let m = Manifest::new(tmp.path(), vec![record("vol2.mnc", SourceFormat::Minc)]).unwrap();
    let policy = SlicePolicy {
        mode: SliceMode::Middle,
        k: 1,
        axis: Axis::Coronal,
    };
    let conv = convert_all(&m, &policy, &tmp.path().join("out")).unwrap().manifest.unwrap();
    assert_eq!(conv.records[0].record_id(), "vol2.mnc#coronal:1");
}

#[test]
fn record_count_matches_policy() {
    let tmp = tempfile::tempdir().unwrap();
    let mut records = Vec::new();
    for (name, depth) in [("a.mnc", 9usize), ("b.mnc", 4)] {
        let dims = [depth, 4, 4];
        let voxels: Vec<i16> = (0..depth * 16).map(|i| i as i16).collect();
        write_minc1(&tmp.path().join(name), dims, &voxels, &vec![0.0; depth], &vec![1.0; depth]);
        records.push(record(name, SourceFormat::Minc));
    }
    write_png_gray(&tmp.path().join("c.png"), 10, 10, |x, y| (x * y) as u8);
    records.push(record("c.png", SourceFormat::Png));
    let m = Manifest::new(tmp.path(), records).unwrap();
    let policy = SlicePolicy {
        mode: SliceMode::EveryK,
        k: 3,
        axis: Axis::Axial,
    };
    // 9 → 3 slices, 4 → 2 slices, planar PNG → 1
    let report = convert_all(&m, &policy, &tmp.path().join("out")).unwrap();
    assert_eq!(report.converted(), 3 + 2 + 1);
}
