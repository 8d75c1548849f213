use std::ffi::{CStr, CString};
use std::ptr;

use dcqe_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(dcqe_last_error()) }.to_string_lossy().into_owned()
}

fn gradient(h: usize, w: usize) -> Vec<f64> {
    (0..h * w)
        .map(|i| ((i % w) * 7 + (i / w) * 3) as f64 % 256.0 / 255.0)
        .collect()
}

unsafe fn image(h: usize, w: usize, samples: &[f64]) -> *mut DcqeImage {
    let mut img = ptr::null_mut();
    assert_eq!(dcqe_image_new(h, w, 1, samples.as_ptr(), &mut img), DcqeStatus::Ok);
    img
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(dcqe_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn image_round_trip_through_pnm_and_codec() {
    unsafe {
        let samples = gradient(16, 24);
        let img = image(16, 24, &samples);
        let (mut h, mut w, mut c) = (0, 0, 0);
        assert_eq!(dcqe_image_dims(img, &mut h, &mut w, &mut c), DcqeStatus::Ok);
        assert_eq!((h, w, c), (16, 24, 1));

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("g.pgm").to_str().unwrap()).unwrap();
        assert_eq!(dcqe_image_write_pnm(img, path.as_ptr()), DcqeStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(dcqe_image_read_pnm(path.as_ptr(), &mut back), DcqeStatus::Ok);
        let mut psnr = 0.0;
        assert_eq!(dcqe_psnr(img, back, &mut psnr), DcqeStatus::Ok);
        assert!(psnr.is_infinite(), "byte-exact samples survive the file");

        let mut coded = ptr::null_mut();
        assert_eq!(dcqe_codec_round_trip(img, 30, &mut coded), DcqeStatus::Ok);
        assert_eq!(dcqe_psnr(img, coded, &mut psnr), DcqeStatus::Ok);
        assert!(psnr.is_finite() && psnr > 20.0, "{psnr}");
        let mut ssim = 0.0;
        assert_eq!(dcqe_ssim(img, img, &mut ssim), DcqeStatus::Ok);
        assert_eq!(ssim, 1.0);

        let mut buf = vec![0.0; 16 * 24];
        assert_eq!(dcqe_image_samples(back, buf.as_mut_ptr(), buf.len()), DcqeStatus::Ok);
        assert_eq!(buf, samples);
        assert_eq!(dcqe_image_samples(back, buf.as_mut_ptr(), 10), DcqeStatus::BufferTooSmall);

        for p in [img, back, coded] {
            dcqe_image_free(p);
        }
        dcqe_image_free(ptr::null_mut());
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    unsafe {
        let mut img = ptr::null_mut();
        let bad = [2.0];
        assert_eq!(dcqe_image_new(1, 1, 1, bad.as_ptr(), &mut img), DcqeStatus::InvalidArgument);
        assert!(img.is_null());
        assert!(!last_error().is_empty());

        assert_eq!(dcqe_image_new(1, 1, 1, ptr::null(), &mut img), DcqeStatus::NullArgument);
        assert!(last_error().contains("samples"));

        let missing = CString::new("/nonexistent/x.pgm").unwrap();
        assert_eq!(dcqe_image_read_pnm(missing.as_ptr(), &mut img), DcqeStatus::Io);

        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("junk.pgm");
        std::fs::write(&junk, b"P7 nonsense").unwrap();
        let junk = CString::new(junk.to_str().unwrap()).unwrap();
        assert_eq!(dcqe_image_read_pnm(junk.as_ptr(), &mut img), DcqeStatus::Format);

        let a = image(8, 8, &gradient(8, 8));
        let b = image(8, 9, &gradient(8, 9));
        let mut v = 0.0;
        assert_eq!(dcqe_psnr(a, b, &mut v), DcqeStatus::ShapeMismatch);
        let mut out = ptr::null_mut();
        assert_eq!(dcqe_codec_round_trip(a, 0, &mut out), DcqeStatus::InvalidArgument);
        assert!(last_error().contains("quality"));
        assert_eq!(dcqe_psnr(a, a, &mut v), DcqeStatus::Ok);
        assert!(last_error().is_empty());
        dcqe_image_free(a);
        dcqe_image_free(b);

        let mut model = ptr::null_mut();
        assert_eq!(dcqe_model_load(junk.as_ptr(), &mut model), DcqeStatus::Format);
        assert!(model.is_null());
    }
}

#[test]
fn degradation_index_matches_hand_arithmetic() {
    unsafe {
        let mut di = 0.0;
        let series = [30.0, 29.7, 29.4, 29.1, 28.8];
        assert_eq!(dcqe_degradation_index(series.as_ptr(), 5, true, &mut di), DcqeStatus::Ok);
        assert!((di - 1.0).abs() < 1e-12);
        let lower = [0.2, 0.22, 0.25, 0.28, 0.3];
        assert_eq!(dcqe_degradation_index(lower.as_ptr(), 5, false, &mut di), DcqeStatus::Ok);
        assert!((di - 12.5).abs() < 1e-12);
        assert_eq!(
            dcqe_degradation_index(series.as_ptr(), 1, true, &mut di),
            DcqeStatus::InvalidArgument
        );
    }
}

#[test]
fn models_enhance_through_the_boundary() {
    use dcqe::models::{save_checkpoint, Model, ModelParams, ModelSpec};
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("zero.ckpt");
    let spec = ModelSpec::dncnn_with(1, 4, 3);
    save_checkpoint(&path, &Model::new(spec.clone(), ModelParams::zeros(&spec)).unwrap()).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(dcqe_model_load(cpath.as_ptr(), &mut model), DcqeStatus::Ok);
        let img = image(12, 12, &gradient(12, 12));
        let mut out = ptr::null_mut();
        assert_eq!(dcqe_model_enhance(model, img, &mut out), DcqeStatus::Ok);
        let mut psnr = 0.0;
        assert_eq!(dcqe_psnr(img, out, &mut psnr), DcqeStatus::Ok);
        assert!(psnr.is_infinite(), "a zero residual model is the identity");
        let mut drift = -1.0;
        assert_eq!(dcqe_model_drift(model, img, &mut drift), DcqeStatus::Ok);
        assert_eq!(drift, 0.0);

        let rgb = [0.5; 12];
        let mut colour = ptr::null_mut();
        assert_eq!(dcqe_image_new(2, 2, 3, rgb.as_ptr(), &mut colour), DcqeStatus::Ok);
        assert_ne!(dcqe_model_enhance(model, colour, &mut out), DcqeStatus::Ok);

        dcqe_image_free(colour);
        dcqe_image_free(img);
        dcqe_model_free(model);
        dcqe_model_free(ptr::null_mut());
    }
}
