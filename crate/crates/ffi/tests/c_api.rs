use std::ffi::{CStr, CString};
use std::ptr;

use neatnet::service::SceneBody;
use neatnet::synth::{generate_dataset, UserMix};
use neatnet::vae::{self, Model, Preset};
use neatnet_ffi::*;

fn trained(dir: &std::path::Path) -> (Model, std::path::PathBuf) {
    let ds = generate_dataset(6, &UserMix::default(), 2).unwrap().restrict_templates(&["dining"]);
    let (m, mut t) = Preset::Real.configs();
    t.epochs = 5;
    let out = vae::train(&ds, &m, &t, Some(&neatnet::semantics::EmbeddingTable::bundled())).unwrap();
    let path = dir.join("model.json");
    out.model.save(&path).unwrap();
    (out.model, path)
}

fn last_error() -> String {
    let p = nn_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn load(path: &std::path::Path) -> *mut NnModel {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { nn_model_load(c.as_ptr(), &mut h) }, NnStatus::Ok);
    assert!(!h.is_null());
    h
}

#[test]
fn load_reports_missing_and_null_arguments() {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { nn_model_load(ptr::null(), &mut h) }, NnStatus::NullPointer);
    let missing = CString::new("/nonexistent/model.json").unwrap();
    assert_eq!(unsafe { nn_model_load(missing.as_ptr(), &mut h) }, NnStatus::Io);
    assert!(h.is_null());
    assert!(last_error().contains("nonexistent"));

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.json");
    std::fs::write(&junk, "{\"format\": 1}").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { nn_model_load(junk.as_ptr(), &mut h) }, NnStatus::BadModel);
    unsafe { nn_model_free(ptr::null_mut()) };
}

#[test]
fn infer_and_decode_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (model, path) = trained(dir.path());
    let h = load(&path);

    let mut dim = 0usize;
    assert_eq!(unsafe { nn_model_latent_dim(h, &mut dim) }, NnStatus::Ok);
    assert_eq!(dim, model.latent_dim());
    let dining = CString::new("dining").unwrap();
    let mut n = 0usize;
    assert_eq!(unsafe { nn_model_template_len(h, dining.as_ptr(), &mut n) }, NnStatus::Ok);
    assert_eq!(n, 7);
    let bogus = CString::new("kitchen").unwrap();
    assert_eq!(unsafe { nn_model_template_len(h, bogus.as_ptr(), &mut n) }, NnStatus::UnknownTemplate);

    let user = generate_dataset(1, &UserMix::default(), 9).unwrap().users.remove(0);
    let scene = user.scene("dining").unwrap().clone();
    let body = serde_json::to_string(&vec![SceneBody::from_scene(&scene)]).unwrap();
    let body = CString::new(body).unwrap();
    let (mut mu, mut lv) = (vec![0.0; dim], vec![0.0; dim]);
    assert_eq!(
        unsafe { nn_model_infer(h, body.as_ptr(), mu.as_mut_ptr(), lv.as_mut_ptr(), dim) },
        NnStatus::Ok
    );
    let post = model.posterior(std::slice::from_ref(&scene)).unwrap();
    assert_eq!(mu, post.mu);
    assert_eq!(lv, post.logvar);

    let mut out = vec![0.0; 2 * n];
    let mut written = 0usize;
    assert_eq!(
        unsafe { nn_model_decode(h, dining.as_ptr(), mu.as_ptr(), dim, out.as_mut_ptr(), out.len(), &mut written) },
        NnStatus::Ok
    );
    assert_eq!(written, 2 * n);
    let decoded = model.decode(&mu, "dining").unwrap();
    let flat: Vec<f64> = decoded.objects.iter().flat_map(|o| o.position.clone()).collect();
    assert_eq!(out, flat);

    assert_eq!(
        unsafe { nn_model_decode(h, dining.as_ptr(), mu.as_ptr(), dim, out.as_mut_ptr(), 3, &mut written) },
        NnStatus::BufferTooSmall
    );
    assert_eq!(
        unsafe { nn_model_decode(h, dining.as_ptr(), mu.as_ptr(), dim + 1, out.as_mut_ptr(), out.len(), &mut written) },
        NnStatus::Mismatch
    );
    unsafe { nn_model_free(h) };
}

#[test]
fn predict_json_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (model, path) = trained(dir.path());
    let h = load(&path);
    let req = CString::new(r#"{"user_mu": [0.0, 0.0], "template": "dining", "mask": ["fork"]}"#).unwrap();
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { nn_model_predict_json(h, req.as_ptr(), &mut s) }, NnStatus::Ok);
    let text = unsafe { CStr::from_ptr(s) }.to_str().unwrap().to_owned();
    unsafe { nn_string_free(s) };
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let positions = v["positions"].as_array().unwrap();
    assert_eq!(positions.len(), 1);
    assert_eq!(positions[0]["name"], "fork");
    let want = model.decode(&[0.0, 0.0], "dining").unwrap();
    let got: Vec<f64> = serde_json::from_value(positions[0]["position"].clone()).unwrap();
    assert_eq!(got, want.position_of("fork").unwrap());

    let bad = CString::new("{not json").unwrap();
    assert_eq!(unsafe { nn_model_predict_json(h, bad.as_ptr(), &mut s) }, NnStatus::BadInput);
    assert!(s.is_null());
    assert!(last_error().contains("malformed"));
    unsafe { nn_model_free(h) };
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(nn_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}
