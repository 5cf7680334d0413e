use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use aergia_core::config::ExperimentConfig;
use aergia_core::scheduler::calc_op;
use aergia_core::sim::run_experiment;
use aergia_ffi::*;

const SMALL: &str = "rounds = 3\nnum_clients = 6\nclients_per_round = 3\nlocal_updates = 6\n";

fn last_error() -> String {
    let p = aergia_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn config(text: &str) -> Result<*mut AergiaConfig, AergiaStatus> {
    let text = CString::new(text).unwrap();
    let mut out = ptr::null_mut();
    match unsafe { aergia_config_from_toml(text.as_ptr(), &mut out) } {
        AergiaStatus::Ok => Ok(out),
        s => Err(s),
    }
}

#[test]
fn calc_op_matches_core() {
    let mut p = AergiaOffloadPoint { ct: 0.0, d: 0 };
    assert_eq!(unsafe { aergia_calc_op(2.0, 3.0, 5.0, 10, 10, &mut p) }, AergiaStatus::Ok);
    let want = calc_op(2.0, 3.0, 5.0, 10, 10).unwrap();
    assert_eq!((p.ct, p.d), (want.ct, want.d));
    assert!(aergia_last_error().is_null());

    assert_eq!(unsafe { aergia_calc_op(0.0, 1.0, 1.0, 1, 1, &mut p) }, AergiaStatus::InvalidArgument);
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { aergia_calc_op(1.0, 1.0, 1.0, 1, 1, ptr::null_mut()) }, AergiaStatus::NullPointer);
    assert!(last_error().contains("out"));
}

#[test]
fn config_status_codes() {
    assert_eq!(config("rounds = -1").unwrap_err(), AergiaStatus::InvalidArgument);
    assert!(last_error().contains("rounds"));
    assert_eq!(config("num_clients = 2\nclients_per_round = 5").unwrap_err(), AergiaStatus::Validation);
    assert!(last_error().contains("clients_per_round"));
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { aergia_config_from_toml(ptr::null(), &mut out) }, AergiaStatus::NullPointer);
    let bad = [0xffu8, 0];
    assert_eq!(unsafe { aergia_config_from_toml(bad.as_ptr().cast(), &mut out) }, AergiaStatus::InvalidArgument);
    assert!(out.is_null());
}

#[test]
fn run_results_match_the_library() {
    let cfg = config(SMALL).unwrap();
    let mut run = ptr::null_mut();
    assert_eq!(unsafe { aergia_run(cfg, &mut run) }, AergiaStatus::Ok);
    let want = run_experiment(&ExperimentConfig::from_toml_str(SMALL).unwrap()).unwrap();

    let mut count = 0;
    assert_eq!(unsafe { aergia_run_result_count(run, &mut count) }, AergiaStatus::Ok);
    assert_eq!(count, want.len());
    for (i, w) in want.iter().enumerate() {
        let (mut label, mut seed) = (ptr::null(), 0u64);
        assert_eq!(unsafe { aergia_run_result_info(run, i, &mut label, &mut seed) }, AergiaStatus::Ok);
        assert_eq!(unsafe { CStr::from_ptr(label) }.to_str().unwrap(), w.label);
        assert_eq!(seed, w.seed);

        let mut s = std::mem::MaybeUninit::<AergiaSummary>::uninit();
        assert_eq!(unsafe { aergia_run_summary(run, i, s.as_mut_ptr()) }, AergiaStatus::Ok);
        let s = unsafe { s.assume_init() };
        assert_eq!(s.total_time, w.summary.total_time);
        assert_eq!(s.final_accuracy, w.summary.final_accuracy);
        assert_eq!(s.rounds, 3);

        for (r, t) in w.traces.iter().enumerate() {
            let mut rec = std::mem::MaybeUninit::<AergiaRoundRecord>::uninit();
            assert_eq!(unsafe { aergia_run_round(run, i, r, rec.as_mut_ptr()) }, AergiaStatus::Ok);
            let rec = unsafe { rec.assume_init() };
            assert_eq!((rec.round, rec.duration, rec.accuracy), (t.round, t.duration, t.accuracy));
            assert_eq!(rec.num_selected, t.selected.len());
            assert_eq!(rec.num_offloads, t.num_offloads());
        }
    }
    let mut rec = std::mem::MaybeUninit::<AergiaRoundRecord>::uninit();
    assert_eq!(unsafe { aergia_run_round(run, 0, 3, rec.as_mut_ptr()) }, AergiaStatus::InvalidArgument);
    assert_eq!(unsafe { aergia_run_round(run, count, 0, rec.as_mut_ptr()) }, AergiaStatus::InvalidArgument);
    unsafe {
        aergia_run_free(run);
        aergia_config_free(cfg);
        aergia_run_free(ptr::null_mut());
        aergia_config_free(ptr::null_mut());
    }
}

#[test]
fn oracle_round_trip() {
    let mut o = ptr::null_mut();
    assert_eq!(unsafe { aergia_oracle_new(0, &mut o) }, AergiaStatus::InvalidArgument);
    assert_eq!(unsafe { aergia_oracle_new(3, &mut o) }, AergiaStatus::Ok);
    let rows: [[u64; 3]; 3] = [[5, 0, 0], [0, 7, 0], [1, 1, 0]];
    // Submit out of id order; the matrix comes back ascending by id.
    for (id, c) in [(9u32, rows[2]), (2, rows[0]), (4, rows[1])] {
        assert_eq!(unsafe { aergia_oracle_submit(o, id, c.as_ptr(), 3) }, AergiaStatus::Ok);
    }
    assert_eq!(unsafe { aergia_oracle_submit(o, 2, rows[0].as_ptr(), 3) }, AergiaStatus::InvalidArgument);
    assert_eq!(unsafe { aergia_oracle_submit(o, 7, rows[0].as_ptr(), 2) }, AergiaStatus::InvalidArgument);
    assert_eq!(unsafe { aergia_oracle_submit(o, 7, ptr::null(), 3) }, AergiaStatus::NullPointer);

    let mut n = 0;
    assert_eq!(unsafe { aergia_oracle_compute(o, ptr::null_mut(), 0, &mut n) }, AergiaStatus::Ok);
    assert_eq!(n, 3);
    let mut small = [0.0; 4];
    assert_eq!(unsafe { aergia_oracle_compute(o, small.as_mut_ptr(), 4, &mut n) }, AergiaStatus::InvalidArgument);
    let mut m = [f64::NAN; 9];
    assert_eq!(unsafe { aergia_oracle_compute(o, m.as_mut_ptr(), 9, &mut n) }, AergiaStatus::Ok);
    assert_eq!(m, [0.0, 2.0, 1.0, 2.0, 0.0, 1.0, 1.0, 1.0, 0.0]);
    unsafe { aergia_oracle_free(o) };
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(aergia_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

fn target_dir() -> PathBuf {
    // <target>/<profile>/deps/<test binary>
    std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let lib_dir = target_dir();
    assert!(lib_dir.join("libaergia_ffi.a").exists(), "static library missing in {}", lib_dir.display());
    let tmp = tempfile::tempdir().unwrap();
    let exe = tmp.path().join("smoke");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let build = Command::new(&cc)
        .args(["-std=c11", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(root.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(root.join("include"))
        .arg(lib_dir.join("libaergia_ffi.a"))
        .args(["-lpthread", "-ldl", "-lm"])
        .output()
        .unwrap();
    assert!(build.status.success(), "{}", String::from_utf8_lossy(&build.stderr));
    let run = Command::new(&exe).output().unwrap();
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(run.status.success(), "{stdout}\n{}", String::from_utf8_lossy(&run.stderr));
    assert!(stdout.contains("fedavg seed=1 rounds=2"), "{stdout}");
    assert!(stdout.contains("aergia seed=1 rounds=2"), "{stdout}");
}
