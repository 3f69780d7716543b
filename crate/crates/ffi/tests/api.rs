use std::ffi::CString;
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use nco::*;

#[test]
fn solve_round_trip() {
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(nco_model_new(NcoProblem::Cvrp, 16, 1, 4, 16, 3, &mut model), NcoStatus::Ok);
        let mut inst = ptr::null_mut();
        assert_eq!(nco_instance_generate_cvrp(25, 30, 4, &mut inst), NcoStatus::Ok);
        assert_eq!(nco_instance_size(inst), 25);
        let mut init = ptr::null_mut();
        assert_eq!(nco_random_insertion(inst, 4, &mut init), NcoStatus::Ok);
        let mut sol = ptr::null_mut();
        assert_eq!(nco_solve(model, inst, 10, 25, 4, &mut sol), NcoStatus::Ok);
        assert!(nco_solution_objective(sol) <= nco_solution_objective(init));
        let n = nco_solution_len(sol);
        assert_eq!(n, 25);
        let mut order = vec![0usize; n];
        let mut flags = vec![0u8; n];
        assert_eq!(nco_solution_copy(sol, order.as_mut_ptr(), flags.as_mut_ptr(), n), NcoStatus::Ok);
        assert_eq!(flags[0], 1);
        order.sort_unstable();
        assert_eq!(order, (0..25).collect::<Vec<_>>());
        assert_eq!(nco_solution_copy(sol, order.as_mut_ptr(), ptr::null_mut(), 3), NcoStatus::InvalidArgument);
        nco_solution_free(sol);
        nco_solution_free(init);
        nco_instance_free(inst);
        nco_model_free(model);
    }
}

#[test]
fn errors_are_reported() {
    unsafe {
        let mut inst = ptr::null_mut();
        assert_eq!(nco_instance_generate_tsp(2, 0, &mut inst), NcoStatus::InvalidArgument);
        assert_eq!(nco_instance_generate_tsp(10, 0, ptr::null_mut()), NcoStatus::NullPointer);
        let p = CString::new("/nonexistent/x.tsp").unwrap();
        assert_eq!(nco_instance_load(p.as_ptr(), &mut inst), NcoStatus::Io);
        let mut buf = vec![0 as std::ffi::c_char; 128];
        let len = nco_last_error(buf.as_mut_ptr(), buf.len());
        assert!(len > 0);
        let mut model = ptr::null_mut();
        assert_eq!(nco_model_new(NcoProblem::Tsp, 30, 1, 4, 16, 0, &mut model), NcoStatus::InvalidArgument);
        let mut m = ptr::null_mut();
        assert_eq!(nco_model_new(NcoProblem::Tsp, 16, 1, 4, 16, 0, &mut m), NcoStatus::Ok);
        let mut c = ptr::null_mut();
        assert_eq!(nco_instance_generate_cvrp(10, 20, 0, &mut c), NcoStatus::Ok);
        let mut sol = ptr::null_mut();
        assert_eq!(nco_solve(m, c, 1, 10, 0, &mut sol), NcoStatus::Model);
        assert!(nco_solution_objective(ptr::null()).is_nan());
        nco_instance_free(c);
        nco_model_free(m);
    }
}

#[test]
fn library_instance_uses_file_units() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sq.tsp");
    std::fs::write(
        &path,
        "NAME : sq\nTYPE : TSP\nDIMENSION : 4\nEDGE_WEIGHT_TYPE : EUC_2D\nNODE_COORD_SECTION\n1 0 0\n2 100 0\n3 100 100\n4 0 100\nEOF\n",
    )
    .unwrap();
    let p = CString::new(path.to_str().unwrap()).unwrap();
    unsafe {
        let mut inst = ptr::null_mut();
        assert_eq!(nco_instance_load(p.as_ptr(), &mut inst), NcoStatus::Ok);
        let mut sol = ptr::null_mut();
        assert_eq!(nco_random_insertion(inst, 0, &mut sol), NcoStatus::Ok);
        assert_eq!(nco_solution_objective(sol), 400.0);
        nco_solution_free(sol);
        nco_instance_free(inst);
    }
}

fn target_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_header() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let lib = target_dir().join("libnco.a");
    if Command::new("cc").arg("--version").output().is_err() || !lib.exists() {
        eprintln!("skipping: no C compiler or static library at {}", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(root.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(root.join("include"))
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{out:?}");
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("n=30 "), "{text}");
    assert!(text.trim_end().ends_with("missing=3"), "{text}");
}
