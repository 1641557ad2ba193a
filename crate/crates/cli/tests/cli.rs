use std::process::Command;

const MODEL: &str = r#"{"rates":{"dim":2,"rates":[[-1.0,1.0],[0.5,-0.5]],"edges":[[false,true],[true,false]]},
"emissions":[{"mean":[1.0],"std":[0.25]},{"mean":[2.0],"std":[0.25]}],"pi":[0.5,0.5]}"#;

fn cthmm(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_cthmm")).args(args).output().unwrap()
}

#[test]
fn simulate_learn_decode() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    std::fs::write(p("m.json"), MODEL).unwrap();
    let out = cthmm(&["simulate", "--model", &p("m.json"), "--subjects", "20", "--horizon", "10", "--obs-interval", "0.5", "--out", &p("obs.csv")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = cthmm(&["learn", "--data", &p("obs.csv"), "--model-out", &p("fit.json"), "--init", &p("m.json"), "--method", "expm", "--seed", "7"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = cthmm(&["decode", "--model", &p("fit.json"), "--data", &p("obs.csv"), "--out", &p("traj.csv")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let traj = std::fs::read_to_string(p("traj.csv")).unwrap();
    assert!(traj.starts_with("subject_id,segment,state,dwell"));
}

#[test]
fn path_queries() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.json");
    std::fs::write(&m, MODEL).unwrap();
    let m = m.to_str().unwrap();
    let out = cthmm(&["path-prob", "--model", m, "--path", "1,2", "--t", "2.0", "--one-based"]);
    let p: f64 = String::from_utf8(out.stdout).unwrap().trim().parse().unwrap();
    assert!((p - 2.0 * ((-1.0f64).exp() - (-2.0f64).exp())).abs() < 1e-12);
    let out = cthmm(&["dwell", "--model", m, "--path", "0,1", "--t", "2.0", "--method", "expm"]);
    let d: Vec<f64> = String::from_utf8(out.stdout).unwrap().trim().split(',').map(|x| x.parse().unwrap()).collect();
    assert!((d.iter().sum::<f64>() - 2.0).abs() < 1e-9);
    let out = cthmm(&["path-prob", "--model", m, "--path", "0,0", "--t", "1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn check_mode_exit_codes() {
    let out = cthmm(&["bench", "--experiment", "toy", "--check"]);
    assert_eq!(out.status.code(), Some(2));
    let out = cthmm(&["bench", "--experiment", "decode5", "--runs", "1", "--observations", "200", "--check"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}
