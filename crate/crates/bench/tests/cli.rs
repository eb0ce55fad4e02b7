use std::process::Command;

fn bench() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bench"))
}

#[test]
fn dumps_the_size_class_table() {
    let out = bench().arg("--dump-size-classes").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines.len(), 29);
    assert_eq!(lines[16], "15,256,32768,256,127,0");
}

#[test]
fn runs_a_workload_and_appends_csv() {
    let dir = std::env::temp_dir().join(format!("bench-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let csv = dir.join("runs.csv");
    let pool = dir.join("pool.csv");
    let _ = std::fs::remove_file(&csv);
    for _ in 0..2 {
        let st = bench()
            .args(["--workload", "shbench_like", "--threads", "2", "--rounds", "3", "--objects", "100"])
            .args(["--provider", "sim", "--ablate", "lazy_reclaim", "--pool-width", "2"])
            .arg("--csv")
            .arg(&csv)
            .arg("--pool-stats")
            .arg(&pool)
            .output()
            .unwrap();
        assert!(st.status.success());
        assert!(String::from_utf8(st.stdout).unwrap().starts_with("workload,"));
    }
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines.len(), 3, "one header, two rows");
    assert!(lines[0].starts_with("workload,provider,threads"));
    assert!(lines[1].starts_with("shbench_like,sim,2,3,100,1-8,42,lazy_reclaim,2,"));
    let pool_text = std::fs::read_to_string(&pool).unwrap();
    assert_eq!(pool_text.lines().count(), 1 + 6 * 2);
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn rejects_bad_arguments() {
    let out = bench().args(["--workload", "nope"]).output().unwrap();
    assert!(!out.status.success());
    let out = bench().args(["--ablate", "turbo"]).output().unwrap();
    assert!(!out.status.success());
    let out = bench().args(["--workload", "falseshare_passive", "--threads", "1"]).output().unwrap();
    assert!(!out.status.success());
}
