use std::fs;

use fragshuffle::accounting::{self, AccountingMode, AmplificationQuery, FragmentPlan};
use fragshuffle::data;
use fragshuffle::experiment::{
    run_experiment, DatasetSource, ExperimentConfig, Mechanism, RowSpec, SimulationMode, RESULTS_SCHEMA,
};

fn row(mechanism: Mechanism, central: Option<f64>, local: Option<f64>, tau: Option<u32>) -> RowSpec {
    RowSpec {
        mechanism,
        epsilon_central: central,
        epsilon_local: local,
        epsilon_fragment: None,
        tau,
        delta: 1e-6,
        accounting: AccountingMode::BinaryExact,
    }
}

fn image_config() -> ExperimentConfig {
    ExperimentConfig {
        seed: 5,
        trials: 2,
        topk: 5,
        instances: 0,
        simulation: SimulationMode::Aggregate,
        clamp: false,
        out_dir: None,
        dataset: DatasetSource::SyntheticImage {
            width: 16,
            height: 16,
            scale: 4.0,
        },
        rows: vec![
            row(Mechanism::GaussianBaseline, Some(f64::INFINITY), None, None),
            row(Mechanism::AttrFrag, Some(1.0), None, None),
            row(Mechanism::AttrAndReportFrag, Some(1.0), None, Some(4)),
            row(Mechanism::SampledAttr, None, Some(6.0), None),
            row(Mechanism::AttrFrag, Some(1e-4), None, None),
        ],
    }
}

fn read_rows(dir: &std::path::Path) -> Vec<csv::StringRecord> {
    let text = fs::read_to_string(dir.join("results.csv")).unwrap();
    let (first, body) = text.split_once('\n').unwrap();
    assert_eq!(first, RESULTS_SCHEMA);
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    rdr.records().map(|r| r.unwrap()).collect()
}

#[test]
fn artifacts_and_infeasible_rows() {
    let dir = tempfile::tempdir().unwrap();
    let rows = run_experiment(&image_config(), dir.path(), Some(2)).unwrap();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[0].rmse.unwrap().0, 0.0);
    assert!(rows[4].infeasible.is_some());
    assert!(rows[1].rmse.unwrap().1.is_some(), "two trials give a std");
    for name in [
        "timings.csv",
        "run-manifest.toml",
        "truth.pgm",
        "recon_0.pgm",
        "recon_3.pgm",
    ] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    assert!(!dir.path().join("recon_4.pgm").exists());
    let recon = data::read_pgm(&dir.path().join("recon_0.pgm")).unwrap();
    let truth = data::read_pgm(&dir.path().join("truth.pgm")).unwrap();
    assert_eq!(recon, truth);
    let manifest = fs::read_to_string(dir.path().join("run-manifest.toml")).unwrap();
    assert!(manifest.contains("synthetic_image"));
    let records = read_rows(dir.path());
    assert_eq!(records[4].get(3), Some("infeasible"));
}

#[test]
fn emitted_central_epsilons_are_rederivable() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&image_config(), dir.path(), Some(1)).unwrap();
    let mut rdr = {
        let text = fs::read_to_string(dir.path().join("results.csv")).unwrap();
        let body = text.split_once('\n').unwrap().1.to_string();
        csv::Reader::from_reader(std::io::Cursor::new(body))
    };
    let header = rdr.headers().unwrap().clone();
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let num = |r: &csv::StringRecord, name: &str| r[col(name)].parse::<f64>().ok();
    let mut audited = 0;
    for rec in rdr.records() {
        let r = rec.unwrap();
        if &r[col("status")] != "ok" {
            continue;
        }
        let n: u64 = r[col("n")].parse().unwrap();
        let delta = num(&r, "delta").unwrap();
        let eps_c = num(&r, "epsilon_c");
        let l_inf = num(&r, "epsilon_l_inf").unwrap();
        let l1 = num(&r, "epsilon_l1").unwrap();
        assert!(l1 <= l_inf);
        match &r[col("mechanism")] {
            "attr_frag" => {
                let q = AmplificationQuery::new(l_inf, n, delta).unwrap();
                assert_eq!(eps_c, Some(accounting::amplify_binary_exact(&q).unwrap().epsilon));
                audited += 1;
            }
            "attr_and_report_frag" => {
                let plan = FragmentPlan::all_exposed(
                    r[col("tau")].parse().unwrap(),
                    num(&r, "epsilon_b").unwrap(),
                    num(&r, "epsilon_f").unwrap(),
                )
                .unwrap();
                let g = accounting::report_frag_central_with(&plan, n, delta, AccountingMode::BinaryExact).unwrap();
                assert_eq!(eps_c, Some(g.epsilon));
                assert_eq!(l_inf, accounting::report_frag_local(&plan).unwrap().epsilon);
                audited += 1;
            }
            _ => {}
        }
    }
    assert_eq!(audited, 2);
}

#[test]
fn thread_count_does_not_change_results() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = image_config();
    run_experiment(&cfg, a.path(), Some(1)).unwrap();
    run_experiment(&cfg, b.path(), Some(4)).unwrap();
    for name in ["results.csv", "recon_1.pgm", "recon_2.pgm"] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn csv_and_powerlaw_sources() {
    let dir = tempfile::tempdir().unwrap();
    let counts_path = dir.path().join("counts.csv");
    data::write_counts_csv(&[500, 300, 150, 50], &counts_path).unwrap();
    let cfg_path = dir.path().join("exp.toml");
    fs::write(
        &cfg_path,
        r#"
        seed = 1
        topk = 2
        simulation = "per_report"
        [dataset]
        kind = "csv"
        path = "counts.csv"
        [[rows]]
        mechanism = "attr_frag"
        epsilon_local = 4.0
        delta = 1e-6
        "#,
    )
    .unwrap();
    let cfg = ExperimentConfig::from_file(&cfg_path).unwrap();
    let out = dir.path().join("out");
    let rows = run_experiment(&cfg, &out, None).unwrap();
    assert_eq!(rows[0].n, 1000);
    assert_eq!(rows[0].topk_recall.unwrap().0, 1.0);
    assert!(!out.join("recon_0.pgm").exists());

    let mut pl = cfg.clone();
    pl.simulation = SimulationMode::Aggregate;
    pl.dataset = DatasetSource::Powerlaw {
        domain_size: 5000,
        total_n: 1_000_000,
        exponent: None,
        heavy_hitters: None,
    };
    pl.topk = 20;
    pl.rows = vec![row(Mechanism::AttrFrag, None, Some(8.0), None)];
    let rows = run_experiment(&pl, &dir.path().join("pl"), None).unwrap();
    assert_eq!(rows[0].n, 1_000_000);
    assert!(rows[0].topk_recall.unwrap().0 >= 0.9);
}
