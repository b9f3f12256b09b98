use valueshift::io::{self, SynthSpec, TrajectoryFormat};
use valueshift::labeling::build_dataset;
use valueshift::regress::{fit_sigma_model, Kernel, RegressorSpec};

fn corpus() -> io::SyntheticCorpus {
    io::generate_synthetic(&SynthSpec { num_networks: 6, num_segments: 4, noise_sd: 0.01, seed: 9, ..Default::default() })
        .unwrap()
}

#[test]
fn trajectories_round_trip_through_files() {
    let nets = corpus().networks;
    let tmp = tempfile::tempdir().unwrap();
    for name in ["t.csv", "t.json"] {
        let path = tmp.path().join(name);
        let format = TrajectoryFormat::from_path(&path);
        io::save_trajectories(&path, format, &nets).unwrap();
        let back = io::load_trajectories(&path, format, false).unwrap();
        assert_eq!(back, nets, "{name}");
    }
}

#[test]
fn dataset_model_and_truth_round_trip() {
    let c = corpus();
    let d = build_dataset(&c.networks, 0.4, 0.01).unwrap();
    let back = io::parse_dataset_csv(&io::dataset_csv(&d).unwrap()).unwrap();
    assert_eq!(back, d);

    let model = fit_sigma_model(&d, &RegressorSpec::svr(Kernel::Rbf { gamma: 0.5 }, 10.0), None, 0).unwrap();
    let m2 = io::parse_model_json(&io::model_json(&model).unwrap()).unwrap();
    for t in &d.tuples {
        let f = t.features();
        assert_eq!(model.predict(&f).unwrap().to_bits(), m2.predict(&f).unwrap().to_bits());
    }

    let truth = io::parse_ground_truth_csv(&io::ground_truth_csv(&c.truth).unwrap()).unwrap();
    assert_eq!(truth, c.truth);
}

#[test]
fn csv_and_json_describe_the_same_networks() {
    let nets = corpus().networks;
    let from_csv: Vec<_> = io::parse_trajectory_csv(&io::trajectory_csv(&nets).unwrap())
        .unwrap()
        .into_iter()
        .map(|s| s.into_dense().unwrap())
        .collect();
    let from_json: Vec<_> = io::parse_networks_json(&io::networks_json(&nets).unwrap())
        .unwrap()
        .into_iter()
        .map(|s| s.into_dense().unwrap())
        .collect();
    assert_eq!(from_csv, from_json);
}
