#![allow(dead_code)]

mod footprint {
    include!("../examples/footprint.rs");
    #[test]
    fn runs() {
        run_example().unwrap();
    }
}

mod estimate {
    include!("../examples/estimate.rs");
    #[test]
    fn runs() {
        run_example().unwrap();
    }
}

mod plan {
    include!("../examples/plan.rs");
    #[test]
    fn runs() {
        run_example().unwrap();
    }
}

mod explain {
    include!("../examples/explain.rs");
    #[test]
    fn runs() {
        run_example().unwrap();
    }
}

mod overlap {
    include!("../examples/overlap.rs");
    #[test]
    fn runs() {
        run_example().unwrap();
    }
}

mod mempool {
    include!("../examples/mempool.rs");
    #[test]
    fn runs() {
        run_example().unwrap();
    }
}

mod bandwidth_profile {
    include!("../examples/bandwidth_profile.rs");
    #[test]
    fn runs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("profile.csv");
        run_example(path.to_str()).unwrap();
        let written = longseq_plan::BandwidthProfile::load_csv(&path).unwrap();
        assert_eq!(written, longseq_plan::BandwidthProfile::synthetic_a100());
    }
}

mod config {
    include!("../examples/config.rs");
    #[test]
    fn runs() {
        run_example().unwrap();
    }
}
