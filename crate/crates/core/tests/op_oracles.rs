mod oracles;

const TOL: f64 = 1e-5;

macro_rules! oracle_test {
    ($name:ident, $driver:expr) => {
        #[test]
        fn $name() {
            let err = $driver;
            assert!(err <= TOL, "max abs deviation {err:e}");
        }
    };
}

oracle_test!(dyn_conv2d_matches_loops, oracles::conv_max_err(false));
oracle_test!(depthwise_conv2d_matches_loops, oracles::conv_max_err(true));
oracle_test!(bilinear_resize_matches_loops, oracles::bilinear_max_err());
oracle_test!(softmax_matches_loops, oracles::softmax_max_err());
oracle_test!(cosine_similarity_matches_loops, oracles::cosine_max_err());
oracle_test!(
    contrastive_loss_matches_loops,
    oracles::contrastive_max_err()
);
oracle_test!(t2p_loss_matches_loops, oracles::t2p_loss_max_err());
oracle_test!(
    cross_entropy_and_aux_loss_match_loops,
    oracles::ce_max_err()
);
oracle_test!(miou_matches_set_counting, oracles::miou_max_err());
