mod support;

use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn capacity_fifo_and_pool_disjointness(s in support::scenario()) {
        support::check_queue_laws(&s)?;
    }
}
